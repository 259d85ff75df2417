//! End-to-end acceptance run: trains the biased toy world, then checks the
//! eleven acceptance criteria and prints one PASS/FAIL line for each.
//! Runs without the libtest harness so the report prints in order.

use std::time::{Duration, Instant};

use cmivld::tensor::softmax_slice;
use cmivld::decoding::{calibrate_logits, DecodeConfig, DecodeResult, Variant};
use cmivld::model::{randn, train_lvlm, LvlmTrainConfig, ModelConfig, TinyLvlmParams};
use cmivld::oracle::{oracle_mask_search, verify_factorization, MaskObjective, SearchOptions};
use cmivld::purifier::{
    extract_mask, top_k_mask, train_purifier, Purifier, PurifierConfig, PurifierParams, PurifierSample,
    PurifierTrainConfig,
};
use cmivld::reference::{mask_removal_gap, purifier_gradcheck};
use cmivld::rng::{derive_seed, Rng};
use cmivld::synthbench::{
    caption_examples, caption_scenes, chair_scores, describe_prompt, generate_corpus, pope_evaluate, pope_questions,
    qa_examples, render_patches, throughput, vocab, CaptionRecord, Catalog, ChairScores, Corpus, CorpusConfig,
    PopeAnswerer, RenderConfig, SceneRecord,
};
use cmivld::tensor::Tensor;
use cmivld::Result;

const HELDOUT_SCENES: usize = 200;

/// A trained model and purifier with their corpus settings and a held-out
/// biased split.
struct World {
    corpus: CorpusConfig,
    catalog: Catalog,
    config: ModelConfig,
    params: TinyLvlmParams,
    purifier: Purifier,
    heldout: Vec<SceneRecord>,
    /// Held-out split with clean captions, for purifier contexts.
    clean: Corpus,
    built_in: Duration,
}

impl World {
    fn build(seed: u64, corpus: CorpusConfig, gamma: f32) -> Result<World> {
        let start = Instant::now();
        let corpus = CorpusConfig {
            seed: derive_seed(seed, "split/train"),
            ..corpus
        };
        let catalog = corpus.catalog()?;
        let render = corpus.render.clone();
        let train = generate_corpus(&corpus)?;
        let mut examples = caption_examples(&train, &catalog, &render)?;
        examples.extend(qa_examples(&train.scenes, &catalog, &render, 1, derive_seed(seed, "qa"))?);
        let config = ModelConfig {
            vocab_size: corpus.vocab_size(),
            n_visual: render.n_visual,
            d_patch: render.d_patch,
            ..ModelConfig::default()
        };
        let hyper = LvlmTrainConfig {
            epochs: 8,
            ..LvlmTrainConfig::default()
        };
        let (params, _) = train_lvlm(&examples, &config, &hyper, &mut Rng::new(derive_seed(seed, "train-model")))?;

        let split = |label: &str, n: usize, bias: f64| {
            generate_corpus(&CorpusConfig {
                seed: derive_seed(seed, &format!("split/{label}")),
                n_scenes: n,
                bias,
                ..corpus.clone()
            })
        };
        let samples: Vec<PurifierSample> = caption_examples(&split("purifier", 2000, 0.0)?, &catalog, &render)?
            .into_iter()
            .map(PurifierSample::from)
            .collect();
        let pc = PurifierConfig::for_model(&config);
        let init = PurifierParams::init(&pc, params.param_count(), &mut Rng::new(derive_seed(seed, "purifier-init")))?;
        let tc = PurifierTrainConfig {
            gamma,
            seed: derive_seed(seed, "purifier"),
            ..PurifierTrainConfig::default()
        };
        let (trained, _) = train_purifier(&params, &config, &pc, &init, &samples, &tc)?;
        let heldout = split("heldout", HELDOUT_SCENES, corpus.bias)?.scenes;
        let clean = split("contexts", HELDOUT_SCENES, 0.0)?;
        Ok(World {
            corpus,
            catalog,
            config,
            params,
            purifier: Purifier {
                config: pc,
                params: trained,
            },
            heldout,
            clean,
            built_in: start.elapsed(),
        })
    }

    fn render(&self) -> &RenderConfig {
        &self.corpus.render
    }

    fn captions(&self, cfg: &DecodeConfig, scenes: &[SceneRecord]) -> Result<(Vec<CaptionRecord>, Vec<DecodeResult>)> {
        caption_scenes(&self.params, &self.config, Some(&self.purifier), &self.catalog, self.render(), scenes, cfg)
    }

    fn chair(&self, variant: Variant, lambda: f32) -> Result<ChairScores> {
        let cfg = DecodeConfig {
            variant,
            lambda,
            gamma: 0.8,
            ..DecodeConfig::default()
        };
        let (captions, _) = self.captions(&cfg, &self.heldout)?;
        chair_scores(&self.heldout, &captions, self.corpus.catalog_size)
    }

    /// `(patches, prompt ++ caption prefix, next token)` for a random step of
    /// each clean held-out caption.
    fn contexts(&self, n: usize, seed: u64) -> Result<Vec<(Tensor, Vec<usize>, usize)>> {
        let mut rng = Rng::new(seed);
        let mut out = Vec::with_capacity(n);
        for (scene, caption) in self.clean.scenes.iter().zip(&self.clean.captions).take(n) {
            let t = rng.below(caption.tokens.len());
            let patches = render_patches(&self.catalog, self.render(), scene)?;
            out.push((patches, caption.tokens[..t].to_vec(), caption.tokens[t]));
        }
        Ok(out)
    }
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn factorization() -> Result<Outcome> {
    let start = Instant::now();
    let config = ModelConfig {
        vocab_size: 40,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let params = TinyLvlmParams::init(&config, &mut rng)?;
        worst = worst.max(verify_factorization(&params, &config, 1, &mut rng)?);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("max deviation {worst:.2e} over 100 models in {secs:.1}s"),
    )
}

fn lambda_zero(world: &World) -> Result<Outcome> {
    let mut rng = Rng::new(202);
    let mut worst = 0.0f32;
    for _ in 0..1000 {
        let n = 2 + rng.below(60);
        let f_v = randn(&[n], 3.0, &mut rng);
        let f_x = randn(&[n], 3.0, &mut rng);
        let calibrated = calibrate_logits(&f_v, &f_x, 0.0)?;
        let a = softmax_slice(calibrated.data());
        let b = softmax_slice(f_v.data());
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f32::max);
    }
    let scenes = &world.heldout[..50];
    let full = DecodeConfig {
        variant: Variant::Full,
        lambda: 0.0,
        gamma: 1.0,
        ..DecodeConfig::default()
    };
    let base = DecodeConfig {
        variant: Variant::Baseline,
        ..full.clone()
    };
    let (a, _) = world.captions(&full, scenes)?;
    let (b, _) = world.captions(&base, scenes)?;
    let same = a.iter().zip(&b).filter(|(x, y)| x.tokens == y.tokens).count();
    outcome(
        worst < 1e-6 && same == scenes.len(),
        format!("max probability gap {worst:.1e} over 1000 pairs; {same}/50 captions token-equal"),
    )
}

fn mask_equivalence() -> Result<Outcome> {
    let worst = (0..100).map(mask_removal_gap).collect::<Result<Vec<f64>>>()?.into_iter().fold(0.0, f64::max);
    outcome(worst < 1e-5, format!("max logit gap {worst:.2e} over 100 models and masks"))
}

fn gradients() -> Result<Outcome> {
    let tc = PurifierTrainConfig::default();
    let errors = (0..6).map(|s| purifier_gradcheck(s, &tc)).collect::<Result<Vec<f64>>>()?;
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    outcome(worst < 1e-3, format!("max relative error {worst:.2e} over {} configurations", errors.len()))
}

fn retention(world: &World) -> Result<Outcome> {
    let contexts = world.contexts(HELDOUT_SCENES, 505)?;
    let target = (0.8f32 * world.config.n_visual as f32).round() as usize;
    let mut within = 0;
    let mut total = 0;
    for (patches, prefix, _) in &contexts {
        let text: Vec<usize> = describe_prompt().into_iter().chain(prefix.iter().copied()).collect();
        let kept = extract_mask(&world.purifier.distribution(&world.params, &world.config, patches, &text)?).retained();
        total += kept;
        within += (kept.abs_diff(target) <= 1) as usize;
    }
    let share = within as f64 / contexts.len() as f64;
    outcome(
        share >= 0.9,
        format!(
            "{within}/{} contexts keep {target}±1 (mean kept {:.2})",
            contexts.len(),
            total as f64 / contexts.len() as f64
        ),
    )
}

fn oracle_quality(small: &World) -> Result<Outcome> {
    let k = 6;
    let prompt = describe_prompt();
    let (mut ratios, mut dominated) = (Vec::new(), 0);
    for (patches, prefix, target) in small.contexts(50, 606)? {
        let objective = MaskObjective::new(
            &small.params,
            &small.config,
            &patches,
            &prompt,
            &prefix,
            target,
            DecodeConfig::default().alpha,
        )?;
        let best = oracle_mask_search(&objective, k, SearchOptions::default())?.best_score;
        let text: Vec<usize> = prompt.iter().chain(&prefix).copied().collect();
        let dist = small.purifier.distribution(&small.params, &small.config, &patches, &text)?;
        let ours = objective.score(&top_k_mask(&dist, k))?;
        dominated += (best >= ours) as usize;
        ratios.push(ours / best);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    outcome(
        mean >= 0.95 && dominated == ratios.len(),
        format!("purifier reaches {:.1}% of the oracle on average; oracle dominates {dominated}/{}", 100.0 * mean, ratios.len()),
    )
}

fn reduction(world: &World) -> Result<Outcome> {
    let start = Instant::now();
    let base = world.chair(Variant::Baseline, 0.0)?;
    let full = world.chair(Variant::Full, 0.5)?;
    let secs = (world.built_in + start.elapsed()).as_secs_f64();
    let relative = 1.0 - full.c_s / base.c_s;
    outcome(
        base.c_s >= 0.10 && relative >= 0.20 && secs < 600.0,
        format!(
            "CHAIR_S baseline {:.3} -> full {:.3} ({:.0}% lower), {secs:.0}s including training",
            base.c_s,
            full.c_s,
            100.0 * relative
        ),
    )
}

fn lambda_sweep(world: &World) -> Result<Outcome> {
    let curve = (0..10)
        .map(|i| world.chair(Variant::Full, i as f32 / 10.0).map(|s| s.c_s))
        .collect::<Result<Vec<f64>>>()?;
    let (arg, min) = curve
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &c)| if c < acc.1 { (i, c) } else { acc });
    let points: Vec<String> = curve.iter().map(|c| format!("{c:.3}")).collect();
    outcome(
        min < curve[0] && min < curve[9],
        format!("minimum {min:.3} at lambda {:.1}; curve [{}]", arg as f32 / 10.0, points.join(" ")),
    )
}

struct AlwaysYes;

impl PopeAnswerer for AlwaysYes {
    fn answer(&mut self, _: &SceneRecord, _: usize) -> Result<Option<bool>> {
        Ok(Some(true))
    }
}

fn metric_fixtures(world: &World) -> Result<Outcome> {
    let scene = |id: u64, objects: &[usize]| SceneRecord {
        scene_id: id,
        object_ids: objects.to_vec(),
        seed: id,
    };
    let caption = |id: u64, objects: &[usize]| CaptionRecord {
        scene_id: id,
        tokens: objects.iter().map(|&o| vocab::object_token(o)).chain([vocab::EOS]).collect(),
    };
    let chair = chair_scores(
        &[scene(0, &[0, 1, 2]), scene(1, &[3, 4, 5, 6])],
        &[caption(0, &[0, 1, 2, 9]), caption(1, &[3, 4, 5, 6])],
        24,
    )?;
    let questions = pope_questions(&world.heldout, world.corpus.catalog_size, 200, 909)?;
    let pope = pope_evaluate(&mut AlwaysYes, &world.heldout, &questions)?;
    outcome(
        chair.c_s == 0.5 && chair.c_i == 0.125 && pope.accuracy == 0.5 && (pope.f1 - 2.0 / 3.0).abs() < 1e-12,
        format!(
            "CHAIR fixture c_s {} c_i {}; always-yes POPE accuracy {} F1 {:.4}",
            chair.c_s, chair.c_i, pope.accuracy, pope.f1
        ),
    )
}

fn efficiency(world: &World) -> Result<Outcome> {
    let tps = |variant: Variant, scenes: &[SceneRecord]| -> Result<f64> {
        let cfg = DecodeConfig {
            variant,
            ..DecodeConfig::default()
        };
        let (_, results) = world.captions(&cfg, scenes)?;
        Ok(throughput(&results)?.mean_tokens_per_second)
    };
    let scenes = &world.heldout[..20];
    // interleaved repeats; the best of each resists scheduler noise
    let (mut full, mut text) = (0.0f64, 0.0f64);
    for _ in 0..3 {
        full = full.max(tps(Variant::Full, scenes)?);
        text = text.max(tps(Variant::TextOnly, scenes)?);
    }
    let lf = tps(Variant::LearningFree, &world.heldout[..2])?;
    outcome(
        full > lf && full >= 0.9 * text,
        format!("tokens/s full {full:.0}, text_only {text:.0}, learning_free {lf:.1}"),
    )
}

fn variant_ablation(worlds: &[&World]) -> Result<Outcome> {
    let (mut no_better, mut strict) = (0, 0);
    let mut rows = Vec::new();
    for world in worlds {
        let full = world.chair(Variant::Full, 0.5)?.c_s;
        let text = world.chair(Variant::TextOnly, 0.5)?.c_s;
        let vision = world.chair(Variant::VisionOnly, 0.5)?.c_s;
        no_better += (full <= text && full <= vision) as usize;
        strict += (full < text && full < vision) as usize;
        rows.push(format!("full {full:.3} text {text:.3} vision {vision:.3}"));
    }
    outcome(
        no_better == worlds.len() && strict >= 2,
        format!("{}; full strictly best in {strict}/{}", rows.join(" | "), worlds.len()),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Result<Outcome>)> = Vec::new();
    results.push((1, "factorization identity", factorization()));
    results.push((3, "mask equivalence", mask_equivalence()));
    results.push((4, "gradient correctness", gradients()));
    match World::build(0, CorpusConfig::default(), 0.8) {
        Err(e) => {
            for (n, name) in [
                (2, "lambda = 0 reduction"),
                (5, "retention control"),
                (7, "hallucination reduction"),
                (8, "lambda ablation shape"),
                (9, "metric fixtures"),
                (10, "efficiency direction"),
                (11, "variant ablation"),
            ] {
                results.push((n, name, Err(cmivld::Error::InvalidInput(format!("world build failed: {e}")))));
            }
        }
        Ok(world) => {
            results.push((7, "hallucination reduction", reduction(&world)));
            results.push((2, "lambda = 0 reduction", lambda_zero(&world)));
            results.push((5, "retention control", retention(&world)));
            results.push((8, "lambda ablation shape", lambda_sweep(&world)));
            results.push((9, "metric fixtures", metric_fixtures(&world)));
            results.push((10, "efficiency direction", efficiency(&world)));
            let others: Vec<Result<World>> =
                [1, 2].iter().map(|&s| World::build(s, CorpusConfig::default(), 0.8)).collect();
            let ablation = match others.into_iter().collect::<Result<Vec<World>>>() {
                Ok(others) => variant_ablation(&[&world, &others[0], &others[1]]),
                Err(e) => Err(e),
            };
            results.push((11, "variant ablation", ablation));
        }
    }
    let small_corpus = CorpusConfig {
        n_scenes: 1000,
        render: RenderConfig {
            n_visual: 8,
            patches_per_object: 2,
            clutter_patches: 1,
            ..RenderConfig::default()
        },
        ..CorpusConfig::default()
    };
    results.push((6, "oracle quality", World::build(3, small_corpus, 0.75).and_then(|w| oracle_quality(&w))));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, result) in &results {
        let (passed, detail) = match result {
            Ok(o) => (o.passed, o.detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !passed as usize;
        println!("criterion {n:>2} {}: {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    }
    println!("{} of {} criteria passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
