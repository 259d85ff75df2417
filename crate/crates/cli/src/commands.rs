//! One function per subcommand. Each writes `results.jsonl` into the run
//! directory and returns a summary that goes into `run.json`. Result files
//! hold no timings, so repeated runs produce identical bytes.

use std::path::Path;

use cmivld::decoding::{DecodeConfig, DecodeResult, StepRecord, Variant};
use cmivld::model::{train_lvlm, ModelConfig, TinyLvlmParams};
use cmivld::oracle::verify_factorization;
use cmivld::purifier::{train_purifier, Purifier, PurifierParams, PurifierSample};
use cmivld::reference::purifier_gradcheck;
use cmivld::rng::{derive_seed, Rng};
use cmivld::store;
use cmivld::synthbench::{
    caption_examples, caption_scenes, chair_scores, generate_corpus, pope_probe, qa_examples, read_jsonl, throughput,
    write_jsonl, CaptionRecord, Catalog, ChairScores, Corpus, SceneRecord,
};
use cmivld::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

const SPLITS: [&str; 3] = ["train", "purifier", "heldout"];

fn scenes_path(cfg: &RunConfig, split: &str) -> std::path::PathBuf {
    cfg.data_dir().join(format!("{split}_scenes.jsonl"))
}

fn captions_path(cfg: &RunConfig, split: &str) -> std::path::PathBuf {
    cfg.data_dir().join(format!("{split}_captions.jsonl"))
}

fn catalog(cfg: &RunConfig) -> Result<Catalog> {
    cfg.corpus("train", 0, cfg.bias).catalog()
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Corpus> {
    Ok(Corpus {
        scenes: read_jsonl(&scenes_path(cfg, split))?,
        captions: read_jsonl(&captions_path(cfg, split))?,
    })
}

fn load_model(cfg: &RunConfig) -> Result<(ModelConfig, TinyLvlmParams)> {
    store::load_model(Path::new(&cfg.model_path))
}

/// The purifier is only needed by variants that use one.
fn load_purifier_for(cfg: &RunConfig, decode: &DecodeConfig) -> Result<Option<Purifier>> {
    match decode.variant {
        Variant::Full | Variant::VisionOnly => Ok(Some(store::load_purifier(Path::new(&cfg.purifier_path))?)),
        _ => Ok(None),
    }
}

fn finite(label: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{label} is not finite")))
    }
}

pub fn synth_gen(cfg: &RunConfig, out: &Path) -> Result<Value> {
    std::fs::create_dir_all(cfg.data_dir()).map_err(|e| Error::Io {
        path: cfg.data_dir(),
        source: e,
    })?;
    let mut rows = Vec::new();
    for split in SPLITS {
        let (n, bias) = match split {
            "train" => (cfg.n_train_scenes, cfg.bias),
            "purifier" => (cfg.n_purifier_scenes, 0.0),
            _ => (cfg.n_heldout_scenes, cfg.bias),
        };
        let corpus = generate_corpus(&cfg.corpus(split, n, bias))?;
        write_jsonl(&scenes_path(cfg, split), &corpus.scenes)?;
        write_jsonl(&captions_path(cfg, split), &corpus.captions)?;
        let chair = chair_scores(&corpus.scenes, &corpus.captions, cfg.catalog_size)?;
        rows.push(json!({ "split": split, "scenes": n, "bias": bias, "caption_chair": chair }));
    }
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    Ok(json!({ "splits": rows.len() }))
}

pub fn train_model(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let model_config = cfg.model()?;
    let cat = catalog(cfg)?;
    let render = cfg.render();
    let train = load_split(cfg, "train")?;
    let mut examples = caption_examples(&train, &cat, &render)?;
    examples.extend(qa_examples(
        &train.scenes,
        &cat,
        &render,
        cfg.qa_per_scene,
        derive_seed(cfg.seed, "qa"),
    )?);
    let mut rng = Rng::new(derive_seed(cfg.seed, "train-model"));
    let (params, losses) = train_lvlm(&examples, &model_config, &cfg.lvlm_train(), &mut rng)?;
    let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
    finite("training loss", &losses)?;
    store::save_model(Path::new(&cfg.model_path), &model_config, &params)?;
    let rows: Vec<Value> = losses
        .iter()
        .enumerate()
        .map(|(epoch, loss)| json!({ "epoch": epoch, "loss": loss }))
        .collect();
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    Ok(json!({ "examples": examples.len(), "parameters": params.param_count(), "final_loss": losses.last() }))
}

fn fit_purifier(cfg: &RunConfig, model_config: &ModelConfig, params: &TinyLvlmParams) -> Result<(Purifier, Vec<f64>)> {
    let pc = cfg.purifier(model_config)?;
    let tc = cfg.purifier_train()?;
    let corpus = load_split(cfg, "purifier")?;
    let samples: Vec<PurifierSample> = caption_examples(&corpus, &catalog(cfg)?, &cfg.render())?
        .into_iter()
        .map(PurifierSample::from)
        .collect();
    let mut rng = Rng::new(derive_seed(cfg.seed, "purifier-init"));
    let init = PurifierParams::init(&pc, params.param_count(), &mut rng)?;
    let (trained, losses) = train_purifier(params, model_config, &pc, &init, &samples, &tc)?;
    let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
    finite("purifier loss", &losses)?;
    Ok((
        Purifier {
            config: pc,
            params: trained,
        },
        losses,
    ))
}

pub fn train_purifier_cmd(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (model_config, params) = load_model(cfg)?;
    let (purifier, losses) = fit_purifier(cfg, &model_config, &params)?;
    store::save_purifier(Path::new(&cfg.purifier_path), &purifier)?;
    let rows: Vec<Value> = losses
        .iter()
        .enumerate()
        .map(|(epoch, loss)| json!({ "epoch": epoch, "loss": loss }))
        .collect();
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    Ok(json!({ "parameters": purifier.params.param_count(), "final_loss": losses.last() }))
}

#[derive(Serialize)]
struct DecodeRow<'a> {
    scene_id: u64,
    tokens: &'a [usize],
    per_step: &'a [StepRecord],
}

fn caption_heldout(
    cfg: &RunConfig,
    decode: &DecodeConfig,
    purifier: Option<&Purifier>,
    model_config: &ModelConfig,
    params: &TinyLvlmParams,
) -> Result<(Vec<SceneRecord>, Vec<CaptionRecord>, Vec<DecodeResult>)> {
    let scenes: Vec<SceneRecord> = read_jsonl(&scenes_path(cfg, "heldout"))?;
    let (captions, results) = caption_scenes(
        params,
        model_config,
        purifier,
        &catalog(cfg)?,
        &cfg.render(),
        &scenes,
        decode,
    )?;
    Ok((scenes, captions, results))
}

fn timing(results: &[DecodeResult]) -> Result<Value> {
    Ok(serde_json::to_value(throughput(results)?).expect("throughput serializes"))
}

pub fn decode_cmd(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let decode = cfg.decode()?;
    let (model_config, params) = load_model(cfg)?;
    let purifier = load_purifier_for(cfg, &decode)?;
    let (scenes, _, results) = caption_heldout(cfg, &decode, purifier.as_ref(), &model_config, &params)?;
    let rows: Vec<DecodeRow> = scenes
        .iter()
        .zip(&results)
        .map(|(s, r)| DecodeRow {
            scene_id: s.scene_id,
            tokens: &r.tokens,
            per_step: &r.per_step,
        })
        .collect();
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    Ok(json!({ "captions": rows.len(), "throughput": timing(&results)? }))
}

fn chair_for(cfg: &RunConfig, decode: &DecodeConfig, model_config: &ModelConfig, params: &TinyLvlmParams, purifier: Option<&Purifier>) -> Result<(ChairScores, Vec<CaptionRecord>, Vec<DecodeResult>)> {
    let (scenes, captions, results) = caption_heldout(cfg, decode, purifier, model_config, params)?;
    let scores = chair_scores(&scenes, &captions, cfg.catalog_size)?;
    finite("chair scores", &[scores.c_s, scores.c_i])?;
    Ok((scores, captions, results))
}

pub fn eval_chair(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let decode = cfg.decode()?;
    let (model_config, params) = load_model(cfg)?;
    let purifier = load_purifier_for(cfg, &decode)?;
    let (scores, captions, results) = chair_for(cfg, &decode, &model_config, &params, purifier.as_ref())?;
    write_jsonl(&out.join("captions.jsonl"), &captions)?;
    write_jsonl(&out.join("results.jsonl"), &[json!({ "variant": decode.variant.as_str(), "chair": scores })])?;
    Ok(json!({ "c_s": scores.c_s, "c_i": scores.c_i, "throughput": timing(&results)? }))
}

pub fn eval_pope(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let decode = cfg.decode()?;
    let (model_config, params) = load_model(cfg)?;
    let purifier = load_purifier_for(cfg, &decode)?;
    let scenes: Vec<SceneRecord> = read_jsonl(&scenes_path(cfg, "heldout"))?;
    let scores = pope_probe(
        &params,
        &model_config,
        purifier.as_ref(),
        &catalog(cfg)?,
        &cfg.render(),
        &scenes,
        &decode,
        cfg.n_questions,
        derive_seed(cfg.seed, "pope"),
    )?;
    finite("pope scores", &[scores.accuracy, scores.f1])?;
    write_jsonl(&out.join("results.jsonl"), &[json!({ "variant": decode.variant.as_str(), "pope": scores })])?;
    Ok(json!({ "accuracy": scores.accuracy, "f1": scores.f1 }))
}

/// Checks the sequence-level factorization on random models, or on the
/// trained model when `model_path` exists.
pub fn oracle_check(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let mut rng = Rng::new(derive_seed(cfg.seed, "oracle-check"));
    let mut max_dev = 0.0f64;
    let mut rows = Vec::with_capacity(cfg.trials);
    let model_config = cfg.model()?;
    for trial in 0..cfg.trials {
        let params = TinyLvlmParams::init(&model_config, &mut rng)?;
        let dev = verify_factorization(&params, &model_config, 1, &mut rng)?;
        finite("factorization deviation", &[dev])?;
        max_dev = max_dev.max(dev);
        rows.push(json!({ "trial": trial, "deviation": dev }));
    }
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    println!("max factorization deviation {max_dev:.3e} over {} trials", cfg.trials);
    Ok(json!({ "max_deviation": max_dev, "trials": cfg.trials, "passed": max_dev < 1e-4 }))
}

pub fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let tc = cfg.purifier_train()?;
    let mut worst = 0.0f64;
    let mut rows = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let seed = derive_seed(cfg.seed, &format!("gradcheck/{trial}"));
        let err = purifier_gradcheck(seed, &tc)?;
        finite("gradient error", &[err])?;
        worst = worst.max(err);
        rows.push(json!({ "trial": trial, "relative_error": err }));
    }
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    println!("max relative gradient error {worst:.3e} over {} trials", cfg.trials);
    Ok(json!({ "max_relative_error": worst, "trials": cfg.trials, "passed": worst < 1e-3 }))
}

/// CHAIR over the held-out split for each value of one key. Keys that
/// change the purifier objective retrain it per point.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (model_config, params) = load_model(cfg)?;
    let retrain = matches!(cfg.sweep_param.as_str(), "alpha" | "beta" | "tau" | "purifier_epochs");
    let mut rows = Vec::new();
    let mut best: Option<(String, f64)> = None;
    let shared = if retrain {
        None
    } else {
        load_purifier_for(cfg, &cfg.decode()?)?
    };
    for value in cfg.sweep_values()? {
        let mut point = cfg.clone();
        point.set(&cfg.sweep_param, &value)?;
        let decode = point.decode()?;
        let trained;
        let purifier = if retrain && matches!(decode.variant, Variant::Full | Variant::VisionOnly) {
            trained = fit_purifier(&point, &model_config, &params)?.0;
            Some(&trained)
        } else {
            shared.as_ref()
        };
        let (scores, _, _) = chair_for(&point, &decode, &model_config, &params, purifier)?;
        if best.as_ref().is_none_or(|(_, c)| scores.c_s < *c) {
            best = Some((value.clone(), scores.c_s));
        }
        rows.push(json!({ "param": cfg.sweep_param, "value": value, "c_s": scores.c_s, "c_i": scores.c_i, "mentioned": scores.mentioned }));
    }
    if cfg.sweep_param == "lambda" {
        // contrast switched off entirely, for comparison with the lambda = 0 row
        let mut off = cfg.clone();
        off.set("variant", "vision_only")?;
        let decode = off.decode()?;
        let (scores, _, _) = chair_for(&off, &decode, &model_config, &params, shared.as_ref())?;
        rows.push(json!({ "param": "variant", "value": "vision_only", "c_s": scores.c_s, "c_i": scores.c_i, "mentioned": scores.mentioned }));
    }
    let (arg, min) = best.expect("at least one sweep value");
    rows.push(json!({ "param": cfg.sweep_param, "minimum_at": arg, "min_c_s": min }));
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    println!("{} minimizing CHAIR_S: {arg} ({min:.3})", cfg.sweep_param);
    Ok(json!({ "minimum_at": arg, "min_c_s": min }))
}
