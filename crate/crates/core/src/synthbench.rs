//! Synthetic scenes, captions and object-hallucination metrics.
//!
//! A fixed catalog of objects comes in companion pairs that co-occur often.
//! Each scene holds a few objects rendered as noisy patch vectors, plus a
//! couple of faint "clutter" patches showing objects that are not part of
//! the scene. Captions list the scene's objects; with probability `bias`
//! a caption also names the companion of a listed object although that
//! companion is absent, which teaches the model a language prior that
//! produces hallucinations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decoding::{decode, DecodeConfig, DecodeResult};
use crate::error::{Error, Result};
use crate::model::{LvlmExample, ModelConfig, TinyLvlmParams};
use crate::purifier::Purifier;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Reserved token ids.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const DESCRIBE: usize = 3;
    pub const IS_THERE: usize = 4;
    pub const QMARK: usize = 5;
    pub const YES: usize = 6;
    pub const NO: usize = 7;
    pub const THERE_IS: usize = 8;
    pub const I_SEE: usize = 9;
    /// Token of object 0; object `i` is `OBJECT_BASE + i`.
    pub const OBJECT_BASE: usize = 16;

    pub fn object_token(object: usize) -> usize {
        OBJECT_BASE + object
    }

    pub fn token_object(token: usize, catalog_size: usize) -> Option<usize> {
        (OBJECT_BASE..OBJECT_BASE + catalog_size)
            .contains(&token)
            .then(|| token - OBJECT_BASE)
    }
}

/// The captioning prompt.
pub fn describe_prompt() -> Vec<usize> {
    vec![vocab::BOS, vocab::DESCRIBE]
}

/// The yes/no presence question for `object`.
pub fn question_prompt(object: usize) -> Vec<usize> {
    vec![vocab::BOS, vocab::IS_THERE, vocab::object_token(object), vocab::QMARK]
}

/// How scenes turn into patch vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_visual: usize,
    pub d_patch: usize,
    pub patches_per_object: usize,
    pub amp_min: f32,
    pub amp_max: f32,
    pub clutter_patches: usize,
    pub clutter_amp: f32,
    /// Probability that a clutter slot shows the absent companion of a
    /// scene object rather than a uniformly drawn absent object.
    pub clutter_companion_prob: f64,
    pub noise: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_visual: 16,
            d_patch: 16,
            patches_per_object: 3,
            amp_min: 0.7,
            amp_max: 1.0,
            clutter_patches: 2,
            clutter_amp: 0.3,
            clutter_companion_prob: 0.0,
            noise: 0.3,
        }
    }
}

/// Object prototypes and the two pairings between objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub prototypes: Vec<Vec<f32>>,
    /// `companion[i]` is the object that often co-occurs with `i`.
    pub companion: Vec<usize>,
    /// `lookalike[i]` resembles `i` visually.
    pub lookalike: Vec<usize>,
    /// Rare objects are drawn into scenes less often.
    pub rare: Vec<bool>,
}

impl Catalog {
    /// Objects come in groups of four: `i` and `i ^ 1` are companions,
    /// `i` and `i ^ 2` are lookalikes whose prototypes have cosine close
    /// to `similarity`, and the half of each group with bit 1 set is rare.
    /// Prototypes have norm `sqrt(d_patch)`.
    pub fn new(size: usize, d_patch: usize, similarity: f32, seed: u64) -> Result<Self> {
        if size == 0 || size % 4 != 0 {
            return Err(Error::invalid_input(format!("catalog size {size} must be a positive multiple of 4")));
        }
        if !(0.0..1.0).contains(&similarity) {
            return Err(Error::invalid_input(format!("lookalike similarity {similarity} outside [0, 1)")));
        }
        let mut rng = Rng::new(seed).substream("catalog");
        let mut unit = || {
            let v: Vec<f64> = (0..d_patch).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
        };
        let (s, scale) = (similarity as f64, (d_patch as f64).sqrt());
        let mut prototypes = vec![Vec::new(); size];
        for i in (0..size).filter(|&i| i & 2 == 0) {
            let base = unit();
            for j in [i, i ^ 2] {
                let own = unit();
                let v: Vec<f64> = base.iter().zip(&own).map(|(b, x)| s.sqrt() * b + (1.0 - s).sqrt() * x).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                prototypes[j] = v.iter().map(|x| (x / norm * scale) as f32).collect();
            }
        }
        Ok(Self {
            prototypes,
            companion: (0..size).map(|i| i ^ 1).collect(),
            lookalike: (0..size).map(|i| i ^ 2).collect(),
            rare: (0..size).map(|i| i & 2 != 0).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: u64,
    /// Sorted, non-empty.
    pub object_ids: Vec<usize>,
    /// Seed for rendering the patches.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_id: u64,
    pub tokens: Vec<usize>,
}

impl CaptionRecord {
    /// Objects named in the caption, by exact token match.
    pub fn mentioned_object_ids(&self, catalog_size: usize) -> BTreeSet<usize> {
        self.tokens
            .iter()
            .filter_map(|&t| vocab::token_object(t, catalog_size))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub catalog_size: usize,
    pub n_scenes: usize,
    pub objects_per_scene: usize,
    /// Probability that a caption names one absent companion.
    pub bias: f64,
    /// Probability that a listed object's companion joins the scene.
    pub pair_prob: f64,
    pub seed: u64,
    pub catalog_seed: u64,
    /// Cosine between the prototypes of lookalike objects.
    pub lookalike_similarity: f32,
    /// Sampling weight of a rare object relative to a common one.
    pub rare_weight: f64,
    pub render: RenderConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            catalog_size: 24,
            n_scenes: 1000,
            objects_per_scene: 3,
            bias: 0.3,
            pair_prob: 0.5,
            seed: 0,
            catalog_seed: 7,
            lookalike_similarity: 0.85,
            rare_weight: 0.15,
            render: RenderConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.render;
        if self.objects_per_scene == 0 || self.catalog_size < self.objects_per_scene {
            return Err(Error::invalid_input(format!(
                "need catalog_size {} ≥ objects_per_scene {} ≥ 1",
                self.catalog_size, self.objects_per_scene
            )));
        }
        if self.catalog_size < self.objects_per_scene + 1 + r.clutter_patches {
            return Err(Error::invalid_input("catalog too small for absent companions and clutter"));
        }
        if !(self.rare_weight > 0.0) {
            return Err(Error::invalid_input("rare_weight must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bias) || !(0.0..=1.0).contains(&self.pair_prob) {
            return Err(Error::invalid_input("bias and pair_prob must lie in [0, 1]"));
        }
        if self.objects_per_scene * r.patches_per_object + r.clutter_patches > r.n_visual {
            return Err(Error::invalid_input(format!(
                "{} objects × {} patches + {} clutter do not fit in {} slots",
                self.objects_per_scene, r.patches_per_object, r.clutter_patches, r.n_visual
            )));
        }
        if !(r.amp_min <= r.amp_max) || r.noise < 0.0 {
            return Err(Error::invalid_input("bad amplitude or noise settings"));
        }
        Ok(())
    }

    pub fn catalog(&self) -> Result<Catalog> {
        Catalog::new(self.catalog_size, self.render.d_patch, self.lookalike_similarity, self.catalog_seed)
    }

    /// Vocabulary size needed for this corpus.
    pub fn vocab_size(&self) -> usize {
        vocab::OBJECT_BASE + self.catalog_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub scenes: Vec<SceneRecord>,
    pub captions: Vec<CaptionRecord>,
}

fn sample_objects(cfg: &CorpusConfig, catalog: &Catalog, rng: &mut Rng) -> Vec<usize> {
    let k = cfg.objects_per_scene;
    let weight = |o: usize| if catalog.rare[o] { cfg.rare_weight } else { 1.0 };
    let total: f64 = (0..catalog.len()).map(weight).sum();
    loop {
        let mut picked: Vec<usize> = Vec::with_capacity(k);
        while picked.len() < k {
            let pair = picked
                .last()
                .map(|&o| catalog.companion[o])
                .filter(|c| !picked.contains(c));
            match pair {
                Some(c) if rng.bernoulli(cfg.pair_prob) => picked.push(c),
                _ => loop {
                    let mut u = rng.uniform() * total;
                    let mut o = 0;
                    while o + 1 < catalog.len() && u >= weight(o) {
                        u -= weight(o);
                        o += 1;
                    }
                    if !picked.contains(&o) {
                        picked.push(o);
                        break;
                    }
                },
            }
        }
        // keep only scenes with at least one object whose companion is absent
        if picked.iter().any(|&o| !picked.contains(&catalog.companion[o])) {
            picked.sort_unstable();
            return picked;
        }
    }
}

fn caption_for(scene: &SceneRecord, catalog: &Catalog, bias: f64, rng: &mut Rng) -> Vec<usize> {
    let mut order = scene.object_ids.clone();
    rng.shuffle(&mut order);
    let mut listed: Vec<usize> = Vec::with_capacity(order.len() + 1);
    for &o in &order {
        if listed.contains(&o) {
            continue;
        }
        listed.push(o);
        let c = catalog.companion[o];
        if scene.object_ids.contains(&c) && !listed.contains(&c) {
            listed.push(c);
        }
    }
    if rng.bernoulli(bias) {
        let hosts: Vec<usize> = (0..listed.len())
            .filter(|&i| !scene.object_ids.contains(&catalog.companion[listed[i]]))
            .collect();
        if !hosts.is_empty() {
            let at = hosts[rng.below(hosts.len())];
            listed.insert(at + 1, catalog.companion[listed[at]]);
        }
    }
    let intro = if rng.bernoulli(0.5) { vocab::THERE_IS } else { vocab::I_SEE };
    let mut tokens = vec![intro];
    tokens.extend(listed.iter().map(|&o| vocab::object_token(o)));
    tokens.push(vocab::EOS);
    tokens
}

/// Scenes with one caption each. Deterministic given the config.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let catalog = cfg.catalog()?;
    let mut rng = Rng::new(cfg.seed).substream("corpus");
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut captions = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let object_ids = sample_objects(cfg, &catalog, &mut rng);
        let scene = SceneRecord {
            scene_id: i as u64,
            object_ids,
            seed: rng.next_u64(),
        };
        captions.push(CaptionRecord {
            scene_id: scene.scene_id,
            tokens: caption_for(&scene, &catalog, cfg.bias, &mut rng),
        });
        scenes.push(scene);
    }
    Ok(Corpus { scenes, captions })
}

/// What a rendered slot shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Object(usize),
    /// A faint absent object.
    Clutter(usize),
    Empty,
}

/// Patch vectors for a scene; a pure function of the scene's objects and
/// seed. Each object fills `patches_per_object` slots, clutter slots show
/// faint absent objects, and the rest hold noise. Slots are shuffled.
pub fn render_patches(catalog: &Catalog, render: &RenderConfig, scene: &SceneRecord) -> Result<Tensor> {
    render_scene(catalog, render, scene).map(|(t, _)| t)
}

/// Like [`render_patches`], also returning what each slot shows.
pub fn render_scene(catalog: &Catalog, render: &RenderConfig, scene: &SceneRecord) -> Result<(Tensor, Vec<Slot>)> {
    let (n, d) = (render.n_visual, render.d_patch);
    if scene.object_ids.iter().any(|&o| o >= catalog.len()) {
        return Err(Error::invalid_input(format!("scene {} names unknown objects", scene.scene_id)));
    }
    if scene.object_ids.len() * render.patches_per_object + render.clutter_patches > n {
        return Err(Error::invalid_input(format!("scene {} does not fit in {n} slots", scene.scene_id)));
    }
    if catalog.prototypes.first().map_or(0, |p| p.len()) != d {
        return Err(Error::invalid_input("catalog prototypes differ from d_patch"));
    }
    let mut rng = Rng::new(scene.seed).substream("render");
    let mut rows: Vec<(Slot, Vec<f32>)> = Vec::with_capacity(n);
    let scaled = |o: usize, amp: f32| catalog.prototypes[o].iter().map(|x| amp * x).collect::<Vec<f32>>();
    for &o in &scene.object_ids {
        for _ in 0..render.patches_per_object {
            let amp = render.amp_min + (render.amp_max - render.amp_min) * rng.uniform() as f32;
            rows.push((Slot::Object(o), scaled(o, amp)));
        }
    }
    let absent: Vec<usize> = (0..catalog.len()).filter(|o| !scene.object_ids.contains(o)).collect();
    let companions: Vec<usize> = scene
        .object_ids
        .iter()
        .map(|&o| catalog.companion[o])
        .filter(|c| !scene.object_ids.contains(c))
        .collect();
    for _ in 0..render.clutter_patches {
        let o = if !companions.is_empty() && rng.bernoulli(render.clutter_companion_prob) {
            companions[rng.below(companions.len())]
        } else {
            absent[rng.below(absent.len())]
        };
        rows.push((Slot::Clutter(o), scaled(o, render.clutter_amp)));
    }
    rows.resize(n, (Slot::Empty, vec![0.0; d]));
    for (_, row) in &mut rows {
        for x in row.iter_mut() {
            *x += render.noise * rng.normal() as f32;
        }
    }
    rng.shuffle(&mut rows);
    let (slots, data): (Vec<Slot>, Vec<Vec<f32>>) = rows.into_iter().unzip();
    Ok((Tensor::new(vec![n, d], data.concat())?, slots))
}

/// Captioning examples for model training.
pub fn caption_examples(corpus: &Corpus, catalog: &Catalog, render: &RenderConfig) -> Result<Vec<LvlmExample>> {
    let by_id = index_scenes(&corpus.scenes);
    corpus
        .captions
        .iter()
        .map(|c| {
            let scene = lookup(&by_id, c.scene_id)?;
            Ok(LvlmExample {
                patches: render_patches(catalog, render, scene)?,
                prompt: describe_prompt(),
                target: c.tokens.clone(),
            })
        })
        .collect()
}

/// `per_scene` presence questions per scene, alternating present and
/// absent objects; absent ones are the companion of a present object half
/// the time.
pub fn qa_examples(
    scenes: &[SceneRecord],
    catalog: &Catalog,
    render: &RenderConfig,
    per_scene: usize,
    seed: u64,
) -> Result<Vec<LvlmExample>> {
    let mut rng = Rng::new(seed).substream("qa");
    let mut out = Vec::with_capacity(scenes.len() * per_scene);
    for scene in scenes {
        let patches = render_patches(catalog, render, scene)?;
        for q in 0..per_scene {
            let present = q % 2 == 0;
            let object = if present {
                scene.object_ids[rng.below(scene.object_ids.len())]
            } else {
                absent_object(scene, catalog, &mut rng)
            };
            out.push(LvlmExample {
                patches: patches.clone(),
                prompt: question_prompt(object),
                target: vec![if present { vocab::YES } else { vocab::NO }, vocab::EOS],
            });
        }
    }
    Ok(out)
}

fn absent_object(scene: &SceneRecord, catalog: &Catalog, rng: &mut Rng) -> usize {
    let companions: Vec<usize> = scene
        .object_ids
        .iter()
        .map(|&o| catalog.companion[o])
        .filter(|c| !scene.object_ids.contains(c))
        .collect();
    if !companions.is_empty() && rng.bernoulli(0.5) {
        return companions[rng.below(companions.len())];
    }
    loop {
        let o = rng.below(catalog.len());
        if !scene.object_ids.contains(&o) {
            return o;
        }
    }
}

fn index_scenes(scenes: &[SceneRecord]) -> BTreeMap<u64, &SceneRecord> {
    scenes.iter().map(|s| (s.scene_id, s)).collect()
}

fn lookup<'a>(by_id: &BTreeMap<u64, &'a SceneRecord>, id: u64) -> Result<&'a SceneRecord> {
    by_id
        .get(&id)
        .copied()
        .ok_or_else(|| Error::invalid_input(format!("caption refers to unknown scene {id}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    /// Fraction of captions naming at least one absent object.
    pub c_s: f64,
    /// Fraction of named objects that are absent.
    pub c_i: f64,
    pub hallucinated: usize,
    pub mentioned: usize,
    pub captions_with_hallucination: usize,
    pub captions: usize,
    /// Set when no caption names any object, so `c_i` is reported as 0.
    pub degenerate: bool,
}

/// Sentence- and instance-level hallucination rates. Each caption counts
/// each distinct object once.
pub fn chair_scores(scenes: &[SceneRecord], captions: &[CaptionRecord], catalog_size: usize) -> Result<ChairScores> {
    let by_id = index_scenes(scenes);
    let (mut hallucinated, mut mentioned, mut bad) = (0, 0, 0);
    for c in captions {
        let scene = lookup(&by_id, c.scene_id)?;
        let named = c.mentioned_object_ids(catalog_size);
        let absent = named.iter().filter(|o| !scene.object_ids.contains(o)).count();
        hallucinated += absent;
        mentioned += named.len();
        bad += (absent > 0) as usize;
    }
    Ok(ChairScores {
        c_s: if captions.is_empty() { 0.0 } else { bad as f64 / captions.len() as f64 },
        c_i: if mentioned == 0 { 0.0 } else { hallucinated as f64 / mentioned as f64 },
        hallucinated,
        mentioned,
        captions_with_hallucination: bad,
        captions: captions.len(),
        degenerate: mentioned == 0,
    })
}

/// Captions every scene with the describe prompt.
#[allow(clippy::too_many_arguments)]
pub fn caption_scenes(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    purifier: Option<&Purifier>,
    catalog: &Catalog,
    render: &RenderConfig,
    scenes: &[SceneRecord],
    cfg: &DecodeConfig,
) -> Result<(Vec<CaptionRecord>, Vec<DecodeResult>)> {
    let prompt = describe_prompt();
    let mut captions = Vec::with_capacity(scenes.len());
    let mut results = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let patches = render_patches(catalog, render, scene)?;
        let step_cfg = DecodeConfig {
            seed: cfg.seed ^ scene.scene_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..cfg.clone()
        };
        let r = decode(params, config, purifier, &patches, &prompt, &step_cfg)?;
        captions.push(CaptionRecord {
            scene_id: scene.scene_id,
            tokens: r.tokens.clone(),
        });
        results.push(r);
    }
    Ok((captions, results))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub scene_id: u64,
    pub object: usize,
    pub present: bool,
}

/// Balanced presence questions: `n` in total, alternating present and
/// absent (absent objects drawn uniformly from those not in the scene).
pub fn pope_questions(scenes: &[SceneRecord], catalog_size: usize, n: usize, seed: u64) -> Result<Vec<PopeQuestion>> {
    if scenes.is_empty() {
        return Err(Error::invalid_input("no scenes to ask about"));
    }
    let mut rng = Rng::new(seed).substream("pope");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let scene = &scenes[rng.below(scenes.len())];
        let present = i % 2 == 0;
        let object = if present {
            scene.object_ids[rng.below(scene.object_ids.len())]
        } else {
            let absent: Vec<usize> = (0..catalog_size).filter(|o| !scene.object_ids.contains(o)).collect();
            if absent.is_empty() {
                return Err(Error::invalid_input(format!("scene {} contains every object", scene.scene_id)));
            }
            absent[rng.below(absent.len())]
        };
        out.push(PopeQuestion {
            scene_id: scene.scene_id,
            object,
            present,
        });
    }
    Ok(out)
}

/// Answers presence questions; `None` means no yes/no answer was given.
pub trait PopeAnswerer {
    fn answer(&mut self, scene: &SceneRecord, object: usize) -> Result<Option<bool>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// F1 with "yes" as the positive class.
    pub f1: f64,
    pub yes_ratio: f64,
    /// Questions with no yes/no answer; scored as incorrect.
    pub unanswered: usize,
    pub questions: usize,
}

pub fn score_pope(questions: &[PopeQuestion], answers: &[Option<bool>]) -> Result<PopeScores> {
    if questions.len() != answers.len() {
        return Err(Error::invalid_input("one answer per question required"));
    }
    let (mut tp, mut fp, mut fn_, mut correct, mut unanswered, mut yes) = (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    for (q, a) in questions.iter().zip(answers) {
        match *a {
            None => {
                unanswered += 1;
                if q.present {
                    fn_ += 1;
                }
            }
            Some(said_yes) => {
                yes += said_yes as usize;
                if said_yes == q.present {
                    correct += 1;
                }
                match (said_yes, q.present) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let n = questions.len().max(1) as f64;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PopeScores {
        accuracy: correct as f64 / n,
        precision,
        recall,
        f1,
        yes_ratio: yes as f64 / n,
        unanswered,
        questions: questions.len(),
    })
}

pub fn pope_evaluate(
    answerer: &mut dyn PopeAnswerer,
    scenes: &[SceneRecord],
    questions: &[PopeQuestion],
) -> Result<PopeScores> {
    let by_id = index_scenes(scenes);
    let answers = questions
        .iter()
        .map(|q| answerer.answer(lookup(&by_id, q.scene_id)?, q.object))
        .collect::<Result<Vec<_>>>()?;
    score_pope(questions, &answers)
}

/// Answers by decoding up to four tokens and taking the first yes/no.
pub struct ModelAnswerer<'a> {
    pub params: &'a TinyLvlmParams,
    pub config: &'a ModelConfig,
    pub purifier: Option<&'a Purifier>,
    pub catalog: &'a Catalog,
    pub render: &'a RenderConfig,
    pub decode: DecodeConfig,
}

impl PopeAnswerer for ModelAnswerer<'_> {
    fn answer(&mut self, scene: &SceneRecord, object: usize) -> Result<Option<bool>> {
        let patches = render_patches(self.catalog, self.render, scene)?;
        let cfg = DecodeConfig {
            max_new_tokens: 4,
            seed: self.decode.seed ^ scene.scene_id ^ ((object as u64) << 32),
            ..self.decode.clone()
        };
        let r = decode(self.params, self.config, self.purifier, &patches, &question_prompt(object), &cfg)?;
        Ok(r.tokens.iter().find_map(|&t| match t {
            vocab::YES => Some(true),
            vocab::NO => Some(false),
            _ => None,
        }))
    }
}

/// Balanced presence probe of a model.
#[allow(clippy::too_many_arguments)]
pub fn pope_probe(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    purifier: Option<&Purifier>,
    catalog: &Catalog,
    render: &RenderConfig,
    scenes: &[SceneRecord],
    cfg: &DecodeConfig,
    n_questions: usize,
    seed: u64,
) -> Result<PopeScores> {
    let questions = pope_questions(scenes, catalog.len(), n_questions, seed)?;
    let mut answerer = ModelAnswerer {
        params,
        config,
        purifier,
        catalog,
        render,
        decode: cfg.clone(),
    };
    pope_evaluate(&mut answerer, scenes, &questions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub mean_tokens_per_second: f64,
    pub stdev_tokens_per_second: f64,
    pub runs: usize,
}

/// Mean and sample standard deviation of per-run tokens per second.
pub fn throughput(results: &[DecodeResult]) -> Result<Throughput> {
    if results.is_empty() {
        return Err(Error::invalid_input("no decode runs"));
    }
    let rates: Vec<f64> = results
        .iter()
        .map(|r| {
            if r.wall_time > 0.0 {
                r.tokens.len() as f64 / r.wall_time
            } else {
                0.0
            }
        })
        .collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = if rates.len() > 1 {
        rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rates.len() - 1) as f64
    } else {
        0.0
    };
    Ok(Throughput {
        mean_tokens_per_second: mean,
        stdev_tokens_per_second: var.sqrt(),
        runs: rates.len(),
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for item in items {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::invalid_input(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scene(id: u64, objects: &[usize]) -> SceneRecord {
        SceneRecord {
            scene_id: id,
            object_ids: objects.to_vec(),
            seed: id,
        }
    }

    fn caption(id: u64, objects: &[usize]) -> CaptionRecord {
        let mut tokens = vec![vocab::THERE_IS];
        tokens.extend(objects.iter().map(|&o| vocab::object_token(o)));
        tokens.push(vocab::EOS);
        CaptionRecord { scene_id: id, tokens }
    }

    #[test]
    fn chair_fixture() {
        let scenes = [scene(0, &[0, 1, 2]), scene(1, &[3, 4, 5, 6])];
        let captions = [caption(0, &[0, 1, 2, 9]), caption(1, &[3, 4, 5, 6])];
        let s = chair_scores(&scenes, &captions, 24).unwrap();
        assert_eq!(s.c_s, 0.5);
        assert_eq!(s.c_i, 0.125);
        assert_eq!((s.hallucinated, s.mentioned, s.captions_with_hallucination, s.captions), (1, 8, 1, 2));
        assert!(!s.degenerate);
    }

    #[test]
    fn chair_without_mentions_is_flagged() {
        let scenes = [scene(0, &[0])];
        let captions = [CaptionRecord {
            scene_id: 0,
            tokens: vec![vocab::THERE_IS, vocab::EOS],
        }];
        let s = chair_scores(&scenes, &captions, 24).unwrap();
        assert_eq!((s.c_i, s.c_s, s.mentioned), (0.0, 0.0, 0));
        assert!(s.degenerate);
        assert!(chair_scores(&scenes, &[caption(5, &[0])], 24).is_err());
    }

    proptest! {
        #[test]
        fn adding_a_hallucination_never_lowers_chair(
            objs in prop::collection::vec(prop::collection::btree_set(0usize..12, 1..4), 1..6),
            mentions in prop::collection::vec(prop::collection::vec(0usize..12, 0..5), 1..6),
            pick in 0usize..6,
        ) {
            let n = objs.len().min(mentions.len());
            let scenes: Vec<SceneRecord> = (0..n).map(|i| scene(i as u64, &objs[i].iter().copied().collect::<Vec<_>>())).collect();
            let caps: Vec<CaptionRecord> = (0..n).map(|i| caption(i as u64, &mentions[i])).collect();
            let before = chair_scores(&scenes, &caps, 24).unwrap();
            prop_assert!((0.0..=1.0).contains(&before.c_s) && (0.0..=1.0).contains(&before.c_i));
            prop_assert_eq!(before.c_s == 0.0, before.c_i == 0.0);
            let i = pick % n;
            let absent = (12..24).find(|o| !caps[i].mentioned_object_ids(24).contains(o)).unwrap();
            let mut more = caps.clone();
            more[i].tokens.insert(1, vocab::object_token(absent));
            let after = chair_scores(&scenes, &more, 24).unwrap();
            prop_assert!(after.c_s >= before.c_s);
            prop_assert!(after.c_i >= before.c_i);
        }
    }

    struct Constant(bool);
    impl PopeAnswerer for Constant {
        fn answer(&mut self, _: &SceneRecord, _: usize) -> Result<Option<bool>> {
            Ok(Some(self.0))
        }
    }

    struct Truthful;
    impl PopeAnswerer for Truthful {
        fn answer(&mut self, scene: &SceneRecord, object: usize) -> Result<Option<bool>> {
            Ok(Some(scene.object_ids.contains(&object)))
        }
    }

    #[test]
    fn pope_closed_forms() {
        let corpus = generate_corpus(&CorpusConfig {
            n_scenes: 30,
            ..Default::default()
        })
        .unwrap();
        let qs = pope_questions(&corpus.scenes, 24, 100, 3).unwrap();
        assert_eq!(qs.iter().filter(|q| q.present).count(), 50);
        let yes = pope_evaluate(&mut Constant(true), &corpus.scenes, &qs).unwrap();
        assert_eq!(yes.accuracy, 0.5);
        assert!((yes.f1 - 2.0 / 3.0).abs() < 1e-12);
        let truth = pope_evaluate(&mut Truthful, &corpus.scenes, &qs).unwrap();
        assert_eq!((truth.accuracy, truth.f1), (1.0, 1.0));
        let odd = pope_questions(&corpus.scenes, 24, 7, 3).unwrap();
        let present = odd.iter().filter(|q| q.present).count() as i64;
        assert!((present - (7 - present)).abs() <= 1);
    }

    #[test]
    fn unanswered_questions_count_as_wrong() {
        let qs = [
            PopeQuestion { scene_id: 0, object: 0, present: true },
            PopeQuestion { scene_id: 0, object: 1, present: false },
        ];
        let s = score_pope(&qs, &[None, Some(false)]).unwrap();
        assert_eq!((s.accuracy, s.unanswered), (0.5, 1));
    }

    #[test]
    fn unbiased_corpus_is_clean_and_biased_rate_matches() {
        let clean = generate_corpus(&CorpusConfig {
            bias: 0.0,
            n_scenes: 500,
            ..Default::default()
        })
        .unwrap();
        let s = chair_scores(&clean.scenes, &clean.captions, 24).unwrap();
        assert_eq!(s.c_i, 0.0);
        let biased = generate_corpus(&CorpusConfig {
            bias: 0.3,
            n_scenes: 1000,
            ..Default::default()
        })
        .unwrap();
        let b = chair_scores(&biased.scenes, &biased.captions, 24).unwrap();
        assert!((0.25..=0.35).contains(&b.c_s), "{}", b.c_s);
        // every biased caption names exactly one absent companion, right after its host
        let cat = CorpusConfig::default().catalog().unwrap();
        for (sc, cap) in biased.scenes.iter().zip(&biased.captions) {
            for w in cap.tokens.windows(2) {
                if let (Some(a), Some(b)) = (vocab::token_object(w[0], 24), vocab::token_object(w[1], 24)) {
                    if !sc.object_ids.contains(&b) {
                        assert_eq!(cat.companion[a], b);
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_well_formed() {
        let cfg = CorpusConfig {
            n_scenes: 200,
            ..Default::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let cat = cfg.catalog().unwrap();
        for s in &a.scenes {
            assert_eq!(s.object_ids.len(), 3);
            assert!(s.object_ids.windows(2).all(|w| w[0] < w[1]));
            assert!(s.object_ids.iter().any(|&o| !s.object_ids.contains(&cat.companion[o])));
        }
        let paired = a
            .scenes
            .iter()
            .filter(|s| s.object_ids.iter().any(|&o| s.object_ids.contains(&cat.companion[o])))
            .count();
        assert!(paired > 50, "{paired}");
        let other = generate_corpus(&CorpusConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.scenes, other.scenes);
    }

    #[test]
    fn rendering_is_pure_and_shaped() {
        let cfg = CorpusConfig::default();
        let cat = cfg.catalog().unwrap();
        let s = scene(4, &[1, 5, 9]);
        let a = render_patches(&cat, &cfg.render, &s).unwrap();
        assert_eq!(a.shape(), &[16, 16]);
        assert_eq!(a, render_patches(&cat, &cfg.render, &s).unwrap());
        let moved = SceneRecord { seed: 5, ..s.clone() };
        assert_ne!(a, render_patches(&cat, &cfg.render, &moved).unwrap());
        assert!(render_patches(&cat, &cfg.render, &scene(0, &[99])).is_err());
    }

    #[test]
    fn invalid_corpus_sizes() {
        for bad in [
            CorpusConfig { objects_per_scene: 0, ..Default::default() },
            CorpusConfig { catalog_size: 2, ..Default::default() },
            CorpusConfig { objects_per_scene: 8, ..Default::default() },
            CorpusConfig { bias: 1.5, ..Default::default() },
        ] {
            assert!(matches!(generate_corpus(&bad), Err(Error::InvalidInput(_))));
        }
    }

    #[test]
    fn qa_examples_are_balanced() {
        let cfg = CorpusConfig { n_scenes: 20, ..Default::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        let qa = qa_examples(&corpus.scenes, &cfg.catalog().unwrap(), &cfg.render, 2, 0).unwrap();
        assert_eq!(qa.len(), 40);
        assert_eq!(qa.iter().filter(|e| e.target[0] == vocab::YES).count(), 20);
        for (i, e) in qa.iter().enumerate() {
            let obj = vocab::token_object(e.prompt[2], 24).unwrap();
            let present = corpus.scenes[i / 2].object_ids.contains(&obj);
            assert_eq!(present, e.target[0] == vocab::YES);
        }
    }

    #[test]
    fn throughput_summary() {
        let run = |n: usize, secs: f64| DecodeResult {
            tokens: vec![0; n],
            per_step: vec![],
            wall_time: secs,
            tokens_per_second: n as f64 / secs,
        };
        let t = throughput(&[run(10, 2.0)]).unwrap();
        assert_eq!(t.mean_tokens_per_second, 5.0);
        assert_eq!(t.stdev_tokens_per_second, 0.0);
        let t2 = throughput(&[run(10, 2.0), run(6, 2.0)]).unwrap();
        assert_eq!(t2.mean_tokens_per_second, 4.0);
        assert!((t2.stdev_tokens_per_second - 2f64.sqrt()).abs() < 1e-12);
        assert!(throughput(&[]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let corpus = generate_corpus(&CorpusConfig { n_scenes: 5, ..Default::default() }).unwrap();
        write_jsonl(&path, &corpus.scenes).unwrap();
        let back: Vec<SceneRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, corpus.scenes);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().next().unwrap().contains("\"object_ids\""));
        assert!(read_jsonl::<SceneRecord>(&dir.path().join("missing")).is_err());
    }
}
