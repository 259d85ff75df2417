//! Calibrated contrastive decoding with per-step visual purification.
//!
//! Every step solves two subproblems in turn: pick a mask over the visual
//! slots (purifier, exhaustive oracle, or none), then pick the next token
//! from `(1+λ)·f_v − λ·f_x`, where `f_v` are the logits with the masked
//! image and `f_x` the logits without the image.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cpmi::floored_log;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, SoftVisualMask, TinyLvlmParams};
use crate::oracle;
use crate::purifier::{top_k_mask, Purifier};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Purifier mask and contrast.
    Full,
    /// Contrast only; the image is never masked.
    TextOnly,
    /// Purifier mask only; no contrast.
    VisionOnly,
    /// Contrast with masks from exhaustive search instead of the purifier.
    LearningFree,
    /// Plain decoding from the full image.
    Baseline,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Self::Full,
            "text_only" => Self::TextOnly,
            "vision_only" => Self::VisionOnly,
            "learning_free" => Self::LearningFree,
            "baseline" => Self::Baseline,
            _ => return Err(Error::invalid_config(format!("unknown variant {s:?}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::TextOnly => "text_only",
            Self::VisionOnly => "vision_only",
            Self::LearningFree => "learning_free",
            Self::Baseline => "baseline",
        }
    }

    fn contrasts(self) -> bool {
        matches!(self, Self::Full | Self::TextOnly | Self::LearningFree)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Greedy,
    Multinomial,
    TopP(f32),
}

impl Sampler {
    /// Parses `greedy`, `multinomial`, or `top_p(0.9)` / `top_p=0.9`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "greedy" => return Ok(Self::Greedy),
            "multinomial" => return Ok(Self::Multinomial),
            _ => {}
        }
        let p = s
            .strip_prefix("top_p(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("top_p="))
            .ok_or_else(|| Error::invalid_config(format!("unknown sampler {s:?}")))?;
        let p: f32 = p
            .parse()
            .map_err(|_| Error::invalid_config(format!("bad top_p value in {s:?}")))?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid_config("top_p must lie in (0, 1]"));
        }
        Ok(Self::TopP(p))
    }

    pub fn label(self) -> String {
        match self {
            Self::Greedy => "greedy".into(),
            Self::Multinomial => "multinomial".into(),
            Self::TopP(p) => format!("top_p({p})"),
        }
    }
}

/// Order of the two subproblems within a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOrder {
    /// Predict the mask from the current context, then sample with it.
    #[default]
    MaskThenSample,
    /// Sample with the mask from the previous step, then update the mask
    /// against the sampled token. The first step uses the full image.
    SampleThenMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub lambda: f32,
    pub gamma: f32,
    pub tau: f32,
    pub delta: f32,
    pub alpha: f32,
    pub variant: Variant,
    pub sampler: Sampler,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub eos_token: usize,
    #[serde(default)]
    pub order: StepOrder,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma: 0.8,
            tau: 0.5,
            delta: 0.1,
            alpha: 100.0,
            variant: Variant::Full,
            sampler: Sampler::Greedy,
            seed: 0,
            max_new_tokens: 16,
            eos_token: 2,
            order: StepOrder::MaskThenSample,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid_config("lambda must be a finite value ≥ 0"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid_config("gamma must lie in (0, 1]"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid_config("tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::invalid_config("delta must lie in [0, 1]"));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid_config("alpha must be non-negative"));
        }
        if let Sampler::TopP(p) = self.sampler {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid_config("top_p must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// The contrast strength actually applied for this variant.
    pub fn effective_lambda(&self) -> f32 {
        if self.variant.contrasts() {
            self.lambda
        } else {
            0.0
        }
    }

    /// Number of visual slots kept per step, `round(γ·N)`, at least one.
    pub fn retained_count(&self, n_visual: usize) -> usize {
        ((self.gamma * n_visual as f32).round() as usize).clamp(1, n_visual)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: usize,
    /// Entropy (nats) of the calibrated distribution over the candidates.
    pub entropy: f64,
    pub retained: usize,
    /// `ln p(y_t | v∘m, x, y_<t) − ln p(y_t | x, y_<t)` for the chosen token.
    pub log_ratio: f64,
    /// The visual mask used at this step.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub per_step: Vec<StepRecord>,
    /// Seconds.
    pub wall_time: f64,
    pub tokens_per_second: f64,
}

impl DecodeResult {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("decode result serializes")
    }

    /// The masks used at each step.
    pub fn step_masks(&self) -> Vec<SoftVisualMask> {
        self.per_step.iter().map(|s| SoftVisualMask::hard(&s.mask)).collect()
    }
}

/// `(1+λ)·f_v − λ·f_x`.
pub fn calibrate_logits(f_v: &Tensor, f_x: &Tensor, lambda: f32) -> Result<Tensor> {
    if f_v.shape() != f_x.shape() {
        return Err(Error::invalid_input(format!(
            "logit shapes differ: {:?} vs {:?}",
            f_v.shape(),
            f_x.shape()
        )));
    }
    if !f_v.all_finite() || !f_x.all_finite() {
        return Err(Error::invalid_input("logits must be finite"));
    }
    let data = f_v
        .data()
        .iter()
        .zip(f_x.data())
        .map(|(&v, &x)| (1.0 + lambda) * v - lambda * x)
        .collect();
    Tensor::new(f_v.shape().to_vec(), data)
}

/// Indices `j` with `p[j] ≥ δ·max(p)`, ascending. Always holds the argmax.
pub fn truncate_candidates(p_v: &[f32], delta: f32) -> Vec<usize> {
    let best = tensor::argmax(p_v);
    let threshold = delta * p_v[best];
    let mut out: Vec<usize> = (0..p_v.len())
        .filter(|&j| p_v[j] >= threshold && (delta > 0.0 || p_v[j] > 0.0))
        .collect();
    if !out.contains(&best) {
        out.push(best);
        out.sort_unstable();
    }
    out
}

/// What a mask provider is asked for at one step.
#[derive(Debug, Clone, Copy)]
pub struct MaskRequest<'a> {
    pub patches: &'a Tensor,
    pub prompt: &'a [usize],
    /// Tokens generated before the step the mask is for.
    pub generated: &'a [usize],
    /// The token the mask will be scored against, when already known.
    pub target: Option<usize>,
    /// How many slots to keep.
    pub keep: usize,
}

/// Picks a visual mask for one step.
pub trait MaskProvider {
    fn mask(&mut self, req: &MaskRequest<'_>) -> Result<SoftVisualMask>;
}

/// Top-`k` slots by purifier retention probability.
pub struct PurifierMasks<'a> {
    pub purifier: &'a Purifier,
    pub params: &'a TinyLvlmParams,
    pub config: &'a ModelConfig,
}

impl MaskProvider for PurifierMasks<'_> {
    fn mask(&mut self, req: &MaskRequest<'_>) -> Result<SoftVisualMask> {
        if req.keep >= self.config.n_visual {
            return Ok(SoftVisualMask::hard(&vec![true; self.config.n_visual]));
        }
        let text: Vec<usize> = req.prompt.iter().chain(req.generated).copied().collect();
        let dist = self.purifier.distribution(self.params, self.config, req.patches, &text)?;
        Ok(top_k_mask(&dist, req.keep))
    }
}

/// Always keeps every slot.
pub struct FullImage;

impl MaskProvider for FullImage {
    fn mask(&mut self, req: &MaskRequest<'_>) -> Result<SoftVisualMask> {
        Ok(SoftVisualMask::hard(&vec![true; req.patches.shape()[0]]))
    }
}

/// Runs decoding with masks from `purifier` (full, vision_only), the
/// exhaustive oracle (learning_free), or the full image (text_only,
/// baseline).
pub fn decode(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    purifier: Option<&Purifier>,
    patches: &Tensor,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    match cfg.variant {
        Variant::Full | Variant::VisionOnly => {
            let purifier = purifier.ok_or_else(|| {
                Error::invalid_config(format!("variant {} needs a purifier", cfg.variant.as_str()))
            })?;
            purifier.config.check_compatible(config)?;
            let mut provider = PurifierMasks {
                purifier,
                params,
                config,
            };
            decode_with(params, config, patches, prompt, cfg, &mut provider)
        }
        Variant::LearningFree => oracle::lf_decode(params, config, patches, prompt, cfg),
        Variant::TextOnly | Variant::Baseline => {
            decode_with(params, config, patches, prompt, cfg, &mut FullImage)
        }
    }
}

/// Extension point for latent feature steering: rewrites the visual
/// features once before decoding starts.
pub trait FeatureSteering {
    fn steer(&mut self, patches: &Tensor) -> Result<Tensor>;
}

/// Leaves the features untouched.
pub struct NoSteering;

impl FeatureSteering for NoSteering {
    fn steer(&mut self, patches: &Tensor) -> Result<Tensor> {
        Ok(patches.clone())
    }
}

/// The decode loop with an arbitrary mask source.
pub fn decode_with(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    patches: &Tensor,
    prompt: &[usize],
    cfg: &DecodeConfig,
    masks: &mut dyn MaskProvider,
) -> Result<DecodeResult> {
    decode_steered(params, config, patches, prompt, cfg, masks, &mut NoSteering)
}

/// The decode loop with a mask source and a feature steering hook.
pub fn decode_steered(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    patches: &Tensor,
    prompt: &[usize],
    cfg: &DecodeConfig,
    masks: &mut dyn MaskProvider,
    steering: &mut dyn FeatureSteering,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let steered = steering.steer(patches)?;
    if steered.shape() != patches.shape() {
        return Err(Error::invalid_input("steering changed the shape of the visual features"));
    }
    let patches = &steered;
    if prompt.is_empty() {
        return Err(Error::invalid_input("prompt must not be empty"));
    }
    if cfg.eos_token >= config.vocab_size {
        return Err(Error::invalid_config(format!(
            "eos token {} outside vocabulary of {}",
            cfg.eos_token, config.vocab_size
        )));
    }
    let start = Instant::now();
    let mut rng = Rng::new(cfg.seed).substream("decode");
    let lambda = cfg.effective_lambda();
    let n = config.n_visual;
    let keep = if matches!(cfg.variant, Variant::TextOnly | Variant::Baseline) {
        n
    } else {
        cfg.retained_count(n)
    };
    let room = config.max_seq.saturating_sub(n + prompt.len() - 1);
    let limit = cfg.max_new_tokens.min(room);
    let mut generated: Vec<usize> = Vec::with_capacity(limit);
    let mut per_step = Vec::with_capacity(limit);
    // the mask carried into the next step under sample-then-mask
    let mut carried = SoftVisualMask::hard(&vec![true; n]);

    while generated.len() < limit {
        let mask = match cfg.order {
            StepOrder::MaskThenSample => masks.mask(&MaskRequest {
                patches,
                prompt,
                generated: &generated,
                target: None,
                keep,
            })?,
            StepOrder::SampleThenMask => carried.clone(),
        };
        let use_mask = (!mask.is_all_ones()).then_some(&mask);
        let f_v = forward(params, config, Some(patches), prompt, &generated, use_mask)?.logits;
        let f_x = forward(params, config, None, prompt, &generated, None)?.logits;
        let logp_v = tensor::log_softmax_slice(f_v.data());
        let logp_x = tensor::log_softmax_slice(f_x.data());
        let p_v: Vec<f32> = logp_v.iter().map(|l| l.exp()).collect();
        let calibrated = calibrate_logits(&f_v, &f_x, lambda)?;
        let candidates = truncate_candidates(&p_v, cfg.delta);
        let (token, entropy) = sample(&calibrated, &candidates, cfg.sampler, &mut rng);
        per_step.push(StepRecord {
            token,
            entropy,
            retained: mask.retained(),
            log_ratio: floored_log(logp_v[token]) - floored_log(logp_x[token]),
            mask: mask.keep(),
        });
        if cfg.order == StepOrder::SampleThenMask {
            carried = masks.mask(&MaskRequest {
                patches,
                prompt,
                generated: &generated,
                target: Some(token),
                keep,
            })?;
        }
        generated.push(token);
        if token == cfg.eos_token {
            break;
        }
    }
    let wall_time = start.elapsed().as_secs_f64();
    Ok(DecodeResult {
        tokens_per_second: if wall_time > 0.0 {
            generated.len() as f64 / wall_time
        } else {
            0.0
        },
        tokens: generated,
        per_step,
        wall_time,
    })
}

/// Samples from `softmax(logits)` restricted to `candidates`; returns the
/// token and the entropy of that restricted distribution.
fn sample(logits: &Tensor, candidates: &[usize], sampler: Sampler, rng: &mut Rng) -> (usize, f64) {
    let sub: Vec<f32> = candidates.iter().map(|&j| logits.data()[j]).collect();
    let probs = tensor::softmax_slice(&sub);
    let entropy = -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p as f64 * (p as f64).ln())
        .sum::<f64>();
    let pick = match sampler {
        Sampler::Greedy => tensor::argmax(&sub),
        Sampler::Multinomial => draw(&probs, &(0..probs.len()).collect::<Vec<_>>(), rng),
        Sampler::TopP(p) => {
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let mut mass = 0.0f32;
            let mut nucleus = Vec::new();
            for i in order {
                nucleus.push(i);
                mass += probs[i];
                if mass >= p {
                    break;
                }
            }
            draw(&probs, &nucleus, rng)
        }
    };
    (candidates[pick], entropy)
}

/// Draws an index from `subset` with probability proportional to `probs`.
fn draw(probs: &[f32], subset: &[usize], rng: &mut Rng) -> usize {
    let total: f64 = subset.iter().map(|&i| probs[i] as f64).sum();
    let mut u = rng.uniform() * total;
    for &i in subset {
        u -= probs[i] as f64;
        if u < 0.0 {
            return i;
        }
    }
    *subset.last().expect("non-empty subset")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpmi::cpmi_with_step_masks;
    use crate::model::randn;
    use crate::purifier::{PurifierConfig, PurifierParams};
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn calibration_examples() {
        let fv = Tensor::vector(vec![2.0, 0.0]);
        let fx = Tensor::vector(vec![0.0, 2.0]);
        assert_eq!(calibrate_logits(&fv, &fx, 0.5).unwrap().data(), &[3.0, -1.0]);
        assert_eq!(calibrate_logits(&fv, &fx, 0.0).unwrap(), fv);
        assert!(matches!(
            calibrate_logits(&fv, &Tensor::vector(vec![1.0]), 0.5),
            Err(Error::InvalidInput(_))
        ));
        assert_eq!(DecodeConfig::default().lambda, 0.5);
    }

    #[test]
    fn truncation_examples() {
        let mut p = vec![0.5, 0.3, 0.04];
        p.extend(std::iter::repeat(0.16 / 7.0).take(7));
        assert_eq!(truncate_candidates(&p, 0.1), vec![0, 1]);
        let q = [0.2, 0.0, 0.5, 0.3];
        assert_eq!(truncate_candidates(&q, 0.0), vec![0, 2, 3]);
        assert_eq!(truncate_candidates(&q, 1.0), vec![2]);
    }

    proptest! {
        #[test]
        fn zero_lambda_gives_softmax_of_image_logits(
            fv in prop::collection::vec(-20.0f32..20.0, 8),
            fx in prop::collection::vec(-20.0f32..20.0, 8),
        ) {
            let c = calibrate_logits(&Tensor::vector(fv.clone()), &Tensor::vector(fx), 0.0).unwrap();
            prop_assert_eq!(tensor::softmax_slice(c.data()), tensor::softmax_slice(&fv));
        }

        #[test]
        fn candidate_set_holds_argmax_and_respects_threshold(
            raw in prop::collection::vec(0.0f32..1.0, 1..30),
            delta in 0.0f32..=1.0,
        ) {
            let total: f32 = raw.iter().sum::<f32>().max(1e-6);
            let p: Vec<f32> = raw.iter().map(|x| x / total).collect();
            let c = truncate_candidates(&p, delta);
            let best = tensor::argmax(&p);
            prop_assert!(c.contains(&best));
            let max = p[best];
            for j in 0..p.len() {
                prop_assert_eq!(c.contains(&j), p[j] >= delta * max && (delta > 0.0 || p[j] > 0.0) || j == best);
            }
        }

        #[test]
        fn sampled_token_lies_in_candidates(
            logits in prop::collection::vec(-5.0f32..5.0, 2..20),
            seed in 0u64..1000,
            kind in 0usize..3,
        ) {
            let cands: Vec<usize> = (0..logits.len()).step_by(2).collect();
            let sampler = [Sampler::Greedy, Sampler::Multinomial, Sampler::TopP(0.7)][kind];
            let mut rng = Rng::new(seed);
            let (tok, h) = sample(&Tensor::vector(logits), &cands, sampler, &mut rng);
            prop_assert!(cands.contains(&tok));
            prop_assert!(h >= -1e-9 && h <= (cands.len() as f64).ln() + 1e-6);
        }
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let logits = Tensor::vector(vec![1.0, 3.0, 3.0, 0.0]);
        let (tok, _) = sample(&logits, &[0, 1, 2, 3], Sampler::Greedy, &mut Rng::new(0));
        assert_eq!(tok, 1);
    }

    #[test]
    fn sampler_and_variant_parsing() {
        assert_eq!(Sampler::parse("greedy").unwrap(), Sampler::Greedy);
        assert_eq!(Sampler::parse("top_p(0.9)").unwrap(), Sampler::TopP(0.9));
        assert_eq!(Sampler::parse("top_p=0.5").unwrap(), Sampler::TopP(0.5));
        assert!(Sampler::parse("top_p(1.5)").is_err());
        assert!(Sampler::parse("beam").is_err());
        for v in ["full", "text_only", "vision_only", "learning_free", "baseline"] {
            assert_eq!(Variant::parse(v).unwrap().as_str(), v);
        }
        assert!(Variant::parse("other").is_err());
    }

    #[test]
    fn config_validation() {
        let ok = DecodeConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            DecodeConfig { lambda: -0.1, ..ok.clone() },
            DecodeConfig { gamma: 0.0, ..ok.clone() },
            DecodeConfig { gamma: 1.1, ..ok.clone() },
            DecodeConfig { tau: 0.0, ..ok.clone() },
            DecodeConfig { delta: 1.5, ..ok.clone() },
            DecodeConfig { alpha: -1.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
        assert_eq!(DecodeConfig { gamma: 0.8, ..ok.clone() }.retained_count(16), 13);
        assert_eq!(DecodeConfig { gamma: 0.75, ..ok.clone() }.retained_count(8), 6);
        assert_eq!(DecodeConfig { gamma: 0.01, ..ok }.retained_count(8), 1);
    }

    fn setup() -> (ModelConfig, TinyLvlmParams, Purifier, Tensor) {
        let cfg = ModelConfig {
            vocab_size: 24,
            n_visual: 8,
            d_patch: 4,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            n_layers: 3,
            mlp_hidden: 32,
            max_seq: 24,
            purify_layer: 1,
        };
        let mut rng = Rng::new(21);
        let p = TinyLvlmParams::init(&cfg, &mut rng).unwrap();
        let pc = PurifierConfig {
            d_inner: 4,
            ..PurifierConfig::for_model(&cfg)
        };
        let pp = PurifierParams::init(&pc, usize::MAX, &mut rng).unwrap();
        let v = randn(&[8, 4], 1.0, &mut rng);
        (cfg, p, Purifier { config: pc, params: pp }, v)
    }

    #[test]
    fn full_with_no_contrast_and_full_retention_equals_baseline() {
        let (cfg, p, pur, v) = setup();
        let base = DecodeConfig {
            variant: Variant::Baseline,
            max_new_tokens: 10,
            eos_token: 23,
            ..Default::default()
        };
        let full = DecodeConfig {
            variant: Variant::Full,
            lambda: 0.0,
            gamma: 1.0,
            ..base.clone()
        };
        let a = decode(&p, &cfg, Some(&pur), &v, &[1, 3], &base).unwrap();
        let b = decode(&p, &cfg, Some(&pur), &v, &[1, 3], &full).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(b.per_step.iter().all(|s| s.retained == 8));
    }

    #[test]
    fn steering_hook_rewrites_features() {
        struct Replace(Tensor);
        impl FeatureSteering for Replace {
            fn steer(&mut self, _: &Tensor) -> Result<Tensor> {
                Ok(self.0.clone())
            }
        }
        let (cfg, p, _, v) = setup();
        let c = DecodeConfig {
            variant: Variant::Baseline,
            max_new_tokens: 8,
            eos_token: 23,
            ..Default::default()
        };
        let plain = decode_with(&p, &cfg, &v, &[1], &c, &mut FullImage).unwrap();
        let noop = decode_steered(&p, &cfg, &v, &[1], &c, &mut FullImage, &mut NoSteering).unwrap();
        assert_eq!(plain.per_step, noop.per_step);
        let other = randn(&[8, 4], 1.0, &mut Rng::new(99));
        let direct = decode_with(&p, &cfg, &other, &[1], &c, &mut FullImage).unwrap();
        let steered = decode_steered(&p, &cfg, &v, &[1], &c, &mut FullImage, &mut Replace(other)).unwrap();
        assert_eq!(direct.per_step, steered.per_step);
        let bad = decode_steered(&p, &cfg, &v, &[1], &c, &mut FullImage, &mut Replace(Tensor::zeros(&[2, 2])));
        assert!(bad.is_err());
    }

    #[test]
    fn multinomial_is_deterministic_per_seed() {
        let (cfg, p, pur, v) = setup();
        let c = DecodeConfig {
            sampler: Sampler::Multinomial,
            delta: 0.0,
            seed: 5,
            max_new_tokens: 12,
            eos_token: 23,
            ..Default::default()
        };
        let a = decode(&p, &cfg, Some(&pur), &v, &[1], &c).unwrap();
        let b = decode(&p, &cfg, Some(&pur), &v, &[1], &c).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.per_step, b.per_step);
        let other = decode(&p, &cfg, Some(&pur), &v, &[1], &DecodeConfig { seed: 6, ..c }).unwrap();
        assert_ne!(a.tokens, other.tokens);
    }

    #[test]
    fn greedy_choice_maximizes_calibrated_score_each_step() {
        let (cfg, p, pur, v) = setup();
        let c = DecodeConfig {
            delta: 0.0,
            lambda: 1.5,
            max_new_tokens: 8,
            eos_token: 23,
            ..Default::default()
        };
        let r = decode(&p, &cfg, Some(&pur), &v, &[1, 3], &c).unwrap();
        for (t, step) in r.per_step.iter().enumerate() {
            let mask = SoftVisualMask::hard(&step.mask);
            let fv = forward(&p, &cfg, Some(&v), &[1, 3], &r.tokens[..t], Some(&mask)).unwrap().logits;
            let fx = forward(&p, &cfg, None, &[1, 3], &r.tokens[..t], None).unwrap().logits;
            let score: Vec<f32> = fv.data().iter().zip(fx.data()).map(|(a, b)| 2.5 * a - 1.5 * b).collect();
            let best = score.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(score[step.token] >= best - 1e-5);
            assert_eq!(step.retained, 6);
        }
    }

    #[test]
    fn step_log_ratios_sum_to_masked_cpmi() {
        let (cfg, p, pur, v) = setup();
        for order in [StepOrder::MaskThenSample, StepOrder::SampleThenMask] {
            let c = DecodeConfig {
                max_new_tokens: 10,
                eos_token: 23,
                order,
                ..Default::default()
            };
            let r = decode(&p, &cfg, Some(&pur), &v, &[1, 3], &c).unwrap();
            assert_eq!(r.tokens.len(), r.per_step.len());
            let report = cpmi_with_step_masks(&p, &cfg, &v, &[1, 3], &r.tokens, &r.step_masks()).unwrap();
            let sum: f64 = r.per_step.iter().map(|s| s.log_ratio).sum();
            assert!((sum - report.total).abs() < 1e-4, "{sum} vs {}", report.total);
        }
    }

    #[test]
    fn sample_then_mask_starts_from_full_image() {
        let (cfg, p, pur, v) = setup();
        let c = DecodeConfig {
            max_new_tokens: 4,
            eos_token: 23,
            order: StepOrder::SampleThenMask,
            ..Default::default()
        };
        let r = decode(&p, &cfg, Some(&pur), &v, &[1], &c).unwrap();
        assert_eq!(r.per_step[0].retained, 8);
        assert!(r.per_step[1..].iter().all(|s| s.retained == 6));
    }

    #[test]
    fn stops_at_eos_and_length_limits() {
        let (cfg, p, pur, v) = setup();
        let first = decode(
            &p,
            &cfg,
            Some(&pur),
            &v,
            &[1],
            &DecodeConfig {
                max_new_tokens: 1,
                eos_token: 23,
                ..Default::default()
            },
        )
        .unwrap();
        let eos = first.tokens[0];
        let r = decode(
            &p,
            &cfg,
            Some(&pur),
            &v,
            &[1],
            &DecodeConfig {
                max_new_tokens: 10,
                eos_token: eos,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.tokens, vec![eos]);
        // sequence capacity caps generation: 24 slots − 8 visual − 1 prompt + 1
        let long = decode(
            &p,
            &cfg,
            Some(&pur),
            &v,
            &[1],
            &DecodeConfig {
                max_new_tokens: 100,
                eos_token: 23,
                variant: Variant::Baseline,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(long.tokens.len() <= 16);
    }

    #[test]
    fn missing_purifier_or_mismatch_is_a_config_error() {
        let (cfg, p, pur, v) = setup();
        let c = DecodeConfig::default();
        assert!(matches!(decode(&p, &cfg, None, &v, &[1], &c), Err(Error::InvalidConfig(_))));
        let mut wrong = pur.clone();
        wrong.config.n_visual = 4;
        assert!(matches!(
            decode(&p, &cfg, Some(&wrong), &v, &[1], &c),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn result_round_trips_through_json() {
        let (cfg, p, pur, v) = setup();
        let r = decode(
            &p,
            &cfg,
            Some(&pur),
            &v,
            &[1],
            &DecodeConfig {
                max_new_tokens: 3,
                eos_token: 23,
                ..Default::default()
            },
        )
        .unwrap();
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let back: DecodeResult = serde_json::from_str(&line).unwrap();
        assert_eq!(back.tokens, r.tokens);
    }
}
