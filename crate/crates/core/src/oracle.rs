//! Brute-force references: exhaustive search over visual masks, the
//! learning-free decoder built on it, and a check of the chain-rule
//! factorization of C-PMI.

use serde::{Deserialize, Serialize};

use crate::cpmi::{cpmi_pointwise, floored_log, next_token_log_prob, sequence_log_prob};
use crate::decoding::{decode_with, DecodeConfig, DecodeResult, MaskProvider, MaskRequest, Variant};
use crate::error::{Error, Result};
use crate::model::{attn_aggregate, forward, randn, ModelConfig, SoftVisualMask, TinyLvlmParams};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Default limit on the number of masks one search may score.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best_mask: Vec<bool>,
    pub best_score: f64,
    /// Every mask with its score, in enumeration order, when requested.
    pub all_scores: Option<Vec<(Vec<bool>, f64)>>,
    pub enumerated_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub cap: u128,
    pub keep_all_scores: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_ENUMERATION_CAP,
            keep_all_scores: false,
        }
    }
}

/// `C(n, k)` without overflow for the sizes used here.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// One step's scoring context for the lower subproblem.
pub struct MaskObjective<'a> {
    pub params: &'a TinyLvlmParams,
    pub config: &'a ModelConfig,
    pub patches: &'a Tensor,
    pub prompt: &'a [usize],
    pub prefix: &'a [usize],
    pub target: usize,
    pub alpha: f32,
    /// `ln p(target | x, prefix)` from the text-only branch.
    pub text_log_prob: f64,
}

impl<'a> MaskObjective<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &'a TinyLvlmParams,
        config: &'a ModelConfig,
        patches: &'a Tensor,
        prompt: &'a [usize],
        prefix: &'a [usize],
        target: usize,
        alpha: f32,
    ) -> Result<Self> {
        let text_log_prob = next_token_log_prob(params, config, None, prompt, prefix, target, None)?;
        Ok(Self {
            params,
            config,
            patches,
            prompt,
            prefix,
            target,
            alpha,
            text_log_prob,
        })
    }

    /// `α·Attn_i(v; m) + ln p(y_t | v∘m, x, y_<t) − ln p(y_t | x, y_<t)`.
    pub fn score(&self, mask: &SoftVisualMask) -> Result<f64> {
        let used = (!mask.is_all_ones()).then_some(mask);
        let trace = forward(self.params, self.config, Some(self.patches), self.prompt, self.prefix, used)?;
        let attn = attn_aggregate(&trace, self.config.purify_layer, Some(mask))? as f64;
        let logp = floored_log(tensor::log_softmax_slice(trace.logits.data())[self.target]);
        Ok(self.alpha as f64 * attn + logp - self.text_log_prob)
    }
}

/// Scores every mask keeping exactly `k` of the `N` visual slots and
/// returns the best. Equal scores go to the lexicographically smallest mask
/// (dropped slot before kept slot).
pub fn oracle_mask_search(objective: &MaskObjective<'_>, k: usize, opts: SearchOptions) -> Result<OracleResult> {
    let n = objective.config.n_visual;
    if k == 0 || k > n {
        return Err(Error::invalid_input(format!("retained count {k} outside [1, {n}]")));
    }
    let count = binomial(n, k);
    if count > opts.cap {
        return Err(Error::EnumerationTooLarge { count, cap: opts.cap });
    }
    let mut best: Option<(Vec<bool>, f64)> = None;
    let mut all = opts.keep_all_scores.then(|| Vec::with_capacity(count as usize));
    let mut idx: Vec<usize> = (0..k).collect();
    let mut enumerated = 0u64;
    loop {
        let mut keep = vec![false; n];
        for &i in &idx {
            keep[i] = true;
        }
        let score = objective.score(&SoftVisualMask::hard(&keep))?;
        enumerated += 1;
        let better = match &best {
            None => true,
            Some((bm, bs)) => prefer(&keep, score, bm, *bs),
        };
        if let Some(all) = all.as_mut() {
            all.push((keep.clone(), score));
        }
        if better {
            best = Some((keep, score));
        }
        // next k-combination in lexicographic index order
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    let (best_mask, best_score) = best.expect("at least one mask");
    Ok(OracleResult {
        best_mask,
        best_score,
        all_scores: all,
        enumerated_count: enumerated,
    })
}

/// Whether `(mask, score)` beats the incumbent `(best, best_score)`.
fn prefer(mask: &[bool], score: f64, best: &[bool], best_score: f64) -> bool {
    score > best_score || (score == best_score && mask < best)
}

/// Masks from exhaustive search. Without a known target token the search
/// scores masks against the greedy token under the full image.
pub struct OracleMasks<'a> {
    pub params: &'a TinyLvlmParams,
    pub config: &'a ModelConfig,
    pub alpha: f32,
    pub options: SearchOptions,
}

impl MaskProvider for OracleMasks<'_> {
    fn mask(&mut self, req: &MaskRequest<'_>) -> Result<SoftVisualMask> {
        let n = self.config.n_visual;
        if req.keep >= n {
            return Ok(SoftVisualMask::hard(&vec![true; n]));
        }
        let target = match req.target {
            Some(t) => t,
            None => {
                let trace = forward(self.params, self.config, Some(req.patches), req.prompt, req.generated, None)?;
                tensor::argmax(trace.logits.data())
            }
        };
        let objective = MaskObjective::new(
            self.params,
            self.config,
            req.patches,
            req.prompt,
            req.generated,
            target,
            self.alpha,
        )?;
        let result = oracle_mask_search(&objective, req.keep, self.options)?;
        Ok(SoftVisualMask::hard(&result.best_mask))
    }
}

/// Decoding with exhaustive per-step mask search in place of the purifier.
pub fn lf_decode(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    patches: &Tensor,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    if cfg.variant != Variant::LearningFree {
        return Err(Error::invalid_config(format!(
            "lf_decode needs variant learning_free, got {}",
            cfg.variant.as_str()
        )));
    }
    let mut provider = OracleMasks {
        params,
        config,
        alpha: cfg.alpha,
        options: SearchOptions::default(),
    };
    decode_with(params, config, patches, prompt, cfg, &mut provider)
}

/// Largest deviation, over `trials` random (image, prompt, caption)
/// triples, between the step-by-step sum of log-ratios and the difference
/// of whole-sequence log-likelihoods. Step terms come from a separate
/// forward pass per step; sequence terms from one causal pass each.
pub fn verify_factorization(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    trials: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid_input("trials must be at least 1"));
    }
    let room = config.max_seq - config.n_visual;
    if room < 2 {
        return Err(Error::invalid_config("no room for a prompt and a caption"));
    }
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let patches = randn(&[config.n_visual, config.d_patch], 1.0, rng);
        let n_prompt = 1 + rng.below(3.min(room - 1));
        let max_y = 16.min(room + 1 - n_prompt);
        let n_y = 1 + rng.below(max_y);
        let prompt: Vec<usize> = (0..n_prompt).map(|_| rng.below(config.vocab_size)).collect();
        let y: Vec<usize> = (0..n_y).map(|_| rng.below(config.vocab_size)).collect();
        let mut stepwise = 0.0f64;
        for t in 0..y.len() {
            let with = next_token_log_prob(params, config, Some(&patches), &prompt, &y[..t], y[t], None)?;
            let without = next_token_log_prob(params, config, None, &prompt, &y[..t], y[t], None)?;
            stepwise += with - without;
        }
        let joint = sequence_log_prob(params, config, Some(&patches), &prompt, &y)?
            - sequence_log_prob(params, config, None, &prompt, &y)?;
        let report = cpmi_pointwise(params, config, &patches, &prompt, &y)?;
        worst = worst.max((stepwise - joint).abs()).max((report.total - joint).abs());
    }
    Ok(worst)
}
