//! Sentence likelihoods and conditional pointwise mutual information.
//!
//! The score of a caption `y` is the sum over steps of
//! `ln p(y_t | v, x, y_<t) − ln p(y_t | x, y_<t)`, which equals
//! `ln q(y | v, x) − ln q(y | x)` by the chain rule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{forward, forward_on_tape, ModelConfig, SoftVisualMask, TinyLvlmParams};
use crate::tensor::{self, Tensor};

/// Probabilities are floored here before the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn floored_log(logp: f32) -> f64 {
    (logp as f64).max(PROB_FLOOR.ln())
}

fn check_vocab(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    match tokens.iter().find(|&&t| t >= config.vocab_size) {
        Some(t) => Err(Error::invalid_input(format!(
            "token {t} outside vocabulary of {}",
            config.vocab_size
        ))),
        None => Ok(()),
    }
}

/// `ln p(y_t | ·, x, y_<t)` for every step, from one causal forward pass.
pub fn step_log_probs(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    visual: Option<&Tensor>,
    prompt: &[usize],
    y: &[usize],
    mask: Option<&SoftVisualMask>,
) -> Result<Vec<f64>> {
    check_vocab(config, prompt)?;
    check_vocab(config, y)?;
    if y.is_empty() {
        return Ok(Vec::new());
    }
    if prompt.is_empty() {
        return Err(Error::invalid_input("prompt must not be empty"));
    }
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let text: Vec<usize> = prompt.iter().chain(&y[..y.len() - 1]).copied().collect();
    let mask_var = mask.map(|m| tape.constant(m.weights().clone()));
    let out = forward_on_tape(&vars, config, visual, &text, prompt.len(), mask_var)?;
    let first = config.n_visual + prompt.len() - 1;
    let logits = vars.logits(out.hidden.slice_rows(first, out.layout.len())).value();
    let v = config.vocab_size;
    let steps = y
        .iter()
        .enumerate()
        .map(|(r, &tok)| floored_log(tensor::log_softmax_slice(&logits.data()[r * v..(r + 1) * v])[tok]))
        .collect();
    Ok(steps)
}

/// `ln q(y | ·, x) = Σ_t ln p(y_t | ·, x, y_<t)`.
pub fn sequence_log_prob(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    visual: Option<&Tensor>,
    prompt: &[usize],
    y: &[usize],
) -> Result<f64> {
    Ok(step_log_probs(params, config, visual, prompt, y, None)?.iter().sum())
}

/// Log-probability of `next` after `prompt ++ prefix`, from a dedicated
/// forward pass.
pub fn next_token_log_prob(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    visual: Option<&Tensor>,
    prompt: &[usize],
    prefix: &[usize],
    next: usize,
    mask: Option<&SoftVisualMask>,
) -> Result<f64> {
    check_vocab(config, &[next])?;
    let trace = forward(params, config, visual, prompt, prefix, mask)?;
    Ok(floored_log(tensor::log_softmax_slice(trace.logits.data())[next]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpmiReport {
    pub per_step_log_ratio: Vec<f64>,
    pub total: f64,
    pub with_image_log_prob: f64,
    pub without_image_log_prob: f64,
}

impl CpmiReport {
    fn from_steps(with: Vec<f64>, without: Vec<f64>) -> Self {
        let per_step_log_ratio: Vec<f64> = with.iter().zip(&without).map(|(a, b)| a - b).collect();
        Self {
            total: per_step_log_ratio.iter().sum(),
            per_step_log_ratio,
            with_image_log_prob: with.iter().sum(),
            without_image_log_prob: without.iter().sum(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Per-step C-PMI of `y` for the image `visual` given the prompt.
pub fn cpmi_pointwise(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    visual: &Tensor,
    prompt: &[usize],
    y: &[usize],
) -> Result<CpmiReport> {
    let with = step_log_probs(params, config, Some(visual), prompt, y, None)?;
    let without = step_log_probs(params, config, None, prompt, y, None)?;
    Ok(CpmiReport::from_steps(with, without))
}

/// Like [`cpmi_pointwise`] but with a separate visual mask at every step;
/// `masks[t]` applies to the prediction of `y[t]`.
pub fn cpmi_with_step_masks(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    visual: &Tensor,
    prompt: &[usize],
    y: &[usize],
    masks: &[SoftVisualMask],
) -> Result<CpmiReport> {
    if masks.len() != y.len() {
        return Err(Error::invalid_input(format!(
            "{} masks for {} tokens",
            masks.len(),
            y.len()
        )));
    }
    let without = step_log_probs(params, config, None, prompt, y, None)?;
    let mut with = Vec::with_capacity(y.len());
    for (t, mask) in masks.iter().enumerate() {
        with.push(next_token_log_prob(
            params,
            config,
            Some(visual),
            prompt,
            &y[..t],
            y[t],
            Some(mask),
        )?);
    }
    Ok(CpmiReport::from_steps(with, without))
}
