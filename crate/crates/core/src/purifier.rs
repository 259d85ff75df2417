//! Learned visual token purifier.
//!
//! A small bidirectional transformer reads the model's input embeddings
//! (visual slots first, then prompt and generated text) and emits a
//! drop/retain distribution for every visual slot. It is trained through a
//! Gumbel-Softmax relaxation against the frozen model: the loss rewards a
//! high C-PMI for the next caption token and high attention toward the kept
//! slots, and penalizes deviation from the target retention ratio.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gumbel_noise, gumbel_softmax_with_noise, Tape, Var};
use crate::cpmi::next_token_log_prob;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, randn, LvlmExample, LvlmVars, ModelConfig, SoftVisualMask, TinyLvlmParams};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifierConfig {
    pub n_blocks: usize,
    /// Width of the model embeddings fed in.
    pub d_model: usize,
    /// Internal width after the input projection.
    pub d_inner: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub n_visual: usize,
    pub max_seq: usize,
    pub tau: f32,
}

impl PurifierConfig {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            n_blocks: 1,
            d_model: model.d_model,
            d_inner: 8,
            n_heads: 2,
            mlp_hidden: 16,
            n_visual: model.n_visual,
            max_seq: model.max_seq,
            tau: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.d_inner == 0 || self.n_heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid_config("purifier sizes must be positive"));
        }
        if self.d_inner % self.n_heads != 0 {
            return Err(Error::invalid_config(format!(
                "d_inner {} not divisible by n_heads {}",
                self.d_inner, self.n_heads
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid_config("tau must be positive"));
        }
        Ok(())
    }

    /// Checks that this purifier can run against `model`.
    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        if self.d_model != model.d_model || self.n_visual != model.n_visual || self.max_seq < model.max_seq {
            return Err(Error::invalid_config(format!(
                "purifier (d_model {}, n_visual {}, max_seq {}) does not match model (d_model {}, n_visual {}, max_seq {})",
                self.d_model, self.n_visual, self.max_seq, model.d_model, model.n_visual, model.max_seq
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurifierBlock {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PurifierParams {
    pub in_proj: Tensor,
    pub in_bias: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<PurifierBlock>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head: Tensor,
    pub head_bias: Tensor,
}

impl PurifierParams {
    /// Random initialization. Fails when the purifier would carry 1% or more
    /// of `model_param_count`.
    pub fn init(config: &PurifierConfig, model_param_count: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let di = config.d_inner;
        let s = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
        let blocks = (0..config.n_blocks)
            .map(|_| PurifierBlock {
                ln1_gain: Tensor::full(&[di], 1.0),
                ln1_bias: Tensor::zeros(&[di]),
                wq: randn(&[di, di], s(di), rng),
                wk: randn(&[di, di], s(di), rng),
                wv: randn(&[di, di], s(di), rng),
                wo: randn(&[di, di], s(di) * 0.5, rng),
                ln2_gain: Tensor::full(&[di], 1.0),
                ln2_bias: Tensor::zeros(&[di]),
                w1: randn(&[di, config.mlp_hidden], s(di), rng),
                b1: Tensor::zeros(&[config.mlp_hidden]),
                w2: randn(&[config.mlp_hidden, di], s(config.mlp_hidden) * 0.5, rng),
                b2: Tensor::zeros(&[di]),
            })
            .collect();
        let params = Self {
            in_proj: randn(&[config.d_model, di], s(config.d_model), rng),
            in_bias: Tensor::zeros(&[di]),
            pos_emb: randn(&[config.max_seq, di], 0.1, rng),
            blocks,
            lnf_gain: Tensor::full(&[di], 1.0),
            lnf_bias: Tensor::zeros(&[di]),
            head: randn(&[di, 2], 0.1, rng),
            head_bias: Tensor::zeros(&[2]),
        };
        let count = params.param_count();
        if count * 100 >= model_param_count {
            return Err(Error::invalid_config(format!(
                "purifier has {count} parameters, not under 1% of the model's {model_param_count}"
            )));
        }
        Ok(params)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.in_proj, &self.in_bias, &self.pos_emb];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w1,
                &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.head, &self.head_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.in_proj, &mut self.in_bias, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.head,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["in_proj", "in_bias", "pos_emb"].iter().map(|s| s.to_string()).collect();
        for i in 0..self.blocks.len() {
            out.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{i}.{f}")));
        }
        out.extend(["lnf_gain", "lnf_bias", "head", "head_bias"].iter().map(|s| s.to_string()));
        out
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names().into_iter().zip(self.tensors().into_iter().cloned()).collect()
    }

    pub fn from_named(config: &PurifierConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut template = Self::init(config, usize::MAX, &mut Rng::new(0))?;
        let mut by_name: std::collections::BTreeMap<String, Tensor> = named.into_iter().collect();
        let names = template.names();
        if by_name.len() != names.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} arrays, found {}",
                names.len(),
                by_name.len()
            )));
        }
        for (name, slot) in names.iter().zip(template.tensors_mut()) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing array {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "array {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(template)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Drop/retain distribution; column 0 drops, column 1 retains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDistribution {
    pub pi: Tensor,
}

impl MaskDistribution {
    pub fn new(pi: Tensor) -> Result<Self> {
        if pi.rank() != 2 || pi.shape()[1] != 2 {
            return Err(Error::invalid_input(format!("pi must be N×2, got {:?}", pi.shape())));
        }
        for row in pi.data().chunks(2) {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row[0] + row[1] - 1.0).abs() > 1e-5 {
                return Err(Error::invalid_input("pi rows must be distributions"));
            }
        }
        Ok(Self { pi })
    }

    pub fn len(&self) -> usize {
        self.pi.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn retain_probs(&self) -> Vec<f32> {
        self.pi.data().chunks(2).map(|r| r[1]).collect()
    }
}

/// Row-wise argmax over {drop, retain}; an exact tie keeps the token.
pub fn extract_mask(dist: &MaskDistribution) -> SoftVisualMask {
    let keep: Vec<bool> = dist.pi.data().chunks(2).map(|r| r[1] >= r[0]).collect();
    SoftVisualMask::hard(&keep)
}

/// Keeps exactly `k` tokens with the highest retention probability; ties go
/// to the lower index.
pub fn top_k_mask(dist: &MaskDistribution, k: usize) -> SoftVisualMask {
    let probs = dist.retain_probs();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; probs.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    SoftVisualMask::hard(&keep)
}

/// `|sum(weights)/N − γ|`.
pub fn retention_penalty(weights: &[f32], gamma: f32) -> f32 {
    (weights.iter().sum::<f32>() / weights.len() as f32 - gamma).abs()
}

/// The model's input embeddings for `prompt ++ generated`, as the purifier
/// consumes them.
pub fn purifier_input(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    visual: &Tensor,
    text: &[usize],
) -> Result<Tensor> {
    let (n, d) = (config.n_visual, config.d_model);
    if n + text.len() > config.max_seq {
        return Err(Error::SequenceTooLong {
            len: n + text.len(),
            max: config.max_seq,
        });
    }
    if visual.shape() != [n, config.d_patch] {
        return Err(Error::invalid_input(format!(
            "visual patches have shape {:?}, expected [{n}, {}]",
            visual.shape(),
            config.d_patch
        )));
    }
    if let Some(t) = text.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::invalid_input(format!("token {t} outside vocabulary")));
    }
    let mut out = vec![0.0f32; (n + text.len()) * d];
    tensor::matmul_acc(visual.data(), params.vis_proj.data(), &mut out[..n * d], n, config.d_patch, d);
    let pos = params.pos_emb.data();
    for (r, row) in out.chunks_mut(d).enumerate() {
        if r < n {
            tensor::axpy(1.0, params.vis_bias.data(), row);
        } else {
            let tok = text[r - n];
            tensor::axpy(1.0, &params.tok_emb.data()[tok * d..(tok + 1) * d], row);
        }
        tensor::axpy(1.0, &pos[r * d..(r + 1) * d], row);
    }
    Tensor::new(vec![n + text.len(), d], out)
}

/// Purifier logits `N×2` on a tape.
pub fn purifier_logits<'t>(pvars: &[Var<'t>], config: &PurifierConfig, z: Var<'t>) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != config.d_model {
        return Err(Error::invalid_config(format!(
            "purifier expects width {}, got shape {:?}",
            config.d_model, shape
        )));
    }
    let n = shape[0];
    if n < config.n_visual || n > config.max_seq {
        return Err(Error::invalid_config(format!(
            "purifier input has {n} rows; needs between {} and {}",
            config.n_visual, config.max_seq
        )));
    }
    let mut it = pvars.iter().copied();
    let mut next = || it.next().expect("purifier parameter list");
    let (in_proj, in_bias, pos) = (next(), next(), next());
    let positions: Vec<usize> = (0..n).collect();
    let mut h = z.matmul(in_proj).add_bias(in_bias).add(pos.gather_rows(&positions));
    for _ in 0..config.n_blocks {
        let (g1, b1n, wq, wk, wv, wo, g2, b2n, w1, b1, w2, b2) = (
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
            next(),
        );
        let a = h.layer_norm(g1, b1n);
        let probs = a.matmul(wq).attn_probs_full(a.matmul(wk), config.n_heads, None);
        h = h.add(probs.attn_apply(a.matmul(wv)).matmul(wo));
        let m = h.layer_norm(g2, b2n).matmul(w1).add_bias(b1).gelu().matmul(w2).add_bias(b2);
        h = h.add(m);
    }
    let (gf, bf, head, head_bias) = (next(), next(), next(), next());
    Ok(h
        .slice_rows(0, config.n_visual)
        .layer_norm(gf, bf)
        .matmul(head)
        .add_bias(head_bias))
}

/// `π = softmax(P(z))` for embeddings `z` (`n × d_model`, visual rows first).
pub fn purifier_forward(pp: &PurifierParams, config: &PurifierConfig, z: &Tensor) -> Result<MaskDistribution> {
    let tape = Tape::new();
    let pvars = pp.bind(&tape, false);
    let logits = purifier_logits(&pvars, config, tape.constant(z.clone()))?;
    Ok(MaskDistribution {
        pi: logits.softmax_rows().value().as_ref().clone(),
    })
}

/// Trained purifier weights together with their config.
#[derive(Debug, Clone, PartialEq)]
pub struct Purifier {
    pub config: PurifierConfig,
    pub params: PurifierParams,
}

impl Purifier {
    /// Mask distribution for the image `patches` and context `text`.
    pub fn distribution(
        &self,
        model: &TinyLvlmParams,
        model_config: &ModelConfig,
        patches: &Tensor,
        text: &[usize],
    ) -> Result<MaskDistribution> {
        self.config.check_compatible(model_config)?;
        let z = purifier_input(model, model_config, patches, text)?;
        purifier_forward(&self.params, &self.config, &z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifierTrainConfig {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub tau: f32,
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Take the attention term from the masked pass (weighted by the soft
    /// mask) rather than from the unmasked pass.
    pub attn_on_masked_pass: bool,
}

impl Default for PurifierTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 500.0,
            gamma: 0.8,
            tau: 0.5,
            learning_rate: 1e-2,
            epochs: 5,
            batch_size: 16,
            seed: 0,
            attn_on_masked_pass: true,
        }
    }
}

impl PurifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::invalid_config("alpha and beta must be non-negative"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid_config("gamma must lie in (0, 1]"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid_config("epochs and batch_size must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid_config("tau must be positive"));
        }
        Ok(())
    }
}

/// One captioned scene used for purifier training.
#[derive(Debug, Clone, PartialEq)]
pub struct PurifierSample {
    pub patches: Tensor,
    pub prompt: Vec<usize>,
    pub caption: Vec<usize>,
}

impl From<LvlmExample> for PurifierSample {
    fn from(ex: LvlmExample) -> Self {
        Self {
            patches: ex.patches,
            prompt: ex.prompt,
            caption: ex.target,
        }
    }
}

/// The loss and its parts, all on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<'t> {
    pub loss: Var<'t>,
    pub log_ratio: Var<'t>,
    pub attention: Var<'t>,
    pub penalty: Var<'t>,
    pub soft_mask: Var<'t>,
}

/// Everything the loss needs about the frozen model at one decoding step.
pub struct StepContext<'a, 't> {
    pub lvlm: &'a LvlmVars<'t>,
    pub model_config: &'a ModelConfig,
    pub patches: &'a Tensor,
    /// `prompt ++ y_<t`.
    pub text: &'a [usize],
    pub n_prompt: usize,
    pub target: usize,
    /// `ln p(y_t | x, y_<t)` from the text-only branch.
    pub text_log_prob: f64,
}

/// Loss at one decoding step given Gumbel noise for the relaxation:
/// `−[(ln p(y_t | v∘m, x, y_<t) − ln p(y_t | x, y_<t)) + α·Attn_i(v; m)] + β·|sum(m)/N − γ|`.
pub fn training_loss_with_noise<'t>(
    step: &StepContext<'_, 't>,
    pvars: &[Var<'t>],
    pc: &PurifierConfig,
    tc: &PurifierTrainConfig,
    noise: &Tensor,
) -> Result<LossParts<'t>> {
    let tape = pvars[0].tape();
    let mc = step.model_config;
    let z = step.lvlm.embed(mc, Some(step.patches), step.text);
    let logits = purifier_logits(pvars, pc, tape.constant(z.value().as_ref().clone()))?;
    let relaxed = gumbel_softmax_with_noise(logits, tc.tau, noise)?;
    let soft_mask = relaxed.column(1);
    let out = forward_on_tape(step.lvlm, mc, Some(step.patches), step.text, step.n_prompt, Some(soft_mask))?;
    let log_p = out.last_logits(step.lvlm).log_softmax_rows().pick(&[step.target]).sum();
    let log_ratio = log_p.add_const(&Tensor::scalar(-(step.text_log_prob as f32)));
    let attention = if tc.attn_on_masked_pass {
        out.attention[mc.purify_layer].last_row_mass(Some(soft_mask), mc.n_visual)
    } else {
        let plain = forward_on_tape(step.lvlm, mc, Some(step.patches), step.text, step.n_prompt, None)?;
        plain.attention[mc.purify_layer].last_row_mass(None, mc.n_visual)
    };
    let n = mc.n_visual as f32;
    let penalty = soft_mask
        .sum()
        .scale(1.0 / n)
        .add_const(&Tensor::scalar(-tc.gamma))
        .abs();
    let score = log_ratio.add(attention.scale(tc.alpha));
    let loss = score.scale(-1.0).add(penalty.scale(tc.beta));
    Ok(LossParts {
        loss,
        log_ratio,
        attention,
        penalty,
        soft_mask,
    })
}

/// Loss for caption step `t` of `sample`, drawing Gumbel noise from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<'t>(
    tape: &'t Tape,
    params: &TinyLvlmParams,
    config: &ModelConfig,
    pvars: &[Var<'t>],
    pc: &PurifierConfig,
    sample: &PurifierSample,
    t: usize,
    tc: &PurifierTrainConfig,
    rng: &mut Rng,
) -> Result<LossParts<'t>> {
    if t >= sample.caption.len() {
        return Err(Error::invalid_input(format!(
            "step {t} outside caption of length {}",
            sample.caption.len()
        )));
    }
    let noise = gumbel_noise(&[config.n_visual, 2], rng);
    let text: Vec<usize> = sample.prompt.iter().chain(&sample.caption[..t]).copied().collect();
    let text_log_prob = next_token_log_prob(
        params,
        config,
        None,
        &sample.prompt,
        &sample.caption[..t],
        sample.caption[t],
        None,
    )?;
    let lvlm = params.bind(tape, false);
    let step = StepContext {
        lvlm: &lvlm,
        model_config: config,
        patches: &sample.patches,
        text: &text,
        n_prompt: sample.prompt.len(),
        target: sample.caption[t],
        text_log_prob,
    };
    training_loss_with_noise(&step, pvars, pc, tc, &noise)
}

/// Trains the purifier against the frozen model. Each epoch draws one step
/// per caption. Returns the weights and the mean loss of every epoch.
pub fn train_purifier(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    pc: &PurifierConfig,
    init: &PurifierParams,
    corpus: &[PurifierSample],
    tc: &PurifierTrainConfig,
) -> Result<(PurifierParams, Vec<f32>)> {
    if corpus.is_empty() {
        return Err(Error::invalid_input("empty purifier training corpus"));
    }
    tc.validate()?;
    pc.check_compatible(config)?;
    let mut rng = Rng::new(tc.seed);
    let mut pp = init.clone();
    let mut opt = Adam::new(tc.learning_rate, &pp.tensors());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    for _ in 0..tc.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let mut grads: Vec<Tensor> = pp.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut used = 0usize;
            for &i in batch {
                let sample = &corpus[i];
                if sample.caption.is_empty() {
                    continue;
                }
                let t = rng.below(sample.caption.len());
                let tape = Tape::new();
                let pvars = pp.bind(&tape, true);
                let parts = training_loss(&tape, params, config, &pvars, pc, sample, t, tc, &mut rng)?;
                let value = parts.loss.item();
                if !value.is_finite() {
                    return Err(Error::Numerical("non-finite purifier loss".into()));
                }
                total += value as f64;
                count += 1;
                used += 1;
                tape.backward(parts.loss)?;
                for (g, v) in grads.iter_mut().zip(&pvars) {
                    if let Some(vg) = v.grad() {
                        tensor::axpy(1.0, vg.data(), g.data_mut());
                    }
                }
            }
            if used == 0 {
                continue;
            }
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x /= used as f32);
            }
            opt.step(&mut pp.tensors_mut(), &grads);
        }
        epoch_losses.push(if count > 0 { (total / count as f64) as f32 } else { 0.0 });
    }
    Ok((pp, epoch_losses))
}
