//! Toy multimodal causal transformer.
//!
//! The sequence is `N` visual slots followed by prompt and generated text.
//! Visual slots hold projected patch vectors; without an image they hold only
//! their positional embedding, so the text-only branch sees no image content.
//! Text positions always start at index `N`, with or without an image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Floor applied to mask weights before taking the log on attention logits.
pub const MASK_FLOOR: f32 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_visual: usize,
    pub d_patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub max_seq: usize,
    pub purify_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            n_visual: 16,
            d_patch: 16,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            n_layers: 4,
            mlp_hidden: 256,
            max_seq: 48,
            purify_layer: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid_config(m));
        if self.d_model != self.n_heads * self.d_head {
            return fail(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.purify_layer >= self.n_layers {
            return fail(format!(
                "purify_layer {} outside [0, {})",
                self.purify_layer, self.n_layers
            ));
        }
        if self.n_visual == 0 {
            return fail("n_visual must be at least 1".into());
        }
        if self.vocab_size == 0 || self.d_patch == 0 || self.mlp_hidden == 0 {
            return fail("vocab_size, d_patch and mlp_hidden must be positive".into());
        }
        if self.max_seq <= self.n_visual {
            return fail(format!(
                "max_seq {} leaves no room for text after {} visual slots",
                self.max_seq, self.n_visual
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
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

const LAYER_FIELDS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
];

impl LayerParams {
    fn fields(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All weights of the toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLvlmParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub vis_proj: Tensor,
    pub vis_bias: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub unembed: Tensor,
}

/// Tensor of independent normal draws with standard deviation `std`.
pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.normal() as f32 * std).collect())
}

impl TinyLvlmParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.mlp_hidden;
        let inv = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
        let resid = inv(d) / (2.0 * config.n_layers as f32).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: randn(&[d, d], inv(d), rng),
                wk: randn(&[d, d], inv(d), rng),
                wv: randn(&[d, d], inv(d), rng),
                wo: randn(&[d, d], resid, rng),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w1: randn(&[d, h], inv(d), rng),
                b1: Tensor::zeros(&[h]),
                w2: randn(&[h, d], inv(h) / (2.0 * config.n_layers as f32).sqrt(), rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            tok_emb: randn(&[config.vocab_size, d], 0.5, rng),
            pos_emb: randn(&[config.max_seq, d], 0.1, rng),
            vis_proj: randn(&[config.d_patch, d], inv(config.d_patch), rng),
            vis_bias: Tensor::zeros(&[d]),
            layers,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            unembed: randn(&[d, config.vocab_size], inv(d), rng),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb, &self.vis_proj, &self.vis_bias];
        for l in &self.layers {
            out.extend(l.fields());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.unembed]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.vis_proj,
            &mut self.vis_bias,
        ];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.unembed]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["tok_emb", "pos_emb", "vis_proj", "vis_bias"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..self.layers.len() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{i}.{f}")));
        }
        out.extend(["lnf_gain", "lnf_bias", "unembed"].iter().map(|s| s.to_string()));
        out
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names()
            .into_iter()
            .zip(self.tensors().into_iter().cloned())
            .collect()
    }

    /// Rebuilds parameters from named arrays, checking every shape against
    /// the config.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut template = Self::init(config, &mut Rng::new(0))?;
        let mut by_name: BTreeMap<String, Tensor> = named.into_iter().collect();
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

    /// Zeroes the patch projection so image content cannot reach the model.
    pub fn zero_visual_pathway(&mut self) {
        self.vis_proj.data_mut().fill(0.0);
        self.vis_bias.data_mut().fill(0.0);
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> LvlmVars<'t> {
        let mk = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LvlmVars {
            tok_emb: mk(&self.tok_emb),
            pos_emb: mk(&self.pos_emb),
            vis_proj: mk(&self.vis_proj),
            vis_bias: mk(&self.vis_bias),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_gain: mk(&l.ln1_gain),
                    ln1_bias: mk(&l.ln1_bias),
                    wq: mk(&l.wq),
                    wk: mk(&l.wk),
                    wv: mk(&l.wv),
                    wo: mk(&l.wo),
                    ln2_gain: mk(&l.ln2_gain),
                    ln2_bias: mk(&l.ln2_bias),
                    w1: mk(&l.w1),
                    b1: mk(&l.b1),
                    w2: mk(&l.w2),
                    b2: mk(&l.b2),
                })
                .collect(),
            lnf_gain: mk(&self.lnf_gain),
            lnf_bias: mk(&self.lnf_bias),
            unembed: mk(&self.unembed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars<'t> {
    pub ln1_gain: Var<'t>,
    pub ln1_bias: Var<'t>,
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
    pub ln2_gain: Var<'t>,
    pub ln2_bias: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// Model parameters bound onto a tape.
#[derive(Debug, Clone)]
pub struct LvlmVars<'t> {
    pub tok_emb: Var<'t>,
    pub pos_emb: Var<'t>,
    pub vis_proj: Var<'t>,
    pub vis_bias: Var<'t>,
    pub layers: Vec<LayerVars<'t>>,
    pub lnf_gain: Var<'t>,
    pub lnf_bias: Var<'t>,
    pub unembed: Var<'t>,
}

impl<'t> LvlmVars<'t> {
    pub fn all(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.tok_emb, self.pos_emb, self.vis_proj, self.vis_bias];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.wk, l.wv, l.wo, l.ln2_gain, l.ln2_bias, l.w1, l.b1,
                l.w2, l.b2,
            ]);
        }
        out.extend([self.lnf_gain, self.lnf_bias, self.unembed]);
        out
    }

    /// Visual embeddings `N × d_model` for the given patches.
    pub fn embed_visual(&self, config: &ModelConfig, visual: &Tensor) -> Var<'t> {
        let tape = self.tok_emb.tape();
        let pos: Vec<usize> = (0..config.n_visual).collect();
        tape.constant(visual.clone())
            .matmul(self.vis_proj)
            .add_bias(self.vis_bias)
            .add(self.pos_emb.gather_rows(&pos))
    }

    /// Input embeddings for the whole sequence, `(N + T) × d_model`.
    pub fn embed(&self, config: &ModelConfig, visual: Option<&Tensor>, text: &[usize]) -> Var<'t> {
        let n = config.n_visual;
        let vis = match visual {
            Some(v) => self.embed_visual(config, v),
            None => self.pos_emb.gather_rows(&(0..n).collect::<Vec<_>>()),
        };
        if text.is_empty() {
            return vis;
        }
        let pos: Vec<usize> = (n..n + text.len()).collect();
        let txt = self.tok_emb.gather_rows(text).add(self.pos_emb.gather_rows(&pos));
        Var::concat_rows(&[vis, txt])
    }

    /// One pre-norm transformer block; returns the new residual stream and
    /// the attention probabilities `H×n×n`.
    pub fn block(
        &self,
        config: &ModelConfig,
        layer: usize,
        x: Var<'t>,
        key_bias: Option<Var<'t>>,
    ) -> (Var<'t>, Var<'t>) {
        let l = &self.layers[layer];
        let a = x.layer_norm(l.ln1_gain, l.ln1_bias);
        let q = a.matmul(l.wq);
        let k = a.matmul(l.wk);
        let v = a.matmul(l.wv);
        let probs = q.attn_probs(k, config.n_heads, key_bias);
        let x = x.add(probs.attn_apply(v).matmul(l.wo));
        let m = x
            .layer_norm(l.ln2_gain, l.ln2_bias)
            .matmul(l.w1)
            .add_bias(l.b1)
            .gelu()
            .matmul(l.w2)
            .add_bias(l.b2);
        (x.add(m), probs)
    }

    /// Vocabulary logits for each row of the final residual stream.
    pub fn logits(&self, hidden: Var<'t>) -> Var<'t> {
        hidden.layer_norm(self.lnf_gain, self.lnf_bias).matmul(self.unembed)
    }
}

/// Key bias for every sequence position: `ln(max(w_j, floor))` on visual
/// slots and zero on text positions.
pub fn mask_key_bias<'t>(weights: Var<'t>, n_text: usize) -> Var<'t> {
    let n_vis = weights.value().len();
    let tape = weights.tape();
    let logw = weights.ln_floor(MASK_FLOOR).reshape(vec![n_vis, 1]);
    if n_text == 0 {
        return logw.reshape(vec![n_vis]);
    }
    let zeros = tape.constant(Tensor::zeros(&[n_text, 1]));
    Var::concat_rows(&[logw, zeros]).reshape(vec![n_vis + n_text])
}

/// Which positions of a sequence are visual, prompt, or generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub n_visual: usize,
    pub has_image: bool,
    pub n_prompt: usize,
    pub n_generated: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.n_visual + self.n_prompt + self.n_generated
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of a tape forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward<'t> {
    /// Final residual stream, `n × d_model`.
    pub hidden: Var<'t>,
    /// Attention probabilities per layer.
    pub attention: Vec<Var<'t>>,
    pub layout: SequenceLayout,
}

impl<'t> TapeForward<'t> {
    pub fn last_logits(&self, vars: &LvlmVars<'t>) -> Var<'t> {
        let n = self.layout.len();
        vars.logits(self.hidden.slice_rows(n - 1, n))
    }
}

fn check_text(config: &ModelConfig, text: &[usize]) -> Result<()> {
    let len = config.n_visual + text.len();
    if len > config.max_seq {
        return Err(Error::SequenceTooLong {
            len,
            max: config.max_seq,
        });
    }
    if let Some(&t) = text.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::invalid_input(format!(
            "token {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn check_visual(config: &ModelConfig, visual: &Tensor) -> Result<()> {
    if visual.shape() != [config.n_visual, config.d_patch] {
        return Err(Error::invalid_input(format!(
            "visual patches have shape {:?}, expected [{}, {}]",
            visual.shape(),
            config.n_visual,
            config.d_patch
        )));
    }
    Ok(())
}

/// Runs the model on a tape. `mask`, a length-`N` vector of weights in
/// `[0, 1]`, biases attention toward visual slots at every layer from
/// `purify_layer` on.
pub fn forward_on_tape<'t>(
    vars: &LvlmVars<'t>,
    config: &ModelConfig,
    visual: Option<&Tensor>,
    text: &[usize],
    n_prompt: usize,
    mask: Option<Var<'t>>,
) -> Result<TapeForward<'t>> {
    check_text(config, text)?;
    if let Some(v) = visual {
        check_visual(config, v)?;
    }
    if text.is_empty() {
        return Err(Error::invalid_input("forward needs at least one text token"));
    }
    if let Some(m) = mask {
        if visual.is_none() {
            return Err(Error::invalid_input("visual mask given without an image"));
        }
        if m.value().len() != config.n_visual {
            return Err(Error::invalid_input(format!(
                "mask length {} != n_visual {}",
                m.value().len(),
                config.n_visual
            )));
        }
    }
    let key_bias = mask.map(|m| mask_key_bias(m, text.len()));
    let mut x = vars.embed(config, visual, text);
    let mut attention = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let bias = if layer >= config.purify_layer { key_bias } else { None };
        let (nx, probs) = vars.block(config, layer, x, bias);
        x = nx;
        attention.push(probs);
    }
    Ok(TapeForward {
        hidden: x,
        attention,
        layout: SequenceLayout {
            n_visual: config.n_visual,
            has_image: visual.is_some(),
            n_prompt: n_prompt.min(text.len()),
            n_generated: text.len() - n_prompt.min(text.len()),
        },
    })
}

/// Mask over visual tokens as applied to attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftVisualMask {
    weights: Tensor,
    hard: bool,
}

impl SoftVisualMask {
    pub fn soft(weights: Vec<f32>) -> Result<Self> {
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid_input("mask weights must lie in [0, 1]"));
        }
        Ok(Self {
            weights: Tensor::vector(weights),
            hard: false,
        })
    }

    pub fn hard(keep: &[bool]) -> Self {
        Self {
            weights: Tensor::vector(keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()),
            hard: true,
        }
    }

    pub fn ones(n: usize) -> Self {
        Self::hard(&vec![true; n])
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn is_hard(&self) -> bool {
        self.hard
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn retained(&self) -> usize {
        self.weights.data().iter().filter(|&&w| w > 0.5).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.weights.data().iter().all(|&w| w == 1.0)
    }

    pub fn keep(&self) -> Vec<bool> {
        self.weights.data().iter().map(|&w| w > 0.5).collect()
    }
}

/// Plain-value summary of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Logits at the last position.
    pub logits: Tensor,
    /// Attention probabilities `H×n×n` for every layer.
    pub attention: Vec<Tensor>,
    pub layout: SequenceLayout,
}

/// Next-token logits and attention maps for `prompt ++ generated`.
pub fn forward(
    params: &TinyLvlmParams,
    config: &ModelConfig,
    visual: Option<&Tensor>,
    prompt: &[usize],
    generated: &[usize],
    mask: Option<&SoftVisualMask>,
) -> Result<ForwardTrace> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let text: Vec<usize> = prompt.iter().chain(generated).copied().collect();
    let mask_var = mask.map(|m| tape.constant(m.weights.clone()));
    let out = forward_on_tape(&vars, config, visual, &text, prompt.len(), mask_var)?;
    let logits = out.last_logits(&vars).value().as_ref().clone();
    let logits = logits.reshape(vec![config.vocab_size])?;
    if !logits.all_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    Ok(ForwardTrace {
        logits,
        attention: out.attention.iter().map(|a| a.value().as_ref().clone()).collect(),
        layout: out.layout,
    })
}

/// Head-averaged attention mass from the last position to the visual slots
/// at `layer`, each slot weighted by its mask weight.
pub fn attn_aggregate(trace: &ForwardTrace, layer: usize, mask: Option<&SoftVisualMask>) -> Result<f32> {
    let a = trace.attention.get(layer).ok_or_else(|| {
        Error::Index(format!(
            "layer {layer} outside trace with {} layers",
            trace.attention.len()
        ))
    })?;
    let heads = a.shape()[0];
    let n = a.shape()[1];
    let n_vis = trace.layout.n_visual;
    if let Some(m) = mask {
        if m.len() != n_vis {
            return Err(Error::invalid_input("mask length differs from visual count"));
        }
    }
    let mut total = 0.0f32;
    for h in 0..heads {
        let row = &a.data()[(h * n + n - 1) * n..(h * n + n) * n];
        for (j, &p) in row.iter().take(n_vis).enumerate() {
            let w = mask.map_or(1.0, |m| m.weights.data()[j]);
            total += w * p;
        }
    }
    Ok(total / heads as f32)
}

/// One training triple for the toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct LvlmExample {
    pub patches: Tensor,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvlmTrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability of training an example without its image.
    pub image_dropout: f64,
}

impl Default for LvlmTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 6,
            batch_size: 16,
            image_dropout: 0.5,
        }
    }
}

/// Mean next-token cross-entropy of `target` given the prompt (and image).
pub fn example_loss<'t>(
    vars: &LvlmVars<'t>,
    config: &ModelConfig,
    visual: Option<&Tensor>,
    prompt: &[usize],
    target: &[usize],
) -> Result<Var<'t>> {
    if prompt.is_empty() || target.is_empty() {
        return Err(Error::invalid_input("examples need a prompt and a target"));
    }
    let text: Vec<usize> = prompt.iter().chain(target).copied().collect();
    // the last target token is never an input
    let inputs = &text[..text.len() - 1];
    let out = forward_on_tape(vars, config, visual, inputs, prompt.len(), None)?;
    let n = out.layout.len();
    let first = config.n_visual + prompt.len() - 1;
    let logp = vars.logits(out.hidden.slice_rows(first, n)).log_softmax_rows();
    let v = config.vocab_size;
    let idx: Vec<usize> = target.iter().enumerate().map(|(r, &t)| r * v + t).collect();
    Ok(logp.pick(&idx).mean().scale(-1.0))
}

/// Trains the toy model by minimizing next-token cross-entropy. Returns the
/// parameters and the mean loss of every epoch.
pub fn train_lvlm(
    corpus: &[LvlmExample],
    config: &ModelConfig,
    hyper: &LvlmTrainConfig,
    rng: &mut Rng,
) -> Result<(TinyLvlmParams, Vec<f32>)> {
    if corpus.is_empty() {
        return Err(Error::invalid_input("empty training corpus"));
    }
    if hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(Error::invalid_config("epochs and batch_size must be positive"));
    }
    let mut params = TinyLvlmParams::init(config, &mut rng.substream("init"))?;
    let mut opt = Adam::new(hyper.learning_rate, &params.tensors());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        for batch in order.chunks(hyper.batch_size) {
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &i in batch {
                let ex = &corpus[i];
                let drop_image = rng.bernoulli(hyper.image_dropout);
                let tape = Tape::new();
                let vars = params.bind(&tape, true);
                let visual = if drop_image { None } else { Some(&ex.patches) };
                let loss = example_loss(&vars, config, visual, &ex.prompt, &ex.target)?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(Error::Numerical("non-finite training loss".into()));
                }
                total += value as f64;
                tape.backward(loss)?;
                for (g, v) in grads.iter_mut().zip(vars.all()) {
                    if let Some(vg) = v.grad() {
                        tensor::axpy(1.0 / batch.len() as f32, vg.data(), g.data_mut());
                    }
                }
            }
            opt.step(&mut params.tensors_mut(), &grads);
        }
        epoch_losses.push((total / corpus.len() as f64) as f32);
    }
    Ok((params, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            n_visual: 4,
            d_patch: 3,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            n_layers: 3,
            mlp_hidden: 16,
            max_seq: 16,
            purify_layer: 1,
        }
    }

    fn patches(config: &ModelConfig, rng: &mut Rng) -> Tensor {
        randn(&[config.n_visual, config.d_patch], 1.0, rng)
    }

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        let mut bad = ModelConfig::default();
        bad.d_head = 15;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.purify_layer = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn all_ones_mask_is_bitwise_neutral() {
        let cfg = small_config();
        let mut rng = Rng::new(1);
        let p = TinyLvlmParams::init(&cfg, &mut rng).unwrap();
        let v = patches(&cfg, &mut rng);
        let a = forward(&p, &cfg, Some(&v), &[1, 2], &[3], None).unwrap();
        let b = forward(&p, &cfg, Some(&v), &[1, 2], &[3], Some(&SoftVisualMask::ones(4))).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn attention_rows_normalized_and_causal() {
        let cfg = small_config();
        let mut rng = Rng::new(2);
        let p = TinyLvlmParams::init(&cfg, &mut rng).unwrap();
        let v = patches(&cfg, &mut rng);
        let mask = SoftVisualMask::soft(vec![0.3, 1.0, 0.0, 0.7]).unwrap();
        let t = forward(&p, &cfg, Some(&v), &[1, 2, 5], &[3, 4], Some(&mask)).unwrap();
        for a in &t.attention {
            let n = a.shape()[1];
            for h in 0..a.shape()[0] {
                for i in 0..n {
                    let row = &a.data()[(h * n + i) * n..(h * n + i + 1) * n];
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                    assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn causality_of_generated_tokens() {
        let cfg = small_config();
        let mut rng = Rng::new(3);
        let p = TinyLvlmParams::init(&cfg, &mut rng).unwrap();
        let v = patches(&cfg, &mut rng);
        let tape = Tape::new();
        let vars = p.bind(&tape, false);
        let a = forward_on_tape(&vars, &cfg, Some(&v), &[1, 2, 3, 4], 2, None).unwrap();
        let b = forward_on_tape(&vars, &cfg, Some(&v), &[1, 2, 3, 9], 2, None).unwrap();
        let la = vars.logits(a.hidden.slice_rows(0, 7)).value();
        let lb = vars.logits(b.hidden.slice_rows(0, 7)).value();
        assert_eq!(la, lb);
    }

    #[test]
    fn text_only_branch_ignores_image_content() {
        let cfg = small_config();
        let mut rng = Rng::new(4);
        let p = TinyLvlmParams::init(&cfg, &mut rng).unwrap();
        let a = forward(&p, &cfg, None, &[1, 2], &[5], None).unwrap();
        let b = forward(&p, &cfg, None, &[1, 2], &[5], None).unwrap();
        assert_eq!(a.logits, b.logits);
        let mut zeroed = p.clone();
        zeroed.zero_visual_pathway();
        let v = patches(&cfg, &mut rng);
        let with = forward(&zeroed, &cfg, Some(&v), &[1, 2], &[5], None).unwrap();
        let without = forward(&zeroed, &cfg, None, &[1, 2], &[5], None).unwrap();
        assert_eq!(with.logits, without.logits);
    }

    #[test]
    fn forward_errors() {
        let cfg = small_config();
        let mut rng = Rng::new(5);
        let p = TinyLvlmParams::init(&cfg, &mut rng).unwrap();
        let long = vec![1; 13];
        assert!(matches!(
            forward(&p, &cfg, None, &long, &[], None),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
        let mask = SoftVisualMask::ones(4);
        assert!(matches!(
            forward(&p, &cfg, None, &[1], &[], Some(&mask)),
            Err(Error::InvalidInput(_))
        ));
        let v = patches(&cfg, &mut rng);
        assert!(forward(&p, &cfg, Some(&v), &[1], &[], Some(&SoftVisualMask::ones(3))).is_err());
        assert!(forward(&p, &cfg, Some(&v), &[99], &[], None).is_err());
    }

    fn synthetic_trace() -> ForwardTrace {
        // H=2, n=3, two visual slots; last rows [0.1, 0.2, 0.7] and [0.3, 0.4, 0.3]
        let mut a = vec![0.0f32; 2 * 3 * 3];
        a[0] = 1.0;
        a[3] = 0.5;
        a[4] = 0.5;
        a[6..9].copy_from_slice(&[0.1, 0.2, 0.7]);
        a[9] = 1.0;
        a[12] = 0.5;
        a[13] = 0.5;
        a[15..18].copy_from_slice(&[0.3, 0.4, 0.3]);
        ForwardTrace {
            logits: Tensor::zeros(&[4]),
            attention: vec![Tensor::new(vec![2, 3, 3], a).unwrap()],
            layout: SequenceLayout {
                n_visual: 2,
                has_image: true,
                n_prompt: 1,
                n_generated: 0,
            },
        }
    }

    #[test]
    fn attn_aggregate_examples() {
        let t = synthetic_trace();
        assert!((attn_aggregate(&t, 0, None).unwrap() - 0.5).abs() < 1e-7);
        let zeros = SoftVisualMask::hard(&[false, false]);
        assert_eq!(attn_aggregate(&t, 0, Some(&zeros)).unwrap(), 0.0);
        let ones = SoftVisualMask::ones(2);
        assert_eq!(attn_aggregate(&t, 0, Some(&ones)).unwrap(), attn_aggregate(&t, 0, None).unwrap());
        assert!(matches!(attn_aggregate(&t, 1, None), Err(Error::Index(_))));
    }

    #[test]
    fn attn_aggregate_bounded_on_real_trace() {
        let cfg = small_config();
        let mut rng = Rng::new(6);
        let p = TinyLvlmParams::init(&cfg, &mut rng).unwrap();
        let v = patches(&cfg, &mut rng);
        let t = forward(&p, &cfg, Some(&v), &[1, 2], &[3], None).unwrap();
        for l in 0..cfg.n_layers {
            let a = attn_aggregate(&t, l, None).unwrap();
            assert!((0.0..=1.0).contains(&a));
            let b = attn_aggregate(&t, l, Some(&SoftVisualMask::ones(4))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_memorizes_a_single_example() {
        let cfg = small_config();
        let mut rng = Rng::new(7);
        let ex = LvlmExample {
            patches: patches(&cfg, &mut rng),
            prompt: vec![1, 2],
            target: vec![5, 7, 3, 9],
        };
        let hyper = LvlmTrainConfig {
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 1,
            image_dropout: 0.0,
        };
        let (params, losses) = train_lvlm(std::slice::from_ref(&ex), &cfg, &hyper, &mut Rng::new(8)).unwrap();
        assert!(losses.last().unwrap() < &0.1, "{losses:?}");
        assert!(losses.last().unwrap() < &losses[0]);

        let (again, _) = train_lvlm(std::slice::from_ref(&ex), &cfg, &hyper, &mut Rng::new(8)).unwrap();
        assert_eq!(params, again);
    }

    #[test]
    fn training_rejects_empty_corpus() {
        let cfg = small_config();
        assert!(matches!(
            train_lvlm(&[], &cfg, &LvlmTrainConfig::default(), &mut Rng::new(0)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn named_round_trip_and_shape_check() {
        let cfg = small_config();
        let p = TinyLvlmParams::init(&cfg, &mut Rng::new(9)).unwrap();
        let back = TinyLvlmParams::from_named(&cfg, p.named()).unwrap();
        assert_eq!(p, back);
        let mut named = p.named();
        named[0].1 = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            TinyLvlmParams::from_named(&cfg, named),
            Err(Error::CorruptCheckpoint(_))
        ));
    }
}
