//! Plain f64 re-implementation of the model forward pass and the purifier
//! training loss, written with loops and no tape. Used as an independent
//! oracle for finite differences and for physically removing visual slots.

use crate::autodiff::{gumbel_noise, Tape};
use crate::cpmi::next_token_log_prob;
use crate::error::Result;
use crate::model::{forward, randn, ModelConfig, SoftVisualMask, TinyLvlmParams, MASK_FLOOR};
use crate::purifier::{training_loss_with_noise, PurifierConfig, PurifierParams, PurifierTrainConfig, StepContext};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            s => panic!("unsupported rank {s:?}"),
        };
        Self {
            rows,
            cols,
            data: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn rows_slice(&self, start: usize, end: usize) -> Mat {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut out = vec![0.0; self.rows * b.cols];
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                for j in 0..b.cols {
                    out[i * b.cols + j] += a * b.data[k * b.cols + j];
                }
            }
        }
        Mat {
            rows: self.rows,
            cols: b.cols,
            data: out,
        }
    }

    fn add(&self, b: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        }
    }

    fn add_bias(&self, b: &Mat) -> Mat {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] += b.data[c];
            }
        }
        out
    }

    fn layer_norm(&self, g: &Mat, b: &Mat) -> Mat {
        let mut out = self.clone();
        let c = self.cols;
        for r in 0..self.rows {
            let x = self.row(r);
            let mu = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + 1e-5).sqrt();
            for j in 0..c {
                out.data[r * c + j] = (x[j] - mu) * rs * g.data[j] + b.data[j];
            }
        }
        out
    }

    fn gelu(&self) -> Mat {
        let k = (2.0 / std::f64::consts::PI).sqrt();
        let mut out = self.clone();
        for x in &mut out.data {
            *x = 0.5 * *x * (1.0 + (k * (*x + 0.044715 * *x * *x * *x)).tanh());
        }
        out
    }

    fn gather(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    fn concat(&self, b: &Mat) -> Mat {
        let mut data = self.data.clone();
        data.extend_from_slice(&b.data);
        Mat {
            rows: self.rows + b.rows,
            cols: self.cols,
            data,
        }
    }
}

fn softmax(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Multi-head attention; returns the output and probabilities `[h][i][j]`.
fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, bias: Option<&[f64]>, causal: bool) -> (Mat, Vec<f64>) {
    let n = q.rows;
    let dm = q.cols;
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * n * n];
    let mut out = vec![0.0; n * dm];
    for h in 0..heads {
        for i in 0..n {
            let lim = if causal { i + 1 } else { n };
            let mut row = vec![0.0; lim];
            for (j, r) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for d in 0..dh {
                    s += q.data[i * dm + h * dh + d] * k.data[j * dm + h * dh + d];
                }
                *r = s * scale + bias.map_or(0.0, |b| b[j]);
            }
            softmax(&mut row);
            for (j, &p) in row.iter().enumerate() {
                probs[(h * n + i) * n + j] = p;
                for d in 0..dh {
                    out[i * dm + h * dh + d] += p * v.data[j * dm + h * dh + d];
                }
            }
        }
    }
    (
        Mat {
            rows: n,
            cols: dm,
            data: out,
        },
        probs,
    )
}

/// One pre-norm block; `p` holds the 12 block tensors in canonical order.
fn block(x: &Mat, p: &[Mat], heads: usize, bias: Option<&[f64]>, causal: bool) -> (Mat, Vec<f64>) {
    let a = x.layer_norm(&p[0], &p[1]);
    let (att, probs) = attention(&a.matmul(&p[2]), &a.matmul(&p[3]), &a.matmul(&p[4]), heads, bias, causal);
    let x = x.add(&att.matmul(&p[5]));
    let m = x
        .layer_norm(&p[6], &p[7])
        .matmul(&p[8])
        .add_bias(&p[9])
        .gelu()
        .matmul(&p[10])
        .add_bias(&p[11]);
    (x.add(&m), probs)
}

pub struct RefModel {
    pub config: ModelConfig,
    tok_emb: Mat,
    pos_emb: Mat,
    vis_proj: Mat,
    vis_bias: Mat,
    layers: Vec<Vec<Mat>>,
    lnf_gain: Mat,
    lnf_bias: Mat,
    unembed: Mat,
}

impl RefModel {
    pub fn new(config: &ModelConfig, p: &TinyLvlmParams) -> Self {
        let all: Vec<Mat> = p.tensors().into_iter().map(Mat::from_tensor).collect();
        let layers = (0..config.n_layers).map(|l| all[4 + 12 * l..4 + 12 * (l + 1)].to_vec()).collect();
        let tail = 4 + 12 * config.n_layers;
        Self {
            config: config.clone(),
            tok_emb: all[0].clone(),
            pos_emb: all[1].clone(),
            vis_proj: all[2].clone(),
            vis_bias: all[3].clone(),
            layers,
            lnf_gain: all[tail].clone(),
            lnf_bias: all[tail + 1].clone(),
            unembed: all[tail + 2].clone(),
        }
    }

    pub fn embed(&self, patches: &Tensor, text: &[usize]) -> Mat {
        let n = self.config.n_visual;
        let vis = Mat::from_tensor(patches)
            .matmul(&self.vis_proj)
            .add_bias(&self.vis_bias)
            .add(&self.pos_emb.gather(&(0..n).collect::<Vec<_>>()));
        let pos: Vec<usize> = (n..n + text.len()).collect();
        vis.concat(&self.tok_emb.gather(text).add(&self.pos_emb.gather(&pos)))
    }

    /// Log-probabilities after the last text position and the attention
    /// probabilities of every layer, with a visual mask applied from
    /// `purify_layer` on.
    pub fn forward(&self, patches: &Tensor, text: &[usize], mask: Option<&[f64]>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let cfg = &self.config;
        let mut x = self.embed(patches, text);
        let bias: Option<Vec<f64>> = mask.map(|m| {
            let mut b: Vec<f64> = m.iter().map(|&w| w.max(MASK_FLOOR as f64).ln()).collect();
            b.resize(cfg.n_visual + text.len(), 0.0);
            b
        });
        let mut probs = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            let b = if l >= cfg.purify_layer { bias.as_deref() } else { None };
            let (nx, pr) = block(&x, p, cfg.n_heads, b, true);
            x = nx;
            probs.push(pr);
        }
        (log_softmax(&self.last_logits(&x)), probs)
    }

    fn last_logits(&self, x: &Mat) -> Vec<f64> {
        let last = x.rows_slice(x.rows - 1, x.rows);
        last.layer_norm(&self.lnf_gain, &self.lnf_bias).matmul(&self.unembed).data
    }

    /// Raw logits after the last text position with the dropped visual
    /// slots deleted from the sequence before layer `purify_layer`, so later
    /// layers never see them.
    pub fn removal_logits(&self, patches: &Tensor, text: &[usize], keep: &[bool]) -> Vec<f64> {
        let cfg = &self.config;
        let mut x = self.embed(patches, text);
        for (l, p) in self.layers.iter().enumerate() {
            if l == cfg.purify_layer {
                let rows: Vec<usize> = (0..x.rows).filter(|&r| r >= cfg.n_visual || keep[r]).collect();
                x = x.gather(&rows);
            }
            x = block(&x, p, cfg.n_heads, None, true).0;
        }
        self.last_logits(&x)
    }
}

/// Purifier weights as f64 arrays in the order of `PurifierParams::tensors`.
#[derive(Clone, Debug)]
pub struct RefPurifier {
    pub config: PurifierConfig,
    pub tensors: Vec<Mat>,
}

impl RefPurifier {
    pub fn new(config: &PurifierConfig, p: &PurifierParams) -> Self {
        Self {
            config: config.clone(),
            tensors: p.tensors().into_iter().map(Mat::from_tensor).collect(),
        }
    }

    /// Logits `N × 2` for input embeddings `z`.
    pub fn logits(&self, z: &Mat) -> Mat {
        let t = &self.tensors;
        let n = z.rows;
        let mut h = z.matmul(&t[0]).add_bias(&t[1]).add(&t[2].gather(&(0..n).collect::<Vec<_>>()));
        for b in 0..self.config.n_blocks {
            h = block(&h, &t[3 + 12 * b..3 + 12 * (b + 1)], self.config.n_heads, None, false).0;
        }
        let k = 3 + 12 * self.config.n_blocks;
        h.rows_slice(0, self.config.n_visual)
            .layer_norm(&t[k], &t[k + 1])
            .matmul(&t[k + 2])
            .add_bias(&t[k + 3])
    }
}

/// One step of purifier training data.
pub struct RefStep<'a> {
    pub patches: &'a Tensor,
    pub text: &'a [usize],
    pub target: usize,
    pub text_log_prob: f64,
    pub noise: &'a Tensor,
}

/// `−[(ln p_v − ln p_x) + α·Attn] + β·|mean(m) − γ|` under the relaxed mask.
pub fn purifier_loss(model: &RefModel, pur: &RefPurifier, tc: &PurifierTrainConfig, step: &RefStep) -> f64 {
    let cfg = &model.config;
    let n = cfg.n_visual;
    let z = model.embed(step.patches, step.text);
    let logits = pur.logits(&z);
    let tau = tc.tau as f64;
    let mut m = Vec::with_capacity(n);
    for r in 0..n {
        let mut row = [
            (logits.data[2 * r] + step.noise.data()[2 * r] as f64) / tau,
            (logits.data[2 * r + 1] + step.noise.data()[2 * r + 1] as f64) / tau,
        ];
        softmax(&mut row);
        m.push(row[1]);
    }
    let (logp, probs) = model.forward(step.patches, step.text, Some(&m));
    let log_ratio = logp[step.target] - step.text_log_prob;
    let attn = if tc.attn_on_masked_pass {
        last_row_mass(&probs[cfg.purify_layer], cfg, step.text.len(), Some(&m))
    } else {
        let (_, plain) = model.forward(step.patches, step.text, None);
        last_row_mass(&plain[cfg.purify_layer], cfg, step.text.len(), None)
    };
    let pen = (m.iter().sum::<f64>() / n as f64 - tc.gamma as f64).abs();
    -(log_ratio + tc.alpha as f64 * attn) + tc.beta as f64 * pen
}

fn last_row_mass(probs: &[f64], cfg: &ModelConfig, n_text: usize, w: Option<&[f64]>) -> f64 {
    let len = cfg.n_visual + n_text;
    let mut total = 0.0;
    for h in 0..cfg.n_heads {
        for j in 0..cfg.n_visual {
            total += w.map_or(1.0, |w| w[j]) * probs[(h * len + len - 1) * len + j];
        }
    }
    total / cfg.n_heads as f64
}

/// Fourth-order central differences of `purifier_loss` with respect to every
/// purifier weight.
pub fn numeric_purifier_grad(
    model: &RefModel,
    pur: &RefPurifier,
    tc: &PurifierTrainConfig,
    step: &RefStep,
    h: f64,
) -> Vec<Vec<f64>> {
    let mut work = pur.clone();
    let mut out = Vec::with_capacity(pur.tensors.len());
    for ti in 0..pur.tensors.len() {
        let mut g = vec![0.0; pur.tensors[ti].data.len()];
        for (e, ge) in g.iter_mut().enumerate() {
            let orig = pur.tensors[ti].data[e];
            let mut at = |d: f64| {
                work.tensors[ti].data[e] = orig + d;
                purifier_loss(model, &work, tc, step)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            work.tensors[ti].data[e] = orig;
            *ge = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        }
        out.push(g);
    }
    out
}

/// Max over tensors of `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let d: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / na.max(nn).max(1e-8)
        })
        .fold(0.0, f64::max)
}

/// Relative error between the tape gradient of the purifier loss and an f64
/// finite-difference oracle, for a random 2-block purifier over `N = 8`
/// visual slots.
pub fn purifier_gradcheck(seed: u64, tc: &PurifierTrainConfig) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let cfg = ModelConfig {
        vocab_size: 24,
        n_visual: 8,
        d_patch: 4,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        n_layers: 3,
        mlp_hidden: 32,
        max_seq: 20,
        purify_layer: 1,
    };
    let params = TinyLvlmParams::init(&cfg, &mut rng)?;
    let patches = randn(&[cfg.n_visual, cfg.d_patch], 1.0, &mut rng);
    let pc = PurifierConfig {
        n_blocks: 2,
        d_inner: 4,
        n_heads: 2,
        mlp_hidden: 8,
        ..PurifierConfig::for_model(&cfg)
    };
    let pp = PurifierParams::init(&pc, usize::MAX, &mut rng)?;
    let prompt = [1usize, 2];
    let caption: Vec<usize> = (0..4).map(|_| rng.below(cfg.vocab_size)).collect();
    let t = rng.below(caption.len());
    let text: Vec<usize> = prompt.iter().chain(&caption[..t]).copied().collect();
    let text_log_prob = next_token_log_prob(&params, &cfg, None, &prompt, &caption[..t], caption[t], None)?;
    let noise = gumbel_noise(&[cfg.n_visual, 2], &mut rng);

    let tape = Tape::new();
    let lvlm = params.bind(&tape, false);
    let pvars = pp.bind(&tape, true);
    let step = StepContext {
        lvlm: &lvlm,
        model_config: &cfg,
        patches: &patches,
        text: &text,
        n_prompt: prompt.len(),
        target: caption[t],
        text_log_prob,
    };
    let parts = training_loss_with_noise(&step, &pvars, &pc, tc, &noise)?;
    tape.backward(parts.loss)?;
    let analytic: Vec<Vec<f64>> = pvars
        .iter()
        .zip(pp.tensors())
        .map(|(v, p)| match v.grad() {
            Some(g) => g.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();

    let model = RefModel::new(&cfg, &params);
    let pur = RefPurifier::new(&pc, &pp);
    let ref_step = RefStep {
        patches: &patches,
        text: &text,
        target: caption[t],
        text_log_prob,
        noise: &noise,
    };
    let numeric = numeric_purifier_grad(&model, &pur, tc, &ref_step, 1e-5);
    Ok(max_relative_error(&analytic, &numeric))
}

/// Largest gap between the tape's hard-masked logits and the logits with the
/// dropped slots physically removed, for one random model, image, prompt
/// and mask. Layer count and purify layer vary with the seed.
pub fn mask_removal_gap(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let n_layers = 2 + rng.below(3);
    let config = ModelConfig {
        vocab_size: 32,
        n_visual: 8 + rng.below(9),
        d_patch: 8,
        d_model: 32,
        n_heads: 4,
        d_head: 8,
        n_layers,
        mlp_hidden: 64,
        max_seq: 40,
        purify_layer: rng.below(n_layers),
    };
    let params = TinyLvlmParams::init(&config, &mut rng)?;
    let patches = randn(&[config.n_visual, config.d_patch], 1.0, &mut rng);
    let text: Vec<usize> = (0..1 + rng.below(12)).map(|_| rng.below(config.vocab_size)).collect();
    let keep: Vec<bool> = (0..config.n_visual).map(|_| rng.bernoulli(0.7)).collect();
    let masked = forward(&params, &config, Some(&patches), &text, &[], Some(&SoftVisualMask::hard(&keep)))?;
    let removed = RefModel::new(&config, &params).removal_logits(&patches, &text, &keep);
    Ok(masked
        .logits
        .data()
        .iter()
        .zip(&removed)
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max))
}
