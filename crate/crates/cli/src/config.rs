//! Flat `key = value` run configuration.
//!
//! Every key has a default and a one-line description (`cmivld keys` lists
//! them). Values are applied in order default, config file, command-line
//! flags, so a flag always wins.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cmivld::decoding::{DecodeConfig, Sampler, StepOrder, Variant};
use cmivld::model::{LvlmTrainConfig, ModelConfig};
use cmivld::purifier::{PurifierConfig, PurifierTrainConfig};
use cmivld::rng::derive_seed;
use cmivld::synthbench::{CorpusConfig, RenderConfig};
use cmivld::Error;
use serde_json::{Map, Value};

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])+ $key:ident : $ty:ty = $default:expr, )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])+ pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $key: $default.into(), )* }
            }
        }

        impl RunConfig {
            /// `(key, description)` for every key, in declaration order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[
                $( (stringify!($key), concat!($($doc),+)), )*
            ];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
                match key {
                    $( stringify!($key) => self.$key = parse_value(key, value)?, )*
                    _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Current value of every key, rendered as the file format would.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($key), self.$key.to_string()), )* ]
            }
        }
    };
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse `{value}` for key `{key}`")))
}

run_config! {
    /// Root seed; every random stream is derived from it by label.
    seed: u64 = 0u64,
    /// Directory holding the generated scene and caption files.
    data_dir: String = "data",
    /// Model checkpoint path.
    model_path: String = "model.ckpt",
    /// Purifier checkpoint path.
    purifier_path: String = "purifier.ckpt",

    /// Number of objects in the catalog (multiple of 4).
    catalog_size: usize = 24usize,
    /// Objects per scene.
    objects_per_scene: usize = 3usize,
    /// Probability that a training caption names one absent companion.
    bias: f64 = 0.3,
    /// Probability that an object's companion joins the scene.
    pair_prob: f64 = 0.5,
    /// Cosine between lookalike object prototypes.
    lookalike_similarity: f32 = 0.85f32,
    /// Sampling weight of rare objects relative to common ones.
    rare_weight: f64 = 0.15,
    /// Scenes in the model training split.
    n_train_scenes: usize = 1000usize,
    /// Scenes with clean captions in the purifier training split.
    n_purifier_scenes: usize = 2000usize,
    /// Held-out evaluation scenes.
    n_heldout_scenes: usize = 200usize,

    /// Visual slots per image (N).
    n_visual: usize = 16usize,
    /// Width of a patch vector.
    d_patch: usize = 16usize,
    /// Slots filled by each scene object.
    patches_per_object: usize = 3usize,
    /// Smallest object amplitude.
    amp_min: f32 = 0.7f32,
    /// Largest object amplitude.
    amp_max: f32 = 1.0f32,
    /// Faint slots showing absent objects.
    clutter_patches: usize = 2usize,
    /// Amplitude of clutter slots.
    clutter_amp: f32 = 0.3f32,
    /// Probability that a clutter slot shows an absent companion.
    clutter_companion_prob: f64 = 0.0,
    /// Per-coordinate noise standard deviation.
    noise: f32 = 0.3f32,

    /// Vocabulary size; at least 16 + catalog_size.
    vocab_size: usize = 40usize,
    /// Model width.
    d_model: usize = 64usize,
    /// Attention heads.
    n_heads: usize = 4usize,
    /// Transformer layers.
    n_layers: usize = 4usize,
    /// Hidden width of the model MLP.
    mlp_hidden: usize = 256usize,
    /// Maximum sequence length including visual slots.
    max_seq: usize = 48usize,
    /// First layer whose attention sees the visual mask.
    purify_layer: usize = 2usize,

    /// Model learning rate.
    learning_rate: f32 = 3e-3f32,
    /// Model training epochs.
    epochs: usize = 8usize,
    /// Model minibatch size.
    batch_size: usize = 16usize,
    /// Probability of training an example without its image.
    image_dropout: f64 = 0.5,
    /// Presence questions added per training scene.
    qa_per_scene: usize = 1usize,

    /// Purifier transformer blocks.
    purifier_blocks: usize = 1usize,
    /// Purifier internal width.
    purifier_d_inner: usize = 8usize,
    /// Purifier attention heads.
    purifier_heads: usize = 2usize,
    /// Purifier MLP hidden width.
    purifier_mlp_hidden: usize = 16usize,
    /// Weight of the attention term in the purifier objective.
    alpha: f32 = 100f32,
    /// Weight of the retention penalty.
    beta: f32 = 500f32,
    /// Gumbel-Softmax temperature.
    tau: f32 = 0.5f32,
    /// Purifier learning rate.
    purifier_learning_rate: f32 = 1e-2f32,
    /// Purifier training epochs.
    purifier_epochs: usize = 5usize,
    /// Purifier minibatch size.
    purifier_batch_size: usize = 16usize,
    /// Take the attention term from the masked pass.
    attn_on_masked_pass: bool = true,

    /// Decoding variant: full, text_only, vision_only, learning_free or baseline.
    variant: String = "full",
    /// Contrast strength.
    lambda: f32 = 0.5f32,
    /// Fraction of visual slots kept per step.
    gamma: f32 = 0.8f32,
    /// Candidate threshold relative to the most likely token.
    delta: f32 = 0.1f32,
    /// Sampler: greedy, multinomial or top_p=<p>.
    sampler: String = "greedy",
    /// Step order: mask_then_sample or sample_then_mask.
    order: String = "mask_then_sample",
    /// Generation limit per caption.
    max_new_tokens: usize = 16usize,

    /// Presence questions asked by eval-pope.
    n_questions: usize = 200usize,
    /// Trials for oracle-check and gradcheck.
    trials: usize = 100usize,
    /// Key varied by sweep.
    sweep_param: String = "lambda",
    /// Comma-separated values for sweep.
    sweep_values: String = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
}

impl RunConfig {
    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), Error> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::InvalidConfig(format!("{origin}:{}: {}", i + 1, strip(&e))))?;
        }
        Ok(())
    }

    /// Applies a config file: either `key = value` text or a `run.json`
    /// manifest, whose `config` object is replayed.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let origin = path.display().to_string();
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Value = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{origin}: {e}")))?;
            let config = manifest
                .get("config")
                .and_then(Value::as_object)
                .ok_or_else(|| Error::InvalidConfig(format!("{origin}: no `config` object")))?;
            for (key, value) in config {
                let value = match value {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                self.set(key, &value)?;
            }
            Ok(())
        } else {
            self.apply_text(&text, &origin)
        }
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<(), Error> {
        overrides.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn to_json(&self) -> Map<String, Value> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v)))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(&self.data_dir)
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            n_visual: self.n_visual,
            d_patch: self.d_patch,
            patches_per_object: self.patches_per_object,
            amp_min: self.amp_min,
            amp_max: self.amp_max,
            clutter_patches: self.clutter_patches,
            clutter_amp: self.clutter_amp,
            clutter_companion_prob: self.clutter_companion_prob,
            noise: self.noise,
        }
    }

    /// Corpus settings for one named split.
    pub fn corpus(&self, split: &str, n_scenes: usize, bias: f64) -> CorpusConfig {
        CorpusConfig {
            catalog_size: self.catalog_size,
            n_scenes,
            objects_per_scene: self.objects_per_scene,
            bias,
            pair_prob: self.pair_prob,
            seed: derive_seed(self.seed, &format!("split/{split}")),
            catalog_seed: derive_seed(self.seed, "catalog"),
            lookalike_similarity: self.lookalike_similarity,
            rare_weight: self.rare_weight,
            render: self.render(),
        }
    }

    pub fn model(&self) -> Result<ModelConfig, Error> {
        let config = ModelConfig {
            vocab_size: self.vocab_size,
            n_visual: self.n_visual,
            d_patch: self.d_patch,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_model / self.n_heads.max(1),
            n_layers: self.n_layers,
            mlp_hidden: self.mlp_hidden,
            max_seq: self.max_seq,
            purify_layer: self.purify_layer,
        };
        config.validate()?;
        if self.vocab_size < cmivld::synthbench::vocab::OBJECT_BASE + self.catalog_size {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} cannot hold {} objects",
                self.vocab_size, self.catalog_size
            )));
        }
        Ok(config)
    }

    pub fn lvlm_train(&self) -> LvlmTrainConfig {
        LvlmTrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            image_dropout: self.image_dropout,
        }
    }

    pub fn purifier(&self, model: &ModelConfig) -> Result<PurifierConfig, Error> {
        let config = PurifierConfig {
            n_blocks: self.purifier_blocks,
            d_inner: self.purifier_d_inner,
            n_heads: self.purifier_heads,
            mlp_hidden: self.purifier_mlp_hidden,
            tau: self.tau,
            ..PurifierConfig::for_model(model)
        };
        config.validate()?;
        Ok(config)
    }

    pub fn purifier_train(&self) -> Result<PurifierTrainConfig, Error> {
        let config = PurifierTrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            tau: self.tau,
            learning_rate: self.purifier_learning_rate,
            epochs: self.purifier_epochs,
            batch_size: self.purifier_batch_size,
            seed: derive_seed(self.seed, "purifier"),
            attn_on_masked_pass: self.attn_on_masked_pass,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn decode(&self) -> Result<DecodeConfig, Error> {
        let order = match self.order.as_str() {
            "mask_then_sample" => StepOrder::MaskThenSample,
            "sample_then_mask" => StepOrder::SampleThenMask,
            other => return Err(Error::InvalidConfig(format!("unknown order `{other}`"))),
        };
        let config = DecodeConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            tau: self.tau,
            delta: self.delta,
            alpha: self.alpha,
            variant: Variant::parse(&self.variant)?,
            sampler: Sampler::parse(&self.sampler)?,
            seed: derive_seed(self.seed, "decode"),
            max_new_tokens: self.max_new_tokens,
            eos_token: cmivld::synthbench::vocab::EOS,
            order,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn sweep_values(&self) -> Result<Vec<String>, Error> {
        let parts: Vec<&str> = self.sweep_values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        let values = match parts.iter().position(|p| *p == "...") {
            None => parts.iter().map(|p| p.to_string()).collect(),
            Some(i) => expand_range(&parts, i)?,
        };
        if values.is_empty() {
            return Err(Error::InvalidConfig("sweep_values is empty".into()));
        }
        Ok(values)
    }
}

/// Expands `a,b,...,c` into the arithmetic progression from `a` to `c`
/// with step `b - a`, keeping values that follow the `...`.
fn expand_range(parts: &[&str], dots: usize) -> Result<Vec<String>, Error> {
    let bad = || Error::InvalidConfig("`...` needs two values before it and one after".into());
    if dots < 2 || dots + 1 >= parts.len() {
        return Err(bad());
    }
    let num = |s: &str| -> Result<f64, Error> { parse_value("sweep_values", s) };
    let (a, b, end) = (num(parts[dots - 2])?, num(parts[dots - 1])?, num(parts[dots + 1])?);
    let step = b - a;
    if step <= 0.0 || end < b {
        return Err(bad());
    }
    let decimals = parts[..dots]
        .iter()
        .chain(&parts[dots + 1..dots + 2])
        .map(|p| p.split_once('.').map_or(0, |(_, f)| f.len()))
        .max()
        .unwrap_or(0);
    let mut out: Vec<String> = parts[..dots - 2].iter().map(|p| p.to_string()).collect();
    let count = ((end - a) / step + 1e-9).floor() as usize;
    for i in 0..=count {
        out.push(format!("{:.*}", decimals, a + step * i as f64));
    }
    out.extend(parts[dots + 2..].iter().map(|p| p.to_string()));
    Ok(out)
}

fn strip(e: &Error) -> String {
    match e {
        Error::InvalidConfig(m) => m.clone(),
        other => other.to_string(),
    }
}
