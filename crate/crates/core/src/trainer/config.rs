//! Training configuration: a flat key-value document with two built-in
//! profiles and `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::LossWeights;
use crate::corpus::Tokenizer;
use crate::cosegment::CosegConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::highlight::PromptConfig;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        }
    }
}

/// Where training pairs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// The generated shapes corpus.
    Synthetic { n: usize, seed: u64 },
    /// A manifest of image-caption pairs.
    Manifest(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub profile: Profile,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub grad_accum: usize,
    pub nouns_per_pair: usize,
    pub keep_duplicate_nouns: bool,
    pub weights: LossWeights,
    pub co_decomposition: bool,
    pub word_prompt: bool,
    pub region_prompt: bool,
    pub freeze_backbones: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub precision: String,
    pub data: DataSource,
    pub encoder: EncoderConfig,
    pub coseg: CosegConfig,
    pub prompts: PromptConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        let max_text_len = 16;
        Self {
            profile: Profile::Desk,
            batch_size: 8,
            steps: 2000,
            warmup_steps: 200,
            lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            grad_accum: 1,
            nouns_per_pair: 2,
            keep_duplicate_nouns: true,
            weights: LossWeights::DEFAULT,
            co_decomposition: true,
            word_prompt: true,
            region_prompt: true,
            freeze_backbones: false,
            seed: 0,
            checkpoint_every: 0,
            precision: "f64".into(),
            data: DataSource::Synthetic { n: 500, seed: 7 },
            encoder: EncoderConfig {
                image_size: 32,
                patch: 4,
                width: 32,
                heads: 4,
                image_layers: 4,
                text_layers: 4,
                segmenter_layers: 2,
                mlp_ratio: 2,
                max_text_len,
                vocab_size: Tokenizer::new(max_text_len).vocab_size(),
                dropout: 0.0,
            },
            coseg: CosegConfig::default(),
            prompts: PromptConfig::default(),
        }
    }

    pub fn paper() -> Self {
        let max_text_len = 77;
        let desk = Self::desk();
        Self {
            profile: Profile::Paper,
            batch_size: 64,
            steps: 50_000,
            warmup_steps: 15_000,
            lr: 5e-6,
            grad_clip: 0.0,
            freeze_backbones: true,
            encoder: EncoderConfig {
                image_size: 224,
                patch: 16,
                width: 512,
                heads: 8,
                image_layers: 12,
                text_layers: 12,
                segmenter_layers: 2,
                mlp_ratio: 4,
                max_text_len,
                vocab_size: Tokenizer::new(max_text_len).vocab_size(),
                dropout: 0.0,
            },
            ..desk
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            coseg: self.coseg.clone(),
            prompts: self.prompts.clone(),
        }
    }

    /// Reads a flat TOML document. A `profile` key selects the base values;
    /// every other key overrides one field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = match table.get("profile") {
            Some(toml::Value::String(p)) => Profile::parse(p)?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => Profile::Desk,
        };
        let mut cfg = Self::for_profile(base);
        for (k, v) in &table {
            if k == "profile" {
                continue;
            }
            let s = match v {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                other => {
                    return Err(Error::Config(format!(
                        "key {k}: nested values are not supported ({other})"
                    )))
                }
            };
            cfg.set(k, &s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies a `key=value` override. Call `validate` once all overrides
    /// are in.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("key {key}: cannot parse {v:?}")))
        }
        let k = key;
        match key {
            "profile" => {
                let p = Profile::parse(value)?;
                *self = Self::for_profile(p);
            }
            "batch_size" => self.batch_size = num(k, value)?,
            "steps" => self.steps = num(k, value)?,
            "warmup_steps" => self.warmup_steps = num(k, value)?,
            "lr" => self.lr = num(k, value)?,
            "weight_decay" => self.weight_decay = num(k, value)?,
            "beta1" => self.beta1 = num(k, value)?,
            "beta2" => self.beta2 = num(k, value)?,
            "eps" => self.eps = num(k, value)?,
            "grad_clip" => self.grad_clip = num(k, value)?,
            "grad_accum" => self.grad_accum = num(k, value)?,
            "nouns_per_pair" => self.nouns_per_pair = num(k, value)?,
            "keep_duplicate_nouns" => self.keep_duplicate_nouns = num(k, value)?,
            "lambda_kg" => self.weights.lambda_kg = num(k, value)?,
            "lambda_seg_v" => self.weights.lambda_seg_v = num(k, value)?,
            "lambda_seg_t" => self.weights.lambda_seg_t = num(k, value)?,
            "lambda_hcl" => self.weights.lambda_hcl = num(k, value)?,
            "co_decomposition" => self.co_decomposition = num(k, value)?,
            "word_prompt" => self.word_prompt = num(k, value)?,
            "region_prompt" => self.region_prompt = num(k, value)?,
            "freeze_backbones" => self.freeze_backbones = num(k, value)?,
            "seed" => self.seed = num(k, value)?,
            "checkpoint_every" => self.checkpoint_every = num(k, value)?,
            "precision" => self.precision = value.to_string(),
            "data" => {
                self.data = match value {
                    "synthetic" => match self.data {
                        DataSource::Synthetic { .. } => self.data.clone(),
                        DataSource::Manifest(_) => DataSource::Synthetic { n: 500, seed: 7 },
                    },
                    path => DataSource::Manifest(path.to_string()),
                }
            }
            "synthetic_n" | "synthetic_seed" => {
                let (mut n, mut seed) = match self.data {
                    DataSource::Synthetic { n, seed } => (n, seed),
                    DataSource::Manifest(_) => (500, 7),
                };
                if key == "synthetic_n" {
                    n = num(k, value)?;
                } else {
                    seed = num(k, value)?;
                }
                self.data = DataSource::Synthetic { n, seed };
            }
            "image_size" => self.encoder.image_size = num(k, value)?,
            "patch" => self.encoder.patch = num(k, value)?,
            "width" => self.encoder.width = num(k, value)?,
            "heads" => self.encoder.heads = num(k, value)?,
            "image_layers" => self.encoder.image_layers = num(k, value)?,
            "text_layers" => self.encoder.text_layers = num(k, value)?,
            "segmenter_layers" => self.encoder.segmenter_layers = num(k, value)?,
            "mlp_ratio" => self.encoder.mlp_ratio = num(k, value)?,
            "max_text_len" => {
                self.encoder.max_text_len = num(k, value)?;
                self.encoder.vocab_size = Tokenizer::new(self.encoder.max_text_len).vocab_size();
            }
            "dropout" => self.encoder.dropout = num(k, value)?,
            "context_tokens" => self.coseg.context_tokens = num(k, value)?,
            "template" => self.coseg.template = value.to_string(),
            "gamma_init" => self.coseg.gamma_init = num(k, value)?,
            "beta_init" => self.coseg.beta_init = num(k, value)?,
            "w_init" => self.coseg.w_init = num(k, value)?,
            "b_init" => self.coseg.b_init = num(k, value)?,
            "area_lo" => self.coseg.area_lo = num(k, value)?,
            "area_hi" => self.coseg.area_hi = num(k, value)?,
            "area_weight" => self.coseg.area_weight = num(k, value)?,
            "tv_weight" => self.coseg.tv_weight = num(k, value)?,
            "contrast_weight" => self.coseg.contrast_weight = num(k, value)?,
            "contrast_tau" => self.coseg.contrast_tau = num(k, value)?,
            "prompt_init_std" => self.prompts.init_std = num(k, value)?,
            "repeated_word_prompt" => self.prompts.repeated_word_prompt = num(k, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.nouns_per_pair == 0 {
            return bad("nouns_per_pair must be at least 1");
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps must not exceed steps");
        }
        if self.grad_accum == 0 {
            return bad("grad_accum must be at least 1");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("lr, weight_decay and grad_clip must be non-negative");
        }
        if self.precision != "f64" {
            return Err(Error::Config(format!(
                "precision {:?} is not supported; only f64",
                self.precision
            )));
        }
        self.weights.validate()?;
        self.encoder.validate()?;
        self.coseg.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}
