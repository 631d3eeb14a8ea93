//! Training loop: batch assembly, loss evaluation, AdamW updates, metrics
//! and checkpoints.
//!
//! Randomness derives from one master seed. Each component draws from its
//! own ChaCha8 stream of that seed: stream 0 initializes parameters, stream
//! 1 assembles batches, stream 2 drives dropout.

mod checkpoint;
mod config;
mod data;
mod metrics;
mod optim;
mod step;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataSource, Profile, TrainConfig};
pub use data::{build_batch, synth_config, Batch, TrainCorpus, TrainPair, Triplet};
pub use metrics::{MetricRecord, MetricsSink, NdjsonSink, StepReport, VecSink};
pub use optim::{clip_grad_norm, lr_at, AdamW, AdamWConfig};
pub use step::{forward_backward, PassOutput};

use crate::align::LossParts;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{ParamId, Tensor};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_DATA: u64 = 1;
pub const STREAM_DROPOUT: u64 = 2;

/// Decay of the running loss averages.
const RUNNING_DECAY: f64 = 0.98;

pub fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub model: Model,
    pub opt: AdamW,
    pub data_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    /// Exponential moving averages of the per-term losses.
    pub running: BTreeMap<String, f64>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = component_rng(cfg.seed, STREAM_INIT);
        let mut model = Model::new(cfg.model_config(), &mut init)?;
        model.set_backbones_frozen(cfg.freeze_backbones);
        let opt = AdamW::new(AdamWConfig::from_train(cfg), &model.store);
        Ok(Self {
            step: 0,
            model,
            opt,
            data_rng: component_rng(cfg.seed, STREAM_DATA),
            dropout_rng: component_rng(cfg.seed, STREAM_DROPOUT),
            running: BTreeMap::new(),
        })
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub corpus: TrainCorpus,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, corpus: TrainCorpus) -> Result<Self> {
        let state = TrainState::init(&cfg)?;
        Ok(Self { cfg, corpus, state })
    }

    pub fn resume(cfg: TrainConfig, corpus: TrainCorpus, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if state.model.cfg != cfg.model_config() {
            return Err(Error::Config("checkpoint architecture differs from the config".into()));
        }
        Ok(Self { cfg, corpus, state })
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.cfg.steps
    }

    /// One optimizer step over `grad_accum` micro-batches.
    pub fn step(&mut self) -> Result<StepReport> {
        let cfg = &self.cfg;
        let st = &mut self.state;
        let next = st.step + 1;
        let lr = lr_at(next, cfg);
        let mut acc: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        let mut sums = [0.0f64; 4];
        let mut present = [false; 4];
        let mut total = 0.0;
        for _ in 0..cfg.grad_accum {
            let batch = build_batch(&self.corpus, cfg.batch_size, cfg.nouns_per_pair, &mut st.data_rng)?;
            let out = forward_backward(&st.model, &self.corpus, &batch, cfg, &mut st.dropout_rng, next)?;
            for (id, g) in out.grads {
                match acc.get_mut(&id) {
                    Some(a) => a.add_assign(&g),
                    None => {
                        acc.insert(id, g);
                    }
                }
            }
            for (k, v) in out.parts.values().into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    present[k] = true;
                }
            }
            total += out.total;
        }
        let n = cfg.grad_accum as f64;
        let mut grads: Vec<(ParamId, Tensor)> = acc
            .into_iter()
            .map(|(id, g)| (id, if n > 1.0 { g.map(|v| v / n) } else { g }))
            .collect();
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "gradient".into(),
                step: next,
            });
        }
        st.opt.step(&mut st.model.store, &grads, lr);
        st.step = next;
        let avg = |k: usize| present[k].then(|| sums[k] / n);
        let parts = LossParts {
            kg: avg(0),
            seg_v: avg(1),
            seg_t: avg(2),
            hcl: avg(3),
        };
        for (name, v) in LossParts::NAMES.iter().zip(parts.values()) {
            if let Some(v) = v {
                let r = st.running.entry(name.to_string()).or_insert(v);
                *r = RUNNING_DECAY * *r + (1.0 - RUNNING_DECAY) * v;
            }
        }
        Ok(StepReport {
            step: next,
            lr,
            total: total / n,
            parts,
            grad_norm,
        })
    }

    /// Trains until `steps`, reporting every step and writing
    /// `ckpt_dir/step-XXXXXX.ckpt` every `checkpoint_every` steps.
    pub fn run(&mut self, sink: &mut dyn MetricsSink, ckpt_dir: Option<&Path>) -> Result<()> {
        while !self.done() {
            let report = self.step()?;
            sink.record(&report)
                .map_err(|e| Error::io(PathBuf::from("<metrics>"), e))?;
            let every = self.cfg.checkpoint_every;
            if let Some(dir) = ckpt_dir {
                if every > 0 && self.state.step % every == 0 {
                    let p = dir.join(format!("step-{:06}.ckpt", self.state.step));
                    save_checkpoint(&self.cfg, &self.state, &p)?;
                }
            }
        }
        Ok(())
    }
}
