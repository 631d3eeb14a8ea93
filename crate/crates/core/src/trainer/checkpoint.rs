//! Checkpoint archive.
//!
//! ```text
//! magic "CODECKPT" | u32 version | u64 header length | header JSON
//! | parameter values | first moments | second moments   (f64 little-endian)
//! | SHA-256 of everything before it
//! ```
//!
//! The header records the training config, parameter names, shapes and
//! flags, the optimizer step count, random generator positions and running
//! loss averages. Writes go to a temporary file that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::optim::{AdamW, AdamWConfig};
use super::TrainState;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CODECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    no_decay: bool,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// Decimal string; JSON numbers cannot hold a u128.
    word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| Error::CheckpointCorrupt(format!("bad rng position {}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    step: u64,
    opt_t: u64,
    params: Vec<ParamMeta>,
    data_rng: RngState,
    dropout_rng: RngState,
    running: BTreeMap<String, f64>,
}

fn corrupt(m: impl Into<String>) -> Error {
    Error::CheckpointCorrupt(m.into())
}

pub fn save_checkpoint(cfg: &TrainConfig, state: &TrainState, path: &Path) -> Result<()> {
    let store = &state.model.store;
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        step: state.step,
        opt_t: state.opt.t,
        params: store
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                no_decay: p.no_decay,
            })
            .collect(),
        data_rng: RngState::of(&state.data_rng),
        dropout_rng: RngState::of(&state.dropout_rng),
        running: state.running.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let blobs = store
        .iter()
        .map(|(_, p)| &p.value)
        .chain(&state.opt.m)
        .chain(&state.opt.v);
    for t in blobs {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

/// Parses an in-memory checkpoint archive.
pub fn decode_checkpoint(buf: &[u8]) -> Result<(TrainConfig, TrainState)> {
    let fixed = CHECKPOINT_MAGIC.len() + 4 + 8;
    if buf.len() < fixed + 32 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointChecksum);
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CheckpointChecksum);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let hend = fixed
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length out of range"))?;
    let header: Header =
        serde_json::from_slice(&body[fixed..hend]).map_err(|e| corrupt(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }

    let mut values = body[hend..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(corrupt("parameter data truncated"));
        }
        Ok(Tensor::new(shape, data))
    };
    let mut store = ParamStore::new();
    for p in &header.params {
        let t = take(&p.shape)?;
        let id = store.add(&p.name, t, p.no_decay);
        store.set_trainable(id, p.trainable);
    }
    let m = header.params.iter().map(|p| take(&p.shape)).collect::<Result<Vec<_>>>()?;
    let v = header.params.iter().map(|p| take(&p.shape)).collect::<Result<Vec<_>>>()?;
    if (body.len() - hend) != 8 * 3 * store.num_scalars() {
        return Err(corrupt("unexpected trailing data"));
    }
    let cfg = header.config;
    let model = Model::with_store(cfg.model_config(), store)?;
    let opt = AdamW {
        cfg: AdamWConfig::from_train(&cfg),
        t: header.opt_t,
        m,
        v,
    };
    let state = TrainState {
        step: header.step,
        model,
        opt,
        data_rng: header.data_rng.restore()?,
        dropout_rng: header.dropout_rng.restore()?,
        running: header.running,
    };
    Ok((cfg, state))
}
