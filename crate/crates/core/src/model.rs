//! The full set of learnable components in one parameter store.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::align::INIT_INV_TAU;
use crate::corpus::{ImageSample, TextSample, Tokenizer};
use crate::cosegment::{
    embed_nouns, region_logits, template_nouns, word_logits, CosegConfig, Resampler,
    SegmenterParams,
};
use crate::encoders::{EncoderBundle, EncoderConfig};
use crate::error::{Error, Result};
use crate::highlight::{PromptConfig, Prompts};
use crate::nn::{Ctx, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub coseg: CosegConfig,
    pub prompts: PromptConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub enc: EncoderBundle,
    pub seg: SegmenterParams,
    pub prompts: Prompts,
    pub log_tau: ParamId,
    pub tokenizer: Tokenizer,
    pub resampler: Resampler,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.coseg.validate()?;
        let tokenizer = Tokenizer::new(cfg.encoder.max_text_len);
        if cfg.encoder.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match the tokenizer ({})",
                cfg.encoder.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let mut store = ParamStore::new();
        let enc = EncoderBundle::new(&mut store, cfg.encoder.clone(), rng)?;
        let c = cfg.encoder.width;
        let seg = SegmenterParams::new(&mut store, &cfg.coseg, c, rng);
        let prompts = Prompts::new(
            &mut store,
            &cfg.prompts,
            cfg.encoder.image_size,
            cfg.encoder.max_text_len,
            c,
            rng,
        );
        let log_tau = store.add("align.log_tau", Tensor::scalar(-INIT_INV_TAU.ln()), true);
        let resampler = Resampler::new(cfg.encoder.grid(), cfg.encoder.image_size);
        Ok(Self {
            cfg,
            store,
            enc,
            seg,
            prompts,
            log_tau,
            tokenizer,
            resampler,
        })
    }

    /// Rebuilds the model structure for `cfg` and takes parameter values
    /// and trainable flags from `store`, matched by name and shape.
    pub fn with_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(cfg, &mut rng)?;
        if store.len() != model.store.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "{} parameters, model has {}",
                store.len(),
                model.store.len()
            )));
        }
        for (id, p) in store.iter() {
            let mine = model.store.param(id);
            if mine.name != p.name || mine.value.shape() != p.value.shape() {
                return Err(Error::CheckpointCorrupt(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name,
                    p.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    /// Freezes or unfreezes the image and text backbones.
    pub fn set_backbones_frozen(&mut self, frozen: bool) {
        for id in self.enc.backbone_params() {
            self.store.set_trainable(id, !frozen);
        }
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).item().exp()
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.store.get(id).item()
    }

    /// Unit-norm class embeddings `[K, C]` from the learned context, or from
    /// the knowledge template when `use_template` is set.
    pub fn class_embeddings(&self, names: &[&str], use_template: bool) -> Result<Tensor> {
        if names.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        if use_template {
            return template_nouns(&self.store, &self.enc, &self.tokenizer, &self.cfg.coseg.template, names);
        }
        let mut ctx = Ctx::eval(&self.store);
        let n = embed_nouns(&mut ctx, &self.enc, &self.seg, &self.tokenizer, names)?;
        Ok(ctx.g.value(n).clone())
    }

    /// Full-resolution region logits `[K, H*W]` of each class embedding.
    pub fn region_logits(&self, image: &ImageSample, classes: &Tensor) -> Result<Tensor> {
        let k = classes.shape()[0];
        let mut ctx = Ctx::eval(&self.store);
        let img = ctx.constant(self.enc.image_tensor(&[image])?);
        let pix = self.enc.pixel_features(&mut ctx, img);
        let n = self.cfg.encoder.tokens();
        let c = self.cfg.encoder.width;
        let pix = ctx.g.reshape(pix, &[n, c]);
        let idx: Vec<usize> = (0..k).flat_map(|_| 0..n).collect();
        let pix = ctx.g.select0(pix, &idx);
        let pix = ctx.g.reshape(pix, &[k, n, c]);
        let nouns = ctx.constant(classes.clone());
        let gamma = ctx.param(self.seg.gamma);
        let beta = ctx.param(self.seg.beta);
        let logits = region_logits(&mut ctx.g, pix, nouns, gamma, beta);
        let up = ctx.constant(self.resampler.up.clone());
        let full = ctx.g.matmul(logits, up);
        Ok(ctx.g.value(full).clone())
    }

    /// Word logits `logits[j][i]` of each noun over the caption positions.
    pub fn word_logits(&self, text: &TextSample, nouns: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut ctx = Ctx::eval(&self.store);
        let n = embed_nouns(&mut ctx, &self.enc, &self.seg, &self.tokenizer, nouns)?;
        let x = self.enc.word_features(&mut ctx, &[text])?;
        let (l, c) = (self.cfg.encoder.max_text_len, self.cfg.encoder.width);
        let x = ctx.g.reshape(x, &[l, c]);
        let w = ctx.param(self.seg.w);
        let b = ctx.param(self.seg.b);
        let lg = word_logits(&mut ctx.g, x, n, w, b);
        Ok(ctx.g.value(lg).data().chunks(l).map(<[f64]>::to_vec).collect())
    }
}
