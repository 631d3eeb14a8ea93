//! Feature extractors: a patch transformer for pixel-wise image features, a
//! token transformer for captions and noun prompts, the two-layer text
//! segmenter head, and the segment-level encoders applied to highlighted
//! inputs.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageSample, TextSample};
use crate::error::{Error, Result};
use crate::nn::layers::{Block, LayerNorm, Linear};
use crate::nn::{Ctx, KeyMask, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    /// Attention layers appended to the text backbone for word features.
    pub segmenter_layers: usize,
    pub mlp_ratio: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.max_text_len < 4 {
            return bad("max_text_len must be at least 4".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// `x^v`: unit-norm features on the `H' x W'` patch grid, shape `[H'*W', C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelEmbeddingMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Tensor,
}

/// `x^t`: unit-norm word features `[L, C]`, pad rows zero.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddingMap {
    pub values: Tensor,
}

#[derive(Clone, Debug)]
pub struct ImageBackbone {
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct TextBackbone {
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
}

/// A pooled projection to a unit-norm segment embedding.
#[derive(Clone, Debug)]
pub struct SegmentHead {
    pub ln: LayerNorm,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct EncoderBundle {
    pub cfg: EncoderConfig,
    pub image: ImageBackbone,
    pub pixel_head: Linear,
    pub text: TextBackbone,
    pub segmenter: Vec<Block>,
    pub segmenter_ln: LayerNorm,
    /// Projection shared by word and noun features.
    pub word_head: Linear,
    pub segment_image: SegmentHead,
    pub segment_text: SegmentHead,
}

fn blocks(
    store: &mut ParamStore,
    prefix: &str,
    n: usize,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) -> Vec<Block> {
    (0..n)
        .map(|i| Block::new(store, &format!("{prefix}.{i}"), cfg.width, cfg.heads, cfg.mlp_ratio, rng))
        .collect()
}

impl SegmentHead {
    fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), width),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, true, rng),
        }
    }

    /// Mean over tokens of `[B, N, C]`, then norm, projection and L2
    /// normalization to `[B, C]`.
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let pooled = mean_tokens(ctx, x);
        let h = self.ln.forward(ctx, pooled);
        let h = self.proj.forward(ctx, h);
        ctx.g.l2_normalize(h)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln.params();
        p.extend(self.proj.params());
        p
    }
}

/// `[B, N, C] -> [B, C]` mean over the token axis.
pub(crate) fn mean_tokens(ctx: &mut Ctx, x: Var) -> Var {
    let s = ctx.g.shape(x).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let xt = ctx.g.transpose_last(x);
    let ones = ctx.constant(Tensor::full(&[n, 1], 1.0 / n as f64));
    let m = ctx.g.matmul(xt, ones);
    ctx.g.reshape(m, &[b, c])
}

/// Source pixel index for each row of the patch-major layout: patches in
/// raster order, pixels within a patch in raster order.
/// Input standardization applied to every channel before patch embedding.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

pub fn patch_permutation(height: usize, width: usize, patch: usize) -> Vec<usize> {
    let (gh, gw) = (height / patch, width / patch);
    let mut perm = Vec::with_capacity(height * width);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    perm.push((pr * patch + dy) * width + pc * patch + dx);
                }
            }
        }
    }
    perm
}

impl EncoderBundle {
    pub fn new(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let patch_dim = cfg.patch * cfg.patch * 3;
        let image = ImageBackbone {
            patch_embed: Linear::new(store, "image.patch_embed", patch_dim, c, true, rng),
            pos: store.normal("image.pos", &[cfg.tokens(), c], 0.02, rng),
            blocks: blocks(store, "image.blocks", cfg.image_layers, &cfg, rng),
            ln: LayerNorm::new(store, "image.ln", c),
        };
        let pixel_head = Linear::new(store, "pixel_head", c, c, true, rng);
        let text = TextBackbone {
            token_embed: store.normal("text.token_embed", &[cfg.vocab_size, c], 0.02, rng),
            pos: store.normal("text.pos", &[cfg.max_text_len, c], 0.02, rng),
            blocks: blocks(store, "text.blocks", cfg.text_layers, &cfg, rng),
            ln: LayerNorm::new(store, "text.ln", c),
        };
        let segmenter = blocks(store, "segmenter.blocks", cfg.segmenter_layers, &cfg, rng);
        let segmenter_ln = LayerNorm::new(store, "segmenter.ln", c);
        let word_head = Linear::new(store, "word_head", c, c, true, rng);
        let segment_image = SegmentHead::new(store, "segment_image", c, rng);
        let segment_text = SegmentHead::new(store, "segment_text", c, rng);
        Ok(Self {
            cfg,
            image,
            pixel_head,
            text,
            segmenter,
            segmenter_ln,
            word_head,
            segment_image,
            segment_text,
        })
    }

    /// Parameters of the image and text backbones (excluding heads).
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut p = self.image.patch_embed.params();
        p.push(self.image.pos);
        self.image.blocks.iter().for_each(|b| p.extend(b.params()));
        p.extend(self.image.ln.params());
        p.push(self.text.token_embed);
        p.push(self.text.pos);
        self.text.blocks.iter().for_each(|b| p.extend(b.params()));
        p.extend(self.text.ln.params());
        p
    }

    pub fn segmenter_params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        self.segmenter.iter().for_each(|b| p.extend(b.params()));
        p.extend(self.segmenter_ln.params());
        p.extend(self.word_head.params());
        p
    }

    pub fn segment_encoder_params(&self) -> Vec<ParamId> {
        let mut p = self.segment_image.params();
        p.extend(self.segment_text.params());
        p
    }

    fn check_image(&self, img: &ImageSample) -> Result<()> {
        let s = self.cfg.image_size;
        if img.height != s || img.width != s {
            return Err(Error::Shape(format!(
                "image {}x{} does not match the model size {s}x{s}",
                img.height, img.width
            )));
        }
        Ok(())
    }

    /// Raster `[B, H*W, 3]` images to patch rows `[B, N, p*p*3]`.
    pub fn patchify(&self, ctx: &mut Ctx, images: Var) -> Var {
        let s = ctx.g.shape(images).to_vec();
        let b = s[0];
        let size = self.cfg.image_size;
        let hw = size * size;
        let perm = patch_permutation(size, size, self.cfg.patch);
        let idx: Vec<usize> = (0..b).flat_map(|i| perm.iter().map(move |&p| i * hw + p)).collect();
        let flat = ctx.g.reshape(images, &[b * hw, 3]);
        let rows = ctx.g.select0(flat, &idx);
        let pd = self.cfg.patch * self.cfg.patch * 3;
        ctx.g.reshape(rows, &[b, self.cfg.tokens(), pd])
    }

    /// Constant `[B, H*W, 3]` tensor of raster pixels.
    pub fn image_tensor(&self, images: &[&ImageSample]) -> Result<Tensor> {
        let hw = self.cfg.image_size * self.cfg.image_size;
        let mut data = Vec::with_capacity(images.len() * hw * 3);
        for img in images {
            self.check_image(img)?;
            data.extend_from_slice(&img.pixels);
        }
        Ok(Tensor::new(&[images.len(), hw, 3], data))
    }

    /// Backbone tokens `[B, N, C]` for raster images `[B, H*W, 3]`.
    pub fn image_tokens(&self, ctx: &mut Ctx, images: Var) -> Var {
        let patches = self.patchify(ctx, images);
        let patches = ctx.g.offset(patches, -PIXEL_MEAN);
        let patches = ctx.g.scale(patches, 1.0 / PIXEL_STD);
        let x = self.image.patch_embed.forward(ctx, patches);
        let pos = ctx.param(self.image.pos);
        let mut x = ctx.g.add_suffix(x, pos);
        x = ctx.dropout(x);
        for b in &self.image.blocks {
            x = b.forward(ctx, x, None);
        }
        self.image.ln.forward(ctx, x)
    }

    /// Unit-norm pixel features `[B, N, C]`.
    pub fn pixel_features(&self, ctx: &mut Ctx, images: Var) -> Var {
        let t = self.image_tokens(ctx, images);
        let f = self.pixel_head.forward(ctx, t);
        ctx.g.l2_normalize(f)
    }

    pub fn embed_pixels(&self, store: &ParamStore, image: &ImageSample) -> Result<PixelEmbeddingMap> {
        let t = self.image_tensor(&[image])?;
        if !t.is_finite() {
            return Err(Error::NonFinite("image".into()));
        }
        let mut ctx = Ctx::eval(store);
        let x = ctx.constant(t);
        let f = self.pixel_features(&mut ctx, x);
        let g = self.cfg.grid();
        let values = ctx.g.value(f).clone().reshape(&[g * g, self.cfg.width]);
        Ok(PixelEmbeddingMap {
            grid_h: g,
            grid_w: g,
            values,
        })
    }

    /// Input token embeddings `[B, L, C]` (before position embeddings).
    pub fn token_embeddings(&self, ctx: &mut Ctx, texts: &[&TextSample]) -> Result<Var> {
        let l = self.cfg.max_text_len;
        let mut ids = Vec::with_capacity(texts.len() * l);
        for t in texts {
            if t.tokens.len() != l {
                return Err(Error::TooLong {
                    len: t.tokens.len(),
                    max: l,
                });
            }
            if t.len == 0 {
                return Err(Error::AllPadText);
            }
            ids.extend(t.tokens.iter().map(|&v| v as usize));
        }
        let table = ctx.param(self.text.token_embed);
        let rows = ctx.g.select0(table, &ids);
        Ok(ctx.g.reshape(rows, &[texts.len(), l, self.cfg.width]))
    }

    /// Text backbone over embeddings `[B, L, C]`; position embeddings are
    /// added here.
    pub fn text_forward(&self, ctx: &mut Ctx, embeds: Var, mask: Option<&KeyMask>) -> Var {
        let pos = ctx.param(self.text.pos);
        let mut x = ctx.g.add_suffix(embeds, pos);
        x = ctx.dropout(x);
        for b in &self.text.blocks {
            x = b.forward(ctx, x, mask);
        }
        self.text.ln.forward(ctx, x)
    }

    pub fn pad_mask(texts: &[&TextSample]) -> KeyMask {
        let keys = texts.first().map_or(0, |t| t.tokens.len());
        KeyMask::new(texts.iter().flat_map(|t| t.valid_mask()).collect(), keys)
    }

    /// Word features `x^t` `[B, L, C]`: unit-norm rows, pad rows zero.
    pub fn word_features(&self, ctx: &mut Ctx, texts: &[&TextSample]) -> Result<Var> {
        let embeds = self.token_embeddings(ctx, texts)?;
        let mask = Self::pad_mask(texts);
        let mut x = self.text_forward(ctx, embeds, Some(&mask));
        for b in &self.segmenter {
            x = b.forward(ctx, x, Some(&mask));
        }
        let x = self.segmenter_ln.forward(ctx, x);
        let x = self.word_head.forward(ctx, x);
        let x = ctx.g.l2_normalize(x);
        let (b, l, c) = (texts.len(), self.cfg.max_text_len, self.cfg.width);
        let keep: Vec<f64> = texts
            .iter()
            .flat_map(|t| t.valid_mask())
            .flat_map(|v| std::iter::repeat(if v { 1.0 } else { 0.0 }).take(c))
            .collect();
        Ok(ctx.g.mul_const(x, Rc::new(Tensor::new(&[b, l, c], keep))))
    }

    pub fn embed_words(&self, store: &ParamStore, text: &TextSample) -> Result<WordEmbeddingMap> {
        let mut ctx = Ctx::eval(store);
        let x = self.word_features(&mut ctx, &[text])?;
        let values = ctx.g.value(x).clone().reshape(&[self.cfg.max_text_len, self.cfg.width]);
        Ok(WordEmbeddingMap { values })
    }

    /// `E^v` on raster highlighted images `[B, H*W, 3]`, giving `[B, C]`.
    pub fn segment_image_embed(&self, ctx: &mut Ctx, highlighted: Var) -> Var {
        let t = self.image_tokens(ctx, highlighted);
        self.segment_image.forward(ctx, t)
    }

    /// `E^t` on highlighted token embeddings `[B, L, C]`, giving `[B, C]`.
    /// Every position participates: masked-out and pad rows carry the word
    /// prompt.
    pub fn segment_text_embed(&self, ctx: &mut Ctx, highlighted: Var) -> Var {
        let t = self.text_forward(ctx, highlighted, None);
        self.segment_text.forward(ctx, t)
    }
}

/// 1-D linear interpolation weights `[out, in]` with half-pixel centers.
fn interp_1d(input: usize, output: usize) -> Vec<f64> {
    let mut w = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let f = src - i0 as f64;
        w[o * input + i0] += 1.0 - f;
        w[o * input + i1] += f;
    }
    w
}

/// Bilinear upsampling as a matrix `[h*w, H*W]` so that a row vector of
/// grid values times the matrix gives the raster image.
pub fn bilinear_matrix(h: usize, w: usize, out_h: usize, out_w: usize) -> Tensor {
    let ay = interp_1d(h, out_h);
    let ax = interp_1d(w, out_w);
    let mut m = vec![0.0; h * w * out_h * out_w];
    for r in 0..h {
        for c in 0..w {
            let row = r * w + c;
            for oy in 0..out_h {
                let wy = ay[oy * h + r];
                if wy == 0.0 {
                    continue;
                }
                for ox in 0..out_w {
                    m[row * out_h * out_w + oy * out_w + ox] = wy * ax[ox * w + c];
                }
            }
        }
    }
    Tensor::new(&[h * w, out_h * out_w], m)
}
