//! Highlighting: convex blends of an input with a learnable universal
//! prompt, `H = X * M + P * (1 - M)`, for images (per pixel, broadcast over
//! channels) and captions (per token, broadcast over features).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageSample;
use crate::encoders::bilinear_matrix;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub init_std: f64,
    /// Use one word-prompt row for every position instead of one per
    /// position.
    pub repeated_word_prompt: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            init_std: PROMPT_INIT_STD,
            repeated_word_prompt: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prompts {
    /// `[H*W, 3]` region prompt in raster order.
    pub region: ParamId,
    /// `[L_max, C]`, or `[1, C]` when repeated.
    pub word: ParamId,
    pub size: usize,
}

impl Prompts {
    pub fn new(
        store: &mut ParamStore,
        cfg: &PromptConfig,
        size: usize,
        max_len: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = if cfg.repeated_word_prompt { 1 } else { max_len };
        Self {
            region: store.normal("prompt.region", &[size * size, 3], cfg.init_std, rng),
            word: store.normal("prompt.word", &[rows, width], cfg.init_std, rng),
            size,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.region, self.word]
    }
}

/// Repeats `[R, D]` rows into `[batch, len, D]`, cycling if `R < len`.
fn tile_rows(g: &mut Graph, p: Var, batch: usize, len: usize) -> Var {
    let s = g.shape(p).to_vec();
    let (r, d) = (s[0], s[1]);
    let idx: Vec<usize> = (0..batch).flat_map(|_| (0..len).map(move |i| i % r)).collect();
    let rows = g.select0(p, &idx);
    g.reshape(rows, &[batch, len, d])
}

/// Highlighted images `[T, H*W, 3]` from images `[T, H*W, 3]`, masks
/// `[T, H*W]` and the prompt `[H*W, 3]`.
pub fn highlight_region(g: &mut Graph, images: Var, masks: Var, prompt: Var) -> Result<Var> {
    let (si, sm, sp) = (
        g.shape(images).to_vec(),
        g.shape(masks).to_vec(),
        g.shape(prompt).to_vec(),
    );
    if si.len() != 3 || sm != si[..2] || sp != si[1..] {
        return Err(Error::Shape(format!(
            "image {si:?}, mask {sm:?}, prompt {sp:?}"
        )));
    }
    let p = tile_rows(g, prompt, si[0], si[1]);
    Ok(g.blend(images, masks, p))
}

/// Highlighted token embeddings `[T, L, C]` from embeddings `[T, L, C]`,
/// masks `[T, L]` and a word prompt whose row `i` fills position `i`.
pub fn highlight_text(g: &mut Graph, embeds: Var, masks: Var, prompt: Var) -> Result<Var> {
    let (se, sm, sp) = (
        g.shape(embeds).to_vec(),
        g.shape(masks).to_vec(),
        g.shape(prompt).to_vec(),
    );
    if se.len() != 3 || sm != se[..2] || sp.len() != 2 || sp[1] != se[2] {
        return Err(Error::Shape(format!(
            "embeddings {se:?}, mask {sm:?}, prompt {sp:?}"
        )));
    }
    if sp[0] != 1 && sp[0] < se[1] {
        return Err(Error::Shape(format!(
            "{} tokens exceed the {} prompt rows",
            se[1], sp[0]
        )));
    }
    let p = tile_rows(g, prompt, se[0], se[1]);
    Ok(g.blend(embeds, masks, p))
}

/// Host-side region highlight of one image.
pub fn highlight_image(image: &ImageSample, mask: &[f64], prompt: &Tensor) -> Result<Vec<f64>> {
    let hw = image.height * image.width;
    if mask.len() != hw || prompt.shape() != [hw, 3] {
        return Err(Error::Shape(format!(
            "image {}x{}, mask {}, prompt {:?}",
            image.height,
            image.width,
            mask.len(),
            prompt.shape()
        )));
    }
    Ok(image
        .pixels
        .chunks(3)
        .zip(prompt.data().chunks(3))
        .zip(mask)
        .flat_map(|((x, p), &m)| (0..3).map(move |c| x[c] * m + p[c] * (1.0 - m)))
        .collect())
}

/// Bilinear resize of a raster `[h*w, 3]` prompt to `size x size`.
pub fn resize_prompt(prompt: &Tensor, from: usize, size: usize) -> Tensor {
    if from == size {
        return prompt.clone();
    }
    let up = bilinear_matrix(from, from, size, size);
    let (n, hw) = (from * from, size * size);
    let mut out = vec![0.0; hw * 3];
    for i in 0..n {
        let src = &prompt.data()[i * 3..i * 3 + 3];
        for (j, &w) in up.data()[i * hw..(i + 1) * hw].iter().enumerate() {
            if w != 0.0 {
                for c in 0..3 {
                    out[j * 3 + c] += w * src[c];
                }
            }
        }
    }
    Tensor::new(&[hw, 3], out)
}

/// The region prompt as displayable `[0, 1]` pixels.
pub fn render_region_prompt(prompt: &Tensor) -> Vec<f64> {
    prompt.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()
}
