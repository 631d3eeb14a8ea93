//! Image and text segmenters conditioned on noun embeddings, and their
//! losses.
//!
//! Noun embeddings come from `[SOT, context..., noun, EOT]` through the text
//! backbone, read at the end token. The knowledge-guided anchor is the same
//! encoder applied to a hand-written template. Region masks are sigmoids of
//! scaled noun-pixel dot products; word masks are a softmax over the nouns
//! of a caption plus an implicit none class with logit 0.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::multi_positive_info_nce;
use crate::corpus::{Tokenizer, EOT, SOT};
use crate::encoders::{bilinear_matrix, EncoderBundle, PixelEmbeddingMap};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Ctx, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosegConfig {
    pub context_tokens: usize,
    /// Knowledge template; `{}` is replaced by the noun.
    pub template: String,
    pub gamma_init: f64,
    pub beta_init: f64,
    pub w_init: f64,
    pub b_init: f64,
    pub area_lo: f64,
    pub area_hi: f64,
    pub area_weight: f64,
    pub tv_weight: f64,
    pub contrast_weight: f64,
    pub contrast_tau: f64,
}

impl Default for CosegConfig {
    fn default() -> Self {
        Self {
            context_tokens: 4,
            template: "a photo of a {}".into(),
            gamma_init: 10.0,
            beta_init: -2.5,
            w_init: 5.0,
            b_init: 0.0,
            area_lo: 0.05,
            area_hi: 0.6,
            area_weight: 1.0,
            tv_weight: 0.1,
            contrast_weight: 1.0,
            contrast_tau: 0.07,
        }
    }
}

impl CosegConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.template.contains("{}") {
            return Err(Error::Config("template must contain {}".into()));
        }
        if !(0.0 <= self.area_lo && self.area_lo <= self.area_hi && self.area_hi <= 1.0) {
            return Err(Error::Config("need 0 <= area_lo <= area_hi <= 1".into()));
        }
        if self.contrast_tau <= 0.0 {
            return Err(Error::Config("contrast_tau must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable parameters owned by the segmenters.
#[derive(Clone, Debug)]
pub struct SegmenterParams {
    /// `[context_tokens, C]` prompt-learning context.
    pub context: ParamId,
    /// Region mask scale and bias.
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Word logit scale and bias, shared across nouns.
    pub w: ParamId,
    pub b: ParamId,
}

impl SegmenterParams {
    pub fn new(store: &mut ParamStore, cfg: &CosegConfig, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            context: store.normal("coseg.context", &[cfg.context_tokens, width], 0.02, rng),
            gamma: store.add("coseg.gamma", Tensor::scalar(cfg.gamma_init), true),
            beta: store.add("coseg.beta", Tensor::scalar(cfg.beta_init), true),
            w: store.add("coseg.w", Tensor::scalar(cfg.w_init), true),
            b: store.add("coseg.b", Tensor::scalar(cfg.b_init), true),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.context, self.gamma, self.beta, self.w, self.b]
    }
}

/// Bilinear up/down sampling between the patch grid and image pixels.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub grid: usize,
    pub size: usize,
    /// `[grid^2, size^2]`
    pub up: Tensor,
    /// Transpose of `up`.
    pub down: Tensor,
}

impl Resampler {
    pub fn new(grid: usize, size: usize) -> Self {
        let up = bilinear_matrix(grid, grid, size, size);
        let (n, hw) = (grid * grid, size * size);
        let mut down = vec![0.0; n * hw];
        for i in 0..n {
            for j in 0..hw {
                down[j * n + i] = up.data()[i * hw + j];
            }
        }
        Self {
            grid,
            size,
            up,
            down: Tensor::new(&[hw, n], down),
        }
    }
}

/// Host-side pair of noun embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct NounEmbedding {
    pub n: Vec<f64>,
    pub n_prime: Vec<f64>,
}

/// Soft region mask at image resolution, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

fn noun_ids(tok: &Tokenizer, noun: &str) -> Result<Vec<u32>> {
    let ids = tok.encode_phrase(noun);
    if ids.is_empty() {
        return Err(Error::EmptyNoun);
    }
    Ok(ids)
}

/// Noun embeddings `[J, C]` from learned context tokens.
pub fn embed_nouns(
    ctx: &mut Ctx,
    bundle: &EncoderBundle,
    seg: &SegmenterParams,
    tok: &Tokenizer,
    nouns: &[&str],
) -> Result<Var> {
    let l = bundle.cfg.max_text_len;
    let c = bundle.cfg.width;
    let n_ctx = ctx.store().get(seg.context).shape()[0];
    let table = ctx.param(bundle.text.token_embed);
    let context = ctx.param(seg.context);
    let mut seqs = Vec::with_capacity(nouns.len());
    let mut valid = Vec::with_capacity(nouns.len() * l);
    let mut spans = Vec::with_capacity(nouns.len());
    for (j, noun) in nouns.iter().enumerate() {
        let ids = noun_ids(tok, noun)?;
        let len = n_ctx + ids.len() + 2;
        if len > l {
            return Err(Error::TooLong { len, max: l });
        }
        let sot = ctx.g.select0(table, &[SOT as usize]);
        let body: Vec<usize> = ids.iter().map(|&v| v as usize).collect();
        let body = ctx.g.select0(table, &body);
        let eot = ctx.g.select0(table, &[EOT as usize]);
        let mut parts = vec![sot, context, body, eot];
        if len < l {
            parts.push(ctx.constant(Tensor::zeros(&[l - len, c])));
        }
        seqs.push(ctx.g.concat0(&parts));
        valid.extend((0..l).map(|i| i < len));
        let start = j * l + 1 + n_ctx;
        spans.push((start, start + ids.len()));
    }
    let all = ctx.g.concat0(&seqs);
    let all = ctx.g.reshape(all, &[nouns.len(), l, c]);
    let mask = crate::nn::KeyMask::new(valid, l);
    let out = bundle.text_forward(ctx, all, Some(&mask));
    let out = ctx.g.reshape(out, &[nouns.len() * l, c]);
    let avg = ctx.constant(span_average(&spans, nouns.len() * l));
    let out = ctx.g.matmul(avg, out);
    let out = bundle.word_head.forward(ctx, out);
    Ok(ctx.g.l2_normalize(out))
}

/// `[J, rows]` matrix averaging each `[start, end)` row span.
fn span_average(spans: &[(usize, usize)], rows: usize) -> Tensor {
    let mut a = Tensor::zeros(&[spans.len(), rows]);
    for (j, &(s, e)) in spans.iter().enumerate() {
        for r in s..e {
            a.data_mut()[j * rows + r] = 1.0 / (e - s) as f64;
        }
    }
    a
}

/// Template noun embeddings `[J, C]`, computed without gradients.
pub fn template_nouns(
    store: &ParamStore,
    bundle: &EncoderBundle,
    tok: &Tokenizer,
    template: &str,
    nouns: &[&str],
) -> Result<Tensor> {
    let (l, c) = (bundle.cfg.max_text_len, bundle.cfg.width);
    let before = template.split("{}").next().map_or(0, |p| Tokenizer::split_words(p).len());
    let mut texts = Vec::with_capacity(nouns.len());
    let mut spans = Vec::with_capacity(nouns.len());
    for (j, noun) in nouns.iter().enumerate() {
        noun_ids(tok, noun)?;
        let text = template.replace("{}", noun);
        let sample = tok.encode(&text);
        if sample.words.len() != Tokenizer::split_words(&text).len() {
            return Err(Error::TooLong {
                len: tok.encode_phrase(&text).len() + 2,
                max: tok.max_len(),
            });
        }
        let nw = Tokenizer::split_words(noun).len();
        spans.push((j * l + sample.word_spans[before].0, j * l + sample.word_spans[before + nw - 1].1));
        texts.push(sample);
    }
    let refs: Vec<_> = texts.iter().collect();
    let mut ctx = Ctx::eval(store);
    let embeds = bundle.token_embeddings(&mut ctx, &refs)?;
    let mask = EncoderBundle::pad_mask(&refs);
    let out = bundle.text_forward(&mut ctx, embeds, Some(&mask));
    let out = ctx.g.reshape(out, &[texts.len() * l, c]);
    let avg = ctx.constant(span_average(&spans, texts.len() * l));
    let out = ctx.g.matmul(avg, out);
    let out = bundle.word_head.forward(&mut ctx, out);
    let out = ctx.g.l2_normalize(out);
    Ok(ctx.g.value(out).clone())
}

pub fn embed_noun(
    store: &ParamStore,
    bundle: &EncoderBundle,
    seg: &SegmenterParams,
    tok: &Tokenizer,
    template: &str,
    noun: &str,
) -> Result<NounEmbedding> {
    let mut ctx = Ctx::eval(store);
    let n = embed_nouns(&mut ctx, bundle, seg, tok, &[noun])?;
    let n = ctx.g.value(n).data().to_vec();
    let n_prime = template_nouns(store, bundle, tok, template, &[noun])?.into_data();
    Ok(NounEmbedding { n, n_prime })
}

/// Mean over rows of `||n - n'||^2`; `n'` is detached.
pub fn kg_loss(g: &mut Graph, n: Var, n_prime: Var) -> Var {
    let rows = g.shape(n)[0];
    let anchor = g.detach(n_prime);
    let d = g.sub(n, anchor);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / rows as f64)
}

/// `gamma * <x_p, n_t> + beta` for pixel features `[T, N, C]` and nouns
/// `[T, C]`, giving `[T, N]`.
pub fn region_logits(g: &mut Graph, pixels: Var, nouns: Var, gamma: Var, beta: Var) -> Var {
    let s = g.shape(pixels).to_vec();
    let (t, n, c) = (s[0], s[1], s[2]);
    let col = g.reshape(nouns, &[t, c, 1]);
    let dots = g.matmul(pixels, col);
    let dots = g.reshape(dots, &[t, n]);
    let scaled = g.mul_scalar(dots, gamma);
    g.add_scalar(scaled, beta)
}

/// Sigmoid of the upsampled logits, `[T, H*W]`.
pub fn region_masks(g: &mut Graph, logits: Var, up: Var) -> Var {
    let full = g.matmul(logits, up);
    g.sigmoid(full)
}

/// Host-side region mask of one noun on a pixel map.
pub fn region_mask(
    map: &PixelEmbeddingMap,
    noun: &[f64],
    gamma: f64,
    beta: f64,
    out_h: usize,
    out_w: usize,
) -> Result<RegionMask> {
    let c = map.values.last_dim();
    if noun.len() != c {
        return Err(Error::Shape(format!("noun has {} dims, pixels {c}", noun.len())));
    }
    let logits: Vec<f64> = map
        .values
        .data()
        .chunks(c)
        .map(|x| gamma * x.iter().zip(noun).map(|(a, b)| a * b).sum::<f64>() + beta)
        .collect();
    let up = bilinear_matrix(map.grid_h, map.grid_w, out_h, out_w);
    let hw = out_h * out_w;
    let mut values = vec![0.0; hw];
    for (i, l) in logits.iter().enumerate() {
        for (v, u) in values.iter_mut().zip(&up.data()[i * hw..(i + 1) * hw]) {
            *v += l * u;
        }
    }
    values.iter_mut().for_each(|v| *v = sigmoid(*v));
    Ok(RegionMask {
        height: out_h,
        width: out_w,
        values,
    })
}

/// `w * <x^t_i, n_j> + b` for word features `[L, C]` and nouns `[J, C]`,
/// giving `[J, L]`.
pub fn word_logits(g: &mut Graph, words: Var, nouns: Var, w: Var, b: Var) -> Var {
    let wt = g.transpose_last(words);
    let dots = g.matmul(nouns, wt);
    let scaled = g.mul_scalar(dots, w);
    g.add_scalar(scaled, b)
}

/// Per-word log-probabilities `[L, J + 1]` over the none class (column 0)
/// and the `J` nouns.
pub fn word_class_log_probs(g: &mut Graph, logits: Var) -> Var {
    let l = g.shape(logits)[1];
    let zero = g.constant(Tensor::zeros(&[1, l]));
    let all = g.concat0(&[zero, logits]);
    let t = g.transpose_last(all);
    g.log_softmax(t)
}

/// Word masks `[J, L]`.
pub fn word_masks(g: &mut Graph, logits: Var) -> Var {
    let j = g.shape(logits)[0];
    let lp = word_class_log_probs(g, logits);
    let p = g.exp(lp);
    let nouns = g.narrow_last(p, 1, j);
    g.transpose_last(nouns)
}

/// Host-side word masks per noun and the none-class residual per word.
/// `logits[j][i]` is the logit of noun `j` at word `i`.
pub fn word_mask_values(logits: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let l = logits.first().map_or(0, Vec::len);
    let mut masks = vec![vec![0.0; l]; logits.len()];
    let mut residual = vec![0.0; l];
    for i in 0..l {
        let m = logits.iter().map(|r| r[i]).fold(0.0f64, f64::max);
        let none = (-m).exp();
        let exps: Vec<f64> = logits.iter().map(|r| (r[i] - m).exp()).collect();
        let z = none + exps.iter().sum::<f64>();
        for (j, e) in exps.iter().enumerate() {
            masks[j][i] = e / z;
        }
        residual[i] = none / z;
    }
    (masks, residual)
}

/// Winning class per word: 0 for none, `j + 1` for noun `j`. Ties go to the
/// lowest class index, so the none class wins ties at 0.
pub fn pseudo_labels(logits: &[Vec<f64>]) -> Vec<usize> {
    let l = logits.first().map_or(0, Vec::len);
    (0..l)
        .map(|i| {
            let mut best = (0usize, 0.0f64);
            for (j, r) in logits.iter().enumerate() {
                if r[i] > best.1 {
                    best = (j + 1, r[i]);
                }
            }
            best.0
        })
        .collect()
}

/// One `{0,1}` vector per noun from [`pseudo_labels`].
pub fn pseudo_label_vectors(logits: &[Vec<f64>]) -> Vec<Vec<u8>> {
    let labels = pseudo_labels(logits);
    (0..logits.len())
        .map(|j| labels.iter().map(|&c| u8::from(c == j + 1)).collect())
        .collect()
}

/// Summed cross-entropy of the valid words against the class labels, and
/// the number of valid words.
pub fn text_seg_loss_sum(
    g: &mut Graph,
    log_probs: Var,
    labels: &[usize],
    valid: &[bool],
) -> (Var, usize) {
    let s = g.shape(log_probs).to_vec();
    let (l, k) = (s[0], s[1]);
    let mut pick = Tensor::zeros(&[l, k]);
    let mut count = 0;
    for i in 0..l {
        if valid[i] {
            pick.data_mut()[i * k + labels[i]] = 1.0;
            count += 1;
        }
    }
    let picked = g.mul_const(log_probs, Rc::new(pick));
    let total = g.sum(picked);
    (g.neg(total), count)
}

/// Mean over valid words of the `(J + 1)`-way cross-entropy.
pub fn text_seg_loss(g: &mut Graph, log_probs: Var, labels: &[usize], valid: &[bool]) -> Result<Var> {
    let (sum, count) = text_seg_loss_sum(g, log_probs, labels, valid);
    if count == 0 {
        return Err(Error::AllPadText);
    }
    Ok(g.scale(sum, 1.0 / count as f64))
}

/// Individual terms of the image segmentation surrogate; each is `None`
/// when its weight is zero.
#[derive(Clone, Copy, Debug)]
pub struct ImageSegTerms {
    pub area: Option<Var>,
    pub tv: Option<Var>,
    pub contrast: Option<Var>,
    pub total: Var,
}

/// Inputs to the image segmentation surrogate for `T` triplets drawn from
/// `P` images with `K` distinct nouns.
pub struct ImageSegInputs {
    /// `[T, H*W]` region masks.
    pub masks: Var,
    pub height: usize,
    pub width: usize,
    /// `[P, N, C]` unit-norm pixel features on the patch grid.
    pub pixels: Var,
    /// `[K, C]` unit-norm noun embeddings.
    pub nouns: Var,
    pub gamma: Var,
    pub beta: Var,
    /// `present[p][k]`: noun `k` is mentioned in the caption of image `p`.
    pub present: Vec<Vec<bool>>,
}

/// Area window hinge + total variation + mask-weighted grounding contrast.
pub fn image_seg_loss(g: &mut Graph, x: &ImageSegInputs, cfg: &CosegConfig) -> ImageSegTerms {
    let s = g.shape(x.masks).to_vec();
    let (t, hw) = (s[0], s[1]);
    let mut total = g.constant(Tensor::scalar(0.0));
    let mut area = None;
    if cfg.area_weight > 0.0 {
        let ones = g.constant(Tensor::full(&[hw, 1], 1.0 / hw as f64));
        let frac = g.matmul(x.masks, ones);
        let low = g.neg(frac);
        let low = g.offset(low, cfg.area_lo);
        let low = g.relu(low);
        let high = g.offset(frac, -cfg.area_hi);
        let high = g.relu(high);
        let hinge = g.add(low, high);
        let a = g.mean(hinge);
        let w = g.scale(a, cfg.area_weight);
        total = g.add(total, w);
        area = Some(a);
    }
    let mut tv = None;
    if cfg.tv_weight > 0.0 {
        let planes = g.reshape(x.masks, &[t, x.height, x.width]);
        let v = g.total_variation(planes);
        let w = g.scale(v, cfg.tv_weight);
        total = g.add(total, w);
        tv = Some(v);
    }
    let mut contrast = None;
    if cfg.contrast_weight > 0.0 {
        let v = grounding_contrast(g, x, cfg.contrast_tau);
        let w = g.scale(v, cfg.contrast_weight);
        total = g.add(total, w);
        contrast = Some(v);
    }
    ImageSegTerms {
        area,
        tv,
        contrast,
        total,
    }
}

/// Grounding scores `[P, K]`: every image is masked by every noun on the
/// patch grid and scored by the mask-weighted mean of its pixel-noun
/// cosines.
pub fn grounding_scores(g: &mut Graph, pixels: Var, nouns: Var, gamma: Var, beta: Var) -> Var {
    let nt = g.transpose_last(nouns);
    let dots = g.matmul(pixels, nt);
    let logits = g.mul_scalar(dots, gamma);
    let logits = g.add_scalar(logits, beta);
    let masks = g.sigmoid(logits);
    let weighted = g.mul(masks, dots);
    let weighted = g.transpose_last(weighted);
    let num = g.sum_last(weighted);
    let masks = g.transpose_last(masks);
    let den = g.sum_last(masks);
    let inv = g.log(den);
    let inv = g.neg(inv);
    let inv = g.exp(inv);
    let s = g.mul(num, inv);
    let (p, k) = (g.shape(pixels)[0], g.shape(nouns)[0]);
    g.reshape(s, &[p, k])
}

fn grounding_contrast(g: &mut Graph, x: &ImageSegInputs, tau: f64) -> Var {
    let scores = grounding_scores(g, x.pixels, x.nouns, x.gamma, x.beta);
    let logits = g.scale(scores, 1.0 / tau);
    multi_positive_info_nce(g, logits, &x.present)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_mask_examples() {
        let (m, r) = word_mask_values(&[vec![0.0]]);
        assert!((m[0][0] - 0.5).abs() < 1e-15 && (r[0] - 0.5).abs() < 1e-15);
        let (m, r) = word_mask_values(&[vec![0.0], vec![0.0]]);
        for v in [m[0][0], m[1][0], r[0]] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let (m, _) = word_mask_values(&[vec![1.0], vec![0.0]]);
        let e = std::f64::consts::E;
        assert!((m[0][0] - e / (2.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn word_masks_survive_huge_logits() {
        let (m, r) = word_mask_values(&[vec![1000.0, -1000.0], vec![999.0, -1000.0]]);
        for i in 0..2 {
            assert!((m[0][i] + m[1][i] + r[i] - 1.0).abs() < 1e-12);
        }
        assert!(r[1] > 0.99);
    }

    #[test]
    fn pseudo_label_examples() {
        assert_eq!(pseudo_label_vectors(&[vec![3.0], vec![-1.0]]), vec![vec![1], vec![0]]);
        assert_eq!(pseudo_labels(&[vec![-0.5], vec![-2.0]]), vec![0]);
        assert_eq!(pseudo_labels(&[vec![0.0], vec![0.0]]), vec![0]);
        assert_eq!(pseudo_labels(&[vec![1.0], vec![1.0]]), vec![1]);
    }

    #[test]
    fn graph_word_masks_match_host_values() {
        let logits = vec![vec![0.3, -1.2, 2.0], vec![1.1, 0.4, -0.7]];
        let (host, _) = word_mask_values(&logits);
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[2, 3], logits.concat()));
        let m = word_masks(&mut g, l);
        for (a, b) in g.value(m).data().iter().zip(host.concat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn text_seg_loss_examples() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(&[1, 1], vec![0.0]));
        let lp = word_class_log_probs(&mut g, l);
        let loss = text_seg_loss(&mut g, lp, &[1], &[true]).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            text_seg_loss(&mut g, lp, &[1], &[false]),
            Err(Error::AllPadText)
        ));
    }

    #[test]
    fn kg_loss_examples() {
        let run = |n: Vec<f64>, p: Vec<f64>| {
            let mut g = Graph::new();
            let a = g.constant(Tensor::new(&[1, 2], n));
            let b = g.constant(Tensor::new(&[1, 2], p));
            let l = kg_loss(&mut g, a, b);
            g.value(l).item()
        };
        assert_eq!(run(vec![0.3, 0.4], vec![0.3, 0.4]), 0.0);
        assert_eq!(run(vec![1.0, 0.0], vec![0.0, 1.0]), 2.0);
        assert_eq!(run(vec![0.5, 0.5], vec![0.0, 0.0]), 0.5);
    }

    #[test]
    fn region_mask_of_orthogonal_features_is_half() {
        let map = PixelEmbeddingMap {
            grid_h: 2,
            grid_w: 2,
            values: Tensor::new(&[4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.5, 0.0, 0.0, 0.0]),
        };
        let m = region_mask(&map, &[0.0, 1.0], 3.0, 0.0, 4, 4).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.5));
        assert!(region_mask(&map, &[1.0], 1.0, 0.0, 4, 4).is_err());
    }
}
