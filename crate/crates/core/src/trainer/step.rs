//! One forward/backward pass over a batch of triplets.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::data::{Batch, TrainCorpus};
use crate::align::{hcl_loss, similarity_matrix, total_loss, LossParts};
use crate::cosegment::{
    embed_nouns, image_seg_loss, kg_loss, pseudo_labels, region_logits, region_masks,
    template_nouns, text_seg_loss_sum, word_class_log_probs, word_logits, ImageSegInputs,
};
use crate::error::Result;
use crate::highlight::{highlight_region, highlight_text};
use crate::model::Model;
use crate::nn::{Ctx, ParamId, Tensor, Var};

pub struct PassOutput {
    pub parts: LossParts,
    pub total: f64,
    pub grads: Vec<(ParamId, Tensor)>,
}

fn key<'a>(s: &'a str, nouns: &mut Vec<&'a str>) -> usize {
    match nouns.iter().position(|n| *n == s) {
        Some(i) => i,
        None => {
            nouns.push(s);
            nouns.len() - 1
        }
    }
}

/// Selects rows of a `[P, ...]` node by leading index.
fn gather(ctx: &mut Ctx, x: Var, idx: &[usize]) -> Var {
    let s = ctx.g.shape(x).to_vec();
    let inner: usize = s[1..].iter().product();
    let flat = ctx.g.reshape(x, &[s[0], inner]);
    let rows = ctx.g.select0(flat, idx);
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&s[1..]);
    ctx.g.reshape(rows, &shape)
}

/// Runs the losses of one batch and returns their values and the gradient
/// of the weighted total.
pub fn forward_backward(
    model: &Model,
    corpus: &TrainCorpus,
    batch: &Batch,
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<PassOutput> {
    let enc = &model.enc;
    let pairs: Vec<_> = batch.pairs.iter().map(|&i| &corpus.pairs[i]).collect();
    let slot: BTreeMap<usize, usize> = batch.pairs.iter().enumerate().map(|(s, &i)| (i, s)).collect();
    let trip_slot: Vec<usize> = batch.triplets.iter().map(|t| slot[&t.pair]).collect();

    // Unique noun strings: triplet nouns first, then the other caption nouns
    // needed for the word masks.
    let mut nouns: Vec<&str> = Vec::new();
    let mut trip_key = Vec::with_capacity(batch.triplets.len());
    for t in &batch.triplets {
        let text = corpus.pairs[t.pair].nouns[t.noun].noun_text.as_str();
        trip_key.push(key(text, &mut nouns));
    }
    let mut pair_keys: Vec<Vec<usize>> = Vec::new();
    if cfg.co_decomposition {
        for p in &pairs {
            let ks = p.nouns.iter().map(|q| key(q.noun_text.as_str(), &mut nouns)).collect();
            pair_keys.push(ks);
        }
    }

    let anchors = template_nouns(&model.store, enc, &model.tokenizer, &model.cfg.coseg.template, &nouns)?;
    let mut ctx = Ctx::train(&model.store, cfg.encoder.dropout, dropout_rng);
    let noun_emb = embed_nouns(&mut ctx, enc, &model.seg, &model.tokenizer, &nouns)?;
    let anchors = ctx.constant(anchors);
    let n_trip = ctx.g.select0(noun_emb, &trip_key);
    let a_trip = ctx.g.select0(anchors, &trip_key);
    let l_kg = kg_loss(&mut ctx.g, n_trip, a_trip);

    // Image segmenter.
    let images: Vec<_> = pairs.iter().map(|p| &p.image).collect();
    let img = ctx.constant(enc.image_tensor(&images)?);
    let pix = enc.pixel_features(&mut ctx, img);
    let pix_t = gather(&mut ctx, pix, &trip_slot);
    let gamma = ctx.param(model.seg.gamma);
    let beta = ctx.param(model.seg.beta);
    let rlogits = region_logits(&mut ctx.g, pix_t, n_trip, gamma, beta);
    let up = ctx.constant(model.resampler.up.clone());
    let masks_v = region_masks(&mut ctx.g, rlogits, up);
    let size = cfg.encoder.image_size;
    let present: Vec<Vec<bool>> = pairs
        .iter()
        .map(|p| nouns.iter().map(|n| p.nouns.iter().any(|q| q.noun_text == *n)).collect())
        .collect();
    let seg_v = image_seg_loss(
        &mut ctx.g,
        &ImageSegInputs {
            masks: masks_v,
            height: size,
            width: size,
            pixels: pix,
            nouns: noun_emb,
            gamma,
            beta,
            present,
        },
        &model.cfg.coseg,
    )
    .total;

    let w = &cfg.weights;
    let mut parts = LossParts {
        kg: Some(ctx.g.value(l_kg).item()),
        seg_v: Some(ctx.g.value(seg_v).item()),
        seg_t: None,
        hcl: None,
    };
    let t1 = ctx.g.scale(l_kg, w.lambda_kg);
    let t2 = ctx.g.scale(seg_v, w.lambda_seg_v);
    let mut total = ctx.g.add(t1, t2);

    if cfg.co_decomposition {
        let texts: Vec<_> = pairs.iter().map(|p| &p.text).collect();
        let (l, c) = (cfg.encoder.max_text_len, cfg.encoder.width);
        let words = enc.word_features(&mut ctx, &texts)?;
        let wv = ctx.param(model.seg.w);
        let bv = ctx.param(model.seg.b);
        let mut ce_sum = None;
        let mut ce_count = 0;
        let mut mask_rows = Vec::new();
        let mut row_of = BTreeMap::new();
        let mut offset = 0;
        for (s, p) in pairs.iter().enumerate() {
            let n_p = ctx.g.select0(noun_emb, &pair_keys[s]);
            let x_p = gather(&mut ctx, words, &[s]);
            let x_p = ctx.g.reshape(x_p, &[l, c]);
            let lg = word_logits(&mut ctx.g, x_p, n_p, wv, bv);
            let host: Vec<Vec<f64>> = ctx.g.value(lg).data().chunks(l).map(<[f64]>::to_vec).collect();
            let labels = pseudo_labels(&host);
            let valid = p.text.valid_mask();
            let lp = word_class_log_probs(&mut ctx.g, lg);
            let (sum, count) = text_seg_loss_sum(&mut ctx.g, lp, &labels, &valid);
            ce_sum = Some(match ce_sum {
                Some(acc) => ctx.g.add(acc, sum),
                None => sum,
            });
            ce_count += count;
            let j = p.nouns.len();
            let probs = ctx.g.exp(lp);
            let m = ctx.g.narrow_last(probs, 1, j);
            let m = ctx.g.transpose_last(m);
            let keep: Vec<f64> = (0..j)
                .flat_map(|_| valid.iter().map(|&v| if v { 1.0 } else { 0.0 }))
                .collect();
            let m = ctx.g.mul_const(m, Rc::new(Tensor::new(&[j, l], keep)));
            mask_rows.push(m);
            for q in 0..j {
                row_of.insert((batch.pairs[s], q), offset + q);
            }
            offset += j;
        }
        let ce = ctx.g.scale(ce_sum.expect("batch has pairs"), 1.0 / ce_count.max(1) as f64);
        parts.seg_t = Some(ctx.g.value(ce).item());

        let all_masks = ctx.g.concat0(&mask_rows);
        let rows: Vec<usize> = batch.triplets.iter().map(|t| row_of[&(t.pair, t.noun)]).collect();
        let masks_t = ctx.g.select0(all_masks, &rows);
        let tok = enc.token_embeddings(&mut ctx, &texts)?;
        let tok_t = gather(&mut ctx, tok, &trip_slot);
        let p_t = if cfg.word_prompt {
            ctx.param(model.prompts.word)
        } else {
            let shape = model.store.get(model.prompts.word).shape().to_vec();
            ctx.constant(Tensor::zeros(&shape))
        };
        let h_t = highlight_text(&mut ctx.g, tok_t, masks_t, p_t)?;
        let e_t = enc.segment_text_embed(&mut ctx, h_t);

        let img_t = gather(&mut ctx, img, &trip_slot);
        let p_v = if cfg.region_prompt {
            ctx.param(model.prompts.region)
        } else {
            let shape = model.store.get(model.prompts.region).shape().to_vec();
            ctx.constant(Tensor::zeros(&shape))
        };
        let h_v = highlight_region(&mut ctx.g, img_t, masks_v, p_v)?;
        let e_v = enc.segment_image_embed(&mut ctx, h_v);

        let sim = similarity_matrix(&mut ctx.g, e_v, e_t)?;
        let log_tau = ctx.param(model.log_tau);
        let hcl = hcl_loss(&mut ctx.g, sim, log_tau)?;
        parts.hcl = Some(ctx.g.value(hcl).item());

        let t3 = ctx.g.scale(ce, w.lambda_seg_t);
        let t4 = ctx.g.scale(hcl, w.lambda_hcl);
        total = ctx.g.add(total, t3);
        total = ctx.g.add(total, t4);
    }

    let value = total_loss(&parts, w, step)?;
    let grads = ctx.param_grads(total);
    Ok(PassOutput {
        parts,
        total: value,
        grads,
    })
}
