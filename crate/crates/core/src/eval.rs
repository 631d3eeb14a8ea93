//! Zero-shot segmentation from class names, mIoU, synthetic grounding
//! metrics and the ablation suite.

use std::collections::BTreeMap;
use std::path::Path;

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::corpus::{
    generate_synthetic_corpus, label_palette, read_indexed_png, write_indexed_png, ImageSample, ShapeKind,
    SyntheticSample,
};
use crate::cosegment::pseudo_labels;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Tensor;
use crate::trainer::{synth_config, MetricsSink, TrainConfig, TrainCorpus, TrainState, Trainer};

pub const IGNORE_LABEL: u8 = 255;
pub const DEFAULT_BACKGROUND_THRESHOLD: f64 = 0.5;
pub const BACKGROUND_NAME: &str = "background";

/// A JSON number printed with exactly six decimals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fixed6(pub f64);

impl Serialize for Fixed6 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return s.serialize_none();
        }
        let raw = serde_json::value::RawValue::from_string(format!("{:.6}", self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassVocabulary {
    pub names: Vec<String>,
    pub has_background: bool,
    pub background_threshold: f64,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>, has_background: bool, background_threshold: f64) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::InvalidVocabulary("empty class name".into()));
            }
            if names[..i].contains(n) {
                return Err(Error::InvalidVocabulary(format!("duplicate class {n:?}")));
            }
        }
        if names.len() + has_background as usize > IGNORE_LABEL as usize {
            return Err(Error::InvalidVocabulary(format!("{} classes do not fit 8-bit labels", names.len())));
        }
        if !(0.0..=1.0).contains(&background_threshold) {
            return Err(Error::InvalidVocabulary(format!(
                "background threshold {background_threshold} outside [0, 1]"
            )));
        }
        Ok(Self {
            names,
            has_background,
            background_threshold,
        })
    }

    /// Comma-separated names.
    pub fn parse_list(list: &str, has_background: bool, background_threshold: f64) -> Result<Self> {
        let names = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        Self::new(names, has_background, background_threshold)
    }

    /// One name per line, or a single comma-separated line. Blank lines and
    /// lines starting with `#` are skipped. A `background` entry in first
    /// position switches background handling on.
    pub fn from_file(path: &Path, background_threshold: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .flat_map(|l| l.split(','))
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let has_background = names.first().map(String::as_str) == Some(BACKGROUND_NAME);
        if has_background {
            names.remove(0);
        }
        Self::new(names, has_background, background_threshold)
    }

    pub fn shapes(has_background: bool) -> Self {
        let names = ShapeKind::ALL.iter().map(|s| s.name().to_string()).collect();
        Self::new(names, has_background, DEFAULT_BACKGROUND_THRESHOLD).expect("valid")
    }

    /// Label value of class `k`.
    pub fn label_of(&self, k: usize) -> u8 {
        (k + self.has_background as usize) as u8
    }

    pub fn num_labels(&self) -> usize {
        self.names.len() + self.has_background as usize
    }

    /// Names indexed by label value.
    pub fn label_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.num_labels());
        if self.has_background {
            out.push(BACKGROUND_NAME.to_string());
        }
        out.extend(self.names.iter().cloned());
        out
    }

    pub fn name_refs(&self) -> Vec<&str> {
        self.names.iter().map(String::as_str).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: u8) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_indexed_png(path, self.height, self.width, &self.data, &label_palette())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let (h, w, data) = read_indexed_png(path)?;
        Self::new(h, w, data)
    }
}

/// Label map plus per-class sigmoid scores `[K, H*W]`.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub labels: LabelMap,
    pub scores: Tensor,
}

/// Per-pixel argmax over class logits `[K, H*W]`, lowest index winning
/// ties. With background, pixels whose best sigmoid score falls below the
/// threshold become background.
pub fn labels_from_logits(logits: &Tensor, height: usize, width: usize, vocab: &ClassVocabulary) -> Result<LabelMap> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != vocab.names.len() || s[1] != height * width {
        return Err(Error::Shape(format!(
            "logits {s:?} do not match {} classes over {height}x{width}",
            vocab.names.len()
        )));
    }
    let hw = height * width;
    let d = logits.data();
    let data = (0..hw)
        .map(|p| {
            let (best, v) = (0..s[0]).fold((0, f64::NEG_INFINITY), |(bk, bv), k| {
                let v = d[k * hw + p];
                if v > bv {
                    (k, v)
                } else {
                    (bk, bv)
                }
            });
            if vocab.has_background && sigmoid(v) < vocab.background_threshold {
                0
            } else {
                vocab.label_of(best)
            }
        })
        .collect();
    LabelMap::new(height, width, data)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Segments images against a fixed vocabulary; class embeddings are
/// computed once.
pub struct ZeroShotSegmenter<'a> {
    pub model: &'a Model,
    pub vocab: ClassVocabulary,
    classes: Tensor,
}

impl<'a> ZeroShotSegmenter<'a> {
    /// `use_template` embeds class names with the fixed template instead
    /// of the learned context.
    pub fn new(model: &'a Model, vocab: ClassVocabulary, use_template: bool) -> Result<Self> {
        let classes = model.class_embeddings(&vocab.name_refs(), use_template)?;
        Ok(Self { model, vocab, classes })
    }

    pub fn segment(&self, image: &ImageSample) -> Result<Segmentation> {
        let size = self.model.cfg.encoder.image_size;
        let resized;
        let img = if image.height == size && image.width == size {
            image
        } else {
            resized = image.resized(size, size)?;
            &resized
        };
        let logits = self.model.region_logits(img, &self.classes)?;
        let labels = labels_from_logits(&logits, size, size, &self.vocab)?;
        let labels = if (image.height, image.width) == (size, size) {
            labels
        } else {
            resize_nearest(&labels, image.height, image.width)
        };
        Ok(Segmentation {
            labels,
            scores: logits.map(sigmoid),
        })
    }
}

pub fn segment_image(model: &Model, image: &ImageSample, vocab: &ClassVocabulary) -> Result<Segmentation> {
    ZeroShotSegmenter::new(model, vocab.clone(), false)?.segment(image)
}

/// Nearest-neighbour resampling of a label map.
pub fn resize_nearest(m: &LabelMap, height: usize, width: usize) -> LabelMap {
    let data = (0..height)
        .flat_map(|y| {
            (0..width).map(move |x| {
                let sy = ((y as f64 + 0.5) * m.height as f64 / height as f64) as usize;
                let sx = ((x as f64 + 0.5) * m.width as f64 / width as f64) as usize;
                (sy.min(m.height - 1), sx.min(m.width - 1))
            })
        })
        .map(|(y, x)| m.get(y, x))
        .collect();
    LabelMap { height, width, data }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassIoU {
    pub name: String,
    pub intersection: u64,
    pub union: u64,
    /// `None` when the class is absent from both predictions and ground truth.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    pub classes: Vec<ClassIoU>,
    pub miou: f64,
    pub valid_pixels: u64,
}

impl Serialize for IoUReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let per_class: BTreeMap<&str, Option<Fixed6>> =
            self.classes.iter().map(|c| (c.name.as_str(), c.iou.map(Fixed6))).collect();
        let counts: BTreeMap<&str, (u64, u64)> = self
            .classes
            .iter()
            .map(|c| (c.name.as_str(), (c.intersection, c.union)))
            .collect();
        let counts: BTreeMap<&str, BTreeMap<&str, u64>> = counts
            .into_iter()
            .map(|(k, (i, u))| (k, BTreeMap::from([("intersection", i), ("union", u)])))
            .collect();
        let mut m = s.serialize_map(Some(4))?;
        m.serialize_entry("miou", &Fixed6(self.miou))?;
        m.serialize_entry("per_class_iou", &per_class)?;
        m.serialize_entry("pixel_counts", &counts)?;
        m.serialize_entry("valid_pixels", &self.valid_pixels)?;
        m.end()
    }
}

impl IoUReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Global per-class intersection and union over all pairs, skipping
/// ignore pixels of the ground truth. mIoU averages classes with a
/// nonzero union.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap], vocab: &ClassVocabulary) -> Result<IoUReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let k = vocab.num_labels();
    let mut inter = vec![0u64; k];
    let mut pred_n = vec![0u64; k];
    let mut gt_n = vec![0u64; k];
    let mut valid = 0u64;
    for (p, g) in preds.iter().zip(gts) {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                p.height, p.width, g.height, g.width
            )));
        }
        for (&a, &b) in p.data.iter().zip(&g.data) {
            if b == IGNORE_LABEL {
                continue;
            }
            let b = b as usize;
            if b >= k {
                return Err(Error::InvalidVocabulary(format!("ground-truth label {b} outside the vocabulary")));
            }
            valid += 1;
            gt_n[b] += 1;
            let a = a as usize;
            if a < k {
                pred_n[a] += 1;
                if a == b {
                    inter[b] += 1;
                }
            }
        }
    }
    if valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let classes: Vec<ClassIoU> = vocab
        .label_names()
        .into_iter()
        .enumerate()
        .map(|(c, name)| {
            let union = pred_n[c] + gt_n[c] - inter[c];
            ClassIoU {
                name,
                intersection: inter[c],
                union,
                iou: (union > 0).then(|| inter[c] as f64 / union as f64),
            }
        })
        .collect();
    let present: Vec<f64> = classes.iter().filter_map(|c| c.iou).collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IoUReport {
        classes,
        miou,
        valid_pixels: valid,
    })
}

/// Ground-truth label map of a synthetic sample under `vocab`. Objects whose
/// shape is not in the vocabulary, and the background when the vocabulary
/// has none, are marked ignore.
pub fn synthetic_label_map(sample: &SyntheticSample, vocab: &ClassVocabulary) -> LabelMap {
    let (h, w) = (sample.image.height, sample.image.width);
    let bg = if vocab.has_background { 0 } else { IGNORE_LABEL };
    let mut data = vec![bg; h * w];
    for o in &sample.objects {
        let label = match vocab.names.iter().position(|n| n == o.shape.name()) {
            Some(k) => vocab.label_of(k),
            None => IGNORE_LABEL,
        };
        for (d, &m) in data.iter_mut().zip(&o.region_mask) {
            if m == 1 {
                *d = label;
            }
        }
    }
    LabelMap { height: h, width: w, data }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticEval {
    /// Mean over ground-truth objects of the IoU between the object and the
    /// pixels predicted as its class.
    pub region_iou: f64,
    /// Fraction of ground-truth phrase tokens whose word-mask argmax is
    /// their own noun.
    pub word_accuracy: f64,
    pub report: IoUReport,
    pub objects: usize,
    pub word_tokens: usize,
}

impl Serialize for SyntheticEval {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(5))?;
        m.serialize_entry("region_iou", &Fixed6(self.region_iou))?;
        m.serialize_entry("word_accuracy", &Fixed6(self.word_accuracy))?;
        m.serialize_entry("objects", &self.objects)?;
        m.serialize_entry("word_tokens", &self.word_tokens)?;
        m.serialize_entry("segmentation", &self.report)?;
        m.end()
    }
}

/// Evaluates region and word masks against generator ground truth.
pub fn evaluate_synthetic(
    model: &Model,
    samples: &[SyntheticSample],
    vocab: &ClassVocabulary,
    use_template: bool,
) -> Result<SyntheticEval> {
    let seg = ZeroShotSegmenter::new(model, vocab.clone(), use_template)?;
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut iou_sum = 0.0;
    let mut objects = 0;
    let mut hits = 0;
    let mut tokens = 0;
    for s in samples {
        let pred = seg.segment(&s.image)?.labels;
        for o in &s.objects {
            let Some(k) = vocab.names.iter().position(|n| n == o.shape.name()) else {
                continue;
            };
            let label = vocab.label_of(k);
            let (mut i, mut u) = (0usize, 0usize);
            for (&p, &g) in pred.data.iter().zip(&o.region_mask) {
                let (p, g) = (p == label, g == 1);
                i += (p && g) as usize;
                u += (p || g) as usize;
            }
            iou_sum += if u == 0 { 0.0 } else { i as f64 / u as f64 };
            objects += 1;
        }
        gts.push(synthetic_label_map(s, vocab));
        preds.push(pred);

        if !s.objects.is_empty() {
            let nouns: Vec<&str> = s.objects.iter().map(|o| o.noun.noun_text.as_str()).collect();
            let logits = model.word_logits(&s.text, &nouns)?;
            let labels = pseudo_labels(&logits);
            for (j, o) in s.objects.iter().enumerate() {
                for (i, &m) in o.word_mask.iter().enumerate() {
                    if m == 1 {
                        tokens += 1;
                        hits += (labels[i] == j + 1) as usize;
                    }
                }
            }
        }
    }
    Ok(SyntheticEval {
        region_iou: if objects == 0 { 0.0 } else { iou_sum / objects as f64 },
        word_accuracy: if tokens == 0 { 0.0 } else { hits as f64 / tokens as f64 },
        report: miou(&preds, &gts, vocab)?,
        objects,
        word_tokens: tokens,
    })
}

/// Held-out synthetic evaluation sets: `single` has one object per image,
/// `multi` two or three.
pub fn synthetic_splits(cfg: &TrainConfig, n: usize, seed: u64) -> Result<Vec<(String, Vec<SyntheticSample>)>> {
    let mut single = synth_config(cfg, n, seed);
    single.min_objects = 1;
    single.max_objects = 1;
    let mut multi = synth_config(cfg, n, seed + 1);
    multi.min_objects = 2;
    multi.max_objects = 3;
    Ok(vec![
        ("single".to_string(), generate_synthetic_corpus(&single)?),
        ("multi".to_string(), generate_synthetic_corpus(&multi)?),
    ])
}

pub const HCL_SWEEP: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AblationFlags {
    pub co_decomposition: bool,
    pub word_prompt: bool,
    pub region_prompt: bool,
}

impl AblationFlags {
    pub const ROWS: [AblationFlags; 4] = [
        AblationFlags::new(false, false, false),
        AblationFlags::new(true, false, false),
        AblationFlags::new(true, true, false),
        AblationFlags::new(true, true, true),
    ];

    pub const fn new(c: bool, w: bool, r: bool) -> Self {
        Self {
            co_decomposition: c,
            word_prompt: w,
            region_prompt: r,
        }
    }

    /// `baseline`, `C`, `C+W`, `C+W+R`.
    pub fn label(self) -> String {
        let parts: Vec<&str> = [
            (self.co_decomposition, "C"),
            (self.word_prompt, "W"),
            (self.region_prompt, "R"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, s)| *s)
        .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    fn apply(self, cfg: &mut TrainConfig) {
        cfg.co_decomposition = self.co_decomposition;
        cfg.word_prompt = self.word_prompt;
        cfg.region_prompt = self.region_prompt;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub run: String,
    pub flags: AblationFlags,
    pub lambda_hcl: f64,
    /// mIoU per evaluation split, in split order.
    pub splits: Vec<(String, f64)>,
    pub average: f64,
}

impl Serialize for AblationRow {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(5))?;
        m.serialize_entry("run", &self.run)?;
        m.serialize_entry("flags", &self.flags)?;
        m.serialize_entry("lambda_hcl", &Fixed6(self.lambda_hcl))?;
        let splits: BTreeMap<&str, Fixed6> = self.splits.iter().map(|(k, v)| (k.as_str(), Fixed6(*v))).collect();
        m.serialize_entry("miou", &splits)?;
        m.serialize_entry("average", &Fixed6(self.average))?;
        m.end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub components: Vec<AblationRow>,
    pub hcl_sweep: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text tables: component rows, then the sweep as columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.components.first().or(self.hcl_sweep.first()) {
            let names: Vec<&str> = first.splits.iter().map(|(n, _)| n.as_str()).collect();
            out.push_str(&format!("{:<3} {:<3} {:<3}", "C.", "W.", "R."));
            for n in &names {
                out.push_str(&format!(" {n:>8}"));
            }
            out.push_str(&format!(" {:>8}\n", "Avg."));
            for r in &self.components {
                let mark = |b: bool| if b { "x" } else { "" };
                out.push_str(&format!(
                    "{:<3} {:<3} {:<3}",
                    mark(r.flags.co_decomposition),
                    mark(r.flags.word_prompt),
                    mark(r.flags.region_prompt)
                ));
                for (_, v) in &r.splits {
                    out.push_str(&format!(" {:>8.2}", 100.0 * v));
                }
                out.push_str(&format!(" {:>8.2}\n", 100.0 * r.average));
            }
        }
        if !self.hcl_sweep.is_empty() {
            out.push('\n');
            out.push_str(&format!("{:<10}", "lambda_hcl"));
            for r in &self.hcl_sweep {
                out.push_str(&format!(" {:>6}", r.lambda_hcl));
            }
            out.push_str(&format!("\n{:<10}", "Avg."));
            for r in &self.hcl_sweep {
                out.push_str(&format!(" {:>6.2}", 100.0 * r.average));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub base: TrainConfig,
    pub rows: Vec<AblationFlags>,
    /// Empty to skip the sweep.
    pub hcl_sweep: Vec<f64>,
    pub eval_n: usize,
    pub eval_seed: u64,
    pub vocab: ClassVocabulary,
}

impl AblationPlan {
    pub fn new(base: TrainConfig) -> Self {
        Self {
            base,
            rows: AblationFlags::ROWS.to_vec(),
            hcl_sweep: HCL_SWEEP.to_vec(),
            eval_n: 100,
            eval_seed: 1_000,
            vocab: ClassVocabulary::shapes(true),
        }
    }

    /// Distinct training runs: every row at the base weight, then the full
    /// model at each sweep weight. Runs that coincide are listed once.
    pub fn runs(&self) -> Vec<(String, TrainConfig)> {
        let mut out: Vec<(String, TrainConfig)> = Vec::new();
        let mut push = |name: String, cfg: TrainConfig| {
            if !out.iter().any(|(_, c)| *c == cfg) {
                out.push((name, cfg));
            }
        };
        for &f in &self.rows {
            let mut cfg = self.base.clone();
            f.apply(&mut cfg);
            push(f.label(), cfg);
        }
        let full = AblationFlags::new(true, true, true);
        for &l in &self.hcl_sweep {
            let mut cfg = self.base.clone();
            full.apply(&mut cfg);
            cfg.weights.lambda_hcl = l;
            push(format!("{}@hcl={l}", full.label()), cfg);
        }
        out
    }
}

/// Hooks into the suite's training runs.
pub trait AblationObserver {
    fn sink(&mut self, _run: &str) -> Result<Box<dyn MetricsSink>> {
        Ok(Box::new(crate::trainer::VecSink::default()))
    }

    fn finished(&mut self, _run: &str, _cfg: &TrainConfig, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl AblationObserver for () {}

/// Trains each distinct configuration of the plan and scores it on the
/// held-out synthetic splits.
pub fn run_ablation_suite(plan: &AblationPlan, observer: &mut dyn AblationObserver) -> Result<AblationReport> {
    let splits = synthetic_splits(&plan.base, plan.eval_n, plan.eval_seed)?;
    let mut scored: Vec<(TrainConfig, String, Vec<(String, f64)>, f64)> = Vec::new();
    let mut corpus: Option<TrainCorpus> = None;
    for (name, cfg) in plan.runs() {
        let c = match &corpus {
            Some(c) => c.clone(),
            None => {
                let c = TrainCorpus::load(&cfg)?;
                corpus = Some(c.clone());
                c
            }
        };
        let mut trainer = Trainer::new(cfg.clone(), c)?;
        let mut sink = observer.sink(&name)?;
        trainer.run(sink.as_mut(), None)?;
        drop(sink);
        observer.finished(&name, &trainer.cfg, &trainer.state)?;
        let mut per = Vec::new();
        for (split, samples) in &splits {
            let ev = evaluate_synthetic(&trainer.state.model, samples, &plan.vocab, false)?;
            per.push((split.clone(), ev.report.miou));
        }
        let avg = per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64;
        scored.push((cfg, name, per, avg));
    }
    let row = |flags: AblationFlags, lambda: f64| -> AblationRow {
        let mut cfg = plan.base.clone();
        flags.apply(&mut cfg);
        cfg.weights.lambda_hcl = lambda;
        let (_, run, splits, average) = scored.iter().find(|(c, ..)| *c == cfg).expect("run was scheduled");
        AblationRow {
            run: run.clone(),
            flags,
            lambda_hcl: lambda,
            splits: splits.clone(),
            average: *average,
        }
    };
    let base_l = plan.base.weights.lambda_hcl;
    Ok(AblationReport {
        components: plan.rows.iter().map(|&f| row(f, base_l)).collect(),
        hcl_sweep: plan
            .hcl_sweep
            .iter()
            .map(|&l| row(AblationFlags::new(true, true, true), l))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(bg: bool) -> ClassVocabulary {
        ClassVocabulary::parse_list("a,b", bg, 0.5).unwrap()
    }

    #[test]
    fn toy_miou() {
        let v = ClassVocabulary::parse_list("one,two", true, 0.5).unwrap();
        let p = LabelMap::new(2, 2, vec![1, 1, 2, 2]).unwrap();
        let g = LabelMap::new(2, 2, vec![1, 2, 2, 2]).unwrap();
        let r = miou(&[p], &[g], &v).unwrap();
        assert_eq!(r.classes[1].iou, Some(0.5));
        assert!((r.classes[2].iou.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.classes[0].iou, None);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let v = vocab(false);
        let g = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(miou(&[g.clone()], &[g.clone()], &v).unwrap().miou, 1.0);
        let p = LabelMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(miou(&[p], &[g], &v).unwrap().miou, 0.0);
    }

    #[test]
    fn ignore_only_is_an_error() {
        let v = vocab(false);
        let g = LabelMap::filled(2, 2, IGNORE_LABEL);
        assert!(matches!(miou(&[g.clone()], &[g], &v), Err(Error::NoValidPixels)));
    }

    #[test]
    fn labels_threshold_and_ties() {
        let logits = Tensor::new(&[2, 3], vec![0.0, 3.0, -4.0, 0.0, 1.0, -5.0]);
        let with_bg = ClassVocabulary::parse_list("a,b", true, 0.5).unwrap();
        let m = labels_from_logits(&logits, 1, 3, &with_bg).unwrap();
        assert_eq!(m.data, vec![1, 1, 0]);
        let zero = ClassVocabulary::parse_list("a,b", true, 0.0).unwrap();
        assert!(!labels_from_logits(&logits, 1, 3, &zero).unwrap().data.contains(&0));
        let no_bg = vocab(false);
        assert_eq!(labels_from_logits(&logits, 1, 3, &no_bg).unwrap().data, vec![0, 0, 0]);
    }

    #[test]
    fn vocabulary_checks() {
        assert!(matches!(ClassVocabulary::parse_list(" , ", false, 0.5), Err(Error::EmptyVocabulary)));
        assert!(ClassVocabulary::parse_list("a,a", false, 0.5).is_err());
        assert!(ClassVocabulary::parse_list("a", false, 1.5).is_err());
        let v = ClassVocabulary::parse_list("cat, dog", true, 0.5).unwrap();
        assert_eq!(v.label_names(), vec!["background", "cat", "dog"]);
    }

    #[test]
    fn fixed6_prints_six_decimals() {
        let s = serde_json::to_string(&vec![Fixed6(0.5), Fixed6(1.0 / 3.0)]).unwrap();
        assert_eq!(s, "[0.500000,0.333333]");
    }

    #[test]
    fn sweep_reuses_the_full_row() {
        let plan = AblationPlan::new(TrainConfig::desk());
        let runs = plan.runs();
        assert_eq!(runs.len(), 4 + 5);
        assert_eq!(runs[3].0, "C+W+R");
    }

    #[test]
    fn nearest_resize_roundtrip() {
        let m = LabelMap::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let up = resize_nearest(&m, 4, 4);
        assert_eq!(resize_nearest(&up, 2, 2), m);
    }
}
