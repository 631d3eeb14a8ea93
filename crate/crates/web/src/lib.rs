//! Browser bindings for three operations: draw a synthetic sample, compute
//! word masks from noun logits, and segment an image with an uploaded
//! checkpoint. Each binding has a plain Rust twin returning `String` errors,
//! which is what the native tests call.

use code_core::corpus::{generate_synthetic_corpus, label_palette, ImageSample, ShapeKind, SynthConfig};
use code_core::cosegment::{pseudo_labels, word_mask_values};
use code_core::eval::{ClassVocabulary, ZeroShotSegmenter};
use code_core::trainer::{decode_checkpoint, TrainState};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// One synthetic sample as JSON: caption, size, RGBA bytes, label map and
/// per-object metadata.
pub fn synth_sample_json(seed: u64, size: usize) -> Result<String, String> {
    let cfg = SynthConfig {
        n: 1,
        image_size: size,
        seed,
        ..SynthConfig::default()
    };
    let s = generate_synthetic_corpus(&cfg).map_err(|e| e.to_string())?.remove(0);
    let rgba: Vec<u8> = s
        .image
        .pixels
        .chunks(3)
        .flat_map(|p| [to_byte(p[0]), to_byte(p[1]), to_byte(p[2]), 255])
        .collect();
    let objects: Vec<_> = s
        .objects
        .iter()
        .map(|o| json!({"shape": o.shape.name(), "color": o.color, "word_mask": o.word_mask}))
        .collect();
    let tokens: Vec<&str> = s.text.words.iter().map(String::as_str).collect();
    Ok(json!({
        "caption": s.text.raw_text,
        "words": tokens,
        "width": s.image.width,
        "height": s.image.height,
        "rgba": rgba,
        "labels": s.label_map(&ShapeKind::ALL),
        "classes": ["background", "circle", "square", "triangle"],
        "objects": objects,
    })
    .to_string())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Word masks for `logits[j][i]` (noun `j`, word `i`): per-noun masks, the
/// none-class residual and the argmax labels.
pub fn word_masks_json(logits: &str) -> Result<String, String> {
    let logits: Vec<Vec<f64>> = serde_json::from_str(logits).map_err(|e| e.to_string())?;
    let l = logits.first().map_or(0, Vec::len);
    if l == 0 || logits.iter().any(|r| r.len() != l) {
        return Err("logits must be a non-empty rectangular array".into());
    }
    if logits.iter().flatten().any(|v| !v.is_finite()) {
        return Err("logits must be finite".into());
    }
    let (masks, residual) = word_mask_values(&logits);
    Ok(json!({"masks": masks, "residual": residual, "labels": pseudo_labels(&logits)}).to_string())
}

/// Palette of label colours as `[[r, g, b], ...]`.
#[wasm_bindgen]
pub fn palette() -> String {
    json!(label_palette()).to_string()
}

#[wasm_bindgen(js_name = synthSample)]
pub fn synth_sample(seed: u32, size: usize) -> Result<String, JsError> {
    synth_sample_json(u64::from(seed), size).map_err(js)
}

#[wasm_bindgen(js_name = wordMasks)]
pub fn word_masks(logits: &str) -> Result<String, JsError> {
    word_masks_json(logits).map_err(js)
}

#[wasm_bindgen]
pub struct Segmenter {
    state: TrainState,
}

impl Segmenter {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let (_, state) = decode_checkpoint(bytes).map_err(|e| e.to_string())?;
        Ok(Self { state })
    }

    /// Label map of an RGBA image; label 0 is background and `k + 1` the
    /// k-th comma-separated class.
    pub fn run(&self, rgba: &[u8], width: usize, height: usize, classes: &str, threshold: f64) -> Result<Vec<u8>, String> {
        if rgba.len() != width * height * 4 {
            return Err(format!("expected {} RGBA bytes, got {}", width * height * 4, rgba.len()));
        }
        let pixels = rgba
            .chunks(4)
            .flat_map(|p| p[..3].iter().map(|&v| f64::from(v) / 255.0))
            .collect();
        let image = ImageSample::new("upload", height, width, pixels).map_err(|e| e.to_string())?;
        let vocab = ClassVocabulary::parse_list(classes, true, threshold).map_err(|e| e.to_string())?;
        let seg = ZeroShotSegmenter::new(&self.state.model, vocab, false).map_err(|e| e.to_string())?;
        Ok(seg.segment(&image).map_err(|e| e.to_string())?.labels.data)
    }
}

#[wasm_bindgen]
impl Segmenter {
    #[wasm_bindgen(constructor)]
    pub fn new(bytes: &[u8]) -> Result<Segmenter, JsError> {
        Self::from_bytes(bytes).map_err(js)
    }

    #[wasm_bindgen(js_name = imageSize)]
    pub fn image_size(&self) -> usize {
        self.state.model.cfg.encoder.image_size
    }

    pub fn segment(&self, rgba: &[u8], width: usize, height: usize, classes: &str, threshold: f64) -> Result<Vec<u8>, JsError> {
        self.run(rgba, width, height, classes, threshold).map_err(js)
    }
}
