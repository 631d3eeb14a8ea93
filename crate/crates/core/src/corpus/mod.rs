//! Image-caption corpora: manifests, tokenization, noun selection and the
//! synthetic shapes corpus with known region/word correspondences.

mod export;
mod manifest;
mod nouns;
mod synth;
mod tokenizer;

pub use export::{
    export_synthetic, label_palette, read_indexed_png, write_gray_png, write_indexed_png, write_rgb_png,
};
pub use manifest::{load_image, load_image_native, load_manifest, CorpusManifest, ManifestEntry, MANIFEST_FORMAT_VERSION};
pub use nouns::{extract_nouns, sample_nouns, LexiconTagger, NounOptions, NounQuery, PosTag, PosTagger};
pub use synth::{generate_synthetic_corpus, NamedColor, ShapeKind, SynthConfig, SyntheticObject, SyntheticSample};
pub use tokenizer::{TextSample, Tokenizer, EOT, PAD, SOT, UNK};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image with values in `[0, 1]`, stored row-major `H x W x 3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageSample {
    pub const MIN_SIDE: usize = 8;

    pub fn new(id: impl Into<String>, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is smaller than {0}x{0}",
                Self::MIN_SIDE
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidImage(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            pixels,
        })
    }

    pub fn filled(id: impl Into<String>, height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(id, height, width, pixels)
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Bilinear resampling to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        let src: image::Rgb32FImage =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.pixels.iter().map(|&v| v as f32).collect())
                .expect("buffer matches dimensions");
        let out = image::imageops::resize(&src, width as u32, height as u32, image::imageops::FilterType::Triangle);
        let pixels = out.into_raw().into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect();
        Self::new(self.id.clone(), height, width, pixels)
    }

    /// Mirror image across the vertical axis.
    pub fn flipped_horizontally(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                pixels.extend(self.pixel(r, c));
            }
        }
        Self {
            id: self.id.clone(),
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}
