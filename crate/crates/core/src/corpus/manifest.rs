use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: String,
    pub caption: String,
    /// Optional ground-truth label map (paletted PNG) for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub format_version: u32,
    /// Directory relative image paths resolve against.
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn resolve(&self, uri: &str) -> PathBuf {
        let p = Path::new(uri);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads a newline-delimited JSON manifest. Blank lines are skipped; image
/// paths are not checked until the image is loaded.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::ManifestParse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.caption.trim().is_empty() {
            return Err(Error::ManifestParse {
                line: i + 1,
                message: "empty caption".into(),
            });
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(CorpusManifest {
        entries,
        format_version: MANIFEST_FORMAT_VERSION,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// Decodes an image file and resamples it to `size x size`.
pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<ImageSample> {
    decode(path.as_ref(), Some(size))
}

/// Decodes an image file at its native resolution.
pub fn load_image_native(path: impl AsRef<Path>) -> Result<ImageSample> {
    decode(path.as_ref(), None)
}

fn decode(path: &Path, size: Option<usize>) -> Result<ImageSample> {
    let err = |message: String| Error::Image {
        path: path.display().to_string(),
        message,
    };
    let mut img = image::open(path).map_err(|e| err(e.to_string()))?.to_rgb8();
    if let Some(size) = size {
        if img.width() as usize != size || img.height() as usize != size {
            img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
        }
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageSample::new(id, h, w, pixels)
}
