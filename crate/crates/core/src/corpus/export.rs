//! On-disk export of the synthetic corpus and small PNG writers.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.jsonl        {"image": "images/<id>.png", "caption": ..., "labels": "labels/<id>.png"}
//! classes.txt           "background", then one class per line; label index = line index
//! images/<id>.png       RGB image
//! labels/<id>.png       paletted label map, 0 = background, k + 1 = classes[k]
//! masks/<id>_<j>.png    8-bit region mask of noun j (0 or 255)
//! words/<id>.json       per-noun lists of ground-truth token indices
//! ```

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;

use super::manifest::ManifestEntry;
use super::synth::{ShapeKind, SyntheticSample};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct WordSidecar<'a> {
    caption: &'a str,
    nouns: Vec<WordEntry<'a>>,
}

#[derive(Serialize)]
struct WordEntry<'a> {
    noun: &'a str,
    token_span: (usize, usize),
    tokens: Vec<usize>,
}

/// Writes `samples` in the layout above and returns the manifest path.
pub fn export_synthetic(
    samples: &[SyntheticSample],
    classes: &[ShapeKind],
    out: &Path,
) -> Result<std::path::PathBuf> {
    for sub in ["images", "labels", "masks", "words"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        let id = &s.image.id;
        let image = format!("images/{id}.png");
        write_rgb_png(&out.join(&image), s.image.height, s.image.width, &s.image.pixels)?;
        let labels = format!("labels/{id}.png");
        write_indexed_png(
            &out.join(&labels),
            s.image.height,
            s.image.width,
            &s.label_map(classes),
            &label_palette(),
        )?;
        for (j, o) in s.objects.iter().enumerate() {
            let m: Vec<u8> = o.region_mask.iter().map(|&v| v * 255).collect();
            write_gray_png(&out.join(format!("masks/{id}_{j}.png")), s.image.height, s.image.width, &m)?;
        }
        let sidecar = WordSidecar {
            caption: &s.text.raw_text,
            nouns: s
                .objects
                .iter()
                .map(|o| WordEntry {
                    noun: &o.noun.noun_text,
                    token_span: o.noun.token_span,
                    tokens: o
                        .word_mask
                        .iter()
                        .enumerate()
                        .filter(|(_, &m)| m == 1)
                        .map(|(i, _)| i)
                        .collect(),
                })
                .collect(),
        };
        let wp = out.join(format!("words/{id}.json"));
        let body = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&wp, body).map_err(|e| Error::io(&wp, e))?;

        let entry = ManifestEntry {
            image,
            caption: s.text.raw_text.clone(),
            labels: Some(labels),
        };
        manifest.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
        manifest.push('\n');
    }
    let mp = out.join("manifest.jsonl");
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    let cp = out.join("classes.txt");
    let names: String = std::iter::once("background")
        .chain(classes.iter().map(|c| c.name()))
        .map(|n| format!("{n}\n"))
        .collect();
    fs::write(&cp, names).map_err(|e| Error::io(&cp, e))?;
    Ok(mp)
}

/// Fixed 256-entry palette: entry 0 black, 255 white, others spread hues.
pub fn label_palette() -> Vec<[u8; 3]> {
    let base: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
    ];
    (0..256usize)
        .map(|i| match i {
            255 => [255, 255, 255],
            i if i < base.len() => base[i],
            i => {
                let v = (i * 37 % 256) as u8;
                [v, v.wrapping_mul(3), 255 - v]
            }
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn png_err(path: &Path, e: png::EncodingError) -> Error {
    Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes an RGB PNG from `[0, 1]` values laid out `H x W x 3`.
pub fn write_rgb_png(path: &Path, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    assert_eq!(pixels.len(), height * width * 3);
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut w = create(path)?;
    let mut enc = png::Encoder::new(&mut w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))
}

pub fn write_gray_png(path: &Path, height: usize, width: usize, values: &[u8]) -> Result<()> {
    assert_eq!(values.len(), height * width);
    let mut w = create(path)?;
    let mut enc = png::Encoder::new(&mut w, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(values).map_err(|e| png_err(path, e))
}

/// Writes an 8-bit paletted PNG whose pixel values are palette indices.
pub fn write_indexed_png(
    path: &Path,
    height: usize,
    width: usize,
    indices: &[u8],
    palette: &[[u8; 3]],
) -> Result<()> {
    assert_eq!(indices.len(), height * width);
    let mut w = create(path)?;
    let mut enc = png::Encoder::new(&mut w, width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(indices).map_err(|e| png_err(path, e))
}

/// Reads an 8-bit paletted or grayscale PNG as raw indices.
pub fn read_indexed_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let err = |m: String| Error::Image {
        path: path.display().to_string(),
        message: m,
    };
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(err(format!(
            "expected 8-bit indexed or gray, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, load_manifest, SynthConfig};

    #[test]
    fn indexed_round_trip_keeps_indices_and_palette_type() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let idx: Vec<u8> = (0..64).map(|i| [0u8, 1, 2, 255][i % 4]).collect();
        write_indexed_png(&p, 8, 8, &idx, &label_palette()).unwrap();
        let (h, w, back) = read_indexed_png(&p).unwrap();
        assert_eq!((h, w), (8, 8));
        assert_eq!(back, idx);
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&p).unwrap()));
        let r = dec.read_info().unwrap();
        assert_eq!(r.info().color_type, png::ColorType::Indexed);
    }

    #[test]
    fn export_writes_loadable_manifest_and_sidecars() {
        let samples = generate_synthetic_corpus(&SynthConfig {
            n: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mp = export_synthetic(&samples, &ShapeKind::ALL, dir.path()).unwrap();
        let m = load_manifest(&mp).unwrap();
        assert_eq!(m.len(), 4);
        for (e, s) in m.entries.iter().zip(&samples) {
            assert_eq!(e.caption, s.text.raw_text);
            let img = crate::corpus::load_image(m.resolve(&e.image), 32).unwrap();
            let max_err = img
                .pixels
                .iter()
                .zip(&s.image.pixels)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-12);
            let (_, _, labels) = read_indexed_png(&m.resolve(e.labels.as_ref().unwrap())).unwrap();
            assert_eq!(labels, s.label_map(&ShapeKind::ALL));
            let words: serde_json::Value = serde_json::from_str(
                &fs::read_to_string(dir.path().join(format!("words/{}.json", s.image.id))).unwrap(),
            )
            .unwrap();
            assert_eq!(words["nouns"].as_array().unwrap().len(), s.objects.len());
            assert!(dir.path().join(format!("masks/{}_0.png", s.image.id)).exists());
        }
        assert_eq!(
            fs::read_to_string(dir.path().join("classes.txt")).unwrap(),
            "background\ncircle\nsquare\ntriangle\n"
        );
    }
}
