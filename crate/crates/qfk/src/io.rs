//! Image decoding, label files and JSON reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qfk_core::image::{BinaryMask, RgbImage};
use qfk_core::runtime::EvalReport;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pnm", "pgm"];

/// Decodes a PNG or PNM file to 8-bit RGB.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .with_context(|| format!("cannot decode image {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    let buf =
        image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
            .expect("buffer matches dimensions");
    buf.save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Writes a binary mask as a grayscale PNG with values 0 and 255.
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let data = mask.data().iter().map(|&v| v * 255).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .expect("buffer matches dimensions");
    buf.save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Frame id of an image file: its file stem.
pub fn frame_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)
        .with_context(|| format!("cannot read directory {}", dir.display()))?
    {
        let path = entry?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `{"frame id": 0 | 1, ...}`.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, u8>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read labels {}", path.display()))?;
    let labels: BTreeMap<String, u8> = serde_json::from_str(&text)
        .with_context(|| format!("malformed labels file {}", path.display()))?;
    if let Some((k, v)) = labels.iter().find(|(_, &v)| v > 1) {
        bail!("label for {k} is {v}, expected 0 or 1");
    }
    Ok(labels)
}

/// One prediction per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub score: f32,
}

pub type Predictions = BTreeMap<String, Prediction>;

/// Accuracy report; `fps` is present when the run was timed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsReport {
    pub total: usize,
    pub correct: usize,
    pub wrong: usize,
    pub accuracy: f64,
    pub fps: Option<f64>,
}

impl ResultsReport {
    pub fn new(r: &EvalReport, fps: Option<f64>) -> Self {
        Self {
            total: r.total,
            correct: r.correct,
            wrong: r.wrong,
            accuracy: r.accuracy,
            fps,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed JSON in {}", path.display()))
}
