//! Dataset and prediction manifests and the loaders behind them.
//!
//! Paths inside a manifest are relative to the manifest's directory and use `/`.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use stableseg_core::decoder::FrameTokens;
use stableseg_core::features::{Branch, ScaleSpec, TokenGrid};
use stableseg_core::numerics::Matrix;

use crate::config::ScaleEntry;
use crate::png_labels::read_label_png;
use crate::tensor::{Dtype, Tensor};

pub const DATASET_FORMAT: &str = "stableseg-dataset/1";
pub const PREDICTION_FORMAT: &str = "stableseg-predictions/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    /// One token file per scale, in scale order.
    pub rgb: Vec<String>,
    pub depth: Vec<String>,
    pub gray: Option<String>,
    pub gt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub name: String,
    pub frames: Vec<FrameEntry>,
    pub labeled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub num_classes: usize,
    pub ignore_index: u8,
    /// Label map resolution.
    pub height: usize,
    pub width: usize,
    pub scales: Vec<ScaleEntry>,
    pub videos: Vec<VideoEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedVideo {
    pub name: String,
    /// One label map per frame.
    pub labels: Vec<String>,
    /// One `[T, K, H, W]` logits file per clip.
    pub logits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub format: String,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub clip_len: usize,
    pub videos: Vec<PredictedVideo>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        ensure!(m.format == DATASET_FORMAT, "{}: unknown dataset format {:?}", path.display(), m.format);
        m.validate().with_context(|| format!("invalid manifest {}", path.display()))?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 1, "num_classes must be positive");
        ensure!(
            (self.ignore_index as usize) >= self.num_classes,
            "ignore index {} collides with a class id",
            self.ignore_index
        );
        for v in &self.videos {
            ensure!(!v.frames.is_empty(), "video {} has no frames", v.name);
            for (t, f) in v.frames.iter().enumerate() {
                ensure!(
                    f.rgb.len() == self.scales.len() && f.depth.len() == self.scales.len(),
                    "video {} frame {t}: expected {} token files per branch",
                    v.name,
                    self.scales.len()
                );
                ensure!(
                    f.gt.is_some() == v.labeled.contains(&t),
                    "video {} frame {t}: ground truth disagrees with the labeled list",
                    v.name
                );
            }
        }
        Ok(())
    }

    pub fn scale_spec(&self) -> Result<ScaleSpec> {
        Ok(ScaleSpec::new(
            self.scales
                .iter()
                .map(|s| stableseg_core::features::ScaleLevel {
                    id: s.id,
                    height: s.height,
                    width: s.width,
                    channels: s.channels,
                })
                .collect(),
        )?)
    }

    /// True when every frame of every video carries ground truth.
    pub fn is_dense(&self) -> bool {
        self.videos.iter().all(|v| v.frames.iter().all(|f| f.gt.is_some()))
    }
}

impl PredictionManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        ensure!(m.format == PREDICTION_FORMAT, "{}: unknown predictions format {:?}", path.display(), m.format);
        Ok(m)
    }
}

/// Reads a label map stored as PNG (by extension) or as a u8 `[H, W]` tensor.
pub fn load_labels(path: &Path, height: usize, width: usize) -> Result<Vec<u8>> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let (h, w, labels) = if is_png {
        let m = read_label_png(path)?;
        (m.height, m.width, m.labels)
    } else {
        let t = Tensor::load(path).with_context(|| format!("loading {}", path.display()))?;
        let dims = t.dims().to_vec();
        ensure!(dims.len() == 2, "{}: label tensor must be [H, W], got {dims:?}", path.display());
        (dims[0], dims[1], t.into_u8().with_context(|| path.display().to_string())?)
    };
    ensure!(
        (h, w) == (height, width),
        "{}: label map is {h}x{w}, expected {height}x{width}",
        path.display()
    );
    Ok(labels)
}

/// Grayscale frame and whether it is stored on the 0..255 scale.
pub fn load_gray(path: &Path, height: usize, width: usize) -> Result<(Vec<f64>, bool)> {
    let t = Tensor::load(path).with_context(|| format!("loading {}", path.display()))?;
    let dims = t.dims();
    ensure!(
        dims == [height, width] || dims == [height, width, 1],
        "{}: gray frame dims {dims:?}, expected [{height}, {width}]",
        path.display()
    );
    Ok((t.to_f64(), t.dtype() == Dtype::U8))
}

pub fn load_tokens(path: &Path, frame: usize, scale: &ScaleEntry, branch: Branch) -> Result<TokenGrid> {
    let t = Tensor::load(path).with_context(|| format!("loading {}", path.display()))?;
    let want = [scale.height, scale.width, scale.channels];
    if t.dims() != want {
        bail!("{}: token dims {:?}, expected {want:?}", path.display(), t.dims());
    }
    let tokens = Matrix::new(scale.height * scale.width, scale.channels, t.to_f64())
        .with_context(|| path.display().to_string())?;
    Ok(TokenGrid::new(frame, scale.id, branch, scale.height, scale.width, tokens)?)
}

/// Everything a command needs from one video.
#[derive(Debug, Clone)]
pub struct LoadedVideo {
    pub name: String,
    pub ground_truth: Vec<Option<Vec<u8>>>,
    pub gray: Option<Vec<Vec<f64>>>,
    pub gray_u8: bool,
}

pub fn load_video_labels(m: &DatasetManifest, base: &Path, v: &VideoEntry) -> Result<LoadedVideo> {
    let ground_truth = v
        .frames
        .iter()
        .map(|f| f.gt.as_ref().map(|p| load_labels(&base.join(p), m.height, m.width)).transpose())
        .collect::<Result<Vec<_>>>()
        .with_context(|| format!("video {}", v.name))?;
    let mut gray_u8 = true;
    let gray = if v.frames.iter().all(|f| f.gray.is_some()) {
        let mut frames = Vec::with_capacity(v.frames.len());
        for f in &v.frames {
            let (g, is_u8) = load_gray(&base.join(f.gray.as_ref().expect("checked")), m.height, m.width)?;
            gray_u8 &= is_u8;
            frames.push(g);
        }
        Some(frames)
    } else {
        None
    };
    Ok(LoadedVideo {
        name: v.name.clone(),
        ground_truth,
        gray,
        gray_u8,
    })
}

pub fn load_frame_tokens(m: &DatasetManifest, base: &Path, v: &VideoEntry, t: usize) -> Result<FrameTokens> {
    let f = &v.frames[t];
    let load = |files: &[String], branch: Branch| -> Result<Vec<TokenGrid>> {
        files
            .iter()
            .zip(&m.scales)
            .map(|(p, s)| load_tokens(&base.join(p), t, s, branch))
            .collect()
    };
    Ok(FrameTokens {
        rgb: load(&f.rgb, Branch::Rgb)?,
        depth: load(&f.depth, Branch::Depth)?,
    })
}
