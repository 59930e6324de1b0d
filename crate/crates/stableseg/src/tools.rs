//! Loss, gradient-check and clip-sampling commands.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stableseg_core::decoder::LogitsVolume;
use stableseg_core::mtc::{finite_diff_check, mtc_loss, FdOptions, LabelVideo, MtcConfig, MtcResult};
use stableseg_core::sampling::{partition_video, sample_clip, ClipSpec, StrideSet};
use stableseg_core::IGNORE;

use crate::tensor::Tensor;

/// Relative tolerance of the gradient check.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub scale: usize,
    pub stride: usize,
    pub count: usize,
    pub kept: usize,
    pub trimmed_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub weighted_loss: f64,
    pub valid_scales: Vec<usize>,
    pub empty: bool,
    pub scales: Vec<ScaleReport>,
}

impl From<&MtcResult> for LossReport {
    fn from(r: &MtcResult) -> Self {
        Self {
            loss: r.loss,
            weighted_loss: r.weighted_loss,
            valid_scales: r.valid_scales.clone(),
            empty: r.is_empty(),
            scales: r
                .scales
                .iter()
                .map(|s| ScaleReport {
                    scale: s.scale,
                    stride: s.stride,
                    count: s.count,
                    kept: s.kept,
                    trimmed_mean: s.trimmed_mean,
                })
                .collect(),
        }
    }
}

/// Logits from a `[T, K, H, W]` or `[B, T, K, H, W]` tensor.
pub fn load_logits(path: &Path) -> Result<LogitsVolume> {
    let t = Tensor::load(path).with_context(|| format!("loading {}", path.display()))?;
    let d = t.dims().to_vec();
    let dims = match d.len() {
        4 => [1, d[0], d[1], d[2], d[3]],
        5 => [d[0], d[1], d[2], d[3], d[4]],
        _ => anyhow::bail!("{}: logits must be [T,K,H,W] or [B,T,K,H,W], got {d:?}", path.display()),
    };
    ensure!(t.dtype() != crate::tensor::Dtype::U8, "{}: logits must be f32 or f64", path.display());
    let [b, tt, k, h, w] = dims;
    Ok(LogitsVolume::new(b, tt, k, h, w, t.to_f64())?)
}

/// Labels from a u8 `[T, H, W]` or `[B, T, H, W]` tensor.
pub fn load_label_volume(path: &Path) -> Result<Vec<LabelVideo>> {
    let t = Tensor::load(path).with_context(|| format!("loading {}", path.display()))?;
    let d = t.dims().to_vec();
    let [b, tt, h, w] = match d.len() {
        3 => [1, d[0], d[1], d[2]],
        4 => [d[0], d[1], d[2], d[3]],
        _ => anyhow::bail!("{}: labels must be [T,H,W] or [B,T,H,W], got {d:?}", path.display()),
    };
    let data = t.into_u8().with_context(|| path.display().to_string())?;
    let per = tt * h * w;
    (0..b)
        .map(|i| Ok(LabelVideo::new(tt, h, w, data[i * per..(i + 1) * per].to_vec())?))
        .collect()
}

pub fn loss_report(logits: &Path, labels: &Path, cfg: &MtcConfig) -> Result<LossReport> {
    let x = load_logits(logits)?;
    let y = load_label_volume(labels)?;
    Ok(LossReport::from(&mtc_loss(&x, &y, cfg)?))
}

/// Random logits and mostly stable labels with ignore holes.
pub fn random_case<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 5]) -> (LogitsVolume, Vec<LabelVideo>) {
    let [b, t, k, h, w] = dims;
    let x = LogitsVolume::new(b, t, k, h, w, (0..b * t * k * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .expect("positive dims");
    let y = (0..b)
        .map(|_| {
            let base: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..k as u8)).collect();
            let labels = (0..t)
                .flat_map(|_| base.clone())
                .map(|l| match rng.gen_range(0..10) {
                    0 => IGNORE,
                    1 => rng.gen_range(0..k as u8),
                    _ => l,
                })
                .collect();
            LabelVideo::new(t, h, w, labels).expect("consistent dims")
        })
        .collect();
    (x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub volumes: usize,
    pub checked: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn grad_check<'a>(
    cases: impl IntoIterator<Item = (&'a LogitsVolume, &'a [LabelVideo])>,
    cfg: &MtcConfig,
    opts: &FdOptions,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GradCheckReport {
        volumes: 0,
        checked: 0,
        max_abs: 0.0,
        max_rel: 0.0,
        tolerance: GRAD_TOL,
        passed: true,
    };
    for (x, y) in cases {
        let r = finite_diff_check(x, y, cfg, opts, &mut rng)?;
        rep.volumes += 1;
        rep.checked += r.checked;
        rep.max_abs = rep.max_abs.max(r.max_abs);
        rep.max_rel = rep.max_rel.max(r.max_rel);
    }
    rep.passed = rep.max_rel < GRAD_TOL;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub start: usize,
    pub stride: usize,
    pub indices: Vec<usize>,
}

impl From<&ClipSpec> for ClipRecord {
    fn from(c: &ClipSpec) -> Self {
        Self {
            start: c.start(),
            stride: c.stride(),
            indices: c.indices().to_vec(),
        }
    }
}

/// `count` random training clips, or the inference partition when `count` is `None`.
pub fn sample_clips(video_len: usize, clip_len: usize, strides: &StrideSet, count: Option<usize>, seed: u64) -> Result<Vec<ClipRecord>> {
    match count {
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| Ok(ClipRecord::from(&sample_clip(video_len, clip_len, strides, &mut rng)?)))
                .collect()
        }
        None => Ok(partition_video(video_len, clip_len)?.iter().map(ClipRecord::from).collect()),
    }
}
