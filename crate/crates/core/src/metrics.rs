//! Segmentation accuracy (mIoU) and temporal consistency (VC / mVC).
//!
//! Video consistency over a window of `n` frames counts, among ground-truth
//! pixels that are stable over the window, the fraction whose predicted label
//! is constant over the window. It measures consistency, not accuracy: a
//! constant wrong prediction scores 1. The strict variant additionally
//! requires the constant prediction to equal the ground-truth label.
//!
//! - Dense protocol: every frame is labeled; the stable set of a window is the
//!   pixels whose label is valid and identical on all `n` frames.
//! - Approximate protocol: only reference frames `r` are labeled; the stable
//!   set is the valid pixels of frame `r` whose grayscale value stays within
//!   `theta` of frame `r` on every frame of `[r, r + n)`.
//!
//! Windows or references with an empty stable set are skipped.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::IGNORE;

/// `K x K` pixel counts, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth pixel count per class.
    pub fn gt_counts(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|k| self.counts[k * self.classes..(k + 1) * self.classes].iter().sum())
            .collect()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(shape_err("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Adds one label map pair. Pixels whose ground truth is `ignore` are
/// skipped; any other label outside `[0, K)` is an error and leaves the
/// matrix untouched.
pub fn accumulate_confusion(pred: &[u8], gt: &[u8], ignore: u8, acc: &mut ConfusionMatrix) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(shape_err(format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
    }
    let k = acc.classes;
    for (pixel, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if g == ignore {
            continue;
        }
        for label in [g, p] {
            if label as usize >= k {
                return Err(Error::LabelOutOfRange {
                    pixel,
                    label,
                    num_classes: k,
                });
            }
        }
    }
    for (&p, &g) in pred.iter().zip(gt) {
        if g != ignore {
            acc.counts[g as usize * k + p as usize] += 1;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes without ground-truth pixels.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub present_classes: usize,
}

/// IoU per class and their mean over classes present in the ground truth.
pub fn miou(conf: &ConfusionMatrix) -> Result<IouReport> {
    let k = conf.classes;
    let gt = conf.gt_counts();
    let mut per_class = Vec::with_capacity(k);
    let (mut sum, mut present) = (0.0, 0usize);
    for c in 0..k {
        if gt[c] == 0 {
            per_class.push(None);
            continue;
        }
        let tp = conf.get(c, c);
        let fp: u64 = (0..k).filter(|&g| g != c).map(|g| conf.get(g, c)).sum();
        let fn_ = gt[c] - tp;
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        per_class.push(Some(iou));
        sum += iou;
        present += 1;
    }
    if present == 0 {
        return Err(Error::UndefinedMean);
    }
    Ok(IouReport {
        per_class,
        miou: sum / present as f64,
        present_classes: present,
    })
}

/// Pixels whose grayscale value differs from the reference by at most `theta`.
pub fn static_mask(gray_r: &[f64], gray_i: &[f64], theta: f64) -> Result<Vec<bool>> {
    if gray_r.len() != gray_i.len() {
        return Err(shape_err("grayscale frames differ in size"));
    }
    if !(theta >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be non-negative, got {theta}")));
    }
    Ok(gray_r.iter().zip(gray_i).map(|(r, i)| (i - r).abs() <= theta).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Dense,
    Approx,
}

/// One video's predictions and (possibly sparse) ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEval {
    pub height: usize,
    pub width: usize,
    /// Predicted label map per frame.
    pub predictions: Vec<Vec<u8>>,
    /// Ground truth per frame; `None` for unlabeled frames.
    pub ground_truth: Vec<Option<Vec<u8>>>,
    /// Grayscale frames, needed by the approximate protocol.
    pub gray: Option<Vec<Vec<f64>>>,
}

impl VideoEval {
    pub fn frames(&self) -> usize {
        self.predictions.len()
    }

    pub fn labeled(&self) -> Vec<usize> {
        self.ground_truth
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|_| i))
            .collect()
    }

    pub fn is_dense(&self) -> bool {
        !self.ground_truth.is_empty() && self.ground_truth.iter().all(Option::is_some)
    }

    /// Dense when every frame is labeled, approximate otherwise.
    pub fn natural_protocol(&self) -> Protocol {
        if self.is_dense() {
            Protocol::Dense
        } else {
            Protocol::Approx
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.ground_truth.len() != self.predictions.len() {
            return Err(shape_err(format!(
                "{} prediction frames vs {} ground-truth slots",
                self.predictions.len(),
                self.ground_truth.len()
            )));
        }
        let bad_pred = self.predictions.iter().position(|p| p.len() != n);
        let bad_gt = self.ground_truth.iter().position(|g| g.as_ref().is_some_and(|g| g.len() != n));
        if let Some(t) = bad_pred.or(bad_gt) {
            return Err(shape_err(format!("frame {t} is not {}x{}", self.height, self.width)));
        }
        if let Some(gray) = &self.gray {
            if gray.len() != self.predictions.len() || gray.iter().any(|g| g.len() != n) {
                return Err(shape_err("grayscale frames do not match the video"));
            }
        }
        Ok(())
    }
}

fn window_consistent(preds: &[Vec<u8>], start: usize, n: usize, u: usize, target: Option<u8>) -> bool {
    let first = preds[start][u];
    (start + 1..start + n).all(|i| preds[i][u] == first) && target.is_none_or(|g| g == first)
}

/// Dense-protocol consistency of one video. Returns `None` when no window
/// has a stable ground-truth pixel.
pub fn vc_dense(video: &VideoEval, n: usize, strict: bool) -> Result<Option<f64>> {
    video.validate()?;
    let frames = video.frames();
    if n == 0 || frames < n {
        return Err(Error::Protocol(format!("window {n} does not fit a video of {frames} frames")));
    }
    let gt: Vec<&Vec<u8>> = video
        .ground_truth
        .iter()
        .map(|g| g.as_ref())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Protocol("dense protocol needs ground truth on every frame".into()))?;
    let pixels = video.height * video.width;
    let (mut sum, mut used) = (0.0, 0usize);
    for start in 0..=frames - n {
        let (mut denom, mut numer) = (0usize, 0usize);
        for u in 0..pixels {
            let g = gt[start][u];
            if g == IGNORE || (start + 1..start + n).any(|i| gt[i][u] != g) {
                continue;
            }
            denom += 1;
            if window_consistent(&video.predictions, start, n, u, strict.then_some(g)) {
                numer += 1;
            }
        }
        if denom > 0 {
            sum += numer as f64 / denom as f64;
            used += 1;
        }
    }
    Ok((used > 0).then(|| sum / used as f64))
}

/// Approximate-protocol consistency over the labeled reference frames.
/// References whose window runs past the video end or whose stable set is
/// empty are skipped; if none is left this is a protocol error.
pub fn vc_approx(video: &VideoEval, n: usize, theta: f64, strict: bool) -> Result<f64> {
    video.validate()?;
    if n == 0 {
        return Err(Error::Protocol("window must be positive".into()));
    }
    let gray = video
        .gray
        .as_ref()
        .ok_or_else(|| Error::Protocol("approximate protocol needs grayscale frames".into()))?;
    let refs = video.labeled();
    if refs.is_empty() {
        return Err(Error::Protocol("video has no labeled reference frame".into()));
    }
    let frames = video.frames();
    let (mut sum, mut used) = (0.0, 0usize);
    for &r in refs.iter().filter(|&&r| r + n <= frames) {
        let gt = video.ground_truth[r].as_ref().expect("labeled frame");
        let mut stable: Vec<bool> = gt.iter().map(|&g| g != IGNORE).collect();
        for i in r + 1..r + n {
            for (s, m) in stable.iter_mut().zip(static_mask(&gray[r], &gray[i], theta)?) {
                *s &= m;
            }
        }
        let (mut denom, mut numer) = (0usize, 0usize);
        for (u, _) in stable.iter().enumerate().filter(|(_, &s)| s) {
            denom += 1;
            if window_consistent(&video.predictions, r, n, u, strict.then_some(gt[u])) {
                numer += 1;
            }
        }
        if denom > 0 {
            sum += numer as f64 / denom as f64;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Protocol(format!(
            "no usable reference frame for window {n} (references {refs:?}, {frames} frames)"
        )));
    }
    Ok(sum / used as f64)
}

/// Unweighted mean of per-video consistency values.
pub fn mvc(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Protocol("no video to average".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
