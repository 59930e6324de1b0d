//! Masked temporal consistency loss.
//!
//! For each temporal scale `s` with stride `r_s = 2^s < T`, the per-pixel
//! L1 distance between class distributions of frames `t` and `t + r_s` is
//! collected over pixels whose ground-truth label is valid in both frames and
//! unchanged. Each scale's multiset is reduced with a trimmed mean (the
//! largest `tau` fraction dropped) and the loss averages
//! `alpha^s * trimmed_mean_s` over the scales that have any stable pixel.
//! Values are pooled over batch, time and space.
//!
//! [`mtc_grad`] returns the subgradient with the trimmed selection and the
//! signs of the probability differences held fixed (`sign(0) = 0`), chained
//! through the softmax Jacobian `diag(p) - p p^T`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::decoder::LogitsVolume;
use crate::error::{shape_err, Error, Result};
use crate::numerics::softmax_in_place;
use crate::IGNORE;

pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Relative deviations are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

/// Ground-truth label maps of one video, `T x H x W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelVideo {
    pub fn new(frames: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != frames * height * width {
            return Err(shape_err(format!(
                "label video {frames}x{height}x{width} needs {} labels, got {}",
                frames * height * width,
                labels.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            labels,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.pixels();
        &self.labels[t * n..(t + 1) * n]
    }

    /// Checks every label is a class below `num_classes` or [`IGNORE`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l != IGNORE && l as usize >= num_classes) {
            Some(pixel) => Err(Error::LabelOutOfRange {
                pixel,
                label: self.labels[pixel],
                num_classes,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtcConfig {
    /// Number of temporal scales; `None` picks the largest count whose
    /// largest stride is still below the clip length.
    pub scales: Option<usize>,
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for MtcConfig {
    fn default() -> Self {
        Self {
            scales: None,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl MtcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau must be in [0, 1), got {}", self.tau)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be finite".into()));
        }
        Ok(())
    }

    /// Scale count used for clips of `frames` frames.
    pub fn scale_count(&self, frames: usize) -> usize {
        self.scales.unwrap_or_else(|| default_scales(frames))
    }
}

/// `floor(log2(T - 1)) + 1` for `T >= 2`, else 0.
pub fn default_scales(frames: usize) -> usize {
    if frames < 2 {
        0
    } else {
        (usize::BITS - (frames - 1).leading_zeros()) as usize
    }
}

/// Stride of scale `s`.
#[inline]
pub fn stride(s: usize) -> usize {
    1usize << s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStat {
    pub scale: usize,
    pub stride: usize,
    /// Number of stable pixel pairs.
    pub count: usize,
    /// Number of values kept after trimming.
    pub kept: usize,
    /// `None` when the scale is skipped (stride too long or no stable pixel).
    pub trimmed_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtcResult {
    /// Unweighted loss.
    pub loss: f64,
    /// `lambda * loss`.
    pub weighted_loss: f64,
    pub scales: Vec<ScaleStat>,
    pub valid_scales: Vec<usize>,
}

impl MtcResult {
    /// True when no scale contributed and the loss was set to zero.
    pub fn is_empty(&self) -> bool {
        self.valid_scales.is_empty()
    }
}

/// Probability volume in the same layout as the logits.
pub type ProbVolume = LogitsVolume;

/// Softmax over the class dimension.
pub fn prob_from_logits(x: &LogitsVolume) -> Result<ProbVolume> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let (k, n) = (x.classes, x.pixels());
    let mut out = x.clone();
    let mut buf = vec![0.0; k];
    for block in out.data.chunks_exact_mut(k * n) {
        for u in 0..n {
            for c in 0..k {
                buf[c] = block[c * n + u];
            }
            softmax_in_place(&mut buf, 1.0);
            for c in 0..k {
                block[c * n + u] = buf[c];
            }
        }
    }
    Ok(out)
}

/// `delta[b][t][u] = || p[b, t + r] (:, u) - p[b, t] (:, u) ||_1` for
/// `t < T - r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMaps {
    pub batch: usize,
    pub pairs: usize,
    pub pixels: usize,
    pub data: Vec<f64>,
}

pub fn temporal_delta(p: &ProbVolume, r: usize) -> Result<DeltaMaps> {
    if r == 0 || r >= p.frames {
        return Err(Error::InvalidArgument(format!(
            "stride {r} needs 0 < r < {} frames",
            p.frames
        )));
    }
    let (n, k, pairs) = (p.pixels(), p.classes, p.frames - r);
    let mut data = Vec::with_capacity(p.batch * pairs * n);
    for b in 0..p.batch {
        for t in 0..pairs {
            for u in 0..n {
                let mut acc = 0.0;
                for c in 0..k {
                    acc += (p.get(b, t + r, c, u) - p.get(b, t, c, u)).abs();
                }
                data.push(acc);
            }
        }
    }
    Ok(DeltaMaps {
        batch: p.batch,
        pairs,
        pixels: n,
        data,
    })
}

/// `mask[t][u]` is set when both labels are valid and equal, `t < T - r`.
pub fn stable_mask(y: &LabelVideo, r: usize) -> Vec<bool> {
    if r >= y.frames {
        return Vec::new();
    }
    let pairs = y.frames - r;
    let mut out = Vec::with_capacity(pairs * y.pixels());
    for t in 0..pairs {
        let (a, b) = (y.frame(t), y.frame(t + r));
        out.extend(a.iter().zip(b).map(|(&x, &z)| x != IGNORE && z != IGNORE && x == z));
    }
    out
}

/// Number of values kept out of `n`: `max(1, floor((1 - tau) n))`.
pub fn keep_count(n: usize, tau: f64) -> usize {
    (libm::floor((1.0 - tau) * n as f64) as usize).clamp(1, n.max(1))
}

/// Indices of the kept values: the `keep_count` smallest, ties resolved by
/// original order.
pub fn trim_select(values: &[f64], tau: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    order.truncate(keep_count(values.len(), tau));
    order
}

/// Mean of the smallest `(1 - tau)` fraction; `None` for an empty multiset.
pub fn trimmed_mean(values: &[f64], tau: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let kept = trim_select(values, tau);
    Some(kept.iter().map(|&i| values[i]).sum::<f64>() / kept.len() as f64)
}

fn check_inputs(x: &LogitsVolume, y: &[LabelVideo], cfg: &MtcConfig) -> Result<()> {
    cfg.validate()?;
    if x.classes < 2 {
        return Err(Error::InvalidArgument("temporal consistency needs at least 2 classes".into()));
    }
    if y.len() != x.batch {
        return Err(shape_err(format!("{} label videos for batch {}", y.len(), x.batch)));
    }
    for (b, v) in y.iter().enumerate() {
        if v.frames != x.frames || v.height != x.height || v.width != x.width {
            return Err(shape_err(format!(
                "labels {b} are {}x{}x{}, logits are {}x{}x{}",
                v.frames, v.height, v.width, x.frames, x.height, x.width
            )));
        }
    }
    Ok(())
}

/// Kept pixel pairs `(b, t, u)` of one scale.
struct ScaleSelection {
    stat: ScaleStat,
    kept: Vec<(usize, usize, usize)>,
}

fn select_scales(p: &ProbVolume, y: &[LabelVideo], cfg: &MtcConfig) -> Result<Vec<ScaleSelection>> {
    let n = p.pixels();
    let mut out = Vec::new();
    for s in 0..cfg.scale_count(p.frames) {
        let r = stride(s);
        let mut stat = ScaleStat {
            scale: s,
            stride: r,
            count: 0,
            kept: 0,
            trimmed_mean: None,
        };
        if r >= p.frames {
            out.push(ScaleSelection { stat, kept: Vec::new() });
            continue;
        }
        let delta = temporal_delta(p, r)?;
        let mut values = Vec::new();
        let mut where_ = Vec::new();
        for (b, video) in y.iter().enumerate() {
            let mask = stable_mask(video, r);
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    values.push(delta.data[b * delta.pairs * n + i]);
                    where_.push((b, i / n, i % n));
                }
            }
        }
        stat.count = values.len();
        let mut kept = Vec::new();
        if !values.is_empty() {
            let idx = trim_select(&values, cfg.tau);
            stat.kept = idx.len();
            stat.trimmed_mean = Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64);
            kept = idx.into_iter().map(|i| where_[i]).collect();
        }
        out.push(ScaleSelection { stat, kept });
    }
    Ok(out)
}

fn combine(sel: &[ScaleSelection], cfg: &MtcConfig) -> MtcResult {
    let valid: Vec<usize> = sel.iter().filter(|s| s.stat.trimmed_mean.is_some()).map(|s| s.stat.scale).collect();
    let loss = if valid.is_empty() {
        0.0
    } else {
        sel.iter()
            .filter_map(|s| s.stat.trimmed_mean.map(|m| libm::pow(cfg.alpha, s.stat.scale as f64) * m))
            .sum::<f64>()
            / valid.len() as f64
    };
    MtcResult {
        loss,
        weighted_loss: cfg.lambda * loss,
        scales: sel.iter().map(|s| s.stat.clone()).collect(),
        valid_scales: valid,
    }
}

/// Loss value with per-scale diagnostics. Scales with stride `>= T` or no
/// stable pixel are left out; with none left the loss is 0.
pub fn mtc_loss(x: &LogitsVolume, y: &[LabelVideo], cfg: &MtcConfig) -> Result<MtcResult> {
    check_inputs(x, y, cfg)?;
    let p = prob_from_logits(x)?;
    Ok(combine(&select_scales(&p, y, cfg)?, cfg))
}

/// Gradient of the unweighted loss with respect to the logits.
pub fn mtc_grad(x: &LogitsVolume, y: &[LabelVideo], cfg: &MtcConfig) -> Result<Vec<f64>> {
    mtc_loss_and_grad(x, y, cfg).map(|(_, g)| g)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn mtc_loss_and_grad(x: &LogitsVolume, y: &[LabelVideo], cfg: &MtcConfig) -> Result<(MtcResult, Vec<f64>)> {
    check_inputs(x, y, cfg)?;
    let p = prob_from_logits(x)?;
    let sel = select_scales(&p, y, cfg)?;
    let result = combine(&sel, cfg);
    let mut grad = vec![0.0; x.data.len()];
    if result.is_empty() {
        return Ok((result, grad));
    }
    // dL/dp
    let nvalid = result.valid_scales.len() as f64;
    for s in sel.iter().filter(|s| s.stat.kept > 0) {
        let coef = libm::pow(cfg.alpha, s.stat.scale as f64) / (nvalid * s.stat.kept as f64);
        let r = s.stat.stride;
        for &(b, t, u) in &s.kept {
            for c in 0..p.classes {
                let (later, earlier) = (p.index(b, t + r, c, u), p.index(b, t, c, u));
                let g = coef * sign(p.data[later] - p.data[earlier]);
                grad[later] += g;
                grad[earlier] -= g;
            }
        }
    }
    // chain through softmax: dL/dx_j = p_j (g_j - sum_k g_k p_k)
    let (k, n) = (p.classes, p.pixels());
    for (gblock, pblock) in grad.chunks_exact_mut(k * n).zip(p.data.chunks_exact(k * n)) {
        for u in 0..n {
            let dot: f64 = (0..k).map(|c| gblock[c * n + u] * pblock[c * n + u]).sum();
            for c in 0..k {
                let i = c * n + u;
                gblock[i] = pblock[i] * (gblock[i] - dot);
            }
        }
    }
    Ok((result, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub eps: f64,
    /// Half-width of the uniform jitter added to every logit first.
    pub jitter: f64,
    /// Number of coordinates to check; `None` checks all of them.
    pub coords: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            jitter: 1e-3,
            coords: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_abs: f64,
    pub max_rel: f64,
    pub checked: usize,
    /// Largest analytic gradient magnitude among checked coordinates.
    pub max_grad: f64,
}

impl FdReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel < rel_tol
    }
}

/// Compares [`mtc_grad`] with central differences of [`mtc_loss`].
pub fn finite_diff_check<R: Rng + ?Sized>(
    x: &LogitsVolume,
    y: &[LabelVideo],
    cfg: &MtcConfig,
    opts: &FdOptions,
    rng: &mut R,
) -> Result<FdReport> {
    finite_diff_check_with(x, y, cfg, opts, rng, mtc_grad)
}

/// [`finite_diff_check`] against an arbitrary gradient routine.
pub fn finite_diff_check_with<R, G>(
    x: &LogitsVolume,
    y: &[LabelVideo],
    cfg: &MtcConfig,
    opts: &FdOptions,
    rng: &mut R,
    grad_fn: G,
) -> Result<FdReport>
where
    R: Rng + ?Sized,
    G: Fn(&LogitsVolume, &[LabelVideo], &MtcConfig) -> Result<Vec<f64>>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::InvalidArgument(format!("eps {} outside [1e-7, 1e-3]", opts.eps)));
    }
    let mut xj = x.clone();
    if opts.jitter > 0.0 {
        for v in xj.data.iter_mut() {
            *v += rng.gen_range(-opts.jitter..=opts.jitter);
        }
    }
    let analytic = grad_fn(&xj, y, cfg)?;
    let total = xj.data.len();
    let coords: Vec<usize> = match opts.coords {
        Some(m) if m < total => {
            // partial Fisher-Yates
            let mut idx: Vec<usize> = (0..total).collect();
            for i in 0..m {
                let j = rng.gen_range(i..total);
                idx.swap(i, j);
            }
            idx.truncate(m);
            idx
        }
        _ => (0..total).collect(),
    };
    let mut report = FdReport {
        max_abs: 0.0,
        max_rel: 0.0,
        checked: coords.len(),
        max_grad: 0.0,
    };
    let mut probe = xj.clone();
    for &i in &coords {
        let orig = probe.data[i];
        probe.data[i] = orig + opts.eps;
        let up = mtc_loss(&probe, y, cfg)?.loss;
        probe.data[i] = orig - opts.eps;
        let down = mtc_loss(&probe, y, cfg)?.loss;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * opts.eps);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs = report.max_abs.max(abs);
        report.max_rel = report.max_rel.max(rel);
        report.max_grad = report.max_grad.max(a.abs());
    }
    Ok(report)
}
