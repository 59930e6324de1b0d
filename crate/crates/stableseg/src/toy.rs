//! Linear-head training on frozen pixel features.
//!
//! Logits are `x(u) = W p(u) + b` on the fused per-pixel features of the
//! frozen model. The objective is cross-entropy over labeled pixels plus
//! `lambda` times the temporal consistency loss of the full-length clips,
//! pooled as one batch. Gradients are analytic and steps are plain gradient
//! descent from `W = 0, b = 0`.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use stableseg_core::decoder::{run_clip, FrameLogits, LogitsVolume};
use stableseg_core::metrics::{mvc, vc_approx, vc_dense, VideoEval};
use stableseg_core::mtc::{mtc_loss_and_grad, LabelVideo, MtcConfig};
use stableseg_core::numerics::{softmax_in_place, Grid2D};
use stableseg_core::sampling::partition_video;
use stableseg_core::IGNORE;

use crate::config::RunConfig;
use crate::dataset::{base_dir, load_frame_tokens, load_video_labels, DatasetManifest};
use crate::evaluate::THETA_U8;
use crate::infer::model_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub ce: f64,
    pub mtc: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainState {
    /// `K x d`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
    pub lr: f64,
    pub lambda: f64,
    pub history: Vec<StepLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub steps: usize,
    pub initial_total: f64,
    pub final_total: f64,
    /// `1 - final / initial`.
    pub drop: f64,
    pub window: usize,
    pub protocol: String,
    /// Consistency of the trained head's predictions.
    pub mvc: f64,
    pub state: ToyTrainState,
}

/// Frozen features and labels of one video.
pub struct ToyVideo {
    pub name: String,
    /// Per frame, `H x W x d`.
    pub features: Vec<Grid2D>,
    pub ground_truth: Vec<Option<Vec<u8>>>,
    pub gray: Option<Vec<Vec<f64>>>,
    pub gray_u8: bool,
    /// Frame ranges of the inference clips.
    pub clips: Vec<(usize, usize)>,
}

pub struct ToyData {
    pub videos: Vec<ToyVideo>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub clip_len: usize,
}

/// Runs the frozen model and keeps the fused pixel features.
pub fn prepare(cfg: &RunConfig, manifest_path: &Path) -> Result<ToyData> {
    let m = DatasetManifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    let params = model_for(cfg, &m, None)?;
    ensure!(
        params.output_size.is_none(),
        "toy training needs labels at the finest token resolution"
    );
    let mut videos = Vec::with_capacity(m.videos.len());
    for v in &m.videos {
        let labels = load_video_labels(&m, &base, v)?;
        let mut features = Vec::with_capacity(v.frames.len());
        let mut clips = Vec::new();
        for clip in partition_video(v.frames.len(), cfg.clip_len)? {
            let frames = clip
                .indices()
                .iter()
                .map(|&t| load_frame_tokens(&m, &base, v, t))
                .collect::<Result<Vec<_>>>()?;
            features.extend(run_clip(&frames, &params)?.pixel_features);
            clips.push((clip.start(), clip.len()));
        }
        videos.push(ToyVideo {
            name: v.name.clone(),
            features,
            ground_truth: labels.ground_truth,
            gray: labels.gray,
            gray_u8: labels.gray_u8,
            clips,
        });
    }
    Ok(ToyData {
        videos,
        classes: m.num_classes,
        height: m.height,
        width: m.width,
        dim: cfg.model.dim,
        clip_len: cfg.clip_len,
    })
}

impl ToyData {
    fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn frame_logits(&self, w: &[f64], b: &[f64], p: &Grid2D) -> FrameLogits {
        let (k, d, n) = (self.classes, self.dim, self.pixels());
        let mut data = vec![0.0; k * n];
        for (u, f) in p.data().chunks_exact(d).enumerate() {
            for c in 0..k {
                data[c * n + u] = b[c] + w[c * d..(c + 1) * d].iter().zip(f).map(|(a, x)| a * x).sum::<f64>();
            }
        }
        FrameLogits {
            classes: k,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Full-length clips as `(video, start)`.
    fn full_clips(&self) -> Vec<(usize, usize)> {
        self.videos
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| v.clips.iter().filter(|c| c.1 == self.clip_len).map(move |c| (vi, c.0)))
            .collect()
    }
}

struct Eval {
    ce: f64,
    mtc: f64,
    grad_w: Vec<f64>,
    grad_b: Vec<f64>,
}

/// Objective and gradient; `with_mtc = false` skips the consistency term entirely.
fn objective(data: &ToyData, w: &[f64], b: &[f64], cfg: &MtcConfig, with_mtc: bool) -> Result<Eval> {
    let (k, d, n) = (data.classes, data.dim, data.pixels());
    let mut grad_x: Vec<Vec<Vec<f64>>> = data
        .videos
        .iter()
        .map(|v| vec![vec![0.0; k * n]; v.features.len()])
        .collect();
    let logits: Vec<Vec<FrameLogits>> = data
        .videos
        .iter()
        .map(|v| v.features.iter().map(|p| data.frame_logits(w, b, p)).collect())
        .collect();

    // cross-entropy over labeled, non-ignored pixels
    let valid: usize = data
        .videos
        .iter()
        .flat_map(|v| v.ground_truth.iter().flatten())
        .map(|g| g.iter().filter(|&&l| l != IGNORE).count())
        .sum();
    ensure!(valid > 0, "no labeled pixel to train on");
    let mut ce = 0.0;
    let mut prob = vec![0.0; k];
    for (vi, v) in data.videos.iter().enumerate() {
        for (t, g) in v.ground_truth.iter().enumerate() {
            let Some(g) = g else { continue };
            let y = &logits[vi][t];
            for (u, &label) in g.iter().enumerate() {
                if label == IGNORE {
                    continue;
                }
                ensure!((label as usize) < k, "video {} frame {t}: label {label} outside {k} classes", v.name);
                for c in 0..k {
                    prob[c] = y.data[c * n + u];
                }
                softmax_in_place(&mut prob, 1.0);
                ce -= prob[label as usize].max(f64::MIN_POSITIVE).ln();
                for c in 0..k {
                    let onehot = if c == label as usize { 1.0 } else { 0.0 };
                    grad_x[vi][t][c * n + u] += (prob[c] - onehot) / valid as f64;
                }
            }
        }
    }
    ce /= valid as f64;

    let mut mtc = 0.0;
    let clips = data.full_clips();
    if with_mtc && !clips.is_empty() {
        let t_len = data.clip_len;
        let mut x = Vec::with_capacity(clips.len() * t_len * k * n);
        let mut y = Vec::with_capacity(clips.len());
        for &(vi, start) in &clips {
            let v = &data.videos[vi];
            let mut labels = Vec::with_capacity(t_len * n);
            for t in start..start + t_len {
                x.extend_from_slice(&logits[vi][t].data);
                match &v.ground_truth[t] {
                    Some(g) => labels.extend_from_slice(g),
                    None => labels.extend(std::iter::repeat_n(IGNORE, n)),
                }
            }
            y.push(LabelVideo::new(t_len, data.height, data.width, labels)?);
        }
        let vol = LogitsVolume::new(clips.len(), t_len, k, data.height, data.width, x)?;
        let (res, g) = mtc_loss_and_grad(&vol, &y, cfg)?;
        mtc = res.loss;
        let block = k * n;
        for (ci, &(vi, start)) in clips.iter().enumerate() {
            for dt in 0..t_len {
                let src = &g[(ci * t_len + dt) * block..(ci * t_len + dt + 1) * block];
                for (a, s) in grad_x[vi][start + dt].iter_mut().zip(src) {
                    *a += cfg.lambda * s;
                }
            }
        }
    }

    let mut grad_w = vec![0.0; k * d];
    let mut grad_b = vec![0.0; k];
    for (vi, v) in data.videos.iter().enumerate() {
        for (t, p) in v.features.iter().enumerate() {
            let gx = &grad_x[vi][t];
            for (u, f) in p.data().chunks_exact(d).enumerate() {
                for c in 0..k {
                    let g = gx[c * n + u];
                    if g != 0.0 {
                        grad_b[c] += g;
                        for (gw, x) in grad_w[c * d..(c + 1) * d].iter_mut().zip(f) {
                            *gw += g * x;
                        }
                    }
                }
            }
        }
    }
    Ok(Eval { ce, mtc, grad_w, grad_b })
}

/// Trains for `steps` steps. `with_mtc = false` drops the consistency term
/// without touching `lambda`.
pub fn train(data: &ToyData, cfg: &RunConfig, steps: usize, with_mtc: bool) -> Result<ToyTrainState> {
    let (k, d) = (data.classes, data.dim);
    let mcfg = cfg.mtc_config();
    let lr = cfg.toy.lr;
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let mut history = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let e = objective(data, &w, &b, &mcfg, with_mtc)?;
        let total = e.ce + mcfg.lambda * e.mtc;
        if !total.is_finite() {
            bail!("training diverged at step {step}");
        }
        history.push(StepLog {
            step,
            ce: e.ce,
            mtc: e.mtc,
            total,
        });
        if step == steps {
            break;
        }
        for (p, g) in w.iter_mut().zip(&e.grad_w).chain(b.iter_mut().zip(&e.grad_b)) {
            *p -= lr * g;
        }
    }
    Ok(ToyTrainState {
        weights: w,
        bias: b,
        classes: k,
        dim: d,
        lr,
        lambda: mcfg.lambda,
        history,
    })
}

/// Per-frame argmax predictions of a trained head.
pub fn predict(data: &ToyData, state: &ToyTrainState) -> Vec<Vec<Vec<u8>>> {
    data.videos
        .iter()
        .map(|v| v.features.iter().map(|p| data.frame_logits(&state.weights, &state.bias, p).argmax()).collect())
        .collect()
}

/// mVC of the head's predictions, dense when every frame is labeled.
pub fn consistency(data: &ToyData, state: &ToyTrainState, n: usize, theta: Option<f64>) -> Result<(String, f64)> {
    let preds = predict(data, state);
    let dense = data.videos.iter().all(|v| v.ground_truth.iter().all(Option::is_some));
    let mut values = Vec::new();
    for (v, p) in data.videos.iter().zip(preds) {
        let e = VideoEval {
            height: data.height,
            width: data.width,
            predictions: p,
            ground_truth: v.ground_truth.clone(),
            gray: v.gray.clone(),
        };
        if dense {
            if let Some(x) = vc_dense(&e, n, false).with_context(|| format!("video {}", v.name))? {
                values.push(x);
            }
        } else {
            let th = theta.unwrap_or(if v.gray_u8 { THETA_U8 } else { THETA_U8 / 255.0 });
            values.push(vc_approx(&e, n, th, false).with_context(|| format!("video {}", v.name))?);
        }
    }
    Ok((if dense { "dense" } else { "approx" }.into(), mvc(&values)?))
}

pub fn run(cfg: &RunConfig, manifest_path: &Path, window: usize) -> Result<ToyReport> {
    let data = prepare(cfg, manifest_path)?;
    let state = train(&data, cfg, cfg.toy.steps, true)?;
    let (protocol, value) = consistency(&data, &state, window, cfg.metrics.theta)?;
    let initial = state.history[0].total;
    let last = state.history.last().expect("history has the initial step").total;
    Ok(ToyReport {
        steps: cfg.toy.steps,
        initial_total: initial,
        final_total: last,
        drop: 1.0 - last / initial,
        window,
        protocol,
        mvc: value,
        state,
    })
}
