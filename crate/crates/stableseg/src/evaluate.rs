//! mIoU and mVC over a prediction manifest and a dataset manifest.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use stableseg_core::labels::{builtin_mapping_by_name, remap_labels, MappingTable, NUM_OVERLAP_CLASSES, OVERLAP_CLASSES};
use stableseg_core::metrics::{accumulate_confusion, miou, mvc, vc_approx, vc_dense, ConfusionMatrix, Protocol, VideoEval};
use stableseg_core::IGNORE;

use crate::config::RunConfig;
use crate::dataset::{base_dir, load_labels, load_video_labels, DatasetManifest, PredictionManifest};
use crate::UsageError;

/// Default static threshold on the 0..255 gray scale.
pub const THETA_U8: f64 = 10.0;

/// `{"dataset": "...", "pairs": [{"source_id": 7, "overlap_id": 0}, ...]}`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingFile {
    pub dataset: String,
    pub pairs: Vec<MappingPair>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MappingPair {
    pub source_id: u8,
    pub overlap_id: u8,
}

/// A built-in dataset name or a path to a mapping JSON file.
pub fn resolve_mapping(spec: &str) -> Result<MappingTable> {
    if let Ok(t) = builtin_mapping_by_name(spec) {
        return Ok(t);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(UsageError(format!("{spec:?} is neither a built-in dataset nor a mapping file")).into());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
    let f: MappingFile = serde_json::from_str(&text).with_context(|| format!("parsing {spec}"))?;
    let pairs: Vec<(u8, u8)> = f.pairs.iter().map(|p| (p.source_id, p.overlap_id)).collect();
    Ok(MappingTable::from_pairs(f.dataset, &pairs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: usize,
    pub name: Option<String>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoVc {
    pub name: String,
    /// `None` when no window had a stable pixel.
    pub vc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub n: usize,
    pub mvc: Option<f64>,
    pub videos: Vec<VideoVc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub strict: bool,
    pub theta: Option<f64>,
    pub num_classes: usize,
    pub miou: f64,
    pub present_classes: usize,
    pub per_class: Vec<ClassIou>,
    pub windows: Vec<WindowReport>,
}

impl MetricReport {
    pub fn per_class_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "name", "iou"])?;
        for c in &self.per_class {
            w.write_record([
                c.class.to_string(),
                c.name.clone().unwrap_or_default(),
                c.iou.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    pub map_gt: Option<&'a str>,
    pub map_pred: Option<&'a str>,
}

/// Remaps, accumulates mIoU over labeled frames and computes mVC per window.
pub fn evaluate(cfg: &RunConfig, pred_path: &Path, gt_path: &Path, opts: &EvalOptions) -> Result<MetricReport> {
    let gt_m = DatasetManifest::load(gt_path)?;
    let pred_m = PredictionManifest::load(pred_path)?;
    let (gt_base, pred_base) = (base_dir(gt_path), base_dir(pred_path));
    ensure!(
        (pred_m.height, pred_m.width) == (gt_m.height, gt_m.width),
        "predictions are {}x{}, ground truth is {}x{}",
        pred_m.height,
        pred_m.width,
        gt_m.height,
        gt_m.width
    );
    let map_gt = opts.map_gt.map(resolve_mapping).transpose()?;
    let map_pred = opts.map_pred.map(resolve_mapping).transpose()?;
    let remapped = map_gt.is_some() || map_pred.is_some();
    let classes = if remapped { NUM_OVERLAP_CLASSES } else { gt_m.num_classes };
    let remap = |labels: Vec<u8>, table: &Option<MappingTable>| match table {
        Some(t) => remap_labels(&labels, t),
        None => labels,
    };

    let natural = if gt_m.is_dense() { Protocol::Dense } else { Protocol::Approx };
    let protocol = match cfg.metrics.protocol.map(Protocol::from) {
        Some(Protocol::Dense) if natural == Protocol::Approx => {
            return Err(UsageError("dense protocol needs ground truth on every frame; this corpus is sparsely labeled".into()).into())
        }
        Some(p) => p,
        None => natural,
    };

    let mut conf = ConfusionMatrix::new(classes);
    let mut evals = Vec::with_capacity(gt_m.videos.len());
    let mut all_u8 = true;
    for v in &gt_m.videos {
        let pv = pred_m
            .videos
            .iter()
            .find(|p| p.name == v.name)
            .with_context(|| format!("no predictions for video {}", v.name))?;
        ensure!(
            pv.labels.len() == v.frames.len(),
            "video {}: {} predicted frames for {} frames",
            v.name,
            pv.labels.len(),
            v.frames.len()
        );
        let loaded = load_video_labels(&gt_m, &gt_base, v)?;
        let predictions = pv
            .labels
            .iter()
            .map(|p| load_labels(&pred_base.join(p), gt_m.height, gt_m.width).map(|l| remap(l, &map_pred)))
            .collect::<Result<Vec<_>>>()?;
        let ground_truth: Vec<Option<Vec<u8>>> =
            loaded.ground_truth.into_iter().map(|g| g.map(|l| remap(l, &map_gt))).collect();
        for (t, g) in ground_truth.iter().enumerate() {
            if let Some(g) = g {
                accumulate_confusion(&predictions[t], g, IGNORE, &mut conf)
                    .with_context(|| format!("video {} frame {t}", v.name))?;
            }
        }
        all_u8 &= loaded.gray_u8;
        evals.push((
            v.name.clone(),
            VideoEval {
                height: gt_m.height,
                width: gt_m.width,
                predictions,
                ground_truth,
                gray: loaded.gray,
            },
        ));
    }

    let iou = miou(&conf).context("no ground-truth pixel in any evaluated class")?;
    let theta = match protocol {
        Protocol::Dense => None,
        Protocol::Approx => Some(cfg.metrics.theta.unwrap_or(if all_u8 { THETA_U8 } else { THETA_U8 / 255.0 })),
    };
    let strict = cfg.metrics.strict;
    let mut windows = Vec::with_capacity(cfg.metrics.windows.len());
    for &n in &cfg.metrics.windows {
        let mut videos = Vec::with_capacity(evals.len());
        for (name, e) in &evals {
            let vc = match protocol {
                Protocol::Dense => vc_dense(e, n, strict),
                Protocol::Approx => {
                    if e.gray.is_none() {
                        bail!("video {name}: approximate protocol needs gray frames");
                    }
                    vc_approx(e, n, theta.expect("approx has theta"), strict).map(Some)
                }
            }
            .with_context(|| format!("video {name}, window {n}"))?;
            videos.push(VideoVc { name: name.clone(), vc });
        }
        let values: Vec<f64> = videos.iter().filter_map(|v| v.vc).collect();
        windows.push(WindowReport {
            n,
            mvc: mvc(&values).ok(),
            videos,
        });
    }

    Ok(MetricReport {
        protocol: match protocol {
            Protocol::Dense => "dense".into(),
            Protocol::Approx => "approx".into(),
        },
        strict,
        theta,
        num_classes: classes,
        miou: iou.miou,
        present_classes: iou.present_classes,
        per_class: iou
            .per_class
            .iter()
            .enumerate()
            .map(|(c, v)| ClassIou {
                class: c,
                name: remapped.then(|| OVERLAP_CLASSES[c].to_string()),
                iou: *v,
            })
            .collect(),
        windows,
    })
}
