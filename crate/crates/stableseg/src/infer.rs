//! Sequential clip inference over a dataset.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use stableseg_core::decoder::{run_clip, ModelParams};
use stableseg_core::sampling::partition_video;

use crate::config::RunConfig;
use crate::dataset::{base_dir, load_frame_tokens, write_json, DatasetManifest, PredictedVideo, PredictionManifest, PREDICTION_FORMAT};
use crate::params_io::{load_params, save_params};
use crate::tensor::Tensor;

/// Parameters for a dataset: loaded from `params_dir` or initialized from the seed.
pub fn model_for(cfg: &RunConfig, m: &DatasetManifest, params_dir: Option<&Path>) -> Result<ModelParams> {
    let mut params = match params_dir {
        Some(dir) => load_params(dir)?.0,
        None => {
            ensure!(
                cfg.model.scales == m.scales,
                "config scales do not match the dataset's token files"
            );
            ensure!(
                cfg.model.num_classes == m.num_classes,
                "config has {} classes, dataset has {}",
                cfg.model.num_classes,
                m.num_classes
            );
            ModelParams::init(cfg.seed, &cfg.scale_spec()?, &cfg.model_config(cfg.clip_len))
        }
    };
    ensure!(
        params.embeddings.temporal.rows() >= cfg.clip_len,
        "parameters cover clips of {} frames, clip length is {}",
        params.embeddings.temporal.rows(),
        cfg.clip_len
    );
    let finest = params.spec.levels()[params.spec.finest()];
    params.output_size = ((finest.height, finest.width) != (m.height, m.width)).then_some((m.height, m.width));
    Ok(params)
}

/// Runs every video clip by clip and writes logits, label maps, the
/// parameters used and `predictions.json` under `out`.
pub fn infer(cfg: &RunConfig, manifest_path: &Path, params_dir: Option<&Path>, out: &Path) -> Result<PredictionManifest> {
    let m = DatasetManifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    let params = model_for(cfg, &m, params_dir)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_params(&out.join("params"), &params, &cfg.model)?;

    let mut videos = Vec::with_capacity(m.videos.len());
    for v in &m.videos {
        let dir = out.join(&v.name);
        std::fs::create_dir_all(&dir)?;
        let mut pv = PredictedVideo {
            name: v.name.clone(),
            labels: Vec::new(),
            logits: Vec::new(),
        };
        for (ci, clip) in partition_video(v.frames.len(), cfg.clip_len)?.iter().enumerate() {
            let frames = clip
                .indices()
                .iter()
                .map(|&t| load_frame_tokens(&m, &base, v, t))
                .collect::<Result<Vec<_>>>()?;
            let out_clip = run_clip(&frames, &params).with_context(|| format!("video {} clip {ci}", v.name))?;
            let lv = &out_clip.logits;
            let file = format!("clip{ci:03}_logits.t2g");
            let data: Vec<f32> = lv.data.iter().map(|&x| x as f32).collect();
            Tensor::f32(vec![lv.frames, lv.classes, lv.height, lv.width], data)?.save(dir.join(&file))?;
            pv.logits.push(format!("{}/{file}", v.name));
            for (i, &t) in clip.indices().iter().enumerate() {
                let file = format!("f{t:04}_pred.t2g");
                Tensor::u8(vec![lv.height, lv.width], lv.frame(0, i).argmax())?.save(dir.join(&file))?;
                pv.labels.push(format!("{}/{file}", v.name));
            }
        }
        videos.push(pv);
    }
    let pm = PredictionManifest {
        format: PREDICTION_FORMAT.into(),
        num_classes: m.num_classes,
        height: m.height,
        width: m.width,
        clip_len: cfg.clip_len,
        videos,
    };
    write_json(&out.join("predictions.json"), &pm)?;
    Ok(pm)
}
