//! Synthetic dataset writer.
//!
//! Each video has a Voronoi class layout at the finest token resolution.
//! Pixels in the left `stable_fraction` of the columns keep their label;
//! elsewhere the Voronoi sites drift, so labels change along region borders.
//! Tokens are a per-class code plus counter-based noise, which makes frame
//! to frame predictions flicker when the noise is large.

use std::path::Path;

use anyhow::{Context, Result};
use stableseg_core::features::{counter_uniform, grayscale, mix64, synth_tokens_with, Branch, SynthOptions};
use stableseg_core::numerics::Grid2D;
use stableseg_core::IGNORE;

use crate::config::RunConfig;
use crate::dataset::{write_json, DatasetManifest, FrameEntry, VideoEntry, DATASET_FORMAT};
use crate::png_labels::{write_label_png, LabelMap};
use crate::tensor::Tensor;

const SITE_TAG: u64 = 0x6E01;
const CODE_TAG: u64 = 0x6E02;
const IGNORE_TAG: u64 = 0x6E03;
const COLOR_TAG: u64 = 0x6E04;
const SITES_PER_CLASS: usize = 2;

struct Site {
    class: usize,
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
}

struct Layout {
    height: usize,
    width: usize,
    sites: Vec<Site>,
    stable_cols: usize,
    void: Vec<bool>,
}

impl Layout {
    fn new(seed: u64, video: u64, k: usize, height: usize, width: usize, cfg: &RunConfig) -> Self {
        let u = |fields: &[u64]| 0.5 * (counter_uniform(seed, fields) + 1.0);
        let sites = (0..k * SITES_PER_CLASS)
            .map(|i| {
                let key = |f: u64| [SITE_TAG, video, i as u64, f];
                Site {
                    class: i % k,
                    y: u(&key(0)) * height as f64,
                    x: u(&key(1)) * width as f64,
                    vy: counter_uniform(seed, &key(2)),
                    vx: counter_uniform(seed, &key(3)),
                }
            })
            .collect();
        let void = (0..height * width)
            .map(|p| u(&[IGNORE_TAG, video, p as u64]) < cfg.gen.ignore_fraction)
            .collect();
        Self {
            height,
            width,
            sites,
            stable_cols: (cfg.gen.stable_fraction * width as f64).round() as usize,
            void,
        }
    }

    /// Underlying class of every pixel at frame `t`, ignoring void pixels.
    fn classes(&self, t: usize) -> Vec<usize> {
        let (h, w) = (self.height as f64, self.width as f64);
        let nearest = |y: f64, x: f64, time: f64| {
            let mut best = (f64::INFINITY, 0);
            for s in &self.sites {
                let sy = (s.y + time * s.vy).rem_euclid(h);
                let sx = (s.x + time * s.vx).rem_euclid(w);
                let dy = (y - sy).abs().min(h - (y - sy).abs());
                let dx = (x - sx).abs().min(w - (x - sx).abs());
                let d = dy * dy + dx * dx;
                if d < best.0 {
                    best = (d, s.class);
                }
            }
            best.1
        };
        (0..self.height * self.width)
            .map(|p| {
                let (y, x) = ((p / self.width) as f64 + 0.5, (p % self.width) as f64 + 0.5);
                let time = if p % self.width < self.stable_cols { 0.0 } else { t as f64 };
                nearest(y, x, time)
            })
            .collect()
    }

    fn labels(&self, classes: &[usize]) -> Vec<u8> {
        classes
            .iter()
            .zip(&self.void)
            .map(|(&c, &v)| if v { IGNORE } else { c as u8 })
            .collect()
    }
}

/// Class value of the finest pixel under token `(y, x)` of an `h x w` grid.
fn class_at(classes: &[usize], height: usize, width: usize, h: usize, w: usize, y: usize, x: usize) -> usize {
    let fy = ((2 * y + 1) * height / (2 * h)).min(height - 1);
    let fx = ((2 * x + 1) * width / (2 * w)).min(width - 1);
    classes[fy * width + fx]
}

/// Writes a dataset under `out` and returns its manifest (also saved as `dataset.json`).
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let spec = cfg.scale_spec()?;
    let finest = spec.levels()[spec.finest()];
    let (height, width) = (finest.height, finest.width);
    let k = cfg.model.num_classes;
    let g = &cfg.gen;
    let seed = cfg.seed;
    let opts = SynthOptions {
        temporal_correlation: g.temporal_correlation,
    };
    // unit-variance class codes per branch and scale
    let code = |branch: Branch, l: usize, class: usize, c: usize| {
        3f64.sqrt() * counter_uniform(seed, &[CODE_TAG, branch.key(), l as u64, class as u64, c as u64])
    };
    let color = |class: usize, c: usize| {
        let base = 30.0 + 190.0 * class as f64 / (k.max(2) - 1) as f64;
        (base + 12.0 * counter_uniform(seed, &[COLOR_TAG, class as u64, c as u64])).clamp(0.0, 255.0)
    };

    let mut videos = Vec::with_capacity(g.videos);
    for v in 0..g.videos {
        let name = format!("v{v:03}");
        let dir = out.join(&name);
        std::fs::create_dir_all(&dir)?;
        let layout = Layout::new(seed, v as u64, k, height, width, cfg);
        let noise_seed = mix64(seed ^ (0xDA7A_0000 + v as u64));
        let mut frames = Vec::with_capacity(g.frames);
        let mut labeled = Vec::new();
        for t in 0..g.frames {
            let classes = layout.classes(t);
            let mut entry = FrameEntry {
                rgb: Vec::new(),
                depth: Vec::new(),
                gray: None,
                gt: None,
            };
            for branch in [Branch::Rgb, Branch::Depth] {
                let noise = synth_tokens_with(noise_seed, t, branch, &spec, &opts);
                for (l, (lvl, grid)) in spec.levels().iter().zip(&noise).enumerate() {
                    let c_count = lvl.channels;
                    let mut data = Vec::with_capacity(lvl.tokens() * c_count);
                    for n in 0..lvl.tokens() {
                        let cls = class_at(&classes, height, width, lvl.height, lvl.width, n / lvl.width, n % lvl.width);
                        for c in 0..c_count {
                            data.push((g.signal * code(branch, l, cls, c) + g.noise * grid.tokens.get(n, c)) as f32);
                        }
                    }
                    let file = format!("f{t:04}_{}_s{}.t2g", branch.name(), lvl.id);
                    Tensor::f32(vec![lvl.height, lvl.width, c_count], data)?.save(dir.join(&file))?;
                    let rel = format!("{name}/{file}");
                    match branch {
                        Branch::Rgb => entry.rgb.push(rel),
                        Branch::Depth => entry.depth.push(rel),
                    }
                }
            }

            let rgb: Vec<f64> = classes
                .iter()
                .enumerate()
                .flat_map(|(p, &cls)| {
                    let jitter = 2.0 * counter_uniform(seed, &[COLOR_TAG, 1 << 32 | v as u64, t as u64, p as u64]);
                    (0..3).map(move |c| (color(cls, c) + jitter).clamp(0.0, 255.0))
                })
                .collect();
            let gray = grayscale(&Grid2D::new(height, width, 3, rgb)?)?;
            let gray_u8: Vec<u8> = gray.data().iter().map(|&x| x.round() as u8).collect();
            let file = format!("f{t:04}_gray.t2g");
            Tensor::u8(vec![height, width], gray_u8)?.save(dir.join(&file))?;
            entry.gray = Some(format!("{name}/{file}"));

            if t % g.labeled_every == 0 {
                let file = format!("f{t:04}_gt.png");
                write_label_png(
                    &dir.join(&file),
                    &LabelMap {
                        height,
                        width,
                        labels: layout.labels(&classes),
                    },
                )?;
                entry.gt = Some(format!("{name}/{file}"));
                labeled.push(t);
            }
            frames.push(entry);
        }
        videos.push(VideoEntry { name, frames, labeled });
    }

    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        num_classes: k,
        ignore_index: IGNORE,
        height,
        width,
        scales: cfg.model.scales.clone(),
        videos,
    };
    write_json(&out.join("dataset.json"), &manifest)?;
    Ok(manifest)
}
