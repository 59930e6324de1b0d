//! Run configuration: one JSON file, every field optional, plus flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stableseg_core::decoder::ModelConfig;
use stableseg_core::features::{ScaleLevel, ScaleSpec};
use stableseg_core::metrics::Protocol;
use stableseg_core::mtc::{MtcConfig, DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_TAU};
use stableseg_core::sampling::{StrideSet, DEFAULT_STRIDES};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub scales: Vec<ScaleEntry>,
    pub num_queries: usize,
    pub dim: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub ff_dim: Option<usize>,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            scales: vec![
                ScaleEntry { id: 0, height: 16, width: 16, channels: 12 },
                ScaleEntry { id: 1, height: 8, width: 8, channels: 12 },
            ],
            num_queries: 8,
            dim: 16,
            decoder_blocks: 2,
            heads: 4,
            ff_dim: None,
            num_classes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtcSection {
    pub scales: Option<usize>,
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for MtcSection {
    fn default() -> Self {
        Self {
            scales: None,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolChoice {
    Dense,
    Approx,
}

impl From<ProtocolChoice> for Protocol {
    fn from(p: ProtocolChoice) -> Self {
        match p {
            ProtocolChoice::Dense => Protocol::Dense,
            ProtocolChoice::Approx => Protocol::Approx,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    pub windows: Vec<usize>,
    /// Static-pixel threshold; `None` picks 10 for u8 gray frames and 10/255 for float ones.
    pub theta: Option<f64>,
    /// `None` dispatches on the labeling: dense when every frame is labeled.
    pub protocol: Option<ProtocolChoice>,
    /// Also require the constant prediction to equal the ground truth.
    pub strict: bool,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            windows: vec![8, 16],
            theta: None,
            protocol: None,
            strict: false,
        }
    }
}

/// Synthetic dataset shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub videos: usize,
    pub frames: usize,
    /// Every `labeled_every`-th frame carries ground truth.
    pub labeled_every: usize,
    /// Fraction of pixels whose label never changes.
    pub stable_fraction: f64,
    pub ignore_fraction: f64,
    /// Class signal amplitude in the tokens.
    pub signal: f64,
    /// Per-frame token noise amplitude.
    pub noise: f64,
    pub temporal_correlation: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            videos: 2,
            frames: 24,
            labeled_every: 1,
            stable_fraction: 0.7,
            ignore_fraction: 0.05,
            signal: 1.0,
            noise: 0.6,
            temporal_correlation: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        Self { steps: 500, lr: 0.5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub clip_len: usize,
    pub strides: Vec<usize>,
    pub mtc: MtcSection,
    pub metrics: MetricSection,
    pub gen: GenSection,
    pub toy: ToySection,
    pub paths: PathSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            clip_len: 4,
            strides: DEFAULT_STRIDES.to_vec(),
            mtc: MtcSection::default(),
            metrics: MetricSection::default(),
            gen: GenSection::default(),
            toy: ToySection::default(),
            paths: PathSection::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub protocol: Option<ProtocolChoice>,
    pub theta: Option<f64>,
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda_mtc: Option<f64>,
    pub strides: Option<Vec<usize>>,
    pub clip_len: Option<usize>,
    pub windows: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))
            .map_err(Into::into)
    }

    /// Loads `path` if given, applies overrides and validates.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = s;
        }
        if let Some(p) = ov.protocol {
            self.metrics.protocol = Some(p);
        }
        if let Some(t) = ov.theta {
            self.metrics.theta = Some(t);
        }
        if let Some(t) = ov.tau {
            self.mtc.tau = t;
        }
        if let Some(a) = ov.alpha {
            self.mtc.alpha = a;
        }
        if let Some(l) = ov.lambda_mtc {
            self.mtc.lambda = l;
        }
        if let Some(s) = &ov.strides {
            self.strides = s.clone();
        }
        if let Some(t) = ov.clip_len {
            self.clip_len = t;
        }
        if let Some(w) = &ov.windows {
            self.metrics.windows = w.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| -> anyhow::Error { UsageError(m).into() };
        self.mtc_config().validate().map_err(|e| usage(e.to_string()))?;
        self.stride_set().map_err(|e| usage(e.to_string()))?;
        self.scale_spec().map_err(|e| usage(e.to_string()))?;
        let m = &self.model;
        if m.num_queries == 0 || m.dim == 0 || m.decoder_blocks == 0 || m.num_classes < 2 || m.num_classes > 255 {
            return Err(usage("model needs queries, dim, blocks > 0 and 2..=255 classes".into()));
        }
        if m.heads == 0 || !m.dim.is_multiple_of(m.heads) {
            return Err(usage(format!("{} heads do not divide dim {}", m.heads, m.dim)));
        }
        if self.clip_len == 0 {
            return Err(usage("clip length must be positive".into()));
        }
        if self.metrics.windows.is_empty() || self.metrics.windows.contains(&0) {
            return Err(usage("windows must be positive".into()));
        }
        if let Some(t) = self.metrics.theta {
            if !(t >= 0.0) {
                return Err(usage(format!("theta must be non-negative, got {t}")));
            }
        }
        let g = &self.gen;
        if g.videos == 0 || g.frames == 0 || g.labeled_every == 0 {
            return Err(usage("gen needs videos, frames and labeled_every > 0".into()));
        }
        for (name, v) in [("stable_fraction", g.stable_fraction), ("ignore_fraction", g.ignore_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(usage(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&g.temporal_correlation) {
            return Err(usage("temporal_correlation must be in [0, 1]".into()));
        }
        if !(self.toy.lr > 0.0 && self.toy.lr.is_finite()) {
            return Err(usage("toy learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn scale_spec(&self) -> stableseg_core::Result<ScaleSpec> {
        ScaleSpec::new(
            self.model
                .scales
                .iter()
                .map(|s| ScaleLevel {
                    id: s.id,
                    height: s.height,
                    width: s.width,
                    channels: s.channels,
                })
                .collect(),
        )
    }

    pub fn model_config(&self, max_clip_len: usize) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::new(m.num_queries, m.dim, m.decoder_blocks, m.num_classes, max_clip_len);
        c.heads = m.heads;
        c.ff_dim = m.ff_dim.unwrap_or(4 * m.dim);
        c
    }

    pub fn mtc_config(&self) -> MtcConfig {
        MtcConfig {
            scales: self.mtc.scales,
            tau: self.mtc.tau,
            alpha: self.mtc.alpha,
            lambda: self.mtc.lambda,
        }
    }

    pub fn stride_set(&self) -> stableseg_core::Result<StrideSet> {
        StrideSet::new(self.strides.iter().copied())
    }
}
