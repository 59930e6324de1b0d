//! Stand-ins for frozen backbone features.
//!
//! Token values come from a counter-based generator: every value is a pure
//! hash of `(seed, frame, branch, scale, token, channel)`, so any token can
//! be regenerated in isolation and the output never depends on call order.
//!
//! The hash is the SplitMix64 finalizer applied as a sponge:
//!
//! ```text
//! h0 = seed
//! h  = mix((h + 0x9E3779B97F4A7C15) ^ field)   for field in [frame, branch, scale, token, channel]
//! u  = (h >> 11) * 2^-53                        in [0, 1)
//! v  = 2u - 1                                   in [-1, 1)
//! ```
//!
//! `branch` is 0 for rgb and 1 for depth. With a temporal correlation `rho > 0`
//! the value becomes `rho * v_static + (1 - rho) * v`, where `v_static` is
//! keyed with frame `u64::MAX`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Grid2D, Matrix};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STATIC_FRAME: u64 = u64::MAX;

/// SplitMix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn absorb(h: u64, field: u64) -> u64 {
    mix64(h.wrapping_add(GOLDEN) ^ field)
}

/// Hashes a key tuple to a uniform value in `[-1, 1)`.
pub fn counter_uniform(seed: u64, fields: &[u64]) -> f64 {
    let h = fields.iter().fold(seed, |h, &f| absorb(h, f));
    2.0 * ((h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)) - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Rgb,
    Depth,
}

impl Branch {
    pub fn key(self) -> u64 {
        match self {
            Branch::Rgb => 0,
            Branch::Depth => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Rgb => "rgb",
            Branch::Depth => "depth",
        }
    }
}

/// One selected backbone block: its token grid size and channel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleLevel {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ScaleLevel {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSpec {
    levels: Vec<ScaleLevel>,
}

impl ScaleSpec {
    pub fn new(levels: Vec<ScaleLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument("scale spec must list at least one scale".into()));
        }
        for (i, l) in levels.iter().enumerate() {
            if l.height == 0 || l.width == 0 || l.channels == 0 {
                return Err(shape_err(format!("scale {} has a zero dimension", l.id)));
            }
            if levels[..i].iter().any(|o| o.id == l.id) {
                return Err(Error::InvalidArgument(format!("duplicate scale id {}", l.id)));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[ScaleLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Position of the scale with the most tokens (first one on ties).
    pub fn finest(&self) -> usize {
        let mut best = 0;
        for (i, l) in self.levels.iter().enumerate() {
            if l.tokens() > self.levels[best].tokens() {
                best = i;
            }
        }
        best
    }
}

/// Tokens of one frame at one scale and branch. Row `y * width + x` of
/// `tokens` is the token at spatial position `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub frame: usize,
    pub scale_id: usize,
    pub branch: Branch,
    pub height: usize,
    pub width: usize,
    pub tokens: Matrix,
}

impl TokenGrid {
    pub fn new(
        frame: usize,
        scale_id: usize,
        branch: Branch,
        height: usize,
        width: usize,
        tokens: Matrix,
    ) -> Result<Self> {
        if tokens.rows() != height * width {
            return Err(shape_err(format!(
                "token grid {height}x{width} holds {} tokens",
                tokens.rows()
            )));
        }
        Ok(Self {
            frame,
            scale_id,
            branch,
            height,
            width,
            tokens,
        })
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    pub fn to_grid(&self) -> Grid2D {
        Grid2D::from_tokens(self.tokens.clone(), self.height, self.width)
            .expect("token grid invariant")
    }

    pub fn same_shape(&self, other: &TokenGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels() == other.channels()
    }
}

/// Checks that rgb and depth grids of one frame line up scale by scale.
pub fn check_aligned(rgb: &[TokenGrid], depth: &[TokenGrid]) -> Result<()> {
    if rgb.len() != depth.len() {
        return Err(shape_err(format!("{} rgb scales vs {} depth scales", rgb.len(), depth.len())));
    }
    for (r, d) in rgb.iter().zip(depth) {
        if r.scale_id != d.scale_id || r.frame != d.frame || !r.same_shape(d) {
            return Err(shape_err(format!(
                "rgb/depth mismatch at frame {} scale {}",
                r.frame, r.scale_id
            )));
        }
    }
    Ok(())
}

/// Frozen text prior: per-class embeddings and a global context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrior {
    pub class_embeddings: Matrix,
    pub context: Vec<f64>,
}

impl TextPrior {
    pub fn new(class_embeddings: Matrix, context: Vec<f64>) -> Result<Self> {
        if context.len() != class_embeddings.cols() {
            return Err(shape_err(format!(
                "context of dim {} vs embeddings of dim {}",
                context.len(),
                class_embeddings.cols()
            )));
        }
        if context.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text context"));
        }
        Ok(Self {
            class_embeddings,
            context,
        })
    }

    /// Synthetic prior; the context vector is the mean class embedding.
    pub fn synth(seed: u64, num_classes: usize, dim: usize) -> Self {
        let e = Matrix::from_fn(num_classes, dim, |k, c| {
            counter_uniform(seed, &[0x7E47, k as u64, c as u64])
        });
        let context = (0..dim)
            .map(|c| (0..num_classes).map(|k| e.get(k, c)).sum::<f64>() / num_classes as f64)
            .collect();
        Self {
            class_embeddings: e,
            context,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SynthOptions {
    /// Weight of a frame-independent component in `[0, 1]`.
    pub temporal_correlation: f64,
}

/// Deterministic synthetic tokens for every scale of one frame.
pub fn synth_tokens(seed: u64, frame: usize, branch: Branch, spec: &ScaleSpec) -> Vec<TokenGrid> {
    synth_tokens_with(seed, frame, branch, spec, &SynthOptions::default())
}

pub fn synth_tokens_with(
    seed: u64,
    frame: usize,
    branch: Branch,
    spec: &ScaleSpec,
    opts: &SynthOptions,
) -> Vec<TokenGrid> {
    let rho = opts.temporal_correlation.clamp(0.0, 1.0);
    spec.levels()
        .iter()
        .map(|lvl| {
            let tokens = Matrix::from_fn(lvl.tokens(), lvl.channels, |n, c| {
                let key = [frame as u64, branch.key(), lvl.id as u64, n as u64, c as u64];
                let dynamic = counter_uniform(seed, &key);
                if rho == 0.0 {
                    dynamic
                } else {
                    let mut skey = key;
                    skey[0] = STATIC_FRAME;
                    rho * counter_uniform(seed, &skey) + (1.0 - rho) * dynamic
                }
            });
            TokenGrid {
                frame,
                scale_id: lvl.id,
                branch,
                height: lvl.height,
                width: lvl.width,
                tokens,
            }
        })
        .collect()
}

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Converts an RGB grid to single-channel luma in the input's value range.
pub fn grayscale(rgb: &Grid2D) -> Result<Grid2D> {
    if rgb.channels() != 3 {
        return Err(shape_err(format!("grayscale needs 3 channels, got {}", rgb.channels())));
    }
    let data = rgb
        .data()
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
        .collect();
    Grid2D::new(rgb.height(), rgb.width(), 1, data)
}
