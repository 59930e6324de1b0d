//! Stability queries: a shared set of learnable vectors that attend to each
//! frame's backbone tokens, project their summaries back onto the pixels,
//! fuse the rgb and depth modulations and condition the backbone features.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::features::{check_aligned, counter_uniform, ScaleSpec, TextPrior, TokenGrid};
use crate::numerics::{self, layer_norm_in_place, sigmoid, softmax_rows, Grid2D, Matrix, LN_EPS};

/// `Q x d` matrix of query vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet(Matrix);

impl QuerySet {
    pub fn new(values: Matrix) -> Self {
        Self(values)
    }

    pub fn count(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_values(self) -> Matrix {
        self.0
    }
}

/// Row-stochastic `Q x N` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(Matrix);

impl AttentionMap {
    /// Wraps `weights` after checking every row is a distribution.
    pub fn new(weights: Matrix) -> Result<Self> {
        for r in 0..weights.rows() {
            let row = weights.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > numerics::STOCHASTIC_TOL {
                return Err(Error::InvalidArgument(format!(
                    "attention row {r} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(Self(weights))
    }

    pub fn weights(&self) -> &Matrix {
        &self.0
    }

    pub fn max_row_error(&self) -> f64 {
        (0..self.0.rows())
            .map(|r| (self.0.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-scale projections.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `d x d`
    pub w_q: Matrix,
    /// `C x d`
    pub w_k: Matrix,
    /// `C x d`
    pub w_v: Matrix,
    /// 1x1 projection of backbone features, `C x d`.
    pub phi: Matrix,
    pub phi_bias: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    /// rgb/depth gate is `sigmoid(gate_logit)`.
    pub gate_logit: f64,
}

impl LayerParams {
    pub fn dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn in_channels(&self) -> usize {
        self.w_k.rows()
    }

    pub fn beta(&self) -> f64 {
        sigmoid(self.gate_logit)
    }

    fn check(&self, d: usize) -> Result<()> {
        let c = self.in_channels();
        let ok = self.w_q.rows() == d
            && self.w_q.cols() == d
            && self.w_k.cols() == d
            && self.w_v.rows() == c
            && self.w_v.cols() == d
            && self.phi.rows() == c
            && self.phi.cols() == d
            && self.phi_bias.len() == d
            && self.ln_gain.len() == d
            && self.ln_bias.len() == d;
        if ok {
            Ok(())
        } else {
            Err(shape_err(format!("layer params inconsistent with d={d}, C={c}")))
        }
    }
}

/// Everything the query stage needs for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryParams {
    pub queries: QuerySet,
    pub alpha_txt: f64,
    pub prior: TextPrior,
    /// One entry per scale, in [`ScaleSpec`] order.
    pub layers: Vec<LayerParams>,
}

pub(crate) fn init_matrix(seed: u64, tag: u64, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    // Uniform in [-a, a] with a = sqrt(3 / fan_in): unit-variance inputs keep unit variance.
    let a = libm::sqrt(3.0 / fan_in as f64);
    Matrix::from_fn(rows, cols, |r, c| a * counter_uniform(seed, &[tag, r as u64, c as u64]))
}

impl QueryParams {
    /// Deterministic initialization. `alpha_txt` starts at 0 and every gate at 0.5.
    pub fn init(seed: u64, spec: &ScaleSpec, num_queries: usize, dim: usize, num_classes: usize) -> Self {
        let queries = QuerySet(init_matrix(seed, 0x5100, num_queries, dim, 1));
        let prior = TextPrior::synth(seed ^ 0x7E47, num_classes, dim);
        let layers = spec
            .levels()
            .iter()
            .enumerate()
            .map(|(i, lvl)| {
                let tag = 0x5200 + 16 * i as u64;
                let c = lvl.channels;
                LayerParams {
                    w_q: init_matrix(seed, tag, dim, dim, dim),
                    w_k: init_matrix(seed, tag + 1, c, dim, c),
                    w_v: init_matrix(seed, tag + 2, c, dim, c),
                    phi: init_matrix(seed, tag + 3, c, dim, c),
                    phi_bias: alloc::vec![0.0; dim],
                    ln_gain: alloc::vec![1.0; dim],
                    ln_bias: alloc::vec![0.0; dim],
                    gate_logit: 0.0,
                }
            })
            .collect();
        Self {
            queries,
            alpha_txt: 0.0,
            prior,
            layers,
        }
    }

    pub fn dim(&self) -> usize {
        self.queries.dim()
    }
}

/// `S + alpha_txt * e`, with `e` added to every query row.
pub fn bias_queries(s: &QuerySet, prior: &TextPrior, alpha_txt: f64) -> Result<QuerySet> {
    if prior.context.len() != s.dim() {
        return Err(shape_err(format!(
            "context dim {} vs query dim {}",
            prior.context.len(),
            s.dim()
        )));
    }
    let shift: Vec<f64> = prior.context.iter().map(|e| alpha_txt * e).collect();
    let mut out = s.0.clone();
    out.add_row_vector(&shift)?;
    Ok(QuerySet(out))
}

/// Cross-attention from queries to one token grid. Returns the attention
/// weights `softmax((S W_q)(X W_k)^T / sqrt(d))` and the query summaries
/// `A (X W_v)`.
pub fn attend(s: &QuerySet, tokens: &TokenGrid, p: &LayerParams) -> Result<(AttentionMap, Matrix)> {
    let d = s.dim();
    p.check(d)?;
    if tokens.channels() != p.in_channels() {
        return Err(shape_err(format!(
            "tokens have {} channels, projections expect {}",
            tokens.channels(),
            p.in_channels()
        )));
    }
    let q = s.0.matmul(&p.w_q)?;
    let k = tokens.tokens.matmul(&p.w_k)?;
    let v = tokens.tokens.matmul(&p.w_v)?;
    let logits = q.matmul(&k.transpose())?;
    let a = softmax_rows(&logits, libm::sqrt(d as f64))?;
    let summaries = a.matmul(&v)?;
    Ok((AttentionMap::new(a)?, summaries))
}

/// Projects query summaries back onto pixels with the same attention weights:
/// `Unflat(A^T U)`, token `y * W + x` landing at `(y, x)`.
pub fn modulate_pixels(a: &AttentionMap, summaries: &Matrix, height: usize, width: usize) -> Result<Grid2D> {
    if a.0.cols() != height * width {
        return Err(shape_err(format!(
            "attention over {} tokens cannot unflatten to {height}x{width}",
            a.0.cols()
        )));
    }
    if summaries.rows() != a.0.rows() {
        return Err(shape_err(format!(
            "{} summaries for {} queries",
            summaries.rows(),
            a.0.rows()
        )));
    }
    let z = a.0.transpose().matmul(summaries)?;
    Grid2D::from_tokens(z, height, width)
}

/// `beta * z_rgb + (1 - beta) * z_dep`.
pub fn fuse_branches(z_rgb: &Grid2D, z_dep: &Grid2D, beta: f64) -> Result<Grid2D> {
    if !z_rgb.same_shape(z_dep) {
        return Err(shape_err("rgb and depth modulations differ in shape"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("gate {beta} outside [0, 1]")));
    }
    let data = z_rgb
        .data()
        .iter()
        .zip(z_dep.data())
        .map(|(r, d)| beta * r + (1.0 - beta) * d)
        .collect();
    Grid2D::new(z_rgb.height(), z_rgb.width(), z_rgb.channels(), data)
}

/// `LN(phi(F) + Z)` with layer norm over channels at every pixel.
pub fn condition_features(f: &TokenGrid, z: &Grid2D, p: &LayerParams) -> Result<Grid2D> {
    if f.channels() != p.phi.rows() {
        return Err(shape_err(format!(
            "features have {} channels, phi expects {}",
            f.channels(),
            p.phi.rows()
        )));
    }
    if z.height() != f.height || z.width() != f.width || z.channels() != p.phi.cols() {
        return Err(shape_err("modulation does not match projected features"));
    }
    if p.ln_gain.len() != z.channels() || p.phi_bias.len() != z.channels() {
        return Err(shape_err("norm or bias length differs from d"));
    }
    let mut proj = f.tokens.matmul(&p.phi)?;
    proj.add_row_vector(&p.phi_bias)?;
    let d = proj.cols();
    let mut out = proj.into_data();
    for (px, zx) in out.chunks_exact_mut(d).zip(z.data().chunks_exact(d)) {
        for (a, b) in px.iter_mut().zip(zx) {
            *a += b;
        }
        layer_norm_in_place(px, &p.ln_gain, &p.ln_bias, LN_EPS)?;
    }
    Grid2D::new(f.height, f.width, d, out)
}

/// Output of the query stage for one frame.
#[derive(Debug, Clone)]
pub struct ConditionedFrame {
    /// `U_t^(l)` per scale, in [`ScaleSpec`] order.
    pub features: Vec<Grid2D>,
    /// rgb then depth attention map for every scale.
    pub attention: Vec<AttentionMap>,
}

/// Runs the full query stage on one frame's rgb and depth tokens.
pub fn condition_frame(rgb: &[TokenGrid], depth: &[TokenGrid], params: &QueryParams) -> Result<ConditionedFrame> {
    check_aligned(rgb, depth)?;
    if rgb.len() != params.layers.len() {
        return Err(shape_err(format!(
            "{} scales of tokens for {} layer parameter sets",
            rgb.len(),
            params.layers.len()
        )));
    }
    let biased = bias_queries(&params.queries, &params.prior, params.alpha_txt)?;
    let mut features = Vec::with_capacity(rgb.len());
    let mut attention = Vec::with_capacity(2 * rgb.len());
    for ((x_rgb, x_dep), p) in rgb.iter().zip(depth).zip(&params.layers) {
        let (a_rgb, u_rgb) = attend(&biased, x_rgb, p)?;
        let (a_dep, u_dep) = attend(&biased, x_dep, p)?;
        let z_rgb = modulate_pixels(&a_rgb, &u_rgb, x_rgb.height, x_rgb.width)?;
        let z_dep = modulate_pixels(&a_dep, &u_dep, x_dep.height, x_dep.width)?;
        let z = fuse_branches(&z_rgb, &z_dep, p.beta())?;
        features.push(condition_features(x_rgb, &z, p)?);
        attention.push(a_rgb);
        attention.push(a_dep);
    }
    Ok(ConditionedFrame { features, attention })
}
