//! Spatio-temporal memory decoder.
//!
//! A clip's query-conditioned pixel features are flattened into one memory
//! (frame-major, then scale, then row-major pixels) with temporal and scale
//! embeddings added. The stability queries are refined once per clip by
//! stacked cross-attention blocks, and every frame of the clip is decoded
//! against the same refined queries.
//!
//! Blocks use pre-norm residuals:
//!
//! ```text
//! S' = S  + MHA(LN1(S), M) W_o
//! S''= S' + W2 gelu(W1 LN2(S') + b1) + b2
//! ```
//!
//! Attention is dense multi-head cross-attention over the whole memory.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::features::{ScaleSpec, TokenGrid};
use crate::numerics::{bilinear_resize, gelu, layer_norm_in_place, softmax_in_place, softmax_rows, Grid2D, Matrix, LN_EPS};
use crate::queries::{condition_frame, init_matrix, AttentionMap, QueryParams, QuerySet};

/// Learnable temporal (`T_max x d`) and scale (`L x d`) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub temporal: Matrix,
    pub scale: Matrix,
}

impl EmbeddingTables {
    pub fn zeros(max_frames: usize, scales: usize, dim: usize) -> Self {
        Self {
            temporal: Matrix::zeros(max_frames, dim),
            scale: Matrix::zeros(scales, dim),
        }
    }
}

/// Concatenated clip memory. `tags[i] = (frame position, scale position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryTokens {
    pub tokens: Matrix,
    pub tags: Vec<(usize, usize)>,
}

impl MemoryTokens {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Builds the memory from `grids[t][l]`, the conditioned features of clip
/// position `t` at scale position `l`.
pub fn build_memory(grids: &[Vec<Grid2D>], emb: &EmbeddingTables) -> Result<MemoryTokens> {
    let scales = grids.first().map(|g| g.len()).unwrap_or(0);
    if grids.is_empty() || scales == 0 {
        return Err(shape_err("memory needs at least one frame and one scale"));
    }
    let d = emb.temporal.cols();
    if grids.len() > emb.temporal.rows() {
        return Err(shape_err(format!(
            "clip of {} frames exceeds temporal table of {}",
            grids.len(),
            emb.temporal.rows()
        )));
    }
    if scales > emb.scale.rows() || emb.scale.cols() != d {
        return Err(shape_err("scale embedding table does not cover the scales"));
    }
    let total: usize = grids.iter().flatten().map(|g| g.height() * g.width()).sum();
    let mut data = Vec::with_capacity(total * d);
    let mut tags = Vec::with_capacity(total);
    for (t, frame) in grids.iter().enumerate() {
        if frame.len() != scales {
            return Err(shape_err(format!(
                "frame {t} has {} scales, expected {scales}",
                frame.len()
            )));
        }
        for (l, g) in frame.iter().enumerate() {
            if g.channels() != d {
                return Err(shape_err(format!(
                    "frame {t} scale {l} has {} channels, expected {d}",
                    g.channels()
                )));
            }
            let (et, es) = (emb.temporal.row(t), emb.scale.row(l));
            for px in g.data().chunks_exact(d) {
                data.extend(px.iter().zip(et).zip(es).map(|((x, a), b)| x + a + b));
                tags.push((t, l));
            }
        }
    }
    Ok(MemoryTokens {
        tokens: Matrix::new(total, d, data)?,
        tags,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub norm1_gain: Vec<f64>,
    pub norm1_bias: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub norm2_gain: Vec<f64>,
    pub norm2_bias: Vec<f64>,
    /// `d x d_ff`
    pub ff1: Matrix,
    pub ff1_bias: Vec<f64>,
    /// `d_ff x d`
    pub ff2: Matrix,
    pub ff2_bias: Vec<f64>,
}

/// Segmentation head: a class projection shared by all queries and a
/// per-query mask scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `K x d`
    pub class_proj: Matrix,
    /// One entry per query.
    pub mask_scale: Vec<f64>,
}

impl HeadParams {
    pub fn num_classes(&self) -> usize {
        self.class_proj.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub heads: usize,
    pub blocks: Vec<DecoderBlock>,
    pub head: HeadParams,
}

/// Per-scale `d x d` projections (with bias) and the output norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseParams {
    pub proj: Vec<Matrix>,
    pub proj_bias: Vec<Vec<f64>>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

impl FuseParams {
    pub fn identity(scales: usize, dim: usize) -> Self {
        Self {
            proj: vec![Matrix::identity(dim); scales],
            proj_bias: vec![vec![0.0; dim]; scales],
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
        }
    }
}

fn block_forward(
    s: &Matrix,
    mem_k: &Matrix,
    mem_v: &Matrix,
    b: &DecoderBlock,
    heads: usize,
    maps: &mut Option<&mut Vec<AttentionMap>>,
) -> Result<Matrix> {
    let (q_count, d) = (s.rows(), s.cols());
    let dh = d / heads;
    let mut normed = s.clone();
    for r in 0..q_count {
        layer_norm_in_place(normed.row_mut(r), &b.norm1_gain, &b.norm1_bias, LN_EPS)?;
    }
    let q = normed.matmul(&b.w_q)?;
    let mut heads_out = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi);
        let kh = mem_k.slice_cols(lo, hi);
        let vh = mem_v.slice_cols(lo, hi);
        let a = softmax_rows(&qh.matmul(&kh.transpose())?, libm::sqrt(dh as f64))?;
        heads_out.push(a.matmul(&vh)?);
        if let Some(store) = maps.as_deref_mut() {
            store.push(AttentionMap::new(a)?);
        }
    }
    let attn = Matrix::hstack(&heads_out)?.matmul(&b.w_o)?;
    let s1 = s.add(&attn)?;

    let mut n2 = s1.clone();
    for r in 0..q_count {
        layer_norm_in_place(n2.row_mut(r), &b.norm2_gain, &b.norm2_bias, LN_EPS)?;
    }
    let mut hidden = n2.matmul(&b.ff1)?;
    hidden.add_row_vector(&b.ff1_bias)?;
    hidden.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
    let mut ff = hidden.matmul(&b.ff2)?;
    ff.add_row_vector(&b.ff2_bias)?;
    s1.add(&ff)
}

fn check_decoder(d: usize, p: &DecoderParams) -> Result<()> {
    if p.blocks.is_empty() {
        return Err(Error::InvalidArgument("decoder needs at least one block".into()));
    }
    if p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(Error::InvalidArgument(format!("{} heads do not divide d={d}", p.heads)));
    }
    for (i, b) in p.blocks.iter().enumerate() {
        let dff = b.ff1.cols();
        let ok = [&b.w_q, &b.w_k, &b.w_v, &b.w_o].iter().all(|m| m.rows() == d && m.cols() == d)
            && b.ff1.rows() == d
            && b.ff2.rows() == dff
            && b.ff2.cols() == d
            && b.ff1_bias.len() == dff
            && b.ff2_bias.len() == d
            && [&b.norm1_gain, &b.norm1_bias, &b.norm2_gain, &b.norm2_bias].iter().all(|v| v.len() == d);
        if !ok {
            return Err(shape_err(format!("decoder block {i} inconsistent with d={d}")));
        }
    }
    Ok(())
}

/// Refines queries against the memory through every block.
pub fn decode_queries(s: &QuerySet, m: &MemoryTokens, p: &DecoderParams) -> Result<QuerySet> {
    decode(s, m, p, None)
}

/// [`decode_queries`] that also returns each block's per-head attention maps
/// (block-major).
pub fn decode_queries_traced(
    s: &QuerySet,
    m: &MemoryTokens,
    p: &DecoderParams,
) -> Result<(QuerySet, Vec<AttentionMap>)> {
    let mut maps = Vec::new();
    let out = decode(s, m, p, Some(&mut maps))?;
    Ok((out, maps))
}

fn decode(s: &QuerySet, m: &MemoryTokens, p: &DecoderParams, mut maps: Option<&mut Vec<AttentionMap>>) -> Result<QuerySet> {
    let d = s.dim();
    if m.tokens.cols() != d {
        return Err(shape_err(format!("memory dim {} vs query dim {d}", m.tokens.cols())));
    }
    check_decoder(d, p)?;
    let mut cur = s.values().clone();
    for b in &p.blocks {
        let mem_k = m.tokens.matmul(&b.w_k)?;
        let mem_v = m.tokens.matmul(&b.w_v)?;
        cur = block_forward(&cur, &mem_k, &mem_v, b, p.heads, &mut maps)?;
    }
    Ok(QuerySet::new(cur))
}

/// Projects each scale, resizes to the finest scale, sums and normalizes.
pub fn fuse_scales(grids: &[Grid2D], fp: &FuseParams) -> Result<Grid2D> {
    if grids.is_empty() {
        return Err(shape_err("fuse_scales needs at least one scale"));
    }
    if fp.proj.len() != grids.len() || fp.proj_bias.len() != grids.len() {
        return Err(shape_err(format!(
            "{} scales for {} fusion projections",
            grids.len(),
            fp.proj.len()
        )));
    }
    let mut finest = 0;
    for (i, g) in grids.iter().enumerate() {
        if g.height() * g.width() > grids[finest].height() * grids[finest].width() {
            finest = i;
        }
    }
    let (h, w) = (grids[finest].height(), grids[finest].width());
    let d = fp.ln_gain.len();
    let mut acc = vec![0.0; h * w * d];
    for ((g, proj), bias) in grids.iter().zip(&fp.proj).zip(&fp.proj_bias) {
        if g.channels() != proj.rows() || proj.cols() != d || bias.len() != d {
            return Err(shape_err("fusion projection does not match grid channels"));
        }
        let mut t = g.to_tokens().matmul(proj)?;
        t.add_row_vector(bias)?;
        let resized = bilinear_resize(&Grid2D::from_tokens(t, g.height(), g.width())?, h, w)?;
        for (a, v) in acc.iter_mut().zip(resized.data()) {
            *a += v;
        }
    }
    for px in acc.chunks_exact_mut(d) {
        layer_norm_in_place(px, &fp.ln_gain, &fp.ln_bias, LN_EPS)?;
    }
    Grid2D::new(h, w, d, acc)
}

/// `K x H x W` logits of one frame, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLogits {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FrameLogits {
    pub fn get(&self, k: usize, y: usize, x: usize) -> f64 {
        self.data[(k * self.height + y) * self.width + x]
    }

    /// Bilinear upsampling of every class map.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<FrameLogits> {
        let (k, hw) = (self.classes, self.height * self.width);
        let interleaved: Vec<f64> = (0..hw).flat_map(|i| (0..k).map(move |c| (c, i))).map(|(c, i)| self.data[c * hw + i]).collect();
        let g = bilinear_resize(&Grid2D::new(self.height, self.width, k, interleaved)?, out_h, out_w)?;
        let ohw = out_h * out_w;
        let mut data = vec![0.0; k * ohw];
        for (i, px) in g.data().chunks_exact(k).enumerate() {
            for (c, v) in px.iter().enumerate() {
                data[c * ohw + i] = *v;
            }
        }
        Ok(FrameLogits {
            classes: k,
            height: out_h,
            width: out_w,
            data,
        })
    }

    /// Per-pixel argmax; ties go to the lowest class.
    pub fn argmax(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.data[k * hw + i] > self.data[best * hw + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Query-driven head. Each query contributes a mask logit
/// `m_q(u) = mask_scale[q] * <s_q, p(u)>` weighted by its class distribution
/// `c_q = softmax(class_proj s_q)`: `Y[k](u) = sum_q c_q[k] m_q(u)`.
pub fn predict_logits(p_t: &Grid2D, s_bar: &QuerySet, head: &HeadParams) -> Result<FrameLogits> {
    let d = s_bar.dim();
    if p_t.channels() != d || head.class_proj.cols() != d {
        return Err(shape_err(format!(
            "pixel dim {}, query dim {d}, head dim {}",
            p_t.channels(),
            head.class_proj.cols()
        )));
    }
    if head.mask_scale.len() != s_bar.count() {
        return Err(shape_err(format!(
            "{} mask scales for {} queries",
            head.mask_scale.len(),
            s_bar.count()
        )));
    }
    let k = head.num_classes();
    let (h, w) = (p_t.height(), p_t.width());
    // class weights: Q x K
    let mut class_w = s_bar.values().matmul(&head.class_proj.transpose())?;
    for r in 0..class_w.rows() {
        softmax_in_place(class_w.row_mut(r), 1.0);
    }
    // mask logits: HW x Q
    let mut masks = p_t.to_tokens().matmul(&s_bar.values().transpose())?;
    for px in masks.data_mut().chunks_exact_mut(s_bar.count()) {
        for (m, g) in px.iter_mut().zip(&head.mask_scale) {
            *m *= g;
        }
    }
    // HW x K, then transpose to class-major
    let y = masks.matmul(&class_w)?;
    let data = y.transpose().into_data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(FrameLogits {
        classes: k,
        height: h,
        width: w,
        data,
    })
}

/// `B x T x K x H x W` logits, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsVolume {
    pub batch: usize,
    pub frames: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LogitsVolume {
    pub fn new(batch: usize, frames: usize, classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if [batch, frames, classes, height, width].contains(&0) {
            return Err(shape_err("logits dims must be positive"));
        }
        if data.len() != batch * frames * classes * height * width {
            return Err(shape_err(format!(
                "logits {batch}x{frames}x{classes}x{height}x{width} need {} values, got {}",
                batch * frames * classes * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(Self {
            batch,
            frames,
            classes,
            height,
            width,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, b: usize, t: usize, k: usize, pixel: usize) -> usize {
        ((b * self.frames + t) * self.classes + k) * self.pixels() + pixel
    }

    pub fn get(&self, b: usize, t: usize, k: usize, pixel: usize) -> f64 {
        self.data[self.index(b, t, k, pixel)]
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.batch, self.frames, self.classes, self.height, self.width]
    }

    /// Frame `t` of batch entry `b`.
    pub fn frame(&self, b: usize, t: usize) -> FrameLogits {
        let n = self.classes * self.pixels();
        let start = (b * self.frames + t) * n;
        FrameLogits {
            classes: self.classes,
            height: self.height,
            width: self.width,
            data: self.data[start..start + n].to_vec(),
        }
    }

    /// Stacks single-batch frames into a `1 x T` volume.
    pub fn from_frames(frames: &[FrameLogits]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| shape_err("no frames"))?;
        if frames
            .iter()
            .any(|f| f.classes != first.classes || f.height != first.height || f.width != first.width)
        {
            return Err(shape_err("frames differ in shape"));
        }
        let data = frames.iter().flat_map(|f| f.data.iter().copied()).collect();
        Self::new(1, frames.len(), first.classes, first.height, first.width, data)
    }
}

/// Sizes of the decoder. `heads` and `ff_dim` default to 4 and `4 * dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub num_classes: usize,
    pub max_clip_len: usize,
}

impl ModelConfig {
    pub fn new(num_queries: usize, dim: usize, num_blocks: usize, num_classes: usize, max_clip_len: usize) -> Self {
        Self {
            num_queries,
            dim,
            num_blocks,
            heads: 4,
            ff_dim: 4 * dim,
            num_classes,
            max_clip_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ScaleSpec,
    pub query: QueryParams,
    pub embeddings: EmbeddingTables,
    pub decoder: DecoderParams,
    pub fuse: FuseParams,
    /// Frame resolution the logits are resized to, if any.
    pub output_size: Option<(usize, usize)>,
}

impl ModelParams {
    pub fn init(seed: u64, spec: &ScaleSpec, cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let small = |tag: u64, rows: usize| {
            let mut m = init_matrix(seed, tag, rows, d, 1);
            m.scale(0.02);
            m
        };
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let tag = 0x6000 + 16 * i as u64;
                DecoderBlock {
                    norm1_gain: vec![1.0; d],
                    norm1_bias: vec![0.0; d],
                    w_q: init_matrix(seed, tag, d, d, d),
                    w_k: init_matrix(seed, tag + 1, d, d, d),
                    w_v: init_matrix(seed, tag + 2, d, d, d),
                    w_o: init_matrix(seed, tag + 3, d, d, d),
                    norm2_gain: vec![1.0; d],
                    norm2_bias: vec![0.0; d],
                    ff1: init_matrix(seed, tag + 4, d, cfg.ff_dim, d),
                    ff1_bias: vec![0.0; cfg.ff_dim],
                    ff2: init_matrix(seed, tag + 5, cfg.ff_dim, d, cfg.ff_dim),
                    ff2_bias: vec![0.0; d],
                }
            })
            .collect();
        let fuse = FuseParams {
            proj: (0..spec.len()).map(|l| init_matrix(seed, 0x7000 + l as u64, d, d, d)).collect(),
            proj_bias: vec![vec![0.0; d]; spec.len()],
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
        };
        Self {
            spec: spec.clone(),
            query: QueryParams::init(seed, spec, cfg.num_queries, d, cfg.num_classes),
            embeddings: EmbeddingTables {
                temporal: small(0x6F00, cfg.max_clip_len),
                scale: small(0x6F01, spec.len()),
            },
            decoder: DecoderParams {
                heads: cfg.heads,
                blocks,
                head: HeadParams {
                    class_proj: init_matrix(seed, 0x7100, cfg.num_classes, d, d),
                    mask_scale: vec![1.0 / libm::sqrt(d as f64); cfg.num_queries],
                },
            },
            fuse,
            output_size: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.head.num_classes()
    }
}

/// rgb and depth tokens of one frame, one grid per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens {
    pub rgb: Vec<TokenGrid>,
    pub depth: Vec<TokenGrid>,
}

#[derive(Debug, Clone)]
pub struct ClipOutput {
    pub logits: LogitsVolume,
    /// Refined queries shared by every frame of the clip.
    pub queries: QuerySet,
    /// Fused per-pixel features, one per frame.
    pub pixel_features: Vec<Grid2D>,
    /// Query-stage maps (per frame, rgb/depth per scale) followed by decoder maps.
    pub attention: Vec<AttentionMap>,
}

/// Query stage, memory, one decode for the clip, then per-frame fusion and head.
pub fn run_clip(frames: &[FrameTokens], params: &ModelParams) -> Result<ClipOutput> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("empty clip".into()));
    }
    let mut conditioned = Vec::with_capacity(frames.len());
    let mut attention = Vec::new();
    for f in frames {
        let c = condition_frame(&f.rgb, &f.depth, &params.query)?;
        conditioned.push(c.features);
        attention.extend(c.attention);
    }
    let memory = build_memory(&conditioned, &params.embeddings)?;
    let (s_bar, maps) = decode_queries_traced(&params.query.queries, &memory, &params.decoder)?;
    attention.extend(maps);

    let mut pixel_features = Vec::with_capacity(frames.len());
    let mut logits = Vec::with_capacity(frames.len());
    for grids in &conditioned {
        let p_t = fuse_scales(grids, &params.fuse)?;
        let mut y = predict_logits(&p_t, &s_bar, &params.decoder.head)?;
        if let Some((h, w)) = params.output_size {
            y = y.resize(h, w)?;
        }
        pixel_features.push(p_t);
        logits.push(y);
    }
    Ok(ClipOutput {
        logits: LogitsVolume::from_frames(&logits)?,
        queries: s_bar,
        pixel_features,
        attention,
    })
}

/// Largest deviation of any decoder or query-stage row sum from 1.
pub fn max_attention_error(maps: &[AttentionMap]) -> f64 {
    maps.iter().map(|m| m.max_row_error()).fold(0.0, f64::max)
}
