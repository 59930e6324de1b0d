//! Clip construction for training (one random stride per clip) and for
//! inference (consecutive non-overlapping stride-1 clips).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

/// Default training strides.
pub const DEFAULT_STRIDES: [usize; 6] = [5, 10, 15, 20, 30, 40];

/// Sorted, deduplicated, nonempty set of positive strides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrideSet(Vec<usize>);

impl StrideSet {
    pub fn new(strides: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = strides.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if v.is_empty() {
            return Err(Error::InvalidArgument("stride set is empty".into()));
        }
        if v[0] == 0 {
            return Err(Error::InvalidArgument("strides must be positive".into()));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn min(&self) -> usize {
        self.0[0]
    }
}

impl Default for StrideSet {
    fn default() -> Self {
        Self(DEFAULT_STRIDES.to_vec())
    }
}

/// Frames `start, start + stride, ..., start + (len - 1) * stride`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipSpec {
    start: usize,
    stride: usize,
    indices: Vec<usize>,
}

impl ClipSpec {
    pub fn new(start: usize, stride: usize, len: usize) -> Result<Self> {
        if stride == 0 || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "clip needs positive stride and length, got stride {stride} length {len}"
            )));
        }
        let indices = (0..len).map(|i| start + i * stride).collect();
        Ok(Self { start, stride, indices })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Last frame index plus one.
    pub fn end(&self) -> usize {
        self.indices[self.indices.len() - 1] + 1
    }
}

/// Samples a training clip: the stride is drawn uniformly from the strides
/// that fit in the video, then the start uniformly among valid starts.
pub fn sample_clip<R: Rng + ?Sized>(
    video_len: usize,
    clip_len: usize,
    strides: &StrideSet,
    rng: &mut R,
) -> Result<ClipSpec> {
    if clip_len == 0 {
        return Err(Error::InvalidArgument("clip length must be positive".into()));
    }
    let span = |r: usize| (clip_len - 1) * r + 1;
    let feasible: Vec<usize> = strides.as_slice().iter().copied().filter(|&r| span(r) <= video_len).collect();
    if feasible.is_empty() {
        return Err(Error::Infeasible {
            video_len,
            clip_len,
            min_required: span(strides.min()),
        });
    }
    let stride = feasible[rng.gen_range(0..feasible.len())];
    let start = rng.gen_range(0..=video_len - span(stride));
    ClipSpec::new(start, stride, clip_len)
}

/// Splits `0..video_len` into consecutive stride-1 clips of `clip_len`
/// frames; the last clip holds the remainder.
pub fn partition_video(video_len: usize, clip_len: usize) -> Result<Vec<ClipSpec>> {
    if clip_len == 0 {
        return Err(Error::InvalidArgument("clip length must be positive".into()));
    }
    (0..video_len)
        .step_by(clip_len)
        .map(|start| ClipSpec::new(start, 1, clip_len.min(video_len - start)))
        .collect()
}

/// Zero-based temporal embedding index of 1-based clip position `t`.
pub fn temporal_index(clip: &ClipSpec, t: usize) -> Result<usize> {
    if t == 0 || t > clip.len() {
        return Err(Error::InvalidArgument(format!(
            "position {t} outside clip of length {}",
            clip.len()
        )));
    }
    Ok(t - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::SmallRng;
    use rand::SeedableRng;

    #[test]
    fn clip_arithmetic() {
        assert_eq!(ClipSpec::new(3, 5, 4).unwrap().indices(), &[3, 8, 13, 18]);
        let c = ClipSpec::new(9, 40, 1).unwrap();
        assert_eq!(c.indices(), &[9]);
    }

    #[test]
    fn single_frame_clip_any_stride() {
        let mut rng = SmallRng::seed_from_u64(1);
        let c = sample_clip(3, 1, &StrideSet::default(), &mut rng).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.indices()[0] < 3);
    }

    #[test]
    fn infeasible_names_required_length() {
        let mut rng = SmallRng::seed_from_u64(1);
        let err = sample_clip(10, 4, &StrideSet::default(), &mut rng).unwrap_err();
        assert_eq!(
            err,
            Error::Infeasible {
                video_len: 10,
                clip_len: 4,
                min_required: 16
            }
        );
    }

    #[test]
    fn only_feasible_strides_drawn() {
        let mut rng = SmallRng::seed_from_u64(7);
        for _ in 0..500 {
            let c = sample_clip(40, 4, &StrideSet::default(), &mut rng).unwrap();
            assert!(matches!(c.stride(), 5 | 10));
            assert!(c.end() <= 40);
        }
    }

    #[test]
    fn partition_examples() {
        let p = partition_video(7, 3).unwrap();
        let idx: Vec<&[usize]> = p.iter().map(|c| c.indices()).collect();
        assert_eq!(idx, [&[0, 1, 2][..], &[3, 4, 5], &[6]]);
        assert_eq!(partition_video(6, 3).unwrap().len(), 2);
        let p = partition_video(2, 5).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].indices(), &[0, 1]);
        assert!(partition_video(0, 3).unwrap().is_empty());
    }

    #[test]
    fn temporal_index_is_relative() {
        let a = ClipSpec::new(2, 5, 4).unwrap();
        let b = ClipSpec::new(11, 30, 4).unwrap();
        assert_eq!(temporal_index(&a, 1).unwrap(), 0);
        assert_eq!(temporal_index(&a, 3).unwrap(), temporal_index(&b, 3).unwrap());
        assert_eq!(temporal_index(&a, 4).unwrap(), 3);
        assert!(temporal_index(&a, 0).is_err());
        assert!(temporal_index(&a, 5).is_err());
    }

    #[test]
    fn stride_set_normalizes() {
        assert_eq!(StrideSet::new([10, 5, 10]).unwrap().as_slice(), &[5, 10]);
        assert!(StrideSet::new([]).is_err());
        assert!(StrideSet::new([0, 3]).is_err());
    }
}
