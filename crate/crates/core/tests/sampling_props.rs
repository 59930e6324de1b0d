use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stableseg_core::sampling::{partition_video, sample_clip, StrideSet};
use stableseg_core::Error;

#[test]
fn fuzzed_clips_are_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5A);
    let mut feasible = 0;
    for _ in 0..100_000 {
        let video_len = rng.gen_range(1..400);
        let clip_len = rng.gen_range(1..12);
        let strides = StrideSet::new((0..rng.gen_range(1..5)).map(|_| rng.gen_range(1..50))).unwrap();
        match sample_clip(video_len, clip_len, &strides, &mut rng) {
            Ok(c) => {
                feasible += 1;
                assert_eq!(c.len(), clip_len);
                assert!(strides.as_slice().contains(&c.stride()));
                assert!(c.indices().windows(2).all(|w| w[1] - w[0] == c.stride()));
                assert!(*c.indices().last().unwrap() < video_len);
            }
            Err(Error::Infeasible { min_required, .. }) => {
                assert!(min_required > video_len);
                assert_eq!(min_required, (clip_len - 1) * strides.min() + 1);
            }
            Err(e) => panic!("unexpected {e}"),
        }
    }
    assert!(feasible > 10_000);
}

#[test]
fn strides_are_equally_likely() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = StrideSet::new([2, 3]).unwrap();
    let n = 10_000;
    let twos = (0..n).filter(|_| sample_clip(100, 4, &s, &mut rng).unwrap().stride() == 2).count();
    let f = twos as f64 / n as f64;
    assert!((f - 0.5).abs() < 0.03, "{f}");
}

#[test]
fn starts_cover_the_valid_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = StrideSet::new([3]).unwrap();
    let mut seen = [false; 5];
    for _ in 0..2000 {
        seen[sample_clip(11, 3, &s, &mut rng).unwrap().start()] = true;
    }
    assert!(seen.iter().all(|&b| b));
}

#[test]
fn partition_covers_each_frame_once() {
    for len in 0..60 {
        for clip in 1..10 {
            let parts = partition_video(len, clip).unwrap();
            let all: Vec<usize> = parts.iter().flat_map(|c| c.indices().to_vec()).collect();
            assert_eq!(all, (0..len).collect::<Vec<_>>());
            assert!(parts.iter().all(|c| c.stride() == 1 && c.len() <= clip));
            assert!(parts.iter().rev().skip(1).all(|c| c.len() == clip));
        }
    }
}
