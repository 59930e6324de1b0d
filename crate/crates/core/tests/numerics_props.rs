use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stableseg_core::numerics::{bilinear_resize, matmul, softmax_rows, Grid2D, Matrix};

fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.get(i, p) * b.get(p, j);
            }
            out[i * b.cols() + j] = s;
        }
    }
    out
}

#[test]
fn softmax_rows_sum_to_one_randomized() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x50f7);
    for _ in 0..1000 {
        let rows = rng.gen_range(1..6);
        let cols = rng.gen_range(1..12);
        let spread = 10f64.powi(rng.gen_range(-2..4));
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-spread..spread));
        let s = softmax_rows(&m, rng.gen_range(0.1..10.0)).unwrap();
        for r in 0..rows {
            assert!(s.row(r).iter().all(|&v| v >= 0.0));
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn matmul_matches_triple_loop_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3a7);
    for _ in 0..200 {
        let (m, k, n) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(1..=16));
        let a = Matrix::from_fn(m, k, |_, _| rng.gen_range(-3.0..3.0));
        let b = Matrix::from_fn(k, n, |_, _| rng.gen_range(-3.0..3.0));
        let c = matmul(&a, &b).unwrap();
        let oracle = naive_matmul(&a, &b);
        let bits: Vec<u64> = c.data().iter().map(|v| v.to_bits()).collect();
        let obits: Vec<u64> = oracle.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, obits);
    }
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(row in prop::collection::vec(-20.0f64..20.0, 1..10), shift in -50.0f64..50.0) {
        let a = Matrix::new(1, row.len(), row.clone()).unwrap();
        let b = Matrix::new(1, row.len(), row.iter().map(|v| v + shift).collect()).unwrap();
        let (sa, sb) = (softmax_rows(&a, 1.0).unwrap(), softmax_rows(&b, 1.0).unwrap());
        for (x, y) in sa.data().iter().zip(sb.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_stays_in_envelope(
        h in 1usize..6, w in 1usize..6, c in 1usize..3,
        oh in 1usize..10, ow in 1usize..10,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid2D::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let r = bilinear_resize(&g, oh, ow).unwrap();
        for ch in 0..c {
            let vals = g.data().iter().skip(ch).step_by(c);
            let (lo, hi) = vals.fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            for &v in r.data().iter().skip(ch).step_by(c) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
