use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stableseg_core::decoder::LogitsVolume;
use stableseg_core::mtc::{
    finite_diff_check, mtc_loss, prob_from_logits, temporal_delta, trimmed_mean, FdOptions, LabelVideo, MtcConfig,
};
use stableseg_core::numerics::{softmax_rows, Matrix};
use stableseg_core::IGNORE;

fn random_case(rng: &mut ChaCha8Rng, dims: [usize; 5], ignore_rate: f64) -> (LogitsVolume, Vec<LabelVideo>) {
    let [b, t, k, h, w] = dims;
    let x = LogitsVolume::new(b, t, k, h, w, (0..b * t * k * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let y = (0..b)
        .map(|_| {
            let labels = (0..t * h * w)
                .map(|_| if rng.gen_bool(ignore_rate) { IGNORE } else { rng.gen_range(0..2) })
                .collect();
            LabelVideo::new(t, h, w, labels).unwrap()
        })
        .collect();
    (x, y)
}

fn probs_oracle(x: &LogitsVolume) -> Vec<f64> {
    // gather each pixel's logits into a row and use the matrix softmax
    let [b, t, k, h, w] = x.dims();
    let n = h * w;
    let rows = Matrix::from_fn(b * t * n, k, |r, c| {
        let (bt, u) = (r / n, r % n);
        x.data[(bt * k + c) * n + u]
    });
    let sm = softmax_rows(&rows, 1.0).unwrap();
    let mut out = vec![0.0; x.data.len()];
    for r in 0..b * t * n {
        let (bt, u) = (r / n, r % n);
        for c in 0..k {
            out[(bt * k + c) * n + u] = sm.get(r, c);
        }
    }
    out
}

fn loss_oracle(x: &LogitsVolume, y: &[LabelVideo], tau: f64, alpha: f64) -> f64 {
    let [b, t, k, h, w] = x.dims();
    let n = h * w;
    let p = probs_oracle(x);
    let at = |bb: usize, tt: usize, c: usize, u: usize| p[((bb * t + tt) * k + c) * n + u];
    let scales = if t < 2 { 0 } else { (((t - 1) as f64).log2().floor() as usize) + 1 };
    let mut terms = Vec::new();
    for s in 0..scales {
        let r = 1 << s;
        let mut vals = Vec::new();
        for bb in 0..b {
            for tt in 0..t - r {
                for u in 0..n {
                    let (l0, l1) = (y[bb].labels[tt * n + u], y[bb].labels[(tt + r) * n + u]);
                    if l0 != IGNORE && l0 == l1 {
                        vals.push((0..k).map(|c| (at(bb, tt + r, c, u) - at(bb, tt, c, u)).abs()).sum::<f64>());
                    }
                }
            }
        }
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(f64::total_cmp);
        let keep = (((1.0 - tau) * vals.len() as f64).floor() as usize).max(1);
        terms.push(alpha.powi(s as i32) * vals[..keep].iter().sum::<f64>() / keep as f64);
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

#[test]
fn loss_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let dims = [rng.gen_range(1..3), rng.gen_range(1..7), rng.gen_range(2..5), rng.gen_range(1..4), rng.gen_range(1..4)];
        let (x, y) = random_case(&mut rng, dims, 0.2);
        let tau = [0.0, 0.1, 0.2, 0.3][rng.gen_range(0..4)];
        let cfg = MtcConfig { tau, ..MtcConfig::default() };
        let got = mtc_loss(&x, &y, &cfg).unwrap().loss;
        let want = loss_oracle(&x, &y, tau, 0.5);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn probabilities_and_deltas_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, _) = random_case(&mut rng, [2, 4, 3, 2, 3], 0.0);
    let p = prob_from_logits(&x).unwrap();
    for (a, b) in p.data.iter().zip(probs_oracle(&x)) {
        assert!((a - b).abs() < 1e-15);
    }
    let d = temporal_delta(&p, 2).unwrap();
    assert_eq!((d.pairs, d.pixels), (2, 6));
    for v in &d.data {
        assert!((0.0..=2.0).contains(v));
    }
}

#[test]
fn logit_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (x, y) = random_case(&mut rng, [1, 5, 3, 2, 2], 0.1);
        let base = mtc_loss(&x, &y, &MtcConfig::default()).unwrap().loss;
        let mut shifted = x.clone();
        let n = x.pixels();
        for bt in 0..5 {
            for u in 0..n {
                let c = rng.gen_range(-50.0..50.0);
                for k in 0..3 {
                    shifted.data[(bt * 3 + k) * n + u] += c;
                }
            }
        }
        let moved = mtc_loss(&shifted, &y, &MtcConfig::default()).unwrap().loss;
        assert!((base - moved).abs() < 1e-9);
    }
}

#[test]
fn moving_a_pair_closer_never_raises_loss() {
    // two frames: each pixel sits in exactly one pair
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let cfg = MtcConfig { tau: 0.0, ..MtcConfig::default() };
    for _ in 0..50 {
        let (x, mut y) = random_case(&mut rng, [1, 2, 3, 2, 2], 0.0);
        y[0].labels = vec![1; 8];
        let p = prob_from_logits(&x).unwrap();
        let u = rng.gen_range(0..4);
        let mut prev = mtc_loss(&x, &y, &cfg).unwrap().loss;
        for step in 1..=10 {
            let theta = step as f64 / 10.0;
            let mut z = x.clone();
            for k in 0..3 {
                let (p0, p1) = (p.get(0, 0, k, u), p.get(0, 1, k, u));
                z.data[k * 4 + u] = (p0 + theta * (p1 - p0)).ln();
            }
            let cur = mtc_loss(&z, &y, &cfg).unwrap().loss;
            assert!(cur <= prev + 1e-12);
            prev = cur;
        }
    }
}

#[test]
fn gradient_matches_finite_differences_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let (x, y) = random_case(&mut rng, [1, 4, 3, 3, 3], 0.1);
        let r = finite_diff_check(&x, &y, &MtcConfig::default(), &FdOptions::default(), &mut rng).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}

proptest! {
    #[test]
    fn trimmed_mean_bounded_by_mean(v in prop::collection::vec(0.0f64..2.0, 1..60), tau in 0.0f64..0.9) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let tm = trimmed_mean(&v, tau).unwrap();
        prop_assert!(tm <= m + 1e-12);
        prop_assert!(tm >= v.iter().cloned().fold(f64::MAX, f64::min) - 1e-12);
    }

    #[test]
    fn trimmed_mean_positively_homogeneous(v in prop::collection::vec(0.0f64..2.0, 1..60), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        let a = trimmed_mean(&scaled, 0.2).unwrap();
        let b = c * trimmed_mean(&v, 0.2).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}
