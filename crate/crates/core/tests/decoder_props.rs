use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stableseg_core::decoder::{
    build_memory, decode_queries, fuse_scales, predict_logits, run_clip, DecoderParams, EmbeddingTables, FrameTokens,
    FuseParams, HeadParams, MemoryTokens, ModelConfig, ModelParams,
};
use stableseg_core::features::{synth_tokens, Branch, ScaleLevel, ScaleSpec};
use stableseg_core::numerics::{Grid2D, Matrix};
use stableseg_core::queries::{condition_frame, QuerySet};

fn spec() -> ScaleSpec {
    ScaleSpec::new(vec![
        ScaleLevel { id: 0, height: 4, width: 4, channels: 6 },
        ScaleLevel { id: 1, height: 2, width: 2, channels: 5 },
    ])
    .unwrap()
}

fn frames(seed: u64, n: usize, sp: &ScaleSpec) -> Vec<FrameTokens> {
    (0..n)
        .map(|t| FrameTokens {
            rgb: synth_tokens(seed, t, Branch::Rgb, sp),
            depth: synth_tokens(seed, t, Branch::Depth, sp),
        })
        .collect()
}

fn randomize(params: &mut DecoderParams, rng: &mut ChaCha8Rng) {
    let mut jitter = |v: &mut [f64]| v.iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
    for b in &mut params.blocks {
        for v in [&mut b.norm1_gain, &mut b.norm1_bias, &mut b.norm2_gain, &mut b.norm2_bias, &mut b.ff1_bias, &mut b.ff2_bias] {
            jitter(v);
        }
    }
}

fn memory(rng: &mut ChaCha8Rng, n: usize, d: usize) -> MemoryTokens {
    MemoryTokens {
        tokens: Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.5..1.5)),
        tags: vec![(0, 0); n],
    }
}

#[test]
fn memory_count_matches_grid_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    for _ in 0..50 {
        let t = rng.gen_range(1..6);
        let l = rng.gen_range(1..4);
        let d = rng.gen_range(1..5);
        let sizes: Vec<(usize, usize)> = (0..l).map(|_| (rng.gen_range(1..6), rng.gen_range(1..6))).collect();
        let grids: Vec<Vec<Grid2D>> = (0..t)
            .map(|_| sizes.iter().map(|&(h, w)| Grid2D::filled(h, w, d, 0.5)).collect())
            .collect();
        let m = build_memory(&grids, &EmbeddingTables::zeros(t, l, d)).unwrap();
        let expect: usize = t * sizes.iter().map(|(h, w)| h * w).sum::<usize>();
        assert_eq!(m.len(), expect);
        assert_eq!(m.tags.len(), expect);
    }
}

#[test]
fn decode_invariant_to_memory_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = ModelConfig::new(5, 8, 2, 3, 2);
    let mut params = ModelParams::init(4, &spec(), &cfg);
    randomize(&mut params.decoder, &mut rng);
    let s = QuerySet::new(Matrix::from_fn(5, 8, |_, _| rng.gen_range(-1.0..1.0)));
    let m = memory(&mut rng, 23, 8);
    let base = decode_queries(&s, &m, &params.decoder).unwrap();
    for _ in 0..10 {
        let mut order: Vec<usize> = (0..23).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = MemoryTokens {
            tokens: Matrix::from_fn(23, 8, |r, c| m.tokens.get(order[r], c)),
            tags: m.tags.clone(),
        };
        let out = decode_queries(&s, &shuffled, &params.decoder).unwrap();
        let diff = base.values().data().iter().zip(out.values().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "diff {diff}");
    }
}

// Independent re-expression of the pre-norm block with scalar loops.
fn ln(v: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    v.iter().enumerate().map(|(i, x)| (x - mean) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
}

fn vecmat(v: &[f64], m: &Matrix) -> Vec<f64> {
    (0..m.cols()).map(|j| (0..m.rows()).map(|i| v[i] * m.get(i, j)).sum()).collect()
}

fn oracle_decode(s: &Matrix, mem: &Matrix, p: &DecoderParams) -> Vec<Vec<f64>> {
    let d = s.cols();
    let dh = d / p.heads;
    let mut cur: Vec<Vec<f64>> = (0..s.rows()).map(|r| s.row(r).to_vec()).collect();
    for b in &p.blocks {
        let keys: Vec<Vec<f64>> = (0..mem.rows()).map(|i| vecmat(mem.row(i), &b.w_k)).collect();
        let vals: Vec<Vec<f64>> = (0..mem.rows()).map(|i| vecmat(mem.row(i), &b.w_v)).collect();
        for row in cur.iter_mut() {
            let q = vecmat(&ln(row, &b.norm1_gain, &b.norm1_bias), &b.w_q);
            let mut concat = vec![0.0; d];
            for h in 0..p.heads {
                let r = h * dh..(h + 1) * dh;
                let sc: Vec<f64> = keys
                    .iter()
                    .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = sc.iter().map(|x| (x - mx).exp()).sum();
                for (i, v) in vals.iter().enumerate() {
                    let w = (sc[i] - mx).exp() / z;
                    for c in r.clone() {
                        concat[c] += w * v[c];
                    }
                }
            }
            let o = vecmat(&concat, &b.w_o);
            let s1: Vec<f64> = row.iter().zip(&o).map(|(a, b)| a + b).collect();
            let hid: Vec<f64> = vecmat(&ln(&s1, &b.norm2_gain, &b.norm2_bias), &b.ff1)
                .iter()
                .zip(&b.ff1_bias)
                .map(|(x, bb)| {
                    let x = x + bb;
                    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
                })
                .collect();
            let ff = vecmat(&hid, &b.ff2);
            *row = s1.iter().zip(&ff).zip(&b.ff2_bias).map(|((a, f), bb)| a + f + bb).collect();
        }
    }
    cur
}

#[test]
fn two_block_decode_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = ModelConfig::new(3, 8, 2, 3, 2);
    let mut params = ModelParams::init(2, &spec(), &cfg);
    randomize(&mut params.decoder, &mut rng);
    let s = Matrix::from_fn(3, 8, |_, _| rng.gen_range(-1.0..1.0));
    let m = memory(&mut rng, 11, 8);
    let got = decode_queries(&QuerySet::new(s.clone()), &m, &params.decoder).unwrap();
    let want = oracle_decode(&s, &m.tokens, &params.decoder);
    for (r, row) in want.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((got.values().get(r, c) - v).abs() < 1e-10);
        }
    }
}

#[test]
fn single_query_head_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 4;
    let s = Matrix::from_fn(1, d, |_, _| rng.gen_range(-1.0..1.0));
    let proj = Matrix::from_fn(3, d, |_, _| rng.gen_range(-2.0..2.0));
    let p = Grid2D::new(2, 3, d, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let head = HeadParams { class_proj: proj.clone(), mask_scale: vec![0.7] };
    let y = predict_logits(&p, &QuerySet::new(s.clone()), &head).unwrap();

    let z: Vec<f64> = (0..3).map(|k| (0..d).map(|i| proj.get(k, i) * s.get(0, i)).sum()).collect();
    let zs: f64 = z.iter().map(|v| v.exp()).sum();
    for yy in 0..2 {
        for xx in 0..3 {
            let m = 0.7 * (0..d).map(|i| s.get(0, i) * p.get(yy, xx, i)).sum::<f64>();
            for k in 0..3 {
                assert!((y.get(k, yy, xx) - z[k].exp() / zs * m).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn head_invariant_to_query_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 6;
    let s = Matrix::from_fn(4, d, |_, _| rng.gen_range(-1.0..1.0));
    let head = HeadParams {
        class_proj: Matrix::from_fn(5, d, |_, _| rng.gen_range(-1.0..1.0)),
        mask_scale: vec![0.5, 1.0, 1.5, 2.0],
    };
    let p = Grid2D::new(3, 3, d, (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let base = predict_logits(&p, &QuerySet::new(s.clone()), &head).unwrap();
    let perm = [2usize, 0, 3, 1];
    let s2 = Matrix::from_fn(4, d, |r, c| s.get(perm[r], c));
    let head2 = HeadParams {
        class_proj: head.class_proj.clone(),
        mask_scale: perm.iter().map(|&q| head.mask_scale[q]).collect(),
    };
    let out = predict_logits(&p, &QuerySet::new(s2), &head2).unwrap();
    for (a, b) in base.data.iter().zip(&out.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fuse_of_constant_grids_is_normalized_sum() {
    let v1 = [1.0, -2.0, 0.5];
    let v2 = [0.25, 3.0, -1.0];
    let g1 = Grid2D::new(4, 4, 3, v1.repeat(16)).unwrap();
    let g2 = Grid2D::new(2, 2, 3, v2.repeat(4)).unwrap();
    let out = fuse_scales(&[g1, g2], &FuseParams::identity(2, 3)).unwrap();
    assert_eq!((out.height(), out.width()), (4, 4));
    let sum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
    let expect = ln(&sum, &[1.0; 3], &[0.0; 3]);
    for px in out.data().chunks_exact(3) {
        for (a, b) in px.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_frame_clip_equals_manual_pipeline() {
    let sp = spec();
    let params = ModelParams::init(5, &sp, &ModelConfig::new(3, 8, 2, 4, 3));
    let fr = frames(5, 1, &sp);
    let out = run_clip(&fr, &params).unwrap();
    let cond = condition_frame(&fr[0].rgb, &fr[0].depth, &params.query).unwrap();
    let mem = build_memory(std::slice::from_ref(&cond.features), &params.embeddings).unwrap();
    let s_bar = decode_queries(&params.query.queries, &mem, &params.decoder).unwrap();
    let p = fuse_scales(&cond.features, &params.fuse).unwrap();
    let y = predict_logits(&p, &s_bar, &params.decoder.head).unwrap();
    assert_eq!(out.logits.data, y.data);
}

#[test]
fn clip_output_shape_and_resize() {
    let sp = spec();
    let mut params = ModelParams::init(1, &sp, &ModelConfig::new(3, 8, 1, 4, 4));
    params.output_size = Some((8, 8));
    let out = run_clip(&frames(1, 3, &sp), &params).unwrap();
    assert_eq!(out.logits.dims(), [1, 3, 4, 8, 8]);
    assert!(out.logits.data.iter().all(|v| v.is_finite()));
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/run_clip_seed0.txt")
}

// Regression against a committed run; regenerate with STABLESEG_BLESS=1.
#[test]
fn run_clip_regression_seed0() {
    let sp = spec();
    let params = ModelParams::init(0, &sp, &ModelConfig::new(4, 8, 2, 3, 4));
    let out = run_clip(&frames(0, 3, &sp), &params).unwrap();
    let picks: Vec<usize> = (0..out.logits.data.len()).step_by(7).collect();
    let values: Vec<f64> = picks.iter().map(|&i| out.logits.data[i]).collect();
    if std::env::var_os("STABLESEG_BLESS").is_some() {
        let text: String = picks.iter().zip(&values).map(|(i, v)| format!("{i} {v:.17e}\n")).collect();
        std::fs::write(golden_path(), text).unwrap();
        return;
    }
    let text = std::fs::read_to_string(golden_path()).unwrap();
    let mut n = 0;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let i: usize = it.next().unwrap().parse().unwrap();
        let v: f64 = it.next().unwrap().parse().unwrap();
        assert!((out.logits.data[i] - v).abs() <= 1e-9 * v.abs().max(1.0), "index {i}");
        n += 1;
    }
    assert_eq!(n, picks.len());
}
