use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, r)
}

/// Weighted sum with fixed random weights so every output element matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f32> = (0..g.value(y).len()).map(|_| r.random_range(-1.0..1.0)).collect();
    g.dot_const(y, w)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let a = rand_t(&[3, 3], &mut rng());
    let i = g.constant(Tensor::eye(3)).unwrap();
    let av = g.constant(a.clone()).unwrap();
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);

    let a = g.constant(Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap()).unwrap();
    let b = g.constant(Tensor::new([2, 1], vec![1., 1.]).unwrap()).unwrap();
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.data(y), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3])).unwrap();
    let b = g.constant(Tensor::zeros([2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng();
    let b = rand_t(&[7, 3], &mut r);
    let a = rand_t(&[5, 7], &mut r);
    let bb = b.clone();
    let err = grad_check(
        move |g, x| {
            let bv = g.constant(bb.clone())?;
            let y = g.matmul(x, bv)?;
            probe(g, y, 1)
        },
        &a,
    )
    .unwrap();
    assert!(err < 1e-3, "lhs rel err {err}");
    let err = grad_check(
        move |g, x| {
            let av = g.constant(a.clone())?;
            let y = g.matmul(av, x)?;
            probe(g, y, 2)
        },
        &b,
    )
    .unwrap();
    assert!(err < 1e-3, "rhs rel err {err}");
}

#[test]
fn large_matmul_agrees_with_naive_loop() {
    let mut r = rng();
    let (m, k, n) = (33, 70, 21);
    let a = rand_t(&[m, k], &mut r);
    let b = rand_t(&[n, k], &mut r);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let y = g.matmul_ex(av, bv, true).unwrap();
    for i in 0..m {
        for j in 0..n {
            let s: f32 = (0..k).map(|p| a.data()[i * k + p] * b.data()[j * k + p]).sum();
            assert!((g.data(y)[i * n + j] - s).abs() < 1e-4);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled([6], 0.3)).unwrap();
    let y = g.softmax(x, 0.5).unwrap();
    for &p in g.data(y) {
        assert!((p - 1.0 / 6.0).abs() < 1e-7);
    }
    let p_count = 768usize;
    let mut one_hot = vec![0.0; p_count];
    one_hot[0] = 1.0;
    let x = g.constant(Tensor::new([p_count], one_hot).unwrap()).unwrap();
    let y = g.softmax(x, 0.05).unwrap();
    let e20 = 20f64.exp();
    let expected = e20 / (e20 + (p_count - 1) as f64);
    assert!((g.data(y)[0] as f64 - expected).abs() < 1e-6);
    let sum: f32 = g.data(y).iter().sum();
    assert!((sum - 1.0).abs() < 1e-5);
}

#[test]
fn softmax_rejects_nonpositive_temperature() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([3])).unwrap();
    assert!(matches!(g.softmax(x, 0.0), Err(Error::Param(_))));
    assert!(matches!(g.softmax(x, -1.0), Err(Error::Param(_))));
}

#[test]
fn softmax_gradient() {
    let x = rand_t(&[4, 5], &mut rng());
    let err = grad_check(|g, x| { let y = g.softmax(x, 0.7)?; probe(g, y, 3) }, &x).unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn gradcheck_linear_sum_is_exact() {
    let x = rand_t(&[3, 4], &mut rng());
    let err = grad_check(|g, x| g.sum_all(x), &x).unwrap();
    assert!(err < 1e-3, "{err}");
    let mut g = Graph::new();
    let xv = g.leaf(x, true).unwrap();
    let y = g.sum_all(xv).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(xv).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn gradcheck_softmax_dot_constant() {
    let x = rand_t(&[8], &mut rng());
    let err = grad_check(|g, x| { let y = g.softmax(x, 1.0)?; probe(g, y, 4) }, &x).unwrap();
    assert!(err < 1e-3, "{err}");
}

/// Brute-force per-element multi-head attention.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, keep: &[bool], heads: usize) -> Vec<f32> {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dh = d / heads;
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        for i in 0..nq {
            let mut s = vec![f64::NEG_INFINITY; nk];
            for j in 0..nk {
                if keep[j] {
                    let mut dot = 0.0f64;
                    for p in 0..dh {
                        dot += q.data()[i * d + h * dh + p] as f64 * k.data()[j * d + h * dh + p] as f64;
                    }
                    s[j] = dot / (dh as f64).sqrt();
                }
            }
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for p in 0..dh {
                let mut acc = 0.0f64;
                for j in 0..nk {
                    acc += (s[j] - m).exp() / z * v.data()[j * d + h * dh + p] as f64;
                }
                out[i * d + h * dh + p] = acc as f32;
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_oracle() {
    let mut r = rng();
    let (q, k, v) = (rand_t(&[4, 8], &mut r), rand_t(&[6, 8], &mut r), rand_t(&[6, 8], &mut r));
    for keep in [vec![true; 6], vec![true, false, true, true, false, true]] {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap(), g.constant(v.clone()).unwrap());
        let (y, fb) = g.attention(qv, kv, vv, Some(&keep), 4).unwrap();
        assert_eq!(fb, vec![false]);
        let oracle = naive_attention(&q, &k, &v, &keep, 4);
        let err = g.data(y).iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-5, "{err}");
        let probs = g.attention_probs(y).unwrap();
        assert!(probs.iter().all(|&p| p >= 0.0));
        for (j, &kp) in keep.iter().enumerate() {
            if !kp {
                assert!(probs.chunks(6).all(|row| row[j] == 0.0));
            }
        }
    }
}

#[test]
fn attention_single_key_and_symmetric_keys() {
    let mut r = rng();
    let mut g = Graph::new();
    let q = g.constant(rand_t(&[3, 8], &mut r)).unwrap();
    let kv = rand_t(&[1, 8], &mut r);
    let k = g.constant(kv.clone()).unwrap();
    let (y, _) = g.attention(q, k, k, None, 4).unwrap();
    for row in g.value(y).data().chunks(8) {
        assert!(row.iter().zip(kv.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
    let two = Tensor::new([2, 8], [kv.data(), kv.data()].concat()).unwrap();
    let k2 = g.constant(two).unwrap();
    let (y, _) = g.attention(q, k2, k2, None, 2).unwrap();
    assert!(g.attention_probs(y).unwrap().iter().all(|&p| (p - 0.5).abs() < 1e-6));
}

#[test]
fn attention_all_masked_falls_back_to_zeros() {
    let mut r = rng();
    let mut g = Graph::new();
    let q = g.constant(rand_t(&[2, 1, 4], &mut r)).unwrap();
    let k = g.constant(rand_t(&[2, 3, 4], &mut r)).unwrap();
    let keep = [true, false, false, false, false, false];
    let (y, fb) = g.attention(q, k, k, Some(&keep), 2).unwrap();
    assert_eq!(fb, vec![false, true]);
    assert!(g.data(y)[4..].iter().all(|&v| v == 0.0));
}

#[test]
fn attention_gradients() {
    let mut r = rng();
    let (q, k, v) = (rand_t(&[2, 3, 8], &mut r), rand_t(&[2, 5, 8], &mut r), rand_t(&[2, 5, 8], &mut r));
    let keep: Vec<bool> = (0..10).map(|i| i % 4 != 1).collect();
    let (k1, v1, keep1) = (k.clone(), v.clone(), keep.clone());
    let err = grad_check(
        move |g, x| {
            let (kk, vv) = (g.constant(k1.clone())?, g.constant(v1.clone())?);
            let (y, _) = g.attention(x, kk, vv, Some(&keep1), 2)?;
            probe(g, y, 5)
        },
        &q,
    )
    .unwrap();
    assert!(err < 1e-3, "dq {err}");
    let (q2, v2, keep2) = (q.clone(), v.clone(), keep.clone());
    let err = grad_check(
        move |g, x| {
            let (qq, vv) = (g.constant(q2.clone())?, g.constant(v2.clone())?);
            let (y, _) = g.attention(qq, x, vv, Some(&keep2), 2)?;
            probe(g, y, 6)
        },
        &k,
    )
    .unwrap();
    assert!(err < 1e-3, "dk {err}");
    let err = grad_check(
        move |g, x| {
            let (qq, kk) = (g.constant(q.clone())?, g.constant(k.clone())?);
            let (y, _) = g.attention(qq, kk, x, Some(&keep), 2)?;
            probe(g, y, 7)
        },
        &v,
    )
    .unwrap();
    assert!(err < 1e-3, "dv {err}");
}

fn grid_map() -> Tensor {
    // value at (y, x, d) = 10y + x + 100d
    Tensor::from_fn([4, 5, 2], |i| {
        let (y, x, d) = (i / 10, (i / 2) % 5, i % 2);
        (10 * y + x + 100 * d) as f32
    })
}

#[test]
fn bilinear_examples() {
    let mut g = Graph::new();
    let m = g.constant(grid_map()).unwrap();
    let pts = g.constant(Tensor::new([3, 2], vec![3.0, 2.0, 0.5, 0.0, -5.0, -5.0]).unwrap()).unwrap();
    let y = g.bilinear_sample(m, pts).unwrap();
    // (x=3, y=2) is a grid node
    assert_eq!(&g.data(y)[0..2], &[23.0, 123.0]);
    // midpoint between (0,0) and (0,1)
    assert_eq!(&g.data(y)[2..4], &[0.5, 100.5]);
    // clamp
    assert_eq!(&g.data(y)[4..6], &[0.0, 100.0]);
}

#[test]
fn bilinear_gradients_wrt_map_and_points() {
    let mut r = rng();
    let map = rand_t(&[4, 5, 3], &mut r);
    let pts = Tensor::new([3, 2], vec![1.3, 2.6, 3.7, 0.2, 0.45, 1.55]).unwrap();
    let p1 = pts.clone();
    let err = grad_check(
        move |g, x| {
            let p = g.constant(p1.clone())?;
            let y = g.bilinear_sample(x, p)?;
            probe(g, y, 8)
        },
        &map,
    )
    .unwrap();
    assert!(err < 1e-3, "map {err}");
    let err = grad_check(
        move |g, x| {
            let m = g.constant(map.clone())?;
            let y = g.bilinear_sample(m, x)?;
            probe(g, y, 9)
        },
        &pts,
    )
    .unwrap();
    assert!(err < 1e-3, "points {err}");
}

fn check_unary(f: impl Fn(&mut Graph, Var) -> crate::Result<Var> + Copy, seed: u64) {
    let x = rand_t(&[3, 5], &mut ChaCha8Rng::seed_from_u64(seed));
    let err = grad_check(move |g, x| { let y = f(g, x)?; probe(g, y, seed + 1000) }, &x).unwrap();
    assert!(err < 1e-3, "seed {seed}: {err}");
}

#[test]
fn primitive_gradients() {
    check_unary(|g, x| g.gelu(x), 10);
    check_unary(|g, x| g.tanh(x), 11);
    check_unary(|g, x| g.sigmoid(x), 12);
    check_unary(|g, x| g.normalize_rows(x), 13);
    check_unary(|g, x| g.transpose(x), 14);
    check_unary(|g, x| g.scale(x, -2.5), 15);
    check_unary(|g, x| g.slice_last(x, 1, 3), 16);
    check_unary(|g, x| g.slice_rows(x, 1, 2), 17);
    check_unary(|g, x| g.gather_rows(x, vec![2, 0, 2]), 18);
    check_unary(|g, x| { let y = g.reshape(x, [5, 3])?; g.transpose(y) }, 19);
    check_unary(|g, x| { let a = g.tanh(x)?; g.mul(a, x) }, 20);
    check_unary(|g, x| { let a = g.sigmoid(x)?; let b = g.sub(x, a)?; g.add(b, x) }, 21);
    check_unary(|g, x| { let a = g.slice_last(x, 0, 2)?; g.concat_last(&[x, a]) }, 22);
    check_unary(|g, x| { let a = g.slice_rows(x, 0, 1)?; g.concat_rows(&[a, x]) }, 23);
    check_unary(|g, x| { let s = g.slice_last(x, 0, 1)?; let s = g.slice_rows(s, 0, 1)?; g.scale_by(x, s) }, 24);
    check_unary(|g, x| { let r = g.reshape(x, [3, 5, 1])?; let w = g.sigmoid(x)?; g.weighted_sum(w, r) }, 25);
    check_unary(|g, x| { let a = g.gelu(x)?; let idx = vec![Some((0, 1)), None, Some((1, 2)), Some((0, 0))]; g.gather_rows_multi(&[x, a], idx, 5) }, 26);
}

#[test]
fn layer_norm_and_affine_gradients() {
    let mut r = rng();
    let x = rand_t(&[4, 6], &mut r);
    let (gm, bt) = (rand_t(&[6], &mut r), rand_t(&[6], &mut r));
    let (w, b) = (rand_t(&[6, 3], &mut r), rand_t(&[3], &mut r));
    let (gm1, bt1) = (gm.clone(), bt.clone());
    let err = grad_check(
        move |g, x| {
            let (a, c) = (g.constant(gm1.clone())?, g.constant(bt1.clone())?);
            let y = g.layer_norm(x, a, c)?;
            probe(g, y, 30)
        },
        &x,
    )
    .unwrap();
    assert!(err < 1e-3, "ln x {err}");
    let x1 = x.clone();
    let err = grad_check(
        move |g, gamma| {
            let (xx, c) = (g.constant(x1.clone())?, g.constant(bt.clone())?);
            let y = g.layer_norm(xx, gamma, c)?;
            probe(g, y, 31)
        },
        &gm,
    )
    .unwrap();
    assert!(err < 1e-3, "ln gamma {err}");
    let (x2, b2) = (x.clone(), b.clone());
    let err = grad_check(
        move |g, w| {
            let (xx, bb) = (g.constant(x2.clone())?, g.constant(b2.clone())?);
            let y = g.affine(xx, w, Some(bb))?;
            probe(g, y, 32)
        },
        &w,
    )
    .unwrap();
    assert!(err < 1e-3, "affine w {err}");
    let err = grad_check(
        move |g, bb| {
            let (xx, ww) = (g.constant(x.clone())?, g.constant(w.clone())?);
            let y = g.affine(xx, ww, None)?;
            let y = g.add_bias(y, bb)?;
            probe(g, y, 33)
        },
        &b,
    )
    .unwrap();
    assert!(err < 1e-3, "bias {err}");
}

#[test]
fn conv_and_upsample_gradients() {
    let mut r = rng();
    let x = rand_t(&[6, 8, 2], &mut r);
    let w = rand_t(&[3 * 3 * 2, 4], &mut r);
    let w1 = w.clone();
    let err = grad_check(
        move |g, x| {
            let ww = g.constant(w1.clone())?;
            let y = g.conv2d(x, ww, None, 3, 2, 1)?;
            probe(g, y, 40)
        },
        &x,
    )
    .unwrap();
    assert!(err < 1e-3, "conv x {err}");
    let x1 = x.clone();
    let err = grad_check(
        move |g, w| {
            let xx = g.constant(x1.clone())?;
            let y = g.conv2d(xx, w, None, 3, 2, 1)?;
            probe(g, y, 41)
        },
        &w,
    )
    .unwrap();
    assert!(err < 1e-3, "conv w {err}");
    let small = rand_t(&[3, 4, 2], &mut r);
    let err = grad_check(|g, x| { let y = g.upsample_nearest(x, 2)?; probe(g, y, 42) }, &small).unwrap();
    assert!(err < 1e-3, "nearest {err}");
    let err = grad_check(|g, x| { let y = g.upsample_bilinear(x, 2)?; probe(g, y, 43) }, &small).unwrap();
    assert!(err < 1e-3, "bilinear up {err}");
}

#[test]
fn conv_shape_law() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([96, 128, 3])).unwrap();
    let w = g.constant(Tensor::zeros([8 * 8 * 3, 16])).unwrap();
    let y = g.conv2d(x, w, None, 8, 4, 2).unwrap();
    assert_eq!(g.shape(y), &[24, 32, 16]);
}

#[test]
fn upsample_bilinear_constant_is_constant() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled([3, 4, 2], 1.5)).unwrap();
    let y = g.upsample_bilinear(x, 2).unwrap();
    assert_eq!(g.shape(y), &[6, 8, 2]);
    assert!(g.data(y).iter().all(|&v| (v - 1.5).abs() < 1e-6));
}

#[test]
fn loss_gradients() {
    let mut r = rng();
    let logits = rand_t(&[3, 5], &mut r);
    let err = grad_check(|g, x| { let y = g.cross_entropy(x, vec![0, 4, 2])?; probe(g, y, 50) }, &logits).unwrap();
    assert!(err < 1e-3, "ce {err}");
    let err = grad_check(
        |g, x| { let y = g.bce_with_logits(x, (0..15).map(|i| (i % 2) as f32).collect())?; probe(g, y, 51) },
        &logits,
    )
    .unwrap();
    assert!(err < 1e-3, "bce {err}");
    let target: Vec<f32> = (0..15).map(|i| if i % 3 == 0 { 5.0 } else { 0.3 }).collect();
    let err = grad_check(move |g, x| { let y = g.l1_clipped(x, target.clone(), 2.0)?; probe(g, y, 52) }, &logits).unwrap();
    assert!(err < 1e-3, "l1 {err}");
}

#[test]
fn l1_clip_bounds_each_term() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new([3], vec![0.0, 10.0, -10.0]).unwrap()).unwrap();
    let y = g.l1_clipped(p, vec![1.0, 0.0, 0.0], 4.0).unwrap();
    assert_eq!(g.data(y), &[1.0, 4.0, 4.0]);
}

#[test]
fn non_finite_is_an_error() {
    let mut g = Graph::new();
    assert!(matches!(g.leaf(Tensor::filled([2], f32::NAN), false), Err(Error::Numeric(_))));
    let x = g.constant(Tensor::filled([2], 1e30)).unwrap();
    assert!(matches!(g.mul(x, x), Err(Error::Numeric(_))));
}

#[test]
fn deterministic_across_runs() {
    let run = || {
        let mut r = rng();
        let mut g = Graph::new();
        let q = g.constant(rand_t(&[16, 32], &mut r)).unwrap();
        let k = g.constant(rand_t(&[100, 32], &mut r)).unwrap();
        let (y, _) = g.attention(q, k, k, None, 4).unwrap();
        let z = g.gelu(y).unwrap();
        g.value(z).clone()
    };
    assert_eq!(run().data(), run().data());
}
