mod common;

use common::*;
use rand::Rng;
use rand_xoshiro::Xoshiro256StarStar;
use wglin::tensor::{finite_difference_check, Probes};
use wglin::{Graph, ParamStore, Tensor, TensorError, Var};

/// Random values at least 1e-4 away from zero, so relu kinks stay outside
/// the finite-difference stencil.
fn random_off_kink(shape: &[usize], r: &mut Xoshiro256StarStar) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = r.gen_range(-1.0..1.0);
        if v.abs() > 1e-4 {
            break v;
        }
    })
}

fn eval1(x: Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var, TensorError>) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

fn eval2(
    a: Tensor,
    b: Tensor,
    f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var, TensorError>,
) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let out = f(&mut g, va, vb)?;
    Ok(g.value(out).clone())
}

/// Gradient check of `sum(f(inputs) ⊙ r)` for a fixed random weighting `r`,
/// which exercises every output coordinate's gradient path.
fn grad_check(inputs: Vec<Tensor>, seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.into_iter().enumerate().map(|(i, t)| store.add(format!("in{i}"), t)).collect();
    let mut weights: Option<Tensor> = None;
    let report = finite_difference_check::<TensorError, _>(&mut store, Probes::All, 1e-5, |g, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let out = f(g, &vars)?;
        let shape = g.shape(out).to_vec();
        let w = weights.get_or_insert_with(|| random(&shape, &mut rng(seed))).clone();
        let wv = g.constant(w);
        let prod = g.mul(out, wv)?;
        g.sum_all(prod)
    })
    .unwrap();
    report.max_rel_err
}

#[test]
fn matmul_examples() {
    let id = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new([2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    assert_eq!(eval2(id, b.clone(), |g, a, b| g.matmul(a, b)).unwrap(), b);
    let row = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
    let col = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
    assert_eq!(eval2(row, col, |g, a, b| g.matmul(a, b)).unwrap().data(), &[11.0]);
    let err = eval2(Tensor::zeros([2, 3]), Tensor::zeros([2, 3]), |g, a, b| g.matmul(a, b)).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { .. }));
}

#[test]
fn matmul_matches_triple_loop_on_random_shapes() {
    let mut r = rng(1);
    for _ in 0..60 {
        let (m, k, n) = (r.gen_range(1..7), r.gen_range(1..7), r.gen_range(1..7));
        let (a, b) = (random(&[m, k], &mut r), random(&[k, n], &mut r));
        let got = eval2(a.clone(), b.clone(), |g, a, b| g.matmul(a, b)).unwrap();
        assert!(got.max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
    }
    // 3x4 by 4x2 example
    let (a, b) = (random(&[3, 4], &mut r), random(&[4, 2], &mut r));
    let got = eval2(a.clone(), b.clone(), |g, a, b| g.matmul(a, b)).unwrap();
    assert!(got.max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn batched_matmul_layouts_agree_with_per_matrix_oracle() {
    let mut r = rng(2);
    let a = random(&[3, 2, 4, 5], &mut r);
    let shared = random(&[5, 3], &mut r);
    let paired = random(&[3, 2, 5, 3], &mut r);
    let slice = |t: &Tensor, i: usize, rows: usize, cols: usize| {
        Tensor::new([rows, cols], t.data()[i * rows * cols..(i + 1) * rows * cols].to_vec()).unwrap()
    };
    let out_shared = eval2(a.clone(), shared.clone(), |g, a, b| g.matmul(a, b)).unwrap();
    let out_paired = eval2(a.clone(), paired.clone(), |g, a, b| g.matmul(a, b)).unwrap();
    let left = random(&[4, 5], &mut r);
    let out_left = eval2(left.clone(), paired.clone(), |g, a, b| g.matmul(a, b)).unwrap();
    assert_eq!(out_shared.shape(), &[3, 2, 4, 3]);
    for i in 0..6 {
        let ai = slice(&a, i, 4, 5);
        assert!(slice(&out_shared, i, 4, 3).max_abs_diff(&matmul_oracle(&ai, &shared)) < 1e-12);
        let bi = slice(&paired, i, 5, 3);
        assert!(slice(&out_paired, i, 4, 3).max_abs_diff(&matmul_oracle(&ai, &bi)) < 1e-12);
        assert!(slice(&out_left, i, 4, 3).max_abs_diff(&matmul_oracle(&left, &bi)) < 1e-12);
    }
    let e = eval2(random(&[2, 4, 5], &mut r), random(&[3, 5, 2], &mut r), |g, a, b| g.matmul(a, b));
    assert!(e.is_err());
}

#[test]
fn conv2d_examples() {
    let mut r = rng(3);
    let x = random(&[2, 3, 5, 4], &mut r);
    let k = Tensor::new([3, 3, 1, 1], (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let out = eval2(x.clone(), k, |g, x, k| g.conv2d(x, k, None, 1, 0)).unwrap();
    assert_eq!(out, x);

    let ones = Tensor::full([1, 1, 3, 3], 1.0);
    let out = eval2(ones.clone(), ones, |g, x, k| g.conv2d(x, k, None, 1, 0)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert_eq!(out.data(), &[9.0]);

    let err = eval2(Tensor::zeros([1, 1, 2, 2]), Tensor::zeros([1, 1, 3, 3]), |g, x, k| g.conv2d(x, k, None, 1, 0));
    assert!(matches!(err, Err(TensorError::DegenerateOutput { .. })));
    let err = eval2(Tensor::zeros([1, 2, 4, 4]), Tensor::zeros([1, 3, 3, 3]), |g, x, k| g.conv2d(x, k, None, 1, 0));
    assert!(matches!(err, Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    let mut r = rng(4);
    let x = random(&[1, 2, 5, 5], &mut r);
    let k = random(&[3, 2, 3, 3], &mut r);
    let got = eval2(x.clone(), k.clone(), |g, x, k| g.conv2d(x, k, None, 1, 0)).unwrap();
    assert!(got.max_abs_diff(&conv_oracle(&x, &k, 1, 0)) < 1e-12);
    for _ in 0..60 {
        let ks = [1, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..=ks / 2);
        let (b, cin, cout) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(ks..9), r.gen_range(ks..9));
        let x = random(&[b, cin, h, w], &mut r);
        let k = random(&[cout, cin, ks, ks], &mut r);
        let got = eval2(x.clone(), k.clone(), |g, x, k| g.conv2d(x, k, None, stride, pad)).unwrap();
        assert!(got.max_abs_diff(&conv_oracle(&x, &k, stride, pad)) < 1e-12);
    }
}

#[test]
fn depthwise_examples_and_oracle() {
    let mut r = rng(5);
    let x = random(&[2, 3, 5, 6], &mut r);
    let delta = Tensor::from_fn([3, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    assert_eq!(eval2(x.clone(), delta, |g, x, k| g.depthwise_conv2d(x, k, 1)).unwrap(), x);

    let ones =
        eval2(Tensor::full([1, 1, 4, 4], 1.0), Tensor::full([1, 3, 3], 1.0), |g, x, k| g.depthwise_conv2d(x, k, 1))
            .unwrap();
    assert_eq!(ones.at(&[0, 0, 0, 0]), 4.0);
    assert_eq!(ones.at(&[0, 0, 0, 1]), 6.0);
    assert_eq!(ones.at(&[0, 0, 1, 1]), 9.0);
    assert_eq!(ones.at(&[0, 0, 3, 3]), 4.0);

    let x = random(&[1, 4, 6, 6], &mut r);
    let k = random(&[4, 3, 3], &mut r);
    let got = eval2(x.clone(), k.clone(), |g, x, k| g.depthwise_conv2d(x, k, 1)).unwrap();
    assert!(got.max_abs_diff(&depthwise_oracle(&x, &k)) < 1e-12);
    for _ in 0..60 {
        let (b, c, h, w) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..8), r.gen_range(1..8));
        let x = random(&[b, c, h, w], &mut r);
        let k = if r.gen_bool(0.5) { random(&[c, 3, 3], &mut r) } else { random(&[b, c, 3, 3], &mut r) };
        let got = eval2(x.clone(), k.clone(), |g, x, k| g.depthwise_conv2d(x, k, 1)).unwrap();
        assert!(got.max_abs_diff(&depthwise_oracle(&x, &k)) < 1e-12);
    }
    // channel c depends only on channel c
    let mut x2 = x.clone();
    let plane = x2.shape()[2] * x2.shape()[3];
    x2.data_mut()[..plane].iter_mut().for_each(|v| *v += 1.0);
    let k = random(&[x.shape()[1], 3, 3], &mut r);
    let a = eval2(x.clone(), k.clone(), |g, x, k| g.depthwise_conv2d(x, k, 1)).unwrap();
    let b = eval2(x2, k, |g, x, k| g.depthwise_conv2d(x, k, 1)).unwrap();
    assert_eq!(a.data()[plane..], b.data()[plane..]);
    let err = eval2(Tensor::zeros([1, 2, 4, 4]), Tensor::zeros([3, 3, 3]), |g, x, k| g.depthwise_conv2d(x, k, 1));
    assert!(matches!(err, Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn softmax_examples() {
    let s = eval1(Tensor::new([2], vec![0.0, 0.0]).unwrap(), |g, x| g.softmax(x, 0)).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = eval1(Tensor::new([3], vec![1000.0; 3]).unwrap(), |g, x| g.softmax(x, 0)).unwrap();
    assert!(s.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let s = eval1(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), |g, x| g.softmax(x, 0)).unwrap();
    // p_i = 1 / Σ_j exp(j - i), each term exact to a few ulps
    let e1 = 1.0f64.exp();
    let e2 = 2.0f64.exp();
    let expected = [1.0 / (1.0 + e1 + e2), 1.0 / (1.0 / e1 + 1.0 + e1), 1.0 / (1.0 / e2 + 1.0 / e1 + 1.0)];
    for (a, b) in s.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
    let bad = eval1(Tensor::new([2], vec![f64::NAN, 0.0]).unwrap(), |g, x| g.softmax(x, 0));
    assert!(matches!(bad, Err(TensorError::NonFinite { .. })) || bad.is_err());
}

#[test]
fn softmax_slices_sum_to_one_under_large_magnitudes() {
    let mut r = rng(6);
    for axis in 0..3 {
        let x = Tensor::from_fn([3, 5, 4], |_| r.gen_range(-1e3..1e3));
        let s = eval1(x, |g, x| g.softmax(x, axis)).unwrap();
        let shape = s.shape().to_vec();
        let (outer, len, inner): (usize, usize, usize) =
            (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product());
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 = (0..len).map(|j| s.data()[(o * len + j) * inner + i]).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn small_op_examples() {
    let x = Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(eval1(x, |g, x| g.relu(x)).unwrap().data(), &[0.0, 0.0, 2.0]);
    let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(eval1(x, |g, x| g.maxpool2d(x, 2, 2, 0)).unwrap().data(), &[4.0]);

    let mut r = rng(7);
    let x = Tensor::from_fn([6, 10], |_| r.gen_range(-5.0..5.0));
    let y = eval1(x, |g, x| g.layer_norm(x, 1e-12)).unwrap();
    for row in y.data().chunks(10) {
        let mean = row.iter().sum::<f64>() / 10.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
    let mut g = Graph::new();
    assert!(matches!(g.concat(&[], 0), Err(TensorError::EmptyConcat)));
}

#[test]
fn maxpool_routes_gradient_to_first_maximum() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new([1, 1, 2, 2], vec![1.0, 4.0, 4.0, 2.0]).unwrap());
    let mut g = Graph::new();
    let x = g.param(&store, id);
    let y = g.maxpool2d(x, 2, 2, 0).unwrap();
    let l = g.sum_all(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let sq = g.mul(wv, wv).unwrap();
    let loss = g.sum_all(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wv).unwrap().data(), &[2.0, 4.0, 6.0]);
    // gradients accumulate
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wv).unwrap().data(), &[4.0, 8.0, 12.0]);
    g.accumulate_param_grads(&mut store);
    assert_eq!(store.grad(w).data(), &[4.0, 8.0, 12.0]);

    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let c = g.constant(Tensor::scalar(5.0));
    let zero = g.scale(wv, 0.0).unwrap();
    let s = g.sum_all(zero).unwrap();
    let loss = g.add(s, c).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wv).unwrap().data(), &[0.0, 0.0, 0.0]);

    assert!(matches!(g.backward(wv), Err(TensorError::NotScalar(_))));
    let mut other = Graph::new();
    assert!(matches!(other.backward(loss), Err(TensorError::DetachedTensor)));
}

#[test]
fn fan_out_accumulates_both_paths() {
    // y = x·a + x·b ⇒ dy/dx = a + b
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::new([2], vec![0.5, -1.5]).unwrap());
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    let a = g.scale(xv, 3.0).unwrap();
    let b = g.scale(xv, -7.0).unwrap();
    let sq = g.mul(xv, xv).unwrap();
    let ab = g.add(a, b).unwrap();
    let t = g.add(ab, sq).unwrap();
    let l = g.sum_all(t).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(xv).unwrap().data(), &[3.0 - 7.0 + 1.0, 3.0 - 7.0 - 3.0]);
}

#[test]
fn three_op_chain_matches_finite_differences() {
    let mut r = rng(8);
    let err = grad_check(vec![random(&[3, 4], &mut r), random(&[4, 2], &mut r)], 9, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let s = g.softmax(m, 1)?;
        g.scale(s, 2.5)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_op_passes_gradient_check() {
    let mut r = rng(10);
    let smooth = 1e-7;
    let cases: Vec<(&str, f64)> = vec![
        ("add", grad_check(vec![random(&[2, 3], &mut r), random(&[3], &mut r)], 1, |g, v| g.add(v[0], v[1]))),
        ("sub", grad_check(vec![random(&[2, 1, 3], &mut r), random(&[4, 1], &mut r)], 2, |g, v| g.sub(v[0], v[1]))),
        ("mul", grad_check(vec![random(&[2, 3], &mut r), random(&[2, 1], &mut r)], 3, |g, v| g.mul(v[0], v[1]))),
        (
            "matmul",
            grad_check(vec![random(&[2, 3, 4], &mut r), random(&[4, 2], &mut r)], 4, |g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_paired",
            grad_check(vec![random(&[2, 3, 4], &mut r), random(&[2, 4, 2], &mut r)], 5, |g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_left",
            grad_check(vec![random(&[3, 4], &mut r), random(&[2, 4, 2], &mut r)], 6, |g, v| g.matmul(v[0], v[1])),
        ),
        ("softmax", grad_check(vec![random(&[3, 4], &mut r)], 7, |g, v| g.softmax(v[0], 0))),
        ("layer_norm", grad_check(vec![random(&[3, 5], &mut r)], 8, |g, v| g.layer_norm(v[0], 1e-5))),
        (
            "conv2d",
            grad_check(
                vec![random(&[2, 2, 5, 5], &mut r), random(&[3, 2, 3, 3], &mut r), random(&[3], &mut r)],
                9,
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
            ),
        ),
        (
            "conv2d_1x1",
            grad_check(vec![random(&[2, 3, 3, 3], &mut r), random(&[2, 3, 1, 1], &mut r)], 10, |g, v| {
                g.conv2d(v[0], v[1], None, 1, 0)
            }),
        ),
        (
            "depthwise",
            grad_check(vec![random(&[2, 3, 4, 4], &mut r), random(&[2, 3, 3, 3], &mut r)], 11, |g, v| {
                g.depthwise_conv2d(v[0], v[1], 1)
            }),
        ),
        ("permute", grad_check(vec![random(&[2, 3, 4], &mut r)], 12, |g, v| g.permute(v[0], &[2, 0, 1]))),
        ("reshape", grad_check(vec![random(&[2, 6], &mut r)], 13, |g, v| g.reshape(v[0], &[3, 4]))),
        (
            "concat",
            grad_check(vec![random(&[2, 1, 3], &mut r), random(&[2, 2, 3], &mut r)], 14, |g, v| {
                g.concat(&[v[0], v[1]], 1)
            }),
        ),
        (
            "index_select",
            grad_check(vec![random(&[3, 4], &mut r)], 15, |g, v| g.index_select(v[0], 1, &[0, 3, 3, 1, 0])),
        ),
        ("sum_axis", grad_check(vec![random(&[3, 4, 2], &mut r)], 16, |g, v| g.sum_axis(v[0], 1))),
        ("mean_axis", grad_check(vec![random(&[3, 4, 2], &mut r)], 17, |g, v| g.mean_axis(v[0], 0))),
        ("mean_all", grad_check(vec![random(&[3, 4], &mut r)], 18, |g, v| g.mean_all(v[0]))),
    ];
    for (name, err) in cases {
        println!("{name}: {err:e}");
        assert!(err < smooth, "{name}: {err}");
    }
    let kinked = [
        ("relu", grad_check(vec![random_off_kink(&[4, 5], &mut r)], 19, |g, v| g.relu(v[0]))),
        ("maxpool2d", grad_check(vec![random(&[1, 2, 6, 6], &mut r)], 20, |g, v| g.maxpool2d(v[0], 3, 2, 1))),
    ];
    for (name, err) in kinked {
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn cross_entropy_examples() {
    let ce = |logits: Tensor, labels: &[usize]| {
        let mut g = Graph::new();
        let l = g.constant(logits);
        let loss = g.cross_entropy(l, labels)?;
        Ok::<f64, TensorError>(g.value(loss).item())
    };
    let uniform = ce(Tensor::zeros([2, 5]), &[0, 3]).unwrap();
    assert!((uniform - 5f64.ln()).abs() < 1e-12);
    let mut peaked = Tensor::zeros([1, 5]);
    peaked.data_mut()[2] = 30.0;
    assert!(ce(peaked, &[2]).unwrap() < 1e-9);
    assert!(matches!(ce(Tensor::zeros([1, 3]), &[3]), Err(TensorError::LabelOutOfRange { .. })));

    let mut r = rng(11);
    let logits = random(&[4, 3], &mut r);
    let labels = [0, 2, 1, 2];
    let got = ce(logits.clone(), &labels).unwrap();
    let mut expected = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data()[b * 3..b * 3 + 3];
        // -log p_y = log Σ exp(z_j - z_y), summing in ascending order
        let mut terms: Vec<f64> = row.iter().map(|z| (z - row[y]).exp()).collect();
        terms.sort_by(f64::total_cmp);
        expected += terms.iter().sum::<f64>().ln();
    }
    assert!((got - expected / 4.0).abs() < 1e-12);

    let err = grad_check(vec![random(&[4, 3], &mut r)], 12, |g, v| g.cross_entropy(v[0], &labels));
    assert!(err < 1e-7);
}

#[test]
fn graph_rejects_non_finite_outputs() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([2], vec![1e308, 1e308]).unwrap());
    assert!(matches!(g.add(x, x), Err(TensorError::NonFinite { .. })));
}
