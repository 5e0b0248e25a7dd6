//! Loop oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use wglin::data::MultiViewBatch;
use wglin::model::{CvfmStage1, CvfmStage2, ModelConfig};
use wglin::{ParamStore, Tensor};

pub fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

pub fn random(shape: &[usize], r: &mut Xoshiro256StarStar) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_batch(cfg: &ModelConfig, b: usize, seed: u64) -> MultiViewBatch {
    let mut r = rng(seed);
    let n = cfg.views * b;
    MultiViewBatch {
        views: cfg.views,
        images: Tensor::from_fn([n, cfg.image_channels, cfg.height, cfg.width], |_| r.gen()),
        lesions: Tensor::from_fn([n, cfg.lesion_channels, cfg.height, cfg.width], |_| {
            if r.gen_bool(0.1) {
                1.0
            } else {
                0.0
            }
        }),
        labels: (0..b).map(|i| i % cfg.num_classes).collect(),
        sample_ids: (0..b).map(|i| format!("s{i}")).collect(),
    }
}

pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn([m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let mut s = 0.0;
        for p in 0..k {
            s += a.at(&[i, p]) * b.at(&[p, j]);
        }
        s
    })
}

pub fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([b, cout, oh, ow]);
    for n in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.at(&[n, ci, iy as usize, ix as usize]) * k.at(&[co, ci, i, j]);
                                }
                            }
                        }
                    }
                    let o = out.offset(&[n, co, oy, ox]);
                    out.data_mut()[o] = s;
                }
            }
        }
    }
    out
}

pub fn depthwise_oracle(x: &Tensor, k: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros([b, c, h, w]);
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for i in 0..3 {
                        for j in 0..3 {
                            let iy = y as isize + i as isize - 1;
                            let ix = xx as isize + j as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                let kv = if k.rank() == 3 { k.at(&[ch, i, j]) } else { k.at(&[n, ch, i, j]) };
                                s += x.at(&[n, ch, iy as usize, ix as usize]) * kv;
                            }
                        }
                    }
                    let o = out.offset(&[n, ch, y, xx]);
                    out.data_mut()[o] = s;
                }
            }
        }
    }
    out
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Plain-loop `softmax(q kᵀ / √scale) v` for one head; all `[l, d]`.
pub fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qr| {
            let logits: Vec<f64> =
                k.iter().map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / scale.sqrt()).collect();
            let w = softmax(&logits);
            (0..v[0].len()).map(|c| w.iter().zip(v).map(|(wi, vr)| wi * vr[c]).sum()).collect()
        })
        .collect()
}

pub fn matvec_rows(x: &[Vec<f64>], w: &[f64], d_in: usize, d_out: usize) -> Vec<Vec<f64>> {
    x.iter().map(|r| (0..d_out).map(|o| (0..d_in).map(|i| r[i] * w[i * d_out + o]).sum()).collect()).collect()
}

pub fn mlp_rows(x: &[Vec<f64>], w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64], d: usize, h: usize) -> Vec<Vec<f64>> {
    let mut hid = matvec_rows(x, w1, d, h);
    for r in &mut hid {
        for (j, v) in r.iter_mut().enumerate() {
            *v = (*v + b1[j]).max(0.0);
        }
    }
    let mut out = matvec_rows(&hid, w2, h, d);
    for r in &mut out {
        for (j, v) in r.iter_mut().enumerate() {
            *v += b2[j];
        }
    }
    out
}

/// `x[v][b][l][d]` from a `[V, B, L, D]` tensor.
pub fn split4(t: &Tensor) -> Vec<Vec<Vec<Vec<f64>>>> {
    let s = t.shape();
    (0..s[0])
        .map(|v| {
            (0..s[1]).map(|b| (0..s[2]).map(|l| (0..s[3]).map(|d| t.at(&[v, b, l, d])).collect()).collect()).collect()
        })
        .collect()
}

pub fn flatten4(x: &[Vec<Vec<Vec<f64>>>]) -> Vec<f64> {
    x.iter().flatten().flatten().flatten().copied().collect()
}

pub fn stage1_oracle(store: &ParamStore, s1: &CvfmStage1, x: &Tensor) -> Vec<Vec<Vec<Vec<f64>>>> {
    let xs = split4(x);
    let (v, b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hd = d / s1.heads;
    let w = |id| store.value(id).data().to_vec();
    let (wq, wk, wv) = (w(s1.wq), w(s1.wk), w(s1.wv));
    let (w1, b1) = (w(s1.mlp.fc1.weight), w(s1.mlp.fc1.bias.unwrap()));
    let (w2, b2) = (w(s1.mlp.fc2.weight), w(s1.mlp.fc2.bias.unwrap()));
    let proj = |wm: &[f64], view: usize, sample: usize| {
        matvec_rows(&xs[view][sample], &wm[view * d * d..(view + 1) * d * d], d, d)
    };
    let mut out = vec![vec![vec![vec![0.0; d]; l]; b]; v];
    for i in 0..v {
        for j in 0..v {
            for s in 0..b {
                let (q, k, val) = (proj(&wq, i, s), proj(&wk, j, s), proj(&wv, j, s));
                let mut att = vec![vec![0.0; d]; l];
                for h in 0..s1.heads {
                    let cut =
                        |m: &Vec<Vec<f64>>| m.iter().map(|r| r[h * hd..(h + 1) * hd].to_vec()).collect::<Vec<_>>();
                    let o = attend(&cut(&q), &cut(&k), &cut(&val), s1.d_k as f64);
                    for r in 0..l {
                        att[r][h * hd..(h + 1) * hd].copy_from_slice(&o[r]);
                    }
                }
                let m = mlp_rows(&att, &w1, &b1, &w2, &b2, d, d);
                for r in 0..l {
                    for c in 0..d {
                        out[i][s][r][c] += m[r][c];
                    }
                }
            }
        }
    }
    out
}

pub fn stage2_oracle(store: &ParamStore, s2: &CvfmStage2, x: &Tensor) -> Vec<f64> {
    let xs = split4(x);
    let (v, b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let w = |id| store.value(id).data().to_vec();
    let q: Vec<Vec<f64>> = w(s2.query).chunks(d).map(<[f64]>::to_vec).collect();
    let (w1, b1, w2, b2) = (w(s2.w1), w(s2.b1), w(s2.w2), w(s2.b2));
    let mut out = vec![0.0; b * l * v * d];
    for s in 0..b {
        for i in 0..v {
            let att = attend(&q, &xs[i][s], &xs[i][s], d as f64);
            let cut = |m: &[f64], n: usize| m[i * n..(i + 1) * n].to_vec();
            let m = mlp_rows(&att, &cut(&w1, d * d), &cut(&b1, d), &cut(&w2, d * d), &cut(&b2, d), d, d);
            for r in 0..l {
                for c in 0..d {
                    out[(s * l + r) * v * d + i * d + c] = m[r][c];
                }
            }
        }
    }
    out
}
