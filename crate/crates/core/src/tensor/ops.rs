//! Differentiable operations. Each op computes its output eagerly and
//! records a closure that maps the output gradient to input gradients.

use super::kernels::{self, ConvGeom};
use super::{shape_err, split_at_axis, Graph, Result, Tensor, TensorError, Var};

/// Largest per-sample loss reported by [`Graph::cross_entropy`]; `-ln(1e-12)`.
const CE_LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn scatter_add(map: &Option<Vec<usize>>, grad: &[f64], len: usize, weight: impl Fn(usize) -> f64) -> Vec<f64> {
    match map {
        None => grad.iter().enumerate().map(|(i, g)| g * weight(i)).collect(),
        Some(map) => {
            let mut out = vec![0.0; len];
            for (i, (&m, g)) in map.iter().zip(grad).enumerate() {
                out[m] += g * weight(i);
            }
            out
        }
    }
}

impl Graph {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let out_shape = kernels::broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let amap = (sa != out_shape).then(|| kernels::broadcast_map(&sa, &out_shape));
        let bmap = (sb != out_shape).then(|| kernels::broadcast_map(&sb, &out_shape));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out_shape.iter().product();
        let at = |i: usize| amap.as_ref().map_or(i, |m| m[i]);
        let bt = |i: usize| bmap.as_ref().map_or(i, |m| m[i]);
        let data: Vec<f64> = (0..numel)
            .map(|i| {
                let (x, y) = (va[at(i)], vb[bt(i)]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(out_shape, data)?;
        let (na, nb) = (sa.iter().product::<usize>(), sb.iter().product::<usize>());
        self.push_op(
            name,
            &[a, b],
            value,
            Box::new(move |args| {
                let g = args.grad;
                let (va, vb) = (args.inputs[0].data(), args.inputs[1].data());
                let at = |i: usize| amap.as_ref().map_or(i, |m| m[i]);
                let bt = |i: usize| bmap.as_ref().map_or(i, |m| m[i]);
                let ga = args.needs[0].then(|| match kind {
                    Binary::Add | Binary::Sub => scatter_add(&amap, g, na, |_| 1.0),
                    Binary::Mul => scatter_add(&amap, g, na, |i| vb[bt(i)]),
                });
                let gb = args.needs[1].then(|| match kind {
                    Binary::Add => scatter_add(&bmap, g, nb, |_| 1.0),
                    Binary::Sub => scatter_add(&bmap, g, nb, |_| -1.0),
                    Binary::Mul => scatter_add(&bmap, g, nb, |i| va[at(i)]),
                });
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect())?;
        self.push_op(
            "scale",
            &[a],
            value,
            Box::new(move |args| vec![Some(args.grad.iter().map(|g| g * factor).collect())]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x.max(0.0)).collect())?;
        self.push_op(
            "relu",
            &[a],
            value,
            Box::new(|args| {
                let x = args.inputs[0].data();
                // relu'(0) = 0
                vec![Some(args.grad.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }),
        )
    }

    /// Batched matrix product `[..., m, k] × [..., k, n]`. Leading extents must
    /// match, or one operand must be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be at least 2-D: {sa:?} × {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner extents differ: {sa:?} × {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        // Batch layout: `Shared` folds a's batch into rows against one matrix b.
        #[derive(Clone, Copy)]
        enum Layout {
            Shared,
            LeftShared(usize),
            Paired(usize),
        }
        let (layout, mut out_shape) = if bb.is_empty() {
            (Layout::Shared, ba.to_vec())
        } else if ba.is_empty() {
            (Layout::LeftShared(bb.iter().product()), bb.to_vec())
        } else if ba == bb {
            (Layout::Paired(ba.iter().product()), ba.to_vec())
        } else {
            return Err(shape_err("matmul", format!("batch extents differ: {sa:?} × {sb:?}")));
        };
        out_shape.extend([m, n]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; out_shape.iter().product()];
        match layout {
            Layout::Shared => kernels::gemm_nn(va.len() / k, k, n, va, vb, &mut out),
            Layout::LeftShared(batch) => {
                for i in 0..batch {
                    kernels::gemm_nn(m, k, n, va, &vb[i * k * n..], &mut out[i * m * n..(i + 1) * m * n]);
                }
            }
            Layout::Paired(batch) => {
                for i in 0..batch {
                    kernels::gemm_nn(m, k, n, &va[i * m * k..], &vb[i * k * n..], &mut out[i * m * n..(i + 1) * m * n]);
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push_op(
            "matmul",
            &[a, b],
            value,
            Box::new(move |args| {
                let (va, vb, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
                let mut ga = args.needs[0].then(|| vec![0.0; va.len()]);
                let mut gb = args.needs[1].then(|| vec![0.0; vb.len()]);
                match layout {
                    Layout::Shared => {
                        let rows = va.len() / k;
                        if let Some(ga) = ga.as_mut() {
                            kernels::gemm_nt(rows, n, k, g, vb, ga);
                        }
                        if let Some(gb) = gb.as_mut() {
                            kernels::gemm_tn(rows, k, n, va, g, gb);
                        }
                    }
                    Layout::LeftShared(batch) | Layout::Paired(batch) => {
                        let shared = matches!(layout, Layout::LeftShared(_));
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ao = if shared { 0 } else { i * m * k };
                            if let Some(ga) = ga.as_mut() {
                                kernels::gemm_nt(m, n, k, gi, &vb[i * k * n..], &mut ga[ao..ao + m * k]);
                            }
                            if let Some(gb) = gb.as_mut() {
                                kernels::gemm_tn(m, k, n, &va[ao..], gi, &mut gb[i * k * n..(i + 1) * k * n]);
                            }
                        }
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push_op("reshape", &[a], value, Box::new(|args| vec![Some(args.grad.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let map = kernels::permute_map(&shape, perm);
        let src = self.value(a).data();
        let data = map.iter().map(|&o| src[o]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push_op(
            "permute",
            &[a],
            value,
            Box::new(move |args| {
                let mut g = vec![0.0; args.grad.len()];
                for (&o, &gv) in map.iter().zip(args.grad) {
                    g[o] = gv;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        for &p in parts {
            self.check(p)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} incompatible with {base:?} along axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        self.push_op(
            "concat",
            parts,
            value,
            Box::new(move |args| {
                let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&args.grad[pos..pos + len * inner]);
                        pos += len * inner;
                    }
                }
                grads.into_iter().zip(args.needs).map(|(g, &n)| n.then_some(g)).collect()
            }),
        )
    }

    /// Gathers slices along `axis`; indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("index_select", format!("axis {axis} out of range for {shape:?}")));
        }
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(shape_err("index_select", format!("indices {indices:?} invalid for extent {}", shape[axis])));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * len + i) * inner;
                out.extend_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let value = Tensor::new(out_shape, out)?;
        let indices = indices.to_vec();
        self.push_op(
            "index_select",
            &[a],
            value,
            Box::new(move |args| {
                let mut g = vec![0.0; outer * len * inner];
                let mut pos = 0;
                for o in 0..outer {
                    for &i in &indices {
                        let d = (o * len + i) * inner;
                        kernels::axpy(1.0, &args.grad[pos..pos + inner], &mut g[d..d + inner]);
                        pos += inner;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, 1.0, "sum_axis")
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len =
            *self.shape(a).get(axis).ok_or_else(|| shape_err("mean_axis", format!("axis {axis} out of range")))?;
        self.reduce_axis(a, axis, 1.0 / len as f64, "mean_axis")
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, factor: f64, op: &'static str) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..len {
                let s = (o * len + j) * inner;
                kernels::axpy(1.0, &src[s..s + inner], dst);
            }
            dst.iter_mut().for_each(|v| *v *= factor);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.push_op(
            op,
            &[a],
            value,
            Box::new(move |args| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &args.grad[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        let d = (o * len + j) * inner;
                        g[d..d + inner].iter_mut().zip(src).for_each(|(x, s)| *x = s * factor);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push_op("sum_all", &[a], value, Box::new(|args| vec![Some(vec![args.grad[0]; args.inputs[0].numel()])]))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis` (max subtracted per slice).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push_op(
            "softmax",
            &[a],
            value,
            Box::new(move |args| {
                let (y, g) = (args.output.data(), args.grad);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let s: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// variance (population variance plus `eps`). No affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        let n = *v.shape().last().ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
        let mut out = v.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n);
        for row in out.chunks_exact_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * r);
            rstd.push(r);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push_op(
            "layer_norm",
            &[a],
            value,
            Box::new(move |args| {
                let y = args.output.data();
                let mut gx = vec![0.0; y.len()];
                for (r, ((gy, yy), gxr)) in
                    rstd.iter().zip(args.grad.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)))
                {
                    let mg = gy.iter().sum::<f64>() / n as f64;
                    let mgy = kernels::dot(gy, yy) / n as f64;
                    for ((o, g), y) in gxr.iter_mut().zip(gy).zip(yy) {
                        *o = r * (g - mg - y * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// 2D cross-correlation (no kernel flip) of `x: [B, Cin, H, W]` with
    /// `k: [Cout, Cin, kh, kw]`, optional per-channel `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(k)?;
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(shape_err("conv2d", format!("input {sx:?} vs kernel {sk:?}")));
        }
        let (batch, cout) = (sx[0], sk[0]);
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sk[2], sk[3], stride, pad).ok_or_else(|| {
            TensorError::DegenerateOutput {
                op: "conv2d",
                detail: format!("input {sx:?}, kernel {sk:?}, stride {stride}, pad {pad}"),
            }
        })?;
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {cout} output channels", self.shape(b))));
            }
        }
        let (rows, ol) = (geom.col_rows(), geom.out_len());
        let in_len = geom.channels * geom.height * geom.width;
        let (vx, vk) = (self.value(x).data(), self.value(k).data());
        let vb = bias.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; batch * cout * ol];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * ol] };
        for b in 0..batch {
            let img = &vx[b * in_len..(b + 1) * in_len];
            let dst = &mut out[b * cout * ol..(b + 1) * cout * ol];
            if let Some(bv) = &vb {
                for (row, &bias) in dst.chunks_exact_mut(ol).zip(bv) {
                    row.fill(bias);
                }
            }
            if geom.is_pointwise() {
                kernels::gemm_nn(cout, rows, ol, vk, img, dst);
            } else {
                kernels::im2col(&geom, img, &mut cols);
                kernels::gemm_nn(cout, rows, ol, vk, &cols, dst);
            }
        }
        let value = Tensor::new(vec![batch, cout, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        self.push_op(
            "conv2d",
            &inputs,
            value,
            Box::new(move |args| {
                let (vx, vk, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
                let mut gx = args.needs[0].then(|| vec![0.0; vx.len()]);
                let mut gk = args.needs[1].then(|| vec![0.0; vk.len()]);
                let mut gb = args.needs.get(2).copied().unwrap_or(false).then(|| vec![0.0; cout]);
                let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * ol }];
                let mut dcols = vec![0.0; if gx.is_some() && !geom.is_pointwise() { rows * ol } else { 0 }];
                for b in 0..batch {
                    let img = &vx[b * in_len..(b + 1) * in_len];
                    let gb_out = &g[b * cout * ol..(b + 1) * cout * ol];
                    if let Some(gb) = gb.as_mut() {
                        for (acc, row) in gb.iter_mut().zip(gb_out.chunks_exact(ol)) {
                            *acc += row.iter().sum::<f64>();
                        }
                    }
                    if geom.is_pointwise() {
                        if let Some(gk) = gk.as_mut() {
                            kernels::gemm_nt(cout, ol, rows, gb_out, img, gk);
                        }
                        if let Some(gx) = gx.as_mut() {
                            kernels::gemm_tn(cout, rows, ol, vk, gb_out, &mut gx[b * in_len..(b + 1) * in_len]);
                        }
                        continue;
                    }
                    if let Some(gk) = gk.as_mut() {
                        kernels::im2col(&geom, img, &mut cols);
                        kernels::gemm_nt(cout, ol, rows, gb_out, &cols, gk);
                    }
                    if let Some(gx) = gx.as_mut() {
                        dcols.fill(0.0);
                        kernels::gemm_tn(cout, rows, ol, vk, gb_out, &mut dcols);
                        kernels::col2im(&geom, &dcols, &mut gx[b * in_len..(b + 1) * in_len]);
                    }
                }
                let mut grads = vec![gx, gk];
                if args.needs.len() == 3 {
                    grads.push(gb);
                }
                grads
            }),
        )
    }

    /// Per-channel convolution with stride 1. `k` is either `[C, kh, kw]`
    /// (shared by the batch) or `[B, C, kh, kw]` (one kernel set per sample).
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(k)?;
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 {
            return Err(shape_err("depthwise_conv2d", format!("input must be [B, C, H, W], got {sx:?}")));
        }
        let (batch, ch, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let per_sample = match sk.len() {
            3 if sk[0] == ch => false,
            4 if sk[0] == batch && sk[1] == ch => true,
            _ => return Err(shape_err("depthwise_conv2d", format!("kernel {sk:?} for input {sx:?}"))),
        };
        let (kh, kw) = (sk[sk.len() - 2], sk[sk.len() - 1]);
        let geom = ConvGeom::new(ch, h, w, kh, kw, 1, pad).ok_or_else(|| TensorError::DegenerateOutput {
            op: "depthwise_conv2d",
            detail: format!("input {sx:?}, kernel {sk:?}"),
        })?;
        let (oh, ow) = (geom.out_h, geom.out_w);
        let (vx, vk) = (self.value(x).data(), self.value(k).data());
        let mut out = vec![0.0; batch * ch * oh * ow];
        let kernel_at = move |b: usize, c: usize| if per_sample { (b * ch + c) * kh * kw } else { c * kh * kw };
        for b in 0..batch {
            for c in 0..ch {
                let plane = &vx[(b * ch + c) * h * w..(b * ch + c + 1) * h * w];
                let kern = &vk[kernel_at(b, c)..kernel_at(b, c) + kh * kw];
                let dst = &mut out[(b * ch + c) * oh * ow..(b * ch + c + 1) * oh * ow];
                for_each_tap(h, w, oh, ow, kh, kw, pad, |oy, iy, ox0, ix0, n, tap| {
                    let wv = kern[tap];
                    let src = &plane[iy * w + ix0..iy * w + ix0 + n];
                    kernels::axpy(wv, src, &mut dst[oy * ow + ox0..oy * ow + ox0 + n]);
                });
            }
        }
        let value = Tensor::new(vec![batch, ch, oh, ow], out)?;
        self.push_op(
            "depthwise_conv2d",
            &[x, k],
            value,
            Box::new(move |args| {
                let (vx, vk, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
                let mut gx = args.needs[0].then(|| vec![0.0; vx.len()]);
                let mut gk = args.needs[1].then(|| vec![0.0; vk.len()]);
                for b in 0..batch {
                    for c in 0..ch {
                        let p0 = (b * ch + c) * h * w;
                        let o0 = (b * ch + c) * oh * ow;
                        let k0 = kernel_at(b, c);
                        for_each_tap(h, w, oh, ow, kh, kw, pad, |oy, iy, ox0, ix0, n, tap| {
                            let go = &g[o0 + oy * ow + ox0..o0 + oy * ow + ox0 + n];
                            if let Some(gx) = gx.as_mut() {
                                kernels::axpy(vk[k0 + tap], go, &mut gx[p0 + iy * w + ix0..p0 + iy * w + ix0 + n]);
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk[k0 + tap] += kernels::dot(go, &vx[p0 + iy * w + ix0..p0 + iy * w + ix0 + n]);
                            }
                        });
                    }
                }
                vec![gx, gk]
            }),
        )
    }

    /// Max pooling with implicit `-inf` padding. The gradient goes to the
    /// first maximal element of each window in row-major scan order.
    pub fn maxpool2d(&mut self, x: Var, size: usize, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("maxpool2d", format!("input must be [B, C, H, W], got {sx:?}")));
        }
        let (planes, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let geom = ConvGeom::new(1, h, w, size, size, stride, pad).filter(|_| pad < size).ok_or_else(|| {
            TensorError::DegenerateOutput { op: "maxpool2d", detail: format!("input {sx:?}, window {size}, pad {pad}") }
        })?;
        let (oh, ow) = (geom.out_h, geom.out_w);
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &vx[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for ki in 0..size {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..size {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let o = iy as usize * w + ix as usize;
                            if plane[o] > best || at == usize::MAX {
                                best = plane[o];
                                at = o;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(p * h * w + at);
                }
            }
        }
        let value = Tensor::new(vec![sx[0], sx[1], oh, ow], out)?;
        self.push_op(
            "maxpool2d",
            &[x],
            value,
            Box::new(move |args| {
                let mut g = vec![0.0; args.inputs[0].numel()];
                for (&i, &gv) in argmax.iter().zip(args.grad) {
                    g[i] += gv;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean cross-entropy of `logits: [B, C]` against integer labels. Each
    /// per-sample term is `-ln(max(p_y, 1e-12))`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", format!("logits {s:?} for {} labels", labels.len())));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let v = self.value(logits).data();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let cap = -CE_LOG_FLOOR.ln();
        let mut probs = Vec::with_capacity(v.len());
        let mut clamped = Vec::with_capacity(batch);
        let mut total = 0.0;
        for (row, &y) in v.chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            probs.extend(row.iter().map(|z| (z - max).exp() / sum));
            let nll = lse - row[y];
            clamped.push(nll > cap);
            total += nll.min(cap);
        }
        let value = Tensor::scalar(total / batch as f64);
        let labels = labels.to_vec();
        self.push_op(
            "cross_entropy",
            &[logits],
            value,
            Box::new(move |args| {
                let scale = args.grad[0] / batch as f64;
                let mut g = vec![0.0; probs.len()];
                for (b, &y) in labels.iter().enumerate() {
                    if clamped[b] {
                        continue;
                    }
                    let row = &mut g[b * classes..(b + 1) * classes];
                    for (c, gv) in row.iter_mut().enumerate() {
                        let target = if c == y { 1.0 } else { 0.0 };
                        *gv = scale * (probs[b * classes + c] - target);
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

/// Visits every valid (output row, kernel tap) pair of a stride-1 window,
/// passing the contiguous run of output columns that tap touches.
#[allow(clippy::too_many_arguments)]
fn for_each_tap(
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    for ki in 0..kh {
        for kj in 0..kw {
            // valid ox satisfy 0 <= ox + kj - pad < w
            let ox0 = pad.saturating_sub(kj);
            let ox1 = (w + pad).saturating_sub(kj).min(ow);
            if ox0 >= ox1 {
                continue;
            }
            let n = ox1 - ox0;
            let ix0 = ox0 + kj - pad;
            for oy in 0..oh {
                let iy = (oy + ki) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                f(oy, iy as usize, ox0, ix0, n, ki * kw + kj);
            }
        }
    }
}
