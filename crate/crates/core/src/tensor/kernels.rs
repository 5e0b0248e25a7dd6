//! Raw slice kernels. Everything here is single-threaded and deterministic
//! on a given machine: summation order depends on the extents and the CPU's
//! vector features, never on the data.

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    gemm(m, n, k, a, (n, 1), b, (1, n), c);
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    gemm(k, m, n, a, (1, k), b, (n, 1), c);
}

/// `c[m,n] += A[m,k] · B[k,n]` with `(row, col)` strides for `A` and `B`;
/// `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers assert every slice covers the extents addressed by
    // these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with four independent partial sums.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of a 2D sliding window.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if stride == 0 || ph < kh || pw < kw {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C, H, W]` image into `[C·kh·kw, out_h·out_w]` columns.
pub fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix >= 0 && (ix as usize) < g.width { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto an image, accumulating.
pub fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every destination element of `src` permuted by `perm`.
pub fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    strided_offsets(&out_shape, &mapped)
}

/// Offsets `Σ idx[d]·stride[d]` over all indices of `shape` in row-major order.
pub fn strided_offsets(shape: &[usize], stride: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if shape.is_empty() {
        out.push(0);
        return out;
    }
    let rank = shape.len();
    let last = shape[rank - 1];
    let last_stride = stride[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..last {
            out.push(base + j * last_stride);
        }
        // advance all but the innermost axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += stride[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= stride[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Offsets into `input` for each element of the broadcast `out` shape.
pub fn broadcast_map(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let in_strides = strides(input);
    let mut st = vec![0; rank];
    for i in 0..input.len() {
        let o = rank - input.len() + i;
        st[o] = if input[i] == 1 { 0 } else { in_strides[i] };
    }
    strided_offsets(out, &st)
}
