//! Single-level orthonormal 2D Haar transform and its exact inverse.
//!
//! For each non-overlapping 2×2 block `[[a, b], [c, d]]` of every trailing
//! `H × W` plane:
//!
//! ```text
//! LL = (a + b + c + d) / 2      HL = (a − b + c − d) / 2
//! LH = (a + b − c − d) / 2      HH = (a − b − c + d) / 2
//! ```
//!
//! The 4×4 block matrix is symmetric and orthogonal, so the inverse applies
//! the same sign pattern and the squared norm is preserved exactly.

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    LL,
    LH,
    HL,
    HH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];

    /// Signs applied to `(a, b, c, d)`.
    fn signs(self) -> [f64; 4] {
        match self {
            Band::LL => [1.0, 1.0, 1.0, 1.0],
            Band::HL => [1.0, -1.0, 1.0, -1.0],
            Band::LH => [1.0, 1.0, -1.0, -1.0],
            Band::HH => [1.0, -1.0, -1.0, 1.0],
        }
    }
}

impl std::str::FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ll" => Ok(Band::LL),
            "lh" => Ok(Band::LH),
            "hl" => Ok(Band::HL),
            "hh" => Ok(Band::HH),
            other => Err(format!("unknown wavelet band '{other}'")),
        }
    }
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Band::LL => "ll",
            Band::LH => "lh",
            Band::HL => "hl",
            Band::HH => "hh",
        })
    }
}

/// The four subbands of one decomposition level, each `[..., H/2, W/2]`.
#[derive(Clone, Copy, Debug)]
pub struct WaveletBands {
    pub ll: Var,
    pub lh: Var,
    pub hl: Var,
    pub hh: Var,
    pub source_shape: (usize, usize),
}

impl WaveletBands {
    pub fn get(&self, band: Band) -> Var {
        match band {
            Band::LL => self.ll,
            Band::LH => self.lh,
            Band::HL => self.hl,
            Band::HH => self.hh,
        }
    }

    pub fn with(mut self, band: Band, v: Var) -> Self {
        match band {
            Band::LL => self.ll = v,
            Band::LH => self.lh = v,
            Band::HL => self.hl = v,
            Band::HH => self.hh = v,
        }
        self
    }
}

fn half_shape(shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() < 2 {
        return Err(TensorError::ShapeMismatch { op: "dwt2", detail: format!("need [..., H, W], got {shape:?}") });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddExtent { height: h, width: w });
    }
    let mut out = shape.to_vec();
    let r = out.len();
    out[r - 2] = h / 2;
    out[r - 1] = w / 2;
    Ok(out)
}

/// Offsets of `(a, b, c, d)` for block `(i, j)` of a plane with width `w`.
#[inline]
fn block(w: usize, i: usize, j: usize) -> [usize; 4] {
    let a = 2 * i * w + 2 * j;
    [a, a + 1, a + w, a + w + 1]
}

fn analysis(g: &mut Graph, x: Var, band: Band) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let out_shape = half_shape(&shape)?;
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (hh, hw) = (h / 2, w / 2);
    let planes = g.value(x).numel() / (h * w);
    let s = band.signs();
    let src = g.value(x).data();
    let mut out = Vec::with_capacity(planes * hh * hw);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for i in 0..hh {
            for j in 0..hw {
                let o = block(w, i, j);
                out.push(0.5 * (s[0] * plane[o[0]] + s[1] * plane[o[1]] + s[2] * plane[o[2]] + s[3] * plane[o[3]]));
            }
        }
    }
    let value = Tensor::new(out_shape, out)?;
    g.push_op(
        "dwt2",
        &[x],
        value,
        Box::new(move |args| {
            let mut gx = vec![0.0; planes * h * w];
            let mut k = 0;
            for p in 0..planes {
                let plane = &mut gx[p * h * w..(p + 1) * h * w];
                for i in 0..hh {
                    for j in 0..hw {
                        let gv = 0.5 * args.grad[k];
                        k += 1;
                        for (o, sign) in block(w, i, j).into_iter().zip(s) {
                            plane[o] = sign * gv;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Forward transform of every trailing `H × W` plane. Both extents must be even.
pub fn dwt2(g: &mut Graph, x: Var) -> Result<WaveletBands> {
    let shape = g.shape(x).to_vec();
    half_shape(&shape)?;
    let source_shape = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Ok(WaveletBands {
        ll: analysis(g, x, Band::LL)?,
        lh: analysis(g, x, Band::LH)?,
        hl: analysis(g, x, Band::HL)?,
        hh: analysis(g, x, Band::HH)?,
        source_shape,
    })
}

/// Exact inverse of [`dwt2`].
pub fn iwt2(g: &mut Graph, bands: &WaveletBands) -> Result<Var> {
    let vars = [bands.ll, bands.lh, bands.hl, bands.hh];
    let shape = g.shape(bands.ll).to_vec();
    for &v in &vars[1..] {
        if g.shape(v) != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "iwt2",
                detail: format!("bands differ: {:?} vs {shape:?}", g.shape(v)),
            });
        }
    }
    if shape.len() < 2 {
        return Err(TensorError::ShapeMismatch { op: "iwt2", detail: format!("need [..., h, w], got {shape:?}") });
    }
    let (hh, hw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (h, w) = (2 * hh, 2 * hw);
    let planes = g.value(bands.ll).numel() / (hh * hw);
    let signs: Vec<[f64; 4]> = Band::ALL.iter().map(|b| b.signs()).collect();
    let mut out = vec![0.0; planes * h * w];
    {
        let data: Vec<&[f64]> = vars.iter().map(|&v| g.value(v).data()).collect();
        for p in 0..planes {
            let plane = &mut out[p * h * w..(p + 1) * h * w];
            for i in 0..hh {
                for j in 0..hw {
                    let k = (p * hh + i) * hw + j;
                    for (pos, o) in block(w, i, j).into_iter().enumerate() {
                        plane[o] = 0.5 * (0..4).map(|b| signs[b][pos] * data[b][k]).sum::<f64>();
                    }
                }
            }
        }
    }
    let mut out_shape = shape;
    let r = out_shape.len();
    out_shape[r - 2] = h;
    out_shape[r - 1] = w;
    let value = Tensor::new(out_shape, out)?;
    g.push_op(
        "iwt2",
        &vars,
        value,
        Box::new(move |args| {
            // adjoint of synthesis is analysis
            let mut grads: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(planes * hh * hw)).collect();
            for p in 0..planes {
                let plane = &args.grad[p * h * w..(p + 1) * h * w];
                for i in 0..hh {
                    for j in 0..hw {
                        let o = block(w, i, j);
                        for (b, grad) in grads.iter_mut().enumerate() {
                            let s = signs[b];
                            grad.push(
                                0.5 * (s[0] * plane[o[0]]
                                    + s[1] * plane[o[1]]
                                    + s[2] * plane[o[2]]
                                    + s[3] * plane[o[3]]),
                            );
                        }
                    }
                }
            }
            grads.into_iter().zip(args.needs).map(|(g, &n)| n.then_some(g)).collect()
        }),
    )
}
