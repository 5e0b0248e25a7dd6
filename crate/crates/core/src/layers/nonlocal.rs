use super::Linear;
use crate::tensor::{shape_err, Graph, Init, ParamStore, Result, Var};

/// Embedded-Gaussian non-local block over all positions of all views,
/// followed by global average pooling and a linear projection.
///
/// Input `[B, V, C, H, W]` is flattened to `n = V·H·W` positions of width
/// `C`; `z = x + W_out(softmax(θ(x)·φ(x)ᵀ)·g(x))`.
#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub theta: Linear,
    pub phi: Linear,
    pub g: Linear,
    pub out: Linear,
    pub proj: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct NonLocalOutput {
    /// `[B, out_dim]`
    pub fused: Var,
    /// Post-attention features `[B, V·H·W, C]`, view-major.
    pub features: Var,
    /// `[B, n, n]`
    pub affinity: Var,
}

impl NonLocalBlock {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, channels: usize, out_dim: usize) -> Self {
        let inner = (channels / 2).max(1);
        Self {
            theta: Linear::new(store, init, &format!("{name}.theta"), channels, inner, true),
            phi: Linear::new(store, init, &format!("{name}.phi"), channels, inner, true),
            g: Linear::new(store, init, &format!("{name}.g"), channels, inner, true),
            out: Linear::new(store, init, &format!("{name}.out"), inner, channels, true),
            proj: Linear::new(store, init, &format!("{name}.proj"), channels, out_dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<NonLocalOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 {
            return Err(shape_err("non_local_fuse", format!("need [B, V, C, H, W], got {s:?}")));
        }
        let (b, v, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let pos = g.permute(x, &[0, 1, 3, 4, 2])?;
        let pos = g.reshape(pos, &[b, v * h * w, c])?;
        let theta = self.theta.forward(g, store, pos)?;
        let phi = self.phi.forward(g, store, pos)?;
        let gx = self.g.forward(g, store, pos)?;
        let phi_t = g.transpose(phi)?;
        let logits = g.matmul(theta, phi_t)?;
        let affinity = g.softmax(logits, 2)?;
        let mixed = g.matmul(affinity, gx)?;
        let mixed = self.out.forward(g, store, mixed)?;
        let features = g.add(pos, mixed)?;
        let pooled = g.mean_axis(features, 1)?;
        let fused = self.proj.forward(g, store, pooled)?;
        Ok(NonLocalOutput { fused, features, affinity })
    }
}
