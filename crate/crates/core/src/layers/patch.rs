use super::Conv2d;
use crate::tensor::{shape_err, Graph, Init, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Splits `[N, C, H, W]` into non-overlapping `P × P` patches and projects
/// each flattened patch (`C·P·P` values) to width `D`, giving `[N, Lp, D]`
/// with patches in row-major order.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub patch: usize,
    pub dim: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, init: Init, channels: usize, patch: usize, dim: usize) -> Self {
        // a stride-P convolution is exactly a shared linear map on each patch
        Self { proj: Conv2d::new(store, init, "patch_embed.proj", channels, dim, patch, patch, 0), patch, dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("patch_embed", format!("need [N, C, H, W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(TensorError::IndivisiblePatch { height: h, width: w, patch: self.patch });
        }
        let lp = (h / self.patch) * (w / self.patch);
        let y = self.proj.forward(g, store, x)?;
        let y = g.reshape(y, &[s[0], self.dim, lp])?;
        g.permute(y, &[0, 2, 1])
    }
}

/// Learned classification token prepended at index 0, plus learned
/// positional embeddings for all `L = Lp + 1` positions. Both start at zero.
#[derive(Clone, Debug)]
pub struct ClassToken {
    pub token: ParamId,
    pub pos: ParamId,
}

impl ClassToken {
    pub fn new(store: &mut ParamStore, tokens: usize, dim: usize) -> Self {
        Self {
            token: store.add("cls_token", Tensor::zeros([1, 1, dim])),
            pos: store.add("pos_embed", Tensor::zeros([tokens + 1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        let n = g.shape(patches)[0];
        let token = g.param(store, self.token);
        let token = g.index_select(token, 0, &vec![0; n])?;
        let seq = g.concat(&[token, patches], 1)?;
        let pos = g.param(store, self.pos);
        g.add(seq, pos)
    }
}
