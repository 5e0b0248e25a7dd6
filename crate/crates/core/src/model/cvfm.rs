use crate::layers::{multi_head_attention, Mlp};
use crate::tensor::{shape_err, Graph, Init, ParamId, ParamStore, Result, Tensor, Var};

/// All-pairs cross-view attention with view-specific projections and one
/// shared MLP: `F̂_i = Σ_j MLP(softmax(Q_i K_jᵀ / √d_k) V_j)`.
#[derive(Clone, Debug)]
pub struct CvfmStage1 {
    /// Each `[V, D, D]`, one projection matrix per view.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub mlp: Mlp,
    pub heads: usize,
    pub d_k: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Output {
    /// `[V, B, L, D]`
    pub fused: Var,
    /// `[V·V, B, heads, L, L]`, pair `(i, j)` at index `i·V + j`.
    pub attention: Var,
}

impl CvfmStage1 {
    pub fn new(store: &mut ParamStore, init: Init, views: usize, dim: usize, heads: usize, d_k: usize) -> Self {
        let proj =
            |store: &mut ParamStore, n: &str| store.add_uniform(format!("cvfm1.{n}"), &[views, dim, dim], dim, init);
        Self {
            wq: proj(store, "wq"),
            wk: proj(store, "wk"),
            wv: proj(store, "wv"),
            mlp: Mlp::new(store, init, "cvfm1.mlp", dim, dim),
            heads,
            d_k,
        }
    }

    /// `x: [V, B, L, D]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Stage1Output> {
        let s = g.shape(x).to_vec();
        let views = store.value(self.wq).shape()[0];
        if s.len() != 4 || s[0] != views {
            return Err(shape_err("cvfm_stage1", format!("need [{views}, B, L, D], got {s:?}")));
        }
        let (v, b, l, d) = (s[0], s[1], s[2], s[3]);
        let rows = g.reshape(x, &[v, b * l, d])?;
        let project = |g: &mut Graph, w: ParamId| -> Result<Var> {
            let w = g.param(store, w);
            let p = g.matmul(rows, w)?;
            g.reshape(p, &[v, b, l, d])
        };
        let (q, k, val) = (project(g, self.wq)?, project(g, self.wk)?, project(g, self.wv)?);
        let qi: Vec<usize> = (0..v * v).map(|p| p / v).collect();
        let kj: Vec<usize> = (0..v * v).map(|p| p % v).collect();
        let q = g.index_select(q, 0, &qi)?;
        let k = g.index_select(k, 0, &kj)?;
        let val = g.index_select(val, 0, &kj)?;
        let att = multi_head_attention(g, q, k, val, self.heads, self.d_k as f64)?;
        let m = self.mlp.forward(g, store, att.out)?;
        let m = g.reshape(m, &[v, v, b, l, d])?;
        Ok(Stage1Output { fused: g.sum_axis(m, 1)?, attention: att.weights })
    }
}

/// Learnable-query pooling per view followed by view-specific MLPs, with
/// the results concatenated along the width: `[B, L, V·D]`.
#[derive(Clone, Debug)]
pub struct CvfmStage2 {
    /// `[L, D]`
    pub query: ParamId,
    /// `[V, D, D]` and `[V, 1, D]`
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Output {
    /// `[B, L, V·D]`
    pub out: Var,
    /// `[V·B, L, L]`, view-major.
    pub attention: Var,
}

impl CvfmStage2 {
    pub fn new(store: &mut ParamStore, init: Init, views: usize, tokens: usize, dim: usize) -> Self {
        Self {
            query: store.add_uniform("cvfm2.query", &[tokens, dim], dim, init),
            w1: store.add_uniform("cvfm2.mlp.fc1.weight", &[views, dim, dim], dim, init),
            b1: store.add("cvfm2.mlp.fc1.bias", Tensor::zeros([views, 1, dim])),
            w2: store.add_uniform("cvfm2.mlp.fc2.weight", &[views, dim, dim], dim, init),
            b2: store.add("cvfm2.mlp.fc2.bias", Tensor::zeros([views, 1, dim])),
        }
    }

    /// `x: [V, B, L, D]`; logits are scaled by `1/√D`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Stage2Output> {
        let s = g.shape(x).to_vec();
        let q = g.param(store, self.query);
        let qs = g.shape(q).to_vec();
        let views = store.value(self.w1).shape()[0];
        if s.len() != 4 || s[0] != views || s[2..] != qs[..] {
            return Err(shape_err("cvfm_stage2", format!("need [{views}, B, {}, {}], got {s:?}", qs[0], qs[1])));
        }
        let (v, b, l, d) = (s[0], s[1], s[2], s[3]);
        let flat = g.reshape(x, &[v * b, l, d])?;
        let kt = g.transpose(flat)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
        let attention = g.softmax(logits, 2)?;
        let att = g.matmul(attention, flat)?;
        let rows = g.reshape(att, &[v, b * l, d])?;
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let h = g.matmul(rows, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, w2)?;
        let h = g.add(h, b2)?;
        let h = g.reshape(h, &[v, b, l, d])?;
        let h = g.permute(h, &[1, 2, 0, 3])?;
        Ok(Stage2Output { out: g.reshape(h, &[b, l, v * d])?, attention })
    }
}
