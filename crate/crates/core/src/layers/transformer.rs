use super::{multi_head_attention, LayerNorm, Linear, Mlp};
use crate::tensor::{shape_err, Graph, Init, ParamStore, Result, Var};

/// Pre-norm encoder block: `x + MHSA(LN(x))`, then `+ FFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct TransformerOutput {
    pub out: Var,
    /// `[N, heads, L, L]`
    pub attention: Var,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            wq: Linear::new(store, init, &format!("{name}.attn.q"), dim, dim, true),
            wk: Linear::new(store, init, &format!("{name}.attn.k"), dim, dim, true),
            wv: Linear::new(store, init, &format!("{name}.attn.v"), dim, dim, true),
            wo: Linear::new(store, init, &format!("{name}.attn.out"), dim, dim, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(store, init, &format!("{name}.ffn"), dim, hidden),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(g, store, x)?.out)
    }

    pub fn forward_detailed(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<TransformerOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(self.heads) {
            return Err(shape_err(
                "transformer_block",
                format!("need [N, L, D] with D divisible by {}, got {s:?}", self.heads),
            ));
        }
        let head_dim = (s[2] / self.heads) as f64;
        let h = self.ln1.forward(g, store, x)?;
        let q = self.wq.forward(g, store, h)?;
        let k = self.wk.forward(g, store, h)?;
        let v = self.wv.forward(g, store, h)?;
        let att = multi_head_attention(g, q, k, v, self.heads, head_dim)?;
        let o = self.wo.forward(g, store, att.out)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        Ok(TransformerOutput { out: g.add(x, f)?, attention: att.weights })
    }
}
