use crate::tensor::{shape_err, Graph, Result, Var};

/// Attention output `[..., L, D]` and the softmax weights `[..., heads, L, L]`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub out: Var,
    pub weights: Var,
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = shape.len();
    let (l, d) = (shape[r - 2], shape[r - 1]);
    let mut split = shape[..r - 2].to_vec();
    split.extend([l, heads, d / heads]);
    let x = g.reshape(x, &split)?;
    let mut perm: Vec<usize> = (0..r - 2).collect();
    perm.extend([r - 1, r - 2, r]);
    g.permute(x, &perm)
}

/// Scaled dot-product attention with `heads` heads over the last two axes.
/// Logits are divided by `sqrt(scale_denominator)`.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale_denominator: f64,
) -> Result<Attention> {
    let shape = g.shape(q).to_vec();
    if shape.len() < 2 || g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(shape_err("attention", format!("q {shape:?}, k {:?}, v {:?}", g.shape(k), g.shape(v))));
    }
    let r = shape.len();
    let d = shape[r - 1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
    }
    let (qh, kh, vh) = if heads == 1 {
        (q, k, v)
    } else {
        (split_heads(g, q, heads)?, split_heads(g, k, heads)?, split_heads(g, v, heads)?)
    };
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / scale_denominator.sqrt())?;
    let rank = g.shape(scores).len();
    let weights = g.softmax(scores, rank - 1)?;
    let mixed = g.matmul(weights, vh)?;
    if heads == 1 {
        let mut split = shape[..r - 2].to_vec();
        split.extend([1, shape[r - 2], shape[r - 2]]);
        let weights = g.reshape(weights, &split)?;
        return Ok(Attention { out: mixed, weights });
    }
    let out = {
        // [..., H, L, hd] -> [..., L, H, hd] -> [..., L, D]
        let mut perm: Vec<usize> = (0..r - 2).collect();
        perm.extend([r - 1, r - 2, r]);
        let m = g.permute(mixed, &perm)?;
        g.reshape(m, &shape)?
    };
    Ok(Attention { out, weights })
}
