//! Neural building blocks assembled from the tensor engine.
//!
//! Every block owns only [`ParamId`]s; values live in a [`ParamStore`] and
//! are bound into a [`Graph`] on each forward pass.

mod attention;
mod conv_block;
mod encoder;
mod nonlocal;
mod patch;
mod transformer;

pub use attention::{multi_head_attention, Attention};
pub use conv_block::ResidualConvBlock;
pub use encoder::InitialEncoder;
pub use nonlocal::{NonLocalBlock, NonLocalOutput};
pub use patch::{ClassToken, PatchEmbed};
pub use transformer::{TransformerBlock, TransformerOutput};

use crate::tensor::{Graph, Init, ParamId, ParamStore, Result, Tensor, Var};

/// Epsilon of every affine layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` over the last axis, with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, init);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([fan_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight =
            store.add_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel, init);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Layer norm over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LAYER_NORM_EPS)?;
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        let s = g.mul(n, gamma)?;
        g.add(s, beta)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), width, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, width, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, store, h)
    }
}
