use super::Conv2d;
use crate::tensor::{shape_err, Graph, Init, ParamStore, Result, Var};

/// 7×7 stride-2 convolution, ReLU, 3×3 stride-2 max pool: `H × W → H/4 × W/4`.
///
/// One instance serves every view; the view axis is folded into the batch.
#[derive(Clone, Debug)]
pub struct InitialEncoder {
    pub conv: Conv2d,
}

impl InitialEncoder {
    pub fn new(store: &mut ParamStore, init: Init, in_channels: usize, out_channels: usize) -> Self {
        Self { conv: Conv2d::new(store, init, "encoder.conv", in_channels, out_channels, 7, 2, 3) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[2] < 16 || s[3] < 16 {
            return Err(shape_err("initial_encoder", format!("need [N, C, H>=16, W>=16], got {s:?}")));
        }
        let y = self.conv.forward(g, store, x)?;
        let y = g.relu(y)?;
        g.maxpool2d(y, 3, 2, 1)
    }
}
