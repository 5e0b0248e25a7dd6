use super::Conv2d;
use crate::tensor::{Graph, Init, ParamStore, Result, Var};

/// Bottleneck residual block: `relu(c1c(relu(c1b(relu(c1a(x))))) + c2(x))`
/// with 1×1, 3×3 (pad 1), 1×1 on the main path and a 1×1 skip projection.
/// Spatial extents and channel count are preserved.
#[derive(Clone, Debug)]
pub struct ResidualConvBlock {
    pub conv1a: Conv2d,
    pub conv1b: Conv2d,
    pub conv1c: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualConvBlock {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, channels: usize) -> Self {
        let c = channels;
        Self {
            conv1a: Conv2d::new(store, init, &format!("{name}.conv1a"), c, c, 1, 1, 0),
            conv1b: Conv2d::new(store, init, &format!("{name}.conv1b"), c, c, 3, 1, 1),
            conv1c: Conv2d::new(store, init, &format!("{name}.conv1c"), c, c, 1, 1, 0),
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), c, c, 1, 1, 0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1a.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.conv1b.forward(g, store, h)?;
        let h = g.relu(h)?;
        let main = self.conv1c.forward(g, store, h)?;
        let skip = self.conv2.forward(g, store, x)?;
        let sum = g.add(main, skip)?;
        g.relu(sum)
    }
}
