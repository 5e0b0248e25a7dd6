use super::config::{ModelConfig, TokenFusion};
use crate::layers::{Conv2d, Linear, ResidualConvBlock, TransformerBlock};
use crate::tensor::{Graph, Init, ParamStore, Result, Tensor, Var};
use crate::wavelet::{dwt2, iwt2};

/// A token row whose 3×3 kernels are all centered deltas: a 1 at the
/// middle tap of every group of nine.
pub fn delta_kernel_row(dim: usize) -> Tensor {
    Tensor::from_fn([dim], |i| if i % 9 == 4 { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug)]
enum Fusion {
    Conv,
    Add { proj: Linear },
    Concat { proj: Linear, mix: Conv2d },
}

/// One interaction block. Either branch may be absent for the single-branch
/// variants; the wavelet coupling runs only when both are present and
/// interaction is enabled.
#[derive(Clone, Debug)]
pub struct Wglim {
    pub conv: Option<ResidualConvBlock>,
    pub transformer: Option<TransformerBlock>,
    fusion: Option<Fusion>,
}

/// Branch features at a block boundary: conv `[V·B, Cc, Hc, Wc]`, token `[V·B, L, D]`.
#[derive(Clone, Copy, Debug)]
pub struct BranchState {
    pub conv: Option<Var>,
    pub token: Option<Var>,
}

impl Wglim {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        cfg: &ModelConfig,
        index: usize,
        conv: bool,
        token: bool,
        interact: bool,
    ) -> Self {
        let name = format!("wglim{index}");
        let cc = cfg.conv_channels;
        let fusion = (conv && token && interact).then(|| match cfg.token_fusion {
            TokenFusion::Conv => Fusion::Conv,
            TokenFusion::Add => {
                Fusion::Add { proj: Linear::new(store, init, &format!("{name}.fusion.proj"), cfg.dim, cc, true) }
            }
            TokenFusion::Concat => Fusion::Concat {
                proj: Linear::new(store, init, &format!("{name}.fusion.proj"), cfg.dim, cc, true),
                mix: Conv2d::new(store, init, &format!("{name}.fusion.mix"), 2 * cc, cc, 1, 1, 0),
            },
        });
        Self {
            conv: conv.then(|| ResidualConvBlock::new(store, init, &format!("{name}.conv"), cc)),
            transformer: token.then(|| {
                TransformerBlock::new(store, init, &format!("{name}.transformer"), cfg.dim, cfg.heads, cfg.hidden())
            }),
            fusion,
        }
    }

    /// Runs both branches and, if enabled, replaces the configured wavelet
    /// band of the conv features with its token-conditioned version.
    ///
    /// `kernel_override` substitutes a fixed `[D]` row for the class token
    /// when forming the dynamic kernels.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        state: BranchState,
        kernel_override: Option<&Tensor>,
    ) -> Result<BranchState> {
        let conv = match (&self.conv, state.conv) {
            (Some(block), Some(x)) => Some(block.forward(g, store, x)?),
            _ => None,
        };
        let token = match (&self.transformer, state.token) {
            (Some(block), Some(x)) => Some(block.forward(g, store, x)?),
            _ => None,
        };
        let (Some(fusion), Some(fc), Some(ft)) = (&self.fusion, conv, token) else {
            return Ok(BranchState { conv, token });
        };
        let n = g.shape(fc)[0];
        let cls = match kernel_override {
            Some(row) => g.constant(Tensor::from_fn([n, cfg.dim], |i| row.data()[i % cfg.dim])),
            None => {
                let row = g.index_select(ft, 1, &[0])?;
                g.reshape(row, &[n, cfg.dim])?
            }
        };
        let bands = dwt2(g, fc)?;
        let band = bands.get(cfg.interaction_band);
        let mixed = match fusion {
            Fusion::Conv => {
                let ck = cfg.kernel_channels();
                let k = g.reshape(cls, &[n, ck, 3, 3])?;
                let k = if ck == cfg.conv_channels {
                    k
                } else {
                    let tiled: Vec<usize> = (0..cfg.conv_channels).map(|c| c % ck).collect();
                    g.index_select(k, 1, &tiled)?
                };
                g.depthwise_conv2d(band, k, 1)?
            }
            Fusion::Add { proj } => {
                let p = proj.forward(g, store, cls)?;
                let p = g.reshape(p, &[n, cfg.conv_channels, 1, 1])?;
                g.add(band, p)?
            }
            Fusion::Concat { proj, mix } => {
                let p = proj.forward(g, store, cls)?;
                let p = g.reshape(p, &[n, cfg.conv_channels, 1, 1])?;
                let zeros = g.constant(Tensor::zeros(g.shape(band).to_vec()));
                let p = g.add(zeros, p)?;
                let cat = g.concat(&[band, p], 1)?;
                mix.forward(g, store, cat)?
            }
        };
        let conv = iwt2(g, &bands.with(cfg.interaction_band, mixed))?;
        Ok(BranchState { conv: Some(conv), token: Some(ft) })
    }
}
