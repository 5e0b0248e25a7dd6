//! The dual-branch multi-view classifier.
//!
//! Images of all views are folded into the batch axis view-major (row
//! `v·B + b`), so per-view weight sharing is free and reshaping to
//! `[V, B, ...]` costs nothing.

mod checkpoint;
mod config;
mod cvfm;
mod optim;
mod wglim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, TokenFusion, Variant};
pub use cvfm::{CvfmStage1, CvfmStage2, Stage1Output, Stage2Output};
pub use optim::Adam;
pub use wglim::{delta_kernel_row, BranchState, Wglim};

use thiserror::Error;

use crate::data::MultiViewBatch;
use crate::layers::{ClassToken, Conv2d, InitialEncoder, Linear, NonLocalBlock, PatchEmbed};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "unknown variant {0:?} (expected one of full, no-wglim, no-cvfm, bc-only, bt-only, stage1-only, stage2-only)"
    )]
    Variant(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("value out of range: {0}")]
    Range(String),
    #[error("checkpoint does not match configuration: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Floor applied to the per-channel standard deviation of the image input.
pub const STD_FLOOR: f64 = 1e-6;

/// Standardizes each image channel of each view to zero mean and unit
/// variance, then appends the lesion channels unchanged:
/// `[N, Cx, H, W] ⊕ [N, Cl, H, W] → [N, Cx + Cl, H, W]`.
pub fn assemble_input(images: &Tensor, lesions: &Tensor) -> Result<Tensor> {
    let (si, sl) = (images.shape(), lesions.shape());
    if si.len() != 4 || sl.len() != 4 || si[0] != sl[0] || si[2..] != sl[2..] {
        return Err(TensorError::ShapeMismatch {
            op: "assemble_input",
            detail: format!("images {si:?} and lesions {sl:?}"),
        }
        .into());
    }
    if let Some(v) = lesions.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(ModelError::Range(format!("lesion value {v} outside [0, 1]")));
    }
    let (n, cx, cl, plane) = (si[0], si[1], sl[1], si[2] * si[3]);
    let mut out = Vec::with_capacity(n * (cx + cl) * plane);
    for s in 0..n {
        for c in 0..cx {
            let ch = &images.data()[(s * cx + c) * plane..(s * cx + c + 1) * plane];
            let mean = ch.iter().sum::<f64>() / plane as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let std = var.sqrt().max(STD_FLOOR);
            out.extend(ch.iter().map(|v| (v - mean) / std));
        }
        out.extend_from_slice(&lesions.data()[s * cl * plane..(s + 1) * cl * plane]);
    }
    Ok(Tensor::new([n, cx + cl, si[2], si[3]], out)?)
}

/// `Pf = Pc + α·Pt` with `α` of shape `[1]`.
pub fn fuse_logits(g: &mut Graph, pc: Var, pt: Var, alpha: Var) -> crate::tensor::Result<Var> {
    let scaled = g.mul(pt, alpha)?;
    g.add(pc, scaled)
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Replaces the class-token row that generates the dynamic kernels in
    /// every block with this fixed `[D]` row.
    pub kernel_override: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, classes]`, absent without a conv branch.
    pub pc: Option<Var>,
    /// `[B, classes]`, absent without a token branch.
    pub pt: Option<Var>,
    pub pf: Var,
    /// Branch features entering the first block and leaving each block.
    pub states: Vec<BranchState>,
}

#[derive(Clone, Debug)]
struct ConvTail {
    view_conv: Conv2d,
    nonlocal: NonLocalBlock,
    head: Linear,
}

#[derive(Clone, Debug)]
struct TokenTail {
    stage1: Option<CvfmStage1>,
    stage2: Option<CvfmStage2>,
    head: Linear,
}

/// The full network and its parameters.
#[derive(Clone, Debug)]
pub struct Wglin {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore,
    encoder: InitialEncoder,
    patch: Option<PatchEmbed>,
    cls: Option<ClassToken>,
    blocks: Vec<Wglim>,
    conv_tail: Option<ConvTail>,
    token_tail: Option<TokenTail>,
    alpha: Option<ParamId>,
}

impl Wglin {
    /// Builds and initializes the network. Parameters with the same name get
    /// the same initial values in every variant.
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let init = Init::new(seed);
        let mut store = ParamStore::new();
        let (conv, token) = (variant.has_conv_branch(), variant.has_token_branch());
        let encoder = InitialEncoder::new(&mut store, init, cfg.input_channels(), cfg.conv_channels);
        let patch = token.then(|| PatchEmbed::new(&mut store, init, cfg.conv_channels, cfg.patch, cfg.dim));
        let cls = token.then(|| ClassToken::new(&mut store, cfg.tokens() - 1, cfg.dim));
        let blocks = (0..cfg.wglim_blocks)
            .map(|i| Wglim::new(&mut store, init, cfg, i, conv, token, variant.has_interaction()))
            .collect();
        let conv_tail = conv.then(|| {
            let cc = cfg.conv_channels;
            ConvTail {
                view_conv: Conv2d::new(&mut store, init, "bc.view_conv", cc, cc, 3, 2, 1),
                nonlocal: NonLocalBlock::new(&mut store, init, "bc.nonlocal", cc, cc),
                head: Linear::new(&mut store, init, "bc.head", cc, cfg.num_classes, true),
            }
        });
        let token_tail = token.then(|| {
            let (s1, s2) = match variant {
                Variant::NoCvfm => (false, false),
                Variant::Stage1Only => (true, false),
                Variant::Stage2Only => (false, true),
                _ => (true, true),
            };
            let stage1 = s1.then(|| CvfmStage1::new(&mut store, init, cfg.views, cfg.dim, cfg.heads, cfg.d_k));
            let stage2 = s2.then(|| CvfmStage2::new(&mut store, init, cfg.views, cfg.tokens(), cfg.dim));
            let width = if variant == Variant::Stage1Only { cfg.dim } else { cfg.views * cfg.dim };
            TokenTail { stage1, stage2, head: Linear::new(&mut store, init, "bt.head", width, cfg.num_classes, true) }
        });
        let alpha = (conv && token).then(|| store.add("alpha", Tensor::full([1], cfg.alpha_init)));
        Ok(Self { config, variant, params: store, encoder, patch, cls, blocks, conv_tail, token_tail, alpha })
    }

    pub fn alpha(&self) -> Option<ParamId> {
        self.alpha
    }

    pub fn blocks(&self) -> &[Wglim] {
        &self.blocks
    }

    /// Checks that a batch matches the configured geometry.
    pub fn check_batch(&self, batch: &MultiViewBatch) -> Result<()> {
        let c = &self.config;
        let want_img = [batch.len() * c.views, c.image_channels, c.height, c.width];
        let want_les = [batch.len() * c.views, c.lesion_channels, c.height, c.width];
        if batch.views != c.views || batch.images.shape() != want_img || batch.lesions.shape() != want_les {
            return Err(ModelError::ConfigMismatch(format!(
                "batch has {} views of {:?} / {:?}, configuration expects {} views of {want_img:?} / {want_les:?}",
                batch.views,
                batch.images.shape(),
                batch.lesions.shape(),
                c.views
            )));
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= c.num_classes) {
            return Err(TensorError::LabelOutOfRange { label: y, classes: c.num_classes }.into());
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, batch: &MultiViewBatch, opts: &ForwardOptions) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let input = assemble_input(&batch.images, &batch.lesions)?;
        let x = g.constant(input);
        self.forward_input(g, x, opts)
    }

    /// Runs the network on an assembled input `[V·B, C, H, W]`.
    pub fn forward_input(&self, g: &mut Graph, x: Var, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let store = &self.params;
        let s = g.shape(x).to_vec();
        if s.len() != 4 || !s[0].is_multiple_of(cfg.views) || s[1..] != [cfg.input_channels(), cfg.height, cfg.width] {
            return Err(ModelError::ConfigMismatch(format!("input {s:?} does not match the configuration")));
        }
        if let Some(k) = &opts.kernel_override {
            if k.shape() != [cfg.dim] {
                return Err(ModelError::Config(format!("kernel override must be [{}], got {:?}", cfg.dim, k.shape())));
            }
        }
        let (v, b) = (cfg.views, s[0] / cfg.views);
        let fc = self.encoder.forward(g, store, x)?;
        let token = match (&self.patch, &self.cls) {
            (Some(p), Some(c)) => {
                let patches = p.forward(g, store, fc)?;
                Some(c.forward(g, store, patches)?)
            }
            _ => None,
        };
        let mut state = BranchState { conv: self.conv_tail.is_some().then_some(fc), token };
        let mut states = vec![state];
        for block in &self.blocks {
            state = block.forward(g, store, cfg, state, opts.kernel_override.as_ref())?;
            states.push(state);
        }

        let pc = match (&self.conv_tail, state.conv) {
            (Some(tail), Some(fc)) => {
                let y = tail.view_conv.forward(g, store, fc)?;
                let y = g.relu(y)?;
                let ys = g.shape(y).to_vec();
                let y = g.reshape(y, &[v, b, ys[1], ys[2], ys[3]])?;
                let y = g.permute(y, &[1, 0, 2, 3, 4])?;
                let fused = tail.nonlocal.forward(g, store, y)?.fused;
                Some(tail.head.forward(g, store, fused)?)
            }
            _ => None,
        };

        let pt = match (&self.token_tail, state.token) {
            (Some(tail), Some(ft)) => {
                let (l, d) = (cfg.tokens(), cfg.dim);
                let per_view = g.reshape(ft, &[v, b, l, d])?;
                let features = match (&tail.stage1, &tail.stage2) {
                    (None, None) => {
                        let pooled = g.mean_axis(per_view, 2)?;
                        let pooled = g.permute(pooled, &[1, 0, 2])?;
                        g.reshape(pooled, &[b, v * d])?
                    }
                    (Some(s1), None) => {
                        let fused = s1.forward(g, store, per_view)?.fused;
                        let mean = g.mean_axis(fused, 0)?;
                        let row = g.index_select(mean, 1, &[0])?;
                        g.reshape(row, &[b, d])?
                    }
                    (s1, Some(s2)) => {
                        let fused = match s1 {
                            Some(s1) => s1.forward(g, store, per_view)?.fused,
                            None => per_view,
                        };
                        let out = s2.forward(g, store, fused)?.out;
                        let row = g.index_select(out, 1, &[0])?;
                        g.reshape(row, &[b, v * d])?
                    }
                };
                Some(tail.head.forward(g, store, features)?)
            }
            _ => None,
        };

        let pf = match (pc, pt, self.alpha) {
            (Some(pc), Some(pt), Some(alpha)) => {
                let a = g.param(store, alpha);
                fuse_logits(g, pc, pt, a)?
            }
            (Some(pc), None, _) => pc,
            (None, Some(pt), _) => pt,
            _ => return Err(ModelError::Config(format!("variant {} produced no logits", self.variant))),
        };
        Ok(ForwardOutput { pc, pt, pf, states })
    }

    /// Fused logits `[B, classes]` without recording gradients.
    pub fn predict(&self, batch: &MultiViewBatch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, batch, &ForwardOptions::default())?;
        Ok(g.value(out.pf).clone())
    }

    /// Mean cross-entropy of the fused logits; records gradients when `g`
    /// does.
    pub fn loss(&self, g: &mut Graph, batch: &MultiViewBatch) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(g, batch, &ForwardOptions::default())?;
        let loss = g.cross_entropy(out.pf, &batch.labels)?;
        Ok((loss, out))
    }

    /// Forward, backward and one optimizer update. Returns the loss and the
    /// fused logits. Parameters are untouched if anything is non-finite.
    pub fn train_step(&mut self, adam: &mut Adam, batch: &MultiViewBatch) -> Result<(f64, Tensor)> {
        let step = adam.steps() + 1;
        let non_finite = |e: ModelError| match e {
            ModelError::Tensor(TensorError::NonFinite { op }) => {
                ModelError::NonFiniteLoss { step, detail: format!("non-finite value in {op}") }
            }
            e => e,
        };
        let mut g = Graph::new();
        let (loss, out) = self.loss(&mut g, batch).map_err(non_finite)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss { step, detail: format!("loss = {value}") });
        }
        g.backward(loss).map_err(|e| non_finite(e.into()))?;
        self.params.zero_grads();
        g.accumulate_param_grads(&mut self.params);
        if let Some(id) = self.params.ids().find(|&id| !self.params.grad(id).is_finite()) {
            return Err(ModelError::NonFiniteLoss {
                step,
                detail: format!("non-finite gradient for {}", self.params.name(id)),
            });
        }
        let logits = g.value(out.pf).clone();
        adam.step(&mut self.params);
        Ok((value, logits))
    }
}
