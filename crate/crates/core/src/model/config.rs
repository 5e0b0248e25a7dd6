use std::fmt;
use std::str::FromStr;

use super::ModelError;
use crate::wavelet::Band;

/// How the class token is merged into the chosen wavelet band.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenFusion {
    /// Token row reshaped into per-sample 3×3 depthwise kernels.
    Conv,
    /// Token projected to `Cc` values and added to every pixel.
    Add,
    /// Projected token broadcast as extra channels, then mixed back by a 1×1 conv.
    Concat,
}

impl FromStr for TokenFusion {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv" => Ok(Self::Conv),
            "add" => Ok(Self::Add),
            "concat" => Ok(Self::Concat),
            _ => Err(ModelError::Config(format!("unknown token fusion {s:?} (expected conv, add or concat)"))),
        }
    }
}

impl fmt::Display for TokenFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Conv => "conv",
            Self::Add => "add",
            Self::Concat => "concat",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoWglim,
    NoCvfm,
    BcOnly,
    BtOnly,
    Stage1Only,
    Stage2Only,
}

impl Variant {
    /// Ablation order: the full model, then the module ablations, then the
    /// fusion-stage comparison.
    pub const ALL: [Variant; 7] =
        [Self::Full, Self::NoWglim, Self::NoCvfm, Self::BcOnly, Self::BtOnly, Self::Stage1Only, Self::Stage2Only];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoWglim => "no-wglim",
            Self::NoCvfm => "no-cvfm",
            Self::BcOnly => "bc-only",
            Self::BtOnly => "bt-only",
            Self::Stage1Only => "stage1-only",
            Self::Stage2Only => "stage2-only",
        }
    }

    pub fn has_conv_branch(self) -> bool {
        self != Self::BtOnly
    }

    pub fn has_token_branch(self) -> bool {
        self != Self::BcOnly
    }

    pub fn has_interaction(self) -> bool {
        matches!(self, Self::Full | Self::NoCvfm | Self::Stage1Only | Self::Stage2Only)
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| ModelError::Variant(s.to_string()))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `V`
    pub views: usize,
    /// `N`, number of stacked interaction blocks.
    pub wglim_blocks: usize,
    /// `Cx`
    pub image_channels: usize,
    /// `Cl`
    pub lesion_channels: usize,
    /// `Cc`
    pub conv_channels: usize,
    pub height: usize,
    pub width: usize,
    /// `P`
    pub patch: usize,
    /// `D`
    pub dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// Scale denominator of the cross-view attention logits.
    pub d_k: usize,
    pub alpha_init: f64,
    /// Hidden width of every transformer and fusion MLP as a multiple of `D`.
    pub ffn_ratio: usize,
    pub interaction_band: Band,
    pub token_fusion: TokenFusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The standard small configuration: four 64×64 views, two blocks.
    pub fn desk() -> Self {
        Self {
            views: 4,
            wglim_blocks: 2,
            image_channels: 3,
            lesion_channels: 1,
            conv_channels: 16,
            height: 64,
            width: 64,
            patch: 4,
            dim: 144,
            heads: 9,
            num_classes: 5,
            d_k: 16,
            alpha_init: 1.0,
            ffn_ratio: 2,
            interaction_band: Band::HH,
            token_fusion: TokenFusion::Conv,
        }
    }

    /// A minimal configuration for gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self {
            views: 2,
            wglim_blocks: 1,
            image_channels: 3,
            lesion_channels: 1,
            conv_channels: 2,
            height: 16,
            width: 16,
            patch: 2,
            dim: 18,
            heads: 2,
            num_classes: 3,
            d_k: 9,
            alpha_init: 1.0,
            ffn_ratio: 1,
            interaction_band: Band::HH,
            token_fusion: TokenFusion::Conv,
        }
    }

    /// `C = Cx + Cl`
    pub fn input_channels(&self) -> usize {
        self.image_channels + self.lesion_channels
    }

    /// `Ck = D / 9`, the number of token-derived 3×3 kernels.
    pub fn kernel_channels(&self) -> usize {
        self.dim / 9
    }

    /// Spatial extent of the conv branch `(Hc, Wc)`.
    pub fn conv_extent(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// `L = Lp + 1`
    pub fn tokens(&self) -> usize {
        let (hc, wc) = self.conv_extent();
        (hc / self.patch) * (wc / self.patch) + 1
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.ffn_ratio
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        let positive = [
            ("views", self.views),
            ("image_channels", self.image_channels),
            ("conv_channels", self.conv_channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("ffn_ratio", self.ffn_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return err(format!("{name} must be positive"));
        }
        if self.num_classes < 2 {
            return err(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !self.dim.is_multiple_of(9) {
            return err(format!(
                "dim = {} is not divisible by 9: the class token must reshape into D/9 kernels of size 3x3",
                self.dim
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return err(format!("dim = {} is not divisible by heads = {}", self.dim, self.heads));
        }
        if self.height < 16 || self.width < 16 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return err(format!(
                "input {}x{} must be at least 16x16 with both extents divisible by 8, so the conv branch has even extents",
                self.height, self.width
            ));
        }
        let (hc, wc) = self.conv_extent();
        if hc % self.patch != 0 || wc % self.patch != 0 {
            return err(format!("conv branch {hc}x{wc} is not divisible into {0}x{0} patches", self.patch));
        }
        let ck = self.kernel_channels();
        if ck > self.conv_channels || !self.conv_channels.is_multiple_of(ck) {
            return err(format!(
                "D/9 = {ck} token kernels cannot be tiled to conv_channels = {}: need D/9 <= Cc and Cc divisible by D/9",
                self.conv_channels
            ));
        }
        if !self.alpha_init.is_finite() {
            return err("alpha_init must be finite".into());
        }
        Ok(())
    }
}
