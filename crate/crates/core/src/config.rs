//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Unknown and repeated keys are errors. Keys left out take the desk-scale
//! defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::SynthSpec;
use crate::model::{ModelConfig, TokenFusion, Variant};
use crate::wavelet::Band;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub data: DataSource,
    /// Synthetic samples per class, split into train and test.
    pub n_per_class: usize,
    pub split_ratio: f64,
    pub overlap_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            variant: Variant::Full,
            seed: 42,
            epochs: 30,
            batch_size: 24,
            learning_rate: 1e-3,
            data: DataSource::Synthetic,
            n_per_class: 250,
            split_ratio: 0.8,
            overlap_fraction: 0.25,
        }
    }
}

const KEYS: &[&str] = &[
    "views",
    "wglim_blocks",
    "image_channels",
    "lesion_channels",
    "conv_channels",
    "height",
    "width",
    "patch",
    "dim",
    "heads",
    "num_classes",
    "d_k",
    "alpha_init",
    "ffn_ratio",
    "interaction_band",
    "token_fusion",
    "variant",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "data",
    "n_per_class",
    "split_ratio",
    "overlap_fraction",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, ConfigError> {
    raw.parse().map_err(|_| ConfigError::Parse { line, message: format!("invalid value {raw:?} for {key}") })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        let mut d_k = None;
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, raw)) = content.split_once('=') else {
                return Err(ConfigError::Parse { line, message: format!("expected `key = value`, got {content:?}") });
            };
            let (key, raw) = (key.trim(), raw.trim());
            let Some(&key) = KEYS.iter().find(|&&k| k == key) else {
                return Err(ConfigError::Parse { line, message: format!("unknown key {key:?}") });
            };
            if seen.contains(&key) {
                return Err(ConfigError::Parse { line, message: format!("duplicate key {key:?}") });
            }
            seen.push(key);
            let m = &mut cfg.model;
            match key {
                "views" => m.views = value(line, key, raw)?,
                "wglim_blocks" => m.wglim_blocks = value(line, key, raw)?,
                "image_channels" => m.image_channels = value(line, key, raw)?,
                "lesion_channels" => m.lesion_channels = value(line, key, raw)?,
                "conv_channels" => m.conv_channels = value(line, key, raw)?,
                "height" => m.height = value(line, key, raw)?,
                "width" => m.width = value(line, key, raw)?,
                "patch" => m.patch = value(line, key, raw)?,
                "dim" => m.dim = value(line, key, raw)?,
                "heads" => m.heads = value(line, key, raw)?,
                "num_classes" => m.num_classes = value(line, key, raw)?,
                "d_k" => d_k = Some(value(line, key, raw)?),
                "alpha_init" => m.alpha_init = value(line, key, raw)?,
                "ffn_ratio" => m.ffn_ratio = value(line, key, raw)?,
                "interaction_band" => m.interaction_band = value::<Band>(line, key, raw)?,
                "token_fusion" => m.token_fusion = value::<TokenFusion>(line, key, raw)?,
                "variant" => cfg.variant = value(line, key, raw)?,
                "seed" => cfg.seed = value(line, key, raw)?,
                "epochs" => cfg.epochs = value(line, key, raw)?,
                "batch_size" => cfg.batch_size = value(line, key, raw)?,
                "learning_rate" => cfg.learning_rate = value(line, key, raw)?,
                "data" => {
                    cfg.data = match raw {
                        "synthetic" => DataSource::Synthetic,
                        "" => return Err(ConfigError::Parse { line, message: "empty data source".into() }),
                        path => DataSource::Directory(PathBuf::from(path)),
                    }
                }
                "n_per_class" => cfg.n_per_class = value(line, key, raw)?,
                "split_ratio" => cfg.split_ratio = value(line, key, raw)?,
                "overlap_fraction" => cfg.overlap_fraction = value(line, key, raw)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.model.d_k = d_k.unwrap_or(cfg.model.dim.checked_div(cfg.model.heads).unwrap_or(0));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive");
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return bad("split_ratio must lie in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.overlap_fraction) {
            return bad("overlap_fraction must lie in [0, 0.5]");
        }
        if self.data == DataSource::Synthetic
            && (self.model.num_classes != 5 || self.model.image_channels != 3 || self.model.lesion_channels != 1)
        {
            return bad("synthetic data has 5 grades, 3 image channels and 1 lesion channel");
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let m = &self.model;
        SynthSpec { overlap_fraction: self.overlap_fraction, ..SynthSpec::new(self.seed, m.views, m.height, m.width) }
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let data = match &self.data {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Directory(p) => p.display().to_string(),
        };
        let pairs: [(&str, String); 25] = [
            ("views", m.views.to_string()),
            ("wglim_blocks", m.wglim_blocks.to_string()),
            ("image_channels", m.image_channels.to_string()),
            ("lesion_channels", m.lesion_channels.to_string()),
            ("conv_channels", m.conv_channels.to_string()),
            ("height", m.height.to_string()),
            ("width", m.width.to_string()),
            ("patch", m.patch.to_string()),
            ("dim", m.dim.to_string()),
            ("heads", m.heads.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("d_k", m.d_k.to_string()),
            ("alpha_init", format!("{:?}", m.alpha_init)),
            ("ffn_ratio", m.ffn_ratio.to_string()),
            ("interaction_band", m.interaction_band.to_string()),
            ("token_fusion", m.token_fusion.to_string()),
            ("variant", self.variant.to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("data", data),
            ("n_per_class", self.n_per_class.to_string()),
            ("split_ratio", format!("{:?}", self.split_ratio)),
            ("overlap_fraction", format!("{:?}", self.overlap_fraction)),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
