//! Multi-view samples, batches and dataset sources.

mod directory;
mod pnm;
mod synth;

pub use directory::{load_directory_dataset, write_directory_dataset, SkipReport};
pub use pnm::{parse_pnm, read_pnm, write_pgm, write_ppm, PnmImage};
pub use synth::{generate_dataset, generate_sample, sample_rng, GradeProfile, Scatter, SynthSpec};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed image {path}: {reason}")]
    MalformedImage { path: PathBuf, reason: String },
    #[error("sample {sample} has {found} of {expected} views")]
    MissingView { sample: String, found: usize, expected: usize },
    #[error("inconsistent sample {sample}: {reason}")]
    Inconsistent { sample: String, reason: String },
    #[error("value out of range: {0}")]
    Range(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One multi-view sample. Pixel buffers are `[V, C, H, W]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub views: usize,
    pub image_channels: usize,
    pub lesion_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Values in `[0, 1]`.
    pub image: Vec<f64>,
    /// Values exactly 0 or 1.
    pub lesion: Vec<f64>,
}

impl Sample {
    pub fn view_image(&self, v: usize) -> &[f64] {
        let n = self.image_channels * self.height * self.width;
        &self.image[v * n..(v + 1) * n]
    }

    pub fn view_lesion(&self, v: usize) -> &[f64] {
        let n = self.lesion_channels * self.height * self.width;
        &self.lesion[v * n..(v + 1) * n]
    }

    pub fn lesion_area(&self) -> f64 {
        self.lesion.iter().sum()
    }
}

/// `B` samples stacked view-major: row `v·B + b` holds view `v` of sample `b`.
#[derive(Clone, Debug)]
pub struct MultiViewBatch {
    pub views: usize,
    /// `[V·B, Cx, H, W]`
    pub images: Tensor,
    /// `[V·B, Cl, H, W]`
    pub lesions: Tensor,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<String>,
}

impl MultiViewBatch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self, DataError> {
        let first = samples.first().ok_or_else(|| DataError::Range("empty batch".into()))?;
        let (v, cx, cl, h, w) = (first.views, first.image_channels, first.lesion_channels, first.height, first.width);
        for s in samples {
            if (s.views, s.image_channels, s.lesion_channels, s.height, s.width) != (v, cx, cl, h, w) {
                return Err(DataError::Inconsistent {
                    sample: s.id.clone(),
                    reason: "geometry differs within batch".into(),
                });
            }
        }
        let b = samples.len();
        let mut images = Vec::with_capacity(v * b * cx * h * w);
        let mut lesions = Vec::with_capacity(v * b * cl * h * w);
        for view in 0..v {
            for s in samples {
                images.extend_from_slice(s.view_image(view));
                lesions.extend_from_slice(s.view_lesion(view));
            }
        }
        let to_err = |e: crate::tensor::TensorError| DataError::Range(e.to_string());
        Ok(Self {
            views: v,
            images: Tensor::new([v * b, cx, h, w], images).map_err(to_err)?,
            lesions: Tensor::new([v * b, cl, h, w], lesions).map_err(to_err)?,
            labels: samples.iter().map(|s| s.label).collect(),
            sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Source {
    Synthetic { spec: SynthSpec, items: Vec<(usize, u64)> },
    Memory(Vec<Sample>),
}

/// An ordered collection of samples. Synthetic datasets regenerate samples
/// on demand from `(spec, grade, index)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    source: Source,
}

impl Dataset {
    pub fn synthetic(spec: SynthSpec, items: Vec<(usize, u64)>) -> Self {
        Self { source: Source::Synthetic { spec, items } }
    }

    pub fn from_samples(samples: Vec<Sample>) -> Self {
        Self { source: Source::Memory(samples) }
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Synthetic { items, .. } => items.len(),
            Source::Memory(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, i: usize) -> Sample {
        match &self.source {
            Source::Synthetic { spec, items } => {
                let (grade, index) = items[i];
                generate_sample(spec, grade, index)
            }
            Source::Memory(s) => s[i].clone(),
        }
    }

    pub fn label(&self, i: usize) -> usize {
        match &self.source {
            Source::Synthetic { items, .. } => items[i].0,
            Source::Memory(s) => s[i].label,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn sample_id(&self, i: usize) -> String {
        match &self.source {
            Source::Synthetic { spec, items } => synth::sample_id(spec.seed, items[i].0, items[i].1),
            Source::Memory(s) => s[i].id.clone(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<MultiViewBatch, DataError> {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.sample(i)).collect();
        MultiViewBatch::from_samples(&samples)
    }

    /// Consecutive batches in dataset order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<MultiViewBatch, DataError>> + '_ {
        let n = self.len();
        let order: Vec<usize> = (0..n).collect();
        (0..n.div_ceil(batch_size.max(1))).map(move |k| {
            let end = ((k + 1) * batch_size).min(n);
            self.batch(&order[k * batch_size..end])
        })
    }
}
