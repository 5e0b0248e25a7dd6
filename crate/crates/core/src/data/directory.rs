use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::pnm::{read_pnm, write_pgm, write_ppm};
use super::{DataError, Dataset, Sample};

/// Samples left out while loading a directory, with the reason for each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SkipReport {
    pub skipped: Vec<(PathBuf, String)>,
}

impl SkipReport {
    pub fn len(&self) -> usize {
        self.skipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skipped.is_empty()
    }
}

impl fmt::Display for SkipReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "skipped {} sample(s)", self.skipped.len())?;
        for (path, reason) in &self.skipped {
            writeln!(f, "{}\t{reason}", path.display())?;
        }
        Ok(())
    }
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(path)? {
        let p = entry?.path();
        if p.is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Loads `root/<split>/<grade>/<sample_id>/view{k}.ppm` with optional
/// `view{k}_lesion.pgm` masks for `k = 1..=views`.
///
/// Samples with fewer than `views` images are skipped and listed in the
/// report. Grade directories must be named by their integer label.
pub fn load_directory_dataset(root: &Path, split: &str, views: usize) -> Result<(Dataset, SkipReport), DataError> {
    let base = root.join(split);
    let mut samples: Vec<Sample> = Vec::new();
    let mut report = SkipReport::default();
    for grade_dir in sorted_dirs(&base)? {
        let Some(grade) = grade_dir.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<usize>().ok()) else {
            warn!("ignoring non-grade directory {}", grade_dir.display());
            continue;
        };
        for sample_dir in sorted_dirs(&grade_dir)? {
            match load_sample(&sample_dir, grade, views) {
                Ok(s) => {
                    if let Some(first) = samples.first() {
                        if (first.height, first.width) != (s.height, s.width) {
                            return Err(DataError::Inconsistent {
                                sample: s.id,
                                reason: format!(
                                    "{}x{} differs from {}x{}",
                                    s.height, s.width, first.height, first.width
                                ),
                            });
                        }
                    }
                    samples.push(s);
                }
                Err(e @ DataError::MissingView { .. }) => {
                    warn!("skipping {}: {e}", sample_dir.display());
                    report.skipped.push((sample_dir, e.to_string()));
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((Dataset::from_samples(samples), report))
}

fn load_sample(dir: &Path, grade: usize, views: usize) -> Result<Sample, DataError> {
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let found = (1..=views).take_while(|k| dir.join(format!("view{k}.ppm")).is_file()).count();
    if found < views {
        return Err(DataError::MissingView { sample: id, found, expected: views });
    }
    let mut image = Vec::new();
    let mut lesion = Vec::new();
    let mut dims = None;
    for k in 1..=views {
        let path = dir.join(format!("view{k}.ppm"));
        let img = read_pnm(&path)?;
        if img.channels != 3 {
            return Err(DataError::MalformedImage { path, reason: "expected a P6 image".into() });
        }
        if *dims.get_or_insert((img.height, img.width)) != (img.height, img.width) {
            return Err(DataError::MalformedImage { path, reason: "view dimensions differ".into() });
        }
        let lesion_path = dir.join(format!("view{k}_lesion.pgm"));
        if lesion_path.is_file() {
            let mask = read_pnm(&lesion_path)?;
            if mask.channels != 1 || (mask.height, mask.width) != (img.height, img.width) {
                return Err(DataError::MalformedImage {
                    path: lesion_path,
                    reason: "lesion mask must be a P5 image matching its view".into(),
                });
            }
            lesion.extend(mask.data.iter().map(|&v| if v >= 128.0 / 255.0 { 1.0 } else { 0.0 }));
        } else {
            warn!("{}: no lesion mask, using zeros", lesion_path.display());
            lesion.extend(std::iter::repeat_n(0.0, img.height * img.width));
        }
        image.extend(img.data);
    }
    let (height, width) = dims.unwrap_or((0, 0));
    Ok(Sample { id, label: grade, views, image_channels: 3, lesion_channels: 1, height, width, image, lesion })
}

/// Writes every sample of `dataset` under `root/<split>/<grade>/<id>/`.
pub fn write_directory_dataset(root: &Path, split: &str, dataset: &Dataset) -> Result<(), DataError> {
    for i in 0..dataset.len() {
        let s = dataset.sample(i);
        let dir = root.join(split).join(s.label.to_string()).join(&s.id);
        fs::create_dir_all(&dir)?;
        for v in 0..s.views {
            write_ppm(&dir.join(format!("view{}.ppm", v + 1)), s.height, s.width, s.view_image(v))?;
            write_pgm(
                &dir.join(format!("view{}_lesion.pgm", v + 1)),
                s.height,
                s.width,
                &s.view_lesion(v)[..s.height * s.width],
            )?;
        }
    }
    Ok(())
}
