use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::{Dataset, Sample};

/// How a grade's lesions are spread over the retina.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scatter {
    Uniform,
    /// Lesions gather around a few random foci.
    Clustered,
}

/// Lesion burden of one grade. Ranges are inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradeProfile {
    pub count: (usize, usize),
    pub radius: (f64, f64),
    pub scatter: Scatter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// One profile per class, index = grade.
    pub profiles: Vec<GradeProfile>,
    /// Fraction of each view's width copied into its neighbor, in `[0, 0.5]`.
    pub overlap_fraction: f64,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, views: usize, height: usize, width: usize) -> Self {
        Self { seed, views, height, width, profiles: Self::default_profiles(), overlap_fraction: 0.25, noise: 0.02 }
    }

    /// Five grades with strictly increasing lesion count and size.
    pub fn default_profiles() -> Vec<GradeProfile> {
        use Scatter::*;
        vec![
            GradeProfile { count: (0, 0), radius: (0.0, 0.0), scatter: Uniform },
            GradeProfile { count: (1, 2), radius: (1.5, 2.5), scatter: Uniform },
            GradeProfile { count: (4, 6), radius: (2.0, 3.0), scatter: Uniform },
            GradeProfile { count: (8, 11), radius: (2.5, 3.5), scatter: Clustered },
            GradeProfile { count: (14, 18), radius: (3.0, 4.0), scatter: Clustered },
        ]
    }

    pub fn classes(&self) -> usize {
        self.profiles.len()
    }

    pub fn overlap_width(&self) -> usize {
        (self.overlap_fraction.clamp(0.0, 0.5) * self.width as f64).round() as usize
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one sample, keyed by `(seed, grade, index)`.
pub fn sample_rng(seed: u64, grade: usize, index: u64) -> Xoshiro256StarStar {
    let key = splitmix(splitmix(seed) ^ grade as u64) ^ index;
    Xoshiro256StarStar::seed_from_u64(splitmix(key))
}

pub(super) fn sample_id(seed: u64, grade: usize, index: u64) -> String {
    format!("syn{seed}-g{grade}-{index:05}")
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

const EXUDATE: [f64; 3] = [0.97, 0.88, 0.45];
const HEMORRHAGE: [f64; 3] = [0.32, 0.04, 0.02];
const FUNDUS: [f64; 3] = [0.78, 0.36, 0.16];
const OPTIC_DISC: [f64; 3] = [0.95, 0.78, 0.52];

/// Renders one multi-view sample of the given grade.
///
/// # Panics
/// If `grade` has no profile in `spec`.
pub fn generate_sample(spec: &SynthSpec, grade: usize, index: u64) -> Sample {
    let profile = spec.profiles[grade];
    let mut rng = sample_rng(spec.seed, grade, index);
    let (v_count, h, w) = (spec.views, spec.height, spec.width);
    let plane = h * w;
    let mut image = vec![0.0; v_count * 3 * plane];
    let mut lesion = vec![0.0; v_count * plane];
    let scale = h.min(w) as f64;
    let radius = 0.46 * scale;

    let mut centers = Vec::with_capacity(v_count);
    for v in 0..v_count {
        let cx = w as f64 / 2.0 + rng.gen_range(-0.03..=0.03) * scale;
        let cy = h as f64 / 2.0 + rng.gen_range(-0.03..=0.03) * scale;
        let gain = rng.gen_range(0.85..=1.05);
        let disc = (
            cx + rng.gen_range(-0.25..=0.25) * scale,
            cy + rng.gen_range(-0.2..=0.2) * scale,
            rng.gen_range(0.06..=0.09) * scale,
        );
        centers.push((cx, cy));
        let img = &mut image[v * 3 * plane..(v + 1) * 3 * plane];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let r = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() / radius;
                let rgb = if r > 1.0 {
                    [0.02; 3]
                } else {
                    let vignette = gain * (1.0 - 0.45 * r * r);
                    let in_disc = (px - disc.0).powi(2) + (py - disc.1).powi(2) <= disc.2 * disc.2;
                    let base = if in_disc { OPTIC_DISC } else { FUNDUS };
                    base.map(|c| c * vignette)
                };
                for c in 0..3 {
                    img[c * plane + y * w + x] = rgb[c];
                }
            }
        }
    }

    let count = rng.gen_range(profile.count.0..=profile.count.1);
    let foci: Vec<(usize, f64, f64)> = (0..3)
        .map(|_| {
            let v = rng.gen_range(0..v_count);
            let (ang, rr) = (rng.gen_range(0.0..std::f64::consts::TAU), radius * rng.gen_range(0.0..0.6));
            (v, ang, rr)
        })
        .collect();
    for _ in 0..count {
        let (v, ang, rr) = match profile.scatter {
            Scatter::Uniform => {
                let v = rng.gen_range(0..v_count);
                (v, rng.gen_range(0.0..std::f64::consts::TAU), radius * 0.85 * rng.gen::<f64>().sqrt())
            }
            Scatter::Clustered => {
                let (v, ang, rr) = foci[rng.gen_range(0..foci.len())];
                (
                    v,
                    ang + rng.gen_range(-0.5..=0.5),
                    (rr + rng.gen_range(-0.15..=0.15) * radius).clamp(0.0, 0.85 * radius),
                )
            }
        };
        let (cx, cy) = centers[v];
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let e = Ellipse {
            cx: cx + rr * ang.cos(),
            cy: cy + rr * ang.sin(),
            a: rng.gen_range(profile.radius.0..=profile.radius.1),
            b: rng.gen_range(profile.radius.0..=profile.radius.1),
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let color = if rng.gen_bool(0.5) { EXUDATE } else { HEMORRHAGE };
        let reach = e.a.max(e.b).ceil() as isize + 1;
        let img = &mut image[v * 3 * plane..(v + 1) * 3 * plane];
        let mask = &mut lesion[v * plane..(v + 1) * plane];
        for y in (e.cy as isize - reach).max(0)..(e.cy as isize + reach + 1).min(h as isize) {
            for x in (e.cx as isize - reach).max(0)..(e.cx as isize + reach + 1).min(w as isize) {
                let (x, y) = (x as usize, y as usize);
                if e.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[y * w + x] = 1.0;
                    for c in 0..3 {
                        img[c * plane + y * w + x] = color[c];
                    }
                }
            }
        }
    }

    for px in image.iter_mut() {
        *px = (*px + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0);
    }

    // right strip of view v becomes the left strip of view v + 1
    let s = spec.overlap_width();
    for v in 0..v_count.saturating_sub(1) {
        for y in 0..h {
            for c in 0..3 {
                let src = v * 3 * plane + c * plane + y * w + (w - s);
                let dst = (v + 1) * 3 * plane + c * plane + y * w;
                image.copy_within(src..src + s, dst);
            }
            let src = v * plane + y * w + (w - s);
            lesion.copy_within(src..src + s, (v + 1) * plane + y * w);
        }
    }

    Sample {
        id: sample_id(spec.seed, grade, index),
        label: grade,
        views: v_count,
        image_channels: 3,
        lesion_channels: 1,
        height: h,
        width: w,
        image,
        lesion,
    }
}

/// Balanced train and test splits. Per class, the first
/// `round(n_per_class · split_ratio)` indices go to training. Both splits
/// interleave classes: index-major, grade-minor.
pub fn generate_dataset(spec: &SynthSpec, n_per_class: usize, split_ratio: f64) -> (Dataset, Dataset) {
    let n_train = ((n_per_class as f64 * split_ratio.clamp(0.0, 1.0)).round() as usize).min(n_per_class);
    let classes = spec.classes();
    let items = |range: std::ops::Range<usize>| {
        range.flat_map(|i| (0..classes).map(move |g| (g, i as u64))).collect::<Vec<_>>()
    };
    (Dataset::synthetic(spec.clone(), items(0..n_train)), Dataset::synthetic(spec.clone(), items(n_train..n_per_class)))
}
