//! Procedural shape dataset.
//!
//! Class `n` is a geometric primitive (cycled from a fixed menu) drawn in its
//! own color family (hues spaced evenly around the wheel) over a dark,
//! noisy background. `difficulty` in `[0, 1]` widens the hue band of each
//! family towards its neighbours, widens the position and size jitter,
//! raises pixel noise and adds distractor blobs. Hue bands never overlap, so
//! every difficulty stays learnable; at difficulty 0 color alone separates
//! classes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{stratified_split, Dataset, ImageSet};
use crate::error::{bail, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Disc,
    Square,
    Cross,
    Ring,
    HorizontalBars,
    VerticalBars,
    Triangle,
    Diamond,
}

impl Primitive {
    pub const MENU: [Primitive; 8] = [
        Self::Disc,
        Self::Square,
        Self::Cross,
        Self::Ring,
        Self::HorizontalBars,
        Self::VerticalBars,
        Self::Triangle,
        Self::Diamond,
    ];

    /// Whether normalized coordinates `(u, v)` (object radius = 1) are inside.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        let stripes = |t: f64| libm::floor((t + 1.0) * 2.0) as i64 % 2 == 0;
        match self {
            Self::Disc => r2 <= 1.0,
            Self::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Self::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Self::Ring => (0.36..=1.0).contains(&r2),
            Self::HorizontalBars => u.abs() <= 0.9 && v.abs() <= 0.9 && stripes(v),
            Self::VerticalBars => u.abs() <= 0.9 && v.abs() <= 0.9 && stripes(u),
            Self::Triangle => (-0.8..=0.8).contains(&v) && u.abs() <= (v + 0.8) / 1.6,
            Self::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub difficulty: f64,
    pub seed: u64,
    pub test_fraction: f64,
    /// Per-class extra difficulty added to `difficulty` (missing entries are
    /// zero). Lets a test manufacture classes that are harder to learn.
    pub class_difficulty: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 500,
            image_size: 16,
            difficulty: 0.0,
            seed: 0,
            test_fraction: 0.2,
            class_difficulty: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Config, "synthetic data needs at least two classes");
        }
        if self.num_classes > u16::MAX as usize {
            bail!(Config, "too many classes");
        }
        if self.samples_per_class == 0 {
            bail!(Config, "samples per class must be positive");
        }
        if self.image_size < 4 {
            bail!(Config, "image size must be at least 4");
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            bail!(Config, "difficulty must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            bail!(Config, "test fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn dataset_id(&self) -> String {
        format!(
            "synthetic-n{}-m{}-s{}-d{}-seed{}",
            self.num_classes, self.samples_per_class, self.image_size, self.difficulty, self.seed
        )
    }

    fn class_difficulty(&self, class: usize) -> f64 {
        (self.difficulty + self.class_difficulty.get(class).copied().unwrap_or(0.0)).clamp(0.0, 1.0)
    }
}

/// RGB of a fully saturated hue in `[0, 1)`.
fn hue_rgb(h: f64) -> [f64; 3] {
    let h6 = (h - libm::floor(h)) * 6.0;
    let f = h6 - libm::floor(h6);
    match h6 as u32 {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Renders sample `sample` of `class` as a `[3, S, S]` image.
pub fn render(spec: &SyntheticSpec, class: usize, sample: usize) -> Vec<f64> {
    let s = spec.image_size;
    let d = spec.class_difficulty(class);
    let n = spec.num_classes;
    let mut r = rng::keyed(spec.seed, &[rng::stream::SYNTHETIC, class as u64, sample as u64]);
    let sf = s as f64;

    let primitive = Primitive::MENU[class % Primitive::MENU.len()];
    // hue spreads uniformly around the class centre; at d = 1 it reaches
    // 0.45 of the way to the neighbouring centres
    let spread = 0.05 + 0.40 * d;
    let hue = (class as f64 + spread * (2.0 * r.random::<f64>() - 1.0)) / n as f64;
    let value = 0.65 + 0.35 * r.random::<f64>();
    let color = hue_rgb(hue).map(|c| value * (0.15 + 0.85 * c));

    let jitter = (0.06 + 0.18 * d) * sf;
    let cx = sf / 2.0 + jitter * (2.0 * r.random::<f64>() - 1.0);
    let cy = sf / 2.0 + jitter * (2.0 * r.random::<f64>() - 1.0);
    let radius = sf * (0.30 + (0.05 + 0.10 * d) * (2.0 * r.random::<f64>() - 1.0));

    let bg = 0.1 + 0.15 * r.random::<f64>();
    let noise = 0.02 + 0.12 * d;

    let distractor = (r.random::<f64>() < d).then(|| {
        let c = hue_rgb(r.random::<f64>()).map(|c| 0.5 * c + 0.1);
        let x = sf * r.random::<f64>();
        let y = sf * r.random::<f64>();
        let rad = sf * (0.08 + 0.12 * d * r.random::<f64>());
        (c, x, y, rad)
    });

    let mut img = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = [bg; 3];
            if let Some((c, dx, dy, rad)) = distractor {
                if (px - dx) * (px - dx) + (py - dy) * (py - dy) <= rad * rad {
                    rgb = c;
                }
            }
            if primitive.contains((px - cx) / radius, (py - cy) / radius) {
                rgb = color;
            }
            for ch in 0..3 {
                let v = rgb[ch] + noise * gauss(&mut r);
                img[(ch * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Generates the balanced dataset and its stratified train/test split.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, m, s) = (spec.num_classes, spec.samples_per_class, spec.image_size);
    let total = n * m;
    let mut labels = Vec::with_capacity(total);
    let mut pixels = Vec::with_capacity(total * 3 * s * s);
    // interleave classes so the pool has no class-ordered runs
    for i in 0..m {
        for c in 0..n {
            labels.push(c as u16);
            pixels.extend(render(spec, c, i));
        }
    }
    let all = Tensor::new(vec![total, 3, s, s], pixels)?;
    let (train_idx, test_idx) = stratified_split(&labels, n, spec.test_fraction, spec.seed);
    let subset = |idx: &[usize]| -> Result<ImageSet> {
        ImageSet::new(all.gather_rows(idx)?, idx.iter().map(|&i| labels[i]).collect())
    };
    Dataset::new(spec.dataset_id(), n, subset(&train_idx)?, subset(&test_idx)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_sized() {
        let spec = SyntheticSpec { num_classes: 4, samples_per_class: 50, image_size: 8, ..Default::default() };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 200);
        assert_eq!(ds.class_histogram(), vec![50; 4]);
        assert_eq!(ds.test.len(), 40);
        assert!(ds.train.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec { samples_per_class: 10, image_size: 8, difficulty: 0.5, ..Default::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train.images(), b.train.images());
        let c = generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train.images(), c.train.images());
    }

    #[test]
    fn invalid_specs() {
        assert!(SyntheticSpec { num_classes: 1, ..Default::default() }.validate().is_err());
        assert!(SyntheticSpec { difficulty: 1.5, ..Default::default() }.validate().is_err());
    }
}
