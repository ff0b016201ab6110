//! Weak and strong stochastic image transforms.
//!
//! The weak transform is a horizontal flip plus a small integer translation
//! with edge replication. The strong transform runs the weak stage (same
//! draws for the same key), then `ops_per_sample` photometric operations
//! picked uniformly from the policy's menu, then cutout. Images are single
//! `[C, H, W]` tensors; every output is clamped to `value_range`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::{AugKey, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongOp {
    /// Multiply every pixel by a factor.
    Brightness,
    /// Scale deviations from the per-channel mean.
    Contrast,
    /// Additive Gaussian noise.
    Noise,
    /// Posterize to a small number of levels.
    Quantize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub flip_probability: f64,
    pub max_translate_fraction: f64,
    pub strong_ops: Vec<StrongOp>,
    pub ops_per_sample: usize,
    pub cutout_fraction: f64,
    /// Per-channel cutout fill; a single value is broadcast. The trainer sets
    /// this to the dataset channel mean.
    pub cutout_fill: Vec<f64>,
    pub value_range: (f64, f64),
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub noise_max_std: f64,
    pub quantize_levels: (u32, u32),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::weak()
    }
}

impl AugmentPolicy {
    /// Flip with p = 0.5 and up to 12.5% translation.
    pub fn weak() -> Self {
        Self {
            kind: AugmentKind::Weak,
            flip_probability: 0.5,
            max_translate_fraction: 0.125,
            strong_ops: Vec::new(),
            ops_per_sample: 0,
            cutout_fraction: 0.0,
            cutout_fill: vec![0.0],
            value_range: (0.0, 1.0),
            brightness_range: (0.5, 1.5),
            contrast_range: (0.5, 1.5),
            noise_max_std: 0.1,
            quantize_levels: (2, 8),
        }
    }

    /// Weak stage plus two photometric ops and cutout up to half the side.
    pub fn strong() -> Self {
        Self {
            kind: AugmentKind::Strong,
            strong_ops: vec![StrongOp::Brightness, StrongOp::Contrast, StrongOp::Noise, StrongOp::Quantize],
            ops_per_sample: 2,
            cutout_fraction: 0.5,
            ..Self::weak()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            bail!(Config, "flip probability {} not in [0, 1]", self.flip_probability);
        }
        if !(0.0..=0.5).contains(&self.max_translate_fraction) {
            bail!(Config, "translate fraction {} not in [0, 0.5]", self.max_translate_fraction);
        }
        if !(0.0..=0.5).contains(&self.cutout_fraction) {
            bail!(Config, "cutout fraction {} not in [0, 0.5]", self.cutout_fraction);
        }
        if self.value_range.0 >= self.value_range.1 {
            bail!(Config, "empty value range {:?}", self.value_range);
        }
        if self.cutout_fill.is_empty() {
            bail!(Config, "cutout fill needs at least one value");
        }
        if self.kind == AugmentKind::Strong {
            if self.strong_ops.is_empty() {
                bail!(Config, "strong policy with an empty op set");
            }
            let (lo, hi) = self.quantize_levels;
            if lo < 2 || hi < lo {
                bail!(Config, "quantize levels {:?} must satisfy 2 <= lo <= hi", self.quantize_levels);
            }
            if self.brightness_range.0 > self.brightness_range.1 || self.contrast_range.0 > self.contrast_range.1 {
                bail!(Config, "inverted magnitude range");
            }
            if !(self.noise_max_std >= 0.0) {
                bail!(Config, "noise std must be nonnegative");
            }
        }
        Ok(())
    }
}

/// Parameters of one weak draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeakParams {
    pub flip: bool,
    pub dx: i64,
    pub dy: i64,
}

impl WeakParams {
    pub fn draw(policy: &AugmentPolicy, height: usize, width: usize, rng: &mut Rng) -> Self {
        let flip = rng.random::<f64>() < policy.flip_probability;
        let max_x = (policy.max_translate_fraction * width as f64) as i64;
        let max_y = (policy.max_translate_fraction * height as f64) as i64;
        let dx = rng.random_range(-max_x..=max_x);
        let dy = rng.random_range(-max_y..=max_y);
        Self { flip, dx, dy }
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let out = if self.flip { flip_horizontal(image)? } else { image.clone() };
        if self.dx == 0 && self.dy == 0 {
            return Ok(out);
        }
        translate(&out, self.dx, self.dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpDraw {
    Brightness(f64),
    Contrast(f64),
    /// Noise standard deviation and the seed of the per-pixel noise stream.
    Noise(f64, u64),
    Quantize(u32),
}

/// Cutout rectangle `[y0, y1) x [x0, x1)` (already clipped to the image).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutoutRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrongParams {
    pub weak: WeakParams,
    pub ops: Vec<OpDraw>,
    pub cutout: Option<CutoutRect>,
}

impl StrongParams {
    pub fn draw(policy: &AugmentPolicy, height: usize, width: usize, key: AugKey) -> Result<Self> {
        policy.validate()?;
        if policy.strong_ops.is_empty() && policy.ops_per_sample > 0 {
            bail!(Config, "strong policy with an empty op set");
        }
        let mut rng = key.rng();
        let weak = WeakParams::draw(policy, height, width, &mut rng);
        let mut ops = Vec::with_capacity(policy.ops_per_sample);
        for _ in 0..policy.ops_per_sample {
            let op = policy.strong_ops[rng.random_range(0..policy.strong_ops.len())];
            ops.push(match op {
                StrongOp::Brightness => OpDraw::Brightness(uniform(&mut rng, policy.brightness_range)),
                StrongOp::Contrast => OpDraw::Contrast(uniform(&mut rng, policy.contrast_range)),
                StrongOp::Noise => OpDraw::Noise(rng.random::<f64>() * policy.noise_max_std, rng.random()),
                StrongOp::Quantize => {
                    let (lo, hi) = policy.quantize_levels;
                    OpDraw::Quantize(rng.random_range(lo..=hi))
                }
            });
        }
        let cutout = (policy.cutout_fraction > 0.0).then(|| {
            let max_side = libm::round(policy.cutout_fraction * height.min(width) as f64).max(1.0) as usize;
            let side = rng.random_range(1..=max_side);
            let cy = rng.random_range(0..height);
            let cx = rng.random_range(0..width);
            let y0 = cy.saturating_sub(side / 2);
            let x0 = cx.saturating_sub(side / 2);
            CutoutRect {
                y0,
                y1: (cy + side - side / 2).min(height),
                x0,
                x1: (cx + side - side / 2).min(width),
            }
        });
        Ok(Self { weak, ops, cutout })
    }

    pub fn apply(&self, policy: &AugmentPolicy, image: &Tensor) -> Result<Tensor> {
        let mut out = self.weak.apply(image)?;
        let (c, h, w) = image_dims(image)?;
        let (lo, hi) = policy.value_range;
        let plane = h * w;
        for op in &self.ops {
            match *op {
                OpDraw::Brightness(f) => out.data_mut().iter_mut().for_each(|v| *v *= f),
                OpDraw::Contrast(f) => {
                    for ch in 0..c {
                        let p = &mut out.data_mut()[ch * plane..][..plane];
                        let mean = p.iter().sum::<f64>() / plane as f64;
                        p.iter_mut().for_each(|v| *v = mean + f * (*v - mean));
                    }
                }
                OpDraw::Noise(std, seed) => {
                    let mut nrng = crate::rng::keyed(seed, &[]);
                    for v in out.data_mut() {
                        let z: f64 = StandardNormal.sample(&mut nrng);
                        *v += std * z;
                    }
                }
                OpDraw::Quantize(levels) => {
                    let steps = (levels - 1) as f64;
                    for v in out.data_mut() {
                        let t = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
                        *v = lo + libm::round(t * steps) / steps * (hi - lo);
                    }
                }
            }
            clamp_all(&mut out, lo, hi);
        }
        if let Some(r) = self.cutout {
            for ch in 0..c {
                let fill = policy.cutout_fill.get(ch).or(policy.cutout_fill.first()).copied().unwrap_or(0.0);
                let fill = fill.clamp(lo, hi);
                for y in r.y0..r.y1 {
                    out.data_mut()[ch * plane + y * w + r.x0..ch * plane + y * w + r.x1].fill(fill);
                }
            }
        }
        Ok(out)
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn clamp_all(t: &mut Tensor, lo: f64, hi: f64) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        ref s => bail!(Dimension, "expected an image [C, H, W], got {:?}", s),
    }
}

/// Column-reversed copy of a `[C, H, W]` image.
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (_, _, w) = image_dims(image)?;
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Moves content by `(dx, dy)` pixels; vacated pixels replicate the nearest
/// edge: `out[y][x] = in[clamp(y - dy)][clamp(x - dx)]`.
pub fn translate(image: &Tensor, dx: i64, dy: i64) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let src = image.data();
    let mut data = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                data.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Weak view of one image.
pub fn weak(policy: &AugmentPolicy, image: &Tensor, key: AugKey) -> Result<Tensor> {
    let (_, h, w) = image_dims(image)?;
    let mut rng = key.rng();
    let mut out = WeakParams::draw(policy, h, w, &mut rng).apply(image)?;
    clamp_all(&mut out, policy.value_range.0, policy.value_range.1);
    Ok(out)
}

/// Strong view of one image. With no ops and no cutout this equals
/// [`weak`] for the same key.
pub fn strong(policy: &AugmentPolicy, image: &Tensor, key: AugKey) -> Result<Tensor> {
    let (_, h, w) = image_dims(image)?;
    if policy.kind == AugmentKind::Strong && policy.strong_ops.is_empty() {
        bail!(Config, "strong policy with an empty op set");
    }
    let params = StrongParams::draw(policy, h, w, key)?;
    let mut out = params.apply(policy, image)?;
    clamp_all(&mut out, policy.value_range.0, policy.value_range.1);
    Ok(out)
}

/// Applies `policy` (weak or strong according to its kind).
pub fn augment(policy: &AugmentPolicy, image: &Tensor, key: AugKey) -> Result<Tensor> {
    match policy.kind {
        AugmentKind::Weak => weak(policy, image, key),
        AugmentKind::Strong => strong(policy, image, key),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let n = c * h * w;
        Tensor::new(vec![c, h, w], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    fn key(seed: u64) -> AugKey {
        AugKey::new(seed, 0, 0, 0)
    }

    #[test]
    fn disabled_weak_is_identity() {
        let p = AugmentPolicy { flip_probability: 0.0, max_translate_fraction: 0.0, ..AugmentPolicy::weak() };
        let x = ramp(3, 8, 8);
        for s in 0..20 {
            assert_eq!(weak(&p, &x, key(s)).unwrap(), x);
        }
    }

    #[test]
    fn forced_flip_reverses_columns_and_is_involution() {
        let p = AugmentPolicy { flip_probability: 1.0, max_translate_fraction: 0.0, ..AugmentPolicy::weak() };
        let x = ramp(2, 4, 5);
        let y = weak(&p, &x, key(3)).unwrap();
        for ch in 0..2 {
            for r in 0..4 {
                for c in 0..5 {
                    assert_eq!(y.data()[(ch * 4 + r) * 5 + c], x.data()[(ch * 4 + r) * 5 + (4 - c)]);
                }
            }
        }
        assert_eq!(weak(&p, &y, key(9)).unwrap(), x);
    }

    #[test]
    fn translate_moves_delta() {
        let mut x = Tensor::zeros(&[1, 8, 8]);
        x.data_mut()[3 * 8 + 3] = 1.0;
        let y = translate(&x, 2, -1).unwrap();
        let hot: Vec<usize> = (0..64).filter(|&i| y.data()[i] == 1.0).collect();
        assert_eq!(hot, vec![2 * 8 + 5]);
    }

    #[test]
    fn translate_replicates_edges() {
        let x = ramp(1, 4, 4);
        let y = translate(&x, 1, 0).unwrap();
        for r in 0..4 {
            assert_eq!(y.data()[r * 4], x.data()[r * 4]);
            assert_eq!(y.data()[r * 4 + 1], x.data()[r * 4]);
        }
    }

    #[test]
    fn weak_shift_range_is_an_eighth() {
        let p = AugmentPolicy::weak();
        let mut seen = [false; 9];
        for s in 0..2000 {
            let wp = WeakParams::draw(&p, 32, 32, &mut key(s).rng());
            assert!(wp.dx.abs() <= 4 && wp.dy.abs() <= 4);
            seen[(wp.dx + 4) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn strong_without_ops_equals_weak() {
        let p = AugmentPolicy { ops_per_sample: 0, cutout_fraction: 0.0, ..AugmentPolicy::strong() };
        let x = ramp(3, 8, 8);
        for s in 0..50 {
            assert_eq!(strong(&p, &x, key(s)).unwrap(), weak(&p, &x, key(s)).unwrap());
        }
    }

    #[test]
    fn empty_strong_menu_is_config_error() {
        let p = AugmentPolicy { strong_ops: Vec::new(), ..AugmentPolicy::strong() };
        assert!(strong(&p, &ramp(1, 4, 4), key(0)).is_err());
    }

    #[test]
    fn brightness_on_constant_image() {
        let p = AugmentPolicy {
            flip_probability: 0.0,
            max_translate_fraction: 0.0,
            strong_ops: vec![StrongOp::Brightness],
            ops_per_sample: 1,
            cutout_fraction: 0.0,
            ..AugmentPolicy::strong()
        };
        let x = Tensor::filled(&[3, 4, 4], 0.8);
        for s in 0..20 {
            let k = key(s);
            let params = StrongParams::draw(&p, 4, 4, k).unwrap();
            let OpDraw::Brightness(f) = params.ops[0] else { panic!() };
            let y = strong(&p, &x, k).unwrap();
            let expect = (0.8 * f).clamp(0.0, 1.0);
            assert!(y.data().iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn cutout_zeroes_drawn_rectangle() {
        let p = AugmentPolicy {
            flip_probability: 0.0,
            max_translate_fraction: 0.0,
            ops_per_sample: 0,
            cutout_fraction: 0.5,
            cutout_fill: vec![0.0],
            ..AugmentPolicy::strong()
        };
        let x = Tensor::filled(&[2, 10, 12], 1.0);
        for s in 0..100 {
            let k = key(s);
            let rect = StrongParams::draw(&p, 10, 12, k).unwrap().cutout.unwrap();
            let y = strong(&p, &x, k).unwrap();
            let mut zeros = 0;
            for ch in 0..2 {
                for r in 0..10 {
                    for c in 0..12 {
                        let inside = (rect.y0..rect.y1).contains(&r) && (rect.x0..rect.x1).contains(&c);
                        let v = y.data()[(ch * 10 + r) * 12 + c];
                        assert_eq!(v, if inside { 0.0 } else { 1.0 });
                        zeros += inside as usize;
                    }
                }
            }
            assert!(zeros > 0 && rect.y1 - rect.y0 <= 5 && rect.x1 - rect.x0 <= 5);
        }
    }

    #[test]
    fn outputs_stay_in_range() {
        let p = AugmentPolicy { ops_per_sample: 4, ..AugmentPolicy::strong() };
        let x = ramp(3, 8, 8);
        for s in 0..200 {
            let y = strong(&p, &x, key(s)).unwrap();
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
