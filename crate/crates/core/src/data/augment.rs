use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random image augmentation: horizontal flip, nearest-neighbour rotation,
/// zero-pad then random crop back to size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub horizontal_flip_prob: f64,
    pub max_rotation_degrees: f64,
    pub pad_and_crop: usize,
}

impl AugmentSpec {
    pub fn is_identity(&self) -> bool {
        self.horizontal_flip_prob == 0.0
            && self.max_rotation_degrees == 0.0
            && self.pad_and_crop == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::invalid("horizontal_flip_prob must be in [0, 1]"));
        }
        if !(self.max_rotation_degrees >= 0.0) || !self.max_rotation_degrees.is_finite() {
            return Err(Error::invalid(
                "max_rotation_degrees must be finite and ≥ 0",
            ));
        }
        Ok(())
    }
}

type Chw = (usize, usize, usize);

fn check(image: &[f64], (c, h, w): Chw) -> Result<()> {
    if image.len() != c * h * w {
        return Err(Error::ShapeMismatch {
            op: "augment",
            lhs: vec![c, h, w],
            rhs: vec![image.len()],
        });
    }
    Ok(())
}

pub fn flip_horizontal(image: &[f64], shape: Chw) -> Result<Vec<f64>> {
    check(image, shape)?;
    let w = shape.2;
    Ok(image
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect())
}

/// Rotate about the image centre by `degrees`; pixels sampled from
/// outside the source are zero.
pub fn rotate_nearest(image: &[f64], shape: Chw, degrees: f64) -> Result<Vec<f64>> {
    check(image, shape)?;
    let (c, h, w) = shape;
    if degrees == 0.0 {
        return Ok(image.to_vec());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; image.len()];
    for y in 0..h {
        for x in 0..w {
            // Inverse map each output pixel back into the source.
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (cos * dx - sin * dy + cx).round();
            let sy = (sin * dx + cos * dy + cy).round();
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            for ch in 0..c {
                out[(ch * h + y) * w + x] = image[(ch * h + sy) * w + sx];
            }
        }
    }
    Ok(out)
}

/// Zero-pad by `pad` on every side, then crop the original size starting at
/// `(top, left)` in padded coordinates. `(pad, pad)` is the identity.
pub fn pad_crop(
    image: &[f64],
    shape: Chw,
    pad: usize,
    top: usize,
    left: usize,
) -> Result<Vec<f64>> {
    check(image, shape)?;
    let (c, h, w) = shape;
    if top > 2 * pad || left > 2 * pad {
        return Err(Error::invalid(format!(
            "crop offset ({top}, {left}) outside padding {pad}"
        )));
    }
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        for y in 0..h {
            let Some(sy) = (y + top).checked_sub(pad).filter(|&s| s < h) else {
                continue;
            };
            for x in 0..w {
                if let Some(sx) = (x + left).checked_sub(pad).filter(|&s| s < w) {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    Ok(out)
}

pub fn augment_with(
    image: &[f64],
    shape: Chw,
    spec: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check(image, shape)?;
    let mut out = image.to_vec();
    if spec.horizontal_flip_prob > 0.0 && rng.random_bool(spec.horizontal_flip_prob) {
        out = flip_horizontal(&out, shape)?;
    }
    if spec.max_rotation_degrees > 0.0 {
        let angle = rng.random_range(-spec.max_rotation_degrees..=spec.max_rotation_degrees);
        out = rotate_nearest(&out, shape, angle)?;
    }
    if spec.pad_and_crop > 0 {
        let p = spec.pad_and_crop;
        let top = rng.random_range(0..=2 * p);
        let left = rng.random_range(0..=2 * p);
        out = pad_crop(&out, shape, p, top, left)?;
    }
    Ok(out)
}

pub fn augment(image: &[f64], shape: Chw, spec: &AugmentSpec, seed: u64) -> Result<Vec<f64>> {
    augment_with(image, shape, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> (Vec<f64>, Chw) {
        ((0..2 * 3 * 4).map(|i| i as f64 / 24.0).collect(), (2, 3, 4))
    }

    #[test]
    fn identity_cases() {
        let (img, s) = image();
        assert_eq!(augment(&img, s, &AugmentSpec::default(), 3).unwrap(), img);
        let once = flip_horizontal(&img, s).unwrap();
        assert_ne!(once, img);
        assert_eq!(flip_horizontal(&once, s).unwrap(), img);
        assert_eq!(rotate_nearest(&img, s, 0.0).unwrap(), img);
        assert_eq!(pad_crop(&img, s, 2, 2, 2).unwrap(), img);
    }

    #[test]
    fn rotation_by_180_on_odd_square() {
        let img: Vec<f64> = (0..9).map(f64::from).collect();
        let r = rotate_nearest(&img, (1, 3, 3), 180.0).unwrap();
        assert_eq!(r, img.iter().rev().copied().collect::<Vec<_>>());
    }

    #[test]
    fn pad_crop_shifts_in_zeros() {
        let img = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(
            pad_crop(&img, (1, 2, 2), 1, 0, 0).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        assert!(pad_crop(&img, (1, 2, 2), 1, 3, 0).is_err());
    }

    #[test]
    fn random_augment_preserves_shape_and_range_deterministically() {
        let (img, s) = image();
        let spec = AugmentSpec {
            horizontal_flip_prob: 0.5,
            max_rotation_degrees: 15.0,
            pad_and_crop: 1,
        };
        for seed in 0..20 {
            let a = augment(&img, s, &spec, seed).unwrap();
            assert_eq!(a.len(), img.len());
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a, augment(&img, s, &spec, seed).unwrap());
        }
    }
}
