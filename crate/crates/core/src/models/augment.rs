//! Random affine augmentation (rotation, translation, isotropic scale) with
//! bilinear resampling and zero fill outside the frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Rotation drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Shift per axis drawn from `[-max, max]` times the image side.
    pub max_translation_frac: f64,
    /// Scale factor drawn from `[1 - max, 1 + max]`.
    pub max_scale_frac: f64,
}

impl AugmentationPolicy {
    pub const NONE: AugmentationPolicy = AugmentationPolicy {
        max_rotation_deg: 0.0,
        max_translation_frac: 0.0,
        max_scale_frac: 0.0,
    };

    /// Named levels used by the augmentation study, from none to strong.
    pub fn level(level: usize) -> Result<Self> {
        const LEVELS: [AugmentationPolicy; 4] = [
            AugmentationPolicy::NONE,
            AugmentationPolicy {
                max_rotation_deg: 5.0,
                max_translation_frac: 0.03,
                max_scale_frac: 0.03,
            },
            AugmentationPolicy {
                max_rotation_deg: 10.0,
                max_translation_frac: 0.06,
                max_scale_frac: 0.06,
            },
            AugmentationPolicy {
                max_rotation_deg: 45.0,
                max_translation_frac: 0.15,
                max_scale_frac: 0.15,
            },
        ];
        LEVELS
            .get(level)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("augmentation level {level} not in 0..=3")))
    }

    pub fn is_identity(&self) -> bool {
        self.max_rotation_deg == 0.0
            && self.max_translation_frac == 0.0
            && self.max_scale_frac == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_rotation_deg >= 0.0
            && (0.0..1.0).contains(&self.max_translation_frac)
            && (0.0..1.0).contains(&self.max_scale_frac);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid augmentation policy {self:?}"
            )))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> AffineParams {
        let mut draw = |max: f64| {
            if max > 0.0 {
                rng.random_range(-max..=max)
            } else {
                0.0
            }
        };
        AffineParams {
            angle_deg: draw(self.max_rotation_deg),
            tx: draw(self.max_translation_frac),
            ty: draw(self.max_translation_frac),
            scale: 1.0 + draw(self.max_scale_frac),
        }
    }
}

/// One concrete transform. Translations are fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        angle_deg: 0.0,
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
    };

    pub fn rotation(angle_deg: f64) -> Self {
        Self {
            angle_deg,
            ..Self::IDENTITY
        }
    }
}

pub fn augment<R: Rng>(img: &Image, policy: &AugmentationPolicy, rng: &mut R) -> Image {
    if policy.is_identity() {
        return img.clone();
    }
    apply_affine(img, &policy.sample(rng))
}

/// Transforms about the image centre. A 90 degree rotation maps
/// `[[a, b], [c, d]]` to `[[b, d], [a, c]]`.
pub fn apply_affine(img: &Image, p: &AffineParams) -> Image {
    if *p == AffineParams::IDENTITY {
        return img.clone();
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let (tx, ty) = (p.tx * w as f64, p.ty * h as f64);
    let src = img.data();
    let fetch = |x: isize, y: isize, c: usize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src[(y as usize * w + x as usize) * ch + c]
        }
    };
    let mut data = vec![0.0; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5 - cx - tx, y as f64 + 0.5 - cy - ty);
            let sx = (cos * px - sin * py) / p.scale + cx - 0.5;
            let sy = (sin * px + cos * py) / p.scale + cy - 0.5;
            if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..ch {
                let top = fetch(x0, y0, c) * (1.0 - fx) + fetch(x0 + 1, y0, c) * fx;
                let bottom = fetch(x0, y0 + 1, c) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, c) * fx;
                data[(y * w + x) * ch + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Image::new(
        w,
        h,
        ch,
        data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
    .expect("same geometry")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_policy_is_bit_exact_identity() {
        let img = Image::new(3, 2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentationPolicy::NONE, &mut rng), img);
    }

    #[test]
    fn quarter_turn_of_two_by_two() {
        let (a, b, c, d) = (0.1, 0.2, 0.3, 0.4);
        let img = Image::new(2, 2, 1, vec![a, b, c, d]).unwrap();
        let out = apply_affine(&img, &AffineParams::rotation(90.0));
        for (got, want) in out.data().iter().zip([b, d, a, c]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn translation_fills_with_zero() {
        let img = Image::filled(4, 4, 1.0).unwrap();
        let out = apply_affine(
            &img,
            &AffineParams {
                tx: 0.5,
                ..AffineParams::IDENTITY
            },
        );
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(1, 2, 0), 0.0);
        assert_eq!(out.get(3, 1, 0), 1.0);
    }

    #[test]
    fn levels() {
        assert!(AugmentationPolicy::level(0).unwrap().is_identity());
        assert!(AugmentationPolicy::level(4).is_err());
    }

    #[test]
    fn draws_stay_within_policy_bounds() {
        let p = AugmentationPolicy::level(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let a = p.sample(&mut rng);
            assert!(a.angle_deg.abs() <= 45.0);
            assert!(a.tx.abs() <= 0.15 && a.ty.abs() <= 0.15);
            assert!((0.85..=1.15).contains(&a.scale));
        }
    }
}
