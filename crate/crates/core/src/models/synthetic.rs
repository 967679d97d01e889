//! Deterministic phantom images standing in for chest radiographs, plus
//! out-of-distribution image families.
//!
//! A phantom is a soft elliptical thorax with two darker lung fields and a
//! brighter mediastinum on a dark background. Each flagged class adds one
//! lesion whose shape is specific to that class, placed inside a lung field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Image;

pub const PHANTOM_GENERATOR: &str = "phantom-v1";
pub const DEFAULT_PHANTOM_SIZE: usize = 64;

/// The fourteen finding names used as the default class vocabulary.
pub const DISEASE_NAMES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];

pub fn class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match DISEASE_NAMES.get(i) {
            Some(name) => name.to_string(),
            None => format!("class_{i}"),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
}

/// Circular region enclosing a lesion, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionRegion {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl LesionRegion {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub labels: Vec<bool>,
    pub provenance: Provenance,
    pub lesions: Vec<LesionRegion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodFamily {
    Noise,
    Stripes,
    Inverted,
    Blank,
}

impl OodFamily {
    pub const ALL: [OodFamily; 4] = [
        OodFamily::Noise,
        OodFamily::Stripes,
        OodFamily::Inverted,
        OodFamily::Blank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OodFamily::Noise => "noise",
            OodFamily::Stripes => "stripes",
            OodFamily::Inverted => "inverted",
            OodFamily::Blank => "blank",
        }
    }
}

impl std::str::FromStr for OodFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown OOD family `{s}`")))
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// 1 inside the ellipse, 0 outside, with a soft rim of relative width `soft`.
fn ellipse(x: f64, y: f64, cx: f64, cy: f64, ax: f64, ay: f64, soft: f64) -> f64 {
    let r = (((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2)).sqrt();
    1.0 - smoothstep(1.0 - soft, 1.0, r)
}

/// Lesion intensity profile of class `class` at offset `(dx, dy)` from its
/// centre, for unit scale `u` (pixels per 1/64 of the image).
fn lesion_profile(class: usize, dx: f64, dy: f64, u: f64) -> f64 {
    let r = (dx * dx + dy * dy).sqrt() / u;
    let (ax, ay) = (dx.abs() / u, dy.abs() / u);
    let edge = |d: f64| 1.0 - smoothstep(-0.5, 0.5, d);
    let shape = match class % 7 {
        0 => edge(r - 4.0),
        1 => edge(r - 7.0),
        2 => edge((r - 5.5).abs() - 1.5),
        3 => edge(ax - 6.0).min(edge(ay - 2.0)),
        4 => edge(ax - 2.0).min(edge(ay - 6.0)),
        5 => edge(ax - 5.0)
            .min(edge(ay - 1.5))
            .max(edge(ax - 1.5).min(edge(ay - 5.0))),
        _ => {
            let dot = |ox: f64, oy: f64| {
                edge((((dx / u) - ox).powi(2) + ((dy / u) - oy).powi(2)).sqrt() - 2.0)
            };
            dot(-3.5, -2.0).max(dot(3.5, -2.0)).max(dot(0.0, 3.5))
        }
    };
    let gain = if class < 7 { 0.4 } else { 0.25 };
    gain * shape
}

/// Radius (in units) enclosing the lesion of `class`.
fn lesion_radius(class: usize) -> f64 {
    match class % 7 {
        0 => 4.5,
        1 => 7.5,
        2 => 7.5,
        3 | 4 => 7.0,
        5 => 6.0,
        _ => 6.5,
    }
}

/// Phantom of side `size` with one lesion per flagged class.
pub fn gen_phantom(seed: u64, lesion_flags: &[bool], size: usize) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let u = s / 64.0;
    let cx = s * (0.5 + rng.random_range(-0.03..0.03));
    let cy = s * (0.52 + rng.random_range(-0.03..0.03));
    let (ax, ay) = (
        s * rng.random_range(0.36..0.42),
        s * rng.random_range(0.40..0.46),
    );
    let body = rng.random_range(0.5..0.6);
    let lung_gap = s * rng.random_range(0.16..0.19);
    let (lax, lay) = (
        s * rng.random_range(0.11..0.13),
        s * rng.random_range(0.24..0.28),
    );
    let lungs = [
        (cx - lung_gap, cy - 0.02 * s),
        (cx + lung_gap, cy - 0.02 * s),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.5) / s,
                rng.random_range(0.5..2.5) / s,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.005..0.015),
            )
        })
        .collect();

    let mut lesions = Vec::new();
    for (class, _) in lesion_flags.iter().enumerate().filter(|(_, &f)| f) {
        let (lx, ly) = lungs[rng.random_range(0..2)];
        let lcx = lx + rng.random_range(-0.45..0.45) * lax;
        let lcy = ly + rng.random_range(-0.55..0.55) * lay;
        lesions.push(LesionRegion {
            class,
            cx: lcx,
            cy: lcy,
            radius: lesion_radius(class) * u,
        });
    }

    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 0.06 + 0.04 * py / s;
            v += body * ellipse(px, py, cx, cy, ax, ay, 0.12);
            for &(lx, ly) in &lungs {
                v -= 0.28 * ellipse(px, py, lx, ly, lax, lay, 0.35);
            }
            v += 0.08 * ellipse(px, py, cx, cy + 0.05 * s, 0.05 * s, 0.3 * s, 0.5);
            for &(fx, fy, phase, amp) in &waves {
                v += amp * (std::f64::consts::TAU * (fx * px + fy * py) + phase).sin();
            }
            for lesion in &lesions {
                v += lesion_profile(lesion.class, px - lesion.cx, py - lesion.cy, u);
            }
            data.push(v);
        }
    }
    SyntheticSample {
        image: Image::gray_clamped(size, size, data).expect("sized buffer"),
        labels: lesion_flags.to_vec(),
        provenance: Provenance {
            generator: PHANTOM_GENERATOR.into(),
            seed,
        },
        lesions,
    }
}

/// Out-of-distribution image of the given family.
pub fn gen_ood(seed: u64, family: OodFamily, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00d0_00d0);
    let data: Vec<f64> = match family {
        OodFamily::Noise => (0..size * size).map(|_| rng.random::<f64>()).collect(),
        OodFamily::Stripes => {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(4.0..12.0) * size as f64 / 64.0;
            let (c, s) = (angle.cos(), angle.sin());
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    0.5 + 0.45 * (std::f64::consts::TAU * (c * x + s * y) / period).sin()
                })
                .collect()
        }
        OodFamily::Inverted => {
            let flags: Vec<bool> = (0..4).map(|_| rng.random_bool(0.5)).collect();
            gen_phantom(seed, &flags, size)
                .image
                .into_data()
                .into_iter()
                .map(|v| 1.0 - v)
                .collect()
        }
        OodFamily::Blank => vec![0.0; size * size],
    };
    Image::gray_clamped(size, size, data).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantoms_are_deterministic() {
        let a = gen_phantom(7, &[true, false, true], 64);
        let b = gen_phantom(7, &[true, false, true], 64);
        assert_eq!(a, b);
        assert_ne!(a.image, gen_phantom(8, &[true, false, true], 64).image);
        assert_eq!(a.lesions.len(), 2);
    }

    #[test]
    fn lesion_region_is_brighter_than_surroundings() {
        for class in 0..14 {
            let mut flags = vec![false; 14];
            flags[class] = true;
            let s = gen_phantom(100 + class as u64, &flags, 64);
            let clean = gen_phantom(100 + class as u64, &[false; 14], 64);
            let region = s.lesions[0];
            let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
            for y in 0..64 {
                for x in 0..64 {
                    let v = s.image.get(x, y, 0);
                    if region.contains(x, y) {
                        inside += v;
                        n_in += 1;
                    } else {
                        outside += v;
                        n_out += 1;
                    }
                }
            }
            assert!(
                inside / n_in as f64 > outside / n_out as f64,
                "class {class}"
            );
            assert!(s.labels[class]);
            assert_ne!(s.image, clean.image);
        }
    }

    #[test]
    fn ood_families() {
        assert!(gen_ood(1, OodFamily::Blank, 32)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            gen_ood(3, OodFamily::Noise, 32),
            gen_ood(3, OodFamily::Noise, 32)
        );
        let stripes = gen_ood(2, OodFamily::Stripes, 32);
        assert!(stripes.data().iter().any(|&v| v > 0.8) && stripes.data().iter().any(|&v| v < 0.2));
        for f in OodFamily::ALL {
            assert_eq!(f.as_str().parse::<OodFamily>().unwrap(), f);
        }
    }

    #[test]
    fn class_names_cover_defaults() {
        assert_eq!(class_names(14)[13], "Hernia");
        assert_eq!(class_names(15)[14], "class_14");
    }
}
