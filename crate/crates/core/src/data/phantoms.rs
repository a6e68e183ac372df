//! Two-site brain-like phantoms with a known, spatially structured site effect.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::imageset::ImageSet;
use crate::error::{ensure, Result};
use crate::ndtensor::Tensor;
use crate::rng::{derive_indexed, rng_from};

/// Smooth 0..1 step of width `w` around `edge` (1 inside).
fn soft_inside(r: f64, edge: f64, w: f64) -> f64 {
    (0.5 - (r - edge) / w).clamp(0.0, 1.0)
}

struct Anatomy {
    image: Tensor,
    blob_radius: f64,
}

fn phantom(size: usize, rng: &mut impl Rng) -> Anatomy {
    let scale = rng.gen_range(0.80..1.0);
    let a = scale * rng.gen_range(0.66..0.84);
    let b = scale * rng.gen_range(0.80..0.96);
    let rot = rng.gen_range(-0.35..0.35f64);
    let (cx, cy) = (rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12));
    let lobes = rng.gen_range(0.02..0.10);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let cortex = rng.gen_range(0.70..0.86);
    let white = rng.gen_range(0.46..0.62);
    let core = rng.gen_range(0.26..0.40);
    let inner_edge = rng.gen_range(0.38..0.52);
    let outer_edge = rng.gen_range(0.72..0.84);
    let blob_radius = scale * rng.gen_range(0.10..0.24);
    let blob_level = rng.gen_range(0.88..0.96);
    let (bx, by) = (
        cx + rng.gen_range(-0.05..0.05),
        cy + rng.gen_range(-0.05..0.05),
    );
    let (sin, cos) = rot.sin_cos();
    // edge softness of about one pixel in normalized units
    let w = 2.0 / size as f64;
    let image = Tensor::from_fn(&[1, size, size], |i| {
        let u = 2.0 * ((i % size) as f64 + 0.5) / size as f64 - 1.0 - cx;
        let v = 2.0 * ((i / size) as f64 + 0.5) / size as f64 - 1.0 - cy;
        let (ru, rv) = (cos * u + sin * v, -sin * u + cos * v);
        let theta = rv.atan2(ru);
        let r = ((ru / a).powi(2) + (rv / b).powi(2)).sqrt()
            / (1.0 + lobes * (3.0 * theta + phase).sin());
        let brain = soft_inside(r, 1.0, w);
        let mid = soft_inside(r, outer_edge, w);
        let inner = soft_inside(r, inner_edge, w);
        let tissue = cortex + mid * (white - cortex) + inner * (core - white);
        let rb = ((u + cx - bx).powi(2) + (v + cy - by).powi(2)).sqrt();
        let blob = soft_inside(rb, blob_radius, w);
        let v01 = brain * (tissue + blob * (blob_level - tissue));
        2.0 * v01 - 1.0
    });
    Anatomy { image, blob_radius }
}

/// `n` phantoms of `size x size`. Label 1 marks the larger-blob half: the
/// `n / 2` smallest blobs are 0, the rest 1.
pub fn generate_phantoms(n: usize, size: usize, seed: u64) -> Result<ImageSet> {
    ensure!(
        size > 0 && size.is_multiple_of(4),
        Config,
        "phantom size must be a positive multiple of 4, got {size}"
    );
    let anatomies: Vec<Anatomy> = (0..n)
        .map(|i| {
            phantom(
                size,
                &mut rng_from(derive_indexed(seed, "phantom", i as u64)),
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        anatomies[i]
            .blob_radius
            .total_cmp(&anatomies[j].blob_radius)
            .then(i.cmp(&j))
    });
    let mut labels = vec![1u32; n];
    for &i in &order[..n / 2] {
        labels[i] = 0;
    }
    let ids = (0..n).map(|i| format!("subject-{i:05}")).collect();
    ImageSet::new(
        anatomies.into_iter().map(|a| a.image).collect(),
        "phantom",
        Some(labels),
        Some(ids),
        format!("phantoms n={n} size={size} seed={seed}"),
    )
}

/// Quadratic bias-field coefficients over normalized coordinates
/// `x, y` in `[-1, 1]`. The field is re-centred to mean exactly 1 on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasField {
    pub x: f64,
    pub y: f64,
    pub xx: f64,
    pub yy: f64,
    pub xy: f64,
}

impl BiasField {
    /// The `h x w` field, row-major.
    pub fn grid(&self, h: usize, w: usize) -> Vec<f64> {
        let q: Vec<f64> = (0..h * w)
            .map(|i| {
                let x = 2.0 * ((i % w) as f64 + 0.5) / w as f64 - 1.0;
                let y = 2.0 * ((i / w) as f64 + 0.5) / h as f64 - 1.0;
                self.x * x + self.y * y + self.xx * x * x + self.yy * y * y + self.xy * x * y
            })
            .collect();
        let mean = q.iter().sum::<f64>() / q.len().max(1) as f64;
        q.iter().map(|v| 1.0 + v - mean).collect()
    }
}

/// A disc with a constant additive offset in `[0, 1]` intensity space.
/// Centre and radius are fractions of the image width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionalOffset {
    pub center: (f64, f64),
    pub radius: f64,
    pub amplitude: f64,
}

impl RegionalOffset {
    pub fn contains(&self, row: usize, col: usize, h: usize, w: usize) -> bool {
        let x = (col as f64 + 0.5) / w as f64 - self.center.0;
        let y = (row as f64 + 0.5) / h as f64 - self.center.1;
        x * x + y * y <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEffectSpec {
    pub bias_field: BiasField,
    pub gamma: f64,
    pub regional_offset: RegionalOffset,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SiteEffectSpec {
    pub fn identity() -> Self {
        Self {
            bias_field: BiasField::default(),
            gamma: 1.0,
            regional_offset: RegionalOffset {
                center: (0.5, 0.5),
                radius: 0.0,
                amplitude: 0.0,
            },
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    /// The second-site effect used by the phantom simulation: a lateral
    /// bias gradient, stronger tissue contrast, and a bright patch near the
    /// centre.
    pub fn scanner_b(seed: u64) -> Self {
        Self {
            bias_field: BiasField {
                x: 0.30,
                y: -0.20,
                xx: -0.20,
                yy: 0.10,
                xy: 0.10,
            },
            gamma: 0.3,
            regional_offset: RegionalOffset {
                center: (0.5, 0.62),
                radius: 0.14,
                amplitude: 0.1,
            },
            noise_sigma: 0.02,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.gamma > 0.0 && self.gamma.is_finite(),
            Config,
            "gamma must be positive, got {}",
            self.gamma
        );
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            Config,
            "noise sigma must be non-negative, got {}",
            self.noise_sigma
        );
        let r = &self.regional_offset;
        ensure!(
            r.radius >= 0.0 && r.radius.is_finite() && r.amplitude.is_finite(),
            Config,
            "regional offset radius must be non-negative and amplitude finite"
        );
        let b = &self.bias_field;
        ensure!(
            [b.x, b.y, b.xx, b.yy, b.xy].iter().all(|v| v.is_finite()),
            Config,
            "bias field coefficients must be finite"
        );
        Ok(())
    }
}

pub(crate) fn contrast(u: f64, gamma: f64) -> f64 {
    let c = 2.0 * u - 1.0;
    0.5 + 0.5 * c.signum() * c.abs().powf(gamma)
}

/// Apply `spec` to every image in `[0, 1]` space:
/// `clamp(contrast(u) + blob + noise)` with `u = bias * (v + 1) / 2`,
/// then map back to `[-1, 1]`. The contrast curve is a sign-preserving power
/// about mid-grey, `0.5 + 0.5 sgn(2u - 1) |2u - 1|^gamma`, so 0, 0.5 and 1
/// are fixed points. Labels and subject ids are kept.
pub fn apply_site_effect(set: &ImageSet, spec: &SiteEffectSpec, domain: &str) -> Result<ImageSet> {
    spec.validate()?;
    let Some((h, w)) = set.image_shape() else {
        let mut out = set.clone();
        out.domain = domain.into();
        return Ok(out);
    };
    let field = spec.bias_field.grid(h, w);
    let blob: Vec<f64> = (0..h * w)
        .map(|i| {
            let r = &spec.regional_offset;
            if r.contains(i / w, i % w, h, w) {
                r.amplitude
            } else {
                0.0
            }
        })
        .collect();
    let normal = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma).expect("validated sigma"));
    let mut out = set.map_images(
        &format!("site effect -> {domain} (seed {})", spec.seed),
        |i, im| {
            let mut rng = rng_from(derive_indexed(spec.seed, "site-noise", i as u64));
            let data = im
                .data()
                .iter()
                .enumerate()
                .map(|(p, &v)| {
                    let u = field[p] * (v + 1.0) / 2.0;
                    let mut o = contrast(u, spec.gamma) + blob[p];
                    if let Some(n) = &normal {
                        o += n.sample(&mut rng);
                    }
                    2.0 * o.clamp(0.0, 1.0) - 1.0
                })
                .collect();
            Tensor::new(im.shape(), data).expect("same shape")
        },
    )?;
    out.domain = domain.into();
    Ok(out)
}
