//! Procedurally rendered handwritten-style digits, 28x28, white on black.
//!
//! Each class is a set of polyline strokes in the unit square. Every sample
//! gets its own rotation, shear, scale, offset, stroke width and per-point
//! wobble, so the classes overlap the way scanned digits do.

use rand::Rng;

use super::imageset::ImageSet;
use crate::error::Result;
use crate::ndtensor::Tensor;
use crate::rng::{derive_indexed, rng_from};

pub const DIGIT_SIZE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f64 / steps as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn template(digit: u32) -> Vec<Stroke> {
    use std::f64::consts::PI;
    match digit {
        0 => vec![arc(0.5, 0.5, 0.22, 0.33, 0.0, 2.0 * PI, 20)],
        1 => vec![vec![(0.38, 0.28), (0.52, 0.15), (0.52, 0.85)]],
        2 => vec![vec![
            (0.3, 0.3),
            (0.4, 0.17),
            (0.6, 0.17),
            (0.7, 0.3),
            (0.66, 0.46),
            (0.3, 0.85),
            (0.74, 0.85),
        ]],
        3 => vec![
            arc(0.5, 0.32, 0.18, 0.15, -0.8 * PI, 0.5 * PI, 8),
            arc(0.5, 0.66, 0.2, 0.19, -0.5 * PI, 0.85 * PI, 10),
        ],
        4 => vec![vec![(0.62, 0.85), (0.62, 0.15), (0.27, 0.62), (0.76, 0.62)]],
        5 => {
            let mut s = vec![(0.7, 0.17), (0.36, 0.17), (0.33, 0.46)];
            s.extend(arc(0.5, 0.64, 0.2, 0.2, -0.6 * PI, 0.8 * PI, 10));
            vec![s]
        }
        6 => {
            let mut s = vec![(0.66, 0.17), (0.42, 0.36)];
            s.extend(arc(0.5, 0.66, 0.19, 0.19, PI, 3.0 * PI, 16));
            vec![s]
        }
        7 => vec![vec![(0.27, 0.17), (0.73, 0.17), (0.44, 0.85)]],
        8 => vec![
            arc(0.5, 0.32, 0.16, 0.15, 0.0, 2.0 * PI, 16),
            arc(0.5, 0.67, 0.2, 0.18, 0.0, 2.0 * PI, 18),
        ],
        _ => {
            let mut s = arc(0.5, 0.34, 0.18, 0.17, 0.0, 2.0 * PI, 16);
            s.extend([(0.66, 0.6), (0.6, 0.85)]);
            vec![s]
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Render one sample of `digit` (taken mod 10) into a `[1, 28, 28]` image in
/// `[-1, 1]`.
pub fn render_digit(digit: u32, rng: &mut impl Rng) -> Tensor {
    let strokes = template(digit % 10);
    let angle = rng.gen_range(-0.25..0.25f64);
    let shear = rng.gen_range(-0.25..0.25f64);
    let scale = rng.gen_range(17.0..21.0f64);
    let aspect = rng.gen_range(0.85..1.1f64);
    let (ox, oy) = (rng.gen_range(-1.5..1.5f64), rng.gen_range(-1.5..1.5f64));
    let width = rng.gen_range(1.4..2.6f64);
    let (sin, cos) = angle.sin_cos();
    let c = DIGIT_SIZE as f64 / 2.0;
    let place = |(x, y): (f64, f64), wobble: (f64, f64)| {
        let u = (x - 0.5 + wobble.0) * scale * aspect;
        let v = (y - 0.5 + wobble.1) * scale;
        let u = u + shear * v;
        (c + ox + cos * u - sin * v, c + oy + sin * u + cos * v)
    };
    let placed: Vec<Vec<(f64, f64)>> = strokes
        .iter()
        .map(|s| {
            s.iter()
                .map(|&p| {
                    let w = (rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
                    place(p, w)
                })
                .collect()
        })
        .collect();
    Tensor::from_fn(&[1, DIGIT_SIZE, DIGIT_SIZE], |i| {
        let p = ((i % DIGIT_SIZE) as f64 + 0.5, (i / DIGIT_SIZE) as f64 + 0.5);
        let d = placed
            .iter()
            .flat_map(|s| s.windows(2).map(|w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        let ink = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
        2.0 * ink - 1.0
    })
}

/// `n` digits with labels cycling `0..10`, sample `i` rendered from its own
/// seeded stream.
pub fn synthetic_digits(n: usize, seed: u64) -> Result<ImageSet> {
    let labels: Vec<u32> = (0..n as u32).map(|i| i % 10).collect();
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &d)| render_digit(d, &mut rng_from(derive_indexed(seed, "digit", i as u64))))
        .collect();
    ImageSet::new(
        images,
        "A",
        Some(labels),
        None,
        format!("synthetic digits n={n} seed={seed}"),
    )
}
