//! The noisy black-on-white digit simulation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::imageset::ImageSet;
use crate::error::{ensure, Result};
use crate::ndtensor::Tensor;
use crate::rng::{derive_indexed, derive_seed, rng_from};

pub const DEFAULT_NOISE_SIGMA: f64 = 0.2;

/// Invert every image (`v -> -v`) then add `N(0, sigma)` noise, clamped to
/// `[-1, 1]`. Image `i` draws its noise from its own seeded stream.
pub fn corrupt_box1(set: &ImageSet, noise_sigma: f64, seed: u64) -> Result<ImageSet> {
    ensure!(
        noise_sigma >= 0.0 && noise_sigma.is_finite(),
        Config,
        "noise sigma must be finite and non-negative, got {noise_sigma}"
    );
    let normal = Normal::new(0.0, noise_sigma).expect("validated sigma");
    set.map_images(
        &format!("box1 invert+noise sigma={noise_sigma} seed={seed}"),
        |i, im| {
            if noise_sigma == 0.0 {
                return im.map(|v| -v);
            }
            let mut rng = rng_from(derive_indexed(seed, "box1-noise", i as u64));
            im.map(|v| (-v + normal.sample(&mut rng)).clamp(-1.0, 1.0))
        },
    )
    .map(|mut s| {
        s.domain = format!("{}-corrupted", set.domain);
        s
    })
}

/// Disjoint random halves, stratified by content label when present.
/// Within each label group the shuffled members are dealt alternately, and an
/// odd member goes to whichever half is currently smaller.
pub fn split_halves(set: &ImageSet, seed: u64) -> Result<(ImageSet, ImageSet)> {
    ensure!(
        set.len() >= 2,
        Invalid,
        "need at least 2 images to split, got {}",
        set.len()
    );
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in 0..set.len() {
        let key = set.content_labels.as_ref().map_or(0, |l| l[i]);
        groups.entry(key).or_default().push(i);
    }
    let mut rng = rng_from(derive_seed(seed, "split-halves"));
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        let half = members.len() / 2;
        a.extend_from_slice(&members[..half]);
        b.extend_from_slice(&members[half..2 * half]);
        if members.len() % 2 == 1 {
            let last = *members.last().unwrap();
            if a.len() <= b.len() {
                a.push(last);
            } else {
                b.push(last);
            }
        }
    }
    a.sort_unstable();
    b.sort_unstable();
    Ok((set.select(&a), set.select(&b)))
}

/// Pad every image symmetrically to `size x size` with the background value
/// `-1` (intensity 0).
pub fn pad_to(set: &ImageSet, size: usize) -> Result<ImageSet> {
    let Some((h, w)) = set.image_shape() else {
        return Ok(set.clone());
    };
    ensure!(
        h <= size && w <= size,
        Dimension,
        "cannot pad {h}x{w} images to {size}x{size}"
    );
    let (top, left) = ((size - h) / 2, (size - w) / 2);
    set.map_images(&format!("pad {h}x{w}->{size}x{size}"), |_, im| {
        let mut out = Tensor::full(&[1, size, size], -1.0);
        let src = im.data();
        let dst = out.data_mut();
        for r in 0..h {
            dst[(top + r) * size + left..(top + r) * size + left + w]
                .copy_from_slice(&src[r * w..(r + 1) * w]);
        }
        out
    })
}

/// Pad to 32x32, split in halves, keep the first half clean (domain `A`) and
/// corrupt the second (domain `B`).
pub fn box1_domains(set: &ImageSet, noise_sigma: f64, seed: u64) -> Result<(ImageSet, ImageSet)> {
    let padded = pad_to(set, 32)?;
    let (clean, other) = split_halves(&padded, derive_seed(seed, "box1-split"))?;
    let mut corrupted = corrupt_box1(&other, noise_sigma, derive_seed(seed, "box1-corrupt"))?;
    let mut clean = clean;
    clean.domain = "A".into();
    corrupted.domain = "B".into();
    Ok((clean, corrupted))
}
