use serde::{Deserialize, Serialize};

use super::SiteCoding;
use crate::data::ImageSet;
use crate::error::{ensure, Error, Result};
use crate::ndtensor::Tensor;

/// Per-voxel `y = beta0 + site * beta_site` fitted by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCorrectionModel {
    pub beta0: Vec<f64>,
    pub beta_site: Vec<f64>,
    pub site_coding: SiteCoding,
    pub fit_population: String,
    /// `[1, H, W]` of the images the model was fitted on.
    pub image_shape: Vec<usize>,
}

/// Closed-form OLS for the design `[1, s]` with `s` in `{0, 1}`, one fit per
/// column of `rows`.
pub fn fit_linear_rows(rows: &[&[f64]], sites: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(
        rows.len() == sites.len(),
        Dimension,
        "{} rows for {} site codes",
        rows.len(),
        sites.len()
    );
    ensure!(
        sites.iter().all(|&s| s <= 1),
        Invalid,
        "site codes must be 0 or 1"
    );
    let v = rows.first().map_or(0, |r| r.len());
    ensure!(
        rows.iter().all(|r| r.len() == v),
        Dimension,
        "rows have different voxel counts"
    );
    let n = rows.len() as f64;
    let n1 = sites.iter().filter(|&&s| s == 1).count() as f64;
    // X^T X = [[n, n1], [n1, n1]]
    let det = n * n1 - n1 * n1;
    if n1 == 0.0 || n1 == n || det <= 0.0 {
        return Err(Error::Numerical(
            "design matrix is rank deficient: controls from both sites are required".into(),
        ));
    }
    let mut beta0 = vec![0.0; v];
    let mut beta_site = vec![0.0; v];
    for j in 0..v {
        let (mut sy, mut sy1) = (0.0, 0.0);
        for (r, &s) in rows.iter().zip(sites) {
            sy += r[j];
            if s == 1 {
                sy1 += r[j];
            }
        }
        beta0[j] = (n1 * sy - n1 * sy1) / det;
        beta_site[j] = (-n1 * sy + n * sy1) / det;
    }
    Ok((beta0, beta_site))
}

/// Fit on control images from two sites. The first site seen is coded 0.
pub fn fit_linear(controls: &[&ImageSet]) -> Result<LinearCorrectionModel> {
    let coding = SiteCoding::from_sets(controls)?;
    let shape = super::common_shape(controls)?;
    let mut rows = Vec::new();
    let mut sites = Vec::new();
    for set in controls {
        let code = coding.code(&set.domain)?;
        for im in set.images() {
            rows.push(im.data());
            sites.push(code);
        }
    }
    for code in 0..2u8 {
        let count = sites.iter().filter(|&&s| s == code).count();
        ensure!(
            count >= 2,
            Invalid,
            "site {:?} has {count} controls, at least 2 are needed",
            coding.sites[code as usize]
        );
    }
    let (beta0, beta_site) = fit_linear_rows(&rows, &sites)?;
    Ok(LinearCorrectionModel {
        beta0,
        beta_site,
        site_coding: coding,
        fit_population: "controls only".into(),
        image_shape: shape,
    })
}

impl LinearCorrectionModel {
    /// `y - site_indicator * beta_site`; the intercept is kept.
    pub fn apply(&self, image: &Tensor, site: &str) -> Result<Tensor> {
        let code = self.site_coding.code(site)?;
        ensure!(
            image.shape() == self.image_shape.as_slice(),
            Dimension,
            "image shape {:?} does not match the model's {:?}",
            image.shape(),
            self.image_shape
        );
        if code == 0 {
            return Ok(image.clone());
        }
        let data = image
            .data()
            .iter()
            .zip(&self.beta_site)
            .map(|(y, b)| y - b)
            .collect();
        Tensor::new(image.shape(), data)
    }

    /// Correct every image of `set` (site taken from its domain tag).
    /// Values are clamped back to `[-1, 1]`.
    pub fn apply_set(&self, set: &ImageSet) -> Result<ImageSet> {
        let mut out = Vec::with_capacity(set.len());
        for im in set.images() {
            out.push(self.apply(im, &set.domain)?.map(|v| v.clamp(-1.0, 1.0)));
        }
        set.with_images(out, format!("{} | linear correction", set.provenance))
    }
}

pub fn apply_linear(model: &LinearCorrectionModel, image: &Tensor, site: &str) -> Result<Tensor> {
    model.apply(image, site)
}
