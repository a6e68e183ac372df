//! Regression-based site correction: per-voxel least squares and Gaussian
//! process regression over subject covariates.

mod gp;
mod linear;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use gp::{
    apply_gp, fit_gp, fit_gp_rows, gp_kernel, gram, log_marginal_likelihood,
    log_marginal_likelihood_grad, optimize_hyper, GPCorrectionModel, GpFitOptions, GpHyper,
    GpSearch, JITTER_LEVELS,
};
pub use linear::{apply_linear, fit_linear, fit_linear_rows, LinearCorrectionModel};

use crate::data::ImageSet;
use crate::error::{ensure, Error, Result};
use crate::ndtensor::{load_tensor, save_tensor, DType, Tensor};

/// Site tags in code order: `sites[0]` is coded 0, `sites[1]` is coded 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCoding {
    pub sites: Vec<String>,
}

impl SiteCoding {
    pub fn new(site0: &str, site1: &str) -> Result<Self> {
        ensure!(
            site0 != site1,
            Invalid,
            "the two sites must have different tags"
        );
        Ok(Self {
            sites: vec![site0.into(), site1.into()],
        })
    }

    /// Codes in order of first appearance; exactly two distinct domains.
    pub fn from_sets(sets: &[&ImageSet]) -> Result<Self> {
        let mut sites: Vec<String> = Vec::new();
        for s in sets {
            if !sites.contains(&s.domain) {
                sites.push(s.domain.clone());
            }
        }
        if sites.len() != 2 {
            return Err(Error::Numerical(format!(
                "site coding needs controls from exactly two sites, got {:?}; a single site makes the design rank deficient",
                sites
            )));
        }
        Ok(Self { sites })
    }

    pub fn code(&self, site: &str) -> Result<u8> {
        self.sites
            .iter()
            .position(|s| s == site)
            .map(|p| p as u8)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown site label {site:?}; model knows {:?}",
                    self.sites
                ))
            })
    }
}

pub(crate) fn common_shape(sets: &[&ImageSet]) -> Result<Vec<usize>> {
    let mut shape = None;
    for s in sets {
        if let Some((h, w)) = s.image_shape() {
            let this = vec![1, h, w];
            match &shape {
                None => shape = Some(this),
                Some(prev) => ensure!(
                    *prev == this,
                    Dimension,
                    "voxel count mismatch between sites: {prev:?} vs {this:?}"
                ),
            }
        }
    }
    shape.ok_or_else(|| Error::Invalid("no control images".into()))
}

/// Either correction model, for storage and dispatch.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrectionModel {
    Linear(LinearCorrectionModel),
    Gp(GPCorrectionModel),
}

impl CorrectionModel {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Linear(_) => "linear",
            Self::Gp(_) => "gp",
        }
    }

    pub fn apply_set(&self, set: &ImageSet) -> Result<ImageSet> {
        match self {
            Self::Linear(m) => m.apply_set(set),
            Self::Gp(m) => m.apply_set(set),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum CorrectionManifest {
    Linear {
        site_coding: SiteCoding,
        fit_population: String,
        image_shape: Vec<usize>,
    },
    Gp {
        theta: [f64; 4],
        sigma: f64,
        log_ml: f64,
        site_coding: Option<SiteCoding>,
        image_shape: Vec<usize>,
    },
}

fn matrix_tensor(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |i| {
        m[(i / m.ncols(), i % m.ncols())]
    })
}

fn tensor_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    ensure!(
        t.ndim() == 2,
        Dimension,
        "expected a matrix, got shape {:?}",
        t.shape()
    );
    Ok(DMatrix::from_row_slice(
        t.shape()[0],
        t.shape()[1],
        t.data(),
    ))
}

pub fn save_correction(model: &CorrectionModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = match model {
        CorrectionModel::Linear(m) => {
            let v = m.beta0.len();
            save_tensor(
                &dir.join("beta0.ntn"),
                &Tensor::new(&[v], m.beta0.clone())?,
                DType::F64,
            )?;
            save_tensor(
                &dir.join("beta_site.ntn"),
                &Tensor::new(&[v], m.beta_site.clone())?,
                DType::F64,
            )?;
            CorrectionManifest::Linear {
                site_coding: m.site_coding.clone(),
                fit_population: m.fit_population.clone(),
                image_shape: m.image_shape.clone(),
            }
        }
        CorrectionModel::Gp(m) => {
            let inputs = DMatrix::from_fn(m.train_inputs.len(), m.covariate_dim(), |i, j| {
                m.train_inputs[i][j]
            });
            save_tensor(
                &dir.join("train_inputs.ntn"),
                &matrix_tensor(&inputs),
                DType::F64,
            )?;
            save_tensor(
                &dir.join("train_targets.ntn"),
                &matrix_tensor(&m.train_targets),
                DType::F64,
            )?;
            CorrectionManifest::Gp {
                theta: m.hyper.theta,
                sigma: m.hyper.sigma,
                log_ml: m.log_ml,
                site_coding: m.site_coding.clone(),
                image_shape: m.image_shape.clone(),
            }
        }
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_correction(dir: &Path) -> Result<CorrectionModel> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    match serde_json::from_slice::<CorrectionManifest>(&bytes)? {
        CorrectionManifest::Linear {
            site_coding,
            fit_population,
            image_shape,
        } => Ok(CorrectionModel::Linear(LinearCorrectionModel {
            beta0: load_tensor(&dir.join("beta0.ntn"))?.into_data(),
            beta_site: load_tensor(&dir.join("beta_site.ntn"))?.into_data(),
            site_coding,
            fit_population,
            image_shape,
        })),
        CorrectionManifest::Gp {
            theta,
            sigma,
            site_coding,
            image_shape,
            ..
        } => {
            let inputs = tensor_matrix(&load_tensor(&dir.join("train_inputs.ntn"))?)?;
            let targets = tensor_matrix(&load_tensor(&dir.join("train_targets.ntn"))?)?;
            let rows = (0..inputs.nrows())
                .map(|i| inputs.row(i).iter().copied().collect())
                .collect();
            let mut m = GPCorrectionModel::condition(rows, targets, GpHyper { theta, sigma })?;
            m.site_coding = site_coding;
            m.image_shape = image_shape;
            Ok(CorrectionModel::Gp(m))
        }
    }
}
