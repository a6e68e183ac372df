use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const DEFAULT_PCA_COMPONENTS: usize = 50;

/// Principal axes of a centred data matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` rows of length `d`, ordered by explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Total variance of the training data (sum over all axes).
    pub total_variance: f64,
    pub k: usize,
}

/// Fit on the rows of `data` (n × d). Signs are fixed so the largest-magnitude
/// entry of every axis is positive.
pub fn pca_fit(data: &DMatrix<f64>, k: usize) -> Result<PcaModel> {
    let (n, d) = data.shape();
    ensure!(
        n >= 2,
        Invalid,
        "PCA needs at least 2 observations, got {n}"
    );
    ensure!(k >= 1, Invalid, "PCA needs at least one component");
    ensure!(
        k <= (n - 1).min(d),
        Invalid,
        "{k} components requested but at most min(n - 1, d) = {} are available",
        (n - 1).min(d)
    );
    ensure!(
        data.iter().all(|v| v.is_finite()),
        NonFinite,
        "PCA input contains non-finite values"
    );
    let mean: DVector<f64> = data.row_mean().transpose();
    let mut centred = data.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let total_variance = centred.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut axis: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let pivot = axis
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(axis);
        let s = svd.singular_values[idx];
        explained_variance.push(s * s / (n - 1) as f64);
    }
    Ok(PcaModel {
        mean: mean.iter().copied().collect(),
        components,
        explained_variance,
        total_variance,
        k,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn components_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.dim(), |i, j| self.components[i][j])
    }

    /// Fraction of the training variance captured by each kept axis.
    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    pub fn transform(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure!(
            data.ncols() == self.dim(),
            Dimension,
            "PCA model expects {} features, got {}",
            self.dim(),
            data.ncols()
        );
        let mut out = DMatrix::zeros(data.nrows(), self.k);
        for (i, row) in data.row_iter().enumerate() {
            for (c, axis) in self.components.iter().enumerate() {
                out[(i, c)] = row
                    .iter()
                    .zip(axis)
                    .zip(&self.mean)
                    .map(|((x, a), m)| (x - m) * a)
                    .sum();
            }
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, scores: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure!(
            scores.ncols() == self.k,
            Dimension,
            "expected {} scores per row, got {}",
            self.k,
            scores.ncols()
        );
        let mut out = DMatrix::from_fn(scores.nrows(), self.dim(), |_, j| self.mean[j]);
        for i in 0..scores.nrows() {
            for (c, axis) in self.components.iter().enumerate() {
                let s = scores[(i, c)];
                for (j, a) in axis.iter().enumerate() {
                    out[(i, j)] += s * a;
                }
            }
        }
        Ok(out)
    }
}

pub fn pca_transform(model: &PcaModel, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model.transform(data)
}
