use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

const TAU: f64 = 1e-12;

/// A kernel with every parameter resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    /// `(x·z + coef)^degree`
    Polynomial {
        degree: u32,
        coef: f64,
    },
    /// `exp(-gamma |x - z|^2)`
    Gaussian {
        gamma: f64,
    },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Polynomial { degree, coef } => (dot(a, b) + coef).powi(degree as i32),
            Kernel::Gaussian { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How the Gaussian width is chosen from the training features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaRule {
    /// `1 / (k * var)` with `var` the variance of all training feature values.
    Scale,
    /// `1 / median` of the pairwise squared distances.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Linear,
    Polynomial {
        #[serde(default = "default_degree")]
        degree: u32,
        #[serde(default = "default_coef")]
        coef: f64,
    },
    Gaussian {
        #[serde(default = "default_gamma")]
        gamma: GammaRule,
    },
}

fn default_degree() -> u32 {
    3
}
fn default_coef() -> f64 {
    1.0
}
fn default_gamma() -> GammaRule {
    GammaRule::Scale
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Gaussian {
            gamma: GammaRule::Scale,
        }
    }
}

impl KernelSpec {
    pub fn polynomial() -> Self {
        KernelSpec::Polynomial {
            degree: 3,
            coef: 1.0,
        }
    }

    pub fn resolve(&self, features: &DMatrix<f64>) -> Result<Kernel> {
        Ok(match *self {
            KernelSpec::Linear => Kernel::Linear,
            KernelSpec::Polynomial { degree, coef } => {
                ensure!(degree >= 1, Config, "polynomial degree must be at least 1");
                Kernel::Polynomial { degree, coef }
            }
            KernelSpec::Gaussian { gamma } => {
                let g = match gamma {
                    GammaRule::Fixed(g) => g,
                    GammaRule::Scale => {
                        let n = features.len() as f64;
                        let mean = features.iter().sum::<f64>() / n;
                        let var = features.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        if var > 0.0 {
                            1.0 / (features.ncols() as f64 * var)
                        } else {
                            1.0
                        }
                    }
                    GammaRule::Median => {
                        let rows: Vec<Vec<f64>> = features
                            .row_iter()
                            .map(|r| r.iter().copied().collect())
                            .collect();
                        let mut d2 = Vec::new();
                        for i in 0..rows.len() {
                            for j in i + 1..rows.len() {
                                d2.push(
                                    rows[i]
                                        .iter()
                                        .zip(&rows[j])
                                        .map(|(a, b)| (a - b).powi(2))
                                        .sum::<f64>(),
                                );
                            }
                        }
                        d2.sort_by(f64::total_cmp);
                        match d2.get(d2.len() / 2) {
                            Some(&m) if m > 0.0 => 1.0 / m,
                            _ => 1.0,
                        }
                    }
                };
                ensure!(
                    g.is_finite() && g > 0.0,
                    Config,
                    "gaussian gamma must be positive, got {g}"
                );
                Kernel::Gaussian { gamma: g }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    #[default]
    None,
    /// `C_c = C * n / (2 n_c)`
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub kernel: KernelSpec,
    pub c: f64,
    pub class_weight: ClassWeight,
    /// Maximal KKT violation accepted at convergence.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            c: 1.0,
            class_weight: ClassWeight::None,
            tol: 1e-3,
            max_iter: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: Kernel,
    /// `alpha_i * y_i` for every support vector.
    pub dual_coefs: Vec<f64>,
    pub support_vectors: Vec<Vec<f64>>,
    /// Per-support-vector box bound `C_i`.
    pub bounds: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    /// Dual objective `sum(alpha) - 0.5 alpha^T Q alpha` at the solution.
    pub dual_objective: f64,
    /// Largest KKT violation left when the solver stopped.
    pub kkt_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_train: usize,
}

impl SvmModel {
    /// Regularisation weight of the primal, `1 / (2 C n)`.
    pub fn reg(&self) -> f64 {
        1.0 / (2.0 * self.c * self.n_train as f64)
    }

    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, |v| v.len())
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.dual_coefs
            .iter()
            .zip(&self.support_vectors)
            .map(|(a, sv)| a * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }
}

/// Box bounds per example after class weighting.
pub fn class_bounds(labels: &[i8], c: f64, weight: ClassWeight) -> Vec<f64> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y > 0).count() as f64;
    let neg = n - pos;
    labels
        .iter()
        .map(|&y| match weight {
            ClassWeight::None => c,
            ClassWeight::Balanced => c * n / (2.0 * if y > 0 { pos } else { neg }),
        })
        .collect()
}

/// Dual objective (maximisation form) of `alpha` for the given Gram matrix.
pub fn dual_objective(gram: &DMatrix<f64>, labels: &[i8], alpha: &[f64]) -> f64 {
    let n = labels.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad +=
                alpha[i] * alpha[j] * f64::from(labels[i]) * f64::from(labels[j]) * gram[(i, j)];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

pub fn gram_matrix(kernel: &Kernel, rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Train a soft-margin SVM on ±1 labels by sequential minimal optimisation
/// with second-order working set selection.
pub fn svm_train(features: &DMatrix<f64>, labels: &[i8], config: &SvmConfig) -> Result<SvmModel> {
    let n = features.nrows();
    ensure!(
        labels.len() == n,
        Dimension,
        "{n} feature rows for {} labels",
        labels.len()
    );
    ensure!(
        labels.iter().all(|&y| y == 1 || y == -1),
        Invalid,
        "SVM labels must be +1 or -1"
    );
    ensure!(
        labels.contains(&1) && labels.contains(&-1),
        Invalid,
        "SVM training needs both classes, got only {}",
        labels.first().map_or(0, |&y| y)
    );
    ensure!(
        config.c.is_finite() && config.c > 0.0,
        Config,
        "C must be positive, got {}",
        config.c
    );
    ensure!(
        config.tol > 0.0,
        Config,
        "solver tolerance must be positive"
    );
    ensure!(
        features.iter().all(|v| v.is_finite()),
        NonFinite,
        "SVM features contain non-finite values"
    );
    let kernel = config.kernel.resolve(features)?;
    let rows: Vec<Vec<f64>> = features
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    let k = gram_matrix(&kernel, &rows);
    let bounds = class_bounds(labels, config.c, config.class_weight);
    let sol = smo(&k, labels, &bounds, config.tol, config.max_iter);

    let mut dual_coefs = Vec::new();
    let mut support_vectors = Vec::new();
    let mut sv_bounds = Vec::new();
    for i in 0..n {
        if sol.alpha[i] > 0.0 {
            dual_coefs.push(sol.alpha[i] * f64::from(labels[i]));
            support_vectors.push(rows[i].clone());
            sv_bounds.push(bounds[i]);
        }
    }
    Ok(SvmModel {
        kernel,
        dual_coefs,
        support_vectors,
        bounds: sv_bounds,
        bias: sol.bias,
        c: config.c,
        dual_objective: dual_objective(&k, labels, &sol.alpha),
        kkt_gap: sol.gap,
        iterations: sol.iterations,
        converged: sol.converged,
        n_train: n,
    })
}

pub(crate) struct SmoSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `0.5 a^T Q a - sum(a)` subject to `0 <= a_i <= C_i`, `y^T a = 0`.
pub(crate) fn smo(k: &DMatrix<f64>, y: &[i8], c: &[f64], eps: f64, max_iter: usize) -> SmoSolution {
    let n = y.len();
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let q = |i: usize, j: usize| yf[i] * yf[j] * k[(i, j)];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let up = |a: &[f64], t: usize| (y[t] > 0 && a[t] < c[t]) || (y[t] < 0 && a[t] > 0.0);
    let low = |a: &[f64], t: usize| (y[t] > 0 && a[t] > 0.0) || (y[t] < 0 && a[t] < c[t]);
    let mut iterations = 0;
    let mut gap;
    let mut converged = false;
    loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(&alpha, t) && -yf[t] * grad[t] >= gmax {
                gmax = -yf[t] * grad[t];
                i = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut obj_min = f64::INFINITY;
        if i != usize::MAX {
            for t in 0..n {
                if !low(&alpha, t) {
                    continue;
                }
                let v = yf[t] * grad[t];
                gmax2 = gmax2.max(v);
                let diff = gmax + v;
                if diff > 0.0 {
                    let mut quad = k[(i, i)] + k[(t, t)] - 2.0 * k[(i, t)];
                    if quad <= 0.0 {
                        quad = TAU;
                    }
                    let obj = -diff * diff / quad;
                    if obj <= obj_min {
                        obj_min = obj;
                        j = t;
                    }
                }
            }
        }
        gap = gmax + gmax2;
        if gap < eps || j == usize::MAX {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (ci, cj) = (c[i], c[j]);
        if y[i] != y[j] {
            let mut quad = q(i, i) + q(j, j) + 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let mut quad = q(i, i) + q(j, j) - 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(t, i) * di + q(t, j) * dj;
        }
    }

    // offset from the free variables, or the middle of the feasible interval
    let (mut ub, mut lb, mut sum, mut nfree) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = yf[t] * grad[t];
        if alpha[t] >= c[t] {
            if y[t] < 0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            sum += yg;
            nfree += 1;
        }
    }
    let rho = if nfree > 0 {
        sum / nfree as f64
    } else {
        (ub + lb) / 2.0
    };
    SmoSolution {
        alpha,
        bias: -rho,
        gap,
        iterations,
        converged,
    }
}

/// Predicted ±1 labels and decision values. A decision value of exactly zero
/// is assigned to the positive class.
pub fn svm_predict(model: &SvmModel, features: &DMatrix<f64>) -> Result<(Vec<i8>, Vec<f64>)> {
    ensure!(
        features.ncols() == model.dim(),
        Dimension,
        "SVM was trained on {} features, got {}",
        model.dim(),
        features.ncols()
    );
    let mut labels = Vec::with_capacity(features.nrows());
    let mut margins = Vec::with_capacity(features.nrows());
    for row in features.row_iter() {
        let x: Vec<f64> = row.iter().copied().collect();
        let m = model.decision(&x);
        labels.push(if m >= 0.0 { 1 } else { -1 });
        margins.push(m);
    }
    Ok((labels, margins))
}
