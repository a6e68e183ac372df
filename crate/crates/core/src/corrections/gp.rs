use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SiteCoding;
use crate::data::ImageSet;
use crate::error::{ensure, Error, Result};
use crate::ndtensor::Tensor;
use crate::rng::{derive_indexed, rng_from};

/// Kernel hyperparameters `theta_1..theta_4` and the noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub theta: [f64; 4],
    pub sigma: f64,
}

impl GpHyper {
    fn as_array(&self) -> [f64; 5] {
        [
            self.theta[0],
            self.theta[1],
            self.theta[2],
            self.theta[3],
            self.sigma,
        ]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            theta: [a[0], a[1], a[2], a[3]],
            sigma: a[4],
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// `t1^2 exp(-t2^2 |xi - xj|^2) + t3^2 + t4^2 xi.xj + sigma^2 [same_index]`.
pub fn gp_kernel(xi: &[f64], xj: &[f64], theta: &[f64; 4], sigma: f64, same_index: bool) -> f64 {
    let [t1, t2, t3, t4] = *theta;
    let noise = if same_index { sigma * sigma } else { 0.0 };
    t1 * t1 * (-(t2 * t2) * sq_dist(xi, xj)).exp() + t3 * t3 + t4 * t4 * dot(xi, xj) + noise
}

/// Gram matrix of `inputs` including the noise diagonal.
pub fn gram(inputs: &[Vec<f64>], hyper: &GpHyper) -> DMatrix<f64> {
    let n = inputs.len();
    DMatrix::from_fn(n, n, |i, j| {
        gp_kernel(&inputs[i], &inputs[j], &hyper.theta, hyper.sigma, i == j)
    })
}

/// Diagonal jitter levels tried in order when a factorization fails.
pub const JITTER_LEVELS: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

fn factor(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for &j in &JITTER_LEVELS {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += j;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, j));
        }
    }
    Err(Error::Numerical(format!(
        "kernel matrix is not positive definite even with jitter {:e}",
        JITTER_LEVELS[JITTER_LEVELS.len() - 1]
    )))
}

/// Multi-output log marginal likelihood of `v` independent outputs sharing
/// one kernel, from the scatter matrix `S = Y Y^T`.
#[derive(Debug, Clone)]
struct Evidence {
    inputs: Vec<Vec<f64>>,
    scatter: DMatrix<f64>,
    outputs: usize,
}

impl Evidence {
    fn new(inputs: &[Vec<f64>], targets: &DMatrix<f64>) -> Self {
        Self {
            inputs: inputs.to_vec(),
            scatter: targets * targets.transpose(),
            outputs: targets.ncols(),
        }
    }

    fn lml(&self, hyper: &GpHyper) -> Result<f64> {
        Ok(self.lml_and_grad(hyper, false)?.0)
    }

    /// Log-ML and its gradient with respect to the log of each of the five
    /// hyperparameters.
    fn lml_and_grad(&self, hyper: &GpHyper, want_grad: bool) -> Result<(f64, [f64; 5])> {
        let n = self.inputs.len();
        let v = self.outputs as f64;
        let k = gram(&self.inputs, hyper);
        let (chol, _) = factor(&k)?;
        let kinv = chol.inverse();
        let kinv_s = &kinv * &self.scatter;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let lml = -0.5 * kinv_s.trace()
            - 0.5 * v * log_det
            - 0.5 * v * n as f64 * (2.0 * std::f64::consts::PI).ln();
        if !want_grad {
            return Ok((lml, [0.0; 5]));
        }
        // d lml / dp = 1/2 tr(W dK/dp), W = K^-1 S K^-1 - v K^-1
        let w = &kinv_s * &kinv - &kinv * v;
        let [t1, t2, t3, t4] = hyper.theta;
        let mut g = [0.0; 5];
        for i in 0..n {
            for j in 0..n {
                let d2 = sq_dist(&self.inputs[i], &self.inputs[j]);
                let e = (-(t2 * t2) * d2).exp();
                let wij = 0.5 * w[(i, j)];
                g[0] += wij * 2.0 * t1 * t1 * e;
                g[1] += wij * t1 * t1 * e * (-2.0 * t2 * t2 * d2);
                g[2] += wij * 2.0 * t3 * t3;
                g[3] += wij * 2.0 * t4 * t4 * dot(&self.inputs[i], &self.inputs[j]);
                if i == j {
                    g[4] += wij * 2.0 * hyper.sigma * hyper.sigma;
                }
            }
        }
        Ok((lml, g))
    }
}

/// Hyperparameter search settings. `frozen[k] = Some(v)` pins parameter `k`
/// (order `theta_1..theta_4, sigma`) at `v`, which may be 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpFitOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
    pub frozen: [Option<f64>; 5],
    /// Starting point of the first (non-random) search.
    pub init: Option<GpHyper>,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iter: 500,
            grad_tol: 1e-6,
            seed: 0,
            frozen: [None; 5],
            init: None,
        }
    }
}

/// Log-parameters are kept in this box so searches cannot run off to
/// degenerate kernels.
const LOG_BOUNDS: (f64, f64) = (-12.0, 8.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSearch {
    pub hyper: GpHyper,
    pub lml: f64,
    /// Log-ML of every accepted iterate of the winning search, in order.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

struct Packing {
    free: Vec<usize>,
    frozen: [Option<f64>; 5],
}

impl Packing {
    fn unpack(&self, z: &[f64], base: &[f64; 5]) -> GpHyper {
        let mut a = *base;
        for (k, &i) in self.free.iter().enumerate() {
            a[i] = z[k].exp();
        }
        for (i, f) in self.frozen.iter().enumerate() {
            if let Some(v) = f {
                a[i] = *v;
            }
        }
        GpHyper::from_array(a)
    }
}

fn clamp_box(z: &mut [f64]) {
    z.iter_mut()
        .for_each(|v| *v = v.clamp(LOG_BOUNDS.0, LOG_BOUNDS.1));
}

/// BFGS ascent on the free log-parameters with a backtracking line search;
/// only steps that do not decrease the log-ML are accepted.
fn ascend(
    ev: &Evidence,
    pack: &Packing,
    start: &[f64; 5],
    opts: &GpFitOptions,
) -> Result<GpSearch> {
    let m = pack.free.len();
    let mut z: Vec<f64> = pack
        .free
        .iter()
        .map(|&i| start[i].max(1e-300).ln())
        .collect();
    clamp_box(&mut z);
    let eval = |z: &[f64]| -> Option<(f64, Vec<f64>)> {
        let h = pack.unpack(z, start);
        let (l, g) = ev.lml_and_grad(&h, true).ok()?;
        let g: Vec<f64> = pack.free.iter().map(|&i| g[i]).collect();
        (l.is_finite() && g.iter().all(|v| v.is_finite())).then_some((l, g))
    };
    let (mut f, mut g) = eval(&z)
        .ok_or_else(|| Error::Numerical("log-ML is not finite at the start point".into()))?;
    let mut trace = vec![f];
    let mut hinv = DMatrix::<f64>::identity(m, m);
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if m == 0 || gnorm < opts.grad_tol {
            break;
        }
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut d = &hinv * &gv;
        if d.dot(&gv) <= 0.0 {
            hinv = DMatrix::identity(m, m);
            d = gv.clone();
        }
        // cap the first trial step in log space
        let dn = d.norm();
        let mut t = if dn > 2.0 { 2.0 / dn } else { 1.0 };
        let slope = d.dot(&gv);
        let mut accepted = None;
        while t > 1e-12 {
            let mut zn: Vec<f64> = z.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            clamp_box(&mut zn);
            if let Some((fn_, gn)) = eval(&zn) {
                if fn_ >= f + 1e-4 * t * slope {
                    accepted = Some((zn, fn_, gn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((zn, fn_, gn)) = accepted else {
            break;
        };
        let s = DVector::from_iterator(m, zn.iter().zip(&z).map(|(a, b)| a - b));
        // curvature pair of the minimization problem -lml
        let y = DVector::from_iterator(m, g.iter().zip(&gn).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(m, m);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
        }
        let gain = fn_ - f;
        z = zn;
        f = fn_;
        g = gn;
        trace.push(f);
        if gain.abs() < 1e-12 * f.abs().max(1.0) {
            break;
        }
    }
    Ok(GpSearch {
        hyper: pack.unpack(&z, start),
        lml: f,
        trace,
        iterations,
    })
}

/// Maximize the log marginal likelihood from an informed start and
/// `opts.restarts` random ones; the best search wins.
pub fn optimize_hyper(
    inputs: &[Vec<f64>],
    targets: &DMatrix<f64>,
    opts: &GpFitOptions,
) -> Result<GpSearch> {
    ensure!(
        inputs.len() >= 2,
        Invalid,
        "GP fitting needs at least 2 training examples"
    );
    ensure!(
        inputs.len() == targets.nrows(),
        Dimension,
        "{} covariate rows for {} targets",
        inputs.len(),
        targets.nrows()
    );
    let ev = Evidence::new(inputs, targets);
    let pack = Packing {
        free: (0..5).filter(|&i| opts.frozen[i].is_none()).collect(),
        frozen: opts.frozen,
    };
    let sd = {
        let mean = targets.mean();
        (targets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / targets.len().max(1) as f64)
            .sqrt()
            .max(1e-3)
    };
    let informed = opts.init.map_or(
        [sd, 1.0, targets.mean().abs().max(1e-2), 0.1 * sd, 0.1 * sd],
        |h| h.as_array(),
    );
    let mut starts = vec![informed];
    let mut rng = rng_from(derive_indexed(opts.seed, "gp-restart", 0));
    for _ in 0..opts.restarts {
        let mut a = [0.0; 5];
        for (k, v) in a.iter_mut().enumerate() {
            let scale = if k == 1 { 1.0 } else { sd };
            *v = scale * rng.gen_range(-2.5..1.5f64).exp();
        }
        starts.push(a);
    }
    let mut best: Option<GpSearch> = None;
    let mut last_err = None;
    for s in &starts {
        match ascend(&ev, &pack, s, opts) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.lml > b.lml) {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::Numerical("no GP search succeeded".into()))
    })
}

pub fn log_marginal_likelihood(
    inputs: &[Vec<f64>],
    targets: &DMatrix<f64>,
    hyper: &GpHyper,
) -> Result<f64> {
    Evidence::new(inputs, targets).lml(hyper)
}

/// Log-ML and its gradient with respect to `ln theta_1..ln theta_4, ln sigma`.
pub fn log_marginal_likelihood_grad(
    inputs: &[Vec<f64>],
    targets: &DMatrix<f64>,
    hyper: &GpHyper,
) -> Result<(f64, [f64; 5])> {
    Evidence::new(inputs, targets).lml_and_grad(hyper, true)
}

/// A GP conditioned on training covariates and `N x v` targets, with
/// `alpha = K^-1 Y` cached.
#[derive(Debug, Clone, PartialEq)]
pub struct GPCorrectionModel {
    pub hyper: GpHyper,
    pub train_inputs: Vec<Vec<f64>>,
    pub train_targets: DMatrix<f64>,
    /// Lower Cholesky factor of `K + sigma^2 I + jitter I`.
    pub chol_k: DMatrix<f64>,
    pub jitter: f64,
    pub alpha: DMatrix<f64>,
    pub log_ml: f64,
    pub site_coding: Option<SiteCoding>,
    pub image_shape: Vec<usize>,
}

impl GPCorrectionModel {
    pub fn condition(inputs: Vec<Vec<f64>>, targets: DMatrix<f64>, hyper: GpHyper) -> Result<Self> {
        ensure!(!inputs.is_empty(), Invalid, "GP needs training data");
        ensure!(
            inputs.len() == targets.nrows(),
            Dimension,
            "covariate/target row mismatch"
        );
        let d = inputs[0].len();
        ensure!(
            inputs.iter().all(|x| x.len() == d),
            Dimension,
            "covariate vectors differ in length"
        );
        ensure!(
            hyper.as_array().iter().all(|v| v.is_finite()),
            NonFinite,
            "GP hyperparameters must be finite: {hyper:?}"
        );
        let k = gram(&inputs, &hyper);
        let (chol, jitter) = factor(&k)?;
        let alpha = chol.solve(&targets);
        let log_ml = log_marginal_likelihood(&inputs, &targets, &hyper)?;
        Ok(Self {
            hyper,
            chol_k: chol.l(),
            jitter,
            alpha,
            log_ml,
            image_shape: vec![1, 1, targets.ncols()],
            train_inputs: inputs,
            train_targets: targets,
            site_coding: None,
        })
    }

    pub fn covariate_dim(&self) -> usize {
        self.train_inputs[0].len()
    }

    /// `k*` against every training input (no noise term).
    pub fn k_star(&self, covariates: &[f64]) -> Result<DVector<f64>> {
        ensure!(
            covariates.len() == self.covariate_dim(),
            Dimension,
            "covariate vector has {} entries, model expects {}",
            covariates.len(),
            self.covariate_dim()
        );
        Ok(DVector::from_iterator(
            self.train_inputs.len(),
            self.train_inputs
                .iter()
                .map(|x| gp_kernel(covariates, x, &self.hyper.theta, self.hyper.sigma, false)),
        ))
    }

    /// Posterior-mean template `k*^T K^-1 Y` for one covariate vector.
    pub fn template(&self, covariates: &[f64]) -> Result<Vec<f64>> {
        let ks = self.k_star(covariates)?;
        Ok((self.alpha.transpose() * ks).iter().copied().collect())
    }

    /// `y - k*^T K^-1 Y`.
    pub fn apply(&self, image: &Tensor, covariates: &[f64]) -> Result<Tensor> {
        let t = self.template(covariates)?;
        ensure!(
            image.len() == t.len(),
            Dimension,
            "image has {} voxels, model has {}",
            image.len(),
            t.len()
        );
        Tensor::new(
            image.shape(),
            image.data().iter().zip(&t).map(|(y, m)| y - m).collect(),
        )
    }

    /// `y - template(x*) + template(x_ref)`: the difference between the
    /// subject's site template and the reference site's template is removed,
    /// so the result stays on the reference site's intensity scale.
    pub fn apply_to_reference(
        &self,
        image: &Tensor,
        covariates: &[f64],
        reference: &[f64],
    ) -> Result<Tensor> {
        let own = self.template(covariates)?;
        let refr = self.template(reference)?;
        ensure!(
            image.len() == own.len(),
            Dimension,
            "image voxel count mismatch"
        );
        Tensor::new(
            image.shape(),
            image
                .data()
                .iter()
                .zip(own.iter().zip(&refr))
                .map(|(y, (a, b))| y - a + b)
                .collect(),
        )
    }
}

pub fn apply_gp(model: &GPCorrectionModel, image: &Tensor, covariates: &[f64]) -> Result<Tensor> {
    model.apply(image, covariates)
}

/// Fit from raw covariates and row-major targets.
pub fn fit_gp_rows(
    inputs: Vec<Vec<f64>>,
    targets: DMatrix<f64>,
    opts: &GpFitOptions,
) -> Result<(GPCorrectionModel, GpSearch)> {
    let search = optimize_hyper(&inputs, &targets, opts)?;
    let model = GPCorrectionModel::condition(inputs, targets, search.hyper)?;
    Ok((model, search))
}

/// Fit on control sets from two sites with the site indicator as the only
/// covariate (first site seen is 0).
pub fn fit_gp(
    controls: &[&ImageSet],
    opts: &GpFitOptions,
) -> Result<(GPCorrectionModel, GpSearch)> {
    let coding = SiteCoding::from_sets(controls)?;
    let shape = super::common_shape(controls)?;
    let mut inputs = Vec::new();
    let mut rows: Vec<&[f64]> = Vec::new();
    for set in controls {
        let code = f64::from(coding.code(&set.domain)?);
        for im in set.images() {
            inputs.push(vec![code]);
            rows.push(im.data());
        }
    }
    ensure!(
        rows.len() >= 2,
        Invalid,
        "GP fitting needs at least 2 controls"
    );
    let v = rows[0].len();
    let targets = DMatrix::from_fn(rows.len(), v, |i, j| rows[i][j]);
    let (mut model, search) = fit_gp_rows(inputs, targets, opts)?;
    model.site_coding = Some(coding);
    model.image_shape = shape;
    Ok((model, search))
}

impl GPCorrectionModel {
    fn site_covariates(&self, site: &str) -> Result<Vec<f64>> {
        let coding = self
            .site_coding
            .as_ref()
            .ok_or_else(|| Error::Config("GP model was not fitted on site-coded sets".into()))?;
        Ok(vec![f64::from(coding.code(site)?)])
    }

    /// Map every image of `set` onto the reference (code 0) site with
    /// [`GPCorrectionModel::apply_to_reference`], clamped to `[-1, 1]`.
    pub fn apply_set(&self, set: &ImageSet) -> Result<ImageSet> {
        let cov = self.site_covariates(&set.domain)?;
        let out = set
            .images()
            .iter()
            .map(|im| {
                Ok(self
                    .apply_to_reference(im, &cov, &[0.0])?
                    .map(|v| v.clamp(-1.0, 1.0)))
            })
            .collect::<Result<Vec<_>>>()?;
        set.with_images(
            out,
            format!("{} | gp correction to reference site", set.provenance),
        )
    }
}
