use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{Confusion, Method, MetricRow};
use super::pca::{pca_fit, PcaModel, DEFAULT_PCA_COMPONENTS};
use super::svm::{svm_predict, svm_train, SvmConfig, SvmModel};
use crate::data::ImageSet;
use crate::error::{ensure, Error, Result};
use crate::rng::{derive_indexed, rng_from};

pub const DEFAULT_FOLDS: usize = 10;

/// Feature rows with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self> {
        ensure!(
            rows.len() == labels.len(),
            Dimension,
            "{} rows for {} labels",
            rows.len(),
            labels.len()
        );
        let d = rows.first().map_or(0, |r| r.len());
        ensure!(
            rows.iter().all(|r| r.len() == d),
            Dimension,
            "rows have different feature counts"
        );
        Ok(Self { rows, labels })
    }

    /// Pool the sets, labelling every image with the position of its set.
    pub fn by_set(sets: &[&ImageSet]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (k, s) in sets.iter().enumerate() {
            rows.extend(s.to_rows());
            labels.extend(std::iter::repeat_n(k as u32, s.len()));
        }
        Self::new(rows, labels)
    }

    /// Pool the sets, labelling every image with its content label.
    pub fn by_content(sets: &[&ImageSet]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for s in sets {
            let l = s.content_labels.as_ref().ok_or_else(|| {
                Error::Invalid(format!("set {:?} carries no content labels", s.domain))
            })?;
            rows.extend(s.to_rows());
            labels.extend_from_slice(l);
        }
        Self::new(rows, labels)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn matrix(&self, indices: &[usize]) -> DMatrix<f64> {
        let d = self.rows.first().map_or(0, |r| r.len());
        DMatrix::from_fn(indices.len(), d, |i, j| self.rows[indices[i]][j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pipeline {
    pub method: Method,
    pub pca_components: usize,
    pub svm: SvmConfig,
    pub positive_class: u32,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self {
            method: Method::Baseline,
            pca_components: DEFAULT_PCA_COMPONENTS,
            svm: SvmConfig::default(),
            positive_class: 1,
        }
    }
}

/// Fold index of every example. Each class is shuffled on its own stream and
/// dealt round robin, continuing where the previous class stopped, so fold
/// sizes differ by at most one.
///
/// Every class needs at least `folds` members, except for leave-one-out
/// (`folds == n`) where two per class suffice.
pub fn stratified_folds(labels: &[u32], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n = labels.len();
    ensure!(
        folds >= 2,
        Invalid,
        "cross-validation needs at least 2 folds, got {folds}"
    );
    ensure!(folds <= n, Invalid, "{folds} folds for {n} examples");
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    ensure!(
        classes.len() >= 2,
        Invalid,
        "cross-validation needs two classes, got {:?}",
        classes
    );
    let need = if folds == n { 2 } else { folds };
    let mut assignment = vec![0; n];
    let mut next = 0;
    for &c in &classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        ensure!(
            members.len() >= need,
            Invalid,
            "class {c} has {} examples, {need} are needed for {folds}-fold cross-validation",
            members.len()
        );
        members.shuffle(&mut rng_from(derive_indexed(
            seed,
            "cv-folds",
            u64::from(c),
        )));
        for i in members {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok(assignment)
}

/// PCA and SVM fitted on one training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPipeline {
    pub pca: PcaModel,
    pub svm: SvmModel,
    pub positive_class: u32,
    pub negative_class: u32,
}

impl FittedPipeline {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut put = |v: f64| h.update(v.to_bits().to_le_bytes());
        self.pca.mean.iter().copied().for_each(&mut put);
        self.pca
            .components
            .iter()
            .flatten()
            .copied()
            .for_each(&mut put);
        self.svm
            .support_vectors
            .iter()
            .flatten()
            .copied()
            .for_each(&mut put);
        self.svm.dual_coefs.iter().copied().for_each(&mut put);
        put(self.svm.bias);
        h.update(self.positive_class.to_le_bytes());
        h.update(self.negative_class.to_le_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<u32>> {
        let scores = self.pca.transform(features)?;
        let (labels, _) = svm_predict(&self.svm, &scores)?;
        Ok(labels
            .into_iter()
            .map(|y| {
                if y > 0 {
                    self.positive_class
                } else {
                    self.negative_class
                }
            })
            .collect())
    }
}

pub fn fit_pipeline(
    data: &Dataset,
    train: &[usize],
    pipeline: &Pipeline,
) -> Result<FittedPipeline> {
    let x = data.matrix(train);
    let labels: Vec<u32> = train.iter().map(|&i| data.labels[i]).collect();
    let negative_class = labels
        .iter()
        .copied()
        .find(|&l| l != pipeline.positive_class)
        .ok_or_else(|| Error::Invalid("training split contains a single class".into()))?;
    ensure!(
        labels
            .iter()
            .all(|&l| l == pipeline.positive_class || l == negative_class),
        Invalid,
        "classification is binary, found more than two labels"
    );
    ensure!(
        labels.contains(&pipeline.positive_class),
        Invalid,
        "training split has no example of the positive class {}",
        pipeline.positive_class
    );
    let pca = pca_fit(&x, pipeline.pca_components)?;
    let scores = pca.transform(&x)?;
    let y: Vec<i8> = labels
        .iter()
        .map(|&l| if l == pipeline.positive_class { 1 } else { -1 })
        .collect();
    let svm = svm_train(&scores, &y, &pipeline.svm)?;
    Ok(FittedPipeline {
        pca,
        svm,
        positive_class: pipeline.positive_class,
        negative_class,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub metrics: MetricRow,
    pub test_indices: Vec<usize>,
    pub model_hash: String,
    pub svm_converged: bool,
}

/// Stratified k-fold evaluation; PCA and SVM see the training folds only.
/// Folds run on up to `threads` worker threads.
pub fn cross_validate_detailed(
    data: &Dataset,
    pipeline: &Pipeline,
    folds: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<FoldResult>> {
    let assignment = stratified_folds(&data.labels, folds, seed)?;
    let run_fold = |f: usize| -> Result<FoldResult> {
        let test: Vec<usize> = (0..data.len()).filter(|&i| assignment[i] == f).collect();
        let train: Vec<usize> = (0..data.len()).filter(|&i| assignment[i] != f).collect();
        let fitted = fit_pipeline(data, &train, pipeline)?;
        let pred = fitted.predict(&data.matrix(&test))?;
        let truth: Vec<u32> = test.iter().map(|&i| data.labels[i]).collect();
        let c = Confusion::from_labels(&pred, &truth, pipeline.positive_class)?;
        Ok(FoldResult {
            metrics: MetricRow::from_confusion(c, f, pipeline.method),
            test_indices: test,
            model_hash: fitted.hash(),
            svm_converged: fitted.svm.converged,
        })
    };
    let threads = threads.clamp(1, folds);
    if threads == 1 {
        return (0..folds).map(run_fold).collect();
    }
    let mut results: Vec<Option<Result<FoldResult>>> = (0..folds).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let run_fold = &run_fold;
                scope.spawn(move || {
                    (w..folds)
                        .step_by(threads)
                        .map(|f| (f, run_fold(f)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (f, r) in h.join().expect("fold worker panicked") {
                results[f] = Some(r);
            }
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect()
}

pub fn cross_validate(
    data: &Dataset,
    pipeline: &Pipeline,
    folds: usize,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    Ok(cross_validate_detailed(data, pipeline, folds, seed, 1)?
        .into_iter()
        .map(|r| r.metrics)
        .collect())
}

/// Evaluate several corrected versions of the same examples on identical
/// folds. Every dataset must carry the same labels in the same order.
pub fn evaluate_methods(
    datasets: &[(Method, &Dataset)],
    pipeline: &Pipeline,
    folds: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<MetricRow>> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Invalid("no datasets to evaluate".into()))?;
    let mut rows = Vec::new();
    for (method, data) in datasets {
        ensure!(
            data.labels == first.1.labels,
            Invalid,
            "dataset for {method} does not carry the same labels as {}",
            first.0
        );
        let p = Pipeline {
            method: *method,
            ..*pipeline
        };
        rows.extend(
            cross_validate_detailed(data, &p, folds, seed, threads)?
                .into_iter()
                .map(|r| r.metrics),
        );
    }
    Ok(rows)
}
