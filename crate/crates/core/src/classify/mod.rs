//! Evaluation harness: PCA features, kernel SVM, fold metrics, comparison
//! against the uncorrected baseline, and paired reconstruction error.

mod compare;
mod cv;
mod metrics;
mod pca;
mod reconstruct;
mod svm;

pub use compare::{
    compare_to, compare_to_baseline, paired_t, ComparisonReport, MethodComparison,
    MetricComparison, ALPHA,
};
pub use cv::{
    cross_validate, cross_validate_detailed, evaluate_methods, fit_pipeline, stratified_folds,
    Dataset, FittedPipeline, FoldResult, Pipeline, DEFAULT_FOLDS,
};
pub use metrics::{
    compute_metrics, metrics_to_csv, Confusion, Method, MetricRow, METRICS_CSV_HEADER, METRIC_NAMES,
};
pub use pca::{pca_fit, pca_transform, PcaModel, DEFAULT_PCA_COMPONENTS};
pub use reconstruct::{
    centroid_distance, pca_scatter, pca_scatter_export, reconstruction_mse, scatter_to_csv,
    ReconstructionReport, ScatterPoint, SubjectMse, SCATTER_CSV_HEADER,
};
pub use svm::{
    class_bounds, dual_objective, gram_matrix, svm_predict, svm_train, ClassWeight, GammaRule,
    Kernel, KernelSpec, SvmConfig, SvmModel,
};
