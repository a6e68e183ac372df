use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::metrics::{Method, MetricRow, METRIC_NAMES};
use crate::error::{ensure, Error, Result};

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    /// `(fold, method - baseline)` in fold order.
    pub differences: Vec<(usize, f64)>,
    pub mean: f64,
    pub sd: f64,
    pub t: f64,
    pub p: f64,
    pub p_adjusted: f64,
    pub significant: bool,
    /// Zero spread with zero mean, or fewer than two folds: reported as no
    /// difference with p = 1.
    pub no_difference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method: Method,
    pub metrics: Vec<MetricComparison>,
}

impl MethodComparison {
    pub fn metric(&self, name: &str) -> Option<&MetricComparison> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub alpha: f64,
    pub adjustment: String,
    /// Number of method-versus-baseline comparisons the p-values are adjusted for.
    pub comparisons: usize,
    pub methods: Vec<MethodComparison>,
}

impl ComparisonReport {
    pub fn method(&self, m: Method) -> Option<&MethodComparison> {
        self.methods.iter().find(|c| c.method == m)
    }
}

/// Two-sided paired t-test of `diffs` against zero:
/// `(mean, sd, t, p, no_difference)`.
pub fn paired_t(diffs: &[f64]) -> (f64, f64, f64, f64, bool) {
    let n = diffs.len();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0, 0.0, 1.0, true);
    }
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        if mean == 0.0 {
            return (mean, sd, 0.0, 1.0, true);
        }
        return (mean, sd, mean.signum() * f64::INFINITY, 0.0, false);
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    (mean, sd, t, p, false)
}

/// Per-fold differences of every method against the baseline, paired t-tests
/// and a Bonferroni adjustment over the number of methods compared.
pub fn compare_to_baseline(rows: &[MetricRow]) -> Result<ComparisonReport> {
    compare_to(rows, Method::Baseline)
}

/// As [`compare_to_baseline`] with any method playing the reference role.
pub fn compare_to(rows: &[MetricRow], reference: Method) -> Result<ComparisonReport> {
    let mut by_method: BTreeMap<Method, BTreeMap<usize, &MetricRow>> = BTreeMap::new();
    for r in rows {
        let slot = by_method.entry(r.method).or_default();
        ensure!(
            slot.insert(r.fold, r).is_none(),
            Invalid,
            "fold {} appears twice for {}",
            r.fold,
            r.method
        );
    }
    let base = by_method
        .get(&reference)
        .ok_or_else(|| Error::Invalid(format!("no {reference} rows to compare against")))?;
    let others: Vec<Method> = by_method
        .keys()
        .copied()
        .filter(|&m| m != reference)
        .collect();
    ensure!(
        !others.is_empty(),
        Invalid,
        "no method rows besides {reference}"
    );
    let m = others.len();
    let mut methods = Vec::new();
    for method in others {
        let rows = &by_method[&method];
        ensure!(
            rows.keys().eq(base.keys()),
            Invalid,
            "{method} was evaluated on folds {:?} but {reference} on {:?}",
            rows.keys().collect::<Vec<_>>(),
            base.keys().collect::<Vec<_>>()
        );
        let mut metrics = Vec::new();
        for (k, name) in METRIC_NAMES.iter().enumerate() {
            let differences: Vec<(usize, f64)> = rows
                .iter()
                .map(|(&f, r)| (f, r.values()[k] - base[&f].values()[k]))
                .collect();
            let d: Vec<f64> = differences.iter().map(|x| x.1).collect();
            let (mean, sd, t, p, no_difference) = paired_t(&d);
            let p_adjusted = (p * m as f64).min(1.0);
            metrics.push(MetricComparison {
                metric: name.to_string(),
                differences,
                mean,
                sd,
                t,
                p,
                p_adjusted,
                significant: p_adjusted < ALPHA,
                no_difference,
            });
        }
        methods.push(MethodComparison { method, metrics });
    }
    Ok(ComparisonReport {
        alpha: ALPHA,
        adjustment: "bonferroni".into(),
        comparisons: m,
        methods,
    })
}
