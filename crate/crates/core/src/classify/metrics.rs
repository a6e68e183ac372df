use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Linear,
    Gp,
    Gan,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Linear, Method::Gp, Method::Gan];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Linear => "linear",
            Method::Gp => "gp",
            Method::Gan => "gan",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown method {s:?}; expected baseline, linear, gp or gan"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(predictions: &[u32], truth: &[u32], positive: u32) -> Result<Self> {
        ensure!(
            predictions.len() == truth.len(),
            Dimension,
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        );
        ensure!(!truth.is_empty(), Invalid, "no predictions to score");
        let mut c = Confusion::default();
        for (&p, &t) in predictions.iter().zip(truth) {
            match (p == positive, t == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// The four scores of one confusion matrix.
///
/// A ratio with an empty denominator is reported as 1.0 and named in
/// `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fold: usize,
    pub method: Method,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
    pub confusion: Confusion,
}

pub const METRIC_NAMES: [&str; 4] = ["accuracy", "precision", "recall", "specificity"];

impl MetricRow {
    pub fn from_confusion(c: Confusion, fold: usize, method: Method) -> Self {
        let mut undefined = Vec::new();
        let mut ratio = |num: usize, den: usize, name: &str| {
            if den == 0 {
                undefined.push(name.to_string());
                1.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(c.tp, c.tp + c.fp, "precision");
        let recall = ratio(c.tp, c.tp + c.fn_, "recall");
        let specificity = ratio(c.tn, c.tn + c.fp, "specificity");
        Self {
            fold,
            method,
            accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
            precision,
            recall,
            specificity,
            undefined,
            confusion: c,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => Some(self.accuracy),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "specificity" => Some(self.specificity),
            _ => None,
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.specificity]
    }
}

pub fn compute_metrics(
    predictions: &[u32],
    truth: &[u32],
    positive_class: u32,
) -> Result<MetricRow> {
    let c = Confusion::from_labels(predictions, truth, positive_class)?;
    Ok(MetricRow::from_confusion(c, 0, Method::Baseline))
}

pub const METRICS_CSV_HEADER: &str =
    "fold,method,accuracy,precision,recall,specificity,tp,fp,fn,tn,undefined";

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let c = r.confusion;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.fold,
            r.method,
            r.accuracy,
            r.precision,
            r.recall,
            r.specificity,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            r.undefined.join(";")
        ));
    }
    out
}
