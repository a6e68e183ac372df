use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pca::PcaModel;
use crate::data::ImageSet;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMse {
    pub id: String,
    pub mse_corrected: f64,
    pub mse_baseline: f64,
    pub decrease_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub subjects: Vec<SubjectMse>,
    pub mean_mse_corrected: f64,
    pub mean_mse_baseline: f64,
    /// Mean over subjects of `100 (1 - mse_corrected / mse_baseline)`.
    pub mean_decrease_pct: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn by_id(set: &ImageSet) -> Result<HashMap<&str, usize>> {
    let ids = set
        .subject_ids
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("set {:?} carries no subject IDs", set.domain)))?;
    let mut map = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        ensure!(
            map.insert(id.as_str(), i).is_none(),
            Invalid,
            "subject {id:?} appears twice in {:?}",
            set.domain
        );
    }
    Ok(map)
}

/// Per-subject error of `corrected` and of the uncorrected `baseline` against
/// `reference`, matched by subject ID. Subjects are reported in the order of
/// `corrected`.
pub fn reconstruction_mse(
    corrected: &ImageSet,
    reference: &ImageSet,
    baseline: &ImageSet,
) -> Result<ReconstructionReport> {
    let c_ids = by_id(corrected)?;
    let r_ids = by_id(reference)?;
    let b_ids = by_id(baseline)?;
    ensure!(
        c_ids.len() == r_ids.len() && c_ids.len() == b_ids.len(),
        Invalid,
        "subject counts differ: corrected {}, reference {}, baseline {}",
        c_ids.len(),
        r_ids.len(),
        b_ids.len()
    );
    ensure!(!c_ids.is_empty(), Invalid, "no subjects to compare");
    let order = corrected.subject_ids.as_ref().expect("checked by by_id");
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let (Some(&ri), Some(&bi)) = (r_ids.get(id.as_str()), b_ids.get(id.as_str())) else {
            return Err(Error::Invalid(format!(
                "subject {id:?} is missing from the reference or baseline set"
            )));
        };
        let c = corrected.images()[c_ids[id.as_str()]].data();
        let r = reference.images()[ri].data();
        let b = baseline.images()[bi].data();
        ensure!(
            c.len() == r.len() && b.len() == r.len(),
            Dimension,
            "image sizes differ for subject {id:?}"
        );
        let mse_corrected = mse(c, r);
        let mse_baseline = mse(b, r);
        if mse_baseline == 0.0 {
            return Err(Error::Numerical(format!(
                "baseline image of subject {id:?} already equals the reference; the decrease is undefined"
            )));
        }
        subjects.push(SubjectMse {
            id: id.clone(),
            mse_corrected,
            mse_baseline,
            decrease_pct: 100.0 * (1.0 - mse_corrected / mse_baseline),
        });
    }
    let n = subjects.len() as f64;
    Ok(ReconstructionReport {
        mean_mse_corrected: subjects.iter().map(|s| s.mse_corrected).sum::<f64>() / n,
        mean_mse_baseline: subjects.iter().map(|s| s.mse_baseline).sum::<f64>() / n,
        mean_decrease_pct: subjects.iter().map(|s| s.decrease_pct).sum::<f64>() / n,
        subjects,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub pc1: f64,
    pub pc2: f64,
    pub domain: String,
    pub label: Option<u32>,
}

pub const SCATTER_CSV_HEADER: &str = "pc1,pc2,domain,label";

/// First two principal coordinates of every image in `sets`.
pub fn pca_scatter(model: &PcaModel, sets: &[&ImageSet]) -> Result<Vec<ScatterPoint>> {
    ensure!(
        model.k >= 2,
        Invalid,
        "a scatter needs a PCA model with 2 components, this one has {}",
        model.k
    );
    let mut out = Vec::new();
    for s in sets {
        for (i, im) in s.images().iter().enumerate() {
            let x = im.data();
            ensure!(
                x.len() == model.dim(),
                Dimension,
                "PCA model expects {} pixels, got {}",
                model.dim(),
                x.len()
            );
            let score = |axis: &[f64]| {
                x.iter()
                    .zip(axis)
                    .zip(&model.mean)
                    .map(|((v, a), m)| (v - m) * a)
                    .sum::<f64>()
            };
            out.push(ScatterPoint {
                pc1: score(&model.components[0]),
                pc2: score(&model.components[1]),
                domain: s.domain.clone(),
                label: s.content_labels.as_ref().map(|l| l[i]),
            });
        }
    }
    Ok(out)
}

pub fn scatter_to_csv(points: &[ScatterPoint]) -> String {
    let mut out = String::from(SCATTER_CSV_HEADER);
    out.push('\n');
    for p in points {
        let label = p.label.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", p.pc1, p.pc2, p.domain, label));
    }
    out
}

pub fn pca_scatter_export(
    model: &PcaModel,
    sets: &[&ImageSet],
    path: &Path,
) -> Result<Vec<ScatterPoint>> {
    let points = pca_scatter(model, sets)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, scatter_to_csv(&points)).map_err(|e| Error::io(path, e))?;
    Ok(points)
}

/// Euclidean distance between the centroids of two domains in the plane.
pub fn centroid_distance(points: &[ScatterPoint], a: &str, b: &str) -> Result<f64> {
    let centroid = |d: &str| -> Result<(f64, f64)> {
        let sel: Vec<&ScatterPoint> = points.iter().filter(|p| p.domain == d).collect();
        ensure!(
            !sel.is_empty(),
            Invalid,
            "no scatter points for domain {d:?}"
        );
        let n = sel.len() as f64;
        Ok((
            sel.iter().map(|p| p.pc1).sum::<f64>() / n,
            sel.iter().map(|p| p.pc2).sum::<f64>() / n,
        ))
    };
    let (ca, cb) = (centroid(a)?, centroid(b)?);
    Ok(((ca.0 - cb.0).powi(2) + (ca.1 - cb.1).powi(2)).sqrt())
}
