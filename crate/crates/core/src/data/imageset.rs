use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::ndtensor::Tensor;

/// Same-shape single-channel images in `[-1, 1]` from one acquisition site.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    images: Vec<Tensor>,
    pub domain: String,
    pub content_labels: Option<Vec<u32>>,
    pub subject_ids: Option<Vec<String>>,
    pub provenance: String,
}

/// Slack for values that should be in `[-1, 1]` but carry rounding error.
const RANGE_SLACK: f64 = 1e-9;

impl ImageSet {
    /// Validate and assemble a set. Every image must be `[1, H, W]` with the
    /// same `H, W` and values in `[-1, 1]`.
    pub fn new(
        images: Vec<Tensor>,
        domain: impl Into<String>,
        content_labels: Option<Vec<u32>>,
        subject_ids: Option<Vec<String>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if let Some(first) = images.first() {
            let shape = first.shape().to_vec();
            ensure!(
                shape.len() == 3 && shape[0] == 1,
                Dimension,
                "images must be [1, H, W], got {:?}",
                shape
            );
            for (i, im) in images.iter().enumerate() {
                ensure!(
                    im.shape() == shape.as_slice(),
                    Dimension,
                    "image {i} has shape {:?}, expected {:?}",
                    im.shape(),
                    shape
                );
                ensure!(
                    im.data().iter().all(|v| v.abs() <= 1.0 + RANGE_SLACK),
                    Invalid,
                    "image {i} has values outside [-1, 1]"
                );
            }
        }
        if let Some(l) = &content_labels {
            ensure!(
                l.len() == images.len(),
                Dimension,
                "{} labels for {} images",
                l.len(),
                images.len()
            );
        }
        if let Some(ids) = &subject_ids {
            ensure!(
                ids.len() == images.len(),
                Dimension,
                "{} subject ids for {} images",
                ids.len(),
                images.len()
            );
        }
        Ok(Self {
            images,
            domain: domain.into(),
            content_labels,
            subject_ids,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    /// `(H, W)`, or `None` for an empty set.
    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.shape()[1], t.shape()[2]))
    }

    pub fn pixels(&self) -> usize {
        self.image_shape().map_or(0, |(h, w)| h * w)
    }

    /// Stack the selected images into an `[n, 1, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&items)
    }

    /// Row-major `n x (H*W)` design matrix.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.images.iter().map(|t| t.data().to_vec()).collect()
    }

    /// A new set with the same metadata and replaced images.
    pub fn with_images(&self, images: Vec<Tensor>, provenance: impl Into<String>) -> Result<Self> {
        Self::new(
            images,
            self.domain.clone(),
            self.content_labels.clone(),
            self.subject_ids.clone(),
            provenance,
        )
    }

    /// The subset at `indices`, metadata carried along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            domain: self.domain.clone(),
            content_labels: self
                .content_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            subject_ids: self
                .subject_ids
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenate sets of the same image shape; the domain of the first set is kept.
    pub fn concat(parts: &[&ImageSet], domain: &str) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Some(Vec::new());
        let mut ids = Some(Vec::new());
        for p in parts {
            images.extend(p.images.iter().cloned());
            labels = match (labels, &p.content_labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
            ids = match (ids, &p.subject_ids) {
                (Some(mut acc), Some(l)) => {
                    acc.extend(l.iter().cloned());
                    Some(acc)
                }
                _ => None,
            };
        }
        Self::new(images, domain, labels, ids, "concatenated")
    }

    /// Map every image through `f` and re-validate.
    pub fn map_images(
        &self,
        provenance: &str,
        mut f: impl FnMut(usize, &Tensor) -> Tensor,
    ) -> Result<Self> {
        let images = self
            .images
            .iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect();
        self.with_images(images, format!("{} | {provenance}", self.provenance))
    }
}

/// Metadata stored next to an image container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetEntry {
    pub name: String,
    pub path: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
    #[serde(default)]
    pub provenance: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> Tensor {
        Tensor::full(&[1, 2, 2], v)
    }

    #[test]
    fn rejects_out_of_range_and_mixed_shapes() {
        assert!(ImageSet::new(vec![img(1.5)], "A", None, None, "").is_err());
        assert!(ImageSet::new(
            vec![img(0.0), Tensor::zeros(&[1, 3, 2])],
            "A",
            None,
            None,
            ""
        )
        .is_err());
        assert!(ImageSet::new(vec![img(0.0)], "A", Some(vec![1, 2]), None, "").is_err());
        assert!(ImageSet::new(vec![], "A", None, None, "")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn select_carries_metadata() {
        let set = ImageSet::new(
            vec![img(0.1), img(0.2), img(0.3)],
            "B",
            Some(vec![0, 1, 2]),
            Some(vec!["s0".into(), "s1".into(), "s2".into()]),
            "t",
        )
        .unwrap();
        let sub = set.select(&[2, 0]);
        assert_eq!(sub.content_labels.as_deref(), Some(&[2, 0][..]));
        assert_eq!(sub.subject_ids.as_ref().unwrap()[0], "s2");
        assert_eq!(sub.images()[1], img(0.1));
        let b = set.batch(&[0, 1]).unwrap();
        assert_eq!(b.shape(), &[2, 1, 2, 2]);
    }
}
