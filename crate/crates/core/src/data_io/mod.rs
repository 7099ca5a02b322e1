//! Datasets on disk and in memory.
//!
//! Three formats live here: per-video feature files, the line-oriented
//! dataset manifest, and the parameter checkpoint container. The synthetic
//! generator produces datasets with a known abnormal-snippet layout.

mod checkpoint;
mod features;
mod manifest;
mod synthetic;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use features::{decode_features, encode_features, read_feature_header, read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{load_dataset, parse_manifest, read_manifest, write_dataset, write_manifest, DatasetManifest, ManifestEntry, MANIFEST_VERSION};
pub use synthetic::{expected_norm, expected_norm_gap, generate, generate_synthetic_dataset, SyntheticData, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One video's `T×D` features with its weak label and, when known, the
/// per-snippet ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub id: String,
    pub features: Tensor,
    pub label: u8,
    pub snippet_labels: Option<Vec<u8>>,
}

impl LabeledVideo {
    pub fn is_abnormal(&self) -> bool {
        self.label == 1
    }

    /// Ground truth per snippet; normal videos without labels are all zero.
    pub fn ground_truth(&self) -> Result<Vec<u8>> {
        match (&self.snippet_labels, self.label) {
            (Some(l), _) => Ok(l.clone()),
            (None, 0) => Ok(vec![0; self.features.rows()]),
            (None, _) => Err(Error::Validation(format!(
                "abnormal video {} has no snippet labels",
                self.id
            ))),
        }
    }
}

/// Videos sharing `T` and `D`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub snippets: usize,
    pub feature_dim: usize,
    pub videos: Vec<LabeledVideo>,
}

impl Dataset {
    pub fn new(snippets: usize, feature_dim: usize, videos: Vec<LabeledVideo>) -> Result<Self> {
        let ds = Self {
            snippets,
            feature_dim,
            videos,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut offenders = Vec::new();
        for v in &self.videos {
            let shape_ok = v.features.shape() == [self.snippets, self.feature_dim];
            let label_ok = v.label <= 1;
            let gt_ok = match &v.snippet_labels {
                None => true,
                Some(l) => {
                    let positives = l.iter().filter(|&&s| s == 1).count();
                    l.len() == self.snippets
                        && l.iter().all(|&s| s <= 1)
                        && (if v.label == 1 { positives >= 1 } else { positives == 0 })
                }
            };
            if !(shape_ok && label_ok && gt_ok) {
                offenders.push(v.id.clone());
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Validation(format!(
                "videos inconsistent with T={} D={}: {}",
                self.snippets,
                self.feature_dim,
                offenders.join(", ")
            )));
        }
        Ok(())
    }

    pub fn abnormal(&self) -> impl Iterator<Item = &LabeledVideo> {
        self.videos.iter().filter(|v| v.label == 1)
    }

    pub fn normal(&self) -> impl Iterator<Item = &LabeledVideo> {
        self.videos.iter().filter(|v| v.label == 0)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}
