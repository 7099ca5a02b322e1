//! Ranking metrics, per-video scoring and hyperparameter sweeps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, LabeledVideo};
use crate::error::{Error, Result};
use crate::model::{ClassifierConfig, Model, MtnConfig};
use crate::tensor::topk::topk_by_value;
use crate::trainer::{fit, TrainConfig};

fn check_pairs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i} is {}", scores[i])));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("labels must be 0 or 1, got {l}")));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann–Whitney statistic; tied
/// positive/negative pairs count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups, 1-based
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&o| labels[o] == 1).count();
        pos_rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: mean of the precision at each positive when walking
/// scores in descending order, ties resolved by lower index first.
pub fn ap(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// Scores, temporal-feature magnitudes and ground truth for one video.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredSequence {
    pub id: String,
    pub scores: Vec<f64>,
    pub magnitudes: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSequence {
    /// Mean of the `k` largest magnitudes.
    pub fn topk_magnitude(&self, k: usize) -> Result<f64> {
        let idx = topk_by_value(&self.magnitudes, k)?;
        Ok(idx.iter().map(|&i| self.magnitudes[i]).sum::<f64>() / k as f64)
    }
}

/// Inference-mode scores and `‖x_t‖₂` of the temporal features.
pub fn score_video(model: &Model, video: &LabeledVideo) -> Result<ScoredSequence> {
    let labels = video.ground_truth()?;
    let (x, scores) = model.forward(&video.features)?;
    Ok(ScoredSequence {
        id: video.id.clone(),
        scores,
        magnitudes: x.row_norms(),
        labels,
    })
}

/// Columns `t, score, magnitude, label`.
pub fn write_score_csv(path: impl AsRef<Path>, seq: &ScoredSequence) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["t", "score", "magnitude", "label"]).map_err(|e| csv_error(path, e))?;
    for t in 0..seq.scores.len() {
        w.write_record([
            t.to_string(),
            seq.scores[t].to_string(),
            seq.magnitudes[t].to_string(),
            seq.labels[t].to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub auc: f64,
    pub ap: f64,
    pub videos: usize,
    pub snippets: usize,
    /// Each snippet's score repeated this many times before computing metrics.
    pub expansion: usize,
    pub k: usize,
    pub mean_topk_magnitude_abnormal: Option<f64>,
    pub mean_topk_magnitude_normal: Option<f64>,
    pub mean_score_abnormal_snippets: Option<f64>,
    pub mean_score_normal_snippets: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores every video and computes pooled snippet-level AUC and AP. With
/// `expansion > 1` every snippet stands for that many frames.
pub fn evaluate(model: &Model, dataset: &Dataset, k: usize, expansion: usize) -> Result<(EvalReport, Vec<ScoredSequence>)> {
    if expansion == 0 {
        return Err(Error::Parameter("expansion factor must be ≥ 1".into()));
    }
    let seqs = dataset
        .videos
        .iter()
        .map(|v| score_video(model, v))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let (mut mag_a, mut mag_n, mut score_a, mut score_n) = (vec![], vec![], vec![], vec![]);
    for (seq, video) in seqs.iter().zip(&dataset.videos) {
        for (&s, &l) in seq.scores.iter().zip(&seq.labels) {
            scores.extend(std::iter::repeat_n(s, expansion));
            labels.extend(std::iter::repeat_n(l, expansion));
            if l == 1 { score_a.push(s) } else { score_n.push(s) }
        }
        let m = seq.topk_magnitude(k)?;
        if video.is_abnormal() { mag_a.push(m) } else { mag_n.push(m) }
    }
    let report = EvalReport {
        auc: auc(&scores, &labels)?,
        ap: ap(&scores, &labels)?,
        videos: seqs.len(),
        snippets: seqs.iter().map(|s| s.scores.len()).sum(),
        expansion,
        k,
        mean_topk_magnitude_abnormal: mean(&mag_a),
        mean_topk_magnitude_normal: mean(&mag_n),
        mean_score_abnormal_snippets: mean(&score_a),
        mean_score_normal_snippets: mean(&score_n),
    };
    Ok((report, seqs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    K,
    M,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Self::K),
            "m" => Ok(Self::M),
            other => Err(Error::Config(format!("sweep axis must be k or m, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub auc: f64,
    pub ap: f64,
}

/// Trains one model per value of `axis` from the same seed and evaluates it
/// on `test`.
pub fn sweep(
    train: &Dataset,
    test: &Dataset,
    mtn: &MtnConfig,
    classifier: &ClassifierConfig,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Parameter("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let mut cfg = base.clone();
            match axis {
                SweepAxis::K => {
                    if value < 1.0 || value.fract() != 0.0 {
                        return Err(Error::Parameter(format!("k must be a positive integer, got {value}")));
                    }
                    cfg.loss.k = value as usize;
                }
                SweepAxis::M => cfg.loss.margin = value,
            }
            let outcome = fit(train, None, mtn, classifier, &cfg)?;
            if let Some(reason) = &outcome.diverged {
                return Err(Error::NonFinite(format!("training diverged at {axis:?}={value}: {reason}")));
            }
            let model = Model::new(mtn.clone(), classifier.clone(), outcome.params)?;
            let (report, _) = evaluate(&model, test, cfg.loss.k, 1)?;
            Ok(SweepRow {
                value,
                auc: report.auc,
                ap: report.ap,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: impl AsRef<Path>, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let name = match axis {
        SweepAxis::K => "k",
        SweepAxis::M => "m",
    };
    let mut out = format!("{name},auc,ap\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.value, r.auc, r.ap));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(ap(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ties_split_credit() {
        assert_eq!(auc(&[0.5, 0.5, 0.5], &[1, 0, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.5, 0.5, 0.1], &[1, 1, 0, 0]).unwrap(), 0.875);
    }

    #[test]
    fn ap_rank_walk() {
        assert_eq!(ap(&[0.9, 0.1, 0.2], &[1, 0, 0]).unwrap(), 1.0);
        assert!((ap(&[0.1, 0.9, 0.8, 0.7], &[1, 0, 0, 0]).unwrap() - 0.25).abs() < 1e-15);
        // tie at 0.5: index 0 (negative) first, then index 1 (positive)
        assert_eq!(ap(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }
}
