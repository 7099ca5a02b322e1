//! Top-k feature-magnitude objective.
//!
//! Every function records onto a [`Graph`] so that gradients reach both the
//! temporal network and the classifier.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data_io::LabeledVideo;
use crate::error::{Error, Result};
use crate::model::{classify_snippets, mtn_forward, ClassifierConfig, ModelParams, MtnConfig};
use crate::tensor::{topk_rows_by_l2, Graph, Tensor, Var};

/// Scores are clamped to `[BCE_EPS, 1 − BCE_EPS]` before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub k: usize,
    pub margin: f64,
    pub smoothness_weight: f64,
    pub sparsity_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            k: 3,
            margin: 100.0,
            smoothness_weight: 8e-5,
            sparsity_weight: 8e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be ≥ 1".into()));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.smoothness_weight >= 0.0 && self.sparsity_weight >= 0.0) {
            return Err(Error::Config("regulariser weights must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Mean top-k magnitude and the rows that produced it.
#[derive(Clone, Debug)]
pub struct TopkMagnitude {
    pub value: Var,
    pub indices: Vec<usize>,
}

/// `g = (1/k) Σ_{t ∈ Ω_k(X)} ‖x_t‖₂`. Gradients reach only the selected rows.
pub fn topk_mean_magnitude(g: &mut Graph, x: Var, k: usize) -> Result<TopkMagnitude> {
    let indices = topk_rows_by_l2(g.value(x), k)?;
    let norms = g.row_norms(x)?;
    let picked = g.gather_rows(norms, &indices)?;
    let value = g.mean(picked)?;
    Ok(TopkMagnitude { value, indices })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeparabilityResult {
    pub g_abnormal: f64,
    pub g_normal: f64,
    pub d: f64,
}

#[derive(Clone, Debug)]
pub struct Separability {
    pub abnormal: TopkMagnitude,
    pub normal: TopkMagnitude,
    pub d: Var,
}

impl Separability {
    pub fn result(&self, g: &Graph) -> SeparabilityResult {
        let ga = g.value(self.abnormal.value).data()[0];
        let gn = g.value(self.normal.value).data()[0];
        SeparabilityResult {
            g_abnormal: ga,
            g_normal: gn,
            d: g.value(self.d).data()[0],
        }
    }
}

/// `d = g(X⁺) − g(X⁻)`.
pub fn separability(g: &mut Graph, x_plus: Var, x_minus: Var, k: usize) -> Result<Separability> {
    let abnormal = topk_mean_magnitude(g, x_plus, k)?;
    let normal = topk_mean_magnitude(g, x_minus, k)?;
    let d = g.sub(abnormal.value, normal.value)?;
    Ok(Separability { abnormal, normal, d })
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::Contract(format!("video label must be 0 or 1, got {y}")));
    }
    Ok(())
}

fn hinge(g: &mut Graph, d: Var, margin: f64) -> Result<Var> {
    let neg = g.scale(d, -1.0)?;
    let gap = g.add_scalar(neg, margin)?;
    g.relu(gap)
}

/// `max(0, m − d(X_i, X_j))` when `(y_i, y_j) = (1, 0)`, zero otherwise.
pub fn magnitude_loss(g: &mut Graph, x_i: Var, x_j: Var, y_i: u8, y_j: u8, cfg: &LossConfig) -> Result<Var> {
    check_label(y_i)?;
    check_label(y_j)?;
    if (y_i, y_j) != (1, 0) {
        return g.constant(Tensor::scalar(0.0));
    }
    let sep = separability(g, x_i, x_j, cfg.k)?;
    hinge(g, sep.d, cfg.margin)
}

#[derive(Clone, Debug)]
pub struct ClassifierLoss {
    pub value: Var,
    /// `Ω_k(X)`: the snippets the cross-entropy was taken over.
    pub selected: Vec<usize>,
}

/// Summed binary cross-entropy over the `k` largest-magnitude snippets of
/// `x`, each labelled with the video label `y`.
pub fn classifier_loss(g: &mut Graph, scores: Var, x: Var, y: u8, k: usize) -> Result<ClassifierLoss> {
    let selected = topk_rows_by_l2(g.value(x), k)?;
    classifier_loss_on(g, scores, selected, y)
}

fn classifier_loss_on(g: &mut Graph, scores: Var, selected: Vec<usize>, y: u8) -> Result<ClassifierLoss> {
    check_label(y)?;
    let picked = g.gather_rows(scores, &selected)?;
    let bce = g.bce(picked, f64::from(y), BCE_EPS, 1.0 - BCE_EPS)?;
    let value = g.sum(bce)?;
    Ok(ClassifierLoss { value, selected })
}

/// `Σ_{t≥2} (f_t − f_{t−1})²`; zero for fewer than two snippets.
pub fn smoothness(g: &mut Graph, scores: Var) -> Result<Var> {
    let t = g.value(scores).rows();
    if t < 2 {
        return g.constant(Tensor::scalar(0.0));
    }
    let later: Vec<usize> = (1..t).collect();
    let earlier: Vec<usize> = (0..t - 1).collect();
    let a = g.gather_rows(scores, &later)?;
    let b = g.gather_rows(scores, &earlier)?;
    let diff = g.sub(a, b)?;
    let sq = g.square(diff)?;
    g.sum(sq)
}

/// `Σ_t |f_t|`.
pub fn sparsity(g: &mut Graph, scores: Var) -> Result<Var> {
    let a = g.abs(scores)?;
    g.sum(a)
}

/// Batch objective and the diagnostics the trainer logs.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    /// Mean hinge term over abnormal×normal pairs.
    pub loss_s: f64,
    /// Mean per-video cross-entropy term (regularisers excluded).
    pub loss_f: f64,
    pub g_abnormal: f64,
    pub g_normal: f64,
    /// `Ω_k(X)` for each video, in batch order.
    pub selections: Vec<Vec<usize>>,
}

pub struct Objective<'a> {
    pub mtn: &'a MtnConfig,
    pub classifier: &'a ClassifierConfig,
    pub loss: &'a LossConfig,
}

/// Mean hinge loss over every ordered (abnormal, normal) pair in the batch
/// plus the mean over videos of the classifier term; smoothness and sparsity
/// are added for abnormal videos only. Dropout is active iff `dropout_rng`
/// is given.
pub fn total_loss(
    g: &mut Graph,
    params: &ModelParams<Var>,
    batch: &[&LabeledVideo],
    obj: &Objective<'_>,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<BatchLoss> {
    let n_abn = batch.iter().filter(|v| v.label == 1).count();
    let n_norm = batch.iter().filter(|v| v.label == 0).count();
    if n_abn == 0 || n_norm == 0 {
        return Err(Error::Contract(format!(
            "batch needs both classes, got {n_abn} abnormal and {n_norm} normal"
        )));
    }
    if n_abn + n_norm != batch.len() {
        return Err(Error::Contract("video labels must be 0 or 1".into()));
    }
    let k = obj.loss.k;

    let mut mags = Vec::with_capacity(batch.len());
    let mut per_video = Vec::with_capacity(batch.len());
    let mut selections = Vec::with_capacity(batch.len());
    let mut loss_f = 0.0;
    for video in batch {
        let f = g.constant(video.features.clone())?;
        let x = mtn_forward(g, f, params, obj.mtn)?;
        let mag = topk_mean_magnitude(g, x, k)?;
        let scores = classify_snippets(g, x, params, obj.classifier, dropout_rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
        let cls = classifier_loss_on(g, scores, mag.indices.clone(), video.label)?;
        loss_f += g.value(cls.value).data()[0];
        let mut term = cls.value;
        if video.label == 1 {
            let sm = smoothness(g, scores)?;
            let sm = g.scale(sm, obj.loss.smoothness_weight)?;
            let sp = sparsity(g, scores)?;
            let sp = g.scale(sp, obj.loss.sparsity_weight)?;
            term = g.add(term, sm)?;
            term = g.add(term, sp)?;
        }
        per_video.push(term);
        selections.push(cls.selected);
        mags.push((video.label, mag.value));
    }

    let mut pair_terms = Vec::with_capacity(n_abn * n_norm);
    for &(yi, gi) in &mags {
        for &(yj, gj) in &mags {
            if (yi, yj) == (1, 0) {
                let d = g.sub(gi, gj)?;
                pair_terms.push(hinge(g, d, obj.loss.margin)?);
            }
        }
    }
    let pairs = stack_scalars(g, &pair_terms)?;
    let ls = g.mean(pairs)?;
    let videos = stack_scalars(g, &per_video)?;
    let lf = g.mean(videos)?;
    let total = g.add(ls, lf)?;

    let mean_g = |label: u8| {
        let vals: Vec<f64> = mags
            .iter()
            .filter(|(y, _)| *y == label)
            .map(|(_, v)| g.value(*v).data()[0])
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    Ok(BatchLoss {
        total,
        loss_s: g.value(ls).data()[0],
        loss_f: loss_f / batch.len() as f64,
        g_abnormal: mean_g(1),
        g_normal: mean_g(0),
        selections,
    })
}

/// Gathers scalar nodes into one `[n]` vector node.
fn stack_scalars(g: &mut Graph, items: &[Var]) -> Result<Var> {
    let cols = items
        .iter()
        .map(|&v| g.reshape(v, &[1, 1]))
        .collect::<Result<Vec<_>>>()?;
    let row = g.concat_cols(&cols)?;
    g.reshape(row, &[items.len()])
}
