//! Mini-batch sampling, Adam with decoupled weight decay, and the training
//! loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{write_checkpoint, Dataset, LabeledVideo};
use crate::error::{Error, Result};
use crate::eval::{csv_error, evaluate};
use crate::losses::{total_loss, LossConfig, Objective};
use crate::model::{ClassifierConfig, Model, ModelParams, MtnConfig};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_abnormal: usize,
    pub batch_normal: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            batch_abnormal: 32,
            batch_normal: 32,
            epochs: 50,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_abnormal < 1 || self.batch_normal < 1 {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        self.loss.validate()
    }
}

/// Per-class without-replacement cycling: each class is drawn from a
/// shuffled queue that is refilled when it runs dry, so every video appears
/// once per pass over its class and never twice in one batch.
#[derive(Clone, Debug)]
pub struct MinibatchSampler {
    abnormal: ClassQueue,
    normal: ClassQueue,
    batch_abnormal: usize,
    batch_normal: usize,
}

#[derive(Clone, Debug)]
struct ClassQueue {
    members: Vec<usize>,
    queue: Vec<usize>,
}

impl ClassQueue {
    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.queue.is_empty() {
                let mut fresh = self.members.clone();
                fresh.shuffle(rng);
                // videos already in this batch go to the back of the new pass
                fresh.sort_by_key(|i| out.contains(i));
                fresh.reverse();
                self.queue = fresh;
            }
            out.push(self.queue.pop().expect("refilled queue"));
        }
        out
    }
}

impl MinibatchSampler {
    pub fn new(dataset: &Dataset, batch_abnormal: usize, batch_normal: usize) -> Result<Self> {
        let pick = |label: u8| -> Vec<usize> {
            (0..dataset.videos.len())
                .filter(|&i| dataset.videos[i].label == label)
                .collect()
        };
        let (abn, norm) = (pick(1), pick(0));
        if batch_abnormal < 1 || batch_normal < 1 {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        if abn.len() < batch_abnormal || norm.len() < batch_normal {
            return Err(Error::Config(format!(
                "batch needs {batch_abnormal} abnormal and {batch_normal} normal videos, dataset has {} and {}",
                abn.len(),
                norm.len()
            )));
        }
        Ok(Self {
            abnormal: ClassQueue { members: abn, queue: Vec::new() },
            normal: ClassQueue { members: norm, queue: Vec::new() },
            batch_abnormal,
            batch_normal,
        })
    }

    /// Steps needed for the larger class to be covered once.
    pub fn steps_per_epoch(&self) -> usize {
        let a = self.abnormal.members.len().div_ceil(self.batch_abnormal);
        let n = self.normal.members.len().div_ceil(self.batch_normal);
        a.max(n)
    }

    /// Dataset indices: `batch_abnormal` abnormal videos then `batch_normal`
    /// normal ones.
    pub fn sample(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = self.abnormal.draw(self.batch_abnormal, rng);
        batch.extend(self.normal.draw(self.batch_normal, rng));
        batch
    }
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update preceded by decoupled decay
/// `p ← p·(1 − lr·wd)`. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension(format!(
                "parameter {i}: shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {i} entry {j} is {}; step rejected",
                g.data()[j]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - learning_rate * weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w * decay - learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One row per optimiser step; `val_auc` is filled on each epoch's last step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_s: f64,
    pub loss_f: f64,
    pub g_abn: f64,
    pub g_norm: f64,
    pub val_auc: Option<f64>,
}

/// Means of the step rows of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_s: f64,
    pub loss_f: f64,
    pub g_abn: f64,
    pub g_norm: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last successful step.
    pub params: ModelParams,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

const STREAM_INIT: u64 = 0;
const STREAM_SAMPLER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded initial parameters for [`train`].
pub fn init_params(mtn: &MtnConfig, classifier: &ClassifierConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(mtn, classifier, &mut rng_for(seed, STREAM_INIT))
}

/// [`train`] from [`init_params`] with `cfg.seed`.
pub fn fit(
    train_set: &Dataset,
    val: Option<&Dataset>,
    mtn: &MtnConfig,
    classifier: &ClassifierConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let params = init_params(mtn, classifier, cfg.seed)?;
    train(params, train_set, val, mtn, classifier, cfg)
}

pub fn train(
    mut params: ModelParams,
    train_set: &Dataset,
    val: Option<&Dataset>,
    mtn: &MtnConfig,
    classifier: &ClassifierConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    mtn.validate()?;
    classifier.validate()?;
    if train_set.snippets != mtn.snippets || train_set.feature_dim != mtn.feature_dim {
        return Err(Error::Dimension(format!(
            "dataset is {}×{}, model expects {}×{}",
            train_set.snippets, train_set.feature_dim, mtn.snippets, mtn.feature_dim
        )));
    }
    if cfg.loss.k > mtn.snippets {
        return Err(Error::Config(format!("k = {} exceeds T = {}", cfg.loss.k, mtn.snippets)));
    }
    let mut sampler = MinibatchSampler::new(train_set, cfg.batch_abnormal, cfg.batch_normal)?;
    let mut sample_rng = rng_for(cfg.seed, STREAM_SAMPLER);
    let mut dropout_rng = rng_for(cfg.seed, STREAM_DROPOUT);
    let mut state = OptimState::new(params.entries().into_iter().map(|(_, t)| t));
    let objective = Objective {
        mtn,
        classifier,
        loss: &cfg.loss,
    };
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let per_epoch = sampler.steps_per_epoch();
    let mut global = 0;

    for epoch in 0..cfg.epochs {
        let first = steps.len();
        for _ in 0..per_epoch {
            let idx = sampler.sample(&mut sample_rng);
            let batch: Vec<&LabeledVideo> = idx.iter().map(|&i| &train_set.videos[i]).collect();
            let step = match train_step(&mut params, &mut state, &batch, &objective, cfg, &mut dropout_rng) {
                Ok(s) => s,
                Err(Error::NonFinite(reason)) => {
                    return Ok(TrainOutcome {
                        params,
                        steps,
                        epochs,
                        diverged: Some(format!("epoch {epoch}, step {global}: {reason}")),
                    });
                }
                Err(e) => return Err(e),
            };
            steps.push(StepLog {
                epoch,
                step: global,
                loss_total: step.0,
                loss_s: step.1,
                loss_f: step.2,
                g_abn: step.3,
                g_norm: step.4,
                val_auc: None,
            });
            global += 1;
        }
        let val_auc = match val {
            Some(v) => {
                let model = Model::new(mtn.clone(), classifier.clone(), params.clone())?;
                Some(evaluate(&model, v, cfg.loss.k, 1)?.0.auc)
            }
            None => None,
        };
        if let Some(last) = steps.last_mut() {
            last.val_auc = val_auc;
        }
        let rows = &steps[first..];
        let mean = |f: fn(&StepLog) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        epochs.push(EpochLog {
            epoch,
            loss_total: mean(|s| s.loss_total),
            loss_s: mean(|s| s.loss_s),
            loss_f: mean(|s| s.loss_f),
            g_abn: mean(|s| s.g_abn),
            g_norm: mean(|s| s.g_norm),
            val_auc,
        });
    }
    Ok(TrainOutcome {
        params,
        steps,
        epochs,
        diverged: None,
    })
}

/// Forward, backward and update on one batch; returns
/// `(total, ℓ_s, ℓ_f, g_abn, g_norm)`.
fn train_step(
    params: &mut ModelParams,
    state: &mut OptimState,
    batch: &[&LabeledVideo],
    objective: &Objective<'_>,
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64, f64, f64)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true)?;
    let loss = total_loss(&mut g, &vars, batch, objective, Some(dropout_rng))?;
    let total = g.value(loss.total).item()?;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {total}")));
    }
    let grads = g.backward(loss.total)?;
    let grad_tensors: Vec<Tensor> = vars.entries().into_iter().map(|(_, &v)| grads.wrt(v)).collect();
    let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
    let mut values = params.values_mut();
    adam_step(&mut values, &grad_refs, state, cfg.learning_rate, cfg.weight_decay)?;
    Ok((total, loss.loss_s, loss.loss_f, loss.g_abnormal, loss.g_normal))
}

/// Columns `epoch, step, loss_total, loss_s, loss_f, g_abn, g_norm, val_auc`.
pub fn write_training_log(path: impl AsRef<Path>, steps: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in steps {
        w.serialize(s).map_err(|e| csv_error(path, e))?;
    }
    if steps.is_empty() {
        w.write_record(["epoch", "step", "loss_total", "loss_s", "loss_f", "g_abn", "g_norm", "val_auc"])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let entries = params.entries();
    write_checkpoint(path, entries.iter().map(|(n, t)| (n.as_str(), *t)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_sized() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let g = Tensor::vector(vec![0.3, -4.0]).unwrap();
        let mut s = OptimState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &mut s, 0.1, 0.0).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((p.data()[1] - (-2.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let mut s = OptimState::new([&p]);
        let before = s.clone();
        let g = Tensor::vector(vec![f64::NAN]).unwrap();
        assert!(matches!(adam_step(&mut [&mut p], &[&g], &mut s, 0.1, 0.0), Err(Error::NonFinite(_))));
        assert_eq!(s, before);
        assert_eq!(p.data(), &[1.0]);
    }
}
