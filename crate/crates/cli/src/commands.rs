use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtfm_core::data_io::{generate_synthetic_dataset, load_dataset, read_checkpoint, Dataset, LabeledVideo};
use rtfm_core::eval::{evaluate, sweep, write_score_csv, write_sweep_csv};
use rtfm_core::losses::{total_loss, Objective};
use rtfm_core::model::{Model, ModelParams};
use rtfm_core::tensor::{grad_check, GradCheckConfig, Tensor};
use rtfm_core::theorem_sim::{check_analytic_monotonicity, check_monotonicity, simulate_separability, write_curve_csv};
use rtfm_core::trainer::{fit, save_checkpoint, write_training_log};
use rtfm_core::Error;
use serde::Serialize;

use crate::config::RunConfig;

/// Runtime failure that is not a core error (diverged training, failed check).
#[derive(Debug)]
pub struct RunFailure(pub String);

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for RunFailure {}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!(Error::Config(format!("paths.{key} is required for this command"))),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let (data, [train, test]) = generate_synthetic_dataset(&cfg.data, &cfg.out)?;
    println!("train: {} videos -> {}", data.train.len(), train.display());
    println!("test: {} videos -> {}", data.test.len(), test.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let train_set = load(required(&cfg.paths.train, "train")?)?;
    let val = cfg.paths.val.as_deref().map(load).transpose()?;
    let (mtn, clf) = cfg.model.configs(train_set.snippets, train_set.feature_dim);
    let outcome = fit(&train_set, val.as_ref(), &mtn, &clf, &cfg.train)?;
    for e in &outcome.epochs {
        let auc = e.val_auc.map(|a| format!(" val_auc {a:.4}")).unwrap_or_default();
        println!(
            "epoch {:>3}: loss {:.4} (ℓ_s {:.4}, ℓ_f {:.4}) g_abn {:.3} g_norm {:.3}{auc}",
            e.epoch, e.loss_total, e.loss_s, e.loss_f, e.g_abn, e.g_norm
        );
    }
    let ckpt = cfg.out.join("checkpoint.ckpt");
    save_checkpoint(&ckpt, &outcome.params)?;
    write_training_log(cfg.out.join("train_log.csv"), &outcome.steps)?;
    println!("checkpoint -> {}", ckpt.display());
    if let Some(reason) = outcome.diverged {
        bail!(RunFailure(format!("training diverged ({reason}); last good parameters saved")));
    }
    Ok(())
}

/// Feature width a checkpoint was trained for, read off the first dilated
/// convolution's input channels.
fn checkpoint_feature_dim(arrays: &[(String, Tensor)]) -> Result<usize> {
    arrays
        .iter()
        .find(|(n, _)| n == "pdc.0.weight")
        .and_then(|(_, t)| t.shape().get(1).copied())
        .ok_or_else(|| Error::Validation("checkpoint has no pdc.0.weight array".into()).into())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    #[serde(flatten)]
    report: rtfm_core::eval::EvalReport,
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let ckpt_path = required(&cfg.paths.checkpoint, "checkpoint")?;
    let test_path = required(&cfg.paths.test, "test")?;
    let arrays = read_checkpoint(ckpt_path)?;
    let test = load(test_path)?;
    let ckpt_dim = checkpoint_feature_dim(&arrays)?;
    if ckpt_dim != test.feature_dim {
        bail!(Error::Dimension(format!(
            "checkpoint was trained with D={ckpt_dim} but the dataset has D={}",
            test.feature_dim
        )));
    }
    let (mtn, clf) = cfg.model.configs(test.snippets, test.feature_dim);
    let params = ModelParams::from_entries(&mtn, &clf, arrays)?;
    let model = Model::new(mtn, clf, params)?;
    let k = cfg.eval.k.unwrap_or(cfg.train.loss.k);
    let (report, seqs) = evaluate(&model, &test, k, cfg.eval.expansion)?;
    let scores_dir = cfg.out.join("scores");
    fs::create_dir_all(&scores_dir).with_context(|| format!("creating {}", scores_dir.display()))?;
    for seq in &seqs {
        write_score_csv(scores_dir.join(format!("{}.csv", seq.id)), seq)?;
    }
    println!("AUC {:.4}  AP {:.4}  ({} videos, {} snippets)", report.auc, report.ap, report.videos, report.snippets);
    write_json(
        &cfg.out.join("report.json"),
        &EvalOutput {
            checkpoint: ckpt_path,
            dataset: test_path,
            report,
        },
    )
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let spec = &cfg.simulate;
    let curve = simulate_separability(spec)?;
    write_curve_csv(cfg.out.join("curve.csv"), &curve)?;
    let empirical = check_monotonicity(&curve, spec.mu)?;
    let analytic = check_analytic_monotonicity(&curve, spec.mu)?;
    for p in &curve.points {
        println!("k={:>2}  empirical {:.4} ± {:.4}  analytic {:.4}", p.k, p.empirical_mean, p.empirical_se, p.analytic);
    }
    let verdict = |passed: bool| if passed { "PASS" } else { "FAIL" };
    println!("empirical shape: {} {}", verdict(empirical.passed), empirical.detail);
    println!("analytic shape: {} {}", verdict(analytic.passed), analytic.detail);
    #[derive(Serialize)]
    struct Out<'a> {
        empirical: &'a rtfm_core::theorem_sim::MonotonicityReport,
        analytic: &'a rtfm_core::theorem_sim::MonotonicityReport,
    }
    write_json(
        &cfg.out.join("simulate.json"),
        &Out {
            empirical: &empirical,
            analytic: &analytic,
        },
    )
}

pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let gc = &cfg.gradcheck;
    let (mtn, clf) = cfg.model.configs(gc.snippets, gc.feature_dim);
    mtn.validate()?;
    clf.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let params = ModelParams::init(&mtn, &clf, &mut rng)?;
    let batch: Vec<LabeledVideo> = (0..gc.n_abnormal + gc.n_normal)
        .map(|i| {
            let data = (0..gc.snippets * gc.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Ok(LabeledVideo {
                id: format!("probe_{i}"),
                features: Tensor::matrix(gc.snippets, gc.feature_dim, data)?,
                label: u8::from(i < gc.n_abnormal),
                snippet_labels: None,
            })
        })
        .collect::<rtfm_core::Result<_>>()?;
    let named: Vec<(String, Tensor)> = params.entries().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let objective = Objective {
        mtn: &mtn,
        classifier: &clf,
        loss: &cfg.train.loss,
    };
    let check_cfg = GradCheckConfig {
        step: gc.step,
        tol: gc.tol,
        max_entries_per_param: gc.max_entries_per_param,
        skip_kinks: gc.skip_kinks,
        seed: gc.seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        &named,
        |g, vars| {
            let mut it = vars.iter().copied();
            let pv = params.map(|_, _| Ok(it.next().expect("one var per array")))?;
            let refs: Vec<&LabeledVideo> = batch.iter().collect();
            Ok(total_loss(g, &pv, &refs, &objective, None)?.total)
        },
        &check_cfg,
    );
    for p in &report.params {
        println!("{:<20} checked {:>5} skipped {:>3} max rel err {:.3e}", p.name, p.checked, p.skipped, p.max_rel_err);
    }
    write_json(&cfg.out.join("gradcheck.json"), &report)?;
    if let Some(reason) = &report.failure {
        bail!(RunFailure(format!("gradient check could not run: {reason}")));
    }
    if !report.passed {
        bail!(RunFailure(format!(
            "gradient check failed: max relative error {:.3e} ≥ {:.1e}",
            report.max_rel_err, gc.tol
        )));
    }
    println!("PASS max relative error {:.3e}", report.max_rel_err);
    Ok(())
}

pub fn sweep_cmd(cfg: &RunConfig) -> Result<()> {
    let train_set = load(required(&cfg.paths.train, "train")?)?;
    let test = load(required(&cfg.paths.test, "test")?)?;
    let (mtn, clf) = cfg.model.configs(train_set.snippets, train_set.feature_dim);
    let rows = sweep(&train_set, &test, &mtn, &clf, &cfg.train, cfg.sweep.axis, &cfg.sweep.values)?;
    for r in &rows {
        println!("{:?}={}  AUC {:.4}  AP {:.4}", cfg.sweep.axis, r.value, r.auc, r.ap);
    }
    write_sweep_csv(cfg.out.join("sweep.csv"), cfg.sweep.axis, &rows)?;
    Ok(())
}
