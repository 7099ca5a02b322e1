use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to round-off are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many entries per parameter tensor (seeded sample).
    pub max_entries_per_param: Option<usize>,
    /// Leave out entries whose probes land on a different branch of a
    /// piecewise op (see [`Graph::branch_signature`]) than the base point.
    pub skip_kinks: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            skip_kinks: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries left out because a probe crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Flat index, analytic value and numeric value of the worst entry.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub passed: bool,
    /// Set when the function could not be evaluated or produced non-finite values.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(reason: String) -> Self {
        Self {
            params: Vec::new(),
            max_rel_err: f64::INFINITY,
            mean_rel_err: f64::INFINITY,
            passed: false,
            failure: Some(reason),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Evaluation {
    value: f64,
    signature: u64,
    grads: Vec<Tensor>,
}

fn evaluate<F>(build: &F, params: &[(String, Tensor)], with_grad: bool) -> Result<Evaluation>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .map(|(_, t)| g.leaf(t.clone(), with_grad))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let value = g.value(loss).item()?;
    let signature = g.branch_signature();
    let grads = if with_grad {
        let grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    } else {
        Vec::new()
    };
    Ok(Evaluation { value, signature, grads })
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, parameter by parameter.
///
/// `build` records the function on a fresh graph given one leaf per entry of
/// `params`; it must be deterministic. Evaluation failures and non-finite
/// values produce a failed report rather than an error.
pub fn grad_check<F>(params: &[(String, Tensor)], build: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (analytic, base_signature) = match evaluate(&build, params, true) {
        Ok(ev) if ev.value.is_finite() => (ev.grads, ev.signature),
        Ok(ev) => return GradCheckReport::failed(format!("function value {} is not finite", ev.value)),
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    let (mut total, mut count) = (0.0, 0usize);
    let mut worst_overall = 0.0f64;

    for p in 0..params.len() {
        let numel = params[p].1.numel();
        let entries: Vec<usize> = match cfg.max_entries_per_param {
            Some(limit) if limit < numel => {
                let mut picked = sample(&mut rng, numel, limit).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: params[p].0.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
            worst: (0, 0.0, 0.0),
        };
        let mut sum = 0.0;
        for &e in &entries {
            let original = params[p].1.data()[e];
            let mut probe = |x: f64| -> std::result::Result<(f64, u64), String> {
                work[p].1.data_mut()[e] = x;
                match evaluate(&build, &work, false) {
                    Ok(ev) if ev.value.is_finite() => Ok((ev.value, ev.signature)),
                    Ok(ev) => Err(format!("{}[{e}]: perturbed value {} is not finite", params[p].0, ev.value)),
                    Err(err) => Err(format!("{}[{e}]: {err}", params[p].0)),
                }
            };
            let plus = probe(original + cfg.step);
            let minus = probe(original - cfg.step);
            work[p].1.data_mut()[e] = original;
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(m), _) | (_, Err(m)) => return GradCheckReport::failed(m),
            };
            if cfg.skip_kinks && (plus.1 != base_signature || minus.1 != base_signature) {
                check.skipped += 1;
                continue;
            }
            let (plus, minus) = (plus.0, minus.0);
            check.checked += 1;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[p].data()[e];
            let rel = relative_error(a, numeric, cfg.abs_floor);
            if rel >= check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = (e, a, numeric);
            }
            sum += rel;
        }
        if check.checked > 0 {
            check.mean_rel_err = sum / check.checked as f64;
        }
        total += sum;
        count += check.checked;
        worst_overall = worst_overall.max(check.max_rel_err);
        checks.push(check);
    }

    GradCheckReport {
        params: checks,
        max_rel_err: worst_overall,
        mean_rel_err: if count > 0 { total / count as f64 } else { 0.0 },
        passed: count > 0 && worst_overall < cfg.tol,
        failure: None,
    }
}
