//! Monte-Carlo study of the expected top-k separability between an abnormal
//! video holding `μ` abnormal snippets and a normal video.
//!
//! Snippet magnitudes are drawn directly as scalars from Gaussians truncated
//! at zero. The empirical column uses true top-k selection; the analytic
//! column uses the mixture probability `p_k = min(μ, k)/(k + ε)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Gaussian magnitude distribution, truncated to `[0, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Magnitude {
    pub mean: f64,
    pub std: f64,
}

impl Magnitude {
    pub fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.mean.is_finite() && self.std.is_finite() && self.std >= 0.0) {
            return Err(Error::Parameter(format!(
                "{what} magnitude needs finite mean and std ≥ 0, got ({}, {})",
                self.mean, self.std
            )));
        }
        if self.std == 0.0 && self.mean < 0.0 {
            return Err(Error::Parameter(format!("{what} magnitude is a point mass below zero")));
        }
        Ok(())
    }

    /// Mean of the truncated distribution.
    pub fn expected(&self) -> f64 {
        if self.std == 0.0 {
            return self.mean;
        }
        let alpha = -self.mean / self.std;
        let n = Normal::new(0.0, 1.0).expect("standard normal");
        self.mean + self.std * n.pdf(alpha) / n.sf(alpha)
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.std == 0.0 {
            return self.mean;
        }
        loop {
            let x = self.mean + self.std * rng.sample::<f64, _>(StandardNormal);
            if x >= 0.0 {
                return x;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub snippets: usize,
    pub mu: usize,
    pub epsilon: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub trials: usize,
    pub abnormal: Magnitude,
    pub normal: Magnitude,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            snippets: 32,
            mu: 3,
            epsilon: 0.4,
            k_min: 1,
            k_max: 16,
            trials: 10_000,
            abnormal: Magnitude::new(8.0, 1.0),
            normal: Magnitude::new(3.0, 1.0),
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mu < 1 || self.mu > self.snippets {
            return Err(Error::Parameter(format!(
                "μ must lie in 1..=T, got μ={} with T={}",
                self.mu, self.snippets
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!("ε must be > 0, got {}", self.epsilon)));
        }
        if self.k_min < 1 || self.k_min > self.k_max || self.k_max > self.snippets {
            return Err(Error::Parameter(format!(
                "k range {}..={} must lie within 1..={}",
                self.k_min, self.k_max, self.snippets
            )));
        }
        if self.trials < 2 {
            return Err(Error::Parameter("at least two trials are needed for a standard error".into()));
        }
        self.abnormal.validate("abnormal")?;
        self.normal.validate("normal")?;
        if self.abnormal.expected() < self.normal.expected() {
            return Err(Error::Validation(format!(
                "hypothesis violated: E‖x⁺‖ = {} is below E‖x⁻‖ = {}",
                self.abnormal.expected(),
                self.normal.expected()
            )));
        }
        Ok(())
    }

    pub fn ks(&self) -> std::ops::RangeInclusive<usize> {
        self.k_min..=self.k_max
    }
}

/// `min(μ, k)/(k + ε)`.
pub fn abnormal_topk_probability(mu: usize, k: usize, epsilon: f64) -> f64 {
    mu.min(k) as f64 / (k as f64 + epsilon)
}

/// `p_k·(E‖x⁺‖ − E‖x⁻‖)`.
pub fn analytic_expected_separability(spec: &SimSpec, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Parameter("k must be ≥ 1".into()));
    }
    let p = abnormal_topk_probability(spec.mu, k, spec.epsilon);
    Ok(p * (spec.abnormal.expected() - spec.normal.expected()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k: usize,
    pub empirical_mean: f64,
    pub empirical_se: f64,
    pub analytic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparabilityCurve {
    pub points: Vec<CurvePoint>,
}

/// Running mean and variance.
#[derive(Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn standard_error(&self) -> f64 {
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

fn descending_prefix(values: &mut [f64], prefix: &mut [f64]) {
    values.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (p, v) in prefix.iter_mut().zip(values.iter()) {
        acc += v;
        *p = acc;
    }
}

/// Draws `trials` abnormal/normal video pairs and records
/// `d_k = g_k(X⁺) − g_k(X⁻)` for every `k` in the spec's range.
pub fn simulate_separability(spec: &SimSpec) -> Result<SeparabilityCurve> {
    spec.validate()?;
    let t = spec.snippets;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ks: Vec<usize> = spec.ks().collect();
    let mut stats = vec![Welford::default(); ks.len()];
    let (mut pos, mut neg) = (vec![0.0; t], vec![0.0; t]);
    let (mut pos_sum, mut neg_sum) = (vec![0.0; t], vec![0.0; t]);
    for _ in 0..spec.trials {
        for (i, x) in pos.iter_mut().enumerate() {
            *x = if i < spec.mu { spec.abnormal.sample(&mut rng) } else { spec.normal.sample(&mut rng) };
        }
        for x in neg.iter_mut() {
            *x = spec.normal.sample(&mut rng);
        }
        descending_prefix(&mut pos, &mut pos_sum);
        descending_prefix(&mut neg, &mut neg_sum);
        for (s, &k) in stats.iter_mut().zip(&ks) {
            s.push((pos_sum[k - 1] - neg_sum[k - 1]) / k as f64);
        }
    }
    let points = ks
        .iter()
        .zip(&stats)
        .map(|(&k, s)| {
            Ok(CurvePoint {
                k,
                empirical_mean: s.mean,
                empirical_se: s.standard_error(),
                analytic: analytic_expected_separability(spec, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparabilityCurve { points })
}

/// Slack multiplier applied to standard errors in every comparison.
pub const SE_SLACK: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotonicityReport {
    /// Nondecreasing on `k ∈ [1, μ]`.
    pub nondecreasing: bool,
    /// `d_μ` above `max_{k ≥ μ+3} d_k`; `None` when the curve is flat.
    pub decreasing: Option<bool>,
    pub passed: bool,
    pub detail: String,
}

fn point_at(points: &[(usize, f64, f64)], k: usize) -> Result<(f64, f64)> {
    points
        .iter()
        .find(|p| p.0 == k)
        .map(|p| (p.1, p.2))
        .ok_or_else(|| Error::Parameter(format!("curve does not cover k = {k}")))
}

/// Checks a `(k, mean, se)` series against both clauses with `SE_SLACK`
/// standard errors of tolerance.
pub fn check_series(points: &[(usize, f64, f64)], mu: usize) -> Result<MonotonicityReport> {
    for k in 1..=mu + 3 {
        point_at(points, k)?;
    }
    let slack = |a: f64, b: f64| SE_SLACK * a.hypot(b);
    let mut detail = Vec::new();
    let mut nondecreasing = true;
    for k in 1..mu {
        let (m0, s0) = point_at(points, k)?;
        let (m1, s1) = point_at(points, k + 1)?;
        if m1 < m0 - slack(s0, s1) {
            nondecreasing = false;
            detail.push(format!("d_{} = {m1} drops below d_{k} = {m0}", k + 1));
        }
    }
    let (peak, peak_se) = point_at(points, mu)?;
    let flat = points.iter().all(|&(_, m, s)| (m - peak).abs() <= slack(s, peak_se));
    let decreasing = if flat {
        detail.push("curve is flat; decrease check not applicable".into());
        None
    } else {
        let (k_max, m_max, s_max) = points
            .iter()
            .filter(|p| p.0 >= mu + 3)
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("coverage checked");
        let ok = peak > m_max - slack(peak_se, s_max);
        if !ok {
            detail.push(format!("d_{mu} = {peak} does not exceed d_{k_max} = {m_max}"));
        }
        Some(ok)
    };
    Ok(MonotonicityReport {
        nondecreasing,
        decreasing,
        passed: nondecreasing && decreasing != Some(false),
        detail: detail.join("; "),
    })
}

/// [`check_series`] on the empirical column.
pub fn check_monotonicity(curve: &SeparabilityCurve, mu: usize) -> Result<MonotonicityReport> {
    let pts: Vec<_> = curve.points.iter().map(|p| (p.k, p.empirical_mean, p.empirical_se)).collect();
    check_series(&pts, mu)
}

/// [`check_series`] on the analytic column, with zero standard error.
pub fn check_analytic_monotonicity(curve: &SeparabilityCurve, mu: usize) -> Result<MonotonicityReport> {
    let pts: Vec<_> = curve.points.iter().map(|p| (p.k, p.analytic, 0.0)).collect();
    check_series(&pts, mu)
}

/// Columns `k, empirical_mean, empirical_se, analytic`.
pub fn write_curve_csv(path: impl AsRef<Path>, curve: &SeparabilityCurve) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("k,empirical_mean,empirical_se,analytic\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{},{}\n", p.k, p.empirical_mean, p.empirical_se, p.analytic));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
