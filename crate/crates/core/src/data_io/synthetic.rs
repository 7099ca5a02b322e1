//! Synthetic videos with a planted abnormal event.
//!
//! Each video draws a scene vector `v ~ N(base_mean, base_std²·I)`; snippet
//! `t` is `v + noise_std·z_t`. Abnormal videos add `magnitude·u` to a window
//! of `μ` contiguous snippets, `u` being a unit direction shared by every
//! video of the spec. Values are rounded to `f32` so that they survive the
//! feature file format unchanged.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::manifest::write_dataset;
use super::{Dataset, LabeledVideo};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_normal_videos: usize,
    pub n_abnormal_videos: usize,
    pub n_test_normal_videos: usize,
    pub n_test_abnormal_videos: usize,
    pub snippets: usize,
    pub feature_dim: usize,
    /// Abnormal snippets per abnormal video.
    pub mu: usize,
    pub base_mean: f64,
    pub base_std: f64,
    pub noise_std: f64,
    pub perturbation_magnitude: f64,
    /// Perturbation direction; drawn uniformly on the sphere when absent.
    pub direction: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_normal_videos: 100,
            n_abnormal_videos: 100,
            n_test_normal_videos: 30,
            n_test_abnormal_videos: 30,
            snippets: 32,
            feature_dim: 64,
            mu: 3,
            base_mean: 0.0,
            base_std: 1.0,
            noise_std: 0.5,
            perturbation_magnitude: 12.0,
            direction: None,
            seed: 0,
        }
    }
}

const STREAM_DIRECTION: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snippets == 0 || self.feature_dim == 0 {
            return Err(Error::Parameter("T and D must be ≥ 1".into()));
        }
        if self.mu == 0 || self.mu > self.snippets {
            return Err(Error::Parameter(format!(
                "μ must lie in 1..=T, got μ={} with T={}",
                self.mu, self.snippets
            )));
        }
        if !(self.perturbation_magnitude >= 0.0 && self.perturbation_magnitude.is_finite()) {
            return Err(Error::Parameter(format!(
                "perturbation magnitude must be finite and ≥ 0, got {}",
                self.perturbation_magnitude
            )));
        }
        for (name, v) in [("base_std", self.base_std), ("noise_std", self.noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !self.base_mean.is_finite() {
            return Err(Error::Parameter("base_mean must be finite".into()));
        }
        if let Some(d) = &self.direction {
            if d.len() != self.feature_dim {
                return Err(Error::Parameter(format!(
                    "direction has {} components, D={}",
                    d.len(),
                    self.feature_dim
                )));
            }
            let n = norm(d);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Parameter("direction must be finite and non-zero".into()));
            }
        }
        Ok(())
    }

    /// The unit perturbation direction this spec generates with.
    pub fn resolved_direction(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let raw = match &self.direction {
            Some(d) => d.clone(),
            None => {
                let mut rng = rng_for(self.seed, STREAM_DIRECTION);
                loop {
                    let d: Vec<f64> = (0..self.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                    if norm(&d) > 0.0 {
                        break d;
                    }
                }
            }
        };
        let n = norm(&raw);
        Ok(raw.into_iter().map(|x| x / n).collect())
    }

    /// Per-component standard deviation of a single snippet.
    pub fn snippet_std(&self) -> f64 {
        self.base_std.hypot(self.noise_std)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A generated train/test pair together with the direction that was planted.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub direction: Vec<f64>,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let direction = spec.resolved_direction()?;
    let train = generate_split(
        spec,
        &direction,
        "train",
        spec.n_abnormal_videos,
        spec.n_normal_videos,
        &mut rng_for(spec.seed, STREAM_TRAIN),
    )?;
    let test = generate_split(
        spec,
        &direction,
        "test",
        spec.n_test_abnormal_videos,
        spec.n_test_normal_videos,
        &mut rng_for(spec.seed, STREAM_TEST),
    )?;
    Ok(SyntheticData {
        spec: spec.clone(),
        direction,
        train,
        test,
    })
}

fn generate_split(
    spec: &SyntheticSpec,
    direction: &[f64],
    split: &str,
    n_abnormal: usize,
    n_normal: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let mut videos = Vec::with_capacity(n_abnormal + n_normal);
    for i in 0..n_abnormal {
        videos.push(generate_video(spec, direction, format!("{split}_a_{i:04}"), true, rng)?);
    }
    for i in 0..n_normal {
        videos.push(generate_video(spec, direction, format!("{split}_n_{i:04}"), false, rng)?);
    }
    Dataset::new(spec.snippets, spec.feature_dim, videos)
}

fn generate_video(
    spec: &SyntheticSpec,
    direction: &[f64],
    id: String,
    abnormal: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledVideo> {
    let (t, d) = (spec.snippets, spec.feature_dim);
    let scene: Vec<f64> = (0..d)
        .map(|_| spec.base_mean + spec.base_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut labels = vec![0u8; t];
    if abnormal {
        let start = rng.gen_range(0..=t - spec.mu);
        labels[start..start + spec.mu].fill(1);
    }
    let mut data = Vec::with_capacity(t * d);
    for &flag in &labels {
        for (c, &s) in scene.iter().enumerate() {
            let mut x = s + spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            if flag == 1 {
                x += spec.perturbation_magnitude * direction[c];
            }
            data.push(f64::from(x as f32));
        }
    }
    Ok(LabeledVideo {
        id,
        features: Tensor::matrix(t, d, data)?,
        label: u8::from(abnormal),
        snippet_labels: Some(labels),
    })
}

/// Generates the spec and writes `train`/`test` splits under `dir`, returning
/// the data and the two manifest paths.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<(SyntheticData, [PathBuf; 2])> {
    let data = generate(spec)?;
    let dir = dir.as_ref();
    let train = write_dataset(dir, "train", &data.train)?;
    let test = write_dataset(dir, "test", &data.test)?;
    Ok((data, [train, test]))
}

/// `E‖x‖₂` for `x ~ N(m, σ²·I_dim)` with `‖m‖₂ = mean_norm`, i.e. `σ` times
/// the mean of a non-central chi variable, evaluated as a Poisson mixture of
/// central chi means.
pub fn expected_norm(dim: usize, mean_norm: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mean_norm;
    }
    let k = dim as f64;
    let lambda = 0.5 * (mean_norm / sigma).powi(2);
    let chi_mean = |j: f64| (ln_gamma(0.5 * (k + 1.0) + j) - ln_gamma(0.5 * k + j)).exp() * std::f64::consts::SQRT_2;
    if lambda == 0.0 {
        return sigma * chi_mean(0.0);
    }
    let centre = lambda.floor();
    let span = 12.0 * lambda.sqrt() + 40.0;
    let lo = (centre - span).max(0.0) as u64;
    let hi = (centre + span) as u64;
    let mut total = 0.0;
    for j in lo..=hi {
        let j = j as f64;
        let log_w = -lambda + j * lambda.ln() - ln_gamma(j + 1.0);
        total += log_w.exp() * chi_mean(j);
    }
    sigma * total
}

/// Analytic `E‖x⁺‖ − E‖x⁻‖` between a perturbed and an unperturbed snippet.
pub fn expected_norm_gap(spec: &SyntheticSpec) -> Result<f64> {
    let u = spec.resolved_direction()?;
    let d = spec.feature_dim;
    let sigma = spec.snippet_std();
    let base = vec![spec.base_mean; d];
    let shifted: Vec<f64> = base
        .iter()
        .zip(&u)
        .map(|(b, u)| b + spec.perturbation_magnitude * u)
        .collect();
    Ok(expected_norm(d, norm(&shifted), sigma) - expected_norm(d, norm(&base), sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_chi_mean() {
        // E‖z‖ for z ~ N(0, I₂) is √(π/2); for I₁ it is √(2/π)
        assert!((expected_norm(2, 0.0, 1.0) - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);
        assert!((expected_norm(1, 0.0, 1.0) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((expected_norm(3, 0.0, 2.0) - 2.0 * (8.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_folded_normal() {
        // E|x| for x ~ N(m, 1) is √(2/π)e^{−m²/2} + m(1 − 2Φ(−m))
        let m: f64 = 1.3;
        let phi = 0.5 * statrs::function::erf::erfc(m / std::f64::consts::SQRT_2);
        let want = (2.0 / std::f64::consts::PI).sqrt() * (-m * m / 2.0).exp() + m * (1.0 - 2.0 * phi);
        assert!((expected_norm(1, m, 1.0) - want).abs() < 1e-10);
    }

    #[test]
    fn large_offsets_approach_the_offset() {
        let e = expected_norm(4, 1e3, 1.0);
        assert!((e - 1e3).abs() < 0.01, "{e}");
    }

    #[test]
    fn mu_above_t_is_parameter_error() {
        let spec = SyntheticSpec {
            snippets: 4,
            mu: 5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Parameter(_))));
    }
}
