//! Run configuration: a TOML file, then `--set key=value` overrides, then
//! the dedicated `--seed` and `--out` flags. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rtfm_core::data_io::SyntheticSpec;
use rtfm_core::eval::SweepAxis;
use rtfm_core::model::{AttentionNorm, ClassifierConfig, MtnConfig};
use rtfm_core::theorem_sim::SimSpec;
use rtfm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub paths: Paths,
    pub data: SyntheticSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub simulate: SimSpec,
    pub gradcheck: GradCheckSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: PathBuf::from("out"),
            paths: Paths::default(),
            data: SyntheticSpec::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            simulate: SimSpec::default(),
            gradcheck: GradCheckSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Architecture settings; `T` and `D` always come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dilation_rates: Vec<usize>,
    pub attention_norm: AttentionNorm,
    pub layer_widths: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let mtn = MtnConfig::default();
        let clf = ClassifierConfig::default();
        Self {
            dilation_rates: mtn.dilation_rates,
            attention_norm: mtn.attention_norm,
            layer_widths: clf.layer_widths,
            dropout_rate: clf.dropout_rate,
        }
    }
}

impl ModelSection {
    pub fn configs(&self, snippets: usize, feature_dim: usize) -> (MtnConfig, ClassifierConfig) {
        (
            MtnConfig {
                snippets,
                feature_dim,
                dilation_rates: self.dilation_rates.clone(),
                attention_norm: self.attention_norm,
            },
            ClassifierConfig {
                layer_widths: self.layer_widths.clone(),
                dropout_rate: self.dropout_rate,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Top-k used for the magnitude summary; `train.loss.k` when absent.
    pub k: Option<usize>,
    pub expansion: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { k: None, expansion: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub snippets: usize,
    pub feature_dim: usize,
    pub n_abnormal: usize,
    pub n_normal: usize,
    pub step: f64,
    pub tol: f64,
    pub max_entries_per_param: Option<usize>,
    pub skip_kinks: bool,
    pub seed: u64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            snippets: 8,
            feature_dim: 16,
            n_abnormal: 2,
            n_normal: 2,
            step: 1e-4,
            tol: 1e-4,
            max_entries_per_param: Some(2048),
            skip_kinks: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: SweepAxis::M,
            values: vec![50.0, 100.0, 400.0],
        }
    }
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(rtfm_core::Error::Config(format!("malformed key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => bail!(rtfm_core::Error::Config(format!("{key}: {part} is not a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Loads, overrides and validates the configuration for one run.
pub fn resolve(path: Option<&Path>, sets: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<Table>(&text)
                .map_err(|e| rtfm_core::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for s in sets {
        let Some((key, raw)) = s.split_once('=') else {
            bail!(rtfm_core::Error::Config(format!("--set expects key=value, got {s:?}")));
        };
        set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    if let Some(seed) = seed {
        table.insert("seed".into(), Value::Integer(i64::try_from(seed).context("seed exceeds i64")?));
    }
    if let Some(out) = out {
        table.insert("out".into(), Value::String(out.display().to_string()));
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| rtfm_core::Error::Config(e.to_string()))?;
    if let Some(seed) = cfg.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        cfg.simulate.seed = seed;
        cfg.gradcheck.seed = seed;
    }
    Ok(cfg)
}

/// Writes the resolved configuration next to the run's outputs.
pub fn write_snapshot(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join(SNAPSHOT_NAME);
    let text = toml::to_string(cfg).context("serialising resolved config")?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
