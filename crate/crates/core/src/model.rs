//! Multi-scale temporal network and snippet classifier.
//!
//! The temporal network maps a `T×D` feature matrix `F` to `X = F̄ + F`, where
//! `F̄` concatenates three dilated-convolution branches and one temporal
//! self-attention branch, each `D/4` wide. The classifier scores every row
//! of `X` independently.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Normalisation applied to the `T×T` attention map before it mixes snippets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    #[default]
    None,
    ScaleByT,
    RowSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtnConfig {
    /// Snippets per video (`T`).
    pub snippets: usize,
    /// Feature dimension (`D`).
    pub feature_dim: usize,
    pub dilation_rates: Vec<usize>,
    pub attention_norm: AttentionNorm,
}

impl Default for MtnConfig {
    fn default() -> Self {
        Self {
            snippets: 32,
            feature_dim: 64,
            dilation_rates: vec![1, 2, 4],
            attention_norm: AttentionNorm::None,
        }
    }
}

impl MtnConfig {
    pub fn branch_width(&self) -> usize {
        self.feature_dim / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.snippets == 0 {
            return Err(Error::Config("snippets must be ≥ 1".into()));
        }
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "feature_dim must be a positive multiple of 4, got {}",
                self.feature_dim
            )));
        }
        if self.dilation_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub layer_widths: Vec<usize>,
    /// Probability of dropping a unit during training.
    pub dropout_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            layer_widths: vec![512, 128, 1],
            dropout_rate: 0.7,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.last() != Some(&1) {
            return Err(Error::Config("classifier must end in a width-1 layer".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config("classifier widths must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Weight and bias of a convolution (`Cout×Cin×W`, `[Cout]`) or a fully
/// connected layer (`in×out`, `[out]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsaParams<T> {
    /// `D → D/4` reduction producing `F^(c)`.
    pub reduce: Layer<T>,
    pub query: Layer<T>,
    pub key: Layer<T>,
    pub value: Layer<T>,
    /// Output projection producing `F^(c4)`.
    pub output: Layer<T>,
}

/// All learnable weights. `T = Tensor` holds values; `T = Var` holds the
/// same layout bound into a [`Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub pdc: Vec<Layer<T>>,
    pub tsa: TsaParams<T>,
    pub fc: Vec<Layer<T>>,
}

impl<T> ModelParams<T> {
    fn layers(&self) -> Vec<(String, &Layer<T>)> {
        let mut out: Vec<(String, &Layer<T>)> = Vec::new();
        out.extend(self.pdc.iter().enumerate().map(|(i, l)| (format!("pdc.{i}"), l)));
        out.extend(self.tsa.named().into_iter().map(|(n, l)| (format!("tsa.{n}"), l)));
        out.extend(self.fc.iter().enumerate().map(|(i, l)| (format!("fc.{i}"), l)));
        out
    }

    /// Parameters with stable names, in checkpoint order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        self.layers()
            .into_iter()
            .flat_map(|(n, l)| [(format!("{n}.weight"), &l.weight), (format!("{n}.bias"), &l.bias)])
            .collect()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<ModelParams<U>> {
        let mut layer = |prefix: String, l: &Layer<T>| -> Result<Layer<U>> {
            Ok(Layer {
                weight: f(&format!("{prefix}.weight"), &l.weight)?,
                bias: f(&format!("{prefix}.bias"), &l.bias)?,
            })
        };
        let pdc = self
            .pdc
            .iter()
            .enumerate()
            .map(|(i, l)| layer(format!("pdc.{i}"), l))
            .collect::<Result<Vec<_>>>()?;
        let tsa = TsaParams {
            reduce: layer("tsa.reduce".into(), &self.tsa.reduce)?,
            query: layer("tsa.query".into(), &self.tsa.query)?,
            key: layer("tsa.key".into(), &self.tsa.key)?,
            value: layer("tsa.value".into(), &self.tsa.value)?,
            output: layer("tsa.output".into(), &self.tsa.output)?,
        };
        let fc = self
            .fc
            .iter()
            .enumerate()
            .map(|(i, l)| layer(format!("fc.{i}"), l))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { pdc, tsa, fc })
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer<T>> {
        let mut out: Vec<&mut Layer<T>> = self.pdc.iter_mut().collect();
        let t = &mut self.tsa;
        out.extend([&mut t.reduce, &mut t.query, &mut t.key, &mut t.value, &mut t.output]);
        out.extend(self.fc.iter_mut());
        out
    }

    /// Mutable access in the same order as [`ModelParams::entries`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

impl<T> TsaParams<T> {
    fn named(&self) -> [(&'static str, &Layer<T>); 5] {
        [
            ("reduce", &self.reduce),
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("output", &self.output),
        ]
    }
}

/// Expected `(name, shape)` layout for a configuration.
pub fn param_layout(mtn: &MtnConfig, clf: &ClassifierConfig) -> Vec<(String, Vec<usize>)> {
    let d = mtn.feature_dim;
    let q = mtn.branch_width();
    let mut out = Vec::new();
    let mut conv = |name: String, cout: usize, cin: usize, w: usize| {
        out.push((format!("{name}.weight"), vec![cout, cin, w]));
        out.push((format!("{name}.bias"), vec![cout]));
    };
    for i in 0..mtn.dilation_rates.len() {
        conv(format!("pdc.{i}"), q, d, 3);
    }
    conv("tsa.reduce".into(), q, d, 1);
    for n in ["query", "key", "value", "output"] {
        conv(format!("tsa.{n}"), q, q, 1);
    }
    let mut fan_in = d;
    for (i, &w) in clf.layer_widths.iter().enumerate() {
        out.push((format!("fc.{i}.weight"), vec![fan_in, w]));
        out.push((format!("fc.{i}.bias"), vec![w]));
        fan_in = w;
    }
    out
}

impl ModelParams<Tensor> {
    /// Builds parameters from a per-name constructor following [`param_layout`].
    fn build(mtn: &MtnConfig, clf: &ClassifierConfig, mut make: impl FnMut(&str, &[usize]) -> Result<Tensor>) -> Result<Self> {
        mtn.validate()?;
        clf.validate()?;
        let layout = param_layout(mtn, clf);
        let mut it = layout.iter();
        let mut next = || -> Result<Layer<Tensor>> {
            let (wn, ws) = it.next().expect("layout covers every layer");
            let (bn, bs) = it.next().expect("layout covers every layer");
            Ok(Layer {
                weight: make(wn, ws)?,
                bias: make(bn, bs)?,
            })
        };
        let pdc = (0..mtn.dilation_rates.len()).map(|_| next()).collect::<Result<Vec<_>>>()?;
        let tsa = TsaParams {
            reduce: next()?,
            query: next()?,
            key: next()?,
            value: next()?,
            output: next()?,
        };
        let fc = (0..clf.layer_widths.len()).map(|_| next()).collect::<Result<Vec<_>>>()?;
        Ok(Self { pdc, tsa, fc })
    }

    pub fn zeros(mtn: &MtnConfig, clf: &ClassifierConfig) -> Result<Self> {
        Self::build(mtn, clf, |_, shape| Ok(Tensor::zeros(shape)))
    }

    /// Weights uniform in `±sqrt(6/(fan_in+fan_out))`, biases zero.
    pub fn init(mtn: &MtnConfig, clf: &ClassifierConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(mtn, clf, |name, shape| {
            if name.ends_with(".bias") {
                return Ok(Tensor::zeros(shape));
            }
            let (fan_in, fan_out) = match shape {
                &[cout, cin, w] => (cin * w, cout * w),
                &[i, o] => (i, o),
                other => unreachable!("unexpected weight shape {other:?}"),
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a);
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        })
    }

    /// Rebuilds parameters from named arrays, checking names and shapes.
    pub fn from_entries(mtn: &MtnConfig, clf: &ClassifierConfig, mut arrays: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = param_layout(mtn, clf);
        if arrays.len() != expected.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                arrays.len()
            )));
        }
        arrays.reverse();
        Self::build(mtn, clf, |name, shape| {
            let (got_name, t) = arrays.pop().expect("length checked");
            if got_name != name || t.shape() != shape {
                return Err(Error::Validation(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            t.ensure_finite(name)?;
            Ok(t)
        })
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<ModelParams<Var>> {
        self.map(|_, t| g.leaf(t.clone(), requires_grad))
    }

    pub fn num_values(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn check_input(g: &Graph, f: Var, cfg: &MtnConfig) -> Result<()> {
    let (t, d) = g.value(f).dims2()?;
    if t != cfg.snippets || d != cfg.feature_dim {
        return Err(Error::Dimension(format!(
            "features are {t}×{d}, model expects {}×{}",
            cfg.snippets, cfg.feature_dim
        )));
    }
    Ok(())
}

fn conv(g: &mut Graph, x: Var, l: &Layer<Var>, dilation: usize) -> Result<Var> {
    let y = g.conv1d_dilated(x, l.weight, dilation)?;
    g.add_bias(y, l.bias)
}

/// The dilated-convolution pyramid: one `T×D/4` output per dilation rate.
pub fn pdc_forward(g: &mut Graph, f: Var, p: &ModelParams<Var>, cfg: &MtnConfig) -> Result<Vec<Var>> {
    check_input(g, f, cfg)?;
    if p.pdc.len() != cfg.dilation_rates.len() {
        return Err(Error::Dimension(format!(
            "{} kernel banks for {} dilation rates",
            p.pdc.len(),
            cfg.dilation_rates.len()
        )));
    }
    p.pdc
        .iter()
        .zip(&cfg.dilation_rates)
        .map(|(l, &d)| conv(g, f, l, d))
        .collect()
}

/// Temporal self-attention branch, `T×D/4`.
pub fn tsa_forward(g: &mut Graph, f: Var, p: &ModelParams<Var>, cfg: &MtnConfig) -> Result<Var> {
    check_input(g, f, cfg)?;
    let tsa = &p.tsa;
    let reduced = conv(g, f, &tsa.reduce, 1)?;
    let q = conv(g, reduced, &tsa.query, 1)?;
    let k = conv(g, reduced, &tsa.key, 1)?;
    let v = conv(g, reduced, &tsa.value, 1)?;
    let kt = g.transpose(k)?;
    let mut attn = g.matmul(q, kt)?;
    attn = match cfg.attention_norm {
        AttentionNorm::None => attn,
        AttentionNorm::ScaleByT => g.scale(attn, 1.0 / cfg.snippets as f64)?,
        AttentionNorm::RowSoftmax => g.softmax_rows(attn)?,
    };
    let mixed = g.matmul(attn, v)?;
    let out = conv(g, mixed, &tsa.output, 1)?;
    g.add(out, reduced)
}

/// `X = concat(PDC₁, PDC₂, PDC₃, TSA) + F`.
pub fn mtn_forward(g: &mut Graph, f: Var, p: &ModelParams<Var>, cfg: &MtnConfig) -> Result<Var> {
    let mut branches = pdc_forward(g, f, p, cfg)?;
    branches.push(tsa_forward(g, f, p, cfg)?);
    let width: usize = branches.iter().map(|&b| g.value(b).shape()[1]).sum();
    if width != cfg.feature_dim {
        return Err(Error::Dimension(format!(
            "branch widths sum to {width}, expected {}",
            cfg.feature_dim
        )));
    }
    let fbar = g.concat_cols(&branches)?;
    g.add(fbar, f)
}

/// Per-row FC→ReLU→dropout stack ending in a sigmoid; returns `[T]` scores.
/// Dropout is active only when `dropout_rng` is given.
pub fn classify_snippets(
    g: &mut Graph,
    x: Var,
    p: &ModelParams<Var>,
    cfg: &ClassifierConfig,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let (rows, d) = g.value(x).dims2()?;
    let expected = g.value(p.fc[0].weight).shape()[0];
    if d != expected {
        return Err(Error::Dimension(format!(
            "classifier expects {expected} features, got {d}"
        )));
    }
    let last = p.fc.len() - 1;
    let mut h = x;
    for (i, layer) in p.fc.iter().enumerate() {
        h = g.matmul(h, layer.weight)?;
        h = g.add_bias(h, layer.bias)?;
        if i == last {
            break;
        }
        h = g.relu(h)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if cfg.dropout_rate > 0.0 {
                let keep = 1.0 - cfg.dropout_rate;
                let n = g.value(h).numel();
                let mask = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                h = g.mask(h, mask)?;
            }
        }
    }
    let s = g.sigmoid(h)?;
    g.reshape(s, &[rows])
}

/// A configured model with concrete weights, for graph-free inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub mtn: MtnConfig,
    pub classifier: ClassifierConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(mtn: MtnConfig, classifier: ClassifierConfig, params: ModelParams) -> Result<Self> {
        mtn.validate()?;
        classifier.validate()?;
        let expected = param_layout(&mtn, &classifier);
        for ((name, t), (en, es)) in params.entries().iter().zip(&expected) {
            if name != en || t.shape() != es.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {name} {:?} does not match configuration ({en} {es:?})",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            mtn,
            classifier,
            params,
        })
    }

    /// Temporal features `X` for one video.
    pub fn features(&self, f: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let fv = g.constant(f.clone())?;
        let x = mtn_forward(&mut g, fv, &p, &self.mtn)?;
        Ok(g.value(x).clone())
    }

    /// Inference-mode `(X, scores)` for one video.
    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let fv = g.constant(f.clone())?;
        let x = mtn_forward(&mut g, fv, &p, &self.mtn)?;
        let s = classify_snippets(&mut g, x, &p, &self.classifier, None)?;
        Ok((g.value(x).clone(), g.value(s).data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (MtnConfig, ClassifierConfig) {
        (
            MtnConfig {
                snippets: 8,
                feature_dim: 16,
                ..MtnConfig::default()
            },
            ClassifierConfig {
                layer_widths: vec![8, 4, 1],
                dropout_rate: 0.5,
            },
        )
    }

    #[test]
    fn layout_and_entries_agree() {
        let (m, c) = small();
        let p = ModelParams::init(&m, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = p.entries().into_iter().map(|(n, _)| n).collect();
        let layout: Vec<String> = param_layout(&m, &c).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, layout);
        assert_eq!(names[0], "pdc.0.weight");
        assert_eq!(names.last().unwrap(), "fc.2.bias");
    }

    #[test]
    fn init_is_bounded_and_biases_zero() {
        let (m, c) = small();
        let p = ModelParams::init(&m, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (name, t) in p.entries() {
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let s = t.shape();
                let (fi, fo) = if s.len() == 3 { (s[1] * s[2], s[0] * s[2]) } else { (s[0], s[1]) };
                let a = (6.0 / (fi + fo) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= a), "{name}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = MtnConfig {
            feature_dim: 18,
            ..MtnConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MtnConfig {
            dilation_rates: vec![1, 0, 4],
            ..MtnConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ClassifierConfig {
            dropout_rate: 1.0,
            ..ClassifierConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ClassifierConfig {
            layer_widths: vec![4, 2],
            ..ClassifierConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn from_entries_rejects_wrong_shapes() {
        let (m, c) = small();
        let p = ModelParams::zeros(&m, &c).unwrap();
        let mut arrays: Vec<(String, Tensor)> = p.entries().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(ModelParams::from_entries(&m, &c, arrays.clone()).unwrap(), p);
        arrays[3].1 = Tensor::zeros(&[2]);
        assert!(matches!(ModelParams::from_entries(&m, &c, arrays), Err(Error::Validation(_))));
    }

    #[test]
    fn four_branches_required() {
        let (mut m, c) = small();
        m.dilation_rates = vec![1, 2];
        let p = ModelParams::zeros(&m, &c).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false).unwrap();
        let f = g.constant(Tensor::zeros(&[8, 16])).unwrap();
        assert!(matches!(mtn_forward(&mut g, f, &pv, &m), Err(Error::Dimension(_))));
    }

    #[test]
    fn dropout_is_seed_reproducible() {
        let (m, c) = small();
        let p = ModelParams::init(&m, &c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = Tensor::filled(&[8, 16], 0.3);
        let run = |seed| {
            let mut g = Graph::new();
            let pv = p.bind(&mut g, false).unwrap();
            let xv = g.constant(x.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = classify_snippets(&mut g, xv, &pv, &c, Some(&mut rng)).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
