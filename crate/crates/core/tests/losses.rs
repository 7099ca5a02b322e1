use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtfm_core::data_io::LabeledVideo;
use rtfm_core::losses::*;
use rtfm_core::model::*;
use rtfm_core::tensor::{grad_check, GradCheckConfig, Graph, Tensor, Var};
use rtfm_core::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rows_with_norms(norms: &[f64]) -> Tensor {
    let rows: Vec<Vec<f64>> = norms.iter().map(|&n| vec![0.6 * n, 0.8 * n]).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Mean of the `k` largest row norms after a full sort.
fn sort_oracle(x: &Tensor, k: usize) -> f64 {
    let mut norms: Vec<f64> = (0..x.rows()).map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    norms.sort_by(|a, b| b.partial_cmp(a).unwrap());
    norms[..k].iter().sum::<f64>() / k as f64
}

fn sorted_indices(x: &Tensor, k: usize) -> Vec<usize> {
    let norms: Vec<f64> = (0..x.rows()).map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn bce(s: f64, y: f64) -> f64 {
    let s = s.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

fn value(g: &Graph, v: Var) -> f64 {
    g.value(v).item().unwrap()
}

#[test]
fn topk_magnitude_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap()).unwrap();
    let m = topk_mean_magnitude(&mut g, x, 1).unwrap();
    assert_eq!(value(&g, m.value), 5.0);

    let x = g.constant(rows_with_norms(&[1.0, 5.0, 3.0])).unwrap();
    let m = topk_mean_magnitude(&mut g, x, 2).unwrap();
    assert!((value(&g, m.value) - 4.0).abs() < 1e-12);
    assert_eq!(m.indices, vec![1, 2]);

    assert!(matches!(topk_mean_magnitude(&mut g, x, 4), Err(Error::Parameter(_))));
}

#[test]
fn topk_magnitude_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let t = random(&[32, 16], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(t.clone()).unwrap();
        let m = topk_mean_magnitude(&mut g, x, 3).unwrap();
        assert!((value(&g, m.value) - sort_oracle(&t, 3)).abs() < 1e-12);
        assert_eq!(m.indices, sorted_indices(&t, 3));
    }
}

#[test]
fn separability_examples() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let same = g.constant(random(&[8, 4], &mut rng)).unwrap();
    let s = separability(&mut g, same, same, 3).unwrap().result(&g);
    assert_eq!(s.d, 0.0);

    let a = g.constant(rows_with_norms(&[10.0, 10.0, 10.0])).unwrap();
    let n = g.constant(rows_with_norms(&[2.0, 2.0, 2.0])).unwrap();
    let s = separability(&mut g, a, n, 3).unwrap().result(&g);
    assert!((s.d - 8.0).abs() < 1e-12);
    assert_eq!(s.d, s.g_abnormal - s.g_normal);
}

#[test]
fn separability_matches_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (p, m) = (random(&[16, 8], &mut rng), random(&[16, 8], &mut rng));
        let mut g = Graph::new();
        let (pv, mv) = (g.constant(p.clone()).unwrap(), g.constant(m.clone()).unwrap());
        let s = separability(&mut g, pv, mv, 4).unwrap().result(&g);
        assert!((s.d - (sort_oracle(&p, 4) - sort_oracle(&m, 4))).abs() < 1e-12);
        assert_eq!(s.d, s.g_abnormal - s.g_normal);
    }
}

#[test]
fn hinge_examples() {
    let cfg = LossConfig { k: 1, ..LossConfig::default() };
    let mut g = Graph::new();
    let a = g.leaf(rows_with_norms(&[45.0]), true).unwrap();
    let n = g.leaf(rows_with_norms(&[5.0]), true).unwrap();
    let l = magnitude_loss(&mut g, a, n, 1, 1, &cfg).unwrap();
    assert_eq!(value(&g, l), 0.0);
    let l = magnitude_loss(&mut g, a, n, 0, 1, &cfg).unwrap();
    assert_eq!(value(&g, l), 0.0);
    let l = magnitude_loss(&mut g, a, n, 1, 0, &cfg).unwrap();
    assert!((value(&g, l) - 60.0).abs() < 1e-12);
}

#[test]
fn satisfied_margin_has_exactly_zero_gradient() {
    let cfg = LossConfig { k: 2, ..LossConfig::default() };
    let mut g = Graph::new();
    let a = g.leaf(rows_with_norms(&[160.0, 155.0, 1.0]), true).unwrap();
    let n = g.leaf(rows_with_norms(&[5.0, 7.0, 3.0]), true).unwrap();
    let l = magnitude_loss(&mut g, a, n, 1, 0, &cfg).unwrap();
    assert_eq!(value(&g, l), 0.0);
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(a).data().iter().all(|&v| v == 0.0));
    assert!(grads.wrt(n).data().iter().all(|&v| v == 0.0));
}

#[test]
fn classifier_loss_examples() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = g.constant(random(&[8, 4], &mut rng)).unwrap();
    let half = g.constant(Tensor::filled(&[8], 0.5)).unwrap();
    let l = classifier_loss(&mut g, half, x, 0, 3).unwrap();
    assert!((value(&g, l.value) - 3.0 * 2f64.ln()).abs() < 1e-12);
    assert!((value(&g, l.value) - 2.0794).abs() < 1e-4);

    let sure = g.constant(Tensor::filled(&[8], 1.0 - 1e-12)).unwrap();
    let l = classifier_loss(&mut g, sure, x, 1, 3).unwrap();
    assert!(value(&g, l.value) < 1e-6);
}

#[test]
fn classifier_loss_matches_manual_bce_on_selected_snippets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for y in [0u8, 1] {
        let xt = random(&[16, 8], &mut rng);
        let st: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
        let mut g = Graph::new();
        let x = g.constant(xt.clone()).unwrap();
        let s = g.constant(Tensor::vector(st.clone()).unwrap()).unwrap();
        let l = classifier_loss(&mut g, s, x, y, 4).unwrap();
        let sel = sorted_indices(&xt, 4);
        assert_eq!(l.selected, sel);
        let want: f64 = sel.iter().map(|&i| bce(st[i], f64::from(y))).sum();
        assert!((value(&g, l.value) - want).abs() < 1e-12);
    }
}

#[test]
fn regulariser_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::filled(&[32], 0.5)).unwrap();
    let v = smoothness(&mut g, c).unwrap();
    assert_eq!(value(&g, v), 0.0);
    let v = sparsity(&mut g, c).unwrap();
    assert_eq!(value(&g, v), 16.0);
    let two = g.constant(Tensor::vector(vec![0.0, 1.0]).unwrap()).unwrap();
    let v = smoothness(&mut g, two).unwrap();
    assert_eq!(value(&g, v), 1.0);
    let z = g.constant(Tensor::zeros(&[5])).unwrap();
    let v = sparsity(&mut g, z).unwrap();
    assert_eq!(value(&g, v), 0.0);
}

#[test]
fn regularisers_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut g = Graph::new();
    let sv = g.constant(Tensor::vector(s.clone()).unwrap()).unwrap();
    let mut smooth = 0.0;
    for t in 1..32 {
        smooth += (s[t] - s[t - 1]) * (s[t] - s[t - 1]);
    }
    let sm = smoothness(&mut g, sv).unwrap();
    assert!((value(&g, sm) - smooth).abs() < 1e-12);
    let sp = sparsity(&mut g, sv).unwrap();
    assert!((value(&g, sp) - s.iter().sum::<f64>()).abs() < 1e-12);
}

// ---- total loss ----

fn micro_configs(t: usize, d: usize) -> (MtnConfig, ClassifierConfig) {
    (
        MtnConfig {
            snippets: t,
            feature_dim: d,
            attention_norm: AttentionNorm::RowSoftmax,
            ..MtnConfig::default()
        },
        ClassifierConfig {
            layer_widths: vec![12, 6, 1],
            dropout_rate: 0.7,
        },
    )
}

fn videos(n_abn: usize, n_norm: usize, t: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledVideo> {
    (0..n_abn + n_norm)
        .map(|i| {
            let label = u8::from(i < n_abn);
            let mut f = random(&[t, d], rng);
            if label == 1 {
                for v in &mut f.data_mut()[..d] {
                    *v *= 3.0;
                }
            }
            LabeledVideo {
                id: format!("v{i}"),
                features: f,
                label,
                snippet_labels: None,
            }
        })
        .collect()
}

/// Re-implementation that enumerates every pair explicitly and uses only
/// inference-mode model outputs plus plain arithmetic.
fn flat_total(model: &Model, batch: &[LabeledVideo], cfg: &LossConfig) -> f64 {
    let outs: Vec<(Tensor, Vec<f64>)> = batch.iter().map(|v| model.forward(&v.features).unwrap()).collect();
    let g: Vec<f64> = outs.iter().map(|(x, _)| sort_oracle(x, cfg.k)).collect();
    let mut pair_sum = 0.0;
    let mut pairs = 0;
    for i in 0..batch.len() {
        for j in 0..batch.len() {
            if batch[i].label == 1 && batch[j].label == 0 {
                pair_sum += (cfg.margin - (g[i] - g[j])).max(0.0);
                pairs += 1;
            }
        }
    }
    let mut video_sum = 0.0;
    for (v, (x, s)) in batch.iter().zip(&outs) {
        let y = f64::from(v.label);
        let mut term: f64 = sorted_indices(x, cfg.k).iter().map(|&t| bce(s[t], y)).sum();
        if v.label == 1 {
            let smooth: f64 = s.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
            let sparse: f64 = s.iter().map(|v| v.abs()).sum();
            term += cfg.smoothness_weight * smooth + cfg.sparsity_weight * sparse;
        }
        video_sum += term;
    }
    pair_sum / pairs as f64 + video_sum / batch.len() as f64
}

fn graph_total(params: &ModelParams, batch: &[LabeledVideo], mtn: &MtnConfig, clf: &ClassifierConfig, cfg: &LossConfig) -> (BatchLoss, f64) {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false).unwrap();
    let refs: Vec<&LabeledVideo> = batch.iter().collect();
    let obj = Objective { mtn, classifier: clf, loss: cfg };
    let l = total_loss(&mut g, &pv, &refs, &obj, None).unwrap();
    let total = value(&g, l.total);
    (l, total)
}

#[test]
fn single_pair_reduces_to_pair_plus_mean_video_term() {
    let (mtn, clf) = micro_configs(8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ModelParams::init(&mtn, &clf, &mut rng).unwrap();
    let batch = videos(1, 1, 8, 16, &mut rng);
    let cfg = LossConfig::default();
    let (l, total) = graph_total(&params, &batch, &mtn, &clf, &cfg);
    assert!(l.loss_s > 0.0);
    let model = Model::new(mtn, clf, params).unwrap();
    assert!((total - flat_total(&model, &batch, &cfg)).abs() < 1e-10);
    // loss_f excludes the regularisers, which are tiny but non-zero
    let reg_free = l.loss_s + l.loss_f;
    assert!((total - reg_free).abs() < 1e-2 && total != reg_free);
}

#[test]
fn zero_weight_model_gives_log2_terms() {
    let (mtn, clf) = micro_configs(8, 16);
    let params = ModelParams::zeros(&mtn, &clf).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = videos(2, 3, 8, 16, &mut rng);
    let cfg = LossConfig::default();
    let (l, total) = graph_total(&params, &batch, &mtn, &clf, &cfg);
    let k = cfg.k as f64;
    assert!((l.loss_f - k * 2f64.ln()).abs() < 1e-12);
    // sparsity of 0.5 scores is T/2 per abnormal video; smoothness is zero
    let reg = 2.0 * cfg.sparsity_weight * 4.0 / 5.0;
    assert!((total - (l.loss_s + k * 2f64.ln() + reg)).abs() < 1e-12);
    // with X = F, g is the plain top-k magnitude of the inputs
    let g_abn: f64 = batch[..2].iter().map(|v| sort_oracle(&v.features, 3)).sum::<f64>() / 2.0;
    assert!((l.g_abnormal - g_abn).abs() < 1e-12);
}

#[test]
fn four_by_four_matches_explicit_pair_enumeration() {
    let (mtn, clf) = micro_configs(8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = ModelParams::init(&mtn, &clf, &mut rng).unwrap();
    let mut batch = videos(4, 4, 8, 16, &mut rng);
    batch.swap(1, 6);
    let cfg = LossConfig { margin: 3.0, ..LossConfig::default() };
    let (l, total) = graph_total(&params, &batch, &mtn, &clf, &cfg);
    let model = Model::new(mtn, clf, params).unwrap();
    assert!((total - flat_total(&model, &batch, &cfg)).abs() < 1e-10);
    for (v, sel) in batch.iter().zip(&l.selections) {
        let (x, _) = model.forward(&v.features).unwrap();
        assert_eq!(sel, &sorted_indices(&x, 3));
    }
}

#[test]
fn single_class_batch_is_a_contract_error() {
    let (mtn, clf) = micro_configs(8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = ModelParams::zeros(&mtn, &clf).unwrap();
    let batch = videos(2, 0, 8, 16, &mut rng);
    let refs: Vec<&LabeledVideo> = batch.iter().collect();
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false).unwrap();
    let obj = Objective { mtn: &mtn, classifier: &clf, loss: &LossConfig::default() };
    assert!(matches!(total_loss(&mut g, &pv, &refs, &obj, None), Err(Error::Contract(_))));
}

/// Rebuilds graph parameters from the flat list `grad_check` hands over.
fn params_from_vars(template: &ModelParams, vars: &[Var]) -> ModelParams<Var> {
    let mut it = vars.iter().copied();
    template.map(|_, _| Ok(it.next().expect("one var per entry"))).unwrap()
}

#[test]
fn total_loss_passes_gradient_check() {
    let (mtn, clf) = micro_configs(8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ModelParams::init(&mtn, &clf, &mut rng).unwrap();
    let batch = videos(2, 2, 8, 16, &mut rng);
    let named: Vec<(String, Tensor)> = params.entries().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let cfg = LossConfig::default();
    let report = grad_check(
        &named,
        |g, vars| {
            let pv = params_from_vars(&params, vars);
            let refs: Vec<&LabeledVideo> = batch.iter().collect();
            let obj = Objective { mtn: &mtn, classifier: &clf, loss: &cfg };
            Ok(total_loss(g, &pv, &refs, &obj, None)?.total)
        },
        &GradCheckConfig::default(),
    );
    assert!(report.passed, "{:?}", report.failure);
    assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    assert_eq!(report.params.len(), named.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_abnormal_rows_scales_g_and_weakly_lowers_hinge(
        vals in proptest::collection::vec(-5.0f64..5.0, 24),
        neg in proptest::collection::vec(-5.0f64..5.0, 24),
        c in 1.01f64..4.0,
    ) {
        let cfg = LossConfig { k: 2, margin: 20.0, ..LossConfig::default() };
        let xp = Tensor::matrix(6, 4, vals.clone()).unwrap();
        prop_assume!(xp.row_norms().iter().all(|&n| n > 1e-6));
        let scaled = xp.map(|v| v * c);
        let xm = Tensor::matrix(6, 4, neg).unwrap();
        let mut g = Graph::new();
        let (a, b, n) = (g.constant(xp).unwrap(), g.constant(scaled).unwrap(), g.constant(xm).unwrap());
        let ga = topk_mean_magnitude(&mut g, a, 2).unwrap().value;
        let gb = topk_mean_magnitude(&mut g, b, 2).unwrap().value;
        prop_assert!((value(&g, gb) - c * value(&g, ga)).abs() < 1e-9 * (1.0 + value(&g, gb)));
        prop_assert!(value(&g, gb) > value(&g, ga));
        let la = magnitude_loss(&mut g, a, n, 1, 0, &cfg).unwrap();
        let lb = magnitude_loss(&mut g, b, n, 1, 0, &cfg).unwrap();
        prop_assert!(value(&g, lb) <= value(&g, la));
    }

    #[test]
    fn loss_terms_are_non_negative(
        x in proptest::collection::vec(-3.0f64..3.0, 32),
        s in proptest::collection::vec(0.0f64..1.0, 8),
        y in 0u8..2,
        k in 1usize..=8,
    ) {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(8, 4, x.clone()).unwrap()).unwrap();
        let other = g.constant(Tensor::matrix(8, 4, x.iter().rev().cloned().collect()).unwrap()).unwrap();
        let sv = g.constant(Tensor::vector(s).unwrap()).unwrap();
        let cfg = LossConfig { k, ..LossConfig::default() };
        let terms = [
            magnitude_loss(&mut g, xv, other, 1, 0, &cfg).unwrap(),
            classifier_loss(&mut g, sv, xv, y, k).unwrap().value,
            smoothness(&mut g, sv).unwrap(),
            sparsity(&mut g, sv).unwrap(),
        ];
        for t in terms {
            prop_assert!(value(&g, t) >= 0.0);
        }
    }
}
