//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 8 need the AIDS, BZR and COX2 TU datasets under
//! `GLADCF_DATA_DIR` (either `<dir>/<NAME>/` or `<dir>/<NAME>/raw/`).
//! A criterion that is evaluated and missed makes the process exit
//! non-zero. A criterion that cannot be evaluated because the datasets are
//! absent is still reported as FAIL, but only affects the exit status when
//! `GLADCF_ACCEPTANCE_STRICT=1`.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use gladcf::config::ExperimentConfig;
use gladcf::counterfactual::{
    self, counterfactual_gradients, counterfactual_loss, feature_mask, mask_features, perturb_structure,
    PerturbationPair, ReadoutProbe,
};
use gladcf::detector::{self, Ablation, Architecture, DetectorParams, LossSwitches, LossWeights};
use gladcf::experiment::{self, EvalReport};
use gladcf::{metrics, FeatureMode, Graph, GraphDataset, Label, Provenance};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
enum Fail {
    /// Evaluated and not met.
    Unmet(String),
    /// Required external input is missing.
    Unavailable(String),
}

impl From<String> for Fail {
    fn from(s: String) -> Self {
        Fail::Unmet(s)
    }
}

impl From<&str> for Fail {
    fn from(s: &str) -> Self {
        Fail::Unmet(s.to_string())
    }
}

type Outcome = Result<String, Fail>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Independent reference arithmetic on nested vectors.

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &Array2<f64>) -> Mat {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, |r| r.len()));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for t in 0..k {
            for j in 0..m {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn frobenius(a: &Mat) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Probe distribution: softmax(mean_rows(D^-1/2 (A+I) D^-1/2 X W + b)).
fn probe_distribution(x: &Mat, adj: &Mat, w: &Mat, b: &[f64]) -> [f64; 2] {
    let n = adj.len();
    let mut m = adj.clone();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let d: Vec<f64> = m.iter().map(|r| r.iter().sum()).collect();
    let a_hat: Mat = (0..n)
        .map(|i| (0..n).map(|j| m[i][j] / (d[i] * d[j]).sqrt()).collect())
        .collect();
    let h = matmul(&a_hat, &matmul(x, w));
    let mut pooled = [0.0; 2];
    for row in &h {
        for k in 0..2 {
            pooled[k] += (row[k] + b[k]) / n as f64;
        }
    }
    let mx = pooled[0].max(pooled[1]);
    let e = [(pooled[0] - mx).exp(), (pooled[1] - mx).exp()];
    [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
}

fn kl(p: [f64; 2], q: [f64; 2]) -> f64 {
    let eps = counterfactual::PROB_EPS;
    (0..2)
        .map(|k| {
            let pk = p[k].max(eps);
            pk * (pk.ln() - q[k].clamp(eps, 1.0).ln())
        })
        .sum()
}

struct Reference {
    structure: Mat,
    mask: Mat,
    masked: Mat,
    total: f64,
    g1: f64,
    g2: f64,
}

#[allow(clippy::too_many_arguments)]
fn reference_counterfactual(
    m_a: &Mat,
    m_b: &Mat,
    sigma: f64,
    tau: f64,
    a: &Mat,
    x: &Mat,
    probe: &ReadoutProbe,
    hard: bool,
) -> Reference {
    let n = a.len();
    let h = x.first().map_or(0, |r| r.len());
    let block_a: Mat = m_a[..n].iter().map(|r| r[..n].to_vec()).collect();
    let soft = matmul(&block_a, a);
    let mut structure: Mat = soft.iter().map(|r| r.iter().map(|&v| logistic(v)).collect()).collect();
    let mut mask: Mat = m_b[..n].iter().map(|r| r.iter().map(|&v| logistic(v)).collect()).collect();
    if hard {
        let bin: Mat = structure
            .iter()
            .map(|r| r.iter().map(|&v| if v >= sigma { 1.0 } else { 0.0 }).collect())
            .collect();
        for i in 0..n {
            for j in 0..n {
                structure[i][j] = if i == j { 0.0 } else { bin[i][j].max(bin[j][i]) };
            }
        }
        for row in mask.iter_mut() {
            for v in row.iter_mut() {
                *v = if *v >= tau { 1.0 } else { 0.0 };
            }
        }
    }
    let masked: Mat = (0..n).map(|i| (0..h).map(|j| mask[i][j] * x[i][j]).collect()).collect();
    let diff: Mat = (0..n).map(|i| (0..n).map(|j| a[i][j] - structure[i][j]).collect()).collect();
    let g1 = frobenius(&diff) - frobenius(&mask);
    let w = to_mat(&probe.layer.weight);
    let b: Vec<f64> = probe.layer.bias.iter().copied().collect();
    let p = probe_distribution(x, a, &w, &b);
    let p_a = probe_distribution(x, &structure, &w, &b);
    let p_b = probe_distribution(&masked, a, &w, &b);
    let g2 = kl(p, p_a) + kl(p, p_b);
    Reference {
        structure,
        mask,
        masked,
        total: g1 - g2,
        g1,
        g2,
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Mat) -> f64 {
    a.outer_iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Random inputs.

fn random_adjacency(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.5) {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
    }
    a
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

fn random_graph(rng: &mut ChaCha8Rng, id: usize, n: usize, h: usize, label: Label) -> Graph {
    let mut g = Graph::from_adjacency(id, random_adjacency(rng, n), label, Provenance::original(label));
    g.node_features = Array2::from_shape_fn((n, h), |_| {
        if rng.gen_bool(0.25) {
            0.0
        } else {
            rng.gen_range(-1.0..1.0)
        }
    });
    g
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

// ---------------------------------------------------------------------------
// 1. Loss identity.

fn nll(p: f64) -> f64 {
    -p.clamp(1e-12, 1.0 - 1e-12).ln()
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn random_score(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..10) {
        0 => rng.gen_range(0.0..1e-13),
        1 => 1.0 - rng.gen_range(0.0..1e-13),
        _ => rng.gen_range(0.0..1.0),
    }
}

fn loss_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let size = rng.gen_range(2..40);
        let beta = rng.gen_range(0.0..3.0);
        let mut labels = vec![Label::Normal, Label::Abnormal];
        let mut prov = vec![Provenance::OriginalNormal, Provenance::OriginalAbnormal];
        for _ in 2..size {
            if rng.gen_bool(0.5) {
                labels.push(Label::Normal);
                prov.push(Provenance::OriginalNormal);
            } else {
                labels.push(Label::Abnormal);
                prov.push(if rng.gen_bool(0.6) { Provenance::Generated } else { Provenance::OriginalAbnormal });
            }
        }
        let scores: Vec<f64> = (0..size).map(|_| random_score(&mut rng)).collect();
        let got = detector::composite_loss(&scores, &labels, &prov, beta, LossSwitches::default())
            .map_err(|e| e.to_string())?;

        let pick = |f: &dyn Fn(usize) -> bool, normal: bool| -> Vec<f64> {
            (0..size)
                .filter(|&i| f(i))
                .map(|i| nll(if normal { 1.0 - scores[i] } else { scores[i] }))
                .collect()
        };
        let l_nor = mean_of(&pick(&|i| labels[i] == Label::Normal, true));
        let l_ori = mean_of(&pick(&|i| prov[i] == Provenance::OriginalAbnormal, false));
        let l_gen = mean_of(&pick(&|i| prov[i] == Provenance::Generated, false));
        let n_abn = labels.iter().filter(|&&l| l == Label::Abnormal).count();
        let n_gen = prov.iter().filter(|&&p| p == Provenance::Generated).count();
        let alpha = n_gen as f64 / n_abn as f64;
        let expected = l_nor + (1.0 - alpha) * l_ori + beta * alpha * l_gen;
        let err = (got.total - expected).abs().max((got.l_nor() + got.l_abn() - got.total).abs());
        worst = worst.max(err);
        ensure(err < 1e-9, || format!("case {case}: loss {} vs reference {expected}", got.total))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 batches, max error {worst:.2e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 2. AUC against pairwise brute force.

fn auc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut with_ties = 0;
    for case in 0..200 {
        let n = rng.gen_range(2..=20);
        let mut labels: Vec<Label> = (0..n).map(|_| if rng.gen_bool(0.4) { Label::Abnormal } else { Label::Normal }).collect();
        labels[0] = Label::Normal;
        labels[1] = Label::Abnormal;
        // Coarse grids force ties in about half the cases.
        let levels = if case % 2 == 0 { 4 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..levels)) / f64::from(levels)).collect();
        let mut twice_wins = 0u64;
        let mut pairs = 0u64;
        let mut tie_seen = false;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == Label::Abnormal && labels[j] == Label::Normal {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        twice_wins += 2;
                    } else if scores[i] == scores[j] {
                        twice_wins += 1;
                        tie_seen = true;
                    }
                }
            }
        }
        with_ties += usize::from(tie_seen);
        let brute = twice_wins as f64 / (2 * pairs) as f64;
        let got = metrics::compute_auc(&scores, &labels).map_err(|e| e.to_string())?;
        ensure(got == brute, || format!("case {case}: {got} vs brute force {brute}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("200 instances ({with_ties} with tied pairs), exact, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 3. Gradient fidelity.

fn toy_graphs(h: usize) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut graphs = Vec::new();
    for (i, (n, label)) in [(4, Label::Normal), (5, Label::Normal), (3, Label::Abnormal), (5, Label::Abnormal)]
        .into_iter()
        .enumerate()
    {
        let mut g = random_graph(&mut rng, i, n, h, label);
        if i == 3 {
            g.provenance = Provenance::Generated;
        }
        graphs.push(g);
    }
    graphs
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let h = 3;
    let step = 1e-5;
    let graphs = toy_graphs(h);
    let labels: Vec<Label> = graphs.iter().map(|g| g.label).collect();
    let prov: Vec<Provenance> = graphs.iter().map(|g| g.provenance).collect();
    let weights = LossWeights::new(&labels, &prov, 1.2, LossSwitches::default()).map_err(|e| e.to_string())?;
    let arch = Architecture {
        feature_dim: h,
        hidden_dim: 6,
        branch_dim: 5,
        reduce_dim: 4,
    };
    let params = DetectorParams::init(arch, Ablation::default(), 33).map_err(|e| e.to_string())?;
    let (_, grads) = detector::loss_and_gradients(&params, &graphs, &weights).map_err(|e| e.to_string())?;
    let loss = |p: &DetectorParams| {
        let scores: Vec<f64> = detector::graph_logits(p, &graphs)
            .unwrap()
            .into_iter()
            .map(gladcf::tape::sigmoid)
            .collect();
        weights.components(&scores).unwrap().total
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (t, name) in params.tensor_names().iter().enumerate() {
        for k in 0..grads[t].len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.tensors_mut()[t].as_slice_mut().unwrap()[k] += step;
            minus.tensors_mut()[t].as_slice_mut().unwrap()[k] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let analytic = grads[t].as_slice().unwrap()[k];
            let e = rel_err(analytic, numeric);
            worst = worst.max(e);
            checked += 1;
            ensure(e < 1e-4, || format!("{name}[{k}]: analytic {analytic} vs numeric {numeric}"))?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n_max = 5;
    let pair = PerturbationPair::from_parts(
        random_matrix(&mut rng, n_max, n_max, 1.0),
        random_matrix(&mut rng, n_max, h, 1.0),
        0.5,
        0.5,
    )
    .map_err(|e| e.to_string())?;
    let probe = ReadoutProbe::new(h, 5);
    let (_, ga, gb) = counterfactual_gradients(&pair, &graphs, &probe).map_err(|e| e.to_string())?;
    let mean_loss = |p: &PerturbationPair| {
        graphs
            .iter()
            .map(|g| counterfactual_loss(p, g, &probe, false).unwrap().total)
            .sum::<f64>()
            / graphs.len() as f64
    };
    for (which, grad) in [("m_a", &ga), ("m_b", &gb)] {
        for k in 0..grad.len() {
            let mut plus = pair.clone();
            let mut minus = pair.clone();
            let (tp, tm) = if which == "m_a" {
                (&mut plus.m_a, &mut minus.m_a)
            } else {
                (&mut plus.m_b, &mut minus.m_b)
            };
            tp.as_slice_mut().unwrap()[k] += step;
            tm.as_slice_mut().unwrap()[k] -= step;
            let numeric = (mean_loss(&plus) - mean_loss(&minus)) / (2.0 * step);
            let analytic = grad.as_slice().unwrap()[k];
            let e = rel_err(analytic, numeric);
            worst = worst.max(e);
            checked += 1;
            ensure(e < 1e-4, || format!("{which}[{k}]: analytic {analytic} vs numeric {numeric}"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{checked} coordinates, max relative error {worst:.2e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// 4. Balance and integrity after augmentation.

fn check_augmented_folds(dataset: &GraphDataset, config: &ExperimentConfig) -> Result<usize, String> {
    let folds = experiment::folds_for(dataset, config).map_err(|e| e.to_string())?;
    let mut generated_total = 0;
    for (i, fold) in folds.iter().enumerate() {
        let out = experiment::run_fold(dataset, i, fold, config).map_err(|e| e.to_string())?;
        let tr = out.report.train_counts;
        ensure(tr.normal() == tr.abnormal(), || format!("{} fold {i}: train counts {tr:?}", dataset.name))?;
        let ori_train = fold.train.iter().filter(|&&k| dataset.graphs[k].label == Label::Normal).count();
        let gap = ori_train.abs_diff(fold.train.len() - ori_train);
        ensure(out.generated.len() == gap, || {
            format!("{} fold {i}: {} generated for gap {gap}", dataset.name, out.generated.len())
        })?;
        for (g, &seed) in out.generated.iter().zip(&out.seed_indices) {
            let a = &g.adjacency;
            let n = a.nrows();
            for r in 0..n {
                ensure(a[[r, r]] == 0.0, || format!("{} fold {i}: self loop", dataset.name))?;
                for c in 0..n {
                    ensure(a[[r, c]] == 0.0 || a[[r, c]] == 1.0, || format!("non-binary entry {}", a[[r, c]]))?;
                    ensure(a[[r, c]] == a[[c, r]], || "asymmetric adjacency".to_string())?;
                }
            }
            let orig = &dataset.graphs[seed].node_features;
            ensure(g.node_features.dim() == orig.dim(), || "feature shape changed".to_string())?;
            for (v, o) in g.node_features.iter().zip(orig) {
                ensure(*v == 0.0 || v == o, || format!("feature {v} is neither 0 nor {o}"))?;
            }
            ensure(g.provenance == Provenance::Generated, || "generated graph not tagged".to_string())?;
            ensure(fold.train.contains(&seed), || format!("seed {seed} outside the training split"))?;
        }
        let test_generated = out.scores.iter().filter(|s| s.provenance == Provenance::Generated).count();
        ensure(test_generated == 0, || format!("{test_generated} generated graphs scored in test fold {i}"))?;
        ensure(out.scores.len() == fold.test.len(), || "test fold size changed".to_string())?;
        generated_total += out.generated.len();
    }
    Ok(generated_total)
}

fn quick_config(name: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_dataset(name);
    c.epochs = 1;
    c.cf_epochs = 10;
    c.hidden_dim = 16;
    c.branch_dim = 8;
    c.reduce_dim = 4;
    c
}

fn balance_integrity(env: &RealData) -> Outcome {
    let mut notes = Vec::new();
    for (normal, abnormal, mode) in [(40, 10, FeatureMode::Identity), (8, 37, FeatureMode::Ldp), (30, 29, FeatureMode::DegreeBinning)] {
        let ds = common::synthetic_dataset(normal, abnormal, 11, mode);
        let n = check_augmented_folds(&ds, &quick_config("SYN"))?;
        notes.push(format!("SYN {normal}/{abnormal} {}: {n} generated", mode.as_str()));
    }
    for name in REAL_DATASETS {
        match env.load(name) {
            Ok(ds) => {
                let mut cfg = quick_config(name);
                cfg.cf_epochs = 100;
                let n = check_augmented_folds(&ds, &cfg)?;
                notes.push(format!("{name}: {n} generated"));
            }
            Err(Fail::Unavailable(e)) => notes.push(format!("{name} not available ({e})")),
            Err(e) => return Err(e),
        }
    }
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------
// 5. Counterfactual formulas against the reference.

fn counterfactual_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = rng.gen_range(1..=6);
        let n_max = n + rng.gen_range(0..3);
        let h = rng.gen_range(1..=4);
        let sigma = rng.gen_range(0.2..0.8);
        let tau = rng.gen_range(0.2..0.8);
        let pair = PerturbationPair::from_parts(
            random_matrix(&mut rng, n_max, n_max, 2.0),
            random_matrix(&mut rng, n_max, h, 2.0),
            sigma,
            tau,
        )
        .map_err(|e| e.to_string())?;
        let g = random_graph(&mut rng, case, n, h, Label::Normal);
        let probe = ReadoutProbe::new(h, 100 + case as u64);
        let (m_a, m_b) = (to_mat(&pair.m_a), to_mat(&pair.m_b));
        let (a, x) = (to_mat(&g.adjacency), to_mat(&g.node_features));
        for hard in [false, true] {
            let r = reference_counterfactual(&m_a, &m_b, sigma, tau, &a, &x, &probe, hard);
            let s = perturb_structure(&pair, &g.adjacency, hard).map_err(|e| e.to_string())?;
            let m = feature_mask(&pair, n, hard);
            let xm = mask_features(&pair, &g.node_features, hard).map_err(|e| e.to_string())?;
            let l = counterfactual_loss(&pair, &g, &probe, hard).map_err(|e| e.to_string())?;
            let errs = [
                max_abs_diff(&s, &r.structure),
                max_abs_diff(&m, &r.mask),
                max_abs_diff(&xm, &r.masked),
                (l.total - r.total).abs(),
                (l.g1 - r.g1).abs(),
                (l.g2 - r.g2).abs(),
            ];
            let e = errs.iter().copied().fold(0.0, f64::max);
            worst = worst.max(e);
            ensure(e < 1e-9, || format!("case {case} (hard={hard}): errors {errs:?}"))?;
        }
    }
    Ok(format!("50 cases, smooth and hard, max error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 6. Permutation invariance.

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 6;
    let mut worst: f64 = 0.0;
    let ablations = [
        Ablation::default(),
        Ablation { no_awlm: true, ..Default::default() },
        Ablation { no_gcn_d: true, ..Default::default() },
        Ablation { no_gcn_x: true, ..Default::default() },
    ];
    for (v, ablation) in ablations.into_iter().enumerate() {
        let params = DetectorParams::init(Architecture::new(h), ablation, 60 + v as u64).map_err(|e| e.to_string())?;
        let graphs: Vec<Graph> = (0..20)
            .map(|i| {
                let n = rng.gen_range(1..=12);
                random_graph(&mut rng, i, n, h, Label::Normal)
            })
            .collect();
        let base = detector::score_graphs(&params, &graphs).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let permuted: Vec<Graph> = graphs
                .iter()
                .map(|g| {
                    let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
                    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                    g.permuted(&perm)
                })
                .collect();
            let scores = detector::score_graphs(&params, &permuted).map_err(|e| e.to_string())?;
            for (i, (a, b)) in base.iter().zip(&scores).enumerate() {
                worst = worst.max((a - b).abs());
                ensure((a - b).abs() < 1e-8, || format!("variant {v} graph {i}: {a} vs {b}"))?;
            }
        }
    }
    Ok(format!("4 variants x 20 graphs x 3 relabelings, max change {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 7, 8. Real datasets.

const REAL_DATASETS: [&str; 3] = ["AIDS", "BZR", "COX2"];

struct RealData {
    dir: Option<PathBuf>,
    reports: HashMap<(String, String, u64), EvalReport>,
}

impl RealData {
    fn from_env() -> Self {
        RealData {
            dir: std::env::var_os("GLADCF_DATA_DIR").map(PathBuf::from),
            reports: HashMap::new(),
        }
    }

    fn config(&self, name: &str) -> Result<ExperimentConfig, Fail> {
        let dir = self
            .dir
            .as_ref()
            .ok_or_else(|| Fail::Unavailable("GLADCF_DATA_DIR is not set".into()))?;
        let mut c = ExperimentConfig::for_dataset(name);
        c.data_dir = dir.clone();
        Ok(c)
    }

    fn load(&self, name: &str) -> Result<GraphDataset, Fail> {
        experiment::load_experiment_dataset(&self.config(name)?).map_err(|e| match e {
            gladcf::Error::DatasetNotFound(_) => Fail::Unavailable(e.to_string()),
            _ => Fail::Unmet(e.to_string()),
        })
    }

    /// Full cross-validation with default hyperparameters; cached.
    fn run(&mut self, name: &str, variant: &str, seed: u64) -> Result<(EvalReport, Duration), Fail> {
        let key = (name.to_string(), variant.to_string(), seed);
        if let Some(r) = self.reports.get(&key) {
            return Ok((r.clone(), Duration::from_secs_f64(r.timings.total_seconds)));
        }
        let mut cfg = self.config(name)?;
        cfg.seed = seed;
        cfg.set("variant", variant).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let ds = self.load(name)?;
        let (report, _) = experiment::run_cv_on(&ds, &cfg, 1).map_err(|e| e.to_string())?;
        let took = start.elapsed();
        self.reports.insert(key, report.clone());
        Ok((report, took))
    }
}

fn reproduction(env: &mut RealData) -> Outcome {
    let thresholds = [("AIDS", 0.97), ("BZR", 0.80), ("COX2", 0.70)];
    let limit = Duration::from_secs(15 * 60);
    let mut lines = Vec::new();
    let mut misses = Vec::new();
    for (name, min) in thresholds {
        let (r, took) = env.run(name, "full", 0)?;
        ensure(took < limit, || format!("{name} took {took:.0?}"))?;
        lines.push(format!("{name} {:.4}±{:.4} ({took:.0?})", r.mean_auc, r.std_auc));
        if r.mean_auc < min {
            misses.push((name, min));
        }
    }
    match misses.as_slice() {
        [] => Ok(lines.join(", ")),
        [(name, min)] => {
            let (r, took) = env.run(name, "full", 1)?;
            ensure(took < limit, || format!("{name} re-run took {took:.0?}"))?;
            ensure(r.mean_auc >= *min, || {
                format!("{} ; {name} re-run with seed 1 gave {:.4} < {min}", lines.join(", "), r.mean_auc)
            })?;
            Ok(format!("{} ; {name} passed on re-run ({:.4})", lines.join(", "), r.mean_auc))
        }
        _ => Err(format!("{} ; below threshold: {misses:?}", lines.join(", ")).into()),
    }
}

fn ablation_direction(env: &mut RealData) -> Outcome {
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in 0..3 {
        let (full, _) = env.run("BZR", "full", seed)?;
        let (ablated, _) = env.run("BZR", "no_gcn_x", seed)?;
        let gap = full.mean_auc - ablated.mean_auc;
        gaps.push(format!("{gap:+.4}"));
        wins += usize::from(gap >= 0.05);
    }
    ensure(wins >= 2, || format!("gap >= 0.05 on {wins}/3 seeds: {}", gaps.join(" ")))?;
    Ok(format!("gap >= 0.05 on {wins}/3 seeds: {}", gaps.join(" ")))
}

// ---------------------------------------------------------------------------
// 9. Sweep and histogram artifacts through the CLI.

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_gladcf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("gladcf {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn find_file(dir: &Path, prefix: &str, ext: &str) -> Result<PathBuf, String> {
    std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| {
            let f = p.file_name().unwrap().to_string_lossy();
            f.starts_with(prefix) && f.ends_with(ext)
        })
        .ok_or_else(|| format!("no {prefix}*{ext} in {}", dir.display()))
}

fn csv_rows(text: &str, header: &str) -> Result<Vec<Vec<String>>, String> {
    let mut lines = text.lines();
    ensure(lines.next() == Some(header), || format!("header differs from {header:?}"))?;
    let width = header.split(',').count();
    lines
        .map(|l| {
            let cells: Vec<String> = l.split(',').map(str::to_string).collect();
            ensure(cells.len() == width, || format!("row {l:?} has {} cells", cells.len()))?;
            Ok(cells)
        })
        .collect()
}

fn num(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("{s:?} is not a number"))
}

fn protocol_artifacts() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = common::write_synthetic_tu(tmp.path(), "SYN", 24, 8, 9);
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("small.cfg");
    std::fs::write(&cfg, "folds = 3\nepochs = 3\ncf_epochs = 3\nhidden_dim = 16\nbranch_dim = 8\nreduce_dim = 4\n")
        .map_err(|e| e.to_string())?;
    let common_args = [
        "--dataset",
        "SYN",
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ];
    let mut sweep_args = vec!["sweep-beta"];
    sweep_args.extend(common_args);
    cli(&sweep_args)?;
    let runs = out.join("runs").join("SYN");

    let grid = experiment::default_beta_grid();
    let csv = std::fs::read_to_string(find_file(&runs, "sweep_", ".csv")?).map_err(|e| e.to_string())?;
    let rows = csv_rows(&csv, experiment::SWEEP_HEADER)?;
    ensure(rows.len() == grid.len(), || format!("{} sweep rows", rows.len()))?;
    let mut hashes = std::collections::HashSet::new();
    for (row, &beta) in rows.iter().zip(&grid) {
        ensure(num(&row[0])? == beta, || format!("beta {} where {beta} expected", row[0]))?;
        let (m, s) = (num(&row[1])?, num(&row[2])?);
        ensure((0.0..=1.0).contains(&m) && (0.0..=0.5).contains(&s), || format!("AUC {m} ± {s} out of range"))?;
        ensure(row[3].len() == 16 && row[3].chars().all(|c| c.is_ascii_hexdigit()), || format!("hash {:?}", row[3]))?;
        hashes.insert(row[3].clone());
    }
    ensure(hashes.len() == grid.len(), || "config hashes are not distinct per beta".to_string())?;
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(find_file(&runs, "sweep_", ".json")?).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(json["format_version"].is_u64() && json["dataset"] == "SYN", || "sweep JSON header".to_string())?;
    let points = json["points"].as_array().ok_or("points missing")?;
    ensure(points.len() == grid.len(), || "sweep JSON point count".to_string())?;
    for (p, row) in points.iter().zip(&rows) {
        let folds = p["fold_aucs"].as_array().ok_or("fold_aucs missing")?;
        ensure(folds.len() == 3, || "fold_aucs length".to_string())?;
        let aucs: Vec<f64> = folds.iter().filter_map(|v| v.as_f64()).collect();
        ensure(aucs.len() == 3, || "fold_aucs not numeric".to_string())?;
        ensure(p["beta"].as_f64() == Some(num(&row[0])?), || "beta differs between CSV and JSON".to_string())?;
        ensure(p["mean_auc"].as_f64() == Some(num(&row[1])?), || "mean differs between CSV and JSON".to_string())?;
        ensure((metrics::mean(&aucs) - num(&row[1])?).abs() < 1e-12, || "mean_auc is not the fold mean".to_string())?;
        ensure(p["config_hash"].as_str() == Some(row[3].as_str()), || "hash differs".to_string())?;
    }

    let mut train_args = vec!["train"];
    train_args.extend(common_args);
    cli(&train_args)?;
    let mut plot_args = vec!["plot-scores", "--bins", "10"];
    plot_args.extend(common_args);
    cli(&plot_args)?;
    let run = std::fs::read_dir(&runs)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .find(|p| p.join("report.json").is_file())
        .ok_or("no run directory with report.json")?;
    let report = EvalReport::read_json(run.join("report.json")).map_err(|e| e.to_string())?;
    let hist_csv = std::fs::read_to_string(run.join("histogram.csv")).map_err(|e| e.to_string())?;
    let hist_rows = csv_rows(&hist_csv, experiment::HISTOGRAM_HEADER)?;
    ensure(hist_rows.len() == 10, || format!("{} histogram rows", hist_rows.len()))?;
    let (mut normal, mut abnormal) = (0usize, 0usize);
    let mut edge = 0.0;
    for (i, row) in hist_rows.iter().enumerate() {
        ensure(row[0] == i.to_string(), || format!("bin index {}", row[0]))?;
        let (lo, hi) = (num(&row[1])?, num(&row[2])?);
        ensure((lo - edge).abs() < 1e-12 && hi > lo, || format!("bin {i} spans [{lo}, {hi})"))?;
        edge = hi;
        normal += row[3].parse::<usize>().map_err(|e| e.to_string())?;
        abnormal += row[4].parse::<usize>().map_err(|e| e.to_string())?;
    }
    ensure((edge - 1.0).abs() < 1e-12, || format!("bins end at {edge}"))?;
    let test_sizes: usize = report.folds.iter().map(|f| f.test_counts.normal() + f.test_counts.abnormal()).sum();
    let test_abn: usize = report.folds.iter().map(|f| f.test_counts.abnormal()).sum();
    ensure(normal + abnormal == test_sizes && test_sizes == 32, || {
        format!("histogram holds {} scores, test folds hold {test_sizes}", normal + abnormal)
    })?;
    ensure(abnormal == test_abn && abnormal == 8, || format!("{abnormal} abnormal in histogram, {test_abn} tested"))?;
    let hist_json: experiment::ScoreHistogram =
        serde_json::from_str(&std::fs::read_to_string(run.join("histogram.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(hist_json.totals() == (normal, abnormal), || "histogram JSON and CSV disagree".to_string())?;
    Ok(format!("11-point sweep, 10-bin histogram conserving {test_sizes} test scores"))
}

// ---------------------------------------------------------------------------

fn main() {
    let strict = std::env::var("GLADCF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut env = RealData::from_env();
    let mut failed = 0;
    let mut unavailable = 0;
    let mut report = |id: &str, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(Fail::Unmet(
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into()),
            ))
        });
        match outcome {
            Ok(msg) => println!("[{id}] {name}: PASS ({msg})"),
            Err(Fail::Unmet(msg)) => {
                failed += 1;
                println!("[{id}] {name}: FAIL ({msg})");
            }
            Err(Fail::Unavailable(msg)) => {
                unavailable += 1;
                println!("[{id}] {name}: FAIL (not evaluated: {msg})");
            }
        }
    };
    report("1", "loss identity", &mut loss_identity);
    report("2", "AUC oracle", &mut auc_oracle);
    report("3", "gradient fidelity", &mut gradient_fidelity);
    report("4", "balance and integrity", &mut || balance_integrity(&env));
    report("5", "counterfactual formulas", &mut counterfactual_conformance);
    report("6", "permutation invariance", &mut permutation_invariance);
    report("7", "dataset AUC lower bounds", &mut || reproduction(&mut env));
    report("8", "ablation direction on BZR", &mut || ablation_direction(&mut env));
    report("9", "protocol artifacts", &mut protocol_artifacts);
    if failed + unavailable == 0 {
        println!("all acceptance criteria passed");
        return;
    }
    println!(
        "{} criteria FAIL: {failed} evaluated and missed, {unavailable} not evaluated (benchmark datasets absent)",
        failed + unavailable
    );
    if failed > 0 || strict {
        std::process::exit(1);
    }
}
