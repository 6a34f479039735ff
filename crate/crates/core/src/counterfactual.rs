//! Counterfactual sample generation.
//!
//! A single structural perturbation matrix `m_a` and feature-mask logit
//! matrix `m_b` are trained jointly over a set of majority-class seed graphs.
//! Structure is perturbed as `I(sigmoid(m_a · A) >= sigma)`, features are
//! masked with `I(sigmoid(m_b) >= tau) ⊙ X`. Training uses the smooth
//! sigmoid surrogates; thresholds apply only when samples are emitted.
//!
//! The class distributions compared by the divergence term come from a
//! frozen, seeded one-layer GCN probe with mean pooling and a 2-way softmax.
//! Every operation takes the real `n × n` block of a graph and uses the
//! top-left block of `m_a` / leading rows of `m_b`.

use std::path::Path;

use log::{debug, warn};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{glorot, normalized_adjacency, GcnLayerParams};
use crate::graph::{Graph, GraphDataset, Label, Provenance};
use crate::optim::Adam;
use crate::seed;
use crate::tape::{sigmoid, Tape, Var};
use crate::tu;

/// Probability floor applied before taking logarithms in the divergence.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPair {
    pub m_a: Array2<f64>,
    pub m_b: Array2<f64>,
    pub sigma: f64,
    pub tau: f64,
}

fn check_threshold(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie strictly inside (0, 1), got {v}")))
    }
}

impl PerturbationPair {
    /// Seeded initialization of an `n_max × n_max` structure matrix and an
    /// `n_max × h` mask-logit matrix.
    pub fn init(n_max: usize, h: usize, sigma: f64, tau: f64, rng: &mut seed::Rng) -> Result<Self> {
        Self::from_parts(glorot(n_max, n_max, rng), glorot(n_max, h.max(1), rng).slice(s![.., ..h]).to_owned(), sigma, tau)
    }

    pub fn from_parts(m_a: Array2<f64>, m_b: Array2<f64>, sigma: f64, tau: f64) -> Result<Self> {
        check_threshold("sigma", sigma)?;
        check_threshold("tau", tau)?;
        if m_a.nrows() != m_a.ncols() || m_b.nrows() != m_a.nrows() {
            return Err(Error::Shape(format!(
                "m_a {:?} must be square and share its row count with m_b {:?}",
                m_a.dim(),
                m_b.dim()
            )));
        }
        Ok(PerturbationPair { m_a, m_b, sigma, tau })
    }

    pub fn n_max(&self) -> usize {
        self.m_a.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.m_b.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.m_a.iter().chain(self.m_b.iter()).all(|v| v.is_finite())
    }

    fn check_structure(&self, a: &Array2<f64>) -> Result<usize> {
        let n = a.nrows();
        if a.ncols() != n || n > self.n_max() {
            return Err(Error::Shape(format!(
                "adjacency {:?} incompatible with m_a {:?}",
                a.dim(),
                self.m_a.dim()
            )));
        }
        Ok(n)
    }

    fn check_features(&self, x: &Array2<f64>) -> Result<usize> {
        let n = x.nrows();
        if n > self.n_max() || x.ncols() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "features {:?} incompatible with m_b {:?}",
                x.dim(),
                self.m_b.dim()
            )));
        }
        Ok(n)
    }
}

/// Perturb an adjacency block. Hard mode thresholds at `sigma` (inclusive),
/// symmetrizes by elementwise max with the transpose and zeroes the
/// diagonal; smooth mode returns the raw sigmoid.
pub fn perturb_structure(pair: &PerturbationPair, adjacency: &Array2<f64>, hard: bool) -> Result<Array2<f64>> {
    let n = pair.check_structure(adjacency)?;
    let soft = pair.m_a.slice(s![..n, ..n]).dot(adjacency).mapv(sigmoid);
    if !hard {
        return Ok(soft);
    }
    let bin = soft.mapv(|v| if v >= pair.sigma { 1.0_f64 } else { 0.0 });
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            f64::max(bin[[i, j]], bin[[j, i]])
        }
    }))
}

/// The mask `M_b'` for the first `n` rows: binary in hard mode, sigmoid otherwise.
pub fn feature_mask(pair: &PerturbationPair, n: usize, hard: bool) -> Array2<f64> {
    let soft = pair.m_b.slice(s![..n, ..]).mapv(sigmoid);
    if hard {
        soft.mapv(|v| if v >= pair.tau { 1.0 } else { 0.0 })
    } else {
        soft
    }
}

pub fn mask_features(pair: &PerturbationPair, features: &Array2<f64>, hard: bool) -> Result<Array2<f64>> {
    let n = pair.check_features(features)?;
    Ok(feature_mask(pair, n, hard) * features)
}

/// Frozen one-layer GCN mapping a graph to a 2-class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutProbe {
    pub layer: GcnLayerParams,
}

impl ReadoutProbe {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        ReadoutProbe {
            layer: GcnLayerParams::init(feature_dim, 2, &mut rng),
        }
    }

    /// Distribution for constant inputs.
    pub fn distribution(&self, features: &Array2<f64>, adjacency: &Array2<f64>) -> [f64; 2] {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let a = tape.constant(normalized_adjacency(adjacency));
        let p = self.on_tape(&mut tape, x, AdjacencyInput::Normalized(a));
        let v = tape.value(p);
        [v[[0, 0]], v[[0, 1]]]
    }

    fn on_tape(&self, tape: &mut Tape, x: Var, adj: AdjacencyInput) -> Var {
        let a_hat = match adj {
            AdjacencyInput::Normalized(a) => a,
            AdjacencyInput::Raw(a) => {
                let n = tape.value(a).nrows();
                let eye = tape.constant(Array2::eye(n));
                let m = tape.add(a, eye);
                let deg = tape.row_sum(m);
                let inv = tape.pow(deg, -0.5);
                let left = tape.scale_rows(m, inv);
                tape.scale_cols(left, inv)
            }
        };
        let n = tape.value(a_hat).nrows();
        let w = tape.constant(self.layer.weight.clone());
        let b = tape.constant(self.layer.bias.clone());
        let xw = tape.matmul(x, w);
        let agg = tape.matmul(a_hat, xw);
        let h = tape.add_row(agg, b);
        let pooled = tape.segment_mean(h, std::rc::Rc::new(vec![(0, n)]));
        tape.softmax_rows(pooled)
    }
}

#[derive(Debug, Clone, Copy)]
enum AdjacencyInput {
    Normalized(Var),
    Raw(Var),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterfactualLoss {
    /// `L_G1 - L_G2`.
    pub total: f64,
    /// `‖A - A'‖_F - ‖M_b'‖_F`.
    pub g1: f64,
    /// `KL(p‖p_a) + KL(p‖p_b)`.
    pub g2: f64,
    pub kl_structure: f64,
    pub kl_features: f64,
}

struct LossVars {
    total: Var,
    g1: Var,
    g2: Var,
    kl_a: Var,
    kl_b: Var,
}

fn clamp_probs(p: [f64; 2]) -> [f64; 2] {
    if p.iter().any(|&v| v < PROB_EPS) {
        debug!("probe probability below {PROB_EPS:e} clamped");
    }
    [p[0].max(PROB_EPS), p[1].max(PROB_EPS)]
}

// KL(p‖q) with p constant: Σ p ln p − Σ p ln q.
fn kl_on_tape(tape: &mut Tape, p: [f64; 2], q: Var) -> Var {
    let p = clamp_probs(p);
    let entropy_term = p[0] * p[0].ln() + p[1] * p[1].ln();
    let pc = tape.constant(Array2::from_shape_vec((1, 2), p.to_vec()).expect("1x2"));
    let qc = tape.clamp(q, PROB_EPS, 1.0);
    let lq = tape.log(qc);
    let cross = tape.mul(pc, lq);
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0);
    let k = tape.constant(Array2::from_elem((1, 1), entropy_term));
    tape.add(neg, k)
}

fn loss_on_tape(
    tape: &mut Tape,
    pair: &PerturbationPair,
    m_a: Var,
    m_b: Var,
    graph: &Graph,
    probe: &ReadoutProbe,
    hard: bool,
) -> Result<LossVars> {
    let a = &graph.adjacency;
    let x = &graph.node_features;
    let n = pair.check_structure(a)?;
    pair.check_features(x)?;
    let p = probe.distribution(x, a);

    let a_c = tape.constant(a.clone());
    let x_c = tape.constant(x.clone());
    let (a_pert, mask) = if hard {
        let ap = tape.constant(perturb_structure(pair, a, true)?);
        let mk = tape.constant(feature_mask(pair, n, true));
        (ap, mk)
    } else {
        let ma = tape.block(m_a, n, n);
        let prod = tape.matmul(ma, a_c);
        let ap = tape.sigmoid(prod);
        let mb = tape.block(m_b, n, pair.feature_dim());
        let mk = tape.sigmoid(mb);
        (ap, mk)
    };

    let diff = tape.sub(a_c, a_pert);
    let fa = tape.frobenius(diff);
    let fm = tape.frobenius(mask);
    let g1 = tape.sub(fa, fm);

    let p_a = probe.on_tape(tape, x_c, AdjacencyInput::Raw(a_pert));
    let x_masked = tape.mul(mask, x_c);
    let a_hat = tape.constant(normalized_adjacency(a));
    let p_b = probe.on_tape(tape, x_masked, AdjacencyInput::Normalized(a_hat));
    let kl_a = kl_on_tape(tape, p, p_a);
    let kl_b = kl_on_tape(tape, p, p_b);
    let g2 = tape.add(kl_a, kl_b);
    let total = tape.sub(g1, g2);
    Ok(LossVars { total, g1, g2, kl_a, kl_b })
}

/// Evaluate the counterfactual loss for one graph (its real node block).
pub fn counterfactual_loss(
    pair: &PerturbationPair,
    graph: &Graph,
    probe: &ReadoutProbe,
    hard: bool,
) -> Result<CounterfactualLoss> {
    let mut tape = Tape::new();
    let m_a = tape.constant(pair.m_a.clone());
    let m_b = tape.constant(pair.m_b.clone());
    let v = loss_on_tape(&mut tape, pair, m_a, m_b, graph, probe, hard)?;
    Ok(CounterfactualLoss {
        total: tape.scalar(v.total),
        g1: tape.scalar(v.g1),
        g2: tape.scalar(v.g2),
        kl_structure: tape.scalar(v.kl_a),
        kl_features: tape.scalar(v.kl_b),
    })
}

/// Mean smooth loss over `graphs` and its gradients w.r.t. `m_a` and `m_b`.
pub fn counterfactual_gradients(
    pair: &PerturbationPair,
    graphs: &[Graph],
    probe: &ReadoutProbe,
) -> Result<(CounterfactualLoss, Array2<f64>, Array2<f64>)> {
    let mut grad_a = Array2::zeros(pair.m_a.dim());
    let mut grad_b = Array2::zeros(pair.m_b.dim());
    let mut acc = CounterfactualLoss {
        total: 0.0,
        g1: 0.0,
        g2: 0.0,
        kl_structure: 0.0,
        kl_features: 0.0,
    };
    if graphs.is_empty() {
        return Ok((acc, grad_a, grad_b));
    }
    let w = 1.0 / graphs.len() as f64;
    for g in graphs {
        let mut tape = Tape::new();
        let m_a = tape.param(pair.m_a.clone());
        let m_b = tape.param(pair.m_b.clone());
        let v = loss_on_tape(&mut tape, pair, m_a, m_b, g, probe, false)?;
        acc.total += w * tape.scalar(v.total);
        acc.g1 += w * tape.scalar(v.g1);
        acc.g2 += w * tape.scalar(v.g2);
        acc.kl_structure += w * tape.scalar(v.kl_a);
        acc.kl_features += w * tape.scalar(v.kl_b);
        let mut grads = tape.backward(v.total);
        grad_a.scaled_add(w, &grads.take_or_zeros(m_a, pair.m_a.dim()));
        grad_b.scaled_add(w, &grads.take_or_zeros(m_b, pair.m_b.dim()));
    }
    Ok((acc, grad_a, grad_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub epochs: usize,
    pub lr: f64,
    pub sigma: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            epochs: 100,
            lr: 0.01,
            sigma: 0.5,
            tau: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedPerturbation {
    pub pair: PerturbationPair,
    pub probe: ReadoutProbe,
    /// Mean smooth loss before each update, then once after the last one.
    pub loss_trace: Vec<f64>,
}

/// Train one shared perturbation pair over all seed graphs (probe frozen).
pub fn train_perturbations(
    seeds: &[Graph],
    n_max: usize,
    feature_dim: usize,
    config: &AugmentConfig,
) -> Result<TrainedPerturbation> {
    let mut rng = seed::rng(seed::derive(config.seed, "perturbation-init", 0));
    let mut pair = PerturbationPair::init(n_max, feature_dim, config.sigma, config.tau, &mut rng)?;
    let probe = ReadoutProbe::new(feature_dim, seed::derive(config.seed, "probe", 0));
    let mut opt = Adam::new(config.lr, &[pair.m_a.dim(), pair.m_b.dim()]);
    let mut loss_trace = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let (loss, ga, gb) = counterfactual_gradients(&pair, seeds, &probe)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "counterfactual loss at epoch {epoch}: total {} (L_G1 {}, L_G2 {}, KL_a {}, KL_b {})",
                loss.total, loss.g1, loss.g2, loss.kl_structure, loss.kl_features
            )));
        }
        loss_trace.push(loss.total);
        if epoch == config.epochs {
            break;
        }
        opt.step(vec![&mut pair.m_a, &mut pair.m_b], &[ga, gb]);
        if !pair.is_finite() {
            return Err(Error::NonFinite(format!(
                "perturbation matrices after epoch {epoch} (loss {}, L_G1 {}, L_G2 {})",
                loss.total, loss.g1, loss.g2
            )));
        }
    }
    Ok(TrainedPerturbation { pair, probe, loss_trace })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSelection {
    pub majority: Label,
    pub minority: Label,
    /// Dataset indices of the chosen majority-class seed graphs.
    pub indices: Vec<usize>,
    pub with_replacement: bool,
}

impl SeedSelection {
    pub fn gap(&self) -> usize {
        self.indices.len()
    }
}

/// Pick `|majority| - |minority|` majority-class seeds among `train`,
/// uniformly without replacement. Returns `None` when already balanced.
pub fn select_seeds(dataset: &GraphDataset, train: &[usize], seed: u64) -> Option<SeedSelection> {
    let (mut normal, mut abnormal) = (Vec::new(), Vec::new());
    for &i in train {
        let g = &dataset.graphs[i];
        if g.provenance == Provenance::Generated {
            continue;
        }
        match g.label {
            Label::Normal => normal.push(i),
            Label::Abnormal => abnormal.push(i),
        }
    }
    let (majority, minority, mut pool, gap) = match normal.len().cmp(&abnormal.len()) {
        std::cmp::Ordering::Equal => return None,
        std::cmp::Ordering::Greater => (Label::Normal, Label::Abnormal, normal.clone(), normal.len() - abnormal.len()),
        std::cmp::Ordering::Less => (Label::Abnormal, Label::Normal, abnormal.clone(), abnormal.len() - normal.len()),
    };
    let mut rng = seed::rng(seed);
    let with_replacement = gap > pool.len();
    let indices = if with_replacement {
        warn!("gap {gap} exceeds {} seed candidates; sampling with replacement", pool.len());
        (0..gap).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    } else {
        pool.shuffle(&mut rng);
        pool.truncate(gap);
        pool
    };
    Some(SeedSelection {
        majority,
        minority,
        indices,
        with_replacement,
    })
}

/// Apply the hard perturbation to one seed, producing a generated graph
/// carrying `label`.
pub fn perturb_graph(pair: &PerturbationPair, seed_graph: &Graph, label: Label) -> Result<Graph> {
    let adjacency = perturb_structure(pair, &seed_graph.adjacency, true)?;
    let features = mask_features(pair, &seed_graph.node_features, true)?;
    let mut g = Graph::from_adjacency(seed_graph.id, adjacency, label, Provenance::Generated);
    g.node_features = features;
    Ok(g)
}

/// Generate the balancing samples for a training split. Seeds are chosen by
/// [`select_seeds`] with the same `seed`, so a pair trained on that
/// selection is applied to exactly those graphs.
pub fn generate_samples(
    pair: &PerturbationPair,
    dataset: &GraphDataset,
    train: &[usize],
    seed: u64,
) -> Result<Vec<Graph>> {
    let Some(sel) = select_seeds(dataset, train, seed) else {
        return Ok(Vec::new());
    };
    sel.indices
        .iter()
        .map(|&i| perturb_graph(pair, &dataset.graphs[i], sel.minority))
        .collect()
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub format_version: u32,
    pub dataset: String,
    pub config: AugmentConfig,
    pub minority_label: Label,
    pub generated_count: usize,
    pub seed_graph_ids: Vec<usize>,
    pub loss_trace: Vec<f64>,
}

/// Write generated graphs as `<name>_generated` TU files plus a JSON manifest.
pub fn export_generated(
    dir: impl AsRef<Path>,
    dataset_name: &str,
    graphs: &[Graph],
    manifest: &AugmentManifest,
) -> Result<()> {
    let prefix = format!("{dataset_name}_generated");
    let dir = dir.as_ref();
    tu::write_tu_dataset(dir, &prefix, graphs)?;
    let path = dir.join(format!("{prefix}_manifest.json"));
    let body = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}
