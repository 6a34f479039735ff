//! The anomaly detector: dual-branch GCN encoder, L1-sorted adaptive
//! weighting, sigmoid head and the provenance-aware composite loss.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use log::{debug, warn};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{gcn_stack, glorot, GcnLayerParams, LayerInput, LayerVars, NodeBatch};
use crate::graph::{Graph, Label, PaddedBatch, Provenance};
use crate::optim::Adam;
use crate::seed;
use crate::tape::{sigmoid, Tape, Var};

/// Log arguments are clamped into `[LOG_EPS, 1 - LOG_EPS]`; emitted scores too.
pub const LOG_EPS: f64 = 1e-12;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture switches that remove parts of the model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub no_awlm: bool,
    pub no_gcn_d: bool,
    pub no_gcn_x: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub branch_dim: usize,
    pub reduce_dim: usize,
}

impl Architecture {
    pub fn new(feature_dim: usize) -> Self {
        Architecture {
            feature_dim,
            hidden_dim: 256,
            branch_dim: 128,
            reduce_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    /// Node-feature branch; empty when ablated.
    pub gcn_x: Vec<GcnLayerParams>,
    /// Degree branch; empty when ablated.
    pub gcn_d: Vec<GcnLayerParams>,
    pub reducer: GcnLayerParams,
    /// `None` when adaptive weighting is ablated (no sort, no `W`).
    pub w_adaptive: Option<Array2<f64>>,
    /// `r × 1`.
    pub w_head: Array2<f64>,
    /// `1 × 1`.
    pub b_head: Array2<f64>,
}

impl DetectorParams {
    /// Seeded initialization. Every tensor of the full model is drawn in a
    /// fixed order before ablated parts are dropped, so the retained tensors
    /// are identical across variants.
    pub fn init(arch: Architecture, ablation: Ablation, seed: u64) -> Result<Self> {
        if ablation.no_gcn_x && ablation.no_gcn_d {
            return Err(Error::Config("cannot drop both GCN branches".into()));
        }
        let mut rng = seed::rng(seed);
        let gcn_x = vec![
            GcnLayerParams::init(arch.feature_dim, arch.hidden_dim, &mut rng),
            GcnLayerParams::init(arch.hidden_dim, arch.branch_dim, &mut rng),
        ];
        let gcn_d = vec![
            GcnLayerParams::init(1, arch.hidden_dim, &mut rng),
            GcnLayerParams::init(arch.hidden_dim, arch.branch_dim, &mut rng),
        ];
        let full = GcnLayerParams::init(2 * arch.branch_dim, arch.reduce_dim, &mut rng);
        let w = glorot(arch.reduce_dim, arch.reduce_dim, &mut rng);
        let w_head = glorot(arch.reduce_dim, 1, &mut rng);
        let reducer = if ablation.no_gcn_x || ablation.no_gcn_d {
            GcnLayerParams {
                weight: full.weight.slice(s![..arch.branch_dim, ..]).to_owned(),
                bias: full.bias,
            }
        } else {
            full
        };
        Ok(DetectorParams {
            gcn_x: if ablation.no_gcn_x { Vec::new() } else { gcn_x },
            gcn_d: if ablation.no_gcn_d { Vec::new() } else { gcn_d },
            reducer,
            w_adaptive: (!ablation.no_awlm).then_some(w),
            w_head,
            b_head: Array2::zeros((1, 1)),
        })
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_awlm: self.w_adaptive.is_none(),
            no_gcn_d: self.gcn_d.is_empty(),
            no_gcn_x: self.gcn_x.is_empty(),
        }
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.gcn_x.first().map(GcnLayerParams::in_dim)
    }

    /// Width of the fused node representation `Z`.
    pub fn fused_dim(&self) -> usize {
        self.gcn_x.last().map_or(0, GcnLayerParams::out_dim) + self.gcn_d.last().map_or(0, GcnLayerParams::out_dim)
    }

    pub fn reduce_dim(&self) -> usize {
        self.reducer.out_dim()
    }

    /// Tensor names in canonical order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (branch, layers) in [("gcn_x", &self.gcn_x), ("gcn_d", &self.gcn_d)] {
            for i in 0..layers.len() {
                names.push(format!("{branch}.{i}.weight"));
                names.push(format!("{branch}.{i}.bias"));
            }
        }
        names.push("reducer.weight".into());
        names.push("reducer.bias".into());
        if self.w_adaptive.is_some() {
            names.push("w_adaptive".into());
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for l in self.gcn_x.iter().chain(&self.gcn_d) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.reducer.weight);
        out.push(&self.reducer.bias);
        if let Some(w) = &self.w_adaptive {
            out.push(w);
        }
        out.push(&self.w_head);
        out.push(&self.b_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for l in self.gcn_x.iter_mut().chain(self.gcn_d.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.reducer.weight);
        out.push(&mut self.reducer.bias);
        if let Some(w) = &mut self.w_adaptive {
            out.push(w);
        }
        out.push(&mut self.w_head);
        out.push(&mut self.b_head);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Write a JSON checkpoint holding every tensor and the config hash.
    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            tensors: self
                .tensor_names()
                .into_iter()
                .zip(self.tensors())
                .map(|(name, t)| TensorRecord {
                    name,
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint, returning the parameters and the stored config hash.
    pub fn load(path: impl AsRef<Path>) -> Result<(DetectorParams, String)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        let mut tensors: HashMap<String, TensorRecord> =
            ckpt.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut get = |name: &str| -> Option<Array2<f64>> {
            let t = tensors.remove(name)?;
            Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data).ok()
        };
        let mut layer = |prefix: &str| -> Option<GcnLayerParams> {
            Some(GcnLayerParams {
                weight: get(&format!("{prefix}.weight"))?,
                bias: get(&format!("{prefix}.bias"))?,
            })
        };
        let bad = |name: &str| Error::Config(format!("checkpoint tensor {name} missing or malformed"));
        let mut branches = [Vec::new(), Vec::new()];
        for (k, branch) in ["gcn_x", "gcn_d"].iter().enumerate() {
            let mut i = 0;
            while let Some(l) = layer(&format!("{branch}.{i}")) {
                branches[k].push(l);
                i += 1;
            }
        }
        let reducer = layer("reducer").ok_or_else(|| bad("reducer"))?;
        let w_adaptive = get("w_adaptive");
        let w_head = get("head.weight").ok_or_else(|| bad("head.weight"))?;
        let b_head = get("head.bias").ok_or_else(|| bad("head.bias"))?;
        let [gcn_x, gcn_d] = branches;
        let params = DetectorParams {
            gcn_x,
            gcn_d,
            reducer,
            w_adaptive,
            w_head,
            b_head,
        };
        params.validate()?;
        Ok((params, ckpt.config_hash))
    }

    fn validate(&self) -> Result<()> {
        let r = self.reduce_dim();
        let ok = self.fused_dim() == self.reducer.in_dim()
            && self.fused_dim() > 0
            && self.gcn_d.first().is_none_or(|l| l.in_dim() == 1)
            && self.w_adaptive.as_ref().is_none_or(|w| w.dim() == (r, r))
            && self.w_head.dim() == (r, 1)
            && self.b_head.dim() == (1, 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent detector tensor shapes".into()))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config_hash: String,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

/// Parameters placed on a tape, in the order of [`DetectorParams::tensors`].
struct ParamVars {
    gcn_x: Vec<LayerVars>,
    gcn_d: Vec<LayerVars>,
    reducer: LayerVars,
    w_adaptive: Option<Var>,
    w_head: Var,
    b_head: Var,
}

impl ParamVars {
    fn new(tape: &mut Tape, p: &DetectorParams, trainable: bool) -> Self {
        let layer = |tape: &mut Tape, l: &GcnLayerParams| {
            if trainable {
                LayerVars::params(tape, l)
            } else {
                LayerVars::constants(tape, l)
            }
        };
        let leaf = |tape: &mut Tape, a: &Array2<f64>| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        ParamVars {
            gcn_x: p.gcn_x.iter().map(|l| layer(tape, l)).collect(),
            gcn_d: p.gcn_d.iter().map(|l| layer(tape, l)).collect(),
            reducer: layer(tape, &p.reducer),
            w_adaptive: p.w_adaptive.as_ref().map(|w| leaf(tape, w)),
            w_head: leaf(tape, &p.w_head),
            b_head: leaf(tape, &p.b_head),
        }
    }

    fn in_order(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in self.gcn_x.iter().chain(&self.gcn_d) {
            out.push(l.weight);
            out.push(l.bias);
        }
        out.push(self.reducer.weight);
        out.push(self.reducer.bias);
        out.extend(self.w_adaptive);
        out.push(self.w_head);
        out.push(self.b_head);
        out
    }
}

fn fuse_on_tape(tape: &mut Tape, vars: &ParamVars, batch: &NodeBatch) -> Var {
    let zx = (!vars.gcn_x.is_empty())
        .then(|| gcn_stack(tape, &batch.adjacency, LayerInput::Sparse(batch.features.clone()), &vars.gcn_x));
    let zd = (!vars.gcn_d.is_empty()).then(|| {
        let d = tape.constant(batch.degrees.clone());
        gcn_stack(tape, &batch.adjacency, LayerInput::Dense(d), &vars.gcn_d)
    });
    match (zx, zd) {
        (Some(x), Some(d)) => tape.concat_cols(x, d),
        (Some(x), None) => x,
        (None, Some(d)) => d,
        (None, None) => unreachable!("at least one branch is present"),
    }
}

/// Row order that sorts each segment by descending L1 norm; ties keep
/// ascending original index.
pub fn l1_sort_order(z: &Array2<f64>, segments: &[(usize, usize)]) -> Vec<usize> {
    let norms: Vec<f64> = z.outer_iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect();
    let mut order: Vec<usize> = (0..z.nrows()).collect();
    for &(start, len) in segments {
        order[start..start + len].sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    }
    order
}

fn weighting_on_tape(tape: &mut Tape, vars: &ParamVars, z: Var, segments: &Rc<Vec<(usize, usize)>>) -> Var {
    let sorted = match vars.w_adaptive {
        Some(_) => {
            let order = l1_sort_order(tape.value(z), segments);
            tape.gather_rows(z, Rc::new(order))
        }
        None => z,
    };
    let reduced = tape.matmul(sorted, vars.reducer.weight);
    let mut nodes = tape.add_row(reduced, vars.reducer.bias);
    if let Some(w) = vars.w_adaptive {
        nodes = tape.matmul(nodes, w);
    }
    tape.segment_mean(nodes, segments.clone())
}

fn head_on_tape(tape: &mut Tape, vars: &ParamVars, embedding: Var) -> Var {
    let act = tape.relu(embedding);
    let lin = tape.matmul(act, vars.w_head);
    tape.add_row(lin, vars.b_head)
}

fn forward_on_tape(tape: &mut Tape, vars: &ParamVars, batch: &NodeBatch) -> Var {
    let z = fuse_on_tape(tape, vars, batch);
    let emb = weighting_on_tape(tape, vars, z, &batch.segments);
    head_on_tape(tape, vars, emb)
}

fn check_features(params: &DetectorParams, graphs: &[&Graph]) -> Result<()> {
    if let Some(h) = params.feature_dim() {
        if let Some((i, g)) = graphs.iter().enumerate().find(|(_, g)| g.feature_dim() != h) {
            return Err(Error::Shape(format!(
                "graph {i} has {} feature columns, detector expects {h}",
                g.feature_dim()
            )));
        }
    }
    for (i, g) in graphs.iter().enumerate() {
        if g.num_nodes() == 0 {
            debug!("graph {i} has no nodes; its embedding is zero");
        }
    }
    Ok(())
}

fn unpad(batch: &PaddedBatch) -> Vec<Graph> {
    (0..batch.batch_size())
        .map(|b| {
            let real: Vec<usize> = (0..batch.n_max()).filter(|&i| batch.node_mask[[b, i]] != 0).collect();
            let n = real.len();
            let adj = Array2::from_shape_fn((n, n), |(i, j)| batch.adjacency_stack[[b, real[i], real[j]]]);
            let h = batch.feature_stack.dim().2;
            let label = batch.labels[b];
            let mut g = Graph::from_adjacency(b, adj, label, Provenance::original(label));
            g.node_features = Array2::from_shape_fn((n, h), |(i, j)| batch.feature_stack[[b, real[i], j]]);
            g
        })
        .collect()
}

fn pad_rows(batch: &PaddedBatch, rows: &Array2<f64>) -> Array3<f64> {
    let mut out = Array3::zeros((batch.batch_size(), batch.n_max(), rows.ncols()));
    let mut k = 0;
    for b in 0..batch.batch_size() {
        for i in 0..batch.n_max() {
            if batch.node_mask[[b, i]] != 0 {
                out.slice_mut(s![b, i, ..]).assign(&rows.row(k));
                k += 1;
            }
        }
    }
    out
}

/// Fused node representations `Z` (B × n_max × fused_dim), padded rows zero.
pub fn fuse_features(params: &DetectorParams, batch: &PaddedBatch) -> Result<Array3<f64>> {
    let graphs = unpad(batch);
    let refs: Vec<&Graph> = graphs.iter().collect();
    check_features(params, &refs)?;
    let nb = NodeBatch::new(&refs)?;
    let mut tape = Tape::new();
    let vars = ParamVars::new(&mut tape, params, false);
    let z = fuse_on_tape(&mut tape, &vars, &nb);
    Ok(pad_rows(batch, tape.value(z)))
}

/// Graph embeddings (B × r) from fused representations: L1 sort, reducer,
/// `W`, then mask-aware mean pooling.
pub fn adaptive_weighting(params: &DetectorParams, z: &Array3<f64>, mask: &Array2<u8>) -> Result<Array2<f64>> {
    let (b, n_max, width) = z.dim();
    if mask.dim() != (b, n_max) || width != params.reducer.in_dim() {
        return Err(Error::Shape(format!(
            "fused tensor {:?}, mask {:?}, reducer input {}",
            z.dim(),
            mask.dim(),
            params.reducer.in_dim()
        )));
    }
    let mut rows = Vec::new();
    let mut segments = Vec::with_capacity(b);
    for g in 0..b {
        let start = rows.len() / width.max(1);
        let mut len = 0;
        for i in 0..n_max {
            if mask[[g, i]] != 0 {
                rows.extend(z.slice(s![g, i, ..]).iter().copied());
                len += 1;
            }
        }
        if len == 0 {
            debug!("graph {g} is fully padded; zero embedding");
        }
        segments.push((start, len));
    }
    let total = segments.iter().map(|s| s.1).sum();
    let flat = Array2::from_shape_vec((total, width), rows).map_err(|e| Error::Shape(e.to_string()))?;
    let mut tape = Tape::new();
    let vars = ParamVars::new(&mut tape, params, false);
    let zv = tape.constant(flat);
    let emb = weighting_on_tape(&mut tape, &vars, zv, &Rc::new(segments));
    let mut out = tape.value(emb).clone();
    // Empty segments pool to zero rather than the reducer bias.
    for (g, &(_, len)) in tape_segments(mask).iter().enumerate() {
        if len == 0 {
            out.row_mut(g).fill(0.0);
        }
    }
    Ok(out)
}

fn tape_segments(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    mask.outer_iter()
        .map(|r| (0, r.iter().filter(|&&m| m != 0).count()))
        .collect()
}

/// Head logits `W_d · ReLU(embedding) + b_d`, one per row.
pub fn head_logits(params: &DetectorParams, embedding: &Array2<f64>) -> Result<Vec<f64>> {
    if embedding.ncols() != params.reduce_dim() {
        return Err(Error::Shape(format!(
            "embedding width {} differs from {}",
            embedding.ncols(),
            params.reduce_dim()
        )));
    }
    let act = embedding.mapv(|v| v.max(0.0));
    Ok(act.dot(&params.w_head).column(0).iter().map(|v| v + params.b_head[[0, 0]]).collect())
}

/// Map a logit to a score strictly inside (0, 1).
pub fn logit_to_score(u: f64) -> f64 {
    sigmoid(u).clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// Anomaly scores for graph embeddings.
pub fn score(params: &DetectorParams, embedding: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(head_logits(params, embedding)?.into_iter().map(logit_to_score).collect())
}

/// Hard decisions: 1 iff `score - t > 0`.
pub fn decide(scores: &[f64], t: f64) -> Vec<u8> {
    scores.iter().map(|&o| u8::from(o - t > 0.0)).collect()
}

/// Graphs per tape during training and scoring.
pub const CHUNK_SIZE: usize = 256;

fn chunks(graphs: &[Graph]) -> Result<Vec<(usize, NodeBatch)>> {
    graphs
        .chunks(CHUNK_SIZE)
        .enumerate()
        .map(|(k, c)| {
            let refs: Vec<&Graph> = c.iter().collect();
            Ok((k * CHUNK_SIZE, NodeBatch::new(&refs)?))
        })
        .collect()
}

/// Logits for whole graphs (monotone in the score, free of saturation ties).
pub fn graph_logits(params: &DetectorParams, graphs: &[Graph]) -> Result<Vec<f64>> {
    check_features(params, &graphs.iter().collect::<Vec<_>>())?;
    let mut out = Vec::with_capacity(graphs.len());
    for (_, nb) in chunks(graphs)? {
        let mut tape = Tape::new();
        let vars = ParamVars::new(&mut tape, params, false);
        let u = forward_on_tape(&mut tape, &vars, &nb);
        out.extend(tape.value(u).column(0).iter().copied());
    }
    Ok(out)
}

pub fn score_graphs(params: &DetectorParams, graphs: &[Graph]) -> Result<Vec<f64>> {
    Ok(graph_logits(params, graphs)?.into_iter().map(logit_to_score).collect())
}

/// Loss-term switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossSwitches {
    pub no_loss_nor: bool,
    pub no_loss_abn: bool,
}

/// One class's share of the loss: `(1 - alpha) * original + beta * alpha * generated`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassLoss {
    pub original: f64,
    pub generated: f64,
    pub alpha: f64,
    pub n_original: usize,
    pub n_generated: usize,
    pub combined: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub normal: ClassLoss,
    pub abnormal: ClassLoss,
    pub beta: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn l_nor(&self) -> f64 {
        self.normal.combined
    }

    pub fn l_abn(&self) -> f64 {
        self.abnormal.combined
    }
}

/// Per-sample coefficients of the composite loss. The loss is
/// `Σ_i coef_i · (-ln clamp(p_i))` where `p_i` is `O_i` for abnormal
/// samples and `1 - O_i` for normal ones.
#[derive(Debug, Clone)]
pub struct LossWeights {
    labels: Vec<Label>,
    generated: Vec<bool>,
    coef: Vec<f64>,
    beta: f64,
    switches: LossSwitches,
}

impl LossWeights {
    pub fn new(labels: &[Label], provenance: &[Provenance], beta: f64, switches: LossSwitches) -> Result<Self> {
        if labels.len() != provenance.len() {
            return Err(Error::Shape(format!("{} labels for {} provenance tags", labels.len(), provenance.len())));
        }
        for (i, (&l, &p)) in labels.iter().zip(provenance).enumerate() {
            if p != Provenance::Generated && p != Provenance::original(l) {
                return Err(Error::Config(format!("sample {i}: provenance {p:?} contradicts label {l:?}")));
            }
        }
        let generated: Vec<bool> = provenance.iter().map(|&p| p == Provenance::Generated).collect();
        let count = |label: Label, gen: bool| {
            labels.iter().zip(&generated).filter(|&(&l, &g)| l == label && g == gen).count()
        };
        let mut coef = vec![0.0; labels.len()];
        for label in [Label::Normal, Label::Abnormal] {
            let off = match label {
                Label::Normal => switches.no_loss_nor,
                Label::Abnormal => switches.no_loss_abn,
            };
            let (n_ori, n_gen) = (count(label, false), count(label, true));
            if n_ori + n_gen == 0 {
                debug!("no {label:?} samples; term is zero");
            }
            if off || n_ori + n_gen == 0 {
                continue;
            }
            let alpha = n_gen as f64 / (n_ori + n_gen) as f64;
            for i in 0..labels.len() {
                if labels[i] != label {
                    continue;
                }
                coef[i] = if generated[i] {
                    beta * alpha / n_gen as f64
                } else {
                    (1.0 - alpha) / n_ori as f64
                };
            }
        }
        Ok(LossWeights {
            labels: labels.to_vec(),
            generated,
            coef,
            beta,
            switches,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn target_prob(&self, i: usize, score: f64) -> f64 {
        match self.labels[i] {
            Label::Abnormal => score,
            Label::Normal => 1.0 - score,
        }
    }

    /// Loss components for per-sample scores `O_i`.
    pub fn components(&self, scores: &[f64]) -> Result<LossComponents> {
        if scores.len() != self.len() {
            return Err(Error::Shape(format!("{} scores for {} samples", scores.len(), self.len())));
        }
        let mut classes = [ClassLoss::default(), ClassLoss::default()];
        for (i, &o) in scores.iter().enumerate() {
            let c = &mut classes[usize::from(self.labels[i].as_u8())];
            let nll = -self.target_prob(i, o).clamp(LOG_EPS, 1.0 - LOG_EPS).ln();
            if self.generated[i] {
                c.generated += nll;
                c.n_generated += 1;
            } else {
                c.original += nll;
                c.n_original += 1;
            }
        }
        let mut total = 0.0;
        for (k, c) in classes.iter_mut().enumerate() {
            if c.n_original > 0 {
                c.original /= c.n_original as f64;
            }
            if c.n_generated > 0 {
                c.generated /= c.n_generated as f64;
            }
            let n = c.n_original + c.n_generated;
            c.alpha = if n == 0 { 0.0 } else { c.n_generated as f64 / n as f64 };
            c.combined = (1.0 - c.alpha) * c.original + self.beta * c.alpha * c.generated;
            let off = if k == 0 { self.switches.no_loss_nor } else { self.switches.no_loss_abn };
            if !off {
                total += c.combined;
            }
        }
        let [normal, abnormal] = classes;
        Ok(LossComponents {
            normal,
            abnormal,
            beta: self.beta,
            total,
        })
    }

    /// `dL/du_i` for logits `u_i`, with scores `sigmoid(u_i)`.
    pub fn logit_gradient(&self, logits: &[f64]) -> Vec<f64> {
        self.logit_gradient_at(0, logits)
    }

    /// Gradient for the samples `offset..offset + logits.len()`.
    fn logit_gradient_at(&self, offset: usize, logits: &[f64]) -> Vec<f64> {
        logits
            .iter()
            .enumerate()
            .map(|(k, &u)| {
                let i = offset + k;
                let o = sigmoid(u);
                let p = self.target_prob(i, o);
                if !(LOG_EPS..=1.0 - LOG_EPS).contains(&p) {
                    return 0.0;
                }
                match self.labels[i] {
                    Label::Abnormal => -self.coef[i] * (1.0 - o),
                    Label::Normal => self.coef[i] * o,
                }
            })
            .collect()
    }
}

/// Composite loss over scores with labels and provenance.
pub fn composite_loss(
    scores: &[f64],
    labels: &[Label],
    provenance: &[Provenance],
    beta: f64,
    switches: LossSwitches,
) -> Result<LossComponents> {
    LossWeights::new(labels, provenance, beta, switches)?.components(scores)
}

/// Loss and gradients of every tensor (in [`DetectorParams::tensors`]
/// order) over `graphs`.
pub fn loss_and_gradients(
    params: &DetectorParams,
    graphs: &[Graph],
    weights: &LossWeights,
) -> Result<(LossComponents, Vec<Array2<f64>>)> {
    let batches = chunks(graphs)?;
    loss_and_gradients_chunked(params, &batches, weights)
}

fn loss_and_gradients_chunked(
    params: &DetectorParams,
    batches: &[(usize, NodeBatch)],
    weights: &LossWeights,
) -> Result<(LossComponents, Vec<Array2<f64>>)> {
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.dim()).collect();
    let mut grads: Vec<Array2<f64>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();
    let mut logits = vec![0.0; weights.len()];
    for (offset, nb) in batches {
        let mut tape = Tape::new();
        let vars = ParamVars::new(&mut tape, params, true);
        let u = forward_on_tape(&mut tape, &vars, nb);
        let chunk: Vec<f64> = tape.value(u).column(0).to_vec();
        logits[*offset..offset + chunk.len()].copy_from_slice(&chunk);
        let seed = Array2::from_shape_vec((chunk.len(), 1), weights.logit_gradient_at(*offset, &chunk)).expect("column");
        let mut g = tape.backward_with(u, seed);
        for (acc, (&v, &shape)) in grads.iter_mut().zip(vars.in_order().iter().zip(&shapes)) {
            *acc += &g.take_or_zeros(v, shape);
        }
    }
    let scores: Vec<f64> = logits.iter().map(|&u| sigmoid(u)).collect();
    Ok((weights.components(&scores)?, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    pub switches: LossSwitches,
}

/// Full-batch training; returns the loss before each update.
pub fn train_detector(params: &mut DetectorParams, graphs: &[Graph], config: &TrainConfig) -> Result<Vec<f64>> {
    check_features(params, &graphs.iter().collect::<Vec<_>>())?;
    let labels: Vec<Label> = graphs.iter().map(|g| g.label).collect();
    let prov: Vec<Provenance> = graphs.iter().map(|g| g.provenance).collect();
    let weights = LossWeights::new(&labels, &prov, config.beta, config.switches)?;
    let batches = chunks(graphs)?;
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.dim()).collect();
    let mut opt = Adam::new(config.lr, &shapes);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, grads) = loss_and_gradients_chunked(params, &batches, &weights)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("detector loss at epoch {epoch}: {loss:?}")));
        }
        debug!("epoch {epoch}: loss {:.6}", loss.total);
        trace.push(loss.total);
        opt.step(params.tensors_mut(), &grads);
        if !params.is_finite() {
            warn!("non-finite detector parameters after epoch {epoch}");
            return Err(Error::NonFinite(format!("detector parameters after epoch {epoch}")));
        }
    }
    Ok(trace)
}
