//! Graph convolution building blocks shared by the probe, the detector and
//! the augmentation trainer.
//!
//! Propagation is the symmetric renormalization with self-loops on real
//! nodes: `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`, `D̃` the row sums of `A + I`.
//! Graphs are processed as a disjoint union (block-diagonal `Â`), which is
//! exactly equivalent to the zero-padded form with masked bias and
//! self-loops, but never materializes padding.

use std::rc::Rc;

use ndarray::{s, Array2, Array3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed::Rng;
use crate::sparse::{Csr, CsrBuilder};
use crate::tape::{Tape, Var};

/// Uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound))
}

/// Weight `in_dim × out_dim` and bias stored as a `1 × out_dim` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayerParams {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl GcnLayerParams {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        GcnLayerParams {
            weight: glorot(in_dim, out_dim, rng),
            bias: Array2::zeros((1, out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// A layer whose tensors live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

impl LayerVars {
    pub fn params(tape: &mut Tape, p: &GcnLayerParams) -> Self {
        LayerVars {
            weight: tape.param(p.weight.clone()),
            bias: tape.param(p.bias.clone()),
        }
    }

    pub fn constants(tape: &mut Tape, p: &GcnLayerParams) -> Self {
        LayerVars {
            weight: tape.constant(p.weight.clone()),
            bias: tape.constant(p.bias.clone()),
        }
    }
}

/// Dense normalized adjacency of a single graph. Rows with no entries in
/// `A + I` (impossible for real nodes) keep a unit degree.
pub fn normalized_adjacency(adjacency: &Array2<f64>) -> Array2<f64> {
    let n = adjacency.nrows();
    let mut m = adjacency.clone();
    for i in 0..n {
        m[[i, i]] += 1.0;
    }
    let inv_sqrt: Vec<f64> = m
        .outer_iter()
        .map(|r| {
            let d = r.sum();
            if d == 0.0 {
                1.0
            } else {
                1.0 / d.sqrt()
            }
        })
        .collect();
    Array2::from_shape_fn((n, n), |(i, j)| inv_sqrt[i] * m[[i, j]] * inv_sqrt[j])
}

/// Input to the first layer of a stack.
#[derive(Debug, Clone)]
pub enum LayerInput {
    Sparse(Rc<Csr>),
    Dense(Var),
}

/// Stacked GCN layers with ReLU between layers and none after the last.
pub fn gcn_stack(tape: &mut Tape, adj: &Rc<Csr>, input: LayerInput, layers: &[LayerVars]) -> Var {
    assert!(!layers.is_empty(), "gcn_stack needs at least one layer");
    let mut h: Option<Var> = None;
    for (i, l) in layers.iter().enumerate() {
        let hw = match (&input, h) {
            (LayerInput::Sparse(x), None) => tape.sp_matmul(x, l.weight),
            (LayerInput::Dense(x), None) => tape.matmul(*x, l.weight),
            (_, Some(prev)) => tape.matmul(prev, l.weight),
        };
        let agg = tape.sp_matmul(adj, hw);
        let mut out = tape.add_row(agg, l.bias);
        if i + 1 < layers.len() {
            out = tape.relu(out);
        }
        h = Some(out);
    }
    h.expect("non-empty stack")
}

/// Disjoint union of graphs: one row per real node, block-diagonal `Â`.
#[derive(Debug, Clone)]
pub struct NodeBatch {
    pub segments: Rc<Vec<(usize, usize)>>,
    pub adjacency: Rc<Csr>,
    pub features: Rc<Csr>,
    pub degrees: Array2<f64>,
}

impl NodeBatch {
    pub fn new(graphs: &[&Graph]) -> Result<NodeBatch> {
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let h = graphs.first().map_or(0, |g| g.feature_dim());
        let mut adj = CsrBuilder::new(total);
        let mut feat = CsrBuilder::new(h);
        let mut degrees = Array2::zeros((total, 1));
        let mut segments = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        for (b, g) in graphs.iter().enumerate() {
            let n = g.num_nodes();
            if g.feature_dim() != h || g.node_features.nrows() != n {
                return Err(Error::Shape(format!(
                    "graph {b} has features {:?}, expected {n}x{h}",
                    g.node_features.dim()
                )));
            }
            let inv_sqrt: Vec<f64> = g.degrees.iter().map(|&d| 1.0 / f64::from(d + 1).sqrt()).collect();
            for u in 0..n {
                let row = g.adjacency.row(u);
                adj.push_row((0..n).filter(|&v| v == u || row[v] != 0.0).map(|v| {
                    (offset + v, inv_sqrt[u] * inv_sqrt[v])
                }));
                feat.push_row(
                    g.node_features
                        .row(u)
                        .iter()
                        .enumerate()
                        .filter(|(_, &x)| x != 0.0)
                        .map(|(j, &x)| (j, x)),
                );
                degrees[[offset + u, 0]] = f64::from(g.degrees[u]);
            }
            segments.push((offset, n));
            offset += n;
        }
        Ok(NodeBatch {
            segments: Rc::new(segments),
            adjacency: Rc::new(adj.finish()),
            features: Rc::new(feat.finish()),
            degrees,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.segments.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.degrees.nrows()
    }
}

/// Apply a GCN stack to zero-padded tensors. `features` is B×n_max×in_dim,
/// `adjacency` B×n_max×n_max (binary), `mask` B×n_max. Rows of masked-out
/// nodes are zero in the output.
pub fn gcn_forward(
    layers: &[GcnLayerParams],
    features: &Array3<f64>,
    adjacency: &Array3<f64>,
    mask: &Array2<u8>,
) -> Result<Array3<f64>> {
    let (batch, n_max, in_dim) = features.dim();
    if adjacency.dim() != (batch, n_max, n_max) || mask.dim() != (batch, n_max) {
        return Err(Error::Shape(format!(
            "features {:?}, adjacency {:?}, mask {:?}",
            features.dim(),
            adjacency.dim(),
            mask.dim()
        )));
    }
    let Some(first) = layers.first() else {
        return Err(Error::Shape("empty layer stack".into()));
    };
    if first.in_dim() != in_dim {
        return Err(Error::Shape(format!(
            "first layer expects {} inputs, features have {in_dim}",
            first.in_dim()
        )));
    }
    for w in layers.windows(2) {
        if w[0].out_dim() != w[1].in_dim() {
            return Err(Error::Shape("consecutive layer dimensions differ".into()));
        }
    }
    let out_dim = layers.last().map_or(0, GcnLayerParams::out_dim);
    let mut out = Array3::zeros((batch, n_max, out_dim));
    for b in 0..batch {
        let real: Vec<usize> = (0..n_max).filter(|&i| mask[[b, i]] != 0).collect();
        let n = real.len();
        if n == 0 {
            continue;
        }
        let sub_adj = Array2::from_shape_fn((n, n), |(i, j)| adjacency[[b, real[i], real[j]]]);
        let sub_x = Array2::from_shape_fn((n, in_dim), |(i, j)| features[[b, real[i], j]]);
        let a_hat = Rc::new(Csr::from_dense(&normalized_adjacency(&sub_adj)));
        let mut tape = Tape::new();
        let x = tape.constant(sub_x);
        let vars: Vec<LayerVars> = layers.iter().map(|l| LayerVars::constants(&mut tape, l)).collect();
        let z = gcn_stack(&mut tape, &a_hat, LayerInput::Dense(x), &vars);
        let z = tape.value(z);
        for (i, &r) in real.iter().enumerate() {
            out.slice_mut(s![b, r, ..]).assign(&z.row(i));
        }
    }
    Ok(out)
}
