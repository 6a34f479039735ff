//! Graph data model, dataset container, padding and fold splitting.

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Abnormal),
            _ => None,
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Normal => Label::Abnormal,
            Label::Abnormal => Label::Normal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OriginalNormal,
    OriginalAbnormal,
    Generated,
}

impl Provenance {
    pub fn original(label: Label) -> Provenance {
        match label {
            Label::Normal => Provenance::OriginalNormal,
            Label::Abnormal => Provenance::OriginalAbnormal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::OriginalNormal => "original_normal",
            Provenance::OriginalAbnormal => "original_abnormal",
            Provenance::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Identity,
    DegreeBinning,
    Ldp,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Option<FeatureMode> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Some(FeatureMode::Identity),
            "db" | "degree_binning" | "degree-binning" => Some(FeatureMode::DegreeBinning),
            "ldp" => Some(FeatureMode::Ldp),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Identity => "identity",
            FeatureMode::DegreeBinning => "db",
            FeatureMode::Ldp => "ldp",
        }
    }
}

/// One labeled graph.
///
/// `adjacency` is binary and zero-diagonal; `degrees[i]` is always the row
/// sum of row `i`. `id` is the index of the graph in its source dataset; a
/// generated graph carries the id of the graph it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: usize,
    pub adjacency: Array2<f64>,
    pub node_features: Array2<f64>,
    pub degrees: Vec<u32>,
    pub label: Label,
    pub provenance: Provenance,
}

impl Graph {
    /// Build an original graph from an undirected edge list over `n` nodes.
    /// Self-loops and duplicate edges are dropped. Features start empty (n×0).
    pub fn from_edges(id: usize, n: usize, edges: &[(usize, usize)], label: Label) -> Result<Graph> {
        let mut adjacency = Array2::<f64>::zeros((n, n));
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Size(format!(
                    "edge ({u}, {v}) out of range for graph {id} with {n} nodes"
                )));
            }
            if u != v {
                adjacency[[u, v]] = 1.0;
                adjacency[[v, u]] = 1.0;
            }
        }
        Ok(Graph::from_adjacency(id, adjacency, label, Provenance::original(label)))
    }

    /// Wrap an already binary adjacency matrix, recomputing degrees.
    pub fn from_adjacency(id: usize, adjacency: Array2<f64>, label: Label, provenance: Provenance) -> Graph {
        let n = adjacency.nrows();
        let degrees = row_degrees(&adjacency);
        Graph {
            id,
            adjacency,
            node_features: Array2::zeros((n, 0)),
            degrees,
            label,
            provenance,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn num_edges(&self) -> usize {
        let twice: u64 = self.degrees.iter().map(|&d| u64::from(d)).sum();
        (twice / 2) as usize
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    /// Neighbor lists in ascending order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        self.adjacency
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &a)| a != 0.0)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect()
    }

    /// Relabel nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n, "permutation length must equal node count");
        let adjacency = Array2::from_shape_fn((n, n), |(i, j)| self.adjacency[[perm[i], perm[j]]]);
        let node_features = Array2::from_shape_fn(self.node_features.dim(), |(i, j)| {
            self.node_features[[perm[i], j]]
        });
        let degrees = perm.iter().map(|&p| self.degrees[p]).collect();
        Graph {
            id: self.id,
            adjacency,
            node_features,
            degrees,
            label: self.label,
            provenance: self.provenance,
        }
    }
}

pub(crate) fn row_degrees(adjacency: &Array2<f64>) -> Vec<u32> {
    adjacency
        .outer_iter()
        .map(|row| row.iter().filter(|&&a| a != 0.0).count() as u32)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub original_normal: usize,
    pub original_abnormal: usize,
    pub generated_normal: usize,
    pub generated_abnormal: usize,
}

impl ClassCounts {
    pub fn normal(&self) -> usize {
        self.original_normal + self.generated_normal
    }

    pub fn abnormal(&self) -> usize {
        self.original_abnormal + self.generated_abnormal
    }

    pub fn generated(&self) -> usize {
        self.generated_normal + self.generated_abnormal
    }

    pub fn tally<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> ClassCounts {
        let mut c = ClassCounts::default();
        for g in graphs {
            match (g.provenance, g.label) {
                (Provenance::Generated, Label::Normal) => c.generated_normal += 1,
                (Provenance::Generated, Label::Abnormal) => c.generated_abnormal += 1,
                (_, Label::Normal) => c.original_normal += 1,
                (_, Label::Abnormal) => c.original_abnormal += 1,
            }
        }
        c
    }
}

/// An ordered collection of graphs sharing one feature space and padding size.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub n_max: usize,
    pub feature_mode: FeatureMode,
}

impl GraphDataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs.first().map_or(0, Graph::feature_dim)
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::tally(&self.graphs)
    }

    /// Class with fewer original members; ties resolve to abnormal.
    pub fn minority(&self) -> Label {
        let c = self.counts();
        if c.original_normal < c.original_abnormal {
            Label::Normal
        } else {
            Label::Abnormal
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Graph> {
        indices.iter().map(|&i| self.graphs[i].clone()).collect()
    }
}

/// Zero-padded fixed-size stack of graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub adjacency_stack: Array3<f64>,
    pub feature_stack: Array3<f64>,
    pub degree_stack: Array3<f64>,
    pub node_mask: Array2<u8>,
    pub labels: Vec<Label>,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn n_max(&self) -> usize {
        self.node_mask.ncols()
    }

    /// Number of real nodes of graph `b`.
    pub fn node_count(&self, b: usize) -> usize {
        self.node_mask.row(b).iter().map(|&m| m as usize).sum()
    }
}

pub fn pad_batch(graphs: &[Graph], n_max: usize) -> Result<PaddedBatch> {
    let batch = graphs.len();
    let h = graphs.first().map_or(0, Graph::feature_dim);
    let mut adjacency_stack = Array3::zeros((batch, n_max, n_max));
    let mut feature_stack = Array3::zeros((batch, n_max, h));
    let mut degree_stack = Array3::zeros((batch, n_max, 1));
    let mut node_mask = Array2::zeros((batch, n_max));
    for (b, g) in graphs.iter().enumerate() {
        let n = g.num_nodes();
        if n > n_max {
            return Err(Error::Size(format!(
                "graph at index {b} has {n} nodes, exceeding n_max = {n_max}"
            )));
        }
        if g.feature_dim() != h || g.node_features.nrows() != n {
            return Err(Error::Shape(format!(
                "graph at index {b} has features {:?}, expected {n}x{h}",
                g.node_features.dim()
            )));
        }
        adjacency_stack.slice_mut(s![b, ..n, ..n]).assign(&g.adjacency);
        feature_stack.slice_mut(s![b, ..n, ..]).assign(&g.node_features);
        for (i, &d) in g.degrees.iter().enumerate() {
            degree_stack[[b, i, 0]] = f64::from(d);
            node_mask[[b, i]] = 1;
        }
    }
    Ok(PaddedBatch {
        adjacency_stack,
        feature_stack,
        degree_stack,
        node_mask,
        labels: graphs.iter().map(|g| g.label).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold split over original graphs.
///
/// Each class is shuffled independently, the shuffled class lists are
/// concatenated and dealt round-robin into folds, so every fold holds each
/// class within one sample of its proportional share.
pub fn stratified_kfold(dataset: &GraphDataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if dataset.graphs.iter().any(|g| g.provenance == Provenance::Generated) {
        return Err(Error::Config(
            "fold splitting requires original graphs only".to_string(),
        ));
    }
    if dataset.len() < k {
        return Err(Error::Config(format!("{} graphs cannot fill {k} folds", dataset.len())));
    }
    let mut rng = seed::rng(seed);
    let mut dealt = Vec::with_capacity(dataset.len());
    for class in [Label::Normal, Label::Abnormal] {
        let mut members: Vec<usize> = dataset
            .graphs
            .iter()
            .enumerate()
            .filter(|(_, g)| g.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::Config(format!("class {class:?} has no members")));
        }
        if members.len() < k {
            log::warn!("class {class:?} has {} members, fewer than k = {k}; some folds test none of it", members.len());
        }
        members.shuffle(&mut rng);
        dealt.extend(members);
    }
    let mut tests = vec![Vec::new(); k];
    for (pos, idx) in dealt.into_iter().enumerate() {
        tests[pos % k].push(idx);
    }
    let n = dataset.len();
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let mut in_test = vec![false; n];
            for &i in &test {
                in_test[i] = true;
            }
            let train = (0..n).filter(|&i| !in_test[i]).collect();
            Fold { train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn triangle() -> Graph {
        Graph::from_edges(0, 3, &[(0, 1), (1, 2), (0, 2)], Label::Normal).unwrap()
    }

    fn dataset(labels: &[Label]) -> GraphDataset {
        let graphs = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Graph::from_edges(i, 2, &[(0, 1)], l).unwrap())
            .collect();
        GraphDataset {
            name: "toy".into(),
            graphs,
            n_max: 2,
            feature_mode: FeatureMode::Identity,
        }
    }

    #[test]
    fn edges_are_symmetrized_and_loops_dropped() {
        let g = Graph::from_edges(0, 3, &[(0, 1), (1, 0), (2, 2), (1, 2)], Label::Normal).unwrap();
        assert_eq!(g.adjacency, array![[0., 1., 0.], [1., 0., 1.], [0., 1., 0.]]);
        assert_eq!(g.degrees, vec![1, 2, 1]);
        assert_eq!(g.num_edges(), 2);
    }

    #[test]
    fn pad_triangle_into_four() {
        let b = pad_batch(&[triangle()], 4).unwrap();
        let a = b.adjacency_stack.slice(s![0, .., ..]).to_owned();
        assert_eq!(a.slice(s![..3, ..3]), triangle().adjacency);
        assert!(a.row(3).iter().all(|&x| x == 0.0));
        assert!(a.column(3).iter().all(|&x| x == 0.0));
        assert_eq!(b.node_count(0), 3);
    }

    #[test]
    fn pad_empty_list() {
        let b = pad_batch(&[], 5).unwrap();
        assert_eq!(b.batch_size(), 0);
        assert_eq!(b.adjacency_stack.len(), 0);
        assert_eq!(b.feature_stack.len(), 0);
    }

    #[test]
    fn pad_mask_two_graphs() {
        let g2 = Graph::from_edges(0, 2, &[(0, 1)], Label::Normal).unwrap();
        let b = pad_batch(&[g2, triangle()], 3).unwrap();
        assert_eq!(b.node_mask, array![[1u8, 1, 0], [1, 1, 1]]);
    }

    #[test]
    fn pad_rejects_oversized_graph() {
        let err = pad_batch(&[triangle(), triangle()], 2).unwrap_err();
        assert!(err.to_string().contains("index 0"), "{err}");
    }

    #[test]
    fn kfold_ten_graphs() {
        use Label::*;
        let ds = dataset(&[Normal, Normal, Normal, Normal, Normal, Normal, Abnormal, Abnormal, Abnormal, Abnormal]);
        let folds = stratified_kfold(&ds, 5, 3).unwrap();
        let mut abn_total = 0;
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            let abn = f.test.iter().filter(|&&i| ds.graphs[i].label == Abnormal).count();
            assert!(abn <= 1);
            abn_total += abn;
            assert_eq!(f.train.len() + f.test.len(), 10);
        }
        assert_eq!(abn_total, 4);
    }

    #[test]
    fn kfold_exact_two() {
        use Label::*;
        let ds = dataset(&[Normal, Abnormal, Normal, Abnormal]);
        for f in stratified_kfold(&ds, 2, 11).unwrap() {
            let abn = f.test.iter().filter(|&&i| ds.graphs[i].label == Abnormal).count();
            assert_eq!((f.test.len(), abn), (2, 1));
        }
    }

    #[test]
    fn kfold_is_deterministic() {
        use Label::*;
        let ds = dataset(&[Normal, Abnormal, Normal, Abnormal, Normal, Normal, Abnormal]);
        assert_eq!(stratified_kfold(&ds, 3, 9).unwrap(), stratified_kfold(&ds, 3, 9).unwrap());
    }

    #[test]
    fn kfold_rejects_degenerate_inputs() {
        use Label::*;
        let ds = dataset(&[Normal, Normal, Normal]);
        assert!(matches!(stratified_kfold(&ds, 2, 0), Err(Error::Config(_))));
        let ds = dataset(&[Normal, Abnormal]);
        assert!(matches!(stratified_kfold(&ds, 1, 0), Err(Error::Config(_))));
        assert!(matches!(stratified_kfold(&ds, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn permuted_graph_keeps_degree_consistency() {
        let g = Graph::from_edges(0, 4, &[(0, 1), (1, 2), (2, 3)], Label::Abnormal).unwrap();
        let p = g.permuted(&[3, 1, 0, 2]);
        assert_eq!(p.degrees, row_degrees(&p.adjacency));
        assert_eq!(p.num_edges(), 3);
    }
}
