//! Reader and writer for the TU benchmark text layout, plus structural
//! node-feature builders.
//!
//! A dataset `DS` lives in a directory holding
//! `DS_A.txt` (one `u, v` pair of 1-indexed global node ids per line),
//! `DS_graph_indicator.txt` (line `i` is the 1-indexed graph of node `i`) and
//! `DS_graph_labels.txt` (one integer label per graph).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeatureMode, Graph, GraphDataset, Label};

pub const DEFAULT_NUM_BINS: usize = 10;
pub const LDP_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
    pub num_bins: usize,
    /// Replace structural features with one-hot node labels when the
    /// dataset was loaded with its `DS_node_labels.txt`.
    #[serde(default)]
    pub use_node_labels: bool,
}

impl FeatureConfig {
    pub fn new(mode: FeatureMode) -> Self {
        FeatureConfig {
            mode,
            num_bins: DEFAULT_NUM_BINS,
            use_node_labels: false,
        }
    }

    /// Feature width produced for a dataset padded to `n_max`.
    pub fn dim(&self, n_max: usize) -> usize {
        match self.mode {
            FeatureMode::Identity => n_max,
            FeatureMode::DegreeBinning => self.num_bins,
            FeatureMode::Ldp => LDP_DIM,
        }
    }
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig::new(FeatureMode::Identity)
    }
}

/// A graph as read from disk, before feature construction.
#[derive(Debug, Clone)]
pub struct RawGraph {
    pub graph: Graph,
    pub raw_label: i64,
    pub node_labels: Option<Vec<i64>>,
}

#[derive(Debug, Clone)]
pub struct TuDataset {
    pub name: String,
    pub graphs: Vec<RawGraph>,
}

impl TuDataset {
    pub fn max_nodes(&self) -> usize {
        self.graphs.iter().map(|g| g.graph.num_nodes()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub anomaly_label: i64,
    pub node_labels: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            anomaly_label: 1,
            node_labels: false,
        }
    }
}

fn dataset_prefix(dir: &Path) -> Result<String> {
    if let Some(name) = dir.file_name().and_then(|n| n.to_str()) {
        if dir.join(format!("{name}_A.txt")).is_file() {
            return Ok(name.to_string());
        }
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file = entry.file_name();
        if let Some(stem) = file.to_str().and_then(|f| f.strip_suffix("_A.txt")) {
            found.push(stem.to_string());
        }
    }
    found.sort();
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => {
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("DS");
            Err(Error::io(
                dir.join(format!("{name}_A.txt")),
                std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
            ))
        }
        _ => Err(Error::Config(format!(
            "{} holds several datasets: {}",
            dir.display(),
            found.join(", ")
        ))),
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_int(path: &Path, line: usize, s: &str) -> Result<i64> {
    s.trim().parse::<i64>().map_err(|_| Error::Format {
        file: path.to_path_buf(),
        line,
        message: format!("expected an integer, found {s:?}"),
    })
}

fn format_err(path: &Path, line: usize, message: String) -> Error {
    Error::Format {
        file: path.to_path_buf(),
        line,
        message,
    }
}

/// Load a TU dataset. Graphs whose raw label equals `anomaly_label` are
/// abnormal, all others normal. Edges are symmetrized; self-loops and
/// duplicates are dropped.
pub fn load_tu_dataset(dir: impl AsRef<Path>, options: LoadOptions) -> Result<TuDataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(dir.display().to_string()));
    }
    let name = dataset_prefix(dir)?;
    let file = |suffix: &str| -> PathBuf { dir.join(format!("{name}_{suffix}.txt")) };

    let labels_path = file("graph_labels");
    let raw_labels = read_lines(&labels_path)?
        .into_iter()
        .map(|(ln, s)| parse_int(&labels_path, ln, &s))
        .collect::<Result<Vec<_>>>()?;
    let num_graphs = raw_labels.len();

    let indicator_path = file("graph_indicator");
    let indicator_lines = read_lines(&indicator_path)?;
    // node (0-based global) -> (graph, local index)
    let mut node_home = Vec::with_capacity(indicator_lines.len());
    let mut sizes = vec![0usize; num_graphs];
    for (ln, s) in &indicator_lines {
        let g = parse_int(&indicator_path, *ln, s)?;
        if g < 1 || g as usize > num_graphs {
            return Err(format_err(
                &indicator_path,
                *ln,
                format!("node references graph {g}, but only {num_graphs} graphs are labeled"),
            ));
        }
        let g = (g - 1) as usize;
        node_home.push((g, sizes[g]));
        sizes[g] += 1;
    }

    let edges_path = file("A");
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (ln, s) in read_lines(&edges_path)? {
        let mut parts = s.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format_err(&edges_path, ln, format!("expected `u, v`, found {s:?}")));
        };
        let u = parse_int(&edges_path, ln, a)?;
        let v = parse_int(&edges_path, ln, b)?;
        let lookup = |id: i64| -> Result<(usize, usize)> {
            if id < 1 || id as usize > node_home.len() {
                return Err(format_err(
                    &edges_path,
                    ln,
                    format!("node id {id} outside 1..={}", node_home.len()),
                ));
            }
            Ok(node_home[(id - 1) as usize])
        };
        let (gu, lu) = lookup(u)?;
        let (gv, lv) = lookup(v)?;
        if gu != gv {
            return Err(format_err(
                &edges_path,
                ln,
                format!("edge {u}, {v} joins graphs {} and {}", gu + 1, gv + 1),
            ));
        }
        edges[gu].push((lu, lv));
    }

    let mut node_labels: Option<Vec<Vec<i64>>> = None;
    if options.node_labels {
        let path = file("node_labels");
        let lines = read_lines(&path)?;
        if lines.len() != node_home.len() {
            return Err(format_err(
                &path,
                lines.len(),
                format!("{} node labels for {} nodes", lines.len(), node_home.len()),
            ));
        }
        let mut per_graph: Vec<Vec<i64>> = sizes.iter().map(|&n| vec![0; n]).collect();
        for ((ln, s), &(g, l)) in lines.iter().zip(&node_home) {
            per_graph[g][l] = parse_int(&path, *ln, s)?;
        }
        node_labels = Some(per_graph);
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (i, raw_label) in raw_labels.into_iter().enumerate() {
        let label = if raw_label == options.anomaly_label {
            Label::Abnormal
        } else {
            Label::Normal
        };
        let graph = Graph::from_edges(i, sizes[i], &edges[i], label)?;
        graphs.push(RawGraph {
            graph,
            raw_label,
            node_labels: node_labels.as_ref().map(|nl| nl[i].clone()),
        });
    }
    Ok(TuDataset { name, graphs })
}

fn identity_features(n: usize, n_max: usize) -> Array2<f64> {
    let mut x = Array2::zeros((n, n_max));
    for i in 0..n {
        x[[i, i]] = 1.0;
    }
    x
}

/// Bin index of `degree` among `num_bins` equal-width bins over
/// `[0, max_degree]`, top edge inclusive.
pub fn degree_bin(degree: u32, max_degree: u32, num_bins: usize) -> usize {
    if max_degree == 0 {
        return 0;
    }
    let bin = (u64::from(degree) * num_bins as u64 / u64::from(max_degree)) as usize;
    bin.min(num_bins - 1)
}

fn degree_bin_features(g: &Graph, max_degree: u32, num_bins: usize) -> Array2<f64> {
    let mut x = Array2::zeros((g.num_nodes(), num_bins));
    for (i, &d) in g.degrees.iter().enumerate() {
        x[[i, degree_bin(d, max_degree, num_bins)]] = 1.0;
    }
    x
}

/// Local degree profile: own degree, then min, max, mean and population
/// standard deviation of the neighbors' degrees.
pub fn ldp_features(g: &Graph) -> Array2<f64> {
    let mut x = Array2::zeros((g.num_nodes(), LDP_DIM));
    for (i, nbrs) in g.neighbors().into_iter().enumerate() {
        x[[i, 0]] = f64::from(g.degrees[i]);
        if nbrs.is_empty() {
            continue;
        }
        let ds: Vec<f64> = nbrs.iter().map(|&j| f64::from(g.degrees[j])).collect();
        let k = ds.len() as f64;
        let mean = ds.iter().sum::<f64>() / k;
        let var = ds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / k;
        x[[i, 1]] = ds.iter().copied().fold(f64::INFINITY, f64::min);
        x[[i, 2]] = ds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        x[[i, 3]] = mean;
        x[[i, 4]] = var.sqrt();
    }
    x
}

fn node_label_features(raw: &[RawGraph]) -> Result<Vec<Array2<f64>>> {
    let mut vocab = BTreeMap::new();
    for r in raw {
        let labels = r
            .node_labels
            .as_ref()
            .ok_or_else(|| Error::Config("node labels requested but not loaded".into()))?;
        for &l in labels {
            let next = vocab.len();
            vocab.entry(l).or_insert(next);
        }
    }
    // Re-index in sorted label order so the encoding does not depend on file order.
    for (i, v) in vocab.values_mut().enumerate() {
        *v = i;
    }
    let width = vocab.len().max(1);
    Ok(raw
        .iter()
        .map(|r| {
            let labels = r.node_labels.as_deref().unwrap_or(&[]);
            let mut x = Array2::zeros((labels.len(), width));
            for (i, l) in labels.iter().enumerate() {
                x[[i, vocab[l]]] = 1.0;
            }
            x
        })
        .collect())
}

/// Attach node features to every raw graph and assemble the dataset.
pub fn build_features(
    name: &str,
    raw: &[RawGraph],
    config: FeatureConfig,
    n_max: usize,
) -> Result<GraphDataset> {
    if let Some((i, r)) = raw.iter().enumerate().find(|(_, r)| r.graph.num_nodes() > n_max) {
        return Err(Error::Size(format!(
            "graph {i} has {} nodes, exceeding n_max = {n_max}",
            r.graph.num_nodes()
        )));
    }
    if config.mode == FeatureMode::DegreeBinning && config.num_bins == 0 {
        return Err(Error::Config("num_bins must be positive".into()));
    }
    let max_degree = raw
        .iter()
        .flat_map(|r| r.graph.degrees.iter().copied())
        .max()
        .unwrap_or(0);
    let label_features = if config.use_node_labels {
        Some(node_label_features(raw)?)
    } else {
        None
    };
    let graphs = raw
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut g = r.graph.clone();
            g.node_features = match &label_features {
                Some(lf) => lf[i].clone(),
                None => match config.mode {
                    FeatureMode::Identity => identity_features(g.num_nodes(), n_max),
                    FeatureMode::DegreeBinning => degree_bin_features(&g, max_degree, config.num_bins),
                    FeatureMode::Ldp => ldp_features(&g),
                },
            };
            g
        })
        .collect();
    Ok(GraphDataset {
        name: name.to_string(),
        graphs,
        n_max,
        feature_mode: config.mode,
    })
}

/// Load a TU directory and build features padded to the dataset's largest graph.
pub fn load_dataset(dir: impl AsRef<Path>, options: LoadOptions, config: FeatureConfig) -> Result<GraphDataset> {
    let tu = load_tu_dataset(dir, options)?;
    build_features(&tu.name, &tu.graphs, config, tu.max_nodes())
}

/// Write graphs in TU layout under `dir` with prefix `name`. Labels are
/// written as 0 (normal) / 1 (abnormal); node features go to
/// `name_node_attributes.txt`.
pub fn write_tu_dataset(dir: impl AsRef<Path>, name: &str, graphs: &[Graph]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let open = |suffix: &str| -> Result<(PathBuf, BufWriter<fs::File>)> {
        let path = dir.join(format!("{name}_{suffix}.txt"));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, BufWriter::new(f)))
    };
    let (a_path, mut a) = open("A")?;
    let (i_path, mut ind) = open("graph_indicator")?;
    let (l_path, mut lab) = open("graph_labels")?;
    let (x_path, mut attr) = open("node_attributes")?;
    let mut offset = 0usize;
    for (gi, g) in graphs.iter().enumerate() {
        let n = g.num_nodes();
        for u in 0..n {
            writeln!(ind, "{}", gi + 1).map_err(|e| Error::io(&i_path, e))?;
            let row: Vec<String> = g.node_features.row(u).iter().map(|v| format!("{v}")).collect();
            writeln!(attr, "{}", row.join(", ")).map_err(|e| Error::io(&x_path, e))?;
            for v in 0..n {
                if g.adjacency[[u, v]] != 0.0 {
                    writeln!(a, "{}, {}", offset + u + 1, offset + v + 1).map_err(|e| Error::io(&a_path, e))?;
                }
            }
        }
        writeln!(lab, "{}", g.label.as_u8()).map_err(|e| Error::io(&l_path, e))?;
        offset += n;
    }
    for (p, w) in [(a_path, a), (i_path, ind), (l_path, lab), (x_path, attr)] {
        w.into_inner()
            .map_err(|e| Error::io(&p, e.into_error()))?
            .sync_all()
            .map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
