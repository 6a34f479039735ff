//! Synthetic TU datasets for integration tests.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gladcf::graph::{FeatureMode, Graph, GraphDataset, Label};
use gladcf::tu::{build_features, FeatureConfig, RawGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Edge list of a random tree plus chords; abnormal graphs also carry a
/// 5-clique.
pub fn synthetic_edges(rng: &mut ChaCha8Rng, abnormal: bool) -> (usize, Vec<(usize, usize)>) {
    let n = rng.gen_range(8..=16);
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.gen_range(0..v), v));
    }
    for _ in 0..rng.gen_range(0..3) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    if abnormal {
        let base = rng.gen_range(0..n - 5);
        for i in 0..5 {
            for j in i + 1..5 {
                edges.push((base + i, base + j));
            }
        }
    }
    (n, edges)
}

pub fn synthetic_graphs(normal: usize, abnormal: usize, seed: u64) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::new();
    for i in 0..normal + abnormal {
        // Interleave classes so files do not sort by label.
        let is_abn = (i * abnormal) / (normal + abnormal) != ((i + 1) * abnormal) / (normal + abnormal);
        let (n, edges) = synthetic_edges(&mut rng, is_abn);
        let label = if is_abn { Label::Abnormal } else { Label::Normal };
        graphs.push(Graph::from_edges(i, n, &edges, label).unwrap());
    }
    graphs
}

pub fn synthetic_dataset(normal: usize, abnormal: usize, seed: u64, mode: FeatureMode) -> GraphDataset {
    let raw: Vec<RawGraph> = synthetic_graphs(normal, abnormal, seed)
        .into_iter()
        .map(|g| RawGraph {
            raw_label: i64::from(g.label.as_u8()),
            graph: g,
            node_labels: None,
        })
        .collect();
    let n_max = raw.iter().map(|r| r.graph.num_nodes()).max().unwrap();
    build_features("SYN", &raw, FeatureConfig::new(mode), n_max).unwrap()
}

/// Write `<root>/<name>/<name>_*.txt` and return `<root>`.
pub fn write_synthetic_tu(root: &Path, name: &str, normal: usize, abnormal: usize, seed: u64) -> PathBuf {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let graphs = synthetic_graphs(normal, abnormal, seed);
    let (mut a, mut ind, mut lab) = (String::new(), String::new(), String::new());
    let mut offset = 0;
    for (gi, g) in graphs.iter().enumerate() {
        let n = g.num_nodes();
        for u in 0..n {
            writeln!(ind, "{}", gi + 1).unwrap();
            for v in 0..n {
                if g.adjacency[[u, v]] != 0.0 {
                    writeln!(a, "{}, {}", offset + u + 1, offset + v + 1).unwrap();
                }
            }
        }
        writeln!(lab, "{}", g.label.as_u8()).unwrap();
        offset += n;
    }
    std::fs::write(dir.join(format!("{name}_A.txt")), a).unwrap();
    std::fs::write(dir.join(format!("{name}_graph_indicator.txt")), ind).unwrap();
    std::fs::write(dir.join(format!("{name}_graph_labels.txt")), lab).unwrap();
    root.to_path_buf()
}
