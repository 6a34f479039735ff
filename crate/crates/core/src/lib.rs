//! Graph-level anomaly detection with counterfactual class balancing.
//!
//! Graphs are loaded from TU-format text files, the minority class of each
//! training split is filled up with counterfactual samples derived from
//! majority-class graphs, and a dual-branch GCN detector with adaptive
//! node weighting is trained with a class-weighted composite loss.

pub mod config;
pub mod counterfactual;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod gcn;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod seed;
pub mod sparse;
pub mod tape;
pub mod tu;

pub use error::{Error, Result};
pub use graph::{FeatureMode, Fold, Graph, GraphDataset, Label, Provenance};
