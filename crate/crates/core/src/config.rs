//! Experiment configuration, dataset-specific defaults and the flat
//! `key = value` file format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counterfactual::AugmentConfig;
use crate::detector::{Ablation, Architecture, LossSwitches, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::FeatureMode;
use crate::tu::{FeatureConfig, LoadOptions, DEFAULT_NUM_BINS};

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Switches {
    pub no_asgm: bool,
    pub no_awlm: bool,
    pub no_gcn_d: bool,
    pub no_gcn_x: bool,
    pub no_loss_nor: bool,
    pub no_loss_abn: bool,
}

/// Variant names accepted by `--variant`, `full` first.
pub const VARIANTS: [&str; 7] = [
    "full",
    "no_asgm",
    "no_awlm",
    "no_gcn_d",
    "no_gcn_x",
    "no_loss_nor",
    "no_loss_abn",
];

impl Switches {
    pub fn variant(name: &str) -> Result<Switches> {
        let mut s = Switches::default();
        match name {
            "full" => {}
            "no_asgm" => s.no_asgm = true,
            "no_awlm" => s.no_awlm = true,
            "no_gcn_d" => s.no_gcn_d = true,
            "no_gcn_x" => s.no_gcn_x = true,
            "no_loss_nor" => s.no_loss_nor = true,
            "no_loss_abn" => s.no_loss_abn = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?}; expected one of {}",
                    VARIANTS.join(", ")
                )))
            }
        }
        Ok(s)
    }

    /// Name of the active switches joined by `+`, or `full`.
    pub fn name(&self) -> String {
        let flags = [
            (self.no_asgm, "no_asgm"),
            (self.no_awlm, "no_awlm"),
            (self.no_gcn_d, "no_gcn_d"),
            (self.no_gcn_x, "no_gcn_x"),
            (self.no_loss_nor, "no_loss_nor"),
            (self.no_loss_abn, "no_loss_abn"),
        ];
        let on: Vec<&str> = flags.iter().filter(|f| f.0).map(|f| f.1).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            no_awlm: self.no_awlm,
            no_gcn_d: self.no_gcn_d,
            no_gcn_x: self.no_gcn_x,
        }
    }

    pub fn loss(&self) -> LossSwitches {
        LossSwitches {
            no_loss_nor: self.no_loss_nor,
            no_loss_abn: self.no_loss_abn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub data_dir: PathBuf,
    pub feature_mode: FeatureMode,
    pub num_bins: usize,
    pub anomaly_label: i64,
    pub node_labels: bool,
    pub folds: usize,
    pub seed: u64,
    pub beta: f64,
    pub lr: f64,
    pub cf_lr: f64,
    pub epochs: usize,
    pub cf_epochs: usize,
    pub sigma: f64,
    pub tau: f64,
    pub hidden_dim: usize,
    pub branch_dim: usize,
    pub reduce_dim: usize,
    pub threshold: f64,
    pub switches: Switches,
}

/// β per dataset: 0.6 for BZR, 1.4 for DHFR, 1.2 otherwise.
pub fn default_beta(dataset: &str) -> f64 {
    match dataset.to_ascii_uppercase().as_str() {
        "BZR" => 0.6,
        "DHFR" => 1.4,
        _ => 1.2,
    }
}

/// Detector learning rate per dataset: 1e-4 for AIDS and NCI1, 1e-3 otherwise.
pub fn default_lr(dataset: &str) -> f64 {
    match dataset.to_ascii_uppercase().as_str() {
        "AIDS" | "NCI1" => 1e-4,
        _ => 1e-3,
    }
}

impl ExperimentConfig {
    pub fn for_dataset(dataset: &str) -> Self {
        ExperimentConfig {
            dataset: dataset.to_string(),
            data_dir: PathBuf::from("data"),
            feature_mode: FeatureMode::Identity,
            num_bins: DEFAULT_NUM_BINS,
            anomaly_label: 1,
            node_labels: false,
            folds: 5,
            seed: 0,
            beta: default_beta(dataset),
            lr: default_lr(dataset),
            cf_lr: 0.01,
            epochs: 100,
            cf_epochs: 100,
            sigma: 0.5,
            tau: 0.5,
            hidden_dim: 256,
            branch_dim: 128,
            reduce_dim: 64,
            threshold: 0.5,
            switches: Switches::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.dataset.is_empty() {
            return err("dataset name is empty".into());
        }
        if self.folds < 2 {
            return err(format!("folds must be at least 2, got {}", self.folds));
        }
        for (name, v) in [("sigma", self.sigma), ("tau", self.tau), ("threshold", self.threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return err(format!("{name} must lie strictly inside (0, 1), got {v}"));
            }
        }
        for (name, v) in [("lr", self.lr), ("cf_lr", self.cf_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return err(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.reduce_dim == 0 || self.hidden_dim == 0 || self.branch_dim == 0 {
            return err("layer widths must be positive".into());
        }
        if self.feature_mode == FeatureMode::DegreeBinning && self.num_bins == 0 {
            return err("num_bins must be positive".into());
        }
        if self.switches.no_gcn_x && self.switches.no_gcn_d {
            return err("cannot drop both GCN branches".into());
        }
        Ok(())
    }

    /// Stable short hash of everything that influences results. The data
    /// directory is excluded so that moving the data keeps run paths.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = PathBuf::new();
        let canonical = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Directory holding the TU files: `<data_dir>/<DS>`, its `raw/`
    /// subdirectory, or `data_dir` itself when it already holds them.
    pub fn dataset_dir(&self) -> PathBuf {
        let base = self.data_dir.join(&self.dataset);
        let marker = format!("{}_A.txt", self.dataset);
        if base.join(&marker).is_file() {
            return base;
        }
        if base.join("raw").join(&marker).is_file() {
            return base.join("raw");
        }
        if self.data_dir.join(&marker).is_file() {
            return self.data_dir.clone();
        }
        base
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            anomaly_label: self.anomaly_label,
            node_labels: self.node_labels,
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            mode: self.feature_mode,
            num_bins: self.num_bins,
            use_node_labels: self.node_labels,
        }
    }

    pub fn architecture(&self, feature_dim: usize) -> Architecture {
        Architecture {
            feature_dim,
            hidden_dim: self.hidden_dim,
            branch_dim: self.branch_dim,
            reduce_dim: self.reduce_dim,
        }
    }

    pub fn augment_config(&self, seed: u64) -> AugmentConfig {
        AugmentConfig {
            epochs: self.cf_epochs,
            lr: self.cf_lr,
            sigma: self.sigma,
            tau: self.tau,
            seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            beta: self.beta,
            switches: self.switches.loss(),
        }
    }

    /// Set one option by its file/flag name (dashes and underscores agree).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("invalid {what} for {key}: {value:?}"));
        macro_rules! parse {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad(stringify!($t)))?
            };
        }
        match key.as_str() {
            "dataset" => self.dataset = value.to_string(),
            "data_dir" => self.data_dir = PathBuf::from(value),
            "feature_mode" => {
                self.feature_mode = FeatureMode::parse(value).ok_or_else(|| bad("feature mode"))?
            }
            "num_bins" => self.num_bins = parse!(usize),
            "anomaly_label" => self.anomaly_label = parse!(i64),
            "node_labels" => self.node_labels = parse!(bool),
            "folds" => self.folds = parse!(usize),
            "seed" => self.seed = parse!(u64),
            "beta" => self.beta = parse!(f64),
            "lr" => self.lr = parse!(f64),
            "cf_lr" => self.cf_lr = parse!(f64),
            "epochs" => self.epochs = parse!(usize),
            "cf_epochs" => self.cf_epochs = parse!(usize),
            "sigma" => self.sigma = parse!(f64),
            "tau" => self.tau = parse!(f64),
            "hidden_dim" => self.hidden_dim = parse!(usize),
            "branch_dim" => self.branch_dim = parse!(usize),
            "reduce_dim" => self.reduce_dim = parse!(usize),
            "threshold" => self.threshold = parse!(f64),
            "variant" => self.switches = Switches::variant(value)?,
            "no_asgm" => self.switches.no_asgm = parse!(bool),
            "no_awlm" => self.switches.no_awlm = parse!(bool),
            "no_gcn_d" => self.switches.no_gcn_d = parse!(bool),
            "no_gcn_x" => self.switches.no_gcn_x = parse!(bool),
            "no_loss_nor" => self.switches.no_loss_nor = parse!(bool),
            "no_loss_abn" => self.switches.no_loss_abn = parse!(bool),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }
}

/// Parse `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format {
                file: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, found {line:?}"),
            });
        };
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, path)
}
