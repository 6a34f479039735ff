//! Cross-validated experiment protocol: per-fold augmentation, detector
//! training, AUC evaluation, β sweeps and score histograms.
//!
//! Run artifacts live under `<out>/runs/<dataset>/<config-hash>/`, one
//! `fold<i>/` directory per fold.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::counterfactual::{self, AugmentManifest, MANIFEST_VERSION};
use crate::detector::{self, DetectorParams};
use crate::error::{Error, Result};
use crate::graph::{stratified_kfold, ClassCounts, Fold, Graph, GraphDataset, Label, Provenance};
use crate::metrics::{compute_auc, mean, std_dev};
use crate::seed;
use crate::tu;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub fold: usize,
    pub graph_id: usize,
    pub label: Label,
    pub provenance: Provenance,
    pub score: f64,
    pub logit: f64,
    pub decision: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub auc: f64,
    pub train_counts: ClassCounts,
    pub test_counts: ClassCounts,
    pub augment_loss: Vec<f64>,
    pub detector_loss: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub fold_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub folds: Vec<FoldReport>,
    pub scores: Vec<ScoreRecord>,
    pub timings: Timings,
}

impl EvalReport {
    pub fn without_timings(&self) -> EvalReport {
        EvalReport {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &serde_json::to_string_pretty(self)?)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<EvalReport> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport = serde_json::from_str(&text)?;
        if report.format_version != REPORT_VERSION {
            return Err(Error::Config(format!(
                "report version {} unsupported (expected {REPORT_VERSION})",
                report.format_version
            )));
        }
        Ok(report)
    }
}

pub const SCORES_HEADER: &str = "graph_id,label,provenance,score,decision";

pub fn scores_csv(records: &[ScoreRecord]) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.graph_id,
            r.label.as_u8(),
            r.provenance.as_str(),
            r.score,
            r.decision
        );
    }
    out
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// `<out>/runs/<dataset>/<config-hash>`.
pub fn run_dir(out: &Path, config: &ExperimentConfig) -> PathBuf {
    out.join("runs").join(&config.dataset).join(config.config_hash())
}

pub fn load_experiment_dataset(config: &ExperimentConfig) -> Result<GraphDataset> {
    let dir = config.dataset_dir();
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(format!(
            "{} (looked in {})",
            config.dataset,
            dir.display()
        )));
    }
    tu::load_dataset(&dir, config.load_options(), config.feature_config())
}

/// Fold splits depend only on the master seed, so every variant and β
/// value sees the same folds.
pub fn folds_for(dataset: &GraphDataset, config: &ExperimentConfig) -> Result<Vec<Fold>> {
    stratified_kfold(dataset, config.folds, seed::derive(config.seed, "folds", 0))
}

/// Everything a single fold produced.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub report: FoldReport,
    pub scores: Vec<ScoreRecord>,
    pub params: DetectorParams,
    pub generated: Vec<Graph>,
    /// Dataset indices of the seed graph behind each generated graph.
    pub seed_indices: Vec<usize>,
    pub manifest: Option<AugmentManifest>,
    pub seconds: f64,
}

/// Balance, well-formedness and test-set integrity of one augmented fold.
pub fn check_fold_integrity(
    dataset: &GraphDataset,
    fold: &Fold,
    generated: &[Graph],
    seed_indices: &[usize],
) -> Result<()> {
    let fail = |m: String| Err(Error::Config(format!("integrity violation: {m}")));
    if fold.test.iter().any(|&i| dataset.graphs[i].provenance == Provenance::Generated) {
        return fail("generated graph in test fold".into());
    }
    if !generated.is_empty() {
        let counts = ClassCounts::tally(fold.train.iter().map(|&i| &dataset.graphs[i]).chain(generated));
        if counts.normal() != counts.abnormal() {
            return fail(format!("training classes unbalanced: {counts:?}"));
        }
    }
    for (g, &si) in generated.iter().zip(seed_indices) {
        let a = &g.adjacency;
        let n = a.nrows();
        let ok_adj = (0..n).all(|i| {
            a[[i, i]] == 0.0 && (0..n).all(|j| (a[[i, j]] == 0.0 || a[[i, j]] == 1.0) && a[[i, j]] == a[[j, i]])
        });
        if !ok_adj {
            return fail(format!("generated graph from seed {si} has a malformed adjacency"));
        }
        let x = &dataset.graphs[si].node_features;
        if g.node_features.dim() != x.dim()
            || g.node_features.iter().zip(x.iter()).any(|(&v, &o)| v != 0.0 && v != o)
        {
            return fail(format!("generated graph from seed {si} alters feature values"));
        }
    }
    Ok(())
}

/// Run one fold: augment the training split, train, score the test split.
pub fn run_fold(dataset: &GraphDataset, index: usize, fold: &Fold, config: &ExperimentConfig) -> Result<FoldOutcome> {
    let start = Instant::now();
    let master = config.seed;
    let fold_tag = index as u64;
    let mut generated = Vec::new();
    let mut seed_indices = Vec::new();
    let mut manifest = None;
    if !config.switches.no_asgm {
        if let Some(sel) = counterfactual::select_seeds(dataset, &fold.train, seed::derive(master, "select", fold_tag)) {
            let seeds = dataset.subset(&sel.indices);
            let aug = config.augment_config(seed::derive(master, "augment", fold_tag));
            let trained = counterfactual::train_perturbations(&seeds, dataset.n_max, dataset.feature_dim(), &aug)?;
            for g in &seeds {
                generated.push(counterfactual::perturb_graph(&trained.pair, g, sel.minority)?);
            }
            info!(
                "fold {index}: generated {} {:?} graphs (augment loss {:.4} -> {:.4})",
                generated.len(),
                sel.minority,
                trained.loss_trace.first().copied().unwrap_or(f64::NAN),
                trained.loss_trace.last().copied().unwrap_or(f64::NAN)
            );
            manifest = Some(AugmentManifest {
                format_version: MANIFEST_VERSION,
                dataset: dataset.name.clone(),
                config: aug,
                minority_label: sel.minority,
                generated_count: generated.len(),
                seed_graph_ids: seeds.iter().map(|g| g.id).collect(),
                loss_trace: trained.loss_trace,
            });
            seed_indices = sel.indices;
        }
    }
    check_fold_integrity(dataset, fold, &generated, &seed_indices)?;

    let mut train = dataset.subset(&fold.train);
    train.extend(generated.iter().cloned());
    let arch = config.architecture(dataset.feature_dim());
    let mut params = DetectorParams::init(arch, config.switches.ablation(), seed::derive(master, "detector", fold_tag))?;
    let detector_loss = detector::train_detector(&mut params, &train, &config.train_config())?;

    let test = dataset.subset(&fold.test);
    let logits = detector::graph_logits(&params, &test)?;
    let labels: Vec<Label> = test.iter().map(|g| g.label).collect();
    // Logits order graphs exactly like scores but never saturate into ties.
    let auc = compute_auc(&logits, &labels)?;
    let scores: Vec<ScoreRecord> = test
        .iter()
        .zip(&logits)
        .map(|(g, &u)| {
            let score = detector::logit_to_score(u);
            ScoreRecord {
                fold: index,
                graph_id: g.id,
                label: g.label,
                provenance: g.provenance,
                score,
                logit: u,
                decision: detector::decide(&[score], config.threshold)[0],
            }
        })
        .collect();
    info!("fold {index}: AUC {auc:.4}");
    Ok(FoldOutcome {
        report: FoldReport {
            fold: index,
            auc,
            train_counts: ClassCounts::tally(&train),
            test_counts: ClassCounts::tally(&test),
            augment_loss: manifest.as_ref().map(|m| m.loss_trace.clone()).unwrap_or_default(),
            detector_loss,
        },
        scores,
        params,
        generated,
        seed_indices,
        manifest,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Run all folds, `parallel` of them at a time.
pub fn run_folds(dataset: &GraphDataset, config: &ExperimentConfig, parallel: usize) -> Result<Vec<FoldOutcome>> {
    config.validate()?;
    let folds = folds_for(dataset, config)?;
    let wrap = |i: usize, r: Result<FoldOutcome>| {
        r.map_err(|e| Error::Fold {
            fold: i,
            source: Box::new(e),
        })
    };
    if parallel <= 1 {
        return folds
            .iter()
            .enumerate()
            .map(|(i, f)| wrap(i, run_fold(dataset, i, f, config)))
            .collect();
    }
    let mut results: Vec<Option<Result<FoldOutcome>>> = (0..folds.len()).map(|_| None).collect();
    for group in (0..folds.len()).collect::<Vec<_>>().chunks(parallel) {
        std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|&i| {
                    let f = &folds[i];
                    (i, s.spawn(move || run_fold(dataset, i, f, config)))
                })
                .collect();
            for (i, h) in handles {
                let r = h
                    .join()
                    .unwrap_or_else(|_| Err(Error::Config("fold worker panicked".into())));
                results[i] = Some(r);
            }
        });
    }
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| wrap(i, r.expect("every fold ran")))
        .collect()
}

pub fn assemble_report(config: &ExperimentConfig, outcomes: &[FoldOutcome], total_seconds: f64) -> EvalReport {
    let fold_aucs: Vec<f64> = outcomes.iter().map(|o| o.report.auc).collect();
    EvalReport {
        format_version: REPORT_VERSION,
        config_hash: config.config_hash(),
        config: config.clone(),
        mean_auc: mean(&fold_aucs),
        std_auc: std_dev(&fold_aucs),
        fold_aucs,
        folds: outcomes.iter().map(|o| o.report.clone()).collect(),
        scores: outcomes.iter().flat_map(|o| o.scores.iter().cloned()).collect(),
        timings: Timings {
            total_seconds,
            fold_seconds: outcomes.iter().map(|o| o.seconds).collect(),
        },
    }
}

/// Write the report, scores and per-fold checkpoints under `dir`.
pub fn write_run(dir: &Path, report: &EvalReport, outcomes: &[FoldOutcome]) -> Result<()> {
    report.write_json(dir.join("report.json"))?;
    write_file(&dir.join("scores.csv"), &scores_csv(&report.scores))?;
    for o in outcomes {
        let fd = dir.join(format!("fold{}", o.report.fold));
        fs::create_dir_all(&fd).map_err(|e| Error::io(&fd, e))?;
        o.params.save(fd.join("model.json"), &report.config_hash)?;
        write_file(&fd.join("scores.csv"), &scores_csv(&o.scores))?;
        if let Some(m) = &o.manifest {
            write_file(&fd.join("augment_manifest.json"), &serde_json::to_string_pretty(m)?)?;
        }
    }
    Ok(())
}

/// Cross-validate on an already loaded dataset.
pub fn run_cv_on(dataset: &GraphDataset, config: &ExperimentConfig, parallel: usize) -> Result<(EvalReport, Vec<FoldOutcome>)> {
    let start = Instant::now();
    let outcomes = run_folds(dataset, config, parallel)?;
    let report = assemble_report(config, &outcomes, start.elapsed().as_secs_f64());
    Ok((report, outcomes))
}

/// Load the configured dataset and cross-validate it.
pub fn run_cv(config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    let dataset = load_experiment_dataset(config)?;
    Ok(run_cv_on(&dataset, config, 1)?.0)
}

/// Re-score the test folds of a finished run from its checkpoints.
pub fn evaluate_checkpoints(dataset: &GraphDataset, config: &ExperimentConfig, dir: &Path) -> Result<EvalReport> {
    let start = Instant::now();
    let folds = folds_for(dataset, config)?;
    let hash = config.config_hash();
    let mut aucs = Vec::new();
    let mut scores = Vec::new();
    for (i, fold) in folds.iter().enumerate() {
        let (params, stored) = DetectorParams::load(dir.join(format!("fold{i}")).join("model.json"))?;
        if stored != hash {
            return Err(Error::Config(format!(
                "checkpoint for fold {i} belongs to config {stored}, not {hash}"
            )));
        }
        let test = dataset.subset(&fold.test);
        let logits = detector::graph_logits(&params, &test)?;
        let labels: Vec<Label> = test.iter().map(|g| g.label).collect();
        aucs.push(compute_auc(&logits, &labels)?);
        for (g, &u) in test.iter().zip(&logits) {
            let score = detector::logit_to_score(u);
            scores.push(ScoreRecord {
                fold: i,
                graph_id: g.id,
                label: g.label,
                provenance: g.provenance,
                score,
                logit: u,
                decision: detector::decide(&[score], config.threshold)[0],
            });
        }
    }
    Ok(EvalReport {
        format_version: REPORT_VERSION,
        config_hash: hash,
        config: config.clone(),
        mean_auc: mean(&aucs),
        std_auc: std_dev(&aucs),
        folds: folds
            .iter()
            .enumerate()
            .map(|(i, f)| FoldReport {
                fold: i,
                auc: aucs[i],
                train_counts: ClassCounts::tally(f.train.iter().map(|&k| &dataset.graphs[k])),
                test_counts: ClassCounts::tally(f.test.iter().map(|&k| &dataset.graphs[k])),
                augment_loss: Vec::new(),
                detector_loss: Vec::new(),
            })
            .collect(),
        fold_aucs: aucs,
        scores,
        timings: Timings {
            total_seconds: start.elapsed().as_secs_f64(),
            fold_seconds: Vec::new(),
        },
    })
}

/// β values 0.2, 0.4, …, 2.2.
pub fn default_beta_grid() -> Vec<f64> {
    (1..=11).map(|i| f64::from(i) * 0.2).map(|b| (b * 10.0).round() / 10.0).collect()
}

/// One cross-validation per β with everything else fixed.
pub fn sweep_beta(dataset: &GraphDataset, config: &ExperimentConfig, betas: &[f64], parallel: usize) -> Result<Vec<EvalReport>> {
    if betas.is_empty() {
        return Err(Error::Config("beta sweep needs at least one value".into()));
    }
    betas
        .iter()
        .map(|&b| {
            let mut c = config.clone();
            c.beta = b;
            info!("sweep: beta = {b}");
            Ok(run_cv_on(dataset, &c, parallel)?.0)
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "beta,mean_auc,std_auc,config_hash";

pub fn sweep_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{},{},{},{}", r.config.beta, r.mean_auc, r.std_auc, r.config_hash);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub fold_aucs: Vec<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub format_version: u32,
    pub dataset: String,
    pub points: Vec<SweepPoint>,
}

pub fn sweep_summary(reports: &[EvalReport]) -> SweepSummary {
    SweepSummary {
        format_version: REPORT_VERSION,
        dataset: reports.first().map(|r| r.config.dataset.clone()).unwrap_or_default(),
        points: reports
            .iter()
            .map(|r| SweepPoint {
                beta: r.config.beta,
                mean_auc: r.mean_auc,
                std_auc: r.std_auc,
                fold_aucs: r.fold_aucs.clone(),
                config_hash: r.config_hash.clone(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_index: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub normal: usize,
    pub abnormal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub format_version: u32,
    pub dataset: String,
    pub bins: Vec<HistogramBin>,
}

pub const HISTOGRAM_HEADER: &str = "bin_index,bin_lo,bin_hi,normal,abnormal";

impl ScoreHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTOGRAM_HEADER);
        out.push('\n');
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{},{}", b.bin_index, b.bin_lo, b.bin_hi, b.normal, b.abnormal);
        }
        out
    }

    pub fn totals(&self) -> (usize, usize) {
        self.bins.iter().fold((0, 0), |(n, a), b| (n + b.normal, a + b.abnormal))
    }
}

/// Equal-width bin of a score in `[0, 1]`; 1.0 falls in the last bin.
pub fn score_bin(score: f64, bins: usize) -> usize {
    ((score.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1)
}

/// Normal/abnormal score counts over `bins` equal-width bins of `[0, 1]`.
pub fn export_score_histogram(report: &EvalReport, bins: usize) -> Result<ScoreHistogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            bin_index: i,
            bin_lo: i as f64 / bins as f64,
            bin_hi: (i + 1) as f64 / bins as f64,
            normal: 0,
            abnormal: 0,
        })
        .collect();
    for r in &report.scores {
        let b = &mut out[score_bin(r.score, bins)];
        match r.label {
            Label::Normal => b.normal += 1,
            Label::Abnormal => b.abnormal += 1,
        }
    }
    Ok(ScoreHistogram {
        format_version: REPORT_VERSION,
        dataset: report.config.dataset.clone(),
        bins: out,
    })
}
