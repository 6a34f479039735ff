use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use gladcf::config::{read_config_file, ExperimentConfig, Switches, VARIANTS};
use gladcf::counterfactual::{self, AugmentManifest, MANIFEST_VERSION};
use gladcf::experiment::{self, EvalReport};
use gladcf::{seed, Error, Result};

#[derive(Parser)]
#[command(name = "gladcf", version, about = "Graph-level anomaly detection with counterfactual augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a local TU dataset and print its statistics.
    Ingest(Common),
    /// Train perturbations on the whole dataset and export generated graphs.
    Augment(Common),
    /// Cross-validate the detector and write checkpoints and a report.
    Train(Common),
    /// Re-score test folds from the checkpoints of a finished run.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory to evaluate [default: derived from the config]
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Cross-validate one ablation variant, or all of them.
    Ablate(Common),
    /// Cross-validate once per beta value.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        /// Comma-separated beta values [default: 0.2,0.4,...,2.2]
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Bin the test scores of a report into a normal/abnormal histogram.
    PlotScores {
        #[command(flatten)]
        common: Common,
        /// Report to read [default: report.json of the configured run]
        #[arg(long)]
        report: Option<PathBuf>,
        /// Number of equal-width bins over [0, 1]
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Dataset name, e.g. COX2
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding <DATASET>/<DATASET>_A.txt and friends
    #[arg(long, env = "GLADCF_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Node features [default: identity]
    #[arg(long, value_parser = ["identity", "db", "ldp"])]
    feature_mode: Option<String>,
    /// Bins for degree-binning features [default: 10]
    #[arg(long)]
    num_bins: Option<usize>,
    /// Raw graph label treated as abnormal [default: 1]
    #[arg(long, allow_negative_numbers = true)]
    anomaly_label: Option<i64>,
    /// Cross-validation folds [default: 5]
    #[arg(long)]
    folds: Option<usize>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of generated samples [default: 1.2; 0.6 for BZR, 1.4 for DHFR]
    #[arg(long)]
    beta: Option<f64>,
    /// Detector learning rate [default: 0.001; 0.0001 for AIDS and NCI1]
    #[arg(long)]
    lr: Option<f64>,
    /// Perturbation learning rate [default: 0.01]
    #[arg(long)]
    cf_lr: Option<f64>,
    /// Detector epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Perturbation epochs [default: 100]
    #[arg(long)]
    cf_epochs: Option<usize>,
    /// Structure threshold [default: 0.5]
    #[arg(long)]
    sigma: Option<f64>,
    /// Feature-mask threshold [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,
    /// Width of the reduced node representation [default: 64]
    #[arg(long)]
    reduce_dim: Option<usize>,
    /// Decision threshold on scores [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Ablation variant [default: full]
    #[arg(long, value_parser = VARIANTS)]
    variant: Option<String>,
    /// Root for run artifacts
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Folds trained concurrently
    #[arg(long, default_value_t = 1)]
    parallel_folds: usize,
    /// Flat `key = value` file; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn flag_values(&self) -> Vec<(&'static str, String)> {
        let mut kv = Vec::new();
        macro_rules! push {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    kv.push((stringify!($field), v.to_string()));
                }
            )*};
        }
        push!(feature_mode, num_bins, anomaly_label, folds, seed, beta, lr, cf_lr, epochs, cf_epochs, sigma, tau, reduce_dim, threshold, variant);
        kv
    }

    /// Dataset defaults, then the config file, then explicit flags.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => read_config_file(p)?,
            None => Vec::new(),
        };
        let dataset = self
            .dataset
            .clone()
            .or_else(|| file.iter().find(|(k, _)| k == "dataset").map(|(_, v)| v.clone()))
            .ok_or_else(|| Error::Config("--dataset is required".into()))?;
        let mut config = ExperimentConfig::for_dataset(&dataset);
        config.data_dir = self.data_dir.clone();
        for (k, v) in &file {
            config.set(k, v)?;
        }
        config.dataset = dataset;
        for (k, v) in self.flag_values() {
            config.set(k, &v)?;
        }
        config.validate()?;
        info!("resolved config: {}", serde_json::to_string(&config)?);
        Ok(config)
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    std::fs::write(path, body).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn ingest(common: &Common) -> Result<()> {
    let config = common.resolve()?;
    let ds = experiment::load_experiment_dataset(&config)?;
    let n = ds.len().max(1) as f64;
    let avg_nodes = ds.graphs.iter().map(|g| g.num_nodes()).sum::<usize>() as f64 / n;
    let avg_edges = ds.graphs.iter().map(|g| g.num_edges()).sum::<usize>() as f64 / n;
    let c = ds.counts();
    println!("dataset   graphs  avg_nodes  avg_edges  normal  abnormal  n_max  feature_dim");
    println!(
        "{:<9} {:>6}  {:>9.2}  {:>9.2}  {:>6}  {:>8}  {:>5}  {:>11}",
        ds.name,
        ds.len(),
        avg_nodes,
        avg_edges,
        c.original_normal,
        c.original_abnormal,
        ds.n_max,
        ds.feature_dim()
    );
    Ok(())
}

fn augment(common: &Common) -> Result<()> {
    let config = common.resolve()?;
    let ds = experiment::load_experiment_dataset(&config)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let out = common.out_dir.join(format!("{}_generated", ds.name));
    let Some(sel) = counterfactual::select_seeds(&ds, &all, seed::derive(config.seed, "select", u64::MAX)) else {
        eprintln!("{} is already balanced; nothing to generate", ds.name);
        return Ok(());
    };
    let seeds = ds.subset(&sel.indices);
    let aug = config.augment_config(seed::derive(config.seed, "augment", u64::MAX));
    let trained = counterfactual::train_perturbations(&seeds, ds.n_max, ds.feature_dim(), &aug)?;
    let generated = seeds
        .iter()
        .map(|g| counterfactual::perturb_graph(&trained.pair, g, sel.minority))
        .collect::<Result<Vec<_>>>()?;
    let manifest = AugmentManifest {
        format_version: MANIFEST_VERSION,
        dataset: ds.name.clone(),
        config: aug,
        minority_label: sel.minority,
        generated_count: generated.len(),
        seed_graph_ids: seeds.iter().map(|g| g.id).collect(),
        loss_trace: trained.loss_trace,
    };
    counterfactual::export_generated(&out, &ds.name, &generated, &manifest)?;
    println!("generated {} {:?} graphs into {}", generated.len(), sel.minority, out.display());
    Ok(())
}

fn train_one(common: &Common, config: &ExperimentConfig, ds: &gladcf::GraphDataset) -> Result<EvalReport> {
    let (report, outcomes) = experiment::run_cv_on(ds, config, common.parallel_folds)?;
    let dir = experiment::run_dir(&common.out_dir, config);
    experiment::write_run(&dir, &report, &outcomes)?;
    println!(
        "{} [{}] mean AUC {:.4} ± {:.4} ({})",
        config.dataset,
        config.switches.name(),
        report.mean_auc,
        report.std_auc,
        dir.display()
    );
    Ok(report)
}

fn train(common: &Common) -> Result<()> {
    let config = common.resolve()?;
    let ds = experiment::load_experiment_dataset(&config)?;
    train_one(common, &config, &ds).map(|_| ())
}

fn eval(common: &Common, run_dir: Option<PathBuf>) -> Result<()> {
    let config = common.resolve()?;
    let ds = experiment::load_experiment_dataset(&config)?;
    let dir = run_dir.unwrap_or_else(|| experiment::run_dir(&common.out_dir, &config));
    let report = experiment::evaluate_checkpoints(&ds, &config, &dir)?;
    report.write_json(dir.join("eval_report.json"))?;
    println!("{} mean AUC {:.4} ± {:.4} ({})", config.dataset, report.mean_auc, report.std_auc, dir.display());
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let base = common.resolve()?;
    let ds = experiment::load_experiment_dataset(&base)?;
    let variants: Vec<&str> = match &common.variant {
        Some(v) => vec![v.as_str()],
        None => VARIANTS.to_vec(),
    };
    let mut table = String::from("variant,mean_auc,std_auc,config_hash\n");
    for v in variants {
        let mut config = base.clone();
        config.switches = Switches::variant(v)?;
        let r = train_one(common, &config, &ds)?;
        table.push_str(&format!("{v},{},{},{}\n", r.mean_auc, r.std_auc, r.config_hash));
    }
    let path = common
        .out_dir
        .join("runs")
        .join(&base.dataset)
        .join(format!("ablation_{}.csv", base.config_hash()));
    write(&path, &table)
}

fn sweep(common: &Common, betas: Option<Vec<f64>>) -> Result<()> {
    let config = common.resolve()?;
    let ds = experiment::load_experiment_dataset(&config)?;
    let betas = betas.unwrap_or_else(experiment::default_beta_grid);
    let reports = experiment::sweep_beta(&ds, &config, &betas, common.parallel_folds)?;
    let dir = common.out_dir.join("runs").join(&config.dataset);
    let stem = format!("sweep_{}", config.config_hash());
    write(&dir.join(format!("{stem}.csv")), &experiment::sweep_csv(&reports))?;
    write(
        &dir.join(format!("{stem}.json")),
        &serde_json::to_string_pretty(&experiment::sweep_summary(&reports))?,
    )?;
    for r in &reports {
        println!("beta {:.1}: mean AUC {:.4} ± {:.4}", r.config.beta, r.mean_auc, r.std_auc);
    }
    Ok(())
}

fn plot_scores(common: &Common, report: Option<PathBuf>, bins: usize) -> Result<()> {
    let path = match report {
        Some(p) => p,
        None => experiment::run_dir(&common.out_dir, &common.resolve()?).join("report.json"),
    };
    let report = EvalReport::read_json(&path)?;
    let hist = experiment::export_score_histogram(&report, bins)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    write(&dir.join("histogram.csv"), &hist.to_csv())?;
    write(&dir.join("histogram.json"), &serde_json::to_string_pretty(&hist)?)?;
    let (n, a) = hist.totals();
    println!("histogram of {n} normal and {a} abnormal scores in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Ingest(c) => ingest(&c),
        Command::Augment(c) => augment(&c),
        Command::Train(c) => train(&c),
        Command::Eval { common, run_dir } => eval(&common, run_dir),
        Command::Ablate(c) => ablate(&c),
        Command::SweepBeta { common, betas } => sweep(&common, betas),
        Command::PlotScores { common, report, bins } => plot_scores(&common, report, bins),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}
