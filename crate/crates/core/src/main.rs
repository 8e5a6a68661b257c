use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use flowsense::eval::MetricsReport;
use flowsense::featsel;
use flowsense::ingest::{self, DatasetTable};
use flowsense::linalg::{self, RsvdConfig};
use flowsense::pipeline::{
    self, DatasetConfig, ExperimentConfig, FittedDetector, FoldSeeds, SchemaRef,
};
use flowsense::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "flowsense", version, about = "Malicious flow detection for IoT intrusion datasets")]
struct Cli {
    /// Experiment configuration (JSON). Every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Stratified, seeded subsample of the dataset.
    #[arg(long, global = true)]
    sample_rows: Option<usize>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset CSV; overrides the configured path.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Schema preset (unsw-nb15, bot-iot, cse-cic-ids2018).
    #[arg(long, global = true)]
    schema: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset and print a summary.
    Ingest,
    /// Randomized SVD of the normalized dataset.
    Svd {
        /// Write U.csv, S.csv and V.csv into the output directory.
        #[arg(long)]
        dump_factors: bool,
    },
    /// Chi-squared and ablation rankings as CSV.
    Select,
    /// Fit preprocessing and the LSTM classifier on the whole dataset.
    Train,
    /// Score a dataset with a model written by `train`.
    Evaluate {
        #[arg(long, default_value = "out/model.mgnn")]
        model: PathBuf,
    },
    /// Full cross-validated experiment.
    Run,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.sample_rows {
        cfg.sample_rows = Some(n);
    }
    if cli.data.is_some() || cli.schema.is_some() {
        let current = cfg.dataset.take();
        let path = cli
            .data
            .clone()
            .or_else(|| current.as_ref().map(|d| d.path.clone()))
            .ok_or_else(|| Error::Config("--schema given without a dataset path".into()))?;
        let schema = match (&cli.schema, &current) {
            (Some(s), _) => SchemaRef::Preset(s.clone()),
            (None, Some(d)) => d.schema.clone(),
            (None, None) => SchemaRef::Preset("unsw-nb15".into()),
        };
        let delimiter = current.map_or(',', |d| d.delimiter);
        cfg.dataset = Some(DatasetConfig {
            path,
            schema,
            delimiter,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn normalized_all(table: &DatasetTable) -> Result<DatasetTable> {
    let rows: Vec<usize> = (0..table.n_rows()).collect();
    let stats = ingest::fit_normalizer(table, &rows)?;
    ingest::apply_normalizer(table, &stats)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Ingest => {
            let (_, summary) = pipeline::load_dataset(&cfg)?;
            print_json(&summary)?;
        }
        Command::Svd { dump_factors } => {
            let (table, _) = pipeline::load_dataset(&cfg)?;
            let normalized = normalized_all(&table)?;
            let rsvd = RsvdConfig {
                k: cfg.svd.rank,
                p: cfg.svd.oversampling,
                q: cfg.svd.power_iterations,
                seed: cfg.seed,
            };
            let factors = linalg::randomized_svd(normalized.features(), &rsvd)?;
            print_json(&factors.s)?;
            if *dump_factors {
                factors.write_csv(&cli.out)?;
                eprintln!("factors written to {}", cli.out.display());
            }
        }
        Command::Select => {
            let (table, _) = pipeline::load_dataset(&cfg)?;
            let rows: Vec<usize> = (0..table.n_rows()).collect();
            let mut sel_cfg = cfg.clone();
            if sel_cfg.selection.method == pipeline::SelectionMethod::None {
                sel_cfg.selection.method = pipeline::SelectionMethod::Chi2ThenAblation;
            }
            let prep = pipeline::fit_preprocessor(&table, &rows, &sel_cfg, FoldSeeds::derive(cfg.seed, 0))?;
            create_dir(&cli.out)?;
            let names: Vec<String> = match &prep.svd {
                Some(f) => (0..f.rank()).map(|i| format!("svd_{i}")).collect(),
                None => table.feature_names().to_vec(),
            };
            if let Some(chi) = &prep.chi_square {
                let path = cli.out.join("chi2.csv");
                let f = std::fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                featsel::write_chi_csv(chi, &names, &prep.selected, f)?;
                eprintln!("wrote {}", path.display());
            }
            if let Some(ranking) = &prep.ranking {
                let path = cli.out.join("ranking.csv");
                let f = std::fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                featsel::write_ranking_csv(ranking, f)?;
                eprintln!("wrote {}", path.display());
            }
            let kept: Vec<&String> = prep.selected.iter().map(|&i| &names[i]).collect();
            print_json(&kept)?;
        }
        Command::Train => {
            let (table, _) = pipeline::load_dataset(&cfg)?;
            let rows: Vec<usize> = (0..table.n_rows()).collect();
            let detector = pipeline::fit_detector(&table, &rows, &cfg, FoldSeeds::derive(cfg.seed, 0))?;
            create_dir(&cli.out)?;
            let path = cli.out.join("model.mgnn");
            detector.save(&path)?;
            print_json(&detector.history)?;
            eprintln!("model written to {}", path.display());
        }
        Command::Evaluate { model } => {
            let (table, _) = pipeline::load_dataset(&cfg)?;
            let detector = FittedDetector::load(model)?;
            let probs = detector.predict(&table)?;
            let report = MetricsReport::evaluate(table.labels(), &probs, cfg.threshold)?;
            create_dir(&cli.out)?;
            let path = cli.out.join("metrics.json");
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
            std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path: path.clone(), source: e })?;
            print_json(&report)?;
        }
        Command::Run => {
            let (doc, timings) = pipeline::run_experiment(&cfg)?;
            let files = pipeline::emit_report(&doc, &cli.out)?;
            pipeline::write_timings(&timings, &cli.out)?;
            print_json(&doc.overall)?;
            for f in files {
                eprintln!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .expect("thread pool");
    match pool.install(|| execute(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
