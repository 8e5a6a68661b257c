//! Experiment orchestration: configuration, per-fold stage wiring
//! (normalize → SVD → selection → train → evaluate), aggregation, baseline
//! comparison and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{self, FoldSummary, Metric, MetricsReport};
use crate::featsel::{self, ChiSquareReport, FeatureRanking, SelectionConfig};
use crate::ingest::{self, DatasetSchema, DatasetTable, NormalizationStats, Split};
use crate::linalg::{self, DenseMatrix, RsvdConfig, SvdFactors};
use crate::nn::{self, EpochStats, Model, ModelSpec, Tensor, TrainConfig};
use crate::{Error, Result};

pub const SOFTWARE_NAME: &str = env!("CARGO_PKG_NAME");
pub const SOFTWARE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Either a built-in preset name or a full schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaRef {
    Preset(String),
    Inline(DatasetSchema),
}

impl SchemaRef {
    pub fn resolve(&self) -> Result<DatasetSchema> {
        match self {
            SchemaRef::Preset(name) => DatasetSchema::preset(name),
            SchemaRef::Inline(s) => {
                s.validate()?;
                Ok(s.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub schema: SchemaRef,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvdSettings {
    pub enabled: bool,
    pub rank: usize,
    pub oversampling: usize,
    pub power_iterations: usize,
}

impl Default for SvdSettings {
    fn default() -> Self {
        let d = RsvdConfig::default();
        SvdSettings {
            enabled: true,
            rank: d.k,
            oversampling: d.p,
            power_iterations: d.q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMethod {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "chi2")]
    Chi2,
    #[serde(rename = "ablation")]
    Ablation,
    #[serde(rename = "chi2-then-ablation")]
    Chi2ThenAblation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionSettings {
    pub method: SelectionMethod,
    /// Maximum acceptable test-accuracy drop for ablation.
    pub max_drop: f64,
    pub max_removals: Option<usize>,
    pub retrain: bool,
    /// Features kept by the chi-squared filter.
    pub top_m: usize,
    pub bins: usize,
    /// The ablation network is scored on one of this many stratified parts
    /// of the fold's training rows and trained on the rest.
    pub validation_folds: usize,
    /// Training settings for the ablation network (its seed is derived).
    pub network: TrainConfig,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        let sel = SelectionConfig::default();
        SelectionSettings {
            method: SelectionMethod::Ablation,
            max_drop: sel.max_drop,
            max_removals: sel.max_removals,
            retrain: sel.retrain,
            top_m: 10,
            bins: featsel::DEFAULT_BINS,
            validation_folds: 5,
            network: TrainConfig::default(),
        }
    }
}

impl SelectionSettings {
    fn selection_config(&self) -> SelectionConfig {
        SelectionConfig {
            max_drop: self.max_drop,
            max_removals: self.max_removals,
            retrain: self.retrain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub hidden_size: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { hidden_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub name: String,
    pub accuracy: f64,
}

pub fn default_baselines() -> Vec<Baseline> {
    vec![
        Baseline {
            name: "method21".into(),
            accuracy: 0.934,
        },
        Baseline {
            name: "method19".into(),
            accuracy: 0.945,
        },
    ]
}

/// Every field is optional in the JSON file; the resolved value (defaults
/// included) is echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: Option<DatasetConfig>,
    pub k_folds: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub threshold: f64,
    pub sample_rows: Option<usize>,
    pub svd: SvdSettings,
    pub selection: SelectionSettings,
    pub model: ModelSettings,
    /// Classifier training settings (its seed is derived per fold).
    pub train: TrainConfig,
    pub baselines: Vec<Baseline>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            k_folds: 10,
            repetitions: 5,
            seed: 42,
            threshold: eval::DEFAULT_THRESHOLD,
            sample_rows: None,
            svd: SvdSettings::default(),
            selection: SelectionSettings::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            baselines: default_baselines(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::Config("k_folds must be at least 2".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        if self.sample_rows == Some(0) {
            return Err(Error::Config("sample_rows must be positive".into()));
        }
        if self.svd.enabled && self.svd.rank == 0 {
            return Err(Error::Config("svd.rank must be at least 1".into()));
        }
        let sel = &self.selection;
        if !(sel.max_drop >= 0.0) {
            return Err(Error::Config("selection.max_drop must be non-negative".into()));
        }
        if sel.bins < 2 {
            return Err(Error::Config("selection.bins must be at least 2".into()));
        }
        if sel.top_m == 0 {
            return Err(Error::Config("selection.top_m must be at least 1".into()));
        }
        if sel.validation_folds < 2 {
            return Err(Error::Config("selection.validation_folds must be at least 2".into()));
        }
        if self.model.hidden_size == 0 {
            return Err(Error::Config("model.hidden_size must be at least 1".into()));
        }
        sel.network.validate()?;
        self.train.validate()?;
        if let Some(ds) = &self.dataset {
            ds.schema.resolve()?;
            if !ds.delimiter.is_ascii() {
                return Err(Error::Config("delimiter must be an ASCII character".into()));
            }
        }
        Ok(())
    }
}

/// Deterministic 64-bit mixing (splitmix64 finalizer) for per-stage seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const STAGE_SVD: u64 = 1;
const STAGE_SELECT: u64 = 2;
const STAGE_TRAIN: u64 = 3;

/// Seeds for one fold of one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldSeeds {
    pub svd: u64,
    pub selection: u64,
    pub train: u64,
}

impl FoldSeeds {
    pub fn derive(repetition_seed: u64, fold: usize) -> Self {
        let f = fold as u64;
        FoldSeeds {
            svd: derive_seed(repetition_seed, &[f, STAGE_SVD]),
            selection: derive_seed(repetition_seed, &[f, STAGE_SELECT]),
            train: derive_seed(repetition_seed, &[f, STAGE_TRAIN]),
        }
    }
}

/// Everything fitted on a fold's training rows before the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub normalizer: NormalizationStats,
    pub svd: Option<SvdFactors>,
    /// Column indices (after projection) fed to the classifier, ascending.
    pub selected: Vec<usize>,
    pub chi_square: Option<ChiSquareReport>,
    pub ranking: Option<FeatureRanking>,
}

impl Preprocessor {
    /// Normalized, projected, selected view of `table`.
    pub fn transform(&self, table: &DatasetTable) -> Result<DatasetTable> {
        let normalized = ingest::apply_normalizer(table, &self.normalizer)?;
        let projected = match &self.svd {
            Some(f) => linalg::project(&normalized, f)?,
            None => normalized,
        };
        projected.select_columns(&self.selected)
    }

    /// Tensors stored next to the model parameters in a model file.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let vec = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).expect("finite");
        let mut out = vec![
            ("prep.mean".to_string(), vec(&self.normalizer.mean)),
            ("prep.std".to_string(), vec(&self.normalizer.std)),
            (
                "prep.selected".to_string(),
                vec(&self.selected.iter().map(|&s| s as f64).collect::<Vec<_>>()),
            ),
        ];
        if let Some(f) = &self.svd {
            out.push((
                "prep.projection".to_string(),
                Tensor::new(vec![f.v.rows(), f.v.cols()], f.v.data().to_vec()).expect("finite"),
            ));
        }
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let need = |name: &str| {
            find(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
        };
        let normalizer = NormalizationStats {
            mean: need("prep.mean")?.values().to_vec(),
            std: need("prep.std")?.values().to_vec(),
        };
        let selected = need("prep.selected")?
            .values()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let svd = match find("prep.projection") {
            Some(t) if t.shape().len() == 2 => {
                let (n, k) = (t.shape()[0], t.shape()[1]);
                Some(SvdFactors {
                    u: DenseMatrix::zeros(0, k),
                    s: vec![0.0; k],
                    v: DenseMatrix::new(n, k, t.values().to_vec())?,
                })
            }
            Some(_) => return Err(Error::Format("projection must be a matrix".into())),
            None => None,
        };
        Ok(Preprocessor {
            normalizer,
            svd,
            selected,
            chi_square: None,
            ranking: None,
        })
    }
}

fn stage<T>(name: &'static str, repetition: usize, fold: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        repetition,
        fold,
        source: Box::new(e),
    })
}

/// Fits normalizer, SVD and feature selection on `train_rows` only.
pub fn fit_preprocessor(
    table: &DatasetTable,
    train_rows: &[usize],
    cfg: &ExperimentConfig,
    seeds: FoldSeeds,
) -> Result<Preprocessor> {
    fit_preprocessor_at(table, train_rows, cfg, seeds, 0, 0)
}

fn fit_preprocessor_at(
    table: &DatasetTable,
    train_rows: &[usize],
    cfg: &ExperimentConfig,
    seeds: FoldSeeds,
    rep: usize,
    fold: usize,
) -> Result<Preprocessor> {
    let normalizer = stage("normalize", rep, fold, ingest::fit_normalizer(table, train_rows))?;
    let train = stage(
        "normalize",
        rep,
        fold,
        table
            .select_rows(train_rows)
            .and_then(|t| ingest::apply_normalizer(&t, &normalizer)),
    )?;

    let (svd, train) = if cfg.svd.enabled {
        let rsvd = RsvdConfig {
            k: cfg.svd.rank,
            p: cfg.svd.oversampling,
            q: cfg.svd.power_iterations,
            seed: seeds.svd,
        };
        let factors = stage("svd", rep, fold, linalg::randomized_svd(train.features(), &rsvd))?;
        let projected = stage("svd", rep, fold, linalg::project(&train, &factors))?;
        (Some(factors), projected)
    } else {
        (None, train)
    };

    let sel = &cfg.selection;
    let all: Vec<usize> = (0..train.n_cols()).collect();
    let chi_stage = |candidates: Vec<usize>| -> Result<(Vec<usize>, ChiSquareReport)> {
        let report = featsel::chi_square_scores(&train, sel.bins)?;
        let m = sel.top_m.min(candidates.len());
        let mut top = featsel::select_top_chi(&report, m)?;
        top.sort_unstable();
        Ok((top, report))
    };
    let ablation_stage = |candidates: Vec<usize>| -> Result<(Vec<usize>, FeatureRanking)> {
        if candidates.len() < 2 {
            return Ok((candidates, empty_ranking()));
        }
        let sub = train.select_columns(&candidates)?;
        let inner = ingest::stratified_kfold(sub.labels(), sel.validation_folds, seeds.selection)?;
        let split = inner.split(0);
        let spec = ModelSpec::selection_cnn(sub.n_cols());
        let net_cfg = TrainConfig {
            seed: seeds.selection,
            ..sel.network
        };
        let (kept, rank) =
            featsel::ablation_select(&sub, &split, &spec, &net_cfg, &sel.selection_config())?;
        Ok((kept.into_iter().map(|k| candidates[k]).collect(), rank))
    };
    let outcome = match sel.method {
        SelectionMethod::None => Ok((all, None, None)),
        SelectionMethod::Chi2 => chi_stage(all).map(|(top, chi)| (top, Some(chi), None)),
        SelectionMethod::Ablation => {
            ablation_stage(all).map(|(kept, rank)| (kept, None, Some(rank)))
        }
        SelectionMethod::Chi2ThenAblation => chi_stage(all).and_then(|(top, chi)| {
            ablation_stage(top).map(|(kept, rank)| (kept, Some(chi), Some(rank)))
        }),
    };
    let (selected, chi_square, ranking) = stage("selection", rep, fold, outcome)?;

    Ok(Preprocessor {
        normalizer,
        svd,
        selected,
        chi_square,
        ranking,
    })
}

fn empty_ranking() -> FeatureRanking {
    FeatureRanking {
        full_train_accuracy: 0.0,
        full_test_accuracy: 0.0,
        entries: Vec::new(),
        train_accuracy_order: Vec::new(),
        guard_triggered: false,
    }
}

/// Classifier plus the preprocessing it expects.
#[derive(Debug, Clone)]
pub struct FittedDetector {
    pub preprocessor: Preprocessor,
    pub model: Model,
    pub history: Vec<EpochStats>,
}

impl FittedDetector {
    pub fn predict(&self, table: &DatasetTable) -> Result<Vec<f64>> {
        let x = self.preprocessor.transform(table)?;
        nn::model_forward(&self.model, x.features())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.to_tensors();
        tensors.extend(self.preprocessor.to_tensors());
        nn::save_tensors(path, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = nn::load_tensors(path)?;
        Ok(FittedDetector {
            preprocessor: Preprocessor::from_tensors(&tensors)?,
            model: Model::from_tensors(&tensors)?,
            history: Vec::new(),
        })
    }
}

/// Fits the full stage chain on `train_rows`.
pub fn fit_detector(
    table: &DatasetTable,
    train_rows: &[usize],
    cfg: &ExperimentConfig,
    seeds: FoldSeeds,
) -> Result<FittedDetector> {
    fit_detector_at(table, train_rows, cfg, seeds, 0, 0)
}

fn fit_detector_at(
    table: &DatasetTable,
    train_rows: &[usize],
    cfg: &ExperimentConfig,
    seeds: FoldSeeds,
    rep: usize,
    fold: usize,
) -> Result<FittedDetector> {
    let preprocessor = fit_preprocessor_at(table, train_rows, cfg, seeds, rep, fold)?;
    train_classifier(table, train_rows, preprocessor, cfg, seeds, rep, fold)
}

fn train_classifier(
    table: &DatasetTable,
    train_rows: &[usize],
    preprocessor: Preprocessor,
    cfg: &ExperimentConfig,
    seeds: FoldSeeds,
    rep: usize,
    fold: usize,
) -> Result<FittedDetector> {
    let train = stage(
        "train",
        rep,
        fold,
        table
            .select_rows(train_rows)
            .and_then(|t| preprocessor.transform(&t)),
    )?;
    let spec = ModelSpec::lstm_classifier(train.n_cols(), cfg.model.hidden_size);
    let train_cfg = TrainConfig {
        seed: seeds.train,
        ..cfg.train
    };
    let trained = stage("train", rep, fold, nn::train(&spec, &train, &train_cfg))?;
    Ok(FittedDetector {
        preprocessor,
        model: trained.model,
        history: trained.history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldDetail {
    pub fold: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub selected_features: Vec<String>,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub repetition: usize,
    pub seed: u64,
    pub summary: FoldSummary,
    pub folds: Vec<FoldDetail>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallMeans {
    pub fpr: Option<f64>,
    pub frr: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_measure: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub accuracy: f64,
    /// Our accuracy minus this row's.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub schema: String,
    pub rows: usize,
    pub features: usize,
    pub normal: usize,
    pub attack: usize,
    pub parse_warnings: usize,
    pub single_class: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Software {
    pub name: String,
    pub version: String,
}

/// Canonical experiment report. Serialized field order is declaration
/// order; the document holds nothing time-dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub software: Software,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    pub repetitions: Vec<RepetitionReport>,
    pub overall: OverallMeans,
    pub baselines: Vec<ComparisonRow>,
}

/// Wall-clock seconds per stage, summed over folds. Kept out of
/// [`ReportDocument`] so reports stay byte-reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: BTreeMap<String, f64>,
}

impl Timings {
    fn add(&mut self, stage: &str, secs: f64) {
        *self.stages.entry(stage.to_string()).or_default() += secs;
    }
}

/// Loads and encodes the configured dataset, applying `sample_rows`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(DatasetTable, DatasetSummary)> {
    let ds = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset configured".into()))?;
    let schema = ds.schema.resolve()?;
    let raw = ingest::load_csv(&ds.path, &schema, ds.delimiter as u8)?;
    let encoded = ingest::encode(&raw, &schema)?;
    let mut table = encoded.table;
    if let Some(n) = cfg.sample_rows {
        let rows = ingest::stratified_sample(table.labels(), n, cfg.seed)?;
        table = table.select_rows(&rows)?;
    }
    let (normal, attack) = table.class_counts();
    let summary = DatasetSummary {
        schema: schema.name.clone(),
        rows: table.n_rows(),
        features: table.n_cols(),
        normal,
        attack,
        parse_warnings: encoded.parse_warnings,
        single_class: table.is_single_class(),
    };
    Ok((table, summary))
}

struct FoldOutcome {
    metrics: MetricsReport,
    detail: FoldDetail,
    timings: Vec<(&'static str, f64)>,
}

fn run_fold(
    table: &DatasetTable,
    split: &Split,
    cfg: &ExperimentConfig,
    rep: usize,
    rep_seed: u64,
    fold: usize,
) -> Result<FoldOutcome> {
    let seeds = FoldSeeds::derive(rep_seed, fold);
    let t0 = Instant::now();
    let preprocessor = fit_preprocessor_at(table, &split.train, cfg, seeds, rep, fold)?;
    let t1 = Instant::now();
    let detector = train_classifier(table, &split.train, preprocessor, cfg, seeds, rep, fold)?;
    let t2 = Instant::now();
    let test = stage(
        "evaluate",
        rep,
        fold,
        table.select_rows(&split.test).and_then(|t| detector.preprocessor.transform(&t)),
    )?;
    let probs = stage("evaluate", rep, fold, nn::model_forward(&detector.model, test.features()))?;
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Stage {
            stage: "evaluate",
            repetition: rep,
            fold,
            source: Box::new(Error::Numeric("non-finite prediction".into())),
        });
    }
    let metrics = stage(
        "evaluate",
        rep,
        fold,
        MetricsReport::evaluate(test.labels(), &probs, cfg.threshold),
    )?;
    let t3 = Instant::now();
    Ok(FoldOutcome {
        metrics,
        detail: FoldDetail {
            fold,
            train_rows: split.train.len(),
            test_rows: split.test.len(),
            selected_features: test.feature_names().to_vec(),
            history: detector.history,
        },
        timings: vec![
            ("preprocess", (t1 - t0).as_secs_f64()),
            ("train", (t2 - t1).as_secs_f64()),
            ("evaluate", (t3 - t2).as_secs_f64()),
        ],
    })
}

/// Runs every repetition of k-fold cross-validation on `table`. Folds run in
/// parallel on the current rayon pool; results are assembled in fold order.
pub fn run_on_table(
    table: &DatasetTable,
    dataset: DatasetSummary,
    cfg: &ExperimentConfig,
) -> Result<(ReportDocument, Timings)> {
    cfg.validate()?;
    let mut timings = Timings::default();
    let mut repetitions = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let rep_seed = cfg.seed.wrapping_add(rep as u64);
        let plan = stage(
            "folds",
            rep,
            0,
            ingest::stratified_kfold(table.labels(), cfg.k_folds, rep_seed),
        )?;
        let outcomes: Vec<FoldOutcome> = (0..cfg.k_folds)
            .into_par_iter()
            .map(|fold| run_fold(table, &plan.split(fold), cfg, rep, rep_seed, fold))
            .collect::<Result<_>>()?;
        let mut metrics = Vec::with_capacity(outcomes.len());
        let mut folds = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            for (s, secs) in &o.timings {
                timings.add(s, *secs);
            }
            metrics.push(o.metrics);
            folds.push(o.detail);
        }
        repetitions.push(RepetitionReport {
            repetition: rep,
            seed: rep_seed,
            summary: eval::aggregate(&metrics)?,
            folds,
        });
    }
    let overall = overall_means(&repetitions);
    let baselines = match overall.accuracy {
        Some(acc) => compare_baselines(acc, &cfg.baselines),
        None => Vec::new(),
    };
    let doc = ReportDocument {
        software: Software {
            name: SOFTWARE_NAME.into(),
            version: SOFTWARE_VERSION.into(),
        },
        seed: cfg.seed,
        config: cfg.clone(),
        dataset,
        repetitions,
        overall,
        baselines,
    };
    Ok((doc, timings))
}

/// Loads the configured dataset and runs the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ReportDocument, Timings)> {
    cfg.validate()?;
    let start = Instant::now();
    let (table, summary) = load_dataset(cfg)?;
    let load_secs = start.elapsed().as_secs_f64();
    let (doc, mut timings) = run_on_table(&table, summary, cfg)?;
    timings.add("ingest", load_secs);
    Ok((doc, timings))
}

/// Mean over repetitions of each repetition's mean.
fn overall_means(reps: &[RepetitionReport]) -> OverallMeans {
    let m = |metric: Metric| {
        let values: Vec<Option<f64>> = reps.iter().map(|r| r.summary.stats(metric).mean).collect();
        eval::MetricStats::from_values(&values).mean
    };
    OverallMeans {
        fpr: m(Metric::Fpr),
        frr: m(Metric::Frr),
        accuracy: m(Metric::Accuracy),
        precision: m(Metric::Precision),
        recall: m(Metric::Recall),
        f_measure: m(Metric::FMeasure),
    }
}

/// One row per baseline (in order) followed by `ours`; `delta` is our
/// accuracy minus the row's.
pub fn compare_baselines(ours: f64, baselines: &[Baseline]) -> Vec<ComparisonRow> {
    baselines
        .iter()
        .map(|b| ComparisonRow {
            name: b.name.clone(),
            accuracy: b.accuracy,
            delta: ours - b.accuracy,
        })
        .chain(std::iter::once(ComparisonRow {
            name: "ours".into(),
            accuracy: ours,
            delta: 0.0,
        }))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(doc: &ReportDocument) -> String {
    let mut out = String::from(
        "repetition,fold,fpr,frr,accuracy,precision,recall,f_measure,tp,fp,tn,fn,threshold\n",
    );
    for rep in &doc.repetitions {
        for (fold, m) in rep.summary.folds.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                rep.repetition,
                fold,
                fmt_opt(m.fpr),
                fmt_opt(m.frr),
                fmt_opt(m.accuracy),
                fmt_opt(m.precision),
                fmt_opt(m.recall),
                fmt_opt(m.f_measure),
                m.counts.tp,
                m.counts.fp,
                m.counts.tn,
                m.counts.fn_,
                m.threshold
            );
        }
    }
    out
}

/// Long-format series: per-repetition metric means (`runs`) and the
/// accuracy comparison (`comparison`).
pub fn chart_data_csv(doc: &ReportDocument) -> String {
    let mut out = String::from("chart,series,metric,value,std\n");
    for rep in &doc.repetitions {
        for metric in Metric::ALL {
            let s = rep.summary.stats(metric);
            let _ = writeln!(
                out,
                "runs,run_{},{},{},{}",
                rep.repetition + 1,
                metric.name(),
                fmt_opt(s.mean),
                fmt_opt(s.std)
            );
        }
    }
    for row in &doc.baselines {
        let _ = writeln!(out, "comparison,{},accuracy,{},", row.name, row.accuracy);
    }
    out
}

pub fn report_json(doc: &ReportDocument) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::Data(format!("serializing report: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Writes `report.json`, `metrics.csv` and `chart_data.csv` into `out_dir`.
pub fn emit_report(doc: &ReportDocument, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = [
        ("report.json", report_json(doc)?),
        ("metrics.csv", metrics_csv(doc)),
        ("chart_data.csv", chart_data_csv(doc)),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, content) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn write_timings(timings: &Timings, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join("timings.json");
    let text = serde_json::to_string_pretty(timings)
        .map_err(|e| Error::Data(format!("serializing timings: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
