//! Feature selection: a chi-squared filter over quantile-binned features and
//! weight ablation on a trained network.
//!
//! Ablation trains one network on every feature, then for each feature `k`
//! builds a copy whose input weights for `k` are zeroed and records the
//! accuracy on the training part (`R_k`) and test part (`R'_k`). Features are
//! visited in ascending order of the test-accuracy drop
//! `r_k = acc_full − R'_k` and removed while `r_k ≤ R`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval;
use crate::ingest::{DatasetTable, Split};
use crate::linalg::DenseMatrix;
use crate::nn::{self, Layer, Model, ModelSpec, TrainConfig};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareReport {
    pub scores: Vec<f64>,
    pub bins: usize,
    /// All features by descending score, ties by ascending index.
    pub selected: Vec<usize>,
}

/// Bin index of every value: quantile edges are taken at ranks
/// `⌈j·n/bins⌉` of the sorted column and a value lands above every edge it
/// strictly exceeds.
fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..bins)
        .map(|j| sorted[((j * n).div_ceil(bins)).max(1) - 1])
        .collect();
    edges.dedup();
    values
        .iter()
        .map(|&v| edges.partition_point(|&e| e < v))
        .collect()
}

/// Pearson χ² of a contingency table given as `[bin][class]` counts; rows
/// with no observations are skipped.
pub fn chi_square_statistic(table: &[[u64; 2]]) -> f64 {
    let n: u64 = table.iter().map(|r| r[0] + r[1]).sum();
    if n == 0 {
        return 0.0;
    }
    let class_totals = [
        table.iter().map(|r| r[0]).sum::<u64>(),
        table.iter().map(|r| r[1]).sum::<u64>(),
    ];
    let mut chi = 0.0;
    for row in table {
        let row_total = row[0] + row[1];
        if row_total == 0 {
            continue;
        }
        for c in 0..2 {
            let expected = row_total as f64 * class_totals[c] as f64 / n as f64;
            if expected > 0.0 {
                let diff = row[c] as f64 - expected;
                chi += diff * diff / expected;
            }
        }
    }
    chi
}

pub fn chi_square_scores(table: &DatasetTable, bins: usize) -> Result<ChiSquareReport> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    if table.is_single_class() {
        return Err(Error::Data(
            "chi-squared scores are undefined for a single-class table".into(),
        ));
    }
    let labels = table.labels();
    let scores: Vec<f64> = (0..table.n_cols())
        .map(|j| {
            let column = table.features().column(j);
            let assignment = quantile_bins(&column, bins);
            let mut counts = vec![[0u64; 2]; bins];
            for (&b, &y) in assignment.iter().zip(labels) {
                counts[b][usize::from(y)] += 1;
            }
            chi_square_statistic(&counts)
        })
        .collect();
    let selected = rank_descending(&scores);
    Ok(ChiSquareReport {
        scores,
        bins,
        selected,
    })
}

fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Indices of the `m` highest-scoring features, best first.
pub fn select_top_chi(report: &ChiSquareReport, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > report.scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} of {} features",
            report.scores.len()
        )));
    }
    Ok(report.selected[..m].to_vec())
}

/// Copy of `model` that ignores input feature `k`. A dense first layer has
/// weight column `k` zeroed; convolutional and recurrent first layers mask
/// the feature at the input instead.
pub fn zero_input_weights(model: &Model, k: usize) -> Result<Model> {
    if k >= model.input_width() {
        return Err(Error::InvalidArgument(format!(
            "feature {k} out of range for input width {}",
            model.input_width()
        )));
    }
    let mut out = model.clone();
    match &mut out.layers_mut()[0] {
        Layer::Dense(d) | Layer::Output(d) => {
            let width = d.weight.shape()[1];
            let w = d.weight.values_mut();
            for row in w.chunks_mut(width) {
                row[k] = 0.0;
            }
        }
        Layer::Conv1d(_) | Layer::Lstm(_) => out.mask_input(k),
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Largest acceptable test-accuracy drop `R`.
    pub max_drop: f64,
    pub max_removals: Option<usize>,
    /// Retrain the network after each removal instead of reusing it.
    pub retrain: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            max_drop: 0.005,
            max_removals: None,
            retrain: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub feature: usize,
    pub name: String,
    /// `R_k`
    pub train_accuracy: f64,
    /// `R'_k`
    pub test_accuracy: f64,
    /// `r_k = acc_full − R'_k`
    pub drop: f64,
    pub removed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub full_train_accuracy: f64,
    pub full_test_accuracy: f64,
    /// Entries in visiting order (ascending `drop`, ties by index).
    pub entries: Vec<RankEntry>,
    /// Feature indices ordered by descending `R_k`: the ordering a ranking by
    /// training accuracy would give, kept for comparison with the order
    /// actually used.
    pub train_accuracy_order: Vec<usize>,
    /// True when every feature qualified for removal and the last one was
    /// kept.
    pub guard_triggered: bool,
}

fn accuracy_on(model: &Model, features: &DenseMatrix, labels: &[u8]) -> Result<f64> {
    let p = nn::model_forward(model, features)?;
    let c = eval::confusion(labels, &p, eval::DEFAULT_THRESHOLD)?;
    Ok(eval::accuracy(&c).unwrap_or(0.0))
}

struct Part {
    features: DenseMatrix,
    labels: Vec<u8>,
}

impl Part {
    fn of(table: &DatasetTable, rows: &[usize], cols: &[usize]) -> Result<Self> {
        let t = table.select_rows(rows)?.select_columns(cols)?;
        Ok(Part {
            features: t.features().clone(),
            labels: t.labels().to_vec(),
        })
    }
}

fn ablate(model: &Model, train: &Part, test: &Part) -> Result<Vec<(f64, f64)>> {
    (0..model.input_width())
        .into_par_iter()
        .map(|k| {
            let masked = zero_input_weights(model, k)?;
            Ok((
                accuracy_on(&masked, &train.features, &train.labels)?,
                accuracy_on(&masked, &test.features, &test.labels)?,
            ))
        })
        .collect()
}

/// Ablation feature selection over `split` (train part trains the network,
/// test part measures the drops). Returns surviving feature indices in
/// ascending order and the full ranking. At least one feature always
/// survives.
pub fn ablation_select(
    table: &DatasetTable,
    split: &Split,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
    sel: &SelectionConfig,
) -> Result<(Vec<usize>, FeatureRanking)> {
    let n = table.n_cols();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "ablation needs at least two features".into(),
        ));
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs non-empty train and test parts".into(),
        ));
    }
    if !(sel.max_drop >= 0.0) {
        return Err(Error::Config("max_drop must be non-negative".into()));
    }

    let all: Vec<usize> = (0..n).collect();
    let train_part = Part::of(table, &split.train, &all)?;
    let test_part = Part::of(table, &split.test, &all)?;
    let train_table = table.select_rows(&split.train)?;
    let net = nn::train(spec, &train_table, train_cfg)?.model;
    let full_train = accuracy_on(&net, &train_part.features, &train_part.labels)?;
    let full_test = accuracy_on(&net, &test_part.features, &test_part.labels)?;
    let ablated = ablate(&net, &train_part, &test_part)?;

    let mut entries: Vec<RankEntry> = ablated
        .iter()
        .enumerate()
        .map(|(k, &(tr, te))| RankEntry {
            feature: k,
            name: table.feature_names()[k].clone(),
            train_accuracy: tr,
            test_accuracy: te,
            drop: full_test - te,
            removed: false,
        })
        .collect();
    entries.sort_by(|a, b| a.drop.total_cmp(&b.drop).then(a.feature.cmp(&b.feature)));
    let mut train_accuracy_order: Vec<usize> = (0..n).collect();
    train_accuracy_order.sort_by(|&a, &b| {
        ablated[b].0.total_cmp(&ablated[a].0).then(a.cmp(&b))
    });

    let cap = sel.max_removals.unwrap_or(usize::MAX);
    let mut survivors: Vec<usize> = all.clone();
    let mut removed = 0;
    let mut guard_triggered = false;
    // with retraining, drops are re-measured on the current network
    let mut current: Option<(Model, f64)> = None;

    for idx in 0..entries.len() {
        if removed >= cap {
            break;
        }
        let k = entries[idx].feature;
        let drop = match &current {
            None => entries[idx].drop,
            Some((model, acc)) => {
                let pos = survivors.iter().position(|&f| f == k).expect("k survives");
                let test = Part::of(table, &split.test, &survivors)?;
                let masked = zero_input_weights(model, pos)?;
                acc - accuracy_on(&masked, &test.features, &test.labels)?
            }
        };
        if drop > sel.max_drop {
            if sel.retrain {
                continue;
            }
            break;
        }
        if survivors.len() == 1 {
            guard_triggered = true;
            break;
        }
        survivors.retain(|&f| f != k);
        entries[idx].removed = true;
        removed += 1;
        if sel.retrain {
            let sub = table.select_rows(&split.train)?.select_columns(&survivors)?;
            let model = nn::train(spec, &sub, train_cfg)?.model;
            let test = Part::of(table, &split.test, &survivors)?;
            let acc = accuracy_on(&model, &test.features, &test.labels)?;
            current = Some((model, acc));
        }
    }
    Ok((
        survivors,
        FeatureRanking {
            full_train_accuracy: full_train,
            full_test_accuracy: full_test,
            entries,
            train_accuracy_order,
            guard_triggered,
        },
    ))
}

pub fn write_ranking_csv<W: Write>(ranking: &FeatureRanking, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "feature",
        "name",
        "train_accuracy",
        "test_accuracy",
        "drop",
        "train_rank",
        "removed",
    ])?;
    for e in &ranking.entries {
        let train_rank = ranking
            .train_accuracy_order
            .iter()
            .position(|&f| f == e.feature)
            .unwrap_or(0);
        out.write_record([
            e.feature.to_string(),
            e.name.clone(),
            e.train_accuracy.to_string(),
            e.test_accuracy.to_string(),
            e.drop.to_string(),
            train_rank.to_string(),
            e.removed.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::Data(format!("writing ranking: {e}")))
}

pub fn write_chi_csv<W: Write>(
    report: &ChiSquareReport,
    names: &[String],
    kept: &[usize],
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["feature", "name", "score", "rank", "selected"])?;
    for (rank, &f) in report.selected.iter().enumerate() {
        out.write_record([
            f.to_string(),
            names.get(f).cloned().unwrap_or_default(),
            report.scores[f].to_string(),
            rank.to_string(),
            kept.contains(&f).to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::Data(format!("writing chi-squared report: {e}")))
}
