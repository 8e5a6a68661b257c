//! Confusion counts, the six detection metrics, and fold aggregation.
//!
//! Positive means attack (label 1). A metric whose denominator is zero is
//! `None` ("undefined") and is serialized as JSON `null`; it is never
//! reported as 0.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Actual positives, `TP + FN`.
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Actual negatives, `FP + TN`.
    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }
}

/// Tallies predictions; a probability `p >= threshold` is an attack call.
pub fn confusion(labels: &[u8], probabilities: &[f64], threshold: f64) -> Result<ConfusionCounts> {
    if labels.len() != probabilities.len() {
        return Err(Error::Shape(format!(
            "{} labels but {} predictions",
            labels.len(),
            probabilities.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no predictions to evaluate".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(probabilities) {
        match (y != 0, p >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// False-positive rate `FP / (FP + TN)`.
pub fn fpr(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.fp, c.negatives())
}

/// False-rejection rate `FN / (TP + FN)`, the complement of recall.
pub fn frr(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.fn_, c.positives())
}

pub fn accuracy(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp + c.tn, c.total())
}

pub fn precision(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> Option<f64> {
    ratio(c.tp, c.positives())
}

/// Harmonic mean of precision and recall.
pub fn f_measure(c: &ConfusionCounts) -> Option<f64> {
    let p = precision(c)?;
    let r = recall(c)?;
    (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
}

/// Serialized with keys in the order declared here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fpr: Option<f64>,
    pub frr: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_measure: Option<f64>,
    pub counts: ConfusionCounts,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts, threshold: f64) -> Self {
        MetricsReport {
            fpr: fpr(&counts),
            frr: frr(&counts),
            accuracy: accuracy(&counts),
            precision: precision(&counts),
            recall: recall(&counts),
            f_measure: f_measure(&counts),
            counts,
            threshold,
        }
    }

    pub fn evaluate(labels: &[u8], probabilities: &[f64], threshold: f64) -> Result<Self> {
        Ok(Self::from_counts(confusion(labels, probabilities, threshold)?, threshold))
    }

    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Fpr => self.fpr,
            Metric::Frr => self.frr,
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::FMeasure => self.f_measure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Fpr,
    Frr,
    Accuracy,
    Precision,
    Recall,
    FMeasure,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Fpr,
        Metric::Frr,
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::FMeasure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Fpr => "fpr",
            Metric::Frr => "frr",
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::FMeasure => "f_measure",
        }
    }
}

/// Mean and sample standard deviation of one metric across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Folds contributing a defined value.
    pub n: usize,
    /// Folds where the metric was undefined.
    pub excluded: usize,
}

impl MetricStats {
    pub fn from_values(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let excluded = values.len() - n;
        if n == 0 {
            return MetricStats {
                mean: None,
                std: None,
                n,
                excluded,
            };
        }
        let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = (defined.iter().sum::<f64>() / n as f64).clamp(lo, hi);
        let std = if n < 2 {
            0.0
        } else {
            let ss: f64 = defined.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        };
        MetricStats {
            mean: Some(mean),
            std: Some(std),
            n,
            excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: Vec<MetricsReport>,
    pub fpr: MetricStats,
    pub frr: MetricStats,
    pub accuracy: MetricStats,
    pub precision: MetricStats,
    pub recall: MetricStats,
    pub f_measure: MetricStats,
}

impl FoldSummary {
    pub fn stats(&self, m: Metric) -> &MetricStats {
        match m {
            Metric::Fpr => &self.fpr,
            Metric::Frr => &self.frr,
            Metric::Accuracy => &self.accuracy,
            Metric::Precision => &self.precision,
            Metric::Recall => &self.recall,
            Metric::FMeasure => &self.f_measure,
        }
    }
}

pub fn aggregate(folds: &[MetricsReport]) -> Result<FoldSummary> {
    if folds.is_empty() {
        return Err(Error::InvalidArgument("no fold reports to aggregate".into()));
    }
    let stats = |m: Metric| {
        let values: Vec<Option<f64>> = folds.iter().map(|f| f.metric(m)).collect();
        MetricStats::from_values(&values)
    };
    Ok(FoldSummary {
        folds: folds.to_vec(),
        fpr: stats(Metric::Fpr),
        frr: stats(Metric::Frr),
        accuracy: stats(Metric::Accuracy),
        precision: stats(Metric::Precision),
        recall: stats(Metric::Recall),
        f_measure: stats(Metric::FMeasure),
    })
}
