//! Dataset loading, encoding, normalization and stratified fold planning.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;
use crate::{Error, Result};

/// Categories kept per one-hot encoded column; the remainder share one
/// `<other>` indicator.
pub const CATEGORY_CAP: usize = 32;

/// Lower bound applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: ColumnKind,
}

impl FeatureColumn {
    pub fn numeric(name: &str) -> Self {
        FeatureColumn {
            name: name.to_string(),
            kind: ColumnKind::Numeric,
        }
    }

    pub fn categorical(name: &str) -> Self {
        FeatureColumn {
            name: name.to_string(),
            kind: ColumnKind::Categorical,
        }
    }
}

/// Column layout of a flow-record CSV export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub feature_columns: Vec<FeatureColumn>,
    pub label_column: String,
    /// Raw label strings that mean "attack"; everything else is normal.
    pub positive_label_values: BTreeSet<String>,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(Error::Config(format!(
                "schema `{}` has no feature columns",
                self.name
            )));
        }
        let mut seen = BTreeSet::new();
        for col in &self.feature_columns {
            if !seen.insert(col.name.as_str()) {
                return Err(Error::Config(format!(
                    "schema `{}` lists column `{}` twice",
                    self.name, col.name
                )));
            }
        }
        if seen.contains(self.label_column.as_str()) {
            return Err(Error::Config(format!(
                "schema `{}`: label column `{}` is also a feature column",
                self.name, self.label_column
            )));
        }
        Ok(())
    }

    /// Built-in schemas: `unsw-nb15`, `bot-iot` and `cse-cic-ids2018`.
    pub fn preset(name: &str) -> Result<Self> {
        let schema = match name {
            "unsw-nb15" => unsw_nb15(),
            "bot-iot" => bot_iot(),
            "cse-cic-ids2018" => cse_cic_ids2018(),
            other => {
                return Err(Error::Config(format!("unknown schema preset `{other}`")));
            }
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["unsw-nb15", "bot-iot", "cse-cic-ids2018"]
    }
}

fn build_schema(
    name: &str,
    categorical: &[&str],
    numeric: &[&str],
    label: &str,
    positives: &[&str],
) -> DatasetSchema {
    let mut feature_columns: Vec<FeatureColumn> =
        numeric.iter().map(|c| FeatureColumn::numeric(c)).collect();
    feature_columns.extend(categorical.iter().map(|c| FeatureColumn::categorical(c)));
    DatasetSchema {
        name: name.to_string(),
        feature_columns,
        label_column: label.to_string(),
        positive_label_values: positives.iter().map(|s| s.to_string()).collect(),
    }
}

// Official UNSW_NB15_{training,testing}-set.csv layout. `id` and `attack_cat`
// are present in the files but deliberately not features.
fn unsw_nb15() -> DatasetSchema {
    build_schema(
        "unsw-nb15",
        &["proto", "service", "state"],
        &[
            "dur",
            "spkts",
            "dpkts",
            "sbytes",
            "dbytes",
            "rate",
            "sttl",
            "dttl",
            "sload",
            "dload",
            "sloss",
            "dloss",
            "sinpkt",
            "dinpkt",
            "sjit",
            "djit",
            "swin",
            "stcpb",
            "dtcpb",
            "dwin",
            "tcprtt",
            "synack",
            "ackdat",
            "smean",
            "dmean",
            "trans_depth",
            "response_body_len",
            "ct_srv_src",
            "ct_state_ttl",
            "ct_dst_ltm",
            "ct_src_dport_ltm",
            "ct_dst_sport_ltm",
            "ct_dst_src_ltm",
            "is_ftp_login",
            "ct_ftp_cmd",
            "ct_flw_http_mthd",
            "ct_src_ltm",
            "ct_srv_dst",
            "is_sm_ips_ports",
        ],
        "label",
        &["1"],
    )
}

// BoT-IoT CSV exports. Addresses, ports, timestamps and the category columns
// identify hosts or leak the label and are left out.
fn bot_iot() -> DatasetSchema {
    build_schema(
        "bot-iot",
        &["proto", "state"],
        &[
            "pkts", "bytes", "seq", "dur", "mean", "stddev", "sum", "min", "max", "spkts",
            "dpkts", "sbytes", "dbytes", "rate", "srate", "drate",
        ],
        "attack",
        &["1"],
    )
}

fn cse_cic_ids2018() -> DatasetSchema {
    build_schema(
        "cse-cic-ids2018",
        &["Protocol"],
        &[
            "Dst Port",
            "Flow Duration",
            "Tot Fwd Pkts",
            "Tot Bwd Pkts",
            "TotLen Fwd Pkts",
            "TotLen Bwd Pkts",
            "Fwd Pkt Len Max",
            "Fwd Pkt Len Min",
            "Fwd Pkt Len Mean",
            "Fwd Pkt Len Std",
            "Bwd Pkt Len Max",
            "Bwd Pkt Len Min",
            "Bwd Pkt Len Mean",
            "Bwd Pkt Len Std",
            "Flow Byts/s",
            "Flow Pkts/s",
            "Flow IAT Mean",
            "Flow IAT Std",
            "Flow IAT Max",
            "Flow IAT Min",
            "Fwd IAT Tot",
            "Bwd IAT Tot",
            "Fwd Pkts/s",
            "Bwd Pkts/s",
            "Pkt Len Min",
            "Pkt Len Max",
            "Pkt Len Mean",
            "Pkt Len Std",
            "FIN Flag Cnt",
            "SYN Flag Cnt",
            "RST Flag Cnt",
            "PSH Flag Cnt",
            "ACK Flag Cnt",
            "Init Fwd Win Byts",
            "Init Bwd Win Byts",
            "Active Mean",
            "Idle Mean",
        ],
        "Label",
        &[
            "Bot",
            "Brute Force -Web",
            "Brute Force -XSS",
            "DDOS attack-HOIC",
            "DDOS attack-LOIC-UDP",
            "DDoS attacks-LOIC-HTTP",
            "DoS attacks-GoldenEye",
            "DoS attacks-Hulk",
            "DoS attacks-SlowHTTPTest",
            "DoS attacks-Slowloris",
            "FTP-BruteForce",
            "Infilteration",
            "SQL Injection",
            "SSH-Bruteforce",
        ],
    )
}

/// String cells for the schema's columns, features first (schema order)
/// followed by the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

pub fn load_csv(path: &Path, schema: &DatasetSchema, delimiter: u8) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let raw = read_csv(file, schema, delimiter)?;
    log::info!("loaded {} rows from {}", raw.n_rows(), path.display());
    Ok(raw)
}

/// Reads CSV from any source. Header names are matched after trimming;
/// columns not named by the schema are ignored.
pub fn read_csv<R: Read>(reader: R, schema: &DatasetSchema, delimiter: u8) -> Result<RawTable> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let index: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();

    let wanted: Vec<&str> = schema
        .feature_columns
        .iter()
        .map(|c| c.name.as_str())
        .chain(std::iter::once(schema.label_column.as_str()))
        .collect();
    let positions = wanted
        .iter()
        .map(|name| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row: i + 1,
                expected: header.len(),
                found: record.len(),
            });
        }
        rows.push(positions.iter().map(|&p| record[p].to_string()).collect());
    }
    Ok(RawTable {
        columns: wanted.into_iter().map(String::from).collect(),
        rows,
    })
}

/// Numeric feature matrix with binary labels (0 = normal, 1 = attack).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    features: DenseMatrix,
    feature_names: Vec<String>,
    labels: Vec<u8>,
}

impl DatasetTable {
    pub fn new(features: DenseMatrix, feature_names: Vec<String>, labels: Vec<u8>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Data("table has no rows".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() != feature_names.len() {
            return Err(Error::Shape(format!(
                "{} feature columns but {} names",
                features.cols(),
                feature_names.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(DatasetTable {
            features,
            feature_names,
            labels,
        })
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// (normal, attack) counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let attacks = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - attacks, attacks)
    }

    pub fn is_single_class(&self) -> bool {
        let (neg, pos) = self.class_counts();
        neg == 0 || pos == 0
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("empty row selection".into()));
        }
        Ok(DatasetTable {
            features: self.features.select_rows(rows),
            feature_names: self.feature_names.clone(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        })
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::Data("empty column selection".into()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.n_cols()) {
            return Err(Error::Shape(format!(
                "column {bad} out of range for {} columns",
                self.n_cols()
            )));
        }
        Ok(DatasetTable {
            features: self.features.select_columns(cols),
            feature_names: cols.iter().map(|&c| self.feature_names[c].clone()).collect(),
            labels: self.labels.clone(),
        })
    }

    /// Same rows and labels with a new feature matrix.
    pub fn with_features(&self, features: DenseMatrix, feature_names: Vec<String>) -> Result<Self> {
        DatasetTable::new(features, feature_names, self.labels.clone())
    }
}

/// Output of [`encode`]: the table plus bookkeeping about the conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTable {
    pub table: DatasetTable,
    /// Numeric cells that failed to parse (or were non-finite) and became 0.
    pub parse_warnings: usize,
    pub single_class: bool,
}

pub fn encode(raw: &RawTable, schema: &DatasetSchema) -> Result<EncodedTable> {
    schema.validate()?;
    let n_features = schema.feature_columns.len();
    if raw.columns.len() != n_features + 1 {
        return Err(Error::Shape(format!(
            "raw table has {} columns, schema expects {}",
            raw.columns.len(),
            n_features + 1
        )));
    }
    if raw.rows.is_empty() {
        return Err(Error::Data("dataset has zero rows".into()));
    }
    let n_rows = raw.rows.len();

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut parse_warnings = 0;
    for (j, col) in schema.feature_columns.iter().enumerate() {
        match col.kind {
            ColumnKind::Numeric => {
                let values = raw
                    .rows
                    .iter()
                    .map(|row| match row[j].trim().parse::<f64>() {
                        Ok(v) if v.is_finite() => v,
                        _ => {
                            parse_warnings += 1;
                            0.0
                        }
                    })
                    .collect();
                columns.push(values);
                names.push(col.name.clone());
            }
            ColumnKind::Categorical => {
                let (kept, has_other) = category_levels(raw.rows.iter().map(|r| r[j].trim()));
                let slot: HashMap<&str, usize> =
                    kept.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
                let width = kept.len() + usize::from(has_other);
                let mut indicators = vec![vec![0.0; n_rows]; width];
                for (i, row) in raw.rows.iter().enumerate() {
                    let s = slot.get(row[j].trim()).copied().unwrap_or(kept.len());
                    indicators[s][i] = 1.0;
                }
                columns.extend(indicators);
                names.extend(kept.iter().map(|c| format!("{}={}", col.name, c)));
                if has_other {
                    names.push(format!("{}=<other>", col.name));
                }
            }
        }
    }
    if parse_warnings > 0 {
        log::warn!("{parse_warnings} numeric cells could not be parsed and were set to 0");
    }

    let labels: Vec<u8> = raw
        .rows
        .iter()
        .map(|row| u8::from(schema.positive_label_values.contains(row[n_features].trim())))
        .collect();

    let n_cols = columns.len();
    let features = DenseMatrix::from_fn(n_rows, n_cols, |i, j| columns[j][i]);
    let table = DatasetTable::new(features, names, labels)?;
    let single_class = table.is_single_class();
    if single_class {
        log::warn!("dataset contains a single class");
    }
    Ok(EncodedTable {
        table,
        parse_warnings,
        single_class,
    })
}

/// Most frequent categories (ties by name), capped at [`CATEGORY_CAP`].
fn category_levels<'a>(values: impl Iterator<Item = &'a str>) -> (Vec<String>, bool) {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut levels: Vec<(&str, usize)> = counts.into_iter().collect();
    levels.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let has_other = levels.len() > CATEGORY_CAP;
    let kept = levels
        .into_iter()
        .take(CATEGORY_CAP)
        .map(|(c, _)| c.to_string())
        .collect();
    (kept, has_other)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-feature mean and population standard deviation over `training_rows`
/// only.
pub fn fit_normalizer(table: &DatasetTable, training_rows: &[usize]) -> Result<NormalizationStats> {
    if training_rows.is_empty() {
        return Err(Error::InvalidArgument(
            "normalizer needs at least one training row".into(),
        ));
    }
    let n = training_rows.len() as f64;
    let cols = table.n_cols();
    let mut mean = vec![0.0; cols];
    let mut std = vec![0.0; cols];
    for j in 0..cols {
        let column = training_rows.iter().map(|&i| table.features.get(i, j));
        let first = table.features.get(training_rows[0], j);
        if column.clone().all(|v| v == first) {
            // exact mean so constant columns normalize to exactly 0
            mean[j] = first;
            std[j] = STD_FLOOR;
            continue;
        }
        let m = column.clone().sum::<f64>() / n;
        let var = column.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[j] = m;
        std[j] = var.sqrt().max(STD_FLOOR);
    }
    Ok(NormalizationStats { mean, std })
}

pub fn apply_normalizer(table: &DatasetTable, stats: &NormalizationStats) -> Result<DatasetTable> {
    let cols = table.n_cols();
    if stats.mean.len() != cols || stats.std.len() != cols {
        return Err(Error::Shape(format!(
            "normalizer has {} columns, table has {cols}",
            stats.mean.len()
        )));
    }
    let f = &table.features;
    let features = DenseMatrix::from_fn(f.rows(), cols, |i, j| {
        (f.get(i, j) - stats.mean[j]) / stats.std[j]
    });
    if !features.is_finite() {
        return Err(Error::Numeric("normalization produced non-finite values".into()));
    }
    table.with_features(features, table.feature_names.clone())
}

/// Assignment of every row to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

/// Train/test row indices, both ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl FoldPlan {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        self.rows_where(|f| f == fold)
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        self.rows_where(|f| f != fold)
    }

    pub fn split(&self, fold: usize) -> Split {
        Split {
            train: self.train_rows(fold),
            test: self.test_rows(fold),
        }
    }

    fn rows_where(&self, pred: impl Fn(usize) -> bool) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &f)| pred(f))
            .map(|(i, _)| i)
            .collect()
    }
}

fn class_indices(labels: &[u8]) -> [Vec<usize>; 2] {
    let mut classes = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        classes[usize::from(l != 0)].push(i);
    }
    classes
}

/// Stratified k-fold: each class is shuffled with a seeded PRNG and dealt
/// round-robin across folds. The deal continues where the previous class
/// stopped so overall fold sizes stay balanced too.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![0; labels.len()];
    let mut next_fold = 0;
    for (class, mut members) in class_indices(labels).into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} rows, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for row in members {
            assignments[row] = next_fold;
            next_fold = (next_fold + 1) % k;
        }
    }
    if labels.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} rows cannot fill {k} folds",
            labels.len()
        )));
    }
    Ok(FoldPlan {
        k,
        assignments,
        seed,
    })
}

/// Seeded stratified subsample of `n` row indices (ascending). Class quotas
/// are proportional, rounded by largest remainder.
pub fn stratified_sample(labels: &[u8], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    if n >= labels.len() {
        return Ok((0..labels.len()).collect());
    }
    let classes = class_indices(labels);
    let total = labels.len() as f64;
    let exact: Vec<f64> = classes
        .iter()
        .map(|c| c.len() as f64 * n as f64 / total)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let short = n - quota.iter().sum::<usize>();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().take(short) {
        quota[c] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n);
    for (mut members, q) in classes.into_iter().zip(quota) {
        members.shuffle(&mut rng);
        picked.extend(members.into_iter().take(q));
    }
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy_schema() -> DatasetSchema {
        DatasetSchema {
            name: "toy".into(),
            feature_columns: vec![
                FeatureColumn::numeric("bytes"),
                FeatureColumn::categorical("proto"),
            ],
            label_column: "label".into(),
            positive_label_values: ["Mirai".to_string()].into_iter().collect(),
        }
    }

    fn table(cols: &[&[f64]], labels: &[u8]) -> DatasetTable {
        let n = labels.len();
        let m = DenseMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        let names = (0..cols.len()).map(|j| format!("f{j}")).collect();
        DatasetTable::new(m, names, labels.to_vec()).unwrap()
    }

    #[test]
    fn reads_three_rows_in_any_header_order() {
        let csv = "label,proto,bytes,extra\nNormal,tcp,10,a\nMirai,udp,20,b\nNormal,tcp,30,c\n";
        let raw = read_csv(csv.as_bytes(), &toy_schema(), b',').unwrap();
        assert_eq!(raw.n_rows(), 3);
        assert_eq!(raw.columns, vec!["bytes", "proto", "label"]);
        assert_eq!(raw.rows[1], vec!["20", "udp", "Mirai"]);
    }

    #[test]
    fn missing_label_column_is_named() {
        let csv = "proto,bytes\ntcp,1\n";
        match read_csv(csv.as_bytes(), &toy_schema(), b',') {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "label"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_row_reports_row_number() {
        let csv = "bytes,proto,label\n1,tcp,Normal\n2,udp\n";
        match read_csv(csv.as_bytes(), &toy_schema(), b',') {
            Err(Error::RaggedRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semicolon_delimiter() {
        let csv = "bytes;proto;label\n1;tcp;Normal\n";
        let raw = read_csv(csv.as_bytes(), &toy_schema(), b';').unwrap();
        assert_eq!(raw.rows[0], vec!["1", "tcp", "Normal"]);
    }

    #[test]
    fn one_hot_and_label_mapping() {
        let csv = "bytes,proto,label\n1,tcp,Normal\n2,udp,Mirai\n3,tcp,Normal\n";
        let raw = read_csv(csv.as_bytes(), &toy_schema(), b',').unwrap();
        let enc = encode(&raw, &toy_schema()).unwrap();
        let t = &enc.table;
        assert_eq!(t.feature_names(), &["bytes", "proto=tcp", "proto=udp"]);
        assert_eq!(t.row(0), &[1.0, 1.0, 0.0]);
        assert_eq!(t.row(1), &[2.0, 0.0, 1.0]);
        assert_eq!(t.row(2), &[3.0, 1.0, 0.0]);
        assert_eq!(t.labels(), &[0, 1, 0]);
        assert!(!enc.single_class);
    }

    #[test]
    fn unparseable_numeric_becomes_zero_with_warning() {
        let csv = "bytes,proto,label\n1.5,tcp,Normal\nx,tcp,Mirai\n2,tcp,Normal\n";
        let raw = read_csv(csv.as_bytes(), &toy_schema(), b',').unwrap();
        let enc = encode(&raw, &toy_schema()).unwrap();
        assert_eq!(enc.parse_warnings, 1);
        let col: Vec<f64> = (0..3).map(|i| enc.table.row(i)[0]).collect();
        assert_eq!(col, vec![1.5, 0.0, 2.0]);
    }

    #[test]
    fn single_class_flagged_not_rejected() {
        let csv = "bytes,proto,label\n1,tcp,Normal\n2,udp,Normal\n";
        let raw = read_csv(csv.as_bytes(), &toy_schema(), b',').unwrap();
        assert!(encode(&raw, &toy_schema()).unwrap().single_class);
    }

    #[test]
    fn zero_rows_rejected() {
        let raw = read_csv("bytes,proto,label\n".as_bytes(), &toy_schema(), b',').unwrap();
        assert!(matches!(encode(&raw, &toy_schema()), Err(Error::Data(_))));
    }

    #[test]
    fn category_cap_buckets_tail() {
        let mut csv = String::from("bytes,proto,label\n");
        for i in 0..40 {
            // p0 appears most often, then p1, ...
            for _ in 0..(41 - i) {
                csv.push_str(&format!("1,p{i:02},Normal\n"));
            }
        }
        let raw = read_csv(csv.as_bytes(), &toy_schema(), b',').unwrap();
        let enc = encode(&raw, &toy_schema()).unwrap();
        assert_eq!(enc.table.n_cols(), 1 + CATEGORY_CAP + 1);
        assert_eq!(enc.table.feature_names().last().unwrap(), "proto=<other>");
        assert_eq!(enc.table.feature_names()[1], "proto=p00");
    }

    #[test]
    fn schema_invariants() {
        let mut s = toy_schema();
        s.feature_columns.push(FeatureColumn::numeric("label"));
        assert!(s.validate().is_err());
        let mut s = toy_schema();
        s.feature_columns.push(FeatureColumn::numeric("bytes"));
        assert!(s.validate().is_err());
        let mut s = toy_schema();
        s.feature_columns.clear();
        assert!(s.validate().is_err());
        for name in DatasetSchema::preset_names() {
            DatasetSchema::preset(name).unwrap();
        }
        assert!(DatasetSchema::preset("kdd99").is_err());
    }

    #[test]
    fn normalizer_population_std() {
        let t = table(&[&[2.0, 4.0, 6.0]], &[0, 1, 0]);
        let stats = fit_normalizer(&t, &[0, 1, 2]).unwrap();
        assert_abs_diff_eq!(stats.mean[0], 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(stats.std[0], (8.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(stats.std[0], 1.63299, epsilon = 1e-5);
    }

    #[test]
    fn constant_column_floors_std() {
        let t = table(&[&[0.1, 0.1, 0.1]], &[0, 1, 0]);
        let stats = fit_normalizer(&t, &[0, 1, 2]).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        let n = apply_normalizer(&t, &stats).unwrap();
        assert!((0..3).all(|i| n.row(i)[0] == 0.0));
    }

    #[test]
    fn empty_training_rows_rejected() {
        let t = table(&[&[1.0]], &[0]);
        assert!(fit_normalizer(&t, &[]).is_err());
    }

    #[test]
    fn apply_centers_and_scales() {
        let t = table(&[&[4.0, 6.0]], &[0, 1]);
        let stats = NormalizationStats {
            mean: vec![4.0],
            std: vec![2.0],
        };
        let n = apply_normalizer(&t, &stats).unwrap();
        assert_eq!(n.row(0)[0], 0.0);
        assert_eq!(n.row(1)[0], 1.0);
        let bad = NormalizationStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        assert!(matches!(apply_normalizer(&t, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn normalize_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DenseMatrix::from_fn(10, 4, |_, _| rng.random_range(-50.0..50.0));
        let t = DatasetTable::new(m, (0..4).map(|j| j.to_string()).collect(), vec![0; 10]).unwrap();
        let stats = fit_normalizer(&t, &(0..10).collect::<Vec<_>>()).unwrap();
        let n = apply_normalizer(&t, &stats).unwrap();
        for i in 0..10 {
            for j in 0..4 {
                let back = n.features().get(i, j) * stats.std[j] + stats.mean[j];
                assert_abs_diff_eq!(back, t.features().get(i, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn stats_ignore_test_rows() {
        let t = table(&[&[1.0, 2.0, 3.0, 100.0, -7.0]], &[0, 1, 0, 1, 0]);
        let mut swapped = t.features().clone();
        swapped.set(3, 0, 55.5);
        swapped.set(4, 0, 1e6);
        let t2 = t.with_features(swapped, t.feature_names().to_vec()).unwrap();
        assert_eq!(
            fit_normalizer(&t, &[0, 1, 2]).unwrap(),
            fit_normalizer(&t2, &[0, 1, 2]).unwrap()
        );
    }

    #[test]
    fn kfold_perfect_stratification() {
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let plan = stratified_kfold(&labels, 5, 9).unwrap();
        for f in 0..5 {
            let test = plan.test_rows(f);
            assert_eq!(test.len(), 2);
            let ones = test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(ones, 1);
        }
        assert_eq!(plan, stratified_kfold(&labels, 5, 9).unwrap());
    }

    #[test]
    fn kfold_uneven_classes() {
        // 7 zeros dealt over 4 folds -> sizes {2,2,2,1}; 5 ones -> {2,1,1,1}
        let labels = [0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let plan = stratified_kfold(&labels, 4, 1).unwrap();
        for class in 0..2u8 {
            let mut sizes = vec![0; 4];
            for (i, &f) in plan.assignments.iter().enumerate() {
                if labels[i] == class {
                    sizes[f] += 1;
                }
            }
            assert!(sizes.iter().all(|s| (1..=2).contains(s)), "{sizes:?}");
        }
    }

    #[test]
    fn kfold_errors() {
        assert!(stratified_kfold(&[0, 1, 0, 1], 1, 0).is_err());
        assert!(stratified_kfold(&[0, 0, 0, 1, 1], 3, 0).is_err());
    }

    #[test]
    fn stratified_sample_keeps_proportions() {
        let labels: Vec<u8> = (0..1000).map(|i| u8::from(i % 4 == 0)).collect();
        let rows = stratified_sample(&labels, 100, 5).unwrap();
        assert_eq!(rows.len(), 100);
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(rows.iter().filter(|&&i| labels[i] == 1).count(), 25);
        assert_eq!(rows, stratified_sample(&labels, 100, 5).unwrap());
    }

    proptest! {
        #[test]
        fn fold_plan_invariants(
            labels in proptest::collection::vec(0u8..2, 20..120),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let counts = class_indices(&labels);
            prop_assume!(counts.iter().all(|c| c.len() >= k));
            let plan = stratified_kfold(&labels, k, seed).unwrap();
            prop_assert_eq!(plan.assignments.len(), labels.len());
            let mut covered = vec![0; labels.len()];
            for f in 0..k {
                for i in plan.test_rows(f) { covered[i] += 1; }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
            for class in 0..2u8 {
                let mut sizes = vec![0usize; k];
                for (i, &f) in plan.assignments.iter().enumerate() {
                    if labels[i] == class { sizes[f] += 1; }
                }
                let lo = *sizes.iter().min().unwrap();
                let hi = *sizes.iter().max().unwrap();
                prop_assert!(hi - lo <= 1);
            }
            prop_assert_eq!(plan, stratified_kfold(&labels, k, seed).unwrap());
        }

        #[test]
        fn encode_never_emits_non_finite(
            cells in proptest::collection::vec(
                prop_oneof![
                    any::<f64>().prop_map(|v| v.to_string()),
                    "[a-z ]{0,4}",
                    Just("NaN".to_string()),
                    Just("inf".to_string()),
                    Just("-".to_string()),
                ],
                1..40,
            ),
        ) {
            let raw = RawTable {
                columns: vec!["bytes".into(), "proto".into(), "label".into()],
                rows: cells.iter().map(|c| vec![c.clone(), c.clone(), "Normal".into()]).collect(),
            };
            let a = encode(&raw, &toy_schema()).unwrap();
            prop_assert!(a.table.features().is_finite());
            prop_assert_eq!(a, encode(&raw, &toy_schema()).unwrap());
        }
    }
}
