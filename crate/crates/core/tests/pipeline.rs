mod common;

use std::path::PathBuf;

use flowsense::eval::MetricsReport;
use flowsense::ingest::{self, DatasetTable};
use flowsense::linalg::DenseMatrix;
use flowsense::nn::{self, ModelSpec, TrainConfig};
use flowsense::pipeline::{
    self, Baseline, DatasetSummary, ExperimentConfig, FoldSeeds, ReportDocument, SelectionMethod,
};
use flowsense::Error;

fn summary(table: &DatasetTable) -> DatasetSummary {
    let (normal, attack) = table.class_counts();
    DatasetSummary {
        schema: "synthetic".into(),
        rows: table.n_rows(),
        features: table.n_cols(),
        normal,
        attack,
        parse_warnings: 0,
        single_class: false,
    }
}

fn plain_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        k_folds: 4,
        repetitions: 2,
        seed: 5,
        ..ExperimentConfig::default()
    };
    cfg.svd.enabled = false;
    cfg.selection.method = SelectionMethod::None;
    cfg.model.hidden_size = 8;
    cfg.train = TrainConfig {
        epochs: 6,
        batch_size: 16,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    cfg
}

/// Two informative features, the rest noise; every stage has work to do.
fn full_config() -> ExperimentConfig {
    let mut cfg = plain_config();
    cfg.svd.enabled = true;
    cfg.svd.rank = 3;
    cfg.svd.oversampling = 2;
    cfg.svd.power_iterations = 1;
    cfg.selection.method = SelectionMethod::Chi2ThenAblation;
    cfg.selection.top_m = 2;
    cfg.selection.validation_folds = 3;
    cfg.selection.network.epochs = 3;
    cfg
}

fn separable_table() -> DatasetTable {
    common::blobs_table(240, 2, 31)
}

#[test]
fn separable_data_through_the_plain_pipeline() {
    let table = separable_table();
    let (doc, _) = pipeline::run_on_table(&table, summary(&table), &plain_config()).unwrap();
    let acc = doc.overall.accuracy.unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
    assert_eq!(doc.repetitions.len(), 2);
    assert!(doc.repetitions.iter().all(|r| r.folds.len() == 4));
}

#[test]
fn all_stages_on_a_noisy_table() {
    let table = common::blobs_table(240, 6, 32);
    let (doc, timings) = pipeline::run_on_table(&table, summary(&table), &full_config()).unwrap();
    assert!(doc.overall.accuracy.unwrap() >= 0.9);
    for rep in &doc.repetitions {
        for fold in &rep.folds {
            assert!(!fold.selected_features.is_empty());
            assert!(fold.selected_features.iter().all(|f| f.starts_with("svd_")));
        }
    }
    for stage in ["preprocess", "train", "evaluate"] {
        assert!(timings.stages.contains_key(stage));
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let table = common::blobs_table(150, 5, 33);
    let cfg = full_config();
    let (a, _) = pipeline::run_on_table(&table, summary(&table), &cfg).unwrap();
    let (b, _) = pipeline::run_on_table(&table, summary(&table), &cfg).unwrap();
    assert_eq!(pipeline::report_json(&a).unwrap(), pipeline::report_json(&b).unwrap());
    assert_eq!(pipeline::metrics_csv(&a), pipeline::metrics_csv(&b));
    assert_eq!(pipeline::chart_data_csv(&a), pipeline::chart_data_csv(&b));
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}

/// Set `FLOWSENSE_BLESS=1` to regenerate the golden files after an
/// intentional output change.
#[test]
fn emitted_files_match_golden_copies() {
    let table = common::blobs_table(120, 5, 34);
    let mut cfg = full_config();
    cfg.k_folds = 3;
    let (doc, _) = pipeline::run_on_table(&table, summary(&table), &cfg).unwrap();
    let out = tempfile::tempdir().unwrap();
    let files = pipeline::emit_report(&doc, out.path()).unwrap();
    assert_eq!(files.len(), 3);
    let golden = golden_dir();
    if std::env::var_os("FLOWSENSE_BLESS").is_some() {
        std::fs::create_dir_all(&golden).unwrap();
        for f in &files {
            std::fs::copy(f, golden.join(f.file_name().unwrap())).unwrap();
        }
    }
    for f in &files {
        let name = f.file_name().unwrap();
        let want = std::fs::read_to_string(golden.join(name)).unwrap();
        let got = std::fs::read_to_string(f).unwrap();
        assert!(got == want, "{} differs from its golden copy", name.to_string_lossy());
    }
}

#[test]
fn metrics_csv_has_one_row_per_fold() {
    let table = separable_table();
    let mut cfg = plain_config();
    cfg.repetitions = 3;
    cfg.k_folds = 5;
    let (doc, _) = pipeline::run_on_table(&table, summary(&table), &cfg).unwrap();
    let csv = pipeline::metrics_csv(&doc);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "repetition,fold,fpr,frr,accuracy,precision,recall,f_measure,tp,fp,tn,fn,threshold"
    );
    assert_eq!(lines.count(), 15);
}

#[test]
fn report_survives_a_generic_json_parser() {
    let table = separable_table();
    let (doc, _) = pipeline::run_on_table(&table, summary(&table), &plain_config()).unwrap();
    let text = pipeline::report_json(&doc).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let back: ReportDocument = serde_json::from_value(value.clone()).unwrap();
    assert_eq!(back, doc);
    assert_eq!(pipeline::report_json(&back).unwrap(), text);
    let reparsed: serde_json::Value = serde_json::from_str(&pipeline::report_json(&back).unwrap()).unwrap();
    assert_eq!(reparsed, value);
    // top-level keys appear in declaration order
    let order = ["software", "seed", "config", "dataset", "repetitions", "overall", "baselines"];
    let positions: Vec<usize> = order
        .iter()
        .map(|k| text.find(&format!("\n  \"{k}\":")).unwrap())
        .collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn skipped_stages_reduce_to_direct_module_calls() {
    let table = common::blobs_table(160, 3, 35);
    let mut cfg = plain_config();
    cfg.repetitions = 1;
    let (doc, _) = pipeline::run_on_table(&table, summary(&table), &cfg).unwrap();

    let plan = ingest::stratified_kfold(table.labels(), cfg.k_folds, cfg.seed).unwrap();
    for fold in 0..cfg.k_folds {
        let split = plan.split(fold);
        let stats = ingest::fit_normalizer(&table, &split.train).unwrap();
        let train = ingest::apply_normalizer(&table.select_rows(&split.train).unwrap(), &stats).unwrap();
        let test = ingest::apply_normalizer(&table.select_rows(&split.test).unwrap(), &stats).unwrap();
        let train_cfg = TrainConfig {
            seed: FoldSeeds::derive(cfg.seed, fold).train,
            ..cfg.train
        };
        let spec = ModelSpec::lstm_classifier(train.n_cols(), cfg.model.hidden_size);
        let trained = nn::train(&spec, &train, &train_cfg).unwrap();
        let probs = nn::model_forward(&trained.model, test.features()).unwrap();
        let direct = MetricsReport::evaluate(test.labels(), &probs, cfg.threshold).unwrap();
        assert_eq!(doc.repetitions[0].summary.folds[fold], direct, "fold {fold}");
        assert_eq!(doc.repetitions[0].folds[fold].history, trained.history);
    }
}

#[test]
fn fitted_detector_round_trips_through_a_file() {
    let table = common::blobs_table(120, 6, 36);
    let rows: Vec<usize> = (0..100).collect();
    let cfg = full_config();
    let detector = pipeline::fit_detector(&table, &rows, &cfg, FoldSeeds::derive(1, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mgnn");
    detector.save(&path).unwrap();
    let loaded = pipeline::FittedDetector::load(&path).unwrap();
    // the file keeps what `transform` needs; U and the selection reports stay behind
    let (a, b) = (&loaded.preprocessor, &detector.preprocessor);
    assert_eq!(a.normalizer, b.normalizer);
    assert_eq!(a.selected, b.selected);
    let (sa, sb) = (a.svd.as_ref().unwrap(), b.svd.as_ref().unwrap());
    assert_eq!(sa.v, sb.v);
    assert_eq!(loaded.model, detector.model);
    let held_out = table.select_rows(&(100..120).collect::<Vec<_>>()).unwrap();
    assert_eq!(loaded.predict(&held_out).unwrap(), detector.predict(&held_out).unwrap());
}

#[test]
fn stage_errors_name_the_stage_and_fold() {
    let table = separable_table();
    let mut cfg = plain_config();
    cfg.svd.enabled = true;
    cfg.svd.rank = 5;
    let err = pipeline::run_on_table(&table, summary(&table), &cfg).unwrap_err();
    match &err {
        Error::Stage { stage, fold, .. } => {
            assert_eq!(*stage, "svd");
            assert_eq!(*fold, 0);
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("svd"));
}

#[test]
fn class_too_small_for_the_fold_count_is_reported() {
    let x = DenseMatrix::from_fn(12, 2, |i, j| (i + j) as f64);
    let mut labels = vec![0u8; 12];
    labels[0] = 1;
    labels[1] = 1;
    let table = DatasetTable::new(x, vec!["a".into(), "b".into()], labels).unwrap();
    assert!(pipeline::run_on_table(&table, summary(&table), &plain_config()).is_err());
}

#[test]
fn baseline_rows() {
    let rows = pipeline::compare_baselines(0.955, &pipeline::default_baselines());
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["method21", "method19", "ours"]);
    assert!((rows[0].delta - 0.021).abs() < 1e-12);
    assert!((rows[1].delta - 0.010).abs() < 1e-12);
    assert_eq!(rows[2].delta, 0.0);

    let tie = pipeline::compare_baselines(0.945, &pipeline::default_baselines());
    assert_eq!(tie[1].delta, 0.0);

    let alone = pipeline::compare_baselines(0.9, &[]);
    assert_eq!(alone.len(), 1);
    assert_eq!(alone[0].name, "ours");

    let custom = pipeline::compare_baselines(
        0.5,
        &[Baseline {
            name: "coin".into(),
            accuracy: 0.5,
        }],
    );
    assert_eq!(custom[0].delta, 0.0);
}

#[test]
fn csv_dataset_with_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flows.csv");
    common::write_flow_csv(&csv, 300, 2);
    let cfg = ExperimentConfig::from_json(&format!(
        r#"{{
            "dataset": {{
                "path": {path:?},
                "schema": {{
                    "name": "flows",
                    "feature_columns": [
                        {{"name": "dur", "kind": "numeric"}},
                        {{"name": "sbytes", "kind": "numeric"}},
                        {{"name": "proto", "kind": "categorical"}}
                    ],
                    "label_column": "label",
                    "positive_label_values": ["1"]
                }}
            }},
            "sample_rows": 90
        }}"#,
        path = csv.display().to_string()
    ))
    .unwrap();
    let (table, s) = pipeline::load_dataset(&cfg).unwrap();
    assert_eq!(table.n_rows(), 90);
    assert_eq!(s.rows, 90);
    assert_eq!((s.normal, s.attack), (60, 30));
    let names = table.feature_names();
    assert_eq!(&names[..2], ["dur", "sbytes"]);
    let mut protos: Vec<&str> = names[2..].iter().map(String::as_str).collect();
    protos.sort_unstable();
    assert_eq!(protos, ["proto=icmp", "proto=tcp", "proto=udp"]);
}
