mod common;

use std::collections::HashMap;

use rand::Rng;

use flowsense::ingest::DatasetTable;
use flowsense::linalg::DenseMatrix;
use flowsense::nn::{
    self, Activation, LayerSpec, LstmCell, LstmState, Model, ModelSpec, Tensor, TrainConfig,
};

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `W x` for a row-major `rows × cols` tensor.
fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.values().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Straightforward forward pass of an LSTM classifier, written against the
/// parameter names only.
fn reference_lstm_classifier(model: &Model, x: &[f64], channels: usize) -> f64 {
    let p: HashMap<String, &Tensor> = model.parameters().into_iter().collect();
    let g = |name: &str| p[&format!("0.lstm.{name}")];
    let hidden = g("bi").len();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for step in x.chunks(channels) {
        let gate = |w: &str, u: &str, b: &str| add(&add(&matvec(g(w), step), &matvec(g(u), &h)), g(b).values());
        let i: Vec<f64> = gate("Wi", "Ui", "bi").into_iter().map(sig).collect();
        let f: Vec<f64> = gate("Wf", "Uf", "bf").into_iter().map(sig).collect();
        let o: Vec<f64> = gate("Wo", "Uo", "bo").into_iter().map(sig).collect();
        let cand: Vec<f64> = gate("Wc", "Uc", "bc").into_iter().map(f64::tanh).collect();
        for k in 0..hidden {
            c[k] = f[k] * c[k] + i[k] * cand[k];
            h[k] = o[k] * c[k].tanh();
        }
    }
    let w = p["1.output.weight"];
    let b = p["1.output.bias"].values()[0];
    sig(matvec(w, &h)[0] + b)
}

#[test]
fn lstm_classifier_matches_reference_forward() {
    for (width, channels, hidden, seed) in [(5, 1, 4, 1), (6, 2, 3, 2), (12, 3, 5, 3)] {
        let spec = ModelSpec {
            input_width: width,
            input_channels: channels,
            layers: vec![LayerSpec::Lstm { hidden_size: hidden }, LayerSpec::SigmoidOutput],
        };
        let mut model = Model::init(&spec, seed).unwrap();
        // non-zero biases so every parameter matters
        let mut r = common::rng(seed);
        for t in model.parameters_mut() {
            for v in t.values_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        let batch = DenseMatrix::from_fn(7, width, |_, _| r.random_range(-2.0..2.0));
        let got = nn::model_forward(&model, &batch).unwrap();
        for (i, g) in got.iter().enumerate() {
            let want = reference_lstm_classifier(&model, batch.row(i), channels);
            assert!((g - want).abs() < 1e-12, "row {i}: {g} vs {want}");
        }
    }
}

#[test]
fn saved_model_file_reproduces_forward() {
    let spec = ModelSpec::lstm_classifier(4, 3);
    let model = Model::init(&spec, 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.mgnn");
    nn::save_tensors(&path, &model.to_tensors()).unwrap();
    let loaded = Model::from_tensors(&nn::load_tensors(&path).unwrap()).unwrap();
    assert_eq!(loaded, model);
    let x = DenseMatrix::from_rows(&[vec![0.1, -0.4, 1.3, 0.0], vec![2.0, 2.0, -1.0, 0.5]]).unwrap();
    let got = nn::model_forward(&loaded, &x).unwrap();
    for (i, g) in got.iter().enumerate() {
        assert_eq!(g.to_bits(), reference_lstm_classifier(&model, x.row(i), 1).to_bits());
    }
}

/// Plain evaluation of conv1d (same padding) → dense → sigmoid output.
fn reference_cnn(model: &Model, x: &[f64]) -> f64 {
    let p: HashMap<String, &Tensor> = model.parameters().into_iter().collect();
    let (cw, cb) = (p["0.conv1d.weight"], p["0.conv1d.bias"]);
    let (filters, kernel) = (cw.shape()[0], cw.shape()[1]);
    let len = x.len();
    let mut feature_map = vec![0.0; len * filters];
    for t in 0..len {
        for f in 0..filters {
            let mut z = cb.values()[f];
            for j in 0..kernel {
                let src = t as isize + j as isize - (kernel / 2) as isize;
                if src >= 0 && (src as usize) < len {
                    z += cw.values()[f * kernel + j] * x[src as usize];
                }
            }
            feature_map[t * filters + f] = z.max(0.0);
        }
    }
    let hidden: Vec<f64> = add(&matvec(p["1.dense.weight"], &feature_map), p["1.dense.bias"].values())
        .into_iter()
        .map(|z| z.max(0.0))
        .collect();
    sig(matvec(p["2.output.weight"], &hidden)[0] + p["2.output.bias"].values()[0])
}

#[test]
fn selection_cnn_matches_reference_forward() {
    let spec = ModelSpec::selection_cnn(7);
    let mut model = Model::init(&spec, 4).unwrap();
    let mut r = common::rng(9);
    for t in model.parameters_mut() {
        for v in t.values_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let batch = DenseMatrix::from_fn(5, 7, |_, _| r.random_range(-2.0..2.0));
    let got = nn::model_forward(&model, &batch).unwrap();
    for (i, g) in got.iter().enumerate() {
        let want = reference_cnn(&model, batch.row(i));
        assert!((g - want).abs() < 1e-12, "row {i}: {g} vs {want}");
    }
}

#[test]
fn outputs_stay_in_open_unit_interval() {
    let mut r = common::rng(5);
    for seed in 0..20 {
        let spec = ModelSpec::lstm_classifier(6, 5);
        let model = Model::init(&spec, seed).unwrap();
        let batch = DenseMatrix::from_fn(10, 6, |_, _| r.random_range(-5.0..5.0));
        for p in nn::model_forward(&model, &batch).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }
}

#[test]
fn random_cells_stay_bounded_and_finite() {
    let mut r = common::rng(6);
    for _ in 0..1000 {
        let (d, h) = (r.random_range(1..=4), r.random_range(1..=5));
        let mut cell = LstmCell::zeros(d, h);
        for t in [
            &mut cell.wi, &mut cell.ui, &mut cell.bi, &mut cell.wf, &mut cell.uf, &mut cell.bf,
            &mut cell.wo, &mut cell.uo, &mut cell.bo, &mut cell.wc, &mut cell.uc, &mut cell.bc,
        ] {
            for v in t.values_mut() {
                *v = r.random_range(-10.0..10.0);
            }
        }
        let seq: Vec<Vec<f64>> = (0..r.random_range(1..=6))
            .map(|_| (0..d).map(|_| r.random_range(-10.0..10.0)).collect())
            .collect();
        let mut state = LstmState::zeros(h);
        for x in &seq {
            let next = nn::lstm_cell_forward(x, &state, &cell).unwrap();
            for k in 0..h {
                assert!(next.c[k].is_finite() && next.h[k].is_finite());
                // |h| < 1 because o ∈ (0,1) and |tanh| < 1; |c| grows by < 1 per step
                assert!(next.h[k].abs() <= 1.0);
                assert!((next.c[k] - state.c[k]).abs() <= 1.0 + state.c[k].abs());
            }
            state = next;
        }
    }
}

#[test]
fn two_step_scalar_sequence_chains_hand_values() {
    let mut cell = LstmCell::zeros(1, 1);
    for t in [&mut cell.wi, &mut cell.wf, &mut cell.wo, &mut cell.wc] {
        t.values_mut()[0] = 1.0;
    }
    let s = nn::lstm_forward(&[vec![0.5], vec![0.5]], &cell).unwrap();
    let g = sig(0.5);
    let c1 = g * 0.5f64.tanh();
    let c2 = g * c1 + g * 0.5f64.tanh();
    assert!((s.c[0] - c2).abs() < 1e-12);
    assert!((s.h[0] - g * c2.tanh()).abs() < 1e-12);
}

#[test]
fn bptt_matches_finite_differences_on_small_models() {
    let mut r = common::rng(8);
    for case in 0..12 {
        let d = r.random_range(1..=4);
        let h = r.random_range(1..=5);
        let len = r.random_range(1..=6);
        let mut layers = vec![LayerSpec::Lstm { hidden_size: h }];
        if case % 2 == 1 {
            layers.push(LayerSpec::Dense {
                units: 3,
                activation: Activation::Tanh,
            });
        }
        layers.push(LayerSpec::SigmoidOutput);
        let spec = ModelSpec {
            input_width: d * len,
            input_channels: d,
            layers,
        };
        let model = Model::init(&spec, case).unwrap();
        let batch = DenseMatrix::from_fn(6, d * len, |_, _| r.random_range(-1.5..1.5));
        let labels: Vec<u8> = (0..6).map(|i| (i % 2) as u8).collect();
        let err = nn::gradient_check(&model, &batch, &labels, 1e-5).unwrap();
        assert!(err < 1e-5, "d={d} h={h} len={len}: {err:e}");
    }
}

#[test]
fn gradient_check_is_deterministic() {
    let model = Model::init(&ModelSpec::lstm_classifier(3, 2), 12).unwrap();
    let batch = DenseMatrix::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.3);
    let a = nn::gradient_check(&model, &batch, &[0, 1, 1, 0], 1e-5).unwrap();
    let b = nn::gradient_check(&model, &batch, &[0, 1, 1, 0], 1e-5).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

fn separable(n: usize, seed: u64) -> DatasetTable {
    let mut r = common::rng(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 2) as u8;
        let side = if y == 1 { 1.0 } else { -1.0 };
        let x0: f64 = r.random_range(0.3..2.0) * side;
        let x1: f64 = r.random_range(-1.0..1.0);
        rows.push(vec![x0 + 0.2 * x1, x1]);
        labels.push(y);
    }
    DatasetTable::new(DenseMatrix::from_rows(&rows).unwrap(), vec!["a".into(), "b".into()], labels).unwrap()
}

fn fast_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 16,
        learning_rate: 1e-2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn learns_linearly_separable_set() {
    let table = separable(200, 1);
    let spec = ModelSpec::lstm_classifier(2, 8);
    let trained = nn::train(&spec, &table, &fast_config(3)).unwrap();
    assert_eq!(trained.history.len(), 6);
    let last = trained.history.last().unwrap();
    assert!(last.accuracy >= 0.95, "{:?}", trained.history);
    assert!(last.loss <= trained.history[0].loss);

    let probs = nn::model_forward(&trained.model, table.features()).unwrap();
    let correct = probs
        .iter()
        .zip(table.labels())
        .filter(|(p, &y)| (**p >= 0.5) == (y == 1))
        .count();
    assert!(correct as f64 / 200.0 >= 0.95);
}

#[test]
fn default_settings_reduce_loss() {
    let table = separable(200, 2);
    let trained = nn::train(
        &ModelSpec::lstm_classifier(2, 8),
        &table,
        &TrainConfig {
            seed: 5,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert!(trained.history[5].loss <= trained.history[0].loss, "{:?}", trained.history);
}

#[test]
fn training_is_reproducible() {
    let table = separable(120, 4);
    let spec = ModelSpec::lstm_classifier(2, 4);
    let a = nn::train(&spec, &table, &fast_config(11)).unwrap();
    let b = nn::train(&spec, &table, &fast_config(11)).unwrap();
    assert_eq!(a.history, b.history);
    for ((na, ta), (nb, tb)) in a.model.to_tensors().iter().zip(b.model.to_tensors().iter()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
    }
    let c = nn::train(&spec, &table, &fast_config(12)).unwrap();
    assert_ne!(a.model, c.model);
}
