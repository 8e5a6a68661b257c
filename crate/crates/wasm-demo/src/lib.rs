//! Browser bindings for three small, self-contained flowsense operations.
//!
//! Every exported function returns a JSON string so the page can stay
//! plain JavaScript. The `*_json` functions hold the logic and are plain
//! Rust, which keeps them testable off the browser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use flowsense::eval::MetricsReport;
use flowsense::linalg::{self, DenseMatrix, RsvdConfig};
use flowsense::nn::{self, LstmCell, LstmState, Tensor};

/// Largest matrix side the demo accepts, to keep the page responsive.
pub const MAX_SIDE: usize = 400;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn relative_residual(a: &DenseMatrix, f: &linalg::SvdFactors) -> flowsense::Result<f64> {
    Ok(a.sub(&f.reconstruct())?.frobenius_norm() / a.frobenius_norm())
}

/// Compares randomized and exact singular values of a rank-`rank` matrix
/// with additive Gaussian noise of scale `noise`.
#[allow(clippy::too_many_arguments)]
pub fn svd_spectrum_json(
    rows: usize,
    cols: usize,
    rank: usize,
    noise: f64,
    k: usize,
    p: usize,
    q: usize,
    seed: u64,
) -> Result<Value, String> {
    if rows == 0 || cols == 0 || rows > MAX_SIDE || cols > MAX_SIDE {
        return Err(format!("matrix sides must be between 1 and {MAX_SIDE}"));
    }
    if rank == 0 || !(noise.is_finite() && noise >= 0.0) {
        return Err("rank must be positive and noise a non-negative number".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = gaussian(rows, rank, &mut rng);
    let right = gaussian(rank, cols, &mut rng);
    let signal = linalg::matmul(&left, &right).map_err(|e| e.to_string())?;
    let jitter = gaussian(rows, cols, &mut rng);
    let a = DenseMatrix::from_fn(rows, cols, |i, j| signal.get(i, j) + noise * jitter.get(i, j));

    let cfg = RsvdConfig { k, p, q, seed };
    let approx = linalg::randomized_svd(&a, &cfg).map_err(|e| e.to_string())?;
    let exact = linalg::svd_oracle(&a).map_err(|e| e.to_string())?;
    let best = exact.truncate(k);
    Ok(json!({
        "randomized": approx.s,
        "exact": exact.s,
        "residual_randomized": relative_residual(&a, &approx).map_err(|e| e.to_string())?,
        "residual_optimal": relative_residual(&a, &best).map_err(|e| e.to_string())?,
    }))
}

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1, 1], vec![v]).expect("1x1 tensor")
}

fn scalar_cell(w: f64, u: f64, b: f64) -> LstmCell {
    let mut cell = LstmCell::zeros(1, 1);
    for t in [&mut cell.wi, &mut cell.wf, &mut cell.wo, &mut cell.wc] {
        *t = scalar(w);
    }
    for t in [&mut cell.ui, &mut cell.uf, &mut cell.uo, &mut cell.uc] {
        *t = scalar(u);
    }
    for t in [&mut cell.bi, &mut cell.bf, &mut cell.bo, &mut cell.bc] {
        *t = Tensor::new(vec![1], vec![b]).expect("bias tensor");
    }
    cell
}

/// Runs a one-unit LSTM whose four gates share the weights `w`, `u` and
/// bias `b` over `inputs`, returning the state after every step.
pub fn lstm_trajectory_json(inputs: &[f64], w: f64, u: f64, b: f64) -> Result<Value, String> {
    let cell = scalar_cell(w, u, b);
    let mut state = LstmState::zeros(1);
    let mut steps = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = nn::lstm_cell_forward(&[x], &state, &cell).map_err(|e| e.to_string())?;
        steps.push(json!({ "x": x, "c": state.c[0], "h": state.h[0] }));
    }
    Ok(Value::Array(steps))
}

/// Scores `n` synthetic flows (half attacks) whose logits are normal with
/// means ±`separation`, then evaluates the metrics at `steps + 1` evenly
/// spaced thresholds in [0, 1].
pub fn threshold_sweep_json(n: usize, separation: f64, steps: usize, seed: u64) -> Result<Value, String> {
    if !(2..=100_000).contains(&n) || steps == 0 || !separation.is_finite() {
        return Err("need 2..=100000 flows, at least one step and a finite separation".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let probs: Vec<f64> = labels
        .iter()
        .map(|&y| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mean = if y == 1 { separation } else { -separation };
            nn::sigmoid(mean + z)
        })
        .collect();
    let rows = (0..=steps)
        .map(|s| {
            let threshold = s as f64 / steps as f64;
            MetricsReport::evaluate(&labels, &probs, threshold)
                .map_err(|e| e.to_string())
                .and_then(|r| serde_json::to_value(r).map_err(|e| e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Value::Array(rows))
}

fn to_js(result: Result<Value, String>) -> Result<String, JsValue> {
    result
        .map(|v| v.to_string())
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn svd_spectrum(
    rows: usize,
    cols: usize,
    rank: usize,
    noise: f64,
    k: usize,
    p: usize,
    q: usize,
    seed: u32,
) -> Result<String, JsValue> {
    to_js(svd_spectrum_json(rows, cols, rank, noise, k, p, q, seed.into()))
}

#[wasm_bindgen]
pub fn lstm_trajectory(inputs: &[f64], w: f64, u: f64, b: f64) -> Result<String, JsValue> {
    to_js(lstm_trajectory_json(inputs, w, u, b))
}

#[wasm_bindgen]
pub fn threshold_sweep(n: usize, separation: f64, steps: usize, seed: u32) -> Result<String, JsValue> {
    to_js(threshold_sweep_json(n, separation, steps, seed.into()))
}
