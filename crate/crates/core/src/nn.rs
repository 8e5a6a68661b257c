//! Small from-scratch networks in double precision: 1-D convolution, dense
//! layers, an LSTM cell with backpropagation through time, a sigmoid output
//! head, binary cross-entropy, RMSProp and a central-difference gradient
//! checker.
//!
//! Activations flow through the network one sample at a time. A sample of
//! width `W` with `input_channels = d` is read as a sequence of `W / d`
//! steps of `d` values each (step-major), which is the layout both the
//! convolution and the LSTM consume.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::DatasetTable;
use crate::linalg::DenseMatrix;
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("tensor contains non-finite values".into()));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    fn code(self) -> f64 {
        match self {
            Activation::Linear => 0.0,
            Activation::Relu => 1.0,
            Activation::Tanh => 2.0,
            Activation::Sigmoid => 3.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        Ok(match c as i64 {
            0 => Activation::Linear,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return Err(Error::Format(format!("unknown activation code {c}"))),
        })
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Same-padded 1-D convolution over the step axis.
    Conv1d {
        filters: usize,
        kernel: usize,
        activation: Activation,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
    /// Runs over the whole sequence and emits the final hidden state.
    Lstm { hidden_size: usize },
    /// Dense layer with one unit followed by a sigmoid.
    SigmoidOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Seq { len: usize, channels: usize },
    Flat(usize),
}

impl Shape {
    fn size(self) -> usize {
        match self {
            Shape::Seq { len, channels } => len * channels,
            Shape::Flat(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_width: usize,
    /// Values per sequence step; `input_width` must be a multiple of it.
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Features fed one scalar per step into an LSTM, then dense(1)+sigmoid.
    pub fn lstm_classifier(input_width: usize, hidden_size: usize) -> Self {
        ModelSpec {
            input_width,
            input_channels: 1,
            layers: vec![LayerSpec::Lstm { hidden_size }, LayerSpec::SigmoidOutput],
        }
    }

    /// Network used by ablation feature selection:
    /// conv1d(16, 3, relu) -> dense(32, relu) -> dense(1, sigmoid).
    pub fn selection_cnn(input_width: usize) -> Self {
        ModelSpec {
            input_width,
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv1d {
                    filters: 16,
                    kernel: 3,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: 32,
                    activation: Activation::Relu,
                },
                LayerSpec::SigmoidOutput,
            ],
        }
    }

    /// Same architecture for a different number of input features.
    pub fn with_input_width(&self, input_width: usize) -> Self {
        ModelSpec {
            input_width,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Input shape of every layer.
    fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::Config("model input width must be positive".into()));
        }
        if !self.input_width.is_multiple_of(self.input_channels) {
            return Err(Error::Config(format!(
                "input width {} is not a multiple of {} channels",
                self.input_width, self.input_channels
            )));
        }
        match self.layers.last() {
            Some(LayerSpec::SigmoidOutput) => {}
            _ => return Err(Error::Config("model must end with a sigmoid output".into())),
        }
        let mut shape = Shape::Seq {
            len: self.input_width / self.input_channels,
            channels: self.input_channels,
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shapes.push(shape);
            shape = match (*layer, shape) {
                (LayerSpec::Conv1d { filters, kernel, .. }, Shape::Seq { len, .. }) => {
                    if filters == 0 || kernel == 0 {
                        return Err(Error::Config(format!("layer {i}: empty convolution")));
                    }
                    Shape::Seq {
                        len,
                        channels: filters,
                    }
                }
                (LayerSpec::Lstm { hidden_size }, Shape::Seq { .. }) if hidden_size > 0 => {
                    Shape::Flat(hidden_size)
                }
                (LayerSpec::Dense { units, .. }, s) if units > 0 => {
                    let _ = s;
                    Shape::Flat(units)
                }
                (LayerSpec::SigmoidOutput, _) if i + 1 == self.layers.len() => Shape::Flat(1),
                (l, s) => {
                    return Err(Error::Config(format!(
                        "layer {i} ({l:?}) cannot follow output shape {s:?}"
                    )))
                }
            };
        }
        Ok(shapes)
    }

    fn encode(&self) -> Tensor {
        let mut v = vec![
            self.input_width as f64,
            self.input_channels as f64,
            self.layers.len() as f64,
        ];
        for l in &self.layers {
            let row = match *l {
                LayerSpec::Conv1d {
                    filters,
                    kernel,
                    activation,
                } => [0.0, filters as f64, kernel as f64, activation.code()],
                LayerSpec::Dense { units, activation } => {
                    [1.0, units as f64, 0.0, activation.code()]
                }
                LayerSpec::Lstm { hidden_size } => [2.0, hidden_size as f64, 0.0, 0.0],
                LayerSpec::SigmoidOutput => [3.0, 0.0, 0.0, 0.0],
            };
            v.extend_from_slice(&row);
        }
        Tensor {
            shape: vec![v.len()],
            values: v,
        }
    }

    fn decode(t: &Tensor) -> Result<Self> {
        let v = t.values();
        let bad = || Error::Format("malformed model spec record".into());
        if v.len() < 3 {
            return Err(bad());
        }
        let n = v[2] as usize;
        if v.len() != 3 + 4 * n {
            return Err(bad());
        }
        let layers = v[3..]
            .chunks(4)
            .map(|r| {
                Ok(match r[0] as i64 {
                    0 => LayerSpec::Conv1d {
                        filters: r[1] as usize,
                        kernel: r[2] as usize,
                        activation: Activation::from_code(r[3])?,
                    },
                    1 => LayerSpec::Dense {
                        units: r[1] as usize,
                        activation: Activation::from_code(r[3])?,
                    },
                    2 => LayerSpec::Lstm {
                        hidden_size: r[1] as usize,
                    },
                    3 => LayerSpec::SigmoidOutput,
                    _ => return Err(bad()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec {
            input_width: v[0] as usize,
            input_channels: v[1] as usize,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `[filters, kernel, in_channels]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[units, inputs]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// LSTM gate parameters. Every `w*` is `hidden × input`, every `u*` is
/// `hidden × hidden`, every `b*` has length `hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub wi: Tensor,
    pub ui: Tensor,
    pub bi: Tensor,
    pub wf: Tensor,
    pub uf: Tensor,
    pub bf: Tensor,
    pub wo: Tensor,
    pub uo: Tensor,
    pub bo: Tensor,
    pub wc: Tensor,
    pub uc: Tensor,
    pub bc: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

const GATE_NAMES: [&str; 12] = [
    "Wi", "Ui", "bi", "Wf", "Uf", "bf", "Wo", "Uo", "bo", "Wc", "Uc", "bc",
];

impl LstmCell {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let w = || Tensor::zeros(&[hidden_size, input_size]);
        let u = || Tensor::zeros(&[hidden_size, hidden_size]);
        let b = || Tensor::zeros(&[hidden_size]);
        LstmCell {
            input_size,
            hidden_size,
            wi: w(),
            ui: u(),
            bi: b(),
            wf: w(),
            uf: u(),
            bf: b(),
            wo: w(),
            uo: u(),
            bo: b(),
            wc: w(),
            uc: u(),
            bc: b(),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.wi, &self.ui, &self.bi, &self.wf, &self.uf, &self.bf, &self.wo, &self.uo,
            &self.bo, &self.wc, &self.uc, &self.bc,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.wi,
            &mut self.ui,
            &mut self.bi,
            &mut self.wf,
            &mut self.uf,
            &mut self.bf,
            &mut self.wo,
            &mut self.uo,
            &mut self.bo,
            &mut self.wc,
            &mut self.uc,
            &mut self.bc,
        ]
    }

    fn check(&self) -> Result<()> {
        let (h, d) = (self.hidden_size, self.input_size);
        for (t, name) in self.tensors().iter().zip(GATE_NAMES) {
            let want: &[usize] = match name.as_bytes()[0] {
                b'W' => &[h, d],
                b'U' => &[h, h],
                _ => &[h],
            };
            if t.shape() != want {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Gate activations of one step, kept for backpropagation.
#[derive(Debug, Clone)]
struct StepTrace {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// `out = m·v + out` for a row-major `rows × v.len()` matrix.
#[inline]
fn matvec_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += mᵀ·v`.
#[inline]
fn matvec_t_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vr;
        }
    }
}

/// `m += a ⊗ b`.
#[inline]
fn outer_add(m: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        for (x, bv) in m[r * cols..(r + 1) * cols].iter_mut().zip(b) {
            *x += ar * bv;
        }
    }
}

fn gate(w: &Tensor, u: &Tensor, b: &Tensor, x: &[f64], h: &[f64], act: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut z = b.values().to_vec();
    matvec_add(w.values(), x, &mut z);
    matvec_add(u.values(), h, &mut z);
    z.into_iter().map(act).collect()
}

fn cell_step(x: &[f64], prev: &LstmState, cell: &LstmCell) -> StepTrace {
    let h = &prev.h;
    let i = gate(&cell.wi, &cell.ui, &cell.bi, x, h, sigmoid);
    let f = gate(&cell.wf, &cell.uf, &cell.bf, x, h, sigmoid);
    let o = gate(&cell.wo, &cell.uo, &cell.bo, x, h, sigmoid);
    let g = gate(&cell.wc, &cell.uc, &cell.bc, x, h, f64::tanh);
    let c: Vec<f64> = (0..cell.hidden_size)
        .map(|k| f[k] * prev.c[k] + i[k] * g[k])
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    StepTrace {
        x: x.to_vec(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        i,
        f,
        o,
        g,
        c,
        tanh_c,
    }
}

impl StepTrace {
    fn state(&self) -> LstmState {
        LstmState {
            h: self.o.iter().zip(&self.tanh_c).map(|(o, t)| o * t).collect(),
            c: self.c.clone(),
        }
    }
}

/// One LSTM step:
///
/// ```text
/// i = σ(Wi·x + Ui·h₋₁ + bi)      f = σ(Wf·x + Uf·h₋₁ + bf)
/// o = σ(Wo·x + Uo·h₋₁ + bo)      g = tanh(Wc·x + Uc·h₋₁ + bc)
/// c = f ⊙ c₋₁ + i ⊙ g            h = o ⊙ tanh(c)
/// ```
pub fn lstm_cell_forward(x: &[f64], prev: &LstmState, cell: &LstmCell) -> Result<LstmState> {
    cell.check()?;
    if x.len() != cell.input_size {
        return Err(Error::Shape(format!(
            "input has {} values, cell expects {}",
            x.len(),
            cell.input_size
        )));
    }
    if prev.h.len() != cell.hidden_size || prev.c.len() != cell.hidden_size {
        return Err(Error::Shape("previous state does not match hidden size".into()));
    }
    if x.iter().chain(&prev.h).chain(&prev.c).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite LSTM input".into()));
    }
    Ok(cell_step(x, prev, cell).state())
}

/// Runs the cell over `sequence` from a zero state.
pub fn lstm_forward(sequence: &[Vec<f64>], cell: &LstmCell) -> Result<LstmState> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    sequence
        .iter()
        .try_fold(LstmState::zeros(cell.hidden_size), |state, x| {
            lstm_cell_forward(x, &state, cell)
        })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv1d(Conv1d),
    Dense(Dense),
    Lstm(LstmCell),
    /// Single-unit dense layer; its activation is always the sigmoid.
    Output(Dense),
}

impl Layer {
    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv1d(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) | Layer::Output(l) => vec![&l.weight, &l.bias],
            Layer::Lstm(c) => c.tensors().to_vec(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv1d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) | Layer::Output(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Lstm(c) => c.tensors_mut().into_iter().collect(),
        }
    }

    fn tensor_names(&self) -> Vec<&'static str> {
        match self {
            Layer::Lstm(_) => GATE_NAMES.to_vec(),
            _ => vec!["weight", "bias"],
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv1d(_) => "conv1d",
            Layer::Dense(_) => "dense",
            Layer::Lstm(_) => "lstm",
            Layer::Output(_) => "output",
        }
    }
}

enum Trace {
    Conv { input: Vec<f64>, output: Vec<f64> },
    Dense { input: Vec<f64>, output: Vec<f64> },
    Lstm(Vec<StepTrace>),
    Output { input: Vec<f64> },
}

/// Network parameters plus the input mask used by feature ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    shapes: Vec<ShapeRecord>,
    layers: Vec<Layer>,
    input_mask: Vec<bool>,
}

// Shape is private; wrap it so Model can derive PartialEq/Debug publicly.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ShapeRecord(Shape);

/// Gradients, one tensor per parameter tensor in [`Model::parameters`] order.
pub type Gradients = Vec<Tensor>;

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        values: (0..n).map(|_| rng.random_range(-limit..=limit)).collect(),
    }
}

impl Model {
    /// All parameters zero (a constant-output network).
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        Self::build(spec, |shape, _, _| Tensor::zeros(shape), |n| Tensor::zeros(&[n]))
    }

    /// Weights uniform in `±√(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(spec, &mut rng)
    }

    fn init_with(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(
            spec,
            |shape, fi, fo| glorot(rng, shape, fi, fo),
            |n| Tensor::zeros(&[n]),
        )
    }

    fn build(
        spec: &ModelSpec,
        mut weight: impl FnMut(&[usize], usize, usize) -> Tensor,
        bias: impl Fn(usize) -> Tensor,
    ) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, &shape) in spec.layers.iter().zip(&shapes) {
            let layer = match (*l, shape) {
                (
                    LayerSpec::Conv1d {
                        filters,
                        kernel,
                        activation,
                    },
                    Shape::Seq { channels, .. },
                ) => Layer::Conv1d(Conv1d {
                    weight: weight(&[filters, kernel, channels], kernel * channels, kernel * filters),
                    bias: bias(filters),
                    activation,
                }),
                (LayerSpec::Dense { units, activation }, s) => Layer::Dense(Dense {
                    weight: weight(&[units, s.size()], s.size(), units),
                    bias: bias(units),
                    activation,
                }),
                (LayerSpec::Lstm { hidden_size: h }, Shape::Seq { channels: d, .. }) => {
                    let mut cell = LstmCell::zeros(d, h);
                    for (t, name) in cell.tensors_mut().into_iter().zip(GATE_NAMES) {
                        *t = match name.as_bytes()[0] {
                            b'W' => weight(&[h, d], d, h),
                            b'U' => weight(&[h, h], h, h),
                            _ => bias(h),
                        };
                    }
                    Layer::Lstm(cell)
                }
                (LayerSpec::SigmoidOutput, s) => Layer::Output(Dense {
                    weight: weight(&[1, s.size()], s.size(), 1),
                    bias: bias(1),
                    activation: Activation::Sigmoid,
                }),
                _ => unreachable!("validated by shapes()"),
            };
            layers.push(layer);
        }
        Ok(Model {
            spec: spec.clone(),
            shapes: shapes.into_iter().map(ShapeRecord).collect(),
            layers,
            input_mask: vec![true; spec.input_width],
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    pub fn input_mask(&self) -> &[bool] {
        &self.input_mask
    }

    /// Disables input feature `k`: the network sees 0 in its place.
    pub fn mask_input(&mut self, k: usize) {
        self.input_mask[k] = false;
    }

    /// `(name, tensor)` for every trainable tensor, in gradient order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensor_names().into_iter().zip(layer.tensors()) {
                out.push((format!("{i}.{}.{name}", layer.kind()), t));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.parameters()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect()
    }

    fn masked_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.input_mask)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect()
    }

    /// Logit and per-layer traces for one sample.
    fn forward_trace(&self, x: &[f64]) -> (f64, Vec<Trace>) {
        let mut a = self.masked_input(x);
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut logit = 0.0;
        for (layer, shape) in self.layers.iter().zip(&self.shapes) {
            match layer {
                Layer::Conv1d(conv) => {
                    let out = conv_forward(conv, &a, shape.0);
                    traces.push(Trace::Conv {
                        input: std::mem::replace(&mut a, out.clone()),
                        output: out,
                    });
                }
                Layer::Dense(d) => {
                    let mut z = d.bias.values().to_vec();
                    matvec_add(d.weight.values(), &a, &mut z);
                    let out: Vec<f64> = z.into_iter().map(|v| d.activation.apply(v)).collect();
                    traces.push(Trace::Dense {
                        input: std::mem::replace(&mut a, out.clone()),
                        output: out,
                    });
                }
                Layer::Lstm(cell) => {
                    let d = cell.input_size;
                    let mut state = LstmState::zeros(cell.hidden_size);
                    let mut steps = Vec::with_capacity(a.len() / d);
                    for x_t in a.chunks(d) {
                        let step = cell_step(x_t, &state, cell);
                        state = step.state();
                        steps.push(step);
                    }
                    a = state.h;
                    traces.push(Trace::Lstm(steps));
                }
                Layer::Output(d) => {
                    logit = d.bias.values()[0]
                        + d.weight.values().iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
                    traces.push(Trace::Output {
                        input: std::mem::take(&mut a),
                    });
                }
            }
        }
        (logit, traces)
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        sigmoid(self.forward_trace(x).0)
    }

    /// Accumulates `dlogit`-scaled gradients of one sample into `grads`.
    fn backward_trace(&self, traces: &[Trace], dlogit: f64, grads: &mut [Tensor]) {
        let offsets = self.param_offsets();
        let mut delta = vec![dlogit];
        for (li, (layer, trace)) in self.layers.iter().zip(traces).enumerate().rev() {
            let off = offsets[li];
            let need_input_grad = li > 0;
            delta = match (layer, trace) {
                (Layer::Output(d), Trace::Output { input }) => {
                    outer_add(grads[off].values_mut(), &delta, input);
                    grads[off + 1].values_mut()[0] += delta[0];
                    d.weight.values().iter().map(|w| w * delta[0]).collect()
                }
                (Layer::Dense(d), Trace::Dense { input, output }) => {
                    let dz: Vec<f64> = delta
                        .iter()
                        .zip(output)
                        .map(|(g, &y)| g * d.activation.derivative(y))
                        .collect();
                    outer_add(grads[off].values_mut(), &dz, input);
                    for (b, g) in grads[off + 1].values_mut().iter_mut().zip(&dz) {
                        *b += g;
                    }
                    let mut dx = vec![0.0; input.len()];
                    if need_input_grad {
                        matvec_t_add(d.weight.values(), &dz, &mut dx);
                    }
                    dx
                }
                (Layer::Conv1d(conv), Trace::Conv { input, output }) => {
                    let (gw, rest) = grads[off..].split_at_mut(1);
                    conv_backward(
                        conv,
                        self.shapes[li].0,
                        input,
                        output,
                        &delta,
                        &mut gw[0],
                        &mut rest[0],
                        need_input_grad,
                    )
                }
                (Layer::Lstm(cell), Trace::Lstm(steps)) => lstm_backward(
                    cell,
                    steps,
                    &delta,
                    &mut grads[off..off + 12],
                    need_input_grad,
                ),
                _ => unreachable!("trace matches layer"),
            };
        }
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offsets.push(acc);
            acc += l.tensors().len();
        }
        offsets
    }

    /// Serializable tensors: the architecture record, the input mask, then
    /// every parameter.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("model.spec".to_string(), self.spec.encode()),
            (
                "model.input_mask".to_string(),
                Tensor {
                    shape: vec![self.input_mask.len()],
                    values: self.input_mask.iter().map(|&m| f64::from(u8::from(m))).collect(),
                },
            ),
        ];
        out.extend(self.parameters().into_iter().map(|(n, t)| (n, t.clone())));
        out
    }

    /// Rebuilds a model from [`Model::to_tensors`] output; unrelated tensors
    /// are ignored.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
        };
        let spec = ModelSpec::decode(find("model.spec")?)?;
        let mut model = Model::zeros(&spec)?;
        let mask = find("model.input_mask")?;
        if mask.len() != spec.input_width {
            return Err(Error::Format("input mask width mismatch".into()));
        }
        model.input_mask = mask.values().iter().map(|&v| v != 0.0).collect();
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.parameters_mut()) {
            let t = find(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }
}

fn conv_forward(conv: &Conv1d, input: &[f64], shape: Shape) -> Vec<f64> {
    let Shape::Seq { len, channels } = shape else {
        unreachable!("conv input is a sequence")
    };
    let (filters, kernel) = (conv.weight.shape()[0], conv.weight.shape()[1]);
    let pad = kernel / 2;
    let w = conv.weight.values();
    let mut out = vec![0.0; len * filters];
    for t in 0..len {
        for f in 0..filters {
            let mut z = conv.bias.values()[f];
            for j in 0..kernel {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else {
                    continue;
                };
                let wk = &w[(f * kernel + j) * channels..(f * kernel + j + 1) * channels];
                let xs = &input[src * channels..(src + 1) * channels];
                z += wk.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
            out[t * filters + f] = conv.activation.apply(z);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    conv: &Conv1d,
    shape: Shape,
    input: &[f64],
    output: &[f64],
    delta: &[f64],
    gw: &mut Tensor,
    gb: &mut Tensor,
    need_input_grad: bool,
) -> Vec<f64> {
    let Shape::Seq { len, channels } = shape else {
        unreachable!("conv input is a sequence")
    };
    let (filters, kernel) = (conv.weight.shape()[0], conv.weight.shape()[1]);
    let pad = kernel / 2;
    let w = conv.weight.values();
    let gw = gw.values_mut();
    let gb = gb.values_mut();
    let mut dx = vec![0.0; input.len()];
    for t in 0..len {
        for f in 0..filters {
            let idx = t * filters + f;
            let dz = delta[idx] * conv.activation.derivative(output[idx]);
            if dz == 0.0 {
                continue;
            }
            gb[f] += dz;
            for j in 0..kernel {
                let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else {
                    continue;
                };
                let base = (f * kernel + j) * channels;
                for c in 0..channels {
                    gw[base + c] += dz * input[src * channels + c];
                    if need_input_grad {
                        dx[src * channels + c] += dz * w[base + c];
                    }
                }
            }
        }
    }
    dx
}

/// Backpropagation through time. `grads` holds the 12 gate tensors in
/// [`GATE_NAMES`] order.
fn lstm_backward(
    cell: &LstmCell,
    steps: &[StepTrace],
    dh_final: &[f64],
    grads: &mut [Tensor],
    need_input_grad: bool,
) -> Vec<f64> {
    let h = cell.hidden_size;
    let d = cell.input_size;
    let mut dh = dh_final.to_vec();
    let mut dc = vec![0.0; h];
    let mut dx_all = vec![0.0; steps.len() * d];
    let w = [&cell.wi, &cell.wf, &cell.wo, &cell.wc];
    let u = [&cell.ui, &cell.uf, &cell.uo, &cell.uc];

    for (t, s) in steps.iter().enumerate().rev() {
        let mut da = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        for k in 0..h {
            let d_o = dh[k] * s.tanh_c[k];
            let dct = dc[k] + dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
            let di = dct * s.g[k];
            let dg = dct * s.i[k];
            let df = dct * s.c_prev[k];
            dc[k] = dct * s.f[k];
            da[0][k] = di * s.i[k] * (1.0 - s.i[k]);
            da[1][k] = df * s.f[k] * (1.0 - s.f[k]);
            da[2][k] = d_o * s.o[k] * (1.0 - s.o[k]);
            da[3][k] = dg * (1.0 - s.g[k] * s.g[k]);
        }
        let mut dh_prev = vec![0.0; h];
        let dx = &mut dx_all[t * d..(t + 1) * d];
        for (gate, a) in da.iter().enumerate() {
            outer_add(grads[3 * gate].values_mut(), a, &s.x);
            outer_add(grads[3 * gate + 1].values_mut(), a, &s.h_prev);
            for (b, g) in grads[3 * gate + 2].values_mut().iter_mut().zip(a) {
                *b += g;
            }
            matvec_t_add(u[gate].values(), a, &mut dh_prev);
            if need_input_grad {
                matvec_t_add(w[gate].values(), a, dx);
            }
        }
        dh = dh_prev;
    }
    dx_all
}

fn check_batch(model: &Model, batch: &DenseMatrix) -> Result<()> {
    if batch.cols() != model.input_width() {
        return Err(Error::Shape(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            model.input_width()
        )));
    }
    Ok(())
}

/// Attack probability for every row of `batch`.
pub fn model_forward(model: &Model, batch: &DenseMatrix) -> Result<Vec<f64>> {
    check_batch(model, batch)?;
    Ok((0..batch.rows()).map(|i| model.predict_one(batch.row(i))).collect())
}

/// Mean binary cross-entropy with probabilities clamped away from 0 and 1.
pub fn bce_loss(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities but {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of the mean BCE over `batch` with respect to every parameter.
pub fn backward(model: &Model, batch: &DenseMatrix, labels: &[u8]) -> Result<Gradients> {
    check_batch(model, batch)?;
    if labels.len() != batch.rows() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            batch.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grads = model.zero_gradients();
    let rows: Vec<usize> = (0..batch.rows()).collect();
    accumulate_batch(model, batch, labels, &rows, &mut grads);
    Ok(grads)
}

/// Adds mean-loss gradients over `rows` into `grads`; returns the summed loss
/// and number of correct 0.5-threshold predictions.
fn accumulate_batch(
    model: &Model,
    features: &DenseMatrix,
    labels: &[u8],
    rows: &[usize],
    grads: &mut [Tensor],
) -> (f64, usize) {
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    for &r in rows {
        let (logit, traces) = model.forward_trace(features.row(r));
        let p = sigmoid(logit);
        let y = f64::from(labels[r]);
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        if (p >= 0.5) == (labels[r] != 0) {
            correct += 1;
        }
        model.backward_trace(&traces, (p - y) * scale, grads);
    }
    (loss, correct)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 64,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::Config("rmsprop_decay must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.rmsprop_epsilon > 0.0) {
            return Err(Error::Config(
                "learning_rate and rmsprop_epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Running mean of squared gradients, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub mean_square: Vec<Tensor>,
}

impl RmsPropState {
    pub fn new(model: &Model) -> Self {
        RmsPropState {
            mean_square: model.zero_gradients(),
        }
    }
}

/// `s ← ρ·s + (1−ρ)·g²;  θ ← θ − lr·g / √(s + ε)`, elementwise.
pub fn rmsprop_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut RmsPropState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || grads.len() != state.mean_square.len() {
        return Err(Error::Shape("parameter, gradient and state counts differ".into()));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(&state.mean_square) {
        if p.shape() != g.shape() || g.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let (rho, lr, eps) = (cfg.rmsprop_decay, cfg.learning_rate, cfg.rmsprop_epsilon);
    for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut state.mean_square) {
        for ((theta, &gv), sv) in p
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .zip(s.values_mut())
        {
            *sv = rho * *sv + (1.0 - rho) * gv * gv;
            *theta -= lr * gv / (*sv + eps).sqrt();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub history: Vec<EpochStats>,
}

/// Mini-batch RMSProp training from a seeded initialization. The order of
/// rows is reshuffled every epoch; the last partial batch is kept.
pub fn train(spec: &ModelSpec, table: &DatasetTable, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let spec = spec.with_input_width(table.n_cols());
    if table.is_single_class() {
        log::warn!("training on a single-class table");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init_with(&spec, &mut rng)?;
    let mut state = RmsPropState::new(&model);
    let features = table.features();
    let labels = table.labels();
    let mut order: Vec<usize> = (0..table.n_rows()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut correct = 0;
        for rows in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_gradients();
            let (l, c) = accumulate_batch(&model, features, labels, rows, &mut grads);
            loss += l;
            correct += c;
            rmsprop_step(&mut model.parameters_mut(), &grads, &mut state, cfg)?;
        }
        let n = order.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss / n,
            accuracy: correct as f64 / n,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged in epoch {}", epoch + 1)));
        }
        log::debug!("epoch {}: loss {:.6} acc {:.4}", stats.epoch, stats.loss, stats.accuracy);
        history.push(stats);
    }
    if model.parameters().iter().any(|(_, t)| t.values().iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("training produced non-finite parameters".into()));
    }
    Ok(Trained { model, history })
}

/// Largest relative difference between analytic gradients and central
/// differences `(L(θ+ε) − L(θ−ε)) / 2ε` of the mean BCE over `batch`.
pub fn gradient_check(model: &Model, batch: &DenseMatrix, labels: &[u8], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if model.parameter_count() > 5000 {
        return Err(Error::InvalidArgument(format!(
            "gradient check limited to 5000 parameters, model has {}",
            model.parameter_count()
        )));
    }
    let analytic = backward(model, batch, labels)?;
    let loss_at = |m: &Model| -> Result<f64> { bce_loss(&model_forward(m, batch)?, labels) };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (ti, grad) in analytic.iter().enumerate() {
        for vi in 0..grad.len() {
            let original = probe.parameters_mut()[ti].values()[vi];
            probe.parameters_mut()[ti].values_mut()[vi] = original + epsilon;
            let up = loss_at(&probe)?;
            probe.parameters_mut()[ti].values_mut()[vi] = original - epsilon;
            let down = loss_at(&probe)?;
            probe.parameters_mut()[ti].values_mut()[vi] = original;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grad.values()[vi];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

const MAGIC: &[u8; 4] = b"MGNN";
pub const FORMAT_VERSION: u32 = 1;

/// Binary tensor container: `"MGNN"`, version (u32), tensor count (u32),
/// then per tensor: name length (u32), UTF-8 name, rank (u32), extents
/// (u64 each) and the values as little-endian f64.
pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &e in &t.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in &t.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(buf)
    }
    if &take::<4>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(take(&mut r)?) as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(take(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let values = (0..len)
            .map(|_| Ok(f64::from_le_bytes(take(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor { shape, values }));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(std::io::BufWriter::new(file), tensors).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(std::io::BufReader::new(file))
}
