//! Two-layer dense network with a softmax head.
//!
//! The hidden layer is the representation that carries basin geometry; the
//! logits feed the entropy and logit-gap statistics. Everything here is plain
//! `f64` and deterministic: the same parameters, inputs and seed always give
//! bit-identical outputs.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::taskgen::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EntropyBase {
    #[default]
    Nats,
    Bits,
}

impl EntropyBase {
    pub fn as_str(self) -> &'static str {
        match self {
            EntropyBase::Nats => "nats",
            EntropyBase::Bits => "bits",
        }
    }

    fn scale(self) -> f64 {
        match self {
            EntropyBase::Nats => 1.0,
            EntropyBase::Bits => std::f64::consts::LN_2.recip(),
        }
    }
}

/// Parameters of `x -> w2 · act(w1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `width × d_in`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `classes × width`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

impl ModelParams {
    pub fn zeros(d_in: usize, width: usize, classes: usize, activation: Activation) -> Self {
        Self {
            w1: Array2::zeros((width, d_in)),
            b1: Array1::zeros(width),
            w2: Array2::zeros((classes, width)),
            b2: Array1::zeros(classes),
            activation,
        }
    }

    /// Gaussian initialisation with standard deviation `1/sqrt(fan_in)`, zero biases.
    pub fn init(d_in: usize, width: usize, classes: usize, activation: Activation, seed: u64) -> Result<Self> {
        let s1 = (d_in as f64).sqrt().recip();
        Self::init_scaled(d_in, width, classes, activation, s1, seed)
    }

    /// Like [`ModelParams::init`] but for inputs of unit Euclidean norm rather
    /// than unit per-coordinate scale: first-layer weights have standard
    /// deviation 1, so hidden pre-activations are O(1).
    pub fn init_unit_inputs(d_in: usize, width: usize, classes: usize, activation: Activation, seed: u64) -> Result<Self> {
        Self::init_scaled(d_in, width, classes, activation, 1.0, seed)
    }

    fn init_scaled(d_in: usize, width: usize, classes: usize, activation: Activation, s1: f64, seed: u64) -> Result<Self> {
        if d_in == 0 || width == 0 || classes < 2 {
            return Err(invalid(format!(
                "need d_in >= 1, width >= 1, classes >= 2 (got {d_in}, {width}, {classes})"
            )));
        }
        let mut rng = seed::rng(seed);
        let s2 = (width as f64).sqrt().recip();
        let w1 = Array2::from_shape_fn((width, d_in), |_| rng.sample::<f64, _>(StandardNormal) * s1);
        let w2 = Array2::from_shape_fn((classes, width), |_| rng.sample::<f64, _>(StandardNormal) * s2);
        Ok(Self {
            w1,
            b1: Array1::zeros(width),
            w2,
            b2: Array1::zeros(classes),
            activation,
        })
    }

    pub fn from_parts(
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let model = Self { w1, b1, w2, b2, activation };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.w1.nrows();
        if self.b1.len() != width {
            return Err(Error::DimensionMismatch { expected: width, got: self.b1.len() });
        }
        if self.w2.ncols() != width {
            return Err(Error::DimensionMismatch { expected: width, got: self.w2.ncols() });
        }
        if self.b2.len() != self.w2.nrows() {
            return Err(Error::DimensionMismatch { expected: self.w2.nrows(), got: self.b2.len() });
        }
        let all_finite = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: len });
        }
        Ok(())
    }

    /// Hidden representation `act(w1 · x + b1)`.
    pub fn hidden(&self, x: &[f64]) -> Result<Array1<f64>> {
        self.check_input(x.len())?;
        let x = ArrayView1::from(x);
        let act = self.activation;
        Ok((self.w1.dot(&x) + &self.b1).mapv_into(|z| act.apply(z)))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        let hidden = self.hidden(x)?;
        let logits = self.w2.dot(&hidden) + &self.b2;
        let logits = logits.to_vec();
        let probs = softmax(&logits);
        Ok(ForwardTrace {
            input: x.to_vec(),
            hidden: hidden.to_vec(),
            logits,
            probs,
        })
    }

    /// Batched forward pass; rows of `x` are inputs.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<BatchTrace> {
        self.check_input(x.ncols())?;
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let act = self.activation;
        let hidden = pre.mapv(|z| act.apply(z));
        let logits = hidden.dot(&self.w2.t()) + &self.b2;
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            softmax_row_in_place(row.as_slice_mut().expect("row-major"));
        }
        Ok(BatchTrace { pre, hidden, logits, probs })
    }

    /// Gradients of the mean loss for a batch, given `d loss / d logits` and an
    /// optional extra gradient arriving at the hidden layer.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        trace: &BatchTrace,
        d_logits: ArrayView2<f64>,
        d_hidden_extra: Option<ArrayView2<f64>>,
    ) -> Gradients {
        let d_w2 = d_logits.t().dot(&trace.hidden);
        let d_b2 = d_logits.sum_axis(Axis(0));
        let mut d_hidden = d_logits.dot(&self.w2);
        if let Some(extra) = d_hidden_extra {
            d_hidden += &extra;
        }
        let act = self.activation;
        ndarray::Zip::from(&mut d_hidden).and(&trace.pre).for_each(|g, &z| *g *= act.derivative(z));
        let d_w1 = d_hidden.t().dot(&x);
        let d_b1 = d_hidden.sum_axis(Axis(0));
        Gradients { w1: d_w1, b1: d_b1, w2: d_w2, b2: d_b2 }
    }

    /// Gradient with respect to the batch inputs, given `d loss / d logits`.
    pub fn input_gradient(&self, trace: &BatchTrace, d_logits: ArrayView2<f64>) -> Array2<f64> {
        let mut d_hidden = d_logits.dot(&self.w2);
        let act = self.activation;
        ndarray::Zip::from(&mut d_hidden).and(&trace.pre).for_each(|g, &z| *g *= act.derivative(z));
        d_hidden.dot(&self.w1)
    }

    pub fn apply(&mut self, grads: &Gradients, learning_rate: f64) {
        self.w1.scaled_add(-learning_rate, &grads.w1);
        self.b1.scaled_add(-learning_rate, &grads.b1);
        self.w2.scaled_add(-learning_rate, &grads.w2);
        self.b2.scaled_add(-learning_rate, &grads.b2);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn entropy(&self, base: EntropyBase) -> f64 {
        entropy_of_logits(&self.logits) * base.scale()
    }

    /// Difference between the two largest logits.
    pub fn top2_gap(&self) -> f64 {
        top2_gap(&self.logits)
    }
}

#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn top2_gap(values: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    first - second
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_row_in_place(&mut out);
    out
}

fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Entropy in nats of `softmax(logits)`, via `log Z - E_p[l - max]`.
fn entropy_of_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut weighted = 0.0;
    for &l in logits {
        let shifted = l - max;
        let e = shifted.exp();
        z += e;
        weighted += e * shifted;
    }
    (z.ln() - weighted / z).max(0.0)
}

pub fn softmax_entropy(logits: &[f64], base: EntropyBase) -> Result<f64> {
    if logits.len() < 2 {
        return Err(invalid("softmax entropy needs at least two logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(entropy_of_logits(logits) * base.scale())
}

/// Central-difference Jacobian `J[i][j] = d f_i / d x_j`.
pub fn numerical_jacobian<F>(f: F, x: &[f64], eps: f64) -> Result<Array2<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    let base = f(x);
    if base.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("jacobian target at x".into()));
    }
    let mut jac = Array2::zeros((base.len(), x.len()));
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + eps;
        let plus = f(&probe);
        probe[j] = x[j] - eps;
        let minus = f(&probe);
        probe[j] = x[j];
        if plus.len() != base.len() || minus.len() != base.len() {
            return Err(Error::DimensionMismatch { expected: base.len(), got: plus.len().min(minus.len()) });
        }
        for i in 0..base.len() {
            let d = (plus[i] - minus[i]) / (2.0 * eps);
            if !d.is_finite() {
                return Err(Error::NonFinite(format!("jacobian entry ({i}, {j})")));
            }
            jac[[i, j]] = d;
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_threshold: f64,
    /// Inverse temperature for teacher soft targets; `None` means hard labels.
    pub teacher_beta: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            learning_rate: 0.5,
            batch_size: 32,
            seed: 0,
            loss_threshold: 0.01,
            teacher_beta: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if let Some(beta) = self.teacher_beta {
            if !(beta > 0.0) {
                return Err(invalid("teacher_beta must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub steps_to_threshold: Option<usize>,
    pub seen_accuracy: f64,
    pub steps_run: usize,
}

/// Mini-batch SGD on the seen entities with hard labels.
///
/// `cfg.steps == 0` returns the input parameters unchanged. `cfg.teacher_beta`
/// must be unset here; use [`train_with_teacher`] for soft targets.
pub fn train(model: &ModelParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    if cfg.teacher_beta.is_some() {
        return Err(invalid("teacher_beta set but no teacher supplied; use train_with_teacher"));
    }
    let (inputs, _) = seen_matrix(model, dataset)?;
    let targets = one_hot_targets(dataset, model.classes())?;
    fit(model, dataset, inputs.view(), targets.view(), cfg)
}

/// Mini-batch SGD against `softmax(beta * teacher_logits)`.
pub fn train_with_teacher(
    model: &ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    teacher: &ModelParams,
) -> Result<(ModelParams, TrainReport)> {
    let beta = cfg
        .teacher_beta
        .ok_or_else(|| invalid("train_with_teacher requires teacher_beta"))?;
    let (inputs, _) = seen_matrix(model, dataset)?;
    teacher.check_input(inputs.ncols())?;
    if teacher.classes() != model.classes() {
        return Err(Error::DimensionMismatch { expected: model.classes(), got: teacher.classes() });
    }
    let mut targets = teacher.forward_batch(inputs.view())?.logits;
    targets.mapv_inplace(|l| beta * l);
    for mut row in targets.rows_mut() {
        softmax_row_in_place(row.as_slice_mut().expect("row-major"));
    }
    fit(model, dataset, inputs.view(), targets.view(), cfg)
}

pub(crate) fn seen_matrix(model: &ModelParams, dataset: &Dataset) -> Result<(Array2<f64>, Vec<usize>)> {
    if dataset.seen.is_empty() {
        return Err(invalid("dataset has no seen entities"));
    }
    model.check_input(dataset.d_in)?;
    let mut inputs = Array2::zeros((dataset.seen.len(), dataset.d_in));
    for (mut row, e) in inputs.rows_mut().into_iter().zip(&dataset.seen) {
        row.assign(&ArrayView1::from(&e.embedding[..]));
    }
    Ok((inputs, dataset.seen.iter().map(|e| e.code).collect()))
}

pub(crate) fn one_hot_targets(dataset: &Dataset, classes: usize) -> Result<Array2<f64>> {
    let mut targets = Array2::zeros((dataset.seen.len(), classes));
    for (i, e) in dataset.seen.iter().enumerate() {
        if e.code >= classes {
            return Err(invalid(format!("entity {} has code {} >= {classes}", e.id, e.code)));
        }
        targets[[i, e.code]] = 1.0;
    }
    Ok(targets)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(probs: ArrayView2<f64>, targets: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = probs.nrows() as f64;
    let mut loss = 0.0;
    for (p, t) in probs.iter().zip(targets.iter()) {
        if *t > 0.0 {
            loss -= t * p.max(f64::MIN_POSITIVE).ln();
        }
    }
    let grad = (&probs - &targets) / n;
    (loss / n, grad)
}

/// Cycles through shuffled epochs of row indices.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut sampler = Self {
            order: (0..n).collect(),
            cursor: n,
            batch: batch.min(n),
            rng: seed::rng_for(seed, "batches"),
        };
        sampler.reshuffle_if_needed();
        sampler
    }

    fn reshuffle_if_needed(&mut self) {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        self.reshuffle_if_needed();
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

fn fit(
    model: &ModelParams,
    dataset: &Dataset,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    let mut params = model.clone();
    let mut sampler = BatchSampler::new(inputs.nrows(), cfg.batch_size, cfg.seed);
    let full_batch = cfg.batch_size >= inputs.nrows();
    let mut steps_to_threshold = None;

    for step in 0..cfg.steps {
        let (xb, tb) = if full_batch {
            (inputs.to_owned(), targets.to_owned())
        } else {
            let idx = sampler.next_batch();
            (inputs.select(Axis(0), &idx), targets.select(Axis(0), &idx))
        };
        let trace = params.forward_batch(xb.view())?;
        let (loss, d_logits) = cross_entropy(trace.probs.view(), tb.view());
        if !loss.is_finite() || trace.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step });
        }
        if steps_to_threshold.is_none() && loss <= cfg.loss_threshold {
            steps_to_threshold = Some(step);
        }
        let grads = params.backward(xb.view(), &trace, d_logits.view(), None);
        params.apply(&grads, cfg.learning_rate);
    }

    let trace = params.forward_batch(inputs)?;
    let (final_loss, _) = cross_entropy(trace.probs.view(), targets);
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }
    let correct = trace
        .logits
        .rows()
        .into_iter()
        .zip(&dataset.seen)
        .filter(|(row, e)| argmax(row.as_slice().expect("row-major")) == e.code)
        .count();
    let report = TrainReport {
        final_loss,
        steps_to_threshold,
        seen_accuracy: correct as f64 / dataset.seen.len() as f64,
        steps_run: cfg.steps,
    };
    Ok((params, report))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BLABCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Model weights plus the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub model: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    format_version: u32,
    seed: u64,
    activation: Activation,
    d_in: usize,
    width: usize,
    classes: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

fn row_major(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

impl Checkpoint {
    /// JSON encoding. Floats are written in shortest round-trip form, which
    /// parses back to the identical bit pattern.
    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let file = CheckpointJson {
            format_version: CHECKPOINT_VERSION,
            seed: self.seed,
            activation: m.activation,
            d_in: m.input_dim(),
            width: m.width(),
            classes: m.classes(),
            w1: row_major(&m.w1),
            b1: m.b1.to_vec(),
            w2: row_major(&m.w2),
            b2: m.b2.to_vec(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CheckpointJson = serde_json::from_str(text)?;
        if f.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", f.format_version)));
        }
        let shape_err = |e: ndarray::ShapeError| Error::Format(e.to_string());
        let model = ModelParams::from_parts(
            Array2::from_shape_vec((f.width, f.d_in), f.w1).map_err(shape_err)?,
            Array1::from(f.b1),
            Array2::from_shape_vec((f.classes, f.width), f.w2).map_err(shape_err)?,
            Array1::from(f.b2),
            f.activation,
        )?;
        Ok(Self { seed: f.seed, model })
    }

    /// Binary layout (little endian): magic, u32 version, u64 seed, u8
    /// activation, u64 d_in, u64 width, u64 classes, then w1, b1, w2, b2 as
    /// row-major f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::with_capacity(64 + 8 * m.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(match m.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        });
        for dim in [m.input_dim(), m.width(), m.classes()] {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in m.w1.iter().chain(&m.b1).chain(&m.w2).chain(&m.b2) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(reader.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let seed = reader.u64()?;
        let activation = match reader.take(1)?[0] {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => return Err(Error::Format(format!("unknown activation tag {other}"))),
        };
        let d_in = reader.u64()? as usize;
        let width = reader.u64()? as usize;
        let classes = reader.u64()? as usize;
        let mut read = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| reader.f64()).collect() };
        let w1 = read(width * d_in)?;
        let b1 = read(width)?;
        let w2 = read(classes * width)?;
        let b2 = read(classes)?;
        let shape_err = |e: ndarray::ShapeError| Error::Format(e.to_string());
        let model = ModelParams::from_parts(
            Array2::from_shape_vec((width, d_in), w1).map_err(shape_err)?,
            Array1::from(b1),
            Array2::from_shape_vec((classes, width), w2).map_err(shape_err)?,
            Array1::from(b2),
            activation,
        )?;
        Ok(Self { seed, model })
    }

    /// Writes JSON when the path ends in `.json`, binary otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "json") {
            fs::write(path, self.to_json()?)?;
        } else {
            fs::write(path, self.to_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(CHECKPOINT_MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            let text = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
            Self::from_json(&text)
        }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Hidden states for a set of inputs, one row per input.
pub fn hidden_rows(model: &ModelParams, inputs: &[&[f64]]) -> Result<Array2<f64>> {
    let d = model.input_dim();
    let mut x = Array2::zeros((inputs.len(), d));
    for (mut row, v) in x.rows_mut().into_iter().zip(inputs) {
        model.check_input(v.len())?;
        row.assign(&ArrayView1::from(*v));
    }
    Ok(model.forward_batch(x.view())?.hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::taskgen::generate_dataset;
    use proptest::prelude::*;

    #[test]
    fn zero_model_gives_uniform_probs() {
        let model = ModelParams::zeros(4, 3, 10, Activation::Relu);
        let trace = model.forward(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        for p in &trace.probs {
            assert!((p - 0.1).abs() < 1e-15);
        }
        assert!((trace.entropy(EntropyBase::Nats) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn passthrough_softmax_matches_closed_form() {
        // hidden = relu(x) = x for nonnegative x; logits = hidden.
        let eye = Array2::eye(2);
        let model =
            ModelParams::from_parts(eye.clone(), Array1::zeros(2), eye, Array1::zeros(2), Activation::Relu).unwrap();
        let trace = model.forward(&[2.0, 0.0]).unwrap();
        let e2 = 2f64.exp();
        assert!((trace.probs[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((trace.probs[0] - 0.8808).abs() < 1e-4);
        assert!((trace.probs[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let model = ModelParams::init(6, 5, 4, Activation::Tanh, 3).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        assert_eq!(model.forward(&x).unwrap(), model.forward(&x).unwrap());
        assert!(matches!(model.forward(&x[..5]), Err(Error::DimensionMismatch { expected: 6, got: 5 })));
    }

    #[test]
    fn probs_sum_to_one() {
        let model = ModelParams::init(8, 16, 30, Activation::Relu, 11).unwrap();
        let trace = model.forward(&[1.0; 8]).unwrap();
        let s: f64 = trace.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(trace.probs, softmax(&trace.logits));
    }

    #[test]
    fn entropy_examples() {
        let uniform = vec![0.0; 10];
        assert!((softmax_entropy(&uniform, EntropyBase::Bits).unwrap() - 3.3219).abs() < 1e-4);

        // binary entropy at p = 1/(1+e^-5)
        let p = 1.0 / (1.0 + (-5f64).exp());
        let expected = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        let h = softmax_entropy(&[5.0, 0.0], EntropyBase::Nats).unwrap();
        assert!((h - expected).abs() < 1e-12);
        assert!((h - 0.0402).abs() < 1e-4);

        let mut saturated = vec![0.0; 50];
        saturated[7] = 1000.0;
        assert!(softmax_entropy(&saturated, EntropyBase::Nats).unwrap() < 1e-9);

        assert!(softmax_entropy(&[1.0], EntropyBase::Nats).is_err());
    }

    #[test]
    fn uniform_entropy_is_log_k() {
        for k in [2usize, 10, 30000] {
            let logits = vec![0.25; k];
            let nats = softmax_entropy(&logits, EntropyBase::Nats).unwrap();
            let bits = softmax_entropy(&logits, EntropyBase::Bits).unwrap();
            assert!((nats - (k as f64).ln()).abs() < 1e-9, "k={k}");
            assert!((bits - (k as f64).log2()).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn jacobian_of_identity_and_softmax() {
        let x = [0.3, -0.2, 0.9];
        let j = numerical_jacobian(|v| v.to_vec(), &x, 1e-4).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let e = if i == k { 1.0 } else { 0.0 };
                assert!((j[[i, k]] - e).abs() < 1e-9);
            }
        }

        let j = numerical_jacobian(softmax, &x, 1e-4).unwrap();
        let p = softmax(&x);
        for i in 0..3 {
            let row: f64 = j.row(i).sum();
            assert!(row.abs() < 1e-6);
            for k in 0..3 {
                let symbolic = if i == k { p[i] - p[i] * p[k] } else { -p[i] * p[k] };
                assert!((j[[i, k]] - symbolic).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn jacobian_rejects_non_finite() {
        let r = numerical_jacobian(|v| vec![v[0].ln()], &[0.0], 1e-4);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for (seed, act) in [(1u64, Activation::Tanh), (2, Activation::Relu), (3, Activation::Tanh)] {
            let model = ModelParams::init(4, 8, 5, act, seed).unwrap();
            let mut rng = seed::rng(seed + 100);
            let x = Array2::from_shape_fn((6, 4), |_| rng.sample::<f64, _>(StandardNormal));
            let mut targets = Array2::<f64>::zeros((6, 5));
            for i in 0..6 {
                targets[[i, (i * 3 + seed as usize) % 5]] = 1.0;
            }
            let trace = model.forward_batch(x.view()).unwrap();
            let (_, d_logits) = cross_entropy(trace.probs.view(), targets.view());
            let grads = model.backward(x.view(), &trace, d_logits.view(), None);

            let loss_of = |m: &ModelParams| {
                let t = m.forward_batch(x.view()).unwrap();
                cross_entropy(t.probs.view(), targets.view()).0
            };
            let h = 1e-6;
            let check = |analytic: f64, numeric: f64| {
                let scale = analytic.abs().max(numeric.abs()).max(1e-3);
                assert!((analytic - numeric).abs() / scale < 1e-4, "{analytic} vs {numeric}");
            };
            for idx in [(0usize, 0usize), (3, 2), (7, 1)] {
                let mut plus = model.clone();
                plus.w1[idx] += h;
                let mut minus = model.clone();
                minus.w1[idx] -= h;
                check(grads.w1[idx], (loss_of(&plus) - loss_of(&minus)) / (2.0 * h));
            }
            for idx in [(0usize, 0usize), (4, 7), (2, 3)] {
                let mut plus = model.clone();
                plus.w2[idx] += h;
                let mut minus = model.clone();
                minus.w2[idx] -= h;
                check(grads.w2[idx], (loss_of(&plus) - loss_of(&minus)) / (2.0 * h));
            }
            for i in [0usize, 5] {
                let mut plus = model.clone();
                plus.b1[i] += h;
                let mut minus = model.clone();
                minus.b1[i] -= h;
                check(grads.b1[i], (loss_of(&plus) - loss_of(&minus)) / (2.0 * h));
            }
            let mut plus = model.clone();
            plus.b2[1] += h;
            let mut minus = model.clone();
            minus.b2[1] -= h;
            check(grads.b2[1], (loss_of(&plus) - loss_of(&minus)) / (2.0 * h));

            let dx = model.input_gradient(&trace, d_logits.view());
            for idx in [(0usize, 0usize), (5, 3), (2, 1)] {
                let loss_at = |delta: f64| {
                    let mut xs = x.clone();
                    xs[idx] += delta;
                    let t = model.forward_batch(xs.view()).unwrap();
                    cross_entropy(t.probs.view(), targets.view()).0
                };
                check(dx[idx], (loss_at(h) - loss_at(-h)) / (2.0 * h));
            }
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let data = generate_dataset(20, 5, 16, 10, 4).unwrap();
        let model = ModelParams::init(16, 8, 10, Activation::Relu, 9).unwrap();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        let (out, report) = train(&model, &data, &cfg).unwrap();
        assert_eq!(out, model);
        assert_eq!(report.steps_run, 0);
    }

    #[test]
    fn training_is_deterministic_and_memorizes() {
        let data = generate_dataset(10, 0, 16, 10, 21).unwrap();
        let model = ModelParams::init(16, 64, 10, Activation::Relu, 5).unwrap();
        let cfg = TrainConfig { steps: 5000, learning_rate: 0.2, batch_size: 5, seed: 8, ..TrainConfig::default() };
        let (a, ra) = train(&model, &data, &cfg).unwrap();
        let (b, rb) = train(&model, &data, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert_eq!(ra.seen_accuracy, 1.0);
        // exhaustive re-evaluation
        for e in &data.seen {
            assert_eq!(a.forward(&e.embedding).unwrap().argmax(), e.code);
        }
        if let Some(s) = ra.steps_to_threshold {
            assert!(s <= ra.steps_run);
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let data = generate_dataset(10, 0, 8, 4, 1).unwrap();
        let model = ModelParams::init(8, 8, 4, Activation::Relu, 1).unwrap();
        let cfg = TrainConfig { steps: 50, learning_rate: 1e200, batch_size: 10, ..TrainConfig::default() };
        match train(&model, &data, &cfg) {
            Err(Error::Diverged { step }) => assert!(step < 50),
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let model = ModelParams::init(5, 7, 3, Activation::Tanh, 77).unwrap();
        let ck = Checkpoint { seed: 77, model };
        assert_eq!(Checkpoint::from_json(&ck.to_json().unwrap()).unwrap(), ck);
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);

        let dir = tempfile::tempdir().unwrap();
        for name in ["m.json", "m.bin"] {
            let path = dir.path().join(name);
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            for (a, b) in back.model.w1.iter().zip(ck.model.w1.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_eq!(back, ck);
        }
        assert!(Checkpoint::from_bytes(&ck.to_bytes()[..20]).is_err());
    }

    proptest! {
        #[test]
        fn linear_map_jacobian_recovered(entries in proptest::collection::vec(-3.0f64..3.0, 12), x in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let a = Array2::from_shape_vec((3, 4), entries).unwrap();
            let eps = 1e-4;
            let j = numerical_jacobian(|v| a.dot(&ArrayView1::from(v)).to_vec(), &x, eps).unwrap();
            for (got, want) in j.iter().zip(a.iter()) {
                prop_assert!((got - want).abs() <= 10.0 * eps * eps + 1e-10);
            }
        }

        #[test]
        fn json_checkpoint_is_bit_exact(seed in 0u64..1000) {
            let model = ModelParams::init(3, 4, 2, Activation::Relu, seed).unwrap();
            let ck = Checkpoint { seed, model };
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
