// SPDX-License-Identifier: MIT OR Apache-2.0

//! The probing classifier: one hidden layer of 100 ReLU units followed by a
//! softmax output, trained by hand-written backpropagation.
//!
//! Encoder representations are frozen inputs; only the probe learns.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LanguageId, WalsFeature};
use crate::embedding::{read_embeddings, write_embeddings, Dtype, EmbeddingHeader, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::rng;

pub const HIDDEN_UNITS: usize = 100;

/// Rows evaluated per forward chunk when predicting large matrices.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    /// hidden x dim
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// classes x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ProbeParams {
    pub fn zeros(dim: usize, hidden: usize, num_classes: usize) -> Self {
        ProbeParams {
            w1: Array2::zeros((hidden, dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((num_classes, hidden)),
            b2: Array1::zeros(num_classes),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }

    fn blocks(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
}

fn glorot_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit))
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn init_probe(dim: usize, num_classes: usize, seed: u64) -> Result<ProbeParams> {
    if dim == 0 || num_classes < 2 {
        return Err(Error::Validation(format!(
            "probe needs dim >= 1 and at least 2 classes (got dim {dim}, {num_classes} classes)"
        )));
    }
    let mut rng = rng::stream(seed, "probe-init");
    let w1 = glorot_uniform(&mut rng, HIDDEN_UNITS, dim);
    let w2 = glorot_uniform(&mut rng, num_classes, HIDDEN_UNITS);
    Ok(ProbeParams {
        w1,
        b1: Array1::zeros(HIDDEN_UNITS),
        w2,
        b2: Array1::zeros(num_classes),
    })
}

struct Activations {
    pre: Array2<f64>,
    hidden: Array2<f64>,
    logits: Array2<f64>,
}

fn activations(params: &ProbeParams, x: ArrayView2<f64>) -> Activations {
    let pre = x.dot(&params.w1.t()) + &params.b1;
    let hidden = pre.mapv(|v| v.max(0.0));
    let logits = hidden.dot(&params.w2.t()) + &params.b2;
    Activations { pre, hidden, logits }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[k] - max - lse
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities for one input vector.
pub fn forward(params: &ProbeParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            actual: x.len(),
        });
    }
    let view = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
    let mut p = activations(params, view).logits.row(0).to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

/// Row-wise class probabilities.
pub fn forward_batch(params: &ProbeParams, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = activations(params, x).logits;
    for mut row in z.rows_mut() {
        softmax_in_place(row.as_slice_mut().unwrap());
    }
    z
}

fn sample_weights(labels: &[usize], class_weights: Option<&[f64]>) -> Vec<f64> {
    match class_weights {
        Some(w) => labels.iter().map(|&y| w[y]).collect(),
        None => vec![1.0; labels.len()],
    }
}

/// Mean (optionally class-weighted) cross-entropy.
pub fn loss(params: &ProbeParams, x: ArrayView2<f64>, labels: &[usize], class_weights: Option<&[f64]>) -> f64 {
    let act = activations(params, x);
    let w = sample_weights(labels, class_weights);
    let total: f64 = w.iter().sum();
    act.logits
        .rows()
        .into_iter()
        .zip(labels)
        .zip(&w)
        .map(|((z, &y), wi)| -wi * log_softmax_at(z.as_slice().unwrap(), y))
        .sum::<f64>()
        / total
}

/// Loss and its gradient with respect to every parameter block.
pub fn loss_and_gradients(
    params: &ProbeParams,
    x: ArrayView2<f64>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> (f64, ProbeParams) {
    let act = activations(params, x);
    let w = sample_weights(labels, class_weights);
    let total: f64 = w.iter().sum();

    let mut loss = 0.0;
    let mut dz = act.logits.clone();
    for ((mut row, &y), wi) in dz.rows_mut().into_iter().zip(labels).zip(&w) {
        let z = row.as_slice_mut().unwrap();
        loss -= wi * log_softmax_at(z, y);
        softmax_in_place(z);
        z[y] -= 1.0;
        let scale = wi / total;
        for v in z.iter_mut() {
            *v *= scale;
        }
    }
    loss /= total;

    let gw2 = dz.t().dot(&act.hidden);
    let gb2 = dz.sum_axis(Axis(0));
    let mut dh = dz.dot(&params.w2);
    dh.zip_mut_with(&act.pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    let gw1 = dh.t().dot(&x);
    let gb1 = dh.sum_axis(Axis(0));
    (
        loss,
        ProbeParams {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
    )
}

/// Compares `analytic` against central finite differences of the loss.
///
/// Coordinates are sampled per block (all of them for small blocks). A
/// hidden-layer coordinate whose perturbation flips the sign of any ReLU
/// input is skipped, since the loss is not differentiable there.
pub fn gradient_check_against(
    params: &ProbeParams,
    x: ArrayView2<f64>,
    labels: &[usize],
    analytic: &ProbeParams,
) -> f64 {
    const H: f64 = 1e-5;
    const SAMPLES_PER_BLOCK: usize = 40;
    let mut rng = rng::stream(0x6772_6164, "gradient-check");
    let pre = activations(params, x).pre;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();

    for block in 0..4 {
        let len = params.blocks()[block].len();
        let coords: Vec<usize> = if len <= SAMPLES_PER_BLOCK {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, SAMPLES_PER_BLOCK).into_vec()
        };
        for idx in coords {
            if block < 2 {
                // unit and the amount each row's pre-activation moves
                let (unit, shift): (usize, Box<dyn Fn(usize) -> f64>) = if block == 0 {
                    let (j, k) = (idx / params.dim(), idx % params.dim());
                    (j, Box::new(move |i| H * x[[i, k]]))
                } else {
                    (idx, Box::new(|_| H))
                };
                let crosses = (0..x.nrows()).any(|i| {
                    let p = pre[[i, unit]];
                    let d = shift(i).abs();
                    p.abs() <= d
                });
                if crosses {
                    continue;
                }
            }
            let orig = params.blocks()[block][idx];
            probe.blocks_mut()[block][idx] = orig + H;
            let up = loss(&probe, x, labels, None);
            probe.blocks_mut()[block][idx] = orig - H;
            let down = loss(&probe, x, labels, None);
            probe.blocks_mut()[block][idx] = orig;
            let numeric = (up - down) / (2.0 * H);
            let exact = analytic.blocks()[block][idx];
            let err = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

/// Maximum relative error between backpropagated and finite-difference
/// gradients of the unweighted cross-entropy on `(x, labels)`.
pub fn gradient_check(params: &ProbeParams, x: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let (_, analytic) = loss_and_gradients(params, x, labels, None);
    gradient_check_against(params, x, labels, &analytic)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    /// Weight the loss by inverse class frequency.
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 20,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            early_stop_patience: 3,
            validation_fraction: 0.1,
            class_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && (0.0..1.0).contains(&self.validation_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: ProbeParams,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept (last epoch without validation).
    pub best_epoch: usize,
}

struct Adam {
    m: ProbeParams,
    v: ProbeParams,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(p: &ProbeParams) -> Self {
        let z = ProbeParams::zeros(p.dim(), p.hidden(), p.num_classes());
        Adam { m: z.clone(), v: z, t: 0 }
    }

    fn step(&mut self, params: &mut ProbeParams, grad: &ProbeParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let grads = grad.blocks();
        let ms = self.m.blocks_mut();
        let vs = self.v.blocks_mut();
        for (((p, g), m), v) in params.blocks_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn sgd_step(params: &mut ProbeParams, grad: &ProbeParams, lr: f64) {
    for (p, g) in params.blocks_mut().into_iter().zip(grad.blocks()) {
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= lr * gi;
        }
    }
}

fn evaluate(params: &ProbeParams, x: ArrayView2<f64>, labels: &[usize], weights: Option<&[f64]>) -> (f64, f64) {
    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    let mut correct = 0usize;
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let chunk = x.slice(s![start..end, ..]);
        let logits = activations(params, chunk).logits;
        for (row, &y) in logits.rows().into_iter().zip(&labels[start..end]) {
            let z = row.as_slice().unwrap();
            let w = weights.map_or(1.0, |w| w[y]);
            loss_sum -= w * log_softmax_at(z, y);
            weight_sum += w;
            correct += (argmax(z) == y) as usize;
        }
    }
    (loss_sum / weight_sum, correct as f64 / x.nrows() as f64)
}

/// Mini-batch training on stacked inputs with one label per row.
///
/// Randomness (initialisation, validation split, shuffling) is drawn from
/// named streams of `config.seed`, so results depend only on the data and
/// the configuration.
pub fn fit(x: ArrayView2<f64>, labels: &[usize], num_classes: usize, config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Validation(format!("label {bad} out of range for {num_classes} classes")));
    }
    let distinct: BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::Validation(
            "training data contains a single class; at least two are needed".into(),
        ));
    }

    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(config.seed, "probe-split"));
    let n_val = (config.validation_fraction * n as f64).floor() as usize;
    if n_val >= n {
        return Err(Error::Validation("validation split leaves no training rows".into()));
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();
    let x_train = x.select(Axis(0), &train_idx);
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let x_val = x.select(Axis(0), &val_idx);
    let y_val: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let class_weights = config.class_weighting.then(|| {
        let mut counts = vec![0usize; num_classes];
        for &y in &y_train {
            counts[y] += 1;
        }
        counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { y_train.len() as f64 / (num_classes * c) as f64 })
            .collect::<Vec<f64>>()
    });
    let weights = class_weights.as_deref();

    let mut params = init_probe(x.ncols(), num_classes, config.seed)?;
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = rng::stream(config.seed, "probe-shuffle");
    let mut batch_order: Vec<usize> = (0..x_train.nrows()).collect();

    let mut log = Vec::new();
    let mut best: Option<(f64, ProbeParams, usize)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        batch_order.shuffle(&mut shuffle_rng);
        for (b, chunk) in batch_order.chunks(config.batch_size).enumerate() {
            let xb = x_train.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let (batch_loss, grad) = loss_and_gradients(&params, xb.view(), &yb, weights);
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {batch_loss} at epoch {epoch}, batch {b} (lr {}, batch size {})",
                    config.learning_rate, config.batch_size
                )));
            }
            match config.optimizer {
                OptimizerKind::Adam => adam.step(&mut params, &grad, config.learning_rate),
                OptimizerKind::Sgd => sgd_step(&mut params, &grad, config.learning_rate),
            }
        }

        let (train_loss, train_accuracy) = evaluate(&params, x_train.view(), &y_train, weights);
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss after epoch {epoch}")));
        }
        let val = (n_val > 0).then(|| evaluate(&params, x_val.view(), &y_val, weights));
        log.push(EpochLog {
            epoch,
            train_loss,
            train_accuracy,
            val_loss: val.map(|v| v.0),
            val_accuracy: val.map(|v| v.1),
        });

        if let Some((val_loss, _)) = val {
            let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
            if improved {
                best = Some((val_loss, params.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
                    break;
                }
            }
        }
    }

    let (params, best_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => (params, log.len()),
    };
    Ok(FitOutcome { params, log, best_epoch })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub feature: String,
    /// Class labels in catalogue order; index i is output unit i.
    pub labels: Vec<String>,
    pub params: ProbeParams,
    pub config: TrainConfig,
    pub train_log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Training rows per class.
    pub class_counts: Vec<usize>,
}

impl TrainedProbe {
    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Share of the most frequent class among training rows.
    pub fn majority_share(&self) -> f64 {
        let total: usize = self.class_counts.iter().sum();
        *self.class_counts.iter().max().unwrap_or(&0) as f64 / total.max(1) as f64
    }
}

/// Trains a probe for `feature` on matrices that each carry one class index.
pub fn train_probe(
    feature: &WalsFeature,
    data: &[(&EmbeddingMatrix, usize)],
    config: &TrainConfig,
) -> Result<TrainedProbe> {
    let Some((first, _)) = data.first() else {
        return Err(Error::Validation("no training matrices".into()));
    };
    let dim = first.dim();
    let rows: usize = data.iter().map(|(m, _)| m.count()).sum();
    let mut x = Array2::<f64>::zeros((rows, dim));
    let mut labels = Vec::with_capacity(rows);
    let mut offset = 0;
    for (m, label) in data {
        if m.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: m.dim(),
            });
        }
        let view = ArrayView2::from_shape((m.count(), dim), m.data()).expect("row-major matrix");
        x.slice_mut(s![offset..offset + m.count(), ..]).assign(&view);
        labels.extend(std::iter::repeat_n(*label, m.count()));
        offset += m.count();
    }
    let num_classes = feature.num_classes();
    let mut class_counts = vec![0usize; num_classes];
    for &y in &labels {
        if y < num_classes {
            class_counts[y] += 1;
        }
    }
    let outcome = fit(x.view(), &labels, num_classes, config)?;
    Ok(TrainedProbe {
        feature: feature.code.clone(),
        labels: feature.label_names(),
        params: outcome.params,
        config: config.clone(),
        train_log: outcome.log,
        best_epoch: outcome.best_epoch,
        class_counts,
    })
}

/// Predicted class index per row; ties go to the lowest index.
pub fn predict(probe: &TrainedProbe, matrix: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if matrix.dim() != probe.dim() {
        return Err(Error::DimensionMismatch {
            expected: probe.dim(),
            actual: matrix.dim(),
        });
    }
    let x = ArrayView2::from_shape((matrix.count(), matrix.dim()), matrix.data()).expect("row-major matrix");
    let mut out = Vec::with_capacity(matrix.count());
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let probs = forward_batch(&probe.params, x.slice(s![start..end, ..]));
        out.extend(probs.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())));
    }
    Ok(out)
}

/// Fraction of rows predicted as `gold`.
pub fn accuracy_of(predictions: &[usize], gold: usize) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions.iter().filter(|&&p| p == gold).count() as f64 / predictions.len() as f64
}

pub fn evaluate_accuracy(probe: &TrainedProbe, matrix: &EmbeddingMatrix, gold: usize) -> Result<f64> {
    Ok(accuracy_of(&predict(probe, matrix)?, gold))
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    feature: String,
    labels: Vec<String>,
    dim: usize,
    hidden: usize,
    best_epoch: usize,
    class_counts: Vec<usize>,
    config: TrainConfig,
    train_log: Vec<EpochLog>,
}

const WEIGHT_FILES: [&str; 4] = ["w1.emb", "b1.emb", "w2.emb", "b2.emb"];

fn weight_block(feature: &str, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<EmbeddingMatrix> {
    let mut header = EmbeddingHeader::new(
        LanguageId::new("und").expect("valid code"),
        &format!("probe:{feature}"),
        0,
        cols,
        rows,
        Dtype::F64,
    );
    header.encoder_depth = 0;
    header.provenance = format!("weights:{name}");
    EmbeddingMatrix::new(header, data.to_vec())
}

impl TrainedProbe {
    /// Writes `probe.json` plus one f64 embedding-store file per weight block.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = ProbeMeta {
            feature: self.feature.clone(),
            labels: self.labels.clone(),
            dim: self.dim(),
            hidden: self.params.hidden(),
            best_epoch: self.best_epoch,
            class_counts: self.class_counts.clone(),
            config: self.config.clone(),
            train_log: self.train_log.clone(),
        };
        let path = dir.join("probe.json");
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let p = &self.params;
        let shapes = [
            (p.hidden(), p.dim()),
            (1, p.hidden()),
            (p.num_classes(), p.hidden()),
            (1, p.num_classes()),
        ];
        for ((file, (rows, cols)), data) in WEIGHT_FILES.iter().zip(shapes).zip(p.blocks()) {
            let name = file.trim_end_matches(".emb");
            write_embeddings(&weight_block(&self.feature, name, rows, cols, data)?, &dir.join(file))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("probe.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ProbeMeta = serde_json::from_str(&text)?;
        let k = meta.labels.len();
        let shapes = [(meta.hidden, meta.dim), (1, meta.hidden), (k, meta.hidden), (1, k)];
        let mut blocks = Vec::with_capacity(4);
        for (file, (rows, cols)) in WEIGHT_FILES.iter().zip(shapes) {
            let m = read_embeddings(&dir.join(file))?;
            if m.count() != rows || m.dim() != cols {
                return Err(Error::Validation(format!(
                    "{file}: expected {rows}x{cols}, found {}x{}",
                    m.count(),
                    m.dim()
                )));
            }
            blocks.push(m.data().to_vec());
        }
        let b2 = Array1::from(blocks.pop().unwrap());
        let w2 = Array2::from_shape_vec((k, meta.hidden), blocks.pop().unwrap()).expect("checked shape");
        let b1 = Array1::from(blocks.pop().unwrap());
        let w1 = Array2::from_shape_vec((meta.hidden, meta.dim), blocks.pop().unwrap()).expect("checked shape");
        Ok(TrainedProbe {
            feature: meta.feature,
            labels: meta.labels,
            params: ProbeParams { w1, b1, w2, b2 },
            config: meta.config,
            train_log: meta.train_log,
            best_epoch: meta.best_epoch,
            class_counts: meta.class_counts,
        })
    }
}
