//! Categorical cross-entropy, Adam, and the epoch loop.

use std::fmt::Write as _;

use crate::data::{batches, BatchOptions, Dataset, Subset};
use crate::error::{Error, Result};
use crate::layers::softmax;
use crate::model::{ModelGraph, Mode};
use crate::tensor::{Element, Tensor};

/// Floor applied to probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Maximum absolute rotation applied to training images; 0 disables augmentation.
    pub max_rotation_deg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            max_rotation_deg: 15.0,
        }
    }
}

fn check_one_hot<F: Element>(labels: &Tensor<F>) -> Result<()> {
    let k = labels.shape()[1];
    for (r, row) in labels.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == F::one()).count();
        let zeros = row.iter().filter(|&&v| v == F::zero()).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::arg(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

fn clamped_loss<F: Element>(probs: &Tensor<F>, labels: &Tensor<F>) -> F {
    let n = probs.shape()[0] as f64;
    let total: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(_, &y)| y != F::zero())
        .map(|(&p, &y)| -y.as_f64() * p.as_f64().max(PROB_FLOOR).ln())
        .sum();
    F::of(total / n)
}

/// Mean categorical cross-entropy over `[n, k]` probabilities and one-hot labels,
/// with the gradient with respect to the probabilities.
pub fn cross_entropy<F: Element>(probs: &Tensor<F>, labels: &Tensor<F>) -> Result<(F, Tensor<F>)> {
    if probs.rank() != 2 || probs.shape() != labels.shape() {
        return Err(Error::dim("cross_entropy", probs.shape(), labels.shape()));
    }
    check_one_hot(labels)?;
    let k = probs.shape()[1];
    for (r, row) in probs.data().chunks(k).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::arg(format!("probability row {r} sums to {s}")));
        }
    }
    let n = F::of(probs.shape()[0] as f64);
    let floor = F::of(PROB_FLOOR);
    let grad = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| if p > floor { -y / (n * p) } else { F::zero() })
        .collect();
    Ok((clamped_loss(probs, labels), Tensor::new(probs.shape().to_vec(), grad)?))
}

/// Fused softmax + cross-entropy on logits. Returns `(loss, probs, grad_logits)`
/// with `grad_logits = (p - y) / n`.
pub fn softmax_cross_entropy<F: Element>(
    logits: &Tensor<F>,
    labels: &Tensor<F>,
) -> Result<(F, Tensor<F>, Tensor<F>)> {
    if logits.rank() != 2 || logits.shape() != labels.shape() {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), labels.shape()));
    }
    check_one_hot(labels)?;
    let probs = softmax(logits)?;
    let n = F::of(logits.shape()[0] as f64);
    let grad = probs.sub(labels)?.map(|v| v / n);
    Ok((clamped_loss(&probs, labels), probs, grad))
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Element = f32> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Element> AdamState<F> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<F>> = shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(model: &ModelGraph<F>) -> Self {
        let params = model.parameters();
        Self::new(params.iter().map(|(_, t)| t.shape()))
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<F: Element>(
    params: &mut [&mut Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::arg(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = F::of(1.0 / (1.0 - b1.powi(t)));
    let c2 = F::of(1.0 / (1.0 - b2.powi(t)));
    let (b1, b2) = (F::of(b1), F::of(b2));
    let (lr, eps) = (F::of(cfg.learning_rate), F::of(cfg.epsilon));
    let one = F::one();
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((theta, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m * c1;
            let v_hat = *v * c2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == HISTORY_HEADER => {}
            _ => return Err(Error::arg("history csv: missing header")),
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::arg(format!("history csv: malformed row {}", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                train_acc: num(f[2])?,
                test_loss: num(f[3])?,
                test_acc: num(f[4])?,
            });
        }
        if records.is_empty() {
            return Err(Error::arg("history csv: no rows"));
        }
        Ok(Self { records })
    }
}

/// Callbacks from [`train`], invoked synchronously after every epoch.
pub trait TrainHooks<F: Element> {
    fn on_epoch_end(
        &mut self,
        _record: &EpochRecord,
        _model: &ModelGraph<F>,
        _adam: &AdamState<F>,
    ) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl<F: Element> TrainHooks<F> for NoHooks {}

/// Predictions over one subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Dataset indices in evaluation order.
    pub indices: Vec<usize>,
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    /// Row-major `[n, k]` class probabilities.
    pub probs: Vec<f64>,
}

/// Evaluation-mode pass over `subset` in dataset order.
pub fn evaluate<F: Element>(
    model: &ModelGraph<F>,
    dataset: &Dataset,
    subset: Subset,
    batch_size: usize,
) -> Result<Evaluation> {
    let opts = BatchOptions {
        batch_size,
        shuffle: false,
        ..BatchOptions::default()
    };
    let mut ev = Evaluation {
        loss: 0.0,
        accuracy: 0.0,
        indices: Vec::new(),
        y_true: Vec::new(),
        y_pred: Vec::new(),
        probs: Vec::new(),
    };
    let floor = PROB_FLOOR;
    let mut loss_sum = 0.0;
    for batch in batches(dataset, subset, &opts)? {
        let batch = batch?;
        let out = model.forward(&batch.images.cast::<F>(), Mode::Eval)?;
        let k = out.probs.shape()[1];
        for (row, &idx) in out.probs.data().chunks(k).zip(&batch.indices) {
            let label = dataset.items()[idx].label;
            let pred = argmax(row);
            loss_sum -= row[label].as_f64().max(floor).ln();
            ev.indices.push(idx);
            ev.y_true.push(label);
            ev.y_pred.push(pred);
            ev.probs.extend(row.iter().map(|v| v.as_f64()));
        }
    }
    let n = ev.y_true.len() as f64;
    ev.loss = loss_sum / n;
    ev.accuracy = ev.y_true.iter().zip(&ev.y_pred).filter(|(a, b)| a == b).count() as f64 / n;
    Ok(ev)
}

/// First index of the maximum.
pub fn argmax<F: Element>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place on the train subset of an already split dataset.
///
/// Each epoch reshuffles with a stream derived from `cfg.seed`, applies one
/// Adam step per batch on the fused softmax/cross-entropy gradient, then
/// evaluates loss and accuracy on the full train and test subsets.
pub fn train<F: Element>(
    model: &mut ModelGraph<F>,
    adam: &mut AdamState<F>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks<F>,
) -> Result<TrainReport> {
    if dataset.subset_len(Subset::Train) == 0 {
        return Err(Error::arg("training subset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let has_test = dataset.subset_len(Subset::Test) > 0;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let opts = BatchOptions {
            batch_size: cfg.batch_size,
            shuffle: true,
            seed: cfg.seed,
            epoch: epoch as u64,
            max_rotation_deg: cfg.max_rotation_deg,
        };
        for (b, batch) in batches(dataset, Subset::Train, &opts)?.enumerate() {
            let batch = batch?;
            let images = batch.images.cast::<F>();
            let labels = batch.labels.cast::<F>();
            let fwd = model.forward(&images, Mode::Train)?;
            let (loss, _, grad) = softmax_cross_entropy(&fwd.logits, &labels)?;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    batch: b + 1,
                });
            }
            let grads = model.backward_from_logits(&fwd, &grad)?;
            adam_step(&mut model.parameters_mut(), &grads.tensors, adam, cfg)?;
        }
        let tr = evaluate(model, dataset, Subset::Train, cfg.batch_size)?;
        let (test_loss, test_acc) = if has_test {
            let te = evaluate(model, dataset, Subset::Test, cfg.batch_size)?;
            (te.loss, te.accuracy)
        } else {
            (f64::NAN, f64::NAN)
        };
        if !tr.loss.is_finite() {
            return Err(Error::NonFinite {
                epoch: epoch + 1,
                batch: 0,
            });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            test_loss,
            test_acc,
        };
        hooks.on_epoch_end(&record, model, adam)?;
        report.records.push(record);
    }
    Ok(report)
}
