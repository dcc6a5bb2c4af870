//! Finite-difference checks in f64. Each returns the worst relative error per
//! checked quantity; callers decide the tolerance.

use neurodx::layers::{relu, relu_backward, softmax, softmax_backward, Conv2d, Dense, MaxPool2d, Padding};
use neurodx::model::{build_hybrid, ModelConfig, Mode};
use neurodx::optim::{cross_entropy, softmax_cross_entropy};
use neurodx::recurrent::{Lstm, LstmState};
use neurodx::tensor::Init;
use neurodx::{Rng, Tensor};

use super::{max_fd_error, rel_error, TestRng};

pub const EPS: f64 = 1e-5;
pub const LAYER_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

pub type Errors = Vec<(String, f64)>;

fn random(shape: &[usize], rng: &mut TestRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.vec(n, -1.0, 1.0)).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn named(pairs: &[(&str, f64)]) -> Errors {
    pairs.iter().map(|(n, e)| (n.to_string(), *e)).collect()
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros([labels.len(), k]);
    for (r, &c) in labels.iter().enumerate() {
        t.set(&[r, c], 1.0);
    }
    t
}

/// 1x2x5x5 input, three 3x3 filters, same padding.
pub fn conv() -> Errors {
    let mut rng = TestRng::new(11);
    let mut conv = Conv2d::<f64>::new(2, 3, 3, Padding::Same, &mut Rng::new(1)).unwrap();
    conv.bias = random(&[3], &mut rng);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let (y, cache) = conv.forward(&x).unwrap();
    let r = random(y.shape(), &mut rng);
    let g = conv.backward(&cache, &r).unwrap();

    let err_x = max_fd_error(x.data(), g.input.data(), EPS, |v| {
        dot(&conv.forward(&with(x.shape(), v)).unwrap().0, &r)
    });
    let w_shape = conv.weights.shape().to_vec();
    let err_w = max_fd_error(conv.weights.data(), g.weights.data(), EPS, |v| {
        let mut c = conv.clone();
        c.weights = with(&w_shape, v);
        dot(&c.forward(&x).unwrap().0, &r)
    });
    let err_b = max_fd_error(conv.bias.data(), g.bias.data(), EPS, |v| {
        let mut c = conv.clone();
        c.bias = with(&[3], v);
        dot(&c.forward(&x).unwrap().0, &r)
    });
    named(&[("input", err_x), ("weights", err_w), ("bias", err_b)])
}

pub fn maxpool() -> Errors {
    let mut rng = TestRng::new(12);
    // A shuffled grid with spacing 0.05 keeps every window's max unique by far
    // more than EPS.
    let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.below(i + 1));
    }
    let x = with(&[1, 2, 4, 4], &vals);
    let pool = MaxPool2d::default();
    let (y, cache) = pool.forward(&x).unwrap();
    let r = random(y.shape(), &mut rng);
    let g = pool.backward(&cache, &r).unwrap();
    let err = max_fd_error(x.data(), g.data(), EPS, |v| {
        dot(&pool.forward(&with(x.shape(), v)).unwrap().0, &r)
    });
    named(&[("input", err)])
}

/// Inputs are kept at least 1e-3 away from zero.
pub fn relu_layer() -> Errors {
    let mut rng = TestRng::new(13);
    let data: Vec<f64> = (0..40)
        .map(|_| {
            let v = rng.range(-1.0, 1.0);
            if v.abs() < 1e-3 {
                0.5
            } else {
                v
            }
        })
        .collect();
    let x = with(&[40], &data);
    let r = random(&[40], &mut rng);
    let (_, cache) = relu(&x);
    let g = relu_backward(&cache, &r).unwrap();
    let err = max_fd_error(x.data(), g.data(), EPS, |v| dot(&relu(&with(&[40], v)).0, &r));
    named(&[("input", err)])
}

/// 4 -> 6 features, batch of 3.
pub fn dense() -> Errors {
    let mut rng = TestRng::new(14);
    let mut dense = Dense::<f64>::new(4, 6, Init::UniformXavier { fan_in: 4, fan_out: 6 }, &mut Rng::new(2)).unwrap();
    dense.bias = random(&[6], &mut rng);
    let x = random(&[3, 4], &mut rng);
    let (y, cache) = dense.forward(&x).unwrap();
    let r = random(y.shape(), &mut rng);
    let g = dense.backward(&cache, &r).unwrap();
    let err_x = max_fd_error(x.data(), g.input.data(), EPS, |v| {
        dot(&dense.forward(&with(&[3, 4], v)).unwrap().0, &r)
    });
    let err_w = max_fd_error(dense.weights.data(), g.weights.data(), EPS, |v| {
        let mut d = dense.clone();
        d.weights = with(&[4, 6], v);
        dot(&d.forward(&x).unwrap().0, &r)
    });
    let err_b = max_fd_error(dense.bias.data(), g.bias.data(), EPS, |v| {
        let mut d = dense.clone();
        d.bias = with(&[6], v);
        dot(&d.forward(&x).unwrap().0, &r)
    });
    named(&[("input", err_x), ("weights", err_w), ("bias", err_b)])
}

/// Every LSTM parameter, the input sequence, and the initial state.
pub fn lstm(batch: usize, steps: usize, input: usize, hidden: usize, seed: u64) -> Errors {
    let mut rng = TestRng::new(seed);
    let mut lstm = Lstm::<f64>::new(input, hidden, &mut Rng::new(seed)).unwrap();
    for t in lstm.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = random(&shape, &mut rng).scale(0.8);
    }
    let seq = random(&[batch, steps, input], &mut rng);
    let init = LstmState {
        h: random(&[batch, hidden], &mut rng).scale(0.5),
        c: random(&[batch, hidden], &mut rng),
    };
    let (out, _, cache) = lstm.forward(&seq, Some(&init)).unwrap();
    let r = random(out.shape(), &mut rng);
    let g = lstm.backward(&cache, &r).unwrap();

    let loss = |l: &Lstm<f64>, s: &Tensor<f64>, st: &LstmState<f64>| dot(&l.forward(s, Some(st)).unwrap().0, &r);
    let mut errs = Vec::new();
    for (p, name) in ["w_f", "w_i", "w_o", "w_g", "b_f", "b_i", "b_o", "b_g"].iter().enumerate() {
        let base = lstm.tensors()[p].clone();
        let analytic = g.params.tensors()[p].clone();
        let e = max_fd_error(base.data(), analytic.data(), EPS, |v| {
            let mut l = lstm.clone();
            *l.tensors_mut()[p] = with(base.shape(), v);
            loss(&l, &seq, &init)
        });
        errs.push((name.to_string(), e));
    }
    errs.push((
        "seq".into(),
        max_fd_error(seq.data(), g.seq.data(), EPS, |v| loss(&lstm, &with(seq.shape(), v), &init)),
    ));
    errs.push((
        "h0".into(),
        max_fd_error(init.h.data(), g.initial.h.data(), EPS, |v| {
            let st = LstmState { h: with(&[batch, hidden], v), c: init.c.clone() };
            loss(&lstm, &seq, &st)
        }),
    ));
    errs.push((
        "c0".into(),
        max_fd_error(init.c.data(), g.initial.c.data(), EPS, |v| {
            let st = LstmState { h: init.h.clone(), c: with(&[batch, hidden], v) };
            loss(&lstm, &seq, &st)
        }),
    ));
    errs
}

pub fn lstm_cell() -> Errors {
    lstm(2, 1, 3, 2, 15)
}

pub fn lstm_sequence() -> Errors {
    lstm(2, 3, 5, 4, 16)
}

/// Fused softmax + cross-entropy against finite differences, plus the largest
/// absolute gap between the fused gradient and the chained one.
pub fn fused_softmax_cross_entropy() -> (Errors, f64) {
    let mut rng = TestRng::new(17);
    let logits = random(&[3, 4], &mut rng).scale(3.0);
    let y = one_hot(&[2, 0, 3], 4);
    let (_, probs, fused) = softmax_cross_entropy(&logits, &y).unwrap();
    let err = max_fd_error(logits.data(), fused.data(), EPS, |v| {
        softmax_cross_entropy(&with(&[3, 4], v), &y).unwrap().0
    });
    let (_, grad_probs) = cross_entropy(&probs, &y).unwrap();
    let unfused = softmax_backward(&probs, &grad_probs).unwrap();
    let gap = fused
        .data()
        .iter()
        .zip(unfused.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (named(&[("logits", err)]), gap)
}

pub fn softmax_jacobian() -> Errors {
    let mut rng = TestRng::new(18);
    let logits = random(&[2, 5], &mut rng);
    let r = random(&[2, 5], &mut rng);
    let probs = softmax(&logits).unwrap();
    let g = softmax_backward(&probs, &r).unwrap();
    let err = max_fd_error(logits.data(), g.data(), EPS, |v| dot(&softmax(&with(&[2, 5], v)).unwrap(), &r));
    named(&[("logits", err)])
}

#[derive(Debug)]
pub struct EndToEnd {
    /// `(parameter, index, relative error)` for every accepted sample.
    pub samples: Vec<(String, usize, f64)>,
    /// Draws rejected because a ReLU or pooling switch lies inside the stencil.
    pub skipped: usize,
}

impl EndToEnd {
    pub fn worst(&self) -> f64 {
        self.samples.iter().map(|s| s.2).fold(0.0, f64::max)
    }
}

/// Loss gradient of the toy model for `count` random parameters, drawing
/// until `count` differentiable points are found or `max_skips` is exceeded.
pub fn toy_end_to_end(count: usize, max_skips: usize) -> EndToEnd {
    let cfg = ModelConfig::toy();
    let mut model = build_hybrid::<f64>(&cfg, &mut Rng::new(5)).unwrap();
    let mut rng = TestRng::new(19);
    let [c, h, w] = cfg.input_shape;
    let x = Tensor::new([2, c, h, w], rng.vec(2 * c * h * w, 0.0, 1.0)).unwrap();
    let y = one_hot(&[1, 3], 4);

    let fwd = model.forward(&x, Mode::Train).unwrap();
    let (_, _, grad_logits) = softmax_cross_entropy(&fwd.logits, &y).unwrap();
    let grads = model.backward_from_logits(&fwd, &grad_logits).unwrap();

    let n_tensors = grads.tensors.len();
    let mut out = EndToEnd { samples: Vec::new(), skipped: 0 };
    while out.samples.len() < count && out.skipped <= max_skips {
        let p = rng.below(n_tensors);
        let i = rng.below(grads.tensors[p].len());
        let analytic = grads.tensors[p].data()[i];
        let orig = model.parameters()[p].1.data()[i];
        let mut loss_at = |v: f64| {
            model.parameters_mut()[p].data_mut()[i] = v;
            let f = model.forward(&x, Mode::Eval).unwrap();
            softmax_cross_entropy(&f.logits, &y).unwrap().0
        };
        let (lo, mid, hi) = (loss_at(orig - EPS), loss_at(orig), loss_at(orig + EPS));
        model.parameters_mut()[p].data_mut()[i] = orig;
        // One-sided slopes disagree when the loss has a kink inside the stencil.
        let (left, right) = ((mid - lo) / EPS, (hi - mid) / EPS);
        if rel_error(left, right) > 1e-3 {
            out.skipped += 1;
            continue;
        }
        let numeric = (hi - lo) / (2.0 * EPS);
        let name = model.parameters()[p].0.clone();
        out.samples.push((name, i, rel_error(analytic, numeric)));
    }
    out
}

/// Output-gradient path against the logit path on the toy model; largest
/// absolute difference.
pub fn probability_vs_logit_path() -> f64 {
    let cfg = ModelConfig::toy();
    let model = build_hybrid::<f64>(&cfg, &mut Rng::new(6)).unwrap();
    let mut rng = TestRng::new(20);
    let [c, h, w] = cfg.input_shape;
    let x = Tensor::new([3, c, h, w], rng.vec(3 * c * h * w, 0.0, 1.0)).unwrap();
    let y = one_hot(&[0, 2, 1], 4);
    let fwd = model.forward(&x, Mode::Train).unwrap();
    let (_, _, gl) = softmax_cross_entropy(&fwd.logits, &y).unwrap();
    let (_, gp) = cross_entropy(&fwd.probs, &y).unwrap();
    let a = model.backward_from_logits(&fwd, &gl).unwrap();
    let b = model.backward(&fwd, &gp).unwrap();
    a.tensors
        .iter()
        .zip(&b.tensors)
        .flat_map(|(ta, tb)| ta.data().iter().zip(tb.data()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}
