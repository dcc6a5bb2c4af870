use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct ReluCache<F: Element = f32> {
    input: Tensor<F>,
}

pub fn relu<F: Element>(input: &Tensor<F>) -> (Tensor<F>, ReluCache<F>) {
    (
        input.map(|v| v.max(F::zero())),
        ReluCache {
            input: input.clone(),
        },
    )
}

/// Passes upstream only where the forward input was strictly positive.
pub fn relu_backward<F: Element>(cache: &ReluCache<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    if upstream.shape() != cache.input.shape() {
        return Err(Error::dim("relu backward", upstream.shape(), cache.input.shape()));
    }
    let data = cache
        .input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &u)| if x > F::zero() { u } else { F::zero() })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}

/// Row-wise softmax over `[n, k]` logits, stabilized by subtracting the row max.
pub fn softmax<F: Element>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    if logits.rank() != 2 {
        return Err(Error::arg(format!(
            "softmax expects [n, k] logits, got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let z: F = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v = *v / z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax given its output `probs`.
pub fn softmax_backward<F: Element>(probs: &Tensor<F>, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    if probs.shape() != upstream.shape() || probs.rank() != 2 {
        return Err(Error::dim("softmax backward", upstream.shape(), probs.shape()));
    }
    let k = probs.shape()[1];
    let mut out = Vec::with_capacity(probs.len());
    for (p, u) in probs.data().chunks(k).zip(upstream.data().chunks(k)) {
        let dot: F = p.iter().zip(u).map(|(&a, &b)| a * b).sum();
        out.extend(p.iter().zip(u).map(|(&pi, &ui)| pi * (ui - dot)));
    }
    Tensor::new(probs.shape().to_vec(), out)
}
