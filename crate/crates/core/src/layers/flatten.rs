use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct FlattenCache {
    input_shape: Vec<usize>,
}

/// `[n, ...]` to `[n, product(...)]`, keeping row-major order.
pub fn flatten<F: Element>(input: &Tensor<F>) -> Result<(Tensor<F>, FlattenCache)> {
    if input.rank() < 2 {
        return Err(Error::arg(format!(
            "flatten needs a batch axis and at least one feature axis, got {:?}",
            input.shape()
        )));
    }
    let n = input.shape()[0];
    let features = input.len() / n;
    let cache = FlattenCache {
        input_shape: input.shape().to_vec(),
    };
    Ok((input.clone().reshape([n, features])?, cache))
}

pub fn flatten_backward<F: Element>(cache: &FlattenCache, upstream: &Tensor<F>) -> Result<Tensor<F>> {
    upstream.clone().reshape(cache.input_shape.clone())
}
