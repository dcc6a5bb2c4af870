use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Element, Init, Rng, Tensor};

/// Fully connected layer, `y = xW + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F: Element = f32> {
    /// `[in_features, out_features]`.
    pub weights: Tensor<F>,
    /// `[out_features]`.
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct DenseCache<F: Element = f32> {
    input: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads<F: Element = f32> {
    pub input: Tensor<F>,
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Element> Dense<F> {
    pub fn new(in_features: usize, out_features: usize, scheme: Init, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weights: Tensor::init([in_features, out_features], scheme, rng)?,
            bias: Tensor::init([out_features], Init::Zeros, rng)?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward(&self, input: &Tensor<F>) -> Result<(Tensor<F>, DenseCache<F>)> {
        if input.rank() != 2 || input.shape()[1] != self.in_features() {
            return Err(Error::dim("dense", input.shape(), self.weights.shape()));
        }
        let (n, fin, fout) = (input.shape()[0], self.in_features(), self.out_features());
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm(input.data(), self.weights.data(), &mut out, n, fin, fout);
        Ok((
            Tensor::new([n, fout], out)?,
            DenseCache {
                input: input.clone(),
            },
        ))
    }

    pub fn backward(&self, cache: &DenseCache<F>, upstream: &Tensor<F>) -> Result<DenseGrads<F>> {
        let n = cache.input.shape()[0];
        let (fin, fout) = (self.in_features(), self.out_features());
        if upstream.shape() != [n, fout] {
            return Err(Error::dim("dense backward", upstream.shape(), &[n, fout]));
        }
        let mut dx = vec![F::zero(); n * fin];
        gemm_nt(upstream.data(), self.weights.data(), &mut dx, n, fout, fin);
        let mut dw = vec![F::zero(); fin * fout];
        gemm_tn(cache.input.data(), upstream.data(), &mut dw, fin, n, fout);
        let mut db = vec![F::zero(); fout];
        for row in upstream.data().chunks(fout) {
            for (d, &u) in db.iter_mut().zip(row) {
                *d = *d + u;
            }
        }
        Ok(DenseGrads {
            input: Tensor::new([n, fin], dx)?,
            weights: Tensor::new([fin, fout], dw)?,
            bias: Tensor::new([fout], db)?,
        })
    }
}
