use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl Default for MaxPool2d {
    fn default() -> Self {
        Self {
            window: (2, 2),
            stride: (2, 2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Flat input offset of the winner for every output element.
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (wh, ww) = self.window;
        let (sh, sw) = self.stride;
        if input.len() != 4 || wh == 0 || ww == 0 || sh == 0 || sw == 0 {
            return Err(Error::dim("maxpool", input, &[wh, ww]));
        }
        if input[2] < wh || input[3] < ww {
            return Err(Error::dim("maxpool", input, &[wh, ww]));
        }
        Ok(vec![
            input[0],
            input[1],
            (input[2] - wh) / sh + 1,
            (input[3] - ww) / sw + 1,
        ])
    }

    pub fn forward<F: Element>(&self, input: &Tensor<F>) -> Result<(Tensor<F>, MaxPoolCache)> {
        let out_shape = self.output_shape(input.shape())?;
        let (h, w) = (input.shape()[2], input.shape()[3]);
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let planes = out_shape[0] * out_shape[1];
        let x = input.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * self.stride.0, ox * self.stride.1);
                    let mut best = base + y0 * w + x0;
                    // Strict comparison keeps the first maximum in row-major order.
                    for dy in 0..self.window.0 {
                        for dx in 0..self.window.1 {
                            let idx = base + (y0 + dy) * w + x0 + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((
            Tensor::new(out_shape.clone(), out)?,
            MaxPoolCache {
                input_shape: input.shape().to_vec(),
                out_shape,
                argmax,
            },
        ))
    }

    pub fn backward<F: Element>(&self, cache: &MaxPoolCache, upstream: &Tensor<F>) -> Result<Tensor<F>> {
        if upstream.shape() != cache.out_shape.as_slice() {
            return Err(Error::dim("maxpool backward", upstream.shape(), &cache.out_shape));
        }
        let mut grad = Tensor::zeros(cache.input_shape.clone());
        let g = grad.data_mut();
        for (&idx, &u) in cache.argmax.iter().zip(upstream.data()) {
            g[idx] = g[idx] + u;
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn constant_in_constant_out() {
        let (y, _) = MaxPool2d::default()
            .forward(&Tensor::full([1, 2, 4, 6], 3.5f64))
            .unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn single_window_max() {
        let (y, _) = MaxPool2d::default()
            .forward(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn four_by_four_windows() {
        let x = t(
            &[1, 1, 4, 4],
            &[
                1.0, 3.0, 2.0, 1.0, //
                4.0, 2.0, 1.0, 5.0, //
                7.0, 8.0, 0.0, 0.0, //
                6.0, 5.0, 0.0, 1.0,
            ],
        );
        let (y, _) = MaxPool2d::default().forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0, 8.0, 1.0]);
    }

    #[test]
    fn odd_sizes_floor() {
        let pool = MaxPool2d::default();
        assert_eq!(pool.output_shape(&[1, 1, 5, 7]).unwrap(), vec![1, 1, 2, 3]);
    }

    #[test]
    fn too_small_input_rejected() {
        let err = MaxPool2d::default()
            .forward(&Tensor::<f64>::zeros([1, 1, 1, 4]))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn backward_routes_to_argmax() {
        let pool = MaxPool2d::default();
        let (_, cache) = pool.forward(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let g = pool.backward(&cache, &t(&[1, 1, 1, 1], &[5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 5.0]);
        let z = pool.backward(&cache, &t(&[1, 1, 1, 1], &[0.0])).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn ties_go_to_first_in_row_major_order() {
        let pool = MaxPool2d::default();
        let (_, cache) = pool.forward(&t(&[1, 1, 2, 2], &[0.0, 2.0, 2.0, 2.0])).unwrap();
        let g = pool.backward(&cache, &t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_shape_checked() {
        let pool = MaxPool2d::default();
        let (_, cache) = pool.forward(&Tensor::<f64>::zeros([1, 1, 4, 4])).unwrap();
        assert!(pool.backward(&cache, &Tensor::<f64>::zeros([1, 1, 1, 1])).is_err());
    }
}
