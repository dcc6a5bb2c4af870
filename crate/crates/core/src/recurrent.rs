//! LSTM cell and sequence layer with backpropagation through time.
//!
//! Gate equations over the concatenation `z = [x, h_prev]`:
//!
//! ```text
//! f = sigmoid(z W_f + b_f)      forget
//! i = sigmoid(z W_i + b_i)      input
//! o = sigmoid(z W_o + b_o)      output
//! g = tanh(z W_g + b_g)         candidate
//! c = f * c_prev + i * g
//! h = o * tanh(c)
//! ```

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Element, Init, Rng, Tensor};

/// Gate parameters; every weight matrix is `[input_size + hidden_size, hidden_size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<F: Element = f32> {
    pub w_f: Tensor<F>,
    pub w_i: Tensor<F>,
    pub w_o: Tensor<F>,
    pub w_g: Tensor<F>,
    pub b_f: Tensor<F>,
    pub b_i: Tensor<F>,
    pub b_o: Tensor<F>,
    pub b_g: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<F: Element = f32> {
    /// `[n, hidden]`.
    pub h: Tensor<F>,
    /// `[n, hidden]`.
    pub c: Tensor<F>,
}

impl<F: Element> LstmState<F> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros([batch, hidden]),
            c: Tensor::zeros([batch, hidden]),
        }
    }
}

/// Intermediates of one cell step, all `[n, hidden]` except `z`.
#[derive(Debug, Clone)]
pub struct StepCache<F: Element = f32> {
    /// `[n, input + hidden]`.
    pub z: Vec<F>,
    pub f: Vec<F>,
    pub i: Vec<F>,
    pub o: Vec<F>,
    pub g: Vec<F>,
    pub c_prev: Vec<F>,
    pub tanh_c: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct LstmCache<F: Element = f32> {
    batch: usize,
    steps: Vec<StepCache<F>>,
}

impl<F: Element> LstmCache<F> {
    pub fn steps(&self) -> &[StepCache<F>] {
        &self.steps
    }
}

/// Gradients of [`Lstm`] parameters, in the same field layout.
pub type LstmParamGrads<F> = Lstm<F>;

#[derive(Debug, Clone)]
pub struct LstmGrads<F: Element = f32> {
    /// `[n, T, input]`.
    pub seq: Tensor<F>,
    pub params: LstmParamGrads<F>,
    pub initial: LstmState<F>,
}

fn sigmoid<F: Element>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Element> Lstm<F> {
    /// Xavier-uniform gate weights, forget bias 1, other biases 0.
    pub fn new(input_size: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let rows = input_size + hidden;
        let xavier = Init::UniformXavier {
            fan_in: rows,
            fan_out: hidden,
        };
        Ok(Self {
            w_f: Tensor::init([rows, hidden], xavier, rng)?,
            w_i: Tensor::init([rows, hidden], xavier, rng)?,
            w_o: Tensor::init([rows, hidden], xavier, rng)?,
            w_g: Tensor::init([rows, hidden], xavier, rng)?,
            b_f: Tensor::init([hidden], Init::Constant(1.0), rng)?,
            b_i: Tensor::init([hidden], Init::Zeros, rng)?,
            b_o: Tensor::init([hidden], Init::Zeros, rng)?,
            b_g: Tensor::init([hidden], Init::Zeros, rng)?,
        })
    }

    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        let rows = input_size + hidden;
        Self {
            w_f: Tensor::zeros([rows, hidden]),
            w_i: Tensor::zeros([rows, hidden]),
            w_o: Tensor::zeros([rows, hidden]),
            w_g: Tensor::zeros([rows, hidden]),
            b_f: Tensor::zeros([hidden]),
            b_i: Tensor::zeros([hidden]),
            b_o: Tensor::zeros([hidden]),
            b_g: Tensor::zeros([hidden]),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_f.shape()[1]
    }

    pub fn input_size(&self) -> usize {
        self.w_f.shape()[0] - self.hidden_size()
    }

    /// Parameters in fixed order: `w_f, w_i, w_o, w_g, b_f, b_i, b_o, b_g`.
    pub fn tensors(&self) -> [&Tensor<F>; 8] {
        [
            &self.w_f, &self.w_i, &self.w_o, &self.w_g, &self.b_f, &self.b_i, &self.b_o, &self.b_g,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<F>; 8] {
        [
            &mut self.w_f,
            &mut self.w_i,
            &mut self.w_o,
            &mut self.w_g,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_o,
            &mut self.b_g,
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 8] =
        ["w_f", "w_i", "w_o", "w_g", "b_f", "b_i", "b_o", "b_g"];

    fn check(&self) -> Result<()> {
        let shape = self.w_f.shape();
        let hidden = shape[1];
        for w in [&self.w_i, &self.w_o, &self.w_g] {
            if w.shape() != shape {
                return Err(Error::dim("lstm gate weights", w.shape(), shape));
            }
        }
        for b in [&self.b_f, &self.b_i, &self.b_o, &self.b_g] {
            if b.shape() != [hidden] {
                return Err(Error::dim("lstm gate bias", b.shape(), &[hidden]));
            }
        }
        if shape[0] <= hidden {
            return Err(Error::arg("lstm weights need input_size >= 1"));
        }
        Ok(())
    }

    fn gate(&self, z: &[F], w: &Tensor<F>, b: &Tensor<F>, n: usize, act: fn(F) -> F) -> Vec<F> {
        let hidden = self.hidden_size();
        let mut pre = Vec::with_capacity(n * hidden);
        for _ in 0..n {
            pre.extend_from_slice(b.data());
        }
        gemm(z, w.data(), &mut pre, n, w.shape()[0], hidden);
        pre.into_iter().map(act).collect()
    }

    fn step_raw(&self, x: &[F], h_prev: &[F], c_prev: &[F], n: usize) -> (Vec<F>, Vec<F>, StepCache<F>) {
        let (input, hidden) = (self.input_size(), self.hidden_size());
        let mut z = Vec::with_capacity(n * (input + hidden));
        for r in 0..n {
            z.extend_from_slice(&x[r * input..(r + 1) * input]);
            z.extend_from_slice(&h_prev[r * hidden..(r + 1) * hidden]);
        }
        let f = self.gate(&z, &self.w_f, &self.b_f, n, sigmoid);
        let i = self.gate(&z, &self.w_i, &self.b_i, n, sigmoid);
        let o = self.gate(&z, &self.w_o, &self.b_o, n, sigmoid);
        let g = self.gate(&z, &self.w_g, &self.b_g, n, F::tanh);
        let c: Vec<F> = (0..n * hidden)
            .map(|k| f[k] * c_prev[k] + i[k] * g[k])
            .collect();
        let tanh_c: Vec<F> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<F> = o.iter().zip(&tanh_c).map(|(&a, &b)| a * b).collect();
        let cache = StepCache {
            z,
            f,
            i,
            o,
            g,
            c_prev: c_prev.to_vec(),
            tanh_c,
        };
        (h, c, cache)
    }

    /// One timestep on `x: [n, input]`.
    pub fn cell_step(&self, x: &Tensor<F>, state: &LstmState<F>) -> Result<(LstmState<F>, StepCache<F>)> {
        self.check()?;
        let (input, hidden) = (self.input_size(), self.hidden_size());
        if x.rank() != 2 || x.shape()[1] != input {
            return Err(Error::dim("lstm step input", x.shape(), &[x.shape()[0], input]));
        }
        let n = x.shape()[0];
        for t in [&state.h, &state.c] {
            if t.shape() != [n, hidden] {
                return Err(Error::dim("lstm step state", t.shape(), &[n, hidden]));
            }
        }
        let (h, c, cache) = self.step_raw(x.data(), state.h.data(), state.c.data(), n);
        Ok((
            LstmState {
                h: Tensor::new([n, hidden], h)?,
                c: Tensor::new([n, hidden], c)?,
            },
            cache,
        ))
    }

    /// Runs the cell over `seq: [n, T, input]`, returning every `h_t` as `[n, T, hidden]`.
    pub fn forward(
        &self,
        seq: &Tensor<F>,
        initial: Option<&LstmState<F>>,
    ) -> Result<(Tensor<F>, LstmState<F>, LstmCache<F>)> {
        self.check()?;
        let (input, hidden) = (self.input_size(), self.hidden_size());
        if seq.rank() != 3 || seq.shape()[2] != input {
            return Err(Error::dim("lstm sequence", seq.shape(), &[0, 0, input]));
        }
        let (n, steps) = (seq.shape()[0], seq.shape()[1]);
        if steps == 0 {
            return Err(Error::arg("lstm sequence needs at least one timestep"));
        }
        let (mut h, mut c) = match initial {
            Some(s) => {
                for t in [&s.h, &s.c] {
                    if t.shape() != [n, hidden] {
                        return Err(Error::dim("lstm initial state", t.shape(), &[n, hidden]));
                    }
                }
                (s.h.data().to_vec(), s.c.data().to_vec())
            }
            None => (vec![F::zero(); n * hidden], vec![F::zero(); n * hidden]),
        };
        let mut outputs = vec![F::zero(); n * steps * hidden];
        let mut caches = Vec::with_capacity(steps);
        let mut x_t = vec![F::zero(); n * input];
        for t in 0..steps {
            for r in 0..n {
                let src = (r * steps + t) * input;
                x_t[r * input..(r + 1) * input].copy_from_slice(&seq.data()[src..src + input]);
            }
            let (h_next, c_next, cache) = self.step_raw(&x_t, &h, &c, n);
            for r in 0..n {
                let dst = (r * steps + t) * hidden;
                outputs[dst..dst + hidden].copy_from_slice(&h_next[r * hidden..(r + 1) * hidden]);
            }
            h = h_next;
            c = c_next;
            caches.push(cache);
        }
        Ok((
            Tensor::new([n, steps, hidden], outputs)?,
            LstmState {
                h: Tensor::new([n, hidden], h)?,
                c: Tensor::new([n, hidden], c)?,
            },
            LstmCache { batch: n, steps: caches },
        ))
    }

    /// Backpropagation through time from upstream gradients on every output `h_t`.
    pub fn backward(&self, cache: &LstmCache<F>, upstream: &Tensor<F>) -> Result<LstmGrads<F>> {
        let (input, hidden) = (self.input_size(), self.hidden_size());
        let (n, steps) = (cache.batch, cache.steps.len());
        let want = [n, steps, hidden];
        if upstream.shape() != want {
            return Err(Error::dim("lstm backward", upstream.shape(), &want));
        }
        let rows = input + hidden;
        let mut grads = Lstm::zeros(input, hidden);
        let mut dseq = vec![F::zero(); n * steps * input];
        let mut dh_next = vec![F::zero(); n * hidden];
        let mut dc_next = vec![F::zero(); n * hidden];
        let one = F::one();

        for t in (0..steps).rev() {
            let s = &cache.steps[t];
            let mut dpf = vec![F::zero(); n * hidden];
            let mut dpi = vec![F::zero(); n * hidden];
            let mut dpo = vec![F::zero(); n * hidden];
            let mut dpg = vec![F::zero(); n * hidden];
            for r in 0..n {
                for j in 0..hidden {
                    let k = r * hidden + j;
                    let dh = upstream.data()[(r * steps + t) * hidden + j] + dh_next[k];
                    let tc = s.tanh_c[k];
                    let dc = dc_next[k] + dh * s.o[k] * (one - tc * tc);
                    dpo[k] = dh * tc * s.o[k] * (one - s.o[k]);
                    dpf[k] = dc * s.c_prev[k] * s.f[k] * (one - s.f[k]);
                    dpi[k] = dc * s.g[k] * s.i[k] * (one - s.i[k]);
                    dpg[k] = dc * s.i[k] * (one - s.g[k] * s.g[k]);
                    dc_next[k] = dc * s.f[k];
                }
            }
            let mut dz = vec![F::zero(); n * rows];
            for (dp, w, dw, db) in [
                (&dpf, &self.w_f, &mut grads.w_f, &mut grads.b_f),
                (&dpi, &self.w_i, &mut grads.w_i, &mut grads.b_i),
                (&dpo, &self.w_o, &mut grads.w_o, &mut grads.b_o),
                (&dpg, &self.w_g, &mut grads.w_g, &mut grads.b_g),
            ] {
                gemm_tn(&s.z, dp, dw.data_mut(), rows, n, hidden);
                for row in dp.chunks(hidden) {
                    for (b, &d) in db.data_mut().iter_mut().zip(row) {
                        *b = *b + d;
                    }
                }
                gemm_nt(dp, w.data(), &mut dz, n, hidden, rows);
            }
            for r in 0..n {
                let zrow = &dz[r * rows..(r + 1) * rows];
                let dst = (r * steps + t) * input;
                dseq[dst..dst + input].copy_from_slice(&zrow[..input]);
                dh_next[r * hidden..(r + 1) * hidden].copy_from_slice(&zrow[input..]);
            }
        }
        Ok(LstmGrads {
            seq: Tensor::new([n, steps, input], dseq)?,
            params: grads,
            initial: LstmState {
                h: Tensor::new([n, hidden], dh_next)?,
                c: Tensor::new([n, hidden], dc_next)?,
            },
        })
    }
}
