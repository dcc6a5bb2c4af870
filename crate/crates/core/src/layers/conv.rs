use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Element, Init, Rng, Tensor};

/// Upper bound on the elements of one im2col tile.
const TILE_ELEMS: usize = 1 << 18;
/// Samples per deterministic weight-gradient partial sum.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k-1)/2` before and `k/2` after on each axis.
    Same,
    Valid,
}

/// 2-D cross-correlation layer over `[n, c, h, w]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F: Element = f32> {
    /// `[out_channels, in_channels, kh, kw]`.
    pub weights: Tensor<F>,
    /// `[out_channels]`.
    pub bias: Tensor<F>,
    pub stride: (usize, usize),
    pub padding: Padding,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<F: Element = f32> {
    input: Tensor<F>,
    out_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<F: Element = f32> {
    pub input: Tensor<F>,
    pub weights: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_t: usize,
    pad_l: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_ELEMS / (self.patch() * self.ow).max(1)).clamp(1, self.oh)
    }
}

/// Output length and leading pad along one axis.
pub fn conv_axis(len: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(Error::arg("kernel and stride must be positive"));
    }
    match padding {
        Padding::Same => Ok(((len - 1) / stride + 1, (k - 1) / 2)),
        Padding::Valid => {
            if len < k {
                return Err(Error::dim("conv2d (valid)", &[len], &[k]));
            }
            Ok(((len - k) / stride + 1, 0))
        }
    }
}

impl<F: Element> Conv2d<F> {
    /// He-uniform weights and zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        Ok(Self {
            weights: Tensor::init(
                [out_channels, in_channels, kernel, kernel],
                Init::UniformHe { fan_in },
                rng,
            )?,
            bias: Tensor::init([out_channels], Init::Zeros, rng)?,
            stride: (1, 1),
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    fn geometry(&self, input: &[usize]) -> Result<Geometry> {
        let ws = self.weights.shape();
        if input.len() != 4 || input[1] != ws[1] {
            return Err(Error::dim("conv2d", input, ws));
        }
        if self.bias.shape() != [ws[0]] {
            return Err(Error::dim("conv2d bias", self.bias.shape(), &ws[..1]));
        }
        let (oh, pad_t) = conv_axis(input[2], ws[2], self.stride.0, self.padding)?;
        let (ow, pad_l) = conv_axis(input[3], ws[3], self.stride.1, self.padding)?;
        Ok(Geometry {
            c_in: ws[1],
            h: input[2],
            w: input[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            sh: self.stride.0,
            sw: self.stride.1,
            pad_t,
            pad_l,
            oh,
            ow,
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let g = self.geometry(input)?;
        Ok(vec![input[0], g.c_out, g.oh, g.ow])
    }

    pub fn forward(&self, input: &Tensor<F>) -> Result<(Tensor<F>, Conv2dCache<F>)> {
        let g = self.geometry(input.shape())?;
        let n = input.shape()[0];
        let out_shape = vec![n, g.c_out, g.oh, g.ow];
        let per_out = g.c_out * g.out_plane();
        let mut out = vec![F::zero(); n * per_out];
        let x = input.data();
        let weights = self.weights.data();
        let bias = self.bias.data();

        out.par_chunks_mut(per_out)
            .enumerate()
            .for_each(|(s, y)| {
                let xs = &x[s * g.in_plane()..(s + 1) * g.in_plane()];
                forward_sample(&g, xs, weights, bias, y);
            });

        let out = Tensor::new(out_shape.clone(), out)?;
        Ok((
            out,
            Conv2dCache {
                input: input.clone(),
                out_shape,
            },
        ))
    }

    pub fn backward(&self, cache: &Conv2dCache<F>, upstream: &Tensor<F>) -> Result<Conv2dGrads<F>> {
        if upstream.shape() != cache.out_shape.as_slice() {
            return Err(Error::dim("conv2d backward", upstream.shape(), &cache.out_shape));
        }
        let g = self.geometry(cache.input.shape())?;
        let n = cache.input.shape()[0];
        let x = cache.input.data();
        let up = upstream.data();
        let weights = self.weights.data();
        let per_out = g.c_out * g.out_plane();
        let mut grad_input = vec![F::zero(); n * g.in_plane()];

        let partials: Vec<(Vec<F>, Vec<F>)> = grad_input
            .par_chunks_mut(g.in_plane() * GRAD_CHUNK)
            .enumerate()
            .map(|(chunk, dx)| {
                let mut dw = vec![F::zero(); g.c_out * g.patch()];
                let mut db = vec![F::zero(); g.c_out];
                for (j, dxs) in dx.chunks_mut(g.in_plane()).enumerate() {
                    let s = chunk * GRAD_CHUNK + j;
                    let xs = &x[s * g.in_plane()..(s + 1) * g.in_plane()];
                    let ups = &up[s * per_out..(s + 1) * per_out];
                    backward_sample(&g, xs, weights, ups, dxs, &mut dw, &mut db);
                }
                (dw, db)
            })
            .collect();

        // Fixed reduction order keeps weight gradients independent of thread count.
        let mut dw = vec![F::zero(); g.c_out * g.patch()];
        let mut db = vec![F::zero(); g.c_out];
        for (pw, pb) in partials {
            for (a, b) in dw.iter_mut().zip(pw) {
                *a = *a + b;
            }
            for (a, b) in db.iter_mut().zip(pb) {
                *a = *a + b;
            }
        }

        Ok(Conv2dGrads {
            input: Tensor::new(cache.input.shape().to_vec(), grad_input)?,
            weights: Tensor::new(self.weights.shape().to_vec(), dw)?,
            bias: Tensor::new([g.c_out], db)?,
        })
    }
}

fn im2col_tile<F: Element>(g: &Geometry, x: &[F], oy0: usize, oy1: usize, cols: &mut [F]) {
    let tile = (oy1 - oy0) * g.ow;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * tile..(r + 1) * tile];
                for oy in oy0..oy1 {
                    let iy = (oy * g.sh + ky) as isize - g.pad_t as isize;
                    let dst = &mut row[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pad_l as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_tile<F: Element>(g: &Geometry, cols: &[F], oy0: usize, oy1: usize, dx: &mut [F]) {
    let tile = (oy1 - oy0) * g.ow;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &cols[r * tile..(r + 1) * tile];
                for oy in oy0..oy1 {
                    let iy = (oy * g.sh + ky) as isize - g.pad_t as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pad_l as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

fn forward_sample<F: Element>(g: &Geometry, x: &[F], weights: &[F], bias: &[F], y: &mut [F]) {
    let plane = g.out_plane();
    for (o, &b) in bias.iter().enumerate() {
        y[o * plane..(o + 1) * plane].fill(b);
    }
    let rows = g.rows_per_tile();
    let mut cols = vec![F::zero(); g.patch() * rows * g.ow];
    let mut tmp = vec![F::zero(); g.c_out * rows * g.ow];
    let mut oy0 = 0;
    while oy0 < g.oh {
        let oy1 = (oy0 + rows).min(g.oh);
        let tile = (oy1 - oy0) * g.ow;
        let cols = &mut cols[..g.patch() * tile];
        let tmp = &mut tmp[..g.c_out * tile];
        im2col_tile(g, x, oy0, oy1, cols);
        tmp.fill(F::zero());
        gemm(weights, cols, tmp, g.c_out, g.patch(), tile);
        let p0 = oy0 * g.ow;
        for o in 0..g.c_out {
            let dst = &mut y[o * plane + p0..o * plane + p0 + tile];
            for (d, &t) in dst.iter_mut().zip(&tmp[o * tile..(o + 1) * tile]) {
                *d = *d + t;
            }
        }
        oy0 = oy1;
    }
}

fn backward_sample<F: Element>(
    g: &Geometry,
    x: &[F],
    weights: &[F],
    up: &[F],
    dx: &mut [F],
    dw: &mut [F],
    db: &mut [F],
) {
    let plane = g.out_plane();
    for (o, d) in db.iter_mut().enumerate() {
        *d = *d + up[o * plane..(o + 1) * plane].iter().copied().sum();
    }
    let rows = g.rows_per_tile();
    let mut cols = vec![F::zero(); g.patch() * rows * g.ow];
    let mut dcols = vec![F::zero(); g.patch() * rows * g.ow];
    let mut up_tile = vec![F::zero(); g.c_out * rows * g.ow];
    let mut oy0 = 0;
    while oy0 < g.oh {
        let oy1 = (oy0 + rows).min(g.oh);
        let tile = (oy1 - oy0) * g.ow;
        let p0 = oy0 * g.ow;
        let cols = &mut cols[..g.patch() * tile];
        let dcols = &mut dcols[..g.patch() * tile];
        let up_tile = &mut up_tile[..g.c_out * tile];
        for o in 0..g.c_out {
            up_tile[o * tile..(o + 1) * tile]
                .copy_from_slice(&up[o * plane + p0..o * plane + p0 + tile]);
        }
        im2col_tile(g, x, oy0, oy1, cols);
        gemm_nt(up_tile, cols, dw, g.c_out, tile, g.patch());
        dcols.fill(F::zero());
        gemm_tn(weights, up_tile, dcols, g.patch(), g.c_out, tile);
        col2im_tile(g, dcols, oy0, oy1, dx);
        oy0 = oy1;
    }
}
