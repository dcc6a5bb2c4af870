//! Reference implementations used as test oracles. Everything here is written
//! directly from the defining formulas, independent of the library kernels.
#![allow(dead_code)]

pub mod gradients;

/// splitmix64; a generator unrelated to the library's.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }
}

/// `|a - b| / max(|a|, |b|)`, or the absolute difference when both are tiny.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(x: &mut [f64], i: usize, eps: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + eps;
    let plus = f(x);
    x[i] = orig - eps;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Largest relative error between `analytic` and central differences over
/// every coordinate of `x`.
pub fn max_fd_error(x: &[f64], analytic: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut x = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let numeric = central_difference(&mut x, i, eps, &mut f);
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    worst
}

/// Six nested loops over `[n, c, h, w]` input and `[o, c, kh, kw]` weights,
/// stride 1, zero padding of `pad_top`/`pad_left` before and enough after to
/// keep `h x w` output when `same` is set.
pub fn naive_conv(
    input: &[f64],
    in_shape: [usize; 4],
    weights: &[f64],
    w_shape: [usize; 4],
    bias: &[f64],
    same: bool,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = in_shape;
    let [o, wc, kh, kw] = w_shape;
    assert_eq!(c, wc);
    let (ph, pw) = if same { ((kh - 1) / 2, (kw - 1) / 2) } else { (0, 0) };
    let (oh, ow) = if same { (h, w) } else { (h - kh + 1, w - kw + 1) };
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = y as isize + ky as isize - ph as isize;
                                let ix = x as isize + kx as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let iv = input[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let wv = weights[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// Bilinear sample of one `h x w` plane at output pixel `(i, j)` of an
/// `oh x ow` target, half-pixel centres, clamped coordinates.
pub fn bilinear_at(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize, i: usize, j: usize) -> f64 {
    let sy = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0).min((h - 1) as f64);
    let sx = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0).min((w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, x: usize| plane[y * w + x];
    (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
        + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1))
}

/// Source pixel for output `(y, x)` of a counter-clockwise rotation by
/// `deg` about the centre: inverse-rotate, round, clamp.
pub fn rotation_source(h: usize, w: usize, deg: f64, y: usize, x: usize) -> (usize, usize) {
    let t = deg.to_radians();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
    // Forward map with y pointing down: top-centre (0, -1) goes to (-1, 0)
    // at 90 degrees.
    let fwd = [[t.cos(), t.sin()], [-t.sin(), t.cos()]];
    let det = fwd[0][0] * fwd[1][1] - fwd[0][1] * fwd[1][0];
    let inv = [
        [fwd[1][1] / det, -fwd[0][1] / det],
        [-fwd[1][0] / det, fwd[0][0] / det],
    ];
    let sx = cx + inv[0][0] * dx + inv[0][1] * dy;
    let sy = cy + inv[1][0] * dx + inv[1][1] * dy;
    let clamp = |v: f64, n: usize| v.round().max(0.0).min((n - 1) as f64) as usize;
    (clamp(sy, h), clamp(sx, w))
}

/// Counts `(actual, predicted)` pairs one at a time.
pub fn brute_confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for a in 0..k {
        for p in 0..k {
            m[a][p] = y_true
                .iter()
                .zip(y_pred)
                .filter(|(&t, &q)| t == a && q == p)
                .count() as u64;
        }
    }
    m
}

/// One-vs-rest counts for `class` straight from the label lists.
pub fn brute_counts(y_true: &[usize], y_pred: &[usize], class: usize) -> (u64, u64, u64, u64) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == class, p == class) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
        }
    }
    (tp, tn, fp, fn_)
}

/// Accuracy, precision, sensitivity, specificity, and F1 with 0 for
/// any zero denominator.
pub fn brute_ratios(tp: u64, tn: u64, fp: u64, fn_: u64) -> [f64; 5] {
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let acc = div(tp + tn, tp + tn + fp + fn_);
    let prec = div(tp, tp + fp);
    let sens = div(tp, tp + fn_);
    let spec = div(tn, tn + fp);
    let f1 = if prec + sens == 0.0 { 0.0 } else { 2.0 * prec * sens / (prec + sens) };
    [acc, prec, sens, spec, f1]
}

/// O(n^2) Mann-Whitney: fraction of positive/negative pairs ordered
/// correctly, ties counting one half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Scalar Adam, written out step by step.
pub fn adam_scalar(theta0: f64, grad: impl Fn(f64) -> f64, steps: usize, lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = grad(theta);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(theta);
    }
    out
}

/// `-(1/n) sum y ln max(p, 1e-12)` evaluated in f64.
pub fn reference_cross_entropy(probs: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    -(0..n).map(|r| probs[r * k + labels[r]].max(1e-12).ln()).sum::<f64>() / n as f64
}

/// Softmax of one row by the definition.
pub fn reference_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}
