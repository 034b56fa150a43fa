//! Dense building blocks with explicit forward/backward passes on
//! `(batch, channels, height, width)` tensors.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Visits named parameter slices in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

macro_rules! flat {
    ($a:expr) => {
        $a.as_slice().expect("parameters are contiguous")
    };
}
macro_rules! flat_mut {
    ($a:expr) => {
        $a.as_slice_mut().expect("parameters are contiguous")
    };
}

// ---------------------------------------------------------------- conv 3x3

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `(out_ch, in_ch * 9)`, row layout `[c][ky][kx]`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * 9 * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, x: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

impl Conv2d {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * 9) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((out_ch, in_ch * 9), |_| normal.sample(rng)),
            bias: Array1::zeros(out_ch),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let oc = self.out_channels();
        let hw = h * w;
        let mut out = Array4::<f64>::zeros((n, oc, h, w));
        let mut cols = vec![0.0; c * 9 * hw];
        for b in 0..n {
            im2col(&xs[b * c * hw..(b + 1) * c * hw], c, h, w, &mut cols);
            let colv = ArrayView2::from_shape((c * 9, hw), &cols).unwrap();
            let y = self.weight.dot(&colv);
            let mut dst = out.slice_mut(s![b, .., .., ..]);
            let mut dst = dst.view_mut().into_shape_with_order((oc, hw)).unwrap();
            dst.assign(&y);
            dst += &self.bias.view().insert_axis(Axis(1));
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array4<f64>, dy: &Array4<f64>, grad: &mut Conv2d) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let oc = self.out_channels();
        let hw = h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let dy = dy.as_standard_layout();
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let mut cols = vec![0.0; c * 9 * hw];
        let wt = self.weight.t();
        for b in 0..n {
            im2col(&xs[b * c * hw..(b + 1) * c * hw], c, h, w, &mut cols);
            let colv = ArrayView2::from_shape((c * 9, hw), &cols).unwrap();
            let dyb = dy.slice(s![b, .., .., ..]);
            let dyb = dyb.into_shape_with_order((oc, hw)).unwrap();
            grad.weight += &dyb.dot(&colv.t());
            grad.bias += &dyb.sum_axis(Axis(1));
            let dcols = wt.dot(&dyb);
            let dxs = dx.as_slice_mut().unwrap();
            col2im(
                dcols.as_slice().unwrap(),
                c,
                h,
                w,
                &mut dxs[b * c * hw..(b + 1) * c * hw],
            );
        }
        dx
    }
}

impl Params for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.weight"), flat!(self.weight));
        f(&format!("{prefix}.bias"), flat!(self.bias));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), flat_mut!(self.weight));
        f(&format!("{prefix}.bias"), flat_mut!(self.bias));
    }
}

// ---------------------------------------------------------------- GELU

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu_forward<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(gelu)
}

pub fn gelu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| *d *= gelu_grad(v));
    dx
}

// ---------------------------------------------------------------- max pool

/// 2×2 max pooling with stride 2; returns the output and the winning
/// offset (0..4) for each output cell.
pub fn maxpool_forward(x: &Array4<f64>) -> (Array4<f64>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    let mut arg = Array4::<u8>::zeros((n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut k = 0u8;
                    for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = x[[b, ch, 2 * y + dy, 2 * xx + dx]];
                        if v > best {
                            best = v;
                            k = i as u8;
                        }
                    }
                    out[[b, ch, y, xx]] = best;
                    arg[[b, ch, y, xx]] = k;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(
    dy: &Array4<f64>,
    arg: &Array4<u8>,
    input_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(input_dim);
    for ((b, ch, y, xx), &k) in arg.indexed_iter() {
        let (oy, ox) = [(0, 0), (0, 1), (1, 0), (1, 1)][k as usize];
        dx[[b, ch, 2 * y + oy, 2 * xx + ox]] += dy[[b, ch, y, xx]];
    }
    dx
}

// ---------------------------------------------------------------- batchnorm

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// Saved state for the batchnorm backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Array4<f64>,
    pub inv_std: Array1<f64>,
    /// Batch statistics when normalizing with them (training).
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        Self {
            gamma: Array1::ones(ch),
            beta: Array1::zeros(ch),
            running_mean: Array1::zeros(ch),
            running_var: Array1::ones(ch),
        }
    }

    pub fn forward(&self, x: &Array4<f64>, training: bool) -> (Array4<f64>, BatchNormCache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let (mean, var, stats) = if training {
            let mean = x.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / m;
            let mut var = Array1::<f64>::zeros(c);
            for (ch, v) in var.iter_mut().enumerate() {
                let mu = mean[ch];
                *v = x
                    .slice(s![.., ch, .., ..])
                    .iter()
                    .map(|&a| (a - mu) * (a - mu))
                    .sum::<f64>()
                    / m;
            }
            (mean.clone(), var.clone(), Some((mean, var)))
        } else {
            (self.running_mean.clone(), self.running_var.clone(), None)
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut x_hat = x.clone();
        let mut y = x.clone();
        for ch in 0..c {
            let (mu, is, g, bta) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
            x_hat
                .slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|a| (a - mu) * is);
            y.slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|a| (a - mu) * is * g + bta);
        }
        (
            y,
            BatchNormCache {
                x_hat,
                inv_std,
                batch_stats: stats,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BatchNormCache, batch_elems: usize) {
        if let Some((mean, var)) = &cache.batch_stats {
            let m = batch_elems as f64;
            let unbiased = if m > 1.0 {
                var * (m / (m - 1.0))
            } else {
                var.clone()
            };
            self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
            self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + unbiased * BN_MOMENTUM;
        }
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache,
        dy: &Array4<f64>,
        grad: &mut BatchNorm2d,
    ) -> Array4<f64> {
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let mut dx = Array4::<f64>::zeros(dy.raw_dim());
        for ch in 0..c {
            let dyc = dy.slice(s![.., ch, .., ..]);
            let xh = cache.x_hat.slice(s![.., ch, .., ..]);
            let sum_dy: f64 = dyc.sum();
            let sum_dy_xh: f64 = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            grad.gamma[ch] += sum_dy_xh;
            grad.beta[ch] += sum_dy;
            let g = self.gamma[ch];
            let is = cache.inv_std[ch];
            let mut dxc = dx.slice_mut(s![.., ch, .., ..]);
            if cache.batch_stats.is_some() {
                // dxhat = dy * gamma; dx = is/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                let (s1, s2) = (g * sum_dy, g * sum_dy_xh);
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .and(&xh)
                    .for_each(|d, &dyv, &xv| *d = is / m * (m * g * dyv - s1 - xv * s2));
            } else {
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .for_each(|d, &dyv| *d = dyv * g * is);
            }
        }
        dx
    }
}

impl Params for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.gamma"), flat!(self.gamma));
        f(&format!("{prefix}.beta"), flat!(self.beta));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.gamma"), flat_mut!(self.gamma));
        f(&format!("{prefix}.beta"), flat_mut!(self.beta));
    }
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Xavier-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-limit..=limit)),
            bias: Array1::zeros(output),
        }
    }

    /// `x`: `(batch, in)` → `(batch, out)`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.weight"), flat!(self.weight));
        f(&format!("{prefix}.bias"), flat!(self.bias));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), flat_mut!(self.weight));
        f(&format!("{prefix}.bias"), flat_mut!(self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution used as an independent reference.
    fn conv_naive(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let oc = conv.out_channels();
        let mut y = Array4::zeros((n, oc, h, w));
        for b in 0..n {
            for o in 0..oc {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias[o];
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = yy as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w
                                    {
                                        acc += conv.weight[[o, ci * 9 + ky * 3 + kx]]
                                            * x[[b, ci, sy as usize, sx as usize]];
                                    }
                                }
                            }
                        }
                        y[[b, o, yy, xx]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(3, 4, &mut rng);
        conv.bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let x = Array4::from_shape_fn((2, 3, 5, 6), |_| rng.random_range(-1.0..1.0));
        let a = conv.forward(&x);
        let b = conv_naive(&conv, &x);
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x) - bias> == <conv_backward(dy), x>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.random_range(-1.0..1.0));
        let dy = Array4::from_shape_fn((1, 3, 4, 4), |_| rng.random_range(-1.0..1.0));
        let y = conv.forward(&x);
        let mut g = conv.clone();
        g.weight.fill(0.0);
        g.bias.fill(0.0);
        let dx = conv.backward(&x, &dy, &mut g);
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = dx.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-7);
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn maxpool_picks_max() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0])
            .unwrap();
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.into_raw_vec_and_offset().0, vec![5.0, 7.0]);
        let dx = maxpool_backward(&Array4::from_elem((1, 1, 1, 2), 1.0), &arg, x.dim());
        assert_eq!(
            dx.into_raw_vec_and_offset().0,
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = BatchNorm2d::new(2);
        let x = Array4::from_shape_fn((3, 2, 4, 4), |_| rng.random_range(-2.0..5.0));
        let (y, _) = bn.forward(&x, true);
        for ch in 0..2 {
            let v = y.slice(s![.., ch, .., ..]);
            let mean = v.mean().unwrap();
            let var = v.mapv(|a| (a - mean) * (a - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
