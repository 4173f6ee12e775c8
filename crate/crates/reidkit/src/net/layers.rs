//! Trainable layers with explicit forward/backward passes, all in f64.
//!
//! Convolutions run as im2col + matrix multiply; batch statistics layers
//! keep running estimates for eval mode. Backward passes accumulate into
//! each parameter's `grad` buffer.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A learnable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Adam with the common defaults; only the learning rate is scheduled.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            for ((mv, vv), (val, g)) in p
                .m
                .iter_mut()
                .zip(p.v.iter_mut())
                .zip(p.value.iter_mut().zip(p.grad.iter()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let mhat = *mv / b1t;
                let vhat = *vv / b2t;
                *val -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Standard normal draw via Box-Muller, keeping rand's small dependency
/// surface.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// 3x3 (or kxk) convolution, padding `pad`, no bias. Input layout is
/// channel-last `(B, H, W, Cin)`; weights are stored `(k*k*Cin, Cout)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (k * k * cin) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = ArrayD::from_shape_fn(IxDyn(&[k * k * cin, cout]), |_| randn(rng) * std);
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            k,
            stride: stride.max(1),
            pad: k / 2,
            cin,
            cout,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<f64>) -> (Array2<f64>, usize, usize) {
        let (b, h, w, cin) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let mut cols = Array2::zeros((b * ho * wo, self.k * self.k * cin));
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (bi * ho + oy) * wo + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let base = (ky * self.k + kx) * cin;
                            for c in 0..cin {
                                cols[(row, base + c)] = x[(bi, iy as usize, ix as usize, c)];
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (b, h, w, cin) = x.dim();
        debug_assert_eq!(cin, self.cin);
        let (cols, ho, wo) = self.im2col(x);
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let flat = cols.dot(&weight);
        let y = flat.into_shape_with_order((b, ho, wo, self.cout)).unwrap();
        (
            y,
            ConvCache {
                cols,
                in_dim: (b, h, w, cin),
                out_hw: (ho, wo),
            },
        )
    }

    pub fn forward_nocache(&self, x: &Array4<f64>) -> Array4<f64> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &ConvCache, d_out: &Array4<f64>) -> Array4<f64> {
        let (b, h, w, cin) = cache.in_dim;
        let (ho, wo) = cache.out_hw;
        let d_flat = d_out
            .to_owned()
            .into_shape_with_order((b * ho * wo, self.cout))
            .unwrap();
        // weight gradient
        let dw = cache.cols.t().dot(&d_flat);
        let mut wgrad = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap();
        wgrad += &dw;
        // input gradient via col2im
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let d_cols = d_flat.dot(&weight.t());
        let mut dx = Array4::zeros((b, h, w, cin));
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (bi * ho + oy) * wo + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let base = (ky * self.k + kx) * cin;
                            for c in 0..cin {
                                dx[(bi, iy as usize, ix as usize, c)] +=
                                    d_cols[(row, base + c)];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Batch normalization over the channel axis; callers flatten spatial
/// dimensions to `(N, C)` first.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BnCache {
    xhat: Array2<f64>,
    ivar: Array1<f64>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> (Array2<f64>, BnCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).unwrap();
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        let ivar = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = &centered * &ivar;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let y = &xhat * &gamma + &beta;
        // running stats track the unbiased variance
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        self.running_mean = &self.running_mean * (1.0 - self.momentum) + &mean * self.momentum;
        self.running_var =
            &self.running_var * (1.0 - self.momentum) + &(var.mapv(|v| v * unbias)) * self.momentum;
        (y, BnCache { xhat, ivar })
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let ivar = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (x - &self.running_mean) * &ivar;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        &xhat * &gamma + &beta
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Array2<f64>) -> Array2<f64> {
        let n = dy.nrows() as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        {
            let mut gg = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            gg += &dgamma;
            let mut bg = self.beta.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            bg += &dbeta;
        }
        let dxhat = dy * &gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let dx = (&dxhat * n - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat)
            * &cache.ivar.mapv(|v| v / n);
        dx
    }
}

/// Fully connected layer `y = x W^T (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(name: &str, din: usize, dout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let std = 0.01;
        let weight = ArrayD::from_shape_fn(IxDyn(&[dout, din]), |_| randn(rng) * std);
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.then(|| Param::new(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dout])))),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x.dot(&weight.t());
        if let Some(bias) = &self.bias {
            let b = bias.value.view().into_dimensionality::<Ix1>().unwrap();
            y += &b;
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        {
            let dw = dy.t().dot(x);
            let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            wg += &dw;
            if let Some(bias) = &mut self.bias {
                let db = dy.sum_axis(Axis(0));
                let mut bg = bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
                bg += &db;
            }
        }
        let weight = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        dy.dot(&weight)
    }
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f64, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Backward through ReLU given the forward output (post-activation).
pub fn relu_backward<D: ndarray::Dimension>(
    out: &ndarray::Array<f64, D>,
    dy: &mut ndarray::Array<f64, D>,
) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd_check<F: FnMut(f64) -> f64>(value: f64, mut eval: F, analytic: f64, tol: f64) {
        let h = 1e-6;
        let plus = eval(value + h);
        let minus = eval(value - h);
        let fd = (plus - minus) / (2.0 * h);
        let denom = fd.abs().max(analytic.abs()).max(1e-8);
        assert!(
            (fd - analytic).abs() / denom < tol,
            "fd {fd} vs analytic {analytic}"
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new("c", 2, 3, 3, 2, &mut rng);
        let x = Array4::from_shape_fn((2, 5, 4, 2), |_| randn(&mut rng) * 0.5);
        // scalar objective: sum of squares of outputs
        let objective = |conv: &Conv2d, x: &Array4<f64>| -> f64 {
            conv.forward_nocache(x).mapv(|v| v * v).sum() * 0.5
        };
        let (y, cache) = conv.forward(&x);
        let dx = conv.backward(&cache, &y);
        // input grads
        let xm = x.clone();
        for idx in [(0, 0, 0, 0), (1, 2, 3, 1), (0, 4, 1, 0)] {
            let analytic = dx[idx];
            let conv_ref = conv.clone();
            fd_check(
                xm[idx],
                |probe| {
                    let mut xp = xm.clone();
                    xp[idx] = probe;
                    objective(&conv_ref, &xp)
                },
                analytic,
                1e-5,
            );
        }
        // weight grads
        let wshape = conv.weight.value.shape().to_vec();
        for flat in [0usize, 7, wshape[0] * wshape[1] - 1] {
            let analytic = conv.weight.grad.as_slice().unwrap()[flat];
            let base = conv.weight.value.as_slice().unwrap()[flat];
            fd_check(
                base,
                |probe| {
                    let mut conv_probe = conv.clone();
                    conv_probe.weight.value.as_slice_mut().unwrap()[flat] = probe;
                    objective(&conv_probe, &x)
                },
                analytic,
                1e-5,
            );
        }
    }

    #[test]
    fn batchnorm_train_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bn = BatchNorm::new("bn", 3);
        bn.gamma.value.mapv_inplace(|_| 1.0 + randn(&mut rng) * 0.1);
        bn.beta.value.mapv_inplace(|_| randn(&mut rng) * 0.1);
        let x = Array2::from_shape_fn((6, 3), |_| randn(&mut rng));
        let objective = |bn: &BatchNorm, x: &Array2<f64>| -> f64 {
            // train-mode normalization without mutating running stats
            let mut b = bn.clone();
            let (y, _) = b.forward_train(x);
            y.mapv(|v| v * v * 0.5).sum()
        };
        let (y, cache) = bn.forward_train(&x);
        let dx = bn.backward(&cache, &y);
        let xm = x.clone();
        for idx in [(0, 0), (3, 2), (5, 1)] {
            let analytic = dx[idx];
            let bn_ref = bn.clone();
            fd_check(
                xm[idx],
                |probe| {
                    let mut xp = xm.clone();
                    xp[idx] = probe;
                    objective(&bn_ref, &xp)
                },
                analytic,
                5e-4,
            );
        }
        // gamma gradient
        let analytic = bn.gamma.grad.as_slice().unwrap()[1];
        let base = bn.gamma.value.as_slice().unwrap()[1];
        let bn_ref = bn.clone();
        fd_check(
            base,
            |probe| {
                let mut b = bn_ref.clone();
                b.gamma.value.as_slice_mut().unwrap()[1] = probe;
                objective(&b, &x)
            },
            analytic,
            1e-4,
        );
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new("l", 4, 3, true, &mut rng);
        lin.weight.value.mapv_inplace(|_| randn(&mut rng) * 0.3);
        let x = Array2::from_shape_fn((5, 4), |_| randn(&mut rng));
        let y = lin.forward(&x);
        let dx = lin.backward(&x, &y);
        let objective = |l: &Linear, x: &Array2<f64>| l.forward(x).mapv(|v| v * v * 0.5).sum();
        let xm = x.clone();
        for idx in [(0, 0), (4, 3)] {
            let analytic = dx[idx];
            let l = lin.clone();
            fd_check(
                xm[idx],
                |probe| {
                    let mut xp = xm.clone();
                    xp[idx] = probe;
                    objective(&l, &xp)
                },
                analytic,
                1e-6,
            );
        }
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut p = Param::new("p", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut opt = Adam::default();
        for _ in 0..2000 {
            p.zero_grad();
            let g: Vec<f64> = p.value.iter().map(|v| 2.0 * v).collect();
            p.grad = ArrayD::from_shape_vec(IxDyn(&[2]), g).unwrap();
            opt.step(vec![&mut p], 0.01);
        }
        assert!(p.value.iter().all(|v| v.abs() < 0.05));
    }
}
