//! Convolution, batch norm, max-pooling and nearest-neighbour upsampling,
//! each with explicit forward/backward passes.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array5, Axis, NdFloat, Zip};
use rand_chacha::ChaCha8Rng;

use super::{adam_update, cast, he_normal, Adam, Tensor5};

/// Zero-pad the spatial axes for a 'same' convolution with the given kernel.
/// Even kernels pad one voxel more on the high side.
fn pad_same<F: NdFloat>(x: &Tensor5<F>, kernel: (usize, usize, usize)) -> Tensor5<F> {
    let (n, c, d, h, w) = x.dim();
    let (kd, kh, kw) = kernel;
    let lo = ((kd - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let mut out = Tensor5::<F>::zeros((n, c, d + kd - 1, h + kh - 1, w + kw - 1));
    out.slice_mut(s![
        ..,
        ..,
        lo.0..lo.0 + d,
        lo.1..lo.1 + h,
        lo.2..lo.2 + w
    ])
    .assign(x);
    out
}

/// Stride-1 'same' convolution over (depth, height, width).
pub struct Conv<F: NdFloat> {
    pub weight: Array5<F>, // (out_ch, in_ch, kd, kh, kw)
    pub bias: Array1<F>,
    pub grad_weight: Array5<F>,
    pub grad_bias: Array1<F>,
    m_weight: Array5<F>,
    v_weight: Array5<F>,
    m_bias: Array1<F>,
    v_bias: Array1<F>,
    cache_padded: Option<Tensor5<F>>,
}

impl<F: NdFloat> Conv<F> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let (kd, kh, kw) = kernel;
        let fan_in = in_ch * kd * kh * kw;
        let shape = ndarray::Ix5(out_ch, in_ch, kd, kh, kw);
        Conv {
            weight: he_normal(shape, fan_in, rng),
            bias: Array1::zeros(out_ch),
            grad_weight: Array5::zeros(shape),
            grad_bias: Array1::zeros(out_ch),
            m_weight: Array5::zeros(shape),
            v_weight: Array5::zeros(shape),
            m_bias: Array1::zeros(out_ch),
            v_bias: Array1::zeros(out_ch),
            cache_padded: None,
        }
    }

    pub fn kernel(&self) -> (usize, usize, usize) {
        let d = self.weight.dim();
        (d.2, d.3, d.4)
    }

    fn compute(&self, x: &Tensor5<F>) -> (Tensor5<F>, Tensor5<F>) {
        let (n, ic, d, h, w) = x.dim();
        let (oc, w_ic, kd, kh, kw) = self.weight.dim();
        assert_eq!(ic, w_ic, "conv input channels");
        let padded = pad_same(x, (kd, kh, kw));
        let mut out = Tensor5::<F>::zeros((n, oc, d, h, w));
        for ni in 0..n {
            let x_n = padded.index_axis(Axis(0), ni);
            let mut out_n = out.index_axis_mut(Axis(0), ni);
            out_n
                .axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(o, mut out_c)| {
                    out_c.fill(self.bias[o]);
                    for i in 0..ic {
                        for dk in 0..kd {
                            for hk in 0..kh {
                                for wk in 0..kw {
                                    let wgt = self.weight[[o, i, dk, hk, wk]];
                                    let src =
                                        x_n.slice(s![i, dk..dk + d, hk..hk + h, wk..wk + w]);
                                    Zip::from(&mut out_c)
                                        .and(&src)
                                        .for_each(|a, &b| *a += wgt * b);
                                }
                            }
                        }
                    }
                });
        }
        (padded, out)
    }

    pub fn forward_train(&mut self, x: &Tensor5<F>) -> Tensor5<F> {
        let (padded, out) = self.compute(x);
        self.cache_padded = Some(padded);
        out
    }

    pub fn forward_eval(&self, x: &Tensor5<F>) -> Tensor5<F> {
        self.compute(x).1
    }

    /// Accumulates parameter gradients, returns the input gradient.
    pub fn backward(&mut self, gout: &Tensor5<F>) -> Tensor5<F> {
        let padded = self
            .cache_padded
            .take()
            .expect("backward without forward_train");
        let (n, oc, d, h, w) = gout.dim();
        let (_, ic, kd, kh, kw) = self.weight.dim();

        // Weight gradient: each worker owns one output channel's slab.
        let weight_view = self.weight.view();
        self.grad_weight
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(o, mut gw_o)| {
                for ni in 0..n {
                    let g = gout.slice(s![ni, o, .., .., ..]);
                    for i in 0..ic {
                        for dk in 0..kd {
                            for hk in 0..kh {
                                for wk in 0..kw {
                                    let src =
                                        padded.slice(s![ni, i, dk..dk + d, hk..hk + h, wk..wk + w]);
                                    let mut acc = F::zero();
                                    Zip::from(&g).and(&src).for_each(|&a, &b| acc += a * b);
                                    gw_o[[i, dk, hk, wk]] += acc;
                                }
                            }
                        }
                    }
                }
            });

        for o in 0..oc {
            let mut acc = F::zero();
            for ni in 0..n {
                acc += gout.slice(s![ni, o, .., .., ..]).sum();
            }
            self.grad_bias[o] += acc;
        }

        // Input gradient, assembled in the padded frame then cropped.
        let mut gx_padded = Tensor5::<F>::zeros(padded.raw_dim());
        for ni in 0..n {
            let gout_n = gout.index_axis(Axis(0), ni);
            let mut gx_n = gx_padded.index_axis_mut(Axis(0), ni);
            gx_n.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(i, mut gx_c)| {
                    for o in 0..oc {
                        let g = gout_n.index_axis(Axis(0), o);
                        for dk in 0..kd {
                            for hk in 0..kh {
                                for wk in 0..kw {
                                    let wgt = weight_view[[o, i, dk, hk, wk]];
                                    let mut dst =
                                        gx_c.slice_mut(s![dk..dk + d, hk..hk + h, wk..wk + w]);
                                    Zip::from(&mut dst)
                                        .and(&g)
                                        .for_each(|a, &b| *a += wgt * b);
                                }
                            }
                        }
                    }
                });
        }
        let lo = ((kd - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
        gx_padded
            .slice(s![.., .., lo.0..lo.0 + d, lo.1..lo.1 + h, lo.2..lo.2 + w])
            .to_owned()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(F::zero());
        self.grad_bias.fill(F::zero());
    }

    pub fn step(&mut self, opt: &Adam, t: usize) {
        adam_update(
            &mut self.weight,
            &self.grad_weight,
            &mut self.m_weight,
            &mut self.v_weight,
            opt,
            t,
        );
        adam_update(
            &mut self.bias,
            &self.grad_bias,
            &mut self.m_bias,
            &mut self.v_bias,
            opt,
            t,
        );
    }
}

/// Per-channel batch normalization over batch and spatial axes.
pub struct BatchNorm<F: NdFloat> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub grad_gamma: Array1<F>,
    pub grad_beta: Array1<F>,
    m_gamma: Array1<F>,
    v_gamma: Array1<F>,
    m_beta: Array1<F>,
    v_beta: Array1<F>,
    momentum: F,
    eps: F,
    cache: Option<(Tensor5<F>, Array1<F>)>, // (x_hat, inv_std)
}

impl<F: NdFloat> BatchNorm<F> {
    pub fn new(channels: usize, momentum: f64) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            m_gamma: Array1::zeros(channels),
            v_gamma: Array1::zeros(channels),
            m_beta: Array1::zeros(channels),
            v_beta: Array1::zeros(channels),
            momentum: cast(momentum),
            eps: cast(1e-5),
            cache: None,
        }
    }

    pub fn forward_train(&mut self, x: &Tensor5<F>) -> Tensor5<F> {
        let (n, c, d, h, w) = x.dim();
        let count = cast::<F>((n * d * h * w) as f64);
        let mut x_hat = Tensor5::<F>::zeros(x.raw_dim());
        let mut inv_std = Array1::<F>::zeros(c);
        let mut out = Tensor5::<F>::zeros(x.raw_dim());
        for ci in 0..c {
            let xc = x.index_axis(Axis(1), ci);
            let mean = xc.sum() / count;
            let var = xc.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / count;
            let istd = F::one() / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            let gamma = self.gamma[ci];
            let beta = self.beta[ci];
            Zip::from(x_hat.index_axis_mut(Axis(1), ci))
                .and(out.index_axis_mut(Axis(1), ci))
                .and(&xc)
                .for_each(|xh, o, &v| {
                    *xh = (v - mean) * istd;
                    *o = gamma * *xh + beta;
                });
            let mom = self.momentum;
            self.running_mean[ci] = (F::one() - mom) * self.running_mean[ci] + mom * mean;
            self.running_var[ci] = (F::one() - mom) * self.running_var[ci] + mom * var;
        }
        self.cache = Some((x_hat, inv_std));
        out
    }

    pub fn forward_eval(&self, x: &Tensor5<F>) -> Tensor5<F> {
        let c = x.dim().1;
        let mut out = Tensor5::<F>::zeros(x.raw_dim());
        for ci in 0..c {
            let istd = F::one() / (self.running_var[ci] + self.eps).sqrt();
            let mean = self.running_mean[ci];
            let gamma = self.gamma[ci];
            let beta = self.beta[ci];
            Zip::from(out.index_axis_mut(Axis(1), ci))
                .and(x.index_axis(Axis(1), ci))
                .for_each(|o, &v| *o = gamma * (v - mean) * istd + beta);
        }
        out
    }

    pub fn backward(&mut self, gout: &Tensor5<F>) -> Tensor5<F> {
        let (x_hat, inv_std) = self.cache.take().expect("backward without forward_train");
        let (n, c, d, h, w) = gout.dim();
        let count = cast::<F>((n * d * h * w) as f64);
        let mut gx = Tensor5::<F>::zeros(gout.raw_dim());
        for ci in 0..c {
            let g = gout.index_axis(Axis(1), ci);
            let xh = x_hat.index_axis(Axis(1), ci);
            let sum_g = g.sum();
            let sum_gx = Zip::from(&g).and(&xh).fold(F::zero(), |acc, &a, &b| acc + a * b);
            self.grad_beta[ci] += sum_g;
            self.grad_gamma[ci] += sum_gx;
            let k = self.gamma[ci] * inv_std[ci];
            let mean_g = sum_g / count;
            let mean_gx = sum_gx / count;
            Zip::from(gx.index_axis_mut(Axis(1), ci))
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xhi| *o = k * (gi - mean_g - xhi * mean_gx));
        }
        gx
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(F::zero());
        self.grad_beta.fill(F::zero());
    }

    pub fn step(&mut self, opt: &Adam, t: usize) {
        adam_update(
            &mut self.gamma,
            &self.grad_gamma,
            &mut self.m_gamma,
            &mut self.v_gamma,
            opt,
            t,
        );
        adam_update(
            &mut self.beta,
            &self.grad_beta,
            &mut self.m_beta,
            &mut self.v_beta,
            opt,
            t,
        );
    }
}

/// Max pooling with stride equal to the window.
pub struct MaxPool {
    pub size: (usize, usize, usize),
    cache_argmax: Option<ndarray::Array5<u8>>,
    cache_input_dim: Option<(usize, usize, usize, usize, usize)>,
}

impl MaxPool {
    pub fn new(size: (usize, usize, usize)) -> Self {
        MaxPool {
            size,
            cache_argmax: None,
            cache_input_dim: None,
        }
    }

    fn compute<F: NdFloat>(&self, x: &Tensor5<F>) -> (Tensor5<F>, ndarray::Array5<u8>) {
        let (n, c, d, h, w) = x.dim();
        let (pd, ph, pw) = self.size;
        assert!(
            d % pd == 0 && h % ph == 0 && w % pw == 0,
            "pooling requires extents divisible by {:?}, got ({d}, {h}, {w})",
            self.size
        );
        let (od, oh, ow) = (d / pd, h / ph, w / pw);
        let mut out = Tensor5::<F>::zeros((n, c, od, oh, ow));
        let mut arg = ndarray::Array5::<u8>::zeros((n, c, od, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                let xc = x.slice(s![ni, ci, .., .., ..]);
                let mut oc = out.slice_mut(s![ni, ci, .., .., ..]);
                let mut ac = arg.slice_mut(s![ni, ci, .., .., ..]);
                for zd in 0..od {
                    for zh in 0..oh {
                        for zw in 0..ow {
                            let mut best = xc[[zd * pd, zh * ph, zw * pw]];
                            let mut best_k = 0u8;
                            let mut k = 0u8;
                            for id in 0..pd {
                                for ih in 0..ph {
                                    for iw in 0..pw {
                                        let v = xc[[zd * pd + id, zh * ph + ih, zw * pw + iw]];
                                        if v > best {
                                            best = v;
                                            best_k = k;
                                        }
                                        k += 1;
                                    }
                                }
                            }
                            oc[[zd, zh, zw]] = best;
                            ac[[zd, zh, zw]] = best_k;
                        }
                    }
                }
            }
        }
        (out, arg)
    }

    pub fn forward_train<F: NdFloat>(&mut self, x: &Tensor5<F>) -> Tensor5<F> {
        let (out, arg) = self.compute(x);
        self.cache_argmax = Some(arg);
        self.cache_input_dim = Some(x.dim());
        out
    }

    pub fn forward_eval<F: NdFloat>(&self, x: &Tensor5<F>) -> Tensor5<F> {
        self.compute(x).0
    }

    pub fn backward<F: NdFloat>(&mut self, gout: &Tensor5<F>) -> Tensor5<F> {
        let arg = self.cache_argmax.take().expect("backward without forward_train");
        let dim = self.cache_input_dim.take().unwrap();
        let (pd, ph, pw) = self.size;
        let (n, c, od, oh, ow) = gout.dim();
        let mut gx = Tensor5::<F>::zeros(dim);
        for ni in 0..n {
            for ci in 0..c {
                for zd in 0..od {
                    for zh in 0..oh {
                        for zw in 0..ow {
                            let k = arg[[ni, ci, zd, zh, zw]] as usize;
                            let id = k / (ph * pw);
                            let ih = (k / pw) % ph;
                            let iw = k % pw;
                            gx[[ni, ci, zd * pd + id, zh * ph + ih, zw * pw + iw]] =
                                gout[[ni, ci, zd, zh, zw]];
                        }
                    }
                }
            }
        }
        gx
    }
}

/// Nearest-neighbour upsampling by an integer factor per axis.
pub struct Upsample {
    pub size: (usize, usize, usize),
}

impl Upsample {
    pub fn new(size: (usize, usize, usize)) -> Self {
        Upsample { size }
    }

    pub fn forward<F: NdFloat>(&self, x: &Tensor5<F>) -> Tensor5<F> {
        let (n, c, d, h, w) = x.dim();
        let (pd, ph, pw) = self.size;
        let mut out = Tensor5::<F>::zeros((n, c, d * pd, h * ph, w * pw));
        Zip::indexed(&mut out).par_for_each(|(ni, ci, zd, zh, zw), o| {
            *o = x[[ni, ci, zd / pd, zh / ph, zw / pw]];
        });
        out
    }

    pub fn backward<F: NdFloat>(&self, gout: &Tensor5<F>) -> Tensor5<F> {
        let (n, c, d, h, w) = gout.dim();
        let (pd, ph, pw) = self.size;
        let mut gx = Tensor5::<F>::zeros((n, c, d / pd, h / ph, w / pw));
        Zip::indexed(&mut gx).par_for_each(|(ni, ci, zd, zh, zw), o| {
            let mut acc = F::zero();
            for id in 0..pd {
                for ih in 0..ph {
                    for iw in 0..pw {
                        acc += gout[[ni, ci, zd * pd + id, zh * ph + ih, zw * pw + iw]];
                    }
                }
            }
            *o = acc;
        });
        gx
    }
}

/// ReLU; callers keep the positivity mask they need for the backward pass.
pub fn relu<F: NdFloat>(x: &Tensor5<F>) -> Tensor5<F> {
    x.mapv(|v| v.max(F::zero()))
}
