//! Minimal CNN building blocks on ndarray.
//!
//! Everything runs on 5D tensors `(batch, channel, depth, height, width)`;
//! 2D networks use a singleton depth axis with (1, kh, kw) kernels, which
//! keeps one convolution implementation for both network stages. Layers are
//! generic over f32/f64 so gradient checks can run in f64 while training
//! runs in f32. All parallel loops give each worker a disjoint output slab
//! with sequential reductions, so results are bit-reproducible.

mod layers;
mod unet;

pub use layers::{BatchNorm, Conv, MaxPool, Upsample};
pub use unet::{receptive_field, UNet, UNetConfig};

use ndarray::{Array, ArrayD, Dimension, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type Tensor5<F> = ndarray::Array5<F>;

pub(crate) fn cast<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("f64 fits in float type")
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update; `t` is the 1-based step count.
pub(crate) fn adam_update<F: NdFloat, D: Dimension>(
    value: &mut Array<F, D>,
    grad: &Array<F, D>,
    m: &mut Array<F, D>,
    v: &mut Array<F, D>,
    opt: &Adam,
    t: usize,
) {
    let b1 = cast::<F>(opt.beta1);
    let b2 = cast::<F>(opt.beta2);
    let one = F::one();
    let bc1 = cast::<F>(1.0 - opt.beta1.powi(t as i32));
    let bc2 = cast::<F>(1.0 - opt.beta2.powi(t as i32));
    let lr = cast::<F>(opt.lr);
    let eps = cast::<F>(opt.eps);
    ndarray::Zip::from(value)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|val, &g, m_i, v_i| {
            *m_i = b1 * *m_i + (one - b1) * g;
            *v_i = b2 * *v_i + (one - b2) * g * g;
            let m_hat = *m_i / bc1;
            let v_hat = *v_i / bc2;
            *val -= lr * m_hat / (v_hat.sqrt() + eps);
        });
}

/// He-normal initialization.
pub(crate) fn he_normal<F: NdFloat, D: Dimension>(
    shape: D,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Array<F, D> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid normal");
    Array::from_shape_simple_fn(shape, || cast::<F>(normal.sample(rng)))
}

pub(crate) fn fresh_seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    // Discard a few draws so streams with nearby seeds decorrelate.
    for _ in 0..4 {
        let _: u64 = rng.random();
    }
    rng
}

/// Flat named tensor used in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn from_array<F: NdFloat, D: Dimension>(a: &Array<F, D>) -> Self {
        TensorData {
            shape: a.shape().to_vec(),
            data: a.iter().map(|&v| v.to_f32().unwrap()).collect(),
        }
    }

    pub fn to_array<F: NdFloat>(&self) -> ArrayD<F> {
        ArrayD::from_shape_vec(
            self.shape.clone(),
            self.data.iter().map(|&v| cast::<F>(v as f64)).collect(),
        )
        .expect("shape matches data")
    }
}
