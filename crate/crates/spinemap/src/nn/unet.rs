//! Encoder-decoder network with skip connections, built from the layer
//! primitives. The level count, channel widths, per-level kernels and pool
//! factors all come from [`UNetConfig`], so the same code serves the 3D
//! detection network and the 2D (singleton-depth) identification network.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array5, Axis, NdFloat, Zip};
use serde::{Deserialize, Serialize};

use super::layers::{relu, BatchNorm, Conv, MaxPool, Upsample};
use super::{Adam, Tensor5, TensorData};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels per resolution level, top (full resolution) first.
    pub channels: Vec<usize>,
    /// Convolution kernel per level, as (depth, height, width).
    pub kernels: Vec<(usize, usize, usize)>,
    /// Pooling factor between levels.
    pub pool: (usize, usize, usize),
    pub bn_momentum: f64,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.kernels.len() {
            return Err(Error::InvalidConfig(format!(
                "need one kernel per level: {} channels vs {} kernels",
                self.channels.len(),
                self.kernels.len()
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if [self.pool.0, self.pool.1, self.pool.2].contains(&0) {
            return Err(Error::InvalidConfig("pool factors must be positive".into()));
        }
        Ok(())
    }

    /// Required divisor of the input extent along each spatial axis.
    pub fn extent_divisor(&self) -> (usize, usize, usize) {
        let levels = self.channels.len() as u32 - 1;
        (
            self.pool.0.pow(levels),
            self.pool.1.pow(levels),
            self.pool.2.pow(levels),
        )
    }
}

/// Theoretical receptive field of the output along one spatial axis
/// (0 = depth, 1 = height, 2 = width).
pub fn receptive_field(cfg: &UNetConfig, axis: usize) -> usize {
    let kernel = |l: usize| match axis {
        0 => cfg.kernels[l].0,
        1 => cfg.kernels[l].1,
        _ => cfg.kernels[l].2,
    };
    let pool = match axis {
        0 => cfg.pool.0,
        1 => cfg.pool.1,
        _ => cfg.pool.2,
    };
    let levels = cfg.channels.len();
    let mut rf = 1usize;
    let mut jump = 1usize;
    for l in 0..levels {
        rf += 2 * (kernel(l) - 1) * jump;
        if l < levels - 1 {
            rf += (pool - 1) * jump;
            jump *= pool;
        }
    }
    for l in (0..levels - 1).rev() {
        jump /= pool;
        // up-conv plus the two decoder convs at this level
        rf += 3 * (kernel(l) - 1) * jump;
    }
    rf
}

struct ConvBlock<F: NdFloat> {
    conv: Conv<F>,
    bn: BatchNorm<F>,
    mask: Option<Array5<bool>>,
}

impl<F: NdFloat> ConvBlock<F> {
    fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize, usize),
        momentum: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv::new(in_ch, out_ch, kernel, rng),
            bn: BatchNorm::new(out_ch, momentum),
            mask: None,
        }
    }

    fn forward_train(&mut self, x: &Tensor5<F>) -> Tensor5<F> {
        let y = self.bn.forward_train(&self.conv.forward_train(x));
        self.mask = Some(y.mapv(|v| v > F::zero()));
        relu(&y)
    }

    fn forward_eval(&self, x: &Tensor5<F>) -> Tensor5<F> {
        relu(&self.bn.forward_eval(&self.conv.forward_eval(x)))
    }

    fn backward(&mut self, gout: &Tensor5<F>) -> Tensor5<F> {
        let mask = self.mask.take().expect("backward without forward_train");
        let mut g = gout.clone();
        Zip::from(&mut g).and(&mask).for_each(|gi, &m| {
            if !m {
                *gi = F::zero();
            }
        });
        self.conv.backward(&self.bn.backward(&g))
    }

    fn zero_grad(&mut self) {
        self.conv.zero_grad();
        self.bn.zero_grad();
    }

    fn step(&mut self, opt: &Adam, t: usize) {
        self.conv.step(opt, t);
        self.bn.step(opt, t);
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, TensorMut<'_, F>)> {
        vec![
            (format!("{prefix}.conv.weight"), TensorMut::D5(&mut self.conv.weight)),
            (format!("{prefix}.conv.bias"), TensorMut::D1(&mut self.conv.bias)),
            (format!("{prefix}.bn.gamma"), TensorMut::D1(&mut self.bn.gamma)),
            (format!("{prefix}.bn.beta"), TensorMut::D1(&mut self.bn.beta)),
            (
                format!("{prefix}.bn.running_mean"),
                TensorMut::D1(&mut self.bn.running_mean),
            ),
            (
                format!("{prefix}.bn.running_var"),
                TensorMut::D1(&mut self.bn.running_var),
            ),
        ]
    }
}

struct DoubleConv<F: NdFloat> {
    a: ConvBlock<F>,
    b: ConvBlock<F>,
}

impl<F: NdFloat> DoubleConv<F> {
    fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize, usize),
        momentum: f64,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        DoubleConv {
            a: ConvBlock::new(in_ch, out_ch, kernel, momentum, rng),
            b: ConvBlock::new(out_ch, out_ch, kernel, momentum, rng),
        }
    }

    fn forward_train(&mut self, x: &Tensor5<F>) -> Tensor5<F> {
        let y = self.a.forward_train(x);
        self.b.forward_train(&y)
    }

    fn forward_eval(&self, x: &Tensor5<F>) -> Tensor5<F> {
        self.b.forward_eval(&self.a.forward_eval(x))
    }

    fn backward(&mut self, g: &Tensor5<F>) -> Tensor5<F> {
        self.a.backward(&self.b.backward(g))
    }

    fn zero_grad(&mut self) {
        self.a.zero_grad();
        self.b.zero_grad();
    }

    fn step(&mut self, opt: &Adam, t: usize) {
        self.a.step(opt, t);
        self.b.step(opt, t);
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, TensorMut<'_, F>)> {
        let mut out = self.a.named_mut(&format!("{prefix}.a"));
        out.extend(self.b.named_mut(&format!("{prefix}.b")));
        out
    }
}

enum TensorMut<'a, F: NdFloat> {
    D5(&'a mut Array5<F>),
    D1(&'a mut Array1<F>),
}

fn concat_channels<F: NdFloat>(a: &Tensor5<F>, b: &Tensor5<F>) -> Tensor5<F> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat")
}

fn split_channels<F: NdFloat>(g: &Tensor5<F>, first: usize) -> (Tensor5<F>, Tensor5<F>) {
    (
        g.slice(s![.., ..first, .., .., ..]).to_owned(),
        g.slice(s![.., first.., .., .., ..]).to_owned(),
    )
}

/// U-net with nearest-neighbour upsampling and skip concatenation.
pub struct UNet<F: NdFloat> {
    pub config: UNetConfig,
    enc: Vec<DoubleConv<F>>,
    pools: Vec<MaxPool>,
    ups: Vec<Upsample>,
    up_blocks: Vec<ConvBlock<F>>,
    dec: Vec<DoubleConv<F>>,
    head: Conv<F>,
}

impl<F: NdFloat> UNet<F> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = super::fresh_seeded(seed, 0x9e37);
        let momentum = config.bn_momentum;
        let levels = config.channels.len();
        let mut enc = Vec::with_capacity(levels);
        for l in 0..levels {
            let in_ch = if l == 0 {
                config.in_channels
            } else {
                config.channels[l - 1]
            };
            enc.push(DoubleConv::new(
                in_ch,
                config.channels[l],
                config.kernels[l],
                momentum,
                &mut rng,
            ));
        }
        let pools = (1..levels).map(|_| MaxPool::new(config.pool)).collect();
        let ups = (1..levels).map(|_| Upsample::new(config.pool)).collect();
        let mut up_blocks = Vec::with_capacity(levels - 1);
        let mut dec = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            up_blocks.push(ConvBlock::new(
                config.channels[l + 1],
                config.channels[l],
                config.kernels[l],
                momentum,
                &mut rng,
            ));
            dec.push(DoubleConv::new(
                2 * config.channels[l],
                config.channels[l],
                config.kernels[l],
                momentum,
                &mut rng,
            ));
        }
        let head = Conv::new(config.channels[0], config.out_channels, (1, 1, 1), &mut rng);
        Ok(UNet {
            config,
            enc,
            pools,
            ups,
            up_blocks,
            dec,
            head,
        })
    }

    /// Check the input tensor shape against the topology.
    pub fn validate_input(&self, dim: (usize, usize, usize, usize, usize)) -> Result<()> {
        let (_, c, d, h, w) = dim;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let div = self.config.extent_divisor();
        for (extent, divisor, name) in [(d, div.0, "depth"), (h, div.1, "height"), (w, div.2, "width")]
        {
            if extent == 0 || extent % divisor != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "{name} extent {extent} is not a positive multiple of {divisor}"
                )));
            }
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Tensor5<F>) -> Tensor5<F> {
        let levels = self.enc.len();
        let mut skips: Vec<Tensor5<F>> = Vec::with_capacity(levels - 1);
        let mut cur = self.enc[0].forward_train(x);
        for l in 1..levels {
            skips.push(cur.clone());
            let pooled = self.pools[l - 1].forward_train(&cur);
            cur = self.enc[l].forward_train(&pooled);
        }
        for l in (0..levels - 1).rev() {
            let up = self.ups[l].forward(&cur);
            let up = self.up_blocks[l].forward_train(&up);
            let cat = concat_channels(&up, &skips[l]);
            cur = self.dec[l].forward_train(&cat);
        }
        self.head.forward_train(&cur)
    }

    pub fn forward_eval(&self, x: &Tensor5<F>) -> Tensor5<F> {
        let levels = self.enc.len();
        let mut skips: Vec<Tensor5<F>> = Vec::with_capacity(levels - 1);
        let mut cur = self.enc[0].forward_eval(x);
        for l in 1..levels {
            skips.push(cur.clone());
            let pooled = self.pools[l - 1].forward_eval(&cur);
            cur = self.enc[l].forward_eval(&pooled);
        }
        for l in (0..levels - 1).rev() {
            let up = self.ups[l].forward(&cur);
            let up = self.up_blocks[l].forward_eval(&up);
            let cat = concat_channels(&up, &skips[l]);
            cur = self.dec[l].forward_eval(&cat);
        }
        self.head.forward_eval(&cur)
    }

    /// Backpropagate; parameter gradients accumulate in the layers.
    pub fn backward(&mut self, gout: &Tensor5<F>) -> Tensor5<F> {
        let levels = self.enc.len();
        let mut g = self.head.backward(gout);
        let mut skip_grads: Vec<Option<Tensor5<F>>> = (0..levels - 1).map(|_| None).collect();
        for l in 0..levels - 1 {
            let g_cat = self.dec[l].backward(&g);
            let (g_up, g_skip) = split_channels(&g_cat, self.config.channels[l]);
            skip_grads[l] = Some(g_skip);
            let g_up = self.up_blocks[l].backward(&g_up);
            g = self.ups[l].backward(&g_up);
        }
        for l in (0..levels).rev() {
            let g_in = self.enc[l].backward(&g);
            if l == 0 {
                return g_in;
            }
            let mut g_prev = self.pools[l - 1].backward(&g_in);
            if let Some(gs) = skip_grads[l - 1].take() {
                g_prev = g_prev + gs;
            }
            g = g_prev;
        }
        unreachable!("encoder loop returns at level 0")
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.enc {
            e.zero_grad();
        }
        for u in &mut self.up_blocks {
            u.zero_grad();
        }
        for d in &mut self.dec {
            d.zero_grad();
        }
        self.head.zero_grad();
    }

    pub fn step(&mut self, opt: &Adam, t: usize) {
        for e in &mut self.enc {
            e.step(opt, t);
        }
        for u in &mut self.up_blocks {
            u.step(opt, t);
        }
        for d in &mut self.dec {
            d.step(opt, t);
        }
        self.head.step(opt, t);
    }

    fn named_mut(&mut self) -> Vec<(String, TensorMut<'_, F>)> {
        let mut out = Vec::new();
        for (l, e) in self.enc.iter_mut().enumerate() {
            out.extend(e.named_mut(&format!("enc{l}")));
        }
        for (l, u) in self.up_blocks.iter_mut().enumerate() {
            out.extend(u.named_mut(&format!("up{l}")));
        }
        for (l, d) in self.dec.iter_mut().enumerate() {
            out.extend(d.named_mut(&format!("dec{l}")));
        }
        out.push(("head.weight".to_string(), TensorMut::D5(&mut self.head.weight)));
        out.push(("head.bias".to_string(), TensorMut::D1(&mut self.head.bias)));
        out
    }

    /// All parameters and batch-norm running statistics, by name.
    pub fn state(&mut self) -> BTreeMap<String, TensorData> {
        self.named_mut()
            .into_iter()
            .map(|(name, t)| {
                let data = match t {
                    TensorMut::D5(a) => TensorData::from_array(a),
                    TensorMut::D1(a) => TensorData::from_array(a),
                };
                (name, data)
            })
            .collect()
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, TensorData>) -> Result<()> {
        for (name, slot) in self.named_mut() {
            let data = state.get(&name).ok_or_else(|| Error::Other(format!(
                "checkpoint is missing tensor {name}"
            )))?;
            match slot {
                TensorMut::D5(a) => {
                    if data.shape != a.shape() {
                        return Err(Error::Other(format!(
                            "checkpoint tensor {name} has shape {:?}, expected {:?}",
                            data.shape,
                            a.shape()
                        )));
                    }
                    let loaded = data.to_array::<F>();
                    a.assign(&loaded.into_dimensionality::<ndarray::Ix5>().expect("checked shape"));
                }
                TensorMut::D1(a) => {
                    if data.shape != a.shape() {
                        return Err(Error::Other(format!(
                            "checkpoint tensor {name} has shape {:?}, expected {:?}",
                            data.shape,
                            a.shape()
                        )));
                    }
                    let loaded = data.to_array::<F>();
                    a.assign(&loaded.into_dimensionality::<ndarray::Ix1>().expect("checked shape"));
                }
            }
        }
        Ok(())
    }
}
