//! The two network stages and their training loops.
//!
//! Detection: 3D U-net, one input channel, two-way softmax per voxel,
//! weighted cross entropy (0.1 background / 0.9 vertebrae). Identification:
//! 2D U-net over 8-slice slabs (slab slices as input channels), one unbounded
//! regression output per pixel, masked L1 loss. Both use 'same' padding,
//! stride 1, batch norm after every convolution and an adaptive-moment
//! optimizer at the configured learning rate.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{detection_loss, identification_loss, identification_loss_grad};
use crate::nn::{Adam, Tensor5, TensorData, UNet, UNetConfig};
use crate::sampler::{DetectionPatch, IdentificationPatch};

/// Training hyper-parameters; defaults are the full-scale reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub bn_momentum: f64,
    pub background_weight: f64,
    pub foreground_weight: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn detection_default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 16,
            epochs: 50,
            bn_momentum: 0.1,
            background_weight: 0.1,
            foreground_weight: 0.9,
            seed: 0,
        }
    }

    pub fn identification_default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 35,
            ..TrainConfig::detection_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate)
            || self.batch_size == 0
            || !positive(self.bn_momentum)
            || !positive(self.background_weight)
            || !positive(self.foreground_weight)
        {
            return Err(Error::InvalidConfig(
                "training hyper-parameters must be positive".into(),
            ));
        }
        if (self.background_weight + self.foreground_weight - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "loss weights must sum to 1.0, got {} + {}",
                self.background_weight, self.foreground_weight
            )));
        }
        Ok(())
    }
}

/// Channel widths (and the identification bottom kernel) are data, not code,
/// so desk-scale tests can shrink them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetTopology {
    pub channels: Vec<usize>,
    /// In-plane kernel of the lowest identification level.
    pub bottom_kernel: (usize, usize),
}

impl NetTopology {
    pub fn detection_default() -> Self {
        NetTopology {
            channels: vec![16, 32, 64, 128],
            bottom_kernel: (3, 3),
        }
    }

    pub fn identification_default() -> Self {
        NetTopology {
            channels: vec![32, 64, 128, 256],
            bottom_kernel: (5, 20),
        }
    }
}

pub fn detection_unet_config(topology: &NetTopology, bn_momentum: f64) -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        out_channels: 2,
        channels: topology.channels.clone(),
        kernels: vec![(3, 3, 3); topology.channels.len()],
        pool: (2, 2, 2),
        bn_momentum,
    }
}

pub fn identification_unet_config(topology: &NetTopology, bn_momentum: f64) -> UNetConfig {
    let levels = topology.channels.len();
    let mut kernels = vec![(1, 3, 3); levels];
    if let Some(last) = kernels.last_mut() {
        *last = (1, topology.bottom_kernel.0, topology.bottom_kernel.1);
    }
    UNetConfig {
        in_channels: 8,
        out_channels: 1,
        channels: topology.channels.clone(),
        kernels,
        pool: (1, 2, 2),
        bn_momentum,
    }
}

/// 3D background/vertebrae segmentation network.
pub struct DetectionNet {
    pub unet: UNet<f32>,
}

/// 2D per-pixel vertebra-index regression network.
pub struct IdentificationNet {
    pub unet: UNet<f32>,
}

/// Softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor5<f32>) -> Tensor5<f32> {
    let mut out = logits.clone();
    let (n, c, d, h, w) = logits.dim();
    for ni in 0..n {
        for zd in 0..d {
            for zh in 0..h {
                for zw in 0..w {
                    let mut max = f32::NEG_INFINITY;
                    for ci in 0..c {
                        max = max.max(logits[[ni, ci, zd, zh, zw]]);
                    }
                    let mut sum = 0.0f32;
                    for ci in 0..c {
                        let e = (logits[[ni, ci, zd, zh, zw]] - max).exp();
                        out[[ni, ci, zd, zh, zw]] = e;
                        sum += e;
                    }
                    for ci in 0..c {
                        out[[ni, ci, zd, zh, zw]] /= sum;
                    }
                }
            }
        }
    }
    out
}

impl DetectionNet {
    pub fn new(topology: &NetTopology, bn_momentum: f64, seed: u64) -> Result<Self> {
        Ok(DetectionNet {
            unet: UNet::new(detection_unet_config(topology, bn_momentum), seed)?,
        })
    }

    /// Per-voxel foreground probability for one patch, eval mode.
    pub fn apply(&self, patch: &Array3<f32>) -> Result<Array3<f32>> {
        let (d, h, w) = patch.dim();
        let mut x = Tensor5::<f32>::zeros((1, 1, d, h, w));
        x.slice_mut(s![0, 0, .., .., ..]).assign(patch);
        self.unet.validate_input(x.dim())?;
        let logits = self.unet.forward_eval(&x);
        let probs = softmax_channels(&logits);
        Ok(probs.slice(s![0, 1, .., .., ..]).to_owned())
    }
}

impl IdentificationNet {
    pub fn new(topology: &NetTopology, bn_momentum: f64, seed: u64) -> Result<Self> {
        Ok(IdentificationNet {
            unet: UNet::new(identification_unet_config(topology, bn_momentum), seed)?,
        })
    }

    /// Per-pixel regression value for one (slabs, h, w) slab, eval mode.
    pub fn apply(&self, slab: &Array3<f32>) -> Result<Array2<f32>> {
        let (c, h, w) = slab.dim();
        let mut x = Tensor5::<f32>::zeros((1, c, 1, h, w));
        x.slice_mut(s![0, .., 0, .., ..]).assign(slab);
        self.unet.validate_input(x.dim())?;
        let out = self.unet.forward_eval(&x);
        Ok(out.slice(s![0, 0, 0, .., ..]).to_owned())
    }
}

/// One logged training epoch. `metric` is foreground Dice for detection and
/// masked mean absolute error for identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

fn detection_batch(patches: &[DetectionPatch], idx: &[usize]) -> (Tensor5<f32>, Vec<u8>) {
    let (d, h, w) = patches[idx[0]].image.dim();
    let n = idx.len();
    let mut x = Tensor5::<f32>::zeros((n, 1, d, h, w));
    let mut targets = Vec::with_capacity(n * d * h * w);
    for (bi, &pi) in idx.iter().enumerate() {
        x.slice_mut(s![bi, 0, .., .., ..]).assign(&patches[pi].image);
    }
    // Target order must match the flattened prediction order (batch-major).
    for &pi in idx {
        targets.extend(patches[pi].label.iter().copied());
    }
    (x, targets)
}

/// Flatten (N, 2, D, H, W) probabilities into per-voxel rows (n_vox, 2).
fn flatten_two_class(probs: &Tensor5<f32>) -> Array2<f32> {
    let (n, c, d, h, w) = probs.dim();
    debug_assert_eq!(c, 2);
    let n_vox = n * d * h * w;
    let mut out = Array2::<f32>::zeros((n_vox, 2));
    let mut row = 0usize;
    for ni in 0..n {
        for zd in 0..d {
            for zh in 0..h {
                for zw in 0..w {
                    out[[row, 0]] = probs[[ni, 0, zd, zh, zw]];
                    out[[row, 1]] = probs[[ni, 1, zd, zh, zw]];
                    row += 1;
                }
            }
        }
    }
    out
}

/// Gradient of the weighted cross entropy with respect to the logits:
/// `w_t * (p - onehot) / n_vox` per voxel.
fn detection_logit_grad(
    probs: &Tensor5<f32>,
    targets: &[u8],
    weights: (f32, f32),
) -> Tensor5<f32> {
    let (n, _, d, h, w) = probs.dim();
    let n_vox = (n * d * h * w) as f32;
    let mut g = Tensor5::<f32>::zeros(probs.raw_dim());
    let mut row = 0usize;
    for ni in 0..n {
        for zd in 0..d {
            for zh in 0..h {
                for zw in 0..w {
                    let t = targets[row] as usize;
                    let wt = if t == 0 { weights.0 } else { weights.1 };
                    for c in 0..2 {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        g[[ni, c, zd, zh, zw]] =
                            wt * (probs[[ni, c, zd, zh, zw]] - onehot) / n_vox;
                    }
                    row += 1;
                }
            }
        }
    }
    g
}

/// Foreground Dice of thresholded predictions against binary targets.
pub fn foreground_dice(pred_fg: &Array3<f32>, target: &Array3<u8>) -> f64 {
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut t_count = 0usize;
    for (&p, &t) in pred_fg.iter().zip(target.iter()) {
        let pf = p > 0.5;
        let tf = t > 0;
        if pf {
            p_count += 1;
        }
        if tf {
            t_count += 1;
        }
        if pf && tf {
            inter += 1;
        }
    }
    if p_count + t_count == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p_count + t_count) as f64
    }
}

fn detection_eval(net: &DetectionNet, patches: &[DetectionPatch], weights: (f32, f32)) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut dice_sum = 0.0;
    for p in patches {
        let fg = net.apply(&p.image)?;
        let mut pred = Array2::<f32>::zeros((fg.len(), 2));
        for (i, &f) in fg.iter().enumerate() {
            pred[[i, 0]] = 1.0 - f;
            pred[[i, 1]] = f;
        }
        let target: Array1<u8> = p.label.iter().copied().collect();
        loss_sum += detection_loss(pred.view(), target.view(), weights)? as f64;
        dice_sum += foreground_dice(&fg, &p.label);
    }
    let n = patches.len() as f64;
    Ok((loss_sum / n, dice_sum / n))
}

/// Train the detection network in place. `start_epoch` supports resuming;
/// epochs already done are skipped. Returns the per-epoch log.
pub fn train_detection(
    net: &mut DetectionNet,
    patches: &[DetectionPatch],
    val: Option<&[DetectionPatch]>,
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<Vec<TrainEpoch>> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::InvalidConfig("no training patches".into()));
    }
    let (d, h, w) = patches[0].image.dim();
    net.unet.validate_input((1, 1, d, h, w))?;
    for p in patches {
        if p.image.dim() != (d, h, w) || p.label.dim() != (d, h, w) {
            return Err(Error::ShapeMismatch(
                "all detection patches must share one shape".into(),
            ));
        }
    }
    let weights = (cfg.background_weight as f32, cfg.foreground_weight as f32);
    let opt = Adam::with_lr(cfg.learning_rate);
    let mut shuffle_rng = crate::nn::fresh_seeded(cfg.seed, 0x51);
    let mut log = Vec::new();
    let mut t = start_epoch * patches.len().div_ceil(cfg.batch_size);

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, targets) = detection_batch(patches, chunk);
            let logits = net.unet.forward_train(&x);
            let probs = softmax_channels(&logits);
            if probs.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    step: t,
                    loss: f64::NAN,
                });
            }
            let pred = flatten_two_class(&probs);
            let target_arr = Array1::from_vec(targets.clone());
            let loss = detection_loss(pred.view(), target_arr.view(), weights)? as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: t, loss });
            }
            loss_sum += loss;
            batches += 1;
            let g = detection_logit_grad(&probs, &targets, weights);
            net.unet.zero_grad();
            net.unet.backward(&g);
            t += 1;
            net.unet.step(&opt, t);
        }
        let (_, dice) = detection_eval(net, patches, weights)?;
        let (val_loss, val_metric) = match val {
            Some(vp) if !vp.is_empty() => {
                let (l, m) = detection_eval(net, vp, weights)?;
                (Some(l), Some(m))
            }
            _ => (None, None),
        };
        log.push(TrainEpoch {
            epoch,
            loss: loss_sum / batches as f64,
            metric: dice,
            val_loss,
            val_metric,
        });
    }
    Ok(log)
}

fn identification_batch(
    patches: &[IdentificationPatch],
    idx: &[usize],
) -> (Tensor5<f32>, Vec<u8>) {
    let (c, h, w) = patches[idx[0]].image.dim();
    let n = idx.len();
    let mut x = Tensor5::<f32>::zeros((n, c, 1, h, w));
    let mut targets = Vec::with_capacity(n * h * w);
    for (bi, &pi) in idx.iter().enumerate() {
        x.slice_mut(s![bi, .., 0, .., ..]).assign(&patches[pi].image);
    }
    for &pi in idx {
        targets.extend(patches[pi].label.iter().copied());
    }
    (x, targets)
}

fn identification_eval(net: &IdentificationNet, patches: &[IdentificationPatch]) -> Result<f64> {
    let mut sum = 0.0;
    for p in patches {
        let out = net.apply(&p.image)?;
        let pred: Array1<f32> = out.iter().copied().collect();
        let target: Array1<u8> = p.label.iter().copied().collect();
        sum += identification_loss(pred.view(), target.view())? as f64;
    }
    Ok(sum / patches.len() as f64)
}

/// Train the identification network in place; masked L1 objective.
pub fn train_identification(
    net: &mut IdentificationNet,
    patches: &[IdentificationPatch],
    val: Option<&[IdentificationPatch]>,
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<Vec<TrainEpoch>> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::InvalidConfig("no training patches".into()));
    }
    let (c, h, w) = patches[0].image.dim();
    net.unet.validate_input((1, c, 1, h, w))?;
    for p in patches {
        if p.image.dim() != (c, h, w) || p.label.dim() != (h, w) {
            return Err(Error::ShapeMismatch(
                "all identification patches must share one shape".into(),
            ));
        }
    }
    let opt = Adam::with_lr(cfg.learning_rate);
    let mut shuffle_rng = crate::nn::fresh_seeded(cfg.seed, 0x52);
    let mut log = Vec::new();
    let mut t = start_epoch * patches.len().div_ceil(cfg.batch_size);

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, targets) = identification_batch(patches, chunk);
            let out = net.unet.forward_train(&x);
            if out.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    step: t,
                    loss: f64::NAN,
                });
            }
            let pred: Array1<f32> = out.iter().copied().collect();
            let target_arr = Array1::from_vec(targets);
            let loss = identification_loss(pred.view(), target_arr.view())? as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: t, loss });
            }
            loss_sum += loss;
            batches += 1;
            let flat_grad = identification_loss_grad(pred.view(), target_arr.view())?;
            let mut g = Tensor5::<f32>::zeros(out.raw_dim());
            for (gi, &v) in g.iter_mut().zip(flat_grad.iter()) {
                *gi = v;
            }
            net.unet.zero_grad();
            net.unet.backward(&g);
            t += 1;
            net.unet.step(&opt, t);
        }
        let metric = identification_eval(net, patches)?;
        let (val_loss, val_metric) = match val {
            Some(vp) if !vp.is_empty() => {
                let m = identification_eval(net, vp)?;
                (Some(m), Some(m))
            }
            _ => (None, None),
        };
        log.push(TrainEpoch {
            epoch,
            loss: loss_sum / batches as f64,
            metric,
            val_loss,
            val_metric,
        });
    }
    Ok(log)
}

/// Serialized model: weights, topology and the training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: String,
    pub version: String,
    pub topology: NetTopology,
    pub train_config: TrainConfig,
    pub epochs_completed: usize,
    pub state: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Other(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::BadCheckpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn for_detection(net: &mut DetectionNet, cfg: &TrainConfig, topology: &NetTopology, epochs: usize) -> Self {
        Checkpoint {
            model: "detection".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            topology: topology.clone(),
            train_config: cfg.clone(),
            epochs_completed: epochs,
            state: net.unet.state(),
        }
    }

    pub fn for_identification(
        net: &mut IdentificationNet,
        cfg: &TrainConfig,
        topology: &NetTopology,
        epochs: usize,
    ) -> Self {
        Checkpoint {
            model: "identification".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            topology: topology.clone(),
            train_config: cfg.clone(),
            epochs_completed: epochs,
            state: net.unet.state(),
        }
    }

    pub fn detection_net(&self) -> Result<DetectionNet> {
        if self.model != "detection" {
            return Err(Error::Other(format!(
                "checkpoint holds a {} model, expected detection",
                self.model
            )));
        }
        let mut net = DetectionNet::new(&self.topology, self.train_config.bn_momentum, 0)?;
        net.unet.load_state(&self.state)?;
        Ok(net)
    }

    pub fn identification_net(&self) -> Result<IdentificationNet> {
        if self.model != "identification" {
            return Err(Error::Other(format!(
                "checkpoint holds a {} model, expected identification",
                self.model
            )));
        }
        let mut net = IdentificationNet::new(&self.topology, self.train_config.bn_momentum, 0)?;
        net.unet.load_state(&self.state)?;
        Ok(net)
    }
}
