//! Training-sample generation: random 3D crops for the detection network,
//! tall 8-slice slabs with a single labelled slice for the identification
//! network. Volumes are intensity-normalized before patching and zero-padded
//! symmetrically when smaller than the patch.

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::DenseLabelMap;
use crate::error::{Error, Result};
use crate::volume::{normalize_intensity, Volume};

/// 3D crop with a voxel-aligned binary label block.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionPatch {
    pub image: Array3<f32>,
    pub label: Array3<u8>,
    /// Offset of the crop in the (padded) volume frame.
    pub offset: [usize; 3],
}

/// 8-slice slab with dense labels for its 4th slice.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationPatch {
    pub image: Array3<f32>,
    pub label: Array2<u8>,
    pub offset: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerParams {
    pub detection_patch: [usize; 3],
    pub identification_patch: [usize; 3],
    /// Fraction of detection patches required to contain vertebra voxels.
    pub foreground_fraction: f64,
    /// Rejection-sampling budget per patch.
    pub max_attempts: usize,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            detection_patch: [64, 64, 80],
            identification_patch: [8, 80, 320],
            foreground_fraction: 0.8,
            max_attempts: 1000,
        }
    }
}

/// Labelled slice index within the identification slab (the "4th slice").
pub const SLAB_LABEL_SLICE: usize = 3;

/// Symmetrically zero-pad `data` so every axis reaches at least `target`.
fn pad_to<T: Copy + num_like::Zero>(data: &Array3<T>, target: [usize; 3]) -> (Array3<T>, [usize; 3]) {
    let s = data.shape();
    let extent = [s[0], s[1], s[2]];
    let padded: Vec<usize> = (0..3).map(|k| extent[k].max(target[k])).collect();
    if padded == extent {
        return (data.clone(), [0, 0, 0]);
    }
    let lo = [
        (padded[0] - extent[0]) / 2,
        (padded[1] - extent[1]) / 2,
        (padded[2] - extent[2]) / 2,
    ];
    let mut out = Array3::from_elem((padded[0], padded[1], padded[2]), T::zero());
    out.slice_mut(s![
        lo[0]..lo[0] + extent[0],
        lo[1]..lo[1] + extent[1],
        lo[2]..lo[2] + extent[2]
    ])
    .assign(data);
    (out, lo)
}

// Minimal zero trait so the padder serves both f32 images and u8 labels.
mod num_like {
    pub trait Zero {
        fn zero() -> Self;
    }
    impl Zero for f32 {
        fn zero() -> Self {
            0.0
        }
    }
    impl Zero for u8 {
        fn zero() -> Self {
            0
        }
    }
}

fn check_inputs(v: &Volume, dense: &DenseLabelMap, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be >= 1".into()));
    }
    if !v.is_isotropic_unit() {
        return Err(Error::GeometryMismatch(
            "sampling requires the resampled 1mm volume".into(),
        ));
    }
    if dense.extent() != v.extent() {
        return Err(Error::GeometryMismatch(format!(
            "dense map extent {:?} vs volume extent {:?}",
            dense.extent(),
            v.extent()
        )));
    }
    Ok(())
}

fn random_offset(rng: &mut ChaCha8Rng, padded: [usize; 3], patch: [usize; 3]) -> [usize; 3] {
    let mut offset = [0usize; 3];
    for k in 0..3 {
        let hi = padded[k] - patch[k];
        offset[k] = if hi == 0 { 0 } else { rng.random_range(0..=hi) };
    }
    offset
}

/// Draw `n` random detection crops. At least `ceil(foreground_fraction * n)`
/// of them contain at least one vertebra voxel; offsets are reproducible at
/// bit level for a fixed seed.
pub fn sample_detection_patches(
    v: &Volume,
    dense: &DenseLabelMap,
    n: usize,
    seed: u64,
    params: &SamplerParams,
) -> Result<Vec<DetectionPatch>> {
    check_inputs(v, dense, n)?;
    if dense.labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidConfig(
            "detection sampling expects a binarized label map".into(),
        ));
    }
    let patch = params.detection_patch;
    let norm = normalize_intensity(v);
    let (image, _) = pad_to(&norm.data, patch);
    let (labels, _) = pad_to(&dense.labels, patch);
    let s = image.shape();
    let padded = [s[0], s[1], s[2]];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need_fg = (params.foreground_fraction * n as f64).ceil() as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let must_contain = i < need_fg;
        let mut attempts = 0usize;
        let offset = loop {
            attempts += 1;
            if attempts > params.max_attempts {
                return Err(Error::SamplingExhausted {
                    attempts: params.max_attempts,
                    reason: "no crop with vertebra voxels found".into(),
                });
            }
            let offset = random_offset(&mut rng, padded, patch);
            if !must_contain {
                break offset;
            }
            let crop = labels.slice(s![
                offset[0]..offset[0] + patch[0],
                offset[1]..offset[1] + patch[1],
                offset[2]..offset[2] + patch[2]
            ]);
            if crop.iter().any(|&l| l > 0) {
                break offset;
            }
        };
        out.push(DetectionPatch {
            image: image
                .slice(s![
                    offset[0]..offset[0] + patch[0],
                    offset[1]..offset[1] + patch[1],
                    offset[2]..offset[2] + patch[2]
                ])
                .to_owned(),
            label: labels
                .slice(s![
                    offset[0]..offset[0] + patch[0],
                    offset[1]..offset[1] + patch[1],
                    offset[2]..offset[2] + patch[2]
                ])
                .to_owned(),
            offset,
        });
    }
    Ok(out)
}

/// Draw `n` identification slabs; every slab's labelled slice contains at
/// least one vertebra voxel.
pub fn sample_identification_patches(
    v: &Volume,
    dense: &DenseLabelMap,
    n: usize,
    seed: u64,
    params: &SamplerParams,
) -> Result<Vec<IdentificationPatch>> {
    check_inputs(v, dense, n)?;
    let patch = params.identification_patch;
    let norm = normalize_intensity(v);
    let (image, _) = pad_to(&norm.data, patch);
    let (labels, _) = pad_to(&dense.labels, patch);
    let s = image.shape();
    let padded = [s[0], s[1], s[2]];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut attempts = 0usize;
        let offset = loop {
            attempts += 1;
            if attempts > params.max_attempts {
                return Err(Error::SamplingExhausted {
                    attempts: params.max_attempts,
                    reason: "no slab with labelled vertebra pixels found".into(),
                });
            }
            let offset = random_offset(&mut rng, padded, patch);
            let slice = labels.slice(s![
                offset[0] + SLAB_LABEL_SLICE,
                offset[1]..offset[1] + patch[1],
                offset[2]..offset[2] + patch[2]
            ]);
            if slice.iter().any(|&l| l > 0) {
                break offset;
            }
        };
        out.push(IdentificationPatch {
            image: image
                .slice(s![
                    offset[0]..offset[0] + patch[0],
                    offset[1]..offset[1] + patch[1],
                    offset[2]..offset[2] + patch[2]
                ])
                .to_owned(),
            label: labels
                .slice(s![
                    offset[0] + SLAB_LABEL_SLICE,
                    offset[1]..offset[1] + patch[1],
                    offset[2]..offset[2] + patch[2]
                ])
                .to_owned(),
            offset,
        });
    }
    Ok(out)
}
