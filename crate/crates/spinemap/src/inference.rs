//! Whole-scan inference: overlap-tiled application of the detection network
//! with border discard, per-slice slab application of the identification
//! network, and multiplicative fusion of the two outputs.
//!
//! Both stages run against small model traits so analytic stubs can stand in
//! for trained networks; the stubs drive the seam-freeness and end-to-end
//! oracle tests and back the CLI's `--stub` mode.

use ndarray::{s, Array2, Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::DenseLabelMap;
use crate::error::{Error, Result};
use crate::nets::{DetectionNet, IdentificationNet};
use crate::sampler::SLAB_LABEL_SLICE;
use crate::volume::{normalize_intensity, Volume};

/// Fill value for out-of-scan regions in normalized intensity units: air.
/// CT scans end in air, so tiling borders and in-plane padding use the bottom
/// of the intensity window rather than mid-window zero.
pub const PAD_FILL: f32 = -1.0;

/// Anything that maps a normalized 3D patch to per-voxel foreground
/// probabilities.
pub trait DetectionModel: Sync {
    fn detect_patch(&self, patch: ArrayView3<f32>) -> Array3<f32>;
}

/// Anything that maps a normalized (slabs, h, w) slab to a per-pixel value.
pub trait IdentificationModel: Sync {
    fn identify_slab(&self, slab: ArrayView3<f32>) -> Array2<f32>;
}

impl DetectionModel for DetectionNet {
    fn detect_patch(&self, patch: ArrayView3<f32>) -> Array3<f32> {
        self.apply(&patch.to_owned()).expect("patch shape fits the network")
    }
}

impl IdentificationModel for IdentificationNet {
    fn identify_slab(&self, slab: ArrayView3<f32>) -> Array2<f32> {
        self.apply(&slab.to_owned()).expect("slab shape fits the network")
    }
}

/// Foreground where the normalized intensity exceeds a threshold. Receptive
/// field of one voxel.
pub struct ThresholdStubDetector {
    pub threshold: f32,
}

impl DetectionModel for ThresholdStubDetector {
    fn detect_patch(&self, patch: ArrayView3<f32>) -> Array3<f32> {
        patch.mapv(|v| if v > self.threshold { 1.0 } else { 0.0 })
    }
}

/// 3x3x3 box mean followed by a threshold; receptive field of three voxels,
/// for exercising the border-discard logic. Out-of-patch neighbours count as
/// zero; that convention only shows in the discarded window borders.
pub struct BoxMeanStubDetector {
    pub threshold: f32,
}

impl DetectionModel for BoxMeanStubDetector {
    fn detect_patch(&self, patch: ArrayView3<f32>) -> Array3<f32> {
        let (d, h, w) = patch.dim();
        let mut out = Array3::<f32>::zeros((d, h, w));
        for x in 0..d {
            for y in 0..h {
                for z in 0..w {
                    let mut acc = 0.0f32;
                    for dx in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dz in -1i64..=1 {
                                let (ix, iy, iz) =
                                    (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                if ix >= 0
                                    && iy >= 0
                                    && iz >= 0
                                    && (ix as usize) < d
                                    && (iy as usize) < h
                                    && (iz as usize) < w
                                {
                                    acc += patch[[ix as usize, iy as usize, iz as usize]];
                                }
                            }
                        }
                    }
                    out[[x, y, z]] = if acc / 27.0 > self.threshold { 1.0 } else { 0.0 };
                }
            }
        }
        out
    }
}

/// Per-pixel affine map of the labelled slice of the slab: `v * scale + offset`.
pub struct AffineStubIdentifier {
    pub scale: f32,
    pub offset: f32,
}

impl IdentificationModel for AffineStubIdentifier {
    fn identify_slab(&self, slab: ArrayView3<f32>) -> Array2<f32> {
        slab.index_axis(ndarray::Axis(0), SLAB_LABEL_SLICE)
            .mapv(|v| v * self.scale + self.offset)
    }
}

/// Mean over the slab slices per pixel.
pub struct SlabMeanStubIdentifier;

impl IdentificationModel for SlabMeanStubIdentifier {
    fn identify_slab(&self, slab: ArrayView3<f32>) -> Array2<f32> {
        let slabs = slab.dim().0 as f32;
        slab.sum_axis(ndarray::Axis(0)).mapv(|v| v / slabs)
    }
}

/// Tiling geometry: window extent, stride and discarded border.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingParams {
    pub patch: [usize; 3],
    pub step: [usize; 3],
    pub pad: [usize; 3],
}

impl Default for TilingParams {
    fn default() -> Self {
        TilingParams {
            patch: [64, 64, 80],
            step: [32, 32, 40],
            pad: [16, 16, 20],
        }
    }
}

impl TilingParams {
    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if self.step[k] == 0 || self.patch[k] == 0 {
                return Err(Error::InvalidConfig("tiling extents must be positive".into()));
            }
            if self.patch[k] != self.step[k] + 2 * self.pad[k] {
                return Err(Error::InvalidConfig(format!(
                    "tiling axis {k}: patch {} must equal step {} + 2 * pad {}",
                    self.patch[k], self.step[k], self.pad[k]
                )));
            }
        }
        Ok(())
    }
}

/// Window plan over a padded volume; retained interiors tile the original
/// extent exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TilingPlan {
    pub params: TilingParams,
    pub original_extent: [usize; 3],
    pub padded_extent: [usize; 3],
    /// Window origins in the padded frame.
    pub offsets: Vec<[usize; 3]>,
}

/// Plan the overlap tiling of a volume of the given extent.
pub fn plan_tiling(extent: [usize; 3], params: &TilingParams) -> Result<TilingPlan> {
    params.validate()?;
    if extent.contains(&0) {
        return Err(Error::InvalidConfig("volume extent must be positive".into()));
    }
    let windows: Vec<usize> = (0..3).map(|k| extent[k].div_ceil(params.step[k])).collect();
    let padded_extent = [
        windows[0] * params.step[0] + 2 * params.pad[0],
        windows[1] * params.step[1] + 2 * params.pad[1],
        windows[2] * params.step[2] + 2 * params.pad[2],
    ];
    let mut offsets = Vec::with_capacity(windows.iter().product());
    for ix in 0..windows[0] {
        for iy in 0..windows[1] {
            for iz in 0..windows[2] {
                offsets.push([
                    ix * params.step[0],
                    iy * params.step[1],
                    iz * params.step[2],
                ]);
            }
        }
    }
    Ok(TilingPlan {
        params: params.clone(),
        original_extent: extent,
        padded_extent,
        offsets,
    })
}

impl TilingPlan {
    /// Original-frame region whose values are retained from the window at
    /// `offset`: `[offset, offset + step)` clipped to the original extent.
    pub fn retained_region(&self, offset: [usize; 3]) -> [(usize, usize); 3] {
        let mut out = [(0usize, 0usize); 3];
        for k in 0..3 {
            out[k] = (
                offset[k].min(self.original_extent[k]),
                (offset[k] + self.params.step[k]).min(self.original_extent[k]),
            );
        }
        out
    }
}

/// Pad `data` into the plan's padded frame with air fill; the original
/// volume starts at `pad`.
fn pad_volume(data: &Array3<f32>, plan: &TilingPlan) -> Array3<f32> {
    let e = plan.original_extent;
    let p = plan.params.pad;
    let mut out = Array3::<f32>::from_elem(
        (
            plan.padded_extent[0],
            plan.padded_extent[1],
            plan.padded_extent[2],
        ),
        PAD_FILL,
    );
    out.slice_mut(s![p[0]..p[0] + e[0], p[1]..p[1] + e[1], p[2]..p[2] + e[2]])
        .assign(data);
    out
}

/// Apply the detection model window-wise with border discard and assemble a
/// binary map. The volume is intensity-normalized internally.
pub fn detect_volume<M: DetectionModel>(
    model: &M,
    v: &Volume,
    params: &TilingParams,
) -> Result<DenseLabelMap> {
    if !v.is_isotropic_unit() {
        return Err(Error::GeometryMismatch(
            "detection runs on the resampled 1mm volume".into(),
        ));
    }
    let extent = v.extent();
    let plan = plan_tiling(extent, params)?;
    let norm = normalize_intensity(v);
    let padded = pad_volume(&norm.data, &plan);
    let patch = plan.params.patch;
    let pad = plan.params.pad;
    let step = plan.params.step;

    let interiors: Vec<([usize; 3], Array3<f32>)> = plan
        .offsets
        .par_iter()
        .map(|&off| {
            let window = padded.slice(s![
                off[0]..off[0] + patch[0],
                off[1]..off[1] + patch[1],
                off[2]..off[2] + patch[2]
            ]);
            let probs = model.detect_patch(window);
            let interior = probs
                .slice(s![
                    pad[0]..pad[0] + step[0],
                    pad[1]..pad[1] + step[1],
                    pad[2]..pad[2] + step[2]
                ])
                .to_owned();
            (off, interior)
        })
        .collect();

    let mut labels = Array3::<u8>::zeros((extent[0], extent[1], extent[2]));
    for (off, interior) in interiors {
        let region = plan.retained_region(off);
        for x in region[0].0..region[0].1 {
            for y in region[1].0..region[1].1 {
                for z in region[2].0..region[2].1 {
                    let p = interior[[x - off[0], y - off[1], z - off[2]]];
                    labels[[x, y, z]] = u8::from(p > 0.5);
                }
            }
        }
    }
    Ok(DenseLabelMap {
        labels,
        spacing: v.spacing,
        origin: v.origin,
    })
}

fn next_multiple(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Apply the identification model to every slice of the scan. Each slice is
/// fed as the labelled slice of its 8-slice slab (edge slices replicate), the
/// in-plane extents are air-padded up to multiples of 16 and the padding is
/// cropped from the output.
pub fn identify_volume<M: IdentificationModel>(model: &M, v: &Volume) -> Result<Volume> {
    if !v.is_isotropic_unit() {
        return Err(Error::GeometryMismatch(
            "identification runs on the resampled 1mm volume".into(),
        ));
    }
    let extent = v.extent();
    let norm = normalize_intensity(v);
    let (h, w) = (extent[1], extent[2]);
    let (ph, pw) = (next_multiple(h, 16), next_multiple(w, 16));
    let slab_size = 8usize;

    let slices: Vec<Array2<f32>> = (0..extent[0])
        .into_par_iter()
        .map(|x| {
            let mut slab = Array3::<f32>::from_elem((slab_size, ph, pw), PAD_FILL);
            for s_i in 0..slab_size {
                // The labelled slice of the slab sits at SLAB_LABEL_SLICE.
                let src = (x as i64 + s_i as i64 - SLAB_LABEL_SLICE as i64)
                    .clamp(0, extent[0] as i64 - 1) as usize;
                slab.slice_mut(s![s_i, ..h, ..w])
                    .assign(&norm.data.index_axis(ndarray::Axis(0), src));
            }
            let out = model.identify_slab(slab.view());
            out.slice(s![..h, ..w]).to_owned()
        })
        .collect();

    let mut data = Array3::<f32>::zeros((extent[0], extent[1], extent[2]));
    for (x, slice) in slices.into_iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), x).assign(&slice);
    }
    Volume::new(data, v.spacing, v.origin)
}

/// Voxel-wise fusion: binary detection times the identification regression,
/// rounded half away from zero and clamped to 0..=26.
pub fn fuse(detection: &DenseLabelMap, identification: &Volume) -> Result<DenseLabelMap> {
    let id_extent = identification.extent();
    if !detection.same_geometry(id_extent, identification.spacing, identification.origin) {
        return Err(Error::GeometryMismatch(format!(
            "detection {:?} vs identification {:?}",
            detection.extent(),
            id_extent
        )));
    }
    if detection.labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidConfig("fusion expects a binary detection map".into()));
    }
    let mut labels = Array3::<u8>::zeros(detection.labels.raw_dim());
    ndarray::Zip::from(&mut labels)
        .and(&detection.labels)
        .and(&identification.data)
        .for_each(|out, &det, &id| {
            *out = if det == 0 {
                0
            } else {
                // f32::round rounds half away from zero.
                (det as f32 * id).round().clamp(0.0, 26.0) as u8
            };
        });
    Ok(DenseLabelMap {
        labels,
        spacing: detection.spacing,
        origin: detection.origin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_params() -> TilingParams {
        TilingParams {
            patch: [16, 16, 20],
            step: [8, 8, 10],
            pad: [4, 4, 5],
        }
    }

    #[test]
    fn reference_extent_eight_windows() {
        let plan = plan_tiling([64, 64, 80], &TilingParams::default()).unwrap();
        assert_eq!(plan.padded_extent, [96, 96, 120]);
        assert_eq!(plan.offsets.len(), 8);
        let expected: Vec<[usize; 3]> = [0, 32]
            .iter()
            .flat_map(|&x| {
                [0usize, 32].iter().flat_map(move |&y| {
                    [0usize, 40].iter().map(move |&z| [x, y, z])
                })
            })
            .collect();
        assert_eq!(plan.offsets, expected);
    }

    #[test]
    fn single_window_case() {
        let plan = plan_tiling([32, 32, 40], &TilingParams::default()).unwrap();
        assert_eq!(plan.padded_extent, [64, 64, 80]);
        assert_eq!(plan.offsets, vec![[0, 0, 0]]);
    }

    #[test]
    fn interiors_tile_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..12 {
            let extent = [
                rng.random_range(5..40),
                rng.random_range(5..40),
                rng.random_range(5..45),
            ];
            let plan = plan_tiling(extent, &small_params()).unwrap();
            let mut coverage = Array3::<u32>::zeros((extent[0], extent[1], extent[2]));
            for &off in &plan.offsets {
                let region = plan.retained_region(off);
                for x in region[0].0..region[0].1 {
                    for y in region[1].0..region[1].1 {
                        for z in region[2].0..region[2].1 {
                            coverage[[x, y, z]] += 1;
                        }
                    }
                }
            }
            assert!(
                coverage.iter().all(|&c| c == 1),
                "extent {extent:?}: every voxel must be retained exactly once"
            );
        }
    }

    #[test]
    fn rejects_inconsistent_tiling() {
        let bad = TilingParams {
            patch: [64, 64, 80],
            step: [32, 32, 40],
            pad: [10, 16, 20],
        };
        assert!(plan_tiling([32, 32, 32], &bad).is_err());
    }

    fn random_volume(extent: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn((extent[0], extent[1], extent[2]), || {
            rng.random_range(-1000.0f32..2000.0)
        });
        Volume::new(data, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn tiled_equals_unpatched_for_pointwise_stub() {
        let stub = ThresholdStubDetector { threshold: 0.0 };
        for seed in 0..4u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let extent = [
                rng.random_range(5..30),
                rng.random_range(5..30),
                rng.random_range(5..30),
            ];
            let v = random_volume(extent, seed);
            let tiled = detect_volume(&stub, &v, &small_params()).unwrap();
            let norm = normalize_intensity(&v);
            let direct = stub.detect_patch(norm.data.view());
            for (idx, &p) in direct.indexed_iter() {
                assert_eq!(tiled.labels[idx], u8::from(p > 0.5), "voxel {idx:?}");
            }
        }
    }

    #[test]
    fn tiled_equals_unpatched_for_box_mean_stub() {
        // Receptive field 3: both paths zero-pad identically, so the match is
        // exact everywhere including volume borders.
        let stub = BoxMeanStubDetector { threshold: -0.2 };
        let v = random_volume([13, 18, 11], 9);
        let params = small_params();
        let tiled = detect_volume(&stub, &v, &params).unwrap();

        let plan = plan_tiling(v.extent(), &params).unwrap();
        let norm = normalize_intensity(&v);
        let padded = pad_volume(&norm.data, &plan);
        assert_eq!(padded[[0, 0, 0]], PAD_FILL);
        let whole = stub.detect_patch(padded.view());
        let p = params.pad;
        let e = v.extent();
        let cropped = whole.slice(s![p[0]..p[0] + e[0], p[1]..p[1] + e[1], p[2]..p[2] + e[2]]);
        for (idx, &val) in cropped.indexed_iter() {
            assert_eq!(tiled.labels[idx], u8::from(val > 0.5), "voxel {idx:?}");
        }
    }

    #[test]
    fn output_extent_matches_input_extent() {
        let stub = ThresholdStubDetector { threshold: 0.5 };
        let v = random_volume([7, 19, 23], 2);
        let out = detect_volume(&stub, &v, &small_params()).unwrap();
        assert_eq!(out.extent(), [7, 19, 23]);
    }

    #[test]
    fn identify_pads_and_crops() {
        let v = random_volume([6, 70, 300], 3);
        let out = identify_volume(&SlabMeanStubIdentifier, &v).unwrap();
        assert_eq!(out.extent(), [6, 70, 300]);
        // Already-multiple-of-16 extents take the no-padding path.
        let v2 = random_volume([6, 80, 320], 4);
        let out2 = identify_volume(&SlabMeanStubIdentifier, &v2).unwrap();
        assert_eq!(out2.extent(), [6, 80, 320]);
    }

    #[test]
    fn slab_mean_stub_matches_direct_computation() {
        let v = random_volume([10, 16, 16], 5);
        let norm = normalize_intensity(&v);
        let out = identify_volume(&SlabMeanStubIdentifier, &v).unwrap();
        for x in 0..10usize {
            for y in 0..16 {
                for z in 0..16 {
                    let mut acc = 0.0f32;
                    for s_i in 0..8i64 {
                        let src = (x as i64 + s_i - SLAB_LABEL_SLICE as i64)
                            .clamp(0, 9) as usize;
                        acc += norm.data[[src, y, z]];
                    }
                    let expected = acc / 8.0;
                    let got = out.data[[x, y, z]];
                    assert!(
                        (expected - got).abs() < 1e-5,
                        "({x},{y},{z}): {expected} vs {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn identify_translation_consistency() {
        // Shifting the volume by one slice shifts the output by one slice,
        // away from the replicated edges.
        let v = random_volume([12, 16, 16], 6);
        let mut shifted_data = Array3::<f32>::zeros((12, 16, 16));
        for x in 0..11 {
            shifted_data
                .index_axis_mut(ndarray::Axis(0), x + 1)
                .assign(&v.data.index_axis(ndarray::Axis(0), x));
        }
        let shifted = Volume::new(shifted_data, v.spacing, v.origin).unwrap();
        let out = identify_volume(&SlabMeanStubIdentifier, &v).unwrap();
        let out_shifted = identify_volume(&SlabMeanStubIdentifier, &shifted).unwrap();
        // Slab reaches 3 back / 4 forward: compare interior slices only.
        for x in 4..7usize {
            for y in 0..16 {
                for z in 0..16 {
                    assert!(
                        (out.data[[x, y, z]] - out_shifted.data[[x + 1, y, z]]).abs() < 1e-6,
                        "slice {x}"
                    );
                }
            }
        }
    }

    #[test]
    fn fuse_examples() {
        let geometry = ([1usize, 1, 3], [1.0f64; 3], [0.0f64; 3]);
        let mut det = Array3::<u8>::zeros((1, 1, 3));
        det[[0, 0, 0]] = 1;
        det[[0, 0, 2]] = 1;
        let detection = DenseLabelMap {
            labels: det,
            spacing: geometry.1,
            origin: geometry.2,
        };
        let mut id = Array3::<f32>::zeros((1, 1, 3));
        id[[0, 0, 0]] = 4.4; // detected: rounds to C4
        id[[0, 0, 1]] = 17.2; // not detected: masked to 0
        id[[0, 0, 2]] = 26.7; // clamped to S2
        let identification = Volume::new(id, geometry.1, geometry.2).unwrap();
        let fused = fuse(&detection, &identification).unwrap();
        assert_eq!(fused.labels[[0, 0, 0]], 4);
        assert_eq!(fused.labels[[0, 0, 1]], 0);
        assert_eq!(fused.labels[[0, 0, 2]], 26);
    }

    #[test]
    fn fuse_zero_exactly_where_detection_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let det_labels =
            Array3::from_shape_simple_fn((6, 6, 6), || rng.random_range(0..2u8));
        let id_data =
            Array3::from_shape_simple_fn((6, 6, 6), || rng.random_range(-3.0f32..30.0));
        let detection = DenseLabelMap {
            labels: det_labels.clone(),
            spacing: [1.0; 3],
            origin: [0.0; 3],
        };
        let identification = Volume::new(id_data, [1.0; 3], [0.0; 3]).unwrap();
        let fused = fuse(&detection, &identification).unwrap();
        for (idx, &l) in fused.labels.indexed_iter() {
            assert!(l == 0 || det_labels[idx] == 1);
            if det_labels[idx] == 0 {
                assert_eq!(l, 0);
            }
        }
    }

    #[test]
    fn fuse_rejects_geometry_mismatch() {
        let detection = DenseLabelMap {
            labels: Array3::zeros((2, 2, 2)),
            spacing: [1.0; 3],
            origin: [0.0; 3],
        };
        let identification =
            Volume::new(Array3::zeros((2, 2, 3)), [1.0; 3], [0.0; 3]).unwrap();
        assert!(fuse(&detection, &identification).is_err());
    }

    #[test]
    fn real_detection_net_runs_through_tiling() {
        use crate::nets::{DetectionNet, NetTopology};
        let topology = NetTopology {
            channels: vec![2, 3],
            bottom_kernel: (3, 3),
        };
        let net = DetectionNet::new(&topology, 0.1, 3).unwrap();
        let v = random_volume([10, 12, 9], 11);
        let params = TilingParams {
            patch: [16, 16, 16],
            step: [8, 8, 8],
            pad: [4, 4, 4],
        };
        let out = detect_volume(&net, &v, &params).unwrap();
        assert_eq!(out.extent(), [10, 12, 9]);
    }
}
