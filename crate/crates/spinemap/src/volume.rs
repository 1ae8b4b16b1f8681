//! 3D scalar volumes with voxel spacing and origin, plus isotropic resampling.
//!
//! Axis convention used throughout the crate: axis 0 = left-right (x),
//! axis 1 = anterior-posterior (y), axis 2 = cranio-caudal (z). World
//! positions are `origin + index * spacing`, in mm.

use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

/// Intensity window applied before any network sees a voxel: clamp to
/// [-1000, 2000] HU, rescale linearly to [-1, 1].
pub const INTENSITY_WINDOW: (f32, f32) = (-1000.0, 2000.0);

/// A 3D scalar image with its voxel geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// mm per voxel along each axis; all components > 0.
    pub spacing: [f64; 3],
    /// World position of voxel (0,0,0), mm.
    pub origin: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| s.is_nan() || !s.is_finite() || s <= 0.0) {
            return Err(Error::MissingSpacing(format!(
                "spacing components must be positive, got {spacing:?}"
            )));
        }
        if data.shape().iter().any(|&e| e < 1) {
            return Err(Error::NonVolumetric(format!(
                "every axis needs extent >= 1, got {:?}",
                data.shape()
            )));
        }
        Ok(Volume {
            data,
            spacing,
            origin,
        })
    }

    pub fn extent(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn is_isotropic_unit(&self) -> bool {
        self.spacing.iter().all(|&s| (s - 1.0).abs() <= 1e-6)
    }

    /// World position of a voxel index, mm.
    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + index[0] * self.spacing[0],
            self.origin[1] + index[1] * self.spacing[1],
            self.origin[2] + index[2] * self.spacing[2],
        ]
    }
}

/// How voxel values are interpolated when resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    /// Trilinear, for intensity volumes.
    Trilinear,
    /// Nearest-neighbour, for integer label maps.
    Nearest,
}

/// Resample onto a 1mm isotropic grid with the same origin.
///
/// The output extent along axis k is `round(extent_k * spacing_k)`. A volume
/// already at unit spacing (within 1e-6) is returned unchanged.
pub fn resample_isotropic(v: &Volume, interpolation: Interpolation) -> Volume {
    if v.is_isotropic_unit() {
        let mut out = v.clone();
        out.spacing = [1.0, 1.0, 1.0];
        return out;
    }
    let in_extent = v.extent();
    let out_extent: Vec<usize> = (0..3)
        .map(|k| ((in_extent[k] as f64 * v.spacing[k]).round() as usize).max(1))
        .collect();

    let mut data = Array3::<f32>::zeros((out_extent[0], out_extent[1], out_extent[2]));
    let src = &v.data;
    let max_idx = [
        in_extent[0] as f64 - 1.0,
        in_extent[1] as f64 - 1.0,
        in_extent[2] as f64 - 1.0,
    ];
    Zip::indexed(&mut data).par_for_each(|(i, j, k), out| {
        // Output voxel i sits at world origin + i mm -> input voxel coord i / spacing.
        let sx = (i as f64 / v.spacing[0]).clamp(0.0, max_idx[0]);
        let sy = (j as f64 / v.spacing[1]).clamp(0.0, max_idx[1]);
        let sz = (k as f64 / v.spacing[2]).clamp(0.0, max_idx[2]);
        *out = match interpolation {
            Interpolation::Trilinear => trilinear(src, sx, sy, sz),
            Interpolation::Nearest => {
                src[[sx.round() as usize, sy.round() as usize, sz.round() as usize]]
            }
        };
    });

    Volume {
        data,
        spacing: [1.0, 1.0, 1.0],
        origin: v.origin,
    }
}

fn trilinear(src: &Array3<f32>, x: f64, y: f64, z: f64) -> f32 {
    let (nx, ny, nz) = src.dim();
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let z0 = z.floor() as usize;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let fz = (z - z0 as f64) as f32;

    let c000 = src[[x0, y0, z0]];
    let c100 = src[[x1, y0, z0]];
    let c010 = src[[x0, y1, z0]];
    let c110 = src[[x1, y1, z0]];
    let c001 = src[[x0, y0, z1]];
    let c101 = src[[x1, y0, z1]];
    let c011 = src[[x0, y1, z1]];
    let c111 = src[[x1, y1, z1]];

    let c00 = c000 + (c100 - c000) * fx;
    let c10 = c010 + (c110 - c010) * fx;
    let c01 = c001 + (c101 - c001) * fx;
    let c11 = c011 + (c111 - c011) * fx;
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    c0 + (c1 - c0) * fz
}

/// Clamp to the fixed HU window and rescale to [-1, 1].
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (lo, hi) = INTENSITY_WINDOW;
    let scale = 2.0 / (hi - lo);
    let data = v.data.mapv(|x| (x.clamp(lo, hi) - lo) * scale - 1.0);
    Volume {
        data,
        spacing: v.spacing,
        origin: v.origin,
    }
}

/// Inverse of [`normalize_intensity`] on the window interior. Used by tests
/// and synthetic-data generators to craft volumes with known normalized values.
pub fn denormalize_intensity(value: f32) -> f32 {
    let (lo, hi) = INTENSITY_WINDOW;
    (value + 1.0) * (hi - lo) / 2.0 + lo
}
