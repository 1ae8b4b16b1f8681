//! Elastic deformation of identification patches.
//!
//! A per-patch displacement field is sampled on a coarse control grid
//! (normal displacements, std `sigma`, in pixels) over the two in-plane axes,
//! interpolated bilinearly to every pixel and applied by backward warping to
//! all 8 slab slices and the label slice alike: bilinear for the image,
//! nearest-neighbour for the labels. `sigma = 0` is exactly the identity.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::sampler::IdentificationPatch;

/// Control-point displacements over the in-plane axes.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub grid: usize,
    pub sigma: f64,
    pub seed: u64,
    /// (grid, grid) control points, displacement as (dy, dz) in pixels.
    points: Vec<[f64; 2]>,
}

impl DeformationField {
    pub fn sample(grid: usize, sigma: f64, seed: u64) -> Self {
        assert!(grid >= 2, "control grid needs at least 2 points per axis");
        let mut points = vec![[0.0f64; 2]; grid * grid];
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            for p in &mut points {
                p[0] = normal.sample(&mut rng);
                p[1] = normal.sample(&mut rng);
            }
        }
        DeformationField {
            grid,
            sigma,
            seed,
            points,
        }
    }

    /// Bilinear displacement at in-plane pixel (y, z) of an (h, w) plane.
    fn displacement(&self, y: f64, z: f64, h: usize, w: usize) -> [f64; 2] {
        let g = self.grid;
        // Control points sit at fractions i/(g-1) of each axis span.
        let fy = if h > 1 { y / (h - 1) as f64 } else { 0.0 } * (g - 1) as f64;
        let fz = if w > 1 { z / (w - 1) as f64 } else { 0.0 } * (g - 1) as f64;
        let iy = (fy.floor() as usize).min(g - 2);
        let iz = (fz.floor() as usize).min(g - 2);
        let ty = fy - iy as f64;
        let tz = fz - iz as f64;
        let at = |r: usize, c: usize| self.points[r * g + c];
        let mut out = [0.0f64; 2];
        for k in 0..2 {
            let c00 = at(iy, iz)[k];
            let c10 = at(iy + 1, iz)[k];
            let c01 = at(iy, iz + 1)[k];
            let c11 = at(iy + 1, iz + 1)[k];
            let c0 = c00 + (c10 - c00) * ty;
            let c1 = c01 + (c11 - c01) * ty;
            out[k] = c0 + (c1 - c0) * tz;
        }
        out
    }
}

fn bilinear_plane(plane: &ndarray::ArrayView2<f32>, y: f64, z: f64) -> f32 {
    let (h, w) = plane.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let z = z.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let z0 = z.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let z1 = (z0 + 1).min(w - 1);
    let ty = (y - y0 as f64) as f32;
    let tz = (z - z0 as f64) as f32;
    let c00 = plane[[y0, z0]];
    let c10 = plane[[y1, z0]];
    let c01 = plane[[y0, z1]];
    let c11 = plane[[y1, z1]];
    let a = c00 + (c10 - c00) * ty;
    let b = c01 + (c11 - c01) * ty;
    a + (b - a) * tz
}

/// Warp an identification patch along its two in-plane axes.
pub fn elastic_deform(
    p: &IdentificationPatch,
    sigma: f64,
    seed: u64,
    grid: usize,
) -> IdentificationPatch {
    let field = DeformationField::sample(grid, sigma, seed);
    apply_deformation(p, &field)
}

/// Apply a pre-sampled field; image warped bilinearly, labels by nearest
/// neighbour, identically for every slab slice.
pub fn apply_deformation(p: &IdentificationPatch, field: &DeformationField) -> IdentificationPatch {
    let (slabs, h, w) = p.image.dim();
    let mut image = Array3::<f32>::zeros((slabs, h, w));
    let mut label = Array2::<u8>::zeros(p.label.dim());

    for yy in 0..h {
        for zz in 0..w {
            let d = field.displacement(yy as f64, zz as f64, h, w);
            let sy = yy as f64 + d[0];
            let sz = zz as f64 + d[1];
            for s in 0..slabs {
                image[[s, yy, zz]] = bilinear_plane(&p.image.index_axis(ndarray::Axis(0), s), sy, sz);
            }
            let ny = sy.round().clamp(0.0, (h - 1) as f64) as usize;
            let nz = sz.round().clamp(0.0, (w - 1) as f64) as usize;
            label[[yy, zz]] = p.label[[ny, nz]];
        }
    }

    IdentificationPatch {
        image,
        label,
        offset: p.offset,
    }
}
