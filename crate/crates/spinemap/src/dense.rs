//! Sparse-to-dense annotation: turn centroid chains into per-voxel labels.
//!
//! The construction: midpoints between adjacent centroids become segment
//! endpoints, terminal vertebrae get a mirrored endpoint so every vertebra
//! owns one segment, and each segment is swept with axial discs of the
//! vertebra's radius. Voxels reachable by several sweeps go to the nearest
//! segment (ties to the lower index).

use std::collections::BTreeMap;

use ndarray::Array3;

use crate::centroids::CentroidSet;
use crate::error::{Error, Result};
use crate::vertebra::{RadiiTable, VertebraLabel};
use crate::volume::Volume;

/// Per-voxel labels 0..=26 aligned to a source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLabelMap {
    pub labels: Array3<u8>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl DenseLabelMap {
    pub fn extent(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    /// Distinct nonzero labels present.
    pub fn present_labels(&self) -> Vec<VertebraLabel> {
        let mut seen = [false; 27];
        for &v in self.labels.iter() {
            seen[v as usize] = true;
        }
        (1..=26u8)
            .filter(|&i| seen[i as usize])
            .map(|i| VertebraLabel::from_index(i).unwrap())
            .collect()
    }

    pub fn same_geometry(&self, other_extent: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> bool {
        self.extent() == other_extent
            && (0..3).all(|k| {
                (self.spacing[k] - spacing[k]).abs() <= 1e-9
                    && (self.origin[k] - origin[k]).abs() <= 1e-9
            })
    }
}

/// One line segment per vertebra; positions in the resampled frame (mm).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentChain {
    pub segments: BTreeMap<VertebraLabel, ([f64; 3], [f64; 3])>,
}

fn midpoint(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        (a[0] + b[0]) * 0.5,
        (a[1] + b[1]) * 0.5,
        (a[2] + b[2]) * 0.5,
    ]
}

fn mirror(point: [f64; 3], through: [f64; 3]) -> [f64; 3] {
    [
        2.0 * through[0] - point[0],
        2.0 * through[1] - point[1],
        2.0 * through[2] - point[2],
    ]
}

/// Build per-vertebra segments from the centroid chain.
///
/// Interior vertebrae span the midpoints to both neighbours; terminal ones
/// get the adjacent midpoint mirrored through their centroid, so every
/// terminal centroid is the midpoint of its own segment. A single centroid
/// degenerates to a vertical segment of length `2 * radius`.
pub fn build_segment_chain(c: &CentroidSet, radii: &RadiiTable) -> Result<SegmentChain> {
    if c.is_empty() {
        return Err(Error::EmptyCentroidSet);
    }
    let ordered = c.sorted();
    let mut chain = SegmentChain::default();

    if ordered.len() == 1 {
        let (label, pos) = ordered[0];
        let r = radii.radius_mm(label);
        let start = [pos[0], pos[1], pos[2] - r];
        let end = [pos[0], pos[1], pos[2] + r];
        chain.segments.insert(label, (start, end));
        return Ok(chain);
    }

    // Midpoint between consecutive centroids; shared bitwise by both segments.
    let mids: Vec<[f64; 3]> = (0..ordered.len() - 1)
        .map(|i| midpoint(ordered[i].1, ordered[i + 1].1))
        .collect();

    for (i, &(label, pos)) in ordered.iter().enumerate() {
        let start = if i == 0 {
            mirror(mids[0], pos)
        } else {
            mids[i - 1]
        };
        let end = if i == ordered.len() - 1 {
            mirror(mids[i - 1], pos)
        } else {
            mids[i]
        };
        chain.segments.insert(label, (start, end));
    }
    Ok(chain)
}

/// In-plane (axial) distance from point `p` to the segment, provided `p.z`
/// lies within the segment's cranio-caudal span. This predicate is the single
/// definition of disc-sweep coverage; a voxel is covered iff the returned
/// distance is `<= radius`.
pub fn disc_sweep_distance(p: [f64; 3], seg: ([f64; 3], [f64; 3])) -> Option<f64> {
    let (a, b) = seg;
    let (z_lo, z_hi) = if a[2] <= b[2] { (a[2], b[2]) } else { (b[2], a[2]) };
    if p[2] < z_lo || p[2] > z_hi {
        return None;
    }
    // Distance from (p.x, p.y) to the segment projected onto the axial plane.
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let px = p[0] - a[0];
    let py = p[1] - a[1];
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let ex = px - t * dx;
    let ey = py - t * dy;
    Some((ex * ex + ey * ey).sqrt())
}

/// Rasterize the chain into a dense label map on the geometry of `geometry`
/// (which must be at 1mm isotropic spacing). Voxels outside all sweeps stay 0.
pub fn rasterize_dense_labels(
    chain: &SegmentChain,
    radii: &RadiiTable,
    geometry: &Volume,
) -> Result<DenseLabelMap> {
    if !geometry.is_isotropic_unit() {
        return Err(Error::GeometryMismatch(format!(
            "dense labels are rasterized on the 1mm grid, got spacing {:?}",
            geometry.spacing
        )));
    }
    let extent = geometry.extent();
    let mut labels = Array3::<u8>::zeros((extent[0], extent[1], extent[2]));
    let mut best = Array3::<f64>::from_elem((extent[0], extent[1], extent[2]), f64::INFINITY);

    // Increasing label order: on exact distance ties the earlier (lower) label
    // stays, which is the documented tie-break.
    for (&label, &seg) in &chain.segments {
        let r = radii.radius_mm(label);
        let (a, b) = seg;
        let lo = |axis: usize, pad: f64| -> usize {
            (a[axis].min(b[axis]) - pad).floor().max(0.0) as usize
        };
        let hi = |axis: usize, pad: f64| -> usize {
            ((a[axis].max(b[axis]) + pad).ceil() as isize).clamp(0, extent[axis] as isize - 1)
                as usize
        };
        if (a[2].max(b[2])) < 0.0 || (a[2].min(b[2])) > (extent[2] - 1) as f64 {
            continue;
        }
        let (x0, x1) = (lo(0, r), hi(0, r));
        let (y0, y1) = (lo(1, r), hi(1, r));
        let (z0, z1) = (lo(2, 0.0), hi(2, 0.0));
        for x in x0..=x1 {
            for y in y0..=y1 {
                for z in z0..=z1 {
                    let p = [x as f64, y as f64, z as f64];
                    if let Some(d) = disc_sweep_distance(p, seg) {
                        if d <= r && d < best[[x, y, z]] {
                            best[[x, y, z]] = d;
                            labels[[x, y, z]] = label.index();
                        }
                    }
                }
            }
        }
    }

    Ok(DenseLabelMap {
        labels,
        spacing: geometry.spacing,
        origin: geometry.origin,
    })
}

/// Collapse all vertebra labels to 1, keeping 0 as background.
pub fn binarize(d: &DenseLabelMap) -> DenseLabelMap {
    DenseLabelMap {
        labels: d.labels.mapv(|v| u8::from(v > 0)),
        spacing: d.spacing,
        origin: d.origin,
    }
}
