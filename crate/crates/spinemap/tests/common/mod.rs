//! Shared builders for synthetic spines, scans and on-disk datasets.

use std::path::Path;

use ndarray::Array3;
use spinemap::centroids::{save_centroids, CentroidSet};
use spinemap::dense::{build_segment_chain, rasterize_dense_labels, DenseLabelMap};
use spinemap::nifti;
use spinemap::vertebra::{RadiiTable, VertebraLabel};
use spinemap::volume::Volume;

/// A run of consecutive vertebrae stacked along z with gentle x/y offsets.
pub fn spine_centroids(
    names: &[&str],
    start: [f64; 3],
    z_step: f64,
    xy_wiggle: f64,
) -> CentroidSet {
    let mut set = CentroidSet::default();
    for (i, name) in names.iter().enumerate() {
        let sway = (i as f64 * 0.9).sin() * xy_wiggle;
        set.entries.insert(
            VertebraLabel::from_name(name).unwrap(),
            [start[0] + sway, start[1] - sway, start[2] + z_step * i as f64],
        );
    }
    set
}

/// Rasterize a centroid set onto a fresh 1mm grid of the given extent.
pub fn rasterized_spine(
    extent: [usize; 3],
    centroids: &CentroidSet,
    radii: &RadiiTable,
) -> DenseLabelMap {
    let geometry = Volume::new(
        Array3::zeros((extent[0], extent[1], extent[2])),
        [1.0; 3],
        [0.0; 3],
    )
    .unwrap();
    let chain = build_segment_chain(centroids, radii).unwrap();
    rasterize_dense_labels(&chain, radii, &geometry).unwrap()
}

/// Synthetic CT whose intensity encodes the dense label as
/// `-1000 + 100 * label` HU, matching the default stub configuration.
pub fn scan_from_labels(dense: &DenseLabelMap) -> Volume {
    let data = dense.labels.mapv(|l| -1000.0 + 100.0 * l as f32);
    Volume::new(data, dense.spacing, dense.origin).unwrap()
}

/// Write scans plus annotations as a dataset directory.
pub fn write_dataset(dir: &Path, scans: &[(&str, &Volume, &CentroidSet)]) {
    std::fs::create_dir_all(dir).unwrap();
    for (stem, volume, centroids) in scans {
        nifti::save_volume(
            &dir.join(format!("{stem}.nii.gz")),
            volume,
            nifti::VoxelType::F32,
        )
        .unwrap();
        save_centroids(&dir.join(format!("{stem}.csv")), centroids).unwrap();
    }
}

/// Recursively collect (relative path, bytes) for determinism comparisons.
#[allow(dead_code)]
pub fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    walk(dir, dir, &mut out);
    out
}
