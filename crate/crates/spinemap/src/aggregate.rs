//! Dense-to-sparse aggregation: count per-vertebra votes in the fused label
//! map, keep vertebrae whose count reaches `max(3000, 0.4 * R^3)` and emit
//! the componentwise median of their voxel positions as the centroid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidSet;
use crate::dense::DenseLabelMap;
use crate::vertebra::{RadiiTable, VertebraLabel};

/// Minimum voxel count for a vertebra's centroid to be emitted.
pub fn vote_threshold(label: VertebraLabel, radii: &RadiiTable) -> f64 {
    let r = radii.radius_mm(label);
    (0.4 * r.powi(3)).max(3000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertebraVote {
    pub count: usize,
    pub threshold: f64,
    /// Componentwise median of voting voxel positions, resampled frame (mm).
    pub median_mm: [f64; 3],
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VoteSummary {
    pub votes: BTreeMap<VertebraLabel, VertebraVote>,
}

/// Fused map plus everything derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub fused: DenseLabelMap,
    pub summary: VoteSummary,
    pub centroids: CentroidSet,
}

/// Median with the even-count tie resolved to the lower middle value.
fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Aggregate a fused dense map into centroid estimates.
pub fn aggregate_centroids(fused: DenseLabelMap, radii: &RadiiTable) -> PredictionResult {
    let mut positions: BTreeMap<u8, [Vec<f64>; 3]> = BTreeMap::new();
    for ((x, y, z), &v) in fused.labels.indexed_iter() {
        if v == 0 {
            continue;
        }
        let entry = positions
            .entry(v)
            .or_insert_with(|| [Vec::new(), Vec::new(), Vec::new()]);
        entry[0].push(x as f64 * fused.spacing[0]);
        entry[1].push(y as f64 * fused.spacing[1]);
        entry[2].push(z as f64 * fused.spacing[2]);
    }

    let mut summary = VoteSummary::default();
    let mut centroids = CentroidSet::default();
    for (idx, mut coords) in positions {
        let label = match VertebraLabel::from_index(idx) {
            Ok(l) => l,
            Err(_) => continue, // values above 26 cannot occur in a valid map
        };
        let count = coords[0].len();
        let threshold = vote_threshold(label, radii);
        let median_mm = [
            lower_median(&mut coords[0]),
            lower_median(&mut coords[1]),
            lower_median(&mut coords[2]),
        ];
        let accepted = (count as f64) >= threshold;
        if accepted {
            centroids.entries.insert(label, median_mm);
        }
        summary.votes.insert(
            label,
            VertebraVote {
                count,
                threshold,
                median_mm,
                accepted,
            },
        );
    }

    PredictionResult {
        fused,
        summary,
        centroids,
    }
}
