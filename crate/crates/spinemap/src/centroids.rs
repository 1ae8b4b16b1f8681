//! Sparse centroid annotations: one 3D position (mm) per vertebra.
//!
//! The on-disk format is one CSV line per vertebra, `NAME,x,y,z`, coordinates
//! in the original image frame. Positions are converted into the resampled
//! 1mm frame at load time; the unit convention of the raw coordinates lives
//! in exactly one place ([`AnnotationUnits`] + [`to_resampled_frame`]) so it
//! can be flipped by config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vertebra::VertebraLabel;
use crate::volume::Volume;

/// Unit convention of raw annotation coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationUnits {
    /// mm offsets from the volume origin.
    #[default]
    Mm,
    /// voxel indices of the original (pre-resampling) grid.
    Voxel,
}

/// Sparse annotation: vertebra -> position in the resampled 1mm frame
/// (mm offsets from the volume origin, so numerically equal to voxel indices).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CentroidSet {
    pub entries: BTreeMap<VertebraLabel, [f64; 3]>,
}

/// Non-fatal findings recorded while loading an annotation file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub clamped: Vec<(VertebraLabel, [f64; 3])>,
    pub gaps: Vec<String>,
}

impl LoadReport {
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (label, raw) in &self.clamped {
            out.push(format!(
                "centroid {label} at {raw:?} lies outside the volume; clamped"
            ));
        }
        out.extend(self.gaps.iter().cloned());
        out
    }
}

impl CentroidSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, label: VertebraLabel) -> Option<[f64; 3]> {
        self.entries.get(&label).copied()
    }

    pub fn labels(&self) -> impl Iterator<Item = VertebraLabel> + '_ {
        self.entries.keys().copied()
    }

    /// Labels present, sorted by column index (BTreeMap order).
    pub fn sorted(&self) -> Vec<(VertebraLabel, [f64; 3])> {
        self.entries.iter().map(|(&l, &p)| (l, p)).collect()
    }
}

/// Convert one raw annotation coordinate into the resampled 1mm frame.
///
/// This is the single place the dataset's coordinate convention is applied.
fn to_resampled_frame(raw: [f64; 3], units: AnnotationUnits, original_spacing: [f64; 3]) -> [f64; 3] {
    match units {
        AnnotationUnits::Mm => raw,
        AnnotationUnits::Voxel => [
            raw[0] * original_spacing[0],
            raw[1] * original_spacing[1],
            raw[2] * original_spacing[2],
        ],
    }
}

/// Parse a `NAME,x,y,z` annotation file and convert into the frame of the
/// resampled volume `v`. `original_spacing` is the spacing of the scan the
/// annotations were made on (needed for voxel-unit annotations).
///
/// Out-of-bounds positions are clamped and recorded in the report; gaps in
/// the label sequence are a warning, not an error.
pub fn load_centroids(
    path: &Path,
    v: &Volume,
    units: AnnotationUnits,
    original_spacing: [f64; 3],
) -> Result<(CentroidSet, LoadReport)> {
    load_centroids_in(path, v.extent(), v.spacing, units, original_spacing)
}

/// As [`load_centroids`], against a bare grid geometry instead of a volume.
pub fn load_centroids_in(
    path: &Path,
    extent: [usize; 3],
    spacing: [f64; 3],
    units: AnnotationUnits,
    original_spacing: [f64; 3],
) -> Result<(CentroidSet, LoadReport)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_centroids(&text, extent, spacing, units, original_spacing).map_err(|e| match e {
        Error::Other(reason) => Error::BadAnnotation {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

fn parse_centroids(
    text: &str,
    extent: [usize; 3],
    spacing: [f64; 3],
    units: AnnotationUnits,
    original_spacing: [f64; 3],
) -> Result<(CentroidSet, LoadReport)> {
    let mut set = CentroidSet::default();
    let mut report = LoadReport::default();
    let bound = [
        (extent[0] - 1) as f64 * spacing[0],
        (extent[1] - 1) as f64 * spacing[1],
        (extent[2] - 1) as f64 * spacing[2],
    ];

    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Other(format!(
                "line {}: expected NAME,x,y,z, got {line:?}",
                line_no + 1
            )));
        }
        let label = VertebraLabel::from_name(fields[0])?;
        let mut raw = [0.0f64; 3];
        for (k, f) in fields[1..].iter().enumerate() {
            raw[k] = f.parse::<f64>().map_err(|_| {
                Error::Other(format!("line {}: bad coordinate {f:?}", line_no + 1))
            })?;
        }
        if set.entries.contains_key(&label) {
            return Err(Error::DuplicateLabel(label.name().to_string()));
        }
        let pos = to_resampled_frame(raw, units, original_spacing);
        let clamped = [
            pos[0].clamp(0.0, bound[0]),
            pos[1].clamp(0.0, bound[1]),
            pos[2].clamp(0.0, bound[2]),
        ];
        if clamped != pos {
            report.clamped.push((label, pos));
        }
        set.entries.insert(label, clamped);
    }

    // Consecutiveness is a data property worth flagging, not a hard error.
    let labels: Vec<u8> = set.labels().map(|l| l.index()).collect();
    for pair in labels.windows(2) {
        if pair[1] != pair[0] + 1 {
            report.gaps.push(format!(
                "labels {} and {} are not consecutive",
                VertebraLabel::from_index(pair[0]).unwrap(),
                VertebraLabel::from_index(pair[1]).unwrap()
            ));
        }
    }

    Ok((set, report))
}

/// Write a centroid set in the same `NAME,x,y,z` format (resampled frame, mm).
pub fn save_centroids(path: &Path, set: &CentroidSet) -> Result<()> {
    let mut out = String::new();
    for (label, pos) in &set.entries {
        writeln!(out, "{},{},{},{}", label, pos[0], pos[1], pos[2]).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
