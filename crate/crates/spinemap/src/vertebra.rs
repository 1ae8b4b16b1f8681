//! Vertebra labels, anatomical regions and the per-vertebra radii table.
//!
//! Labels are numbered 1..=26 along the column: C1..C7 (1-7), T1..T12 (8-19),
//! L1..L5 (20-24), S1..S2 (25-26). Index 0 is reserved for background in
//! dense label maps and never appears as a [`VertebraLabel`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_VERTEBRAE: usize = 26;

/// One of the 26 vertebrae, identified by its 1-based column index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VertebraLabel(u8);

/// Spinal region a vertebra belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    Cervical,
    Thoracic,
    Lumbar,
    Sacral,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Cervical => "Cervical",
            Region::Thoracic => "Thoracic",
            Region::Lumbar => "Lumbar",
            Region::Sacral => "Sacral",
        }
    }
}

const NAMES: [&str; NUM_VERTEBRAE] = [
    "C1", "C2", "C3", "C4", "C5", "C6", "C7", "T1", "T2", "T3", "T4", "T5", "T6", "T7", "T8",
    "T9", "T10", "T11", "T12", "L1", "L2", "L3", "L4", "L5", "S1", "S2",
];

impl VertebraLabel {
    /// Construct from the 1-based column index (1 = C1 .. 26 = S2).
    pub fn from_index(index: u8) -> Result<Self> {
        if (1..=NUM_VERTEBRAE as u8).contains(&index) {
            Ok(VertebraLabel(index))
        } else {
            Err(Error::UnknownVertebra(format!("index {index}")))
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        NAMES
            .iter()
            .position(|&n| n.eq_ignore_ascii_case(name.trim()))
            .map(|i| VertebraLabel(i as u8 + 1))
            .ok_or_else(|| Error::UnknownVertebra(name.to_string()))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        NAMES[self.0 as usize - 1]
    }

    pub fn region(self) -> Region {
        match self.0 {
            1..=7 => Region::Cervical,
            8..=19 => Region::Thoracic,
            20..=24 => Region::Lumbar,
            _ => Region::Sacral,
        }
    }

    /// All 26 labels in column order.
    pub fn all() -> impl Iterator<Item = VertebraLabel> {
        (1..=NUM_VERTEBRAE as u8).map(VertebraLabel)
    }
}

impl fmt::Display for VertebraLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Debug for VertebraLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VertebraLabel({})", self.name())
    }
}

impl TryFrom<String> for VertebraLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        VertebraLabel::from_name(&s)
    }
}

impl From<VertebraLabel> for String {
    fn from(v: VertebraLabel) -> String {
        v.name().to_string()
    }
}

/// Default disc radius per vertebra, mm, C1 first.
const DEFAULT_RADII_MM: [f64; NUM_VERTEBRAE] = [
    14.0, 15.0, 16.0, 17.0, 17.0, 19.0, 20.0, 19.0, 20.0, 22.0, 24.0, 25.0, 27.0, 29.0, 31.0,
    33.0, 32.0, 33.0, 34.0, 34.0, 37.0, 38.0, 36.0, 34.0, 34.0, 34.0,
];

/// Per-vertebra disc radii, mm. Used both for rasterizing dense labels and
/// for the vote thresholds in centroid aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiiTable {
    radius_mm: [f64; NUM_VERTEBRAE],
}

impl Default for RadiiTable {
    fn default() -> Self {
        RadiiTable {
            radius_mm: DEFAULT_RADII_MM,
        }
    }
}

impl RadiiTable {
    /// Default radii with per-name overrides applied.
    pub fn with_overrides(overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut table = RadiiTable::default();
        for (name, &radius) in overrides {
            let label = VertebraLabel::from_name(name)?;
            if radius.is_nan() || radius <= 0.0 || radius >= 100.0 {
                return Err(Error::InvalidConfig(format!(
                    "radius for {label} must be in (0, 100) mm, got {radius}"
                )));
            }
            table.radius_mm[label.index() as usize - 1] = radius;
        }
        Ok(table)
    }

    pub fn radius_mm(&self, label: VertebraLabel) -> f64 {
        self.radius_mm[label.index() as usize - 1]
    }
}
