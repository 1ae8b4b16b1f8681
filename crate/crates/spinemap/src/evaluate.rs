//! Scoring against ground truth: localization error for labels present in
//! both sets, identification correctness per the nearest-centroid 20mm rule,
//! and the pooled per-region report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidSet;
use crate::error::{Error, Result};
use crate::vertebra::{Region, VertebraLabel};

/// A prediction is identified iff the nearest ground-truth centroid carries
/// the same label and lies closer than this, mm.
pub const ID_DISTANCE_MM: f64 = 20.0;

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-scan scoring outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanScore {
    /// Localization error for every label present in both sets, mm.
    pub errors: BTreeMap<VertebraLabel, f64>,
    /// Identification flag for every predicted centroid.
    pub identified: BTreeMap<VertebraLabel, bool>,
    pub truth_labels: BTreeSet<VertebraLabel>,
    pub pred_labels: BTreeSet<VertebraLabel>,
    /// Mean localization error over matched labels; None when nothing matched.
    pub mean_error: Option<f64>,
}

/// Score one scan's predictions against its ground truth (same 1mm frame).
pub fn score_scan(pred: &CentroidSet, truth: &CentroidSet) -> ScanScore {
    let mut errors = BTreeMap::new();
    let mut identified = BTreeMap::new();

    for (&label, &pos) in &pred.entries {
        // Nearest ground-truth centroid; earliest label wins exact ties.
        let nearest = truth
            .entries
            .iter()
            .map(|(&tl, &tp)| (tl, distance(pos, tp)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let flag = match nearest {
            Some((nl, nd)) => nl == label && nd < ID_DISTANCE_MM,
            None => false,
        };
        identified.insert(label, flag);
        if let Some(tp) = truth.position(label) {
            errors.insert(label, distance(pos, tp));
        }
    }

    let mean_error = if errors.is_empty() {
        None
    } else {
        Some(errors.values().sum::<f64>() / errors.len() as f64)
    };

    ScanScore {
        errors,
        identified,
        truth_labels: truth.labels().collect(),
        pred_labels: pred.labels().collect(),
        mean_error,
    }
}

/// Pooled statistics for one region (or all vertebrae).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub truth_count: usize,
    pub pred_count: usize,
    pub correct: usize,
    pub matched: usize,
    /// correct / truth_count, the primary Id rate (missed vertebrae count
    /// as failures).
    pub id_rate: Option<f64>,
    /// correct / pred_count, the alternative denominator, reported alongside.
    pub id_rate_by_predictions: Option<f64>,
    pub mean_mm: Option<f64>,
    /// Population standard deviation of the pooled errors.
    pub std_mm: Option<f64>,
}

impl RegionStats {
    fn from_pool(truth_count: usize, pred_count: usize, correct: usize, errors: &[f64]) -> Self {
        let mean = if errors.is_empty() {
            None
        } else {
            Some(errors.iter().sum::<f64>() / errors.len() as f64)
        };
        let std = mean.map(|m| {
            (errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / errors.len() as f64).sqrt()
        });
        RegionStats {
            truth_count,
            pred_count,
            correct,
            matched: errors.len(),
            id_rate: (truth_count > 0).then(|| correct as f64 / truth_count as f64),
            id_rate_by_predictions: (pred_count > 0).then(|| correct as f64 / pred_count as f64),
            mean_mm: mean,
            std_mm: std,
        }
    }
}

/// Pooled report over all scans, split by spinal region. S1/S2 stay in their
/// own sacral row and in All; they are not folded into Lumbar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub all: RegionStats,
    pub cervical: RegionStats,
    pub thoracic: RegionStats,
    pub lumbar: RegionStats,
    pub sacral: RegionStats,
    /// Pooled errors per vertebra, for the per-vertebra plot.
    pub per_vertebra_errors: BTreeMap<VertebraLabel, Vec<f64>>,
}

impl RegionReport {
    pub fn region(&self, region: Region) -> &RegionStats {
        match region {
            Region::Cervical => &self.cervical,
            Region::Thoracic => &self.thoracic,
            Region::Lumbar => &self.lumbar,
            Region::Sacral => &self.sacral,
        }
    }

    /// Plain-text table with the familiar Region / Id Rate / Mean / Std rows.
    pub fn to_table(&self) -> String {
        fn fmt(stats: &RegionStats, name: &str) -> String {
            let id = stats
                .id_rate
                .map_or("-".to_string(), |r| format!("{:.1}%", 100.0 * r));
            let mean = stats.mean_mm.map_or("-".to_string(), |m| format!("{m:.2}"));
            let std = stats.std_mm.map_or("-".to_string(), |s| format!("{s:.2}"));
            format!("{name:<10} {id:>8} {mean:>8} {std:>8}\n")
        }
        let mut out = String::from("Region      Id Rate     Mean      Std\n");
        out.push_str(&fmt(&self.all, "All"));
        out.push_str(&fmt(&self.cervical, "Cervical"));
        out.push_str(&fmt(&self.thoracic, "Thoracic"));
        out.push_str(&fmt(&self.lumbar, "Lumbar"));
        out.push_str(&fmt(&self.sacral, "Sacral"));
        out
    }
}

/// Pool per-scan scores into the per-region report.
pub fn build_report(scores: &[ScanScore]) -> Result<RegionReport> {
    if scores.is_empty() {
        return Err(Error::Other("no scan scores to report".into()));
    }

    let mut per_vertebra: BTreeMap<VertebraLabel, Vec<f64>> = BTreeMap::new();
    let mut truth_counts: BTreeMap<Region, usize> = BTreeMap::new();
    let mut pred_counts: BTreeMap<Region, usize> = BTreeMap::new();
    let mut correct_counts: BTreeMap<Region, usize> = BTreeMap::new();
    let mut errors: BTreeMap<Region, Vec<f64>> = BTreeMap::new();
    let mut all_truth = 0usize;
    let mut all_pred = 0usize;
    let mut all_correct = 0usize;
    let mut all_errors = Vec::new();

    for score in scores {
        for &label in &score.truth_labels {
            *truth_counts.entry(label.region()).or_default() += 1;
            all_truth += 1;
        }
        for &label in &score.pred_labels {
            *pred_counts.entry(label.region()).or_default() += 1;
            all_pred += 1;
        }
        for (&label, &flag) in &score.identified {
            if flag {
                *correct_counts.entry(label.region()).or_default() += 1;
                all_correct += 1;
            }
        }
        for (&label, &err) in &score.errors {
            per_vertebra.entry(label).or_default().push(err);
            errors.entry(label.region()).or_default().push(err);
            all_errors.push(err);
        }
    }

    let region_stats = |region: Region| {
        RegionStats::from_pool(
            truth_counts.get(&region).copied().unwrap_or(0),
            pred_counts.get(&region).copied().unwrap_or(0),
            correct_counts.get(&region).copied().unwrap_or(0),
            errors.get(&region).map_or(&[][..], |v| &v[..]),
        )
    };

    Ok(RegionReport {
        all: RegionStats::from_pool(all_truth, all_pred, all_correct, &all_errors),
        cervical: region_stats(Region::Cervical),
        thoracic: region_stats(Region::Thoracic),
        lumbar: region_stats(Region::Lumbar),
        sacral: region_stats(Region::Sacral),
        per_vertebra_errors: per_vertebra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(entries: &[(&str, [f64; 3])]) -> CentroidSet {
        let mut s = CentroidSet::default();
        for (name, pos) in entries {
            s.entries
                .insert(VertebraLabel::from_name(name).unwrap(), *pos);
        }
        s
    }

    fn label(name: &str) -> VertebraLabel {
        VertebraLabel::from_name(name).unwrap()
    }

    #[test]
    fn identical_sets_are_perfect() {
        let truth = set(&[("T3", [1.0, 2.0, 3.0]), ("T4", [1.0, 2.0, 30.0])]);
        let score = score_scan(&truth, &truth);
        assert!(score.identified.values().all(|&f| f));
        assert!(score.errors.values().all(|&e| e == 0.0));
        assert_eq!(score.mean_error, Some(0.0));

        let report = build_report(&[score]).unwrap();
        assert_eq!(report.all.id_rate, Some(1.0));
        assert_eq!(report.all.mean_mm, Some(0.0));
        assert_eq!(report.all.std_mm, Some(0.0));
    }

    #[test]
    fn mislocated_prediction_fails_nearest_rule() {
        // L1 predicted 25mm away from its truth, 5mm from L2's truth: the
        // nearest centroid has the wrong label, so identification fails even
        // though the matched-label error is recorded.
        let truth = set(&[("L1", [0.0, 0.0, 0.0]), ("L2", [0.0, 0.0, 30.0])]);
        let pred = set(&[("L1", [0.0, 0.0, 25.0])]);
        let score = score_scan(&pred, &truth);
        assert_eq!(score.errors[&label("L1")], 25.0);
        assert!(!score.identified[&label("L1")]);

        let report = build_report(&[score]).unwrap();
        assert_eq!(report.all.truth_count, 2);
        assert_eq!(report.all.correct, 0);
        assert_eq!(report.all.id_rate, Some(0.0));
    }

    #[test]
    fn nineteen_mm_is_inside_the_rule() {
        let truth = set(&[("C3", [0.0, 0.0, 0.0])]);
        let pred = set(&[("C3", [0.0, 0.0, 19.0])]);
        let score = score_scan(&pred, &truth);
        assert_eq!(score.errors[&label("C3")], 19.0);
        assert!(score.identified[&label("C3")]);

        // Exactly 20mm is out ("less than 20mm").
        let pred = set(&[("C3", [0.0, 0.0, 20.0])]);
        let score = score_scan(&pred, &truth);
        assert!(!score.identified[&label("C3")]);
    }

    #[test]
    fn prediction_absent_from_truth_is_failure_excluded_from_distances() {
        let truth = set(&[("T1", [0.0, 0.0, 0.0])]);
        let pred = set(&[("T1", [1.0, 0.0, 0.0]), ("T2", [0.0, 0.0, 25.0])]);
        let score = score_scan(&pred, &truth);
        assert_eq!(score.errors.len(), 1);
        assert!(!score.errors.contains_key(&label("T2")));
        assert!(!score.identified[&label("T2")]);
        assert!(score.identified[&label("T1")]);
    }

    #[test]
    fn pooled_mean_and_population_std() {
        // Two scans with errors {3, 5} and {7}: All mean 5.0, population std
        // of {3, 5, 7} = sqrt(8/3).
        let truth_a = set(&[("T5", [0.0; 3]), ("T6", [0.0, 0.0, 40.0])]);
        let pred_a = set(&[("T5", [3.0, 0.0, 0.0]), ("T6", [0.0, 5.0, 40.0])]);
        let truth_b = set(&[("L2", [0.0; 3])]);
        let pred_b = set(&[("L2", [0.0, 0.0, 7.0])]);
        let scores = vec![score_scan(&pred_a, &truth_a), score_scan(&pred_b, &truth_b)];
        let report = build_report(&scores).unwrap();
        assert_eq!(report.all.mean_mm, Some(5.0));
        let expected_std = (8.0f64 / 3.0).sqrt();
        assert!((report.all.std_mm.unwrap() - expected_std).abs() < 1e-12);
        assert_eq!(report.all.matched, 3);
    }

    #[test]
    fn regions_split_and_sacral_not_in_lumbar() {
        let truth = set(&[
            ("C1", [0.0; 3]),
            ("T1", [0.0, 0.0, 40.0]),
            ("L5", [0.0, 0.0, 80.0]),
            ("S1", [0.0, 0.0, 120.0]),
        ]);
        let score = score_scan(&truth, &truth);
        let report = build_report(&[score]).unwrap();
        assert_eq!(report.cervical.truth_count, 1);
        assert_eq!(report.thoracic.truth_count, 1);
        assert_eq!(report.lumbar.truth_count, 1);
        assert_eq!(report.sacral.truth_count, 1);
        assert_eq!(report.all.truth_count, 4);
        // Empty regions render as dashes, not zeros.
        let table = report.to_table();
        assert!(table.contains("Sacral"));
    }

    #[test]
    fn empty_scores_error() {
        assert!(build_report(&[]).is_err());
    }

    #[test]
    fn removing_a_correct_prediction_never_raises_id_rate() {
        // The denominator is the ground-truth count, so a dropped correct
        // prediction only loses a numerator hit.
        let truth = set(&[
            ("T5", [0.0; 3]),
            ("T6", [0.0, 0.0, 40.0]),
            ("T7", [0.0, 0.0, 80.0]),
        ]);
        let full = set(&[
            ("T5", [1.0, 0.0, 0.0]),
            ("T6", [0.0, 1.0, 40.0]),
            ("T7", [0.0, 0.0, 81.0]),
        ]);
        let mut reduced = full.clone();
        reduced.entries.remove(&label("T6"));
        let rate_full = build_report(&[score_scan(&full, &truth)])
            .unwrap()
            .all
            .id_rate
            .unwrap();
        let rate_reduced = build_report(&[score_scan(&reduced, &truth)])
            .unwrap()
            .all
            .id_rate
            .unwrap();
        assert!(rate_reduced <= rate_full);
        assert_eq!(rate_full, 1.0);
        assert!((rate_reduced - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn distance_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let a = [
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            ];
            let b = [
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            ];
            let truth = set(&[("T7", b)]);
            let pred = set(&[("T7", a)]);
            let score = score_scan(&pred, &truth);
            let oracle = (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>().sqrt();
            assert!((score.errors[&label("T7")] - oracle).abs() < 1e-12);
        }
    }

    proptest! {
        /// Rigid translation applied to both sets changes nothing.
        #[test]
        fn translation_invariance(
            dx in -100.0f64..100.0, dy in -100.0f64..100.0, dz in -100.0f64..100.0,
        ) {
            let truth = set(&[("T5", [10.0, 10.0, 10.0]), ("T6", [10.0, 10.0, 45.0])]);
            let pred = set(&[("T5", [12.0, 10.0, 10.0]), ("T6", [10.0, 14.0, 45.0])]);
            let shift = |s: &CentroidSet| {
                let mut out = CentroidSet::default();
                for (&l, &p) in &s.entries {
                    out.entries.insert(l, [p[0] + dx, p[1] + dy, p[2] + dz]);
                }
                out
            };
            let base = score_scan(&pred, &truth);
            let moved = score_scan(&shift(&pred), &shift(&truth));
            prop_assert_eq!(&base.identified, &moved.identified);
            for (l, e) in &base.errors {
                prop_assert!((moved.errors[l] - e).abs() < 1e-9);
            }
        }
    }
}
