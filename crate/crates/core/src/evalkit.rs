//! Point-wise detection metrics, the NAB score and root-cause recall.
//!
//! Detections are a boolean per raw time point over an evaluated range that
//! starts at `offset`; label windows are half-open raw index ranges.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub counts: Confusion,
}

/// Label windows clipped to the evaluated range, sorted by start.
fn clip_windows(len: usize, offset: usize, windows: &[Range<usize>]) -> Vec<Range<usize>> {
    let end = offset + len;
    let mut out: Vec<Range<usize>> = windows
        .iter()
        .filter_map(|w| {
            let s = w.start.max(offset);
            let e = w.end.min(end);
            (s < e).then(|| s - offset..e - offset)
        })
        .collect();
    out.sort_by_key(|w| w.start);
    out
}

/// Precision, recall, F1 and false-positive rate, counted per point.
///
/// An empty denominator yields 0 (precision with no detections, recall with
/// no anomalous points, FPR with no normal points).
pub fn point_metrics(
    detections: &[bool],
    offset: usize,
    windows: &[Range<usize>],
) -> Result<PointMetrics> {
    if detections.is_empty() {
        return Err(invalid!("empty evaluation range"));
    }
    let mut anomalous = vec![false; detections.len()];
    for w in clip_windows(detections.len(), offset, windows) {
        anomalous[w].fill(true);
    }
    let mut c = Confusion::default();
    for (&d, &a) in detections.iter().zip(&anomalous) {
        match (d, a) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PointMetrics {
        precision,
        recall,
        f1,
        fpr: ratio(c.fp, c.fp + c.tn),
        counts: c,
    })
}

/// NAB weights; the false-positive and false-negative weights are
/// magnitudes (they enter the score negatively).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NabProfile {
    pub true_positive: f64,
    pub false_positive: f64,
    pub false_negative: f64,
}

impl Default for NabProfile {
    /// The standard profile.
    fn default() -> Self {
        Self {
            true_positive: 1.0,
            false_positive: 0.11,
            false_negative: 1.0,
        }
    }
}

/// `2 / (1 + e^{5y}) − 1`: about +0.987 at `y = −1`, 0 at `y = 0`, tending
/// to −1 for large `y`.
pub fn scaled_sigmoid(y: f64) -> f64 {
    2.0 / (1.0 + (5.0 * y).exp()) - 1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NabScore {
    pub raw: f64,
    /// Raw score of a detector that fires on the first point of every window.
    pub perfect: f64,
    /// `raw / perfect`; 1 for the perfect detector, negative when misses
    /// dominate.
    pub normalized: f64,
}

/// NAB-style score.
///
/// Only the first detection inside a window earns credit, scaled by its
/// relative position `y = −(end − i) / len` (−1 at the window start). A
/// detection after a window is penalized by `A_FP · σ(y)` with
/// `y = (i − (end − 1)) / len` of the preceding window; one before any
/// window costs the full `A_FP`. Each missed window costs `A_FN`.
pub fn nab_score(
    detections: &[bool],
    offset: usize,
    windows: &[Range<usize>],
    profile: &NabProfile,
) -> Result<NabScore> {
    let mut sorted: Vec<Range<usize>> = windows.to_vec();
    sorted.sort_by_key(|w| w.start);
    if sorted.iter().any(|w| w.is_empty()) {
        return Err(invalid!("empty label window"));
    }
    if sorted.windows(2).any(|p| p[1].start < p[0].end) {
        return Err(invalid!("label windows overlap"));
    }
    let clipped = clip_windows(detections.len(), offset, &sorted);

    let mut raw = 0.0;
    let mut next = 0usize;
    let mut previous: Option<&Range<usize>> = None;
    let mut credited = vec![false; clipped.len()];
    for (i, _) in detections.iter().enumerate().filter(|(_, d)| **d) {
        while next < clipped.len() && clipped[next].end <= i {
            previous = Some(&clipped[next]);
            next += 1;
        }
        match clipped.get(next) {
            Some(w) if w.contains(&i) => {
                if !credited[next] {
                    credited[next] = true;
                    let len = w.len() as f64;
                    let y = -((w.end - i) as f64) / len;
                    raw += profile.true_positive * scaled_sigmoid(y);
                }
            }
            _ => {
                raw += match previous {
                    Some(w) => {
                        let y = (i + 1 - w.end) as f64 / w.len() as f64;
                        profile.false_positive * scaled_sigmoid(y)
                    }
                    None => -profile.false_positive,
                };
            }
        }
    }
    raw -= profile.false_negative * credited.iter().filter(|c| !**c).count() as f64;

    let perfect = profile.true_positive * scaled_sigmoid(-1.0) * clipped.len() as f64;
    let normalized = if perfect > 0.0 { raw / perfect } else { 0.0 };
    Ok(NabScore {
        raw,
        perfect,
        normalized,
    })
}

/// A root-cause prediction for one detected interval (raw indices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootCausePrediction {
    pub window: Range<usize>,
    pub selected: Vec<usize>,
}

/// A ground-truth anomaly window and its root-cause series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootCauseTruth {
    pub window: Range<usize>,
    pub root_causes: Vec<usize>,
}

/// Mean over predictions that overlap a labeled window of
/// `|predicted ∩ true| / |true|`. `None` when nothing matches.
pub fn root_cause_recall(
    predictions: &[RootCausePrediction],
    truth: &[RootCauseTruth],
) -> Option<f64> {
    let mut total = 0.0;
    let mut matched = 0usize;
    for p in predictions {
        let overlap = |t: &&RootCauseTruth| t.window.start < p.window.end && p.window.start < t.window.end;
        let Some(t) = truth.iter().find(overlap) else {
            continue;
        };
        if t.root_causes.is_empty() {
            continue;
        }
        let truth_set: BTreeSet<usize> = t.root_causes.iter().copied().collect();
        let hits = p
            .selected
            .iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|s| truth_set.contains(s))
            .count();
        total += hits as f64 / truth_set.len() as f64;
        matched += 1;
    }
    (matched > 0).then(|| total / matched as f64)
}

/// Everything reported for one detection trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub nab_score: f64,
    pub root_cause_recall: Option<f64>,
    pub counts: Confusion,
}

impl EvalReport {
    pub fn new(points: &PointMetrics, nab: &NabScore, root_cause_recall: Option<f64>) -> Self {
        Self {
            precision: points.precision,
            recall: points.recall,
            f1: points.f1,
            fpr: points.fpr,
            nab_score: nab.normalized,
            root_cause_recall,
            counts: points.counts,
        }
    }

    /// Field-wise mean; root-cause recall averages the runs that have one.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let rc: Vec<f64> = reports.iter().filter_map(|r| r.root_cause_recall).collect();
        let sum_counts = reports.iter().fold(Confusion::default(), |a, r| Confusion {
            tp: a.tp + r.counts.tp,
            fp: a.fp + r.counts.fp,
            fn_: a.fn_ + r.counts.fn_,
            tn: a.tn + r.counts.tn,
        });
        Some(EvalReport {
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f1: avg(|r| r.f1),
            fpr: avg(|r| r.fpr),
            nab_score: avg(|r| r.nab_score),
            root_cause_recall: (!rc.is_empty()).then(|| rc.iter().sum::<f64>() / rc.len() as f64),
            counts: sum_counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marks(len: usize, at: &[usize]) -> Vec<bool> {
        let mut d = vec![false; len];
        for &i in at {
            d[i] = true;
        }
        d
    }

    #[test]
    fn perfect_and_null_detectors() {
        let windows = [3..6, 10..12];
        let perfect = marks(15, &[3, 4, 5, 10, 11]);
        let m = point_metrics(&perfect, 0, &windows).unwrap();
        assert_eq!((m.precision, m.recall, m.fpr), (1.0, 1.0, 0.0));
        let m = point_metrics(&[false; 15], 0, &windows).unwrap();
        assert_eq!((m.recall, m.fpr), (0.0, 0.0));
    }

    #[test]
    fn hand_counted_confusion() {
        // Window 2..6: detected at 2, 3, 4 (TP), 5 missed (FN); FP at 8.
        let d = marks(10, &[2, 3, 4, 8]);
        let m = point_metrics(&d, 0, &[2..6]).unwrap();
        assert_eq!(
            m.counts,
            Confusion {
                tp: 3,
                fp: 1,
                fn_: 1,
                tn: 5
            }
        );
        assert!((m.precision - 0.75).abs() < 1e-12 && (m.recall - 0.75).abs() < 1e-12);
        assert!((m.fpr - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn translation_invariance() {
        let d = marks(10, &[2, 3, 4, 8]);
        let a = point_metrics(&d, 0, &[2..6]).unwrap();
        let b = point_metrics(&d, 1000, &[1002..1006]).unwrap();
        assert_eq!(a, b);
        let na = nab_score(&d, 0, &[2..6], &NabProfile::default()).unwrap();
        let nb = nab_score(&d, 1000, &[1002..1006], &NabProfile::default()).unwrap();
        assert_eq!(na, nb);
    }

    #[test]
    fn nab_anchors() {
        let windows = [5..10, 20..30];
        let p = NabProfile::default();
        let perfect = nab_score(&marks(40, &[5, 20]), 0, &windows, &p).unwrap();
        assert!((perfect.normalized - 1.0).abs() < 1e-12);
        let null = nab_score(&[false; 40], 0, &windows, &p).unwrap();
        assert!(null.normalized < 0.0);
        assert!((null.raw + 2.0).abs() < 1e-12);
    }

    #[test]
    fn nab_credit_decreases_with_delay() {
        let p = NabProfile::default();
        let score = |at: usize| nab_score(&marks(30, &[at]), 0, &[10..20], &p).unwrap().raw;
        assert!(score(10) > score(15) && score(15) > score(19));
        assert!(score(19) > 0.0);
    }

    #[test]
    fn nab_false_positives() {
        let p = NabProfile::default();
        let base = nab_score(&marks(30, &[10]), 0, &[10..20], &p).unwrap().raw;
        let early_fp = nab_score(&marks(30, &[2, 10]), 0, &[10..20], &p).unwrap().raw;
        assert!((base - early_fp - 0.11).abs() < 1e-12);
        // Right after the window the penalty is small, far after it nears A_FP.
        let near = nab_score(&marks(60, &[10, 20]), 0, &[10..20], &p).unwrap().raw;
        let far = nab_score(&marks(60, &[10, 59]), 0, &[10..20], &p).unwrap().raw;
        assert!(base > near && near > far && far > base - 0.11);
        // Repeated detections in a credited window cost nothing.
        let repeat = nab_score(&marks(30, &[10, 11, 12]), 0, &[10..20], &p).unwrap().raw;
        assert_eq!(repeat, base);
    }

    #[test]
    fn nab_rejects_overlap() {
        let p = NabProfile::default();
        assert!(nab_score(&[false; 10], 0, &[1..5, 4..8], &p).is_err());
    }

    #[test]
    fn root_cause_recall_cases() {
        let truth = vec![
            RootCauseTruth {
                window: 10..20,
                root_causes: vec![1, 2, 3, 4],
            },
            RootCauseTruth {
                window: 40..50,
                root_causes: vec![0, 5],
            },
            RootCauseTruth {
                window: 70..80,
                root_causes: vec![7, 8, 9],
            },
        ];
        let pred = |w: Range<usize>, s: &[usize]| RootCausePrediction {
            window: w,
            selected: s.to_vec(),
        };
        let all = [
            pred(12..15, &[1, 2]),
            pred(45..52, &[0, 5, 6]),
            pred(75..76, &[9]),
            pred(100..110, &[1]),
        ];
        // (2/4 + 2/2 + 1/3) / 3
        let r = root_cause_recall(&all, &truth).unwrap();
        assert!((r - (0.5 + 1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
        assert_eq!(root_cause_recall(&all[3..], &truth), None);
    }

    #[test]
    fn extra_false_positive_never_helps() {
        let windows = [5..10];
        let d = marks(30, &[6, 7]);
        let m = point_metrics(&d, 0, &windows).unwrap();
        let n = nab_score(&d, 0, &windows, &NabProfile::default()).unwrap();
        for extra in [0, 12, 29] {
            let mut e = d.clone();
            e[extra] = true;
            assert!(point_metrics(&e, 0, &windows).unwrap().precision <= m.precision);
            assert!(nab_score(&e, 0, &windows, &NabProfile::default()).unwrap().raw <= n.raw);
        }
    }
}
