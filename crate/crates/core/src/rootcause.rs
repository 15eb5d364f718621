//! Per-series severity over a detected interval and elbow selection of the
//! root-cause set.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mcm::SquareMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RootCauseMethod {
    /// Number of broken tiles in the series' row and column.
    Nb,
    /// Sum of absolute residuals over the series' row and column.
    #[default]
    Ae,
}

impl fmt::Display for RootCauseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nb => "nb",
            Self::Ae => "ae",
        })
    }
}

impl FromStr for RootCauseMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nb" => Ok(Self::Nb),
            "ae" => Ok(Self::Ae),
            other => Err(invalid!("unknown root-cause method {other:?}")),
        }
    }
}

/// Element-wise mean of the residuals in a window.
pub fn average_residual(window: &[SquareMatrix]) -> Result<SquareMatrix> {
    if window.is_empty() {
        return Err(invalid!("root-cause window is empty"));
    }
    if window.iter().any(|m| m.n() != window[0].n()) {
        return Err(Error::Shape("residuals in a window differ in size".into()));
    }
    SquareMatrix::mean_of(window).ok_or_else(|| invalid!("root-cause window is empty"))
}

/// Severity of every series from an (averaged) residual. Series `i` sums
/// over the union of row `i` and column `i`, so its diagonal tile counts
/// once.
pub fn score_series(r: &SquareMatrix, method: RootCauseMethod, theta_b: f64) -> Vec<f64> {
    let n = r.n();
    let tile = |i: usize, j: usize| -> f64 {
        let v = r.get(i, j).abs();
        match method {
            RootCauseMethod::Ae => v,
            RootCauseMethod::Nb => {
                if v > theta_b {
                    1.0
                } else {
                    0.0
                }
            }
        }
    };
    (0..n)
        .map(|i| {
            let row: f64 = (0..n).map(|j| tile(i, j)).sum();
            let col: f64 = (0..n).filter(|&k| k != i).map(|k| tile(k, i)).sum();
            row + col
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Elbow {
    /// Number of selected series.
    pub k: usize,
    /// Selected series, by descending score.
    pub selected: Vec<usize>,
    /// Rank (in descending order) of the elbow point.
    pub elbow_index: usize,
    /// `false` when all scores are equal and nothing stands out.
    pub distinguished: bool,
}

/// Descending order of `scores`, ties broken by series index.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Elbow of the descending score curve.
///
/// Ranks and scores are both min-max normalized to `[0, 1]`; the elbow is
/// the point farthest (perpendicular distance) from the chord joining the
/// first and last points, the earliest one on ties. Series scoring strictly
/// above the elbow score are selected.
pub fn select_elbow(scores: &[f64]) -> Result<Elbow> {
    let n = scores.len();
    if n < 2 {
        return Err(invalid!("elbow selection needs at least two scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid!("scores must be finite"));
    }
    let order = descending_order(scores);
    let first = scores[order[0]];
    let last = scores[order[n - 1]];
    if first == last {
        return Ok(Elbow {
            k: 0,
            selected: Vec::new(),
            elbow_index: 0,
            distinguished: false,
        });
    }
    // Chord from (0, 1) to (1, 0): distance |x + y − 1| / √2.
    let mut elbow = 0;
    let mut best = f64::NEG_INFINITY;
    for (rank, &i) in order.iter().enumerate() {
        let x = rank as f64 / (n - 1) as f64;
        let y = (scores[i] - last) / (first - last);
        let d = (x + y - 1.0).abs() / std::f64::consts::SQRT_2;
        if d > best {
            best = d;
            elbow = rank;
        }
    }
    let cut = scores[order[elbow]];
    let selected: Vec<usize> = order.iter().copied().filter(|&i| scores[i] > cut).collect();
    Ok(Elbow {
        k: selected.len(),
        distinguished: !selected.is_empty(),
        selected,
        elbow_index: elbow,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootCauseReport {
    /// Model steps of the detected interval.
    pub steps: Range<usize>,
    /// Raw time points the interval covers.
    pub raw: Range<usize>,
    pub method: RootCauseMethod,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub elbow_index: usize,
    pub distinguished: bool,
    /// Averaged first-channel residual, row-major.
    pub residual: Vec<f64>,
}

/// Scores and selects root causes for one detected interval.
pub fn analyze_window(
    residuals: &[SquareMatrix],
    steps: Range<usize>,
    step: usize,
    method: RootCauseMethod,
    theta_b: f64,
) -> Result<RootCauseReport> {
    let avg = average_residual(residuals)?;
    let scores = score_series(&avg, method, theta_b);
    let elbow = select_elbow(&scores)?;
    Ok(RootCauseReport {
        raw: steps.start * step..steps.end * step,
        steps,
        method,
        scores,
        selected: elbow.selected,
        elbow_index: elbow.elbow_index,
        distinguished: elbow.distinguished,
        residual: avg.data().to_vec(),
    })
}
