//! Residual scoring ("broken tiles") and percentile thresholds.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evalkit::{nab_score, point_metrics, NabProfile};
use crate::frame::format_timestamp;
use crate::mcm::SquareMatrix;

/// Multipliers searched for `β`.
pub const DEFAULT_BETA_GRID: [f64; 12] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0];
pub const DEFAULT_QUANTILE: f64 = 0.996;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    /// Every broken tile counts.
    ContextB,
    /// Only broken tiles in rows/columns that are more than half broken.
    ContextH,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 2] = [ScoreMethod::ContextB, ScoreMethod::ContextH];
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ContextB => "context_b",
            Self::ContextH => "context_h",
        })
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context_b" | "b" => Ok(Self::ContextB),
            "context_h" | "h" => Ok(Self::ContextH),
            other => Err(invalid!("unknown scoring method {other:?}")),
        }
    }
}

/// What the β grid search maximizes on the validation split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    F1,
    Nab,
}

/// `q`-quantile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid!("percentile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid!("quantile {q} outside [0, 1]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// `η_q` over every `|R|` element of the training residuals.
pub fn residual_quantile(residuals: &[SquareMatrix], q: f64) -> Result<f64> {
    let all: Vec<f64> = residuals
        .iter()
        .flat_map(|r| r.data().iter().map(|v| v.abs()))
        .collect();
    percentile(&all, q)
}

/// Number of tiles with `|R_ij| > θ`.
pub fn score_context_b(r: &SquareMatrix, theta: f64) -> usize {
    r.data().iter().filter(|v| v.abs() > theta).count()
}

/// Broken tiles lying in a qualifying row or column (counted once). A line
/// qualifies when strictly more than `n / 2` of its tiles are broken.
pub fn score_context_h(r: &SquareMatrix, theta: f64) -> usize {
    let n = r.n();
    let broken = |i: usize, j: usize| r.get(i, j).abs() > theta;
    let row_ok: Vec<bool> = (0..n)
        .map(|i| 2 * (0..n).filter(|&j| broken(i, j)).count() > n)
        .collect();
    let col_ok: Vec<bool> = (0..n)
        .map(|j| 2 * (0..n).filter(|&i| broken(i, j)).count() > n)
        .collect();
    let mut score = 0;
    for i in 0..n {
        for j in 0..n {
            if broken(i, j) && (row_ok[i] || col_ok[j]) {
                score += 1;
            }
        }
    }
    score
}

pub fn score(method: ScoreMethod, r: &SquareMatrix, theta: f64) -> usize {
    match method {
        ScoreMethod::ContextB => score_context_b(r, theta),
        ScoreMethod::ContextH => score_context_h(r, theta),
    }
}

/// Marks the raw points covered by flagged steps inside `range`. Step `s`
/// covers raw points `s·p .. (s+1)·p`.
pub fn expand_detections(
    steps: &[usize],
    flags: &[bool],
    step: usize,
    range: Range<usize>,
) -> Vec<bool> {
    let mut out = vec![false; range.len()];
    for (&s, _) in steps.iter().zip(flags).filter(|(_, f)| **f) {
        let lo = (s * step).max(range.start);
        let hi = ((s + 1) * step).min(range.end);
        if lo < hi {
            out[lo - range.start..hi - range.start].fill(true);
        }
    }
    out
}

/// Residuals of consecutive model steps over one split.
#[derive(Clone, Debug, Default)]
pub struct StepResiduals {
    pub steps: Vec<usize>,
    pub residuals: Vec<SquareMatrix>,
}

impl StepResiduals {
    pub fn scores(&self, method: ScoreMethod, theta: f64) -> Vec<usize> {
        self.residuals.iter().map(|r| score(method, r, theta)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdOptions {
    pub quantile: f64,
    pub grid: Vec<f64>,
    pub objective: Objective,
    pub nab_profile: NabProfile,
}

impl Default for ThresholdOptions {
    fn default() -> Self {
        Self {
            quantile: DEFAULT_QUANTILE,
            grid: DEFAULT_BETA_GRID.to_vec(),
            objective: Objective::F1,
            nab_profile: NabProfile::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub quantile: f64,
    /// `η`: the quantile of training `|R|`.
    pub eta: f64,
    pub beta_b: f64,
    pub beta_h: f64,
    pub theta_b: f64,
    pub theta_h: f64,
    /// Validation objective at the chosen β (absent on fallback).
    pub validation_b: Option<f64>,
    pub validation_h: Option<f64>,
    /// No validation labels were available, so both β are 1.
    pub fallback: bool,
}

impl ThresholdFit {
    pub fn theta(&self, method: ScoreMethod) -> f64 {
        match method {
            ScoreMethod::ContextB => self.theta_b,
            ScoreMethod::ContextH => self.theta_h,
        }
    }
}

/// Validation objective of flagging `score > 0` steps at threshold `theta`.
#[allow(clippy::too_many_arguments)]
pub fn validation_objective(
    validation: &StepResiduals,
    method: ScoreMethod,
    theta: f64,
    step: usize,
    range: Range<usize>,
    labels: &[Range<usize>],
    options: &ThresholdOptions,
) -> Result<f64> {
    let flags: Vec<bool> = validation
        .scores(method, theta)
        .into_iter()
        .map(|s| s > 0)
        .collect();
    let det = expand_detections(&validation.steps, &flags, step, range.clone());
    Ok(match options.objective {
        Objective::F1 => point_metrics(&det, range.start, labels)?.f1,
        Objective::Nab => nab_score(&det, range.start, labels, &options.nab_profile)?.normalized,
    })
}

/// Fits `η` on training residuals and picks `β_b`, `β_h` on the validation
/// split. `β_h` is restricted to values `≤ β_b` so that `θ_h ≤ θ_b`; ties go
/// to the larger β.
pub fn fit_thresholds(
    train: &[SquareMatrix],
    validation: &StepResiduals,
    step: usize,
    validation_range: Range<usize>,
    labels: &[Range<usize>],
    options: &ThresholdOptions,
) -> Result<ThresholdFit> {
    let eta = residual_quantile(train, options.quantile)?;
    let mut grid = options.grid.clone();
    if grid.is_empty() || grid.iter().any(|b| !(*b > 0.0)) {
        return Err(invalid!("β grid must be non-empty and positive"));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let in_range = labels
        .iter()
        .any(|w| w.start < validation_range.end && validation_range.start < w.end);
    if !in_range || validation.steps.is_empty() {
        log::warn!("no labeled validation anomalies; using β = 1 for both scores");
        return Ok(ThresholdFit {
            quantile: options.quantile,
            eta,
            beta_b: 1.0,
            beta_h: 1.0,
            theta_b: eta,
            theta_h: eta,
            validation_b: None,
            validation_h: None,
            fallback: true,
        });
    }

    let best = |method: ScoreMethod, cap: f64| -> Result<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for &beta in grid.iter().filter(|&&b| b <= cap) {
            let v = validation_objective(
                validation,
                method,
                beta * eta,
                step,
                validation_range.clone(),
                labels,
                options,
            )?;
            if best.is_none_or(|(_, bv)| v >= bv) {
                best = Some((beta, v));
            }
        }
        best.ok_or_else(|| invalid!("empty β grid"))
    };
    let (beta_b, vb) = best(ScoreMethod::ContextB, f64::INFINITY)?;
    let (beta_h, vh) = best(ScoreMethod::ContextH, beta_b)?;
    Ok(ThresholdFit {
        quantile: options.quantile,
        eta,
        beta_b,
        beta_h,
        theta_b: beta_b * eta,
        theta_h: beta_h * eta,
        validation_b: Some(vb),
        validation_h: Some(vh),
        fallback: false,
    })
}

/// Per-step scores and detections of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub method: ScoreMethod,
    pub theta: f64,
    pub steps: Vec<usize>,
    pub timestamps: Vec<NaiveDateTime>,
    pub scores: Vec<usize>,
    pub detections: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    timestamp: String,
    step: usize,
    score: usize,
    detection: u8,
}

impl ScoreTrace {
    /// Scores `residuals` and flags steps with a positive score.
    pub fn new(
        method: ScoreMethod,
        theta: f64,
        residuals: &StepResiduals,
        step_timestamps: &[NaiveDateTime],
    ) -> Result<Self> {
        let timestamps = residuals
            .steps
            .iter()
            .map(|&s| {
                step_timestamps
                    .get(s)
                    .copied()
                    .ok_or_else(|| invalid!("step {s} has no timestamp"))
            })
            .collect::<Result<_>>()?;
        let scores = residuals.scores(method, theta);
        let detections = scores.iter().map(|&s| s > 0).collect();
        Ok(Self {
            method,
            theta,
            steps: residuals.steps.clone(),
            timestamps,
            scores,
            detections,
        })
    }

    /// Raw-point detections over `range`.
    pub fn expand(&self, step: usize, range: Range<usize>) -> Vec<bool> {
        expand_detections(&self.steps, &self.detections, step, range)
    }

    /// Maximal runs of consecutive flagged steps, as step ranges.
    pub fn detected_runs(&self) -> Vec<Range<usize>> {
        let mut runs: Vec<Range<usize>> = Vec::new();
        for (&s, _) in self.steps.iter().zip(&self.detections).filter(|(_, d)| **d) {
            match runs.last_mut() {
                Some(r) if r.end == s => r.end = s + 1,
                _ => runs.push(s..s + 1),
            }
        }
        runs
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for k in 0..self.steps.len() {
            w.serialize(TraceRow {
                timestamp: format_timestamp(&self.timestamps[k]),
                step: self.steps[k],
                score: self.scores[k],
                detection: u8::from(self.detections[k]),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, method: ScoreMethod, theta: f64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut trace = Self {
            method,
            theta,
            steps: Vec::new(),
            timestamps: Vec::new(),
            scores: Vec::new(),
            detections: Vec::new(),
        };
        for row in r.deserialize::<TraceRow>() {
            let row = row?;
            trace
                .timestamps
                .push(crate::frame::parse_timestamp(&row.timestamp)?);
            trace.steps.push(row.step);
            trace.scores.push(row.score);
            trace.detections.push(row.detection != 0);
        }
        Ok(trace)
    }
}
