//! Synthetic seasonal multivariate series with injected anomalies and
//! holiday effects.
//!
//! Each series is a sum of noisy sinusoids, one per requested seasonal
//! pattern:
//!
//! ```text
//! S(t, F) = sin((t - t0) / F) + noise_scale * eps_t     (waveform = sin)
//!           cos((t - t0) / F) + noise_scale * eps_t     (waveform = cos)
//! ```
//!
//! `F` is a divisor: one full cycle takes `2πF` steps. Daily and weekly
//! components use `F = steps_per_period / 2π`, i.e. angular frequency
//! `2π / steps_per_period` (`2π/1440` per step for minute data).

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::NaiveDateTime;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::frame::SeriesFrame;

pub const MINUTES_PER_DAY: f64 = 60.0 * 24.0;

/// Angular frequency of daily seasonality for minute data.
pub const F_DAY: f64 = 2.0 * PI / MINUTES_PER_DAY;
/// Angular frequency of weekly seasonality for minute data.
pub const F_WEEK: f64 = 2.0 * PI / (MINUTES_PER_DAY * 7.0);

/// Divisor range for the "random" seasonal component.
pub const RANDOM_PERIOD_RANGE: (f64, f64) = (60.0, 100.0);
pub const PHASE_SHIFT_RANGE: (i64, i64) = (10, 100);
pub const DURATION_RANGE: (usize, usize) = (5, 60);
pub const ROOT_CAUSE_RANGE: (usize, usize) = (2, 6);
/// Shock size in units of the series' training standard deviation.
pub const MAGNITUDE_RANGE: (f64, f64) = (1.5, 4.0);
pub const HOLIDAY_SURGE: f64 = 3.0;
pub const DEFAULT_NOISE_SCALE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeasonKind {
    Random,
    Daily,
    Weekly,
    Monthly,
}

impl FromStr for SeasonKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "daily" => Ok(Self::Daily),
            "weekly" => Ok(Self::Weekly),
            "monthly" => Ok(Self::Monthly),
            other => Err(invalid!("unknown seasonal pattern {other:?}")),
        }
    }
}

impl fmt::Display for SeasonKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Daily => "daily",
            Self::Weekly => "weekly",
            Self::Monthly => "monthly",
        })
    }
}

impl SeasonKind {
    /// Length of one seasonal cycle in samples, for the fixed-period kinds.
    pub fn period_steps(self, steps_per_day: f64) -> Option<f64> {
        match self {
            Self::Random => None,
            Self::Daily => Some(steps_per_day),
            Self::Weekly => Some(steps_per_day * 7.0),
            Self::Monthly => Some(steps_per_day * 30.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    Sin,
    Cos,
}

/// One sinusoidal component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeasonSpec {
    pub kind: SeasonKind,
    /// Divisor `F` of `(t - t0)`.
    pub period: f64,
    pub phase_shift: i64,
    pub waveform: Waveform,
    pub noise_scale: f64,
}

impl SeasonSpec {
    /// Draws phase, waveform and (for `Random`) the divisor.
    pub fn sample(
        kind: SeasonKind,
        steps_per_day: f64,
        noise_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let period = match kind.period_steps(steps_per_day) {
            Some(steps) => steps / (2.0 * PI),
            None => rng.gen_range(RANDOM_PERIOD_RANGE.0..=RANDOM_PERIOD_RANGE.1),
        };
        let phase_shift = rng.gen_range(PHASE_SHIFT_RANGE.0..=PHASE_SHIFT_RANGE.1);
        let waveform = if rng.gen_bool(0.5) {
            Waveform::Cos
        } else {
            Waveform::Sin
        };
        Self {
            kind,
            period,
            phase_shift,
            waveform,
            noise_scale,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(invalid!("period must be positive, got {}", self.period));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(invalid!("noise scale must be non-negative"));
        }
        Ok(())
    }

    /// Noise-free value at (possibly fractional) time `t`.
    pub fn clean_value(&self, t: f64) -> f64 {
        let arg = (t - self.phase_shift as f64) / self.period;
        match self.waveform {
            Waveform::Sin => arg.sin(),
            Waveform::Cos => arg.cos(),
        }
    }
}

/// Mixes a base seed with stream coordinates (splitmix64 finalizer).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `len` samples of one component; the noise stream is fully determined by
/// `seed`.
pub fn generate_component(len: usize, spec: &SeasonSpec, seed: u64) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(invalid!("series length must be positive"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|t| {
            let eps: f64 = rng.sample(StandardNormal);
            spec.clean_value(t as f64) + spec.noise_scale * eps
        })
        .collect())
}

/// Components (spec and noise seed) that make up each generated series.
pub fn component_plan(
    n: usize,
    patterns: &[SeasonKind],
    steps_per_day: f64,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<Vec<(SeasonSpec, u64)>>> {
    if n == 0 {
        return Err(invalid!("need at least one series"));
    }
    if patterns.is_empty() {
        return Err(invalid!("need at least one seasonal pattern"));
    }
    Ok((0..n as u64)
        .map(|i| {
            patterns
                .iter()
                .enumerate()
                .map(|(k, &kind)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i, k as u64));
                    let spec = SeasonSpec::sample(kind, steps_per_day, noise_scale, &mut rng);
                    let noise_seed = derive_seed(seed ^ 0x5EED, i, k as u64);
                    (spec, noise_seed)
                })
                .collect()
        })
        .collect())
}

/// Regular sampling grid of a generated frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub start: NaiveDateTime,
    pub interval_secs: u32,
}

impl Sampling {
    pub fn steps_per_day(&self) -> f64 {
        86_400.0 / f64::from(self.interval_secs)
    }
}

pub fn generate_mts(
    n: usize,
    len: usize,
    patterns: &[SeasonKind],
    sampling: Sampling,
    noise_scale: f64,
    seed: u64,
) -> Result<SeriesFrame> {
    if len == 0 {
        return Err(invalid!("series length must be positive"));
    }
    let plan = component_plan(n, patterns, sampling.steps_per_day(), noise_scale, seed)?;
    let mut values = Vec::with_capacity(n);
    for comps in &plan {
        let mut series = vec![0.0; len];
        for (spec, noise_seed) in comps {
            for (acc, v) in series
                .iter_mut()
                .zip(generate_component(len, spec, *noise_seed)?)
            {
                *acc += v;
            }
        }
        values.push(series);
    }
    SeriesFrame::regular(sampling.start, sampling.interval_secs, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Spike,
    Dip,
}

/// A labeled anomaly window `[start, start + duration)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub start: usize,
    pub duration: usize,
    pub direction: Direction,
    pub root_causes: Vec<usize>,
    /// Shock size in training standard deviations.
    pub magnitude: f64,
    pub split: Split,
}

impl AnomalySpec {
    pub fn end(&self) -> usize {
        self.start + self.duration
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end()
    }
}

/// Train / validation / test partition of the time axis: the first half
/// trains, the rest is split 1:4 into validation and test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLayout {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl SplitLayout {
    pub fn for_length(len: usize) -> Self {
        let half = len / 2;
        let val_end = half + (len - half) / 5;
        Self {
            train: 0..half,
            validation: half..val_end,
            test: val_end..len,
        }
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Validation => self.validation.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// Shocks `count` non-overlapping windows inside `split`'s range.
///
/// Each anomaly adds `±magnitude × sd_i` to its root-cause series over the
/// window, where `sd_i` is series `i`'s standard deviation on the training
/// range of the input frame. Nothing else changes.
pub fn inject_anomalies(
    frame: &SeriesFrame,
    count: usize,
    split: Split,
    layout: &SplitLayout,
    seed: u64,
) -> Result<(SeriesFrame, Vec<AnomalySpec>)> {
    let mut out = frame.clone();
    if count == 0 {
        return Ok((out, Vec::new()));
    }
    let region = layout.range(split);
    if region.end > frame.len() {
        return Err(invalid!("split range {region:?} exceeds frame length"));
    }
    if count * DURATION_RANGE.0 > region.len() {
        return Err(invalid!(
            "cannot place {count} anomalies in a region of {} points",
            region.len()
        ));
    }
    let sds: Vec<f64> = frame.stats(layout.train.clone()).iter().map(|s| s.1).collect();
    let n = frame.n_series();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split as u64 + 1, 0xA40));
    let mut labels: Vec<AnomalySpec> = Vec::with_capacity(count);

    const ATTEMPTS: usize = 10_000;
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..ATTEMPTS {
            let max_dur = DURATION_RANGE.1.min(region.len());
            let duration = rng.gen_range(DURATION_RANGE.0..=max_dur);
            let start = rng.gen_range(region.start..=region.end - duration);
            let clash = labels
                .iter()
                .any(|l| start < l.end() && l.start < start + duration);
            if !clash {
                placed = Some((start, duration));
                break;
            }
        }
        let Some((start, duration)) = placed else {
            return Err(invalid!(
                "could not place {count} non-overlapping anomalies in {region:?}"
            ));
        };
        let direction = if rng.gen_bool(0.5) {
            Direction::Spike
        } else {
            Direction::Dip
        };
        let k_hi = ROOT_CAUSE_RANGE.1.min(n);
        let k_lo = ROOT_CAUSE_RANGE.0.min(k_hi);
        let k = rng.gen_range(k_lo..=k_hi);
        let mut root_causes = sample(&mut rng, n, k).into_vec();
        root_causes.sort_unstable();
        let magnitude = rng.gen_range(MAGNITUDE_RANGE.0..=MAGNITUDE_RANGE.1);
        let sign = match direction {
            Direction::Spike => 1.0,
            Direction::Dip => -1.0,
        };
        for &i in &root_causes {
            let shift = sign * magnitude * sds[i];
            for x in &mut out.series_mut(i)[start..start + duration] {
                *x += shift;
            }
        }
        labels.push(AnomalySpec {
            start,
            duration,
            direction,
            root_causes,
            magnitude,
            split,
        });
    }
    labels.sort_by_key(|l| l.start);
    Ok((out, labels))
}

/// Picks `days` whole days as holidays, half in the training half of the
/// series and half in the remainder. Day 0 is never picked.
pub fn holiday_calendar(
    len: usize,
    steps_per_day: usize,
    days: usize,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    let mut set = BTreeSet::new();
    if days == 0 {
        return Ok(set);
    }
    if steps_per_day == 0 {
        return Err(invalid!("steps_per_day must be positive"));
    }
    let total_days = len / steps_per_day;
    let half_day = total_days / 2;
    let first = 1..half_day;
    let second = half_day..total_days;
    let n_first = days / 2;
    let n_second = days - n_first;
    if first.len() < n_first || second.len() < n_second {
        return Err(invalid!("cannot place {days} holidays in {total_days} days"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x401, 0));
    for (range, k) in [(first, n_first), (second, n_second)] {
        for d in sample(&mut rng, range.len(), k) {
            let day = range.start + d;
            set.extend(day * steps_per_day..(day + 1) * steps_per_day);
        }
    }
    Ok(set)
}

/// Multiplies every series by [`HOLIDAY_SURGE`] on holiday steps and records
/// the calendar on the frame.
pub fn inject_holidays(frame: &SeriesFrame, holidays: &BTreeSet<usize>) -> Result<SeriesFrame> {
    let mut out = frame.clone();
    if let Some(&last) = holidays.iter().next_back() {
        if last >= frame.len() {
            return Err(invalid!("holiday step {last} outside the series"));
        }
    }
    for i in 0..out.n_series() {
        let s = out.series_mut(i);
        for &t in holidays {
            s[t] *= HOLIDAY_SURGE;
        }
    }
    let mut all = frame.holidays().clone();
    all.extend(holidays.iter().copied());
    out.set_holidays(all)?;
    Ok(out)
}

/// Everything needed to synthesize one experiment dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_series: usize,
    pub length: usize,
    pub interval_secs: u32,
    pub start: NaiveDateTime,
    pub patterns: Vec<SeasonKind>,
    pub noise_scale: f64,
    pub train_anomalies: usize,
    pub validation_anomalies: usize,
    pub test_anomalies: usize,
    pub holiday_days: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_series: 10,
            length: 10_080,
            interval_secs: 60,
            start: chrono::NaiveDate::from_ymd_opt(2020, 1, 6)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .expect("valid date"),
            patterns: vec![SeasonKind::Random],
            noise_scale: DEFAULT_NOISE_SCALE,
            train_anomalies: 0,
            validation_anomalies: 3,
            test_anomalies: 10,
            holiday_days: 0,
        }
    }
}

impl DatasetSpec {
    pub fn sampling(&self) -> Sampling {
        Sampling {
            start: self.start,
            interval_secs: self.interval_secs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub frame: SeriesFrame,
    pub layout: SplitLayout,
    pub train_labels: Vec<AnomalySpec>,
    pub validation_labels: Vec<AnomalySpec>,
    pub test_labels: Vec<AnomalySpec>,
}

impl GeneratedDataset {
    pub fn labels(&self) -> impl Iterator<Item = &AnomalySpec> {
        self.train_labels
            .iter()
            .chain(&self.validation_labels)
            .chain(&self.test_labels)
    }

    pub fn labels_for(&self, split: Split) -> &[AnomalySpec] {
        match split {
            Split::Train => &self.train_labels,
            Split::Validation => &self.validation_labels,
            Split::Test => &self.test_labels,
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<GeneratedDataset> {
    let clean = generate_mts(
        spec.n_series,
        spec.length,
        &spec.patterns,
        spec.sampling(),
        spec.noise_scale,
        seed,
    )?;
    let layout = SplitLayout::for_length(spec.length);
    let steps_per_day = spec.sampling().steps_per_day().round() as usize;
    let holidays = holiday_calendar(spec.length, steps_per_day, spec.holiday_days, seed)?;
    let base = inject_holidays(&clean, &holidays)?;
    // Shock sizes are relative to the clean training statistics.
    let (frame, train_labels) =
        inject_anomalies(&base, spec.train_anomalies, Split::Train, &layout, seed)?;
    let (frame, validation_labels) = inject_anomalies(
        &frame,
        spec.validation_anomalies,
        Split::Validation,
        &layout,
        seed,
    )?;
    let (frame, test_labels) =
        inject_anomalies(&frame, spec.test_anomalies, Split::Test, &layout, seed)?;
    Ok(GeneratedDataset {
        frame,
        layout,
        train_labels,
        validation_labels,
        test_labels,
    })
}

/// Label file row: `{start, end, root_causes, split}` with `end` exclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub start: usize,
    pub end: usize,
    pub root_causes: Vec<usize>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
}

impl From<&AnomalySpec> for LabelRecord {
    fn from(a: &AnomalySpec) -> Self {
        Self {
            start: a.start,
            end: a.end(),
            root_causes: a.root_causes.clone(),
            split: a.split,
            direction: Some(a.direction),
            magnitude: Some(a.magnitude),
        }
    }
}

impl From<&LabelRecord> for AnomalySpec {
    fn from(r: &LabelRecord) -> Self {
        Self {
            start: r.start,
            duration: r.end.saturating_sub(r.start),
            direction: r.direction.unwrap_or(Direction::Spike),
            root_causes: r.root_causes.clone(),
            magnitude: r.magnitude.unwrap_or(f64::NAN),
            split: r.split,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn sampling() -> Sampling {
        Sampling {
            start: NaiveDate::from_ymd_opt(2020, 1, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            interval_secs: 60,
        }
    }

    fn pure(waveform: Waveform, period: f64, t0: i64) -> SeasonSpec {
        SeasonSpec {
            kind: SeasonKind::Random,
            period,
            phase_shift: t0,
            waveform,
            noise_scale: 0.0,
        }
    }

    #[test]
    fn sine_peaks_at_quarter_cycle() {
        let s = pure(Waveform::Sin, 1.0, 0);
        assert!((s.clean_value(PI / 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_is_one_at_origin() {
        let s = pure(Waveform::Cos, 1.0, 0);
        assert_eq!(s.clean_value(0.0), 1.0);
        let v = generate_component(3, &s, 9).unwrap();
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn daily_frequency_for_minute_data() {
        assert!((F_DAY - 2.0 * PI / 1440.0).abs() < 1e-18);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SeasonSpec::sample(SeasonKind::Daily, 1440.0, 0.0, &mut rng);
        // One day later the clean signal repeats.
        assert!((s.clean_value(17.0) - s.clean_value(17.0 + 1440.0)).abs() < 1e-9);
        assert!((1.0 / s.period - F_DAY).abs() < 1e-15);
    }

    #[test]
    fn component_rejects_bad_input() {
        let s = pure(Waveform::Sin, 1.0, 0);
        assert!(generate_component(0, &s, 0).is_err());
        assert!(generate_component(5, &pure(Waveform::Sin, 0.0, 0), 0).is_err());
    }

    #[test]
    fn unknown_pattern_is_rejected() {
        assert!("hourly".parse::<SeasonKind>().is_err());
        assert_eq!("Weekly".parse::<SeasonKind>().unwrap(), SeasonKind::Weekly);
    }

    #[test]
    fn full_scale_shape() {
        let f = generate_mts(10, 80_640, &[SeasonKind::Random], sampling(), 0.3, 3).unwrap();
        assert_eq!((f.n_series(), f.len()), (10, 80_640));
    }

    #[test]
    fn single_noiseless_pattern_is_one_shifted_sinusoid() {
        let f = generate_mts(3, 500, &[SeasonKind::Random], sampling(), 0.0, 11).unwrap();
        let plan = component_plan(3, &[SeasonKind::Random], 1440.0, 0.0, 11).unwrap();
        for (i, comps) in plan.iter().enumerate() {
            let spec = &comps[0].0;
            assert!(spec.period >= 60.0 && spec.period <= 100.0);
            assert!((10..=100).contains(&spec.phase_shift));
            for t in 0..500 {
                assert_eq!(f.series(i)[t], spec.clean_value(t as f64));
            }
        }
    }

    #[test]
    fn multi_pattern_series_is_sum_of_components() {
        let kinds = [SeasonKind::Random, SeasonKind::Daily, SeasonKind::Weekly];
        let f = generate_mts(4, 3000, &kinds, sampling(), 0.3, 5).unwrap();
        let plan = component_plan(4, &kinds, 1440.0, 0.3, 5).unwrap();
        for (i, comps) in plan.iter().enumerate() {
            let parts: Vec<Vec<f64>> = comps
                .iter()
                .map(|(s, seed)| generate_component(3000, s, *seed).unwrap())
                .collect();
            for t in 0..3000 {
                let expected = parts[0][t] + parts[1][t] + parts[2][t];
                assert!((f.series(i)[t] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec {
            length: 4000,
            train_anomalies: 3,
            ..Default::default()
        };
        let a = generate_dataset(&spec, 42).unwrap();
        let b = generate_dataset(&spec, 42).unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.test_labels, b.test_labels);
        let c = generate_dataset(&spec, 43).unwrap();
        assert_ne!(a.frame, c.frame);
    }

    #[test]
    fn zero_anomalies_is_identity() {
        let f = generate_mts(2, 100, &[SeasonKind::Random], sampling(), 0.3, 1).unwrap();
        let layout = SplitLayout::for_length(100);
        let (g, labels) = inject_anomalies(&f, 0, Split::Test, &layout, 1).unwrap();
        assert_eq!(f, g);
        assert!(labels.is_empty());
    }

    #[test]
    fn anomalies_only_touch_labelled_cells() {
        let f = generate_mts(10, 10_080, &[SeasonKind::Random], sampling(), 0.3, 8).unwrap();
        let layout = SplitLayout::for_length(f.len());
        let (g, labels) = inject_anomalies(&f, 15, Split::Train, &layout, 8).unwrap();
        assert_eq!(labels.len(), 15);
        for i in 0..10 {
            for t in 0..f.len() {
                let inside = labels
                    .iter()
                    .any(|l| l.root_causes.contains(&i) && l.range().contains(&t));
                let changed = f.series(i)[t] != g.series(i)[t];
                assert_eq!(inside, changed, "series {i} step {t}");
            }
        }
        for (a, b) in labels.iter().zip(labels.iter().skip(1)) {
            assert!(a.end() <= b.start, "windows overlap");
        }
        for l in &labels {
            assert!((5..=60).contains(&l.duration));
            assert!((2..=6).contains(&l.root_causes.len()));
            assert!(layout.train.contains(&l.start) && l.end() <= layout.train.end);
        }
    }

    #[test]
    fn severe_contamination_share_of_train_span() {
        // 15 windows of mean length 32.5 over the 40,320-point training half
        // of a full-scale series is ~1.2% of the span.
        let share: f64 = 15.0 * 32.5 / 40_320.0;
        assert!((share - 0.0119).abs() < 0.0005);
    }

    #[test]
    fn too_many_anomalies_is_an_error() {
        let f = generate_mts(2, 200, &[SeasonKind::Random], sampling(), 0.3, 1).unwrap();
        let layout = SplitLayout::for_length(200);
        assert!(inject_anomalies(&f, 30, Split::Train, &layout, 1).is_err());
    }

    #[test]
    fn holidays_change_only_holiday_steps() {
        let hourly = Sampling {
            interval_secs: 3600,
            ..sampling()
        };
        let len = 3 * 365 * 24;
        assert_eq!(len, 26_280);
        let f = generate_mts(3, len, &[SeasonKind::Daily], hourly, 0.3, 2).unwrap();
        let cal = holiday_calendar(len, 24, 6, 2).unwrap();
        assert_eq!(cal.len(), 6 * 24);
        let g = inject_holidays(&f, &cal).unwrap();
        for i in 0..3 {
            for t in 0..len {
                if f.series(i)[t] != g.series(i)[t] {
                    assert!(cal.contains(&t));
                }
            }
        }
        let half = len / 2;
        assert!(cal.iter().any(|&t| t < half) && cal.iter().any(|&t| t >= half));
        assert_eq!(inject_holidays(&f, &BTreeSet::new()).unwrap(), f);
    }

    #[test]
    fn split_layout_ratios() {
        let l = SplitLayout::for_length(10_080);
        assert_eq!(l.train, 0..5040);
        assert_eq!(l.validation, 5040..6048);
        assert_eq!(l.test, 6048..10_080);
    }
}
