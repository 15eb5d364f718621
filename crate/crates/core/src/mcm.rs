//! Multi-channel correlation matrices (MCMs) and stacked model inputs.
//!
//! At every step the series are summarized by `C` matrices, one per window
//! length `w_c`, whose `(i, j)` entry is the mean of `x_i · x_j` over the
//! trailing `w_c` points. Steps are taken every `p` points. A model input for
//! step `t` stacks MCMs from seasonal lags, the `h` previous steps and step
//! `t` itself.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::frame::{format_timestamp, parse_timestamp, SeriesFrame};

pub const MCM_FORMAT_VERSION: u32 = 1;

/// `count` previous occurrences of a seasonal cycle `period` raw points long.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeasonalSlots {
    pub period: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmConfig {
    pub windows: Vec<usize>,
    pub step: usize,
    pub history: usize,
    pub seasonal: Vec<SeasonalSlots>,
    pub smoothing_width: usize,
}

impl Default for McmConfig {
    fn default() -> Self {
        Self {
            windows: vec![5, 10, 30],
            step: 5,
            history: 4,
            seasonal: Vec::new(),
            smoothing_width: 6,
        }
    }
}

impl McmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows[0] == 0 {
            return Err(invalid!("windows must be non-empty and positive"));
        }
        if self.windows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!("windows must be strictly increasing: {:?}", self.windows));
        }
        if self.step == 0 {
            return Err(invalid!("step must be at least 1"));
        }
        if self.smoothing_width == 0 {
            return Err(invalid!("smoothing width must be at least 1"));
        }
        for s in &self.seasonal {
            if s.period < self.step {
                return Err(invalid!(
                    "seasonal period {} is shorter than the step {}",
                    s.period,
                    self.step
                ));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.windows.len()
    }

    pub fn max_window(&self) -> usize {
        self.windows.last().copied().unwrap_or(0)
    }

    /// Slots per model input: `h + 1 + Σ m_i`.
    pub fn slot_count(&self) -> usize {
        self.history + 1 + self.seasonal.iter().map(|s| s.count).sum::<usize>()
    }

    /// Offsets of the centered smoothing window: `(before, after)`.
    pub fn smoothing_span(&self) -> (usize, usize) {
        let before = self.smoothing_width / 2;
        (before, self.smoothing_width - 1 - before)
    }
}

/// Dense `n × n` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "{} values for a {n}x{n} matrix",
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean_of<'a>(mats: impl IntoIterator<Item = &'a SquareMatrix>) -> Option<SquareMatrix> {
        let mut iter = mats.into_iter();
        let first = iter.next()?;
        let mut acc = first.clone();
        let mut count = 1usize;
        for m in iter {
            for (a, b) in acc.data.iter_mut().zip(&m.data) {
                *a += b;
            }
            count += 1;
        }
        for a in &mut acc.data {
            *a /= count as f64;
        }
        Some(acc)
    }
}

/// MCMs for every step, flattened as `[step][i][j][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct McmSequence {
    pub n: usize,
    pub channels: usize,
    pub step: usize,
    pub matrices: Vec<f64>,
    pub timestamps: Vec<NaiveDateTime>,
    pub holiday_bits: Vec<bool>,
    /// First step whose every window lies fully inside the series.
    pub first_valid: usize,
}

impl McmSequence {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn matrix_len(&self) -> usize {
        self.n * self.n * self.channels
    }

    /// One step's `n × n × C` block.
    pub fn at(&self, s: usize) -> &[f64] {
        let len = self.matrix_len();
        &self.matrices[s * len..(s + 1) * len]
    }

    pub fn get(&self, s: usize, i: usize, j: usize, c: usize) -> f64 {
        self.at(s)[(i * self.n + j) * self.channels + c]
    }

    /// Raw points `[s·p, (s+1)·p)` covered by step `s`.
    pub fn raw_range(&self, s: usize) -> std::ops::Range<usize> {
        s * self.step..(s + 1) * self.step
    }

    /// Steps whose raw range lies inside `range`.
    pub fn steps_within(&self, range: std::ops::Range<usize>) -> std::ops::Range<usize> {
        let first = range.start.div_ceil(self.step);
        let last = (range.end / self.step).min(self.len());
        first..last.max(first)
    }

    pub fn write(&self, bin_path: &Path, json_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(bin_path)?);
        for v in &self.matrices {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        let sidecar = McmSidecar {
            version: MCM_FORMAT_VERSION,
            shape: [self.len(), self.n, self.n, self.channels],
            step: self.step,
            first_valid: self.first_valid,
            timestamps: self.timestamps.iter().map(format_timestamp).collect(),
            holiday_bits: self.holiday_bits.iter().map(|&b| u8::from(b)).collect(),
        };
        std::fs::write(json_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read(bin_path: &Path, json_path: &Path) -> Result<Self> {
        let sidecar: McmSidecar = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        if sidecar.version != MCM_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported MCM format version {}",
                sidecar.version
            )));
        }
        let [m, n, n2, c] = sidecar.shape;
        if n != n2 || sidecar.timestamps.len() != m || sidecar.holiday_bits.len() != m {
            return Err(Error::Format("inconsistent MCM sidecar".into()));
        }
        let mut bytes = Vec::new();
        BufReader::new(File::open(bin_path)?).read_to_end(&mut bytes)?;
        if bytes.len() != m * n * n * c * 8 {
            return Err(Error::Format(format!(
                "MCM blob has {} bytes, expected {}",
                bytes.len(),
                m * n * n * c * 8
            )));
        }
        let matrices = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            n,
            channels: c,
            step: sidecar.step,
            matrices,
            timestamps: sidecar
                .timestamps
                .iter()
                .map(|s| parse_timestamp(s))
                .collect::<Result<_>>()?,
            holiday_bits: sidecar.holiday_bits.iter().map(|&b| b != 0).collect(),
            first_valid: sidecar.first_valid,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct McmSidecar {
    version: u32,
    shape: [usize; 4],
    step: usize,
    first_valid: usize,
    timestamps: Vec<String>,
    holiday_bits: Vec<u8>,
}

/// Computes the MCM sequence: `M = floor(T / p)` steps, step `s` ending at
/// raw index `(s + 1)·p − 1`.
///
/// Steps before `first_valid` have windows reaching before the series start;
/// their missing terms count as zero. They are never used as model inputs.
pub fn build_mcm(frame: &SeriesFrame, config: &McmConfig) -> Result<McmSequence> {
    config.validate()?;
    let len = frame.len();
    if len < config.max_window() {
        return Err(invalid!(
            "series of length {len} is shorter than the largest window {}",
            config.max_window()
        ));
    }
    let n = frame.n_series();
    let c_count = config.channels();
    let p = config.step;
    let m = len / p;
    let mut matrices = vec![0.0; m * n * n * c_count];
    let series = frame.values();

    for s in 0..m {
        let end = (s + 1) * p; // exclusive
        let block = &mut matrices[s * n * n * c_count..(s + 1) * n * n * c_count];
        for (c, &w) in config.windows.iter().enumerate() {
            let start = end.saturating_sub(w);
            for i in 0..n {
                let xi = &series[i][start..end];
                for j in i..n {
                    let xj = &series[j][start..end];
                    let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
                    let v = dot / w as f64;
                    block[(i * n + j) * c_count + c] = v;
                    block[(j * n + i) * c_count + c] = v;
                }
            }
        }
    }

    let timestamps = (0..m).map(|s| frame.timestamps()[(s + 1) * p - 1]).collect();
    let holiday_bits = (0..m)
        .map(|s| (s * p..(s + 1) * p).any(|t| frame.is_holiday(t)))
        .collect();
    let first_valid = config.max_window().div_ceil(p).saturating_sub(1);
    Ok(McmSequence {
        n,
        channels: c_count,
        step: p,
        matrices,
        timestamps,
        holiday_bits,
        first_valid,
    })
}

/// Stacked slots for one target step, flattened `[slot][i][j][channel]`,
/// oldest slot first and the target step last.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub step: usize,
    pub slots: Vec<f64>,
    /// `b_i`: `false` drops the slot from attention.
    pub slot_mask: Vec<bool>,
}

impl ModelInput {
    pub fn slot_count(&self) -> usize {
        self.slot_mask.len()
    }

    pub fn slot(&self, k: usize) -> &[f64] {
        let len = self.slots.len() / self.slot_count();
        &self.slots[k * len..(k + 1) * len]
    }

    /// The current step's MCM, which the model reconstructs.
    pub fn target(&self) -> &[f64] {
        self.slot(self.slot_count() - 1)
    }
}

#[derive(Clone, Copy, Debug)]
enum SlotSource {
    Raw(usize),
    Smoothed(usize),
}

/// Which steps `assemble_inputs` can build a complete input for.
pub fn input_steps(seq: &McmSequence, config: &McmConfig) -> Result<std::ops::Range<usize>> {
    config.validate()?;
    let (before, _) = config.smoothing_span();
    let mut need = config.history;
    for s in &config.seasonal {
        if s.count > 0 {
            need = need.max(s.count * seasonal_lag(s, config.step) + before);
        }
    }
    let first = seq.first_valid + need;
    Ok(first.min(seq.len())..seq.len())
}

fn seasonal_lag(s: &SeasonalSlots, step: usize) -> usize {
    ((s.period as f64 / step as f64).round() as usize).max(1)
}

fn slot_sources(t: usize, config: &McmConfig) -> Vec<SlotSource> {
    let mut seasonal: Vec<usize> = config
        .seasonal
        .iter()
        .flat_map(|s| (1..=s.count).map(move |j| j * seasonal_lag(s, config.step)))
        .collect();
    seasonal.sort_unstable_by(|a, b| b.cmp(a));
    let mut out: Vec<SlotSource> = seasonal
        .into_iter()
        .map(|lag| SlotSource::Smoothed(t - lag))
        .collect();
    out.extend((1..=config.history).rev().map(|k| SlotSource::Raw(t - k)));
    out.push(SlotSource::Raw(t));
    out
}

/// Builds one input per step in `steps` (which must lie within
/// [`input_steps`]).
///
/// Seasonal slots average the MCMs in a centered window of
/// `smoothing_width` steps around the seasonal step, clipped to
/// `[first_valid, t)`. With `mask_holidays`, any slot other than the target
/// that touches a holiday step gets `b_i = 0`.
pub fn assemble_inputs(
    seq: &McmSequence,
    config: &McmConfig,
    steps: std::ops::Range<usize>,
    mask_holidays: bool,
) -> Result<Vec<ModelInput>> {
    if seq.step != config.step || seq.channels != config.channels() {
        return Err(invalid!("MCM sequence was built with a different config"));
    }
    let valid = input_steps(seq, config)?;
    if steps.start < valid.start || steps.end > valid.end {
        return Err(invalid!(
            "steps {steps:?} lack full history; valid range is {valid:?}"
        ));
    }
    let (before, after) = config.smoothing_span();
    let mlen = seq.matrix_len();
    let slot_count = config.slot_count();

    let mut inputs = Vec::with_capacity(steps.len());
    for t in steps {
        let mut slots = Vec::with_capacity(slot_count * mlen);
        let mut mask = Vec::with_capacity(slot_count);
        let sources = slot_sources(t, config);
        let last = sources.len() - 1;
        for (k, src) in sources.into_iter().enumerate() {
            let (lo, hi) = match src {
                SlotSource::Raw(s) => (s, s),
                SlotSource::Smoothed(s) => (
                    s.saturating_sub(before).max(seq.first_valid),
                    (s + after).min(t - 1),
                ),
            };
            if lo == hi {
                slots.extend_from_slice(seq.at(lo));
            } else {
                let start = slots.len();
                slots.extend_from_slice(seq.at(lo));
                for s in lo + 1..=hi {
                    for (a, b) in slots[start..].iter_mut().zip(seq.at(s)) {
                        *a += b;
                    }
                }
                let count = (hi - lo + 1) as f64;
                for a in &mut slots[start..] {
                    *a /= count;
                }
            }
            let holiday = (lo..=hi).any(|s| seq.holiday_bits[s]);
            mask.push(!(mask_holidays && holiday && k != last));
        }
        inputs.push(ModelInput {
            step: t,
            slots,
            slot_mask: mask,
        });
    }
    Ok(inputs)
}

/// `R = x[:, :, 0] − x'[:, :, 0]` for `n × n × C` blocks.
pub fn residual_first_channel(
    target: &[f64],
    reconstruction: &[f64],
    n: usize,
    channels: usize,
) -> Result<SquareMatrix> {
    if channels == 0 || target.len() != n * n * channels || reconstruction.len() != target.len()
    {
        return Err(Error::Shape(format!(
            "residual of blocks with {} and {} values for n={n}, C={channels}",
            target.len(),
            reconstruction.len()
        )));
    }
    let data = target
        .iter()
        .zip(reconstruction)
        .step_by(channels)
        .map(|(a, b)| a - b)
        .collect();
    SquareMatrix::new(n, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn frame(values: Vec<Vec<f64>>) -> SeriesFrame {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap();
        SeriesFrame::regular(start, 60, values).unwrap()
    }

    fn cfg(windows: Vec<usize>, step: usize) -> McmConfig {
        McmConfig {
            windows,
            step,
            ..Default::default()
        }
    }

    #[test]
    fn zero_input_gives_zero_matrices() {
        let seq = build_mcm(&frame(vec![vec![0.0; 60]; 3]), &McmConfig::default()).unwrap();
        assert!(seq.matrices.iter().all(|&v| v == 0.0));
        assert_eq!(seq.len(), 12);
    }

    #[test]
    fn constant_ones_give_unit_diagonal() {
        let seq = build_mcm(&frame(vec![vec![1.0; 90]; 2]), &McmConfig::default()).unwrap();
        for s in seq.first_valid..seq.len() {
            for c in 0..3 {
                assert_eq!(seq.get(s, 0, 0, c), 1.0);
                assert_eq!(seq.get(s, 1, 1, c), 1.0);
            }
        }
    }

    #[test]
    fn hand_evaluated_inner_product() {
        let f = frame(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![2.0; 5]]);
        let seq = build_mcm(&f, &cfg(vec![5], 5)).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.get(0, 0, 1, 0), 6.0);
        assert_eq!(seq.get(0, 1, 0, 0), 6.0);
    }

    #[test]
    fn short_series_is_rejected() {
        assert!(build_mcm(&frame(vec![vec![1.0; 20]]), &McmConfig::default()).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(cfg(vec![10, 5], 5).validate().is_err());
        assert!(cfg(vec![5], 0).validate().is_err());
        let mut c = McmConfig::default();
        c.seasonal.push(SeasonalSlots { period: 3, count: 1 });
        assert!(c.validate().is_err());
    }

    #[test]
    fn history_only_gives_five_slots() {
        let f = frame(vec![(0..200).map(|t| (t as f64).sin()).collect(); 2]);
        let c = McmConfig::default();
        let seq = build_mcm(&f, &c).unwrap();
        let range = input_steps(&seq, &c).unwrap();
        assert_eq!(range.start, seq.first_valid + 4);
        let inputs = assemble_inputs(&seq, &c, range, false).unwrap();
        assert!(inputs.iter().all(|x| x.slot_count() == 5));
        let x = &inputs[0];
        assert_eq!(x.target(), seq.at(x.step));
        assert_eq!(x.slot(0), seq.at(x.step - 4));
    }

    fn seasonal_setup(width: usize) -> (McmSequence, McmConfig) {
        let f = frame(
            (0..3)
                .map(|i| (0..600).map(|t| ((t * (i + 1)) as f64 * 0.1).sin()).collect())
                .collect(),
        );
        let c = McmConfig {
            seasonal: vec![SeasonalSlots { period: 100, count: 1 }],
            smoothing_width: width,
            ..Default::default()
        };
        (build_mcm(&f, &c).unwrap(), c)
    }

    #[test]
    fn width_one_smoothing_is_identity() {
        let (seq, c) = seasonal_setup(1);
        let range = input_steps(&seq, &c).unwrap();
        let inputs = assemble_inputs(&seq, &c, range, false).unwrap();
        for x in &inputs {
            assert_eq!(x.slot_count(), 6);
            assert_eq!(x.slot(0), seq.at(x.step - 20));
        }
    }

    #[test]
    fn width_six_smoothing_is_centered_mean() {
        let (seq, c) = seasonal_setup(6);
        let range = input_steps(&seq, &c).unwrap();
        let inputs = assemble_inputs(&seq, &c, range, false).unwrap();
        for x in &inputs {
            let center = x.step - 20;
            let len = seq.matrix_len();
            for e in 0..len {
                let mean: f64 =
                    (center - 3..=center + 2).map(|s| seq.at(s)[e]).sum::<f64>() / 6.0;
                assert!((x.slot(0)[e] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn holiday_slots_are_masked_but_target_is_not() {
        let mut f = frame(vec![vec![1.0; 300]; 2]);
        f.set_holidays((100..105).collect()).unwrap();
        let c = McmConfig::default();
        let seq = build_mcm(&f, &c).unwrap();
        assert!(seq.holiday_bits[20]);
        let inputs = assemble_inputs(&seq, &c, 20..25, true).unwrap();
        // Step 20 is the holiday: as target it stays, as history it is masked.
        assert_eq!(inputs[0].slot_mask, vec![true; 5]);
        assert_eq!(inputs[1].slot_mask, vec![true, true, true, false, true]);
        let unmasked = assemble_inputs(&seq, &c, 20..25, false).unwrap();
        assert!(unmasked.iter().all(|x| x.slot_mask.iter().all(|&b| b)));
    }

    #[test]
    fn steps_without_history_are_rejected() {
        let (seq, c) = seasonal_setup(6);
        assert!(assemble_inputs(&seq, &c, 0..5, false).is_err());
    }

    #[test]
    fn residual_cases() {
        let x: Vec<f64> = (0..27).map(|v| v as f64 * 0.37 - 2.0).collect();
        let r = residual_first_channel(&x, &x, 3, 3).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        let zero = vec![0.0; 27];
        let r = residual_first_channel(&zero, &x, 3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r.get(i, j), -x[(i * 3 + j) * 3]);
            }
        }
        let y: Vec<f64> = (0..27).map(|v| (v as f64).cos()).collect();
        let r = residual_first_channel(&x, &y, 3, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = (i * 3 + j) * 3;
                assert_eq!(r.get(i, j), x[e] - y[e]);
            }
        }
        assert!(residual_first_channel(&x, &y[..26], 3, 3).is_err());
    }

    #[test]
    fn persistence_roundtrip() {
        let mut f = frame(vec![(0..100).map(|t| t as f64 * 0.01).collect(); 2]);
        f.set_holidays((40..50).collect()).unwrap();
        let seq = build_mcm(&f, &McmConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (b, j) = (dir.path().join("m.bin"), dir.path().join("m.json"));
        seq.write(&b, &j).unwrap();
        assert_eq!(McmSequence::read(&b, &j).unwrap(), seq);
    }

    #[test]
    fn step_ranges_follow_raw_ranges() {
        let seq = build_mcm(&frame(vec![vec![1.0; 100]]), &McmConfig::default()).unwrap();
        assert_eq!(seq.raw_range(3), 15..20);
        assert_eq!(seq.steps_within(12..40), 3..8);
    }
}
