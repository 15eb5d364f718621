//! Multivariate time series container and its CSV/JSON persistence.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use chrono::{NaiveDateTime, TimeDelta};

use crate::error::{invalid, Error, Result};

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// `n` aligned series of length `T`, sampled on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    names: Vec<String>,
    timestamps: Vec<NaiveDateTime>,
    values: Vec<Vec<f64>>,
    holidays: BTreeSet<usize>,
}

impl SeriesFrame {
    pub fn new(
        names: Vec<String>,
        timestamps: Vec<NaiveDateTime>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if names.len() != values.len() {
            return Err(invalid!(
                "{} names for {} series",
                names.len(),
                values.len()
            ));
        }
        if values.is_empty() {
            return Err(invalid!("a frame needs at least one series"));
        }
        if let Some(bad) = values.iter().position(|v| v.len() != timestamps.len()) {
            return Err(invalid!(
                "series {bad} has {} points, expected {}",
                values[bad].len(),
                timestamps.len()
            ));
        }
        Ok(Self {
            names,
            timestamps,
            values,
            holidays: BTreeSet::new(),
        })
    }

    /// Builds a frame on a regular grid starting at `start`.
    pub fn regular(
        start: NaiveDateTime,
        interval_secs: u32,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let len = values.first().map_or(0, Vec::len);
        let step = TimeDelta::seconds(i64::from(interval_secs));
        let timestamps = (0..len).map(|t| start + step * t as i32).collect();
        let names = (0..values.len()).map(|i| format!("series_{i}")).collect();
        Self::new(names, timestamps, values)
    }

    pub fn n_series(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn series(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn series_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn holidays(&self) -> &BTreeSet<usize> {
        &self.holidays
    }

    pub fn set_holidays(&mut self, holidays: BTreeSet<usize>) -> Result<()> {
        if let Some(&last) = holidays.iter().next_back() {
            if last >= self.len() {
                return Err(invalid!("holiday step {last} outside [0, {})", self.len()));
            }
        }
        self.holidays = holidays;
        Ok(())
    }

    pub fn is_holiday(&self, t: usize) -> bool {
        self.holidays.contains(&t)
    }

    /// Per-series mean and (population) standard deviation over `range`.
    /// A zero deviation is reported as 1 so it can be used as a divisor.
    pub fn stats(&self, range: Range<usize>) -> Vec<(f64, f64)> {
        self.values
            .iter()
            .map(|s| {
                let w = &s[range.clone()];
                let n = w.len().max(1) as f64;
                let mean = w.iter().sum::<f64>() / n;
                let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                (mean, if sd > 0.0 { sd } else { 1.0 })
            })
            .collect()
    }

    /// Copy with every series z-scored using statistics from `range`.
    pub fn zscored(&self, range: Range<usize>) -> SeriesFrame {
        let stats = self.stats(range);
        let mut out = self.clone();
        for (s, (mean, sd)) in out.values.iter_mut().zip(stats) {
            for x in s.iter_mut() {
                *x = (*x - mean) / sd;
            }
        }
        out
    }

    /// Writes `timestamp,<name>...` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(self.n_series() + 1);
        for (t, ts) in self.timestamps.iter().enumerate() {
            row.clear();
            row.push(ts.format(TIMESTAMP_FORMAT).to_string());
            row.extend(self.values.iter().map(|s| format!("{}", s[t])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[0] != "timestamp" {
            return Err(Error::Format(format!(
                "{}: expected a `timestamp` column followed by series columns",
                path.display()
            )));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut timestamps = Vec::new();
        let mut values = vec![Vec::new(); names.len()];
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            timestamps.push(parse_timestamp(&rec[0])?);
            for (i, col) in values.iter_mut().enumerate() {
                let v = rec[i + 1].parse::<f64>().map_err(|e| {
                    Error::Format(format!("row {}, column {}: {e}", line + 2, i + 2))
                })?;
                col.push(v);
            }
        }
        Self::new(names, timestamps, values)
    }

    /// Holidays as a JSON list of timestamps.
    pub fn write_holidays_json(&self, path: &Path) -> Result<()> {
        let list: Vec<String> = self
            .holidays
            .iter()
            .map(|&t| self.timestamps[t].format(TIMESTAMP_FORMAT).to_string())
            .collect();
        std::fs::write(path, serde_json::to_string_pretty(&list)?)?;
        Ok(())
    }

    pub fn read_holidays_json(&mut self, path: &Path) -> Result<()> {
        let list: Vec<String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut set = BTreeSet::new();
        for s in list {
            let ts = parse_timestamp(&s)?;
            let idx = self
                .timestamps
                .binary_search(&ts)
                .map_err(|_| Error::Format(format!("holiday {s} is not a frame timestamp")))?;
            set.insert(idx);
        }
        self.set_holidays(set)
    }
}

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map_err(|e| Error::Format(format!("bad timestamp {s:?}: {e}")))
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn start() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2020, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
    }

    #[test]
    fn rejects_ragged_series() {
        let err = SeriesFrame::regular(start(), 60, vec![vec![1.0, 2.0], vec![1.0]]);
        assert!(err.is_err());
    }

    #[test]
    fn csv_and_holiday_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = SeriesFrame::regular(
            start(),
            60,
            vec![vec![0.5, -1.25, 3.0], vec![1e-9, 2.0, 7.5]],
        )
        .unwrap();
        f.set_holidays([1usize, 2].into_iter().collect()).unwrap();
        f.write_csv(&dir.path().join("d.csv")).unwrap();
        f.write_holidays_json(&dir.path().join("h.json")).unwrap();
        let mut g = SeriesFrame::read_csv(&dir.path().join("d.csv")).unwrap();
        g.read_holidays_json(&dir.path().join("h.json")).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn zscore_uses_given_range() {
        let f = SeriesFrame::regular(start(), 60, vec![vec![1.0, 3.0, 100.0]]).unwrap();
        let z = f.zscored(0..2);
        assert_eq!(z.series(0)[..2], [-1.0, 1.0]);
        assert_eq!(z.series(0)[2], 98.0);
    }
}
