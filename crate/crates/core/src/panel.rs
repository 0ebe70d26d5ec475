//! Monthly multi-indicator observation panels and their CSV form.
//!
//! CSV schema: header `date,<name>,<name>,...`, one row per month, dates as
//! `YYYY-MM`, an empty cell marks a missing observation. Values are written
//! with the shortest representation that parses back to the same `f64`.

use std::io::{Read, Write};

use crate::calendar::{check_consecutive, YearMonth};
use crate::error::{Error, Result};

/// Canonical indicator order and labels.
pub const CANONICAL_NAMES: [&str; 4] = ["SII", "JAXA", "Bremen", "Goddard"];

/// Upper sanity bound for a sea-ice extent value, millions of km².
pub const EXTENT_UPPER_BOUND: f64 = 30.0;

/// Resolves an anchor label (`S`, `J`, `B`, `G` or a full indicator name) to
/// a column index of `names`.
pub fn resolve_indicator(names: &[String], label: &str) -> Result<usize> {
    let full = match label {
        "S" => "SII",
        "J" => "JAXA",
        "B" => "Bremen",
        "G" => "Goddard",
        other => other,
    };
    names
        .iter()
        .position(|n| n.eq_ignore_ascii_case(full))
        .ok_or_else(|| Error::Input(format!("unknown indicator {label:?}; panel has {names:?}")))
}

#[derive(Debug, Clone)]
pub struct IndicatorPanel {
    dates: Vec<YearMonth>,
    names: Vec<String>,
    /// Row-major T×N; missing slots hold NaN.
    values: Vec<f64>,
    /// Row-major T×N; `true` marks a missing slot.
    mask: Vec<bool>,
}

/// Equal when dates, names, the missing mask and every observed value match.
impl PartialEq for IndicatorPanel {
    fn eq(&self, other: &Self) -> bool {
        self.dates == other.dates
            && self.names == other.names
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.mask)
                .all(|((a, b), m)| *m || a == b)
    }
}

impl IndicatorPanel {
    /// Builds a panel from per-period rows, `None` marking a missing observation.
    pub fn new(dates: Vec<YearMonth>, names: Vec<String>, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        check_consecutive(&dates)?;
        if names.is_empty() {
            return Err(Error::Input("panel needs at least one indicator".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(',') {
                return Err(Error::Input(format!("invalid indicator name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Input(format!("duplicate indicator name {n:?}")));
            }
        }
        if rows.len() != dates.len() {
            return Err(Error::Input(format!(
                "{} rows for {} dates",
                rows.len(),
                dates.len()
            )));
        }
        let n = names.len();
        let mut values = Vec::with_capacity(rows.len() * n);
        let mut mask = Vec::with_capacity(rows.len() * n);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Input(format!(
                    "row {} has {} entries, expected {n}",
                    dates[t],
                    row.len()
                )));
            }
            for v in row {
                match v {
                    Some(x) if x.is_finite() => {
                        values.push(*x);
                        mask.push(false);
                    }
                    Some(x) => {
                        return Err(Error::Input(format!("non-finite value {x} at {}", dates[t])))
                    }
                    None => {
                        values.push(f64::NAN);
                        mask.push(true);
                    }
                }
            }
        }
        Ok(Self {
            dates,
            names,
            values,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn n_indicators(&self) -> usize {
        self.names.len()
    }

    pub fn dates(&self) -> &[YearMonth] {
        &self.dates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, t: usize, i: usize) -> Option<f64> {
        let k = t * self.names.len() + i;
        (!self.mask[k]).then(|| self.values[k])
    }

    pub fn is_missing(&self, t: usize, i: usize) -> bool {
        self.mask[t * self.names.len() + i]
    }

    pub fn row(&self, t: usize) -> Vec<Option<f64>> {
        (0..self.names.len()).map(|i| self.value(t, i)).collect()
    }

    /// Column indices observed in period `t`.
    pub fn observed(&self, t: usize) -> Vec<usize> {
        (0..self.names.len()).filter(|&i| !self.is_missing(t, i)).collect()
    }

    pub fn observed_count(&self, i: usize) -> usize {
        (0..self.len()).filter(|&t| !self.is_missing(t, i)).count()
    }

    /// Series of indicator `i`.
    pub fn column(&self, i: usize) -> Vec<Option<f64>> {
        (0..self.len()).map(|t| self.value(t, i)).collect()
    }

    /// Copy with the `(t, i)` slot marked missing.
    pub fn with_missing(&self, t: usize, i: usize) -> Self {
        let mut out = self.clone();
        let k = t * self.names.len() + i;
        out.mask[k] = true;
        out.values[k] = f64::NAN;
        out
    }

    /// Checks every observed value lies in `(0, EXTENT_UPPER_BOUND]`.
    pub fn check_extent_range(&self) -> Result<()> {
        for t in 0..self.len() {
            for i in 0..self.n_indicators() {
                if let Some(v) = self.value(t, i) {
                    if !(v > 0.0 && v <= EXTENT_UPPER_BOUND) {
                        return Err(Error::Input(format!(
                            "{} at {} = {v} outside (0, {EXTENT_UPPER_BOUND}]",
                            self.names[i], self.dates[t]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![self.dates[t].to_string()];
            rec.extend(
                (0..self.n_indicators()).map(|i| self.value(t, i).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("date") || header.len() < 2 {
            return Err(Error::Format(
                "panel CSV header must be `date,<indicator>,...`".into(),
            ));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut dates = Vec::new();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("panel CSV: {e}")))?;
            if rec.len() != names.len() + 1 {
                return Err(Error::Format(format!(
                    "panel CSV data row {} has {} fields, expected {}",
                    line + 1,
                    rec.len(),
                    names.len() + 1
                )));
            }
            dates.push(rec[0].parse::<YearMonth>()?);
            let row = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>()
                            .map(Some)
                            .map_err(|_| Error::Format(format!("bad value {cell:?} in panel CSV")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if dates.is_empty() {
            return Err(Error::Format("panel CSV has no data rows".into()));
        }
        IndicatorPanel::new(dates, names, rows)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }
}
