//! Parsing of the four provider files into monthly series and their
//! alignment into an [`IndicatorPanel`].
//!
//! Layouts are described by [`SourceFormat`]; the presets document the
//! pinned file vintages (see `docs/data-sources.md`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::panel::{IndicatorPanel, CANONICAL_NAMES, EXTENT_UPPER_BOUND};

/// Daily sources need at least this many valid days for a monthly mean.
pub const MIN_DAYS_PER_MONTH: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    Comma,
    Whitespace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Monthly,
    Daily,
}

/// Zero-based column positions of the date fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DateLayout {
    /// One `YYYY-MM` field.
    IsoMonth { col: usize },
    YearMonth { year: usize, month: usize },
    YearMonthDay { year: usize, month: usize, day: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFormat {
    pub delimiter: Delimiter,
    /// Every data row must have exactly this many fields.
    pub columns: usize,
    pub header_lines: usize,
    pub comment_prefix: Option<String>,
    pub date: DateLayout,
    pub value_col: usize,
    pub frequency: Frequency,
    /// Raw values treated as missing.
    pub sentinels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    /// One of [`CANONICAL_NAMES`].
    pub name: String,
    pub format: SourceFormat,
    /// Multiplier taking raw values to millions of km².
    pub unit_scale: f64,
    /// Unparseable rows tolerated before parsing fails.
    pub max_bad_rows: usize,
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if !CANONICAL_NAMES.contains(&self.name.as_str()) {
            return Err(Error::Input(format!("unknown source name {:?}", self.name)));
        }
        if !(self.unit_scale > 0.0) || !self.unit_scale.is_finite() {
            return Err(Error::Input(format!("unit_scale must be positive, got {}", self.unit_scale)));
        }
        let f = &self.format;
        let mut cols = vec![f.value_col];
        match f.date {
            DateLayout::IsoMonth { col } => cols.push(col),
            DateLayout::YearMonth { year, month } => cols.extend([year, month]),
            DateLayout::YearMonthDay { year, month, day } => cols.extend([year, month, day]),
        }
        if cols.iter().any(|&c| c >= f.columns) {
            return Err(Error::Input(format!("{}: column index beyond {} columns", self.name, f.columns)));
        }
        let daily = matches!(f.date, DateLayout::YearMonthDay { .. });
        if daily != (f.frequency == Frequency::Daily) {
            return Err(Error::Input(format!("{}: date layout does not match frequency", self.name)));
        }
        Ok(())
    }

    /// NSIDC Sea Ice Index monthly table: `year, mo, data-type, region, extent, area`.
    pub fn sii_monthly() -> Self {
        SourceSpec {
            name: "SII".into(),
            format: SourceFormat {
                delimiter: Delimiter::Comma,
                columns: 6,
                header_lines: 1,
                comment_prefix: None,
                date: DateLayout::YearMonth { year: 0, month: 1 },
                value_col: 4,
                frequency: Frequency::Monthly,
                sentinels: vec![-9999.0],
            },
            unit_scale: 1.0,
            max_bad_rows: 0,
        }
    }

    /// NSIDC Sea Ice Index daily table:
    /// `Year, Month, Day, Extent, Missing, Source Data`, two header lines.
    pub fn sii_daily() -> Self {
        SourceSpec {
            name: "SII".into(),
            format: SourceFormat {
                delimiter: Delimiter::Comma,
                columns: 6,
                header_lines: 2,
                comment_prefix: None,
                date: DateLayout::YearMonthDay { year: 0, month: 1, day: 2 },
                value_col: 3,
                frequency: Frequency::Daily,
                sentinels: vec![-9999.0],
            },
            unit_scale: 1.0,
            max_bad_rows: 0,
        }
    }

    /// JAXA daily extent: `MM, DD, YYYY, extent` in km², `-9999` missing.
    pub fn jaxa_daily() -> Self {
        SourceSpec {
            name: "JAXA".into(),
            format: SourceFormat {
                delimiter: Delimiter::Comma,
                columns: 4,
                header_lines: 0,
                comment_prefix: None,
                date: DateLayout::YearMonthDay { year: 2, month: 0, day: 1 },
                value_col: 3,
                frequency: Frequency::Daily,
                sentinels: vec![-9999.0],
            },
            unit_scale: 1e-6,
            max_bad_rows: 0,
        }
    }

    /// Bremen monthly extent: whitespace `YYYY MM extent` in km², `#` comments.
    pub fn bremen_monthly() -> Self {
        SourceSpec {
            name: "Bremen".into(),
            format: SourceFormat {
                delimiter: Delimiter::Whitespace,
                columns: 3,
                header_lines: 0,
                comment_prefix: Some("#".into()),
                date: DateLayout::YearMonth { year: 0, month: 1 },
                value_col: 2,
                frequency: Frequency::Monthly,
                sentinels: vec![-1.0],
            },
            unit_scale: 1e-6,
            max_bad_rows: 0,
        }
    }

    /// Goddard bootstrap monthly extent: whitespace `YYYY MM extent area` in
    /// millions of km², one header line, `-999` missing.
    pub fn goddard_monthly() -> Self {
        SourceSpec {
            name: "Goddard".into(),
            format: SourceFormat {
                delimiter: Delimiter::Whitespace,
                columns: 4,
                header_lines: 1,
                comment_prefix: None,
                date: DateLayout::YearMonth { year: 0, month: 1 },
                value_col: 2,
                frequency: Frequency::Monthly,
                sentinels: vec![-999.0],
            },
            unit_scale: 1.0,
            max_bad_rows: 0,
        }
    }

    pub const PRESETS: [&'static str; 5] = ["sii-monthly", "sii-daily", "jaxa-daily", "bremen-monthly", "goddard-monthly"];

    pub fn preset(key: &str) -> Result<Self> {
        match key.to_ascii_lowercase().as_str() {
            "sii-monthly" => Ok(Self::sii_monthly()),
            "sii-daily" => Ok(Self::sii_daily()),
            "jaxa-daily" => Ok(Self::jaxa_daily()),
            "bremen-monthly" => Ok(Self::bremen_monthly()),
            "goddard-monthly" => Ok(Self::goddard_monthly()),
            _ => Err(Error::Input(format!(
                "unknown source preset {key:?}; expected one of {}",
                Self::PRESETS.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlySeries {
    pub name: String,
    /// Sorted by date; `None` marks a month present in the file but masked.
    pub points: Vec<(YearMonth, Option<f64>)>,
    pub warnings: Vec<String>,
}

impl MonthlySeries {
    pub fn get(&self, date: YearMonth) -> Option<f64> {
        self.points
            .binary_search_by(|(d, _)| d.cmp(&date))
            .ok()
            .and_then(|k| self.points[k].1)
    }
}

fn split_fields<'a>(line: &'a str, delim: Delimiter) -> Vec<&'a str> {
    match delim {
        Delimiter::Comma => line.split(',').map(str::trim).collect(),
        Delimiter::Whitespace => line.split_whitespace().collect(),
    }
}

struct RawRow {
    date: YearMonth,
    day: Option<u32>,
    value: Option<f64>,
}

fn parse_row(fields: &[&str], spec: &SourceSpec) -> std::result::Result<RawRow, String> {
    let int = |k: usize| -> std::result::Result<i64, String> {
        fields[k].parse::<i64>().map_err(|_| format!("bad integer {:?}", fields[k]))
    };
    let (year, month, day) = match spec.format.date {
        DateLayout::IsoMonth { col } => {
            let d: YearMonth = fields[col].parse().map_err(|e: Error| e.to_string())?;
            (d.year() as i64, d.month() as i64, None)
        }
        DateLayout::YearMonth { year, month } => (int(year)?, int(month)?, None),
        DateLayout::YearMonthDay { year, month, day } => (int(year)?, int(month)?, Some(int(day)?)),
    };
    let year = i32::try_from(year).map_err(|_| format!("year {year} out of range"))?;
    let date = u32::try_from(month).ok().and_then(|m| YearMonth::new(year, m).ok());
    let date = date.ok_or_else(|| format!("month {month} out of range"))?;
    let day = match day {
        Some(d) if d >= 1 && d <= date.days() as i64 => Some(d as u32),
        Some(d) => return Err(format!("day {d} out of range for {date}")),
        None => None,
    };
    let raw = fields[spec.format.value_col];
    let v: f64 = raw.parse().map_err(|_| format!("bad value {raw:?}"))?;
    let value = if !v.is_finite() || spec.format.sentinels.contains(&v) {
        None
    } else {
        Some(v * spec.unit_scale)
    };
    Ok(RawRow { date, day, value })
}

/// Parses one provider file into a monthly series in millions of km².
pub fn parse_source(text: &str, spec: &SourceSpec) -> Result<MonthlySeries> {
    spec.validate()?;
    let fmt = &spec.format;
    let mut warnings = Vec::new();
    let mut monthly: BTreeMap<YearMonth, Option<f64>> = BTreeMap::new();
    let mut daily: BTreeMap<YearMonth, Vec<(u32, f64)>> = BTreeMap::new();
    let mut seen_days: BTreeMap<(YearMonth, u32), usize> = BTreeMap::new();

    for (lineno, line) in text.lines().enumerate().skip(fmt.header_lines) {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(prefix) = &fmt.comment_prefix {
            if trimmed.starts_with(prefix.as_str()) {
                continue;
            }
        }
        let fields = split_fields(trimmed, fmt.delimiter);
        if fields.len() != fmt.columns {
            return Err(Error::Format(format!(
                "{} line {}: expected {} columns, found {}",
                spec.name,
                lineno + 1,
                fmt.columns,
                fields.len()
            )));
        }
        let row = match parse_row(&fields, spec) {
            Ok(r) => r,
            Err(msg) => {
                warnings.push(format!("{} line {}: {msg}", spec.name, lineno + 1));
                if warnings.len() > spec.max_bad_rows {
                    return Err(Error::Format(format!(
                        "{}: {} unparseable rows exceed the limit of {}; last: {}",
                        spec.name,
                        warnings.len(),
                        spec.max_bad_rows,
                        warnings.last().unwrap()
                    )));
                }
                continue;
            }
        };
        let date = row.date;
        match row.day {
            None => {
                if monthly.insert(date, row.value).is_some() {
                    return Err(Error::Format(format!("{}: duplicate month {date}", spec.name)));
                }
            }
            Some(day) => {
                if let Some(prev) = seen_days.insert((date, day), lineno + 1) {
                    return Err(Error::Format(format!(
                        "{}: day {date}-{day:02} repeated on lines {prev} and {}",
                        spec.name,
                        lineno + 1
                    )));
                }
                let entry = daily.entry(date).or_default();
                if let Some(v) = row.value {
                    entry.push((day, v));
                }
            }
        }
    }

    if fmt.frequency == Frequency::Daily {
        for (date, days) in daily {
            let value = if days.len() >= MIN_DAYS_PER_MONTH {
                Some(days.iter().map(|d| d.1).sum::<f64>() / days.len() as f64)
            } else {
                None
            };
            monthly.insert(date, value);
        }
    }
    if monthly.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", spec.name)));
    }
    Ok(MonthlySeries {
        name: spec.name.clone(),
        points: monthly.into_iter().collect(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelPolicy {
    /// Values outside `(lower, upper]` are masked and counted.
    pub lower: f64,
    pub upper: f64,
    /// Fail when no month has every indicator present.
    pub require_overlap: bool,
}

impl Default for PanelPolicy {
    fn default() -> Self {
        PanelPolicy {
            lower: 0.0,
            upper: EXTENT_UPPER_BOUND,
            require_overlap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorReport {
    pub name: String,
    pub total_months: usize,
    pub missing_months: usize,
    pub out_of_range: usize,
    pub first_observed: Option<YearMonth>,
    pub last_observed: Option<YearMonth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelReport {
    pub start: YearMonth,
    pub end: YearMonth,
    pub indicators: Vec<IndicatorReport>,
    /// First and last months with every indicator present.
    pub overlap: Option<(YearMonth, YearMonth)>,
    pub warnings: Vec<String>,
}

/// Aligns series on the union of their months. Columns follow input order.
pub fn build_panel(series: &[MonthlySeries], policy: &PanelPolicy) -> Result<(IndicatorPanel, PanelReport)> {
    if series.is_empty() {
        return Err(Error::Input("at least one series is required".into()));
    }
    for (k, s) in series.iter().enumerate() {
        if series[..k].iter().any(|o| o.name == s.name) {
            return Err(Error::Input(format!("series {:?} given twice", s.name)));
        }
        if s.points.is_empty() {
            return Err(Error::Input(format!("series {:?} is empty", s.name)));
        }
    }
    let start = series.iter().map(|s| s.points[0].0).min().unwrap();
    let end = series.iter().map(|s| s.points.last().unwrap().0).max().unwrap();
    let dates = YearMonth::range_inclusive(start, end);
    let mut reports: Vec<IndicatorReport> = series
        .iter()
        .map(|s| IndicatorReport {
            name: s.name.clone(),
            total_months: dates.len(),
            missing_months: 0,
            out_of_range: 0,
            first_observed: None,
            last_observed: None,
        })
        .collect();
    let mut rows = Vec::with_capacity(dates.len());
    for &d in &dates {
        let row: Vec<Option<f64>> = series
            .iter()
            .zip(reports.iter_mut())
            .map(|(s, rep)| {
                let v = s.get(d).filter(|v| {
                    let ok = *v > policy.lower && *v <= policy.upper;
                    if !ok {
                        rep.out_of_range += 1;
                    }
                    ok
                });
                match v {
                    Some(_) => {
                        rep.first_observed.get_or_insert(d);
                        rep.last_observed = Some(d);
                    }
                    None => rep.missing_months += 1,
                }
                v
            })
            .collect();
        rows.push(row);
    }
    let full: Vec<YearMonth> = dates
        .iter()
        .zip(&rows)
        .filter(|(_, r)| r.iter().all(Option::is_some))
        .map(|(d, _)| *d)
        .collect();
    let overlap = full.first().map(|f| (*f, *full.last().unwrap()));
    if overlap.is_none() && policy.require_overlap {
        return Err(Error::Input("no month has every indicator present".into()));
    }
    let names = series.iter().map(|s| s.name.clone()).collect();
    let panel = IndicatorPanel::new(dates, names, rows)?;
    let warnings = series.iter().flat_map(|s| s.warnings.iter().cloned()).collect();
    Ok((
        panel,
        PanelReport {
            start,
            end,
            indicators: reports,
            overlap,
            warnings,
        },
    ))
}
