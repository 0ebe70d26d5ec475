//! Smoothed latent-series extraction and the month-by-month comparison of
//! extractions obtained under different normalizations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calendar::{YearMonth, MONTH_ABBREV};
use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::kalman::kalman_smoother;
use crate::model::{unconditional_init, DesignMatrix, ModelParams};
use crate::panel::IndicatorPanel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedSeries {
    pub dates: Vec<YearMonth>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Name of the normalized indicator.
    pub anchor: String,
}

/// Smoothed state means and standard deviations at the fitted parameters.
pub fn extract_factor(fit: &FitResult, panel: &IndicatorPanel, design: &DesignMatrix) -> Result<ExtractedSeries> {
    extract_with_params(&fit.params, panel, design)
}

/// Same as [`extract_factor`] for an arbitrary parameter point.
pub fn extract_with_params(params: &ModelParams, panel: &IndicatorPanel, design: &DesignMatrix) -> Result<ExtractedSeries> {
    if design.is_empty() {
        return Err(Error::Input("empty design".into()));
    }
    let init = unconditional_init(params, design.row(0));
    let s = kalman_smoother(params, panel, design, &init)?;
    Ok(ExtractedSeries {
        dates: panel.dates().to_vec(),
        sd: s.smoothed_var.iter().map(|v| v.sqrt()).collect(),
        mean: s.smoothed_mean,
        anchor: params.anchor_name().to_string(),
    })
}

impl ExtractedSeries {
    pub const CSV_HEADER: &'static str = "date,year,month,anchor,mean,sd";

    /// One row per period: `date,year,month,anchor,mean,sd`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::CSV_HEADER.split(','))?;
        for (t, d) in self.dates.iter().enumerate() {
            w.write_record([
                d.to_string(),
                d.year().to_string(),
                d.month().to_string(),
                self.anchor.clone(),
                self.mean[t].to_string(),
                self.sd[t].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format for plotting: `date,year,month,series,value,sd`, with the
    /// extraction labelled `latent(<anchor>)` followed by every raw indicator.
    pub fn write_long_csv<W: Write>(&self, panel: &IndicatorPanel, writer: W) -> Result<()> {
        if panel.dates() != self.dates.as_slice() {
            return Err(Error::Input("panel dates differ from extraction dates".into()));
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["date", "year", "month", "series", "value", "sd"])?;
        let label = format!("latent({})", self.anchor);
        for (t, d) in self.dates.iter().enumerate() {
            let base = [d.to_string(), d.year().to_string(), d.month().to_string()];
            w.write_record(
                base.iter()
                    .cloned()
                    .chain([label.clone(), self.mean[t].to_string(), self.sd[t].to_string()]),
            )?;
            for (i, name) in panel.names().iter().enumerate() {
                let v = panel.value(t, i).map(|v| v.to_string()).unwrap_or_default();
                w.write_record(base.iter().cloned().chain([name.clone(), v, String::new()]))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != Self::CSV_HEADER {
            return Err(Error::Format(format!(
                "extraction CSV header must be `{}`",
                Self::CSV_HEADER
            )));
        }
        let mut out = ExtractedSeries {
            dates: Vec::new(),
            mean: Vec::new(),
            sd: Vec::new(),
            anchor: String::new(),
        };
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let num = |k: usize| {
                rec[k]
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number {:?}", &rec[k])))
            };
            out.dates.push(rec[0].parse()?);
            out.anchor = rec[3].to_string();
            out.mean.push(num(4)?);
            out.sd.push(num(5)?);
        }
        if out.dates.is_empty() {
            return Err(Error::Format("extraction CSV has no rows".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthRegression {
    /// Calendar month, 1 = January.
    pub month: u32,
    pub n: usize,
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    /// Fewer than three points, or no variation in the regressor.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormComparison {
    pub base_anchor: String,
    pub other_anchor: String,
    pub months: Vec<MonthRegression>,
}

/// Ordinary least squares of `y` on `(1, x)`; returns (intercept, slope, R²).
fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 {
        ((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Some((intercept, slope, r2))
}

/// For each calendar month, regresses `other` on `base` by OLS.
pub fn compare_normalizations(base: &ExtractedSeries, other: &ExtractedSeries) -> Result<NormComparison> {
    if base.dates != other.dates {
        return Err(Error::Input("extractions cover different dates".into()));
    }
    let months = (0..12)
        .map(|m| {
            let (x, y): (Vec<f64>, Vec<f64>) = base
                .dates
                .iter()
                .enumerate()
                .filter(|(_, d)| d.month_index() == m)
                .map(|(t, _)| (base.mean[t], other.mean[t]))
                .unzip();
            let n = x.len();
            match (n >= 3).then(|| ols(&x, &y)).flatten() {
                Some((intercept, slope, r_squared)) => MonthRegression {
                    month: m as u32 + 1,
                    n,
                    intercept,
                    slope,
                    r_squared,
                    flagged: false,
                },
                None => MonthRegression {
                    month: m as u32 + 1,
                    n,
                    intercept: f64::NAN,
                    slope: f64::NAN,
                    r_squared: f64::NAN,
                    flagged: true,
                },
            }
        })
        .collect();
    Ok(NormComparison {
        base_anchor: base.anchor.clone(),
        other_anchor: other.anchor.clone(),
        months,
    })
}

impl NormComparison {
    pub const CSV_HEADER: &'static str = "month,month_name,n,intercept,slope,r_squared,flagged";

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::CSV_HEADER.split(','))?;
        for r in &self.months {
            w.write_record([
                r.month.to_string(),
                MONTH_ABBREV[r.month as usize - 1].to_string(),
                r.n.to_string(),
                r.intercept.to_string(),
                r.slope.to_string(),
                r.r_squared.to_string(),
                r.flagged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn min_r_squared(&self) -> f64 {
        self.months
            .iter()
            .filter(|m| !m.flagged)
            .map(|m| m.r_squared)
            .fold(f64::INFINITY, f64::min)
    }
}
