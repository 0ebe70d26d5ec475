//! Synthetic panels drawn from the model and Monte Carlo recovery studies.
//!
//! Random numbers come from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! the master seed; replication `r` of a Monte Carlo study uses stream `r`
//! of that seed, so results do not depend on thread count or scheduling.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::{YearMonth, MONTH_ABBREV};
use crate::error::{Error, Result};
use crate::estimation::{fit_em, EMConfig, ParamStdErrors};
use crate::model::{build_design_matrix, transition_mean, unconditional_init, ModelParams};
use crate::panel::IndicatorPanel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShockDist {
    Gaussian,
    /// Student-t rescaled to unit variance; requires `dof > 2`.
    StudentT { dof: f64 },
}

/// Indicator `indicator` is missing for periods `start..=end` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingSpan {
    pub indicator: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub params: ModelParams,
    pub periods: usize,
    pub start_date: YearMonth,
    pub seed: u64,
    #[serde(default)]
    pub missing_pattern: Vec<MissingSpan>,
    pub shocks: ShockDist,
}

impl SimConfig {
    pub fn new(params: ModelParams, periods: usize, start_date: YearMonth, seed: u64) -> Self {
        SimConfig {
            params,
            periods,
            start_date,
            seed,
            missing_pattern: Vec::new(),
            shocks: ShockDist::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods == 0 {
            return Err(Error::Input("simulation needs at least one period".into()));
        }
        for s in &self.missing_pattern {
            if s.indicator >= self.params.n_indicators() {
                return Err(Error::Input(format!("missing span names indicator {}", s.indicator)));
            }
            if s.start < 1 || s.start > s.end || s.end > self.periods {
                return Err(Error::Input(format!(
                    "missing span {}..={} outside 1..={}",
                    s.start, s.end, self.periods
                )));
            }
        }
        if let ShockDist::StudentT { dof } = self.shocks {
            if !(dof > 2.0) || !dof.is_finite() {
                return Err(Error::Input(format!("Student-t dof must exceed 2, got {dof}")));
            }
        }
        Ok(())
    }
}

struct ShockSampler {
    chi2: Option<(ChiSquared<f64>, f64)>,
}

impl ShockSampler {
    fn new(dist: ShockDist) -> Result<Self> {
        let chi2 = match dist {
            ShockDist::Gaussian => None,
            ShockDist::StudentT { dof } => {
                let d = ChiSquared::new(dof).map_err(|e| Error::Input(e.to_string()))?;
                Some((d, dof))
            }
        };
        Ok(ShockSampler { chi2 })
    }

    /// A zero-mean, unit-variance draw.
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        match &self.chi2 {
            None => z,
            Some((chi2, dof)) => {
                let w = chi2.sample(rng);
                z * ((dof - 2.0) / w).sqrt()
            }
        }
    }
}

fn simulate_with_rng(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<(IndicatorPanel, Vec<f64>)> {
    config.validate()?;
    let p = &config.params;
    let n = p.n_indicators();
    let t_len = config.periods;
    let dates: Vec<YearMonth> = (0..t_len as i64).map(|k| config.start_date.add_months(k)).collect();
    let design = build_design_matrix(&dates, config.start_date)?;
    let sampler = ShockSampler::new(config.shocks)?;
    let chol = p
        .sigma()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("measurement covariance is not positive definite".into()))?;
    let lower = chol.l();
    let sd_eta = p.sigma2_eta().sqrt();

    let init = unconditional_init(p, design.row(0));
    let mut states = Vec::with_capacity(t_len);
    let mut rows = Vec::with_capacity(t_len);
    let mut x = init.mean + init.variance.sqrt() * sampler.draw(rng);
    for t in 0..t_len {
        if t > 0 {
            x = transition_mean(p, design.row(t), x) + sd_eta * sampler.draw(rng);
        }
        states.push(x);
        let u = DVector::from_fn(n, |_, _| sampler.draw(rng));
        let eps = &lower * u;
        let row: Vec<Option<f64>> = (0..n)
            .map(|i| Some(p.intercepts()[i] + p.loadings()[i] * x + eps[i]))
            .collect();
        rows.push(row);
    }
    for s in &config.missing_pattern {
        for row in rows.iter_mut().take(s.end).skip(s.start - 1) {
            row[s.indicator] = None;
        }
    }
    let panel = IndicatorPanel::new(dates, p.names().to_vec(), rows)?;
    Ok((panel, states))
}

/// Draws a panel and the latent states that generated it.
pub fn simulate(config: &SimConfig) -> Result<(IndicatorPanel, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    simulate_with_rng(config, &mut rng)
}

/// Same as [`simulate`] but on stream `stream` of the seed.
pub fn simulate_stream(config: &SimConfig, stream: u64) -> Result<(IndicatorPanel, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    simulate_with_rng(config, &mut rng)
}

/// Flattens parameters (and optionally their standard errors) into named
/// scalars. Normalized intercepts and loadings are omitted.
pub fn named_parameters(params: &ModelParams, se: Option<&ParamStdErrors>) -> Vec<(String, f64, Option<f64>)> {
    let mut out = Vec::new();
    let names = params.names();
    let anchor = params.anchor();
    for i in (0..names.len()).filter(|&i| i != anchor) {
        out.push((format!("c[{}]", names[i]), params.intercepts()[i], se.and_then(|s| s.c[i])));
    }
    for i in (0..names.len()).filter(|&i| i != anchor) {
        out.push((format!("lambda[{}]", names[i]), params.loadings()[i], se.and_then(|s| s.lambda[i])));
    }
    for i in 0..names.len() {
        for j in 0..=i {
            out.push((
                format!("sigma[{},{}]", names[i], names[j]),
                params.sigma()[(i, j)],
                se.map(|s| s.sigma[i][j]),
            ));
        }
    }
    out.push(("rho".into(), params.rho(), se.map(|s| s.rho)));
    let tr = params.trend();
    for m in 0..12 {
        out.push((format!("a[{}]", MONTH_ABBREV[m]), tr.a[m], se.map(|s| s.a[m])));
    }
    for m in 0..12 {
        out.push((format!("b[{}]", MONTH_ABBREV[m]), tr.b[m], se.map(|s| s.b[m])));
    }
    for m in 0..12 {
        out.push((format!("cq[{}]", MONTH_ABBREV[m]), tr.cq[m], se.map(|s| s.cq[m])));
    }
    out.push(("sigma2_eta".into(), params.sigma2_eta(), se.map(|s| s.sigma2_eta)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    pub median_abs_error: f64,
    /// Share of replications with a finite standard error whose ±1.96·SE
    /// interval covers the truth; `None` when no such replication exists.
    pub coverage: Option<f64>,
    pub coverage_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    /// Estimates aligned with [`McReport::parameters`]; `None` if the fit failed.
    pub estimates: Option<Vec<f64>>,
    pub std_errors: Option<Vec<Option<f64>>>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub reps: usize,
    pub failed: usize,
    pub parameters: Vec<ParamSummary>,
    pub replications: Vec<Replication>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn run_replication(config: &SimConfig, em: &EMConfig, index: usize) -> Replication {
    let attempt = || -> Result<(Vec<f64>, Vec<Option<f64>>, usize, bool)> {
        let (panel, _) = simulate_stream(config, index as u64)?;
        let design = build_design_matrix(panel.dates(), config.start_date)?;
        let fit = fit_em(&panel, &design, config.params.anchor(), em)?;
        let named = named_parameters(&fit.params, fit.std_errors.as_ref());
        let est = named.iter().map(|x| x.1).collect();
        let se = named.iter().map(|x| x.2.filter(|s| s.is_finite())).collect();
        Ok((est, se, fit.iterations(), fit.converged))
    };
    match attempt() {
        Ok((est, se, iterations, converged)) => Replication {
            index,
            estimates: Some(est),
            std_errors: Some(se),
            iterations,
            converged,
            error: None,
        },
        Err(e) => Replication {
            index,
            estimates: None,
            std_errors: None,
            iterations: 0,
            converged: false,
            error: Some(e.to_string()),
        },
    }
}

/// Simulates `reps` panels from `config.params`, fits each with `em`, and
/// summarizes the estimates against the truth. Failed fits are counted and
/// excluded from the summaries.
pub fn monte_carlo_recovery(config: &SimConfig, reps: usize, em: &EMConfig) -> Result<McReport> {
    if reps == 0 {
        return Err(Error::Input("reps must be at least 1".into()));
    }
    config.validate()?;
    em.validate()?;
    let replications: Vec<Replication> = (0..reps)
        .into_par_iter()
        .map(|r| run_replication(config, em, r))
        .collect();
    Ok(summarize(&config.params, replications))
}

/// Aggregates replications against the true parameters.
pub fn summarize(truth: &ModelParams, replications: Vec<Replication>) -> McReport {
    let truth_named = named_parameters(truth, None);
    let ok: Vec<&Replication> = replications.iter().filter(|r| r.estimates.is_some()).collect();
    let parameters = truth_named
        .iter()
        .enumerate()
        .map(|(k, (name, t, _))| {
            let errs: Vec<f64> = ok.iter().map(|r| r.estimates.as_ref().unwrap()[k] - t).collect();
            let m = errs.len() as f64;
            let bias = errs.iter().sum::<f64>() / m;
            let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / m).sqrt();
            let mut covered = 0usize;
            let mut counted = 0usize;
            for (r, e) in ok.iter().zip(&errs) {
                if let Some(Some(se)) = r.std_errors.as_ref().map(|s| s[k]) {
                    counted += 1;
                    if e.abs() <= 1.96 * se {
                        covered += 1;
                    }
                }
            }
            ParamSummary {
                name: name.clone(),
                truth: *t,
                mean: t + bias,
                bias,
                rmse,
                median_abs_error: median(errs.iter().map(|e| e.abs()).collect()),
                coverage: (counted > 0).then(|| covered as f64 / counted as f64),
                coverage_count: counted,
            }
        })
        .collect();
    McReport {
        reps: replications.len(),
        failed: replications.len() - ok.len(),
        parameters,
        replications,
    }
}

impl McReport {
    pub const CSV_HEADER: &'static str = "parameter,truth,mean,bias,rmse,median_abs_error,coverage,coverage_count,reps,failed";

    pub fn parameter(&self, name: &str) -> Option<&ParamSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::CSV_HEADER.split(','))?;
        for p in &self.parameters {
            w.write_record([
                p.name.clone(),
                p.truth.to_string(),
                p.mean.to_string(),
                p.bias.to_string(),
                p.rmse.to_string(),
                p.median_abs_error.to_string(),
                p.coverage.map(|c| c.to_string()).unwrap_or_default(),
                p.coverage_count.to_string(),
                self.reps.to_string(),
                self.failed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
