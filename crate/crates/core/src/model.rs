//! Model parameterization, deterministic regressors and the initial state.
//!
//! Measurement: `y_t = c + λ x_t + ε_t`, `ε_t ~ (0, Σ)`.
//! Transition:  `x_t = ρ x_{t-1} + Σ_m D_mt (a_m + b_m TIME_t + cq_m TIME_t²) + η_t`,
//! `η_t ~ (0, σ²_η)`, with `D_mt` the indicator of calendar month `m`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calendar::{check_consecutive, YearMonth};
use crate::error::{Error, Result};
use crate::panel::CANONICAL_NAMES;

/// Number of deterministic regressors: 12 monthly dummies, each interacted
/// with 1, TIME and TIME².
pub const DESIGN_COLS: usize = 36;

/// Monthly intercepts `a`, linear slopes `b` and quadratic coefficients `cq`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendSeasonal {
    pub a: [f64; 12],
    pub b: [f64; 12],
    pub cq: [f64; 12],
}

impl TrendSeasonal {
    pub fn zero() -> Self {
        Self {
            a: [0.0; 12],
            b: [0.0; 12],
            cq: [0.0; 12],
        }
    }

    /// Coefficients in design-column order: `a` (0..12), `b` (12..24), `cq` (24..36).
    pub fn to_vector(&self) -> [f64; DESIGN_COLS] {
        let mut v = [0.0; DESIGN_COLS];
        v[..12].copy_from_slice(&self.a);
        v[12..24].copy_from_slice(&self.b);
        v[24..].copy_from_slice(&self.cq);
        v
    }

    pub fn from_vector(v: &[f64]) -> Self {
        assert_eq!(v.len(), DESIGN_COLS);
        let mut out = Self::zero();
        out.a.copy_from_slice(&v[..12]);
        out.b.copy_from_slice(&v[12..24]);
        out.cq.copy_from_slice(&v[24..]);
        out
    }
}

/// One row of the deterministic design: the active calendar month and TIME.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignRow {
    /// Zero-based calendar month.
    pub month: usize,
    pub time: f64,
}

impl DesignRow {
    /// Dense 36-vector: dummy, dummy·TIME and dummy·TIME² blocks.
    pub fn dense(&self) -> [f64; DESIGN_COLS] {
        let mut d = [0.0; DESIGN_COLS];
        d[self.month] = 1.0;
        d[12 + self.month] = self.time;
        d[24 + self.month] = self.time * self.time;
        d
    }

    /// Inverse of [`DesignRow::dense`]; rejects vectors that are not a valid row.
    pub fn from_dense(d: &[f64]) -> Result<Self> {
        if d.len() != DESIGN_COLS {
            return Err(Error::Input(format!("design row has {} entries, expected 36", d.len())));
        }
        let month = (0..12)
            .find(|&m| d[m] == 1.0)
            .ok_or_else(|| Error::Input("design row has no active month dummy".into()))?;
        let time = d[12 + month];
        let expected = DesignRow { month, time }.dense();
        if expected.iter().zip(d).any(|(a, b)| a != b) {
            return Err(Error::Input("design row is not a dummy/TIME/TIME² triple".into()));
        }
        Ok(DesignRow { month, time })
    }

    /// `a'D + b'(D·TIME) + cq'(D·TIME²)` for this row.
    pub fn contribution(&self, trend: &TrendSeasonal) -> f64 {
        let m = self.month;
        trend.a[m] + trend.b[m] * self.time + trend.cq[m] * self.time * self.time
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: Vec<DesignRow>,
    time_origin: YearMonth,
}

impl DesignMatrix {
    pub fn rows(&self) -> &[DesignRow] {
        &self.rows
    }

    pub fn row(&self, t: usize) -> &DesignRow {
        &self.rows[t]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The month mapped to TIME = 1.
    pub fn time_origin(&self) -> YearMonth {
        self.time_origin
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), DESIGN_COLS);
        for (t, r) in self.rows.iter().enumerate() {
            for (j, v) in r.dense().iter().enumerate() {
                m[(t, j)] = *v;
            }
        }
        m
    }

    /// Largest absolute entry of each column block (dummy, TIME, TIME²), per month.
    pub(crate) fn column_scales(&self) -> [f64; DESIGN_COLS] {
        let mut s = [0.0f64; DESIGN_COLS];
        for r in &self.rows {
            for (j, v) in r.dense().iter().enumerate() {
                s[j] = s[j].max(v.abs());
            }
        }
        s.map(|v| if v > 0.0 { v } else { 1.0 })
    }
}

/// Deterministic regressors for `dates`, with `TIME = 1 + months since time_origin`.
pub fn build_design_matrix(dates: &[YearMonth], time_origin: YearMonth) -> Result<DesignMatrix> {
    check_consecutive(dates)?;
    let rows = dates
        .iter()
        .map(|d| DesignRow {
            month: d.month_index(),
            time: (1 + d.months_since(time_origin)) as f64,
        })
        .collect();
    Ok(DesignMatrix { rows, time_origin })
}

/// Prior moments of the first state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateInit {
    pub mean: f64,
    pub variance: f64,
}

impl StateInit {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !mean.is_finite() || !variance.is_finite() {
            return Err(Error::Input(format!("invalid initial state N({mean}, {variance})")));
        }
        Ok(Self { mean, variance })
    }
}

/// Serialized form of [`ModelParams`]; also the unchecked construction type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamValues {
    pub indicators: Vec<String>,
    /// Name of the normalized indicator.
    pub anchor: String,
    pub c: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Measurement-error covariance, row-major.
    pub sigma: Vec<Vec<f64>>,
    pub rho: f64,
    pub a: [f64; 12],
    pub b: [f64; 12],
    pub cq: [f64; 12],
    pub sigma2_eta: f64,
}

/// Validated model parameters.
///
/// Invariants: `c[anchor] == 0`, `lambda[anchor] == 1`, `Σ` symmetric positive
/// definite, `|ρ| < 1`, `σ²_η > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamValues", into = "ParamValues")]
pub struct ModelParams {
    names: Vec<String>,
    anchor: usize,
    intercepts: Vec<f64>,
    loadings: Vec<f64>,
    sigma: DMatrix<f64>,
    rho: f64,
    trend: TrendSeasonal,
    sigma2_eta: f64,
}

impl TryFrom<ParamValues> for ModelParams {
    type Error = Error;

    fn try_from(v: ParamValues) -> Result<Self> {
        let n = v.indicators.len();
        if n == 0 {
            return Err(Error::Input("no indicators".into()));
        }
        let anchor = v
            .indicators
            .iter()
            .position(|s| *s == v.anchor)
            .ok_or_else(|| Error::Input(format!("anchor {:?} not among indicators", v.anchor)))?;
        if v.c.len() != n || v.lambda.len() != n || v.sigma.len() != n || v.sigma.iter().any(|r| r.len() != n) {
            return Err(Error::Input(format!("parameter dimensions inconsistent with {n} indicators")));
        }
        if v.c[anchor] != 0.0 || v.lambda[anchor] != 1.0 {
            return Err(Error::Input(format!(
                "anchor {} must have c = 0 and lambda = 1, got c = {}, lambda = {}",
                v.anchor, v.c[anchor], v.lambda[anchor]
            )));
        }
        let all_finite = v.c.iter().chain(&v.lambda).chain(v.sigma.iter().flatten()).all(|x| x.is_finite())
            && v.a.iter().chain(&v.b).chain(&v.cq).all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::Input("non-finite parameter".into()));
        }
        if !(v.rho.abs() < 1.0) {
            return Err(Error::Input(format!("|rho| must be < 1, got {}", v.rho)));
        }
        if !(v.sigma2_eta > 0.0 && v.sigma2_eta.is_finite()) {
            return Err(Error::Input(format!("sigma2_eta must be > 0, got {}", v.sigma2_eta)));
        }
        let raw = DMatrix::from_fn(n, n, |i, j| v.sigma[i][j]);
        let scale = raw.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for i in 0..n {
            for j in 0..i {
                if (raw[(i, j)] - raw[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Input(format!("Sigma not symmetric at ({i}, {j})")));
                }
            }
        }
        let sigma = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                raw[(i, i)]
            } else {
                0.5 * (raw[(i, j)] + raw[(j, i)])
            }
        });
        if sigma.clone().cholesky().is_none() {
            return Err(Error::Input("Sigma is not positive definite".into()));
        }
        Ok(Self {
            names: v.indicators,
            anchor,
            intercepts: v.c,
            loadings: v.lambda,
            sigma,
            rho: v.rho,
            trend: TrendSeasonal {
                a: v.a,
                b: v.b,
                cq: v.cq,
            },
            sigma2_eta: v.sigma2_eta,
        })
    }
}

impl From<ModelParams> for ParamValues {
    fn from(p: ModelParams) -> Self {
        p.to_values()
    }
}

impl ModelParams {
    pub fn to_values(&self) -> ParamValues {
        let n = self.names.len();
        ParamValues {
            indicators: self.names.clone(),
            anchor: self.names[self.anchor].clone(),
            c: self.intercepts.clone(),
            lambda: self.loadings.clone(),
            sigma: (0..n).map(|i| (0..n).map(|j| self.sigma[(i, j)]).collect()).collect(),
            rho: self.rho,
            a: self.trend.a,
            b: self.trend.b,
            cq: self.trend.cq,
            sigma2_eta: self.sigma2_eta,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_indicators(&self) -> usize {
        self.names.len()
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn anchor_name(&self) -> &str {
        &self.names[self.anchor]
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn loadings(&self) -> &[f64] {
        &self.loadings
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn trend(&self) -> &TrendSeasonal {
        &self.trend
    }

    pub fn sigma2_eta(&self) -> f64 {
        self.sigma2_eta
    }

    /// Published sea-ice estimates under the `SII` normalization, with σ²_η
    /// (not reported with them) set to 0.05.
    pub fn sea_ice_reference() -> Self {
        let sigma = vec![
            vec![0.0003, 0.0010, 0.0004, -0.0025],
            vec![0.0010, 0.0236, 0.0025, 0.0081],
            vec![0.0004, 0.0025, 0.0146, 0.0002],
            vec![-0.0025, 0.0081, 0.0002, 0.0361],
        ];
        let a = [5.287, 5.296, 4.858, 4.066, 2.977, 2.732, 1.657, 0.719, 1.715, 3.923, 4.976, 5.504];
        let b = [1.412, -0.31, -1.227, -1.719, 0.367, -1.307, -1.497, 0.511, -1.066, 1.274, -1.711, -0.791];
        let cq = [-4.736, -1.735, 0.99, 2.187, -2.25, -1.072, -3.053, -5.634, -2.894, -5.929, 3.678, 0.056];
        ModelParams::try_from(ParamValues {
            indicators: CANONICAL_NAMES.iter().map(|s| s.to_string()).collect(),
            anchor: "SII".into(),
            c: vec![0.0, 0.225, 0.043, 1.040],
            lambda: vec![1.0, 0.950, 0.995, 0.961],
            sigma,
            rho: 0.704,
            a,
            b: b.map(|v| v * 1e-3),
            cq: cq.map(|v| v * 1e-6),
            sigma2_eta: 0.05,
        })
        .expect("reference parameters are valid")
    }

    /// Same model expressed with `anchor` normalized: the factor is rescaled
    /// to `x' = λ_anchor x + c_anchor` and every parameter adjusted so the
    /// implied distribution of observations is unchanged.
    pub fn renormalize(&self, anchor: usize) -> Result<Self> {
        let mut v = self.to_values();
        v.normalize(anchor)?;
        ModelParams::try_from(v)
    }
}

impl ParamValues {
    /// Rescales the state so that indicator `anchor` has c = 0 and λ = 1,
    /// leaving the distribution of the observations unchanged. The current
    /// `c` and `lambda` of every indicator, the anchor included, are
    /// interpreted as is.
    pub fn normalize(&mut self, anchor: usize) -> Result<()> {
        let n = self.indicators.len();
        if anchor >= n || self.c.len() != n || self.lambda.len() != n {
            return Err(Error::Input(format!("anchor index {anchor} out of range")));
        }
        let scale = self.lambda[anchor];
        let shift = self.c[anchor];
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::Input("cannot normalize on a zero loading".into()));
        }
        self.anchor = self.indicators[anchor].clone();
        for i in 0..n {
            self.c[i] -= self.lambda[i] * shift / scale;
            self.lambda[i] /= scale;
        }
        self.c[anchor] = 0.0;
        self.lambda[anchor] = 1.0;
        for m in 0..12 {
            self.a[m] = scale * self.a[m] + shift * (1.0 - self.rho);
            self.b[m] *= scale;
            self.cq[m] *= scale;
        }
        self.sigma2_eta *= scale * scale;
        Ok(())
    }
}

/// `ρ·prev_state + a'D + b'(D·TIME) + cq'(D·TIME²)`.
pub fn transition_mean(params: &ModelParams, row: &DesignRow, prev_state: f64) -> f64 {
    params.rho * prev_state + row.contribution(&params.trend)
}

/// Weights `g` such that the unconditional mean of the first state is `g'β`,
/// with `β` the 36 trend/seasonal coefficients.
///
/// The deterministic input is extended backwards from the first row (month
/// and TIME decreasing by one per period), giving
/// `E[x_1] = Σ_{k≥0} ρ^k d_{1-k}'β`. The sum is evaluated in closed form per
/// calendar month.
pub fn stationary_mean_weights(rho: f64, first: &DesignRow) -> [f64; DESIGN_COLS] {
    let q = rho.powi(12);
    let s0 = 1.0 / (1.0 - q);
    let s1 = q / ((1.0 - q) * (1.0 - q));
    let s2 = q * (1.0 + q) / ((1.0 - q) * (1.0 - q) * (1.0 - q));
    let mut g = [0.0; DESIGN_COLS];
    for r in 0..12 {
        let month = (first.month + 12 - r) % 12;
        let base = rho.powi(r as i32);
        let t = first.time - r as f64;
        g[month] += base * s0;
        g[12 + month] += base * (t * s0 - 12.0 * s1);
        g[24 + month] += base * (t * t * s0 - 24.0 * t * s1 + 144.0 * s2);
    }
    g
}

/// Stationary moments of the first state: mean `g(ρ)'β` (see
/// [`stationary_mean_weights`]) and variance `σ²_η / (1 − ρ²)`.
pub fn unconditional_init(params: &ModelParams, first: &DesignRow) -> StateInit {
    let g = stationary_mean_weights(params.rho, first);
    let beta = params.trend.to_vector();
    let mean = g.iter().zip(beta.iter()).map(|(g, b)| g * b).sum();
    StateInit {
        mean,
        variance: params.sigma2_eta / (1.0 - params.rho * params.rho),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ym(s: &str) -> YearMonth {
        s.parse().unwrap()
    }

    fn single_indicator(rho: f64, trend: TrendSeasonal, sigma2_eta: f64) -> ModelParams {
        ModelParams::try_from(ParamValues {
            indicators: vec!["SII".into()],
            anchor: "SII".into(),
            c: vec![0.0],
            lambda: vec![1.0],
            sigma: vec![vec![0.01]],
            rho,
            a: trend.a,
            b: trend.b,
            cq: trend.cq,
            sigma2_eta,
        })
        .unwrap()
    }

    #[test]
    fn single_row_at_origin() {
        let d = build_design_matrix(&[ym("1979-01")], ym("1979-01")).unwrap();
        let dense = d.to_dense();
        assert_eq!(dense.nrows(), 1);
        assert_eq!(dense[(0, 0)], 1.0);
        assert_eq!(dense[(0, 12)], 1.0);
        assert_eq!(dense[(0, 24)], 1.0);
        assert_eq!(dense.iter().filter(|v| **v != 0.0).count(), 3);
    }

    #[test]
    fn twelve_months_dummy_block_is_identity() {
        let dates = YearMonth::range_inclusive(ym("2000-01"), ym("2000-12"));
        let dense = build_design_matrix(&dates, dates[0]).unwrap().to_dense();
        let block = dense.columns(0, 12).into_owned();
        assert_eq!(block, DMatrix::identity(12, 12));
    }

    #[test]
    fn november_1979_row() {
        let dates = YearMonth::range_inclusive(ym("1978-11"), ym("1980-10"));
        let d = build_design_matrix(&dates, dates[0]).unwrap();
        let dense = d.to_dense();
        let row = dates.iter().position(|x| *x == ym("1979-11")).unwrap();
        let nz: Vec<(usize, f64)> = (0..36)
            .filter(|&j| dense[(row, j)] != 0.0)
            .map(|j| (j + 1, dense[(row, j)]))
            .collect();
        assert_eq!(nz, vec![(11, 1.0), (23, 13.0), (35, 169.0)]);
    }

    #[test]
    fn design_rejects_unordered_dates() {
        assert!(build_design_matrix(&[ym("2000-02"), ym("2000-01")], ym("2000-01")).is_err());
        assert!(build_design_matrix(&[], ym("2000-01")).is_err());
    }

    #[test]
    fn dense_row_round_trip() {
        let r = DesignRow { month: 7, time: 42.0 };
        assert_eq!(DesignRow::from_dense(&r.dense()).unwrap(), r);
        let mut bad = r.dense();
        bad[24 + 7] = 1.0;
        assert!(DesignRow::from_dense(&bad).is_err());
    }

    #[test]
    fn zero_model_transition() {
        let p = single_indicator(0.0, TrendSeasonal::zero(), 1.0);
        let row = DesignRow { month: 3, time: 10.0 };
        assert_eq!(transition_mean(&p, &row, 123.0), 0.0);
    }

    #[test]
    fn reference_january_transition() {
        let p = ModelParams::sea_ice_reference();
        let row = DesignRow { month: 0, time: 1.0 };
        let v = transition_mean(&p, &row, 10.0);
        assert!((v - 12.328407264).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rho_one_rejected_at_construction() {
        let mut v = ModelParams::sea_ice_reference().to_values();
        v.rho = 1.0;
        assert!(ModelParams::try_from(v).is_err());
    }

    #[test]
    fn anchor_normalization_enforced() {
        let mut v = ModelParams::sea_ice_reference().to_values();
        v.lambda[0] = 0.99;
        assert!(ModelParams::try_from(v).is_err());
        let mut v = ModelParams::sea_ice_reference().to_values();
        v.c[0] = 0.1;
        assert!(ModelParams::try_from(v).is_err());
    }

    #[test]
    fn init_without_persistence() {
        let mut t = TrendSeasonal::zero();
        t.a[4] = 2.5;
        t.b[4] = 0.1;
        let p = single_indicator(0.0, t, 0.3);
        let row = DesignRow { month: 4, time: 5.0 };
        let init = unconditional_init(&p, &row);
        assert!((init.mean - 3.0).abs() < 1e-15);
        assert_eq!(init.variance, 0.3);
    }

    #[test]
    fn init_closed_form() {
        let mut t = TrendSeasonal::zero();
        t.a = [3.0; 12];
        let p = single_indicator(0.5, t, 0.75);
        let init = unconditional_init(&p, &DesignRow { month: 10, time: 1.0 });
        assert!((init.mean - 6.0).abs() < 1e-12);
        assert!((init.variance - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stationary_weights_match_truncated_backward_sum() {
        for &rho in &[-0.8, 0.3, 0.704, 0.95] {
            let first = DesignRow { month: 10, time: 1.0 };
            let g = stationary_mean_weights(rho, &first);
            let mut brute = [0.0; DESIGN_COLS];
            for k in 0..20_000usize {
                let w = f64::powi(rho, k as i32);
                if w.abs() < 1e-300 {
                    break;
                }
                let row = DesignRow {
                    month: (first.month + 12 * 2000 - k) % 12,
                    time: first.time - k as f64,
                };
                for (b, d) in brute.iter_mut().zip(row.dense()) {
                    *b += w * d;
                }
            }
            for j in 0..DESIGN_COLS {
                let tol = 1e-9 * brute[j].abs().max(1.0);
                assert!((g[j] - brute[j]).abs() < tol, "rho {rho} col {j}: {} vs {}", g[j], brute[j]);
            }
        }
    }

    #[test]
    fn reference_init_variance() {
        let p = ModelParams::sea_ice_reference();
        let d = build_design_matrix(&[ym("1978-11")], ym("1978-11")).unwrap();
        let init = unconditional_init(&p, d.row(0));
        assert!(init.variance > 0.0 && init.variance.is_finite());
        assert!((init.variance - 0.05 / (1.0 - 0.704 * 0.704)).abs() < 1e-15);
        assert!(init.mean > 5.0 && init.mean < 20.0, "{}", init.mean);
    }

    #[test]
    fn renormalize_preserves_observation_model() {
        let p = ModelParams::sea_ice_reference();
        let g = p.renormalize(3).unwrap();
        assert_eq!(g.loadings()[3], 1.0);
        assert_eq!(g.intercepts()[3], 0.0);
        // y_S = x; with x' = 0.961 x + 1.04, y_S = (x' − 1.04)/0.961.
        assert!((g.loadings()[0] - 1.0 / 0.961).abs() < 1e-12);
        assert!((g.intercepts()[0] + 1.04 / 0.961).abs() < 1e-12);
        let back = g.renormalize(0).unwrap();
        for (x, y) in back.loadings().iter().zip(p.loadings()) {
            assert!((x - y).abs() < 1e-12);
        }
        for m in 0..12 {
            assert!((back.trend().a[m] - p.trend().a[m]).abs() < 1e-12);
        }
    }
}
