use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::hessian::{standard_errors, FreeParamLayout, ParamStdErrors};
use crate::calendar::{YearMonth, MONTH_ABBREV};
use crate::error::{Error, Result};
use crate::kalman::{kalman_smoother, SmootherOutput};
use crate::model::{
    stationary_mean_weights, unconditional_init, DesignMatrix, DesignRow, ModelParams, ParamValues,
    TrendSeasonal, DESIGN_COLS,
};
use crate::panel::IndicatorPanel;

/// Largest log-likelihood decrease tolerated between EM iterations.
pub const MONOTONE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EMConfig {
    pub max_iters: usize,
    /// Relative log-likelihood change threshold.
    pub loglik_tol: f64,
    /// Max-abs parameter change threshold.
    pub param_tol: f64,
    /// Eigenvalue floor applied to Σ (and floor for σ²_η) when an update
    /// falls below it.
    pub ridge: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_params: Option<ModelParams>,
    /// Compute Hessian standard errors after convergence.
    #[serde(default = "default_true")]
    pub standard_errors: bool,
    /// Squared-extrapolation acceleration. Each outer iteration takes two
    /// EM steps and keeps an extrapolated point only if it does not lower
    /// the likelihood, so the trace remains monotone.
    #[serde(default = "default_true")]
    pub acceleration: bool,
    /// Parameter-expanded M-step: the anchor's (c, λ) are estimated along
    /// with the others and the result is mapped back to the normalization.
    #[serde(default = "default_true")]
    pub parameter_expansion: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            loglik_tol: 1e-9,
            param_tol: 1e-7,
            ridge: 1e-9,
            seed_params: None,
            standard_errors: true,
            acceleration: true,
            parameter_expansion: true,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Input("max_iters must be >= 1".into()));
        }
        if !(self.loglik_tol > 0.0) || !(self.param_tol > 0.0) {
            return Err(Error::Input("tolerances must be > 0".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Input("ridge must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceReason {
    Tolerance,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub reason: ConvergenceReason,
    pub std_errors: Option<ParamStdErrors>,
    pub hessian_ok: bool,
    /// Max-abs finite-difference gradient, in log-likelihood units per
    /// standard error; `None` when standard errors were not requested.
    pub max_scaled_gradient: Option<f64>,
    /// Why standard errors are missing, if they are.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian_problem: Option<String>,
    /// Number of M-steps whose Σ or σ²_η update hit the ridge floor.
    pub ridge_repairs: usize,
    /// Indicators with fewer than two observations; their (c, λ) stay at the
    /// starting values.
    pub frozen_indicators: Vec<String>,
    /// Month mapped to TIME = 1.
    pub time_origin: YearMonth,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }

    pub fn iterations(&self) -> usize {
        self.loglik_trace.len()
    }
}

/// Expected complete-data moments from one smoother pass.
///
/// Missing entries of partially observed periods are treated as latent and
/// imputed from their conditional distribution given the observed entries
/// and the state; fully missing periods do not enter the measurement block.
/// Design-row moments are kept per calendar month on the scaled regressors
/// `(1, TIME/τ, (TIME/τ)²)`.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub params: ModelParams,
    pub smoothed: SmootherOutput,
    pub loglik: f64,
    /// Number of periods with at least one observation.
    pub n_rows: f64,
    pub obs_count: Vec<usize>,
    pub sum_x: f64,
    pub sum_xx: f64,
    pub sum_y: Vec<f64>,
    pub sum_yx: Vec<f64>,
    pub sum_yy: DMatrix<f64>,
    /// Per observed period: y_t given (y_obs, x_t) is `level + slope·x_t`
    /// plus noise with covariance `cond_cov` (zero on observed entries).
    pub row_moments: Vec<RowMoments>,
    pub n_periods: usize,
    pub rows: Vec<DesignRow>,
    pub first_row: DesignRow,
    pub time_scale: f64,
    pub x1: f64,
    pub x1_sq: f64,
    /// Σ_{t≥2} E[x_t²], E[x_{t−1}²], E[x_t x_{t−1}].
    pub sum_cur_sq: f64,
    pub sum_lag_sq: f64,
    pub sum_cross: f64,
    pub month_gram: [Matrix3<f64>; 12],
    pub month_cur: [Vector3<f64>; 12],
    pub month_lag: [Vector3<f64>; 12],
}

#[derive(Debug, Clone)]
pub struct RowMoments {
    pub level: DVector<f64>,
    pub slope: DVector<f64>,
    pub cond_cov: Option<DMatrix<f64>>,
    pub mean: f64,
    pub var: f64,
}

fn scaled_regressors(row: &DesignRow, tau: f64) -> Vector3<f64> {
    let s = row.time / tau;
    Vector3::new(1.0, s, s * s)
}

pub fn e_step(
    params: &ModelParams,
    panel: &IndicatorPanel,
    design: &DesignMatrix,
) -> Result<SufficientStats> {
    if design.is_empty() {
        return Err(Error::Input("empty design".into()));
    }
    let init = unconditional_init(params, design.row(0));
    let smoothed = kalman_smoother(params, panel, design, &init)?;
    let n = params.n_indicators();
    let t_len = panel.len();
    let c = params.intercepts();
    let lam = params.loadings();
    let sigma = params.sigma();
    let tau = design
        .rows()
        .iter()
        .fold(1.0f64, |m, r| m.max(r.time.abs()));

    let mut st = SufficientStats {
        params: params.clone(),
        loglik: smoothed.loglik,
        n_rows: 0.0,
        obs_count: (0..n).map(|i| panel.observed_count(i)).collect(),
        sum_x: 0.0,
        sum_xx: 0.0,
        sum_y: vec![0.0; n],
        sum_yx: vec![0.0; n],
        sum_yy: DMatrix::zeros(n, n),
        row_moments: Vec::with_capacity(t_len),
        n_periods: t_len,
        rows: design.rows().to_vec(),
        first_row: *design.row(0),
        time_scale: tau,
        x1: smoothed.smoothed_mean[0],
        x1_sq: smoothed.smoothed_var[0] + smoothed.smoothed_mean[0].powi(2),
        sum_cur_sq: 0.0,
        sum_lag_sq: 0.0,
        sum_cross: 0.0,
        month_gram: [Matrix3::zeros(); 12],
        month_cur: [Vector3::zeros(); 12],
        month_lag: [Vector3::zeros(); 12],
        smoothed,
    };

    let mut ey = vec![0.0; n];
    let mut eyx = vec![0.0; n];
    let mut eyy = DMatrix::<f64>::zeros(n, n);
    for t in 0..t_len {
        let m = st.smoothed.smoothed_mean[t];
        let exx = st.smoothed.smoothed_var[t] + m * m;
        let obs = panel.observed(t);
        if obs.is_empty() {
            continue;
        }
        let miss: Vec<usize> = (0..n).filter(|i| !obs.contains(i)).collect();
        let mut rm = RowMoments {
            level: DVector::zeros(n),
            slope: DVector::zeros(n),
            cond_cov: None,
            mean: m,
            var: st.smoothed.smoothed_var[t],
        };
        for &i in &obs {
            let y = panel.value(t, i).unwrap();
            ey[i] = y;
            eyx[i] = y * m;
            rm.level[i] = y;
        }
        for &i in &obs {
            for &j in &obs {
                eyy[(i, j)] = ey[i] * ey[j];
            }
        }
        if !miss.is_empty() {
            // y_M | y_O, x ~ N(α + γ x, Σ_M|O)
            let k = obs.len();
            let s_oo = DMatrix::from_fn(k, k, |r, s| sigma[(obs[r], obs[s])]);
            let s_mo = DMatrix::from_fn(miss.len(), k, |r, s| sigma[(miss[r], obs[s])]);
            let chol = s_oo
                .cholesky()
                .ok_or_else(|| Error::Numerical(format!("observed Σ block singular at period {t}")))?;
            let gain = chol.solve(&s_mo.transpose()).transpose();
            let resid_o = DMatrix::from_fn(k, 1, |r, _| ey[obs[r]] - c[obs[r]]);
            let lam_o = DMatrix::from_fn(k, 1, |r, _| lam[obs[r]]);
            let ka = &gain * resid_o;
            let kl = &gain * lam_o;
            let cond = {
                let s_mm = DMatrix::from_fn(miss.len(), miss.len(), |r, s| sigma[(miss[r], miss[s])]);
                s_mm - &gain * s_mo.transpose()
            };
            let alpha: Vec<f64> = miss.iter().enumerate().map(|(r, &i)| c[i] + ka[(r, 0)]).collect();
            let gamma: Vec<f64> = miss.iter().enumerate().map(|(r, &i)| lam[i] - kl[(r, 0)]).collect();
            for (r, &i) in miss.iter().enumerate() {
                ey[i] = alpha[r] + gamma[r] * m;
                eyx[i] = alpha[r] * m + gamma[r] * exx;
                rm.level[i] = alpha[r];
                rm.slope[i] = gamma[r];
            }
            let mut full = DMatrix::zeros(n, n);
            for (r, &i) in miss.iter().enumerate() {
                for (s, &j) in miss.iter().enumerate() {
                    full[(i, j)] = cond[(r, s)];
                }
            }
            rm.cond_cov = Some(full);
            for (r, &i) in miss.iter().enumerate() {
                for (s, &j) in miss.iter().enumerate() {
                    eyy[(i, j)] = alpha[r] * alpha[s]
                        + (alpha[r] * gamma[s] + gamma[r] * alpha[s]) * m
                        + gamma[r] * gamma[s] * exx
                        + cond[(r, s)];
                }
                for &j in &obs {
                    eyy[(i, j)] = ey[i] * ey[j];
                    eyy[(j, i)] = ey[i] * ey[j];
                }
            }
        }
        st.row_moments.push(rm);
        st.n_rows += 1.0;
        st.sum_x += m;
        st.sum_xx += exx;
        for i in 0..n {
            st.sum_y[i] += ey[i];
            st.sum_yx[i] += eyx[i];
        }
        st.sum_yy += &eyy;
    }

    for t in 1..t_len {
        let row = design.row(t);
        let z = scaled_regressors(row, tau);
        let sm = &st.smoothed;
        let (m_cur, m_lag) = (sm.smoothed_mean[t], sm.smoothed_mean[t - 1]);
        st.sum_cur_sq += sm.smoothed_var[t] + m_cur * m_cur;
        st.sum_lag_sq += sm.smoothed_var[t - 1] + m_lag * m_lag;
        st.sum_cross += sm.lag_one_cov[t - 1] + m_cur * m_lag;
        st.month_gram[row.month] += z * z.transpose();
        st.month_cur[row.month] += z * m_cur;
        st.month_lag[row.month] += z * m_lag;
    }
    Ok(st)
}

#[derive(Debug, Clone)]
pub struct MStepOutput {
    pub params: ModelParams,
    /// Σ or σ²_η hit the ridge floor.
    pub ridge_repaired: bool,
    /// Indicators whose (c, λ) were held fixed for lack of observations.
    pub frozen: Vec<usize>,
}

/// Closed-form maximization of the expected complete-data log-likelihood.
///
/// Measurement block: (c, λ) of the free indicators given the previous Σ
/// (the anchor and frozen rows are fixed, which makes this a constrained
/// seemingly-unrelated regression), then Σ given the new (c, λ).
/// Transition block: for each candidate ρ, (a, b, cq) and σ²_η have closed
/// forms that include the initial-state term; ρ maximizes the resulting
/// profile and is never worse than the previous ρ.
pub fn m_step(stats: &SufficientStats, anchor: usize, ridge: f64) -> Result<MStepOutput> {
    m_step_impl(stats, anchor, ridge, false)
}

/// Parameter-expanded variant of [`m_step`]. The anchor row is estimated
/// like any other, which lets the state rescale within one step; the
/// maximizer is then mapped back to c = 0, λ = 1 for the anchor by the
/// affine change of state that leaves the likelihood unchanged. Each step
/// still does not decrease the likelihood.
pub fn m_step_expanded(stats: &SufficientStats, anchor: usize, ridge: f64) -> Result<MStepOutput> {
    m_step_impl(stats, anchor, ridge, true)
}

fn m_step_impl(stats: &SufficientStats, anchor: usize, ridge: f64, expanded: bool) -> Result<MStepOutput> {
    let prev = &stats.params;
    let n = prev.n_indicators();
    if anchor >= n {
        return Err(Error::Input(format!("anchor index {anchor} out of range")));
    }
    if stats.n_rows < 1.0 {
        return Err(Error::Input("no observed periods".into()));
    }
    let frozen: Vec<usize> = (0..n)
        .filter(|&i| i != anchor && stats.obs_count[i] < 2)
        .collect();
    // Expansion would rescale frozen rows when mapping back, so it is off
    // whenever any row is frozen.
    let fixed_anchor = (!expanded || !frozen.is_empty() || stats.obs_count[anchor] < 2).then_some(anchor);
    let (c, lambda, sigma, sigma_repaired) = measurement_update(stats, fixed_anchor, &frozen, ridge)?;
    let (rho, trend, sigma2_eta, eta_repaired) = transition_update(stats, ridge)?;

    let mut v = prev.to_values();
    v.c = c;
    v.lambda = lambda;
    v.sigma = (0..n).map(|i| (0..n).map(|j| sigma[(i, j)]).collect()).collect();
    v.rho = rho;
    v.a = trend.a;
    v.b = trend.b;
    v.cq = trend.cq;
    v.sigma2_eta = sigma2_eta;
    v.normalize(anchor)?;
    Ok(MStepOutput {
        params: ModelParams::try_from(v)?,
        ridge_repaired: sigma_repaired || eta_repaired,
        frozen,
    })
}

type MeasurementUpdate = (Vec<f64>, Vec<f64>, DMatrix<f64>, bool);

fn measurement_update(
    st: &SufficientStats,
    anchor: Option<usize>,
    frozen: &[usize],
    ridge: f64,
) -> Result<MeasurementUpdate> {
    let prev = &st.params;
    let n = prev.n_indicators();
    let nr = st.n_rows;
    let szz = nalgebra::Matrix2::new(nr, st.sum_x, st.sum_x, st.sum_xx);
    let det = szz.determinant();
    if !(det > 1e-12 * nr * st.sum_xx.abs().max(1.0)) {
        return Err(Error::SingularNormalEquations {
            block: "measurement (state moments degenerate)".into(),
        });
    }
    let szz_inv = szz.try_inverse().ok_or_else(|| Error::SingularNormalEquations {
        block: "measurement".into(),
    })?;

    let mut fixed: Vec<usize> = anchor.into_iter().collect();
    fixed.extend_from_slice(frozen);
    fixed.sort_unstable();
    let free: Vec<usize> = (0..n).filter(|i| !fixed.contains(i)).collect();

    // B = [c λ], N×2.
    let mut b = DMatrix::<f64>::zeros(n, 2);
    for &i in &fixed {
        if Some(i) == anchor {
            b[(i, 0)] = 0.0;
            b[(i, 1)] = 1.0;
        } else {
            b[(i, 0)] = prev.intercepts()[i];
            b[(i, 1)] = prev.loadings()[i];
        }
    }
    let syz = DMatrix::from_fn(n, 2, |i, j| if j == 0 { st.sum_y[i] } else { st.sum_yx[i] });
    let szz_d = DMatrix::from_fn(2, 2, |i, j| szz[(i, j)]);
    let szz_inv_d = DMatrix::from_fn(2, 2, |i, j| szz_inv[(i, j)]);

    if fixed.is_empty() {
        // Identical regressors in every row: the SUR estimator is OLS.
        let b_all = &syz * &szz_inv_d;
        b.copy_from(&b_all);
    } else if !free.is_empty() {
        let sig = prev.sigma();
        let kf = fixed.len();
        // R_F = S_yz,F − B_F S_zz
        let b_f = DMatrix::from_fn(kf, 2, |r, j| b[(fixed[r], j)]);
        let syz_f = DMatrix::from_fn(kf, 2, |r, j| syz[(fixed[r], j)]);
        let r_f = syz_f - &b_f * &szz_d;
        let s_ff = DMatrix::from_fn(kf, kf, |r, s| sig[(fixed[r], fixed[s])]);
        let s_uf = DMatrix::from_fn(free.len(), kf, |r, s| sig[(free[r], fixed[s])]);
        let chol = s_ff.cholesky().ok_or_else(|| Error::SingularNormalEquations {
            block: "measurement (fixed-row covariance)".into(),
        })?;
        let correction = &s_uf * chol.solve(&r_f);
        let syz_u = DMatrix::from_fn(free.len(), 2, |r, j| syz[(free[r], j)]);
        let b_u = (syz_u - correction) * &szz_inv_d;
        for (r, &i) in free.iter().enumerate() {
            b[(i, 0)] = b_u[(r, 0)];
            b[(i, 1)] = b_u[(r, 1)];
        }
    }

    // Residual r_t = y_t − c − λ x_t = (level − c) + (slope − λ) x_t + noise,
    // accumulated period by period to avoid cancellation.
    let c_vec = DVector::from_fn(n, |i, _| b[(i, 0)]);
    let l_vec = DVector::from_fn(n, |i, _| b[(i, 1)]);
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    for rm in &st.row_moments {
        let slope = &rm.slope - &l_vec;
        let mean = &rm.level - &c_vec + &slope * rm.mean;
        sigma += &mean * mean.transpose() + &slope * slope.transpose() * rm.var;
        if let Some(cc) = &rm.cond_cov {
            sigma += cc;
        }
    }
    sigma /= nr;
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    let (sigma, repaired) = floor_eigenvalues(sigma, ridge)?;
    let c = (0..n).map(|i| b[(i, 0)]).collect();
    let lambda = (0..n).map(|i| b[(i, 1)]).collect();
    Ok((c, lambda, sigma, repaired))
}

/// Raises eigenvalues of a symmetric matrix below `floor` up to `floor`.
/// This is the maximizer of the Gaussian covariance likelihood subject to
/// the eigenvalue bound.
fn floor_eigenvalues(sigma: DMatrix<f64>, floor: f64) -> Result<(DMatrix<f64>, bool)> {
    let eig = SymmetricEigen::new(sigma.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= floor && min > 0.0 && sigma.clone().cholesky().is_some() {
        return Ok((sigma, false));
    }
    if floor <= 0.0 {
        return Err(Error::Numerical(
            "Σ update lost positive definiteness and ridge is 0".into(),
        ));
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&vals) * q.transpose();
    let n = out.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok((out, true))
}

/// Per-month Cholesky factors of the transition Gram blocks.
struct TransitionSystem<'a> {
    st: &'a SufficientStats,
    chol: Vec<nalgebra::Cholesky<f64, nalgebra::U3>>,
    /// Column scaling between raw and scaled coefficients.
    col_scale: [f64; DESIGN_COLS],
    /// Lower bound on σ²_η.
    floor: f64,
}

struct ProfilePoint {
    objective: f64,
    beta_scaled: [f64; DESIGN_COLS],
    ssr: f64,
}

impl<'a> TransitionSystem<'a> {
    fn new(st: &'a SufficientStats, floor: f64) -> Result<Self> {
        let mut chol = Vec::with_capacity(12);
        for m in 0..12 {
            let g = st.month_gram[m];
            // equilibrate so the factorization is insensitive to TIME scaling
            let d = Vector3::from_fn(|i, _| g[(i, i)].sqrt());
            let singular = || Error::SingularNormalEquations {
                block: format!("transition, month {}", MONTH_ABBREV[m]),
            };
            if d.iter().any(|v| !(*v > 0.0)) {
                return Err(singular());
            }
            let scaled = Matrix3::from_fn(|i, j| g[(i, j)] / (d[i] * d[j]));
            let c = scaled.cholesky().ok_or_else(singular)?;
            let diag_min = (0..3).map(|i| c.l_dirty()[(i, i)]).fold(f64::INFINITY, f64::min);
            if diag_min < 1e-7 {
                return Err(singular());
            }
            chol.push(g.cholesky().ok_or_else(singular)?);
        }
        let tau = st.time_scale;
        let mut col_scale = [1.0; DESIGN_COLS];
        for m in 0..12 {
            col_scale[12 + m] = tau;
            col_scale[24 + m] = tau * tau;
        }
        Ok(Self {
            st,
            chol,
            col_scale,
            floor,
        })
    }

    fn solve_blocks(&self, rhs: &[f64; DESIGN_COLS]) -> [f64; DESIGN_COLS] {
        let mut out = [0.0; DESIGN_COLS];
        for m in 0..12 {
            let v = Vector3::new(rhs[m], rhs[12 + m], rhs[24 + m]);
            let s = self.chol[m].solve(&v);
            out[m] = s[0];
            out[12 + m] = s[1];
            out[24 + m] = s[2];
        }
        out
    }

    fn profile(&self, rho: f64) -> ProfilePoint {
        let st = self.st;
        let w = 1.0 - rho * rho;
        let g_raw = stationary_mean_weights(rho, &st.first_row);
        let mut g = [0.0; DESIGN_COLS];
        for j in 0..DESIGN_COLS {
            g[j] = g_raw[j] / self.col_scale[j];
        }
        let mut r = [0.0; DESIGN_COLS];
        for m in 0..12 {
            for k in 0..3 {
                r[12 * k + m] = st.month_cur[m][k] - rho * st.month_lag[m][k];
            }
        }
        for j in 0..DESIGN_COLS {
            r[j] += w * g[j] * st.x1;
        }
        let u = self.solve_blocks(&r);
        let v = self.solve_blocks(&g);
        let gu: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        let gv: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        let coef = w * gu / (1.0 + w * gv);
        let mut beta = [0.0; DESIGN_COLS];
        for j in 0..DESIGN_COLS {
            beta[j] = u[j] - coef * v[j];
        }
        let ssr = self.expected_ssr(rho, &g_raw, &self.raw_beta(&beta));
        let t = st.n_periods as f64;
        let sigma2 = (ssr / t).max(self.floor);
        let objective = -0.5 * t * sigma2.ln() - 0.5 * ssr / sigma2 + 0.5 * w.ln();
        ProfilePoint {
            objective,
            beta_scaled: beta,
            ssr,
        }
    }

    /// Expected sum of squared transition residuals, including the
    /// initial-state term weighted by 1 − ρ². Summed term by term from the
    /// smoothed moments to avoid cancellation when residuals are tiny.
    fn expected_ssr(&self, rho: f64, g: &[f64; DESIGN_COLS], beta: &[f64; DESIGN_COLS]) -> f64 {
        let sm = &self.st.smoothed;
        let (m, v, c) = (&sm.smoothed_mean, &sm.smoothed_var, &sm.lag_one_cov);
        let g_mu: f64 = g.iter().zip(beta).map(|(a, b)| a * b).sum();
        let mut ssr = (1.0 - rho * rho) * (v[0] + (m[0] - g_mu).powi(2));
        for (t, row) in self.st.rows.iter().enumerate().skip(1) {
            let k = row.month;
            let mu = beta[k] + row.time * (beta[12 + k] + row.time * beta[24 + k]);
            let e = m[t] - rho * m[t - 1] - mu;
            ssr += v[t] + rho * rho * v[t - 1] - 2.0 * rho * c[t - 1] + e * e;
        }
        ssr.max(0.0)
    }

    fn raw_beta(&self, scaled: &[f64; DESIGN_COLS]) -> [f64; DESIGN_COLS] {
        let mut out = [0.0; DESIGN_COLS];
        for j in 0..DESIGN_COLS {
            out[j] = scaled[j] / self.col_scale[j];
        }
        out
    }
}

fn transition_update(st: &SufficientStats, ridge: f64) -> Result<(f64, TrendSeasonal, f64, bool)> {
    let floor = if ridge > 0.0 { ridge } else { f64::MIN_POSITIVE };
    let sys = TransitionSystem::new(st, floor)?;
    let prev_rho = st.params.rho();

    // Coarse grid in atanh(ρ), then golden-section refinement around the best point.
    const GRID: usize = 101;
    const U_MAX: f64 = 5.0;
    let grid_u: Vec<f64> = (0..GRID)
        .map(|k| -U_MAX + 2.0 * U_MAX * k as f64 / (GRID - 1) as f64)
        .collect();
    let values: Vec<f64> = grid_u.iter().map(|u| sys.profile(u.tanh()).objective).collect();
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (k, v)| if *v > values[b] { k } else { b });
    let mut lo = grid_u[best.saturating_sub(1)];
    let mut hi = grid_u[(best + 1).min(GRID - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = sys.profile(x1.tanh()).objective;
    let mut f2 = sys.profile(x2.tanh()).objective;
    while hi - lo > 1e-11 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = sys.profile(x2.tanh()).objective;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = sys.profile(x1.tanh()).objective;
        }
    }
    let mut candidates = vec![
        (0.5 * (lo + hi)).tanh(),
        grid_u[best].tanh(),
        prev_rho,
    ];
    candidates.retain(|r| r.abs() < 1.0);
    let (rho, point) = candidates
        .into_iter()
        .map(|r| (r, sys.profile(r)))
        .fold(None::<(f64, ProfilePoint)>, |acc, (r, p)| match acc {
            Some((br, bp)) if bp.objective >= p.objective => Some((br, bp)),
            _ => Some((r, p)),
        })
        .expect("previous rho is always a candidate");

    let beta = sys.raw_beta(&point.beta_scaled);
    let mut sigma2 = point.ssr / st.n_periods as f64;
    let repaired = !(sigma2 >= floor);
    if repaired {
        sigma2 = floor;
    }
    Ok((rho, TrendSeasonal::from_vector(&beta), sigma2, repaired))
}

/// Starting values: c = 0, λ = 1, Σ = 0.1·I, σ²_η = 0.1, ρ = 0.5, and the
/// trend/seasonal coefficients from least squares of the quasi-differenced
/// anchor series `y_t − 0.5·y_{t−1}` on the design rows.
pub fn default_start(
    panel: &IndicatorPanel,
    design: &DesignMatrix,
    anchor: usize,
) -> Result<ModelParams> {
    const RHO0: f64 = 0.5;
    let n = panel.n_indicators();
    if anchor >= n {
        return Err(Error::Input(format!("anchor index {anchor} out of range")));
    }
    let tau = design.rows().iter().fold(1.0f64, |m, r| m.max(r.time.abs()));
    let mut gram = [Matrix3::<f64>::zeros(); 12];
    let mut rhs = [Vector3::<f64>::zeros(); 12];
    let mut sum = [0.0; 12];
    let mut count = [0usize; 12];
    for t in 1..panel.len() {
        if let (Some(y), Some(y_prev)) = (panel.value(t, anchor), panel.value(t - 1, anchor)) {
            let row = design.row(t);
            let z = scaled_regressors(row, tau);
            let target = y - RHO0 * y_prev;
            gram[row.month] += z * z.transpose();
            rhs[row.month] += z * target;
            sum[row.month] += target;
            count[row.month] += 1;
        }
    }
    let mut trend = TrendSeasonal::zero();
    for m in 0..12 {
        let solved = if count[m] >= 3 {
            let d = Vector3::from_fn(|i, _| gram[m][(i, i)].sqrt());
            Matrix3::from_fn(|i, j| gram[m][(i, j)] / (d[i] * d[j]))
                .cholesky()
                .filter(|c| (0..3).all(|i| c.l_dirty()[(i, i)] > 1e-7))
                .and_then(|_| gram[m].cholesky())
                .map(|c| c.solve(&rhs[m]))
        } else {
            None
        };
        match solved {
            Some(s) => {
                trend.a[m] = s[0];
                trend.b[m] = s[1] / tau;
                trend.cq[m] = s[2] / (tau * tau);
            }
            None if count[m] > 0 => trend.a[m] = sum[m] / count[m] as f64,
            None => {}
        }
    }
    let mut c = vec![0.0; n];
    c[anchor] = 0.0;
    ModelParams::try_from(ParamValues {
        indicators: panel.names().to_vec(),
        anchor: panel.names()[anchor].clone(),
        c,
        lambda: vec![1.0; n],
        sigma: (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.1 } else { 0.0 }).collect())
            .collect(),
        rho: RHO0,
        a: trend.a,
        b: trend.b,
        cq: trend.cq,
        sigma2_eta: 0.1,
    })
}

fn max_abs_change(a: &ModelParams, b: &ModelParams) -> f64 {
    let va = a.to_values();
    let vb = b.to_values();
    let mut m = 0.0f64;
    let mut upd = |x: f64, y: f64| m = m.max((x - y).abs());
    for (x, y) in va.c.iter().zip(&vb.c) {
        upd(*x, *y);
    }
    for (x, y) in va.lambda.iter().zip(&vb.lambda) {
        upd(*x, *y);
    }
    for (ra, rb) in va.sigma.iter().zip(&vb.sigma) {
        for (x, y) in ra.iter().zip(rb) {
            upd(*x, *y);
        }
    }
    upd(va.rho, vb.rho);
    for k in 0..12 {
        upd(va.a[k], vb.a[k]);
        upd(va.b[k], vb.b[k]);
        upd(va.cq[k], vb.cq[k]);
    }
    upd(va.sigma2_eta, vb.sigma2_eta);
    m
}

/// Squared extrapolation from three successive EM iterates, in coordinates
/// where Σ is its Cholesky factor, ρ is `atanh ρ` and σ²_η is logged.
struct Extrapolation {
    layout: FreeParamLayout,
    u0: Vec<f64>,
    r: Vec<f64>,
    v: Vec<f64>,
    /// Unconstrained step length, always ≤ −1.
    alpha: f64,
}

impl Extrapolation {
    fn new(p0: &ModelParams, p1: &ModelParams, p2: &ModelParams, frozen: &[usize]) -> Option<Self> {
        let layout = FreeParamLayout::new(p0, frozen);
        let (ro, last) = (layout.len() - DESIGN_COLS - 2, layout.len() - 1);
        let to_u = |p: &ModelParams| -> Option<Vec<f64>> {
            let mut v = layout.pack(p).ok()?;
            v[ro] = v[ro].atanh();
            v[last] = v[last].ln();
            v.iter().all(|x| x.is_finite()).then_some(v)
        };
        let (u0, u1, u2) = (to_u(p0)?, to_u(p1)?, to_u(p2)?);
        let r: Vec<f64> = u1.iter().zip(&u0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = (0..u0.len()).map(|k| u2[k] - 2.0 * u1[k] + u0[k]).collect();
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (vn > 0.0).then(|| Extrapolation {
            alpha: (-rn / vn).min(-1.0),
            layout,
            u0,
            r,
            v,
        })
    }

    fn point(&self, template: &ModelParams, alpha: f64) -> Option<ModelParams> {
        let (ro, last) = (self.layout.len() - DESIGN_COLS - 2, self.layout.len() - 1);
        let mut u: Vec<f64> = (0..self.u0.len())
            .map(|k| self.u0[k] - 2.0 * alpha * self.r[k] + alpha * alpha * self.v[k])
            .collect();
        u[ro] = u[ro].tanh();
        u[last] = u[last].exp();
        let p = self.layout.unpack(template, &u).ok()?;
        (p.rho().abs() < 1.0 - 1e-10 && p.sigma2_eta() > 0.0).then_some(p)
    }
}

/// Alternates E- and M-steps until both the relative log-likelihood change
/// and the max-abs parameter change fall below their tolerances, or
/// `max_iters` iterations have run.
pub fn fit_em(
    panel: &IndicatorPanel,
    design: &DesignMatrix,
    anchor: usize,
    config: &EMConfig,
) -> Result<FitResult> {
    config.validate()?;
    if panel.is_empty() {
        return Err(Error::Input("empty panel".into()));
    }
    if panel.len() != design.len() {
        return Err(Error::Input("panel and design lengths differ".into()));
    }
    if anchor >= panel.n_indicators() {
        return Err(Error::Input(format!("anchor index {anchor} out of range")));
    }
    if panel.observed_count(anchor) == 0 {
        return Err(Error::Input(format!(
            "anchor indicator {} has no observations",
            panel.names()[anchor]
        )));
    }
    let mut params = match &config.seed_params {
        Some(p) if p.anchor() == anchor => p.clone(),
        Some(p) => p.renormalize(anchor)?,
        None => default_start(panel, design, anchor)?,
    };
    if params.names() != panel.names() {
        return Err(Error::Input("seed parameters do not match panel indicators".into()));
    }

    let mut trace: Vec<f64> = Vec::new();
    let mut last_change = f64::INFINITY;
    let mut converged = false;
    let mut ridge_repairs = 0;
    let mut frozen = Vec::new();
    let mut stats = e_step(&params, panel, design)?;
    let mut step_max = 1.0f64;
    let m_step = |s: &SufficientStats| {
        if config.parameter_expansion {
            m_step_expanded(s, anchor, config.ridge)
        } else {
            m_step_impl(s, anchor, config.ridge, false)
        }
    };
    for iter in 0..config.max_iters {
        let ll = stats.loglik;
        if let Some(&prev) = trace.last() {
            if ll < prev - MONOTONE_SLACK {
                return Err(Error::NonMonotone {
                    iteration: iter,
                    previous: prev,
                    current: ll,
                    drop: prev - ll,
                });
            }
            let rel = (ll - prev).abs() / prev.abs().max(1.0);
            trace.push(ll);
            if rel < config.loglik_tol && last_change < config.param_tol {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        if iter + 1 == config.max_iters {
            break;
        }
        let step = m_step(&stats)?;
        ridge_repairs += step.ridge_repaired as usize;
        frozen = step.frozen;
        let mut next = step.params;
        let mut next_stats = e_step(&next, panel, design)?;
        if config.acceleration {
            let step2 = m_step(&next_stats)?;
            ridge_repairs += step2.ridge_repaired as usize;
            let stats2 = e_step(&step2.params, panel, design)?;
            let mut best = (step2.params, stats2);
            if let Some(ex) = Extrapolation::new(&params, &next, &best.0, &frozen) {
                let mut alpha = ex.alpha.max(-step_max);
                if alpha == -step_max {
                    step_max *= 4.0;
                }
                while alpha < -1.0 {
                    let candidate = ex
                        .point(&params, alpha)
                        .and_then(|p| e_step(&p, panel, design).ok())
                        .and_then(|s| m_step(&s).ok())
                        .and_then(|m| e_step(&m.params, panel, design).ok().map(|s| (m.params, s)));
                    match candidate {
                        Some((p, s)) if s.loglik >= best.1.loglik => {
                            best = (p, s);
                            break;
                        }
                        _ => alpha = 0.5 * (alpha - 1.0),
                    }
                    if alpha > -1.0 - 1e-3 {
                        break;
                    }
                }
            }
            (next, next_stats) = best;
        }
        last_change = max_abs_change(&params, &next);
        params = next;
        stats = next_stats;
    }

    let (std_errors, hessian_ok, max_scaled_gradient, hessian_problem) = if config.standard_errors {
        let report = standard_errors(&params, panel, design, &frozen)?;
        (
            report.std_errors,
            report.hessian_ok,
            Some(report.max_scaled_gradient),
            report.problem,
        )
    } else {
        (None, false, None, None)
    };

    Ok(FitResult {
        frozen_indicators: frozen.iter().map(|&i| panel.names()[i].clone()).collect(),
        params,
        loglik_trace: trace,
        converged,
        reason: if converged {
            ConvergenceReason::Tolerance
        } else {
            ConvergenceReason::MaxIterations
        },
        std_errors,
        hessian_ok,
        max_scaled_gradient,
        hessian_problem,
        ridge_repairs,
        time_origin: design.time_origin(),
    })
}
