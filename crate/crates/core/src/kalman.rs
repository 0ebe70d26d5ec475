//! Kalman filter and RTS smoother for the scalar-state, multi-indicator model.
//!
//! Periods with partially missing observations update on the observed
//! sub-vector only; fully missing periods skip the measurement update and add
//! nothing to the log-likelihood. The innovation covariance is factored by
//! Cholesky and the filtered variance uses the Joseph form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{DesignMatrix, ModelParams, StateInit};
use crate::panel::IndicatorPanel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub predicted_mean: Vec<f64>,
    pub predicted_var: Vec<f64>,
    pub filtered_mean: Vec<f64>,
    pub filtered_var: Vec<f64>,
    pub loglik: f64,
    pub per_period_loglik: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput {
    pub smoothed_mean: Vec<f64>,
    pub smoothed_var: Vec<f64>,
    /// `lag_one_cov[t] = Cov(x_{t+1}, x_t | all data)`, zero-based `t`.
    pub lag_one_cov: Vec<f64>,
    pub loglik: f64,
}

fn check_inputs(params: &ModelParams, panel: &IndicatorPanel, design: &DesignMatrix) -> Result<()> {
    if panel.is_empty() {
        return Err(Error::Input("empty panel".into()));
    }
    if panel.len() != design.len() {
        return Err(Error::Input(format!(
            "panel has {} periods but design has {} rows",
            panel.len(),
            design.len()
        )));
    }
    if panel.names() != params.names() {
        return Err(Error::Input(format!(
            "panel indicators {:?} do not match parameter indicators {:?}",
            panel.names(),
            params.names()
        )));
    }
    Ok(())
}

pub fn kalman_filter(
    params: &ModelParams,
    panel: &IndicatorPanel,
    design: &DesignMatrix,
    init: &StateInit,
) -> Result<FilterOutput> {
    check_inputs(params, panel, design)?;
    let t_len = panel.len();
    let sigma = params.sigma();
    let c = params.intercepts();
    let lambda = params.loadings();
    let rho = params.rho();

    let mut out = FilterOutput {
        predicted_mean: Vec::with_capacity(t_len),
        predicted_var: Vec::with_capacity(t_len),
        filtered_mean: Vec::with_capacity(t_len),
        filtered_var: Vec::with_capacity(t_len),
        loglik: 0.0,
        per_period_loglik: Vec::with_capacity(t_len),
    };

    let mut a = init.mean;
    let mut p = init.variance;
    for t in 0..t_len {
        if t > 0 {
            let mf = out.filtered_mean[t - 1];
            let pf = out.filtered_var[t - 1];
            a = rho * mf + design.row(t).contribution(params.trend());
            p = rho * rho * pf + params.sigma2_eta();
        }
        out.predicted_mean.push(a);
        out.predicted_var.push(p);

        let obs = panel.observed(t);
        if obs.is_empty() {
            out.filtered_mean.push(a);
            out.filtered_var.push(p);
            out.per_period_loglik.push(0.0);
            continue;
        }
        let k = obs.len();
        let lam = DVector::from_iterator(k, obs.iter().map(|&i| lambda[i]));
        let innov = DVector::from_iterator(
            k,
            obs.iter().map(|&i| panel.value(t, i).unwrap() - c[i] - lambda[i] * a),
        );
        let sigma_oo = DMatrix::from_fn(k, k, |r, s| sigma[(obs[r], obs[s])]);
        let f = &sigma_oo + &lam * lam.transpose() * p;
        let chol = f.cholesky().ok_or(Error::SingularInnovation { period: t })?;
        let f_inv_v = chol.solve(&innov);
        let f_inv_lam = chol.solve(&lam);
        let log_det: f64 = chol.l_dirty().diagonal().iter().take(k).map(|d| 2.0 * d.ln()).sum();
        if !log_det.is_finite() {
            return Err(Error::SingularInnovation { period: t });
        }

        let gain = &f_inv_lam * p;
        let k_lam = gain.dot(&lam);
        let mf = a + gain.dot(&innov);
        let joseph = (1.0 - k_lam) * (1.0 - k_lam) * p + (gain.transpose() * &sigma_oo * &gain)[(0, 0)];
        let quad = innov.dot(&f_inv_v);
        let ll = -0.5 * (k as f64 * LN_2PI + log_det + quad);

        out.filtered_mean.push(mf);
        out.filtered_var.push(joseph.max(0.0));
        out.per_period_loglik.push(ll);
    }
    out.loglik = out.per_period_loglik.iter().sum();
    Ok(out)
}

/// RTS backward pass over a completed filter run.
pub fn smooth_filtered(params: &ModelParams, filt: &FilterOutput) -> SmootherOutput {
    let t_len = filt.filtered_mean.len();
    let rho = params.rho();
    let mut mean = filt.filtered_mean.clone();
    let mut var = filt.filtered_var.clone();
    let mut lag = vec![0.0; t_len.saturating_sub(1)];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let j = filt.filtered_var[t] * rho / filt.predicted_var[t + 1];
        mean[t] = filt.filtered_mean[t] + j * (mean[t + 1] - filt.predicted_mean[t + 1]);
        var[t] = (filt.filtered_var[t] + j * j * (var[t + 1] - filt.predicted_var[t + 1])).max(0.0);
        lag[t] = j * var[t + 1];
    }
    SmootherOutput {
        smoothed_mean: mean,
        smoothed_var: var,
        lag_one_cov: lag,
        loglik: filt.loglik,
    }
}

pub fn kalman_smoother(
    params: &ModelParams,
    panel: &IndicatorPanel,
    design: &DesignMatrix,
    init: &StateInit,
) -> Result<SmootherOutput> {
    let filt = kalman_filter(params, panel, design, init)?;
    Ok(smooth_filtered(params, &filt))
}

/// Gaussian log-likelihood of the observed entries.
pub fn log_likelihood(
    params: &ModelParams,
    panel: &IndicatorPanel,
    design: &DesignMatrix,
    init: &StateInit,
) -> Result<f64> {
    kalman_filter(params, panel, design, init).map(|f| f.loglik)
}
