//! Central-difference Hessian of the log-likelihood and the implied
//! asymptotic standard errors.
//!
//! Σ enters the free-parameter vector through its lower Cholesky factor so
//! that every perturbed point stays positive semi-definite; standard errors
//! for the Σ entries follow by the delta method.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::MONTH_ABBREV;
use crate::error::{Error, Result};
use crate::kalman::log_likelihood;
use crate::model::{unconditional_init, DesignMatrix, ModelParams, TrendSeasonal, DESIGN_COLS};
use crate::panel::IndicatorPanel;

/// Relative finite-difference step.
const STEP: f64 = 1e-4;

/// Standard errors shaped like the model parameters; entries that are not
/// estimated (the anchor, frozen indicators) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStdErrors {
    pub c: Vec<Option<f64>>,
    pub lambda: Vec<Option<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub rho: f64,
    pub a: [f64; 12],
    pub b: [f64; 12],
    pub cq: [f64; 12],
    pub sigma2_eta: f64,
}

impl ParamStdErrors {
    /// All reported standard errors, in no particular order.
    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.c.iter().chain(&self.lambda).flatten().copied().collect();
        let n = self.sigma.len();
        for i in 0..n {
            for j in 0..=i {
                v.push(self.sigma[i][j]);
            }
        }
        v.push(self.rho);
        v.extend(self.a.iter().chain(&self.b).chain(&self.cq));
        v.push(self.sigma2_eta);
        v
    }
}

#[derive(Debug, Clone)]
pub struct StdErrorReport {
    pub std_errors: Option<ParamStdErrors>,
    pub hessian_ok: bool,
    /// Largest |∂ℓ/∂θ_k|·SE(θ_k), the log-likelihood change per standard
    /// error. Falls back to |∂ℓ/∂θ_k|·max(|θ_k|, scale_k) when the Hessian
    /// is unusable.
    pub max_scaled_gradient: f64,
    /// Why `hessian_ok` is false, if it is.
    pub problem: Option<String>,
}

/// Ordering of the free parameters:
/// `c[free], λ[free], L (lower triangle, row-major), ρ, a, b, cq, σ²_η`.
#[derive(Debug, Clone)]
pub struct FreeParamLayout {
    n: usize,
    free: Vec<usize>,
}

impl FreeParamLayout {
    pub fn new(params: &ModelParams, frozen: &[usize]) -> Self {
        let free = (0..params.n_indicators())
            .filter(|&i| i != params.anchor() && !frozen.contains(&i))
            .collect();
        Self {
            n: params.n_indicators(),
            free,
        }
    }

    fn n_chol(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    fn chol_offset(&self) -> usize {
        2 * self.free.len()
    }

    fn rho_offset(&self) -> usize {
        self.chol_offset() + self.n_chol()
    }

    pub fn len(&self) -> usize {
        self.rho_offset() + 1 + DESIGN_COLS + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn free_indicators(&self) -> &[usize] {
        &self.free
    }

    pub fn names(&self, params: &ModelParams) -> Vec<String> {
        let names = params.names();
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.free.iter().map(|&i| format!("c[{}]", names[i])));
        out.extend(self.free.iter().map(|&i| format!("lambda[{}]", names[i])));
        for i in 0..self.n {
            for j in 0..=i {
                out.push(format!("chol[{},{}]", names[i], names[j]));
            }
        }
        out.push("rho".into());
        for prefix in ["a", "b", "cq"] {
            out.extend(MONTH_ABBREV.iter().map(|m| format!("{prefix}[{m}]")));
        }
        out.push("sigma2_eta".into());
        out
    }

    pub fn pack(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(self.free.iter().map(|&i| params.intercepts()[i]));
        v.extend(self.free.iter().map(|&i| params.loadings()[i]));
        let l = params
            .sigma()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("Σ not positive definite".into()))?
            .l();
        for i in 0..self.n {
            for j in 0..=i {
                v.push(l[(i, j)]);
            }
        }
        v.push(params.rho());
        v.extend(params.trend().to_vector());
        v.push(params.sigma2_eta());
        Ok(v)
    }

    pub fn unpack(&self, template: &ModelParams, theta: &[f64]) -> Result<ModelParams> {
        if theta.len() != self.len() {
            return Err(Error::Input("free-parameter vector has wrong length".into()));
        }
        let mut v = template.to_values();
        let k = self.free.len();
        for (r, &i) in self.free.iter().enumerate() {
            v.c[i] = theta[r];
            v.lambda[i] = theta[k + r];
        }
        let l = self.chol_matrix(theta);
        let sigma = &l * l.transpose();
        v.sigma = (0..self.n)
            .map(|i| (0..self.n).map(|j| sigma[(i, j)]).collect())
            .collect();
        let ro = self.rho_offset();
        v.rho = theta[ro];
        let trend = TrendSeasonal::from_vector(&theta[ro + 1..ro + 1 + DESIGN_COLS]);
        v.a = trend.a;
        v.b = trend.b;
        v.cq = trend.cq;
        v.sigma2_eta = theta[ro + 1 + DESIGN_COLS];
        ModelParams::try_from(v)
    }

    fn chol_matrix(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        let mut k = self.chol_offset();
        for i in 0..self.n {
            for j in 0..=i {
                l[(i, j)] = theta[k];
                k += 1;
            }
        }
        l
    }

    /// Natural magnitude of each coordinate, used to size difference steps.
    pub fn scales(&self, design: &DesignMatrix) -> Vec<f64> {
        let mut s = vec![1.0; 2 * self.free.len()];
        s.extend(std::iter::repeat(1e-2).take(self.n_chol()));
        s.push(1.0);
        s.extend(design.column_scales().iter().map(|v| 1.0 / v));
        s.push(1e-3);
        s
    }
}

/// Value, gradient and Hessian from central differences.
#[derive(Debug, Clone)]
pub struct NumericalDerivatives {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: DMatrix<f64>,
}

/// Central-difference gradient and Hessian of `f` at `theta` with per-
/// coordinate steps. Evaluation points are computed in parallel; the result
/// does not depend on evaluation order. Non-finite function values are an error.
pub fn numerical_hessian<F>(f: &F, theta: &[f64], steps: &[f64]) -> Result<NumericalDerivatives>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let p = theta.len();
    if steps.len() != p {
        return Err(Error::Input("step vector has wrong length".into()));
    }
    if steps.iter().zip(theta).any(|(h, x)| !(*h > 0.0) || x + h == *x) {
        return Err(Error::Numerical("finite-difference step underflow".into()));
    }
    // (i, j, si, sj): displacement si·h_i e_i + sj·h_j e_j.
    let mut points: Vec<(usize, usize, f64, f64)> = vec![(0, 0, 0.0, 0.0)];
    for i in 0..p {
        points.push((i, i, 1.0, 0.0));
        points.push((i, i, -1.0, 0.0));
    }
    for i in 0..p {
        for j in 0..i {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                points.push((i, j, si, sj));
            }
        }
    }
    let values: Vec<f64> = points
        .par_iter()
        .map(|&(i, j, si, sj)| {
            let mut x = theta.to_vec();
            x[i] += si * steps[i];
            if i != j {
                x[j] += sj * steps[j];
            }
            f(&x)
        })
        .collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite function value at difference point {k}"
        )));
    }
    let f0 = values[0];
    let mut gradient = vec![0.0; p];
    let mut h = DMatrix::zeros(p, p);
    for i in 0..p {
        let (fp, fm) = (values[1 + 2 * i], values[2 + 2 * i]);
        gradient[i] = (fp - fm) / (2.0 * steps[i]);
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]);
    }
    let mut k = 1 + 2 * p;
    for i in 0..p {
        for j in 0..i {
            let (pp, pm, mp, mm) = (values[k], values[k + 1], values[k + 2], values[k + 3]);
            k += 4;
            let v = (pp - pm - mp + mm) / (4.0 * steps[i] * steps[j]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(NumericalDerivatives {
        value: f0,
        gradient,
        hessian: h,
    })
}

/// Inverse of the negative Hessian, or `None` if it is not positive definite.
pub fn covariance_from_hessian(hessian: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let neg = -hessian;
    let chol = neg.cholesky()?;
    let cov = chol.inverse();
    cov.diagonal().iter().all(|v| *v > 0.0 && v.is_finite()).then_some(cov)
}

/// Standard errors of all free parameters at `params`, an (approximate)
/// maximizer of the log-likelihood on `panel`.
pub fn standard_errors(
    params: &ModelParams,
    panel: &IndicatorPanel,
    design: &DesignMatrix,
    frozen: &[usize],
) -> Result<StdErrorReport> {
    let layout = FreeParamLayout::new(params, frozen);
    let theta = layout.pack(params)?;
    let scales = layout.scales(design);
    let steps: Vec<f64> = theta
        .iter()
        .zip(&scales)
        .map(|(x, s)| STEP * x.abs().max(*s))
        .collect();
    let first = *design.row(0);
    let loglik = |x: &[f64]| -> f64 {
        layout
            .unpack(params, x)
            .and_then(|p| {
                let init = unconditional_init(&p, &first);
                log_likelihood(&p, panel, design, &init)
            })
            .unwrap_or(f64::NAN)
    };
    if !loglik(&theta).is_finite() {
        return Err(Error::Numerical("log-likelihood not finite at the estimate".into()));
    }

    let flagged = |problem: String, grad: f64| StdErrorReport {
        std_errors: None,
        hessian_ok: false,
        max_scaled_gradient: grad,
        problem: Some(problem),
    };
    let deriv = match numerical_hessian(&loglik, &theta, &steps) {
        Ok(d) => d,
        Err(e) => return Ok(flagged(e.to_string(), f64::NAN)),
    };
    let max_scaled_gradient = deriv
        .gradient
        .iter()
        .zip(theta.iter().zip(&scales))
        .map(|(g, (x, s))| (g * x.abs().max(*s)).abs())
        .fold(0.0, f64::max);
    let cov = match covariance_from_hessian(&deriv.hessian) {
        Some(c) => c,
        None => {
            return Ok(flagged(
                "negative Hessian is not positive definite".into(),
                max_scaled_gradient,
            ))
        }
    };

    let max_scaled_gradient = deriv
        .gradient
        .iter()
        .enumerate()
        .map(|(k, g)| (g * cov[(k, k)].sqrt()).abs())
        .fold(0.0, f64::max);

    let n = params.n_indicators();
    let k = layout.free.len();
    let se = |i: usize| cov[(i, i)].sqrt();
    let mut c = vec![None; n];
    let mut lambda = vec![None; n];
    for (r, &i) in layout.free.iter().enumerate() {
        c[i] = Some(se(r));
        lambda[i] = Some(se(k + r));
    }

    // Delta method: Σ_ij = Σ_k L_ik L_jk.
    let l = layout.chol_matrix(&theta);
    let off = layout.chol_offset();
    let idx = |a: usize, b: usize| off + a * (a + 1) / 2 + b;
    let mut sigma = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut grad: Vec<(usize, f64)> = Vec::new();
            for b in 0..=j {
                // ∂/∂L_ib contributes L_jb, ∂/∂L_jb contributes L_ib
                grad.push((idx(i, b), l[(j, b)]));
                grad.push((idx(j, b), l[(i, b)]));
            }
            let mut var = 0.0;
            for &(p, gp) in &grad {
                for &(q, gq) in &grad {
                    var += gp * gq * cov[(p, q)];
                }
            }
            let s = var.max(0.0).sqrt();
            sigma[i][j] = s;
            sigma[j][i] = s;
        }
    }

    let ro = layout.rho_offset();
    let mut a = [0.0; 12];
    let mut b = [0.0; 12];
    let mut cq = [0.0; 12];
    for m in 0..12 {
        a[m] = se(ro + 1 + m);
        b[m] = se(ro + 13 + m);
        cq[m] = se(ro + 25 + m);
    }
    Ok(StdErrorReport {
        std_errors: Some(ParamStdErrors {
            c,
            lambda,
            sigma,
            rho: se(ro),
            a,
            b,
            cq,
            sigma2_eta: se(ro + 1 + DESIGN_COLS),
        }),
        hessian_ok: true,
        max_scaled_gradient,
        problem: None,
    })
}
