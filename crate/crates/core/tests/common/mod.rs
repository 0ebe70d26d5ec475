#![allow(dead_code)]

//! Brute-force reference computations shared by the integration tests.

use icefactor::{
    build_design_matrix, DesignMatrix, IndicatorPanel, ModelParams, ParamValues, StateInit, YearMonth,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NAMES: [&str; 4] = ["SII", "JAXA", "Bremen", "Goddard"];

pub struct Instance {
    pub params: ModelParams,
    pub init: StateInit,
    pub panel: IndicatorPanel,
    pub design: DesignMatrix,
}

/// Random model and panel with up to 20% missing entries. Some rows may be
/// entirely missing.
pub fn random_instance(seed: u64, t_len: usize, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = NAMES[..n].iter().map(|s| s.to_string()).collect();
    let mut c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.5)).collect();
    c[0] = 0.0;
    lambda[0] = 1.0;
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.6..0.6));
    let s = &a * a.transpose() + DMatrix::identity(n, n) * rng.random_range(0.05..0.5);
    let sigma = (0..n).map(|i| (0..n).map(|j| s[(i, j)]).collect()).collect();
    let mut av = [0.0; 12];
    let mut bv = [0.0; 12];
    let mut cqv = [0.0; 12];
    for m in 0..12 {
        av[m] = rng.random_range(-2.0..2.0);
        bv[m] = rng.random_range(-0.1..0.1);
        cqv[m] = rng.random_range(-0.005..0.005);
    }
    let values = ParamValues {
        indicators: names.clone(),
        anchor: names[0].clone(),
        c,
        lambda,
        sigma,
        rho: rng.random_range(-0.95..0.95),
        a: av,
        b: bv,
        cq: cqv,
        sigma2_eta: rng.random_range(0.05..1.0),
    };
    let params = ModelParams::try_from(values).unwrap();
    let start = YearMonth::new(rng.random_range(1975..2015), rng.random_range(1..=12)).unwrap();
    let dates: Vec<YearMonth> = (0..t_len as i64).map(|k| start.add_months(k)).collect();
    let origin = start.add_months(-(rng.random_range(0..30) as i64));
    let design = build_design_matrix(&dates, origin).unwrap();
    let init = StateInit::new(rng.random_range(-3.0..3.0), rng.random_range(0.1..2.0)).unwrap();
    let rows = (0..t_len)
        .map(|_| {
            (0..n)
                .map(|_| (rng.random::<f64>() > 0.2).then(|| rng.random_range(-5.0..5.0)))
                .collect()
        })
        .collect();
    let panel = IndicatorPanel::new(dates, names, rows).unwrap();
    Instance { params, init, panel, design }
}

/// Moments of the stacked vector `(x_1..x_T, y_11..y_1N, ..., y_T1..y_TN)`.
pub struct JointGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub t_len: usize,
    pub n: usize,
}

impl JointGaussian {
    pub fn new(params: &ModelParams, design: &DesignMatrix, init: &StateInit) -> Self {
        let t_len = design.len();
        let n = params.n_indicators();
        let beta = params.trend().to_vector();
        let rho = params.rho();
        let mut mx = vec![init.mean; t_len];
        let mut vx = vec![init.variance; t_len];
        for t in 1..t_len {
            let d = design.row(t).dense();
            let mu: f64 = d.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            mx[t] = rho * mx[t - 1] + mu;
            vx[t] = rho * rho * vx[t - 1] + params.sigma2_eta();
        }
        let cx = |s: usize, t: usize| {
            let (lo, hi) = if s < t { (s, t) } else { (t, s) };
            rho.powi((hi - lo) as i32) * vx[lo]
        };
        let dim = t_len * (1 + n);
        let yi = |t: usize, i: usize| t_len + t * n + i;
        let mut mean = DVector::zeros(dim);
        let mut cov = DMatrix::zeros(dim, dim);
        let c = params.intercepts();
        let l = params.loadings();
        for t in 0..t_len {
            mean[t] = mx[t];
            for i in 0..n {
                mean[yi(t, i)] = c[i] + l[i] * mx[t];
            }
        }
        for s in 0..t_len {
            for t in 0..t_len {
                cov[(s, t)] = cx(s, t);
                for i in 0..n {
                    cov[(s, yi(t, i))] = l[i] * cx(s, t);
                    cov[(yi(t, i), s)] = l[i] * cx(s, t);
                    for j in 0..n {
                        let mut v = l[i] * l[j] * cx(s, t);
                        if s == t {
                            v += params.sigma()[(i, j)];
                        }
                        cov[(yi(s, i), yi(t, j))] = v;
                    }
                }
            }
        }
        JointGaussian { mean, cov, t_len, n }
    }

    pub fn y_index(&self, t: usize, i: usize) -> usize {
        self.t_len + t * self.n + i
    }
}

/// Mean and covariance of the full stacked vector given the observed entries,
/// plus the log-density of the observations. Uses LU solves throughout.
pub struct Conditioned {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub loglik: f64,
}

pub fn condition(joint: &JointGaussian, panel: &IndicatorPanel) -> Conditioned {
    let mut obs = Vec::new();
    let mut yv = Vec::new();
    for t in 0..joint.t_len {
        for i in 0..joint.n {
            if let Some(v) = panel.value(t, i) {
                obs.push(joint.y_index(t, i));
                yv.push(v);
            }
        }
    }
    let k = obs.len();
    if k == 0 {
        return Conditioned {
            mean: joint.mean.clone(),
            cov: joint.cov.clone(),
            loglik: 0.0,
        };
    }
    let dim = joint.mean.len();
    let c_oo = DMatrix::from_fn(k, k, |r, s| joint.cov[(obs[r], obs[s])]);
    let c_zo = DMatrix::from_fn(dim, k, |r, s| joint.cov[(r, obs[s])]);
    let resid = DVector::from_fn(k, |r, _| yv[r] - joint.mean[obs[r]]);
    let lu = c_oo.clone().lu();
    let w = lu.solve(&resid).unwrap();
    let g = lu.solve(&c_zo.transpose()).unwrap();
    let det = lu.determinant();
    assert!(det > 0.0);
    let loglik = -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + resid.dot(&w));
    Conditioned {
        mean: &joint.mean + &c_zo * w,
        cov: &joint.cov - &c_zo * g,
        loglik,
    }
}

/// Relative comparison with a negligible absolute floor for values near zero.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-13
}

pub fn start_1978() -> YearMonth {
    YearMonth::new(1978, 11).unwrap()
}
