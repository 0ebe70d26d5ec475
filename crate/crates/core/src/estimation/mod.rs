//! Parameter estimation: EM maximization of the Gaussian (pseudo-)likelihood
//! and standard errors from a numerical Hessian.

mod em;
mod hessian;

pub use em::{
    default_start, e_step, fit_em, m_step, m_step_expanded, ConvergenceReason, EMConfig, FitResult, MStepOutput, MONOTONE_SLACK,
    SufficientStats,
};
pub use hessian::{
    covariance_from_hessian, numerical_hessian, standard_errors, FreeParamLayout, ParamStdErrors,
    StdErrorReport,
};
