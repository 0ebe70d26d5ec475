//! Single-factor linear-Gaussian state-space model for combining several noisy
//! measurements of one latent monthly series.
//!
//! The pipeline: [`ingest`] raw source files into an [`IndicatorPanel`], build
//! the deterministic trend/seasonal [`DesignMatrix`], estimate parameters by EM
//! ([`estimation::fit_em`]), compute standard errors from a numerical Hessian,
//! and extract the smoothed latent series ([`extraction`]). [`simulation`]
//! generates synthetic panels for recovery studies.

pub mod calendar;
pub mod error;
pub mod estimation;
pub mod extraction;
pub mod ingest;
pub mod kalman;
pub mod model;
pub mod panel;
pub mod simulation;

pub use calendar::YearMonth;
pub use error::{Error, Result};
pub use estimation::{fit_em, EMConfig, FitResult};
pub use extraction::{compare_normalizations, extract_factor, extract_with_params, ExtractedSeries, NormComparison};
pub use kalman::{kalman_filter, kalman_smoother, log_likelihood, FilterOutput, SmootherOutput};
pub use model::{
    build_design_matrix, transition_mean, unconditional_init, DesignMatrix, DesignRow, ModelParams,
    ParamValues, StateInit, TrendSeasonal,
};
pub use panel::IndicatorPanel;
