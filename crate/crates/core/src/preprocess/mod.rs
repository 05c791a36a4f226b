//! Artifact reduction, band-pass filtering and spatial filtering.

pub mod csp;
pub mod filter;
pub mod regression;

pub use csp::{apply_csp, class_covariance, fit_csp, fit_csp_from_covariances, normalized_covariance, CspFilter};
pub use filter::{apply_bandpass, bandpass, bandpass_with_order, BandpassFilter};
pub use regression::{
    fit_artifact_regression, fit_artifact_regression_pooled, remove_artifacts, signal_only, RegressionCoefficients,
};
