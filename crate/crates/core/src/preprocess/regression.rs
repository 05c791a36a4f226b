//! Least-squares removal of reference-channel (EOG) interference.
//!
//! Each recorded signal channel is modeled as the clean signal plus a linear
//! combination of the reference channels. The propagation weights are fit
//! once on a calibration recording and then subtracted sample by sample.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::trial_store::{reference_indices, signal_indices, ChannelRole, Trial};

/// Ridge added when the reference covariance is rank deficient, relative to
/// its mean diagonal.
const RIDGE: f64 = 1e-9;

/// Propagation weights, `n_reference × n_signal`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionCoefficients {
    pub weights: DMatrix<f64>,
}

impl RegressionCoefficients {
    pub fn zeros(n_reference: usize, n_signal: usize) -> Self {
        Self {
            weights: DMatrix::zeros(n_reference, n_signal),
        }
    }

    pub fn n_reference(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_signal(&self) -> usize {
        self.weights.ncols()
    }
}

/// Fits the weights on one calibration segment.
pub fn fit_artifact_regression(calibration: &Trial, channels: &[ChannelRole]) -> Result<RegressionCoefficients> {
    fit_artifact_regression_pooled(&[calibration], channels)
}

/// Fits one set of weights on several segments. Each segment is mean-centered
/// on its own before the normal equations are accumulated.
pub fn fit_artifact_regression_pooled(segments: &[&Trial], channels: &[ChannelRole]) -> Result<RegressionCoefficients> {
    let sig = signal_indices(channels);
    let rf = reference_indices(channels);
    if rf.is_empty() {
        return Err(Error::InvalidArgument(
            "artifact regression needs at least one reference-artifact channel".into(),
        ));
    }
    if sig.is_empty() {
        return Err(Error::InvalidArgument("no signal channels".into()));
    }
    let n_samples: usize = segments.iter().map(|t| t.n_samples()).sum();
    if n_samples < 10 * rf.len() {
        return Err(Error::InsufficientData(format!(
            "artifact regression needs at least {} calibration samples, got {n_samples}",
            10 * rf.len()
        )));
    }

    let mut xx = DMatrix::<f64>::zeros(rf.len(), rf.len());
    let mut xy = DMatrix::<f64>::zeros(rf.len(), sig.len());
    for seg in segments {
        if seg.n_channels() != channels.len() {
            return Err(Error::ShapeMismatch(format!(
                "calibration segment has {} channels, layout has {}",
                seg.n_channels(),
                channels.len()
            )));
        }
        let x = centered_rows(&seg.data, &rf);
        let y = centered_rows(&seg.data, &sig);
        xx += &x * x.transpose();
        xy += &x * y.transpose();
    }

    let trace = xx.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(Error::Singular(
            "reference channels carry no variance in the calibration data".into(),
        ));
    }
    let chol = match xx.clone().cholesky() {
        Some(c) => c,
        None => {
            let ridge = RIDGE * trace / rf.len() as f64;
            let reg = &xx + DMatrix::identity(rf.len(), rf.len()) * ridge;
            reg.cholesky()
                .ok_or_else(|| Error::Singular("reference-channel normal equations after regularization".into()))?
        }
    };
    let weights = chol.solve(&xy);
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite regression weights".into()));
    }
    Ok(RegressionCoefficients { weights })
}

fn centered_rows(data: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let n = data.ncols();
    let mut out = DMatrix::zeros(rows.len(), n);
    for (i, &r) in rows.iter().enumerate() {
        let row = data.row(r);
        let mean = if n > 0 { row.sum() / n as f64 } else { 0.0 };
        for s in 0..n {
            out[(i, s)] = row[s] - mean;
        }
    }
    out
}

/// Subtracts the fitted interference and drops the reference channels.
/// The output holds only the signal channels, in layout order.
pub fn remove_artifacts(trial: &Trial, channels: &[ChannelRole], coeffs: &RegressionCoefficients) -> Result<Trial> {
    let sig = signal_indices(channels);
    let rf = reference_indices(channels);
    if trial.n_channels() != channels.len() {
        return Err(Error::ShapeMismatch(format!(
            "trial has {} channels, layout has {}",
            trial.n_channels(),
            channels.len()
        )));
    }
    if coeffs.n_reference() != rf.len() || coeffs.n_signal() != sig.len() {
        return Err(Error::ShapeMismatch(format!(
            "coefficients are {}×{}, layout has {} reference and {} signal channels",
            coeffs.n_reference(),
            coeffs.n_signal(),
            rf.len(),
            sig.len()
        )));
    }
    let n = trial.n_samples();
    let mut out = DMatrix::zeros(sig.len(), n);
    let mut eog = DVector::zeros(rf.len());
    for s in 0..n {
        for (a, &r) in rf.iter().enumerate() {
            eog[a] = trial.data[(r, s)];
        }
        for (c, &ch) in sig.iter().enumerate() {
            out[(c, s)] = trial.data[(ch, s)] - coeffs.weights.column(c).dot(&eog);
        }
    }
    Ok(trial.with_data(out))
}

/// Keeps only the signal channels, for layouts without reference channels.
pub fn signal_only(trial: &Trial, channels: &[ChannelRole]) -> Result<Trial> {
    let sig = signal_indices(channels);
    if trial.n_channels() != channels.len() {
        return Err(Error::ShapeMismatch(format!(
            "trial has {} channels, layout has {}",
            trial.n_channels(),
            channels.len()
        )));
    }
    let data = DMatrix::from_fn(sig.len(), trial.n_samples(), |c, s| trial.data[(sig[c], s)]);
    Ok(trial.with_data(data))
}
