//! Common spatial patterns for two-class problems.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::trial_store::Trial;

const COV_RIDGE: f64 = 1e-9;

/// Spatial filters, one column per component.
///
/// `eigenvalues[i]` is the fraction of the first class's variance in the
/// combined variance along column `i`, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct CspFilter {
    pub weights: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl CspFilter {
    pub fn n_channels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.weights.ncols()
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weights: DMatrix::identity(n, n),
            eigenvalues: vec![0.5; n],
        }
    }
}

/// Channel covariance of one trial, divided by its trace.
pub fn normalized_covariance(trial: &Trial) -> Result<DMatrix<f64>> {
    let n = trial.n_samples();
    if n < 2 {
        return Err(Error::InsufficientData("covariance needs at least two samples".into()));
    }
    let mut x = trial.data.clone();
    for mut row in x.row_iter_mut() {
        let mean = row.sum() / n as f64;
        row.add_scalar_mut(-mean);
    }
    let cov = &x * x.transpose();
    let tr = cov.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::Degenerate("trial has zero spatial variance".into()));
    }
    Ok(cov / tr)
}

/// Mean trace-normalized covariance of a class, ridge-regularized.
pub fn class_covariance(trials: &[&Trial]) -> Result<DMatrix<f64>> {
    let first = trials
        .first()
        .ok_or_else(|| Error::InsufficientData("class has no trials".into()))?;
    let c = first.n_channels();
    let mut acc = DMatrix::zeros(c, c);
    for t in trials {
        if t.n_channels() != c {
            return Err(Error::ShapeMismatch(format!(
                "CSP trials disagree on channel count ({} vs {c})",
                t.n_channels()
            )));
        }
        acc += normalized_covariance(t)?;
    }
    acc /= trials.len() as f64;
    let ridge = COV_RIDGE * acc.trace() / c as f64;
    for i in 0..c {
        acc[(i, i)] += ridge;
    }
    Ok(acc)
}

pub fn fit_csp(class0: &[&Trial], class1: &[&Trial], n_components: usize) -> Result<CspFilter> {
    if class0.len() < 2 || class1.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "CSP needs at least two trials per class, got {} and {}",
            class0.len(),
            class1.len()
        )));
    }
    let s0 = class_covariance(class0)?;
    let s1 = class_covariance(class1)?;
    if s0.nrows() != s1.nrows() {
        return Err(Error::ShapeMismatch("CSP classes disagree on channel count".into()));
    }
    fit_csp_from_covariances(&s0, &s1, n_components)
}

/// Solves `s0 w = λ (s0 + s1) w` and keeps the most extreme `n_components`
/// eigenvectors, alternating largest and smallest λ.
pub fn fit_csp_from_covariances(s0: &DMatrix<f64>, s1: &DMatrix<f64>, n_components: usize) -> Result<CspFilter> {
    let n = s0.nrows();
    if n_components == 0 || n_components > n {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n_components} CSP components from {n} channels"
        )));
    }
    let composite = s0 + s1;
    let chol = composite
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("composite covariance is not positive definite".into()))?;
    let l = chol.l();
    // M = L⁻¹ s0 L⁻ᵀ
    let linv_s0 = l
        .solve_lower_triangular(s0)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let m = l
        .solve_lower_triangular(&linv_s0.transpose())
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut picked = Vec::with_capacity(n_components);
    let (mut lo, mut hi) = (0usize, n - 1);
    while picked.len() < n_components {
        if picked.len() % 2 == 0 {
            picked.push(order[lo]);
            lo += 1;
        } else {
            picked.push(order[hi]);
            hi = hi.saturating_sub(1);
        }
    }
    picked.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut weights = DMatrix::zeros(n, n_components);
    let mut eigenvalues = Vec::with_capacity(n_components);
    for (j, &k) in picked.iter().enumerate() {
        let v = eig.eigenvectors.column(k).into_owned();
        // w = L⁻ᵀ v
        let mut w = l
            .tr_solve_lower_triangular(&v)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let lead = w
            .iter()
            .enumerate()
            .fold(
                (0usize, 0.0f64),
                |best, (i, &x)| {
                    if x.abs() > best.1 {
                        (i, x.abs())
                    } else {
                        best
                    }
                },
            )
            .0;
        if w[lead] < 0.0 {
            w.neg_mut();
        }
        weights.set_column(j, &w);
        eigenvalues.push(eig.eigenvalues[k]);
    }
    Ok(CspFilter { weights, eigenvalues })
}

/// Projects every sample onto the filters: `c = Wᵀ s`.
pub fn apply_csp(trial: &Trial, filter: &CspFilter) -> Result<Trial> {
    if trial.n_channels() != filter.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "trial has {} channels, CSP filter expects {}",
            trial.n_channels(),
            filter.n_channels()
        )));
    }
    Ok(trial.with_data(filter.weights.transpose() * &trial.data))
}
