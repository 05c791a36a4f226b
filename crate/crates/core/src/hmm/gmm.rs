use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Diagonal,
    Full,
}

/// Gaussian mixture emission density.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let g = Self {
            weights,
            means,
            covariances,
        };
        g.check()?;
        Ok(g)
    }

    pub fn single(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![covariance])
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn check(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 || self.means.len() != m || self.covariances.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "mixture with {} weights, {} means, {} covariances",
                m,
                self.means.len(),
                self.covariances.len()
            )));
        }
        let d = self.dim();
        for (mu, s) in self.means.iter().zip(&self.covariances) {
            if mu.len() != d || s.nrows() != d || s.ncols() != d {
                return Err(Error::ShapeMismatch(format!(
                    "mixture component is not {d}-dimensional"
                )));
            }
        }
        let total: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must form a simplex, sum {total}"
            )));
        }
        Ok(())
    }

    pub fn evaluator(&self) -> Result<GmmEval> {
        let comps = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.covariances)
            .map(|((&w, mu), s)| Component::new(w, mu, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmEval { comps })
    }
}

#[derive(Debug, Clone)]
struct Component {
    log_weight: f64,
    mean: DVector<f64>,
    /// Reciprocal standard deviations when the covariance is diagonal.
    inv_sd: Option<DVector<f64>>,
    chol: Option<Cholesky<f64, Dyn>>,
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let is_diag = (0..d).all(|i| (0..d).all(|j| i == j || cov[(i, j)] == 0.0));
        let (inv_sd, chol, log_det) = if is_diag {
            let diag = cov.diagonal();
            if diag.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::Singular("covariance has a non-positive variance".into()));
            }
            (
                Some(diag.map(|v| 1.0 / v.sqrt())),
                None,
                diag.iter().map(|v| v.ln()).sum::<f64>(),
            )
        } else {
            let c = Cholesky::new(cov.clone())
                .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
            let ld = 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            (None, Some(c), ld)
        };
        Ok(Self {
            log_weight: weight.ln(),
            mean: mean.clone(),
            inv_sd,
            chol,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let quad = if let Some(inv) = &self.inv_sd {
            x.iter()
                .zip(self.mean.iter())
                .zip(inv.iter())
                .map(|((xi, mi), s)| {
                    let z = (xi - mi) * s;
                    z * z
                })
                .sum::<f64>()
        } else {
            let chol = self.chol.as_ref().expect("full covariance has a factor");
            let diff = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
            let y = chol
                .l_dirty()
                .solve_lower_triangular(&diff)
                .expect("Cholesky factor has a positive diagonal");
            y.norm_squared()
        };
        self.log_norm - 0.5 * quad
    }
}

/// Precomputed factors for repeated density evaluation.
#[derive(Debug, Clone)]
pub struct GmmEval {
    comps: Vec<Component>,
}

impl GmmEval {
    /// `log w_m + log N(x; μ_m, Σ_m)` for every component.
    pub fn component_log_densities(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.comps.iter().map(|c| c.log_weight + c.log_pdf(x)));
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.comps.len());
        self.component_log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
