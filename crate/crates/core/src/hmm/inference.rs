//! Log-space forward-backward recursions, normalized at every step.

use nalgebra::DMatrix;

use super::gmm::{log_sum_exp, GmmEval};
use super::HmmModel;
use crate::error::{Error, Result};
use crate::spectral::FeatureSequence;

/// A model with logs of its parameters and factored emission densities.
#[derive(Debug, Clone)]
pub struct CompiledHmm {
    pub log_initial: Vec<f64>,
    pub log_transitions: DMatrix<f64>,
    pub emissions: Vec<GmmEval>,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct Posteriors {
    /// `p(h_t | x_1..x_t)`, T × K.
    pub filtered: DMatrix<f64>,
    /// `p(h_t | x_1..x_T)`, T × K.
    pub smoothed: DMatrix<f64>,
    pub log_likelihood: f64,
}

pub(crate) struct ForwardBackward {
    pub log_alpha: DMatrix<f64>,
    pub log_beta: DMatrix<f64>,
    pub log_likelihood: f64,
    pub backward_log_likelihood: f64,
}

fn non_finite(what: &str) -> Error {
    Error::Numerical(format!("non-finite {what}; an emission covariance may have collapsed"))
}

impl CompiledHmm {
    pub fn new(model: &HmmModel) -> Result<Self> {
        model.check()?;
        Ok(Self {
            log_initial: model.initial.iter().map(|p| p.ln()).collect(),
            log_transitions: model.transitions.map(f64::ln),
            emissions: model.emissions.iter().map(|g| g.evaluator()).collect::<Result<_>>()?,
            dim: model.dim(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.log_initial.len()
    }

    fn check_obs(&self, obs: &DMatrix<f64>) -> Result<()> {
        if obs.ncols() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "observations have dimension {}, model expects {}",
                obs.ncols(),
                self.dim
            )));
        }
        if obs.nrows() == 0 {
            return Err(Error::InvalidArgument("observation sequence is empty".into()));
        }
        Ok(())
    }

    /// `log p(x_t | h_t = k)`, T × K.
    pub fn emission_log_densities(&self, obs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_obs(obs)?;
        let (t_len, k) = (obs.nrows(), self.n_states());
        let mut out = DMatrix::zeros(t_len, k);
        let mut row = vec![0.0; self.dim];
        for t in 0..t_len {
            for (d, v) in row.iter_mut().enumerate() {
                *v = obs[(t, d)];
            }
            for s in 0..k {
                out[(t, s)] = self.emissions[s].log_density(&row);
            }
        }
        if out.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(non_finite("emission density"));
        }
        Ok(out)
    }

    pub(crate) fn forward_backward(&self, log_b: &DMatrix<f64>) -> Result<ForwardBackward> {
        let (t_len, k) = log_b.shape();
        let la = &self.log_transitions;
        let mut buf = vec![0.0; k];

        let mut alpha = DMatrix::zeros(t_len, k);
        let mut ll = 0.0;
        for t in 0..t_len {
            for j in 0..k {
                let prior = if t == 0 {
                    self.log_initial[j]
                } else {
                    for i in 0..k {
                        buf[i] = alpha[(t - 1, i)] + la[(i, j)];
                    }
                    log_sum_exp(&buf)
                };
                alpha[(t, j)] = prior + log_b[(t, j)];
            }
            let row: Vec<f64> = alpha.row(t).iter().copied().collect();
            let c = log_sum_exp(&row);
            if !c.is_finite() {
                return Err(non_finite("forward scale"));
            }
            ll += c;
            for j in 0..k {
                alpha[(t, j)] -= c;
            }
        }

        let mut beta = DMatrix::zeros(t_len, k);
        let mut acc = 0.0;
        for t in (0..t_len.saturating_sub(1)).rev() {
            for i in 0..k {
                for j in 0..k {
                    buf[j] = la[(i, j)] + log_b[(t + 1, j)] + beta[(t + 1, j)];
                }
                beta[(t, i)] = log_sum_exp(&buf);
            }
            let row: Vec<f64> = beta.row(t).iter().copied().collect();
            let d = log_sum_exp(&row);
            if !d.is_finite() {
                return Err(non_finite("backward scale"));
            }
            acc += d;
            for i in 0..k {
                beta[(t, i)] -= d;
            }
        }
        for i in 0..k {
            buf[i] = self.log_initial[i] + log_b[(0, i)] + beta[(0, i)];
        }
        let bll = log_sum_exp(&buf) + acc;
        if !ll.is_finite() || !bll.is_finite() {
            return Err(non_finite("log-likelihood"));
        }
        Ok(ForwardBackward {
            log_alpha: alpha,
            log_beta: beta,
            log_likelihood: ll,
            backward_log_likelihood: bll,
        })
    }

    pub fn log_likelihood(&self, obs: &DMatrix<f64>) -> Result<f64> {
        let log_b = self.emission_log_densities(obs)?;
        let (t_len, k) = log_b.shape();
        let mut prev: Vec<f64> = (0..k).map(|j| self.log_initial[j] + log_b[(0, j)]).collect();
        let mut ll = 0.0;
        let mut cur = vec![0.0; k];
        let mut buf = vec![0.0; k];
        for t in 0..t_len {
            if t > 0 {
                for j in 0..k {
                    for i in 0..k {
                        buf[i] = prev[i] + self.log_transitions[(i, j)];
                    }
                    cur[j] = log_sum_exp(&buf) + log_b[(t, j)];
                }
                std::mem::swap(&mut prev, &mut cur);
            }
            let c = log_sum_exp(&prev);
            if !c.is_finite() {
                return Err(non_finite("forward scale"));
            }
            ll += c;
            prev.iter_mut().for_each(|v| *v -= c);
        }
        Ok(ll)
    }
}

fn exp_normalized_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for t in 0..m.nrows() {
        let row: Vec<f64> = m.row(t).iter().copied().collect();
        let c = log_sum_exp(&row);
        for j in 0..m.ncols() {
            out[(t, j)] = (m[(t, j)] - c).exp();
        }
    }
    out
}

pub fn log_likelihood(model: &HmmModel, obs: &FeatureSequence) -> Result<f64> {
    CompiledHmm::new(model)?.log_likelihood(&obs.features)
}

/// The same quantity as [`log_likelihood`], computed from the backward pass.
pub fn backward_log_likelihood(model: &HmmModel, obs: &FeatureSequence) -> Result<f64> {
    let c = CompiledHmm::new(model)?;
    let log_b = c.emission_log_densities(&obs.features)?;
    Ok(c.forward_backward(&log_b)?.backward_log_likelihood)
}

pub fn posterior_marginals(model: &HmmModel, obs: &FeatureSequence) -> Result<Posteriors> {
    let c = CompiledHmm::new(model)?;
    let log_b = c.emission_log_densities(&obs.features)?;
    let fb = c.forward_backward(&log_b)?;
    Ok(Posteriors {
        filtered: fb.log_alpha.map(f64::exp),
        smoothed: exp_normalized_rows(&(&fb.log_alpha + &fb.log_beta)),
        log_likelihood: fb.log_likelihood,
    })
}
