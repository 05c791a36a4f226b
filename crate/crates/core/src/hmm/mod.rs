//! Finite hidden Markov models with Gaussian-mixture emissions.

mod cv;
mod em;
mod gmm;
mod inference;

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matrix_io::MatrixBundle;

pub use cv::{argmax_lowest, select_order_cv, CvCandidate, CvConfig, CvSelection};
pub(crate) use em::kmeans_assign;
pub use em::{em_fit, EmConfig, EmFit};
pub use gmm::{log_sum_exp, CovarianceKind, Gmm, GmmEval};
pub use inference::{backward_log_likelihood, log_likelihood, posterior_marginals, CompiledHmm, Posteriors};

/// `(K, M)` of the fixed-order configuration: three states, two components each.
pub const HMM_FP_ORDER: (usize, usize) = (3, 2);

#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    pub initial: Vec<f64>,
    /// Row-stochastic, `transitions[(i, j)] = p(h_t = j | h_{t−1} = i)`.
    pub transitions: DMatrix<f64>,
    pub emissions: Vec<Gmm>,
}

impl HmmModel {
    pub fn new(initial: Vec<f64>, transitions: DMatrix<f64>, emissions: Vec<Gmm>) -> Result<Self> {
        let m = Self {
            initial,
            transitions,
            emissions,
        };
        m.check()?;
        Ok(m)
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn dim(&self) -> usize {
        self.emissions.first().map_or(0, Gmm::dim)
    }

    pub fn check(&self) -> Result<()> {
        let k = self.initial.len();
        if k == 0 {
            return Err(Error::ShapeMismatch("model has no states".into()));
        }
        if self.transitions.shape() != (k, k) || self.emissions.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "{k} states but transitions are {:?} and {} emission densities",
                self.transitions.shape(),
                self.emissions.len()
            )));
        }
        let simplex = |v: &mut dyn Iterator<Item = f64>| {
            let mut total = 0.0;
            for p in v {
                if !(p >= 0.0) {
                    return false;
                }
                total += p;
            }
            (total - 1.0).abs() <= 1e-9
        };
        if !simplex(&mut self.initial.iter().copied()) {
            return Err(Error::InvalidArgument("initial distribution is not a simplex".into()));
        }
        for i in 0..k {
            if !simplex(&mut self.transitions.row(i).iter().copied()) {
                return Err(Error::InvalidArgument(format!("transition row {i} is not a simplex")));
            }
        }
        let d = self.dim();
        for g in &self.emissions {
            g.check()?;
            if g.dim() != d {
                return Err(Error::ShapeMismatch("emission densities differ in dimension".into()));
            }
        }
        Ok(())
    }

    pub fn compile(&self) -> Result<CompiledHmm> {
        CompiledHmm::new(self)
    }

    /// Relabels states so that new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.n_states();
        Self {
            initial: perm.iter().map(|&p| self.initial[p]).collect(),
            transitions: DMatrix::from_fn(k, k, |i, j| self.transitions[(perm[i], perm[j])]),
            emissions: perm.iter().map(|&p| self.emissions[p].clone()).collect(),
        }
    }

    /// Appends the model's matrices to `bundle` under `prefix`.
    pub fn write_bundle(&self, bundle: &mut MatrixBundle, prefix: &str) {
        let k = self.n_states();
        bundle.push_row(
            format!("{prefix}shape"),
            &[k as f64, self.emissions[0].n_components() as f64, self.dim() as f64],
        );
        bundle.push_row(format!("{prefix}initial"), &self.initial);
        bundle.push(format!("{prefix}transitions"), self.transitions.clone());
        for (s, g) in self.emissions.iter().enumerate() {
            bundle.push_row(format!("{prefix}state{s}.weights"), &g.weights);
            let d = g.dim();
            let means = DMatrix::from_fn(g.n_components(), d, |r, c| g.means[r][c]);
            bundle.push(format!("{prefix}state{s}.means"), means);
            for (c, cov) in g.covariances.iter().enumerate() {
                bundle.push(format!("{prefix}state{s}.cov{c}"), cov.clone());
            }
        }
    }

    pub fn read_bundle(bundle: &MatrixBundle, prefix: &str) -> Result<Self> {
        let shape = bundle.row(&format!("{prefix}shape"))?;
        let bad = || Error::ShapeMismatch(format!("malformed `{prefix}shape` entry"));
        if shape.len() != 3 || shape.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
            return Err(bad());
        }
        let k = shape[0] as usize;
        let d = shape[2] as usize;
        let initial = bundle.row(&format!("{prefix}initial"))?;
        let transitions = bundle.get(&format!("{prefix}transitions"))?.clone();
        let mut emissions = Vec::with_capacity(k);
        for s in 0..k {
            let weights = bundle.row(&format!("{prefix}state{s}.weights"))?;
            let means_m = bundle.get(&format!("{prefix}state{s}.means"))?;
            if means_m.shape() != (weights.len(), d) {
                return Err(Error::ShapeMismatch(format!(
                    "state {s} means have shape {:?}",
                    means_m.shape()
                )));
            }
            let means = (0..weights.len())
                .map(|r| DVector::from_iterator(d, means_m.row(r).iter().copied()))
                .collect();
            let covariances = (0..weights.len())
                .map(|c| bundle.get(&format!("{prefix}state{s}.cov{c}")).cloned())
                .collect::<Result<Vec<_>>>()?;
            emissions.push(Gmm::new(weights, means, covariances)?);
        }
        Self::new(initial, transitions, emissions)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = MatrixBundle::new();
        self.write_bundle(&mut b, "");
        b.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_bundle(&MatrixBundle::load(path)?, "")
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::random_model;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bundle_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 3, 2, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        m.save(&path).unwrap();
        assert_eq!(HmmModel::load(&path).unwrap(), m);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = random_model(&mut rng, 2, 1, 1);
        m.transitions[(0, 0)] += 0.1;
        assert!(m.check().is_err());
    }

    #[test]
    fn truncated_bundle_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 2, 2, 2);
        let mut b = MatrixBundle::new();
        m.write_bundle(&mut b, "x.");
        b.entries.retain(|(n, _)| n != "x.state1.cov1");
        assert!(HmmModel::read_bundle(&b, "x.").is_err());
    }
}
