//! Sticky HDP-HMM with Dirichlet-process Gaussian-mixture emissions.
//!
//! The infinite objects are approximated by a weak-limit truncation: `L`
//! hidden states and `L_mix` mixture components per state. Inference is
//! blocked Gibbs sampling and test sequences are scored by the posterior
//! predictive likelihood averaged over retained samples.

mod dist;
mod gibbs;

use std::borrow::Borrow;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{kmeans_assign, log_sum_exp, CompiledHmm, CovarianceKind, HmmModel};
use crate::matrix_io::{save_matrix, MatrixBundle, TextMatrix};
use crate::spectral::FeatureSequence;

pub use dist::{
    gem_from_fractions, gem_posterior, sample_dirichlet, sample_gem, sample_inverse_wishart, sample_sticky_row,
    sample_table_count, sticky_row_params, NiwPrior,
};
pub use gibbs::{gibbs_sweep, row_posterior_params, sample_from_prior, transition_counts, PosteriorSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HdpHmmConfig {
    /// Top-level concentration γ.
    pub gamma: f64,
    /// Transition concentration α.
    pub alpha: f64,
    /// Self-transition bias κ; zero gives the non-sticky HDP-HMM.
    pub kappa: f64,
    /// Concentration of each state's mixture-weight prior.
    pub alpha_mix: f64,
    /// State truncation L.
    pub truncation: usize,
    /// Per-state mixture truncation.
    pub mix_truncation: usize,
    pub n_sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub covariance: CovarianceKind,
    /// Number of k-means clusters used to assign the initial state paths.
    pub init_states: usize,
    /// Emission prior; derived from the training data when absent.
    pub niw: Option<NiwPrior>,
}

impl Default for HdpHmmConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            alpha: 1.0,
            kappa: 10.0,
            alpha_mix: 1.0,
            truncation: 10,
            mix_truncation: 5,
            n_sweeps: 300,
            burn_in: 200,
            thin: 10,
            seed: 0,
            covariance: CovarianceKind::Full,
            init_states: 5,
            niw: None,
        }
    }
}

impl HdpHmmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.alpha > 0.0 && self.alpha_mix > 0.0) {
            return bad("gamma, alpha and alpha_mix must be positive");
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return bad("kappa must be a finite non-negative number");
        }
        if self.truncation < 2 {
            return bad("truncation must be at least 2");
        }
        if self.mix_truncation < 1 {
            return bad("mix_truncation must be at least 1");
        }
        if self.burn_in >= self.n_sweeps {
            return bad("burn_in must be smaller than n_sweeps");
        }
        if self.thin < 1 {
            return bad("thin must be at least 1");
        }
        if !(1..=self.truncation).contains(&self.init_states) {
            return bad("init_states must be between 1 and truncation");
        }
        if let Some(p) = &self.niw {
            p.check()?;
        }
        Ok(())
    }

    /// `floor((n_sweeps − burn_in) / thin)`.
    pub fn retained_samples(&self) -> usize {
        (self.n_sweeps - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdpHmmPosterior {
    /// The configuration used, with the emission prior filled in.
    pub config: HdpHmmConfig,
    pub samples: Vec<PosteriorSample>,
    /// Occupied-state count after every sweep, burn-in included.
    pub occupancy_trace: Vec<usize>,
}

/// Retained samples compiled for repeated scoring.
#[derive(Debug, Clone)]
pub struct CompiledPosterior {
    models: Vec<CompiledHmm>,
}

impl CompiledPosterior {
    /// `log[(1/S) Σ_s p(obs | sample_s)]`.
    pub fn log_likelihood(&self, obs: &DMatrix<f64>) -> Result<f64> {
        let per: Vec<f64> = self
            .models
            .iter()
            .map(|m| m.log_likelihood(obs))
            .collect::<Result<_>>()?;
        Ok(log_sum_exp(&per) - (per.len() as f64).ln())
    }

    pub fn per_sample(&self, obs: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.models.iter().map(|m| m.log_likelihood(obs)).collect()
    }
}

impl HdpHmmPosterior {
    pub fn occupied_counts(&self) -> Vec<usize> {
        self.samples.iter().map(PosteriorSample::occupied_states).collect()
    }

    /// Most frequent occupied-state count over retained samples; ties go to
    /// the smaller count.
    pub fn occupied_mode(&self) -> usize {
        let counts = self.occupied_counts();
        let mut hist = vec![0usize; self.config.truncation + 1];
        for c in counts {
            hist[c] += 1;
        }
        let mut best = 0;
        for (c, &n) in hist.iter().enumerate() {
            if n > hist[best] {
                best = c;
            }
        }
        best
    }

    pub fn compile(&self) -> Result<CompiledPosterior> {
        if self.samples.is_empty() {
            return Err(Error::InvalidArgument("posterior has no retained samples".into()));
        }
        let models = self
            .samples
            .iter()
            .map(|s| s.to_hmm()?.compile())
            .collect::<Result<_>>()?;
        Ok(CompiledPosterior { models })
    }

    pub fn equivalent_models(&self) -> Result<Vec<HmmModel>> {
        self.samples.iter().map(PosteriorSample::to_hmm).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        let cfg_path = dir.join("config.json");
        fs::write(&cfg_path, cfg + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            sample_bundle(s)?.save(&dir.join(format!("sample_{i:04}.txt")))?;
        }
        let occ = DMatrix::from_iterator(
            self.occupancy_trace.len(),
            1,
            self.occupancy_trace.iter().map(|&c| c as f64),
        );
        save_matrix(
            &dir.join("occupancy.txt"),
            &TextMatrix::new(occ, 1.0).with_comment("occupied states after each sweep"),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: HdpHmmConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: cfg_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        config.validate()?;
        let samples = (0..config.retained_samples())
            .map(|i| MatrixBundle::load(&dir.join(format!("sample_{i:04}.txt"))).and_then(|b| sample_from_bundle(&b)))
            .collect::<Result<Vec<_>>>()?;
        let occ = crate::matrix_io::load_matrix(&dir.join("occupancy.txt"))?;
        Ok(Self {
            config,
            samples,
            occupancy_trace: occ.data.iter().map(|&v| v as usize).collect(),
        })
    }
}

fn sample_bundle(s: &PosteriorSample) -> Result<MatrixBundle> {
    let mut b = MatrixBundle::new();
    b.push_row("beta", &s.beta);
    s.to_hmm()?.write_bundle(&mut b, "");
    b.push_row("log_joint", &[s.log_joint]);
    b.push_row("n_sequences", &[s.state_seqs.len() as f64]);
    for (q, (h, m)) in s.state_seqs.iter().zip(&s.mix_seqs).enumerate() {
        b.push_row(format!("states{q}"), &h.iter().map(|&v| v as f64).collect::<Vec<_>>());
        b.push_row(format!("mixes{q}"), &m.iter().map(|&v| v as f64).collect::<Vec<_>>());
    }
    Ok(b)
}

fn sample_from_bundle(b: &MatrixBundle) -> Result<PosteriorSample> {
    let hmm = HmmModel::read_bundle(b, "")?;
    let beta = b.row("beta")?;
    if beta.len() != hmm.n_states() {
        return Err(Error::ShapeMismatch("beta length differs from the state count".into()));
    }
    let n_seq = b.row("n_sequences")?.first().copied().unwrap_or(0.0) as usize;
    let as_idx = |v: Vec<f64>| v.into_iter().map(|x| x as usize).collect::<Vec<_>>();
    let mut state_seqs = Vec::with_capacity(n_seq);
    let mut mix_seqs = Vec::with_capacity(n_seq);
    for q in 0..n_seq {
        state_seqs.push(as_idx(b.row(&format!("states{q}"))?));
        mix_seqs.push(as_idx(b.row(&format!("mixes{q}"))?));
    }
    Ok(PosteriorSample {
        beta,
        initial: hmm.initial,
        transitions: hmm.transitions,
        mix_weights: hmm.emissions.iter().map(|g| g.weights.clone()).collect(),
        means: hmm.emissions.iter().map(|g| g.means.clone()).collect(),
        covariances: hmm.emissions.into_iter().map(|g| g.covariances).collect(),
        state_seqs,
        mix_seqs,
        log_joint: b.row("log_joint")?.first().copied().unwrap_or(0.0),
    })
}

fn rows_of(mats: &[&DMatrix<f64>]) -> Vec<Vec<f64>> {
    mats.iter()
        .flat_map(|m| (0..m.nrows()).map(move |t| m.row(t).iter().copied().collect::<Vec<_>>()))
        .collect()
}

/// Runs the sampler from a seeded initialization and keeps the thinned
/// post-burn-in samples.
pub fn fit<S: Borrow<FeatureSequence> + Sync>(data: &[S], config: &HdpHmmConfig) -> Result<HdpHmmPosterior> {
    config.validate()?;
    let mats: Vec<&DMatrix<f64>> = data.iter().map(|s| &s.borrow().features).collect();
    let total: usize = mats.iter().map(|m| m.nrows()).sum();
    if total < 10 * config.truncation {
        return Err(Error::InsufficientData(format!(
            "{total} time steps; the sampler needs at least {} for truncation {}",
            10 * config.truncation,
            config.truncation
        )));
    }
    let d = mats[0].ncols();
    if mats.iter().any(|m| m.ncols() != d || m.nrows() == 0) {
        return Err(Error::ShapeMismatch(
            "training sequences differ in dimension or are empty".into(),
        ));
    }
    if mats.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("training features contain non-finite values".into()));
    }
    let rows = rows_of(&mats);
    let prior = match &config.niw {
        Some(p) => {
            if p.dim() != d {
                return Err(Error::ShapeMismatch(format!(
                    "NIW prior has dimension {}, data {d}",
                    p.dim()
                )));
            }
            p.clone()
        }
        None => NiwPrior::from_data(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>())?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let assign = kmeans_assign(&rows, config.init_states, &mut rng);
    let mut paths = Vec::with_capacity(mats.len());
    let mut offset = 0;
    for m in &mats {
        paths.push(assign[offset..offset + m.nrows()].to_vec());
        offset += m.nrows();
    }
    let mut state = gibbs::initialize(&mats, paths, config, &prior, &mut rng)?;

    let mut samples = Vec::with_capacity(config.retained_samples());
    let mut occupancy_trace = Vec::with_capacity(config.n_sweeps);
    for sweep in 1..=config.n_sweeps {
        state = gibbs_sweep(&state, &mats, config, &prior, &mut rng)?;
        occupancy_trace.push(state.occupied_states());
        if sweep > config.burn_in && (sweep - config.burn_in).is_multiple_of(config.thin) {
            samples.push(state.clone());
        }
    }
    let mut config = config.clone();
    config.niw = Some(prior);
    Ok(HdpHmmPosterior {
        config,
        samples,
        occupancy_trace,
    })
}

pub fn predictive_log_likelihood(posterior: &HdpHmmPosterior, obs: &FeatureSequence) -> Result<f64> {
    posterior.compile()?.log_likelihood(&obs.features)
}

/// Pooled-data prior over several groups of sequences, e.g. every class of
/// a training set.
pub fn pooled_prior<S: Borrow<FeatureSequence>>(data: &[S]) -> Result<NiwPrior> {
    let mats: Vec<&DMatrix<f64>> = data.iter().map(|s| &s.borrow().features).collect();
    let rows = rows_of(&mats);
    NiwPrior::from_data(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>())
}
