//! Blocked Gibbs sweep for the weak-limit sticky HDP-HMM.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dist::{
    gem_posterior, sample_binomial, sample_categorical_log, sample_dirichlet, sample_gem, sample_sticky_row,
    sample_table_count, sticky_row_params, NiwPrior,
};
use super::HdpHmmConfig;
use crate::error::{Error, Result};
use crate::hmm::{log_sum_exp, CovarianceKind, Gmm, GmmEval, HmmModel};

/// One state of the chain: global weights, the truncated HMM parameters and
/// the latent assignments of every training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub beta: Vec<f64>,
    pub initial: Vec<f64>,
    pub transitions: DMatrix<f64>,
    /// `mix_weights[j]` is state j's mixture weight vector ψ_j.
    pub mix_weights: Vec<Vec<f64>>,
    pub means: Vec<Vec<DVector<f64>>>,
    pub covariances: Vec<Vec<DMatrix<f64>>>,
    pub state_seqs: Vec<Vec<usize>>,
    pub mix_seqs: Vec<Vec<usize>>,
    /// `log p(x, h, s | π⁰, π, ψ, θ)` of the training data.
    pub log_joint: f64,
}

impl PosteriorSample {
    pub fn n_states(&self) -> usize {
        self.beta.len()
    }

    pub fn n_components(&self) -> usize {
        self.mix_weights.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.means.first().and_then(|m| m.first()).map_or(0, |v| v.len())
    }

    /// States with at least one assigned time step.
    pub fn occupied_states(&self) -> usize {
        let mut used = vec![false; self.n_states()];
        for &h in self.state_seqs.iter().flatten() {
            used[h] = true;
        }
        used.iter().filter(|&&u| u).count()
    }

    /// The truncated sample read as an ordinary finite HMM.
    pub fn to_hmm(&self) -> Result<HmmModel> {
        let emissions = (0..self.n_states())
            .map(|j| {
                Gmm::new(
                    self.mix_weights[j].clone(),
                    self.means[j].clone(),
                    self.covariances[j].clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        HmmModel::new(self.initial.clone(), self.transitions.clone(), emissions)
    }

    pub fn check(&self) -> Result<()> {
        let simplex = |v: &[f64], what: &str| {
            let s: f64 = v.iter().sum();
            if v.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-10 {
                Err(Error::Numerical(format!("{what} is not a simplex (sum {s})")))
            } else {
                Ok(())
            }
        };
        simplex(&self.beta, "beta")?;
        simplex(&self.initial, "initial distribution")?;
        for j in 0..self.n_states() {
            let row: Vec<f64> = self.transitions.row(j).iter().copied().collect();
            simplex(&row, "transition row")?;
            simplex(&self.mix_weights[j], "mixture weights")?;
            for c in &self.covariances[j] {
                if c.clone().cholesky().is_none() {
                    return Err(Error::Numerical(format!(
                        "state {j} has a covariance that is not positive definite"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn sample_component<R: Rng + ?Sized>(
    prior: &NiwPrior,
    rows: &[&[f64]],
    kind: CovarianceKind,
    rng: &mut R,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let post = match kind {
        CovarianceKind::Full => prior.posterior(rows),
        CovarianceKind::Diagonal => prior.posterior_diagonal(rows),
    };
    post.sample(kind, rng)
}

/// Parameters drawn from the prior, with no sequences attached.
pub fn sample_from_prior<R: Rng + ?Sized>(
    config: &HdpHmmConfig,
    prior: &NiwPrior,
    rng: &mut R,
) -> Result<PosteriorSample> {
    let l = config.truncation;
    let lm = config.mix_truncation;
    let beta = sample_gem(config.gamma, l, rng);
    let initial = sample_dirichlet(&beta.iter().map(|b| config.alpha * b).collect::<Vec<_>>(), rng);
    let mut transitions = DMatrix::zeros(l, l);
    for j in 0..l {
        for (k, p) in sample_sticky_row(&beta, j, config.alpha, config.kappa, rng)
            .into_iter()
            .enumerate()
        {
            transitions[(j, k)] = p;
        }
    }
    let mut mix_weights = Vec::with_capacity(l);
    let mut means = Vec::with_capacity(l);
    let mut covariances = Vec::with_capacity(l);
    for _ in 0..l {
        mix_weights.push(sample_dirichlet(&vec![config.alpha_mix / lm as f64; lm], rng));
        let mut mu = Vec::with_capacity(lm);
        let mut cov = Vec::with_capacity(lm);
        for _ in 0..lm {
            let (m, c) = sample_component(prior, &[], config.covariance, rng)?;
            mu.push(m);
            cov.push(c);
        }
        means.push(mu);
        covariances.push(cov);
    }
    Ok(PosteriorSample {
        beta,
        initial,
        transitions,
        mix_weights,
        means,
        covariances,
        state_seqs: Vec::new(),
        mix_seqs: Vec::new(),
        log_joint: 0.0,
    })
}

fn evaluators(s: &PosteriorSample) -> Result<Vec<GmmEval>> {
    (0..s.n_states())
        .map(|j| Gmm::new(s.mix_weights[j].clone(), s.means[j].clone(), s.covariances[j].clone())?.evaluator())
        .collect()
}

fn row(m: &DMatrix<f64>, t: usize) -> Vec<f64> {
    m.row(t).iter().copied().collect()
}

/// Forward filtering, backward sampling of the state path, then mixture
/// indicators given the path.
fn sample_latents(
    obs: &DMatrix<f64>,
    log_initial: &[f64],
    log_trans: &DMatrix<f64>,
    evals: &[GmmEval],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (t_len, l) = (obs.nrows(), log_initial.len());
    let mut comp: Vec<Vec<f64>> = Vec::new();
    comp.resize_with(t_len * l, Vec::new);
    let mut log_b = DMatrix::zeros(t_len, l);
    for t in 0..t_len {
        let x = row(obs, t);
        for j in 0..l {
            let c = &mut comp[t * l + j];
            evals[j].component_log_densities(&x, c);
            log_b[(t, j)] = log_sum_exp(c);
        }
    }
    if log_b.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numerical("non-finite emission density in the sampler".into()));
    }

    let mut alpha = DMatrix::zeros(t_len, l);
    let mut buf = vec![0.0; l];
    for t in 0..t_len {
        for j in 0..l {
            let prior = if t == 0 {
                log_initial[j]
            } else {
                for i in 0..l {
                    buf[i] = alpha[(t - 1, i)] + log_trans[(i, j)];
                }
                log_sum_exp(&buf)
            };
            alpha[(t, j)] = prior + log_b[(t, j)];
        }
        let c = log_sum_exp(&row(&alpha, t));
        if !c.is_finite() {
            return Err(Error::Numerical(
                "forward filter lost all probability mass; the NIW prior may be too weak for the data scale".into(),
            ));
        }
        for j in 0..l {
            alpha[(t, j)] -= c;
        }
    }

    let mut states = vec![0; t_len];
    states[t_len - 1] = sample_categorical_log(&row(&alpha, t_len - 1), rng);
    for t in (0..t_len - 1).rev() {
        let next = states[t + 1];
        for i in 0..l {
            buf[i] = alpha[(t, i)] + log_trans[(i, next)];
        }
        states[t] = sample_categorical_log(&buf, rng);
    }
    let mixes = (0..t_len)
        .map(|t| sample_categorical_log(&comp[t * l + states[t]], rng))
        .collect();
    Ok((states, mixes))
}

/// First-state counts and transition counts `n[j][k]` over all paths.
pub fn transition_counts(paths: &[Vec<usize>], l: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut n = vec![vec![0usize; l]; l];
    let mut n0 = vec![0usize; l];
    for seq in paths {
        if let Some(&h) = seq.first() {
            n0[h] += 1;
        }
        for w in seq.windows(2) {
            n[w[0]][w[1]] += 1;
        }
    }
    (n0, n)
}

/// Dirichlet parameters of row j's conditional: `αβ + κ e_j + n_j`.
pub fn row_posterior_params(beta: &[f64], j: usize, alpha: f64, kappa: f64, counts: &[usize]) -> Vec<f64> {
    let mut p = sticky_row_params(beta, j, alpha, kappa);
    for (v, &c) in p.iter_mut().zip(counts) {
        *v += c as f64;
    }
    p
}

/// Parameter steps (c)-(f) given the latent assignments in `s`.
fn sample_parameters<R: Rng + ?Sized>(
    s: &mut PosteriorSample,
    data: &[&DMatrix<f64>],
    config: &HdpHmmConfig,
    prior: &NiwPrior,
    rng: &mut R,
) -> Result<()> {
    let l = config.truncation;
    let lm = config.mix_truncation;
    let (n0, n) = transition_counts(&s.state_seqs, l);

    // table counts, sticky override, then β
    let mut mbar = vec![0.0; l];
    for j in 0..l {
        let params = sticky_row_params(&s.beta, j, config.alpha, config.kappa);
        for k in 0..l {
            let mut m = sample_table_count(n[j][k], params[k], rng);
            if k == j && m > 0 && config.kappa > 0.0 {
                let p = config.kappa / (config.kappa + config.alpha * s.beta[j]);
                m -= sample_binomial(m, p, rng);
            }
            mbar[k] += m as f64;
        }
    }
    for k in 0..l {
        mbar[k] += sample_table_count(n0[k], config.alpha * s.beta[k], rng) as f64;
    }
    s.beta = gem_posterior(config.gamma, &mbar, rng);

    let p0: Vec<f64> = (0..l).map(|k| config.alpha * s.beta[k] + n0[k] as f64).collect();
    s.initial = sample_dirichlet(&p0, rng);
    for j in 0..l {
        let p = row_posterior_params(&s.beta, j, config.alpha, config.kappa, &n[j]);
        for (k, v) in sample_dirichlet(&p, rng).into_iter().enumerate() {
            s.transitions[(j, k)] = v;
        }
    }

    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); l * lm];
    let rows: Vec<Vec<Vec<f64>>> = data
        .iter()
        .map(|m| (0..m.nrows()).map(|t| row(m, t)).collect())
        .collect();
    for (q, seq) in s.state_seqs.iter().enumerate() {
        for (t, &h) in seq.iter().enumerate() {
            members[h * lm + s.mix_seqs[q][t]].push(&rows[q][t]);
        }
    }
    for j in 0..l {
        let p: Vec<f64> = (0..lm)
            .map(|c| config.alpha_mix / lm as f64 + members[j * lm + c].len() as f64)
            .collect();
        s.mix_weights[j] = sample_dirichlet(&p, rng);
        for c in 0..lm {
            let (mu, cov) = sample_component(prior, &members[j * lm + c], config.covariance, rng)?;
            s.means[j][c] = mu;
            s.covariances[j][c] = cov;
        }
    }
    s.log_joint = log_joint(s, data)?;
    Ok(())
}

const LOG_FLOOR: f64 = -708.396_418_532_264_1; // ln(f64::MIN_POSITIVE)

fn log_joint(s: &PosteriorSample, data: &[&DMatrix<f64>]) -> Result<f64> {
    let evals = evaluators(s)?;
    let lg = |p: f64| p.ln().max(LOG_FLOOR);
    let mut total = 0.0;
    let mut comp = Vec::new();
    for (q, obs) in data.iter().enumerate() {
        let (h, m) = (&s.state_seqs[q], &s.mix_seqs[q]);
        for t in 0..obs.nrows() {
            total += if t == 0 {
                lg(s.initial[h[0]])
            } else {
                lg(s.transitions[(h[t - 1], h[t])])
            };
            evals[h[t]].component_log_densities(&row(obs, t), &mut comp);
            total += comp[m[t]].max(LOG_FLOOR);
        }
    }
    if !total.is_finite() {
        return Err(Error::Numerical("non-finite joint log-probability".into()));
    }
    Ok(total)
}

fn check_shapes(
    state: &PosteriorSample,
    data: &[&DMatrix<f64>],
    config: &HdpHmmConfig,
    prior: &NiwPrior,
) -> Result<()> {
    let l = config.truncation;
    let lm = config.mix_truncation;
    let ok = state.beta.len() == l
        && state.initial.len() == l
        && state.transitions.shape() == (l, l)
        && state.mix_weights.len() == l
        && state.mix_weights.iter().all(|w| w.len() == lm)
        && state.means.iter().all(|m| m.len() == lm)
        && state.covariances.iter().all(|c| c.len() == lm)
        && state.dim() == prior.dim();
    if !ok {
        return Err(Error::ShapeMismatch(
            "sampler state does not match the configured truncation".into(),
        ));
    }
    if let Some(m) = data.iter().find(|m| m.ncols() != prior.dim() || m.nrows() == 0) {
        return Err(Error::ShapeMismatch(format!(
            "sequence of shape {:?} does not match prior dimension {}",
            m.shape(),
            prior.dim()
        )));
    }
    Ok(())
}

/// Starts from prior parameters with latents assigned by `assign`, then
/// draws the parameters from their conditionals.
pub(crate) fn initialize<R: Rng + ?Sized>(
    data: &[&DMatrix<f64>],
    state_seqs: Vec<Vec<usize>>,
    config: &HdpHmmConfig,
    prior: &NiwPrior,
    rng: &mut R,
) -> Result<PosteriorSample> {
    let mut s = sample_from_prior(config, prior, rng)?;
    s.mix_seqs = state_seqs
        .iter()
        .map(|seq| seq.iter().map(|_| rng.random_range(0..config.mix_truncation)).collect())
        .collect();
    s.state_seqs = state_seqs;
    sample_parameters(&mut s, data, config, prior, rng)?;
    Ok(s)
}

/// One blocked sweep: (a) state paths by forward-filter/backward-sample,
/// (b) mixture indicators, (c) table counts and β, (d) transition rows and
/// the initial distribution, (e) mixture weights, (f) component parameters.
pub fn gibbs_sweep(
    state: &PosteriorSample,
    data: &[&DMatrix<f64>],
    config: &HdpHmmConfig,
    prior: &NiwPrior,
    rng: &mut ChaCha8Rng,
) -> Result<PosteriorSample> {
    check_shapes(state, data, config, prior)?;
    let evals = evaluators(state)?;
    let log_initial: Vec<f64> = state.initial.iter().map(|p| p.ln()).collect();
    let log_trans = state.transitions.map(f64::ln);
    let seeds: Vec<u64> = data.iter().map(|_| rng.random()).collect();
    let latents: Vec<(Vec<usize>, Vec<usize>)> = data
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(obs, &seed)| {
            let mut sub = ChaCha8Rng::seed_from_u64(seed);
            sample_latents(obs, &log_initial, &log_trans, &evals, &mut sub)
        })
        .collect::<Result<_>>()?;
    let mut next = state.clone();
    (next.state_seqs, next.mix_seqs) = latents.into_iter().unzip();
    sample_parameters(&mut next, data, config, prior, rng)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdphmm::HdpHmmConfig;

    fn prior1() -> NiwPrior {
        NiwPrior {
            mean0: DVector::from_element(1, 0.0),
            mean_scale: 1.0,
            dof: 4.0,
            scale_matrix: DMatrix::from_element(1, 1, 1.0),
        }
    }

    fn small_config(l: usize, lm: usize, kappa: f64) -> HdpHmmConfig {
        HdpHmmConfig {
            truncation: l,
            mix_truncation: lm,
            kappa,
            ..HdpHmmConfig::default()
        }
    }

    #[test]
    fn ffbs_path_frequencies_match_enumeration() {
        let cfg = small_config(2, 1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = sample_from_prior(&cfg, &prior1(), &mut rng).unwrap();
        s.initial = vec![0.6, 0.4];
        s.transitions = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.2, 0.8]);
        s.means = vec![
            vec![DVector::from_element(1, -1.0)],
            vec![DVector::from_element(1, 1.0)],
        ];
        s.covariances = vec![vec![DMatrix::from_element(1, 1, 1.0)]; 2];
        let obs = DMatrix::from_column_slice(3, 1, &[-0.5, 0.3, 1.2]);

        let evals = evaluators(&s).unwrap();
        let mut exact = [0.0; 8];
        for (code, p) in exact.iter_mut().enumerate() {
            let path = [code & 1, (code >> 1) & 1, (code >> 2) & 1];
            let mut v = s.initial[path[0]];
            for t in 0..3 {
                if t > 0 {
                    v *= s.transitions[(path[t - 1], path[t])];
                }
                v *= evals[path[t]].log_density(&[obs[(t, 0)]]).exp();
            }
            *p = v;
        }
        let z: f64 = exact.iter().sum();
        exact.iter_mut().for_each(|p| *p /= z);

        let li: Vec<f64> = s.initial.iter().map(|p| p.ln()).collect();
        let lt = s.transitions.map(f64::ln);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            let (h, _) = sample_latents(&obs, &li, &lt, &evals, &mut rng).unwrap();
            counts[h[0] | (h[1] << 1) | (h[2] << 2)] += 1;
        }
        for c in 0..8 {
            let f = counts[c] as f64 / n as f64;
            let se = (exact[c] * (1.0 - exact[c]) / n as f64).sqrt();
            assert!((f - exact[c]).abs() < 3.0 * se + 1e-12, "path {c}: {f} vs {}", exact[c]);
        }
    }

    #[test]
    fn empty_data_sweep_samples_prior() {
        let cfg = small_config(4, 2, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = sample_from_prior(&cfg, &prior1(), &mut rng).unwrap();
        let n = 20_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            s = gibbs_sweep(&s, &[], &cfg, &prior1(), &mut rng).unwrap();
            acc += s.beta[0];
            acc2 += s.beta[0] * s.beta[0];
        }
        // Successive prior draws are independent, so the plain SE applies.
        let m = acc / n as f64;
        let se = ((acc2 / n as f64 - m * m) / n as f64).sqrt();
        assert!((m - 1.0 / (1.0 + cfg.gamma)).abs() < 3.0 * se, "{m}");
        assert_eq!(s.log_joint, 0.0);
    }

    #[test]
    fn occupied_row_posterior_matches_counts() {
        let paths = vec![vec![0, 0, 1, 1, 1, 0], vec![2, 2, 0]];
        let (n0, n) = transition_counts(&paths, 3);
        let mut tab = [[0usize; 3]; 3];
        for p in &paths {
            for t in 1..p.len() {
                tab[p[t - 1]][p[t]] += 1;
            }
        }
        assert_eq!(n0, vec![1, 0, 1]);
        for j in 0..3 {
            assert_eq!(n[j], tab[j].to_vec());
        }
        let beta = [0.5, 0.3, 0.2];
        assert_eq!(
            row_posterior_params(&beta, 1, 2.0, 0.0, &n[1]),
            vec![2.0 * 0.5 + 1.0, 2.0 * 0.3 + 2.0, 2.0 * 0.2]
        );

        // One sequence held in state 0 with κ = 0: averaged over the β
        // draws of each call, π_00 − (αβ_0 + n_00)/(α + n_0·) has mean zero.
        let cfg = small_config(3, 1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = DMatrix::from_fn(12, 1, |t, _| 0.1 * t as f64);
        let mut s = initialize(&[&obs], vec![vec![0; 12]], &cfg, &prior1(), &mut rng).unwrap();
        let trials = 20_000;
        let mut diffs = Vec::with_capacity(trials);
        for _ in 0..trials {
            sample_parameters(&mut s, &[&obs], &cfg, &prior1(), &mut rng).unwrap();
            let mean = (cfg.alpha * s.beta[0] + 11.0) / (cfg.alpha + 11.0);
            diffs.push(s.transitions[(0, 0)] - mean);
        }
        let m = diffs.iter().sum::<f64>() / trials as f64;
        let v = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (trials - 1) as f64;
        assert!(m.abs() < 3.0 * (v / trials as f64).sqrt(), "{m}");
    }

    #[test]
    fn sweep_keeps_invariants_and_is_reproducible() {
        let cfg = small_config(5, 2, 5.0);
        let obs: Vec<DMatrix<f64>> = (0..3)
            .map(|q| DMatrix::from_fn(20, 2, |t, d| ((t * 7 + q * 3 + d) % 5) as f64 - 2.0 + 0.01 * t as f64))
            .collect();
        let refs: Vec<&DMatrix<f64>> = obs.iter().collect();
        let rows: Vec<Vec<f64>> = obs.iter().flat_map(|m| (0..20).map(move |t| row(m, t))).collect();
        let row_refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let prior = NiwPrior::from_data(&row_refs).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = initialize(&refs, vec![vec![0; 20]; 3], &cfg, &prior, &mut rng).unwrap();
            for _ in 0..10 {
                s = gibbs_sweep(&s, &refs, &cfg, &prior, &mut rng).unwrap();
                s.check().unwrap();
                assert!(s.log_joint.is_finite());
            }
            s
        };
        assert_eq!(run(4), run(4));
    }
}
