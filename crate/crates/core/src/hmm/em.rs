//! Baum-Welch training with closed-form M-step updates.

use std::borrow::Borrow;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gmm::{log_sum_exp, CovarianceKind, Gmm};
use super::inference::CompiledHmm;
use super::HmmModel;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::spectral::FeatureSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once `(L_i − L_{i−1}) / |L_{i−1}|` falls below this.
    pub tol: f64,
    pub seed: u64,
    pub covariance: CovarianceKind,
    /// Covariance floor relative to the pooled per-dimension variance.
    pub floor_fraction: f64,
    pub self_transition_init: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
            covariance: CovarianceKind::Diagonal,
            floor_fraction: 1e-6,
            self_transition_init: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: HmmModel,
    /// Total training log-likelihood before each M-step; the last entry is
    /// the likelihood of the returned model.
    pub trace: Vec<f64>,
    pub converged: bool,
}

struct Pooled {
    rows: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn pool(obs: &[&DMatrix<f64>]) -> Pooled {
    pool_rows(
        obs.iter()
            .flat_map(|m| (0..m.nrows()).map(move |t| m.row(t).iter().copied().collect::<Vec<_>>()))
            .collect(),
    )
}

fn pool_rows(rows: Vec<Vec<f64>>) -> Pooled {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for r in &rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    Pooled { rows, mean, var }
}

fn count_distinct(rows: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = rows
        .iter()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; returns assignments.
pub(crate) fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng, max_iters: usize) -> Vec<usize> {
    let n = points.len();
    if k <= 1 || n == 0 {
        return vec![0; n];
    }
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let d = points[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    assign
}

/// k-means on per-dimension standardized rows.
pub(crate) fn kmeans_assign(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k <= 1 {
        return vec![0; rows.len()];
    }
    let p = pool_rows(rows.to_vec());
    kmeans(&standardize(&p), k, rng, 100)
}

fn standardize(p: &Pooled) -> Vec<Vec<f64>> {
    let sd: Vec<f64> = p.var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    p.rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&p.mean)
                .zip(&sd)
                .map(|((x, mu), s)| (x - mu) / s)
                .collect()
        })
        .collect()
}

struct Floor {
    diag: Vec<f64>,
    scalar: f64,
}

impl Floor {
    fn new(var: &[f64], fraction: f64) -> Result<Self> {
        let positive: Vec<f64> = var.iter().copied().filter(|&v| v > 0.0).collect();
        if positive.is_empty() {
            return Err(Error::Degenerate("every feature dimension is constant".into()));
        }
        let fallback = positive.iter().sum::<f64>() / positive.len() as f64;
        let diag: Vec<f64> = var
            .iter()
            .map(|&v| fraction * if v > 0.0 { v } else { fallback })
            .collect();
        let scalar = diag.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self { diag, scalar })
    }

    fn apply(&self, cov: DMatrix<f64>, kind: CovarianceKind) -> DMatrix<f64> {
        match kind {
            CovarianceKind::Diagonal => DMatrix::from_diagonal(&DVector::from_iterator(
                cov.nrows(),
                cov.diagonal().iter().zip(&self.diag).map(|(v, f)| v.max(*f)),
            )),
            CovarianceKind::Full => {
                let sym = (&cov + cov.transpose()) * 0.5;
                let eig = SymmetricEigen::new(sym);
                let vals = eig.eigenvalues.map(|v| v.max(self.scalar));
                &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
            }
        }
    }
}

fn weighted_cov(rows: &[&[f64]], w: &[f64], mean: &DVector<f64>, kind: CovarianceKind) -> DMatrix<f64> {
    let d = mean.len();
    let total: f64 = w.iter().sum();
    let mut cov = DMatrix::zeros(d, d);
    for (r, &wi) in rows.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        let diff = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(a, b)| a - b));
        match kind {
            CovarianceKind::Diagonal => {
                for j in 0..d {
                    cov[(j, j)] += wi * diff[j] * diff[j];
                }
            }
            CovarianceKind::Full => cov.ger(wi, &diff, &diff, 1.0),
        }
    }
    cov / total
}

fn mean_of(rows: &[&[f64]], d: usize) -> DVector<f64> {
    let mut m = DVector::zeros(d);
    for r in rows {
        for j in 0..d {
            m[j] += r[j];
        }
    }
    m / rows.len() as f64
}

fn initialize(
    pooled: &Pooled,
    k: usize,
    m: usize,
    cfg: &EmConfig,
    floor: &Floor,
    rng: &mut ChaCha8Rng,
) -> Result<HmmModel> {
    let d = pooled.mean.len();
    let z = standardize(pooled);
    let all: Vec<&[f64]> = pooled.rows.iter().map(Vec::as_slice).collect();
    let pooled_cov = weighted_cov(
        &all,
        &vec![1.0; all.len()],
        &DVector::from_vec(pooled.mean.clone()),
        cfg.covariance,
    );

    let states = kmeans(&z, k, rng, 100);
    let mut emissions = Vec::with_capacity(k);
    for s in 0..k {
        let idx: Vec<usize> = (0..z.len()).filter(|&i| states[i] == s).collect();
        let idx = if idx.is_empty() { (0..z.len()).collect() } else { idx };
        let sub_z: Vec<Vec<f64>> = idx.iter().map(|&i| z[i].clone()).collect();
        let comps = kmeans(&sub_z, m, rng, 100);
        let mut weights = Vec::with_capacity(m);
        let mut means = Vec::with_capacity(m);
        let mut covs = Vec::with_capacity(m);
        let state_rows: Vec<&[f64]> = idx.iter().map(|&i| all[i]).collect();
        let state_mean = mean_of(&state_rows, d);
        for c in 0..m {
            let rows: Vec<&[f64]> = idx
                .iter()
                .zip(&comps)
                .filter(|(_, &a)| a == c)
                .map(|(&i, _)| all[i])
                .collect();
            weights.push((rows.len() as f64 + 1.0) / (idx.len() + m) as f64);
            if rows.is_empty() {
                means.push(state_mean.clone());
                covs.push(floor.apply(pooled_cov.clone(), cfg.covariance));
                continue;
            }
            let mu = mean_of(&rows, d);
            let cov = if rows.len() >= 2 {
                weighted_cov(&rows, &vec![1.0; rows.len()], &mu, cfg.covariance)
            } else {
                pooled_cov.clone()
            };
            means.push(mu);
            covs.push(floor.apply(cov, cfg.covariance));
        }
        emissions.push(Gmm::new(weights, means, covs)?);
    }
    let stay = if k == 1 { 1.0 } else { cfg.self_transition_init };
    let leave = if k == 1 { 0.0 } else { (1.0 - stay) / (k - 1) as f64 };
    let trans = DMatrix::from_fn(k, k, |i, j| if i == j { stay } else { leave });
    HmmModel::new(vec![1.0 / k as f64; k], trans, emissions)
}

struct SeqStats {
    log_likelihood: f64,
    first: Vec<f64>,
    xi: DMatrix<f64>,
    /// responsibilities r[t][k*M + m]
    resp: Vec<Vec<f64>>,
}

fn e_step(model: &CompiledHmm, m: usize, obs: &DMatrix<f64>) -> Result<SeqStats> {
    let k = model.n_states();
    let (t_len, d) = obs.shape();
    let mut comp = vec![0.0; 0];
    let mut log_b = DMatrix::zeros(t_len, k);
    let mut within = vec![vec![0.0; k * m]; t_len];
    let mut x = vec![0.0; d];
    for t in 0..t_len {
        for (j, v) in x.iter_mut().enumerate() {
            *v = obs[(t, j)];
        }
        for s in 0..k {
            model.emissions[s].component_log_densities(&x, &mut comp);
            let l = log_sum_exp(&comp);
            log_b[(t, s)] = l;
            for c in 0..m {
                within[t][s * m + c] = if l.is_finite() {
                    (comp[c] - l).exp()
                } else {
                    1.0 / m as f64
                };
            }
        }
    }
    if log_b.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numerical("non-finite emission density during training".into()));
    }
    let fb = model.forward_backward(&log_b)?;
    let la = &model.log_transitions;
    let mut xi = DMatrix::zeros(k, k);
    let mut buf = vec![0.0; k * k];
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..k {
            for j in 0..k {
                buf[i * k + j] = fb.log_alpha[(t, i)] + la[(i, j)] + log_b[(t + 1, j)] + fb.log_beta[(t + 1, j)];
            }
        }
        let c = log_sum_exp(&buf);
        for i in 0..k {
            for j in 0..k {
                xi[(i, j)] += (buf[i * k + j] - c).exp();
            }
        }
    }
    let mut first = vec![0.0; k];
    let mut resp = within;
    let mut g = vec![0.0; k];
    for t in 0..t_len {
        for s in 0..k {
            g[s] = fb.log_alpha[(t, s)] + fb.log_beta[(t, s)];
        }
        let c = log_sum_exp(&g);
        for s in 0..k {
            let gamma = (g[s] - c).exp();
            if t == 0 {
                first[s] = gamma;
            }
            for cidx in 0..m {
                resp[t][s * m + cidx] *= gamma;
            }
        }
    }
    Ok(SeqStats {
        log_likelihood: fb.log_likelihood,
        first,
        xi,
        resp,
    })
}

fn m_step(
    prev: &HmmModel,
    stats: &[SeqStats],
    rows: &[&[f64]],
    m: usize,
    cfg: &EmConfig,
    floor: &Floor,
) -> Result<HmmModel> {
    let k = prev.n_states();
    let d = prev.dim();
    let n_seq = stats.len() as f64;

    let mut initial = vec![0.0; k];
    let mut xi = DMatrix::zeros(k, k);
    for s in stats {
        for (a, b) in initial.iter_mut().zip(&s.first) {
            *a += b / n_seq;
        }
        xi += &s.xi;
    }
    let isum: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|v| *v /= isum);
    let mut trans = prev.transitions.clone();
    for i in 0..k {
        let total: f64 = xi.row(i).sum();
        if total > 0.0 {
            for j in 0..k {
                trans[(i, j)] = xi[(i, j)] / total;
            }
        }
    }

    let resp: Vec<&Vec<f64>> = stats.iter().flat_map(|s| s.resp.iter()).collect();
    let mut emissions = Vec::with_capacity(k);
    for s in 0..k {
        let old = &prev.emissions[s];
        let counts: Vec<f64> = (0..m).map(|c| resp.iter().map(|r| r[s * m + c]).sum()).collect();
        let state_total: f64 = counts.iter().sum();
        if !(state_total > 1e-300) {
            emissions.push(old.clone());
            continue;
        }
        let mut weights = Vec::with_capacity(m);
        let mut means = Vec::with_capacity(m);
        let mut covs = Vec::with_capacity(m);
        for c in 0..m {
            weights.push(counts[c] / state_total);
            if !(counts[c] > 1e-300) {
                means.push(old.means[c].clone());
                covs.push(old.covariances[c].clone());
                continue;
            }
            let w: Vec<f64> = resp.iter().map(|r| r[s * m + c]).collect();
            let mut mu = DVector::zeros(d);
            for (r, &wi) in rows.iter().zip(&w) {
                for j in 0..d {
                    mu[j] += wi * r[j];
                }
            }
            mu /= counts[c];
            let cov = weighted_cov(rows, &w, &mu, cfg.covariance);
            means.push(mu);
            covs.push(floor.apply(cov, cfg.covariance));
        }
        emissions.push(Gmm::new(weights, means, covs)?);
    }
    HmmModel::new(initial, trans, emissions)
}

/// Fits a K-state, M-component model to the pooled sequences.
pub fn em_fit<S: Borrow<FeatureSequence> + Sync>(obs: &[S], k: usize, m: usize, cfg: &EmConfig) -> Result<EmFit> {
    if k == 0 || m == 0 {
        return Err(Error::InvalidArgument("K and M must be at least 1".into()));
    }
    let mats: Vec<&DMatrix<f64>> = obs.iter().map(|s| &s.borrow().features).collect();
    if mats.is_empty() || mats.iter().any(|m| m.nrows() == 0) {
        return Err(Error::InsufficientData("training needs non-empty sequences".into()));
    }
    let d = mats[0].ncols();
    if mats.iter().any(|m| m.ncols() != d) {
        return Err(Error::ShapeMismatch("training sequences differ in dimension".into()));
    }
    if mats.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("training features contain non-finite values".into()));
    }
    let pooled = pool(&mats);
    let total = pooled.rows.len();
    if total < 10 * k * m {
        return Err(Error::InsufficientData(format!(
            "{total} time steps cannot train K={k}, M={m}; need at least {}",
            10 * k * m
        )));
    }
    let distinct = count_distinct(&pooled.rows);
    if distinct < k * m {
        return Err(Error::Degenerate(format!(
            "{distinct} distinct feature vectors for {} mixture components",
            k * m
        )));
    }
    let floor = Floor::new(&pooled.var, cfg.floor_fraction)?;
    let mut rng = rng_for(cfg.seed, &[k as u64, m as u64]);
    let mut model = initialize(&pooled, k, m, cfg, &floor, &mut rng)?;
    let rows: Vec<&[f64]> = pooled.rows.iter().map(Vec::as_slice).collect();

    let mut trace = Vec::new();
    let mut converged = false;
    loop {
        let compiled = model.compile()?;
        let stats: Vec<SeqStats> = mats
            .par_iter()
            .map(|o| e_step(&compiled, m, o))
            .collect::<Result<_>>()?;
        let ll: f64 = stats.iter().map(|s| s.log_likelihood).sum();
        if !ll.is_finite() {
            return Err(Error::Numerical("training log-likelihood is not finite".into()));
        }
        if let Some(&last) = trace.last() {
            let last: f64 = last;
            if (ll - last) / last.abs().max(f64::MIN_POSITIVE) < cfg.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if trace.len() >= cfg.max_iters.max(1) {
            break;
        }
        model = m_step(&model, &stats, &rows, m, cfg, &floor)?;
    }
    Ok(EmFit {
        model,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::log_likelihood;
    use crate::hmm::testutil::random_model;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn seq(m: DMatrix<f64>) -> FeatureSequence {
        FeatureSequence::from_matrix(m)
    }

    /// Ancestral sampling from a model, written out here so the test does
    /// not depend on the simulator.
    fn sample(model: &HmmModel, t_len: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let draw = |p: &[f64], rng: &mut ChaCha8Rng| {
            let mut u: f64 = rng.random();
            for (i, &w) in p.iter().enumerate() {
                if u < w {
                    return i;
                }
                u -= w;
            }
            p.len() - 1
        };
        let d = model.dim();
        let mut out = DMatrix::zeros(t_len, d);
        let mut h = draw(&model.initial, rng);
        for t in 0..t_len {
            if t > 0 {
                let row: Vec<f64> = model.transitions.row(h).iter().copied().collect();
                h = draw(&row, rng);
            }
            let g = &model.emissions[h];
            let c = draw(&g.weights, rng);
            let l = g.covariances[c].clone().cholesky().unwrap().l();
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &g.means[c] + l * z;
            for j in 0..d {
                out[(t, j)] = x[j];
            }
        }
        out
    }

    #[test]
    fn recovers_separated_means() {
        let g = |mu: f64| Gmm::single(DVector::from_element(1, mu), DMatrix::identity(1, 1)).unwrap();
        let truth = HmmModel::new(
            vec![0.5, 0.5],
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
            vec![g(-5.0), g(5.0)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let data: Vec<FeatureSequence> = (0..50).map(|_| seq(sample(&truth, 100, &mut rng))).collect();
        let fit = em_fit(&data, 2, 1, &EmConfig::default()).unwrap();
        let mut means: Vec<f64> = fit.model.emissions.iter().map(|e| e.means[0][0]).collect();
        means.sort_by(f64::total_cmp);
        assert!(
            (means[0] + 5.0).abs() < 0.2 && (means[1] - 5.0).abs() < 0.2,
            "{means:?}"
        );
    }

    #[test]
    fn single_state_is_gaussian_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<FeatureSequence> = (0..5)
            .map(|_| {
                seq(DMatrix::from_fn(40, 3, |_, j| {
                    j as f64 + rng.sample::<f64, _>(StandardNormal)
                }))
            })
            .collect();
        for kind in [CovarianceKind::Diagonal, CovarianceKind::Full] {
            let cfg = EmConfig {
                covariance: kind,
                ..EmConfig::default()
            };
            let fit = em_fit(&data, 1, 1, &cfg).unwrap();
            let rows: Vec<Vec<f64>> = data
                .iter()
                .flat_map(|s| (0..40).map(move |t| s.features.row(t).iter().copied().collect::<Vec<_>>()))
                .collect();
            let n = rows.len() as f64;
            let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            let g = &fit.model.emissions[0];
            for j in 0..3 {
                assert!((g.means[0][j] - mean[j]).abs() < 1e-8);
                for l in 0..3 {
                    let c = rows.iter().map(|r| (r[j] - mean[j]) * (r[l] - mean[l])).sum::<f64>() / n;
                    let expected = if kind == CovarianceKind::Diagonal && j != l {
                        0.0
                    } else {
                        c
                    };
                    assert!((g.covariances[0][(j, l)] - expected).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let truth = random_model(&mut rng, 2, 2, 2);
        let data: Vec<FeatureSequence> = (0..6).map(|_| seq(sample(&truth, 30, &mut rng))).collect();
        let cfg = EmConfig {
            seed: 9,
            ..EmConfig::default()
        };
        let a = em_fit(&data, 2, 2, &cfg).unwrap();
        let b = em_fit(&data, 2, 2, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn stops_at_max_iters() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let truth = random_model(&mut rng, 3, 2, 2);
        let data: Vec<FeatureSequence> = (0..4).map(|_| seq(sample(&truth, 50, &mut rng))).collect();
        let cfg = EmConfig {
            max_iters: 3,
            tol: 0.0,
            ..EmConfig::default()
        };
        let fit = em_fit(&data, 3, 2, &cfg).unwrap();
        assert_eq!(fit.trace.len(), 3);
        assert!(!fit.converged);
        let total: f64 = data.iter().map(|s| log_likelihood(&fit.model, s).unwrap()).sum();
        assert!((total - fit.trace[2]).abs() < 1e-9 * total.abs());
    }

    #[test]
    fn duplicate_windows_stay_finite() {
        let mut rows = DMatrix::zeros(60, 2);
        for t in 0..60 {
            rows[(t, 0)] = (t % 3) as f64;
            rows[(t, 1)] = if t < 30 { 1.0 } else { 2.0 };
        }
        let fit = em_fit(&[seq(rows)], 2, 2, &EmConfig::default()).unwrap();
        assert!(fit.trace.iter().all(|v| v.is_finite()));
        for g in &fit.model.emissions {
            for c in &g.covariances {
                assert!(c.diagonal().iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn data_requirements() {
        let few = seq(DMatrix::from_fn(19, 1, |t, _| t as f64));
        assert!(matches!(
            em_fit(&[few], 2, 1, &EmConfig::default()),
            Err(Error::InsufficientData(_))
        ));
        let flat = seq(DMatrix::from_fn(100, 1, |t, _| (t % 2) as f64));
        assert!(matches!(
            em_fit(&[flat], 3, 1, &EmConfig::default()),
            Err(Error::Degenerate(_))
        ));
        assert!(em_fit::<FeatureSequence>(&[], 1, 1, &EmConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn trace_is_monotone(seed in any::<u64>(), k in 1usize..=3, m in 1usize..=2, full in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_model(&mut rng, k, m, 2);
            let data: Vec<FeatureSequence> = (0..3).map(|_| seq(sample(&truth, 25, &mut rng))).collect();
            let cfg = EmConfig {
                max_iters: 30,
                seed,
                covariance: if full { CovarianceKind::Full } else { CovarianceKind::Diagonal },
                ..EmConfig::default()
            };
            let fit = em_fit(&data, k, m, &cfg).unwrap();
            for w in fit.trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
            }
        }
    }
}
