//! Samplers for the sticky HDP-HMM conditionals.
//!
//! Gamma variates with small shapes are drawn in log space so that Dirichlet
//! and Beta draws with concentrations far below one stay well defined; the
//! resulting probabilities may underflow to exactly zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{log_sum_exp, CovarianceKind};

/// `ln G` for `G ~ Gamma(shape, 1)`; `−∞` for a zero shape.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if !(shape > 0.0) {
        return f64::NEG_INFINITY;
    }
    if shape < 1.0 {
        let g = Gamma::new(shape + 1.0, 1.0).expect("shape above one").sample(rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        g.ln() + u.ln() / shape
    } else {
        Gamma::new(shape, 1.0).expect("positive shape").sample(rng).ln()
    }
}

pub fn sample_dirichlet<R: Rng + ?Sized>(params: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = params.iter().map(|&a| sample_log_gamma(a, rng)).collect();
    let c = log_sum_exp(&logs);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - c).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// `(x, 1 − x)` for `x ~ Beta(a, b)`, each computed without cancellation.
pub fn sample_beta_pair<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> (f64, f64) {
    let la = sample_log_gamma(a, rng);
    let lb = sample_log_gamma(b, rng);
    let c = log_sum_exp(&[la, lb]);
    ((la - c).exp(), (lb - c).exp())
}

/// Stick-breaking weights from `L − 1` fractions; the last weight takes the
/// remaining stick.
pub fn gem_from_fractions(fractions: &[f64]) -> Vec<f64> {
    gem_from_pairs(fractions.iter().map(|&f| (f, 1.0 - f)))
}

fn gem_from_pairs(pairs: impl Iterator<Item = (f64, f64)>) -> Vec<f64> {
    let mut out = Vec::new();
    let mut rest = 1.0;
    for (take, keep) in pairs {
        out.push(rest * take);
        rest *= keep;
    }
    out.push(rest);
    out
}

/// Truncated GEM(γ) draw of length `l`.
pub fn sample_gem<R: Rng + ?Sized>(gamma: f64, l: usize, rng: &mut R) -> Vec<f64> {
    gem_posterior(gamma, &vec![0.0; l], rng)
}

/// Draw from the truncated-GEM posterior given table counts `m̄`:
/// `β'_k ~ Beta(1 + m̄_k, γ + Σ_{l>k} m̄_l)`.
pub fn gem_posterior<R: Rng + ?Sized>(gamma: f64, counts: &[f64], rng: &mut R) -> Vec<f64> {
    let l = counts.len();
    if l == 0 {
        return Vec::new();
    }
    let mut tail: Vec<f64> = vec![0.0; l];
    for k in (0..l - 1).rev() {
        tail[k] = tail[k + 1] + counts[k + 1];
    }
    let pairs: Vec<(f64, f64)> = (0..l - 1)
        .map(|k| sample_beta_pair(1.0 + counts[k], gamma + tail[k], rng))
        .collect();
    gem_from_pairs(pairs.into_iter())
}

/// Dirichlet parameters of a sticky transition row: `αβ + κ e_j`.
pub fn sticky_row_params(beta: &[f64], j: usize, alpha: f64, kappa: f64) -> Vec<f64> {
    beta.iter()
        .enumerate()
        .map(|(k, &b)| alpha * b + if k == j { kappa } else { 0.0 })
        .collect()
}

pub fn sample_sticky_row<R: Rng + ?Sized>(beta: &[f64], j: usize, alpha: f64, kappa: f64, rng: &mut R) -> Vec<f64> {
    sample_dirichlet(&sticky_row_params(beta, j, alpha, kappa), rng)
}

/// Number of occupied tables after `n` customers in a Chinese restaurant with
/// concentration `a`.
pub fn sample_table_count<R: Rng + ?Sized>(n: usize, a: f64, rng: &mut R) -> usize {
    if n == 0 || !(a > 0.0) {
        return 0;
    }
    (0..n).filter(|&i| rng.random::<f64>() < a / (i as f64 + a)).count()
}

pub fn sample_binomial<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> usize {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n as u64, p).expect("valid binomial").sample(rng) as usize
}

pub fn sample_categorical_log<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in w.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    w.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Normal-Inverse-Wishart prior on a Gaussian's mean and covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NiwPriorDoc", into = "NiwPriorDoc")]
pub struct NiwPrior {
    pub mean0: DVector<f64>,
    pub mean_scale: f64,
    pub dof: f64,
    pub scale_matrix: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NiwPriorDoc {
    mean0: Vec<f64>,
    mean_scale: f64,
    dof: f64,
    scale_matrix: Vec<Vec<f64>>,
}

impl From<NiwPrior> for NiwPriorDoc {
    fn from(p: NiwPrior) -> Self {
        let d = p.mean0.len();
        Self {
            mean0: p.mean0.iter().copied().collect(),
            mean_scale: p.mean_scale,
            dof: p.dof,
            scale_matrix: (0..d)
                .map(|i| p.scale_matrix.row(i).iter().copied().collect())
                .collect(),
        }
    }
}

impl TryFrom<NiwPriorDoc> for NiwPrior {
    type Error = Error;

    fn try_from(d: NiwPriorDoc) -> Result<Self> {
        let n = d.mean0.len();
        if d.scale_matrix.len() != n || d.scale_matrix.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("NIW scale matrix must be {n}x{n}")));
        }
        let p = NiwPrior {
            mean0: DVector::from_vec(d.mean0),
            mean_scale: d.mean_scale,
            dof: d.dof,
            scale_matrix: DMatrix::from_fn(n, n, |i, j| d.scale_matrix[i][j]),
        };
        p.check()?;
        Ok(p)
    }
}

impl NiwPrior {
    pub fn dim(&self) -> usize {
        self.mean0.len()
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.scale_matrix.shape() != (d, d) {
            return Err(Error::Config("NIW prior dimensions are inconsistent".into()));
        }
        if !(self.mean_scale > 0.0) {
            return Err(Error::Config("NIW mean_scale must be positive".into()));
        }
        if !(self.dof > d as f64 - 1.0) {
            return Err(Error::Config(format!("NIW dof must exceed {}", d as f64 - 1.0)));
        }
        if self.scale_matrix.clone().cholesky().is_none() {
            return Err(Error::Config("NIW scale matrix must be positive definite".into()));
        }
        Ok(())
    }

    /// Weak data-scaled prior: pooled mean, `λ₀ = 1`, `ν₀ = D + 2`,
    /// scale `0.75 ×` pooled covariance.
    pub fn from_data(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if n < 2 || d == 0 {
            return Err(Error::InsufficientData(
                "a data-driven prior needs at least two feature vectors".into(),
            ));
        }
        let mut mean = DVector::zeros(d);
        for r in rows {
            for j in 0..d {
                mean[j] += r[j] / n as f64;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let diff = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(a, b)| a - b));
            cov.ger(1.0 / n as f64, &diff, &diff, 1.0);
        }
        let tr = cov.trace();
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::Degenerate("pooled features have no variance".into()));
        }
        let mut scale = cov * 0.75;
        if scale.clone().cholesky().is_none() {
            scale += DMatrix::identity(d, d) * (1e-6 * tr / d as f64);
        }
        let p = Self {
            mean0: mean,
            mean_scale: 1.0,
            dof: d as f64 + 2.0,
            scale_matrix: scale,
        };
        p.check()?;
        Ok(p)
    }

    /// Conjugate update with the rows assigned to one component.
    pub fn posterior(&self, rows: &[&[f64]]) -> NiwPrior {
        let n = rows.len();
        if n == 0 {
            return self.clone();
        }
        let d = self.dim();
        let nf = n as f64;
        let mut xbar = DVector::zeros(d);
        for r in rows {
            for j in 0..d {
                xbar[j] += r[j] / nf;
            }
        }
        let mut scatter = DMatrix::zeros(d, d);
        for r in rows {
            let diff = DVector::from_iterator(d, r.iter().zip(xbar.iter()).map(|(a, b)| a - b));
            scatter.ger(1.0, &diff, &diff, 1.0);
        }
        let lambda_n = self.mean_scale + nf;
        let dm = &xbar - &self.mean0;
        let mut psi = &self.scale_matrix + scatter;
        psi.ger(self.mean_scale * nf / lambda_n, &dm, &dm, 1.0);
        NiwPrior {
            mean0: (&self.mean0 * self.mean_scale + xbar * nf) / lambda_n,
            mean_scale: lambda_n,
            dof: self.dof + nf,
            scale_matrix: (&psi + psi.transpose()) * 0.5,
        }
    }

    /// `(μ, Σ)` draw. The diagonal variant draws each variance from the
    /// Inverse-Gamma marginal of the Inverse-Wishart diagonal.
    pub fn sample<R: Rng + ?Sized>(&self, kind: CovarianceKind, rng: &mut R) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.dim();
        let cov = match kind {
            CovarianceKind::Full => sample_inverse_wishart(&self.scale_matrix, self.dof, rng)?,
            CovarianceKind::Diagonal => {
                let shape = 0.5 * (self.dof - d as f64 + 1.0);
                DMatrix::from_diagonal(&DVector::from_fn(d, |j, _| {
                    let rate = 0.5 * self.scale_matrix[(j, j)];
                    rate / Gamma::new(shape, 1.0).expect("positive shape").sample(rng)
                }))
            }
        };
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("sampled covariance is not positive definite".into()))?;
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mean = &self.mean0 + chol.l() * z / self.mean_scale.sqrt();
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite NIW draw".into()));
        }
        Ok((mean, cov))
    }

    /// Diagonal-covariance conjugate update: same mean update, and only the
    /// diagonal of the scale matrix is carried.
    pub fn posterior_diagonal(&self, rows: &[&[f64]]) -> NiwPrior {
        let mut p = self.posterior(rows);
        let diag = p.scale_matrix.diagonal();
        p.scale_matrix = DMatrix::from_diagonal(&diag);
        p
    }
}

/// Bartlett construction. With `Ψ = C Cᵀ` and `A` lower triangular
/// (`A_ii = √χ²(ν − i)`, `A_ij ~ N(0, 1)`), `Σ = (C A⁻ᵀ)(C A⁻ᵀ)ᵀ`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, dof: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    let c = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("inverse-Wishart scale is not positive definite".into()))?
        .l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let shape = 0.5 * (dof - i as f64);
        a[(i, i)] = (2.0 * Gamma::new(shape, 1.0).expect("dof above D − 1").sample(rng)).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // C A⁻ᵀ: solve Aᵀ-upper system from the right via (A⁻¹ Cᵀ)ᵀ.
    let m = a
        .solve_lower_triangular(&c.transpose())
        .ok_or_else(|| Error::Numerical("singular Bartlett factor".into()))?
        .transpose();
    let s = &m * m.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn gem_fraction_injection() {
        let b = gem_from_fractions(&[0.5; 4]);
        assert_eq!(b, vec![0.5, 0.25, 0.125, 0.0625, 0.0625]);
        assert_eq!(gem_from_fractions(&[]), vec![1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_gem(1.0, 1, &mut rng), vec![1.0]);
    }

    #[test]
    fn gem_first_weight_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_gem(1.0, 50, &mut rng)[0]).collect();
        let (m, _) = mean_and_se(&draws);
        assert!((m - 0.5).abs() < 0.01, "{m}");
    }

    #[test]
    fn gem_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for gamma in [0.01, 1.0, 50.0] {
            let b = sample_gem(gamma, 20, &mut rng);
            assert!(b.iter().all(|&v| v >= 0.0));
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sticky_self_transition_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta = [0.25; 4];
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_sticky_row(&beta, 1, 6.0, 2.0, &mut rng)[1])
            .collect();
        let (m, se) = mean_and_se(&draws);
        assert!((m - 0.4375).abs() < 0.005);
        assert!((m - 0.4375).abs() < 3.0 * se);
    }

    #[test]
    fn sticky_limits() {
        let beta = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(
            sticky_row_params(&beta, 2, 3.0, 0.0),
            beta.iter().map(|b| 3.0 * b).collect::<Vec<_>>()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            assert!(sample_sticky_row(&beta, 0, 1.0, 1e9, &mut rng)[0] > 0.999);
        }
    }

    #[test]
    fn tiny_concentrations_stay_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = sample_dirichlet(&[1e-8, 1e-6, 0.0, 1e-3], &mut rng);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(p[2], 0.0);
        }
    }

    #[test]
    fn small_shape_gamma_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws: Vec<f64> = (0..200_000).map(|_| sample_log_gamma(0.3, &mut rng).exp()).collect();
        let (m, se) = mean_and_se(&draws);
        assert!((m - 0.3).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn table_count_mean() {
        // E[m] = Σ_{i<n} a / (i + a)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, a) = (30, 2.5);
        let expected: f64 = (0..n).map(|i| a / (i as f64 + a)).sum();
        let draws: Vec<f64> = (0..50_000).map(|_| sample_table_count(n, a, &mut rng) as f64).collect();
        let (m, se) = mean_and_se(&draws);
        assert!((m - expected).abs() < 3.0 * se);
        assert_eq!(sample_table_count(0, a, &mut rng), 0);
        assert_eq!(sample_table_count(5, 0.0, &mut rng), 0);
        assert_eq!(sample_table_count(1, 1e-300, &mut rng), 1);
    }

    #[test]
    fn inverse_wishart_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let psi = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let nu = 7.0;
        let n = 40_000;
        let mut acc = DMatrix::zeros(2, 2);
        let mut acc2 = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let s = sample_inverse_wishart(&psi, nu, &mut rng).unwrap();
            acc2 += s.component_mul(&s);
            acc += s;
        }
        let mean = &acc / n as f64;
        let expected = &psi / (nu - 3.0);
        for i in 0..2 {
            for j in 0..2 {
                let var = acc2[(i, j)] / n as f64 - mean[(i, j)].powi(2);
                let se = (var / n as f64).sqrt();
                assert!((mean[(i, j)] - expected[(i, j)]).abs() < 4.0 * se, "({i},{j})");
            }
        }
    }

    #[test]
    fn niw_posterior_closed_form() {
        let prior = NiwPrior {
            mean0: DVector::from_vec(vec![1.0]),
            mean_scale: 2.0,
            dof: 3.0,
            scale_matrix: DMatrix::from_element(1, 1, 4.0),
        };
        let data = [[0.0], [2.0], [4.0]];
        let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let p = prior.posterior(&rows);
        // x̄ = 2, S = 8, λn = 5, μn = (2·1 + 3·2)/5, Ψn = 4 + 8 + (2·3/5)(2 − 1)²
        assert!((p.mean_scale - 5.0).abs() < 1e-15);
        assert!((p.dof - 6.0).abs() < 1e-15);
        assert!((p.mean0[0] - 1.6).abs() < 1e-15);
        assert!((p.scale_matrix[(0, 0)] - 13.2).abs() < 1e-12);
        assert_eq!(prior.posterior(&[]), prior);
    }

    #[test]
    fn diagonal_draw_mean_matches_full() {
        let prior = NiwPrior {
            mean0: DVector::from_vec(vec![0.0, 3.0]),
            mean_scale: 1.0,
            dof: 6.0,
            scale_matrix: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5])),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| prior.sample(CovarianceKind::Diagonal, &mut rng).unwrap().1[(0, 0)])
            .collect();
        let (m, se) = mean_and_se(&draws);
        // Σ₀₀ ~ IG((ν − D + 1)/2, Ψ₀₀/2) has mean Ψ₀₀ / (ν − D − 1)
        assert!((m - 2.0 / 3.0).abs() < 3.0 * se, "{m}");
    }

    #[test]
    fn data_prior_defaults() {
        let data = [[0.0, 1.0], [2.0, 1.0], [4.0, 4.0], [2.0, 2.0]];
        let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let p = NiwPrior::from_data(&rows).unwrap();
        assert_eq!(p.mean0.as_slice(), &[2.0, 2.0]);
        assert_eq!(p.dof, 4.0);
        assert_eq!(p.mean_scale, 1.0);
        assert!((p.scale_matrix[(0, 0)] - 0.75 * 2.0).abs() < 1e-12);
        let back: NiwPrior = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
