//! Model-order selection by stratified cross-validated accuracy.

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::em::{em_fit, EmConfig};
use super::inference::CompiledHmm;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::spectral::FeatureSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
    pub k_range: Vec<usize>,
    pub m_range: Vec<usize>,
    pub em: EmConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            k_range: vec![1, 2, 3],
            m_range: vec![1, 2, 3],
            em: EmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvCandidate {
    pub k: usize,
    pub m: usize,
    /// `None` when training failed on some fold.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvSelection {
    pub k: usize,
    pub m: usize,
    pub accuracy: f64,
    pub candidates: Vec<CvCandidate>,
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Stratified fold index of every sequence.
fn assign_folds(labels: &[usize], n_classes: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut out = vec![0; labels.len()];
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng_for(seed, &[0xF01D, c as u64]));
        for (pos, i) in idx.into_iter().enumerate() {
            out[i] = pos % folds;
        }
    }
    out
}

fn fold_accuracy<S: Borrow<FeatureSequence> + Sync>(
    seqs: &[S],
    labels: &[usize],
    n_classes: usize,
    fold_of: &[usize],
    fold: usize,
    (k, m): (usize, usize),
    em: &EmConfig,
) -> Result<(usize, usize)> {
    let em = EmConfig {
        seed: derive_seed(em.seed, &[k as u64, m as u64, fold as u64]),
        ..em.clone()
    };
    let mut models = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let train: Vec<&FeatureSequence> = (0..seqs.len())
            .filter(|&i| labels[i] == c && fold_of[i] != fold)
            .map(|i| seqs[i].borrow())
            .collect();
        models.push(CompiledHmm::new(&em_fit(&train, k, m, &em)?.model)?);
    }
    let mut correct = 0;
    let mut total = 0;
    for i in (0..seqs.len()).filter(|&i| fold_of[i] == fold) {
        let scores = models
            .iter()
            .map(|mdl| mdl.log_likelihood(&seqs[i].borrow().features))
            .collect::<Result<Vec<_>>>()?;
        correct += usize::from(argmax_lowest(&scores) == labels[i]);
        total += 1;
    }
    Ok((correct, total))
}

/// Picks the `(K, M)` with the highest cross-validated accuracy. Ties go to
/// smaller K, then smaller M; candidates whose training fails are skipped.
pub fn select_order_cv<S: Borrow<FeatureSequence> + Sync>(
    seqs: &[S],
    labels: &[usize],
    n_classes: usize,
    cfg: &CvConfig,
) -> Result<CvSelection> {
    if seqs.len() != labels.len() {
        return Err(Error::ShapeMismatch("one label per sequence is required".into()));
    }
    if cfg.folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    if cfg.k_range.is_empty() || cfg.m_range.is_empty() || cfg.k_range.iter().chain(&cfg.m_range).any(|&v| v == 0) {
        return Err(Error::Config("K and M ranges must be non-empty and positive".into()));
    }
    for c in 0..n_classes {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n < cfg.folds {
            return Err(Error::InsufficientData(format!(
                "class {c} has {n} training sequences, {}-fold cross-validation needs {}",
                cfg.folds, cfg.folds
            )));
        }
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {l} out of range")));
    }
    let fold_of = assign_folds(labels, n_classes, cfg.folds, cfg.em.seed);

    let mut grid: Vec<(usize, usize)> = Vec::new();
    for &k in &cfg.k_range {
        for &m in &cfg.m_range {
            grid.push((k, m));
        }
    }
    grid.sort_unstable();
    grid.dedup();

    let candidates: Vec<CvCandidate> = grid
        .par_iter()
        .map(|&(k, m)| {
            let mut correct = 0;
            let mut total = 0;
            for fold in 0..cfg.folds {
                match fold_accuracy(seqs, labels, n_classes, &fold_of, fold, (k, m), &cfg.em) {
                    Ok((c, t)) => {
                        correct += c;
                        total += t;
                    }
                    Err(_) => return CvCandidate { k, m, accuracy: None },
                }
            }
            CvCandidate {
                k,
                m,
                accuracy: Some(correct as f64 / total as f64),
            }
        })
        .collect();

    let mut best: Option<(usize, usize, f64)> = None;
    for c in &candidates {
        if let Some(a) = c.accuracy {
            if best.is_none_or(|(_, _, b)| a > b) {
                best = Some((c.k, c.m, a));
            }
        }
    }
    let (k, m, accuracy) =
        best.ok_or_else(|| Error::InsufficientData("no (K, M) candidate could be trained on every fold".into()))?;
    Ok(CvSelection {
        k,
        m,
        accuracy,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise_seqs(n: usize, seed: u64) -> Vec<FeatureSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| FeatureSequence::from_matrix(DMatrix::from_fn(20, 2, |_, _| rng.sample(StandardNormal))))
            .collect()
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_lowest(&[2.0, 2.0]), 0);
        assert_eq!(argmax_lowest(&[f64::NEG_INFINITY, -1.0]), 1);
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let f = assign_folds(&labels, 2, 3, 5);
        for c in 0..2 {
            let mut counts = [0; 3];
            for i in 0..20 {
                if labels[i] == c {
                    counts[f[i]] += 1;
                }
            }
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn single_candidate_is_returned() {
        let seqs = noise_seqs(6, 1);
        let labels = vec![0, 1, 0, 1, 0, 1];
        let cfg = CvConfig {
            k_range: vec![2],
            m_range: vec![1],
            ..CvConfig::default()
        };
        let sel = select_order_cv(&seqs, &labels, 2, &cfg).unwrap();
        assert_eq!((sel.k, sel.m), (2, 1));
    }

    #[test]
    fn identical_classes_tie_to_smallest_order() {
        // Every class sees the same sequences, so every candidate scores the
        // same accuracy and the tie-break decides.
        let base = noise_seqs(6, 2);
        let mut seqs = base.clone();
        seqs.extend(base);
        let labels: Vec<usize> = (0..12).map(|i| i / 6).collect();
        let cfg = CvConfig {
            em: EmConfig {
                max_iters: 10,
                ..EmConfig::default()
            },
            ..CvConfig::default()
        };
        let sel = select_order_cv(&seqs, &labels, 2, &cfg).unwrap();
        assert_eq!((sel.k, sel.m), (1, 1));
        assert_eq!(sel.candidates.len(), 9);
    }

    #[test]
    fn too_few_trials() {
        let seqs = noise_seqs(4, 3);
        let labels = vec![0, 0, 0, 1];
        assert!(matches!(
            select_order_cv(&seqs, &labels, 2, &CvConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn untrainable_candidates_are_skipped() {
        // 4 training sequences per fold of 5 steps support K·M ≤ 2 only.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs: Vec<FeatureSequence> = (0..12)
            .map(|i| {
                FeatureSequence::from_matrix(DMatrix::from_fn(5, 1, |_, _| {
                    (i % 2) as f64 * 4.0 + rng.sample::<f64, _>(StandardNormal)
                }))
            })
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let sel = select_order_cv(&seqs, &labels, 2, &CvConfig::default()).unwrap();
        assert!(sel.k * sel.m <= 2);
        assert!(sel.candidates.iter().any(|c| c.accuracy.is_none()));
        assert!(sel.accuracy > 0.9);
    }
}
