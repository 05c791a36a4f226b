//! Synthetic ground-truth generators.
//!
//! Trials are built from latent sources whose band amplitudes follow a
//! per-class Markov chain. Each band is a sum of sinusoids at random
//! in-band frequencies with random phases. Sources are mixed onto the signal
//! channels, white sensor noise is added, and reference (EOG-like) channels
//! leak into the signals through known propagation coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::hmm::HmmModel;
use crate::rng::rng_for;
use crate::trial_store::{ChannelRole, Dataset, Trial};

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Exact ancestral sample of a state path and observations (T × D).
pub fn sample_hmm_sequence<R: Rng + ?Sized>(
    model: &HmmModel,
    t_len: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, DMatrix<f64>)> {
    if t_len == 0 {
        return Err(Error::InvalidArgument("sequence length must be at least 1".into()));
    }
    let d = model.dim();
    let factors = model
        .emissions
        .iter()
        .map(|g| {
            g.covariances
                .iter()
                .map(|c| {
                    c.clone()
                        .cholesky()
                        .map(|ch| ch.l())
                        .ok_or_else(|| Error::Singular("emission covariance is not positive definite".into()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut path = Vec::with_capacity(t_len);
    let mut obs = DMatrix::zeros(t_len, d);
    let mut h = draw(&model.initial, rng);
    for t in 0..t_len {
        if t > 0 {
            let row: Vec<f64> = model.transitions.row(h).iter().copied().collect();
            h = draw(&row, rng);
        }
        path.push(h);
        let g = &model.emissions[h];
        let c = draw(&g.weights, rng);
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &g.means[c] + &factors[h][c] * z;
        for j in 0..d {
            obs[(t, j)] = x[j];
        }
    }
    Ok((path, obs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    /// `amplitudes[state][source][band]`, non-negative.
    pub amplitudes: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactSpec {
    /// Standard deviation of each reference process.
    pub amplitude: f64,
    /// AR(1) coefficient of each reference process.
    pub smoothness: f64,
    /// Propagation `B` (references × signals): `signal += Bᵀ · reference`.
    pub propagation: Vec<Vec<f64>>,
    /// Length of the per-session calibration recording; zero for none.
    pub calibration_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub sample_rate: f64,
    pub trial_seconds: f64,
    /// The latent state advances once per step.
    pub state_step_seconds: f64,
    /// `(low, high)` Hz of each synthesized band.
    pub bands: Vec<(f64, f64)>,
    pub tones_per_band: usize,
    /// Signal channels × sources; must have full column rank.
    pub mixing: Vec<Vec<f64>>,
    pub noise_sd: f64,
    pub classes: Vec<ClassSpec>,
    pub artifact: Option<ArtifactSpec>,
    pub subject: String,
    pub session: String,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn n_signal(&self) -> usize {
        self.mixing.len()
    }

    pub fn n_sources(&self) -> usize {
        self.mixing.first().map_or(0, Vec::len)
    }

    pub fn n_reference(&self) -> usize {
        self.artifact.as_ref().map_or(0, |a| a.propagation.len())
    }

    fn mixing_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_signal(), self.n_sources(), |i, j| self.mixing[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sample_rate > 0.0 && self.trial_seconds > 0.0 && self.state_step_seconds > 0.0) {
            return bad("sample_rate, trial_seconds and state_step_seconds must be positive".into());
        }
        let (n_sig, n_src, n_bands) = (self.n_signal(), self.n_sources(), self.bands.len());
        if n_sig == 0 || n_src == 0 || self.mixing.iter().any(|r| r.len() != n_src) {
            return bad("mixing must be a non-empty rectangular matrix".into());
        }
        let svd = self.mixing_matrix().svd(false, false);
        let smax = svd.singular_values.max();
        if n_src > n_sig || svd.singular_values.min() <= 1e-10 * smax {
            return bad("mixing matrix must have full column rank".into());
        }
        if self
            .bands
            .iter()
            .any(|&(lo, hi)| !(lo > 0.0 && lo <= hi && hi < self.sample_rate / 2.0))
        {
            return bad("bands must satisfy 0 < low <= high < Nyquist".into());
        }
        if self.tones_per_band == 0 {
            return bad("tones_per_band must be at least 1".into());
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        for (c, cls) in self.classes.iter().enumerate() {
            let k = cls.initial.len();
            let simplex = |v: &[f64]| v.iter().all(|p| *p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9;
            if k == 0 || !simplex(&cls.initial) {
                return bad(format!("class {c}: initial distribution is not a simplex"));
            }
            if cls.transitions.len() != k || cls.transitions.iter().any(|r| r.len() != k || !simplex(r)) {
                return bad(format!(
                    "class {c}: transitions must be a row-stochastic {k}x{k} matrix"
                ));
            }
            if cls.amplitudes.len() != k
                || cls
                    .amplitudes
                    .iter()
                    .any(|s| s.len() != n_src || s.iter().any(|b| b.len() != n_bands || b.iter().any(|a| !(*a >= 0.0))))
            {
                return bad(format!(
                    "class {c}: amplitudes must be non-negative with shape {k} x {n_src} x {n_bands}"
                ));
            }
        }
        if let Some(a) = &self.artifact {
            if a.propagation.is_empty() || a.propagation.iter().any(|r| r.len() != n_sig) {
                return bad(format!("artifact propagation must be references x {n_sig}"));
            }
            if !(a.amplitude >= 0.0) || !(a.smoothness.abs() < 1.0) || !(a.calibration_seconds >= 0.0) {
                return bad("artifact amplitude >= 0, |smoothness| < 1, calibration_seconds >= 0 required".into());
            }
        }
        Ok(())
    }

    pub fn trial_samples(&self) -> usize {
        (self.trial_seconds * self.sample_rate).round() as usize
    }

    fn step_samples(&self) -> usize {
        ((self.state_step_seconds * self.sample_rate).round() as usize).max(1)
    }

    pub fn channels(&self) -> Vec<ChannelRole> {
        let mut ch: Vec<ChannelRole> = (0..self.n_signal())
            .map(|i| ChannelRole::signal(format!("EEG{i}")))
            .collect();
        ch.extend((0..self.n_reference()).map(|i| ChannelRole::reference(format!("EOG{i}"))));
        ch
    }

    /// Strongly separable two-class default with three signal and three
    /// reference channels at 250 Hz. Class 0 desynchronizes the alpha
    /// rhythm of source 0 and class 1 that of source 2, each through a
    /// rest → active → rebound chain.
    pub fn two_class(seed: u64) -> Self {
        let chain = vec![vec![0.3, 0.7, 0.0], vec![0.0, 0.75, 0.25], vec![0.1, 0.0, 0.9]];
        let rest = vec![vec![3.0, 1.0], vec![2.0, 1.0], vec![3.0, 1.0]];
        let class = |src: usize| {
            let mut active = rest.clone();
            active[src] = vec![0.2, 0.4];
            let mut rebound = rest.clone();
            rebound[src] = vec![1.5, 3.0];
            ClassSpec {
                initial: vec![1.0, 0.0, 0.0],
                transitions: chain.clone(),
                amplitudes: vec![rest.clone(), active, rebound],
            }
        };
        Self {
            sample_rate: 250.0,
            trial_seconds: 4.0,
            state_step_seconds: 0.5,
            bands: vec![(8.0, 13.0), (18.0, 26.0)],
            tones_per_band: 4,
            mixing: vec![vec![1.0, 0.3, 0.1], vec![0.3, 1.0, 0.3], vec![0.1, 0.3, 1.0]],
            noise_sd: 0.5,
            classes: vec![class(0), class(2)],
            artifact: Some(ArtifactSpec {
                amplitude: 5.0,
                smoothness: 0.98,
                propagation: vec![vec![0.3, 0.1, 0.05], vec![0.05, 0.1, 0.3], vec![0.2, 0.2, 0.2]],
                calibration_seconds: 20.0,
            }),
            subject: "S01".into(),
            session: "T".into(),
            seed,
        }
    }
}

struct Sources {
    signal: DMatrix<f64>,
    reference: DMatrix<f64>,
}

impl SyntheticSpec {
    fn reference_processes<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let Some(a) = &self.artifact else {
            return DMatrix::zeros(0, n);
        };
        let nr = a.propagation.len();
        let innov = a.amplitude * (1.0 - a.smoothness * a.smoothness).sqrt();
        let mut out = DMatrix::zeros(nr, n);
        for r in 0..nr {
            let mut x = a.amplitude * rng.sample::<f64, _>(StandardNormal);
            for s in 0..n {
                x = a.smoothness * x + innov * rng.sample::<f64, _>(StandardNormal);
                out[(r, s)] = x;
            }
        }
        out
    }

    fn contaminate(&self, clean: DMatrix<f64>, reference: &DMatrix<f64>) -> DMatrix<f64> {
        let Some(a) = &self.artifact else { return clean };
        let b = DMatrix::from_fn(a.propagation.len(), self.n_signal(), |i, j| a.propagation[i][j]);
        let contaminated = clean + b.transpose() * reference;
        let mut full = DMatrix::zeros(self.n_signal() + reference.nrows(), reference.ncols());
        full.rows_mut(0, self.n_signal()).copy_from(&contaminated);
        full.rows_mut(self.n_signal(), reference.nrows()).copy_from(reference);
        full
    }

    fn synth_sources<R: Rng + ?Sized>(&self, class: &ClassSpec, path: &[usize], n: usize, rng: &mut R) -> Sources {
        let fs = self.sample_rate;
        let step = self.step_samples();
        let mut src = DMatrix::zeros(self.n_sources(), n);
        for s in 0..self.n_sources() {
            for (b, &(lo, hi)) in self.bands.iter().enumerate() {
                // each tone carries 1/tones of the band power
                let scale = (1.0 / self.tones_per_band as f64).sqrt();
                for _ in 0..self.tones_per_band {
                    let f = lo + (hi - lo) * rng.random::<f64>();
                    let phase = std::f64::consts::TAU * rng.random::<f64>();
                    for i in 0..n {
                        let a = class.amplitudes[path[(i / step).min(path.len() - 1)]][s][b];
                        if a != 0.0 {
                            src[(s, i)] += scale * a * (std::f64::consts::TAU * f * i as f64 / fs + phase).sin();
                        }
                    }
                }
            }
        }
        let mut signal = self.mixing_matrix() * src;
        if self.noise_sd > 0.0 {
            signal
                .iter_mut()
                .for_each(|v| *v += self.noise_sd * rng.sample::<f64, _>(StandardNormal));
        }
        let reference = self.reference_processes(n, rng);
        Sources { signal, reference }
    }

    fn state_path<R: Rng + ?Sized>(&self, class: &ClassSpec, n: usize, rng: &mut R) -> Vec<usize> {
        let len = n.div_ceil(self.step_samples()).max(1);
        let mut path = Vec::with_capacity(len);
        let mut h = draw(&class.initial, rng);
        for t in 0..len {
            if t > 0 {
                h = draw(&class.transitions[h], rng);
            }
            path.push(h);
        }
        path
    }
}

/// Labeled trials for every class plus one calibration recording, with the
/// latent state paths stored in the dataset's `extension`.
pub fn synth_trials(spec: &SyntheticSpec, n_per_class: usize) -> Result<Dataset> {
    spec.validate()?;
    let names = (0..spec.classes.len()).map(|c| format!("class{c}")).collect();
    let mut ds = Dataset::new(spec.channels(), names, spec.sample_rate);
    let n = spec.trial_samples();
    let mut paths = Vec::new();
    for i in 0..n_per_class {
        for (c, class) in spec.classes.iter().enumerate() {
            let mut rng = rng_for(spec.seed, &[c as u64, i as u64]);
            let path = spec.state_path(class, n, &mut rng);
            let src = spec.synth_sources(class, &path, n, &mut rng);
            ds.trials.push(Trial {
                data: spec.contaminate(src.signal, &src.reference),
                sample_rate: spec.sample_rate,
                label: Some(c),
                subject_id: spec.subject.clone(),
                session_id: spec.session.clone(),
                t0: (ds.trials.len() as f64) * (spec.trial_seconds + 2.0),
            });
            paths.push(path);
        }
    }
    if let Some(a) = &spec.artifact {
        let nc = (a.calibration_seconds * spec.sample_rate).round() as usize;
        if nc > 0 && n_per_class > 0 {
            let mut rng = rng_for(spec.seed, &[u64::MAX]);
            let mut clean = DMatrix::zeros(spec.n_signal(), nc);
            if spec.noise_sd > 0.0 {
                clean
                    .iter_mut()
                    .for_each(|v| *v = spec.noise_sd * rng.sample::<f64, _>(StandardNormal));
            }
            let reference = spec.reference_processes(nc, &mut rng);
            ds.calibration.push(Trial {
                data: spec.contaminate(clean, &reference),
                sample_rate: spec.sample_rate,
                label: None,
                subject_id: spec.subject.clone(),
                session_id: spec.session.clone(),
                t0: 0.0,
            });
        }
    }
    if n_per_class > 0 {
        ds.extension = Some(json!({
            "state_step_seconds": spec.state_step_seconds,
            "state_paths": paths,
        }));
    }
    Ok(ds)
}
