//! One generative model per class, scored by maximum likelihood.
//!
//! Training runs the full chain: artifact regression, band-pass, CSP fit on
//! the training classes, band-power features and a per-class model fit. The
//! preprocessing artifacts are frozen inside the bundle and replayed on test
//! trials, which are only ever seen through [`UnlabeledTrial`].

mod eval;
mod io;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdphmm::{self, CompiledPosterior, HdpHmmConfig, HdpHmmPosterior};
use crate::hmm::{em_fit, select_order_cv, CompiledHmm, CvConfig, EmConfig, HmmModel, HMM_FP_ORDER};
use crate::preprocess::{
    apply_bandpass, apply_csp, fit_artifact_regression_pooled, fit_csp, remove_artifacts, signal_only, BandpassFilter,
    CspFilter, RegressionCoefficients,
};
use crate::rng::derive_seed;
use crate::spectral::{extract_features, FeatureConfig, FeatureSequence};
use crate::trial_store::{reference_indices, signal_indices, ChannelRole, Dataset, Trial, UnlabeledTrial};

pub use eval::{
    accuracy, confusion_matrix, evaluate, kappa, run_experiment, score_predictions, CellResult, Evaluation,
    ExperimentReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "HMM-FP")]
    HmmFp,
    #[serde(rename = "HMM-CV")]
    HmmCv,
    #[serde(rename = "HDP-HMM")]
    HdpHmm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::HmmFp, Method::HmmCv, Method::HdpHmm];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::HmmFp => "HMM-FP",
            Method::HmmCv => "HMM-CV",
            Method::HdpHmm => "HDP-HMM",
        }
    }

    /// Stable code mixed into per-method seeds.
    fn code(self) -> u64 {
        match self {
            Method::HmmFp => 1,
            Method::HmmCv => 2,
            Method::HdpHmm => 3,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Case-insensitive; the dash is optional.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "hmmfp" => Ok(Method::HmmFp),
            "hmmcv" => Ok(Method::HmmCv),
            "hdphmm" => Ok(Method::HdpHmm),
            _ => Err(Error::Config(format!(
                "unknown method `{s}`; expected HMM-FP, HMM-CV or HDP-HMM"
            ))),
        }
    }
}

/// Every tunable of the training pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    /// Butterworth prototype order; the band-pass has twice this.
    pub filter_order: usize,
    /// CSP filters kept; 0 skips CSP and passes the signal channels through.
    pub csp_components: usize,
    pub features: FeatureConfig,
    pub fp_states: usize,
    pub fp_mixtures: usize,
    pub cv_folds: usize,
    pub cv_states: Vec<usize>,
    pub cv_mixtures: Vec<usize>,
    pub em: EmConfig,
    pub hdp: HdpHmmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let cv = CvConfig::default();
        Self {
            band_low_hz: 8.0,
            band_high_hz: 35.0,
            filter_order: 4,
            csp_components: 2,
            features: FeatureConfig::default(),
            fp_states: HMM_FP_ORDER.0,
            fp_mixtures: HMM_FP_ORDER.1,
            cv_folds: cv.folds,
            cv_states: cv.k_range,
            cv_mixtures: cv.m_range,
            em: EmConfig::default(),
            hdp: HdpHmmConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.band_low_hz > 0.0 && self.band_low_hz < self.band_high_hz && self.band_high_hz < sample_rate / 2.0) {
            return bad(format!(
                "band-pass {}..{} Hz is not inside (0, {}) Hz",
                self.band_low_hz,
                self.band_high_hz,
                sample_rate / 2.0
            ));
        }
        if self.filter_order == 0 {
            return bad("filter_order must be at least 1".into());
        }
        if self.fp_states == 0 || self.fp_mixtures == 0 {
            return bad("fp_states and fp_mixtures must be at least 1".into());
        }
        if self.cv_folds < 2 {
            return bad("cv_folds must be at least 2".into());
        }
        if self.cv_states.is_empty()
            || self.cv_mixtures.is_empty()
            || self.cv_states.contains(&0)
            || self.cv_mixtures.contains(&0)
        {
            return bad("cv_states and cv_mixtures must be non-empty lists of positive integers".into());
        }
        if !(self.em.tol >= 0.0) || self.em.max_iters == 0 {
            return bad("em needs tol >= 0 and max_iters >= 1".into());
        }
        self.features.validate(sample_rate)?;
        self.hdp.validate()
    }

    fn cv_config(&self, seed: u64) -> CvConfig {
        CvConfig {
            folds: self.cv_folds,
            k_range: self.cv_states.clone(),
            m_range: self.cv_mixtures.clone(),
            em: EmConfig {
                seed,
                ..self.em.clone()
            },
        }
    }
}

/// Frozen preprocessing chain, fit on training data only.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub channels: Vec<ChannelRole>,
    pub sample_rate: f64,
    /// Absent when the layout has no reference channels.
    pub regression: Option<RegressionCoefficients>,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub filter_order: usize,
    pub csp: CspFilter,
    pub features: FeatureConfig,
}

impl Preprocessor {
    /// Fits regression (on the calibration recordings, or on the training
    /// trials when there are none) and CSP on `train`.
    pub fn fit(train: &Dataset, config: &PipelineConfig) -> Result<Self> {
        Ok(Self::fit_cleaned(train, config)?.0)
    }

    /// Like [`fit`](Self::fit), also returning the cleaned, band-passed
    /// training trials in dataset order.
    fn fit_cleaned(train: &Dataset, config: &PipelineConfig) -> Result<(Self, Vec<Trial>)> {
        train.validate()?;
        train.require_labels()?;
        config.validate(train.sample_rate)?;
        let regression = if reference_indices(&train.channels).is_empty() {
            None
        } else {
            let segments: Vec<&Trial> = if train.calibration.is_empty() {
                train.trials.iter().collect()
            } else {
                train.calibration.iter().collect()
            };
            Some(fit_artifact_regression_pooled(&segments, &train.channels)?)
        };
        let n_signal = signal_indices(&train.channels).len();
        let mut pre = Self {
            channels: train.channels.clone(),
            sample_rate: train.sample_rate,
            regression,
            band_low_hz: config.band_low_hz,
            band_high_hz: config.band_high_hz,
            filter_order: config.filter_order,
            csp: CspFilter::identity(n_signal),
            features: config.features.clone(),
        };
        let filter = pre.filter()?;
        let cleaned: Vec<Trial> = train
            .trials
            .par_iter()
            .map(|t| pre.clean_with(t, &filter))
            .collect::<Result<_>>()?;
        if config.csp_components > 0 {
            if train.n_classes() != 2 {
                return Err(Error::Config(format!(
                    "CSP needs exactly two classes, dataset has {}; set csp_components = 0",
                    train.n_classes()
                )));
            }
            let by_class = |c: usize| -> Vec<&Trial> {
                cleaned
                    .iter()
                    .zip(&train.trials)
                    .filter(|(_, t)| t.label == Some(c))
                    .map(|(x, _)| x)
                    .collect()
            };
            pre.csp = fit_csp(&by_class(0), &by_class(1), config.csp_components)?;
        }
        Ok((pre, cleaned))
    }

    pub fn filter(&self) -> Result<BandpassFilter> {
        BandpassFilter::butterworth(self.filter_order, self.band_low_hz, self.band_high_hz, self.sample_rate)
    }

    /// Feature dimension: CSP components × bands.
    pub fn feature_dim(&self) -> usize {
        self.csp.n_components() * self.features.bands.len()
    }

    fn check_trial(&self, trial: &Trial) -> Result<()> {
        if trial.n_channels() != self.channels.len() {
            return Err(Error::ShapeMismatch(format!(
                "trial has {} channels, the fitted layout has {}",
                trial.n_channels(),
                self.channels.len()
            )));
        }
        if (trial.sample_rate - self.sample_rate).abs() > 1e-9 * self.sample_rate {
            return Err(Error::ShapeMismatch(format!(
                "trial sampled at {} Hz, the pipeline was fit at {} Hz",
                trial.sample_rate, self.sample_rate
            )));
        }
        Ok(())
    }

    fn clean_with(&self, trial: &Trial, filter: &BandpassFilter) -> Result<Trial> {
        self.check_trial(trial)?;
        let signal = match &self.regression {
            Some(r) => remove_artifacts(trial, &self.channels, r)?,
            None => signal_only(trial, &self.channels)?,
        };
        apply_bandpass(&signal, filter)
    }

    fn features_of_cleaned(&self, cleaned: &Trial) -> Result<FeatureSequence> {
        extract_features(&apply_csp(cleaned, &self.csp)?, &self.features)
    }

    /// Regression, band-pass, CSP and band-power features of one trial.
    pub fn transform(&self, trial: UnlabeledTrial<'_>) -> Result<FeatureSequence> {
        let filter = self.filter()?;
        self.features_of_cleaned(&self.clean_with(&trial.to_trial(), &filter)?)
    }

    pub fn transform_all(&self, trials: &[UnlabeledTrial<'_>]) -> Result<Vec<FeatureSequence>> {
        let filter = self.filter()?;
        trials
            .par_iter()
            .map(|t| self.features_of_cleaned(&self.clean_with(&t.to_trial(), &filter)?))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassModel {
    Hmm(HmmModel),
    Hdp(HdpHmmPosterior),
}

impl ClassModel {
    pub fn dim(&self) -> Option<usize> {
        match self {
            ClassModel::Hmm(m) => Some(m.dim()),
            ClassModel::Hdp(p) => p.samples.first().map(|s| s.dim()),
        }
    }

    fn compile(&self) -> Result<CompiledModel> {
        Ok(match self {
            ClassModel::Hmm(m) => CompiledModel::Hmm(m.compile()?),
            ClassModel::Hdp(p) => CompiledModel::Hdp(p.compile()?),
        })
    }
}

enum CompiledModel {
    Hmm(CompiledHmm),
    Hdp(CompiledPosterior),
}

impl CompiledModel {
    fn score(&self, f: &FeatureSequence) -> Result<f64> {
        match self {
            CompiledModel::Hmm(m) => m.log_likelihood(&f.features),
            CompiledModel::Hdp(p) => p.log_likelihood(&f.features),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBundle {
    pub method: Method,
    pub config: PipelineConfig,
    pub class_names: Vec<String>,
    pub preprocessor: Preprocessor,
    /// One model per class id.
    pub models: Vec<ClassModel>,
    /// (states, mixtures) of the HMM methods.
    pub order: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    /// Log-likelihood under each class model.
    pub scores: Vec<f64>,
}

impl ClassifierBundle {
    pub fn n_classes(&self) -> usize {
        self.models.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.models.len() < 2 || self.models.len() != self.class_names.len() {
            return Err(Error::ShapeMismatch(format!(
                "bundle has {} models for {} classes; at least two are required",
                self.models.len(),
                self.class_names.len()
            )));
        }
        let d = self.preprocessor.feature_dim();
        for (c, m) in self.models.iter().enumerate() {
            if m.dim() != Some(d) {
                return Err(Error::ShapeMismatch(format!(
                    "model for class {c} has dimension {:?}, features have {d}",
                    m.dim()
                )));
            }
        }
        Ok(())
    }

    /// Classifies a batch, compiling the class models once.
    pub fn classify_all(&self, trials: &[UnlabeledTrial<'_>]) -> Result<Vec<Prediction>> {
        let compiled: Vec<CompiledModel> = self.models.iter().map(ClassModel::compile).collect::<Result<_>>()?;
        let feats = self.preprocessor.transform_all(trials)?;
        feats.par_iter().map(|f| predict(&compiled, f)).collect()
    }
}

fn predict(models: &[CompiledModel], f: &FeatureSequence) -> Result<Prediction> {
    let scores: Vec<f64> = models.iter().map(|m| m.score(f)).collect::<Result<_>>()?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("class log-likelihood is NaN".into()));
    }
    let mut label = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[label] {
            label = c;
        }
    }
    Ok(Prediction { label, scores })
}

/// Scores `trial` under every class model; ties go to the lowest class id.
pub fn classify(bundle: &ClassifierBundle, trial: UnlabeledTrial<'_>) -> Result<Prediction> {
    let compiled: Vec<CompiledModel> = bundle.models.iter().map(ClassModel::compile).collect::<Result<_>>()?;
    predict(&compiled, &bundle.preprocessor.transform(trial)?)
}

pub fn train_bundle(train: &Dataset, method: Method, config: &PipelineConfig, seed: u64) -> Result<ClassifierBundle> {
    let n_classes = train.n_classes();
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least two classes, got {n_classes}"
        )));
    }
    let (pre, cleaned) = Preprocessor::fit_cleaned(train, config)?;
    let feats: Vec<FeatureSequence> = cleaned
        .par_iter()
        .map(|t| pre.features_of_cleaned(t))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = train.trials.iter().map(|t| t.label.expect("labels checked")).collect();
    let per_class: Vec<Vec<&FeatureSequence>> = (0..n_classes)
        .map(|c| {
            feats
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(f, _)| f)
                .collect()
        })
        .collect();
    if let Some(c) = per_class.iter().position(Vec::is_empty) {
        return Err(Error::InsufficientData(format!("class {c} has no training trials")));
    }
    let seed = derive_seed(seed, &[method.code()]);
    let fit_hmms = |k: usize, m: usize| -> Result<Vec<ClassModel>> {
        per_class
            .par_iter()
            .enumerate()
            .map(|(c, seqs)| {
                let em = EmConfig {
                    seed: derive_seed(seed, &[c as u64]),
                    ..config.em.clone()
                };
                Ok(ClassModel::Hmm(em_fit(seqs, k, m, &em)?.model))
            })
            .collect()
    };
    let (models, order) = match method {
        Method::HmmFp => (
            fit_hmms(config.fp_states, config.fp_mixtures)?,
            Some((config.fp_states, config.fp_mixtures)),
        ),
        Method::HmmCv => {
            let cv = config.cv_config(derive_seed(seed, &[0xC5]));
            let sel = select_order_cv(&feats, &labels, n_classes, &cv)?;
            (fit_hmms(sel.k, sel.m)?, Some((sel.k, sel.m)))
        }
        Method::HdpHmm => {
            // One emission prior for every class, so the class models differ
            // only through the data.
            let prior = match &config.hdp.niw {
                Some(p) => p.clone(),
                None => hdphmm::pooled_prior(&feats)?,
            };
            let models = per_class
                .par_iter()
                .enumerate()
                .map(|(c, seqs)| {
                    let cfg = HdpHmmConfig {
                        seed: derive_seed(seed, &[c as u64]),
                        niw: Some(prior.clone()),
                        ..config.hdp.clone()
                    };
                    Ok(ClassModel::Hdp(hdphmm::fit(seqs, &cfg)?))
                })
                .collect::<Result<Vec<_>>>()?;
            (models, None)
        }
    };
    let bundle = ClassifierBundle {
        method,
        config: config.clone(),
        class_names: train.class_names.clone(),
        preprocessor: pre,
        models,
        order,
    };
    bundle.check()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests;
