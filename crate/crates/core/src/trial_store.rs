//! Labeled trial datasets and their on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus one text-matrix file per
//! trial (row = channel). The manifest lists the channel roles, the class
//! names, every trial with its metadata, and the artifact-calibration
//! recordings. Relative file paths are resolved against the manifest's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_io::{self, TextMatrix};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoleKind {
    Signal,
    ReferenceArtifact,
}

impl RoleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RoleKind::Signal => "signal",
            RoleKind::ReferenceArtifact => "reference-artifact",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "signal" => Ok(RoleKind::Signal),
            "reference-artifact" => Ok(RoleKind::ReferenceArtifact),
            other => Err(Error::UnknownRole(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelRole {
    pub kind: RoleKind,
    pub name: String,
}

impl ChannelRole {
    pub fn signal(name: impl Into<String>) -> Self {
        Self {
            kind: RoleKind::Signal,
            name: name.into(),
        }
    }

    pub fn reference(name: impl Into<String>) -> Self {
        Self {
            kind: RoleKind::ReferenceArtifact,
            name: name.into(),
        }
    }
}

pub fn signal_indices(channels: &[ChannelRole]) -> Vec<usize> {
    indices_of(channels, RoleKind::Signal)
}

pub fn reference_indices(channels: &[ChannelRole]) -> Vec<usize> {
    indices_of(channels, RoleKind::ReferenceArtifact)
}

fn indices_of(channels: &[ChannelRole], kind: RoleKind) -> Vec<usize> {
    channels
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kind == kind)
        .map(|(i, _)| i)
        .collect()
}

/// One multichannel segment, `data` is channels × samples in microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub data: DMatrix<f64>,
    pub sample_rate: f64,
    pub label: Option<usize>,
    pub subject_id: String,
    pub session_id: String,
    /// Offset in seconds of sample 0 relative to cue onset.
    pub t0: f64,
}

impl Trial {
    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.row(c).iter().copied().collect()
    }

    /// Same trial with `data` replaced; metadata carried over.
    pub fn with_data(&self, data: DMatrix<f64>) -> Trial {
        Trial {
            data,
            sample_rate: self.sample_rate,
            label: self.label,
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            t0: self.t0,
        }
    }

    /// A view that hides the label, used wherever a prediction is made.
    pub fn unlabeled(&self) -> UnlabeledTrial<'_> {
        UnlabeledTrial { trial: self }
    }

    fn check_finite(&self, what: &str) -> Result<()> {
        for c in 0..self.data.nrows() {
            for s in 0..self.data.ncols() {
                if !self.data[(c, s)].is_finite() {
                    return Err(Error::NonFinite {
                        what: what.to_string(),
                        channel: c,
                        sample: s,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Read-only access to a trial without its label.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledTrial<'a> {
    trial: &'a Trial,
}

impl<'a> UnlabeledTrial<'a> {
    pub fn data(&self) -> &'a DMatrix<f64> {
        &self.trial.data
    }

    pub fn sample_rate(&self) -> f64 {
        self.trial.sample_rate
    }

    pub fn subject_id(&self) -> &'a str {
        &self.trial.subject_id
    }

    pub fn session_id(&self) -> &'a str {
        &self.trial.session_id
    }

    pub fn t0(&self) -> f64 {
        self.trial.t0
    }

    /// Owned copy with the label stripped.
    pub fn to_trial(&self) -> Trial {
        Trial {
            label: None,
            ..self.trial.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: Vec<ChannelRole>,
    pub class_names: Vec<String>,
    pub sample_rate: f64,
    pub trials: Vec<Trial>,
    /// Artifact-calibration recordings (labels are always `None`).
    pub calibration: Vec<Trial>,
    /// Free-form side-band data carried through the manifest unchanged.
    pub extension: Option<serde_json::Value>,
}

impl Dataset {
    pub fn new(channels: Vec<ChannelRole>, class_names: Vec<String>, sample_rate: f64) -> Self {
        Self {
            channels,
            class_names,
            sample_rate,
            trials: Vec::new(),
            calibration: Vec::new(),
            extension: None,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn signal_indices(&self) -> Vec<usize> {
        signal_indices(&self.channels)
    }

    pub fn reference_indices(&self) -> Vec<usize> {
        reference_indices(&self.channels)
    }

    /// Trials of class `c`, in dataset order.
    pub fn class_trials(&self, c: usize) -> Vec<&Trial> {
        self.trials.iter().filter(|t| t.label == Some(c)).collect()
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.trials {
            if !out.contains(&t.subject_id) {
                out.push(t.subject_id.clone());
            }
        }
        out
    }

    /// Every label must be present; evaluation needs ground truth.
    pub fn require_labels(&self) -> Result<()> {
        match self.trials.iter().position(|t| t.label.is_none()) {
            Some(i) => Err(Error::Unlabeled(i)),
            None => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.signal_indices().is_empty() {
            return Err(Error::ShapeMismatch("dataset needs at least one signal channel".into()));
        }
        for (i, a) in self.channels.iter().enumerate() {
            if self.channels[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::ShapeMismatch(format!("duplicate channel name `{}`", a.name)));
            }
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::ShapeMismatch(format!(
                "sample rate must be positive, got {}",
                self.sample_rate
            )));
        }
        let n_ch = self.channels.len();
        let n_cls = self.class_names.len();
        let groups = [("trial", &self.trials), ("calibration", &self.calibration)];
        for (what, list) in groups {
            for (i, t) in list.iter().enumerate() {
                let tag = format!("{what} {i}");
                if t.n_channels() != n_ch {
                    return Err(Error::ShapeMismatch(format!(
                        "{tag} has {} channels, manifest declares {n_ch}",
                        t.n_channels()
                    )));
                }
                if t.sample_rate != self.sample_rate {
                    return Err(Error::ShapeMismatch(format!(
                        "{tag} sampled at {} Hz, dataset at {} Hz",
                        t.sample_rate, self.sample_rate
                    )));
                }
                if let Some(l) = t.label {
                    if l >= n_cls {
                        return Err(Error::ShapeMismatch(format!(
                            "{tag} has label {l}, only {n_cls} classes declared"
                        )));
                    }
                }
                if !t.t0.is_finite() {
                    return Err(Error::ShapeMismatch(format!("{tag} has non-finite t0")));
                }
                t.check_finite(&tag)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestChannel {
    name: String,
    role: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTrial {
    file: PathBuf,
    label: Option<usize>,
    subject: String,
    session: String,
    t0: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestCalibration {
    file: PathBuf,
    subject: String,
    session: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    sample_rate: f64,
    channels: Vec<ManifestChannel>,
    class_names: Vec<String>,
    trials: Vec<ManifestTrial>,
    #[serde(default)]
    calibration: Vec<ManifestCalibration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extension: Option<serde_json::Value>,
}

fn load_payload(base: &Path, file: &Path) -> Result<TextMatrix> {
    let path = base.join(file);
    if !path.is_file() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "trial file not found"),
        ));
    }
    matrix_io::load_matrix(&path)
}

/// Loads and validates a dataset. `path` may be the manifest file itself or
/// the directory that contains `manifest.json`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        msg: e.to_string(),
    })?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();

    let channels = manifest
        .channels
        .iter()
        .map(|c| {
            Ok(ChannelRole {
                kind: RoleKind::parse(&c.role)?,
                name: c.name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ds = Dataset::new(channels, manifest.class_names, manifest.sample_rate);
    ds.extension = manifest.extension;

    for t in &manifest.trials {
        let m = load_payload(&base, &t.file)?;
        ds.trials.push(Trial {
            data: m.data,
            sample_rate: m.rate,
            label: t.label,
            subject_id: t.subject.clone(),
            session_id: t.session.clone(),
            t0: t.t0,
        });
    }
    for c in &manifest.calibration {
        let m = load_payload(&base, &c.file)?;
        ds.calibration.push(Trial {
            data: m.data,
            sample_rate: m.rate,
            label: None,
            subject_id: c.subject.clone(),
            session_id: c.session.clone(),
            t0: 0.0,
        });
    }
    ds.validate()?;
    Ok(ds)
}

/// Writes `dataset` under `dir` and returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let trial_dir = dir.join("trials");
    fs::create_dir_all(&trial_dir).map_err(|e| Error::io(&trial_dir, e))?;

    let mut trials = Vec::with_capacity(dataset.trials.len());
    for (i, t) in dataset.trials.iter().enumerate() {
        let rel = PathBuf::from("trials").join(format!("trial_{i:05}.txt"));
        matrix_io::save_matrix(&dir.join(&rel), &TextMatrix::new(t.data.clone(), t.sample_rate))?;
        trials.push(ManifestTrial {
            file: rel,
            label: t.label,
            subject: t.subject_id.clone(),
            session: t.session_id.clone(),
            t0: t.t0,
        });
    }

    let mut calibration = Vec::with_capacity(dataset.calibration.len());
    if !dataset.calibration.is_empty() {
        let cal_dir = dir.join("calibration");
        fs::create_dir_all(&cal_dir).map_err(|e| Error::io(&cal_dir, e))?;
    }
    for (i, t) in dataset.calibration.iter().enumerate() {
        let rel = PathBuf::from("calibration").join(format!("calibration_{i:05}.txt"));
        matrix_io::save_matrix(&dir.join(&rel), &TextMatrix::new(t.data.clone(), t.sample_rate))?;
        calibration.push(ManifestCalibration {
            file: rel,
            subject: t.subject_id.clone(),
            session: t.session_id.clone(),
        });
    }

    let manifest = Manifest {
        sample_rate: dataset.sample_rate,
        channels: dataset
            .channels
            .iter()
            .map(|c| ManifestChannel {
                name: c.name.clone(),
                role: c.kind.as_str().to_string(),
            })
            .collect(),
        class_names: dataset.class_names.clone(),
        trials,
        calibration,
        extension: dataset.extension.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
