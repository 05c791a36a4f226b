//! Directory layout of a saved [`ClassifierBundle`]:
//!
//! ```text
//! bundle.json        method, classes, channel layout, pipeline config
//! preprocess.txt     regression weights and CSP filter (matrix bundle)
//! class{c}.txt       HMM of class c (HMM methods)
//! class{c}/          posterior directory of class c (HDP-HMM)
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ClassModel, ClassifierBundle, Method, PipelineConfig, Preprocessor};
use crate::error::{Error, Result};
use crate::hdphmm::HdpHmmPosterior;
use crate::hmm::HmmModel;
use crate::matrix_io::MatrixBundle;
use crate::preprocess::{CspFilter, RegressionCoefficients};
use crate::trial_store::{ChannelRole, RoleKind};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelDoc {
    name: String,
    role: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleDoc {
    method: Method,
    class_names: Vec<String>,
    channels: Vec<ChannelDoc>,
    sample_rate: f64,
    order: Option<(usize, usize)>,
    config: PipelineConfig,
}

impl ClassifierBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.check()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pre = &self.preprocessor;
        let doc = BundleDoc {
            method: self.method,
            class_names: self.class_names.clone(),
            channels: pre
                .channels
                .iter()
                .map(|c| ChannelDoc {
                    name: c.name.clone(),
                    role: c.kind.as_str().to_string(),
                })
                .collect(),
            sample_rate: pre.sample_rate,
            order: self.order,
            config: self.config.clone(),
        };
        let path = dir.join("bundle.json");
        let text = serde_json::to_string_pretty(&doc).expect("bundle document serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

        let mut b = MatrixBundle::new();
        if let Some(r) = &pre.regression {
            b.push("regression", r.weights.clone());
        }
        b.push("csp.weights", pre.csp.weights.clone());
        b.push_row("csp.eigenvalues", &pre.csp.eigenvalues);
        b.save(&dir.join("preprocess.txt"))?;

        for (c, m) in self.models.iter().enumerate() {
            match m {
                ClassModel::Hmm(h) => h.save(&dir.join(format!("class{c}.txt")))?,
                ClassModel::Hdp(p) => p.save(&dir.join(format!("class{c}")))?,
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bundle.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: BundleDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        doc.config.validate(doc.sample_rate)?;
        let channels = doc
            .channels
            .iter()
            .map(|c| {
                Ok(ChannelRole {
                    kind: RoleKind::parse(&c.role)?,
                    name: c.name.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let b = MatrixBundle::load(&dir.join("preprocess.txt"))?;
        let regression = match b.get("regression") {
            Ok(w) => Some(RegressionCoefficients { weights: w.clone() }),
            Err(_) => None,
        };
        let weights: DMatrix<f64> = b.get("csp.weights")?.clone();
        let eigenvalues = b.row("csp.eigenvalues")?;
        if eigenvalues.len() != weights.ncols() {
            return Err(Error::ShapeMismatch(
                "CSP eigenvalue count differs from the filter count".into(),
            ));
        }
        let preprocessor = Preprocessor {
            channels,
            sample_rate: doc.sample_rate,
            regression,
            band_low_hz: doc.config.band_low_hz,
            band_high_hz: doc.config.band_high_hz,
            filter_order: doc.config.filter_order,
            csp: CspFilter { weights, eigenvalues },
            features: doc.config.features.clone(),
        };

        let models = (0..doc.class_names.len())
            .map(|c| match doc.method {
                Method::HdpHmm => HdpHmmPosterior::load(&dir.join(format!("class{c}"))).map(ClassModel::Hdp),
                _ => HmmModel::load(&dir.join(format!("class{c}.txt"))).map(ClassModel::Hmm),
            })
            .collect::<Result<Vec<_>>>()?;
        let bundle = Self {
            method: doc.method,
            config: doc.config,
            class_names: doc.class_names,
            preprocessor,
            models,
            order: doc.order,
        };
        bundle.check()?;
        Ok(bundle)
    }
}
