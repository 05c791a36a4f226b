//! Cohen's kappa and the subject × method comparison.

use rayon::prelude::*;
use serde::Serialize;

use super::{train_bundle, ClassifierBundle, Method, PipelineConfig, Prediction};
use crate::error::{Error, ErrorKind, Result};
use crate::rng::derive_seed;
use crate::trial_store::{Dataset, UnlabeledTrial};

/// Counts with true class in rows and predicted class in columns.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels against {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class id out of range for {n_classes} classes"
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn trace_total(confusion: &[Vec<usize>]) -> Result<(u128, u128)> {
    let c = confusion.len();
    if c < 2 || confusion.iter().any(|r| r.len() != c) {
        return Err(Error::InvalidArgument(
            "confusion matrix must be square with at least two classes".into(),
        ));
    }
    let total: u128 = confusion.iter().flatten().map(|&v| v as u128).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let trace = (0..c).map(|i| confusion[i][i] as u128).sum();
    Ok((trace, total))
}

/// `κ = (C·P_cc − 1)/(C − 1)` with `P_cc = trace/total`. The ratio
/// `(C·trace − total) / ((C − 1)·total)` is formed in integers and rounded once.
pub fn kappa(confusion: &[Vec<usize>]) -> Result<f64> {
    let (trace, total) = trace_total(confusion)?;
    let c = confusion.len() as i128;
    let num = c * trace as i128 - total as i128;
    let den = (c - 1) * total as i128;
    Ok(num as f64 / den as f64)
}

pub fn accuracy(confusion: &[Vec<usize>]) -> Result<f64> {
    let (trace, total) = trace_total(confusion)?;
    Ok(trace as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub confusion: Vec<Vec<usize>>,
    pub kappa: f64,
    pub accuracy: f64,
    pub n_test: usize,
    pub predictions: Vec<Prediction>,
}

/// Classifies every trial of `test` and only then compares with its labels.
pub fn evaluate(bundle: &ClassifierBundle, test: &Dataset) -> Result<Evaluation> {
    test.validate()?;
    let views: Vec<UnlabeledTrial<'_>> = test.trials.iter().map(|t| t.unlabeled()).collect();
    let predictions = bundle.classify_all(&views)?;
    score_predictions(&predictions, test, bundle.n_classes())
}

/// Compares predictions against the labels of `test`, in trial order.
pub fn score_predictions(predictions: &[Prediction], test: &Dataset, n_classes: usize) -> Result<Evaluation> {
    test.require_labels()?;
    let truth: Vec<usize> = test.trials.iter().map(|t| t.label.expect("labels checked")).collect();
    let predicted: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let confusion = confusion_matrix(&truth, &predicted, n_classes)?;
    Ok(Evaluation {
        kappa: kappa(&confusion)?,
        accuracy: accuracy(&confusion)?,
        n_test: truth.len(),
        confusion,
        predictions: predictions.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub subject: String,
    pub method: Method,
    pub kappa: Option<f64>,
    pub accuracy: Option<f64>,
    pub n_test: usize,
    pub confusion: Option<Vec<Vec<usize>>>,
    /// (states, mixtures) for the HMM methods.
    pub order: Option<(usize, usize)>,
    /// Occupied-state mode of each class posterior for HDP-HMM.
    pub occupied_states: Option<Vec<usize>>,
    pub error: Option<String>,
    pub error_kind: Option<ErrorKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub methods: Vec<Method>,
    pub subjects: Vec<String>,
    /// How test sessions of a subject are combined before scoring.
    pub test_sessions: String,
    /// Subject-major, methods in request order.
    pub cells: Vec<CellResult>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl ExperimentReport {
    pub fn cell(&self, subject: &str, method: Method) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.subject == subject && c.method == method)
    }

    pub fn any_failed(&self) -> bool {
        self.first_failure().is_some()
    }

    pub fn first_failure(&self) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.error.is_some())
    }

    /// Mean kappa over the subjects whose cell succeeded.
    pub fn average_kappa(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method)
            .filter_map(|c| c.kappa)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Tab-separated `subject method kappa accuracy n_test`, one row per cell.
    pub fn results_tsv(&self) -> String {
        let mut out = String::from("subject\tmethod\tkappa\taccuracy\tn_test\n");
        for c in &self.cells {
            out += &format!(
                "{}\t{}\t{}\t{}\t{}\n",
                c.subject,
                c.method,
                fmt_opt(c.kappa),
                fmt_opt(c.accuracy),
                c.n_test
            );
        }
        out
    }

    /// Subjects as rows, methods as columns, then an average row.
    pub fn table(&self) -> String {
        let mut out = String::from("subject");
        for m in &self.methods {
            out += &format!("\t{m}");
        }
        out.push('\n');
        for s in &self.subjects {
            out += s;
            for &m in &self.methods {
                out += &format!("\t{}", fmt_opt(self.cell(s, m).and_then(|c| c.kappa)));
            }
            out.push('\n');
        }
        out += "Average";
        for &m in &self.methods {
            out += &format!("\t{}", fmt_opt(self.average_kappa(m)));
        }
        out.push('\n');
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            report: &'a ExperimentReport,
            averages: Vec<(Method, Option<f64>)>,
        }
        let doc = Doc {
            report: self,
            averages: self.methods.iter().map(|&m| (m, self.average_kappa(m))).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }
}

/// Trials and calibration recordings of one subject.
fn subject_subset(ds: &Dataset, subject: &str) -> Dataset {
    Dataset {
        trials: ds.trials.iter().filter(|t| t.subject_id == subject).cloned().collect(),
        calibration: ds
            .calibration
            .iter()
            .filter(|t| t.subject_id == subject)
            .cloned()
            .collect(),
        extension: None,
        ..Dataset::new(ds.channels.clone(), ds.class_names.clone(), ds.sample_rate)
    }
}

fn subject_seed(seed: u64, subject: &str, method: Method) -> u64 {
    let mut parts: Vec<u64> = subject.bytes().map(u64::from).collect();
    parts.push(method.code());
    derive_seed(seed, &parts)
}

fn run_cell(
    train: &Dataset,
    test: &Dataset,
    method: Method,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(ClassifierBundle, Evaluation)> {
    let bundle = train_bundle(train, method, config, seed)?;
    let eval = evaluate(&bundle, test)?;
    Ok((bundle, eval))
}

/// Trains and tests every method on every subject. All test sessions of a
/// subject are pooled into one confusion matrix. A failing cell is recorded
/// in the report and the other cells still run. `jobs` bounds the number of
/// worker threads.
pub fn run_experiment(
    train: &Dataset,
    test: &Dataset,
    methods: &[Method],
    config: &PipelineConfig,
    seed: u64,
    jobs: usize,
) -> Result<ExperimentReport> {
    if train.channels != test.channels || train.class_names != test.class_names {
        return Err(Error::ShapeMismatch(
            "train and test datasets differ in channel layout or classes".into(),
        ));
    }
    let mut subjects = train.subjects();
    subjects.sort();
    let mut test_subjects = test.subjects();
    test_subjects.sort();
    if subjects != test_subjects {
        return Err(Error::InvalidArgument(format!(
            "train subjects {subjects:?} do not match test subjects {test_subjects:?}"
        )));
    }
    let splits: Vec<(Dataset, Dataset)> = subjects
        .iter()
        .map(|s| (subject_subset(train, s), subject_subset(test, s)))
        .collect();
    let tasks: Vec<(usize, Method)> = (0..subjects.len())
        .flat_map(|i| methods.iter().map(move |&m| (i, m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let cells = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, method)| {
                let subject = &subjects[i];
                let (tr, te) = &splits[i];
                let base = CellResult {
                    subject: subject.clone(),
                    method,
                    kappa: None,
                    accuracy: None,
                    n_test: te.trials.len(),
                    confusion: None,
                    order: None,
                    occupied_states: None,
                    error: None,
                    error_kind: None,
                };
                match run_cell(tr, te, method, config, subject_seed(seed, subject, method)) {
                    Ok((bundle, eval)) => CellResult {
                        kappa: Some(eval.kappa),
                        accuracy: Some(eval.accuracy),
                        confusion: Some(eval.confusion),
                        order: bundle.order,
                        occupied_states: (method == Method::HdpHmm).then(|| {
                            bundle
                                .models
                                .iter()
                                .filter_map(|m| match m {
                                    super::ClassModel::Hdp(p) => Some(p.occupied_mode()),
                                    super::ClassModel::Hmm(_) => None,
                                })
                                .collect()
                        }),
                        ..base
                    },
                    Err(e) => CellResult {
                        error: Some(e.to_string()),
                        error_kind: Some(e.kind()),
                        ..base
                    },
                }
            })
            .collect()
    });
    Ok(ExperimentReport {
        seed,
        methods: methods.to_vec(),
        subjects,
        test_sessions: "pooled".into(),
        cells,
    })
}
