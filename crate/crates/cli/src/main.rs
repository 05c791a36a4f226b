//! Batch front end: simulate, validate, fit and score band-power sequence
//! classifiers. Exit status 0 on success, 2 for configuration errors, 3 for
//! data errors and 4 for numerical failures.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdpbci::classify::{
    run_experiment, score_predictions, train_bundle, CellResult, ClassifierBundle, ExperimentReport, Method,
    Prediction, Preprocessor,
};
use hdpbci::matrix_io::save_matrix;
use hdpbci::simulate::{synth_trials, SyntheticSpec};
use hdpbci::trial_store::{load_dataset, save_dataset, Dataset};
use hdpbci::{Error, ErrorKind};

use config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }

    fn data(msg: impl Into<String>) -> Self {
        Self {
            code: 3,
            msg: msg.into(),
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(e.kind()),
            msg: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "hdpbci",
    version,
    about = "Band-power HMM and sticky HDP-HMM classifiers for motor-imagery trials"
)]
struct Cli {
    /// Worker threads. For `experiment` this bounds the subject × method
    /// cells run at once.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `pipeline.hdp.kappa=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset manifest and every file it references.
    Validate { manifest: PathBuf },
    /// Write a synthetic two-class dataset.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// JSON generator spec; the built-in two-class preset when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 80)]
        n_per_class: usize,
        /// Session id written into every trial.
        #[arg(long)]
        session: Option<String>,
        #[arg(long)]
        subject: Option<String>,
    },
    /// Fit the preprocessing chain on a labeled dataset and dump per-trial features.
    Features {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train one model per class and save the bundle.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score every trial of a dataset with a saved bundle.
    Classify {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kappa and confusion matrices of a bundle or a predictions file on a labeled dataset.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        bundle: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test every method on every subject.
    Experiment {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated list; overrides `methods` in the configuration.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

pub(crate) fn write_file(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

fn validate(manifest: &Path) -> CliResult {
    let ds = load_dataset(manifest)?;
    ds.validate()?;
    let labeled = ds.trials.iter().filter(|t| t.label.is_some()).count();
    println!(
        "ok: {} trials ({} labeled), {} calibration recordings, {} channels, {} classes, {} Hz, subjects {:?}",
        ds.trials.len(),
        labeled,
        ds.calibration.len(),
        ds.channels.len(),
        ds.n_classes(),
        ds.sample_rate,
        ds.subjects()
    );
    Ok(())
}

fn simulate(
    out: &Path,
    seed: u64,
    spec: Option<&Path>,
    n_per_class: usize,
    session: Option<String>,
    subject: Option<String>,
) -> CliResult {
    let mut spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::two_class(seed),
    };
    spec.seed = seed;
    if let Some(s) = session {
        spec.session = s;
    }
    if let Some(s) = subject {
        spec.subject = s;
    }
    let ds = synth_trials(&spec, n_per_class)?;
    create_dir(out)?;
    let manifest = save_dataset(&ds, out)?;
    write_file(
        &out.join("spec.json"),
        &(serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n"),
    )?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn features(dataset: &Path, out: &Path, cfg: &RunConfig) -> CliResult {
    let ds = load_dataset(dataset)?;
    let pre = Preprocessor::fit(&ds, &cfg.pipeline)?;
    let views: Vec<_> = ds.trials.iter().map(|t| t.unlabeled()).collect();
    let feats = pre.transform_all(&views)?;
    create_dir(&out.join("features"))?;
    cfg.save(out)?;
    let mut index = String::from("trial\tsubject\tsession\tlabel\tfile\n");
    for (i, (t, f)) in ds.trials.iter().zip(&feats).enumerate() {
        let name = format!("features/trial_{i:04}.txt");
        save_matrix(&out.join(&name), &f.to_text_matrix())?;
        let label = t.label.map_or_else(|| "NA".to_string(), |l| l.to_string());
        index += &format!("{i}\t{}\t{}\t{label}\t{name}\n", t.subject_id, t.session_id);
    }
    write_file(&out.join("index.tsv"), &index)?;
    println!(
        "wrote {} feature sequences of dimension {}",
        feats.len(),
        pre.feature_dim()
    );
    Ok(())
}

fn train(dataset: &Path, method: Method, seed: u64, out: &Path, cfg: &RunConfig) -> CliResult {
    let ds = load_dataset(dataset)?;
    let bundle = train_bundle(&ds, method, &cfg.pipeline, seed)?;
    bundle.save(out)?;
    cfg.save(out)?;
    match bundle.order {
        Some((k, m)) => println!("trained {method} bundle with {k} states and {m} mixtures per class"),
        None => println!("trained {method} bundle"),
    }
    Ok(())
}

fn predictions_tsv(bundle: &ClassifierBundle, ds: &Dataset, preds: &[Prediction]) -> String {
    let mut out = format!("# method {}\ntrial\tsubject\tsession\tpredicted", bundle.method);
    for name in &bundle.class_names {
        out += &format!("\tscore_{name}");
    }
    out.push('\n');
    for (i, (t, p)) in ds.trials.iter().zip(preds).enumerate() {
        out += &format!("{i}\t{}\t{}\t{}", t.subject_id, t.session_id, p.label);
        for s in &p.scores {
            out += &format!("\t{s:e}");
        }
        out.push('\n');
    }
    out
}

fn read_predictions(path: &Path, n_classes: usize) -> CliResult<(Option<Method>, Vec<Prediction>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let bad = |line: usize, msg: &str| CliError::data(format!("{}:{line}: {msg}", path.display()));
    let mut method = None;
    let mut preds = Vec::new();
    let mut header_seen = false;
    for (no, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("# method ") {
            method = Some(rest.trim().parse::<Method>().map_err(|e| bad(no + 1, &e.to_string()))?);
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 + n_classes {
            return Err(bad(no + 1, &format!("expected {} columns", 4 + n_classes)));
        }
        if cols[0].parse::<usize>().ok() != Some(preds.len()) {
            return Err(bad(no + 1, "trial indices must run 0, 1, 2, ..."));
        }
        let label: usize = cols[3].parse().map_err(|_| bad(no + 1, "bad predicted class"))?;
        let scores = cols[4..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(no + 1, "bad score")))
            .collect::<CliResult<Vec<_>>>()?;
        preds.push(Prediction { label, scores });
    }
    Ok((method, preds))
}

fn classify(bundle: &Path, dataset: &Path, out: &Path) -> CliResult {
    let bundle = ClassifierBundle::load(bundle)?;
    let ds = load_dataset(dataset)?;
    ds.validate()?;
    let views: Vec<_> = ds.trials.iter().map(|t| t.unlabeled()).collect();
    let preds = bundle.classify_all(&views)?;
    write_file(&out.join("predictions.tsv"), &predictions_tsv(&bundle, &ds, &preds))?;
    RunConfig {
        methods: vec![bundle.method],
        pipeline: bundle.config.clone(),
    }
    .save(out)?;
    println!("classified {} trials", preds.len());
    Ok(())
}

/// One cell per subject from predictions in dataset trial order.
fn report_from_predictions(ds: &Dataset, preds: &[Prediction], method: Method) -> CliResult<ExperimentReport> {
    if preds.len() != ds.trials.len() {
        return Err(CliError::data(format!(
            "{} predictions for {} trials",
            preds.len(),
            ds.trials.len()
        )));
    }
    let mut subjects = ds.subjects();
    subjects.sort();
    let mut cells = Vec::new();
    for s in &subjects {
        let keep: Vec<usize> = (0..ds.trials.len())
            .filter(|&i| &ds.trials[i].subject_id == s)
            .collect();
        let sub = Dataset {
            trials: keep.iter().map(|&i| ds.trials[i].clone()).collect(),
            ..Dataset::new(ds.channels.clone(), ds.class_names.clone(), ds.sample_rate)
        };
        let sub_preds: Vec<Prediction> = keep.iter().map(|&i| preds[i].clone()).collect();
        let e = score_predictions(&sub_preds, &sub, ds.n_classes())?;
        cells.push(CellResult {
            subject: s.clone(),
            method,
            kappa: Some(e.kappa),
            accuracy: Some(e.accuracy),
            n_test: e.n_test,
            confusion: Some(e.confusion),
            order: None,
            occupied_states: None,
            error: None,
            error_kind: None,
        });
    }
    Ok(ExperimentReport {
        seed: 0,
        methods: vec![method],
        subjects,
        test_sessions: "pooled".into(),
        cells,
    })
}

fn write_report(out: &Path, report: &ExperimentReport) -> CliResult {
    write_file(&out.join("results.tsv"), &report.results_tsv())?;
    write_file(&out.join("table.tsv"), &report.table())?;
    write_file(&out.join("report.json"), &report.to_json())?;
    print!("{}", report.table());
    Ok(())
}

fn evaluate_cmd(dataset: &Path, bundle: Option<&Path>, predictions: Option<&Path>, out: &Path) -> CliResult {
    let ds = load_dataset(dataset)?;
    ds.validate()?;
    let (method, preds) = match (bundle, predictions) {
        (Some(b), _) => {
            let bundle = ClassifierBundle::load(b)?;
            let views: Vec<_> = ds.trials.iter().map(|t| t.unlabeled()).collect();
            (bundle.method, bundle.classify_all(&views)?)
        }
        (None, Some(p)) => {
            let (m, preds) = read_predictions(p, ds.n_classes())?;
            let m = m.ok_or_else(|| CliError::data(format!("{}: missing `# method` line", p.display())))?;
            (m, preds)
        }
        (None, None) => return Err(CliError::config("either --bundle or --predictions is required")),
    };
    let report = report_from_predictions(&ds, &preds, method)?;
    write_report(out, &report)
}

fn experiment(train: &Path, test: &Path, seed: u64, out: &Path, cfg: &RunConfig, jobs: usize) -> CliResult {
    let train = load_dataset(train)?;
    let test = load_dataset(test)?;
    let report = run_experiment(&train, &test, &cfg.methods, &cfg.pipeline, seed, jobs)?;
    create_dir(out)?;
    cfg.save(out)?;
    write_report(out, &report)?;
    if let Some(c) = report.first_failure() {
        return Err(CliError {
            code: c.error_kind.map_or(3, exit_code),
            msg: format!(
                "{} / {} failed: {}",
                c.subject,
                c.method,
                c.error.as_deref().unwrap_or("unknown error")
            ),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if !matches!(cli.command, Command::Experiment { .. }) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs.max(1))
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Validate { manifest } => validate(&manifest),
        Command::Simulate {
            out,
            seed,
            spec,
            n_per_class,
            session,
            subject,
        } => simulate(&out, seed, spec.as_deref(), n_per_class, session, subject),
        Command::Features { dataset, out, config } => features(&dataset, &out, &config.load()?),
        Command::Train {
            dataset,
            method,
            seed,
            out,
            config,
        } => train(&dataset, method, seed, &out, &config.load()?),
        Command::Classify { bundle, dataset, out } => classify(&bundle, &dataset, &out),
        Command::Evaluate {
            dataset,
            bundle,
            predictions,
            out,
        } => evaluate_cmd(&dataset, bundle.as_deref(), predictions.as_deref(), &out),
        Command::Experiment {
            train,
            test,
            seed,
            out,
            methods,
            config,
        } => {
            let mut cfg = config.load()?;
            if let Some(m) = methods {
                cfg.methods = m;
            }
            experiment(&train, &test, seed, &out, &cfg, cli.jobs)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
