use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdpbci::classify::{train_bundle, Method, PipelineConfig};
use hdpbci::simulate::SyntheticSpec;
use hdpbci::trial_store::load_dataset;

const QUICK: [&str; 6] = [
    "--set",
    "pipeline.hdp.n_sweeps=40",
    "--set",
    "pipeline.hdp.burn_in=30",
    "--set",
    "pipeline.hdp.thin=5",
];

fn hdpbci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdpbci"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hdpbci(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A spec far more separable than the preset: deep desynchronization
/// entered almost immediately, and little noise.
fn extreme_spec(dir: &Path) -> PathBuf {
    let mut spec = SyntheticSpec::two_class(0);
    spec.noise_sd = 0.1;
    for (c, src) in [(0, 0), (1, 2)] {
        spec.classes[c].amplitudes[1][src] = vec![0.05, 0.4];
        spec.classes[c].transitions[0] = vec![0.1, 0.9, 0.0];
    }
    let path = dir.join("extreme.json");
    fs::write(&path, serde_json::to_string(&spec).unwrap()).unwrap();
    path
}

fn simulate(dir: &Path, name: &str, seed: u64, session: &str, n: usize, spec: Option<&Path>) -> PathBuf {
    let out = dir.join(name);
    let seed = seed.to_string();
    let n = n.to_string();
    let mut args = vec![
        "simulate",
        "--out",
        s(&out),
        "--seed",
        &seed,
        "--n-per-class",
        &n,
        "--session",
        session,
    ];
    if let Some(p) = spec {
        args.extend(["--spec", s(p)]);
    }
    ok(&args);
    out
}

#[test]
fn experiment_on_separable_data_is_perfect_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = extreme_spec(dir.path());
    let train = simulate(dir.path(), "train", 1, "T", 40, Some(&spec));
    let test = simulate(dir.path(), "test", 2, "E", 20, Some(&spec));
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "experiment",
            "--train",
            s(&train),
            "--test",
            s(&test),
            "--seed",
            "5",
            "--out",
            s(&out),
            "--jobs",
            jobs,
        ];
        args.extend(QUICK);
        ok(&args);
        out
    };
    let a = run("exp_a", "2");
    let b = run("exp_b", "1");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    for c in cells {
        assert_eq!(c["kappa"], 1.0, "{c}");
    }
    assert_eq!(report["test_sessions"], "pooled");
    for f in ["results.tsv", "table.tsv", "report.json", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let table = fs::read_to_string(a.join("table.tsv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "subject\tHMM-FP\tHMM-CV\tHDP-HMM");
    assert_eq!(table.lines().last().unwrap(), "Average\t1.0000\t1.0000\t1.0000");
}

#[test]
fn train_classify_round_trip_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let train = simulate(dir.path(), "train", 3, "T", 10, None);
    let test = simulate(dir.path(), "test", 4, "E", 5, None);
    for method in ["HMM-FP", "HDP-HMM"] {
        let bundle = dir.path().join(format!("bundle_{method}"));
        let mut args = vec![
            "train",
            "--dataset",
            s(&train),
            "--method",
            method,
            "--seed",
            "9",
            "--out",
            s(&bundle),
        ];
        args.extend(QUICK);
        ok(&args);
        assert!(bundle.join("config.toml").exists());
        let pred_dir = dir.path().join(format!("pred_{method}"));
        ok(&[
            "classify",
            "--bundle",
            s(&bundle),
            "--dataset",
            s(&test),
            "--out",
            s(&pred_dir),
        ]);
        let text = fs::read_to_string(pred_dir.join("predictions.tsv")).unwrap();

        let mut cfg = PipelineConfig::default();
        cfg.hdp.n_sweeps = 40;
        cfg.hdp.burn_in = 30;
        cfg.hdp.thin = 5;
        let train_ds = load_dataset(&train).unwrap();
        let test_ds = load_dataset(&test).unwrap();
        let b = train_bundle(&train_ds, method.parse::<Method>().unwrap(), &cfg, 9).unwrap();
        let views: Vec<_> = test_ds.trials.iter().map(|t| t.unlabeled()).collect();
        let preds = b.classify_all(&views).unwrap();

        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), preds.len());
        for (row, p) in rows.iter().zip(&preds) {
            let cols: Vec<&str> = row.split('\t').collect();
            assert_eq!(cols[3].parse::<usize>().unwrap(), p.label);
            let scores: Vec<f64> = cols[4..].iter().map(|v| v.parse().unwrap()).collect();
            assert_eq!(scores, p.scores);
        }

        let from_bundle = dir.path().join(format!("eval_b_{method}"));
        let from_preds = dir.path().join(format!("eval_p_{method}"));
        ok(&[
            "evaluate",
            "--dataset",
            s(&test),
            "--bundle",
            s(&bundle),
            "--out",
            s(&from_bundle),
        ]);
        ok(&[
            "evaluate",
            "--dataset",
            s(&test),
            "--predictions",
            s(&pred_dir.join("predictions.tsv")),
            "--out",
            s(&from_preds),
        ]);
        assert_eq!(
            fs::read(from_bundle.join("report.json")).unwrap(),
            fs::read(from_preds.join("report.json")).unwrap()
        );
    }
}

#[test]
fn validate_reports_corruption_as_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = simulate(dir.path(), "ds", 5, "T", 2, None);
    let out = ok(&["validate", s(&ds)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok: 4 trials"));
    let victim = ds.join("trials").join("trial_00001.txt");
    let text = fs::read_to_string(&victim).unwrap();
    let broken: String = text.lines().take(8).map(|l| format!("{l}\n")).collect::<String>() + "1.0 abc\n";
    fs::write(&victim, broken).unwrap();
    let out = hdpbci(&["validate", s(&ds)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
    let out = hdpbci(&["validate", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ds = simulate(dir.path(), "ds", 6, "T", 4, None);
    let out_dir = dir.path().join("bundle");
    let base = [
        "train",
        "--dataset",
        s(&ds),
        "--method",
        "HMM-FP",
        "--seed",
        "1",
        "--out",
        s(&out_dir),
    ];
    let mut bad_key = base.to_vec();
    bad_key.extend(["--set", "pipeline.hmm_states=4"]);
    assert_eq!(hdpbci(&bad_key).status.code(), Some(2));
    let mut bad_value = base.to_vec();
    bad_value.extend(["--set", "pipeline.features.overlap_fraction=1.5"]);
    assert_eq!(hdpbci(&bad_value).status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[pipeline\n").unwrap();
    let mut bad_file = base.to_vec();
    bad_file.extend(["--config", s(&cfg)]);
    assert_eq!(hdpbci(&bad_file).status.code(), Some(2));
    // --seed is mandatory for stochastic commands
    let no_seed = hdpbci(&["train", "--dataset", s(&ds), "--method", "HMM-FP", "--out", s(&out_dir)]);
    assert_eq!(no_seed.status.code(), Some(2));
    assert_eq!(hdpbci(&["simulate", "--out", s(&out_dir)]).status.code(), Some(2));
    let bad_method = hdpbci(&[
        "train",
        "--dataset",
        s(&ds),
        "--method",
        "SVM",
        "--seed",
        "1",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(bad_method.status.code(), Some(2));
}

#[test]
fn features_dump_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let ds = simulate(dir.path(), "ds", 7, "T", 3, None);
    let again = simulate(dir.path(), "ds2", 7, "T", 3, None);
    assert_eq!(
        fs::read(ds.join("trials").join("trial_00004.txt")).unwrap(),
        fs::read(again.join("trials").join("trial_00004.txt")).unwrap()
    );
    let a = dir.path().join("fa");
    let b = dir.path().join("fb");
    ok(&["features", "--dataset", s(&ds), "--out", s(&a)]);
    ok(&["features", "--dataset", s(&ds), "--out", s(&b)]);
    let index = fs::read_to_string(a.join("index.tsv")).unwrap();
    assert_eq!(index.lines().count(), 7);
    let f0 = fs::read_to_string(a.join("features").join("trial_0000.txt")).unwrap();
    assert_eq!(
        f0,
        fs::read_to_string(b.join("features").join("trial_0000.txt")).unwrap()
    );
    let m = hdpbci::matrix_io::load_matrix(&a.join("features").join("trial_0000.txt")).unwrap();
    assert_eq!((m.data.nrows(), m.data.ncols()), (31, 10));
    let echoed: toml::Table = fs::read_to_string(a.join("config.toml")).unwrap().parse().unwrap();
    assert!(echoed.contains_key("pipeline"));
}

#[test]
fn failed_cell_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let train = simulate(dir.path(), "train", 8, "T", 1, None);
    let test = simulate(dir.path(), "test", 9, "E", 1, None);
    let out = dir.path().join("exp");
    let r = hdpbci(&[
        "experiment",
        "--train",
        s(&train),
        "--test",
        s(&test),
        "--seed",
        "1",
        "--out",
        s(&out),
        "--methods",
        "HMM-FP",
    ]);
    assert_eq!(r.status.code(), Some(3));
    let tsv = fs::read_to_string(out.join("results.tsv")).unwrap();
    assert!(tsv.contains("S01\tHMM-FP\tNA\tNA\t2"));
}
