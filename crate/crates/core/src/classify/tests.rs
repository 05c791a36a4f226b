use super::*;
use crate::simulate::{synth_trials, SyntheticSpec};
use proptest::prelude::*;

fn quick_config() -> PipelineConfig {
    PipelineConfig {
        hdp: HdpHmmConfig {
            n_sweeps: 30,
            burn_in: 20,
            thin: 5,
            ..HdpHmmConfig::default()
        },
        em: EmConfig {
            max_iters: 30,
            ..EmConfig::default()
        },
        ..PipelineConfig::default()
    }
}

fn dataset(seed: u64, n: usize) -> Dataset {
    synth_trials(&SyntheticSpec::two_class(seed), n).unwrap()
}

#[test]
fn kappa_examples() {
    assert_eq!(kappa(&[vec![40, 0], vec![0, 40]]).unwrap(), 1.0);
    assert_eq!(kappa(&[vec![20, 20], vec![20, 20]]).unwrap(), 0.0);
    assert_eq!(kappa(&[vec![44, 6], vec![6, 44]]).unwrap(), 0.76);
    assert_eq!(kappa(&[vec![5, 5, 0], vec![0, 5, 5], vec![5, 0, 5]]).unwrap(), 0.25);
    assert_eq!(kappa(&[vec![1, 1, 1], vec![1, 1, 1], vec![1, 1, 1]]).unwrap(), 0.0);
    assert_eq!(kappa(&[vec![0, 10], vec![10, 0]]).unwrap(), -1.0);
    assert_eq!(accuracy(&[vec![44, 6], vec![6, 44]]).unwrap(), 0.88);
    assert!(kappa(&[vec![0, 0], vec![0, 0]]).is_err());
    assert!(kappa(&[vec![1]]).is_err());
    assert!(kappa(&[vec![1, 2], vec![3]]).is_err());
}

#[test]
fn confusion_rows_count_truth() {
    let truth = [0, 0, 1, 1, 1, 2];
    let pred = [0, 1, 1, 1, 2, 0];
    let m = confusion_matrix(&truth, &pred, 3).unwrap();
    assert_eq!(m, vec![vec![1, 1, 0], vec![0, 2, 1], vec![1, 0, 0]]);
    assert!(confusion_matrix(&truth, &pred[..5], 3).is_err());
    assert!(confusion_matrix(&[3], &[0], 3).is_err());
}

proptest! {
    #[test]
    fn kappa_is_one_iff_diagonal(cells in prop::collection::vec(0usize..20, 9)) {
        let m: Vec<Vec<usize>> = cells.chunks(3).map(<[usize]>::to_vec).collect();
        prop_assume!(cells.iter().sum::<usize>() > 0);
        let k = kappa(&m).unwrap();
        let diagonal = (0..3).all(|i| (0..3).all(|j| i == j || m[i][j] == 0));
        prop_assert_eq!(k == 1.0, diagonal);
        prop_assert!((-0.5 - 1e-12..=1.0).contains(&k));
    }
}

#[test]
fn method_names() {
    for m in Method::ALL {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
    }
    assert_eq!("hdp_hmm".parse::<Method>().unwrap(), Method::HdpHmm);
    assert!(matches!("svm".parse::<Method>(), Err(Error::Config(_))));
}

#[test]
fn config_rejects_unknown_keys() {
    assert!(serde_json::from_str::<PipelineConfig>(r#"{"cv_fold": 3}"#).is_err());
    let c: PipelineConfig = serde_json::from_str(r#"{"cv_folds": 4, "hdp": {"kappa": 2.0}}"#).unwrap();
    assert_eq!(c.cv_folds, 4);
    assert_eq!(c.hdp.kappa, 2.0);
    assert_eq!(c.fp_states, 3);
    let bad = PipelineConfig {
        band_high_hz: 200.0,
        ..PipelineConfig::default()
    };
    assert!(matches!(bad.validate(250.0), Err(Error::Config(_))));
}

#[test]
fn fixed_order_bundle() {
    let ds = dataset(1, 12);
    let b = train_bundle(&ds, Method::HmmFp, &quick_config(), 3).unwrap();
    assert_eq!(b.n_classes(), 2);
    assert_eq!(b.order, Some((3, 2)));
    for m in &b.models {
        let ClassModel::Hmm(h) = m else {
            panic!("expected an HMM")
        };
        assert_eq!(h.n_states(), 3);
        assert!(h.emissions.iter().all(|g| g.n_components() == 2));
        assert_eq!(h.dim(), 10);
    }
    assert_eq!(b.preprocessor.csp.n_components(), 2);
    assert!(b.preprocessor.regression.is_some());
}

#[test]
fn cv_order_in_range() {
    let ds = dataset(2, 12);
    let b = train_bundle(&ds, Method::HmmCv, &quick_config(), 4).unwrap();
    let (k, m) = b.order.unwrap();
    assert!((1..=3).contains(&k) && (1..=3).contains(&m));
    let ClassModel::Hmm(h) = &b.models[0] else {
        panic!("expected an HMM")
    };
    assert_eq!((h.n_states(), h.emissions[0].n_components()), (k, m));
}

#[test]
fn identical_models_tie_to_class_zero() {
    let ds = dataset(3, 8);
    let mut b = train_bundle(&ds, Method::HmmFp, &quick_config(), 5).unwrap();
    b.models[1] = b.models[0].clone();
    let p = classify(&b, ds.trials[1].unlabeled()).unwrap();
    assert_eq!(p.scores.len(), 2);
    assert_eq!(p.scores[0], p.scores[1]);
    assert_eq!(p.label, 0);
}

#[test]
fn classification_is_deterministic() {
    let ds = dataset(4, 10);
    let test = dataset(40, 5);
    let b = train_bundle(&ds, Method::HmmFp, &quick_config(), 6).unwrap();
    let views: Vec<_> = test.trials.iter().map(|t| t.unlabeled()).collect();
    let batch = b.classify_all(&views).unwrap();
    let again = b.classify_all(&views).unwrap();
    assert_eq!(batch, again);
    for (v, p) in views.iter().zip(&batch) {
        assert_eq!(&classify(&b, *v).unwrap(), p);
    }
    let b2 = train_bundle(&ds, Method::HmmFp, &quick_config(), 6).unwrap();
    assert_eq!(b, b2);
}

#[test]
fn bundle_round_trip() {
    let ds = dataset(5, 10);
    let test = dataset(50, 4);
    for method in [Method::HmmFp, Method::HdpHmm] {
        let b = train_bundle(&ds, method, &quick_config(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let back = ClassifierBundle::load(dir.path()).unwrap();
        assert_eq!(back, b, "{method}");
        let e1 = evaluate(&b, &test).unwrap();
        let e2 = evaluate(&back, &test).unwrap();
        assert_eq!(e1, e2);
    }
}

#[test]
fn rejects_mismatched_layout() {
    let ds = dataset(6, 6);
    let b = train_bundle(&ds, Method::HmmFp, &quick_config(), 1).unwrap();
    let mut t = ds.trials[0].clone();
    t.data = t.data.rows(0, 2).into_owned();
    assert!(matches!(classify(&b, t.unlabeled()), Err(Error::ShapeMismatch(_))));
}

#[test]
fn training_needs_labels_and_classes() {
    let mut ds = dataset(7, 6);
    ds.trials[0].label = None;
    assert!(matches!(
        train_bundle(&ds, Method::HmmFp, &quick_config(), 1),
        Err(Error::Unlabeled(0))
    ));
    let mut one = dataset(7, 6);
    one.trials.retain(|t| t.label == Some(0));
    one.class_names.truncate(1);
    assert!(train_bundle(&one, Method::HmmFp, &quick_config(), 1).is_err());
}

#[test]
fn experiment_records_failures() {
    let mut train = dataset(8, 10);
    let mut test = dataset(80, 4);
    // A second subject with a single trial per class cannot fit CSP.
    let mut s2 = dataset(9, 1);
    for t in s2.trials.iter_mut().chain(s2.calibration.iter_mut()) {
        t.subject_id = "S02".into();
    }
    let mut s2_test = dataset(90, 1);
    for t in s2_test.trials.iter_mut() {
        t.subject_id = "S02".into();
    }
    train.trials.extend(s2.trials);
    train.calibration.extend(s2.calibration);
    test.trials.extend(s2_test.trials);
    let methods = [Method::HmmFp];
    let r = run_experiment(&train, &test, &methods, &quick_config(), 11, 2).unwrap();
    assert_eq!(r.subjects, vec!["S01".to_string(), "S02".to_string()]);
    assert_eq!(r.cells.len(), 2);
    assert!(r.cells[0].kappa.is_some());
    assert!(r.cells[1].error.is_some() && r.cells[1].kappa.is_none());
    assert!(r.any_failed());
    assert_eq!(r.average_kappa(Method::HmmFp), r.cells[0].kappa);
    let conf = r.cells[0].confusion.as_ref().unwrap();
    assert!(conf.iter().all(|row| row.iter().sum::<usize>() == 4));

    let tsv = r.results_tsv();
    assert_eq!(tsv.lines().next().unwrap(), "subject\tmethod\tkappa\taccuracy\tn_test");
    assert!(tsv.lines().nth(2).unwrap().starts_with("S02\tHMM-FP\tNA\tNA\t2"));
    let table = r.table();
    assert_eq!(table.lines().next().unwrap(), "subject\tHMM-FP");
    assert!(table.lines().last().unwrap().starts_with("Average\t"));
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["test_sessions"], "pooled");

    let again = run_experiment(&train, &test, &methods, &quick_config(), 11, 1).unwrap();
    assert_eq!(again.to_json(), r.to_json());

    let empty = run_experiment(&train, &test, &[], &quick_config(), 11, 1).unwrap();
    assert!(empty.cells.is_empty());
}

#[test]
fn experiment_needs_matching_subjects() {
    let train = dataset(10, 4);
    let mut test = dataset(11, 2);
    for t in test.trials.iter_mut() {
        t.subject_id = "S09".into();
    }
    assert!(run_experiment(&train, &test, &Method::ALL, &quick_config(), 1, 1).is_err());
}
