mod common;

use fairtrain_core::evaluation::{is_improvement, metric_class};
use fairtrain_core::tooling::{read_metrics_csv, RunLog};
use fairtrain_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;

proptest! {
    #[test]
    fn report_matches_enumeration(seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (classes, cards, rows, train) = common::random_logs(&mut rng);
        let r = common::report_for(classes, &cards, &rows, &train);
        let o = common::oracle_metrics(&rows, &train, classes, &cards);
        prop_assert_eq!(r.acc, o.acc);
        prop_assert_eq!(r.bca, o.bca);
        prop_assert_eq!(r.wga, o.wga);
        prop_assert_eq!(r.avg_acc, o.avg_acc);
        prop_assert_eq!(r.group_acc, o.group_acc);
    }

    #[test]
    fn metrics_are_ordered(seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (classes, cards, rows, train) = common::random_logs(&mut rng);
        let r = common::report_for(classes, &cards, &rows, &train);
        prop_assert!(r.wga <= r.avg_acc + 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.acc));
        prop_assert_eq!(r.group_count.iter().sum::<usize>(), rows.len());
    }
}

#[test]
fn perfect_and_useless_predictors() {
    let rows: Vec<_> = (0..40).map(|i| (i % 4, vec![i % 3], i % 4)).collect();
    let r = common::report_for(4, &[3], &rows, &rows);
    assert_eq!((r.acc, r.wga, r.avg_acc), (1.0, 1.0, 1.0));
    let wrong: Vec<_> = rows.iter().map(|(y, a, _)| (*y, a.clone(), (y + 1) % 4)).collect();
    let r = common::report_for(4, &[3], &wrong, &rows);
    assert_eq!((r.acc, r.wga, r.avg_acc, r.bca), (0.0, 0.0, 0.0, Some(0.0)));
}

#[test]
fn no_bias_labels_means_no_conflicting_accuracy() {
    let rows: Vec<_> = (0..10).map(|i| (i % 2, vec![], i % 2)).collect();
    let r = common::report_for(2, &[], &rows, &rows);
    assert_eq!(r.bca, None);
    assert_eq!(r.group_acc.len(), 2);
}

#[test]
fn csv_parse_back_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (classes, cards, rows, train) = loop {
        let logs = common::random_logs(&mut rng);
        if logs.0 > 1 && !logs.1.is_empty() {
            break logs;
        }
    };
    let r = common::report_for(classes, &cards, &rows, &train);
    let log = RunLog::create(dir.path(), r.group_acc.len()).unwrap();
    log.log_metrics(&r, 1, Some(0.123456789)).unwrap();
    let parsed = read_metrics_csv(log.csv_path()).unwrap();
    assert_eq!(parsed.len(), 1);
    let row = &parsed[0];
    // values survive up to the 6-significant-digit serialization
    let six = |v: f64| format!("{v:.5e}").parse::<f64>().unwrap();
    let num = |k: &str| row[k].parse::<f64>().unwrap();
    assert_eq!(num("acc"), six(r.acc));
    assert_eq!(num("wga"), six(r.wga));
    assert_eq!(num("avg_acc"), six(r.avg_acc));
    assert_eq!(num("train_loss"), six(0.123456789));
    assert_eq!(row["bca"].parse::<f64>().ok(), r.bca.map(six));
    for (g, v) in r.group_acc.iter().enumerate() {
        assert_eq!(row[&format!("acc_g{g}")].parse::<f64>().ok(), v.map(six), "group {g}");
    }
}

#[test]
fn nan_metric_aborts_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<_> = (0..4).map(|i| (i % 2, vec![0], i % 2)).collect();
    let mut r = common::report_for(2, &[1], &rows, &rows);
    r.avg_acc = f64::NAN;
    let log = RunLog::create(dir.path(), r.group_acc.len()).unwrap();
    let e = log.log_metrics(&r, 1, None).unwrap_err();
    assert!(matches!(e, Error::NonFiniteMetric(ref n) if n == "avg_acc"), "{e}");
    assert!(e.to_string().contains("non-finite metric"));
    assert!(read_metrics_csv(log.csv_path()).unwrap().is_empty());
}

#[test]
fn metric_classes_and_selection() {
    assert!(metric_class("wga").unwrap().higher_is_better);
    assert!(!metric_class("error_rate").unwrap().higher_is_better);
    assert!(metric_class("f1").is_none());
    assert!(is_improvement(0.6, 0.5, true));
    assert!(!is_improvement(0.5, 0.5, true));
    assert!(is_improvement(0.1, 0.2, false));
    let rows: Vec<_> = (0..4).map(|i| (i % 2, vec![0], 0)).collect();
    let r = common::report_for(2, &[1], &rows, &rows);
    let primary: Vec<_> = r.metadata().into_iter().filter(|m| m.is_primary).collect();
    assert_eq!(primary.len(), 1);
    assert_eq!(primary[0].name, "wga");
    assert_eq!(r.primary_value(), Some(0.0));
}
