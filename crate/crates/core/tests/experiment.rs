use std::sync::OnceLock;

use dnd_core::bundle::save_pipeline;
use dnd_core::defense::defend_infer;
use dnd_core::experiment::{
    build_artifacts, roc_csv, run_experiment, run_scenarios, scenarios_csv, transfer_csv,
    write_report, Artifacts, ExperimentConfig, Report, Scenario,
};
use dnd_core::sentinel::SessionState;
use dnd_core::Error;

fn config() -> ExperimentConfig {
    ExperimentConfig::smoke(3)
}

fn artifacts() -> &'static Artifacts {
    static ART: OnceLock<Artifacts> = OnceLock::new();
    ART.get_or_init(|| build_artifacts(&config()).unwrap())
}

fn report() -> &'static Report {
    static REP: OnceLock<Report> = OnceLock::new();
    REP.get_or_init(|| run_scenarios(artifacts(), &config()).unwrap())
}

#[test]
fn identical_config_gives_identical_report_bytes() {
    let again = run_experiment(&config()).unwrap();
    assert_eq!(report().to_json(), again.to_json());
}

#[test]
fn report_carries_the_config_hash_and_bounded_rates() {
    let r = report();
    assert_eq!(r.config_hash, config().hash());
    assert_eq!(r.scenarios.len(), Scenario::ALL.len());
    for s in &r.scenarios {
        for (k, v) in &s.metrics {
            if k.ends_with("accuracy")
                || k.ends_with("rate")
                || k == "auc"
                || k.ends_with("agreement")
            {
                assert!((0.0..=1.0).contains(v), "{} {k} = {v}", s.name);
            }
        }
    }
}

fn rate(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

#[test]
fn rates_recount_from_sample_logs() {
    let r = report();
    let l = &r.logs;
    assert_eq!(
        r.metric(Scenario::CleanBaseline, "static_accuracy"),
        Some(rate(&l.clean_static, &l.clean_labels))
    );
    assert_eq!(
        r.metric(Scenario::CleanBaseline, "dnd_accuracy"),
        Some(rate(&l.clean_dnd, &l.clean_dnd_labels))
    );
    let wb = l.white_box.as_ref().unwrap();
    assert_eq!(
        r.metric(Scenario::WhiteBoxStatic, "fgsm_accuracy"),
        Some(rate(&wb.fgsm_pred, &wb.labels))
    );
    assert_eq!(
        r.metric(Scenario::WhiteBoxStatic, "iterative_accuracy"),
        Some(rate(&wb.iterative_pred, &wb.labels))
    );
    for (sc, log) in [
        (
            Scenario::BlackBoxStatic,
            l.black_box_static.as_ref().unwrap(),
        ),
        (Scenario::BlackBoxDnd, l.black_box_dnd.as_ref().unwrap()),
    ] {
        let wrong = log
            .target_pred
            .iter()
            .zip(&log.labels)
            .filter(|(p, y)| **p != **y as i64)
            .count();
        assert_eq!(
            r.metric(sc, "success_rate"),
            Some(wrong as f64 / log.labels.len() as f64)
        );
    }
    let roc = r.roc.as_ref().unwrap();
    assert_eq!(
        l.sessions.len(),
        2 * config().sentinel_eval.sessions_per_class
    );
    assert_eq!(roc.points.first(), Some(&(0.0, 0.0)));
    assert_eq!(roc.points.last(), Some(&(1.0, 1.0)));
}

#[test]
fn written_report_round_trips_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let r = report();
    write_report(r, dir.path()).unwrap();
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert_eq!(Report::from_json(&json).unwrap(), *r);
    let before: Vec<Vec<u8>> = [
        "report.json",
        "transfer_matrix.csv",
        "roc.csv",
        "scenarios.csv",
    ]
    .iter()
    .map(|f| std::fs::read(dir.path().join(f)).unwrap())
    .collect();
    write_report(r, dir.path()).unwrap();
    for (f, b) in [
        "report.json",
        "transfer_matrix.csv",
        "roc.csv",
        "scenarios.csv",
    ]
    .iter()
    .zip(before)
    {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), b, "{f}");
    }
}

#[test]
fn csv_shapes_match_the_report() {
    let r = report();
    let n = r.search.transfer.len();
    let t = transfer_csv(r);
    let rows: Vec<&str> = t.lines().collect();
    assert_eq!(rows.len(), n + 1);
    assert!(rows.iter().all(|row| row.split(',').count() == n + 1));
    assert_eq!(
        roc_csv(r).lines().count(),
        r.roc.as_ref().unwrap().points.len() + 1
    );
    let metrics: usize = r.scenarios.iter().map(|s| s.metrics.len()).sum();
    assert_eq!(scenarios_csv(r).lines().count(), metrics + 1);
}

#[test]
fn stage_failures_name_the_stage_and_config() {
    let mut cfg = config();
    cfg.search.a_min = 1.0;
    let hash = cfg.hash();
    let err = build_artifacts(&cfg).err().unwrap().to_string();
    assert!(err.contains("stage search"), "{err}");
    assert!(err.contains(&hash), "{err}");
    cfg.search.a_min = 2.0;
    assert!(matches!(build_artifacts(&cfg), Err(Error::Validation(_))));
}

#[test]
fn saved_pipeline_reloads_to_the_same_answers() {
    let art = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let paths = save_pipeline(&art.pipeline, &art.sequence_detector, dir.path()).unwrap();
    let (loaded, seq) = paths.load(art.pipeline.cfg.clone()).unwrap();
    assert_eq!(seq.params(), art.sequence_detector.params());
    let mut s1 = art.pipeline.streams(4).unwrap();
    let mut s2 = loaded.streams(4).unwrap();
    for x in &art.test.images[..20] {
        assert_eq!(
            defend_infer(&art.pipeline, &mut s1, x, SessionState::Normal).unwrap(),
            defend_infer(&loaded, &mut s2, x, SessionState::Normal).unwrap()
        );
    }
    std::fs::remove_file(&paths.vae).unwrap();
    let err = paths
        .load(art.pipeline.cfg.clone())
        .err()
        .unwrap()
        .to_string();
    assert!(err.contains("vae.dndw"), "{err}");
}

#[test]
fn scenario_subsets_run_alone() {
    let mut cfg = config();
    cfg.scenarios = vec![Scenario::SentinelRoc];
    let r = run_scenarios(artifacts(), &cfg).unwrap();
    assert_eq!(r.scenarios.len(), 1);
    assert!(r.roc.is_some());
    assert!(r.logs.white_box.is_none());
}
