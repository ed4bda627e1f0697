use confed::experiment::{run_experiment, ExperimentConfig, Method};

#[test]
fn centralized_only_gives_one_report_per_disease() {
    let mut cfg = ExperimentConfig::desk();
    cfg.methods = vec![Method::Centralized];
    cfg.cohort.n_people = 3_000;
    let result = run_experiment(&cfg).unwrap();
    assert_eq!(result.reports.len(), 3);
    assert!(result.reports.iter().all(|r| r.method == "centralized"));
    assert!(result.audit.passed());
}

#[test]
fn default_run_seed_seven_beats_central_only() {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = 7;
    let result = run_experiment(&cfg).unwrap();
    assert!(result.audit.passed(), "{}", result.audit.to_text());
    let auc = |m: Method, d: &str| {
        result
            .reports
            .iter()
            .find(|r| r.method == m.name() && r.disease == d)
            .map(|r| r.aucroc)
            .unwrap()
    };
    let wins = cfg
        .cohort
        .diseases
        .iter()
        .filter(|d| auc(Method::Confederated, &d.name) > auc(Method::CentralOnly, &d.name))
        .count();
    assert!(wins >= 2, "confederated ahead on {wins} of 3 diseases\n{}", result.summary());
}
