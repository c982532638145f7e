use flatlora::config::{load_config, parse_config, ExperimentConfig};
use flatlora::experiment::{read_results, run_experiment_in, sweep_in, train_run, ResultRow, RunStatus, SweepParam};
use flatlora::trainers::Method;

fn small(method: &str, extra: &str) -> ExperimentConfig {
    parse_config(&format!(
        r#"{{"method": "{method}", "dataset": {{"size": 120}}, "model": {{"architecture": "mlp", "widths": [2, 16, 16, 2]}},
            "steps": 10, "eval_every": 5, "seeds": [0, 1], "sharpness": {{"samples": 2}}{extra}}}"#
    ))
    .unwrap()
}

fn metrics(r: &ResultRow) -> Vec<Option<f64>> {
    vec![r.train_loss, r.test_loss, r.train_accuracy, r.test_accuracy, r.sharpness, r.accuracy_gap, r.loss_gap]
}

#[test]
fn one_seed_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seeds: vec![3], ..small("lora", "") };
    let rows = run_experiment_in(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].status, RunStatus::Ok);
    assert!(metrics(&rows[0]).iter().all(|m| m.is_some_and(f64::is_finite)));
}

#[test]
fn separable_blobs_are_fit_perfectly() {
    let cfg = parse_config(r#"{"method": "lora", "dataset": {"size": 200, "noise": 0.0}, "steps": 100, "seeds": [0]}"#).unwrap();
    let out = train_run(&cfg, 0, None).unwrap();
    assert_eq!(out.row.train_accuracy, Some(1.0));
}

#[test]
fn zero_sigma_flat_rows_equal_lora_rows() {
    let lora = small("lora", "");
    let flat = small("flat_lora", r#", "sigma": 0.0"#);
    for seed in [0, 1] {
        let a = train_run(&lora, seed, None).unwrap().row;
        let b = train_run(&flat, seed, None).unwrap().row;
        let bits = |r: &ResultRow| metrics(r).into_iter().map(|m| m.map(f64::to_bits)).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.grad_evals, b.grad_evals);
    }
}

#[test]
fn sam_rows_count_twice_the_gradient_evaluations() {
    let lora = train_run(&small("lora", ""), 0, None).unwrap().row;
    for method in ["sam_full", "lora_sam"] {
        let sam = train_run(&small(method, ""), 0, None).unwrap().row;
        assert_eq!(sam.grad_evals, 2 * lora.grad_evals);
    }
    assert_eq!(lora.grad_evals, 10);
}

#[test]
fn sigma_grid_runs_every_value_for_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let grid = [0.0, 0.01, 0.05, 0.10, 0.15, 0.20];
    let out = sweep_in(&small("flat_lora", ""), SweepParam::Sigma, &grid, dir.path()).unwrap();
    assert_eq!(out.rows.len(), 6 * 2);
    assert_eq!(out.points.iter().map(|p| p.value).collect::<Vec<_>>(), grid);
    assert_eq!(read_results(&dir.path().join("results.csv")).unwrap().len(), 12);
}

#[test]
fn rank_grid_runs_with_per_layer_caps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seeds: vec![0], steps: 3, ..small("lora", "") };
    let cfg = ExperimentConfig { model: flatlora::ModelSpec::mlp(vec![2, 64, 64, 2]), ..cfg };
    let out = sweep_in(&cfg, SweepParam::Rank, &[1.0, 4.0, 16.0, 64.0], dir.path()).unwrap();
    assert_eq!(out.rows.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 4, 16, 64]);
    assert!(out.rows.iter().all(|r| r.status == RunStatus::Ok));
}

#[test]
fn single_value_sweep_equals_run() {
    let cfg = small("flat_lora", r#", "sigma": 0.1"#);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = run_experiment_in(&cfg, d1.path()).unwrap();
    let swept = sweep_in(&cfg, SweepParam::Sigma, &[0.1], d2.path()).unwrap();
    assert_eq!(run.len(), swept.rows.len());
    for (a, b) in run.iter().zip(&swept.rows) {
        assert!(a.same_outcome(b));
    }
}

#[test]
fn config_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"method": "sam_full", "dataset": {"kind": "two_spirals"}}"#).unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.method, Method::SamFull);
    assert_eq!(cfg.rho, Some(0.05));
}
