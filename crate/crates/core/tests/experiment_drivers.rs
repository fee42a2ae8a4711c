use ccsfg_core::evaluation::experiments::write_tables;
use ccsfg_core::evaluation::{run_condition_ablation, run_overlap_sweep, run_stability_comparison};
use ccsfg_core::synthdata::{generate_dataset, DataConfig, DatasetBundle};
use ccsfg_core::trainer::TrainConfig;

fn tiny() -> (DatasetBundle, TrainConfig) {
    let data = generate_dataset(
        &DataConfig {
            train_ids: 12,
            test_ids: 4,
            samples_per_id: 4,
            ..DataConfig::default()
        },
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        p: 4,
        k: 2,
        feat_dim: 8,
        enc_hidden: 12,
        gen_hidden: 12,
        latent_dim: 4,
        emb_dim: 3,
        ..TrainConfig::default()
    };
    (data, cfg)
}

#[test]
fn stability_table_is_reproducible() {
    let (data, cfg) = tiny();
    let (runs, summary) = run_stability_comparison(&data, &cfg, &[1, 2], 2).unwrap();
    assert_eq!(runs.len(), 6);
    let names: Vec<&str> = summary.iter().map(|s| s.variant.as_str()).collect();
    assert_eq!(names, ["baseline", "cvae", "ccsfg"]);
    assert!(summary.iter().all(|s| s.runs == 2 && s.failures == 0));
    let (again, summary2) = run_stability_comparison(&data, &cfg, &[1, 2], 1).unwrap();
    assert_eq!(summary, summary2);
    assert_eq!(runs, again);
}

#[test]
fn ablation_has_four_rows() {
    let (data, cfg) = tiny();
    let (_, summary) = run_condition_ablation(&data, &cfg, &[3], 1).unwrap();
    let names: Vec<&str> = summary.iter().map(|s| s.variant.as_str()).collect();
    assert_eq!(names, ["neither", "c-only", "y-only", "both"]);
}

#[test]
fn overlap_rows_are_ordered_and_tables_written() {
    let (data, cfg) = tiny();
    let (runs, summary) = run_overlap_sweep(&data, &cfg, &[0.5, 0.0, 0.25], &[1], 4, 1).unwrap();
    let params: Vec<f64> = summary.iter().map(|s| s.param.unwrap()).collect();
    assert_eq!(params, [0.0, 0.0, 0.25, 0.25, 0.5, 0.5]);

    let dir = tempfile::tempdir().unwrap();
    write_tables(dir.path(), "overlap", &runs, &summary).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("overlap_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(dir.path().join("overlap.json").exists());
    assert!(dir.path().join("overlap_ccsfg_p0.25_seed1.jsonl").exists());
    let log = std::fs::read_to_string(dir.path().join("overlap_baseline_p0_seed1.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}
