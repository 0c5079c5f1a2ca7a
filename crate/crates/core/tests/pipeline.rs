//! End-to-end pipeline tests: pretrain -> sparsify -> evaluate -> report,
//! plus metrics/report file round trips and determinism of full runs.

use std::path::{Path, PathBuf};

use fairprune::config::ExperimentConfig;
use fairprune::experiment::{
    cmd_evaluate, cmd_pretrain, cmd_report, cmd_sparsify, cmd_suggest_tolerance, read_metrics_csv,
    run_dir, write_metrics_csv, Manifest, MetricsRecord,
};

fn small_config(formulation: &str, out: &Path) -> ExperimentConfig {
    let epsilon_line = match formulation {
        "nft" | "el" => String::new(),
        _ => "epsilon = 0.05\n".to_string(),
    };
    let dual_line = if formulation == "nft" {
        String::new()
    } else {
        "dual_lr = 0.05\n".to_string()
    };
    let text = format!(
        r#"
output_dir = "{out}"
seeds = [1]

[data]
source = "synthetic"
dim = 6
classes = 3
group_sizes = [90, 45, 30]
noise_scales = [0.5, 0.8, 1.1]
test_fraction = 0.25

[model]
hidden_dims = [16, 16]

[pretrain]
epochs = 3
batch_size = 32

[gmp]
final_sparsity = 0.8
end_epoch = 4

[finetune]
epochs = 7
batch_size = 32
formulation = "{formulation}"
{epsilon_line}{dual_line}"#,
        out = out.display(),
        formulation = formulation,
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn metrics_csv_round_trip() {
    let records = vec![
        MetricsRecord {
            epoch: 0,
            split: "train".into(),
            accuracy: 0.8125,
            loss: 0.6931471805599453,
            group_accuracies: vec![0.9, 0.725],
            global_gap: 0.0125,
            excess_gaps: vec![0.05, -0.0375],
            max_excess_gap: 0.05,
            pairwise_disparity: 0.0875,
            lambda: vec![0.0, 0.125],
            sparsity: 0.5,
            lr: 0.01,
        },
        MetricsRecord {
            epoch: 0,
            split: "test".into(),
            accuracy: 0.75,
            loss: 0.9,
            group_accuracies: vec![0.8, 0.7],
            global_gap: 0.02,
            excess_gaps: vec![0.01, -0.01],
            max_excess_gap: 0.01,
            pairwise_disparity: 0.02,
            lambda: vec![0.0, 0.125],
            sparsity: 0.5,
            lr: 0.01,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics_csv(&path, &records).unwrap();
    let back = read_metrics_csv(&path).unwrap();
    assert_eq!(back, records);

    let header = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(
        header,
        "epoch,split,accuracy,loss,acc_g0,acc_g1,delta,psi_g0,psi_g1,max_psi,psi_pw,lambda_0,lambda_1,sparsity,lr"
    );
}

#[test]
fn full_pipeline_produces_artifacts_and_is_deterministic() {
    let ws = tempfile::tempdir().unwrap();
    let out_a = ws.path().join("a");
    let out_b = ws.path().join("b");

    for out in [&out_a, &out_b] {
        let cfg = small_config("ceag", out);
        cmd_pretrain(&cfg, 1, out).unwrap();
        cmd_sparsify(&cfg, 1, out, None).unwrap();
    }

    let dir_a = run_dir(&out_a, 1);
    for file in [
        "dense.ckpt",
        "metrics_pretrain.csv",
        "manifest_pretrain.json",
        "sparse.ckpt",
        "metrics.csv",
        "manifest_sparsify.json",
    ] {
        assert!(dir_a.join(file).exists(), "missing {}", file);
    }

    // Identical configs and seed -> byte-identical outputs.
    let dir_b = run_dir(&out_b, 1);
    for file in ["metrics_pretrain.csv", "metrics.csv", "dense.ckpt", "sparse.ckpt"] {
        let a = std::fs::read(dir_a.join(file)).unwrap();
        let b = std::fs::read(dir_b.join(file)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", file);
    }

    // The sparse model reaches the configured sparsity, recorded in metrics.
    let records = read_metrics_csv(&dir_a.join("metrics.csv")).unwrap();
    let last_train = records.iter().rev().find(|r| r.split == "train").unwrap();
    assert!((last_train.sparsity - 0.8).abs() < 0.01);
    // CEAG run carries one multiplier per group.
    assert_eq!(last_train.lambda.len(), 3);
    // Test rows exist (eval_test_each_epoch defaults to true).
    assert!(records.iter().any(|r| r.split == "test"));

    let manifest = Manifest::load(&dir_a.join("manifest_sparsify.json")).unwrap();
    assert_eq!(manifest.formulation, "ceag");
    assert_eq!(manifest.seed, 1);
    assert!(manifest.early_stop.is_none());

    // Exact evaluation agrees with the final metrics row.
    let cfg = small_config("ceag", &out_a);
    let (train_report, test_report) = cmd_evaluate(
        &cfg,
        1,
        &dir_a.join("sparse.ckpt"),
        &dir_a.join("dense.ckpt"),
    )
    .unwrap();
    assert!((train_report.max_excess_gap - last_train.max_excess_gap).abs() < 1e-12);
    assert!(test_report.is_some());
}

#[test]
fn nft_run_tracks_early_stopping_and_suggests_tolerance() {
    let ws = tempfile::tempdir().unwrap();
    let out = ws.path().to_path_buf();
    let cfg = small_config("nft", &out);
    cmd_pretrain(&cfg, 1, &out).unwrap();
    cmd_sparsify(&cfg, 1, &out, None).unwrap();

    let dir = run_dir(&out, 1);
    let manifest = Manifest::load(&dir.join("manifest_sparsify.json")).unwrap();
    let es = manifest.early_stop.expect("NFT runs track the best test iterate");
    assert!(dir.join("sparse_es.ckpt").exists());
    assert!(es.test_accuracy > 0.0);

    let suggestion = cmd_suggest_tolerance(&dir).unwrap();
    let records = read_metrics_csv(&dir.join("metrics.csv")).unwrap();
    let last_train = records.iter().rev().find(|r| r.split == "train").unwrap();
    assert_eq!(suggestion.final_train_max_psi, last_train.max_excess_gap);
    if suggestion.final_train_max_psi > 0.0 {
        assert!((suggestion.suggested_epsilon - suggestion.final_train_max_psi / 2.0).abs() < 1e-15);
        assert!(suggestion.warning.is_none());
    } else {
        assert_eq!(suggestion.suggested_epsilon, 0.0);
        assert!(suggestion.warning.is_some());
    }
}

#[test]
fn suggest_tolerance_rejects_constrained_runs() {
    let ws = tempfile::tempdir().unwrap();
    let out = ws.path().to_path_buf();
    let cfg = small_config("ceag", &out);
    cmd_pretrain(&cfg, 1, &out).unwrap();
    cmd_sparsify(&cfg, 1, &out, None).unwrap();
    let err = cmd_suggest_tolerance(&run_dir(&out, 1)).unwrap_err().to_string();
    assert!(err.contains("nft") || err.contains("NFT"), "error was: {}", err);
}

#[test]
fn sparsify_requires_pretrained_checkpoint() {
    let ws = tempfile::tempdir().unwrap();
    let out = ws.path().to_path_buf();
    let cfg = small_config("ceag", &out);
    let err = cmd_sparsify(&cfg, 1, &out, None).unwrap_err().to_string();
    assert!(err.contains("pretrain"), "error was: {}", err);
}

fn fake_run_dir(root: &Path, name: &str, hash: &str, formulation: &str, test_acc: f64) -> PathBuf {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let record = |split: &str, acc: f64| MetricsRecord {
        epoch: 0,
        split: split.into(),
        accuracy: acc,
        loss: 0.5,
        group_accuracies: vec![acc, acc],
        global_gap: 0.01,
        excess_gaps: vec![0.02, -0.02],
        max_excess_gap: 0.02,
        pairwise_disparity: 0.04,
        lambda: vec![],
        sparsity: 0.8,
        lr: 0.01,
    };
    write_metrics_csv(
        &dir.join("metrics.csv"),
        &[record("train", 0.9), record("test", test_acc)],
    )
    .unwrap();
    Manifest {
        command: "sparsify".into(),
        config_hash: hash.into(),
        formulation: formulation.into(),
        seed: 0,
        artifacts: Default::default(),
        early_stop: None,
    }
    .save(&dir.join("manifest_sparsify.json"))
    .unwrap();
    dir
}

#[test]
fn report_aggregates_by_config_hash() {
    let ws = tempfile::tempdir().unwrap();
    // Three seeds of one config with final test accuracies 1, 2, 3 (scaled)
    // -> avg 2, sample std 1. One seed of a second config -> std 0.
    let dirs = vec![
        fake_run_dir(ws.path(), "s1", "hash_a", "ceag", 1.0),
        fake_run_dir(ws.path(), "s2", "hash_a", "ceag", 2.0),
        fake_run_dir(ws.path(), "s3", "hash_a", "ceag", 3.0),
        fake_run_dir(ws.path(), "s4", "hash_b", "nft", 0.5),
    ];
    let rows = cmd_report(&dirs).unwrap();
    assert_eq!(rows.len(), 2);
    let a = rows.iter().find(|r| r.config_hash == "hash_a").unwrap();
    assert_eq!(a.seeds, 3);
    assert!((a.test_accuracy_avg - 2.0).abs() < 1e-12);
    assert!((a.test_accuracy_std - 1.0).abs() < 1e-12);
    let b = rows.iter().find(|r| r.config_hash == "hash_b").unwrap();
    assert_eq!(b.seeds, 1);
    assert_eq!(b.test_accuracy_std, 0.0);
}

#[test]
fn report_rejects_formulation_mismatch_within_a_config() {
    let ws = tempfile::tempdir().unwrap();
    let dirs = vec![
        fake_run_dir(ws.path(), "s1", "hash_a", "ceag", 1.0),
        fake_run_dir(ws.path(), "s2", "hash_a", "el", 2.0),
    ];
    assert!(cmd_report(&dirs).is_err());
}

#[test]
fn cli_binary_runs_the_pipeline() {
    let ws = tempfile::tempdir().unwrap();
    let out = ws.path().join("runs");
    let config_path = ws.path().join("exp.toml");
    std::fs::write(
        &config_path,
        format!(
            r#"
output_dir = "{}"
seeds = [1]

[data]
source = "synthetic"
dim = 6
classes = 3
group_sizes = [90, 45, 30]
noise_scales = [0.5, 0.8, 1.1]
test_fraction = 0.25

[model]
hidden_dims = [16, 16]

[pretrain]
epochs = 2
batch_size = 32

[gmp]
final_sparsity = 0.8
end_epoch = 4

[finetune]
epochs = 6
batch_size = 32
formulation = "ceag"
epsilon = 0.05
dual_lr = 0.05
"#,
            out.display()
        ),
    )
    .unwrap();

    let bin = env!("CARGO_BIN_EXE_fairprune");
    let run = |args: &[&str]| {
        let output = std::process::Command::new(bin).args(args).output().unwrap();
        assert!(
            output.status.success(),
            "command {:?} failed:\n{}",
            args,
            String::from_utf8_lossy(&output.stderr)
        );
        String::from_utf8_lossy(&output.stdout).to_string()
    };
    let cfg = config_path.to_str().unwrap();
    run(&["pretrain", "--config", cfg]);
    run(&["sparsify", "--config", cfg]);
    let dir = run_dir(&out, 1);
    let eval_out = run(&[
        "evaluate",
        "--config",
        cfg,
        "--checkpoint",
        dir.join("sparse.ckpt").to_str().unwrap(),
        "--dense",
        dir.join("dense.ckpt").to_str().unwrap(),
    ]);
    assert!(eval_out.contains("max_psi"));
    let report_out = run(&["report", dir.to_str().unwrap()]);
    assert!(report_out.contains("ceag"));

    // Unknown config key -> nonzero exit with a pointed message.
    std::fs::write(&config_path, "bogus = 1\n").unwrap();
    let output = std::process::Command::new(bin)
        .args(["pretrain", "--config", cfg])
        .output()
        .unwrap();
    assert!(!output.status.success());
}
