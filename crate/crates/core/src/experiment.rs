//! Pipeline orchestration and reporting: pretrain, sparsify with a chosen
//! mitigation scheme, evaluate, aggregate seeds, suggest tolerances.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{seed_streams, DataSource, ExperimentConfig};
use crate::data::{load_csv, synthetic_generate, GroupedDataset};
use crate::error::{Error, Result};
use crate::formulation::FormulationKind;
use crate::metrics::{evaluate_disparity, DisparityReport};
use crate::model::{MaskedMlp, MlpSpec};
use crate::optim::{run_training, EpochRecord, TrainConfig, TrainState};

/// One metrics-file row: everything recorded for an (epoch, split) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
    pub group_accuracies: Vec<f64>,
    pub global_gap: f64,
    pub excess_gaps: Vec<f64>,
    pub max_excess_gap: f64,
    pub pairwise_disparity: f64,
    pub lambda: Vec<f64>,
    pub sparsity: f64,
    pub lr: f64,
}

impl MetricsRecord {
    fn from_epoch(record: &EpochRecord, split: &str, num_groups: usize) -> Self {
        let (stats, report) = match split {
            "train" => (&record.train.stats, &record.train.report),
            _ => {
                let t = record.test.as_ref().expect("test split requested but absent");
                (&t.stats, &t.report)
            }
        };
        let (global_gap, excess_gaps, max_excess_gap, pairwise_disparity) = match report {
            Some(r) => (
                r.global_gap,
                r.excess_gaps.clone(),
                r.max_excess_gap,
                r.pairwise_disparity,
            ),
            None => (0.0, vec![0.0; num_groups], 0.0, 0.0),
        };
        Self {
            epoch: record.epoch,
            split: split.to_string(),
            accuracy: stats.aggregate_accuracy,
            loss: stats.aggregate_loss,
            group_accuracies: stats.group_accuracy.clone(),
            global_gap,
            excess_gaps,
            max_excess_gap,
            pairwise_disparity,
            lambda: record.lambda.clone(),
            sparsity: record.sparsity,
            lr: record.lr,
        }
    }
}

/// Versioned metrics CSV: the header row lists the record fields in order,
/// with one column per group / constraint.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::State("no metrics records to write".into()));
    };
    let num_groups = first.group_accuracies.len();
    let num_duals = first.lambda.len();
    let mut header = vec!["epoch".to_string(), "split".to_string(), "accuracy".into(), "loss".into()];
    header.extend((0..num_groups).map(|g| format!("acc_g{}", g)));
    header.push("delta".into());
    header.extend((0..num_groups).map(|g| format!("psi_g{}", g)));
    header.push("max_psi".into());
    header.push("psi_pw".into());
    header.extend((0..num_duals).map(|j| format!("lambda_{}", j)));
    header.push("sparsity".into());
    header.push("lr".into());

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.split.clone(), fmt(r.accuracy), fmt(r.loss)];
        row.extend(r.group_accuracies.iter().map(|&v| fmt(v)));
        row.push(fmt(r.global_gap));
        row.extend(r.excess_gaps.iter().map(|&v| fmt(v)));
        row.push(fmt(r.max_excess_gap));
        row.push(fmt(r.pairwise_disparity));
        row.extend(r.lambda.iter().map(|&v| fmt(v)));
        row.push(fmt(r.sparsity));
        row.push(fmt(r.lr));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{}", v)
}

/// Parse a metrics CSV produced by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty metrics file", path.display())))?
        .split(',')
        .collect();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|&h| h == name)
            .ok_or_else(|| Error::Parse(format!("{}: missing column '{}'", path.display(), name)))
    };
    let acc_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("acc_g"))
        .map(|(i, _)| i)
        .collect();
    let psi_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("psi_g"))
        .map(|(i, _)| i)
        .collect();
    let lambda_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("lambda_"))
        .map(|(i, _)| i)
        .collect();
    let (c_epoch, c_split, c_acc, c_loss) = (col("epoch")?, col("split")?, col("accuracy")?, col("loss")?);
    let (c_delta, c_max, c_pw) = (col("delta")?, col("max_psi")?, col("psi_pw")?);
    let (c_sp, c_lr) = (col("sparsity")?, col("lr")?);

    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Parse(format!(
                "{}: line {}: {} cells, expected {}",
                path.display(),
                lineno + 2,
                cells.len(),
                header.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: line {}: bad number '{}'", path.display(), lineno + 2, cells[i])))
        };
        records.push(MetricsRecord {
            epoch: cells[c_epoch]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad epoch", path.display())))?,
            split: cells[c_split].to_string(),
            accuracy: num(c_acc)?,
            loss: num(c_loss)?,
            group_accuracies: acc_cols.iter().map(|&i| num(i)).collect::<Result<_>>()?,
            global_gap: num(c_delta)?,
            excess_gaps: psi_cols.iter().map(|&i| num(i)).collect::<Result<_>>()?,
            max_excess_gap: num(c_max)?,
            pairwise_disparity: num(c_pw)?,
            lambda: lambda_cols.iter().map(|&i| num(i)).collect::<Result<_>>()?,
            sparsity: num(c_sp)?,
            lr: num(c_lr)?,
        });
    }
    if records.is_empty() {
        return Err(Error::Parse(format!("{}: no metric rows", path.display())));
    }
    Ok(records)
}

/// Re-run provenance written next to every artifact.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub formulation: String,
    pub seed: u64,
    pub artifacts: std::collections::BTreeMap<String, String>,
    #[serde(default)]
    pub early_stop: Option<EarlyStopRecord>,
}

/// Best-test-accuracy iterate of a naive fine-tuning run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EarlyStopRecord {
    pub epoch: usize,
    pub test_accuracy: f64,
    pub train_report: DisparityReport,
    pub test_report: DisparityReport,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest: {}", e)))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| Error::Parse(format!("manifest: {}", e)))
    }
}

/// Materialize the configured dataset for one seed.
pub fn build_dataset(config: &ExperimentConfig, seed: u64) -> Result<(GroupedDataset, Option<GroupedDataset>)> {
    match &config.data {
        DataSource::Synthetic(spec) => {
            let (train, test) = synthetic_generate(spec, seed_streams::data(seed))?;
            Ok((train, Some(test)))
        }
        DataSource::Csv { train_path, test_path } => {
            let train = load_csv(train_path)?;
            let test = match test_path {
                Some(p) => {
                    let test = load_csv(p)?;
                    if test.group_names.iter().any(|n| !train.group_names.contains(n)) {
                        return Err(Error::Config(
                            "a group present in the test split is absent from the train split".into(),
                        ));
                    }
                    Some(test)
                }
                None => None,
            };
            Ok((train, test))
        }
    }
}

fn model_spec(config: &ExperimentConfig, data: &GroupedDataset) -> Result<MlpSpec> {
    MlpSpec::new(data.dim, config.hidden_dims.clone(), data.num_classes)
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{}", seed))
}

fn collect_records(records: &[EpochRecord], num_groups: usize) -> Vec<MetricsRecord> {
    let mut rows = Vec::new();
    for r in records {
        rows.push(MetricsRecord::from_epoch(r, "train", num_groups));
        if r.test.is_some() {
            rows.push(MetricsRecord::from_epoch(r, "test", num_groups));
        }
    }
    rows
}

/// Train the dense model by ERM and write `dense.ckpt` plus metrics.
pub fn cmd_pretrain(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    let dir = run_dir(out, seed);
    std::fs::create_dir_all(&dir)?;
    let (train, test) = build_dataset(config, seed)?;
    let spec = model_spec(config, &train)?;
    let mut model = MaskedMlp::init(&spec, seed_streams::init(seed))?;

    let cfg = TrainConfig {
        kind: FormulationKind::Nft,
        sgd: config.pretrain.sgd.clone(),
        lr_schedule: config.pretrain.lr_schedule(),
        dual_lr: 0.0,
        total_epochs: config.pretrain.epochs,
        batch_size: config.pretrain.batch_size,
        use_buffers: false,
        buffer_size: 1,
        gmp: None,
    };
    let mut state = TrainState::new(&cfg.kind, train.num_groups(), seed_streams::shuffle(seed));
    let records = run_training(
        &mut model,
        None,
        &train,
        test.as_ref(),
        &cfg,
        &mut state,
        false,
        |_, _, _| {},
    )?;

    let ckpt = dir.join("dense.ckpt");
    checkpoint::save(&model, &ckpt)?;
    let metrics = dir.join("metrics_pretrain.csv");
    write_metrics_csv(&metrics, &collect_records(&records, train.num_groups()))?;
    let mut artifacts = std::collections::BTreeMap::new();
    artifacts.insert("checkpoint".into(), ckpt.display().to_string());
    artifacts.insert("metrics".into(), metrics.display().to_string());
    Manifest {
        command: "pretrain".into(),
        config_hash: config.hash.clone(),
        formulation: "nft".into(),
        seed,
        artifacts,
        early_stop: None,
    }
    .save(&dir.join("manifest_pretrain.json"))?;
    Ok(dir)
}

/// Prune and fine-tune from a dense checkpoint under the configured
/// mitigation scheme; write `sparse.ckpt`, metrics and manifest.
pub fn cmd_sparsify(config: &ExperimentConfig, seed: u64, out: &Path, dense_path: Option<&Path>) -> Result<PathBuf> {
    let dir = run_dir(out, seed);
    std::fs::create_dir_all(&dir)?;
    let default_dense = dir.join("dense.ckpt");
    let dense_path = dense_path.unwrap_or(&default_dense);
    if !dense_path.exists() {
        return Err(Error::State(format!(
            "dense checkpoint {} not found; run pretrain first",
            dense_path.display()
        )));
    }
    let dense = checkpoint::load(dense_path)?;
    let (train, test) = build_dataset(config, seed)?;
    let spec = model_spec(config, &train)?;
    if dense.spec != spec {
        return Err(Error::Config(format!(
            "dense checkpoint architecture {:?} does not match configured {:?}",
            dense.spec, spec
        )));
    }

    let mut model = dense.clone();
    let kind = config.finetune.formulation;
    let cfg = TrainConfig {
        kind,
        sgd: config.finetune.stage.sgd.clone(),
        lr_schedule: config.finetune.stage.lr_schedule(),
        dual_lr: config.finetune.dual_lr,
        total_epochs: config.finetune.stage.epochs,
        batch_size: config.finetune.stage.batch_size,
        use_buffers: config.finetune.use_buffers,
        buffer_size: config.finetune.buffer_size,
        gmp: Some(config.gmp.clone()),
    };
    let mut state = TrainState::new(&kind, train.num_groups(), seed_streams::shuffle(seed));

    let track_es = matches!(kind, FormulationKind::Nft) && config.eval_test_each_epoch;
    let mut best: Option<(usize, f64, MaskedMlp, DisparityReport, DisparityReport)> = None;
    let records = run_training(
        &mut model,
        Some(&dense),
        &train,
        test.as_ref(),
        &cfg,
        &mut state,
        config.eval_test_each_epoch,
        |epoch, model, record| {
            if !track_es {
                return;
            }
            if let Some(test) = &record.test {
                let acc = test.stats.aggregate_accuracy;
                if best.as_ref().is_none_or(|(_, b, _, _, _)| acc > *b) {
                    if let (Some(tr), Some(te)) = (&record.train.report, &test.report) {
                        best = Some((epoch, acc, model.clone(), tr.clone(), te.clone()));
                    }
                }
            }
        },
    )?;

    let ckpt = dir.join("sparse.ckpt");
    checkpoint::save(&model, &ckpt)?;
    let metrics = dir.join("metrics.csv");
    write_metrics_csv(&metrics, &collect_records(&records, train.num_groups()))?;

    let mut artifacts = std::collections::BTreeMap::new();
    artifacts.insert("checkpoint".into(), ckpt.display().to_string());
    artifacts.insert("metrics".into(), metrics.display().to_string());
    artifacts.insert("dense_checkpoint".into(), dense_path.display().to_string());
    let early_stop = match best {
        Some((epoch, test_accuracy, es_model, train_report, test_report)) => {
            let es_ckpt = dir.join("sparse_es.ckpt");
            checkpoint::save(&es_model, &es_ckpt)?;
            artifacts.insert("early_stop_checkpoint".into(), es_ckpt.display().to_string());
            Some(EarlyStopRecord {
                epoch,
                test_accuracy,
                train_report,
                test_report,
            })
        }
        None => None,
    };
    Manifest {
        command: "sparsify".into(),
        config_hash: config.hash.clone(),
        formulation: kind.name().into(),
        seed,
        artifacts,
        early_stop,
    }
    .save(&dir.join("manifest_sparsify.json"))?;
    Ok(dir)
}

/// Exact disparity reports of a checkpoint against a dense baseline, on
/// the train split and (when available) the test split.
pub fn cmd_evaluate(
    config: &ExperimentConfig,
    seed: u64,
    checkpoint_path: &Path,
    dense_path: &Path,
) -> Result<(DisparityReport, Option<DisparityReport>)> {
    let sparse = checkpoint::load(checkpoint_path)?;
    let dense = checkpoint::load(dense_path)?;
    let (train, test) = build_dataset(config, seed)?;
    let train_report = evaluate_disparity(&dense, &sparse, &train)?;
    let test_report = match &test {
        Some(t) => Some(evaluate_disparity(&dense, &sparse, t)?),
        None => None,
    };
    Ok((train_report, test_report))
}

/// One aggregated cell of the report table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReportRow {
    pub config_hash: String,
    pub formulation: String,
    pub seeds: usize,
    pub test_accuracy_avg: f64,
    pub test_accuracy_std: f64,
    pub train_max_psi_avg: f64,
    pub train_max_psi_std: f64,
    pub test_max_psi_avg: f64,
    pub test_max_psi_std: f64,
    pub train_psi_pw_avg: f64,
    pub train_psi_pw_std: f64,
    pub test_psi_pw_avg: f64,
    pub test_psi_pw_std: f64,
}

fn avg_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let avg = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (avg, 0.0);
    }
    let var = values.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (n - 1.0);
    (avg, var.sqrt())
}

/// Aggregate completed sparsify runs: per configuration, avg and sample
/// std (ddof = 1) of final test accuracy, max EAG and pairwise disparity.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if run_dirs.is_empty() {
        return Err(Error::Aggregation("no run directories given".into()));
    }
    struct RunSummary {
        hash: String,
        formulation: String,
        test_accuracy: f64,
        train_max_psi: f64,
        test_max_psi: f64,
        train_psi_pw: f64,
        test_psi_pw: f64,
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        let manifest_path = dir.join("manifest_sparsify.json");
        if !manifest_path.exists() {
            return Err(Error::Aggregation(format!(
                "{} has no completed sparsify run",
                dir.display()
            )));
        }
        let manifest = Manifest::load(&manifest_path)?;
        let records = read_metrics_csv(&dir.join("metrics.csv"))?;
        let last_train = records
            .iter()
            .rev()
            .find(|r| r.split == "train")
            .ok_or_else(|| Error::Aggregation(format!("{}: no train rows", dir.display())))?;
        let last_test = records
            .iter()
            .rev()
            .find(|r| r.split == "test")
            .ok_or_else(|| Error::Aggregation(format!("{}: no test rows", dir.display())))?;
        runs.push(RunSummary {
            hash: manifest.config_hash,
            formulation: manifest.formulation,
            test_accuracy: last_test.accuracy,
            train_max_psi: last_train.max_excess_gap,
            test_max_psi: last_test.max_excess_gap,
            train_psi_pw: last_train.pairwise_disparity,
            test_psi_pw: last_test.pairwise_disparity,
        });
    }

    let mut hashes: Vec<String> = Vec::new();
    for r in &runs {
        if !hashes.contains(&r.hash) {
            hashes.push(r.hash.clone());
        }
    }
    let mut rows = Vec::new();
    for hash in hashes {
        let cell: Vec<&RunSummary> = runs.iter().filter(|r| r.hash == hash).collect();
        let formulations: Vec<&str> = cell.iter().map(|r| r.formulation.as_str()).collect();
        if formulations.iter().any(|&f| f != formulations[0]) {
            return Err(Error::Aggregation(format!(
                "runs with config hash {} disagree on formulation",
                hash
            )));
        }
        let take = |f: fn(&RunSummary) -> f64| -> Vec<f64> { cell.iter().map(|r| f(r)).collect() };
        let (ta, tas) = avg_std(&take(|r| r.test_accuracy));
        let (trm, trms) = avg_std(&take(|r| r.train_max_psi));
        let (tem, tems) = avg_std(&take(|r| r.test_max_psi));
        let (trp, trps) = avg_std(&take(|r| r.train_psi_pw));
        let (tep, teps) = avg_std(&take(|r| r.test_psi_pw));
        rows.push(ReportRow {
            config_hash: hash,
            formulation: formulations[0].to_string(),
            seeds: cell.len(),
            test_accuracy_avg: ta,
            test_accuracy_std: tas,
            train_max_psi_avg: trm,
            train_max_psi_std: trms,
            test_max_psi_avg: tem,
            test_max_psi_std: tems,
            train_psi_pw_avg: trp,
            train_psi_pw_std: trps,
            test_psi_pw_avg: tep,
            test_psi_pw_std: teps,
        });
    }
    Ok(rows)
}

/// Write the aggregated report as CSV.
pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "config_hash,formulation,seeds,test_accuracy_avg,test_accuracy_std,train_max_psi_avg,train_max_psi_std,test_max_psi_avg,test_max_psi_std,train_psi_pw_avg,train_psi_pw_std,test_psi_pw_avg,test_psi_pw_std"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config_hash,
            r.formulation,
            r.seeds,
            fmt(r.test_accuracy_avg),
            fmt(r.test_accuracy_std),
            fmt(r.train_max_psi_avg),
            fmt(r.train_max_psi_std),
            fmt(r.test_max_psi_avg),
            fmt(r.test_max_psi_std),
            fmt(r.train_psi_pw_avg),
            fmt(r.train_psi_pw_std),
            fmt(r.test_psi_pw_avg),
            fmt(r.test_psi_pw_std)
        )?;
    }
    Ok(())
}

/// Aligned text rendering of the aggregated report.
pub fn format_report_table(rows: &[ReportRow]) -> String {
    let mut table = Vec::new();
    table.push(vec![
        "formulation".to_string(),
        "seeds".to_string(),
        "test acc".to_string(),
        "train max_psi".to_string(),
        "test max_psi".to_string(),
        "train psi_pw".to_string(),
        "test psi_pw".to_string(),
    ]);
    for r in rows {
        table.push(vec![
            r.formulation.clone(),
            r.seeds.to_string(),
            format!("{:.4} ± {:.4}", r.test_accuracy_avg, r.test_accuracy_std),
            format!("{:.4} ± {:.4}", r.train_max_psi_avg, r.train_max_psi_std),
            format!("{:.4} ± {:.4}", r.test_max_psi_avg, r.test_max_psi_std),
            format!("{:.4} ± {:.4}", r.train_psi_pw_avg, r.train_psi_pw_std),
            format!("{:.4} ± {:.4}", r.test_psi_pw_avg, r.test_psi_pw_std),
        ]);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].len()).max().unwrap())
        .collect();
    table
        .iter()
        .map(|row| {
            row.iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{:<width$}", cell, width = w))
                .collect::<Vec<_>>()
                .join("  ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Suggested tolerance for a completed naive fine-tuning run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ToleranceSuggestion {
    pub final_train_max_psi: f64,
    pub suggested_epsilon: f64,
    pub warning: Option<String>,
}

/// Read a finished NFT run and suggest a tolerance strictly below its final
/// train max EAG (half of it by default).
pub fn cmd_suggest_tolerance(dir: &Path) -> Result<ToleranceSuggestion> {
    let manifest = Manifest::load(&dir.join("manifest_sparsify.json"))
        .map_err(|_| Error::State(format!("{} has no completed sparsify run", dir.display())))?;
    if manifest.formulation != "nft" {
        return Err(Error::State(format!(
            "tolerance selection requires an NFT run, found '{}'",
            manifest.formulation
        )));
    }
    let records = read_metrics_csv(&dir.join("metrics.csv"))?;
    let last_train = records
        .iter()
        .rev()
        .find(|r| r.split == "train")
        .ok_or_else(|| Error::State("no train metrics in run".into()))?;
    let max_psi = last_train.max_excess_gap;
    if max_psi <= 0.0 {
        return Ok(ToleranceSuggestion {
            final_train_max_psi: max_psi,
            suggested_epsilon: 0.0,
            warning: Some("NFT shows no positive excess accuracy gap; there is no disparity to constrain".into()),
        });
    }
    Ok(ToleranceSuggestion {
        final_train_max_psi: max_psi,
        suggested_epsilon: max_psi / 2.0,
        warning: None,
    })
}
