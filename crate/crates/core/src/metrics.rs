//! Exact (full-dataset) accuracy gaps, excess accuracy gaps and pairwise
//! disparity between a dense and a sparse model.

use crate::autodiff::Tape;
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::model::{per_sample_accuracy, MaskedMlp};

/// Per-group and aggregate accuracy/loss over one dataset split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupStats {
    pub group_accuracy: Vec<f64>,
    pub group_loss: Vec<f64>,
    pub group_sizes: Vec<usize>,
    pub aggregate_accuracy: f64,
    pub aggregate_loss: f64,
}

/// Exact disparity measurements between a dense and a sparse model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DisparityReport {
    /// Global accuracy gap; positive means the sparse model degraded.
    pub global_gap: f64,
    /// Per-group accuracy gaps.
    pub group_gaps: Vec<f64>,
    /// Excess accuracy gaps: group gap minus global gap.
    pub excess_gaps: Vec<f64>,
    pub max_excess_gap: f64,
    /// Spread between the largest and smallest group gaps.
    pub pairwise_disparity: f64,
}

/// Exact single-pass statistics of `model` on `data`.
pub fn dataset_group_stats(model: &MaskedMlp, data: &GroupedDataset) -> Result<GroupStats> {
    data.validate()?;
    let n = data.len();
    let k = data.num_classes;
    let num_groups = data.num_groups();

    // Evaluate in chunks to bound tape size; reductions are accumulated in
    // fixed chunk order so results are deterministic.
    let mut correct = vec![0usize; num_groups];
    let mut loss_sum = vec![0.0f64; num_groups];
    let mut sizes = vec![0usize; num_groups];
    let chunk = 4096;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let logits = model.eval_logits(data, &indices)?;
        let labels = &data.labels[start..end];
        let acc = per_sample_accuracy(&logits, k, labels)?;
        let mut tape = Tape::new();
        let lt = tape.constant(&[end - start, k], logits)?;
        let losses = tape.cross_entropy_per_sample(lt, labels)?;
        let losses = tape.values(losses);
        for (i, row) in (start..end).enumerate() {
            let g = data.groups[row];
            sizes[g] += 1;
            if acc[i] {
                correct[g] += 1;
            }
            loss_sum[g] += losses[i];
        }
        start = end;
    }

    let group_accuracy: Vec<f64> = correct
        .iter()
        .zip(&sizes)
        .map(|(&c, &s)| c as f64 / s as f64)
        .collect();
    let group_loss: Vec<f64> = loss_sum
        .iter()
        .zip(&sizes)
        .map(|(&l, &s)| l / s as f64)
        .collect();
    let total_correct: usize = correct.iter().sum();
    let total_loss: f64 = loss_sum.iter().sum();
    Ok(GroupStats {
        group_accuracy,
        group_loss,
        group_sizes: sizes,
        aggregate_accuracy: total_correct as f64 / n as f64,
        aggregate_loss: total_loss / n as f64,
    })
}

/// Accuracy gaps and EAGs of `sparse` relative to `dense`.
pub fn accuracy_gaps(dense: &GroupStats, sparse: &GroupStats) -> Result<DisparityReport> {
    if dense.group_sizes != sparse.group_sizes {
        return Err(Error::Config(format!(
            "group sizes disagree: {:?} vs {:?}",
            dense.group_sizes, sparse.group_sizes
        )));
    }
    let global_gap = dense.aggregate_accuracy - sparse.aggregate_accuracy;
    let group_gaps: Vec<f64> = dense
        .group_accuracy
        .iter()
        .zip(&sparse.group_accuracy)
        .map(|(d, s)| d - s)
        .collect();
    let excess_gaps: Vec<f64> = group_gaps.iter().map(|d| d - global_gap).collect();
    let max_excess_gap = excess_gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let report = DisparityReport {
        global_gap,
        group_gaps,
        excess_gaps,
        max_excess_gap,
        pairwise_disparity: 0.0,
    };
    let pw = pairwise_disparity(&report);
    Ok(DisparityReport {
        pairwise_disparity: pw,
        ..report
    })
}

/// max_g psi_g - min_g psi_g; equals max gap minus min gap.
pub fn pairwise_disparity(report: &DisparityReport) -> f64 {
    let max = report.excess_gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = report.excess_gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// Full report between two models on one split.
pub fn evaluate_disparity(
    dense: &MaskedMlp,
    sparse: &MaskedMlp,
    data: &GroupedDataset,
) -> Result<DisparityReport> {
    let d = dataset_group_stats(dense, data)?;
    let s = dataset_group_stats(sparse, data)?;
    accuracy_gaps(&d, &s)
}
