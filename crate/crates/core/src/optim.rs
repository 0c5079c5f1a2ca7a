//! Primal SGD with momentum, milestone learning-rate decay, projected dual
//! ascent, and the alternating descent-ascent training step: one forward and
//! one backward pass per iteration, with the dual update applied first and
//! the freshly updated multipliers used for the primal step.

use std::time::Instant;

use crate::autodiff::Tape;
use crate::buffer::BufferSet;
use crate::data::{iterate_batches, GroupedBatch, GroupedDataset};
use crate::error::{Error, Result};
use crate::formulation::{
    project_duals, surrogate_weights, violations, DualState, FormulationKind, GroupEstimates,
};
use crate::metrics::{accuracy_gaps, dataset_group_stats, DisparityReport, GroupStats};
use crate::model::{per_sample_accuracy, snapshot_baseline, BaselineSnapshot, MaskedMlp};
use crate::pruning::{apply_gmp_step, GmpSchedule};

/// Primal optimizer settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 1e-4,
        }
    }
}

/// Milestone learning-rate decay: milestones are fractions of the total
/// epoch count; the effective rate is base * decay^(milestones passed).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl LrSchedule {
    pub fn standard(base_lr: f64) -> Self {
        Self {
            base_lr,
            milestones: vec![0.6, 0.8, 0.9],
            decay: 0.1,
        }
    }

    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            milestones: vec![],
            decay: 1.0,
        }
    }
}

/// Effective learning rate at `epoch` of `total_epochs`.
pub fn lr_at_epoch(schedule: &LrSchedule, epoch: usize, total_epochs: usize) -> f64 {
    let passed = schedule
        .milestones
        .iter()
        .filter(|&&frac| (frac * total_epochs as f64).floor() as usize <= epoch)
        .count();
    schedule.base_lr * schedule.decay.powi(passed as i32)
}

/// Dual optimizer settings.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DualConfig {
    pub lr: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
struct LayerMomentum {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Mutable training-run state; serializable so a run can be resumed at an
/// epoch boundary and reproduce the original trajectory exactly.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    /// Base seed; per-epoch shuffle seeds derive from it.
    pub seed: u64,
    momentum: Vec<LayerMomentum>,
    pub dual: DualState,
    pub buffers: Option<BufferSet>,
    pub baseline: Option<BaselineSnapshot>,
    /// Instrumentation: forward/backward passes executed by training steps.
    pub forward_passes: u64,
    pub backward_passes: u64,
}

impl TrainState {
    pub fn new(kind: &FormulationKind, num_groups: usize, seed: u64) -> Self {
        Self {
            epoch: 0,
            step: 0,
            seed,
            momentum: Vec::new(),
            dual: DualState::new(kind, num_groups),
            buffers: None,
            baseline: None,
            forward_passes: 0,
            backward_passes: 0,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Format(format!("serializing train state: {}", e)))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json).map_err(|e| Error::Parse(format!("train state: {}", e)))
    }
}

/// One SGD-with-momentum update over every layer. Weight decay is added to
/// the raw gradients; masked entries are re-zeroed after the update so
/// pruned weights stay exactly 0.
pub fn sgd_step(
    model: &mut MaskedMlp,
    grads: &[(Vec<f64>, Vec<f64>)],
    state: &mut TrainState,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != model.layers.len() {
        return Err(Error::Dimension(format!(
            "{} gradient pairs for {} layers",
            grads.len(),
            model.layers.len()
        )));
    }
    if state.momentum.is_empty() {
        state.momentum = model
            .layers
            .iter()
            .map(|l| LayerMomentum {
                weights: vec![0.0; l.numel()],
                bias: vec![0.0; l.out_dim],
            })
            .collect();
    }
    for ((layer, (gw, gb)), mom) in model
        .layers
        .iter_mut()
        .zip(grads)
        .zip(state.momentum.iter_mut())
    {
        if gw.len() != layer.numel() || gb.len() != layer.bias.len() {
            return Err(Error::Dimension("gradient shape mismatch".into()));
        }
        update_params(
            &mut layer.weights,
            gw,
            &mut mom.weights,
            cfg,
            lr,
        );
        update_params(&mut layer.bias, gb, &mut mom.bias, cfg, lr);
        for (w, &m) in layer.weights.iter_mut().zip(&layer.mask) {
            if m == 0 {
                *w = 0.0;
            }
        }
    }
    Ok(())
}

fn update_params(params: &mut [f64], grads: &[f64], momentum: &mut [f64], cfg: &SgdConfig, lr: f64) {
    for i in 0..params.len() {
        let g = grads[i] + cfg.weight_decay * params[i];
        momentum[i] = cfg.momentum * momentum[i] + g;
        let step = if cfg.nesterov {
            g + cfg.momentum * momentum[i]
        } else {
            momentum[i]
        };
        params[i] -= lr * step;
    }
}

/// Projected gradient ascent on the multipliers.
pub fn dual_ascent_step(
    dual: &mut DualState,
    constraint_values: &[f64],
    cfg: &DualConfig,
    kind: &FormulationKind,
) -> Result<()> {
    if constraint_values.len() != dual.lambda.len() {
        return Err(Error::Dimension(format!(
            "{} constraint values for {} multipliers",
            constraint_values.len(),
            dual.lambda.len()
        )));
    }
    for (l, &c) in dual.lambda.iter_mut().zip(constraint_values) {
        *l += cfg.lr * c;
    }
    project_duals(kind, &mut dual.lambda);
    Ok(())
}

/// Per-step training metrics.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub mean_loss: f64,
    pub max_multiplier: f64,
}

/// Configuration for one training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub kind: FormulationKind,
    pub sgd: SgdConfig,
    pub lr_schedule: LrSchedule,
    pub dual_lr: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub use_buffers: bool,
    pub buffer_size: usize,
    pub gmp: Option<GmpSchedule>,
}

/// One Alt-GDA iteration on a minibatch: forward pass, buffer update,
/// violation estimate, dual ascent, surrogate penalty, backward pass,
/// primal step. Exactly one forward and one backward pass occur.
pub fn altgda_step(
    model: &mut MaskedMlp,
    data: &GroupedDataset,
    batch: &GroupedBatch,
    cfg: &TrainConfig,
    state: &mut TrainState,
    lr: f64,
) -> Result<StepMetrics> {
    if batch.indices.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let b = batch.indices.len();
    let d = data.dim;
    let mut x = Vec::with_capacity(b * d);
    let mut labels = Vec::with_capacity(b);
    let mut groups = Vec::with_capacity(b);
    for &i in &batch.indices {
        x.extend_from_slice(&data.features[i * d..(i + 1) * d]);
        labels.push(data.labels[i]);
        groups.push(data.groups[i]);
    }

    let forwards_before = model.forward_count();
    let mut tape = Tape::new();
    let xt = tape.constant(&[b, d], x)?;
    let handles = model.forward(&mut tape, xt)?;
    let losses = tape.cross_entropy_per_sample(handles.logits, &labels)?;

    let num_groups = data.num_groups();
    let weights = if matches!(cfg.kind, FormulationKind::Nft) {
        vec![1.0 / b as f64; b]
    } else {
        let obs_kind = cfg.kind.observation_kind();
        let observations: Vec<f64> = match obs_kind {
            crate::buffer::ObservationKind::Accuracy => {
                let logits = tape.values(handles.logits);
                per_sample_accuracy(logits, data.num_classes, &labels)?
                    .into_iter()
                    .map(|a| if a { 1.0 } else { 0.0 })
                    .collect()
            }
            crate::buffer::ObservationKind::Loss => tape.values(losses).to_vec(),
        };
        let estimates = if cfg.use_buffers {
            let bufset = state
                .buffers
                .get_or_insert_with(|| BufferSet::new(num_groups, cfg.buffer_size, obs_kind));
            bufset.push(&observations, &groups)?;
            GroupEstimates::from_buffers(bufset)
        } else {
            GroupEstimates::from_batch(obs_kind, &observations, &groups, num_groups)
        };
        let v = violations(&cfg.kind, &estimates, state.baseline.as_ref())?;
        // Dual ascent first; the primal step uses the updated multipliers.
        dual_ascent_step(&mut state.dual, &v.values, &DualConfig { lr: cfg.dual_lr }, &cfg.kind)?;
        surrogate_weights(&cfg.kind, &groups, num_groups, &state.dual.lambda, v.extremal)?
    };

    let objective = tape.weighted_sum(losses, &weights)?;
    let mut grads = tape.backward(objective)?;
    let layer_grads: Vec<(Vec<f64>, Vec<f64>)> = handles
        .params
        .iter()
        .zip(&model.layers)
        .map(|(&(w, bias), layer)| {
            (
                grads.take(w).unwrap_or_else(|| vec![0.0; layer.numel()]),
                grads.take(bias).unwrap_or_else(|| vec![0.0; layer.out_dim]),
            )
        })
        .collect();
    sgd_step(model, &layer_grads, state, &cfg.sgd, lr)?;

    state.forward_passes += model.forward_count() - forwards_before;
    state.backward_passes += tape.backward_count;
    state.step += 1;

    let mean_loss = tape.values(losses).iter().sum::<f64>() / b as f64;
    let max_multiplier = state.dual.lambda.iter().cloned().fold(0.0, f64::max);
    Ok(StepMetrics {
        mean_loss,
        max_multiplier,
    })
}

/// Per-split evaluation results for one epoch.
#[derive(Debug, Clone)]
pub struct SplitMetrics {
    pub stats: GroupStats,
    pub report: Option<DisparityReport>,
}

/// Everything recorded about one training epoch.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub sparsity: f64,
    pub lambda: Vec<f64>,
    pub train: SplitMetrics,
    pub test: Option<SplitMetrics>,
    /// Wall-clock seconds spent on the epoch's training steps (not recorded
    /// in metrics files; used for overhead instrumentation).
    pub seconds: f64,
}

/// Run (or resume) a training loop: optional GMP step at each pruning-epoch
/// start, one full epoch of Alt-GDA steps over seeded-shuffled batches,
/// exact per-epoch evaluation.
///
/// `dense` supplies the frozen baseline; when absent (dense pretraining)
/// no disparity reports are produced. The hook observes every finished
/// epoch and may snapshot the model.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    model: &mut MaskedMlp,
    dense: Option<&MaskedMlp>,
    train: &GroupedDataset,
    test: Option<&GroupedDataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    eval_test_each_epoch: bool,
    mut epoch_hook: impl FnMut(usize, &MaskedMlp, &EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if let Some(gmp) = &cfg.gmp {
        gmp.validate()?;
        if cfg.total_epochs <= gmp.end_epoch {
            return Err(Error::Config(format!(
                "total_epochs {} must exceed the last pruning epoch {}",
                cfg.total_epochs, gmp.end_epoch
            )));
        }
    }
    if !matches!(cfg.kind, FormulationKind::Nft) && dense.is_none() && state.baseline.is_none() {
        return Err(Error::State(
            "constrained formulations require a dense baseline model".into(),
        ));
    }
    // Dense baseline over the full training split, once, before any step.
    if state.baseline.is_none() {
        if let Some(dense) = dense {
            state.baseline = Some(snapshot_baseline(dense, train)?);
        }
    }
    let dense_train_stats = match dense {
        Some(m) => Some(dataset_group_stats(m, train)?),
        None => None,
    };
    let dense_test_stats = match (dense, test) {
        (Some(m), Some(t)) => Some(dataset_group_stats(m, t)?),
        _ => None,
    };

    let mut records = Vec::new();
    while state.epoch < cfg.total_epochs {
        let epoch = state.epoch;
        if let Some(gmp) = &cfg.gmp {
            if gmp.is_pruning_epoch(epoch) {
                apply_gmp_step(model, gmp, epoch)?;
            }
        }
        let lr = lr_at_epoch(&cfg.lr_schedule, epoch, cfg.total_epochs);
        let started = Instant::now();
        for batch in iterate_batches(train, cfg.batch_size, state.seed, epoch) {
            altgda_step(model, train, &batch, cfg, state, lr)?;
        }
        let seconds = started.elapsed().as_secs_f64();

        let train_stats = dataset_group_stats(model, train)?;
        let train_report = match &dense_train_stats {
            Some(d) => Some(accuracy_gaps(d, &train_stats)?),
            None => None,
        };
        let is_last = epoch + 1 == cfg.total_epochs;
        let test_metrics = match (test, eval_test_each_epoch || is_last) {
            (Some(t), true) => {
                let stats = dataset_group_stats(model, t)?;
                let report = match &dense_test_stats {
                    Some(d) => Some(accuracy_gaps(d, &stats)?),
                    None => None,
                };
                Some(SplitMetrics { stats, report })
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            sparsity: model.prunable_sparsity(),
            lambda: state.dual.lambda.clone(),
            train: SplitMetrics {
                stats: train_stats,
                report: train_report,
            },
            test: test_metrics,
            seconds,
        };
        epoch_hook(epoch, model, &record);
        records.push(record);
        state.epoch += 1;
    }
    Ok(records)
}
