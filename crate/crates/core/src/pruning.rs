//! Gradual magnitude pruning: cubic sparsity schedule and layer-wise
//! unstructured magnitude pruning.

use crate::error::{Error, Result};
use crate::model::{Layer, MaskedMlp};

/// Cubic sparsity schedule over the pruning phase.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GmpSchedule {
    /// Initial sparsity fraction in [0, 1).
    pub initial_sparsity: f64,
    /// Final sparsity fraction in (0, 1).
    pub final_sparsity: f64,
    /// First pruning epoch.
    pub start_epoch: usize,
    /// Last pruning epoch.
    pub end_epoch: usize,
    /// Pruning period in epochs.
    pub period: usize,
}

impl GmpSchedule {
    /// Reported defaults: prune once per epoch over the first 15 epochs,
    /// from dense to `final_sparsity`.
    pub fn standard(final_sparsity: f64) -> Self {
        Self {
            initial_sparsity: 0.0,
            final_sparsity,
            start_epoch: 0,
            end_epoch: 14,
            period: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.initial_sparsity) {
            return Err(Error::Config("initial sparsity must be in [0, 1)".into()));
        }
        if !(self.final_sparsity > 0.0 && self.final_sparsity < 1.0)
            && self.final_sparsity != 1.0
        {
            return Err(Error::Config("final sparsity must be in (0, 1]".into()));
        }
        if self.final_sparsity < self.initial_sparsity {
            return Err(Error::Config("final sparsity must be >= initial sparsity".into()));
        }
        if self.end_epoch < self.start_epoch {
            return Err(Error::Config("end epoch must be >= start epoch".into()));
        }
        if self.period == 0 {
            return Err(Error::Config("pruning period must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether a pruning step fires at `epoch`.
    pub fn is_pruning_epoch(&self, epoch: usize) -> bool {
        epoch >= self.start_epoch
            && epoch <= self.end_epoch
            && (epoch - self.start_epoch).is_multiple_of(self.period)
    }

    /// Target sparsity at pruning epoch `epoch`.
    ///
    /// s_t = s_f + (s_i - s_f) * (1 - (t - t0)/(T_end - t0))^3, with the
    /// single-shot case (T_end == t0) collapsing to s_f.
    pub fn sparsity_at_epoch(&self, epoch: usize) -> Result<f64> {
        if !self.is_pruning_epoch(epoch) {
            return Err(Error::Range(format!(
                "epoch {} is not a pruning epoch of [{}, {}] step {}",
                epoch, self.start_epoch, self.end_epoch, self.period
            )));
        }
        if self.end_epoch == self.start_epoch {
            return Ok(self.final_sparsity);
        }
        let frac = (epoch - self.start_epoch) as f64 / (self.end_epoch - self.start_epoch) as f64;
        Ok(self.final_sparsity + (self.initial_sparsity - self.final_sparsity) * (1.0 - frac).powi(3))
    }
}

/// round-half-away-from-zero of `x`.
fn round_half_away(x: f64) -> usize {
    x.abs().round() as usize
}

/// Prune `layer` to exactly `round(target * numel)` masked entries, removing
/// the smallest-magnitude surviving weights. Already-masked entries stay
/// masked; ties among equal magnitudes break toward the lowest flat index.
pub fn magnitude_prune_layer(layer: &mut Layer, target: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Range(format!("target sparsity {} outside [0, 1]", target)));
    }
    let numel = layer.numel();
    let target_zeros = round_half_away(target * numel as f64);
    let current_zeros = layer.mask.iter().filter(|&&m| m == 0).count();
    if target_zeros < current_zeros {
        return Err(Error::Monotonicity(format!(
            "target sparsity {:.4} is below current layer sparsity {:.4}",
            target,
            current_zeros as f64 / numel as f64
        )));
    }
    let need = target_zeros - current_zeros;
    if need == 0 {
        return Ok(());
    }
    // Rank surviving entries by (|w|, flat index).
    let mut survivors: Vec<usize> = (0..numel).filter(|&i| layer.mask[i] == 1).collect();
    survivors.sort_by(|&a, &b| {
        layer.weights[a]
            .abs()
            .partial_cmp(&layer.weights[b].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    for &i in survivors.iter().take(need) {
        layer.mask[i] = 0;
        layer.weights[i] = 0.0;
    }
    Ok(())
}

/// Prune every prunable layer of `model` to the schedule's sparsity at
/// `epoch`. Non-prunable layers are untouched.
pub fn apply_gmp_step(model: &mut MaskedMlp, sched: &GmpSchedule, epoch: usize) -> Result<()> {
    let target = sched.sparsity_at_epoch(epoch)?;
    for (_, layer) in model.prunable_layers_mut() {
        magnitude_prune_layer(layer, target)?;
    }
    Ok(())
}
