//! Masked multilayer perceptron classifiers.
//!
//! Every forward pass applies the layer mask (`W .* M`), so pruned weights
//! never contribute. Biases are never masked, and the first and last layers
//! are never prunable.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::GroupedDataset;
use crate::error::{Error, Result};

/// Architecture description of a [`MaskedMlp`]. Hidden activations are relu.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config(
                "at least one hidden layer is required (no prunable layer otherwise)".into(),
            ));
        }
        if self.hidden_dims.len() < 2 {
            // A single hidden layer yields two affine layers, both excluded
            // from pruning.
            return Err(Error::Config(
                "at least two hidden layers are required so that an interior prunable layer exists"
                    .into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden dims must be positive".into()));
        }
        Ok(())
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((h, prev));
            prev = h;
        }
        dims.push((self.num_classes, prev));
        dims
    }
}

/// One affine layer: `out x in` weights, length-`out` bias, binary mask.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Layer {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major out x in.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Entries in {0, 1}; same layout as `weights`.
    pub mask: Vec<u8>,
    pub prunable: bool,
}

impl Layer {
    pub fn numel(&self) -> usize {
        self.out_dim * self.in_dim
    }

    /// Fraction of masked-out weight entries.
    pub fn sparsity(&self) -> f64 {
        let zeros = self.mask.iter().filter(|&&m| m == 0).count();
        zeros as f64 / self.numel() as f64
    }
}

/// Layered classifier with per-layer binary weight masks.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MaskedMlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    #[serde(skip)]
    forward_count: Cell<u64>,
}

/// Leaf handles for one forward pass, used to read parameter gradients.
pub struct ForwardHandles {
    pub logits: Tensor,
    /// (weight leaf, bias leaf) per layer, in layer order.
    pub params: Vec<(Tensor, Tensor)>,
}

/// Dense-model reference statistics, computed once per fine-tuning run
/// over the full training split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BaselineSnapshot {
    pub group_accuracy: Vec<f64>,
    pub aggregate_accuracy: f64,
    pub group_loss: Vec<f64>,
    pub aggregate_loss: f64,
    pub group_sizes: Vec<usize>,
}

impl MaskedMlp {
    /// Initialize with uniform +-sqrt(6/fan_in) weights, zero biases and
    /// all-ones masks. Deterministic given the seed.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = spec.layer_dims();
        let last = dims.len() - 1;
        let mut layers = Vec::with_capacity(dims.len());
        for (idx, (out_dim, in_dim)) in dims.into_iter().enumerate() {
            let bound = (6.0 / in_dim as f64).sqrt();
            let weights: Vec<f64> = (0..out_dim * in_dim)
                .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
                .collect();
            layers.push(Layer {
                out_dim,
                in_dim,
                weights,
                bias: vec![0.0; out_dim],
                mask: vec![1; out_dim * in_dim],
                prunable: idx != 0 && idx != last,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            forward_count: Cell::new(0),
        })
    }

    /// Forward passes executed so far (instrumentation).
    pub fn forward_count(&self) -> u64 {
        self.forward_count.get()
    }

    /// Masked forward pass. `x` must be a B x input_dim leaf on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<ForwardHandles> {
        let cols = match tape.shape(x) {
            s if s.len() == 2 => s[1],
            s => {
                return Err(Error::Dimension(format!(
                    "input must be rank 2, got shape {:?}",
                    s
                )))
            }
        };
        if cols != self.spec.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                cols, self.spec.input_dim
            )));
        }
        let mut params = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(
                &[layer.out_dim, layer.in_dim],
                layer.weights.clone(),
                true,
            )?;
            let b = tape.leaf(&[layer.out_dim], layer.bias.clone(), true)?;
            let m = tape.constant(
                &[layer.out_dim, layer.in_dim],
                layer.mask.iter().map(|&v| v as f64).collect(),
            )?;
            let masked = tape.mul(w, m)?;
            let wt = tape.transpose(masked)?;
            let z = tape.matmul(h, wt)?;
            let z = tape.add_bias(z, b)?;
            h = if idx == last { z } else { tape.relu(z)? };
            params.push((w, b));
        }
        self.forward_count.set(self.forward_count.get() + 1);
        Ok(ForwardHandles { logits: h, params })
    }

    /// Interior (prunable) layers as (layer index, layer) pairs, in order.
    pub fn prunable_layers(&self) -> Vec<(usize, &Layer)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.prunable)
            .collect()
    }

    pub fn prunable_layers_mut(&mut self) -> Vec<(usize, &mut Layer)> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter(|(_, l)| l.prunable)
            .collect()
    }

    /// Overall sparsity of the prunable weight entries.
    pub fn prunable_sparsity(&self) -> f64 {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for (_, l) in self.prunable_layers() {
            zeros += l.mask.iter().filter(|&&m| m == 0).count();
            total += l.numel();
        }
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }

    /// Re-apply masks so pruned weight entries are exactly zero.
    pub fn apply_masks(&mut self) {
        for layer in &mut self.layers {
            for (w, &m) in layer.weights.iter_mut().zip(&layer.mask) {
                if m == 0 {
                    *w = 0.0;
                }
            }
        }
    }

    /// Batched evaluation helper: logits for the given rows of a dataset.
    pub fn eval_logits(&self, data: &GroupedDataset, indices: &[usize]) -> Result<Vec<f64>> {
        let d = self.spec.input_dim;
        let mut x = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            x.extend_from_slice(&data.features[i * d..(i + 1) * d]);
        }
        let mut tape = Tape::new();
        let xt = tape.constant(&[indices.len(), d], x)?;
        let out = self.forward(&mut tape, xt)?;
        Ok(tape.values(out.logits).to_vec())
    }
}

/// Per-row argmax; ties broken by lowest class index.
pub fn predict_rows(logits: &[f64], num_classes: usize) -> Vec<usize> {
    assert!(num_classes >= 2);
    logits
        .chunks_exact(num_classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// 1{argmax == label} per row. No gradients flow through this.
pub fn per_sample_accuracy(logits: &[f64], num_classes: usize, labels: &[usize]) -> Result<Vec<bool>> {
    let preds = predict_rows(logits, num_classes);
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Index(format!(
                "label {} out of range for {} classes",
                y, num_classes
            )));
        }
    }
    Ok(preds.iter().zip(labels).map(|(p, y)| p == y).collect())
}

/// Exact full-pass dense-model statistics over `data`.
pub fn snapshot_baseline(model: &MaskedMlp, data: &GroupedDataset) -> Result<BaselineSnapshot> {
    let stats = crate::metrics::dataset_group_stats(model, data)?;
    Ok(BaselineSnapshot {
        group_accuracy: stats.group_accuracy,
        aggregate_accuracy: stats.aggregate_accuracy,
        group_loss: stats.group_loss,
        aggregate_loss: stats.aggregate_loss,
        group_sizes: stats.group_sizes,
    })
}
