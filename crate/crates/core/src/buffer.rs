//! Per-group fixed-capacity FIFOs of recent per-sample observations, and the
//! buffer-based EAG estimator that feeds dual updates.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::BaselineSnapshot;

/// What a buffer stores: per-sample accuracies (0/1) or per-sample losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ObservationKind {
    Accuracy,
    Loss,
}

/// FIFO of the `capacity` most recent observations for one group.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GroupBuffer {
    pub capacity: usize,
    entries: VecDeque<f64>,
}

impl GroupBuffer {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn push(&mut self, value: f64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(value);
    }

    /// Contents in arrival order (oldest first).
    pub fn contents(&self) -> Vec<f64> {
        self.entries.iter().cloned().collect()
    }

    pub fn mean(&self) -> f64 {
        self.entries.iter().sum::<f64>() / self.entries.len() as f64
    }
}

/// One buffer per group, all with the same capacity and observation kind.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BufferSet {
    pub kind: ObservationKind,
    pub capacity: usize,
    buffers: Vec<GroupBuffer>,
}

impl BufferSet {
    pub fn new(num_groups: usize, capacity: usize, kind: ObservationKind) -> Self {
        assert!(capacity >= 1, "buffer capacity must be positive");
        Self {
            kind,
            capacity,
            buffers: (0..num_groups).map(|_| GroupBuffer::new(capacity)).collect(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.buffers.len()
    }

    pub fn buffer(&self, g: usize) -> &GroupBuffer {
        &self.buffers[g]
    }

    /// Append each sample's value to its group's FIFO in batch order.
    pub fn push(&mut self, per_sample_values: &[f64], groups: &[usize]) -> Result<()> {
        if per_sample_values.len() != groups.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} group ids",
                per_sample_values.len(),
                groups.len()
            )));
        }
        for (&v, &g) in per_sample_values.iter().zip(groups) {
            let buf = self
                .buffers
                .get_mut(g)
                .ok_or_else(|| Error::Index(format!("unknown group id {}", g)))?;
            buf.push(v);
        }
        Ok(())
    }

    /// Buffer-based EAG estimates.
    ///
    /// For each *full* buffer g: A_sparse^g is the mean of its entries and
    /// the aggregate A_sparse is the unweighted mean over full buffers only;
    /// psi_g = (A_dense^g - A_sparse^g) - (A_dense - A_sparse), so a group
    /// that degraded more than average gets a positive estimate. Non-full
    /// buffers get psi_g = 0, as does everything when no buffer is full.
    pub fn query_eag(&self, baseline: &BaselineSnapshot) -> Vec<f64> {
        let num_groups = self.num_groups();
        let mut psi = vec![0.0; num_groups];
        let full: Vec<usize> = (0..num_groups).filter(|&g| self.buffers[g].is_full()).collect();
        if full.is_empty() {
            return psi;
        }
        let group_means: Vec<f64> = full.iter().map(|&g| self.buffers[g].mean()).collect();
        let sparse_aggregate = group_means.iter().sum::<f64>() / group_means.len() as f64;
        for (&g, &mean_g) in full.iter().zip(&group_means) {
            psi[g] = (baseline.group_accuracy[g] - mean_g)
                - (baseline.aggregate_accuracy - sparse_aggregate);
        }
        psi
    }

    /// Per-group buffer means plus a per-group full flag, so formulations
    /// can zero the violations of groups whose buffers are not yet full.
    pub fn query_group_means(&self) -> (Vec<f64>, Vec<bool>) {
        let mut means = vec![0.0; self.num_groups()];
        let mut full = vec![false; self.num_groups()];
        for (g, buf) in self.buffers.iter().enumerate() {
            if buf.is_full() {
                means[g] = buf.mean();
                full[g] = true;
            }
        }
        (means, full)
    }
}
