//! The constrained-formulation catalog.
//!
//! Each formulation defines its dual dimensionality, multiplier projection
//! rule, non-differentiable violation estimator (fed by replay buffers or
//! batch statistics) and the differentiable primal surrogate, realized as
//! per-sample loss weights.

use crate::buffer::{BufferSet, ObservationKind};
use crate::error::{Error, Result};
use crate::model::BaselineSnapshot;

/// Mitigation scheme used during sparse fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum FormulationKind {
    /// Naive fine-tuning: no constraints.
    Nft,
    /// Constrained excess accuracy gaps: psi_g <= epsilon per group.
    Ceag { epsilon: f64 },
    /// Equalized loss: L_g - L = 0 per group (equality constraints).
    El,
    /// Constrained excess loss gaps: loss-gap analog of CEAG.
    Celg { epsilon: f64 },
    /// Single constraint on the pairwise disparity spread.
    Pw { epsilon: f64 },
    /// Upper and lower bound on every psi_g: |psi_g| <= epsilon.
    TwoSided { epsilon: f64 },
}

impl FormulationKind {
    pub fn parse(name: &str, epsilon: f64) -> Result<Self> {
        match name {
            "nft" => Ok(Self::Nft),
            "ceag" => Ok(Self::Ceag { epsilon }),
            "el" => Ok(Self::El),
            "celg" => Ok(Self::Celg { epsilon }),
            "pw" => Ok(Self::Pw { epsilon }),
            "two_sided" => Ok(Self::TwoSided { epsilon }),
            other => Err(Error::Config(format!(
                "unknown formulation '{}'; expected one of nft, ceag, el, celg, pw, two_sided",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Nft => "nft",
            Self::Ceag { .. } => "ceag",
            Self::El => "el",
            Self::Celg { .. } => "celg",
            Self::Pw { .. } => "pw",
            Self::TwoSided { .. } => "two_sided",
        }
    }

    /// Number of Lagrange multipliers.
    pub fn dual_dim(&self, num_groups: usize) -> usize {
        match self {
            Self::Nft => 0,
            Self::Ceag { .. } | Self::El | Self::Celg { .. } => num_groups,
            Self::Pw { .. } => 1,
            Self::TwoSided { .. } => 2 * num_groups,
        }
    }

    /// What the constraint estimator observes.
    pub fn observation_kind(&self) -> ObservationKind {
        match self {
            Self::El | Self::Celg { .. } => ObservationKind::Loss,
            _ => ObservationKind::Accuracy,
        }
    }

    /// Equality-constrained formulations leave multipliers unprojected.
    pub fn has_equality_duals(&self) -> bool {
        matches!(self, Self::El)
    }
}

/// Lagrange multipliers, initialized to zero.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DualState {
    pub lambda: Vec<f64>,
}

impl DualState {
    pub fn new(kind: &FormulationKind, num_groups: usize) -> Self {
        Self {
            lambda: vec![0.0; kind.dual_dim(num_groups)],
        }
    }
}

/// Clip inequality multipliers at zero; equality multipliers pass through.
pub fn project_duals(kind: &FormulationKind, lambda: &mut [f64]) {
    if kind.has_equality_duals() {
        return;
    }
    for l in lambda.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
}

/// Per-group sparse-model statistics available to the dual player, from
/// replay buffers or from the current batch.
#[derive(Debug, Clone)]
pub struct GroupEstimates {
    pub kind: ObservationKind,
    /// Per-group mean observation; meaningful only where `available`.
    pub means: Vec<f64>,
    pub available: Vec<bool>,
}

impl GroupEstimates {
    pub fn from_buffers(bufset: &BufferSet) -> Self {
        let (means, available) = bufset.query_group_means();
        Self {
            kind: bufset.kind,
            means,
            available,
        }
    }

    /// Batch-level estimates: per-group means of the given per-sample
    /// values; groups absent from the batch are unavailable.
    pub fn from_batch(
        kind: ObservationKind,
        per_sample_values: &[f64],
        groups: &[usize],
        num_groups: usize,
    ) -> Self {
        let mut sums = vec![0.0; num_groups];
        let mut counts = vec![0usize; num_groups];
        for (&v, &g) in per_sample_values.iter().zip(groups) {
            sums[g] += v;
            counts[g] += 1;
        }
        let means = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        Self {
            kind,
            means,
            available: counts.iter().map(|&c| c > 0).collect(),
        }
    }

    fn available_groups(&self) -> Vec<usize> {
        (0..self.means.len()).filter(|&g| self.available[g]).collect()
    }

    /// Unweighted mean of the available group means, mirroring the
    /// buffer-query aggregate convention. None when nothing is available.
    fn balanced_aggregate(&self) -> Option<f64> {
        let avail = self.available_groups();
        if avail.is_empty() {
            return None;
        }
        Some(avail.iter().map(|&g| self.means[g]).sum::<f64>() / avail.len() as f64)
    }

    /// EAG estimates psi_g, degradation-positive; zero for unavailable
    /// groups.
    pub fn eag(&self, baseline: &BaselineSnapshot) -> Vec<f64> {
        let mut psi = vec![0.0; self.means.len()];
        let Some(agg) = self.balanced_aggregate() else {
            return psi;
        };
        for g in self.available_groups() {
            psi[g] = (baseline.group_accuracy[g] - self.means[g]) - (baseline.aggregate_accuracy - agg);
        }
        psi
    }
}

/// Non-differentiable constraint values plus auxiliary surrogate routing.
#[derive(Debug, Clone)]
pub struct ViolationVector {
    /// One value per constraint; the dual ascent direction.
    pub values: Vec<f64>,
    /// For the pairwise formulation: (most degraded, least degraded) group.
    pub extremal: Option<(usize, usize)>,
}

/// Constraint values used by the dual player.
pub fn violations(
    kind: &FormulationKind,
    estimates: &GroupEstimates,
    baseline: Option<&BaselineSnapshot>,
) -> Result<ViolationVector> {
    let need_baseline = !matches!(kind, FormulationKind::Nft | FormulationKind::El);
    let baseline = match (need_baseline, baseline) {
        (true, None) => {
            return Err(Error::State(
                "dense baseline snapshot required before computing violations".into(),
            ))
        }
        (_, b) => b,
    };
    if estimates.kind != kind.observation_kind() {
        return Err(Error::State(format!(
            "{:?} estimates fed to {} formulation",
            estimates.kind,
            kind.name()
        )));
    }
    let num_groups = estimates.means.len();
    match kind {
        FormulationKind::Nft => Ok(ViolationVector {
            values: vec![],
            extremal: None,
        }),
        FormulationKind::Ceag { epsilon } => {
            let psi = estimates.eag(baseline.unwrap());
            Ok(ViolationVector {
                values: psi.iter().map(|p| p - epsilon).collect(),
                extremal: None,
            })
        }
        FormulationKind::El => {
            let mut values = vec![0.0; num_groups];
            if let Some(agg) = estimates.balanced_aggregate() {
                for g in estimates.available_groups() {
                    values[g] = estimates.means[g] - agg;
                }
            }
            Ok(ViolationVector {
                values,
                extremal: None,
            })
        }
        FormulationKind::Celg { epsilon } => {
            let baseline = baseline.unwrap();
            let mut values = vec![-epsilon; num_groups];
            if let Some(agg) = estimates.balanced_aggregate() {
                for g in estimates.available_groups() {
                    // Excess loss gap with dense-loss constants.
                    let tilde_psi = (estimates.means[g] - baseline.group_loss[g])
                        - (agg - baseline.aggregate_loss);
                    values[g] = tilde_psi - epsilon;
                }
            }
            Ok(ViolationVector {
                values,
                extremal: None,
            })
        }
        FormulationKind::Pw { epsilon } => {
            let baseline = baseline.unwrap();
            let avail = estimates.available_groups();
            let mut spread = 0.0;
            let mut extremal = None;
            if !avail.is_empty() {
                // Per-group accuracy gaps of the sparse model.
                let gaps: Vec<(usize, f64)> = avail
                    .iter()
                    .map(|&g| (g, baseline.group_accuracy[g] - estimates.means[g]))
                    .collect();
                let (gmax, dmax) = gaps
                    .iter()
                    .cloned()
                    .fold((gaps[0].0, f64::NEG_INFINITY), |acc, (g, d)| {
                        if d > acc.1 {
                            (g, d)
                        } else {
                            acc
                        }
                    });
                let (gmin, dmin) = gaps
                    .iter()
                    .cloned()
                    .fold((gaps[0].0, f64::INFINITY), |acc, (g, d)| {
                        if d < acc.1 {
                            (g, d)
                        } else {
                            acc
                        }
                    });
                spread = dmax - dmin;
                extremal = Some((gmax, gmin));
            }
            Ok(ViolationVector {
                values: vec![spread - epsilon],
                extremal,
            })
        }
        FormulationKind::TwoSided { epsilon } => {
            let psi = estimates.eag(baseline.unwrap());
            let mut values = Vec::with_capacity(2 * num_groups);
            values.extend(psi.iter().map(|p| p - epsilon));
            values.extend(psi.iter().map(|p| -p - epsilon));
            Ok(ViolationVector {
                values,
                extremal: None,
            })
        }
    }
}

/// Net surrogate coefficient per group: the penalty is
/// sum_g coef_g * (L_batch_g - L_batch), with dense constants dropped
/// (they carry no gradient).
fn surrogate_coefficients(
    kind: &FormulationKind,
    num_groups: usize,
    lambda: &[f64],
    extremal: Option<(usize, usize)>,
) -> Vec<f64> {
    let mut coef = vec![0.0; num_groups];
    match kind {
        FormulationKind::Nft => {}
        FormulationKind::Ceag { .. } | FormulationKind::El | FormulationKind::Celg { .. } => {
            coef.copy_from_slice(lambda);
        }
        FormulationKind::TwoSided { .. } => {
            for g in 0..num_groups {
                coef[g] = lambda[g] - lambda[num_groups + g];
            }
        }
        FormulationKind::Pw { .. } => {
            if let Some((gmax, gmin)) = extremal {
                coef[gmax] += lambda[0];
                coef[gmin] -= lambda[0];
                // gmax == gmin leaves a zero net coefficient, as it should.
            }
        }
    }
    coef
}

/// Per-sample weights realizing `L + sum_g coef_g * (L_g - L)` as a single
/// weighted sum of the per-sample losses:
/// w_i = (1 - sum_{g in batch} coef_g) / B + coef_{g(i)} / B_{g(i)}.
/// Groups absent from the batch contribute nothing.
pub fn surrogate_weights(
    kind: &FormulationKind,
    groups: &[usize],
    num_groups: usize,
    lambda: &[f64],
    extremal: Option<(usize, usize)>,
) -> Result<Vec<f64>> {
    if lambda.len() != kind.dual_dim(num_groups) {
        return Err(Error::Dimension(format!(
            "{} multipliers for {} formulation with {} groups",
            lambda.len(),
            kind.name(),
            num_groups
        )));
    }
    let batch = groups.len();
    let coef = surrogate_coefficients(kind, num_groups, lambda, extremal);
    let mut counts = vec![0usize; num_groups];
    for &g in groups {
        counts[g] += 1;
    }
    let present_sum: f64 = (0..num_groups)
        .filter(|&g| counts[g] > 0)
        .map(|g| coef[g])
        .sum();
    let base = (1.0 - present_sum) / batch as f64;
    Ok(groups
        .iter()
        .map(|&g| base + coef[g] / counts[g] as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    fn baseline(acc: Vec<f64>, agg: f64, loss: Vec<f64>, agg_loss: f64) -> BaselineSnapshot {
        let g = acc.len();
        BaselineSnapshot {
            group_accuracy: acc,
            aggregate_accuracy: agg,
            group_loss: loss,
            aggregate_loss: agg_loss,
            group_sizes: vec![1; g],
        }
    }

    fn acc_estimates(means: Vec<f64>, available: Vec<bool>) -> GroupEstimates {
        GroupEstimates {
            kind: ObservationKind::Accuracy,
            means,
            available,
        }
    }

    #[test]
    fn parse_and_names_round_trip() {
        for name in ["nft", "ceag", "el", "celg", "pw", "two_sided"] {
            let kind = FormulationKind::parse(name, 0.02).unwrap();
            assert_eq!(kind.name(), name);
        }
        assert!(FormulationKind::parse("erm", 0.0).is_err());
    }

    #[test]
    fn dual_dims() {
        let g = 5;
        assert_eq!(FormulationKind::Nft.dual_dim(g), 0);
        assert_eq!(FormulationKind::Ceag { epsilon: 0.01 }.dual_dim(g), 5);
        assert_eq!(FormulationKind::El.dual_dim(g), 5);
        assert_eq!(FormulationKind::Celg { epsilon: 0.01 }.dual_dim(g), 5);
        assert_eq!(FormulationKind::Pw { epsilon: 0.01 }.dual_dim(g), 1);
        assert_eq!(FormulationKind::TwoSided { epsilon: 0.01 }.dual_dim(g), 10);
    }

    #[test]
    fn projection_clips_inequality_duals_only() {
        let mut l = vec![-0.3, 0.2];
        project_duals(&FormulationKind::Ceag { epsilon: 0.0 }, &mut l);
        assert_eq!(l, vec![0.0, 0.2]);

        let mut l = vec![-0.3, 0.2];
        project_duals(&FormulationKind::El, &mut l);
        assert_eq!(l, vec![-0.3, 0.2]);

        let mut l = vec![0.0, 0.0];
        project_duals(&FormulationKind::Ceag { epsilon: 0.0 }, &mut l);
        assert_eq!(l, vec![0.0, 0.0]);
    }

    #[test]
    fn ceag_violation_hand_example() {
        // psi = (-0.2, 0.2), eps = 0.01 -> c = (-0.21, 0.19): the dual only
        // pressures group 1, which degraded more than average.
        let base = baseline(vec![0.9, 0.8], 0.85, vec![0.0; 2], 0.0);
        let est = acc_estimates(vec![1.0, 0.5], vec![true, true]);
        let v = violations(&FormulationKind::Ceag { epsilon: 0.01 }, &est, Some(&base)).unwrap();
        assert!((v.values[0] + 0.21).abs() < 1e-12);
        assert!((v.values[1] - 0.19).abs() < 1e-12);
    }

    #[test]
    fn ceag_without_estimates_sits_at_minus_epsilon() {
        let base = baseline(vec![0.9, 0.8], 0.85, vec![0.0; 2], 0.0);
        let est = acc_estimates(vec![0.0, 0.0], vec![false, false]);
        let v = violations(&FormulationKind::Ceag { epsilon: 0.02 }, &est, Some(&base)).unwrap();
        assert_eq!(v.values, vec![-0.02, -0.02]);
    }

    #[test]
    fn el_feasible_point_has_zero_violations() {
        let est = GroupEstimates {
            kind: ObservationKind::Loss,
            means: vec![0.4, 0.4, 0.4],
            available: vec![true, true, true],
        };
        let v = violations(&FormulationKind::El, &est, None).unwrap();
        assert!(v.values.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn el_violations_are_signed_loss_gaps() {
        let est = GroupEstimates {
            kind: ObservationKind::Loss,
            means: vec![0.6, 0.2],
            available: vec![true, true],
        };
        let v = violations(&FormulationKind::El, &est, None).unwrap();
        assert!((v.values[0] - 0.2).abs() < 1e-12);
        assert!((v.values[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn celg_uses_dense_loss_constants() {
        let base = baseline(vec![0.0; 2], 0.0, vec![0.5, 0.3], 0.4);
        let est = GroupEstimates {
            kind: ObservationKind::Loss,
            means: vec![0.9, 0.5],
            available: vec![true, true],
        };
        // agg = 0.7; tilde_psi = (0.9-0.5)-(0.7-0.4)=0.1 and (0.5-0.3)-0.3=-0.1
        let v = violations(&FormulationKind::Celg { epsilon: 0.02 }, &est, Some(&base)).unwrap();
        assert!((v.values[0] - 0.08).abs() < 1e-12);
        assert!((v.values[1] + 0.12).abs() < 1e-12);
    }

    #[test]
    fn two_sided_interior_point() {
        let base = baseline(vec![0.9, 0.8], 0.85, vec![0.0; 2], 0.0);
        // means matching the baseline convention give psi = 0.
        let est = acc_estimates(vec![0.9, 0.8], vec![true, true]);
        let v =
            violations(&FormulationKind::TwoSided { epsilon: 0.05 }, &est, Some(&base)).unwrap();
        assert_eq!(v.values.len(), 4);
        assert!(v.values.iter().all(|c| (c + 0.05).abs() < 1e-12));
    }

    #[test]
    fn pw_violation_finds_extremal_groups() {
        let base = baseline(vec![0.9, 0.8, 0.7], 0.8, vec![0.0; 3], 0.0);
        let est = acc_estimates(vec![0.8, 0.75, 0.7], vec![true, true, true]);
        // gaps (0.1, 0.05, 0.0): spread 0.1, extremal (0, 2)
        let v = violations(&FormulationKind::Pw { epsilon: 0.02 }, &est, Some(&base)).unwrap();
        assert!((v.values[0] - 0.08).abs() < 1e-12);
        assert_eq!(v.extremal, Some((0, 2)));
    }

    #[test]
    fn missing_baseline_and_kind_mismatch_are_errors() {
        let est = acc_estimates(vec![0.5], vec![true]);
        assert!(violations(&FormulationKind::Ceag { epsilon: 0.0 }, &est, None).is_err());
        let base = baseline(vec![0.5], 0.5, vec![0.0], 0.0);
        assert!(violations(&FormulationKind::Celg { epsilon: 0.0 }, &est, Some(&base)).is_err());
    }

    #[test]
    fn zero_multipliers_give_uniform_weights() {
        let kind = FormulationKind::Ceag { epsilon: 0.01 };
        let w = surrogate_weights(&kind, &[0, 1, 0, 1], 2, &[0.0, 0.0], None).unwrap();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn nft_weights_are_uniform() {
        let w = surrogate_weights(&FormulationKind::Nft, &[0, 1, 2], 3, &[], None).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn closed_form_two_group_example() {
        // Two equal-size groups, lambda = (1, 0): base weight (1-1)/B = 0;
        // group-0 samples get 1/B_0 = 0.5, group-1 samples get 0.
        let kind = FormulationKind::Ceag { epsilon: 0.0 };
        let w = surrogate_weights(&kind, &[0, 0, 1, 1], 2, &[1.0, 0.0], None).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn single_group_batch_reduces_to_plain_mean() {
        // With one group present, L_g == L so the penalty vanishes and the
        // weights collapse to 1/B regardless of that group's multiplier.
        let kind = FormulationKind::Ceag { epsilon: 0.0 };
        let w = surrogate_weights(&kind, &[1, 1, 1], 2, &[0.7, 0.4], None).unwrap();
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn absent_group_multiplier_is_inert() {
        let kind = FormulationKind::Ceag { epsilon: 0.0 };
        let with = surrogate_weights(&kind, &[0, 0, 1], 3, &[0.3, 0.2, 9.9], None).unwrap();
        let without = surrogate_weights(&kind, &[0, 0, 1], 3, &[0.3, 0.2, 0.0], None).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn dual_dimension_mismatch_is_an_error() {
        let kind = FormulationKind::Ceag { epsilon: 0.0 };
        assert!(surrogate_weights(&kind, &[0, 1], 2, &[0.1], None).is_err());
    }

    #[test]
    fn two_sided_effective_weight_is_multiplier_difference() {
        let groups = [0usize, 1, 0, 1, 1];
        let plus = [0.4, 0.1];
        let minus = [0.1, 0.3];
        let ts = surrogate_weights(
            &FormulationKind::TwoSided { epsilon: 0.0 },
            &groups,
            2,
            &[plus[0], plus[1], minus[0], minus[1]],
            None,
        )
        .unwrap();
        let net = surrogate_weights(
            &FormulationKind::Ceag { epsilon: 0.0 },
            &groups,
            2,
            &[plus[0] - minus[0], plus[1] - minus[1]],
            None,
        )
        .unwrap();
        for (a, b) in ts.iter().zip(&net) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pw_weights_touch_only_extremal_groups() {
        let kind = FormulationKind::Pw { epsilon: 0.0 };
        let groups = [0usize, 1, 2, 0, 2];
        let w = surrogate_weights(&kind, &groups, 3, &[0.6], Some((0, 2))).unwrap();
        // base = (1 - (0.6 - 0.6))/5 = 0.2; group 0 adds 0.6/2, group 2
        // subtracts 0.6/2, group 1 stays at base.
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert!((w[1] - 0.2).abs() < 1e-12);
        assert!((w[2] + 0.1).abs() < 1e-12);
        assert!((w[3] - 0.5).abs() < 1e-12);
        assert!((w[4] + 0.1).abs() < 1e-12);
    }

    /// Gradient of L + sum_g lambda_g (L_g - L) built term by term on the
    /// tape (independent graph structure), evaluated on leaf `losses`.
    fn unfactored_gradient(losses: &[f64], groups: &[usize], lambda: &[f64]) -> Vec<f64> {
        let b = losses.len();
        let num_groups = lambda.len();
        let mut tape = Tape::new();
        let v = tape.leaf(&[b], losses.to_vec(), true).unwrap();
        let l = tape.weighted_sum(v, &vec![1.0 / b as f64; b]).unwrap();
        let mut counts = vec![0usize; num_groups];
        for &g in groups {
            counts[g] += 1;
        }
        let neg_one = tape.constant(&[1], vec![-1.0]).unwrap();
        let neg_l = tape.mul(l, neg_one).unwrap();
        let mut total = l;
        for g in 0..num_groups {
            if counts[g] == 0 {
                continue;
            }
            let indicator: Vec<f64> = groups
                .iter()
                .map(|&gi| if gi == g { 1.0 / counts[g] as f64 } else { 0.0 })
                .collect();
            let lg = tape.weighted_sum(v, &indicator).unwrap();
            let diff = tape.add(lg, neg_l).unwrap();
            let lam = tape.constant(&[1], vec![lambda[g]]).unwrap();
            let scaled = tape.mul(diff, lam).unwrap();
            total = tape.add(total, scaled).unwrap();
        }
        let mut grads = tape.backward(total).unwrap();
        grads.take(v).unwrap()
    }

    proptest! {
        #[test]
        fn weighted_path_matches_unfactored_gradient(
            rows in proptest::collection::vec((0.01f64..5.0, 0usize..3), 1..20),
            lambda in proptest::collection::vec(0.0f64..2.0, 3),
        ) {
            let losses: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let groups: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let kind = FormulationKind::Ceag { epsilon: 0.0 };
            let w = surrogate_weights(&kind, &groups, 3, &lambda, None).unwrap();

            let mut tape = Tape::new();
            let v = tape.leaf(&[losses.len()], losses.clone(), true).unwrap();
            let s = tape.weighted_sum(v, &w).unwrap();
            let mut grads = tape.backward(s).unwrap();
            let factored = grads.take(v).unwrap();

            let reference = unfactored_gradient(&losses, &groups, &lambda);
            for (a, b) in factored.iter().zip(&reference) {
                prop_assert!((a - b).abs() < 1e-10, "factored {} vs reference {}", a, b);
            }
        }

        #[test]
        fn el_weighted_path_matches_with_signed_multipliers(
            rows in proptest::collection::vec((0.01f64..5.0, 0usize..2), 2..15),
            lambda in proptest::collection::vec(-1.5f64..1.5, 2),
        ) {
            let losses: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let groups: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let w = surrogate_weights(&FormulationKind::El, &groups, 2, &lambda, None).unwrap();

            let mut tape = Tape::new();
            let v = tape.leaf(&[losses.len()], losses.clone(), true).unwrap();
            let s = tape.weighted_sum(v, &w).unwrap();
            let mut grads = tape.backward(s).unwrap();
            let factored = grads.take(v).unwrap();

            let reference = unfactored_gradient(&losses, &groups, &lambda);
            for (a, b) in factored.iter().zip(&reference) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn surrogate_weights_sum_to_one(
            rows in proptest::collection::vec(0usize..4, 1..30),
            lambda in proptest::collection::vec(0.0f64..3.0, 4),
        ) {
            let kind = FormulationKind::Ceag { epsilon: 0.0 };
            let w = surrogate_weights(&kind, &rows, 4, &lambda, None).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-10);
        }
    }
}
