//! Minimal reverse-mode automatic differentiation over dense rank-<=2 tensors.
//!
//! A [`Tape`] owns every tensor created during a forward pass. Operations
//! record their inputs so that [`Tape::backward`] can replay them in exact
//! reverse order, accumulating gradients additively into every
//! `requires_grad` leaf.

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A * B
    MatMul(usize, usize),
    /// C = A^T
    Transpose(usize),
    /// C = A + B (same shape)
    Add(usize, usize),
    /// C[i][j] = A[i][j] + bias[j]
    AddBias(usize, usize),
    /// C = A .* B
    Mul(usize, usize),
    Relu(usize),
    /// Per-sample negative log-softmax of the true class.
    /// Caches the softmax probabilities for the backward pass.
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Scalar sum_i w_i * v_i.
    WeightedSum { values: usize, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}

fn check_finite(values: &[f64], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Execution record of a single forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Number of completed backward traversals.
    pub backward_count: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    /// Insert a leaf tensor. Leaves with `requires_grad` receive gradients
    /// from [`Tape::backward`].
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.len() > 2 {
            return Err(Error::Rank(format!("rank {} > 2", shape.len())));
        }
        if numel(shape) != values.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        check_finite(&values, "leaf")?;
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, values, false)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].values
    }

    /// Matrix product A[m x k] * B[k x n].
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka) = rows_cols(self.shape(a));
        let (kb, n) = rows_cols(self.shape(b));
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.values(a);
            let bv = self.values(b);
            for i in 0..m {
                for p in 0..ka {
                    let x = av[i * ka + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        check_finite(&out, "matmul")?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let (m, n) = rows_cols(self.shape(a));
        let av = self.values(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n, m], out, rg, Op::Transpose(a.0)))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        check_finite(&out, "add")?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::Add(a.0, b.0)))
    }

    /// Broadcast a length-n bias vector across the rows of an m x n tensor.
    pub fn add_bias(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let (m, n) = rows_cols(self.shape(a));
        if numel(self.shape(bias)) != n {
            return Err(Error::Dimension(format!(
                "bias length {} does not match {} columns",
                numel(self.shape(bias)),
                n
            )));
        }
        let bv = self.values(bias).to_vec();
        let mut out = self.values(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        check_finite(&out, "add_bias")?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[bias.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::AddBias(a.0, bias.0)))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        check_finite(&out, "mul")?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::Mul(a.0, b.0)))
    }

    /// Rectified linear unit. The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let out: Vec<f64> = self.values(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::Relu(a.0)))
    }

    /// Per-sample negative log-softmax of the true class, with
    /// max-subtraction for numerical stability.
    pub fn cross_entropy_per_sample(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let (b, k) = rows_cols(self.shape(logits));
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "{} labels for {} logit rows",
                labels.len(),
                b
            )));
        }
        let lv = self.values(logits);
        let mut losses = vec![0.0; b];
        let mut probs = vec![0.0; b * k];
        for i in 0..b {
            let y = labels[i];
            if y >= k {
                return Err(Error::Index(format!("label {} out of range for {} classes", y, k)));
            }
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                probs[i * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                probs[i * k + j] /= sum;
            }
            // loss = logsumexp - logit[y] = (m + ln sum) - logit[y]
            losses[i] = m + sum.ln() - row[y];
        }
        check_finite(&losses, "cross_entropy")?;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![b],
            losses,
            rg,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Scalar sum_i weights_i * values_i.
    pub fn weighted_sum(&mut self, values: Tensor, weights: &[f64]) -> Result<Tensor> {
        let n = numel(self.shape(values));
        if weights.len() != n {
            return Err(Error::Dimension(format!(
                "{} weights for {} values",
                weights.len(),
                n
            )));
        }
        check_finite(weights, "weighted_sum weights")?;
        let s: f64 = self
            .values(values)
            .iter()
            .zip(weights)
            .map(|(v, w)| v * w)
            .sum();
        check_finite(&[s], "weighted_sum")?;
        let rg = self.nodes[values.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![s],
            rg,
            Op::WeightedSum {
                values: values.0,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar. Returns per-node gradients; use
    /// [`Tape::take_grad`] on the result to extract a leaf gradient.
    pub fn backward(&mut self, scalar: Tensor) -> Result<Gradients> {
        if numel(self.shape(scalar)) != 1 {
            return Err(Error::Rank(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape(scalar)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[scalar.0] = Some(vec![1.0]);

        for idx in (0..=scalar.0).rev() {
            let g = grads[idx].take();
            let Some(g) = g else { continue };
            if !self.nodes[idx].requires_grad {
                // Keep leaf grads only where requested; nothing flows further.
                grads[idx] = Some(g);
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = rows_cols(&self.nodes[*a].shape);
                    let (_, n) = rows_cols(&self.nodes[*b].shape);
                    if self.nodes[*a].requires_grad {
                        // dA = G * B^T
                        let bv = &self.nodes[*b].values;
                        let ga = grads[*a].get_or_insert_with(|| vec![0.0; m * k]);
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        // dB = A^T * G
                        let av = &self.nodes[*a].values;
                        let gb = grads[*b].get_or_insert_with(|| vec![0.0; k * n]);
                        for p in 0..k {
                            for i in 0..m {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += x * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    if self.nodes[*a].requires_grad {
                        let (m, n) = rows_cols(&self.nodes[*a].shape);
                        let ga = grads[*a].get_or_insert_with(|| vec![0.0; m * n]);
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += g[j * m + i];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &src in [a, b] {
                        if self.nodes[src].requires_grad {
                            let ga = grads[src].get_or_insert_with(|| vec![0.0; g.len()]);
                            for (gi, go) in ga.iter_mut().zip(&g) {
                                *gi += go;
                            }
                        }
                    }
                }
                Op::AddBias(a, bias) => {
                    let (m, n) = rows_cols(&self.nodes[*a].shape);
                    if self.nodes[*a].requires_grad {
                        let ga = grads[*a].get_or_insert_with(|| vec![0.0; m * n]);
                        for (gi, go) in ga.iter_mut().zip(&g) {
                            *gi += go;
                        }
                    }
                    if self.nodes[*bias].requires_grad {
                        let gb = grads[*bias].get_or_insert_with(|| vec![0.0; n]);
                        for i in 0..m {
                            for j in 0..n {
                                gb[j] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[*a].requires_grad {
                        let bv = self.nodes[*b].values.clone();
                        let ga = grads[*a].get_or_insert_with(|| vec![0.0; g.len()]);
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        let av = self.nodes[*a].values.clone();
                        let gb = grads[*b].get_or_insert_with(|| vec![0.0; g.len()]);
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.nodes[*a].requires_grad {
                        let av = self.nodes[*a].values.clone();
                        let ga = grads[*a].get_or_insert_with(|| vec![0.0; g.len()]);
                        for i in 0..g.len() {
                            if av[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    if self.nodes[*logits].requires_grad {
                        let (b, k) = rows_cols(&self.nodes[*logits].shape);
                        let labels = labels.clone();
                        let probs = probs.clone();
                        let gl = grads[*logits].get_or_insert_with(|| vec![0.0; b * k]);
                        for i in 0..b {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for j in 0..k {
                                let ind = if j == labels[i] { 1.0 } else { 0.0 };
                                gl[i * k + j] += gi * (probs[i * k + j] - ind);
                            }
                        }
                    }
                }
                Op::WeightedSum { values, weights } => {
                    if self.nodes[*values].requires_grad {
                        let weights = weights.clone();
                        let gv = grads[*values].get_or_insert_with(|| vec![0.0; weights.len()]);
                        for i in 0..weights.len() {
                            gv[i] += g[0] * weights[i];
                        }
                    }
                }
            }
        }

        for g in grads.iter().flatten() {
            check_finite(g, "backward")?;
        }
        self.backward_count += 1;
        Ok(Gradients { grads })
    }
}

/// Result of a backward pass: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward scalar w.r.t. `t`, if any was accumulated.
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    /// Remove and return the gradient for `t`.
    pub fn take(&mut self, t: Tensor) -> Option<Vec<f64>> {
        self.grads.get_mut(t.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &mut Tape, v: f64) -> Tensor {
        tape.leaf(&[1], vec![v], true).unwrap()
    }

    /// Naive triple-loop matrix product, independent of the tape path.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = tape.constant(&[2, 1], vec![5.0, 6.0]).unwrap();
        let out = tape.matmul(i2, v).unwrap();
        assert_eq!(tape.values(out), &[5.0, 6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant(&[2, 1], vec![5.0, 6.0]).unwrap();
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.values(out), &[17.0, 39.0]);
        assert_eq!(
            tape.values(out),
            matmul_oracle(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1).as_slice()
        );

        // larger random-ish case
        let av: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let bv: Vec<f64> = (0..20).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut tape = Tape::new();
        let a = tape.constant(&[3, 4], av.clone()).unwrap();
        let b = tape.constant(&[4, 5], bv.clone()).unwrap();
        let out = tape.matmul(a, b).unwrap();
        let expect = matmul_oracle(&av, &bv, 3, 4, 5);
        for (x, y) in tape.values(out).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[3, 2], vec![1.0; 6]).unwrap();
        let out = tape.matmul(z, b).unwrap();
        assert!(tape.values(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{}", msg);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1], vec![-1.0]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.values(y), &[0.0]);
    }

    #[test]
    fn mul_with_zero_mask_annihilates() {
        let mut tape = Tape::new();
        let w = tape.constant(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let m = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let out = tape.mul(w, m).unwrap();
        assert!(tape.values(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_broadcasts_across_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(&[2], vec![10.0, 20.0]).unwrap();
        let out = tape.add_bias(a, b).unwrap();
        assert_eq!(tape.values(out), &[11.0, 22.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[2, 3], vec![0.5; 6]).unwrap();
        let loss = tape.cross_entropy_per_sample(logits, &[0, 2]).unwrap();
        for &l in tape.values(loss) {
            assert!((l - 3.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let loss = tape.cross_entropy_per_sample(logits, &[0]).unwrap();
        let l = tape.values(loss)[0];
        assert!(l.is_finite() && l.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_form() {
        // loss([1, 2], label 0) = ln(1 + e)
        let mut tape = Tape::new();
        let logits = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let loss = tape.cross_entropy_per_sample(logits, &[0]).unwrap();
        assert!((tape.values(loss)[0] - (1.0 + std::f64::consts::E).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.cross_entropy_per_sample(logits, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn weighted_sum_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mean = tape.weighted_sum(v, &[1.0 / 3.0; 3]).unwrap();
        assert!((tape.values(mean)[0] - 2.0).abs() < 1e-15);
        let zero = tape.weighted_sum(v, &[0.0; 3]).unwrap();
        assert_eq!(tape.values(zero), &[0.0]);
        let mix = tape.weighted_sum(v, &[0.5, 0.25, 0.25]).unwrap();
        assert!((tape.values(mix)[0] - 1.75).abs() < 1e-15);
    }

    #[test]
    fn backward_of_weighted_sum_routes_weights() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let s = tape.weighted_sum(v, &[0.5, 0.25, 0.25]).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[0.5, 0.25, 0.25]);
    }

    #[test]
    fn backward_of_square_is_doubling() {
        let mut tape = Tape::new();
        let x = scalar(&mut tape, 3.0);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut tape = Tape::new();
        let x = scalar(&mut tape, 3.0);
        let unused = scalar(&mut tape, 1.0);
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        assert!(matches!(tape.backward(v), Err(Error::Rank(_))));
    }

    /// Random composed graph evaluated as a closure over flattened leaf
    /// values, for central finite differences.
    fn graph_value(a: &[f64], b: &[f64], bias: &[f64], weights: &[f64], labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let at = tape.leaf(&[3, 4], a.to_vec(), true).unwrap();
        let bt = tape.leaf(&[4, 2], b.to_vec(), true).unwrap();
        let bias_t = tape.leaf(&[2], bias.to_vec(), true).unwrap();
        let z = tape.matmul(at, bt).unwrap();
        let z = tape.add_bias(z, bias_t).unwrap();
        let h = tape.relu(z).unwrap();
        let losses = tape.cross_entropy_per_sample(h, labels).unwrap();
        let s = tape.weighted_sum(losses, weights).unwrap();
        tape.values(s)[0]
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let a: Vec<f64> = (0..12).map(|i| ((i * 7 + 3) as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..8).map(|i| ((i * 5 + 1) as f64 * 0.53).cos()).collect();
        let bias = vec![0.1, -0.2];
        let weights = vec![0.5, 0.3, 0.2];
        let labels = vec![0, 1, 0];

        let mut tape = Tape::new();
        let at = tape.leaf(&[3, 4], a.clone(), true).unwrap();
        let bt = tape.leaf(&[4, 2], b.clone(), true).unwrap();
        let bias_t = tape.leaf(&[2], bias.clone(), true).unwrap();
        let z = tape.matmul(at, bt).unwrap();
        let z = tape.add_bias(z, bias_t).unwrap();
        let h = tape.relu(z).unwrap();
        let losses = tape.cross_entropy_per_sample(h, &labels).unwrap();
        let s = tape.weighted_sum(losses, &weights).unwrap();
        let grads = tape.backward(s).unwrap();

        let h_step = 1e-5;
        let check = |analytic: &[f64], base: &[f64], which: usize| {
            for i in 0..base.len() {
                let mut plus = base.to_vec();
                let mut minus = base.to_vec();
                plus[i] += h_step;
                minus[i] -= h_step;
                let (fp, fm) = match which {
                    0 => (
                        graph_value(&plus, &b, &bias, &weights, &labels),
                        graph_value(&minus, &b, &bias, &weights, &labels),
                    ),
                    1 => (
                        graph_value(&a, &plus, &bias, &weights, &labels),
                        graph_value(&a, &minus, &bias, &weights, &labels),
                    ),
                    _ => (
                        graph_value(&a, &b, &plus, &weights, &labels),
                        graph_value(&a, &b, &minus, &weights, &labels),
                    ),
                };
                let fd = (fp - fm) / (2.0 * h_step);
                let denom = fd.abs().max(1e-6);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-4,
                    "param {} of leaf {}: analytic {} vs fd {}",
                    i,
                    which,
                    analytic[i],
                    fd
                );
            }
        };
        check(grads.get(at).unwrap(), &a, 0);
        check(grads.get(bt).unwrap(), &b, 1);
        check(grads.get(bias_t).unwrap(), &bias, 2);
    }

    #[test]
    fn backward_is_linear() {
        // grad of alpha*f + beta*g equals alpha*grad f + beta*grad g
        let build = |tape: &mut Tape| {
            let x = tape.leaf(&[2], vec![0.4, -1.2], true).unwrap();
            let f = tape.weighted_sum(x, &[2.0, 1.0]).unwrap();
            let xx = tape.mul(x, x).unwrap();
            let g = tape.weighted_sum(xx, &[1.0, 3.0]).unwrap();
            (x, f, g)
        };
        let (alpha, beta) = (0.7, -1.9);

        let mut tape = Tape::new();
        let (x, f, _) = build(&mut tape);
        let gf = tape.backward(f).unwrap().take(x).unwrap();

        let mut tape = Tape::new();
        let (x, _, g) = build(&mut tape);
        let gg = tape.backward(g).unwrap().take(x).unwrap();

        let mut tape = Tape::new();
        let (x, f, g) = build(&mut tape);
        let ca = tape.constant(&[1], vec![alpha]).unwrap();
        let cb = tape.constant(&[1], vec![beta]).unwrap();
        let af = tape.mul(f, ca).unwrap();
        let bg = tape.mul(g, cb).unwrap();
        let combined = tape.add(af, bg).unwrap();
        let gc = tape.backward(combined).unwrap().take(x).unwrap();

        for i in 0..2 {
            assert!((gc[i] - (alpha * gf[i] + beta * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let a: Vec<f64> = (0..12).map(|i| ((i * 11 + 5) as f64 * 0.23).sin()).collect();
            let b: Vec<f64> = (0..8).map(|i| ((i * 3 + 2) as f64 * 0.71).cos()).collect();
            let mut tape = Tape::new();
            let at = tape.leaf(&[3, 4], a, true).unwrap();
            let bt = tape.leaf(&[4, 2], b, true).unwrap();
            let z = tape.matmul(at, bt).unwrap();
            let losses = tape.cross_entropy_per_sample(z, &[1, 0, 1]).unwrap();
            let s = tape.weighted_sum(losses, &[0.2, 0.3, 0.5]).unwrap();
            let grads = tape.backward(s).unwrap();
            (grads.get(at).unwrap().to_vec(), grads.get(bt).unwrap().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
