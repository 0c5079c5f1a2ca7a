//! Python bindings: configuration loading, the pretrain/sparsify/evaluate
//! pipeline, checkpointed models, replay buffers and the surrogate-weight
//! computation, exposed as the `fairprune_py` extension module.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fairprune::autodiff::Tape;
use fairprune::buffer::{BufferSet, ObservationKind};
use fairprune::checkpoint;
use fairprune::config::ExperimentConfig;
use fairprune::experiment;
use fairprune::formulation::{self, FormulationKind};
use fairprune::metrics::DisparityReport;
use fairprune::model::{predict_rows, BaselineSnapshot, MaskedMlp};
use fairprune::pruning::GmpSchedule;

fn err(e: fairprune::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A parsed and validated experiment configuration.
#[pyclass(name = "Config")]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    /// Parse a configuration from TOML text.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::parse(text).map_err(err)?,
        })
    }

    /// Load a configuration from a TOML file.
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(Path::new(path)).map_err(err)?,
        })
    }

    /// Content hash identifying the configuration independently of seeds.
    #[getter]
    fn hash(&self) -> String {
        self.inner.hash.clone()
    }

    #[getter]
    fn formulation(&self) -> &'static str {
        self.inner.finetune.formulation.name()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn output_dir(&self) -> String {
        self.inner.output_dir.display().to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(formulation='{}', seeds={:?}, hash='{}')",
            self.inner.finetune.formulation.name(),
            self.inner.seeds,
            self.inner.hash
        )
    }
}

/// A masked multilayer perceptron loaded from a checkpoint.
// Unsendable: the model carries an interior-mutability forward counter.
#[pyclass(name = "Model", unsendable)]
struct Model {
    inner: MaskedMlp,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(Path::new(path)).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.inner, Path::new(path)).map_err(err)
    }

    /// Fraction of prunable weights currently masked out.
    fn sparsity(&self) -> f64 {
        self.inner.prunable_sparsity()
    }

    /// (out_dim, in_dim) for every layer.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.inner.layers.iter().map(|l| (l.out_dim, l.in_dim)).collect()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.spec.input_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.spec.num_classes
    }

    /// Predicted class per row; ties resolve to the lowest class index.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let b = rows.len();
        let d = self.inner.spec.input_dim;
        let mut flat = Vec::with_capacity(b * d);
        for row in &rows {
            if row.len() != d {
                return Err(PyValueError::new_err(format!(
                    "row has {} features, model expects {}",
                    row.len(),
                    d
                )));
            }
            flat.extend_from_slice(row);
        }
        let mut tape = Tape::new();
        let x = tape.constant(&[b, d], flat).map_err(err)?;
        let handles = self.inner.forward(&mut tape, x).map_err(err)?;
        Ok(predict_rows(
            tape.values(handles.logits),
            self.inner.spec.num_classes,
        ))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, hidden={:?}, classes={}, sparsity={:.4})",
            self.inner.spec.input_dim,
            self.inner.spec.hidden_dims,
            self.inner.spec.num_classes,
            self.inner.prunable_sparsity()
        )
    }
}

/// Per-group replay buffers plus the accuracy-gap estimator they feed.
#[pyclass(name = "Buffers")]
struct Buffers {
    inner: BufferSet,
}

#[pymethods]
impl Buffers {
    /// `kind` is "accuracy" or "loss".
    #[new]
    fn new(num_groups: usize, capacity: usize, kind: &str) -> PyResult<Self> {
        let kind = match kind {
            "accuracy" => ObservationKind::Accuracy,
            "loss" => ObservationKind::Loss,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown observation kind '{}'; expected 'accuracy' or 'loss'",
                    other
                )))
            }
        };
        Ok(Self {
            inner: BufferSet::new(num_groups, capacity, kind),
        })
    }

    /// Append per-sample observations, routed by group id.
    fn push(&mut self, values: Vec<f64>, groups: Vec<usize>) -> PyResult<()> {
        self.inner.push(&values, &groups).map_err(err)
    }

    fn lengths(&self) -> Vec<usize> {
        (0..self.inner.num_groups())
            .map(|g| self.inner.buffer(g).len())
            .collect()
    }

    /// Excess-accuracy-gap estimates against a dense baseline given by
    /// per-group accuracies and the aggregate accuracy. Groups whose
    /// buffers are not yet full contribute zero.
    fn query_eag(&self, group_accuracy: Vec<f64>, aggregate_accuracy: f64) -> PyResult<Vec<f64>> {
        if group_accuracy.len() != self.inner.num_groups() {
            return Err(PyValueError::new_err(format!(
                "{} baseline accuracies for {} groups",
                group_accuracy.len(),
                self.inner.num_groups()
            )));
        }
        let g = group_accuracy.len();
        let baseline = BaselineSnapshot {
            group_accuracy,
            aggregate_accuracy,
            group_loss: vec![0.0; g],
            aggregate_loss: 0.0,
            group_sizes: vec![1; g],
        };
        Ok(self.inner.query_eag(&baseline))
    }
}

fn report_dict<'py>(py: Python<'py>, r: &DisparityReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("global_gap", r.global_gap)?;
    d.set_item("group_gaps", r.group_gaps.clone())?;
    d.set_item("excess_gaps", r.excess_gaps.clone())?;
    d.set_item("max_excess_gap", r.max_excess_gap)?;
    d.set_item("pairwise_disparity", r.pairwise_disparity)?;
    Ok(d)
}

/// Train the dense model for one seed; returns the run directory.
#[pyfunction]
fn pretrain(config: &Config, seed: u64, out: &str) -> PyResult<String> {
    let dir = experiment::cmd_pretrain(&config.inner, seed, Path::new(out)).map_err(err)?;
    Ok(dir.display().to_string())
}

/// Prune and fine-tune from a dense checkpoint; returns the run directory.
#[pyfunction]
#[pyo3(signature = (config, seed, out, dense=None))]
fn sparsify(config: &Config, seed: u64, out: &str, dense: Option<&str>) -> PyResult<String> {
    let dense = dense.map(PathBuf::from);
    let dir = experiment::cmd_sparsify(&config.inner, seed, Path::new(out), dense.as_deref())
        .map_err(err)?;
    Ok(dir.display().to_string())
}

/// Exact train (and test, when present) disparity reports of a sparse
/// checkpoint against a dense one.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    config: &Config,
    seed: u64,
    checkpoint: &str,
    dense: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let (train, test) =
        experiment::cmd_evaluate(&config.inner, seed, Path::new(checkpoint), Path::new(dense))
            .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("train", report_dict(py, &train)?)?;
    match test {
        Some(t) => out.set_item("test", report_dict(py, &t)?)?,
        None => out.set_item("test", py.None())?,
    }
    Ok(out)
}

/// Aggregate finished runs into the plain-text report table.
#[pyfunction]
fn report(run_dirs: Vec<String>) -> PyResult<String> {
    let dirs: Vec<PathBuf> = run_dirs.iter().map(PathBuf::from).collect();
    let rows = experiment::cmd_report(&dirs).map_err(err)?;
    Ok(experiment::format_report_table(&rows))
}

/// Tolerance suggested from a finished unconstrained run:
/// (final train max excess gap, suggested epsilon, optional warning).
#[pyfunction]
fn suggest_tolerance(run_dir: &str) -> PyResult<(f64, f64, Option<String>)> {
    let s = experiment::cmd_suggest_tolerance(Path::new(run_dir)).map_err(err)?;
    Ok((s.final_train_max_psi, s.suggested_epsilon, s.warning))
}

/// Target sparsity of the standard cubic pruning schedule at `epoch`.
#[pyfunction]
fn gmp_sparsity(final_sparsity: f64, epoch: usize) -> PyResult<f64> {
    GmpSchedule::standard(final_sparsity)
        .sparsity_at_epoch(epoch)
        .map_err(err)
}

/// Per-sample objective weights realizing the surrogate penalty for the
/// given formulation, batch group ids and multipliers.
#[pyfunction]
#[pyo3(signature = (formulation, groups, num_groups, lam, epsilon=0.0))]
fn surrogate_weights(
    formulation: &str,
    groups: Vec<usize>,
    num_groups: usize,
    lam: Vec<f64>,
    epsilon: f64,
) -> PyResult<Vec<f64>> {
    let kind = FormulationKind::parse(formulation, epsilon).map_err(err)?;
    if matches!(kind, FormulationKind::Pw { .. }) {
        return Err(PyValueError::new_err(
            "the pairwise formulation needs extremal groups from a violation query; \
             use the training pipeline instead",
        ));
    }
    formulation::surrogate_weights(&kind, &groups, num_groups, &lam, None).map_err(err)
}

#[pymodule]
fn fairprune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_class::<Buffers>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(sparsify, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(suggest_tolerance, m)?)?;
    m.add_function(wrap_pyfunction!(gmp_sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_weights, m)?)?;
    Ok(())
}
