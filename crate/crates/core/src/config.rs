//! Experiment configuration: a flat key/value file with dotted section
//! names, parsed strictly (unknown keys rejected, every key validated
//! before any stage runs).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::formulation::FormulationKind;
use crate::optim::{LrSchedule, SgdConfig};
use crate::pruning::GmpSchedule;

/// Where the dataset comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        train_path: PathBuf,
        test_path: Option<PathBuf>,
    },
}

/// Shared per-stage optimizer settings.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
}

impl StageConfig {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.sgd.lr,
            milestones: self.lr_milestones.clone(),
            decay: self.lr_decay,
        }
    }
}

/// Fine-tuning stage settings.
#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub stage: StageConfig,
    pub formulation: FormulationKind,
    pub dual_lr: f64,
    pub use_buffers: bool,
    pub buffer_size: usize,
}

/// Fully validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub hidden_dims: Vec<usize>,
    pub pretrain: StageConfig,
    pub gmp: GmpSchedule,
    pub finetune: FinetuneConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub eval_test_each_epoch: bool,
    /// Hash of the canonical key/value listing; identifies the
    /// configuration independently of the seed used for a run.
    pub hash: String,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{}.{}", prefix, k)
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

struct KeyReader {
    map: BTreeMap<String, toml::Value>,
    used: Vec<String>,
}

impl KeyReader {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        let v = self.map.remove(key);
        if v.is_some() {
            self.used.push(key.to_string());
        }
        v
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => as_f64(&v).ok_or_else(|| bad(key, "a number", &v)),
        }
    }

    fn f64_required(&mut self, key: &str) -> Result<f64> {
        match self.take(key) {
            None => Err(Error::Config(format!("missing required key '{}'", key))),
            Some(v) => as_f64(&v).ok_or_else(|| bad(key, "a number", &v)),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => as_usize(&v).ok_or_else(|| bad(key, "a non-negative integer", &v)),
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(b)) => Ok(b),
            Some(v) => Err(bad(key, "a boolean", &v)),
        }
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(bad(key, "a string", &v)),
        }
    }

    fn usize_list(&mut self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.take(key) {
            None => Ok(default),
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| as_usize(v).ok_or_else(|| bad(key, "a list of integers", v)))
                .collect(),
            Some(v) => Err(bad(key, "a list of integers", &v)),
        }
    }

    fn f64_list(&mut self, key: &str, default: Vec<f64>) -> Result<Vec<f64>> {
        match self.take(key) {
            None => Ok(default),
            Some(toml::Value::Array(items)) => items
                .iter()
                .map(|v| as_f64(v).ok_or_else(|| bad(key, "a list of numbers", v)))
                .collect(),
            Some(v) => Err(bad(key, "a list of numbers", &v)),
        }
    }
}

fn as_f64(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_usize(v: &toml::Value) -> Option<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Some(*i as usize),
        _ => None,
    }
}

fn bad(key: &str, expected: &str, got: &toml::Value) -> Error {
    Error::Config(format!("key '{}' must be {}, got {}", key, expected, got))
}

fn stage(reader: &mut KeyReader, section: &str, default_epochs: usize) -> Result<StageConfig> {
    let sgd = SgdConfig {
        lr: reader.f64(&format!("{}.lr", section), 0.01)?,
        momentum: reader.f64(&format!("{}.momentum", section), 0.9)?,
        nesterov: reader.bool(&format!("{}.nesterov", section), false)?,
        weight_decay: reader.f64(&format!("{}.weight_decay", section), 1e-4)?,
    };
    let cfg = StageConfig {
        epochs: reader.usize(&format!("{}.epochs", section), default_epochs)?,
        batch_size: reader.usize(&format!("{}.batch_size", section), 128)?,
        sgd,
        lr_milestones: reader.f64_list(&format!("{}.lr_milestones", section), vec![0.6, 0.8, 0.9])?,
        lr_decay: reader.f64(&format!("{}.lr_decay", section), 0.1)?,
    };
    if cfg.epochs == 0 {
        return Err(Error::Config(format!("{}.epochs must be positive", section)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config(format!("{}.batch_size must be positive", section)));
    }
    // Also rejects NaN.
    if cfg.sgd.lr <= 0.0 || cfg.sgd.lr.is_nan() {
        return Err(Error::Config(format!("{}.lr must be positive", section)));
    }
    if !(0.0..1.0).contains(&cfg.sgd.momentum) {
        return Err(Error::Config(format!("{}.momentum must be in [0, 1)", section)));
    }
    if cfg.sgd.weight_decay < 0.0 {
        return Err(Error::Config(format!("{}.weight_decay must be >= 0", section)));
    }
    if cfg.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::Config(format!(
            "{}.lr_milestones must be fractions of the total epochs",
            section
        )));
    }
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Parse(format!("config: {}", e)))?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut flat);

        // Hash the canonical listing before consuming the keys.
        let canonical: String = flat
            .iter()
            .map(|(k, v)| format!("{}={}\n", k, v))
            .collect();
        let digest = Sha256::digest(canonical.as_bytes());
        let hash: String = digest.iter().map(|b| format!("{:02x}", b)).collect();

        let mut reader = KeyReader {
            map: flat,
            used: Vec::new(),
        };

        let source = reader
            .string("data.source")?
            .ok_or_else(|| Error::Config("missing required key 'data.source'".into()))?;
        let data = match source.as_str() {
            "synthetic" => {
                let recipe = SyntheticSpec::default_recipe();
                let spec = SyntheticSpec {
                    dim: reader.usize("data.dim", recipe.dim)?,
                    num_classes: reader.usize("data.classes", recipe.num_classes)?,
                    group_sizes: reader.usize_list("data.group_sizes", recipe.group_sizes)?,
                    noise_scales: reader.f64_list("data.noise_scales", recipe.noise_scales)?,
                    test_fraction: reader.f64("data.test_fraction", recipe.test_fraction)?,
                };
                spec.validate()?;
                DataSource::Synthetic(spec)
            }
            "csv" => {
                let train_path = reader
                    .string("data.csv_path")?
                    .ok_or_else(|| Error::Config("csv source requires 'data.csv_path'".into()))?;
                let test_path = reader.string("data.test_csv_path")?;
                DataSource::Csv {
                    train_path: PathBuf::from(train_path),
                    test_path: test_path.map(PathBuf::from),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "data.source must be 'synthetic' or 'csv', got '{}'",
                    other
                )))
            }
        };

        let hidden_dims = reader.usize_list("model.hidden_dims", vec![64, 64])?;

        let pretrain = stage(&mut reader, "pretrain", 20)?;

        let gmp = GmpSchedule {
            initial_sparsity: reader.f64("gmp.initial_sparsity", 0.0)?,
            final_sparsity: reader.f64("gmp.final_sparsity", 0.9)?,
            start_epoch: reader.usize("gmp.start_epoch", 0)?,
            end_epoch: reader.usize("gmp.end_epoch", 14)?,
            period: reader.usize("gmp.period", 1)?,
        };
        gmp.validate()?;

        let finetune_stage = stage(&mut reader, "finetune", 60)?;
        let formulation_name = reader
            .string("finetune.formulation")?
            .ok_or_else(|| Error::Config("missing required key 'finetune.formulation'".into()))?;
        let needs_epsilon = matches!(
            formulation_name.as_str(),
            "ceag" | "celg" | "pw" | "two_sided"
        );
        let epsilon = if needs_epsilon {
            reader.f64_required("finetune.epsilon")?
        } else {
            reader.f64("finetune.epsilon", 0.0)?
        };
        if epsilon < 0.0 {
            return Err(Error::Config("finetune.epsilon must be >= 0".into()));
        }
        let formulation = FormulationKind::parse(&formulation_name, epsilon)?;
        let has_duals = !matches!(formulation, FormulationKind::Nft);
        let dual_lr = if has_duals {
            reader.f64_required("finetune.dual_lr")?
        } else {
            reader.f64("finetune.dual_lr", 0.0)?
        };
        if has_duals && !(dual_lr > 0.0 && dual_lr.is_finite()) {
            return Err(Error::Config("finetune.dual_lr must be positive and finite".into()));
        }
        let use_buffers = reader.bool("finetune.use_buffers", true)?;
        let buffer_size = reader.usize("finetune.buffer_size", 40)?;
        if buffer_size == 0 {
            return Err(Error::Config("finetune.buffer_size must be positive".into()));
        }
        if finetune_stage.epochs <= gmp.end_epoch {
            return Err(Error::Config(format!(
                "finetune.epochs ({}) must exceed gmp.end_epoch ({})",
                finetune_stage.epochs, gmp.end_epoch
            )));
        }
        let finetune = FinetuneConfig {
            stage: finetune_stage,
            formulation,
            dual_lr,
            use_buffers,
            buffer_size,
        };

        let seeds_raw = reader.usize_list("seeds", vec![])?;
        if seeds_raw.is_empty() {
            return Err(Error::Config("missing required key 'seeds' (non-empty list)".into()));
        }
        let seeds: Vec<u64> = seeds_raw.into_iter().map(|s| s as u64).collect();

        let output_dir = reader
            .string("output_dir")?
            .ok_or_else(|| Error::Config("missing required key 'output_dir'".into()))?;

        let eval_test_each_epoch = reader.bool("eval_test_each_epoch", true)?;

        if let Some(unknown) = reader.map.keys().next() {
            return Err(Error::Config(format!("unknown config key '{}'", unknown)));
        }

        Ok(ExperimentConfig {
            data,
            hidden_dims,
            pretrain,
            gmp,
            finetune,
            seeds,
            output_dir: PathBuf::from(output_dir),
            eval_test_each_epoch,
            hash,
        })
    }
}

/// Fixed fan-out of a run seed into independent streams.
pub mod seed_streams {
    use crate::data::epoch_seed;

    pub fn data(seed: u64) -> u64 {
        epoch_seed(seed, 0x0DA7A)
    }

    pub fn init(seed: u64) -> u64 {
        epoch_seed(seed, 0x1217)
    }

    pub fn shuffle(seed: u64) -> u64 {
        epoch_seed(seed, 0x5487)
    }
}
