//! Grouped classification datasets: CSV ingestion, a deterministic synthetic
//! generator, stratified splits and seeded batch iteration.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Features, class labels and group ids; row i of each field always moves
/// together through splits and shuffles.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    /// Row-major N x dim.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub group_names: Vec<String>,
    pub dim: usize,
    pub num_classes: usize,
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_groups()];
        for &g in &self.groups {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.len() * self.dim {
            return Err(Error::Dimension(format!(
                "{} feature values for {} rows of dim {}",
                self.features.len(),
                self.len(),
                self.dim
            )));
        }
        if self.labels.len() != self.groups.len() {
            return Err(Error::Dimension("labels/groups length mismatch".into()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Index(format!("label {} out of range", y)));
        }
        if let Some(&g) = self.groups.iter().find(|&&g| g >= self.num_groups()) {
            return Err(Error::Index(format!("group id {} out of range", g)));
        }
        let sizes = self.group_sizes();
        if let Some(g) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!(
                "group '{}' has no samples",
                self.group_names[g]
            )));
        }
        Ok(())
    }

    /// Row indices of each group, in dataset order.
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.num_groups()];
        for (i, &g) in self.groups.iter().enumerate() {
            idx[g].push(i);
        }
        idx
    }
}

/// Recipe for the synthetic generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub group_sizes: Vec<usize>,
    /// Per-group noise scale; larger means harder.
    pub noise_scales: Vec<f64>,
    pub test_fraction: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes < 2 {
            return Err(Error::Config("synthetic spec needs dim > 0 and K >= 2".into()));
        }
        if self.group_sizes.is_empty() || self.group_sizes.len() != self.noise_scales.len() {
            return Err(Error::Config(
                "group_sizes and noise_scales must be non-empty lists of equal length".into(),
            ));
        }
        if self.group_sizes.contains(&0) {
            return Err(Error::Config("group sizes must be positive".into()));
        }
        if self.noise_scales.iter().any(|&s| s <= 0.0 || s.is_nan()) {
            return Err(Error::Config("noise scales must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Desk-scale default recipe.
    pub fn default_recipe() -> Self {
        Self {
            dim: 20,
            num_classes: 5,
            group_sizes: vec![4000, 2000, 1000, 500, 250],
            noise_scales: vec![0.6, 0.7, 0.8, 0.9, 1.0],
            test_fraction: 0.25,
        }
    }
}

fn parse_cell<T: std::str::FromStr>(cell: &str, line: usize, what: &str) -> Result<T> {
    cell.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {}: invalid {} '{}'", line, what, cell.trim())))
}

/// Load a dataset from CSV with header `f0,...,f{d-1},label,group`.
/// Group ids are assigned by first appearance of each group name.
pub fn load_csv(path: &Path) -> Result<GroupedDataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Format("empty CSV file".into())),
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || *cols.last().unwrap() != "group" || cols[cols.len() - 2] != "label" {
        return Err(Error::Format(
            "CSV header must be f0,...,f{d-1},label,group".into(),
        ));
    }
    let dim = cols.len() - 2;
    for (j, c) in cols[..dim].iter().enumerate() {
        if *c != format!("f{}", j) {
            return Err(Error::Format(format!(
                "CSV header column {} is '{}', expected 'f{}'",
                j, c, j
            )));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut group_names: Vec<String> = Vec::new();
    let mut max_label = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let lineno = lineno + 2; // 1-based, after header
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim + 2 {
            return Err(Error::Parse(format!(
                "line {}: expected {} cells, got {}",
                lineno,
                dim + 2,
                cells.len()
            )));
        }
        for cell in &cells[..dim] {
            features.push(parse_cell::<f64>(cell, lineno, "feature")?);
        }
        let label: usize = parse_cell(cells[dim], lineno, "label")?;
        max_label = max_label.max(label);
        labels.push(label);
        let name = cells[dim + 1].trim();
        let gid = match group_names.iter().position(|n| n == name) {
            Some(g) => g,
            None => {
                group_names.push(name.to_string());
                group_names.len() - 1
            }
        };
        groups.push(gid);
    }
    if labels.is_empty() {
        return Err(Error::Format("CSV file has no data rows".into()));
    }
    let data = GroupedDataset {
        features,
        labels,
        groups,
        group_names,
        dim,
        num_classes: max_label + 1,
    };
    data.validate()?;
    Ok(data)
}

/// Write a dataset in the CSV format accepted by [`load_csv`].
pub fn export_csv(data: &GroupedDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = (0..data.dim).map(|j| format!("f{}", j)).collect();
    header.push("label".into());
    header.push("group".into());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.features[i * data.dim..(i + 1) * data.dim]
            .iter()
            .map(|v| format!("{}", v))
            .collect();
        row.push(format!("{}", data.labels[i]));
        row.push(data.group_names[data.groups[i]].clone());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; consumes two uniforms per call.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate a (train, test) pair: shared class means on the unit sphere,
/// per-group Gaussian noise, class-balanced groups, per-group stratified
/// split. Deterministic given the seed.
pub fn synthetic_generate(spec: &SyntheticSpec, seed: u64) -> Result<(GroupedDataset, GroupedDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dim;
    let k = spec.num_classes;

    // Class means, shared across groups.
    let mut means = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x /= norm);
        means.push(v);
    }

    let mut train = empty_like(spec);
    let mut test = empty_like(spec);
    for (g, (&size, &sigma)) in spec.group_sizes.iter().zip(&spec.noise_scales).enumerate() {
        // Class-balanced labels; remainders go to the lowest class indices.
        let mut class_counts = vec![size / k; k];
        for count in class_counts.iter_mut().take(size % k) {
            *count += 1;
        }
        for (class, &count) in class_counts.iter().enumerate() {
            let mut rows = Vec::with_capacity(count);
            for _ in 0..count {
                let x: Vec<f64> = means[class]
                    .iter()
                    .map(|&m| m + sigma * standard_normal(&mut rng))
                    .collect();
                rows.push(x);
            }
            // Stratified split within each (group, class) cell.
            let n_test = ((count as f64) * spec.test_fraction).round() as usize;
            let mut order: Vec<usize> = (0..count).collect();
            order.shuffle(&mut rng);
            for (pos, &ri) in order.iter().enumerate() {
                let dst = if pos < n_test { &mut test } else { &mut train };
                dst.features.extend_from_slice(&rows[ri]);
                dst.labels.push(class);
                dst.groups.push(g);
            }
        }
    }
    train.validate().map_err(|_| {
        Error::Config("a group is empty in the train split; increase its size".into())
    })?;
    test.validate().map_err(|_| {
        Error::Config("a group is empty in the test split; increase its size".into())
    })?;
    for (split, name) in [(&train, "train"), (&test, "test")] {
        for (g, &s) in split.group_sizes().iter().enumerate() {
            if s < k {
                return Err(Error::Config(format!(
                    "group '{}' has only {} samples in the {} split (fewer than {} classes)",
                    split.group_names[g], s, name, k
                )));
            }
        }
    }
    Ok((train, test))
}

fn empty_like(spec: &SyntheticSpec) -> GroupedDataset {
    GroupedDataset {
        features: Vec::new(),
        labels: Vec::new(),
        groups: Vec::new(),
        group_names: (0..spec.group_sizes.len()).map(|g| format!("g{}", g)).collect(),
        dim: spec.dim,
        num_classes: spec.num_classes,
    }
}

/// One minibatch: dataset row indices plus per-group membership lists
/// (positions *within the batch*, partitioning it by group).
#[derive(Debug, Clone)]
pub struct GroupedBatch {
    pub indices: Vec<usize>,
    pub group_members: Vec<Vec<usize>>,
}

/// Seed for epoch-level shuffling, derived so that each epoch gets an
/// independent reproducible stream.
pub fn epoch_seed(base_seed: u64, epoch: usize) -> u64 {
    // splitmix64 over the combined value
    let mut z = base_seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(epoch as u64)
        .wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seeded shuffled batches covering every row exactly once; the final
/// partial batch is included.
pub fn iterate_batches(
    data: &GroupedDataset,
    batch_size: usize,
    base_seed: u64,
    epoch: usize,
) -> Vec<GroupedBatch> {
    assert!(batch_size >= 1);
    let mut perm: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(base_seed, epoch));
    perm.shuffle(&mut rng);
    perm.chunks(batch_size)
        .map(|chunk| {
            let mut group_members = vec![Vec::new(); data.num_groups()];
            for (pos, &i) in chunk.iter().enumerate() {
                group_members[data.groups[i]].push(pos);
            }
            GroupedBatch {
                indices: chunk.to_vec(),
                group_members,
            }
        })
        .collect()
}
