//! Synthetic task streams, Dirichlet client partitioning, and CSV I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, TAG_DATA, TAG_HOLDOUT, TAG_PARTITION};

/// Attempts at placing a cluster mean before settling for the best candidate.
const MEAN_TRIES: usize = 1000;

/// An ordered sequence of tasks sharing one label space.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Dataset>,
    pub classes_per_task: usize,
    pub num_classes: usize,
    /// Feature permutation per task (permuted streams only):
    /// `task[s].row(i)[k] == base.row(i)[permutations[s][k]]`.
    pub permutations: Vec<Vec<usize>>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Label ids present in task `s`, ascending.
    pub fn task_classes(&self, s: usize) -> Vec<usize> {
        let counts = self.tasks[s].class_counts();
        (0..counts.len()).filter(|&c| counts[c] > 0).collect()
    }
}

/// Split-class stream of isotropic unit-variance Gaussian clusters.
///
/// Cluster means lie on the sphere of radius `separation`, drawn so that
/// every pair is at least `separation` apart when that is achievable. Task
/// `s` owns the labels `s·classes_per_task .. (s+1)·classes_per_task`.
pub fn make_split_gaussians(
    num_tasks: usize,
    classes_per_task: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<TaskStream> {
    if num_tasks == 0 || classes_per_task == 0 || dim == 0 || n_per_class == 0 {
        return Err(Error::Config("split-gaussian counts must all be at least 1".into()));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be positive, got {separation}")));
    }
    let num_classes = num_tasks * classes_per_task;
    let means = cluster_means(num_classes, dim, separation, seed);
    let mut tasks = Vec::with_capacity(num_tasks);
    for s in 0..num_tasks {
        let mut features = Vec::with_capacity(classes_per_task * n_per_class * dim);
        let mut labels = Vec::with_capacity(classes_per_task * n_per_class);
        for c in 0..classes_per_task {
            let class = s * classes_per_task + c;
            let mut r = rng::keyed_rng(&[seed, TAG_DATA, 1, class as u64]);
            for _ in 0..n_per_class {
                for &mu in &means[class] {
                    let z: f64 = StandardNormal.sample(&mut r);
                    features.push(mu + z);
                }
                labels.push(class);
            }
        }
        tasks.push(Dataset::new(features, labels, dim, num_classes)?);
    }
    Ok(TaskStream { tasks, classes_per_task, num_classes, permutations: Vec::new() })
}

fn cluster_means(count: usize, dim: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::keyed_rng(&[seed, TAG_DATA, 0]);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..MEAN_TRIES {
            let cand = sphere_point(&mut r, dim, radius);
            let gap = means.iter().map(|m| dist(m, &cand)).fold(f64::INFINITY, f64::min);
            if gap >= radius {
                best = Some((gap, cand));
                break;
            }
            if best.as_ref().is_none_or(|(g, _)| gap > *g) {
                best = Some((gap, cand));
            }
        }
        means.push(best.map(|(_, m)| m).unwrap_or_else(|| vec![0.0; dim]));
    }
    means
}

fn sphere_point<R: Rng>(r: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| radius * x / norm).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Permuted-feature stream: task `s` reorders the coordinates of every row
/// of `base` by a fixed random permutation; task 0 is `base` itself.
pub fn make_permuted_features(base: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::Config("num_tasks must be at least 1".into()));
    }
    let p = base.dim();
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut permutations = Vec::with_capacity(num_tasks);
    for s in 0..num_tasks {
        let mut perm: Vec<usize> = (0..p).collect();
        if s > 0 {
            perm.shuffle(&mut rng::keyed_rng(&[seed, TAG_DATA, 2, s as u64]));
        }
        let mut features = Vec::with_capacity(base.len() * p);
        for (row, _) in base.rows() {
            features.extend(perm.iter().map(|&k| row[k]));
        }
        tasks.push(Dataset::new(features, base.labels().to_vec(), p, base.num_classes())?);
        permutations.push(perm);
    }
    Ok(TaskStream { tasks, classes_per_task: base.num_classes(), num_classes: base.num_classes(), permutations })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub zeta: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::Config(format!("Dirichlet concentration must be positive, got {}", self.zeta)));
        }
        Ok(())
    }
}

/// Row indices of each client's shard under per-class Dirichlet proportions.
///
/// `stream` distinguishes independent partitions under one seed (for
/// example successive tasks).
pub fn dirichlet_assignment(data: &Dataset, spec: &PartitionSpec, stream: u64) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let n = spec.clients;
    if data.len() < n {
        return Err(Error::Config(format!("{} rows cannot fill {} non-empty client shards", data.len(), n)));
    }
    let gamma = Gamma::new(spec.zeta, 1.0).map_err(|e| Error::Config(format!("Dirichlet draw: {e}")))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (class, mut rows) in data.indices_by_class().into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let mut r = rng::keyed_rng(&[spec.seed, TAG_PARTITION, stream, class as u64]);
        let mut props: Vec<f64> = (0..n).map(|_| gamma.sample(&mut r)).collect();
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            props = vec![1.0 / n as f64; n];
        }
        rows.shuffle(&mut r);
        let counts = largest_remainder(&props, rows.len());
        let mut start = 0;
        for (shard, &c) in shards.iter_mut().zip(&counts) {
            shard.extend_from_slice(&rows[start..start + c]);
            start += c;
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    while let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        let largest = (0..n).fold(0, |best, i| if shards[i].len() > shards[best].len() { i } else { best });
        let row = shards[largest].pop().expect("largest shard is non-empty when rows >= clients");
        shards[empty].push(row);
    }
    Ok(shards)
}

/// Splits `data` across `spec.clients` clients; every row lands in exactly
/// one non-empty shard.
pub fn dirichlet_partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    dirichlet_assignment(data, spec, 0)?.iter().map(|idx| data.subset(idx)).collect()
}

/// Integer counts summing to `total`, proportional to `props`; remainders
/// are handed out largest first with ties to the lower index.
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class held-out split: a seeded `fraction` of each class goes to the
/// test side (at least one row of the class stays in training).
pub fn holdout_split(data: &Dataset, fraction: f64, seed: u64, stream: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Config(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut rows) in data.indices_by_class().into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng::keyed_rng(&[seed, TAG_HOLDOUT, stream, class as u64]));
        let k = ((fraction * rows.len() as f64).round() as usize).min(rows.len() - 1);
        test.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    if test.is_empty() {
        return Err(Error::Config("holdout split left no test rows".into()));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&test)?))
}

/// Writes features and a trailing label column, with a header row.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, y) in data.rows() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads numeric feature columns plus a trailing integer label column. A
/// first row that does not parse as numbers is treated as a header. When
/// `num_classes` is `None` the label space is `max label + 1`.
pub fn read_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(idx as u64 + 1);
        if idx == 0 && rec.iter().any(|f| f.trim().parse::<f64>().is_err()) {
            width = Some(rec.len());
            continue;
        }
        if rec.len() < 2 {
            return Err(Error::Parse { line, message: "need at least one feature and a label".into() });
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(Error::Parse { line, message: format!("expected {w} columns, found {}", rec.len()) });
            }
            _ => width = Some(rec.len()),
        }
        for field in rec.iter().take(rec.len() - 1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line, message: format!("invalid number {field:?}") })?;
            features.push(v);
        }
        let label = rec[rec.len() - 1].trim();
        let y: usize = label.parse().map_err(|_| Error::Parse { line, message: format!("invalid label {label:?}") })?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no data rows", path.display())));
    }
    let dim = width.unwrap_or(1) - 1;
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(features, labels, dim, k)
}

/// Writes `task{task}_client{id}.csv` for each shard and returns the paths.
pub fn export_shards(dir: &Path, task: usize, shards: &[Dataset]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let path = dir.join(format!("task{task}_client{i}.csv"));
            write_csv(&path, shard)?;
            Ok(path)
        })
        .collect()
}
