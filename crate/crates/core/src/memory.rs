//! Episodic replay memory.
//!
//! A [`RingBuffer`] is sampled once from past-task data and never mutated
//! afterwards, so every memory gradient inside a task phase is computed on
//! the same rows.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::LossModel;
use crate::params::ParamVector;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryPolicy {
    Uniform,
    ClassBalanced,
}

/// How a client rebuilds its buffer at a task transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Rows kept per past task; sub-buffers are concatenated across tasks.
    pub per_task: usize,
    pub policy: MemoryPolicy,
    /// Optional mini-batch size for the memory gradient (whole buffer when unset).
    pub batch: Option<usize>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { per_task: 40, policy: MemoryPolicy::ClassBalanced, batch: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RingBuffer {
    capacity: usize,
    items: Dataset,
    policy: MemoryPolicy,
    frozen: bool,
    source_size: usize,
}

impl RingBuffer {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &Dataset {
        &self.items
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn source_size(&self) -> usize {
        self.source_size
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Concatenates per-task sub-buffers into one buffer, in the given order.
    pub fn concat(parts: &[RingBuffer]) -> Result<RingBuffer> {
        let first = parts.first().ok_or_else(|| Error::EmptyDataset("no sub-buffers to concatenate".into()))?;
        let items = Dataset::concat(parts.iter().map(|b| &b.items))?;
        Ok(RingBuffer {
            capacity: parts.iter().map(|b| b.capacity).sum(),
            items,
            policy: first.policy,
            frozen: true,
            source_size: parts.iter().map(|b| b.source_size).sum(),
        })
    }
}

/// Samples a buffer of at most `capacity` rows from `past`.
///
/// `Uniform` runs single-pass reservoir sampling over the rows in order, so
/// every row is retained with probability `min(1, capacity/|past|)`.
/// `ClassBalanced` runs an independent reservoir per class present in `past`
/// with quota `⌊capacity/K⌋`, plus one for the first `capacity mod K`
/// classes in ascending id. A class with fewer rows than its quota
/// contributes all of them and the unused slots go, one at a time in
/// ascending class order, to classes that still have rows left. Rows keep
/// their order in `past`.
pub fn build_memory(past: &Dataset, capacity: usize, policy: MemoryPolicy, seed: u64) -> Result<RingBuffer> {
    if capacity == 0 {
        return Err(Error::Config("memory capacity must be at least 1".into()));
    }
    let indices = match policy {
        MemoryPolicy::Uniform => {
            let all: Vec<usize> = (0..past.len()).collect();
            reservoir(&all, capacity, &mut rng::keyed_rng(&[seed, 0]))
        }
        MemoryPolicy::ClassBalanced => {
            let by_class: Vec<(usize, Vec<usize>)> =
                past.indices_by_class().into_iter().enumerate().filter(|(_, rows)| !rows.is_empty()).collect();
            let avail: Vec<usize> = by_class.iter().map(|(_, rows)| rows.len()).collect();
            let mut out = Vec::with_capacity(capacity);
            for ((class, rows), quota) in by_class.iter().zip(class_quotas(&avail, capacity)) {
                if quota == 0 {
                    continue;
                }
                let mut r = rng::keyed_rng(&[seed, 1, *class as u64]);
                out.extend(reservoir(rows, quota, &mut r));
            }
            out.sort_unstable();
            out
        }
    };
    Ok(RingBuffer { capacity, items: past.subset(&indices)?, policy, frozen: true, source_size: past.len() })
}

/// Per-class quotas for `capacity` slots over classes with `avail` rows each.
pub fn class_quotas(avail: &[usize], capacity: usize) -> Vec<usize> {
    let k = avail.len();
    if k == 0 {
        return Vec::new();
    }
    let mut quotas: Vec<usize> =
        (0..k).map(|rank| (capacity / k + usize::from(rank < capacity % k)).min(avail[rank])).collect();
    let mut left = capacity - quotas.iter().sum::<usize>();
    while left > 0 {
        let mut moved = false;
        for rank in 0..k {
            if left > 0 && quotas[rank] < avail[rank] {
                quotas[rank] += 1;
                left -= 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    quotas
}

/// Algorithm R over `rows`; keeps input order when everything fits.
fn reservoir<R: Rng>(rows: &[usize], capacity: usize, rng: &mut R) -> Vec<usize> {
    let mut kept: Vec<usize> = rows.iter().copied().take(capacity).collect();
    for (seen, &row) in rows.iter().enumerate().skip(capacity) {
        let slot = rng.random_range(0..=seen);
        if slot < capacity {
            kept[slot] = row;
        }
    }
    kept
}

/// Full-batch gradient on the buffer rows.
pub fn memory_gradient(model: &LossModel, params: &ParamVector, buffer: &RingBuffer) -> Result<ParamVector> {
    model.grad(params, &buffer.items)
}

/// Gradient on `batch` rows drawn without replacement from the buffer.
pub fn memory_gradient_minibatch<R: Rng>(
    model: &LossModel,
    params: &ParamVector,
    buffer: &RingBuffer,
    batch: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    if batch == 0 {
        return Err(Error::Config("memory batch must be at least 1".into()));
    }
    if batch >= buffer.len() {
        return memory_gradient(model, params, buffer);
    }
    let mut picked = index::sample(rng, buffer.len(), batch).into_vec();
    picked.sort_unstable();
    model.grad(params, &buffer.items.subset(&picked)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasDiagnostic {
    /// Memory gradient minus the full past-data gradient.
    pub bias: ParamVector,
    /// `||bias||² / ||∇f||²`; infinite when only the denominator vanishes.
    pub m_hat: f64,
}

pub fn bias_diagnostic(
    model: &LossModel,
    params: &ParamVector,
    buffer: &RingBuffer,
    past: &Dataset,
) -> Result<BiasDiagnostic> {
    let full = model.grad(params, past)?;
    let bias = &memory_gradient(model, params, buffer)? - &full;
    let m_hat = bias_ratio(bias.norm_sq(), full.norm_sq());
    Ok(BiasDiagnostic { bias, m_hat })
}

/// `num/den` with `0/0 = 0` and `x/0 = ∞`.
pub fn bias_ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}
