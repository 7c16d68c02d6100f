//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryConfig;
use crate::model::ModelKind;
use crate::server::{AdaptCase, BetaSchedule, LocalRule};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    CflagFixed,
    CflagAdaptive,
    FineFl,
    Fedtrack,
}

impl Algorithm {
    pub fn rule(self) -> LocalRule {
        match self {
            Algorithm::FineFl => LocalRule::Plain,
            _ => LocalRule::Iag,
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Algorithm::CflagFixed | Algorithm::CflagAdaptive)
    }

    pub fn adaptive(self) -> bool {
        self == Algorithm::CflagAdaptive
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::CflagFixed => "cflag-fixed",
            Algorithm::CflagAdaptive => "cflag-adaptive",
            Algorithm::FineFl => "fine-fl",
            Algorithm::Fedtrack => "fedtrack",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    #[serde(default)]
    pub l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    SplitGaussians {
        num_tasks: usize,
        classes_per_task: usize,
        dim: usize,
        n_per_class: usize,
        separation: f64,
    },
    PermutedFeatures {
        base_csv: PathBuf,
        num_tasks: usize,
    },
    /// One CSV file per task, read in order.
    Csv {
        tasks: Vec<PathBuf>,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl DataSpec {
    pub fn num_tasks(&self) -> usize {
        match self {
            DataSpec::SplitGaussians { num_tasks, .. } | DataSpec::PermutedFeatures { num_tasks, .. } => *num_tasks,
            DataSpec::Csv { tasks, .. } => tasks.len(),
        }
    }

    /// Resolves relative CSV paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        match self {
            DataSpec::SplitGaussians { .. } => {}
            DataSpec::PermutedFeatures { base_csv, .. } => {
                if base_csv.is_relative() {
                    *base_csv = base.join(&*base_csv);
                }
            }
            DataSpec::Csv { tasks, .. } => {
                for p in tasks.iter_mut().filter(|p| p.is_relative()) {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRule {
    /// `p_i = |C^i| / |C|`.
    #[default]
    Size,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub zeta: f64,
    #[serde(default)]
    pub weights: WeightRule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnalyticTag {
    #[serde(rename = "analytic")]
    Analytic,
}

/// Either a fixed constant or `"analytic"` (per-sample bound from the data).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Smoothness {
    Fixed(f64),
    Estimate(AnalyticTag),
}

impl Default for Smoothness {
    fn default() -> Self {
        Smoothness::Fixed(5.0)
    }
}

/// Which outputs compete in the argmax at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// All classes of the stream.
    #[default]
    SharedHead,
    /// Only the classes of the evaluated task.
    TaskHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRates {
    pub task: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
}

fn default_holdout() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataSpec,
    pub partition: PartitionConfig,
    pub algorithm: Algorithm,
    /// Communication rounds per task.
    pub rounds: usize,
    /// Local steps per round.
    pub epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub beta_schedule: BetaSchedule,
    #[serde(default)]
    pub smoothness: Smoothness,
    /// Bias bound `m` assumed when checking `α < 2/(L(1+m))`.
    #[serde(default)]
    pub m_bound: f64,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub adapt_case: AdaptCase,
    #[serde(default)]
    pub task_rates: Vec<TaskRates>,
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    #[serde(default)]
    pub eval: EvalMode,
    #[serde(default = "default_true")]
    pub diagnostics: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.data.rebase(dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn num_tasks(&self) -> usize {
        self.data.num_tasks()
    }

    /// `(α, β)` for task `s` before the β schedule is applied.
    pub fn task_base_rates(&self, s: usize) -> (f64, f64) {
        let over = self.task_rates.iter().rev().find(|r| r.task == s);
        let alpha = over.and_then(|r| r.alpha).unwrap_or(self.alpha);
        let beta = over.and_then(|r| r.beta).unwrap_or(self.beta);
        (alpha, beta)
    }

    /// `(α, β)` in force during task `s`.
    pub fn task_rates_resolved(&self, s: usize) -> (f64, f64) {
        let (alpha, beta) = self.task_base_rates(s);
        (alpha, self.beta_schedule.resolve(beta, self.rounds))
    }

    /// Checks everything that does not require the data.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.num_tasks() == 0 {
            return Err(Error::Config("at least one task is required".into()));
        }
        if self.partition.clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        if !(self.partition.zeta > 0.0 && self.partition.zeta.is_finite()) {
            return Err(Error::Config(format!("zeta must be positive, got {}", self.partition.zeta)));
        }
        if self.rounds == 0 || self.epochs == 0 {
            return Err(Error::Config("rounds and epochs must be at least 1".into()));
        }
        if !(self.model.l2 >= 0.0 && self.model.l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be nonnegative, got {}", self.model.l2)));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config(format!("holdout must lie in (0, 1), got {}", self.holdout)));
        }
        if !(self.m_bound >= 0.0 && self.m_bound < 1.0) {
            return Err(Error::Config(format!("m_bound must lie in [0, 1), got {}", self.m_bound)));
        }
        if self.memory.per_task == 0 {
            return Err(Error::Config("memory.per_task must be at least 1".into()));
        }
        if self.memory.batch == Some(0) {
            return Err(Error::Config("memory.batch must be at least 1 when set".into()));
        }
        if let BetaSchedule::InvSqrt { c } = self.beta_schedule {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("beta schedule constant must be positive, got {c}")));
            }
        }
        match self.smoothness {
            Smoothness::Fixed(l) if !(l > 0.0 && l.is_finite()) => {
                return Err(Error::Config(format!("smoothness must be positive, got {l}")));
            }
            Smoothness::Estimate(_) if matches!(self.model.kind, ModelKind::Mlp { .. }) => {
                return Err(Error::Config("the mlp model needs an explicit smoothness constant".into()));
            }
            _ => {}
        }
        if let ModelKind::Mlp { hidden_dim: 0 } = self.model.kind {
            return Err(Error::Config("mlp hidden_dim must be at least 1".into()));
        }
        for s in 0..self.num_tasks() {
            let (alpha, beta) = self.task_rates_resolved(s);
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return Err(Error::Config(format!("task {s}: alpha must be nonnegative, got {alpha}")));
            }
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Config(format!("task {s}: beta must be positive, got {beta}")));
            }
        }
        if let DataSpec::SplitGaussians { classes_per_task, dim, n_per_class, separation, .. } = self.data {
            if classes_per_task == 0 || dim == 0 || n_per_class == 0 {
                return Err(Error::Config("split-gaussian counts must all be at least 1".into()));
            }
            if !(separation > 0.0 && separation.is_finite()) {
                return Err(Error::Config(format!("separation must be positive, got {separation}")));
            }
        }
        if let Smoothness::Fixed(l) = self.smoothness {
            self.check_alpha_bound(l)?;
        }
        Ok(())
    }

    /// The memory rate must satisfy `α < 2/(L(1+m))` whenever the memory
    /// term is applied.
    pub fn check_alpha_bound(&self, l: f64) -> Result<()> {
        if !self.algorithm.uses_memory() {
            return Ok(());
        }
        let bound = 2.0 / (l * (1.0 + self.m_bound));
        for s in 1..self.num_tasks() {
            let (alpha, _) = self.task_rates_resolved(s);
            if alpha >= bound {
                return Err(Error::Config(format!(
                    "task {s}: alpha = {alpha} violates the step-size precondition alpha < 2/(L(1+m)) = {bound} \
                     (L = {l}, m = {})",
                    self.m_bound
                )));
            }
        }
        Ok(())
    }
}
