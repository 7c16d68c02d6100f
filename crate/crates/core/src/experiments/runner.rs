//! Runs a configured experiment over its task stream.

use serde::Serialize;

use crate::client::ClientState;
use crate::data::Dataset;
use crate::datagen::{self, PartitionSpec};
use crate::error::{Error, Result};
use crate::model::LossModel;
use crate::params::ParamVector;
use crate::server::{RoundReport, ServerConfig, ServerState};

use super::config::{DataSpec, EvalMode, ExperimentConfig, Smoothness, WeightRule, SCHEMA_VERSION};
use super::metrics::{self, AccuracyMatrix};
use super::trace::TraceRow;

/// Everything derived from the config before the first round.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub model: LossModel,
    pub smoothness: f64,
    /// Training rows per task (pooled over clients).
    pub train: Vec<Dataset>,
    /// Held-out rows per task, pooled over clients.
    pub test: Vec<Dataset>,
    /// `shards[s][i]`: client `i`'s training data for task `s`.
    pub shards: Vec<Vec<Dataset>>,
    pub task_classes: Vec<Vec<usize>>,
    pub x0: ParamVector,
}

fn load_stream(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    match &cfg.data {
        DataSpec::SplitGaussians { num_tasks, classes_per_task, dim, n_per_class, separation } => {
            Ok(datagen::make_split_gaussians(*num_tasks, *classes_per_task, *dim, *n_per_class, *separation, cfg.seed)?
                .tasks)
        }
        DataSpec::PermutedFeatures { base_csv, num_tasks } => {
            let base = datagen::read_csv(base_csv, None)?;
            Ok(datagen::make_permuted_features(&base, *num_tasks, cfg.seed)?.tasks)
        }
        DataSpec::Csv { tasks, num_classes } => {
            let raw = tasks.iter().map(|p| datagen::read_csv(p, None)).collect::<Result<Vec<_>>>()?;
            let k = num_classes.unwrap_or_else(|| raw.iter().map(|d| d.num_classes()).max().unwrap_or(1));
            let dim = raw[0].dim();
            raw.into_iter()
                .map(|d| {
                    if d.dim() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, got: d.dim() });
                    }
                    d.with_num_classes(k)
                })
                .collect()
        }
    }
}

/// Builds the data, partitions, model, smoothness constant and initial point.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let stream = load_stream(cfg)?;
    let first = &stream[0];
    let model = LossModel::new(cfg.model.kind, first.dim(), first.num_classes(), cfg.model.l2)?;
    let spec = PartitionSpec { clients: cfg.partition.clients, zeta: cfg.partition.zeta, seed: cfg.seed };

    let mut train = Vec::with_capacity(stream.len());
    let mut test = Vec::with_capacity(stream.len());
    let mut shards = Vec::with_capacity(stream.len());
    let mut task_classes = Vec::with_capacity(stream.len());
    for (s, task) in stream.iter().enumerate() {
        let counts = task.class_counts();
        task_classes.push((0..counts.len()).filter(|&c| counts[c] > 0).collect());
        let (tr, te) = datagen::holdout_split(task, cfg.holdout, cfg.seed, s as u64)?;
        let parts = datagen::dirichlet_assignment(&tr, &spec, s as u64)?
            .iter()
            .map(|idx| tr.subset(idx))
            .collect::<Result<Vec<_>>>()?;
        train.push(tr);
        test.push(te);
        shards.push(parts);
    }

    let smoothness = match cfg.smoothness {
        Smoothness::Fixed(l) => l,
        Smoothness::Estimate(_) => {
            let mut l: f64 = 0.0;
            for d in &train {
                l = l.max(model.component_smoothness(d)?);
            }
            if l.is_nan() || l <= 0.0 {
                return Err(Error::Config("analytic smoothness is zero; configure L explicitly".into()));
            }
            l
        }
    };
    cfg.check_alpha_bound(smoothness)?;
    let x0 = model.init_params(cfg.seed);
    Ok(Prepared { model, smoothness, train, test, shards, task_classes, x0 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub last: f64,
}

impl Stats {
    fn of(values: &[f64]) -> Option<Stats> {
        let last = *values.last()?;
        Some(Stats {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            last,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub algorithm: String,
    pub seed: u64,
    pub num_tasks: usize,
    pub rounds_per_task: usize,
    pub clients: usize,
    pub smoothness: f64,
    pub avg_accuracy: Option<f64>,
    pub forgetting: Option<f64>,
    pub gamma: Option<Stats>,
    pub gamma_ad: Option<Stats>,
    pub n_transfer_total: usize,
    pub n_interfere_total: usize,
    pub degenerate_rates_total: usize,
    pub m_hat_exceeds_one_rounds: usize,
    pub final_grad_g_sq: Option<f64>,
    pub final_grad_f_sq: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub trace: Vec<TraceRow>,
    pub reports: Vec<RoundReport>,
    /// `None` for regression models.
    pub accuracy: Option<AccuracyMatrix>,
    pub summary: Summary,
    pub final_params: ParamVector,
}

fn client_weights(shards: &[Dataset], rule: WeightRule) -> Vec<f64> {
    let n = shards.len();
    match rule {
        WeightRule::Uniform => vec![1.0 / n as f64; n],
        WeightRule::Size => {
            let total: usize = shards.iter().map(|d| d.len()).sum();
            shards.iter().map(|d| d.len() as f64 / total as f64).collect()
        }
    }
}

fn evaluate(
    prep: &Prepared,
    mode: EvalMode,
    params: &ParamVector,
    seen: usize,
    num_tasks: usize,
) -> Result<Vec<Option<f64>>> {
    if !prep.model.is_classifier() {
        return Ok(vec![None; num_tasks]);
    }
    (0..num_tasks)
        .map(|j| {
            if j > seen {
                return Ok(None);
            }
            let acc = match mode {
                EvalMode::SharedHead => prep.model.accuracy(params, &prep.test[j])?,
                EvalMode::TaskHead => prep.model.accuracy_within(params, &prep.test[j], &prep.task_classes[j])?,
            };
            Ok(Some(acc))
        })
        .collect()
}

fn trace_row(report: &RoundReport, acc: Vec<Option<f64>>) -> TraceRow {
    let has_lambda = report.n_transfer + report.n_interfere > 0;
    let lambda_min = report.lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = report.lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    TraceRow {
        t: report.t,
        task: report.task,
        gamma: report.gamma,
        gamma_ad: report.gamma_ad,
        lambda_min: has_lambda.then_some(lambda_min),
        lambda_max: has_lambda.then_some(lambda_max),
        n_transfer: report.n_transfer,
        n_interfere: report.n_interfere,
        grad_f_sq: report.grad_f_sq,
        grad_g_sq: report.grad_g_sq,
        grad_h_sq: report.grad_h_sq,
        m_hat: report.m_hat,
        acc,
    }
}

/// Runs the experiment, handing every trace row to `on_round` as soon as the
/// round finishes.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut on_round: F) -> Result<RunArtifacts>
where
    F: FnMut(&TraceRow) -> Result<()>,
{
    let prep = prepare(cfg)?;
    let num_tasks = cfg.num_tasks();
    let n = cfg.partition.clients;
    let (alpha0, beta0) = cfg.task_rates_resolved(0);
    let mut server_cfg = ServerConfig::new(alpha0, beta0, prep.smoothness, cfg.epochs);
    server_cfg.case = cfg.adapt_case;
    server_cfg.adaptive = cfg.algorithm.adaptive();
    server_cfg.rule = cfg.algorithm.rule();
    server_cfg.use_memory = cfg.algorithm.uses_memory();
    server_cfg.memory_batch = cfg.memory.batch;
    server_cfg.diagnostics = cfg.diagnostics;
    let mut server = ServerState::new(prep.x0.clone(), server_cfg)?;

    let weights = client_weights(&prep.shards[0], cfg.partition.weights);
    let mut clients = prep.shards[0]
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(i, (d, &w))| ClientState::new(i, w, d.clone(), cfg.seed))
        .collect::<Result<Vec<_>>>()?;

    let mut matrix = prep.model.is_classifier().then(|| AccuracyMatrix::new(num_tasks));
    let mut trace = Vec::with_capacity(num_tasks * cfg.rounds);
    let mut reports = Vec::with_capacity(num_tasks * cfg.rounds);
    for s in 0..num_tasks {
        if s > 0 {
            server.task_transition(&mut clients, prep.shards[s].clone(), &cfg.memory)?;
            for (c, w) in clients.iter_mut().zip(client_weights(&prep.shards[s], cfg.partition.weights)) {
                c.set_weight(w)?;
            }
        }
        let (alpha, beta) = cfg.task_rates_resolved(s);
        server.config_mut().alpha = alpha;
        server.config_mut().beta = beta;

        let mut acc = vec![None; num_tasks];
        for _ in 0..cfg.rounds {
            let outcome = server.run_round(&mut clients, &prep.model)?;
            acc = evaluate(&prep, cfg.eval, &outcome.x_next, s, num_tasks)?;
            let row = trace_row(&outcome.report, acc.clone());
            on_round(&row)?;
            trace.push(row);
            reports.push(outcome.report);
        }
        if let Some(m) = matrix.as_mut() {
            for (j, a) in acc.iter().enumerate().take(s + 1) {
                m.set(s, j, a.expect("seen task evaluated"))?;
            }
        }
    }

    let summary = summarize(cfg, &prep, &reports, matrix.as_ref(), n)?;
    Ok(RunArtifacts {
        config: cfg.clone(),
        trace,
        reports,
        accuracy: matrix,
        summary,
        final_params: server.params().clone(),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    run_experiment_with(cfg, |_| Ok(()))
}

fn summarize(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    reports: &[RoundReport],
    matrix: Option<&AccuracyMatrix>,
    clients: usize,
) -> Result<Summary> {
    let gammas: Vec<f64> = reports.iter().map(|r| r.gamma).collect();
    let gammas_ad: Vec<f64> = reports.iter().map(|r| r.gamma_ad).collect();
    let (avg_accuracy, forgetting) = match matrix {
        Some(m) => (Some(metrics::avg_accuracy(m)?), if m.tasks() >= 2 { Some(metrics::forgetting(m)?) } else { None }),
        None => (None, None),
    };
    Ok(Summary {
        schema_version: SCHEMA_VERSION,
        algorithm: cfg.algorithm.name().to_string(),
        seed: cfg.seed,
        num_tasks: cfg.num_tasks(),
        rounds_per_task: cfg.rounds,
        clients,
        smoothness: prep.smoothness,
        avg_accuracy,
        forgetting,
        gamma: Stats::of(&gammas),
        gamma_ad: Stats::of(&gammas_ad),
        n_transfer_total: reports.iter().map(|r| r.n_transfer).sum(),
        n_interfere_total: reports.iter().map(|r| r.n_interfere).sum(),
        degenerate_rates_total: reports.iter().map(|r| r.degenerate.iter().filter(|&&d| d).count()).sum(),
        m_hat_exceeds_one_rounds: reports.iter().filter(|r| r.m_hat_exceeds_one).count(),
        final_grad_g_sq: reports.last().map(|r| r.grad_g_sq),
        final_grad_f_sq: reports.last().and_then(|r| r.grad_f_sq),
    })
}

/// Runs `f` inside a dedicated rayon pool with `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
