//! Round orchestration on the server: broadcast of the global gradients,
//! per-client adaptive rates, aggregation, and the forgetting diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{compose_update, ClientState, LocalRoundParams, LocalRoundResult, Prologue};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::memory::{self, MemoryConfig};
use crate::model::LossModel;
use crate::params::{weighted_sum, ParamVector};

/// Tolerance on `Σ p_i = 1`.
pub const WEIGHT_TOL: f64 = 1e-9;

/// Which per-client surrogate of Γ the adaptive rates minimize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptCase {
    #[default]
    Average,
    Worst,
}

/// Current-task rate within a task phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BetaSchedule {
    /// Use the configured β.
    #[default]
    Constant,
    /// `β = c/√T` with `T` the planned rounds of the task.
    InvSqrt { c: f64 },
}

impl BetaSchedule {
    pub fn resolve(&self, base: f64, rounds: usize) -> f64 {
        match self {
            BetaSchedule::Constant => base,
            BetaSchedule::InvSqrt { c } => c / (rounds.max(1) as f64).sqrt(),
        }
    }
}

/// How a client moves during its local round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalRule {
    /// Drift-corrected IAG steps.
    Iag,
    /// Plain local gradient descent (FedAvg-style).
    Plain,
}

/// Sign class of `Λ_{t,i}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Interference,
    Transference,
}

impl Regime {
    /// `Λ = 0` counts as interference, where the correction vanishes.
    pub fn of(lambda: f64) -> Regime {
        if lambda > 0.0 {
            Regime::Transference
        } else {
            Regime::Interference
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedRates {
    pub alpha: f64,
    pub beta: f64,
    pub regime: Regime,
    /// A denominator vanished (or `Lα ≥ 1`) and the base rates were kept.
    pub degenerate: bool,
}

/// Per-client rates minimizing the forgetting surrogate.
///
/// Interference (`Λ ≤ 0`): `α_i = α(1 − Λ/||∇̃f||²)`, `β_i = β`.
/// Transference (`Λ > 0`): `α_i = α`, `β_i = (1 − Lα)Λ / (L·p_i·||S_i||²)`,
/// further divided by `N` in the worst case.
#[allow(clippy::too_many_arguments)]
pub fn adap_lr(
    lambda: f64,
    f_tilde_norm_sq: f64,
    s_norm_sq: f64,
    alpha: f64,
    beta: f64,
    l: f64,
    p_i: f64,
    n: usize,
    case: AdaptCase,
) -> AdaptedRates {
    let regime = Regime::of(lambda);
    let base = AdaptedRates { alpha, beta, regime, degenerate: true };
    match regime {
        Regime::Interference => {
            if lambda == 0.0 {
                return AdaptedRates { degenerate: false, ..base };
            }
            if f_tilde_norm_sq.is_nan() || f_tilde_norm_sq <= 0.0 {
                return base;
            }
            AdaptedRates { alpha: alpha * (1.0 - lambda / f_tilde_norm_sq), beta, regime, degenerate: false }
        }
        Regime::Transference => {
            let shrink = 1.0 - l * alpha;
            let mut denom = l * p_i * s_norm_sq;
            if case == AdaptCase::Worst {
                denom *= n as f64;
            }
            if denom.is_nan() || shrink.is_nan() || denom <= 0.0 || shrink <= 0.0 {
                return base;
            }
            AdaptedRates { alpha, beta: shrink * lambda / denom, regime, degenerate: false }
        }
    }
}

/// `∇g = Σ p_i ∇g_i` and `∇̃f = Σ p_i ∇̃f_i`, summed in ascending client order.
pub fn broadcast_grads(prologues: &[Prologue], weights: &[f64]) -> Result<(ParamVector, ParamVector)> {
    if prologues.len() != weights.len() || prologues.is_empty() {
        return Err(Error::Config(format!("expected {} prologue results, got {}", weights.len(), prologues.len())));
    }
    let dim = prologues[0].grad_g.len();
    let g = weighted_sum(dim, weights.iter().copied().zip(prologues.iter().map(|p| &p.grad_g)));
    let f = weighted_sum(dim, weights.iter().copied().zip(prologues.iter().map(|p| &p.grad_f_tilde)));
    Ok((g, f))
}

/// `x_{t+1} = Σ p_i Δx_i`.
pub fn server_aggregate(deltas: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if deltas.len() != weights.len() || deltas.is_empty() {
        return Err(Error::Config(format!("expected {} client updates, got {}", weights.len(), deltas.len())));
    }
    Ok(weighted_sum(deltas[0].len(), weights.iter().copied().zip(deltas.iter())))
}

/// `Γ = (Lβ²/2)||W||² − β(1 − Lα)⟨∇̃f, W⟩` with `W = Σ_i p_i S_i`.
pub fn gamma(beta: f64, alpha: f64, l: f64, weighted_s: &ParamVector, f_tilde: &ParamVector) -> f64 {
    0.5 * l * beta * beta * weighted_s.norm_sq() - beta * (1.0 - l * alpha) * f_tilde.dot(weighted_s)
}

/// Per-client share of Γ at rates `(α_i, β_i)`:
/// `(Lβ_i²/2)·c·||S_i||² − β_i(1 − Lα_i)⟨∇̃f, S_i⟩`, where `c = p_i`
/// (average case) or `p_i·N` (worst case).
#[allow(clippy::too_many_arguments)]
pub fn gamma_surrogate(
    case: AdaptCase,
    alpha_i: f64,
    beta_i: f64,
    l: f64,
    p_i: f64,
    n: usize,
    s_i: &ParamVector,
    f_tilde: &ParamVector,
) -> f64 {
    let c = match case {
        AdaptCase::Average => p_i,
        AdaptCase::Worst => p_i * n as f64,
    };
    0.5 * l * beta_i * beta_i * c * s_i.norm_sq() - beta_i * (1.0 - l * alpha_i) * f_tilde.dot(s_i)
}

/// Overfitting term `B = (Lα² − α)⟨∇f, b⟩ + β⟨b, W⟩`.
pub fn overfit_b(
    alpha: f64,
    beta: f64,
    l: f64,
    grad_f_full: &ParamVector,
    bias: &ParamVector,
    weighted_s: &ParamVector,
) -> f64 {
    (l * alpha * alpha - alpha) * grad_f_full.dot(bias) + beta * bias.dot(weighted_s)
}

/// Checks that client weights are positive and sum to one.
pub fn check_weights(clients: &[ClientState]) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Config("at least one client is required".into()));
    }
    let total: f64 = clients.iter().map(|c| c.weight()).sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::Config(format!("client weights sum to {total}, expected 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    /// Base memory rate α.
    pub alpha: f64,
    /// Base current-task rate β (already resolved through the schedule).
    pub beta: f64,
    /// Smoothness constant used by the adaptive rates and Γ.
    pub l: f64,
    pub epochs: usize,
    pub case: AdaptCase,
    pub adaptive: bool,
    pub rule: LocalRule,
    /// Apply the memory term; when false the update drops `α∇̃f` but the
    /// memory gradient is still computed for diagnostics.
    pub use_memory: bool,
    pub memory_batch: Option<usize>,
    /// Compute the full-data diagnostics (m̂, B, ||∇f||², ||∇h||²).
    pub diagnostics: bool,
    pub track_error: bool,
    pub record_steps: bool,
    pub verify: bool,
}

impl ServerConfig {
    pub fn new(alpha: f64, beta: f64, l: f64, epochs: usize) -> Self {
        ServerConfig {
            alpha,
            beta,
            l,
            epochs,
            case: AdaptCase::Average,
            adaptive: false,
            rule: LocalRule::Iag,
            use_memory: true,
            memory_batch: None,
            diagnostics: true,
            track_error: false,
            record_steps: false,
            verify: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(Error::Config(format!("smoothness L must be positive, got {}", self.l)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("local epochs E must be at least 1".into()));
        }
        Ok(())
    }
}

/// Diagnostics for one communication round, all evaluated at `x_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub t: usize,
    pub task: usize,
    /// Memory rate actually in force (0 when the memory term is off).
    pub alpha: f64,
    pub beta: f64,
    /// Γ(t) at the base rates.
    pub gamma: f64,
    /// `Σ p_i Γ_i` at the rates used for the update.
    pub gamma_ad: f64,
    /// `Σ p_i Γ_i` at the base rates, the comparison point for `gamma_ad`.
    pub gamma_base_surrogate: f64,
    pub lambda: Vec<f64>,
    pub rates: Vec<(f64, f64)>,
    pub degenerate: Vec<bool>,
    pub n_transfer: usize,
    pub n_interfere: usize,
    /// `||b||²/||∇f||²` for the global memory gradient.
    pub m_hat: Option<f64>,
    /// Set when `m_hat ≥ 1`.
    pub m_hat_exceeds_one: bool,
    pub overfit_b: Option<f64>,
    pub grad_f_sq: Option<f64>,
    pub grad_g_sq: f64,
    /// Joint objective on all past and current data.
    pub grad_h_sq: Option<f64>,
    /// Joint objective restricted to memory and current data.
    pub grad_h_hat_sq: Option<f64>,
    /// `||∇̃f||/||∇g||`.
    pub memory_grad_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub x_next: ParamVector,
    pub report: RoundReport,
    pub grad_g: ParamVector,
    pub f_tilde: ParamVector,
    pub client_results: Vec<LocalRoundResult>,
    pub deltas: Vec<ParamVector>,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    x: ParamVector,
    config: ServerConfig,
    round: usize,
    task: usize,
}

impl ServerState {
    pub fn new(x0: ParamVector, config: ServerConfig) -> Result<Self> {
        config.validate()?;
        if !x0.is_finite() {
            return Err(Error::NonFinite("initial parameters".into()));
        }
        Ok(ServerState { x: x0, config, round: 0, task: 0 })
    }

    pub fn params(&self) -> &ParamVector {
        &self.x
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ServerConfig {
        &mut self.config
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn task(&self) -> usize {
        self.task
    }

    /// One communication round: prologue, broadcast, local rounds, rate
    /// adaptation, composition, and aggregation.
    pub fn run_round(&mut self, clients: &mut [ClientState], model: &LossModel) -> Result<RoundOutcome> {
        check_weights(clients)?;
        let cfg = self.config.clone();
        cfg.validate()?;
        let t = self.round;
        let x_t = self.x.clone();
        let weights: Vec<f64> = clients.iter().map(|c| c.weight()).collect();
        let n = clients.len();

        let prologues =
            clients.par_iter().map(|c| c.prologue(model, &x_t, cfg.memory_batch, t)).collect::<Result<Vec<_>>>()?;
        let (grad_g, f_tilde) = broadcast_grads(&prologues, &weights)?;
        let has_memory = prologues.iter().all(|p| p.has_memory);
        let memory_on = cfg.use_memory && has_memory;
        let alpha = if memory_on { cfg.alpha } else { 0.0 };

        let local = LocalRoundParams {
            beta: cfg.beta,
            epochs: cfg.epochs,
            round: t,
            track_error: cfg.track_error,
            record_steps: cfg.record_steps,
            verify: cfg.verify,
        };
        let results = clients
            .par_iter_mut()
            .zip(prologues.par_iter())
            .map(|(c, p)| match cfg.rule {
                LocalRule::Iag => c.local_round(model, &x_t, &grad_g, p, &local),
                LocalRule::Plain => c.plain_local_round(model, &x_t, p, &local),
            })
            .collect::<Result<Vec<_>>>()?;

        let f_sq = f_tilde.norm_sq();
        let mut lambda = Vec::with_capacity(n);
        let mut rates = Vec::with_capacity(n);
        let mut degenerate = Vec::with_capacity(n);
        let (mut n_transfer, mut n_interfere) = (0, 0);
        let (mut gamma_ad, mut gamma_base) = (0.0, 0.0);
        for (res, &p_i) in results.iter().zip(&weights) {
            let lam = if has_memory { f_tilde.dot(&res.s_sum) } else { 0.0 };
            let adapted = if cfg.adaptive && memory_on {
                adap_lr(lam, f_sq, res.s_sum.norm_sq(), alpha, cfg.beta, cfg.l, p_i, n, cfg.case)
            } else {
                AdaptedRates { alpha, beta: cfg.beta, regime: Regime::of(lam), degenerate: false }
            };
            if has_memory {
                match adapted.regime {
                    Regime::Transference => n_transfer += 1,
                    Regime::Interference => n_interfere += 1,
                }
            }
            let base = gamma_surrogate(cfg.case, alpha, cfg.beta, cfg.l, p_i, n, &res.s_sum, &f_tilde);
            let used = gamma_surrogate(cfg.case, adapted.alpha, adapted.beta, cfg.l, p_i, n, &res.s_sum, &f_tilde);
            gamma_base += p_i * base;
            gamma_ad += p_i * used;
            lambda.push(lam);
            rates.push((adapted.alpha, adapted.beta));
            degenerate.push(adapted.degenerate);
        }

        let deltas: Vec<ParamVector> = results
            .iter()
            .zip(&rates)
            .map(|(res, &(a_i, b_i))| compose_update(res, &x_t, &grad_g, &f_tilde, a_i, b_i, cfg.beta))
            .collect();
        let x_next = server_aggregate(&deltas, &weights)?;
        if !x_next.is_finite() {
            return Err(Error::NonFinite(format!("server aggregation in round {t}")));
        }

        let dim = x_t.len();
        let weighted_s = weighted_sum(dim, weights.iter().copied().zip(results.iter().map(|r| &r.s_sum)));
        let grad_g_sq = grad_g.norm_sq();
        let mut report = RoundReport {
            t,
            task: self.task,
            alpha,
            beta: cfg.beta,
            gamma: gamma(cfg.beta, alpha, cfg.l, &weighted_s, &f_tilde),
            gamma_ad,
            gamma_base_surrogate: gamma_base,
            lambda,
            rates,
            degenerate,
            n_transfer,
            n_interfere,
            m_hat: None,
            m_hat_exceeds_one: false,
            overfit_b: None,
            grad_f_sq: None,
            grad_g_sq,
            grad_h_sq: None,
            grad_h_hat_sq: None,
            memory_grad_ratio: memory::bias_ratio(f_sq, grad_g_sq).sqrt(),
        };
        if cfg.diagnostics {
            self.fill_diagnostics(&mut report, clients, model, &x_t, &f_tilde, &weighted_s, alpha)?;
        }

        self.x = x_next.clone();
        self.round += 1;
        Ok(RoundOutcome { x_next, report, grad_g, f_tilde, client_results: results, deltas })
    }

    #[allow(clippy::too_many_arguments)]
    fn fill_diagnostics(
        &self,
        report: &mut RoundReport,
        clients: &[ClientState],
        model: &LossModel,
        x_t: &ParamVector,
        f_tilde: &ParamVector,
        weighted_s: &ParamVector,
        alpha: f64,
    ) -> Result<()> {
        let dim = x_t.len();
        let per_client = clients.par_iter().map(|c| client_diagnostics(c, model, x_t)).collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = clients.iter().map(|c| c.weight()).collect();
        let h = weighted_sum(dim, weights.iter().copied().zip(per_client.iter().map(|d| &d.h)));
        let h_hat = weighted_sum(dim, weights.iter().copied().zip(per_client.iter().map(|d| &d.h_hat)));
        report.grad_h_sq = Some(h.norm_sq());
        report.grad_h_hat_sq = Some(h_hat.norm_sq());
        if per_client.iter().all(|d| d.f.is_some()) {
            let f = weighted_sum(dim, weights.iter().copied().zip(per_client.iter().filter_map(|d| d.f.as_ref())));
            let bias = f_tilde - &f;
            let m_hat = memory::bias_ratio(bias.norm_sq(), f.norm_sq());
            report.grad_f_sq = Some(f.norm_sq());
            report.m_hat = Some(m_hat);
            report.m_hat_exceeds_one = m_hat >= 1.0;
            report.overfit_b = Some(overfit_b(alpha, self.config.beta, self.config.l, &f, &bias, weighted_s));
        }
        Ok(())
    }

    /// Closes the current task: every client archives its data, rebuilds its
    /// buffer over all past tasks, and installs its shard of the next task.
    pub fn task_transition(
        &mut self,
        clients: &mut [ClientState],
        shards: Vec<Dataset>,
        memory: &MemoryConfig,
    ) -> Result<()> {
        if shards.len() != clients.len() {
            return Err(Error::Config(format!("{} shards for {} clients", shards.len(), clients.len())));
        }
        for (c, shard) in clients.iter_mut().zip(shards) {
            c.advance_task(shard, memory)?;
        }
        self.task += 1;
        Ok(())
    }
}

struct ClientDiagnostics {
    f: Option<ParamVector>,
    h: ParamVector,
    h_hat: ParamVector,
}

fn client_diagnostics(c: &ClientState, model: &LossModel, x: &ParamVector) -> Result<ClientDiagnostics> {
    let f = c.past_data().map(|past| model.grad(x, past)).transpose()?;
    let h = match c.past_data() {
        Some(past) => model.grad(x, &Dataset::concat([past, c.current()])?)?,
        None => model.grad(x, c.current())?,
    };
    let h_hat = match c.memory() {
        Some(buf) => model.grad(x, &Dataset::concat([buf.items(), c.current()])?)?,
        None => model.grad(x, c.current())?,
    };
    Ok(ClientDiagnostics { f, h, h_hat })
}
