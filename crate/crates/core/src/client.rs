//! One client's side of a round: the full-gradient prologue, `E` local IAG
//! steps, and composition of the transmitted update.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::iag::IagState;
use crate::memory::{self, MemoryConfig, RingBuffer};
use crate::model::LossModel;
use crate::params::ParamVector;
use crate::rng;

#[derive(Clone, Debug)]
pub struct ClientState {
    id: usize,
    weight: f64,
    current: Dataset,
    memory: Option<RingBuffer>,
    past_tasks: Vec<Dataset>,
    past_pool: Option<Dataset>,
    iag: Option<IagState>,
    seed: u64,
    task: usize,
}

/// Gradients a client reports before its local steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Prologue {
    /// `∇g_i(x_t)` on the current-task data.
    pub grad_g: ParamVector,
    /// `∇̃f_i(x_t)` on the replay buffer; zero when there is no buffer yet.
    pub grad_f_tilde: ParamVector,
    pub has_memory: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalRoundParams {
    pub beta: f64,
    pub epochs: usize,
    pub round: usize,
    /// Evaluate `||∇̃g_i − ∇g_i(x_{t,k})||` at every step (one extra full gradient each).
    pub track_error: bool,
    /// Keep every iterate, τ snapshot and delayed gradient.
    pub record_steps: bool,
    /// Recompute the IAG aggregate after each refresh and fail on drift.
    pub verify: bool,
}

impl LocalRoundParams {
    pub fn new(beta: f64, epochs: usize, round: usize) -> Self {
        LocalRoundParams { beta, epochs, round, track_error: false, record_steps: false, verify: false }
    }
}

/// Snapshot of local step `k`, taken after the refresh and before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalStep {
    pub iterate: ParamVector,
    pub sample: Option<usize>,
    pub tau: Vec<usize>,
    pub delayed: ParamVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalRoundResult {
    /// `x^i_{t,E}`.
    pub x_end: ParamVector,
    /// `S_i`, the sum of the delayed aggregates used at each local step.
    pub s_sum: ParamVector,
    pub g_i_at_xt: ParamVector,
    pub f_tilde_i_at_xt: ParamVector,
    /// `||x^i_{t,k} − x_t||` for `k = 1..=E`.
    pub drift_norms: Vec<f64>,
    /// Staleness error at each step `k = 0..E` (empty unless tracked).
    pub grad_errors: Vec<f64>,
    /// Component sampled at each step `k ≥ 1`.
    pub samples: Vec<usize>,
    pub steps: Vec<LocalStep>,
}

impl LocalRoundResult {
    pub fn epochs(&self) -> usize {
        self.drift_norms.len()
    }
}

impl ClientState {
    pub fn new(id: usize, weight: f64, current: Dataset, seed: u64) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::Config(format!("client {id}: weight {weight} outside (0, 1]")));
        }
        Ok(ClientState {
            id,
            weight,
            current,
            memory: None,
            past_tasks: Vec::new(),
            past_pool: None,
            iag: None,
            seed,
            task: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn set_weight(&mut self, weight: f64) -> Result<()> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::Config(format!("client {}: weight {weight} outside (0, 1]", self.id)));
        }
        self.weight = weight;
        Ok(())
    }

    pub fn current(&self) -> &Dataset {
        &self.current
    }

    pub fn memory(&self) -> Option<&RingBuffer> {
        self.memory.as_ref()
    }

    /// All past-task rows this client has seen, in task order.
    pub fn past_data(&self) -> Option<&Dataset> {
        self.past_pool.as_ref()
    }

    pub fn past_tasks(&self) -> &[Dataset] {
        &self.past_tasks
    }

    pub fn iag(&self) -> Option<&IagState> {
        self.iag.as_ref()
    }

    pub fn task(&self) -> usize {
        self.task
    }

    /// Installs an explicit buffer (replacing any existing one).
    pub fn set_memory(&mut self, buffer: RingBuffer) {
        self.memory = Some(buffer);
    }

    /// Registers past-task data without the task bookkeeping of [`advance_task`].
    ///
    /// [`advance_task`]: ClientState::advance_task
    pub fn set_past(&mut self, past: Vec<Dataset>) -> Result<()> {
        self.past_pool = if past.is_empty() { None } else { Some(Dataset::concat(&past)?) };
        self.past_tasks = past;
        Ok(())
    }

    /// Moves the finished task into the past pool, rebuilds the buffer as
    /// per-task sub-buffers over all past tasks, and installs `next`.
    pub fn advance_task(&mut self, next: Dataset, config: &MemoryConfig) -> Result<()> {
        let finished = std::mem::replace(&mut self.current, next);
        self.past_tasks.push(finished);
        let parts = self
            .past_tasks
            .iter()
            .enumerate()
            .map(|(s, data)| {
                let key = rng::derive_seed(&[self.seed, rng::TAG_MEMORY, self.id as u64, s as u64]);
                memory::build_memory(data, config.per_task, config.policy, key)
            })
            .collect::<Result<Vec<_>>>()?;
        self.memory = Some(RingBuffer::concat(&parts)?);
        self.past_pool = Some(Dataset::concat(&self.past_tasks)?);
        self.iag = None;
        self.task += 1;
        Ok(())
    }

    fn round_rng(&self, tag: u64, round: usize) -> rand_chacha::ChaCha8Rng {
        rng::keyed_rng(&[self.seed, tag, self.id as u64, self.task as u64, round as u64])
    }

    /// Exact `∇g_i(x_t)` and the memory gradient `∇̃f_i(x_t)`.
    pub fn prologue(
        &self,
        model: &LossModel,
        x_t: &ParamVector,
        memory_batch: Option<usize>,
        round: usize,
    ) -> Result<Prologue> {
        let grad_g = model.grad(x_t, &self.current)?;
        let (grad_f_tilde, has_memory) = match &self.memory {
            Some(buffer) => {
                let g = match memory_batch {
                    Some(b) => {
                        let mut r = self.round_rng(rng::TAG_MEMORY_BATCH, round);
                        memory::memory_gradient_minibatch(model, x_t, buffer, b, &mut r)?
                    }
                    None => memory::memory_gradient(model, x_t, buffer)?,
                };
                (g, true)
            }
            None => (ParamVector::zeros(x_t.len()), false),
        };
        Ok(Prologue { grad_g, grad_f_tilde, has_memory })
    }

    /// `E` local IAG steps from `x_t`:
    /// `x_{k+1} = x_k − β(∇g(x_t) − ∇g_i(x_t) + ∇̃g_i(x_k))`.
    ///
    /// Step 0 uses the full gradient. For `k ≥ 1` one component is drawn
    /// uniformly with replacement from this round's keyed stream and
    /// refreshed at the current iterate before the step is taken.
    pub fn local_round(
        &mut self,
        model: &LossModel,
        x_t: &ParamVector,
        grad_g_global: &ParamVector,
        prologue: &Prologue,
        params: &LocalRoundParams,
    ) -> Result<LocalRoundResult> {
        check_local_params(params)?;
        let mut rng = self.round_rng(rng::TAG_LOCAL, params.round);
        let mut iag = IagState::init(model, x_t, &self.current)?.with_verification(params.verify);
        let correction = grad_g_global - &prologue.grad_g;
        let n = self.current.len();

        let mut x = x_t.clone();
        let mut drift_norms = Vec::with_capacity(params.epochs);
        let mut grad_errors = Vec::new();
        let mut samples = Vec::with_capacity(params.epochs.saturating_sub(1));
        let mut steps = Vec::new();
        for k in 0..params.epochs {
            let mut sample = None;
            if k >= 1 {
                let j = rng.random_range(0..n);
                iag.refresh(model, &self.current, j, &x, k)?;
                samples.push(j);
                sample = Some(j);
            }
            iag.accumulate();
            if params.track_error {
                grad_errors.push(iag.gradient_error(model, &self.current, &x)?);
            }
            if params.record_steps {
                steps.push(LocalStep {
                    iterate: x.clone(),
                    sample,
                    tau: iag.tau().to_vec(),
                    delayed: iag.delayed_grad().clone(),
                });
            }
            let mut direction = correction.clone();
            direction.axpy(1.0, iag.delayed_grad());
            x.axpy(-params.beta, &direction);
            drift_norms.push((&x - x_t).norm());
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("client {} local round", self.id)));
        }
        let s_sum = iag.accumulated().clone();
        self.iag = Some(iag);
        Ok(LocalRoundResult {
            x_end: x,
            s_sum,
            g_i_at_xt: prologue.grad_g.clone(),
            f_tilde_i_at_xt: prologue.grad_f_tilde.clone(),
            drift_norms,
            grad_errors,
            samples,
            steps,
        })
    }

    /// `E` plain local gradient steps `x_{k+1} = x_k − β∇g_i(x_k)` (the
    /// Fine-FL baseline). `s_sum` holds the sum of the exact gradients used.
    pub fn plain_local_round(
        &self,
        model: &LossModel,
        x_t: &ParamVector,
        prologue: &Prologue,
        params: &LocalRoundParams,
    ) -> Result<LocalRoundResult> {
        check_local_params(params)?;
        let mut x = x_t.clone();
        let mut s_sum = ParamVector::zeros(x.len());
        let mut drift_norms = Vec::with_capacity(params.epochs);
        let mut grad_errors = Vec::new();
        for k in 0..params.epochs {
            let g = if k == 0 { prologue.grad_g.clone() } else { model.grad(&x, &self.current)? };
            if params.track_error {
                grad_errors.push(0.0);
            }
            s_sum.axpy(1.0, &g);
            x.axpy(-params.beta, &g);
            drift_norms.push((&x - x_t).norm());
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("client {} local round", self.id)));
        }
        Ok(LocalRoundResult {
            x_end: x,
            s_sum,
            g_i_at_xt: prologue.grad_g.clone(),
            f_tilde_i_at_xt: prologue.grad_f_tilde.clone(),
            drift_norms,
            grad_errors,
            samples: Vec::new(),
            steps: Vec::new(),
        })
    }
}

fn check_local_params(params: &LocalRoundParams) -> Result<()> {
    if params.epochs == 0 {
        return Err(Error::Config("local epochs E must be at least 1".into()));
    }
    if !(params.beta > 0.0 && params.beta.is_finite()) {
        return Err(Error::Config(format!("local rate beta must be positive, got {}", params.beta)));
    }
    Ok(())
}

/// Update a client transmits:
/// `Δx = x_t − β·E·(∇g(x_t) − ∇g_i(x_t)) − β_i·S_i − α_i·∇̃f(x_t)`.
///
/// With `β_i == β` the drift is not rescaled and `x^i_{t,E}` is used as
/// iterated, giving exactly `x^i_{t,E} − α_i·∇̃f(x_t)`.
pub fn compose_update(
    result: &LocalRoundResult,
    x_t: &ParamVector,
    grad_g_global: &ParamVector,
    f_tilde_global: &ParamVector,
    alpha_i: f64,
    beta_i: f64,
    beta_base: f64,
) -> ParamVector {
    let mut delta = if beta_i == beta_base {
        result.x_end.clone()
    } else {
        let e = result.epochs() as f64;
        let mut d = x_t.clone();
        let correction = grad_g_global - &result.g_i_at_xt;
        d.axpy(-beta_base * e, &correction);
        d.axpy(-beta_i, &result.s_sum);
        d
    };
    if alpha_i != 0.0 {
        delta.axpy(-alpha_i, f_tilde_global);
    }
    delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryPolicy;
    use crate::model::ModelKind;

    fn client() -> (LossModel, ClientState) {
        let m = LossModel::new(ModelKind::LinearMse, 2, 3, 0.0).unwrap();
        let d = Dataset::from_rows(
            &[vec![1.0, 0.2], vec![-0.5, 1.0], vec![0.3, -0.7], vec![0.9, 0.9]],
            vec![1, 2, 0, 1],
            3,
        )
        .unwrap();
        (m, ClientState::new(0, 1.0, d, 42).unwrap())
    }

    #[test]
    fn single_epoch_single_client_is_gradient_step() {
        let (m, mut c) = client();
        let x = ParamVector::from_vec(vec![0.1, -0.3]);
        let pro = c.prologue(&m, &x, None, 0).unwrap();
        let res = c.local_round(&m, &x, &pro.grad_g.clone(), &pro, &LocalRoundParams::new(0.1, 1, 0)).unwrap();
        let mut expected = x.clone();
        expected.axpy(-0.1, &pro.grad_g);
        assert!(res.x_end.relative_error(&expected, 1e-300) < 1e-15);
        assert_eq!(res.s_sum, pro.grad_g);
    }

    #[test]
    fn drift_identity_holds() {
        let (m, mut c) = client();
        let x = ParamVector::from_vec(vec![0.4, 0.8]);
        let pro = c.prologue(&m, &x, None, 3).unwrap();
        let g_global = &pro.grad_g * 0.5;
        let beta = 0.05;
        let e = 5;
        let res = c.local_round(&m, &x, &g_global, &pro, &LocalRoundParams::new(beta, e, 3)).unwrap();
        let mut rebuilt = x.clone();
        rebuilt.axpy(-beta * e as f64, &(&g_global - &pro.grad_g));
        rebuilt.axpy(-beta, &res.s_sum);
        assert!((&res.x_end - &x).relative_error(&(&rebuilt - &x), 1e-300) < 1e-9);
        assert_eq!(res.samples.len(), e - 1);
        assert_eq!(res.drift_norms.len(), e);
    }

    #[test]
    fn compose_without_adaptation_is_fixed_rate() {
        let (m, mut c) = client();
        let x = ParamVector::from_vec(vec![0.4, 0.8]);
        let pro = c.prologue(&m, &x, None, 0).unwrap();
        let res = c.local_round(&m, &x, &pro.grad_g.clone(), &pro, &LocalRoundParams::new(0.05, 3, 0)).unwrap();
        let f = ParamVector::from_vec(vec![1.0, -2.0]);
        let delta = compose_update(&res, &x, &pro.grad_g, &f, 0.1, 0.05, 0.05);
        let mut expected = res.x_end.clone();
        expected.axpy(-0.1, &f);
        assert_eq!(delta, expected);
        // alpha = 0 drops the memory term
        assert_eq!(compose_update(&res, &x, &pro.grad_g, &f, 0.0, 0.05, 0.05), res.x_end);
    }

    #[test]
    fn doubled_beta_shifts_by_s() {
        let (m, mut c) = client();
        let x = ParamVector::from_vec(vec![0.4, 0.8]);
        let pro = c.prologue(&m, &x, None, 0).unwrap();
        let g_global = ParamVector::from_vec(vec![0.3, 0.1]);
        let res = c.local_round(&m, &x, &g_global, &pro, &LocalRoundParams::new(0.05, 4, 0)).unwrap();
        let f = ParamVector::from_vec(vec![1.0, -2.0]);
        let fixed = compose_update(&res, &x, &g_global, &f, 0.1, 0.05, 0.05);
        let doubled = compose_update(&res, &x, &g_global, &f, 0.1, 0.10, 0.05);
        let expected = &res.s_sum * -0.05;
        assert!((&doubled - &fixed).relative_error(&expected, 1e-300) < 1e-9);
    }

    #[test]
    fn same_key_same_schedule() {
        let (m, mut a) = client();
        let (_, mut b) = client();
        let x = ParamVector::from_vec(vec![0.0, 0.0]);
        let pro = a.prologue(&m, &x, None, 7).unwrap();
        let p = LocalRoundParams::new(0.01, 6, 7);
        let ra = a.local_round(&m, &x, &pro.grad_g.clone(), &pro, &p).unwrap();
        let rb = b.local_round(&m, &x, &pro.grad_g.clone(), &pro, &p).unwrap();
        assert_eq!(ra, rb);
        let rc = b.local_round(&m, &x, &pro.grad_g.clone(), &pro, &LocalRoundParams::new(0.01, 6, 8)).unwrap();
        assert_ne!(ra.samples, rc.samples);
    }

    #[test]
    fn advance_task_moves_data_into_memory() {
        let (m, mut c) = client();
        let old = c.current().clone();
        let next = Dataset::from_rows(&[vec![5.0, 5.0], vec![6.0, 6.0]], vec![2, 2], 3).unwrap();
        let cfg = MemoryConfig { per_task: 2, policy: MemoryPolicy::Uniform, batch: None };
        c.advance_task(next.clone(), &cfg).unwrap();
        assert_eq!(c.current(), &next);
        assert_eq!(c.past_data().unwrap(), &old);
        let buf = c.memory().unwrap();
        assert_eq!(buf.len(), 2);
        for (row, _) in buf.items().rows() {
            assert!(old.rows().any(|(r, _)| r == row));
        }
        let pro = c.prologue(&m, &ParamVector::zeros(2), None, 0).unwrap();
        assert!(pro.has_memory);
    }

    #[test]
    fn rejects_bad_local_params() {
        let (m, mut c) = client();
        let x = ParamVector::zeros(2);
        let pro = c.prologue(&m, &x, None, 0).unwrap();
        assert!(c.local_round(&m, &x, &x.clone(), &pro, &LocalRoundParams::new(0.1, 0, 0)).is_err());
        assert!(c.local_round(&m, &x, &x.clone(), &pro, &LocalRoundParams::new(0.0, 1, 0)).is_err());
    }
}
