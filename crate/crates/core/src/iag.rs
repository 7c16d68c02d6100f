//! Incrementally aggregated gradient cache for one client's local round.
//!
//! The tracker keeps one cached component gradient per sample of the
//! current-task data together with the local step `tau[j]` at which it was
//! last evaluated. The aggregate is the mean of the cache and is maintained
//! incrementally; `accumulated` is the running sum of the aggregates used at
//! each local step. Which component to refresh is decided by the caller.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::LossModel;
use crate::params::ParamVector;

/// Relative tolerance for the optional incremental-vs-recompute check.
pub const VERIFY_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct IagState {
    cache: Vec<ParamVector>,
    tau: Vec<usize>,
    aggregate: ParamVector,
    accumulated: ParamVector,
    steps_taken: usize,
    verify: bool,
}

impl IagState {
    /// Full-gradient prologue: every component evaluated at `params`, `tau = 0`.
    pub fn init(model: &LossModel, params: &ParamVector, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("IAG tracker needs current-task data".into()));
        }
        let cache = (0..data.len()).map(|j| model.grad_component(params, data, j)).collect::<Result<Vec<_>>>()?;
        let aggregate = model.grad(params, data)?;
        let dim = aggregate.len();
        Ok(IagState {
            cache,
            tau: vec![0; data.len()],
            aggregate,
            accumulated: ParamVector::zeros(dim),
            steps_taken: 0,
            verify: false,
        })
    }

    /// Enables a recompute-and-compare check after every refresh.
    pub fn with_verification(mut self, on: bool) -> Self {
        self.verify = on;
        self
    }

    /// The delayed gradient: mean of the cached component gradients.
    pub fn delayed_grad(&self) -> &ParamVector {
        &self.aggregate
    }

    /// Re-evaluates component `j` at `params` as local step `k`.
    pub fn refresh(
        &mut self,
        model: &LossModel,
        data: &Dataset,
        j: usize,
        params: &ParamVector,
        k: usize,
    ) -> Result<()> {
        if j >= self.cache.len() {
            return Err(Error::IndexOutOfRange { index: j, len: self.cache.len() });
        }
        if k != self.steps_taken + 1 {
            return Err(Error::StepOrder { expected: self.steps_taken + 1, got: k });
        }
        if data.len() != self.cache.len() {
            return Err(Error::DimensionMismatch { expected: self.cache.len(), got: data.len() });
        }
        let fresh = model.grad_component(params, data, j)?;
        let inv_n = 1.0 / self.cache.len() as f64;
        let old = std::mem::replace(&mut self.cache[j], fresh);
        let delta = &self.cache[j] - &old;
        self.aggregate.axpy(inv_n, &delta);
        self.tau[j] = k;
        self.steps_taken = k;
        if self.verify {
            let err = self.aggregate.relative_error(&self.recompute_aggregate(), 1e-300);
            if err > VERIFY_TOL {
                return Err(Error::AggregateDrift(err));
            }
        }
        Ok(())
    }

    /// Adds the current aggregate into the accumulated sum.
    pub fn accumulate(&mut self) {
        let agg = &self.aggregate;
        self.accumulated.axpy(1.0, agg);
    }

    /// `||delayed_grad − ∇g_i(params)||`, the staleness error at `params`.
    pub fn gradient_error(&self, model: &LossModel, data: &Dataset, params: &ParamVector) -> Result<f64> {
        let exact = model.grad(params, data)?;
        Ok((&self.aggregate - &exact).norm())
    }

    /// Mean of the cache computed from scratch.
    pub fn recompute_aggregate(&self) -> ParamVector {
        let mut sum = ParamVector::zeros(self.aggregate.len());
        for g in &self.cache {
            sum.axpy(1.0, g);
        }
        sum.scale(1.0 / self.cache.len() as f64);
        sum
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn cache(&self) -> &[ParamVector] {
        &self.cache
    }

    pub fn accumulated(&self) -> &ParamVector {
        &self.accumulated
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}
