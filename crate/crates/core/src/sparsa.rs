//! Spectral proximal-gradient (SpaRSA) iterations with sufficient-decrease
//! backtracking on `ψ`.
//!
//! The engine works on whichever coordinates the caller hands it and leaves
//! every cross-worker reduction to a [`SparsaModel`], so the same loop drives
//! both the distributed quadratic subproblem and the direct baseline.

use std::ops::Range;

use crate::comm::Communicator;
use crate::dd::{self, Dd};
use crate::error::Error;
use crate::lbfgs::LbfgsMemory;
use crate::objective::{prox_step, Regularizer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsaParams {
    /// Escalation factor for `ψ` on a rejected trial.
    pub beta: f64,
    pub sigma0: f64,
    /// Stop once `‖Δp‖ ≤ eps1 · ‖first step‖`.
    pub eps1: f64,
    pub max_iters: usize,
    /// Lower clamp for spectral estimates.
    pub psi_floor: f64,
    /// Error out when `ψ` exceeds this multiple of the largest seed.
    pub psi_cap_factor: f64,
}

impl Default for SparsaParams {
    fn default() -> Self {
        Self {
            beta: 2.0,
            sigma0: 1e-2,
            eps1: 1e-2,
            max_iters: 100,
            psi_floor: 1e-10,
            psi_cap_factor: 1e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    StepRatio,
    MaxIters,
    Stationary,
}

#[derive(Debug, Clone)]
pub struct SparsaResult {
    pub p: Vec<f64>,
    pub inner_iterations: usize,
    /// Accepted `ψ` per iteration.
    pub psi_trace: Vec<f64>,
    /// Model value after each accepted iteration, starting from `Q(0) = 0`.
    pub q_trace: Vec<f64>,
    /// Trials (prox evaluations) per iteration, including a final rejected
    /// stationary trial if any.
    pub trials: Vec<usize>,
    pub first_step_norm: f64,
    pub last_step_norm: f64,
    pub termination: Termination,
    /// Largest seed seen, the reference for the escalation guard.
    pub max_seed: f64,
}

impl SparsaResult {
    pub fn total_trials(&self) -> usize {
        self.trials.iter().sum()
    }
}

/// The smooth part `f̂` as seen by one worker.
pub trait SparsaModel {
    /// `∇f̂` at the current point, local coordinates.
    fn gradient(&self) -> &[f64];

    /// Evaluates a trial point and returns the reduced
    /// `(Q(p_trial) − Q(p_cur), ‖p_trial − p_cur‖²)`.
    fn evaluate(&mut self, p_cur: &[f64], p_trial: &[f64], comm: &mut dyn Communicator) -> Result<(f64, f64), Error>;

    /// Makes the last evaluated trial the current point.
    fn commit(&mut self, comm: &mut dyn Communicator) -> Result<(), Error>;

    /// Reduced `Δpᵀ Δ∇f̂`.
    fn curvature(&mut self, dp: &[f64], dgrad: &[f64], comm: &mut dyn Communicator) -> Result<f64, Error>;
}

/// `Q_new ≤ Q_old − ψσ₀/2 · ‖Δp‖²`.
pub fn accept_test(q_new: f64, q_old: f64, psi: f64, step_norm_sq: f64, sigma0: f64) -> bool {
    q_new <= q_old - 0.5 * psi * sigma0 * step_norm_sq
}

fn sufficient_decrease(dq: f64, psi: f64, step_norm_sq: f64, sigma0: f64) -> bool {
    dq <= -0.5 * psi * sigma0 * step_norm_sq
}

/// Rayleigh quotient `Δpᵀ Δ∇ / ‖Δp‖²` from local pieces, one reduction of
/// length 2. `None` when `Δp = 0`.
pub fn spectral_psi(
    p_cur: &[f64],
    p_prev: &[f64],
    grad_cur: &[f64],
    grad_prev: &[f64],
    comm: &mut dyn Communicator,
) -> Result<Option<f64>, Error> {
    let mut parts = [Dd::ZERO; 2];
    for i in 0..p_cur.len() {
        let dp = p_cur[i] - p_prev[i];
        parts[0].add(dp * (grad_cur[i] - grad_prev[i]));
        parts[1].add(dp * dp);
    }
    let buf = comm.allreduce_dd(&parts)?;
    Ok((buf[1] > 0.0).then(|| buf[0] / buf[1]))
}

pub struct Sparsa<'a, R: Regularizer, M: SparsaModel> {
    params: SparsaParams,
    reg: &'a R,
    w: &'a [f64],
    model: M,
    p: Vec<f64>,
    grad: Vec<f64>,
    psi: f64,
    max_seed: f64,
    q: f64,
    first_step_norm: Option<f64>,
    last_step_norm: f64,
    psi_trace: Vec<f64>,
    q_trace: Vec<f64>,
    trials: Vec<usize>,
    done: Option<Termination>,
}

impl<'a, R: Regularizer, M: SparsaModel> Sparsa<'a, R, M> {
    /// Starts at `p = 0` with seed `psi0`; `w` is the anchor on the local
    /// coordinates.
    pub fn new(params: SparsaParams, reg: &'a R, w: &'a [f64], model: M, psi0: f64) -> Self {
        let grad = model.gradient().to_vec();
        let psi = psi0.max(params.psi_floor);
        Self {
            params,
            reg,
            w,
            model,
            p: vec![0.0; w.len()],
            grad,
            psi,
            max_seed: psi,
            q: 0.0,
            first_step_norm: None,
            last_step_norm: 0.0,
            psi_trace: Vec::new(),
            q_trace: vec![0.0],
            trials: Vec::new(),
            done: None,
        }
    }

    /// Widens the escalation guard to seeds from earlier solves.
    pub fn with_prior_seed(mut self, seed: f64) -> Self {
        self.max_seed = self.max_seed.max(seed);
        self
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn iterations(&self) -> usize {
        self.psi_trace.len()
    }

    /// Trials per iteration so far.
    pub fn trials(&self) -> &[usize] {
        &self.trials
    }

    pub fn termination(&self) -> Option<Termination> {
        self.done
    }

    /// One accepted iteration; returns the termination once reached.
    pub fn step(&mut self, comm: &mut dyn Communicator) -> Result<Option<Termination>, Error> {
        if self.done.is_some() {
            return Ok(self.done);
        }
        if self.iterations() >= self.params.max_iters {
            self.done = Some(Termination::MaxIters);
            return Ok(self.done);
        }
        let n = self.p.len();
        let mut u = vec![0.0; n];
        let mut trial = vec![0.0; n];
        let mut count = 0;
        let (dq, step_sq) = loop {
            for i in 0..n {
                u[i] = self.p[i] - self.grad[i] / self.psi;
            }
            prox_step(self.reg, &u, self.w, self.psi, &mut trial)?;
            count += 1;
            let (dq, step_sq) = self.model.evaluate(&self.p, &trial, comm)?;
            if step_sq == 0.0 {
                self.trials.push(count);
                self.done = Some(Termination::Stationary);
                return Ok(self.done);
            }
            if sufficient_decrease(dq, self.psi, step_sq, self.params.sigma0) {
                break (dq, step_sq);
            }
            self.psi *= self.params.beta;
            if self.psi > self.params.psi_cap_factor * self.max_seed {
                return Err(Error::PsiEscalation {
                    psi: self.psi,
                    cap: self.params.psi_cap_factor * self.max_seed,
                });
            }
        };
        self.trials.push(count);
        self.model.commit(comm)?;
        let new_grad = self.model.gradient().to_vec();
        let dp: Vec<f64> = trial.iter().zip(&self.p).map(|(a, b)| a - b).collect();
        self.p = trial;
        self.q += dq;
        self.q_trace.push(self.q);
        self.psi_trace.push(self.psi);
        let norm = step_sq.sqrt();
        let first = *self.first_step_norm.get_or_insert(norm);
        self.last_step_norm = norm;
        if norm <= self.params.eps1 * first {
            self.done = Some(Termination::StepRatio);
        } else if self.iterations() >= self.params.max_iters {
            self.done = Some(Termination::MaxIters);
        } else {
            let dgrad: Vec<f64> = new_grad.iter().zip(&self.grad).map(|(a, b)| a - b).collect();
            let num = self.model.curvature(&dp, &dgrad, comm)?;
            self.psi = (num / step_sq).max(self.params.psi_floor);
            self.max_seed = self.max_seed.max(self.psi);
        }
        self.grad = new_grad;
        Ok(self.done)
    }

    pub fn solve(mut self, comm: &mut dyn Communicator) -> Result<SparsaResult, Error> {
        while self.step(comm)?.is_none() {}
        Ok(self.finish())
    }

    pub fn finish(self) -> SparsaResult {
        SparsaResult {
            p: self.p,
            inner_iterations: self.psi_trace.len(),
            psi_trace: self.psi_trace,
            q_trace: self.q_trace,
            trials: self.trials,
            first_step_norm: self.first_step_norm.unwrap_or(0.0),
            last_step_norm: self.last_step_norm,
            termination: self.done.unwrap_or(Termination::MaxIters),
            max_seed: self.max_seed,
        }
    }
}

/// Sum of `g(w + p) − g(w)` over the owned block for separable `g`; rank 0
/// carries the whole change otherwise.
pub(crate) fn reg_change_partial<R: Regularizer>(
    reg: &R,
    w: &[f64],
    p: &[f64],
    owned: Range<usize>,
    rank: usize,
) -> Dd {
    if reg.is_separable() {
        reg.step_change(&w[owned.clone()], &p[owned])
    } else if rank == 0 {
        reg.step_change(w, p)
    } else {
        Dd::ZERO
    }
}

/// `Q(p) = ∇f̃(w)ᵀp + ½pᵀHp + g(w + p) − g(w)` over the coordinates stored by
/// the memory.
///
/// Each trial costs one reduction of length `2m̃` for `Uᵀp` and one of length
/// 2 for the model change and step length; each curvature estimate one
/// scalar.
pub struct QuadraticModel<'a, R: Regularizer> {
    mem: &'a LbfgsMemory,
    reg: &'a R,
    grad_w: &'a [f64],
    w: &'a [f64],
    owned: Range<usize>,
    grad_cur: Vec<f64>,
    grad_trial: Vec<f64>,
}

impl<'a, R: Regularizer> QuadraticModel<'a, R> {
    /// `grad_w` and `w` cover the memory's stored range.
    pub fn new(mem: &'a LbfgsMemory, reg: &'a R, grad_w: &'a [f64], w: &'a [f64]) -> Self {
        let stored = mem.stored_range();
        let owned = mem.owned_range();
        assert_eq!(grad_w.len(), stored.len());
        assert_eq!(w.len(), stored.len());
        Self {
            mem,
            reg,
            grad_w,
            w,
            owned: owned.start - stored.start..owned.end - stored.start,
            grad_cur: grad_w.to_vec(),
            grad_trial: vec![0.0; grad_w.len()],
        }
    }
}

impl<R: Regularizer> SparsaModel for QuadraticModel<'_, R> {
    fn gradient(&self) -> &[f64] {
        &self.grad_cur
    }

    /// The change is formed from `Δp` directly, `½(∇f̂(p̃) + ∇f̂(p))ᵀΔp + Δĝ`,
    /// which is exact for a quadratic and keeps its accuracy as steps shrink.
    /// The step length is measured between the iterates `w + p`, so a step
    /// below their resolution reads as zero.
    fn evaluate(&mut self, p_cur: &[f64], p_trial: &[f64], comm: &mut dyn Communicator) -> Result<(f64, f64), Error> {
        let projection = self.mem.reduced_projection(p_trial, comm)?;
        self.mem
            .apply_with_projection(p_trial, &projection, &mut self.grad_trial);
        for (g, gw) in self.grad_trial.iter_mut().zip(self.grad_w) {
            *g += gw;
        }
        let anchor: Vec<f64> = self.w.iter().zip(p_cur).map(|(a, b)| a + b).collect();
        let dp: Vec<f64> = p_trial.iter().zip(p_cur).map(|(a, b)| a - b).collect();
        let mut parts = [Dd::ZERO; 2];
        for j in self.owned.clone() {
            parts[0].add(0.5 * (self.grad_trial[j] + self.grad_cur[j]) * dp[j]);
            let moved = (self.w[j] + p_trial[j]) - anchor[j];
            parts[1].add(moved * moved);
        }
        parts[0].merge(reg_change_partial(
            self.reg,
            &anchor,
            &dp,
            self.owned.clone(),
            comm.rank(),
        ));
        let buf = comm.allreduce_dd(&parts)?;
        Ok((buf[0], buf[1]))
    }

    fn commit(&mut self, _comm: &mut dyn Communicator) -> Result<(), Error> {
        std::mem::swap(&mut self.grad_cur, &mut self.grad_trial);
        Ok(())
    }

    fn curvature(&mut self, dp: &[f64], dgrad: &[f64], comm: &mut dyn Communicator) -> Result<f64, Error> {
        let own = self.owned.clone();
        Ok(comm.allreduce_dd_scalar(dd::dot(&dp[own.clone()], &dgrad[own]))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{CostModel, SimEndpoint, SimWorld};
    use crate::lbfgs::GammaRule;
    use crate::objective::{Zero, L1};
    use approx::assert_relative_eq;

    fn solo() -> SimEndpoint {
        SimWorld::endpoints(1, CostModel::default()).remove(0)
    }

    fn identity_memory(d: usize, a: f64) -> LbfgsMemory {
        let mut mem = LbfgsMemory::single(5, 1e-10, GammaRule::default(), d);
        mem.set_fallback_scale(a);
        mem
    }

    #[test]
    fn newton_step_on_scaled_identity() {
        let mut comm = solo();
        let mem = identity_memory(2, 2.0);
        let grad = [-2.0, 0.0];
        let w = [0.0, 0.0];
        let model = QuadraticModel::new(&mem, &Zero, &grad, &w);
        let res = Sparsa::new(SparsaParams::default(), &Zero, &w, model, 2.0)
            .solve(&mut comm)
            .unwrap();
        assert_eq!(res.p, vec![1.0, 0.0]);
        assert_eq!(res.inner_iterations, 1);
        assert_eq!(res.termination, Termination::Stationary);
        assert_eq!(res.q_trace, vec![0.0, -1.0]);
    }

    #[test]
    fn l1_dominant_stays_at_zero() {
        let mut comm = solo();
        let mem = identity_memory(2, 1.0);
        let grad = [0.1, 0.0];
        let w = [0.0, 0.0];
        let reg = L1::default();
        let model = QuadraticModel::new(&mem, &reg, &grad, &w);
        let res = Sparsa::new(SparsaParams::default(), &reg, &w, model, 1.0)
            .solve(&mut comm)
            .unwrap();
        assert_eq!(res.p, vec![0.0, 0.0]);
        assert_eq!(res.inner_iterations, 0);
        assert_eq!(res.termination, Termination::Stationary);
    }

    #[test]
    fn zero_iteration_cap() {
        let mut comm = solo();
        let mem = identity_memory(2, 1.0);
        let grad = [1.0, -1.0];
        let w = [0.0, 0.0];
        let params = SparsaParams {
            max_iters: 0,
            ..Default::default()
        };
        let model = QuadraticModel::new(&mem, &Zero, &grad, &w);
        let res = Sparsa::new(params, &Zero, &w, model, 1.0).solve(&mut comm).unwrap();
        assert_eq!(res.p, vec![0.0, 0.0]);
        assert_eq!(res.termination, Termination::MaxIters);
    }

    #[test]
    fn rayleigh_quotients() {
        let mut comm = solo();
        let h = |p: &[f64]| vec![p[0], 3.0 * p[1]];
        let zero = [0.0, 0.0];
        for (dp, expect) in [([1.0, 0.0], 1.0), ([0.0, 1.0], 3.0), ([1.0, 1.0], 2.0)] {
            let psi = spectral_psi(&dp, &zero, &h(&dp), &zero, &mut comm).unwrap();
            assert_eq!(psi, Some(expect));
        }
        let two = [2.0, 2.0];
        let g2 = [4.0, 4.0];
        assert_eq!(spectral_psi(&two, &zero, &g2, &zero, &mut comm).unwrap(), Some(2.0));
        assert_eq!(spectral_psi(&zero, &zero, &zero, &zero, &mut comm).unwrap(), None);
    }

    #[test]
    fn acceptance_boundaries() {
        assert!(!accept_test(1.0, 1.0, 1.0, 1.0, 0.01));
        assert!(accept_test(1.0, 1.0, 1.0, 0.0, 0.01));
        assert!(accept_test(0.9, 1.0, 1.0, 1.0, 0.01));
    }

    #[test]
    fn escalates_on_underestimated_curvature() {
        // seed far below the true curvature 4: the first trials overshoot
        let mut comm = solo();
        let mem = identity_memory(1, 4.0);
        let grad = [-4.0];
        let w = [0.0];
        let model = QuadraticModel::new(&mem, &Zero, &grad, &w);
        let res = Sparsa::new(SparsaParams::default(), &Zero, &w, model, 0.5)
            .solve(&mut comm)
            .unwrap();
        assert!(res.trials[0] > 1);
        assert!(res.psi_trace[0] > 2.0);
        assert_relative_eq!(res.p[0], 1.0, max_relative = 1e-10);
        for pair in res.q_trace.windows(2) {
            assert!(pair[1] < pair[0]);
        }
    }

    #[test]
    fn psi_guard_trips() {
        let mut comm = solo();
        let mem = identity_memory(1, 1e6);
        let grad = [-1.0];
        let w = [0.0];
        let model = QuadraticModel::new(&mem, &Zero, &grad, &w);
        let err = Sparsa::new(SparsaParams::default(), &Zero, &w, model, 1.0)
            .solve(&mut comm)
            .unwrap_err();
        assert!(matches!(err, Error::PsiEscalation { .. }));
    }
}
