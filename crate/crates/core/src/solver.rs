//! Outer proximal quasi-Newton loop with a modified-Armijo line search.
//!
//! Every worker runs [`run_worker`] in lockstep. Branches depend only on
//! reduced or replicated values, so all workers issue the same sequence of
//! collectives.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::comm::{run_workers, Communicator, CostLedger, CostModel, SimWorld};
use crate::data::{partition_features, partition_instances, FeaturePartition, LabeledDataset, LabeledShard};
use crate::dd;
use crate::error::{CommError, Error};
use crate::lbfgs::{compute_a0, GammaRule, LbfgsMemory};
use crate::objective::{grad_local, hessian_quadform_local, loss_value_local, prox_step, Regularizer, SmoothLoss};
use crate::sparsa::{reg_change_partial, QuadraticModel, Sparsa, SparsaParams};

/// Where the subproblem vectors live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SubproblemMode {
    /// Each worker holds its feature block; the step is gathered afterwards.
    #[default]
    Partitioned,
    /// Every worker holds full vectors; required for non-separable `g`.
    Replicated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// `(F − F*)/F* ≤ tol`, with `F*` taken from [`SolverConfig::reference_f`].
    RelativeError { tol: f64 },
    /// Proximal-gradient norm `≤ tol`.
    ProxGradNorm { tol: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub theta: f64,
    pub beta: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub m: usize,
    pub delta: f64,
    pub eps1: f64,
    pub sparsa_max_iters: usize,
    pub max_outer_iters: usize,
    pub max_backtracks: usize,
    pub psi_cap_factor: f64,
    pub mode: SubproblemMode,
    pub target: Option<Target>,
    /// `F*` for relative-error reporting.
    pub reference_f: Option<f64>,
    pub gamma_rule: GammaRule,
    pub record_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            beta: 2.0,
            sigma0: 1e-2,
            sigma1: 1e-4,
            m: 10,
            delta: 1e-10,
            eps1: 1e-2,
            sparsa_max_iters: 100,
            max_outer_iters: 1000,
            max_backtracks: 50,
            psi_cap_factor: 1e3,
            mode: SubproblemMode::Partitioned,
            target: None,
            reference_f: None,
            gamma_rule: GammaRule::default(),
            record_iterates: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !unit(self.theta) {
            return bad("theta must lie in (0, 1)");
        }
        if !unit(self.sigma0) || !unit(self.sigma1) {
            return bad("sigma0 and sigma1 must lie in (0, 1)");
        }
        if !(self.beta > 1.0) {
            return bad("beta must exceed 1");
        }
        if self.m == 0 {
            return bad("m must be at least 1");
        }
        if !(self.delta > 0.0) {
            return bad("delta must be positive");
        }
        if !(self.eps1 >= 0.0) {
            return bad("eps1 must be nonnegative");
        }
        if matches!(self.target, Some(Target::RelativeError { .. })) && self.reference_f.is_none() {
            return bad("a relative-error target needs a reference objective");
        }
        Ok(())
    }

    pub fn sparsa_params(&self) -> SparsaParams {
        SparsaParams {
            beta: self.beta,
            sigma0: self.sigma0,
            eps1: self.eps1,
            max_iters: self.sparsa_max_iters,
            psi_floor: self.delta,
            psi_cap_factor: self.psi_cap_factor,
        }
    }

    pub(crate) fn rel_err(&self, f: f64) -> Option<f64> {
        self.reference_f.map(|fs| (f - fs) / fs)
    }

    pub(crate) fn target_reached(&self, f: f64, prox_grad: f64) -> bool {
        match self.target {
            Some(Target::RelativeError { tol }) => self.rel_err(f).is_some_and(|r| r <= tol),
            Some(Target::ProxGradNorm { tol }) => prox_grad <= tol,
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    #[serde(rename = "F")]
    pub f: f64,
    pub rel_err: Option<f64>,
    pub rounds: u64,
    pub bytes: u64,
    pub comm_over_d: f64,
    pub modeled_time_s: f64,
    pub wall_time_s: f64,
    /// Step accepted in this iteration; `None` on the initial row.
    pub alpha: Option<f64>,
    pub inner_iters: usize,
    pub sparsa_trials: usize,
    pub delta: Option<f64>,
    pub backtracks: usize,
    pub prox_grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// `w` at each row, when requested.
    pub iterates: Vec<Vec<f64>>,
}

impl Trace {
    pub fn alphas(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.alpha).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    TargetReached,
    /// The subproblem returned `p = 0`.
    Stationary,
    /// No trial step changes `w` in floating point.
    Stalled,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct WorkerOutcome {
    pub w: Vec<f64>,
    pub f: f64,
    pub trace: Trace,
    pub status: Status,
    pub ledger: CostLedger,
}

/// `‖prox_g(w − ∇f̃) − w‖`.
pub fn prox_grad_norm(reg: &impl Regularizer, w: &[f64], grad: &[f64]) -> f64 {
    let u: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut p = vec![0.0; w.len()];
    prox_step(reg, &u, w, 1.0, &mut p).expect("unit step");
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    /// `F(w + αp) − F(w)`.
    pub f_change: f64,
    pub backtracks: usize,
    /// `z + α z_dir`.
    pub z: Vec<f64>,
    /// Set when `w + αp` rounds back to `w` before any probe passes.
    pub stalled: bool,
}

/// Largest `α = θ^i` with `F(w + αp) ≤ F(w) + ασ₁Δ`; one scalar reduction of
/// the loss change per probe.
#[allow(clippy::too_many_arguments)]
pub fn line_search(
    loss: &impl SmoothLoss,
    reg: &impl Regularizer,
    labels: &[f64],
    z: &[f64],
    z_dir: &[f64],
    w: &[f64],
    p: &[f64],
    delta: f64,
    cfg: &SolverConfig,
    comm: &mut dyn Communicator,
) -> Result<LineSearchOutcome, Error> {
    let mut alpha = 1.0;
    let mut z_try = vec![0.0; z.len()];
    let mut w_try = vec![0.0; w.len()];
    for backtracks in 0..=cfg.max_backtracks {
        for i in 0..z.len() {
            z_try[i] = z[i] + alpha * z_dir[i];
        }
        for j in 0..w.len() {
            w_try[j] = w[j] + alpha * p[j];
        }
        if w_try == w {
            return Ok(LineSearchOutcome {
                alpha,
                f_change: 0.0,
                backtracks,
                z: z.to_vec(),
                stalled: true,
            });
        }
        let loss_change = comm.allreduce_dd_scalar(loss.value_change(labels, z, &z_try))?;
        let f_change = loss_change + reg.value_change(w, &w_try);
        if f_change <= alpha * cfg.sigma1 * delta {
            return Ok(LineSearchOutcome {
                alpha,
                f_change,
                backtracks,
                z: z_try,
                stalled: false,
            });
        }
        alpha *= cfg.theta;
    }
    Err(Error::BacktrackLimit(cfg.max_backtracks))
}

pub(crate) struct Recorder {
    start: Instant,
    d: usize,
    enabled: bool,
    keep_iterates: bool,
    trace: Trace,
}

pub(crate) struct RowStats {
    pub alpha: Option<f64>,
    pub inner_iters: usize,
    pub sparsa_trials: usize,
    pub delta: Option<f64>,
    pub backtracks: usize,
}

impl RowStats {
    pub const INITIAL: RowStats = RowStats {
        alpha: None,
        inner_iters: 0,
        sparsa_trials: 0,
        delta: None,
        backtracks: 0,
    };
}

impl Recorder {
    pub(crate) fn new(d: usize, rank: usize, keep_iterates: bool) -> Self {
        Self {
            start: Instant::now(),
            d,
            enabled: rank == 0,
            keep_iterates,
            trace: Trace::default(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push(
        &mut self,
        iter: usize,
        f: f64,
        cfg: &SolverConfig,
        ledger: &CostLedger,
        prox_grad_norm: f64,
        stats: RowStats,
        w: &[f64],
    ) {
        if !self.enabled {
            return;
        }
        self.trace.rows.push(TraceRow {
            iter,
            f,
            rel_err: cfg.rel_err(f),
            rounds: ledger.rounds(),
            bytes: ledger.bytes(),
            comm_over_d: ledger.comm_over_d(self.d),
            modeled_time_s: ledger.modeled_time(),
            wall_time_s: self.start.elapsed().as_secs_f64(),
            alpha: stats.alpha,
            inner_iters: stats.inner_iters,
            sparsa_trials: stats.sparsa_trials,
            delta: stats.delta,
            backtracks: stats.backtracks,
            prox_grad_norm,
        });
        if self.keep_iterates {
            self.trace.iterates.push(w.to_vec());
        }
    }

    pub(crate) fn finish(self) -> Trace {
        self.trace
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One worker's share of the full solve.
pub fn run_worker<L: SmoothLoss, R: Regularizer>(
    shard: &LabeledShard,
    features: &FeaturePartition,
    loss: &L,
    reg: &R,
    cfg: &SolverConfig,
    comm: &mut dyn Communicator,
) -> Result<WorkerOutcome, Error> {
    cfg.validate()?;
    if cfg.mode == SubproblemMode::Partitioned && !reg.is_separable() {
        return Err(Error::Config("partitioned mode needs a separable regularizer".into()));
    }
    let d = shard.n_features();
    let rank = comm.rank();
    let owned: Range<usize> = features.block(rank);
    let coords = match cfg.mode {
        SubproblemMode::Partitioned => owned.clone(),
        SubproblemMode::Replicated => 0..d,
    };
    let x = shard.matrix();
    let labels = shard.labels();
    let mut rec = Recorder::new(d, rank, cfg.record_iterates);

    let mut w = vec![0.0; d];
    let mut z = vec![0.0; shard.n_instances()];
    x.dot_instances(&w, &mut z);
    let mut f = comm.allreduce_dd_scalar(loss_value_local(loss, shard, &z))? + reg.value(&w);
    let mut grad = comm.allreduce_dd(&grad_local(loss, shard, &z))?;

    let mut memory = LbfgsMemory::new(cfg.m, cfg.delta, cfg.gamma_rule, coords.clone(), owned.clone());
    let grad_sq = dot(&grad, &grad);
    let mut gx = vec![0.0; z.len()];
    x.dot_instances(&grad, &mut gx);
    let a0 = match hessian_quadform_local(loss, shard, &z, &gx) {
        Some(q) => compute_a0(grad_sq, comm.allreduce_dd_scalar(q)?).0,
        None => 1.0,
    };
    memory.set_fallback_scale(a0);
    // every ψ seed of the run so far bounds the escalation guard
    let mut seed_ceiling = a0;

    let mut g_norm = prox_grad_norm(reg, &w, &grad);
    rec.push(0, f, cfg, comm.ledger(), g_norm, RowStats::INITIAL, &w);
    let mut status = Status::IterationLimit;
    if cfg.target_reached(f, g_norm) {
        status = Status::TargetReached;
    } else if g_norm == 0.0 {
        status = Status::Stationary;
    }

    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut t = 0;
    while status == Status::IterationLimit && t < cfg.max_outer_iters {
        if let Some((w_prev, grad_prev)) = prev.take() {
            let s: Vec<f64> = coords.clone().map(|j| w[j] - w_prev[j]).collect();
            let y: Vec<f64> = coords.clone().map(|j| grad[j] - grad_prev[j]).collect();
            // rejected pairs are discarded, not retried
            memory.try_push_pair(&s, &y, comm)?;
        }

        let mut p = vec![0.0; d];
        let (mut inner_iters, mut sparsa_trials) = (0, 0);
        if memory.is_empty() {
            // H = aI: the subproblem is a single prox step
            let a = memory.gamma();
            let u: Vec<f64> = grad.iter().map(|g| -g / a).collect();
            prox_step(reg, &u, &w, a, &mut p)?;
        } else {
            let w_loc = &w[coords.clone()];
            let g_loc = &grad[coords.clone()];
            let model = QuadraticModel::new(&memory, reg, g_loc, w_loc);
            let res = Sparsa::new(cfg.sparsa_params(), reg, w_loc, model, memory.gamma())
                .with_prior_seed(seed_ceiling)
                .solve(comm)?;
            seed_ceiling = res.max_seed;
            inner_iters = res.inner_iterations;
            sparsa_trials = res.total_trials();
            match cfg.mode {
                SubproblemMode::Replicated => p = res.p,
                SubproblemMode::Partitioned => {
                    p[coords.clone()].copy_from_slice(&res.p);
                    comm.allreduce_sum(&mut p)?;
                }
            }
        }
        if p.iter().all(|&v| v == 0.0) {
            status = Status::Stationary;
            break;
        }

        let mut z_dir = vec![0.0; z.len()];
        x.dot_instances(&p, &mut z_dir);
        let mut delta_local = dd::dot(&grad[owned.clone()], &p[owned.clone()]);
        delta_local.merge(reg_change_partial(reg, &w, &p, owned.clone(), rank));
        let delta = comm.allreduce_dd_scalar(delta_local)?;
        if !(delta < 0.0) {
            return Err(Error::NonDescent { iter: t, delta });
        }

        let ls = line_search(loss, reg, labels, &z, &z_dir, &w, &p, delta, cfg, comm)?;
        if ls.stalled {
            status = Status::Stalled;
            break;
        }
        let w_new: Vec<f64> = w.iter().zip(&p).map(|(a, b)| a + ls.alpha * b).collect();
        z = ls.z;
        f += ls.f_change;
        let grad_new = comm.allreduce_dd(&grad_local(loss, shard, &z))?;
        prev = Some((std::mem::replace(&mut w, w_new), std::mem::replace(&mut grad, grad_new)));
        t += 1;

        g_norm = prox_grad_norm(reg, &w, &grad);
        let stats = RowStats {
            alpha: Some(ls.alpha),
            inner_iters,
            sparsa_trials,
            delta: Some(delta),
            backtracks: ls.backtracks,
        };
        rec.push(t, f, cfg, comm.ledger(), g_norm, stats, &w);
        if cfg.target_reached(f, g_norm) {
            status = Status::TargetReached;
        }
    }

    Ok(WorkerOutcome {
        w,
        f,
        trace: rec.finish(),
        status,
        ledger: comm.ledger().clone(),
    })
}

/// Picks rank 0's outcome after checking that every worker agrees on `w`.
/// A worker failure is reported in preference to the departures it causes.
pub(crate) fn collect_outcomes(results: Vec<Result<WorkerOutcome, Error>>) -> Result<WorkerOutcome, Error> {
    let mut outcomes = Vec::with_capacity(results.len());
    let mut departure = None;
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(Error::Comm(CommError::PeerDeparted(k))) => {
                departure.get_or_insert(Error::Comm(CommError::PeerDeparted(k)));
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(e) = departure {
        return Err(e);
    }
    let first = outcomes.remove(0);
    for (k, o) in outcomes.iter().enumerate() {
        let same = o.w.len() == first.w.len() && o.w.iter().zip(&first.w).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::Replication(format!("worker {} disagrees with worker 0", k + 1)));
        }
    }
    Ok(first)
}

/// Runs the solver over the simulator with `workers` workers.
pub fn solve<L: SmoothLoss, R: Regularizer>(
    dataset: &LabeledDataset,
    loss: &L,
    reg: &R,
    cfg: &SolverConfig,
    workers: usize,
    model: CostModel,
) -> Result<WorkerOutcome, Error> {
    solve_with(dataset, loss, reg, cfg, endpoints_for(dataset, workers, model)?)
}

pub(crate) fn endpoints_for(
    dataset: &LabeledDataset,
    workers: usize,
    model: CostModel,
) -> Result<Vec<crate::comm::SimEndpoint>, Error> {
    // surface partition errors before spawning endpoints
    partition_instances(dataset, workers)?;
    Ok(SimWorld::endpoints(workers, model))
}

/// Runs the solver with one worker per endpoint.
pub fn solve_with<C, L, R>(
    dataset: &LabeledDataset,
    loss: &L,
    reg: &R,
    cfg: &SolverConfig,
    endpoints: Vec<C>,
) -> Result<WorkerOutcome, Error>
where
    C: Communicator,
    L: SmoothLoss,
    R: Regularizer,
{
    let shards = partition_instances(dataset, endpoints.len())?;
    let features = partition_features(dataset.n_features(), endpoints.len());
    let results = run_workers(endpoints, |mut comm| {
        let rank = comm.rank();
        run_worker(&shards[rank], &features, loss, reg, cfg, &mut comm)
    });
    collect_outcomes(results)
}
