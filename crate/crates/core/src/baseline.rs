//! SpaRSA applied directly to `F`, over the same collectives as the main
//! solver.
//!
//! Vectors are replicated. Each trial costs one scalar reduction of the loss
//! change and each accepted step one `d`-length gradient reduction.

use crate::comm::{run_workers, Communicator, CostModel};
use crate::data::{partition_instances, LabeledDataset, LabeledShard};
use crate::error::Error;
use crate::lbfgs::compute_a0;
use crate::objective::{grad_local, hessian_quadform_local, loss_value_local, Regularizer, SmoothLoss};
use crate::solver::{
    collect_outcomes, endpoints_for, prox_grad_norm, Recorder, RowStats, SolverConfig, Status, WorkerOutcome,
};
use crate::sparsa::{Sparsa, SparsaModel, SparsaParams, Termination};

/// `f̂(p) = f̃(w₀ + p)` for one worker's shard.
pub struct LossModel<'a, L: SmoothLoss, R: Regularizer> {
    loss: &'a L,
    reg: &'a R,
    shard: &'a LabeledShard,
    w0: &'a [f64],
    z0: Vec<f64>,
    z_cur: Vec<f64>,
    z_trial: Vec<f64>,
    grad: Vec<f64>,
}

impl<'a, L: SmoothLoss, R: Regularizer> LossModel<'a, L, R> {
    /// `grad` is the reduced gradient at `w0`.
    pub fn new(loss: &'a L, reg: &'a R, shard: &'a LabeledShard, w0: &'a [f64], grad: Vec<f64>) -> Self {
        let mut z0 = vec![0.0; shard.n_instances()];
        shard.matrix().dot_instances(w0, &mut z0);
        Self {
            loss,
            reg,
            shard,
            w0,
            z_cur: z0.clone(),
            z_trial: z0.clone(),
            z0,
            grad,
        }
    }

    fn point(&self, p: &[f64]) -> Vec<f64> {
        self.w0.iter().zip(p).map(|(a, b)| a + b).collect()
    }
}

impl<L: SmoothLoss, R: Regularizer> SparsaModel for LossModel<'_, L, R> {
    fn gradient(&self) -> &[f64] {
        &self.grad
    }

    fn evaluate(&mut self, p_cur: &[f64], p_trial: &[f64], comm: &mut dyn Communicator) -> Result<(f64, f64), Error> {
        self.shard.matrix().dot_instances(p_trial, &mut self.z_trial);
        for (z, z0) in self.z_trial.iter_mut().zip(&self.z0) {
            *z += z0;
        }
        let local = self.loss.value_change(self.shard.labels(), &self.z_cur, &self.z_trial);
        let loss_change = comm.allreduce_dd_scalar(local)?;
        let reg_change = self.reg.value_change(&self.point(p_cur), &self.point(p_trial));
        let step_sq = p_trial.iter().zip(p_cur).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((loss_change + reg_change, step_sq))
    }

    fn commit(&mut self, comm: &mut dyn Communicator) -> Result<(), Error> {
        std::mem::swap(&mut self.z_cur, &mut self.z_trial);
        self.grad = comm.allreduce_dd(&grad_local(self.loss, self.shard, &self.z_cur))?;
        Ok(())
    }

    fn curvature(&mut self, dp: &[f64], dgrad: &[f64], _comm: &mut dyn Communicator) -> Result<f64, Error> {
        Ok(dp.iter().zip(dgrad).map(|(a, b)| a * b).sum())
    }
}

/// One worker's share of a direct SpaRSA run; `max_outer_iters` caps the
/// SpaRSA iterations and the inner stopping rule is disabled.
pub fn run_baseline_worker<L: SmoothLoss, R: Regularizer>(
    shard: &LabeledShard,
    loss: &L,
    reg: &R,
    cfg: &SolverConfig,
    comm: &mut dyn Communicator,
) -> Result<WorkerOutcome, Error> {
    cfg.validate()?;
    let d = shard.n_features();
    let x = shard.matrix();
    let w0 = vec![0.0; d];
    let mut z = vec![0.0; shard.n_instances()];
    x.dot_instances(&w0, &mut z);
    let f0 = comm.allreduce_dd_scalar(loss_value_local(loss, shard, &z))? + reg.value(&w0);
    let grad = comm.allreduce_dd(&grad_local(loss, shard, &z))?;
    let mut gx = vec![0.0; z.len()];
    x.dot_instances(&grad, &mut gx);
    let seed = match hessian_quadform_local(loss, shard, &z, &gx) {
        Some(q) => compute_a0(grad.iter().map(|g| g * g).sum(), comm.allreduce_dd_scalar(q)?).0,
        None => 1.0,
    };

    let mut rec = Recorder::new(d, comm.rank(), cfg.record_iterates);
    let mut g_norm = prox_grad_norm(reg, &w0, &grad);
    rec.push(0, f0, cfg, comm.ledger(), g_norm, RowStats::INITIAL, &w0);
    let mut status = Status::IterationLimit;
    if cfg.target_reached(f0, g_norm) {
        status = Status::TargetReached;
    }

    let params = SparsaParams {
        eps1: 0.0,
        max_iters: cfg.max_outer_iters,
        ..cfg.sparsa_params()
    };
    let model = LossModel::new(loss, reg, shard, &w0, grad);
    let mut engine = Sparsa::new(params, reg, &w0, model, seed);
    let mut w = w0.clone();
    while status == Status::IterationLimit {
        let before = engine.iterations();
        let term = engine.step(comm)?;
        if engine.iterations() > before {
            w = w0.iter().zip(engine.p()).map(|(a, b)| a + b).collect();
            g_norm = prox_grad_norm(reg, &w, engine.model().gradient());
            let stats = RowStats {
                alpha: None,
                inner_iters: 1,
                sparsa_trials: *engine.trials().last().unwrap(),
                delta: None,
                backtracks: 0,
            };
            rec.push(
                engine.iterations(),
                f0 + engine.q(),
                cfg,
                comm.ledger(),
                g_norm,
                stats,
                &w,
            );
            if cfg.target_reached(f0 + engine.q(), g_norm) {
                status = Status::TargetReached;
            }
        }
        match term {
            Some(Termination::Stationary) => status = Status::Stationary,
            Some(_) => break,
            None => {}
        }
    }
    let f = f0 + engine.q();
    Ok(WorkerOutcome {
        w,
        f,
        trace: rec.finish(),
        status,
        ledger: comm.ledger().clone(),
    })
}

pub fn solve_baseline<L: SmoothLoss, R: Regularizer>(
    dataset: &LabeledDataset,
    loss: &L,
    reg: &R,
    cfg: &SolverConfig,
    workers: usize,
    model: CostModel,
) -> Result<WorkerOutcome, Error> {
    let endpoints = endpoints_for(dataset, workers, model)?;
    let shards = partition_instances(dataset, workers)?;
    let results = run_workers(endpoints, |mut comm| {
        let rank = comm.rank();
        run_baseline_worker(&shards[rank], loss, reg, cfg, &mut comm)
    });
    collect_outcomes(results)
}
