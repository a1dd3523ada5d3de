//! Benchmark plumbing: run specs, trace CSVs, step-size histograms, `ε₁`
//! sweeps and cached reference objectives.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{run_baseline_worker, solve_baseline};
use crate::comm::{run_workers, CostModel, SocketWorld};
use crate::data::{partition_features, partition_instances, LabeledDataset};
use crate::error::Error;
use crate::objective::{Logistic, L1};
use crate::solver::{
    collect_outcomes, run_worker, solve, SolverConfig, Status, Target, Trace, TraceRow, WorkerOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Dplbfgs,
    /// SpaRSA applied directly to the full objective.
    Sparsa,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dplbfgs" => Ok(Method::Dplbfgs),
            "sparsa" | "sparsa_direct" => Ok(Method::Sparsa),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dplbfgs => "dplbfgs",
            Method::Sparsa => "sparsa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Sim,
    /// Loopback TCP, one thread per worker.
    Socket,
}

/// L1-regularized logistic regression `C Σ log(1 + e^{−y xᵀw}) + λ‖w‖₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub c: f64,
    pub lambda: f64,
}

impl Default for Problem {
    fn default() -> Self {
        Self { c: 1.0, lambda: 1.0 }
    }
}

impl Problem {
    pub fn loss(&self) -> Logistic {
        Logistic { c: self.c }
    }

    pub fn regularizer(&self) -> L1 {
        L1 { lambda: self.lambda }
    }
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub method: Method,
    pub workers: usize,
    pub problem: Problem,
    pub config: SolverConfig,
    pub cost: CostModel,
    pub backend: Backend,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            method: Method::Dplbfgs,
            workers: 1,
            problem: Problem::default(),
            config: SolverConfig::default(),
            cost: CostModel::default(),
            backend: Backend::Sim,
        }
    }
}

const SOCKET_TIMEOUT: Duration = Duration::from_secs(60);

pub fn run(dataset: &LabeledDataset, spec: &RunSpec) -> Result<WorkerOutcome, Error> {
    let (loss, reg) = (spec.problem.loss(), spec.problem.regularizer());
    let cfg = &spec.config;
    match (spec.backend, spec.method) {
        (Backend::Sim, Method::Dplbfgs) => solve(dataset, &loss, &reg, cfg, spec.workers, spec.cost),
        (Backend::Sim, Method::Sparsa) => solve_baseline(dataset, &loss, &reg, cfg, spec.workers, spec.cost),
        (Backend::Socket, method) => {
            let shards = partition_instances(dataset, spec.workers)?;
            let features = partition_features(dataset.n_features(), spec.workers);
            let endpoints = SocketWorld::local(spec.workers, spec.cost, Some(SOCKET_TIMEOUT))?;
            let results = run_workers(endpoints, |mut comm| {
                let shard = &shards[crate::comm::Communicator::rank(&comm)];
                match method {
                    Method::Dplbfgs => run_worker(shard, &features, &loss, &reg, cfg, &mut comm),
                    Method::Sparsa => run_baseline_worker(shard, &loss, &reg, cfg, &mut comm),
                }
            });
            collect_outcomes(results)
        }
    }
}

pub const TRACE_HEADER: &str = "iter,F,rel_err,comm_over_d,modeled_time_s,wall_time_s,alpha,inner_iters";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn write_trace_csv(mut out: impl Write, trace: &Trace) -> io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in &trace.rows {
        writeln!(
            out,
            "{},{:.17e},{},{:.17e},{:e},{:e},{},{}",
            r.iter,
            r.f,
            opt(r.rel_err),
            r.comm_over_d,
            r.modeled_time_s,
            r.wall_time_s,
            r.alpha.map(|a| a.to_string()).unwrap_or_default(),
            r.inner_iters,
        )?;
    }
    Ok(())
}

/// First row whose relative error is at most `tol`.
pub fn first_reaching(trace: &Trace, tol: f64) -> Option<&TraceRow> {
    trace.rows.iter().find(|r| r.rel_err.is_some_and(|e| e <= tol))
}

/// Step sizes bucketed by the exponent `i` of `α = θ^i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSizeHistogram {
    pub theta: f64,
    pub buckets: BTreeMap<u32, usize>,
    pub total: usize,
    pub min_alpha: Option<f64>,
}

impl StepSizeHistogram {
    pub fn from_alphas(alphas: &[f64], theta: f64) -> Self {
        let mut buckets = BTreeMap::new();
        for &a in alphas {
            let i = (a.ln() / theta.ln()).round().max(0.0) as u32;
            *buckets.entry(i).or_insert(0) += 1;
        }
        Self {
            theta,
            buckets,
            total: alphas.len(),
            min_alpha: alphas.iter().copied().reduce(f64::min),
        }
    }

    pub fn unit_fraction(&self) -> f64 {
        if self.total == 0 {
            return f64::NAN;
        }
        *self.buckets.get(&0).unwrap_or(&0) as f64 / self.total as f64
    }

    pub fn percent_unit(&self) -> f64 {
        100.0 * self.unit_fraction()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub eps1: f64,
    /// Communication when `rel_err` first drops to the tolerance.
    pub comm_over_d: Option<f64>,
    pub modeled_time_s: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub outer_iters: Option<usize>,
    pub unit_step_fraction: f64,
}

pub const SWEEP_HEADER: &str = "eps1,comm_over_d,modeled_time_s,wall_time_s,outer_iters,unit_step_fraction";

impl SweepRow {
    pub fn from_trace(eps1: f64, trace: &Trace, tol: f64, theta: f64) -> Self {
        let hit = first_reaching(trace, tol);
        Self {
            eps1,
            comm_over_d: hit.map(|r| r.comm_over_d),
            modeled_time_s: hit.map(|r| r.modeled_time_s),
            wall_time_s: hit.map(|r| r.wall_time_s),
            outer_iters: hit.map(|r| r.iter),
            unit_step_fraction: StepSizeHistogram::from_alphas(&trace.alphas(), theta).unit_fraction(),
        }
    }

    pub fn csv_line(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{:e},{},{},{},{},{}",
            self.eps1,
            o(self.comm_over_d),
            o(self.modeled_time_s),
            o(self.wall_time_s),
            self.outer_iters.map(|i| i.to_string()).unwrap_or_default(),
            self.unit_step_fraction,
        )
    }
}

/// Runs `spec` once per `ε₁`, stopping each run at `rel_err ≤ tol`.
pub fn eps_sweep(
    dataset: &LabeledDataset,
    spec: &RunSpec,
    eps: &[f64],
    fstar: f64,
    tol: f64,
) -> Result<Vec<SweepRow>, Error> {
    eps.iter()
        .map(|&e| {
            let mut s = spec.clone();
            s.config.eps1 = e;
            s.config.reference_f = Some(fstar);
            s.config.target = Some(Target::RelativeError { tol });
            let out = run(dataset, &s)?;
            Ok(SweepRow::from_trace(e, &out.trace, tol, s.config.theta))
        })
        .collect()
}

/// High-accuracy objective used as `F*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub key: String,
    pub fstar: f64,
    pub prox_grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const REFERENCE_TOL: f64 = 1e-10;

/// Digest of the data, problem and tolerance.
pub fn reference_key(dataset: &LabeledDataset, problem: &Problem, tol: f64) -> String {
    let mut h = Sha256::new();
    for v in [problem.c, problem.lambda, tol] {
        h.update(v.to_le_bytes());
    }
    for v in [dataset.n_instances(), dataset.n_features(), dataset.nnz()] {
        h.update((v as u64).to_le_bytes());
    }
    for (i, &y) in dataset.labels().iter().enumerate() {
        h.update(y.to_le_bytes());
        let (idx, val) = dataset.matrix().instance(i);
        for (j, v) in idx.iter().zip(val) {
            h.update(j.to_le_bytes());
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `<dataset>.fstar` next to the dataset file.
pub fn reference_cache_path(dataset_path: &Path) -> PathBuf {
    let mut name = dataset_path.as_os_str().to_owned();
    name.push(".fstar");
    PathBuf::from(name)
}

/// Returns the reference and whether it came from `cache`. A missing, stale
/// or unreadable cache triggers a fresh solve, which is then written back.
pub fn compute_reference(
    dataset: &LabeledDataset,
    problem: &Problem,
    cache: Option<&Path>,
) -> Result<(Reference, bool), Error> {
    let key = reference_key(dataset, problem, REFERENCE_TOL);
    if let Some(path) = cache {
        if let Ok(text) = fs::read_to_string(path) {
            if let Ok(r) = serde_json::from_str::<Reference>(&text) {
                if r.key == key {
                    return Ok((r, true));
                }
            }
        }
    }
    let cfg = SolverConfig {
        target: Some(Target::ProxGradNorm { tol: REFERENCE_TOL }),
        max_outer_iters: 20_000,
        eps1: 1e-1,
        ..Default::default()
    };
    let out = solve(
        dataset,
        &problem.loss(),
        &problem.regularizer(),
        &cfg,
        1,
        CostModel::default(),
    )?;
    let last = out.trace.rows.last().expect("initial row");
    let reference = Reference {
        key,
        fstar: out.f,
        prox_grad_norm: last.prox_grad_norm,
        iterations: last.iter,
        converged: out.status != Status::IterationLimit,
    };
    if let Some(path) = cache {
        let text = serde_json::to_string_pretty(&reference).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(path, text)?;
    }
    Ok((reference, false))
}
