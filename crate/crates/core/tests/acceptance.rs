//! End-to-end acceptance checks. Each test prints one status line.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dplbfgs::data::{partition_instances, InstanceMatrix};
use dplbfgs::harness::{compute_reference, first_reaching, run, Method, Problem, RunSpec, StepSizeHistogram, SweepRow};
use dplbfgs::lbfgs::{HessianHandle, PushOutcome};
use dplbfgs::objective::{grad_local, hessian_quadform_local};
use dplbfgs::solver::{Status, WorkerOutcome};
use dplbfgs::sparsa::{QuadraticModel, Sparsa, SparsaParams, Termination};
use dplbfgs::synth::{dense_like, sparse_signs, text_like};
use dplbfgs::*;

fn report(n: usize, title: &str, verdict: &str, detail: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2} [{verdict}] {title}: {}", detail.as_ref());
}

fn check(n: usize, title: &str, pass: bool, detail: impl AsRef<str>) {
    report(n, title, if pass { "PASS" } else { "FAIL" }, &detail);
    assert!(pass, "criterion {n} ({title}): {}", detail.as_ref());
}

fn solo() -> impl Communicator {
    SimWorld::endpoints(1, CostModel::default()).remove(0)
}

fn gaussian(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// dense BFGS oracle

/// Random SPD matrix with eigenvalues in `[lo, hi]`.
fn random_spd(rng: &mut impl Rng, d: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let g = DMatrix::from_vec(d, d, gaussian(rng, d * d));
    let q = g.qr().q();
    let eig = DVector::from_fn(d, |_, _| lo + (hi - lo) * rng.random::<f64>());
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

struct PairSequence {
    d: usize,
    m: usize,
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Pairs from a random SPD curvature, with occasional arbitrary `y` that the
/// safeguard may reject.
fn pair_sequence(seed: u64) -> PairSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=30);
    let m = rng.random_range(1..=5);
    let a = random_spd(&mut rng, d, 0.1, 10.0);
    let count = rng.random_range(1..=12);
    let pairs = (0..count)
        .map(|_| {
            let s = gaussian(&mut rng, d);
            let y = if rng.random::<f64>() < 0.2 {
                gaussian(&mut rng, d)
            } else {
                let ys = &a * DVector::from_vec(s.clone());
                ys.iter().map(|v| v + 1e-3 * rng.random::<f64>()).collect()
            };
            (s, y)
        })
        .collect();
    PairSequence { d, m, pairs }
}

const DELTA: f64 = 1e-10;

/// Admitted pairs (most recent `m`) under `sᵀy ≥ δ sᵀs`.
fn oracle_admitted(seq: &PairSequence) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut kept: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (s, y) in &seq.pairs {
        let sts = dot(s, s);
        if sts > 0.0 && dot(s, y) >= DELTA * sts {
            kept.push((s.clone(), y.clone()));
            if kept.len() > seq.m {
                kept.remove(0);
            }
        }
    }
    kept
}

fn oracle_gamma(rule: GammaRule, kept: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let (s, y) = kept.last().unwrap();
    match rule {
        GammaRule::CurvatureRatio => dot(s, y) / dot(s, s),
        GammaRule::InverseCurvatureRatio => dot(s, s) / dot(s, y),
    }
}

/// `B₀ = γI`, then `B ← B − Bssᵀ B/(sᵀBs) + yyᵀ/(yᵀs)` oldest first.
fn dense_bfgs(d: usize, gamma: f64, kept: &[(Vec<f64>, Vec<f64>)]) -> DMatrix<f64> {
    let mut b = DMatrix::identity(d, d) * gamma;
    for (s, y) in kept {
        let s = DVector::from_vec(s.clone());
        let y = DVector::from_vec(y.clone());
        let bs = &b * &s;
        let sbs = s.dot(&bs);
        b = b - &bs * bs.transpose() / sbs + &y * y.transpose() / y.dot(&s);
    }
    b
}

fn memory_for(seq: &PairSequence, rule: GammaRule, comm: &mut dyn Communicator) -> LbfgsMemory {
    let mut mem = LbfgsMemory::single(seq.m, DELTA, rule, seq.d);
    for (s, y) in &seq.pairs {
        let _: PushOutcome = mem.try_push_pair(s, y, comm).unwrap();
    }
    mem
}

#[test]
fn c01_compact_matches_dense_bfgs() {
    let start = Instant::now();
    let mut comm = solo();
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut cases = 0;
    for seed in 0..200 {
        let seq = pair_sequence(seed);
        let kept = oracle_admitted(&seq);
        if kept.is_empty() {
            continue;
        }
        for rule in [GammaRule::CurvatureRatio, GammaRule::InverseCurvatureRatio] {
            cases += 1;
            let mem = memory_for(&seq, rule, &mut comm);
            if mem.len() != kept.len() {
                mismatched += 1;
                continue;
            }
            let b = dense_bfgs(seq.d, oracle_gamma(rule, &kept), &kept);
            for _ in 0..3 {
                let p = gaussian(&mut rng, seq.d);
                let hp = mem.apply(&p, &mut comm).unwrap();
                let bp = &b * DVector::from_vec(p);
                let err = (DVector::from_vec(hp) - &bp).norm() / bp.norm();
                worst = worst.max(err);
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        1,
        "compact-form oracle equivalence",
        worst <= 1e-10 && mismatched == 0 && elapsed < Duration::from_secs(10),
        format!("{} sequences under both gamma rules, worst rel err {worst:.2e}, {mismatched} memory mismatches, {elapsed:.2?}", cases / 2),
    );
}

#[test]
fn c02_safeguard_spectrum() {
    let mut comm = solo();
    let mut min_eig = f64::INFINITY;
    let mut min_gamma = f64::INFINITY;
    let mut cases = 0;
    for seed in 0..200 {
        let seq = pair_sequence(seed);
        let kept = oracle_admitted(&seq);
        if kept.is_empty() {
            continue;
        }
        cases += 1;
        let mem = memory_for(&seq, GammaRule::default(), &mut comm);
        for (s, y) in mem.pairs() {
            assert!(dot(s, y) >= DELTA * dot(s, s));
        }
        min_gamma = min_gamma.min(mem.gamma());
        let b = dense_bfgs(seq.d, oracle_gamma(GammaRule::default(), &kept), &kept);
        let eig = SymmetricEigen::new(b).eigenvalues;
        min_eig = min_eig.min(eig.min());
    }
    check(
        2,
        "safeguard spectrum property",
        min_eig > 1e-14 && min_gamma >= DELTA,
        format!("{cases} sequences, min eigenvalue {min_eig:.3e}, min gamma {min_gamma:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// finite differences

fn random_dataset(rng: &mut impl Rng, n: usize, d: usize) -> LabeledDataset {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = InstanceMatrix::new(d);
    for _ in 0..n {
        let mut row = Vec::new();
        for j in 0..d {
            if rng.random::<f64>() < 0.6 {
                row.push((j, normal.sample(rng)));
            }
        }
        x.push_instance(&row);
    }
    let labels = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    LabeledDataset::new(x, labels)
}

fn margins(ds: &LabeledDataset, w: &[f64]) -> Vec<f64> {
    (0..ds.n_instances())
        .map(|i| {
            let (idx, val) = ds.matrix().instance(i);
            idx.iter().zip(val).map(|(&j, v)| v * w[j as usize]).sum()
        })
        .collect()
}

/// `C Σ log(1 + exp(−y z))`, evaluated directly.
fn logistic_oracle(ds: &LabeledDataset, c: f64, w: &[f64]) -> f64 {
    let z = margins(ds, w);
    c * ds
        .labels()
        .iter()
        .zip(&z)
        .map(|(y, z)| {
            let t = -y * z;
            if t > 0.0 {
                t + (-t).exp().ln_1p()
            } else {
                t.exp().ln_1p()
            }
        })
        .sum::<f64>()
}

fn shifted(w: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    w.iter().zip(v).map(|(a, b)| a + h * b).collect()
}

#[test]
fn c03_gradient_and_quadform_vs_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_g, mut worst_q): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = rng.random_range(1..=50);
        let d = rng.random_range(1..=20);
        let ds = random_dataset(&mut rng, n, d);
        let c = 0.5 + 1.5 * rng.random::<f64>();
        let loss = Logistic { c };
        let shard = partition_instances(&ds, 1).unwrap().remove(0);
        let w: Vec<f64> = gaussian(&mut rng, d).iter().map(|v| 0.5 * v).collect();
        let z = margins(&ds, &w);
        let grad: Vec<f64> = grad_local(&loss, &shard, &z).into_iter().map(Dd::value).collect();

        let h = 1e-5;
        let fd: Vec<f64> = (0..d)
            .map(|j| {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                (logistic_oracle(&ds, c, &shifted(&w, &e, h)) - logistic_oracle(&ds, c, &shifted(&w, &e, -h)))
                    / (2.0 * h)
            })
            .collect();
        let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = dot(&fd, &fd).sqrt().max(1e-8);
        worst_g = worst_g.max(diff / scale);

        let v = gaussian(&mut rng, d);
        let xv = margins(&ds, &v);
        let quad = hessian_quadform_local(&loss, &shard, &z, &xv).unwrap().value();
        let hq = 1e-3;
        let f0 = logistic_oracle(&ds, c, &w);
        let fd_q = (logistic_oracle(&ds, c, &shifted(&w, &v, hq)) - 2.0 * f0
            + logistic_oracle(&ds, c, &shifted(&w, &v, -hq)))
            / (hq * hq);
        worst_q = worst_q.max((quad - fd_q).abs() / fd_q.abs().max(1e-3));
    }
    let elapsed = start.elapsed();
    check(
        3,
        "gradient/quadform correctness",
        worst_g <= 1e-5 && worst_q <= 1e-5 && elapsed < Duration::from_secs(5),
        format!("50 instances, worst gradient rel err {worst_g:.2e}, quadform {worst_q:.2e}, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// SpaRSA contract

struct Subproblem {
    b: DMatrix<f64>,
    g: Vec<f64>,
    w: Vec<f64>,
    lambda: f64,
}

impl Subproblem {
    fn q(&self, p: &[f64]) -> f64 {
        let pv = DVector::from_column_slice(p);
        let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
        let moved = shifted(&self.w, p, 1.0);
        dot(&self.g, p) + 0.5 * pv.dot(&(&self.b * &pv)) + self.lambda * (l1(&moved) - l1(&self.w))
    }

    /// `Q*` after `iters` proximal-gradient steps of length `1/λ_max(B)`.
    fn reference_min(&self, iters: usize) -> f64 {
        let d = self.g.len();
        let lmax = SymmetricEigen::new(self.b.clone()).eigenvalues.max();
        let step = 1.0 / lmax;
        let mut p = DVector::zeros(d);
        let t = self.lambda * step;
        for _ in 0..iters {
            let grad = DVector::from_column_slice(&self.g) + &self.b * &p;
            for j in 0..d {
                let v = self.w[j] + p[j] - step * grad[j];
                let shrunk = v.signum() * (v.abs() - t).max(0.0);
                p[j] = shrunk - self.w[j];
            }
        }
        self.q(p.as_slice())
    }
}

#[test]
fn c04_sparsa_contract() {
    let start = Instant::now();
    let mut comm = solo();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_ratio, mut non_decrease, mut wrong_term, mut below_ref): (f64, usize, usize, usize) = (0.0, 0, 0, 0);
    let mut iters_total = 0;
    for _ in 0..100 {
        let (d, m) = (rng.random_range(5..=30), rng.random_range(1..=5));
        let seq = pair_sequence_sized(&mut rng, d, m);
        let kept = oracle_admitted(&seq);
        if kept.is_empty() {
            continue;
        }
        let mem = memory_for(&seq, GammaRule::default(), &mut comm);
        let lambda = 0.1 + 0.9 * rng.random::<f64>();
        let g = gaussian(&mut rng, seq.d);
        let w: Vec<f64> = gaussian(&mut rng, seq.d)
            .into_iter()
            .map(|v| if rng.random::<bool>() { 0.0 } else { v })
            .collect();
        let sub = Subproblem {
            b: dense_bfgs(seq.d, oracle_gamma(GammaRule::default(), &kept), &kept),
            g: g.clone(),
            w: w.clone(),
            lambda,
        };
        let reg = L1 { lambda };
        let model = QuadraticModel::new(&mem, &reg, &g, &w);
        let params = SparsaParams {
            max_iters: 100_000,
            ..SparsaParams::default()
        };
        let mut engine = Sparsa::new(params, &reg, &w, model, mem.gamma());
        let mut qs = vec![sub.q(&vec![0.0; seq.d])];
        let term = loop {
            let before = engine.iterations();
            let t = engine.step(&mut comm).unwrap();
            if engine.iterations() > before {
                qs.push(sub.q(engine.p()));
            }
            if let Some(t) = t {
                break t;
            }
        };
        let result = engine.finish();
        iters_total += result.inner_iterations;
        if term != Termination::StepRatio {
            wrong_term += 1;
        }
        if result
            .q_trace
            .windows(2)
            .any(|q| q[1].partial_cmp(&q[0]) != Some(std::cmp::Ordering::Less))
        {
            non_decrease += 1;
        }
        let qstar = sub.reference_min(100_000);
        let floor = 1e-12 * (1.0 + qstar.abs());
        if qs.iter().any(|&q| q < qstar - floor) {
            below_ref += 1;
        }
        for pair in qs.windows(2) {
            let (gap0, gap1) = (pair[0] - qstar, pair[1] - qstar);
            if gap0 > floor {
                worst_ratio = worst_ratio.max(gap1.max(0.0) / gap0);
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        4,
        "SpaRSA contract",
        non_decrease == 0
            && wrong_term == 0
            && below_ref == 0
            && worst_ratio < 1.0
            && elapsed < Duration::from_secs(30),
        format!(
            "100 subproblems, {iters_total} inner iterations, {non_decrease} non-decreasing, \
             {wrong_term} not stopped by the step ratio, worst contraction {worst_ratio:.4}, {elapsed:.2?}"
        ),
    );
}

fn pair_sequence_sized(rng: &mut impl Rng, d: usize, m: usize) -> PairSequence {
    let a = random_spd(rng, d, 0.1, 10.0);
    let count = rng.random_range(1..=8);
    let pairs = (0..count)
        .map(|_| {
            let s = gaussian(rng, d);
            let y = (&a * DVector::from_vec(s.clone())).iter().copied().collect();
            (s, y)
        })
        .collect();
    PairSequence { d, m, pairs }
}

// ---------------------------------------------------------------------------
// K-invariance and accounting

#[test]
fn c05_k_invariance() {
    let start = Instant::now();
    let ds = sparse_signs(2000, 500, 20, 42);
    let cfg = SolverConfig {
        target: Some(Target::ProxGradNorm { tol: 1e-8 }),
        record_iterates: true,
        ..Default::default()
    };
    let (loss, reg) = (Logistic::default(), L1::default());
    let base = solve(&ds, &loss, &reg, &cfg, 1, CostModel::default()).unwrap();
    let mut worst: f64 = 0.0;
    let mut lengths = vec![base.trace.iterates.len()];
    for k in [2, 4, 8] {
        let out = solve(&ds, &loss, &reg, &cfg, k, CostModel::default()).unwrap();
        lengths.push(out.trace.iterates.len());
        for (a, b) in out.trace.iterates.iter().zip(&base.trace.iterates) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let same_len = lengths.iter().all(|&l| l == lengths[0]);
    check(
        5,
        "K-invariance",
        worst <= 1e-12 && same_len && base.status == Status::TargetReached && elapsed < Duration::from_secs(60),
        format!("K in {{1,2,4,8}}, iterates per run {lengths:?}, max componentwise diff {worst:.2e}, {elapsed:.2?}"),
    );
}

/// Closed-form `(rounds, bytes)` per trace row for the main solver.
fn dplbfgs_budget(out: &WorkerOutcome, d: usize, m: usize, s: usize, partitioned: bool) -> Vec<(u64, u64)> {
    let mut rounds = 3u64;
    let mut values = (1 + d + 1) as u64;
    let mut expected = vec![(rounds, 8 * values)];
    for (t, row) in out.trace.rows.iter().skip(1).enumerate() {
        if t >= 1 {
            // pair admission, then SpaRSA with `m̃ = min(m, t)` pairs
            let before = m.min(t - 1);
            rounds += 1;
            values += (2 * before + 2) as u64;
            let mt = m.min(t) as u64;
            let trials = row.sparsa_trials as u64;
            rounds += 2 * trials + (s as u64 - 1);
            values += trials * (2 * mt + 2) + (s as u64 - 1);
            if partitioned {
                rounds += 1;
                values += d as u64;
            }
        }
        let probes = row.backtracks as u64 + 1;
        rounds += 1 + probes + 1;
        values += 1 + probes + d as u64;
        expected.push((rounds, 8 * values));
    }
    expected
}

#[test]
fn c06_communication_accounting() {
    let ds = sparse_signs(2000, 500, 20, 42);
    let d = ds.n_features();
    let (m, s, outer) = (3, 4, 8);
    let (loss, reg) = (Logistic::default(), L1::default());
    let mut details = Vec::new();
    let mut ok = true;
    for mode in [SubproblemMode::Partitioned, SubproblemMode::Replicated] {
        let cfg = SolverConfig {
            m,
            eps1: 0.0,
            sparsa_max_iters: s,
            max_outer_iters: outer,
            mode,
            ..Default::default()
        };
        let out = solve(&ds, &loss, &reg, &cfg, 4, CostModel::default()).unwrap();
        let fixed = out.trace.rows.iter().skip(2).all(|r| r.inner_iters == s);
        let expected = dplbfgs_budget(&out, d, m, s, mode == SubproblemMode::Partitioned);
        let got: Vec<(u64, u64)> = out.trace.rows.iter().map(|r| (r.rounds, r.bytes)).collect();
        let equal = got == expected && out.ledger.rounds() == expected.last().unwrap().0;
        ok &= fixed && equal && out.trace.rows.len() == outer + 1;
        details.push(format!(
            "{mode:?}: {} rounds / {} bytes {}",
            out.ledger.rounds(),
            out.ledger.bytes(),
            if equal { "match" } else { "MISMATCH" }
        ));
    }

    // direct SpaRSA: one scalar per trial and one gradient per accepted step
    let cfg = SolverConfig {
        max_outer_iters: 12,
        ..Default::default()
    };
    let out = dplbfgs::baseline::solve_baseline(&ds, &loss, &reg, &cfg, 4, CostModel::default()).unwrap();
    let mut rounds = 3u64;
    let mut values = (d + 2) as u64;
    let mut expected = vec![(rounds, 8 * values)];
    for row in out.trace.rows.iter().skip(1) {
        rounds += row.sparsa_trials as u64 + 1;
        values += row.sparsa_trials as u64 + d as u64;
        expected.push((rounds, 8 * values));
    }
    let got: Vec<(u64, u64)> = out.trace.rows.iter().map(|r| (r.rounds, r.bytes)).collect();
    ok &= got == expected;
    details.push(format!(
        "baseline: {} rounds {}",
        out.ledger.rounds(),
        if got == expected { "match" } else { "MISMATCH" }
    ));
    check(6, "communication accounting exactness", ok, details.join(", "));
}

// ---------------------------------------------------------------------------
// desk-scale runs shared by criteria 7 to 10

struct DeskRun {
    name: &'static str,
    d: usize,
    fstar: f64,
    dplbfgs: WorkerOutcome,
    sparsa: WorkerOutcome,
}

struct Desk {
    runs: Vec<DeskRun>,
    /// `ε₁` sweep on the text data, as outcomes of the main solver.
    sweep: Vec<(f64, WorkerOutcome)>,
    datasets: Vec<(&'static str, LabeledDataset, f64)>,
    elapsed: Duration,
}

const WORKERS: usize = 4;
const REL_TOL: f64 = 1e-3;

fn cache_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-{name}.fstar"))
}

fn desk_spec(method: Method, fstar: f64, eps1: f64) -> RunSpec {
    RunSpec {
        method,
        workers: WORKERS,
        problem: Problem::default(),
        config: SolverConfig {
            eps1,
            reference_f: Some(fstar),
            target: Some(Target::RelativeError { tol: REL_TOL }),
            max_outer_iters: 20_000,
            record_iterates: method == Method::Dplbfgs,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let datasets = [
            ("text", text_like(10_000, 20_000, 40, 1)),
            ("dense", dense_like(4_000, 2_000, 2)),
        ];
        let mut runs = Vec::new();
        let mut kept = Vec::new();
        for (name, ds) in datasets {
            let (reference, _) = compute_reference(&ds, &Problem::default(), Some(&cache_path(name))).unwrap();
            let fstar = reference.fstar;
            let dp = run(&ds, &desk_spec(Method::Dplbfgs, fstar, 1e-2)).unwrap();
            let sp = run(&ds, &desk_spec(Method::Sparsa, fstar, 1e-2)).unwrap();
            runs.push(DeskRun {
                name,
                d: ds.n_features(),
                fstar,
                dplbfgs: dp,
                sparsa: sp,
            });
            kept.push((name, ds, fstar));
        }
        let (_, text, fstar) = &kept[0];
        let sweep = [1e-1, 1e-2, 1e-3]
            .into_iter()
            .map(|eps1| (eps1, run(text, &desk_spec(Method::Dplbfgs, *fstar, eps1)).unwrap()))
            .collect();
        Desk {
            runs,
            sweep,
            datasets: kept,
            elapsed: start.elapsed(),
        }
    })
}

/// `F` evaluated from scratch for L1-regularized logistic loss.
fn objective_oracle(ds: &LabeledDataset, p: Problem, w: &[f64]) -> f64 {
    logistic_oracle(ds, p.c, w) + p.lambda * w.iter().map(|x| x.abs()).sum::<f64>()
}

fn gradient_oracle(ds: &LabeledDataset, p: Problem, w: &[f64]) -> Vec<f64> {
    let z = margins(ds, w);
    let mut g = vec![0.0; w.len()];
    for (i, (&y, &zi)) in ds.labels().iter().zip(&z).enumerate() {
        let coef = -p.c * y / (1.0 + (y * zi).exp());
        let (idx, val) = ds.matrix().instance(i);
        for (&j, v) in idx.iter().zip(val) {
            g[j as usize] += coef * v;
        }
    }
    g
}

#[test]
fn c07_line_search_guarantee() {
    let desk = desk();
    let problem = Problem::default();
    let cfg = SolverConfig::default();
    let (mut checked, mut violations, mut max_backtracks) = (0, 0, 0);
    let mut outcomes: Vec<(&str, &WorkerOutcome)> = desk.runs.iter().map(|r| (r.name, &r.dplbfgs)).collect();
    outcomes.extend(desk.sweep.iter().map(|(_, o)| ("text", o)));
    for (name, out) in outcomes {
        let ds = &desk.datasets.iter().find(|(n, _, _)| *n == name).unwrap().1;
        let its = &out.trace.iterates;
        for (t, row) in out.trace.rows.iter().enumerate().skip(1) {
            let alpha = row.alpha.unwrap();
            max_backtracks = max_backtracks.max(row.backtracks);
            let (w0, w1) = (&its[t - 1], &its[t]);
            let p: Vec<f64> = w1.iter().zip(w0).map(|(a, b)| (a - b) / alpha).collect();
            let g = gradient_oracle(ds, problem, w0);
            let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
            let delta = dot(&g, &p) + problem.lambda * (l1(&shifted(w0, &p, 1.0)) - l1(w0));
            let (f0, f1) = (objective_oracle(ds, problem, w0), objective_oracle(ds, problem, w1));
            let slack = 1e-12 * f0.abs().max(1.0);
            checked += 1;
            if !(delta < 0.0 && f1 <= f0 + alpha * cfg.sigma1 * delta + slack) {
                violations += 1;
            }
        }
    }
    check(
        7,
        "line-search guarantee",
        violations == 0 && max_backtracks < cfg.max_backtracks,
        format!("{checked} accepted steps re-evaluated, {violations} violations, max backtracks {max_backtracks}"),
    );
}

fn comm_at_tol(out: &WorkerOutcome) -> Option<f64> {
    first_reaching(&out.trace, REL_TOL).map(|r| r.comm_over_d)
}

#[test]
fn c08_desk_scale_ordering() {
    let desk = desk();
    let mut ok = desk.elapsed < Duration::from_secs(600);
    let mut details = Vec::new();
    for r in &desk.runs {
        let (a, b) = (comm_at_tol(&r.dplbfgs), comm_at_tol(&r.sparsa));
        ok &= matches!((a, b), (Some(a), Some(b)) if a < b);
        details.push(format!(
            "{} (d={}, F*={:.6}): DPLBFGS {} vs SpaRSA {}",
            r.name,
            r.d,
            r.fstar,
            a.map_or("-".into(), |v| format!("{v:.2}")),
            b.map_or("-".into(), |v| format!("{v:.2}"))
        ));
    }
    details.push(format!("{:.1?} including references", desk.elapsed));
    check(
        8,
        "desk-scale convergence ordering (comm_over_d at rel_err <= 1e-3)",
        ok,
        details.join("; "),
    );
}

#[test]
fn c09_unit_step_prevalence() {
    let desk = desk();
    let theta = SolverConfig::default().theta;
    let mut pass = true;
    let mut details = Vec::new();
    for r in &desk.runs {
        let h = StepSizeHistogram::from_alphas(&r.dplbfgs.trace.alphas(), theta);
        pass &= h.unit_fraction() >= 0.8;
        details.push(format!("{}: {:.1}% of {} steps", r.name, h.percent_unit(), h.total));
    }
    // soft criterion: reported, never failed
    report(
        9,
        "unit-step prevalence (soft, >= 80%)",
        if pass { "PASS" } else { "WARN" },
        details.join("; "),
    );
}

#[test]
fn c10_eps1_trend() {
    let desk = desk();
    let theta = SolverConfig::default().theta;
    let rows: Vec<SweepRow> = desk
        .sweep
        .iter()
        .map(|(e, o)| SweepRow::from_trace(*e, &o.trace, REL_TOL, theta))
        .collect();
    let comms: Vec<Option<f64>> = rows.iter().map(|r| r.comm_over_d).collect();
    let ok = comms.iter().all(Option::is_some) && comms.windows(2).all(|w| w[1].unwrap() <= w[0].unwrap());
    let listed: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "eps1={:e}: {}",
                r.eps1,
                r.comm_over_d.map_or("-".into(), |v| format!("{v:.2}"))
            )
        })
        .collect();
    check(
        10,
        "eps1 trend (comm_over_d nonincreasing in tightness)",
        ok,
        listed.join(", "),
    );
}
