use dplbfgs::comm::run_workers;
use dplbfgs::data::partition_features;
use dplbfgs::harness::{self, Backend, Method, Problem, RunSpec};
use dplbfgs::lbfgs::{HessianHandle, PushOutcome};
use dplbfgs::solver::Status;
use dplbfgs::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODEL: CostModel = CostModel {
    t_initial: 1e-4,
    t_byte: 1e-9,
};

fn pairs(d: usize, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let s: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            // y = A s for a diagonal SPD A
            let y = s.iter().enumerate().map(|(j, v)| (1.0 + j as f64 * 0.3) * v).collect();
            (s, y)
        })
        .collect()
}

fn single_memory(d: usize, m: usize, pairs: &[(Vec<f64>, Vec<f64>)]) -> LbfgsMemory {
    let mut mem = LbfgsMemory::single(m, 1e-10, GammaRule::default(), d);
    let mut solo = SimWorld::endpoints(1, MODEL).pop().unwrap();
    for (s, y) in pairs {
        assert_eq!(mem.try_push_pair(s, y, &mut solo).unwrap(), PushOutcome::Admitted);
    }
    mem
}

#[test]
fn block_memory_applies_like_a_single_one() {
    let (d, m, k) = (23, 4, 3);
    let seq = pairs(d, 7, 5);
    let p: Vec<f64> = (0..d).map(|j| (j as f64 * 0.7).sin()).collect();
    let expect = single_memory(d, m, &seq)
        .apply(&p, &mut SimWorld::endpoints(1, MODEL).pop().unwrap())
        .unwrap();

    let features = partition_features(d, k);
    let blocks = run_workers(SimWorld::endpoints(k, MODEL), |mut c| {
        let own = features.block(c.rank());
        let mut mem = LbfgsMemory::new(m, 1e-10, GammaRule::default(), own.clone(), own.clone());
        for (s, y) in &seq {
            mem.try_push_pair(&s[own.clone()], &y[own.clone()], &mut c)?;
        }
        Ok((own.clone(), mem.apply(&p[own], &mut c)?))
    });
    let mut got = vec![0.0; d];
    for b in blocks {
        let (own, hp) = b.unwrap();
        got[own].copy_from_slice(&hp);
    }
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() <= 1e-12 * (1.0 + e.abs()), "{g} vs {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn apply_is_symmetric_and_linear(
        seed in 0u64..1000,
        count in 1usize..8,
        a in -3.0f64..3.0,
    ) {
        let d = 12;
        let mem = single_memory(d, 5, &pairs(d, count, seed));
        let mut comm = SimWorld::endpoints(1, MODEL).pop().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hu = mem.apply(&u, &mut comm).unwrap();
        let hv = mem.apply(&v, &mut comm).unwrap();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let scale = 1.0 + dot(&hu, &hu).sqrt() + dot(&hv, &hv).sqrt();
        prop_assert!((dot(&v, &hu) - dot(&u, &hv)).abs() <= 1e-10 * scale);

        let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + y).collect();
        let hc = mem.apply(&combo, &mut comm).unwrap();
        for j in 0..d {
            prop_assert!((hc[j] - (a * hu[j] + hv[j])).abs() <= 1e-10 * scale);
        }
        prop_assert!(dot(&u, &hu) > 0.0);
    }
}

fn spec(method: Method, mode: SubproblemMode, backend: Backend) -> RunSpec {
    RunSpec {
        method,
        workers: 3,
        problem: Problem { c: 1.0, lambda: 0.5 },
        config: SolverConfig {
            mode,
            m: 5,
            target: Some(Target::ProxGradNorm { tol: 1e-7 }),
            max_outer_iters: 500,
            ..SolverConfig::default()
        },
        cost: MODEL,
        backend,
    }
}

#[test]
fn subproblem_modes_reach_the_same_minimizer() {
    let data = dplbfgs::synth::sparse_signs(400, 60, 8, 3);
    let a = harness::run(&data, &spec(Method::Dplbfgs, SubproblemMode::Partitioned, Backend::Sim)).unwrap();
    let b = harness::run(&data, &spec(Method::Dplbfgs, SubproblemMode::Replicated, Backend::Sim)).unwrap();
    assert_eq!((a.status, b.status), (Status::TargetReached, Status::TargetReached));
    assert!((a.f - b.f).abs() <= 1e-9 * a.f);
    let gap = a.w.iter().zip(&b.w).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-5, "iterates differ by {gap}");
}

#[test]
fn socket_runs_match_simulated_ones() {
    let data = dplbfgs::synth::sparse_signs(300, 40, 6, 11);
    for method in [Method::Dplbfgs, Method::Sparsa] {
        let sim = harness::run(&data, &spec(method, SubproblemMode::Partitioned, Backend::Sim)).unwrap();
        let tcp = harness::run(&data, &spec(method, SubproblemMode::Partitioned, Backend::Socket)).unwrap();
        assert_eq!(sim.f.to_bits(), tcp.f.to_bits(), "{method}");
        assert_eq!(sim.w, tcp.w);
        assert_eq!(sim.ledger.rounds(), tcp.ledger.rounds());
        assert_eq!(sim.ledger.bytes(), tcp.ledger.bytes());
    }
}
