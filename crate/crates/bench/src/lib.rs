//! Shared fixtures for the kernel benchmarks.

use dplbfgs::comm::SimEndpoint;
use dplbfgs::{CostModel, GammaRule, LbfgsMemory, SimWorld};

pub fn solo() -> SimEndpoint {
    SimWorld::endpoints(1, CostModel::default()).pop().unwrap()
}

/// Deterministic, nonrepeating test vector.
pub fn wave(d: usize, phase: f64) -> Vec<f64> {
    (0..d).map(|j| (j as f64 * 0.618 + phase).sin()).collect()
}

/// Memory over `d` coordinates filled with `m` pairs from a diagonal SPD map.
pub fn full_memory(d: usize, m: usize) -> LbfgsMemory {
    let mut mem = LbfgsMemory::single(m, 1e-10, GammaRule::default(), d);
    let mut comm = solo();
    for i in 0..m {
        let s = wave(d, i as f64);
        let y: Vec<f64> = s.iter().enumerate().map(|(j, v)| (1.0 + (j % 17) as f64) * v).collect();
        mem.try_push_pair(&s, &y, &mut comm).unwrap();
    }
    mem
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_is_full() {
        let mem = full_memory(50, 4);
        assert_eq!(mem.len(), 4);
    }
}
