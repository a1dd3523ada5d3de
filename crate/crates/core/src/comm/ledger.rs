use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Latency/bandwidth parameters of the allreduce cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Seconds to establish a connection, paid `log2(K)` times per round.
    pub t_initial: f64,
    /// Seconds per transmitted byte.
    pub t_byte: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_initial: 1e-3,
            t_byte: 1e-9,
        }
    }
}

impl CostModel {
    /// Modeled duration of one allreduce of `bytes` among `workers` participants.
    pub fn round_time(&self, workers: usize, bytes: u64) -> f64 {
        (workers as f64).log2() * self.t_initial + bytes as f64 * self.t_byte
    }
}

/// Running account of collective traffic as seen by one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    workers: usize,
    model: CostModel,
    rounds: u64,
    bytes: u64,
    /// Bytes actually moved, including the low words of compensated rounds.
    wire_bytes: u64,
    modeled_time: f64,
    /// Number of rounds per payload length (in f64 elements).
    by_length: BTreeMap<usize, u64>,
}

pub const BYTES_PER_VALUE: u64 = 8;

impl CostLedger {
    pub fn new(workers: usize, model: CostModel) -> Self {
        Self {
            workers,
            model,
            rounds: 0,
            bytes: 0,
            wire_bytes: 0,
            modeled_time: 0.0,
            by_length: BTreeMap::new(),
        }
    }

    /// Records one allreduce of `len` f64 values. A single worker has nothing
    /// to transfer, so nothing is recorded.
    pub fn record(&mut self, len: usize) {
        self.record_wire(len, len);
    }

    /// Records a round of `len` logical values carried in `wire_len` words.
    pub fn record_wire(&mut self, len: usize, wire_len: usize) {
        if self.workers <= 1 {
            return;
        }
        let bytes = len as u64 * BYTES_PER_VALUE;
        self.rounds += 1;
        self.bytes += bytes;
        self.wire_bytes += wire_len as u64 * BYTES_PER_VALUE;
        self.modeled_time += self.model.round_time(self.workers, bytes);
        *self.by_length.entry(len).or_default() += 1;
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn wire_bytes(&self) -> u64 {
        self.wire_bytes
    }

    pub fn modeled_time(&self) -> f64 {
        self.modeled_time
    }

    /// Rounds recorded per payload length.
    pub fn rounds_by_length(&self) -> &BTreeMap<usize, u64> {
        &self.by_length
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn model(&self) -> CostModel {
        self.model
    }

    /// Bytes expressed in units of one `d`-dimensional vector.
    pub fn comm_over_d(&self, d: usize) -> f64 {
        self.bytes as f64 / (BYTES_PER_VALUE as f64 * d as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sixteen_workers_one_vector() {
        let mut l = CostLedger::new(
            16,
            CostModel {
                t_initial: 1e-3,
                t_byte: 1e-8,
            },
        );
        l.record(1000);
        assert_eq!(l.bytes(), 8000);
        assert_relative_eq!(l.modeled_time(), 4.08e-3, max_relative = 1e-14);
    }

    #[test]
    fn empty_ledger() {
        assert_eq!(CostLedger::new(8, CostModel::default()).modeled_time(), 0.0);
    }

    #[test]
    fn bandwidth_only() {
        let t_byte = 3e-7;
        let mut l = CostLedger::new(4, CostModel { t_initial: 0.0, t_byte });
        // two rounds of one byte each: model directly
        let one_byte = l.model().round_time(4, 1);
        assert_eq!(one_byte, t_byte);
        l.record(1);
        l.record(1);
        assert_eq!(l.rounds(), 2);
        assert_relative_eq!(l.modeled_time(), 2.0 * 8.0 * t_byte);
    }

    #[test]
    fn single_worker_records_nothing() {
        let mut l = CostLedger::new(1, CostModel::default());
        l.record(100);
        assert_eq!((l.rounds(), l.bytes()), (0, 0));
    }
}
