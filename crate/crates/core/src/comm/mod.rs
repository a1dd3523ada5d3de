//! Collective communication among `K` logical workers.
//!
//! Every backend reduces contributions in ascending worker order, so the
//! result of an allreduce is bitwise identical on all workers and across
//! backends.

mod ledger;
mod sim;
pub mod socket;

use std::thread;

pub use ledger::{CostLedger, CostModel, BYTES_PER_VALUE};
pub use sim::{SimEndpoint, SimWorld};
pub use socket::{SocketEndpoint, SocketWorld};

use crate::dd::Dd;
use crate::error::{CommError, Error};

/// How contributions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Elementwise `f64` sum.
    Plain,
    /// The buffer holds interleaved `(hi, lo)` double-word pairs, merged
    /// without intermediate rounding. Counts as half its length in the
    /// ledger.
    Compensated,
}

/// One worker's handle onto the collective layer.
pub trait Communicator: Send {
    fn rank(&self) -> usize;

    fn size(&self) -> usize;

    /// Replaces `buf` with the reduction of every worker's `buf`.
    fn allreduce(&mut self, buf: &mut [f64], op: Reduction) -> Result<(), CommError>;

    fn ledger(&self) -> &CostLedger;

    /// Replaces `buf` with the elementwise sum of every worker's `buf`.
    fn allreduce_sum(&mut self, buf: &mut [f64]) -> Result<(), CommError> {
        self.allreduce(buf, Reduction::Plain)
    }

    /// Sums double-word partials and rounds each total once.
    fn allreduce_dd(&mut self, parts: &[Dd]) -> Result<Vec<f64>, CommError> {
        let mut buf: Vec<f64> = parts.iter().flat_map(|p| [p.hi, p.lo]).collect();
        self.allreduce(&mut buf, Reduction::Compensated)?;
        Ok(buf.chunks_exact(2).map(|c| c[0] + c[1]).collect())
    }

    fn allreduce_dd_scalar(&mut self, part: Dd) -> Result<f64, CommError> {
        Ok(self.allreduce_dd(&[part])?[0])
    }

    fn allreduce_scalar_sum(&mut self, x: f64) -> Result<f64, CommError> {
        let mut buf = [x];
        self.allreduce_sum(&mut buf)?;
        Ok(buf[0])
    }
}

/// Reduces `contributions` in ascending worker order into `out`.
pub(crate) fn ordered_reduce<'a>(out: &mut [f64], op: Reduction, mut contributions: impl Iterator<Item = &'a [f64]>) {
    let first = contributions.next().expect("at least one contribution");
    out.copy_from_slice(first);
    for c in contributions {
        match op {
            Reduction::Plain => {
                for (o, v) in out.iter_mut().zip(c) {
                    *o += v;
                }
            }
            Reduction::Compensated => {
                for (o, v) in out.chunks_exact_mut(2).zip(c.chunks_exact(2)) {
                    let mut acc = Dd { hi: o[0], lo: o[1] };
                    acc.merge(Dd { hi: v[0], lo: v[1] });
                    (o[0], o[1]) = (acc.hi, acc.lo);
                }
            }
        }
    }
}

/// Logical payload length of a buffer reduced with `op`.
pub(crate) fn logical_len(len: usize, op: Reduction) -> usize {
    match op {
        Reduction::Plain => len,
        Reduction::Compensated => len / 2,
    }
}

/// Runs `work` once per endpoint on its own thread and returns the results in
/// rank order.
pub fn run_workers<C, T, F>(endpoints: Vec<C>, work: F) -> Vec<Result<T, Error>>
where
    C: Communicator,
    T: Send,
    F: Fn(C) -> Result<T, Error> + Sync,
{
    if endpoints.len() == 1 {
        let ep = endpoints.into_iter().next().unwrap();
        return vec![work(ep)];
    }
    thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| {
                let work = &work;
                scope.spawn(move || work(ep))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Internal("worker panicked".into())))
            })
            .collect()
    })
}
