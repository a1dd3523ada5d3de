use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{logical_len, ordered_reduce, Communicator, CostLedger, CostModel, Reduction};
use crate::error::CommError;

/// In-process allreduce fabric: `K` endpoints meeting at rendezvous points.
pub struct SimWorld;

impl SimWorld {
    /// Creates `workers` connected endpoints, ordered by rank.
    pub fn endpoints(workers: usize, model: CostModel) -> Vec<SimEndpoint> {
        Self::endpoints_with_timeout(workers, model, None)
    }

    pub fn endpoints_with_timeout(workers: usize, model: CostModel, timeout: Option<Duration>) -> Vec<SimEndpoint> {
        assert!(workers >= 1);
        let shared = Arc::new(Shared {
            workers,
            state: Mutex::new(State {
                rendezvous: 0,
                arrived: 0,
                slots: vec![None; workers],
                op: Reduction::Plain,
                result: None,
                readers: 0,
                departed: vec![false; workers],
            }),
            cv: Condvar::new(),
        });
        (0..workers)
            .map(|rank| SimEndpoint {
                rank,
                shared: Arc::clone(&shared),
                next_rendezvous: 0,
                ledger: CostLedger::new(workers, model),
                timeout,
            })
            .collect()
    }
}

struct Shared {
    workers: usize,
    state: Mutex<State>,
    cv: Condvar,
}

struct State {
    rendezvous: u64,
    arrived: usize,
    slots: Vec<Option<Vec<f64>>>,
    op: Reduction,
    result: Option<Arc<Result<Vec<f64>, CommError>>>,
    readers: usize,
    departed: Vec<bool>,
}

impl State {
    fn reduce(&self) -> Result<Vec<f64>, CommError> {
        let expected = self.slots[0].as_ref().map_or(0, Vec::len);
        for (rank, slot) in self.slots.iter().enumerate() {
            let got = slot.as_ref().map_or(0, Vec::len);
            if got != expected {
                return Err(CommError::LengthMismatch {
                    rendezvous: self.rendezvous,
                    rank,
                    expected,
                    got,
                });
            }
        }
        let mut out = vec![0.0; expected];
        ordered_reduce(&mut out, self.op, self.slots.iter().map(|s| s.as_deref().unwrap()));
        Ok(out)
    }
}

pub struct SimEndpoint {
    rank: usize,
    shared: Arc<Shared>,
    next_rendezvous: u64,
    ledger: CostLedger,
    timeout: Option<Duration>,
}

impl SimEndpoint {
    fn wait<'a>(&self, guard: MutexGuard<'a, State>, deadline: Option<Instant>) -> (MutexGuard<'a, State>, bool) {
        match deadline {
            None => (self.shared.cv.wait(guard).unwrap(), false),
            Some(deadline) => {
                let now = Instant::now();
                if now >= deadline {
                    return (guard, true);
                }
                let (g, _) = self.shared.cv.wait_timeout(guard, deadline - now).unwrap();
                (g, false)
            }
        }
    }

    fn exchange(&mut self, buf: &[f64], op: Reduction) -> Result<Vec<f64>, CommError> {
        let deadline = self.timeout.map(|t| Instant::now() + t);
        let mut st = self.shared.state.lock().unwrap();
        while st.result.is_some() {
            let (g, expired) = self.wait(st, deadline);
            st = g;
            if expired {
                return Err(CommError::Timeout(self.next_rendezvous));
            }
        }
        if st.rendezvous != self.next_rendezvous {
            return Err(CommError::RendezvousMismatch {
                rank: self.rank,
                expected: st.rendezvous,
                got: self.next_rendezvous,
            });
        }
        st.slots[self.rank] = Some(buf.to_vec());
        // participants agree on the operation, as they do on the length
        st.op = op;
        st.arrived += 1;
        if st.arrived == self.shared.workers {
            st.result = Some(Arc::new(st.reduce()));
            st.readers = self.shared.workers;
            self.shared.cv.notify_all();
        } else {
            while st.result.is_none() {
                let failure = if let Some(gone) = st.departed.iter().position(|&d| d) {
                    Some(CommError::PeerDeparted(gone))
                } else {
                    let (g, expired) = self.wait(st, deadline);
                    st = g;
                    (expired && st.result.is_none()).then_some(CommError::Timeout(self.next_rendezvous))
                };
                if let Some(err) = failure {
                    // withdraw our contribution so the round can be retried
                    st.slots[self.rank] = None;
                    st.arrived -= 1;
                    return Err(err);
                }
            }
        }
        let result = Arc::clone(st.result.as_ref().unwrap());
        st.readers -= 1;
        if st.readers == 0 {
            st.result = None;
            st.arrived = 0;
            st.slots.iter_mut().for_each(|s| *s = None);
            st.rendezvous += 1;
            self.shared.cv.notify_all();
        }
        drop(st);
        self.next_rendezvous += 1;
        (*result).clone()
    }
}

impl Communicator for SimEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.shared.workers
    }

    fn allreduce(&mut self, buf: &mut [f64], op: Reduction) -> Result<(), CommError> {
        if self.shared.workers == 1 {
            return Ok(());
        }
        let reduced = self.exchange(buf, op)?;
        buf.copy_from_slice(&reduced);
        self.ledger.record_wire(logical_len(buf.len(), op), buf.len());
        Ok(())
    }

    fn ledger(&self) -> &CostLedger {
        &self.ledger
    }
}

impl Drop for SimEndpoint {
    fn drop(&mut self) {
        if let Ok(mut st) = self.shared.state.lock() {
            st.departed[self.rank] = true;
            self.shared.cv.notify_all();
        }
    }
}
