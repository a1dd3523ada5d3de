//! TCP allreduce backend.
//!
//! Rank 0 acts as the hub: it gathers every contribution, reduces them in
//! ascending rank order and sends the result back. All integers and floats
//! are little-endian. Every frame starts with a 25-byte header:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `0x4C42_5044`                     |
//! | 4      | 1    | kind                                    |
//! | 5      | 4    | sender rank                             |
//! | 9      | 8    | rendezvous id (collective call counter) |
//! | 17     | 8    | payload length prefix                   |
//!
//! Contribution and result frames carry `length` f64 values. A length
//! mismatch frame carries the offending rank in the rank field, the offending
//! length as the prefix and one u64 with the expected length. A failure frame
//! carries `length` bytes of UTF-8 text.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use super::{logical_len, ordered_reduce, Communicator, CostLedger, CostModel, Reduction};
use crate::error::CommError;

pub const MAGIC: u32 = 0x4C42_5044;
pub const HEADER_LEN: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Hello = 1,
    Contribution = 2,
    Result = 3,
    LengthMismatch = 4,
    Failure = 5,
}

impl FrameKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Hello,
            2 => Self::Contribution,
            3 => Self::Result,
            4 => Self::LengthMismatch,
            5 => Self::Failure,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub rank: u32,
    pub rendezvous: u64,
    pub length: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn values(kind: FrameKind, rank: usize, rendezvous: u64, values: &[f64]) -> Self {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            kind,
            rank: rank as u32,
            rendezvous,
            length: values.len() as u64,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&self.rendezvous.to_le_bytes());
        out.extend_from_slice(&self.length.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    fn payload_bytes(kind: FrameKind, length: u64) -> Result<usize, CommError> {
        let n = match kind {
            FrameKind::Hello => Some(0),
            FrameKind::Contribution | FrameKind::Result => length.checked_mul(8),
            FrameKind::LengthMismatch => Some(8),
            FrameKind::Failure => Some(length),
        };
        match n {
            Some(n) if n < (1 << 34) => Ok(n as usize),
            _ => Err(CommError::Frame(format!("payload length {length} too large"))),
        }
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CommError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(io_to_comm)?;
        let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
        if magic != MAGIC {
            return Err(CommError::Frame(format!("bad magic {magic:#x}")));
        }
        let kind =
            FrameKind::from_u8(header[4]).ok_or_else(|| CommError::Frame(format!("unknown kind {}", header[4])))?;
        let rank = u32::from_le_bytes(header[5..9].try_into().unwrap());
        let rendezvous = u64::from_le_bytes(header[9..17].try_into().unwrap());
        let length = u64::from_le_bytes(header[17..25].try_into().unwrap());
        let mut payload = vec![0u8; Self::payload_bytes(kind, length)?];
        r.read_exact(&mut payload).map_err(io_to_comm)?;
        Ok(Self {
            kind,
            rank,
            rendezvous,
            length,
            payload,
        })
    }

    pub fn decode_values(&self) -> Vec<f64> {
        self.payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

fn io_to_comm(err: io::Error) -> CommError {
    match err.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => CommError::Transport(format!("peer closed: {err}")),
        _ => CommError::from(err),
    }
}

/// Builds TCP-connected endpoints.
pub struct SocketWorld;

impl SocketWorld {
    /// Starts `workers` endpoints on the loopback interface, ordered by rank.
    pub fn local(
        workers: usize,
        model: CostModel,
        timeout: Option<Duration>,
    ) -> Result<Vec<SocketEndpoint>, CommError> {
        assert!(workers >= 1);
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let joiners: Vec<_> = (1..workers)
            .map(|rank| thread::spawn(move || Self::join(addr, rank, workers, model, timeout)))
            .collect();
        let root = Self::root(listener, workers, model, timeout)?;
        let mut all = vec![root];
        for j in joiners {
            all.push(
                j.join()
                    .map_err(|_| CommError::Transport("join thread panicked".into()))??,
            );
        }
        Ok(all)
    }

    /// Accepts `workers - 1` peers on `listener` and returns the rank-0 endpoint.
    pub fn root(
        listener: TcpListener,
        workers: usize,
        model: CostModel,
        timeout: Option<Duration>,
    ) -> Result<SocketEndpoint, CommError> {
        let mut peers: Vec<Option<TcpStream>> = (0..workers).map(|_| None).collect();
        for _ in 1..workers {
            let (mut stream, _) = listener.accept()?;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(timeout)?;
            let hello = Frame::read_from(&mut stream)?;
            let rank = hello.rank as usize;
            if hello.kind != FrameKind::Hello || rank == 0 || rank >= workers || peers[rank].is_some() {
                return Err(CommError::Frame(format!("unexpected hello from rank {rank}")));
            }
            peers[rank] = Some(stream);
        }
        Ok(SocketEndpoint {
            rank: 0,
            workers,
            link: Link::Root(peers.into_iter().skip(1).map(Option::unwrap).collect()),
            next_rendezvous: 0,
            ledger: CostLedger::new(workers, model),
        })
    }

    /// Connects a non-root worker to the hub at `addr`.
    pub fn join(
        addr: impl ToSocketAddrs,
        rank: usize,
        workers: usize,
        model: CostModel,
        timeout: Option<Duration>,
    ) -> Result<SocketEndpoint, CommError> {
        let addr: SocketAddr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| CommError::Transport("no address".into()))?;
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(timeout)?;
        stream.write_all(&Frame::values(FrameKind::Hello, rank, 0, &[]).encode())?;
        Ok(SocketEndpoint {
            rank,
            workers,
            link: Link::Leaf(stream),
            next_rendezvous: 0,
            ledger: CostLedger::new(workers, model),
        })
    }
}

enum Link {
    /// Streams to ranks `1..K`.
    Root(Vec<TcpStream>),
    Leaf(TcpStream),
}

pub struct SocketEndpoint {
    rank: usize,
    workers: usize,
    link: Link,
    next_rendezvous: u64,
    ledger: CostLedger,
}

impl SocketEndpoint {
    fn root_round(peers: &mut [TcpStream], rendezvous: u64, buf: &mut [f64], op: Reduction) -> Result<(), CommError> {
        let mut outcome: Result<(), CommError> = Ok(());
        let mut contributions = vec![buf.to_vec()];
        for (i, stream) in peers.iter_mut().enumerate() {
            let rank = i + 1;
            let frame = match Frame::read_from(stream) {
                Ok(f) => f,
                Err(CommError::Transport(msg)) if msg.starts_with("peer closed") => {
                    outcome = outcome.and(Err(CommError::PeerDeparted(rank)));
                    continue;
                }
                Err(CommError::Transport(msg)) if msg.starts_with("timeout") => {
                    outcome = outcome.and(Err(CommError::Timeout(rendezvous)));
                    continue;
                }
                Err(e) => {
                    outcome = outcome.and(Err(e));
                    continue;
                }
            };
            if frame.kind != FrameKind::Contribution || frame.rank as usize != rank {
                outcome = outcome.and(Err(CommError::Frame(format!(
                    "expected contribution from rank {rank}, got {:?} from {}",
                    frame.kind, frame.rank
                ))));
                continue;
            }
            if frame.rendezvous != rendezvous {
                outcome = outcome.and(Err(CommError::RendezvousMismatch {
                    rank,
                    expected: rendezvous,
                    got: frame.rendezvous,
                }));
                continue;
            }
            if frame.length as usize != buf.len() {
                outcome = outcome.and(Err(CommError::LengthMismatch {
                    rendezvous,
                    rank,
                    expected: buf.len(),
                    got: frame.length as usize,
                }));
                continue;
            }
            if outcome.is_ok() {
                contributions.push(frame.decode_values());
            }
        }
        let mut sum = vec![0.0; buf.len()];
        if outcome.is_ok() {
            ordered_reduce(&mut sum, op, contributions.iter().map(Vec::as_slice));
        }
        let reply = match &outcome {
            Ok(()) => Frame::values(FrameKind::Result, 0, rendezvous, &sum),
            Err(CommError::LengthMismatch {
                rank, expected, got, ..
            }) => Frame {
                kind: FrameKind::LengthMismatch,
                rank: *rank as u32,
                rendezvous,
                length: *got as u64,
                payload: (*expected as u64).to_le_bytes().to_vec(),
            },
            Err(e) => {
                let msg = e.to_string().into_bytes();
                Frame {
                    kind: FrameKind::Failure,
                    rank: 0,
                    rendezvous,
                    length: msg.len() as u64,
                    payload: msg,
                }
            }
        };
        let bytes = reply.encode();
        for stream in peers.iter_mut() {
            // peers that already left cannot be told
            let _ = stream.write_all(&bytes);
        }
        outcome?;
        buf.copy_from_slice(&sum);
        Ok(())
    }

    fn leaf_round(stream: &mut TcpStream, rank: usize, rendezvous: u64, buf: &mut [f64]) -> Result<(), CommError> {
        stream
            .write_all(&Frame::values(FrameKind::Contribution, rank, rendezvous, buf).encode())
            .map_err(io_to_comm)?;
        let frame = match Frame::read_from(stream) {
            Err(CommError::Transport(msg)) if msg.starts_with("peer closed") => return Err(CommError::PeerDeparted(0)),
            Err(CommError::Transport(msg)) if msg.starts_with("timeout") => return Err(CommError::Timeout(rendezvous)),
            other => other?,
        };
        if frame.rendezvous != rendezvous {
            return Err(CommError::RendezvousMismatch {
                rank,
                expected: frame.rendezvous,
                got: rendezvous,
            });
        }
        match frame.kind {
            FrameKind::Result if frame.length as usize == buf.len() => {
                buf.copy_from_slice(&frame.decode_values());
                Ok(())
            }
            FrameKind::LengthMismatch => Err(CommError::LengthMismatch {
                rendezvous,
                rank: frame.rank as usize,
                expected: u64::from_le_bytes(frame.payload[..8].try_into().unwrap()) as usize,
                got: frame.length as usize,
            }),
            FrameKind::Failure => Err(CommError::Transport(
                String::from_utf8_lossy(&frame.payload).into_owned(),
            )),
            kind => Err(CommError::Frame(format!("unexpected {kind:?} frame"))),
        }
    }
}

impl Communicator for SocketEndpoint {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.workers
    }

    fn allreduce(&mut self, buf: &mut [f64], op: Reduction) -> Result<(), CommError> {
        if self.workers == 1 {
            return Ok(());
        }
        let rendezvous = self.next_rendezvous;
        self.next_rendezvous += 1;
        match &mut self.link {
            Link::Root(peers) => Self::root_round(peers, rendezvous, buf, op)?,
            Link::Leaf(stream) => Self::leaf_round(stream, self.rank, rendezvous, buf)?,
        }
        self.ledger.record_wire(logical_len(buf.len(), op), buf.len());
        Ok(())
    }

    fn ledger(&self) -> &CostLedger {
        &self.ledger
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = Frame::values(FrameKind::Contribution, 3, 7, &[1.5]);
        let bytes = f.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 8);
        assert_eq!(&bytes[0..4], &MAGIC.to_le_bytes());
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..9], &3u32.to_le_bytes());
        assert_eq!(&bytes[9..17], &7u64.to_le_bytes());
        assert_eq!(&bytes[17..25], &1u64.to_le_bytes());
        assert_eq!(&bytes[25..], &1.5f64.to_le_bytes());
        let back = Frame::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.decode_values(), vec![1.5]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Frame::values(FrameKind::Result, 0, 0, &[]).encode();
        bytes[0] ^= 0xff;
        assert!(matches!(
            Frame::read_from(&mut bytes.as_slice()),
            Err(CommError::Frame(_))
        ));
    }
}
