//! Straight-line interpreter for compiled programs.
//!
//! One interpreter runs per rank. Sends and receives are posted
//! non-blockingly and completed at WAITALL; the transport matches messages
//! by (peer, tag), which the compiler keeps unique per step and direction.
//! The instruction trace never depends on buffer contents.

use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;

use crate::dtype::apply_reduce;
use crate::error::{Error, Result};

use super::{BufferId, Instr, Loc, Program};

/// Byte array shared between the cores of one node. Writers hold disjoint
/// ranges between barriers, so relaxed per-byte atomics suffice; the barrier
/// provides the ordering.
#[derive(Debug, Clone)]
pub struct SharedBytes {
    data: Arc<Vec<AtomicU8>>,
}

impl SharedBytes {
    pub fn new(len: usize) -> Self {
        let mut v = Vec::with_capacity(len);
        v.resize_with(len, || AtomicU8::new(0));
        SharedBytes { data: Arc::new(v) }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn read(&self, off: usize, len: usize) -> Vec<u8> {
        self.data[off..off + len]
            .iter()
            .map(|b| b.load(Ordering::Relaxed))
            .collect()
    }

    pub fn write(&self, off: usize, bytes: &[u8]) {
        for (slot, &b) in self.data[off..off + bytes.len()].iter().zip(bytes) {
            slot.store(b, Ordering::Relaxed);
        }
    }
}

/// Failure reported by the transport layer.
#[derive(Debug, Clone)]
pub enum TransportFault {
    Timeout(String),
    Disconnected(String),
}

impl std::fmt::Display for TransportFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportFault::Timeout(m) => write!(f, "timeout: {m}"),
            TransportFault::Disconnected(m) => write!(f, "disconnected: {m}"),
        }
    }
}

/// Point-to-point and barrier services one rank context needs.
pub trait RankTransport {
    /// Posts `payload` to `to`; must not block on the receiver.
    fn send(
        &mut self,
        to: usize,
        tag: u64,
        payload: Vec<u8>,
    ) -> std::result::Result<(), TransportFault>;
    /// Blocks until the message from `from` with `tag` arrives.
    fn recv(&mut self, from: usize, tag: u64) -> std::result::Result<Vec<u8>, TransportFault>;
    /// Synchronises the cores of this rank's node.
    fn barrier(&mut self) -> std::result::Result<(), TransportFault>;
    /// Optional scheduling perturbation hook, called between instructions.
    fn pause(&mut self) {}
}

/// Buffers one rank context operates on.
pub struct ExecEnv<'a> {
    pub input: &'a [u8],
    pub output: &'a mut [u8],
    pub segment: &'a SharedBytes,
    pub staging: &'a SharedBytes,
}

impl ExecEnv<'_> {
    fn read(&self, loc: Loc, len: usize) -> Vec<u8> {
        match loc.buf {
            BufferId::Input => self.input[loc.off..loc.off + len].to_vec(),
            BufferId::Output => self.output[loc.off..loc.off + len].to_vec(),
            BufferId::Segment => self.segment.read(loc.off, len),
            BufferId::Staging => self.staging.read(loc.off, len),
        }
    }

    fn write(&mut self, loc: Loc, bytes: &[u8]) {
        match loc.buf {
            BufferId::Input => unreachable!("input buffers are read-only"),
            BufferId::Output => self.output[loc.off..loc.off + bytes.len()].copy_from_slice(bytes),
            BufferId::Segment => self.segment.write(loc.off, bytes),
            BufferId::Staging => self.staging.write(loc.off, bytes),
        }
    }
}

struct PendingRecv {
    peer: usize,
    tag: u64,
    dst: Loc,
    len: usize,
}

/// Runs the instruction list of `rank` to completion.
pub fn execute<T: RankTransport>(
    program: &Program,
    rank: usize,
    env: &mut ExecEnv<'_>,
    transport: &mut T,
) -> Result<()> {
    let fail = |index: usize, message: String| Error::Execution {
        rank,
        index,
        message,
    };
    let mut pending: Vec<PendingRecv> = Vec::new();
    for (index, op) in program.code[rank].iter().enumerate() {
        transport.pause();
        match &op.instr {
            Instr::Send {
                peer,
                tag,
                src,
                len,
            } => {
                let payload = env.read(*src, *len);
                transport
                    .send(*peer, *tag, payload)
                    .map_err(|e| fail(index, e.to_string()))?;
            }
            Instr::Recv {
                peer,
                tag,
                dst,
                len,
            } => {
                pending.push(PendingRecv {
                    peer: *peer,
                    tag: *tag,
                    dst: *dst,
                    len: *len,
                });
            }
            Instr::Waitall => {
                for p in pending.drain(..) {
                    let payload = transport
                        .recv(p.peer, p.tag)
                        .map_err(|e| fail(index, e.to_string()))?;
                    if payload.len() != p.len {
                        return Err(fail(
                            index,
                            format!(
                                "length mismatch from rank {}: got {}, posted {}",
                                p.peer,
                                payload.len(),
                                p.len
                            ),
                        ));
                    }
                    env.write(p.dst, &payload);
                }
            }
            Instr::Copy { src, dst, len } => {
                let bytes = env.read(*src, *len);
                env.write(*dst, &bytes);
            }
            Instr::Reduce {
                src,
                dst,
                len,
                op: rop,
                dtype,
            } => {
                let incoming = env.read(*src, *len);
                let mut acc = env.read(*dst, *len);
                apply_reduce(*rop, *dtype, &mut acc, &incoming);
                env.write(*dst, &acc);
            }
            Instr::NodeBarrier => {
                transport
                    .barrier()
                    .map_err(|e| fail(index, e.to_string()))?;
            }
        }
    }
    Ok(())
}
