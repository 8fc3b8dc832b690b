//! Branch-free schedule bytecode.
//!
//! The initialisation phase compiles a [`Plan`](crate::planner::Plan) into
//! one straight-line instruction list per rank; the execution phase
//! interprets that list. There are no ifs or jumps: every offset, peer and
//! length was resolved at compile time, so repeated executions are cheap and
//! the instruction trace never depends on the data.

mod compile;
mod interp;

pub use compile::compile;
pub use interp::{execute, ExecEnv, RankTransport, SharedBytes, TransportFault};

use std::collections::HashMap;
use std::fmt;

use crate::dtype::{Dtype, ReduceOp};
use crate::topology::Topology;

/// Buffer addressed by an instruction operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferId {
    /// The rank's private input buffer.
    Input,
    /// The rank's private output buffer.
    Output,
    /// The node's shared data segment.
    Segment,
    /// The node's shared staging area for receives that feed reductions.
    Staging,
}

impl BufferId {
    pub fn name(self) -> &'static str {
        match self {
            BufferId::Input => "input",
            BufferId::Output => "output",
            BufferId::Segment => "seg",
            BufferId::Staging => "stage",
        }
    }
}

/// A buffer location: which buffer plus a byte offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Loc {
    pub buf: BufferId,
    pub off: usize,
}

impl Loc {
    pub fn new(buf: BufferId, off: usize) -> Self {
        Loc { buf, off }
    }
}

/// Phase an instruction belongs to; only used for diagnostics and the
/// disassembly listing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Phase I: gather core data into the node segment.
    Gather,
    /// Phase II, step index.
    Step(u32),
    /// Phase III: scatter results back to the cores.
    Scatter,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Gather => write!(f, "I"),
            Phase::Step(i) => write!(f, "II.{i}"),
            Phase::Scatter => write!(f, "III"),
        }
    }
}

/// One bytecode instruction.
#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    /// Post a non-blocking send of `len` bytes to `peer`.
    Send {
        peer: usize,
        tag: u64,
        src: Loc,
        len: usize,
    },
    /// Post a non-blocking receive of `len` bytes from `peer`.
    Recv {
        peer: usize,
        tag: u64,
        dst: Loc,
        len: usize,
    },
    /// Complete all outstanding sends and receives of this rank.
    Waitall,
    /// Byte copy.
    Copy { src: Loc, dst: Loc, len: usize },
    /// Elementwise `dst = dst op src`.
    Reduce {
        src: Loc,
        dst: Loc,
        len: usize,
        op: ReduceOp,
        dtype: Dtype,
    },
    /// Synchronise the cores of this node.
    NodeBarrier,
}

/// An instruction tagged with its phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Op {
    pub phase: Phase,
    pub instr: Instr,
}

/// Compiled schedule: per-rank instruction lists plus buffer declarations.
#[derive(Debug, Clone)]
pub struct Program {
    pub topology: Topology,
    pub code: Vec<Vec<Op>>,
    pub input_lens: Vec<usize>,
    pub output_lens: Vec<usize>,
    /// Per-node shared segment size (uniform).
    pub segment_len: usize,
    /// Per-node shared staging size (uniform).
    pub staging_len: usize,
}

impl Program {
    /// Bytes each node sends over the network, from the SEND instructions.
    pub fn sent_bytes_per_node(&self) -> Vec<u64> {
        let mut v = vec![0u64; self.topology.num_nodes()];
        for (rank, ops) in self.code.iter().enumerate() {
            let node = self.topology.node_of(rank);
            for op in ops {
                if let Instr::Send { len, .. } = op.instr {
                    v[node] += len as u64;
                }
            }
        }
        v
    }

    /// Line-oriented disassembly, one instruction per line, stable for
    /// golden tests.
    pub fn disassemble(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for (rank, ops) in self.code.iter().enumerate() {
            for op in ops {
                let _ = write!(s, "{rank} {} ", op.phase);
                match &op.instr {
                    Instr::Send {
                        peer,
                        tag,
                        src,
                        len,
                    } => {
                        let _ = writeln!(
                            s,
                            "SEND peer={peer} tag={tag} {}[{}..{})",
                            src.buf.name(),
                            src.off,
                            src.off + len
                        );
                    }
                    Instr::Recv {
                        peer,
                        tag,
                        dst,
                        len,
                    } => {
                        let _ = writeln!(
                            s,
                            "RECV peer={peer} tag={tag} {}[{}..{})",
                            dst.buf.name(),
                            dst.off,
                            dst.off + len
                        );
                    }
                    Instr::Waitall => {
                        let _ = writeln!(s, "WAITALL");
                    }
                    Instr::Copy { src, dst, len } => {
                        let _ = writeln!(
                            s,
                            "COPY {}[{}..{}) -> {}[{}..{})",
                            src.buf.name(),
                            src.off,
                            src.off + len,
                            dst.buf.name(),
                            dst.off,
                            dst.off + len
                        );
                    }
                    Instr::Reduce {
                        src,
                        dst,
                        len,
                        op: rop,
                        dtype,
                    } => {
                        let _ = writeln!(
                            s,
                            "REDUCE {}[{}..{}) -> {}[{}..{}) {} {}",
                            src.buf.name(),
                            src.off,
                            src.off + len,
                            dst.buf.name(),
                            dst.off,
                            dst.off + len,
                            rop.name(),
                            dtype.name()
                        );
                    }
                    Instr::NodeBarrier => {
                        let _ = writeln!(s, "BARRIER");
                    }
                }
            }
        }
        s
    }
}

/// One validation finding; an empty list means the program invariants hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub rank: Option<usize>,
    pub index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.rank, self.index) {
            (Some(r), Some(i)) => write!(f, "rank {r} instr {i}: {}", self.message),
            (Some(r), None) => write!(f, "rank {r}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

fn diag(rank: Option<usize>, index: Option<usize>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        rank,
        index,
        message: message.into(),
    }
}

/// Checks the program invariants: in-bounds operands, matched send/receive
/// pairs, receives covered by a waitall before their buffers are read, and
/// consistent barrier counts per node.
pub fn validate(program: &Program) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let t = &program.topology;

    let buf_len = |rank: usize, buf: BufferId| -> usize {
        match buf {
            BufferId::Input => program.input_lens[rank],
            BufferId::Output => program.output_lens[rank],
            BufferId::Segment => program.segment_len,
            BufferId::Staging => program.staging_len,
        }
    };

    if program.code.len() != t.total_ranks() {
        out.push(diag(
            None,
            None,
            format!(
                "program has {} rank lists for {} ranks",
                program.code.len(),
                t.total_ranks()
            ),
        ));
        return out;
    }

    // send/recv matching across ranks
    let mut sends: HashMap<(usize, usize, u64), Vec<usize>> = HashMap::new();
    let mut recvs: HashMap<(usize, usize, u64), Vec<usize>> = HashMap::new();

    for (rank, ops) in program.code.iter().enumerate() {
        let mut pending: Vec<(BufferId, usize, usize)> = Vec::new();
        let mut barriers = 0usize;
        for (index, op) in ops.iter().enumerate() {
            let mut check_bounds = |loc: &Loc, len: usize, what: &str| {
                let cap = buf_len(rank, loc.buf);
                if loc.off + len > cap {
                    out.push(diag(
                        Some(rank),
                        Some(index),
                        format!(
                            "{what} {}[{}..{}) exceeds extent {cap}",
                            loc.buf.name(),
                            loc.off,
                            loc.off + len
                        ),
                    ));
                }
            };
            let reads_pending = |pending: &[(BufferId, usize, usize)], loc: &Loc, len: usize| {
                pending
                    .iter()
                    .any(|&(b, o, l)| b == loc.buf && loc.off < o + l && o < loc.off + len)
            };
            match &op.instr {
                Instr::Send {
                    peer,
                    tag,
                    src,
                    len,
                } => {
                    check_bounds(src, *len, "send source");
                    if *peer >= t.total_ranks() {
                        out.push(diag(
                            Some(rank),
                            Some(index),
                            format!("peer {peer} out of range"),
                        ));
                    }
                    if reads_pending(&pending, src, *len) {
                        out.push(diag(
                            Some(rank),
                            Some(index),
                            "send reads a receive buffer before its waitall",
                        ));
                    }
                    sends.entry((rank, *peer, *tag)).or_default().push(*len);
                }
                Instr::Recv {
                    peer,
                    tag,
                    dst,
                    len,
                } => {
                    check_bounds(dst, *len, "receive target");
                    if *peer >= t.total_ranks() {
                        out.push(diag(
                            Some(rank),
                            Some(index),
                            format!("peer {peer} out of range"),
                        ));
                    }
                    pending.push((dst.buf, dst.off, *len));
                    recvs.entry((*peer, rank, *tag)).or_default().push(*len);
                }
                Instr::Waitall => pending.clear(),
                Instr::Copy { src, dst, len } => {
                    check_bounds(src, *len, "copy source");
                    check_bounds(dst, *len, "copy target");
                    if reads_pending(&pending, src, *len) {
                        out.push(diag(
                            Some(rank),
                            Some(index),
                            "copy reads a receive buffer before its waitall",
                        ));
                    }
                }
                Instr::Reduce {
                    src,
                    dst,
                    len,
                    dtype,
                    ..
                } => {
                    check_bounds(src, *len, "reduce source");
                    check_bounds(dst, *len, "reduce target");
                    if len % dtype.width() != 0 {
                        out.push(diag(
                            Some(rank),
                            Some(index),
                            format!("reduce length {len} not a multiple of element width"),
                        ));
                    }
                    if reads_pending(&pending, src, *len) {
                        out.push(diag(
                            Some(rank),
                            Some(index),
                            "reduce reads a receive buffer before its waitall",
                        ));
                    }
                }
                Instr::NodeBarrier => barriers += 1,
            }
        }
        if !pending.is_empty() {
            out.push(diag(
                Some(rank),
                None,
                format!("{} receive(s) not covered by a waitall", pending.len()),
            ));
        }
        let _ = barriers;
    }

    // barrier counts must agree within each node
    for node in 0..t.num_nodes() {
        let counts: Vec<usize> = t
            .node_ranks(node)
            .map(|r| {
                program.code[r]
                    .iter()
                    .filter(|op| matches!(op.instr, Instr::NodeBarrier))
                    .count()
            })
            .collect();
        if counts.windows(2).any(|w| w[0] != w[1]) {
            out.push(diag(
                None,
                None,
                format!("node {node} cores disagree on barrier count {counts:?}"),
            ));
        }
    }

    for (key, send_lens) in &sends {
        match recvs.get(key) {
            None => out.push(diag(
                Some(key.0),
                None,
                format!("unmatched send to rank {} tag {}", key.1, key.2),
            )),
            Some(recv_lens) => {
                if send_lens.len() != recv_lens.len() {
                    out.push(diag(
                        Some(key.0),
                        None,
                        format!(
                            "send/recv multiplicity mismatch to rank {} tag {}",
                            key.1, key.2
                        ),
                    ));
                } else if send_lens != recv_lens {
                    out.push(diag(
                        Some(key.0),
                        None,
                        format!("send/recv length mismatch to rank {} tag {}", key.1, key.2),
                    ));
                }
            }
        }
    }
    for key in recvs.keys() {
        if !sends.contains_key(key) {
            out.push(diag(
                Some(key.1),
                None,
                format!("unmatched receive from rank {} tag {}", key.0, key.2),
            ));
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::{Dtype, ReduceOp};
    use crate::factorization::{FactorPlan, Variant};
    use crate::planner::{plan_allgatherv, plan_reduce_scatter, CollectiveSpec};
    use crate::topology::build_topology;

    fn count(ops: &[Op], pred: impl Fn(&Instr) -> bool) -> usize {
        ops.iter().filter(|op| pred(&op.instr)).count()
    }

    #[test]
    fn single_rank_program_is_two_copies_two_barriers() {
        let t = build_topology(1, 1).unwrap();
        let spec = CollectiveSpec::gathering(t, vec![16], Dtype::Byte).unwrap();
        let fp = FactorPlan::empty(Variant::RecursiveMultiply);
        let plan = plan_allgatherv(&spec, &fp, false).unwrap();
        let program = compile(&plan).unwrap();
        let ops = &program.code[0];
        assert_eq!(ops.len(), 4);
        assert_eq!(count(ops, |i| matches!(i, Instr::Copy { .. })), 2);
        assert_eq!(count(ops, |i| matches!(i, Instr::NodeBarrier)), 2);
    }

    #[test]
    fn pair_exchange_has_one_recv_send_waitall() {
        let t = build_topology(2, 1).unwrap();
        let spec = CollectiveSpec::gathering(t, vec![8, 8], Dtype::Byte).unwrap();
        let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2], 2).unwrap();
        let plan = plan_allgatherv(&spec, &fp, false).unwrap();
        let program = compile(&plan).unwrap();
        for ops in &program.code {
            assert_eq!(count(ops, |i| matches!(i, Instr::Recv { .. })), 1);
            assert_eq!(count(ops, |i| matches!(i, Instr::Send { .. })), 1);
            assert_eq!(count(ops, |i| matches!(i, Instr::Waitall)), 1);
        }
        assert!(validate(&program).is_empty());
    }

    #[test]
    fn reduces_follow_the_covering_waitall() {
        let t = build_topology(4, 1).unwrap();
        let spec = CollectiveSpec::reducing(t, vec![8; 4], Dtype::Int64, ReduceOp::Sum).unwrap();
        let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2], 4).unwrap();
        let plan = plan_reduce_scatter(&spec, &fp, false).unwrap();
        let program = compile(&plan).unwrap();
        assert!(validate(&program).is_empty());
        for ops in &program.code {
            let mut waited = true;
            for op in ops {
                match &op.instr {
                    Instr::Recv { .. } => waited = false,
                    Instr::Waitall => waited = true,
                    Instr::Reduce { src, .. } if src.buf == BufferId::Staging => {
                        assert!(waited, "staged reduce before its waitall");
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn ports_beyond_core_count_fail_to_compile() {
        let t = build_topology(4, 1).unwrap();
        let spec = CollectiveSpec::gathering(t, vec![8; 4], Dtype::Byte).unwrap();
        let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![4], 4).unwrap();
        let plan = plan_allgatherv(&spec, &fp, false).unwrap();
        assert!(matches!(
            compile(&plan),
            Err(crate::error::Error::Compile(_))
        ));
    }

    fn empty_program(ranks: usize) -> Program {
        Program {
            topology: build_topology(ranks, 1).unwrap(),
            code: vec![Vec::new(); ranks],
            input_lens: vec![64; ranks],
            output_lens: vec![64; ranks],
            segment_len: 64,
            staging_len: 64,
        }
    }

    #[test]
    fn validate_flags_unmatched_send() {
        let mut program = empty_program(2);
        program.code[0].push(Op {
            phase: Phase::Step(0),
            instr: Instr::Send {
                peer: 1,
                tag: 7,
                src: Loc::new(BufferId::Segment, 0),
                len: 8,
            },
        });
        let diags = validate(&program);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("unmatched send"));
    }

    #[test]
    fn validate_flags_read_before_wait() {
        let mut program = empty_program(2);
        program.code[0].push(Op {
            phase: Phase::Step(0),
            instr: Instr::Recv {
                peer: 1,
                tag: 1,
                dst: Loc::new(BufferId::Staging, 0),
                len: 8,
            },
        });
        program.code[0].push(Op {
            phase: Phase::Step(0),
            instr: Instr::Copy {
                src: Loc::new(BufferId::Staging, 0),
                dst: Loc::new(BufferId::Segment, 0),
                len: 8,
            },
        });
        program.code[0].push(Op {
            phase: Phase::Step(0),
            instr: Instr::Waitall,
        });
        program.code[1].push(Op {
            phase: Phase::Step(0),
            instr: Instr::Send {
                peer: 0,
                tag: 1,
                src: Loc::new(BufferId::Segment, 0),
                len: 8,
            },
        });
        let diags = validate(&program);
        assert!(diags
            .iter()
            .any(|d| d.message.contains("before its waitall")));
    }

    #[test]
    fn validate_flags_out_of_bounds() {
        let mut program = empty_program(1);
        program.code[0].push(Op {
            phase: Phase::Gather,
            instr: Instr::Copy {
                src: Loc::new(BufferId::Input, 60),
                dst: Loc::new(BufferId::Segment, 0),
                len: 8,
            },
        });
        let diags = validate(&program);
        assert!(diags.iter().any(|d| d.message.contains("exceeds extent")));
    }

    #[test]
    fn disassembly_is_stable() {
        let t = build_topology(2, 1).unwrap();
        let spec = CollectiveSpec::gathering(t, vec![8, 8], Dtype::Byte).unwrap();
        let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2], 2).unwrap();
        let plan = plan_allgatherv(&spec, &fp, false).unwrap();
        let program = compile(&plan).unwrap();
        let listing = program.disassemble();
        let want = "\
0 I COPY input[0..8) -> seg[0..8)
0 I BARRIER
0 II.0 RECV peer=1 tag=65536 seg[8..16)
0 II.0 SEND peer=1 tag=65536 seg[0..8)
0 II.0 WAITALL
0 II.0 BARRIER
0 III BARRIER
0 III COPY seg[0..8) -> output[0..8)
0 III COPY seg[8..16) -> output[8..16)
1 I COPY input[0..8) -> seg[8..16)
1 I BARRIER
1 II.0 RECV peer=0 tag=65536 seg[0..8)
1 II.0 SEND peer=0 tag=65536 seg[8..16)
1 II.0 WAITALL
1 II.0 BARRIER
1 III BARRIER
1 III COPY seg[0..8) -> output[0..8)
1 III COPY seg[8..16) -> output[8..16)
";
        assert_eq!(listing, want);
    }
}
