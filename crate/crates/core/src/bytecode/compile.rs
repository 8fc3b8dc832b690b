//! Plan -> Program compilation.
//!
//! Phase I: every core copies its data into the node's shared memory, then a
//! node barrier; reducing collectives fold the staged core vectors into the
//! accumulator. Phase II: the port-owning cores (cores 0..ports-1) post the
//! step's receives and sends and wait for completion; node-local combine
//! work follows behind a barrier, sliced elementwise across all cores so
//! per-element association order is fixed by the op list. Phase III: a
//! barrier, then every core copies its results out.

use crate::error::{Error, Result};
use crate::planner::{CollectiveKind, LocalOp, Plan, Region, Transfer};

use super::{BufferId, Instr, Loc, Op, Phase, Program};

fn region_buf(region: Region) -> BufferId {
    match region {
        Region::Segment => BufferId::Segment,
        Region::Staging => BufferId::Staging,
    }
}

/// Contiguous element slice of `len` bytes assigned to `core` out of
/// `cores`, aligned to `width`-byte elements.
fn slice_bytes(len: usize, width: usize, cores: usize, core: usize) -> (usize, usize) {
    let elems = len / width;
    let q = elems / cores;
    let rem = elems % cores;
    let start = core * q + core.min(rem);
    let n = q + usize::from(core < rem);
    (start * width, n * width)
}

/// Compiles a plan into one branch-free instruction list per rank.
pub fn compile(plan: &Plan) -> Result<Program> {
    let t = *plan.spec.topology();
    let c = t.cores_per_node();
    let width = plan.spec.element_width();
    let dtype = plan.spec.dtype();

    for (si, step) in plan.steps.iter().enumerate() {
        for tr in &step.transfers {
            let ports = tr.src_port.max(tr.dst_port);
            if ports >= c {
                return Err(Error::Compile(format!(
                    "step {si} uses port {ports} but nodes have only {c} core(s)"
                )));
            }
        }
    }

    let total: usize = plan.spec.counts().iter().sum();
    let input_lens: Vec<usize> = (0..t.total_ranks())
        .map(|r| match plan.kind {
            CollectiveKind::Allgatherv => plan.spec.counts()[r],
            CollectiveKind::ReduceScatter => total,
            CollectiveKind::AllreduceSmall | CollectiveKind::AllreduceLarge => {
                plan.spec.counts()[r]
            }
        })
        .collect();

    let mut code: Vec<Vec<Op>> = vec![Vec::new(); t.total_ranks()];
    let push = |code: &mut Vec<Vec<Op>>, rank: usize, phase: Phase, instr: Instr| {
        code[rank].push(Op { phase, instr });
    };

    // phase I: private inputs into shared memory
    for rc in &plan.phase1 {
        push(
            &mut code,
            rc.rank,
            Phase::Gather,
            Instr::Copy {
                src: Loc::new(BufferId::Input, rc.private_off),
                dst: Loc::new(region_buf(rc.region), rc.shared_off),
                len: rc.len,
            },
        );
    }
    for rank in 0..t.total_ranks() {
        push(&mut code, rank, Phase::Gather, Instr::NodeBarrier);
    }
    if !plan.phase1_reduce.is_empty() {
        emit_local_ops(
            &mut code,
            &t,
            &plan.phase1_reduce,
            Phase::Gather,
            width,
            dtype,
            plan,
        );
        for rank in 0..t.total_ranks() {
            push(&mut code, rank, Phase::Gather, Instr::NodeBarrier);
        }
    }

    // phase II
    for (si, step) in plan.steps.iter().enumerate() {
        let phase = Phase::Step(si as u32);
        let mut node_comm = vec![false; t.num_nodes()];
        let mut node_ops = vec![false; t.num_nodes()];
        for tr in &step.transfers {
            node_comm[tr.src_node] = true;
            node_comm[tr.dst_node] = true;
        }
        for lo in &step.local_ops {
            if lo.len > 0 {
                node_ops[lo.node] = true;
            }
        }

        // receives first, then sends, then one waitall per active port core
        let mut by_rank_recv: Vec<Vec<&Transfer>> = vec![Vec::new(); t.total_ranks()];
        let mut by_rank_send: Vec<Vec<&Transfer>> = vec![Vec::new(); t.total_ranks()];
        for tr in &step.transfers {
            by_rank_recv[t.rank_of(tr.dst_node, tr.dst_port)].push(tr);
            by_rank_send[t.rank_of(tr.src_node, tr.src_port)].push(tr);
        }
        for rank in 0..t.total_ranks() {
            by_rank_recv[rank].sort_by_key(|tr| (tr.tag, tr.src_node));
            by_rank_send[rank].sort_by_key(|tr| (tr.tag, tr.dst_node));
            let posted = by_rank_recv[rank].len() + by_rank_send[rank].len();
            for tr in &by_rank_recv[rank] {
                push(
                    &mut code,
                    rank,
                    phase,
                    Instr::Recv {
                        peer: t.rank_of(tr.src_node, tr.src_port),
                        tag: tr.tag,
                        dst: Loc::new(region_buf(tr.dst_region), tr.dst_off),
                        len: tr.len,
                    },
                );
            }
            for tr in &by_rank_send[rank] {
                push(
                    &mut code,
                    rank,
                    phase,
                    Instr::Send {
                        peer: t.rank_of(tr.dst_node, tr.dst_port),
                        tag: tr.tag,
                        src: Loc::new(BufferId::Segment, tr.src_off),
                        len: tr.len,
                    },
                );
            }
            if posted > 0 {
                push(&mut code, rank, phase, Instr::Waitall);
            }
        }
        for (node, &active) in node_comm.iter().enumerate() {
            if active {
                for rank in t.node_ranks(node) {
                    push(&mut code, rank, phase, Instr::NodeBarrier);
                }
            }
        }
        if step.local_ops.iter().any(|lo| lo.len > 0) {
            emit_local_ops(&mut code, &t, &step.local_ops, phase, width, dtype, plan);
            for (node, &active) in node_ops.iter().enumerate() {
                if active {
                    for rank in t.node_ranks(node) {
                        push(&mut code, rank, phase, Instr::NodeBarrier);
                    }
                }
            }
        }
    }

    // phase III
    for rank in 0..t.total_ranks() {
        push(&mut code, rank, Phase::Scatter, Instr::NodeBarrier);
    }
    for rc in &plan.phase3 {
        push(
            &mut code,
            rc.rank,
            Phase::Scatter,
            Instr::Copy {
                src: Loc::new(region_buf(rc.region), rc.shared_off),
                dst: Loc::new(BufferId::Output, rc.private_off),
                len: rc.len,
            },
        );
    }

    Ok(Program {
        topology: t,
        code,
        input_lens,
        output_lens: plan.output_lens.clone(),
        segment_len: plan.segment_len,
        staging_len: plan.staging_len,
    })
}

fn emit_local_ops(
    code: &mut [Vec<Op>],
    t: &crate::topology::Topology,
    ops: &[LocalOp],
    phase: Phase,
    width: usize,
    dtype: crate::dtype::Dtype,
    plan: &Plan,
) {
    let c = t.cores_per_node();
    for lo in ops {
        if lo.len == 0 {
            continue;
        }
        for core in 0..c {
            let (off, len) = slice_bytes(lo.len, width, c, core);
            if len == 0 {
                continue;
            }
            let rank = t.rank_of(lo.node, core);
            let src = Loc::new(region_buf(lo.src_region), lo.src_off + off);
            let dst = Loc::new(BufferId::Segment, lo.dst_off + off);
            let instr = if lo.reduce {
                Instr::Reduce {
                    src,
                    dst,
                    len,
                    op: plan
                        .spec
                        .reduce_op()
                        .expect("reducing plan has an operator"),
                    dtype,
                }
            } else {
                Instr::Copy { src, dst, len }
            };
            code[rank].push(Op { phase, instr });
        }
    }
}
