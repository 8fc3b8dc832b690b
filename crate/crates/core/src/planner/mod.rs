//! Communication plans: a node-level intermediate representation shared by
//! the bytecode compiler and the cost model.
//!
//! A plan describes the three phases of one collective: (I) cores of a node
//! gather their data into the node's shared segment, (II) nodes exchange
//! segment ranges over the network in factor-driven steps, (III) cores copy
//! their results back out. All offsets are resolved at plan time; the
//! compiled program never branches on data.

mod allreduce;
mod gather;
mod layout;
mod reorder;
mod scatter;
mod schedule;

pub use allreduce::{allreduce_blocks, plan_allreduce_large, plan_allreduce_small};
pub use gather::plan_allgatherv;
pub use reorder::reorder_ranks;
pub use scatter::plan_reduce_scatter;

use crate::dtype::{Dtype, ReduceOp};
use crate::error::{Error, Result};
use crate::factorization::FactorPlan;
use crate::topology::Topology;

/// What a collective computes; fixes how counts are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectiveKind {
    /// Every rank contributes `counts[rank]` bytes; every rank receives the
    /// concatenation of all contributions in rank order.
    Allgatherv,
    /// Every rank contributes a full vector; rank `i` receives the reduced
    /// block of `counts[i]` bytes.
    ReduceScatter,
    /// Equal counts; every rank receives the full reduction. Prefix-scan
    /// cyclic shift for short messages.
    AllreduceSmall,
    /// Equal counts; reduce_scatter over near-equal blocks followed by an
    /// allgatherv of the reduced blocks.
    AllreduceLarge,
}

impl CollectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::Allgatherv => "allgatherv",
            CollectiveKind::ReduceScatter => "reduce-scatter",
            CollectiveKind::AllreduceSmall => "allreduce-small",
            CollectiveKind::AllreduceLarge => "allreduce-large",
        }
    }
}

/// Problem statement for one collective call.
#[derive(Debug, Clone)]
pub struct CollectiveSpec {
    topology: Topology,
    counts: Vec<usize>,
    dtype: Dtype,
    reduce_op: Option<ReduceOp>,
}

impl CollectiveSpec {
    /// Spec for allgatherv / bcast: no reduction operator.
    pub fn gathering(topology: Topology, counts: Vec<usize>, dtype: Dtype) -> Result<Self> {
        Self::validate(&topology, &counts, dtype)?;
        Ok(CollectiveSpec {
            topology,
            counts,
            dtype,
            reduce_op: None,
        })
    }

    /// Spec for reduce_scatter / allreduce / reduce.
    pub fn reducing(
        topology: Topology,
        counts: Vec<usize>,
        dtype: Dtype,
        op: ReduceOp,
    ) -> Result<Self> {
        Self::validate(&topology, &counts, dtype)?;
        Ok(CollectiveSpec {
            topology,
            counts,
            dtype,
            reduce_op: Some(op),
        })
    }

    fn validate(topology: &Topology, counts: &[usize], dtype: Dtype) -> Result<()> {
        if counts.len() != topology.total_ranks() {
            return Err(Error::invalid(format!(
                "expected {} per-rank counts, got {}",
                topology.total_ranks(),
                counts.len()
            )));
        }
        let w = dtype.width();
        if let Some(bad) = counts.iter().find(|&&c| c % w != 0) {
            return Err(Error::invalid(format!(
                "count {bad} is not a multiple of the {w}-byte element width"
            )));
        }
        Ok(())
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Per-rank byte counts (send sizes for allgatherv, receive-block sizes
    /// for reduce_scatter).
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn element_width(&self) -> usize {
        self.dtype.width()
    }

    pub fn reduce_op(&self) -> Option<ReduceOp> {
        self.reduce_op
    }

    /// Byte count aggregated per node.
    pub fn node_counts(&self) -> Vec<usize> {
        let t = &self.topology;
        (0..t.num_nodes())
            .map(|n| t.node_ranks(n).map(|r| self.counts[r]).sum())
            .collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Permutation of nodes, as produced by the pairing heuristic.
///
/// `order()[position] = original node id`: the algorithm's node numbering
/// runs over positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankOrder {
    order: Vec<usize>,
}

impl RankOrder {
    pub fn identity(num_nodes: usize) -> Self {
        RankOrder {
            order: (0..num_nodes).collect(),
        }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &n in &order {
            if n >= order.len() || seen[n] {
                return Err(Error::invalid("node order is not a permutation"));
            }
            seen[n] = true;
        }
        Ok(RankOrder { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &n)| i == n)
    }

    pub fn node_at(&self, position: usize) -> usize {
        self.order[position]
    }

    /// Inverse mapping: algorithm position of an original node.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0usize; self.order.len()];
        for (i, &n) in self.order.iter().enumerate() {
            pos[n] = i;
        }
        pos
    }
}

/// Shared-memory region a transfer or local op addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Node data segment.
    Segment,
    /// Per-node staging area for receives that feed reductions.
    Staging,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Segment => "seg",
            Region::Staging => "stage",
        }
    }
}

/// One inter-node message of a phase-II step. Nodes are original ids; ports
/// index the cores that own the transfer endpoints.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub src_node: usize,
    pub dst_node: usize,
    pub src_port: usize,
    pub dst_port: usize,
    pub tag: u64,
    pub src_off: usize,
    pub dst_region: Region,
    pub dst_off: usize,
    pub len: usize,
}

/// Node-local memory operation executed after a step's communication
/// completes. Ops of one node run in list order; the compiler slices each op
/// elementwise across the node's cores.
#[derive(Debug, Clone)]
pub struct LocalOp {
    pub node: usize,
    pub reduce: bool,
    pub src_region: Region,
    pub src_off: usize,
    pub dst_off: usize,
    pub len: usize,
}

/// One phase-II step: messages first, then node-local combine work.
#[derive(Debug, Clone, Default)]
pub struct PlanStep {
    pub transfers: Vec<Transfer>,
    pub local_ops: Vec<LocalOp>,
}

/// A copy between one rank's private buffer and its node's shared memory
/// (phase I inbound, phase III outbound).
#[derive(Debug, Clone)]
pub struct RankCopy {
    pub rank: usize,
    /// Offset in the rank's private buffer (input for phase I, output for
    /// phase III).
    pub private_off: usize,
    pub region: Region,
    pub shared_off: usize,
    pub len: usize,
}

/// Fully resolved plan for one collective.
#[derive(Debug, Clone)]
pub struct Plan {
    pub kind: CollectiveKind,
    pub spec: CollectiveSpec,
    pub factor_plan: FactorPlan,
    /// Factor plan of the trailing allgatherv for the large-message
    /// allreduce; `None` otherwise.
    pub second_factor_plan: Option<FactorPlan>,
    pub rank_order: RankOrder,
    /// Phase I: private input -> shared memory.
    pub phase1: Vec<RankCopy>,
    /// Intra-node pre-reduction after phase I (reducing collectives only).
    pub phase1_reduce: Vec<LocalOp>,
    pub steps: Vec<PlanStep>,
    /// Phase III: shared memory -> private output.
    pub phase3: Vec<RankCopy>,
    /// Per-node shared segment size in bytes (uniform across nodes).
    pub segment_len: usize,
    /// Per-node staging size in bytes (uniform across nodes).
    pub staging_len: usize,
    /// Per-rank output buffer sizes.
    pub output_lens: Vec<usize>,
}

impl Plan {
    /// Bytes each node injects into the network, summed over all steps.
    pub fn network_volume_per_node(&self) -> Vec<u64> {
        let mut v = vec![0u64; self.spec.topology().num_nodes()];
        for step in &self.steps {
            for t in &step.transfers {
                v[t.src_node] += t.len as u64;
            }
        }
        v
    }

    /// Total bytes crossing the network.
    pub fn network_volume(&self) -> u64 {
        self.network_volume_per_node().iter().sum()
    }

    /// Human-readable listing of the plan used by golden tests: per step and
    /// transfer, source node, destination node and byte ranges.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let t = self.spec.topology();
        let _ = writeln!(
            s,
            "plan {} nodes={} cores={} variant={} factors={:?} ports={:?} order={:?}",
            self.kind.name(),
            t.num_nodes(),
            t.cores_per_node(),
            self.factor_plan.variant().name(),
            self.factor_plan.factors(),
            self.factor_plan.ports_per_step(),
            self.rank_order.order(),
        );
        if let Some(second) = &self.second_factor_plan {
            let _ = writeln!(
                s,
                "then variant={} factors={:?} ports={:?}",
                second.variant().name(),
                second.factors(),
                second.ports_per_step(),
            );
        }
        let _ = writeln!(
            s,
            "segment={} staging={} phase1-copies={} phase1-reduces={} phase3-copies={}",
            self.segment_len,
            self.staging_len,
            self.phase1.len(),
            self.phase1_reduce.len(),
            self.phase3.len(),
        );
        for (i, step) in self.steps.iter().enumerate() {
            let _ = writeln!(s, "step {i}:");
            for tr in &step.transfers {
                let _ = writeln!(
                    s,
                    "  p{} n{}->n{} {}[{}..{}) -> {}[{}..{})",
                    tr.src_port,
                    tr.src_node,
                    tr.dst_node,
                    Region::Segment.name(),
                    tr.src_off,
                    tr.src_off + tr.len,
                    tr.dst_region.name(),
                    tr.dst_off,
                    tr.dst_off + tr.len,
                );
            }
            for op in &step.local_ops {
                let _ = writeln!(
                    s,
                    "  n{} {} {}[{}..{}) -> seg[{}..{})",
                    op.node,
                    if op.reduce { "reduce" } else { "copy" },
                    op.src_region.name(),
                    op.src_off,
                    op.src_off + op.len,
                    op.dst_off,
                    op.dst_off + op.len,
                );
            }
        }
        s
    }
}

/// Tag for one node-level message: unique per (source, destination) pair.
pub(crate) fn message_tag(step: usize, substep: usize, piece: usize) -> u64 {
    ((step as u64) << 32) | ((substep as u64) << 16) | piece as u64
}

/// Delegates bcast to allgatherv: all counts zero except the root rank's.
/// Zero-size messages vanish from the plan, leaving a tree.
pub fn plan_bcast(
    spec: &CollectiveSpec,
    factor_plan: &FactorPlan,
    use_reorder: bool,
) -> Result<Plan> {
    ensure_single_nonzero(spec)?;
    if spec.reduce_op().is_some() {
        return Err(Error::invalid("bcast does not take a reduction operator"));
    }
    plan_allgatherv(spec, factor_plan, use_reorder)
}

/// Delegates reduce to reduce_scatter: all receive counts zero except the
/// root rank's.
pub fn plan_reduce(
    spec: &CollectiveSpec,
    factor_plan: &FactorPlan,
    use_reorder: bool,
) -> Result<Plan> {
    ensure_single_nonzero(spec)?;
    plan_reduce_scatter(spec, factor_plan, use_reorder)
}

fn ensure_single_nonzero(spec: &CollectiveSpec) -> Result<()> {
    let nonzero = spec.counts().iter().filter(|&&c| c > 0).count();
    if nonzero != 1 {
        return Err(Error::invalid(format!(
            "degenerate pattern requires exactly one nonzero count, got {nonzero}"
        )));
    }
    Ok(())
}
