//! Reduce_scatter planning: the allgatherv schedule executed in reverse.
//! Each node starts with a full partial vector, forwards the ranges it
//! retires, and reduces incoming ranges into the ones it keeps. Receives go
//! to per-port staging buffers first; the reduction happens after the
//! covering waitall, in ascending staging order.

use crate::error::{Error, Result};
use crate::factorization::FactorPlan;

use super::gather::check_factors;
use super::layout::NodeLayout;
use super::reorder::reorder_ranks;
use super::schedule::gather_schedule;
use super::{
    message_tag, CollectiveKind, CollectiveSpec, LocalOp, Plan, PlanStep, RankCopy, RankOrder,
    Region, Transfer,
};

pub(crate) struct MirrorParts {
    pub steps: Vec<PlanStep>,
    pub layout: NodeLayout,
    /// Largest per-node staging use of any step, in bytes.
    pub staging_used: usize,
}

/// Builds the reversed-schedule steps over per-node block sizes. Staging
/// slots start at `staging_base`; segment offsets at `seg_base`; tag step
/// indices at `step_base`.
pub(crate) fn reduce_scatter_steps(
    node_blocks: &[usize],
    fp: &FactorPlan,
    order: &RankOrder,
    seg_base: usize,
    staging_base: usize,
    step_base: usize,
) -> Result<MirrorParts> {
    let p = node_blocks.len();
    check_factors(fp, p)?;
    let sizes_pos: Vec<usize> = order.order().iter().map(|&n| node_blocks[n]).collect();
    let layout = NodeLayout::new(fp.variant(), sizes_pos);
    let schedule = gather_schedule(p, fp)?;

    let mut steps = Vec::with_capacity(schedule.len());
    let mut staging_used = 0usize;
    for (rev_index, (fwd_index, msgs)) in schedule.iter().enumerate().rev().enumerate() {
        let ports = fp.ports_per_step()[fwd_index];
        // per receiving node: staging cursor and staged ranges in substep order
        let mut cursor = vec![0usize; p];
        let mut staged: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); p];
        let mut step = PlanStep::default();
        // mirror: the gather receiver becomes the sender of its partial sums
        let mut mirrored: Vec<_> = msgs.iter().collect();
        // receiver-major, ascending substep: fixes the reduce association
        mirrored.sort_by_key(|m| (m.src_pos, m.substep, m.dst_pos));
        for m in mirrored {
            let len = layout.len_of(m.dst_pos, m.dst_line, m.num_lines);
            if len == 0 {
                continue;
            }
            let receiver_pos = m.src_pos; // gather sender keeps this range
            let sender_pos = m.dst_pos;
            let slot = staging_base + cursor[receiver_pos];
            cursor[receiver_pos] += len;
            step.transfers.push(Transfer {
                src_node: order.node_at(sender_pos),
                dst_node: order.node_at(receiver_pos),
                src_port: (m.dst_substep - 1) % ports,
                dst_port: (m.substep - 1) % ports,
                tag: message_tag(step_base + rev_index, m.substep, 0),
                src_off: seg_base + layout.offset(sender_pos, m.dst_line),
                dst_region: Region::Staging,
                dst_off: slot,
                len,
            });
            let acc = seg_base + layout.offset(receiver_pos, m.src_line);
            staged[receiver_pos].push((slot, acc, len));
        }
        // An incomplete step can stage overlapping accumulator ranges of
        // different lengths on one node. Splitting them at the union of
        // their end boundaries keeps overlapping reduce ops byte-identical
        // in extent, so the per-core element slices line up and every
        // element sees its updates in substep order on a single core.
        for (receiver_pos, ranges) in staged.iter().enumerate() {
            if ranges.is_empty() {
                continue;
            }
            let node = order.node_at(receiver_pos);
            let mut cuts: Vec<usize> = ranges
                .iter()
                .flat_map(|&(_, acc, len)| [acc, acc + len])
                .collect();
            cuts.sort_unstable();
            cuts.dedup();
            for &(slot, acc, len) in ranges {
                let mut prev = acc;
                for &cut in cuts.iter().filter(|&&c| c > acc && c <= acc + len) {
                    step.local_ops.push(LocalOp {
                        node,
                        reduce: true,
                        src_region: Region::Staging,
                        src_off: slot + (prev - acc),
                        dst_off: prev,
                        len: cut - prev,
                    });
                    prev = cut;
                }
                debug_assert_eq!(prev, acc + len);
            }
        }
        staging_used = staging_used.max(cursor.into_iter().max().unwrap_or(0));
        steps.push(step);
    }
    Ok(MirrorParts {
        steps,
        layout,
        staging_used,
    })
}

/// Phase I for reducing collectives: core 0 scatters its full vector into
/// the node's accumulator layout, the other cores park theirs in staging,
/// and the pre-reduction folds the staged vectors in ascending core order.
pub(crate) fn reducing_phase1(
    spec: &CollectiveSpec,
    layout: &NodeLayout,
    order: &RankOrder,
    node_blocks: &[usize],
    seg_base: usize,
) -> (Vec<RankCopy>, Vec<LocalOp>, usize) {
    let t = spec.topology();
    let p = t.num_nodes();
    let c = t.cores_per_node();
    let positions = order.positions();
    let vec_len: usize = node_blocks.iter().sum();
    let mut nat_off = Vec::with_capacity(p + 1);
    nat_off.push(0usize);
    for b in 0..p {
        nat_off.push(nat_off[b] + node_blocks[b]);
    }

    let mut phase1 = Vec::new();
    let mut reduce = Vec::new();
    for node in 0..p {
        let u = positions[node];
        for (core, rank) in t.node_ranks(node).enumerate() {
            if core == 0 {
                for (b, &len) in node_blocks.iter().enumerate() {
                    if len == 0 {
                        continue;
                    }
                    let line = layout.line_of_block(u, positions[b]);
                    phase1.push(RankCopy {
                        rank,
                        private_off: nat_off[b],
                        region: Region::Segment,
                        shared_off: seg_base + layout.offset(u, line),
                        len,
                    });
                }
            } else if vec_len > 0 {
                phase1.push(RankCopy {
                    rank,
                    private_off: 0,
                    region: Region::Staging,
                    shared_off: (core - 1) * vec_len,
                    len: vec_len,
                });
            }
        }
        for core in 1..c {
            for (b, &len) in node_blocks.iter().enumerate() {
                if len == 0 {
                    continue;
                }
                let line = layout.line_of_block(u, positions[b]);
                reduce.push(LocalOp {
                    node,
                    reduce: true,
                    src_region: Region::Staging,
                    src_off: (core - 1) * vec_len + nat_off[b],
                    dst_off: seg_base + layout.offset(u, line),
                    len,
                });
            }
        }
    }
    let staging = vec_len * c.saturating_sub(1);
    (phase1, reduce, staging)
}

/// Plans a reduce_scatter: every rank contributes a full vector; rank `i`
/// receives the reduced block of `counts[i]` bytes.
pub fn plan_reduce_scatter(
    spec: &CollectiveSpec,
    factor_plan: &FactorPlan,
    use_reorder: bool,
) -> Result<Plan> {
    if spec.reduce_op().is_none() {
        return Err(Error::invalid(
            "reduce_scatter requires a reduction operator",
        ));
    }
    let t = *spec.topology();
    let p = t.num_nodes();
    let node_counts = spec.node_counts();
    let rank_order = if use_reorder {
        reorder_ranks(&node_counts)?
    } else {
        RankOrder::identity(p)
    };
    let vec_len: usize = node_counts.iter().sum();
    let phase1_staging = vec_len * t.cores_per_node().saturating_sub(1);
    let parts = reduce_scatter_steps(&node_counts, factor_plan, &rank_order, 0, phase1_staging, 0)?;
    let (phase1, phase1_reduce, _) =
        reducing_phase1(spec, &parts.layout, &rank_order, &node_counts, 0);

    // Phase III: each rank extracts its slice of the node's reduced block.
    let positions = rank_order.positions();
    let mut phase3 = Vec::new();
    for (node, &u) in positions.iter().enumerate() {
        let own = parts.layout.offset(u, parts.layout.own_line(u));
        let mut intra = 0usize;
        for rank in t.node_ranks(node) {
            let len = spec.counts()[rank];
            if len > 0 {
                phase3.push(RankCopy {
                    rank,
                    private_off: 0,
                    region: Region::Segment,
                    shared_off: own + intra,
                    len,
                });
            }
            intra += len;
        }
    }

    Ok(Plan {
        kind: CollectiveKind::ReduceScatter,
        spec: spec.clone(),
        factor_plan: factor_plan.clone(),
        second_factor_plan: None,
        rank_order,
        phase1,
        phase1_reduce,
        steps: parts.steps,
        phase3,
        segment_len: parts.layout.total_bytes(),
        staging_len: phase1_staging + parts.staging_used,
        output_lens: spec.counts().to_vec(),
    })
}
