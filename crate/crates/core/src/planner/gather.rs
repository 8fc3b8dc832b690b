//! Allgatherv planning: recursive multiplying or cyclic shift over node
//! aggregates, with optional rank reordering for non-equal sizes.

use crate::error::{Error, Result};
use crate::factorization::FactorPlan;

use super::layout::NodeLayout;
use super::reorder::reorder_ranks;
use super::schedule::{gather_schedule, NodeMsg};
use super::{
    message_tag, CollectiveKind, CollectiveSpec, Plan, PlanStep, RankCopy, RankOrder, Region,
    Transfer,
};

pub(crate) fn check_factors(fp: &FactorPlan, p: usize) -> Result<()> {
    FactorPlan::new(
        fp.variant(),
        fp.factors().to_vec(),
        fp.ports_per_step().to_vec(),
        p,
    )
    .map(|_| ())
    .map_err(|e| Error::Plan(e.to_string()))
}

/// Converts one schedule step into byte-level transfers in gather direction.
pub(crate) fn gather_transfers(
    msgs: &[NodeMsg],
    layout: &NodeLayout,
    order: &RankOrder,
    ports: usize,
    step_tag: usize,
    seg_base: usize,
) -> Vec<Transfer> {
    let mut out = Vec::new();
    for m in msgs {
        let len = layout.len_of(m.src_pos, m.src_line, m.num_lines);
        debug_assert_eq!(len, layout.len_of(m.dst_pos, m.dst_line, m.num_lines));
        if len == 0 {
            continue;
        }
        out.push(Transfer {
            src_node: order.node_at(m.src_pos),
            dst_node: order.node_at(m.dst_pos),
            src_port: (m.substep - 1) % ports,
            dst_port: (m.dst_substep - 1) % ports,
            tag: message_tag(step_tag, m.substep, 0),
            src_off: seg_base + layout.offset(m.src_pos, m.src_line),
            dst_region: Region::Segment,
            dst_off: seg_base + layout.offset(m.dst_pos, m.dst_line),
            len,
        });
    }
    out
}

/// Node-level gather machinery shared with the large-message allreduce:
/// steps plus the layout they address, with segment offsets shifted by
/// `seg_base` and tag step indices by `step_base`.
pub(crate) fn gather_steps(
    node_blocks: &[usize],
    fp: &FactorPlan,
    order: &RankOrder,
    seg_base: usize,
    step_base: usize,
) -> Result<(Vec<PlanStep>, NodeLayout)> {
    let p = node_blocks.len();
    check_factors(fp, p)?;
    let sizes_pos: Vec<usize> = order.order().iter().map(|&n| node_blocks[n]).collect();
    let layout = NodeLayout::new(fp.variant(), sizes_pos);
    let schedule = gather_schedule(p, fp)?;
    let steps = schedule
        .iter()
        .enumerate()
        .map(|(i, msgs)| PlanStep {
            transfers: gather_transfers(
                msgs,
                &layout,
                order,
                fp.ports_per_step()[i],
                step_base + i,
                seg_base,
            ),
            local_ops: Vec::new(),
        })
        .collect();
    Ok((steps, layout))
}

/// Plans an allgatherv: every rank contributes `counts[rank]` bytes and
/// receives the concatenation of all contributions in rank order.
pub fn plan_allgatherv(
    spec: &CollectiveSpec,
    factor_plan: &FactorPlan,
    use_reorder: bool,
) -> Result<Plan> {
    if spec.reduce_op().is_some() {
        return Err(Error::invalid(
            "allgatherv does not take a reduction operator",
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
    let (steps, layout) = gather_steps(&node_counts, factor_plan, &rank_order, 0, 0)?;
    let positions = rank_order.positions();

    // Phase I: each core writes its block into the node's own slot.
    let mut phase1 = Vec::new();
    for (node, &u) in positions.iter().enumerate() {
        let own = layout.offset(u, layout.own_line(u));
        let mut intra = 0usize;
        for rank in t.node_ranks(node) {
            let len = spec.counts()[rank];
            if len > 0 {
                phase1.push(RankCopy {
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

    // Phase III: every core copies all blocks out in original node order.
    let total: usize = node_counts.iter().sum();
    let mut nat_off = Vec::with_capacity(p + 1);
    nat_off.push(0usize);
    for b in 0..p {
        nat_off.push(nat_off[b] + node_counts[b]);
    }
    let mut phase3 = Vec::new();
    for node in 0..p {
        let u = positions[node];
        for rank in t.node_ranks(node) {
            for (b, &len) in node_counts.iter().enumerate() {
                if len == 0 {
                    continue;
                }
                let line = layout.line_of_block(u, positions[b]);
                phase3.push(RankCopy {
                    rank,
                    private_off: nat_off[b],
                    region: Region::Segment,
                    shared_off: layout.offset(u, line),
                    len,
                });
            }
        }
    }

    Ok(Plan {
        kind: CollectiveKind::Allgatherv,
        spec: spec.clone(),
        factor_plan: factor_plan.clone(),
        second_factor_plan: None,
        rank_order,
        phase1,
        phase1_reduce: Vec::new(),
        steps,
        phase3,
        segment_len: layout.total_bytes(),
        staging_len: 0,
        output_lens: vec![total; t.total_ranks()],
    })
}
