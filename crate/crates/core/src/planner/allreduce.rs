//! Allreduce planning.
//!
//! Short messages run the prefix-scan cyclic shift: nodes store column-wise
//! inclusive scans instead of raw blocks and transmit only the scan lines
//! the final result depends on. Long messages compose reduce_scatter over
//! near-equal blocks with an allgatherv of the reduced blocks.

use crate::error::{Error, Result};
use crate::factorization::{allreduce_pipeline, FactorPlan};

use super::scatter::{reduce_scatter_steps, reducing_phase1};
use super::schedule::scan_schedule;
use super::{
    message_tag, CollectiveKind, CollectiveSpec, LocalOp, Plan, PlanStep, RankCopy, RankOrder,
    Region, Transfer,
};

fn equal_count(spec: &CollectiveSpec) -> Result<usize> {
    let counts = spec.counts();
    let first = counts.first().copied().unwrap_or(0);
    if counts.iter().any(|&c| c != first) {
        return Err(Error::invalid(
            "allreduce requires equal counts on all ranks",
        ));
    }
    Ok(first)
}

/// Plans the short-message allreduce for a factor target; the recommended
/// target is `cores_per_node + 1` so that every substep's receive has its
/// own port core.
pub fn plan_allreduce_small(spec: &CollectiveSpec, target_factor: usize) -> Result<Plan> {
    if spec.reduce_op().is_none() {
        return Err(Error::Unsupported(
            "allreduce requires a commutative reduction operator".into(),
        ));
    }
    let count = equal_count(spec)?;
    let t = *spec.topology();
    let p = t.num_nodes();
    let c = t.cores_per_node();
    let groups = allreduce_pipeline(p, target_factor)?;
    let sched = scan_schedule(p, &groups)?;
    let order = RankOrder::identity(p);

    // slot table for the materialised scan lines
    let mut slot_of = vec![usize::MAX; p];
    for (i, &l) in sched.lines.iter().enumerate() {
        slot_of[l] = i * count;
    }
    let segment_len = sched.lines.len() * count;
    let phase1_staging = count * c.saturating_sub(1);

    let factors: Vec<usize> = groups.iter().flat_map(|g| g.radix_steps.clone()).collect();
    let ports: Vec<usize> = factors.iter().map(|&f| (f - 1).min(c)).collect();
    let factor_plan = if factors.is_empty() {
        FactorPlan::empty(crate::factorization::Variant::CyclicShift)
    } else {
        FactorPlan::pipeline_record(factors, ports.clone())
    };

    let mut steps = Vec::with_capacity(sched.steps.len());
    let mut step_staging_max = 0usize;
    for (si, step) in sched.steps.iter().enumerate() {
        let mut plan_step = PlanStep::default();
        let step_ports = ports[si];
        // staging slots per (substep, line), identical on every node
        let mut stage_cursor = phase1_staging;
        for sub in &step.substeps {
            let base_slot = slot_of[sub.base_line];
            for (k, &l) in sub.recv_lines.iter().enumerate() {
                let slot = stage_cursor;
                stage_cursor += count;
                if count > 0 {
                    for x in 0..p {
                        let peer = (x + sub.distance) % p;
                        plan_step.transfers.push(Transfer {
                            src_node: peer,
                            dst_node: x,
                            src_port: (sub.substep - 1) % step_ports,
                            dst_port: (sub.substep - 1) % step_ports,
                            tag: message_tag(si, sub.substep, k),
                            src_off: slot_of[l],
                            dst_region: Region::Staging,
                            dst_off: slot,
                            len: count,
                        });
                    }
                }
                for x in 0..p {
                    let target = sub.base_line + 1 + l;
                    plan_step.local_ops.push(LocalOp {
                        node: x,
                        reduce: false,
                        src_region: Region::Segment,
                        src_off: base_slot,
                        dst_off: slot_of[target],
                        len: count,
                    });
                    plan_step.local_ops.push(LocalOp {
                        node: x,
                        reduce: true,
                        src_region: Region::Staging,
                        src_off: slot,
                        dst_off: slot_of[target],
                        len: count,
                    });
                }
            }
        }
        // keep per-node op order: ascending substep, then line, per node
        plan_step.local_ops.sort_by_key(|op| op.node);
        plan_step.transfers.sort_by_key(|tr| (tr.src_node, tr.tag));
        step_staging_max = step_staging_max.max(stage_cursor - phase1_staging);
        steps.push(plan_step);
    }

    // Phase I: pre-reduce the node contribution into the line-0 slot.
    let mut phase1 = Vec::new();
    let mut phase1_reduce = Vec::new();
    for node in 0..p {
        for (core, rank) in t.node_ranks(node).enumerate() {
            if count == 0 {
                continue;
            }
            if core == 0 {
                phase1.push(RankCopy {
                    rank,
                    private_off: 0,
                    region: Region::Segment,
                    shared_off: slot_of[0],
                    len: count,
                });
            } else {
                phase1.push(RankCopy {
                    rank,
                    private_off: 0,
                    region: Region::Staging,
                    shared_off: (core - 1) * count,
                    len: count,
                });
            }
        }
        for core in 1..c {
            if count == 0 {
                continue;
            }
            phase1_reduce.push(LocalOp {
                node,
                reduce: true,
                src_region: Region::Staging,
                src_off: (core - 1) * count,
                dst_off: slot_of[0],
                len: count,
            });
        }
    }

    // Phase III: the full scan line is the reduction.
    let final_slot = slot_of[p - 1];
    let mut phase3 = Vec::new();
    for rank in 0..t.total_ranks() {
        if count > 0 {
            phase3.push(RankCopy {
                rank,
                private_off: 0,
                region: Region::Segment,
                shared_off: final_slot,
                len: count,
            });
        }
    }

    Ok(Plan {
        kind: CollectiveKind::AllreduceSmall,
        spec: spec.clone(),
        factor_plan,
        second_factor_plan: None,
        rank_order: order,
        phase1,
        phase1_reduce,
        steps,
        phase3,
        segment_len,
        staging_len: phase1_staging + step_staging_max,
        output_lens: vec![count; t.total_ranks()],
    })
}

/// Near-equal block decomposition: `floor(n/p)` elements per node with the
/// remainder spread over the first `n mod p` nodes.
pub fn allreduce_blocks(total_elems: usize, p: usize, width: usize) -> Vec<usize> {
    let base = total_elems / p;
    let rem = total_elems % p;
    (0..p)
        .map(|j| (base + usize::from(j < rem)) * width)
        .collect()
}

/// Plans the long-message allreduce: reduce_scatter over near-equal blocks,
/// then allgatherv of the reduced blocks.
pub fn plan_allreduce_large(
    spec: &CollectiveSpec,
    rs_factors: &FactorPlan,
    ag_factors: &FactorPlan,
) -> Result<Plan> {
    if spec.reduce_op().is_none() {
        return Err(Error::Unsupported(
            "allreduce requires a commutative reduction operator".into(),
        ));
    }
    let count = equal_count(spec)?;
    let t = *spec.topology();
    let p = t.num_nodes();
    let c = t.cores_per_node();
    let order = RankOrder::identity(p);
    let blocks = allreduce_blocks(count / spec.element_width(), p, spec.element_width());

    let phase1_staging = count * c.saturating_sub(1);
    // region A: reduce_scatter accumulator; region B: gathered result
    let rs = reduce_scatter_steps(&blocks, rs_factors, &order, 0, phase1_staging, 0)?;
    let (ag_steps, ag_layout) =
        super::gather::gather_steps(&blocks, ag_factors, &order, count, rs.steps.len() + 1)?;

    let (phase1, phase1_reduce, _) = reducing_phase1(spec, &rs.layout, &order, &blocks, 0);

    // bridge: move the reduced own block from region A to region B
    let mut bridge = PlanStep::default();
    for (x, &len) in blocks.iter().enumerate() {
        if len == 0 {
            continue;
        }
        bridge.local_ops.push(LocalOp {
            node: x,
            reduce: false,
            src_region: Region::Segment,
            src_off: rs.layout.offset(x, rs.layout.own_line(x)),
            dst_off: count + ag_layout.offset(x, ag_layout.own_line(x)),
            len,
        });
    }

    let mut steps = rs.steps;
    steps.push(bridge);
    steps.extend(ag_steps);

    // Phase III: read the gathered vector back out in block order.
    let mut nat_off = Vec::with_capacity(p + 1);
    nat_off.push(0usize);
    for b in 0..p {
        nat_off.push(nat_off[b] + blocks[b]);
    }
    let mut phase3 = Vec::new();
    for node in 0..p {
        for rank in t.node_ranks(node) {
            for (b, &len) in blocks.iter().enumerate() {
                if len == 0 {
                    continue;
                }
                let line = ag_layout.line_of_block(node, b);
                phase3.push(RankCopy {
                    rank,
                    private_off: nat_off[b],
                    region: Region::Segment,
                    shared_off: count + ag_layout.offset(node, line),
                    len,
                });
            }
        }
    }

    Ok(Plan {
        kind: CollectiveKind::AllreduceLarge,
        spec: spec.clone(),
        factor_plan: rs_factors.clone(),
        second_factor_plan: Some(ag_factors.clone()),
        rank_order: order,
        phase1,
        phase1_reduce,
        steps,
        phase3,
        segment_len: 2 * count,
        staging_len: phase1_staging + rs.staging_used,
        output_lens: vec![count; t.total_ranks()],
    })
}
