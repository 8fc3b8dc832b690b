//! Node-level communication schedules in position space.
//!
//! Positions are the algorithm's node numbering (after rank reordering).
//! Schedules speak about *lines*: for recursive multiplying a line is simply
//! the position-indexed block, for cyclic shift line `l` of the node at
//! position `u` is the block of position `(u + l) mod p`, so every message
//! stays contiguous in each node's own line layout.

use crate::error::{Error, Result};
use crate::factorization::{FactorPlan, PipelineGroup, Variant};

/// One directed node-level message, in position/line coordinates.
#[derive(Debug, Clone)]
pub(crate) struct NodeMsg {
    /// Partner index at the sender, starting at 1; determines the send port.
    pub substep: usize,
    /// Partner index at the receiver; determines the receive port. Equal to
    /// `substep` for cyclic shift, `f - substep` for recursive multiply.
    pub dst_substep: usize,
    pub src_pos: usize,
    pub dst_pos: usize,
    /// First line in the sender's layout.
    pub src_line: usize,
    /// First line in the receiver's layout.
    pub dst_line: usize,
    pub num_lines: usize,
}

/// Gather-direction schedule (allgatherv): one message list per step.
/// Reversing it yields the reduce_scatter schedule.
pub(crate) fn gather_schedule(p: usize, fp: &FactorPlan) -> Result<Vec<Vec<NodeMsg>>> {
    match fp.variant() {
        Variant::RecursiveMultiply => recursive_multiply_schedule(p, fp.factors()),
        Variant::CyclicShift => cyclic_shift_schedule(p, fp.factors()),
    }
}

fn recursive_multiply_schedule(p: usize, factors: &[usize]) -> Result<Vec<Vec<NodeMsg>>> {
    let product: usize = factors.iter().product();
    if product != p {
        return Err(Error::Plan(format!(
            "recursive multiply factors {factors:?} do not multiply to {p}"
        )));
    }
    let mut steps = Vec::with_capacity(factors.len());
    let mut held = 1usize; // lines held per node entering the step
    for &f in factors {
        let span = held * f;
        let mut msgs = Vec::new();
        for x in 0..p {
            let group_base = x / span * span;
            let member = (x - group_base) / held;
            let chunk_base = x / held * held;
            for j in 1..f {
                let partner_member = (member + j) % f;
                let y = group_base + partner_member * held + (x - chunk_base);
                msgs.push(NodeMsg {
                    substep: j,
                    dst_substep: f - j,
                    src_pos: x,
                    dst_pos: y,
                    src_line: chunk_base,
                    dst_line: chunk_base,
                    num_lines: held,
                });
            }
        }
        steps.push(msgs);
        held = span;
    }
    Ok(steps)
}

fn cyclic_shift_schedule(p: usize, factors: &[usize]) -> Result<Vec<Vec<NodeMsg>>> {
    let mut steps = Vec::with_capacity(factors.len());
    let mut held = 1usize;
    for &f in factors {
        let target = (held * f).min(p);
        let mut msgs = Vec::new();
        for x in 0..p {
            for j in 1..f {
                let start = j * held;
                if start >= target {
                    break;
                }
                let chunk = held.min(target - start);
                // x forwards its head chunk to the node `start` positions back
                let dst = (x + p - start) % p;
                msgs.push(NodeMsg {
                    substep: j,
                    dst_substep: j,
                    src_pos: x,
                    dst_pos: dst,
                    src_line: 0,
                    dst_line: start,
                    num_lines: chunk,
                });
            }
        }
        steps.push(msgs);
        held = target;
    }
    if held < p {
        return Err(Error::Plan(format!(
            "cyclic shift factors {factors:?} cover only {held} of {p} nodes"
        )));
    }
    Ok(steps)
}

/// One substep of the prefix-scan allreduce. Uniform across nodes: the node
/// at position `x` receives the listed scan lines from `(x + distance) % p`
/// and extends its own scan by adding them onto `base_line`.
#[derive(Debug, Clone)]
pub(crate) struct ScanSubstep {
    pub substep: usize,
    pub distance: usize,
    pub base_line: usize,
    /// Peer line indices received, ascending. Target line for peer line `l`
    /// is `base_line + 1 + l`.
    pub recv_lines: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct ScanStep {
    pub substeps: Vec<ScanSubstep>,
}

#[derive(Debug, Clone)]
pub(crate) struct ScanSchedule {
    pub steps: Vec<ScanStep>,
    /// Scan lines any node materialises, ascending; always contains 0 and
    /// `p - 1`.
    pub lines: Vec<usize>,
}

/// Builds the prefix-scan cyclic shift schedule for the grouped factor
/// pipeline, keeping only the lines needed to reach the full reduction on
/// line `p - 1`.
pub(crate) fn scan_schedule(p: usize, groups: &[PipelineGroup]) -> Result<ScanSchedule> {
    let product: usize = groups.iter().map(|g| g.modulus).product();
    if product != p {
        return Err(Error::Plan(format!(
            "pipeline moduli multiply to {product}, expected {p}"
        )));
    }
    if p == 1 {
        return Ok(ScanSchedule {
            steps: Vec::new(),
            lines: vec![0],
        });
    }

    // Forward pass: substep geometry. Spans cap at each group's boundary.
    struct Raw {
        substep: usize,
        distance: usize,
        base_line: usize,
        first_target: usize,
        last_target: usize, // inclusive
    }
    let mut raw_steps: Vec<Vec<Raw>> = Vec::new();
    let mut span = 1usize;
    for group in groups {
        let group_target = span * group.modulus;
        for &f in &group.radix_steps {
            let target = (span * f).min(group_target);
            let mut subs = Vec::new();
            for j in 1..f {
                let start = j * span;
                if start >= target {
                    break;
                }
                subs.push(Raw {
                    substep: j,
                    distance: start,
                    base_line: start - 1,
                    first_target: start,
                    last_target: (start + span - 1).min(target - 1),
                });
            }
            raw_steps.push(subs);
            span = target;
        }
        if span != group_target {
            return Err(Error::Plan(format!(
                "group of modulus {} does not reach its span",
                group.modulus
            )));
        }
    }
    debug_assert_eq!(span, p);

    // Backward pass: propagate the needed-line set from the final line.
    let mut needed = vec![false; p];
    needed[p - 1] = true;
    needed[0] = true;
    let mut steps: Vec<ScanStep> = Vec::with_capacity(raw_steps.len());
    for subs in raw_steps.iter().rev() {
        let mut step = ScanStep {
            substeps: Vec::new(),
        };
        for raw in subs.iter().rev() {
            let recv_lines: Vec<usize> = (raw.first_target..=raw.last_target)
                .filter(|&m| needed[m])
                .map(|m| m - raw.distance)
                .collect();
            if recv_lines.is_empty() {
                continue;
            }
            needed[raw.base_line] = true;
            for &l in &recv_lines {
                needed[l] = true;
            }
            step.substeps.push(ScanSubstep {
                substep: raw.substep,
                distance: raw.distance,
                base_line: raw.base_line,
                recv_lines,
            });
        }
        step.substeps.reverse();
        steps.push(step);
    }
    steps.reverse();

    let lines: Vec<usize> = (0..p).filter(|&l| needed[l]).collect();
    Ok(ScanSchedule { steps, lines })
}
