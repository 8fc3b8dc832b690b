//! Rank reordering heuristic for non-equal message sizes: small messages are
//! paired with large messages in a binary tree built bottom-up, so that the
//! per-step maxima of the recursive multiply/divide algorithm stay balanced.

use crate::error::{Error, Result};

use super::RankOrder;

#[derive(Debug, Clone)]
struct Group {
    size: u64,
    min_node: usize,
    leaves: Vec<usize>,
}

/// Computes the node permutation for the given per-node aggregate sizes.
///
/// At every level an odd group count withdraws the largest group, which is
/// appended after all pairs of the next level. The remaining groups are
/// sorted and the smallest is paired with the largest, the second smallest
/// with the second largest, and so on. Within a pair the smaller group comes
/// first; pairs are ordered by ascending pair sum. All ties break toward the
/// smallest original node index. Equal sizes everywhere keep the identity
/// order.
pub fn reorder_ranks(node_sizes: &[usize]) -> Result<RankOrder> {
    if node_sizes.is_empty() {
        return Err(Error::invalid("reorder_ranks requires at least one node"));
    }
    if node_sizes.iter().all(|&s| s == node_sizes[0]) {
        return Ok(RankOrder::identity(node_sizes.len()));
    }
    let mut groups: Vec<Group> = node_sizes
        .iter()
        .enumerate()
        .map(|(i, &s)| Group {
            size: s as u64,
            min_node: i,
            leaves: vec![i],
        })
        .collect();
    while groups.len() > 1 {
        groups.sort_by_key(|g| (g.size, g.min_node));
        let withdrawn = if groups.len() % 2 == 1 {
            groups.pop()
        } else {
            None
        };
        let mut queue: std::collections::VecDeque<Group> = groups.drain(..).collect();
        let mut pairs: Vec<Group> = Vec::with_capacity(queue.len() / 2);
        while queue.len() >= 2 {
            let lo = queue.pop_front().expect("two groups remain");
            let hi = queue.pop_back().expect("two groups remain");
            let (first, second) = if (lo.size, lo.min_node) <= (hi.size, hi.min_node) {
                (lo, hi)
            } else {
                (hi, lo)
            };
            let mut leaves = first.leaves;
            leaves.extend(second.leaves);
            pairs.push(Group {
                size: first.size + second.size,
                min_node: first.min_node.min(second.min_node),
                leaves,
            });
        }
        pairs.sort_by_key(|g| (g.size, g.min_node));
        if let Some(w) = withdrawn {
            pairs.push(w);
        }
        groups = pairs;
    }
    RankOrder::from_order(groups.pop().expect("one group remains").leaves)
}
