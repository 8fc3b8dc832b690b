//! Cluster shape: `p` nodes with `c` cores each, block rank layout.
//!
//! Rank `r` lives on node `r / c`, local core `r % c`. Every planner and the
//! simulator agree on this mapping. "Virtual nodes" (several rank groups
//! sharing a physical machine) are simply represented as more nodes.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    num_nodes: usize,
    cores_per_node: usize,
}

/// Builds a topology of `num_nodes` nodes with `cores_per_node` cores each.
pub fn build_topology(num_nodes: usize, cores_per_node: usize) -> Result<Topology> {
    if num_nodes == 0 || cores_per_node == 0 {
        return Err(Error::invalid(format!(
            "topology dimensions must be positive, got {num_nodes} nodes x {cores_per_node} cores"
        )));
    }
    Ok(Topology {
        num_nodes,
        cores_per_node,
    })
}

impl Topology {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn cores_per_node(&self) -> usize {
        self.cores_per_node
    }

    pub fn total_ranks(&self) -> usize {
        self.num_nodes * self.cores_per_node
    }

    /// Node housing `rank`.
    pub fn node_of(&self, rank: usize) -> usize {
        debug_assert!(rank < self.total_ranks());
        rank / self.cores_per_node
    }

    /// Local core index of `rank` within its node.
    pub fn core_of(&self, rank: usize) -> usize {
        debug_assert!(rank < self.total_ranks());
        rank % self.cores_per_node
    }

    /// Global rank of `core` on `node`.
    pub fn rank_of(&self, node: usize, core: usize) -> usize {
        debug_assert!(node < self.num_nodes && core < self.cores_per_node);
        node * self.cores_per_node + core
    }

    /// Ranks of one node, in core order.
    pub fn node_ranks(&self, node: usize) -> std::ops::Range<usize> {
        let base = node * self.cores_per_node;
        base..base + self.cores_per_node
    }
}
