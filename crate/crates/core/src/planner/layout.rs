//! Byte layout of node segments.
//!
//! Recursive multiply keeps blocks in position order, identical on every
//! node. Cyclic shift keeps them in line order: line `l` of the node at
//! position `u` holds the block of position `(u + l) mod p`, so chunks that
//! travel together are contiguous and the final rotation reduces to
//! plan-time address arithmetic.

use crate::factorization::Variant;

#[derive(Debug, Clone)]
pub(crate) struct NodeLayout {
    p: usize,
    variant: Variant,
    /// Natural prefix sums over positions, len p + 1.
    pos_prefix: Vec<usize>,
    /// Cyclic shift only: per node position, prefix sums over its lines,
    /// each len p + 1.
    line_prefix: Option<Vec<Vec<usize>>>,
}

impl NodeLayout {
    pub fn new(variant: Variant, sizes_pos: Vec<usize>) -> Self {
        let p = sizes_pos.len();
        let mut pos_prefix = Vec::with_capacity(p + 1);
        let mut acc = 0usize;
        pos_prefix.push(0);
        for &s in &sizes_pos {
            acc += s;
            pos_prefix.push(acc);
        }
        let line_prefix = match variant {
            Variant::RecursiveMultiply => None,
            Variant::CyclicShift => {
                let mut all = Vec::with_capacity(p);
                for u in 0..p {
                    let mut prefix = Vec::with_capacity(p + 1);
                    let mut acc = 0usize;
                    prefix.push(0);
                    for l in 0..p {
                        acc += sizes_pos[(u + l) % p];
                        prefix.push(acc);
                    }
                    all.push(prefix);
                }
                Some(all)
            }
        };
        NodeLayout {
            p,
            variant,
            pos_prefix,
            line_prefix,
        }
    }

    pub fn total_bytes(&self) -> usize {
        self.pos_prefix[self.p]
    }

    /// Byte offset of `line` in the segment of the node at `node_pos`.
    pub fn offset(&self, node_pos: usize, line: usize) -> usize {
        match &self.line_prefix {
            None => self.pos_prefix[line],
            Some(lp) => lp[node_pos][line],
        }
    }

    /// Byte length of `num_lines` lines starting at `line` on `node_pos`.
    pub fn len_of(&self, node_pos: usize, line: usize, num_lines: usize) -> usize {
        self.offset(node_pos, line + num_lines) - self.offset(node_pos, line)
    }

    /// Line of `node_pos` that holds the block of `block_pos`.
    pub fn line_of_block(&self, node_pos: usize, block_pos: usize) -> usize {
        match self.variant {
            Variant::RecursiveMultiply => block_pos,
            Variant::CyclicShift => (block_pos + self.p - node_pos) % self.p,
        }
    }

    /// Line that holds a node's own block.
    pub fn own_line(&self, node_pos: usize) -> usize {
        self.line_of_block(node_pos, node_pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recursive_multiply_layout_is_shared() {
        let l = NodeLayout::new(Variant::RecursiveMultiply, vec![4, 0, 8, 2]);
        assert_eq!(l.total_bytes(), 14);
        for u in 0..4 {
            assert_eq!(l.offset(u, 0), 0);
            assert_eq!(l.offset(u, 2), 4);
            assert_eq!(l.own_line(u), u);
        }
        assert_eq!(l.len_of(0, 1, 2), 8);
    }

    #[test]
    fn cyclic_shift_layout_rotates() {
        let l = NodeLayout::new(Variant::CyclicShift, vec![4, 0, 8, 2]);
        // node at position 2: lines hold blocks 2, 3, 0, 1
        assert_eq!(l.offset(2, 0), 0);
        assert_eq!(l.offset(2, 1), 8);
        assert_eq!(l.offset(2, 2), 10);
        assert_eq!(l.offset(2, 3), 14);
        assert_eq!(l.own_line(2), 0);
        assert_eq!(l.line_of_block(2, 0), 2);
        assert_eq!(l.total_bytes(), 14);
    }
}
