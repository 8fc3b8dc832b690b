//! Trivially-correct reference implementations of the collectives, used as
//! ground truth by every execution test.
//!
//! The oracles share only `CollectiveSpec` with the engine: reductions are
//! written out longhand here, in ascending rank order, independent of the
//! planner and interpreter code paths.

use crate::dtype::{Dtype, ReduceOp};
use crate::error::{Error, Result};
use crate::planner::CollectiveSpec;

fn check_inputs(
    spec: &CollectiveSpec,
    inputs: &[Vec<u8>],
    want_len: impl Fn(usize) -> usize,
) -> Result<()> {
    let ranks = spec.topology().total_ranks();
    if inputs.len() != ranks {
        return Err(Error::invalid(format!(
            "expected {ranks} input buffers, got {}",
            inputs.len()
        )));
    }
    for (r, buf) in inputs.iter().enumerate() {
        if buf.len() != want_len(r) {
            return Err(Error::invalid(format!(
                "rank {r}: input length {} does not match spec ({})",
                buf.len(),
                want_len(r)
            )));
        }
    }
    Ok(())
}

/// Every rank receives the concatenation of all contributions in rank order.
pub fn naive_allgatherv(spec: &CollectiveSpec, inputs: &[Vec<u8>]) -> Result<Vec<Vec<u8>>> {
    check_inputs(spec, inputs, |r| spec.counts()[r])?;
    let mut gathered = Vec::with_capacity(spec.total_bytes());
    for buf in inputs {
        gathered.extend_from_slice(buf);
    }
    Ok(vec![gathered; spec.topology().total_ranks()])
}

fn reduce_vectors(spec: &CollectiveSpec, inputs: &[Vec<u8>]) -> Result<Vec<u8>> {
    let op = spec
        .reduce_op()
        .ok_or_else(|| Error::invalid("reduction oracle requires an operator"))?;
    let len = inputs.first().map(|b| b.len()).unwrap_or(0);
    let mut acc = inputs[0].clone();
    for buf in &inputs[1..] {
        debug_assert_eq!(buf.len(), len);
        fold(op, spec.dtype(), &mut acc, buf);
    }
    Ok(acc)
}

macro_rules! fold_as {
    ($acc:expr, $src:expr, $op:expr, $ty:ty, $w:expr) => {{
        for (a, s) in $acc.chunks_exact_mut($w).zip($src.chunks_exact($w)) {
            let x = <$ty>::from_le_bytes(a.try_into().unwrap());
            let y = <$ty>::from_le_bytes(s.try_into().unwrap());
            let r = match $op {
                ReduceOp::Sum => fold_sum(x, y),
                ReduceOp::Min => {
                    if y < x {
                        y
                    } else {
                        x
                    }
                }
                ReduceOp::Max => {
                    if y > x {
                        y
                    } else {
                        x
                    }
                }
            };
            a.copy_from_slice(&r.to_le_bytes());
        }
    }};
}

trait FoldSum {
    fn fold_add(self, o: Self) -> Self;
}
impl FoldSum for i32 {
    fn fold_add(self, o: Self) -> Self {
        self.wrapping_add(o)
    }
}
impl FoldSum for i64 {
    fn fold_add(self, o: Self) -> Self {
        self.wrapping_add(o)
    }
}
impl FoldSum for f32 {
    fn fold_add(self, o: Self) -> Self {
        self + o
    }
}
impl FoldSum for f64 {
    fn fold_add(self, o: Self) -> Self {
        self + o
    }
}
impl FoldSum for u8 {
    fn fold_add(self, o: Self) -> Self {
        self.wrapping_add(o)
    }
}

fn fold_sum<T: FoldSum>(x: T, y: T) -> T {
    x.fold_add(y)
}

fn fold(op: ReduceOp, dtype: Dtype, acc: &mut [u8], src: &[u8]) {
    match dtype {
        Dtype::Int32 => fold_as!(acc, src, op, i32, 4),
        Dtype::Int64 => fold_as!(acc, src, op, i64, 8),
        Dtype::Float32 => fold_as!(acc, src, op, f32, 4),
        Dtype::Float64 => fold_as!(acc, src, op, f64, 8),
        Dtype::Byte => fold_as!(acc, src, op, u8, 1),
    }
}

/// Elementwise reduction over all ranks, scattered in blocks of
/// `counts[rank]` bytes.
pub fn naive_reduce_scatter(spec: &CollectiveSpec, inputs: &[Vec<u8>]) -> Result<Vec<Vec<u8>>> {
    let total = spec.total_bytes();
    check_inputs(spec, inputs, |_| total)?;
    let reduced = reduce_vectors(spec, inputs)?;
    let mut out = Vec::with_capacity(inputs.len());
    let mut off = 0usize;
    for r in 0..spec.topology().total_ranks() {
        let len = spec.counts()[r];
        out.push(reduced[off..off + len].to_vec());
        off += len;
    }
    Ok(out)
}

/// Elementwise reduction over all ranks, replicated everywhere.
pub fn naive_allreduce(spec: &CollectiveSpec, inputs: &[Vec<u8>]) -> Result<Vec<Vec<u8>>> {
    let count = spec.counts().first().copied().unwrap_or(0);
    if spec.counts().iter().any(|&c| c != count) {
        return Err(Error::invalid("allreduce oracle requires equal counts"));
    }
    check_inputs(spec, inputs, |_| count)?;
    let reduced = reduce_vectors(spec, inputs)?;
    Ok(vec![reduced; spec.topology().total_ranks()])
}
