//! Element types and reduction kernels shared by the planner, the bytecode
//! interpreter and the cost model.
//!
//! Integer sums use wrapping arithmetic so that reductions are total
//! functions; the reference oracles use the same convention, which keeps
//! integer results bitwise comparable.

/// Element type of a collective's payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    Int32,
    Int64,
    Float32,
    Float64,
    Byte,
}

impl Dtype {
    /// Width of one element in bytes.
    pub fn width(self) -> usize {
        match self {
            Dtype::Int32 | Dtype::Float32 => 4,
            Dtype::Int64 | Dtype::Float64 => 8,
            Dtype::Byte => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::Int32 => "i32",
            Dtype::Int64 => "i64",
            Dtype::Float32 => "f32",
            Dtype::Float64 => "f64",
            Dtype::Byte => "u8",
        }
    }
}

/// Commutative reduction operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Min => "min",
            ReduceOp::Max => "max",
        }
    }
}

macro_rules! reduce_typed {
    ($acc:expr, $src:expr, $op:expr, $ty:ty, $w:expr, $from:path, $to:path) => {{
        for (a, s) in $acc.chunks_exact_mut($w).zip($src.chunks_exact($w)) {
            let x = $from(a.try_into().unwrap());
            let y = $from(s.try_into().unwrap());
            let r: $ty = match $op {
                ReduceOp::Sum => combine_sum(x, y),
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
            a.copy_from_slice(&$to(r));
        }
    }};
}

trait Summable: Copy + PartialOrd {
    fn add(self, other: Self) -> Self;
}
impl Summable for i32 {
    fn add(self, o: Self) -> Self {
        self.wrapping_add(o)
    }
}
impl Summable for i64 {
    fn add(self, o: Self) -> Self {
        self.wrapping_add(o)
    }
}
impl Summable for f32 {
    fn add(self, o: Self) -> Self {
        self + o
    }
}
impl Summable for f64 {
    fn add(self, o: Self) -> Self {
        self + o
    }
}
impl Summable for u8 {
    fn add(self, o: Self) -> Self {
        self.wrapping_add(o)
    }
}

fn combine_sum<T: Summable>(x: T, y: T) -> T {
    x.add(y)
}

/// Elementwise `acc[i] = acc[i] op src[i]`.
///
/// Both slices must have the same length, a multiple of the element width.
pub fn apply_reduce(op: ReduceOp, dtype: Dtype, acc: &mut [u8], src: &[u8]) {
    debug_assert_eq!(acc.len(), src.len());
    debug_assert_eq!(acc.len() % dtype.width(), 0);
    match dtype {
        Dtype::Int32 => reduce_typed!(acc, src, op, i32, 4, i32::from_le_bytes, i32::to_le_bytes),
        Dtype::Int64 => reduce_typed!(acc, src, op, i64, 8, i64::from_le_bytes, i64::to_le_bytes),
        Dtype::Float32 => reduce_typed!(acc, src, op, f32, 4, f32::from_le_bytes, f32::to_le_bytes),
        Dtype::Float64 => reduce_typed!(acc, src, op, f64, 8, f64::from_le_bytes, f64::to_le_bytes),
        Dtype::Byte => reduce_typed!(acc, src, op, u8, 1, u8_from_le, u8_to_le),
    }
}

fn u8_from_le(b: [u8; 1]) -> u8 {
    b[0]
}

fn u8_to_le(v: u8) -> [u8; 1] {
    [v]
}
