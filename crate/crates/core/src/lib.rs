//! Persistent collective communication engine.
//!
//! Plans allgatherv, reduce_scatter and allreduce schedules with flexible
//! per-step factors and rank reordering, compiles them to branch-free
//! bytecode in an initialisation phase, executes them on a simulated
//! multi-node cluster, and tunes factor choices against a latency-bandwidth
//! cost model.

pub mod bytecode;
pub mod costmodel;
pub mod dftfilter;
pub mod dtype;
pub mod error;
pub mod factorization;
pub mod oracle;
pub mod planner;
pub mod topology;
pub mod transport;

pub use dtype::{Dtype, ReduceOp};
pub use error::{Error, Result};
pub use factorization::{FactorPlan, Variant};
pub use planner::{CollectiveKind, CollectiveSpec, Plan, RankOrder};
pub use topology::{build_topology, Topology};
