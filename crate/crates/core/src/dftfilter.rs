//! Distributed Fourier band filter.
//!
//! A sparse DFT matrix keeps one contiguous band of modes; the forward
//! transform combines per-node partial contributions and scatters the kept
//! modes over the nodes (reduce_scatter), the backward transform gathers the
//! kept modes everywhere (allgatherv) and applies the conjugate transpose
//! scaled by 1/N. Forward then backward is the orthogonal projection onto
//! the kept-mode subspace. Only the kept modes ever cross the network, so
//! communication scales with the band width, not the transform length.

pub use num_complex::Complex64;

use crate::bytecode::compile;
use crate::dtype::{Dtype, ReduceOp};
use crate::error::{Error, Result};
use crate::factorization::{FactorPlan, Variant};
use crate::planner::{plan_allgatherv, plan_reduce_scatter, CollectiveSpec};
use crate::topology::Topology;
use crate::transport::{run_collective, Cluster};

/// DFT rows `[lo, hi]` of an `n`-point transform; all other rows are zero.
/// Entries are `omega^(k*j)` with `omega = e^(-2*pi*i/n)`.
#[derive(Debug, Clone, Copy)]
pub struct BandDftMatrix {
    n: usize,
    lo: usize,
    hi: usize,
}

impl BandDftMatrix {
    pub fn new(n: usize, lo: usize, hi: usize) -> Result<Self> {
        if n == 0 || lo > hi || hi >= n {
            return Err(Error::invalid(format!(
                "invalid band [{lo}, {hi}] for transform length {n}"
            )));
        }
        Ok(BandDftMatrix { n, lo, hi })
    }

    pub fn transform_len(&self) -> usize {
        self.n
    }

    pub fn band(&self) -> (usize, usize) {
        (self.lo, self.hi)
    }

    pub fn kept_modes(&self) -> usize {
        self.hi - self.lo + 1
    }

    /// `omega^exp`, with the exponent reduced modulo `n` for accuracy.
    pub fn omega_pow(&self, exp: usize) -> Complex64 {
        let reduced = (exp % self.n) as f64;
        let angle = -2.0 * std::f64::consts::PI * reduced / self.n as f64;
        Complex64::new(angle.cos(), angle.sin())
    }

    /// Matrix entry for kept row `k` (absolute mode index) and column `j`.
    pub fn entry(&self, k: usize, j: usize) -> Complex64 {
        debug_assert!((self.lo..=self.hi).contains(&k));
        self.omega_pow(k * j)
    }
}

/// Complex field distributed over nodes in contiguous slices, as equal as
/// possible.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedField {
    global_len: usize,
    slices: Vec<Vec<Complex64>>,
}

impl DistributedField {
    /// Splits `len` into per-node ranges differing by at most one element.
    pub fn node_ranges(len: usize, num_nodes: usize) -> Vec<std::ops::Range<usize>> {
        let base = len / num_nodes;
        let rem = len % num_nodes;
        let mut out = Vec::with_capacity(num_nodes);
        let mut off = 0usize;
        for j in 0..num_nodes {
            let n = base + usize::from(j < rem);
            out.push(off..off + n);
            off += n;
        }
        out
    }

    pub fn from_global(values: &[Complex64], num_nodes: usize) -> Self {
        let slices = Self::node_ranges(values.len(), num_nodes)
            .into_iter()
            .map(|r| values[r].to_vec())
            .collect();
        DistributedField {
            global_len: values.len(),
            slices,
        }
    }

    pub fn global_len(&self) -> usize {
        self.global_len
    }

    pub fn slices(&self) -> &[Vec<Complex64>] {
        &self.slices
    }

    pub fn to_global(&self) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.global_len);
        for s in &self.slices {
            out.extend_from_slice(s);
        }
        out
    }
}

/// Engine handles for the filter: topology, simulated cluster and the
/// factor plans driving the two collectives.
pub struct FilterEngine {
    topology: Topology,
    cluster: Cluster,
    use_reorder: bool,
}

impl FilterEngine {
    pub fn new(topology: Topology) -> Self {
        FilterEngine {
            topology,
            cluster: Cluster::new(topology),
            use_reorder: true,
        }
    }

    pub fn with_reorder(mut self, on: bool) -> Self {
        self.use_reorder = on;
        self
    }

    fn default_factors(&self) -> Result<FactorPlan> {
        let p = self.topology.num_nodes();
        let c = self.topology.cores_per_node();
        if p == 1 {
            return Ok(FactorPlan::empty(Variant::RecursiveMultiply));
        }
        let steps = p.next_power_of_two().trailing_zeros() as usize;
        if p.is_power_of_two() {
            FactorPlan::with_ports_capped(Variant::RecursiveMultiply, vec![2; steps], p, c)
        } else {
            FactorPlan::with_ports_capped(Variant::CyclicShift, vec![2; steps], p, c)
        }
    }

    /// Per-rank byte counts for the kept-mode vector: the node's mode block
    /// is owned by its core 0; remaining cores hold nothing.
    fn mode_counts(&self, kept: usize) -> Vec<usize> {
        let p = self.topology.num_nodes();
        let c = self.topology.cores_per_node();
        let ranges = DistributedField::node_ranges(kept, p);
        let mut counts = vec![0usize; p * c];
        for (node, r) in ranges.iter().enumerate() {
            counts[node * c] = r.len() * 16;
        }
        counts
    }
}

/// Result of one filter pass plus the network bytes it moved.
pub struct FilterRun {
    pub field: DistributedField,
    pub network_bytes: u64,
}

fn complex_to_bytes(values: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 16);
    for v in values {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    out
}

fn bytes_to_complex(bytes: &[u8]) -> Vec<Complex64> {
    bytes
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[0..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..16].try_into().unwrap()),
            )
        })
        .collect()
}

/// Splits a node range over its cores, as equal as possible.
fn core_ranges(range: &std::ops::Range<usize>, cores: usize) -> Vec<std::ops::Range<usize>> {
    DistributedField::node_ranges(range.len(), cores)
        .into_iter()
        .map(|r| range.start + r.start..range.start + r.end)
        .collect()
}

/// Forward transform `s = F r`: per-rank partial contributions to the kept
/// modes are combined and scattered over the nodes via reduce_scatter.
pub fn forward_filter(
    field: &DistributedField,
    matrix: &BandDftMatrix,
    engine: &FilterEngine,
) -> Result<FilterRun> {
    if matrix.transform_len() != field.global_len() {
        return Err(Error::invalid(format!(
            "field length {} does not match transform length {}",
            field.global_len(),
            matrix.transform_len()
        )));
    }
    let t = engine.topology;
    let p = t.num_nodes();
    let c = t.cores_per_node();
    if field.slices().len() != p {
        return Err(Error::invalid(
            "field is distributed over a different node count",
        ));
    }
    let (lo, hi) = matrix.band();
    let kept = matrix.kept_modes();
    let node_ranges = DistributedField::node_ranges(field.global_len(), p);

    // per-rank partial contributions: full kept-mode vectors
    let mut inputs = Vec::with_capacity(p * c);
    for node in 0..p {
        let slice = &field.slices()[node];
        for cr in core_ranges(&node_ranges[node], c) {
            let mut partial = vec![Complex64::new(0.0, 0.0); kept];
            for j in cr.clone() {
                let x = slice[j - node_ranges[node].start];
                for (ki, k) in (lo..=hi).enumerate() {
                    partial[ki] += matrix.entry(k, j) * x;
                }
            }
            inputs.push(complex_to_bytes(&partial));
        }
    }

    let counts = engine.mode_counts(kept);
    let spec = CollectiveSpec::reducing(t, counts, Dtype::Float64, ReduceOp::Sum)?;
    let fp = engine.default_factors()?;
    let plan = plan_reduce_scatter(&spec, &fp, engine.use_reorder)?;
    let program = compile(&plan)?;
    let outputs = run_collective(&engine.cluster, &program, &inputs)?;

    let mode_ranges = DistributedField::node_ranges(kept, p);
    let slices: Vec<Vec<Complex64>> = (0..p)
        .map(|node| bytes_to_complex(&outputs[node * c]))
        .collect();
    debug_assert!(slices
        .iter()
        .zip(&mode_ranges)
        .all(|(s, r)| s.len() == r.len()));
    Ok(FilterRun {
        field: DistributedField {
            global_len: kept,
            slices,
        },
        network_bytes: plan.network_volume(),
    })
}

/// Backward transform: gathers the kept modes everywhere via allgatherv and
/// applies the conjugate transpose scaled by 1/N.
pub fn backward_filter(
    spectral: &DistributedField,
    matrix: &BandDftMatrix,
    engine: &FilterEngine,
) -> Result<FilterRun> {
    let kept = matrix.kept_modes();
    if spectral.global_len() != kept {
        return Err(Error::invalid(format!(
            "spectral length {} does not match kept band {kept}",
            spectral.global_len()
        )));
    }
    let t = engine.topology;
    let p = t.num_nodes();
    let c = t.cores_per_node();
    if spectral.slices().len() != p {
        return Err(Error::invalid(
            "spectral field distributed over a different node count",
        ));
    }

    let counts = engine.mode_counts(kept);
    let mut inputs = vec![Vec::new(); p * c];
    for node in 0..p {
        inputs[node * c] = complex_to_bytes(&spectral.slices()[node]);
    }
    let spec = CollectiveSpec::gathering(t, counts, Dtype::Float64)?;
    let fp = engine.default_factors()?;
    let plan = plan_allgatherv(&spec, &fp, engine.use_reorder)?;
    let program = compile(&plan)?;
    let outputs = run_collective(&engine.cluster, &program, &inputs)?;

    let n = matrix.transform_len();
    let (lo, hi) = matrix.band();
    let node_ranges = DistributedField::node_ranges(n, p);
    let scale = 1.0 / n as f64;
    let mut slices = Vec::with_capacity(p);
    for node in 0..p {
        let mut slice = vec![Complex64::new(0.0, 0.0); node_ranges[node].len()];
        for (core, cr) in core_ranges(&node_ranges[node], c).into_iter().enumerate() {
            let s = bytes_to_complex(&outputs[t.rank_of(node, core)]);
            debug_assert_eq!(s.len(), kept);
            for j in cr {
                let mut acc = Complex64::new(0.0, 0.0);
                for (ki, k) in (lo..=hi).enumerate() {
                    acc += matrix.entry(k, j).conj() * s[ki];
                }
                slice[j - node_ranges[node].start] = acc * scale;
            }
        }
        slices.push(slice);
    }
    Ok(FilterRun {
        field: DistributedField {
            global_len: n,
            slices,
        },
        network_bytes: plan.network_volume(),
    })
}
