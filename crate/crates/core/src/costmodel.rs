//! Latency-bandwidth cost model, measurement tables and the try-all tuner.
//!
//! The closed forms cover uniform radixes; general factor sequences and
//! non-equal sizes go through [`simulate_timeline`], which walks a plan's
//! steps bulk-synchronously: within a step a node's time is its longest port
//! transfer, a step starts when all nodes finished the previous one, and the
//! total is the sum of step maxima. Per-port transfers are full duplex; the
//! port time is `alpha + beta * max(sent, received)` or the interpolated
//! table time. Reduction work is spread over the step's active ports.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::factorization::{enumerate_factorizations, FactorPlan, Variant};
use crate::planner::{
    plan_allgatherv, plan_allreduce_large, plan_allreduce_small, plan_reduce_scatter,
    CollectiveSpec, Plan,
};
use crate::topology::build_topology;
use crate::{Dtype, ReduceOp};

/// Analytic model parameters, all in seconds (per step, per byte, per byte
/// of reduction, per sorting basic op).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl ModelParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || gamma < 0.0 || delta < 0.0 {
            return Err(Error::invalid("model parameters must be non-negative"));
        }
        Ok(ModelParams {
            alpha,
            beta,
            gamma,
            delta,
        })
    }
}

/// Closed-form time for uniform radix `r` on `p = r^s` nodes moving `n`
/// total bytes: `alpha * log_r p + beta * ((p-1)/(r-1)/p) * n`, plus the
/// same bandwidth factor with `gamma` when a reduction runs.
pub fn closed_form_cost(
    p: usize,
    r: usize,
    n: usize,
    params: &ModelParams,
    with_reduction: bool,
) -> Result<f64> {
    if p == 0 || r < 2 {
        return Err(Error::invalid("need p >= 1 and r >= 2"));
    }
    let mut s = 0u32;
    let mut power = 1usize;
    while power < p {
        power = power
            .checked_mul(r)
            .ok_or_else(|| Error::invalid("overflow"))?;
        s += 1;
    }
    if power != p {
        return Err(Error::invalid(format!("{p} is not a power of {r}")));
    }
    let transfer = (p - 1) as f64 / (r - 1) as f64 / p as f64 * n as f64;
    let mut cost = params.alpha * s as f64 + params.beta * transfer;
    if with_reduction {
        cost += params.gamma * transfer;
    }
    Ok(cost)
}

/// Initialisation cost of the redundant reordering sort:
/// `delta * p * (log2 p)^2`.
pub fn reorder_cost(p: usize, params: &ModelParams) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    let lg = (p as f64).log2();
    params.delta * p as f64 * lg * lg
}

/// Installation-time measurement samples: (ports, message size) -> seconds.
#[derive(Debug, Clone, Default)]
pub struct MeasurementTable {
    series: BTreeMap<u32, Vec<(u64, f64)>>,
}

impl MeasurementTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ports: u32, size: u64, time: f64) {
        self.series.entry(ports).or_default().push((size, time));
    }

    /// Checks the table shape: at least two samples per port series, sizes
    /// strictly increasing and positive, times non-negative.
    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::CostModel("empty measurement table".into()));
        }
        for (ports, samples) in &self.series {
            if samples.len() < 2 {
                return Err(Error::CostModel(format!(
                    "series for {ports} port(s) needs at least 2 samples"
                )));
            }
            if samples[0].0 == 0 {
                return Err(Error::CostModel("message sizes must be positive".into()));
            }
            if samples.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::CostModel(format!(
                    "sizes not strictly increasing for {ports} port(s)"
                )));
            }
            if samples.iter().any(|&(_, t)| t < 0.0 || !t.is_finite()) {
                return Err(Error::CostModel(
                    "times must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn ports_available(&self) -> Vec<u32> {
        self.series.keys().copied().collect()
    }

    pub fn max_ports(&self) -> u32 {
        self.series.keys().max().copied().unwrap_or(0)
    }

    /// CSV with header `ports,size_bytes,time_seconds`, sorted by
    /// (ports, size).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ports,size_bytes,time_seconds\n");
        for (ports, samples) in &self.series {
            for (size, time) in samples {
                s.push_str(&format!("{ports},{size},{time:e}\n"));
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut table = MeasurementTable::new();
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "ports,size_bytes,time_seconds" => {}
            _ => {
                return Err(Error::CostModel(
                    "expected header ports,size_bytes,time_seconds".into(),
                ))
            }
        }
        for (no, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::CostModel(format!(
                    "line {}: expected 3 columns, got {}",
                    no + 2,
                    cols.len()
                )));
            }
            let bad = |e: &dyn std::fmt::Display| Error::CostModel(format!("line {}: {e}", no + 2));
            let ports: u32 = cols[0].trim().parse().map_err(|e| bad(&e))?;
            let size: u64 = cols[1].trim().parse().map_err(|e| bad(&e))?;
            let time: f64 = cols[2].trim().parse().map_err(|e| bad(&e))?;
            table.insert(ports, size, time);
        }
        table.validate()?;
        Ok(table)
    }
}

/// Piecewise-linear interpolation in log2(size); exact at sample points,
/// linear extrapolation from the nearest segment outside the sampled range.
pub fn interpolate(table: &MeasurementTable, ports: u32, size: u64) -> Result<f64> {
    let samples = table
        .series
        .get(&ports)
        .ok_or_else(|| Error::CostModel(format!("no series for {ports} port(s)")))?;
    if size == 0 {
        return Err(Error::invalid("interpolation needs a positive size"));
    }
    if let Ok(i) = samples.binary_search_by_key(&size, |&(s, _)| s) {
        return Ok(samples[i].1);
    }
    let seg = match samples.iter().position(|&(s, _)| s > size) {
        Some(0) => (samples[0], samples[1]),
        Some(i) => (samples[i - 1], samples[i]),
        None => (samples[samples.len() - 2], samples[samples.len() - 1]),
    };
    let ((s0, t0), (s1, t1)) = seg;
    let x = (size as f64).log2();
    let x0 = (s0 as f64).log2();
    let x1 = (s1 as f64).log2();
    Ok(t0 + (t1 - t0) * (x - x0) / (x1 - x0))
}

/// Builds a table from `alpha + beta * size` at the given grid points.
pub fn synthesize_table(params: &ModelParams, ports: &[u32], sizes: &[u64]) -> MeasurementTable {
    synthesize_table_with(params, ports, sizes, |_, _, base| base)
}

/// Same, with a caller-supplied transform (e.g. a saturation effect for long
/// messages or port contention).
pub fn synthesize_table_with(
    params: &ModelParams,
    ports: &[u32],
    sizes: &[u64],
    transform: impl Fn(u32, u64, f64) -> f64,
) -> MeasurementTable {
    let mut table = MeasurementTable::new();
    for &p in ports {
        for &s in sizes {
            let base = params.alpha + params.beta * s as f64;
            table.insert(p, s, transform(p, s, base));
        }
    }
    table
}

/// Where step times come from.
#[derive(Debug, Clone)]
pub enum CostSource {
    Params(ModelParams),
    Table { table: MeasurementTable, gamma: f64 },
}

#[derive(Debug, Clone)]
pub struct PortTime {
    pub node: usize,
    pub port: usize,
    pub bytes: u64,
    pub duration: f64,
}

#[derive(Debug, Clone)]
pub struct StepTime {
    pub start: f64,
    pub duration: f64,
    pub ports: Vec<PortTime>,
}

/// Modeled execution of one plan.
#[derive(Debug, Clone)]
pub struct Timeline {
    /// Intra-node pre-reduction ahead of step 0 (zero without reduction or
    /// with one core per node).
    pub pre_duration: f64,
    pub steps: Vec<StepTime>,
    pub total: f64,
}

impl Timeline {
    /// CSV rows `step,node,port,start,duration,bytes`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,node,port,start,duration,bytes\n");
        for (i, step) in self.steps.iter().enumerate() {
            for pt in &step.ports {
                s.push_str(&format!(
                    "{i},{},{},{:e},{:e},{}\n",
                    pt.node, pt.port, step.start, pt.duration, pt.bytes
                ));
            }
        }
        s
    }
}

/// Walks the plan's steps under the cost source and produces the modeled
/// timeline.
pub fn simulate_timeline(plan: &Plan, source: &CostSource) -> Result<Timeline> {
    let t = plan.spec.topology();
    let p = t.num_nodes();
    let c = t.cores_per_node();
    let gamma = match source {
        CostSource::Params(m) => m.gamma,
        CostSource::Table { gamma, .. } => *gamma,
    };

    // phase-I pre-reduction, elementwise-sliced across the node's cores
    let mut pre_bytes = vec![0u64; p];
    for op in &plan.phase1_reduce {
        if op.reduce {
            pre_bytes[op.node] += op.len as u64;
        }
    }
    let pre_duration = pre_bytes
        .iter()
        .map(|&b| gamma * b as f64 / c as f64)
        .fold(0.0f64, f64::max);

    let mut clock = pre_duration;
    let mut steps = Vec::with_capacity(plan.steps.len());
    for step in &plan.steps {
        // per (node, port): sent and received byte totals
        let mut sent: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        let mut recv: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for tr in &step.transfers {
            *sent.entry((tr.src_node, tr.src_port)).or_default() += tr.len as u64;
            *recv.entry((tr.dst_node, tr.dst_port)).or_default() += tr.len as u64;
        }
        let mut port_bytes: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for (&k, &v) in &sent {
            let e = port_bytes.entry(k).or_default();
            *e = (*e).max(v);
        }
        for (&k, &v) in &recv {
            let e = port_bytes.entry(k).or_default();
            *e = (*e).max(v);
        }
        let mut ports_used = vec![0u32; p];
        for &(node, _) in port_bytes.keys() {
            ports_used[node] += 1;
        }
        let mut reduce_bytes = vec![0u64; p];
        for op in &step.local_ops {
            if op.reduce {
                reduce_bytes[op.node] += op.len as u64;
            }
        }

        let mut ports = Vec::with_capacity(port_bytes.len());
        let mut node_time = vec![0.0f64; p];
        for (&(node, port), &bytes) in &port_bytes {
            let share = reduce_bytes[node] as f64 / ports_used[node] as f64;
            let comm = match source {
                CostSource::Params(m) => m.alpha + m.beta * bytes as f64,
                CostSource::Table { table, .. } => interpolate(table, ports_used[node], bytes)?,
            };
            let duration = comm + gamma * share;
            node_time[node] = node_time[node].max(duration);
            ports.push(PortTime {
                node,
                port,
                bytes,
                duration,
            });
        }
        // combine-only steps (no transfers) still pay their reduction time
        for node in 0..p {
            if ports_used[node] == 0 && reduce_bytes[node] > 0 {
                node_time[node] = gamma * reduce_bytes[node] as f64 / c as f64;
            }
        }
        let duration = node_time.iter().copied().fold(0.0f64, f64::max);
        steps.push(StepTime {
            start: clock,
            duration,
            ports,
        });
        clock += duration;
    }
    Ok(Timeline {
        pre_duration,
        steps,
        total: clock,
    })
}

/// Which collective the tuner costs candidates for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneCollective {
    Allgatherv,
    ReduceScatter,
    AllreduceLarge,
    /// Pinned factor target; callers use `cores_per_node + 1`.
    AllreduceSmall {
        target_factor: usize,
    },
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub factor_plan: FactorPlan,
    pub cost: f64,
}

fn candidate_plan(
    collective: TuneCollective,
    spec: &CollectiveSpec,
    fp: &FactorPlan,
) -> Result<Plan> {
    match collective {
        TuneCollective::Allgatherv => plan_allgatherv(spec, fp, false),
        TuneCollective::ReduceScatter => plan_reduce_scatter(spec, fp, false),
        TuneCollective::AllreduceLarge => plan_allreduce_large(spec, fp, fp),
        TuneCollective::AllreduceSmall { .. } => unreachable!("small allreduce is not searched"),
    }
}

/// Try-all tuner: estimates the communication time of every ordered
/// factorization against the measurement table and returns the cheapest
/// factor plan. Ties break toward fewer steps, then toward the
/// lexicographically largest factor sequence. The small-message allreduce
/// skips the search; its factor target is pinned by the caller.
pub fn autotune(
    p: usize,
    msg_size: u64,
    table: &MeasurementTable,
    max_factor: usize,
    collective: TuneCollective,
) -> Result<TuneResult> {
    table.validate()?;
    if p == 0 {
        return Err(Error::invalid("node count must be positive"));
    }
    let max_ports = table.max_ports() as usize;
    let source = CostSource::Table {
        table: table.clone(),
        gamma: 0.0,
    };
    let topology = build_topology(p, 1)?;
    let counts = vec![msg_size as usize; p];
    let spec = match collective {
        TuneCollective::Allgatherv => CollectiveSpec::gathering(topology, counts, Dtype::Byte)?,
        _ => CollectiveSpec::reducing(topology, counts, Dtype::Byte, ReduceOp::Sum)?,
    };

    if let TuneCollective::AllreduceSmall { target_factor } = collective {
        let plan = plan_allreduce_small(&spec, target_factor)?;
        let cost = simulate_timeline(&plan, &source)?.total;
        return Ok(TuneResult {
            factor_plan: plan.factor_plan.clone(),
            cost,
        });
    }

    let mut best: Option<(f64, FactorPlan)> = None;
    for factors in enumerate_factorizations(p, max_factor) {
        let fp = if factors.is_empty() {
            FactorPlan::empty(Variant::RecursiveMultiply)
        } else {
            FactorPlan::with_ports_capped(Variant::RecursiveMultiply, factors, p, max_ports.max(1))?
        };
        let plan = candidate_plan(collective, &spec, &fp)?;
        let cost = simulate_timeline(&plan, &source)?.total;
        let better = match &best {
            None => true,
            Some((bc, bf)) => match cost.total_cmp(bc) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => {
                    let (a, b) = (fp.num_steps(), bf.num_steps());
                    a < b || (a == b && fp.factors() > bf.factors())
                }
            },
        };
        if better {
            best = Some((cost, fp));
        }
    }
    match best {
        Some((cost, factor_plan)) => Ok(TuneResult { factor_plan, cost }),
        None => Err(Error::CostModel(format!(
            "no factorization of {p} with factors up to {max_factor}"
        ))),
    }
}
