//! The `bench` subcommand: for every size, plan and compile (init phase),
//! execute on the simulator, check against the oracle, and report the
//! modeled time next to the measured init and execution wall times.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use percoll::bytecode::{compile, validate};
use percoll::costmodel::{simulate_timeline, CostSource};
use percoll::dtype::{Dtype, ReduceOp};
use percoll::factorization::FactorPlan;
use percoll::oracle;
use percoll::planner::{
    plan_allgatherv, plan_allreduce_large, plan_allreduce_small, plan_bcast, plan_reduce,
    plan_reduce_scatter, CollectiveSpec, Plan,
};
use percoll::topology::Topology;
use percoll::transport::{run_collective, Cluster};

use crate::{default_params, Collective, CommonArgs, SMALL_ALLREDUCE_CUTOFF};

/// Per-rank counts for one benchmark size: equal blocks, except for the
/// degenerate bcast/reduce pattern where only rank 0 contributes.
pub fn equal_counts(collective: &Collective, topology: Topology, size: usize) -> Vec<usize> {
    let size = (size / 8).max(1) * 8;
    let ranks = topology.total_ranks();
    match collective {
        Collective::Bcast | Collective::Reduce => {
            let mut counts = vec![0usize; ranks];
            counts[0] = size;
            counts
        }
        _ => vec![size; ranks],
    }
}

pub fn build_plan(
    common: &CommonArgs,
    topology: Topology,
    counts: &[usize],
    fp: &FactorPlan,
) -> Result<Plan> {
    let reorder = common.reorder_enabled();
    let plan = match common.collective {
        Collective::Allgatherv => {
            let spec = CollectiveSpec::gathering(topology, counts.to_vec(), Dtype::Int64)?;
            plan_allgatherv(&spec, fp, reorder)?
        }
        Collective::Bcast => {
            let spec = CollectiveSpec::gathering(topology, counts.to_vec(), Dtype::Int64)?;
            plan_bcast(&spec, fp, reorder)?
        }
        Collective::ReduceScatter => {
            let spec =
                CollectiveSpec::reducing(topology, counts.to_vec(), Dtype::Int64, ReduceOp::Sum)?;
            plan_reduce_scatter(&spec, fp, reorder)?
        }
        Collective::Reduce => {
            let spec =
                CollectiveSpec::reducing(topology, counts.to_vec(), Dtype::Int64, ReduceOp::Sum)?;
            plan_reduce(&spec, fp, reorder)?
        }
        Collective::Allreduce => {
            let spec =
                CollectiveSpec::reducing(topology, counts.to_vec(), Dtype::Int64, ReduceOp::Sum)?;
            if counts[0] < SMALL_ALLREDUCE_CUTOFF {
                plan_allreduce_small(&spec, topology.cores_per_node() + 1)?
            } else {
                plan_allreduce_large(&spec, fp, fp)?
            }
        }
    };
    Ok(plan)
}

fn random_inputs(plan: &Plan, rng: &mut StdRng) -> Vec<Vec<u8>> {
    let spec = &plan.spec;
    let total: usize = spec.counts().iter().sum();
    (0..spec.topology().total_ranks())
        .map(|r| {
            let len = match plan.kind {
                percoll::planner::CollectiveKind::Allgatherv => spec.counts()[r],
                percoll::planner::CollectiveKind::ReduceScatter => total,
                _ => spec.counts()[r],
            };
            (0..len / 8)
                .flat_map(|_| rng.random_range(-1_000_000i64..1_000_000).to_le_bytes())
                .collect()
        })
        .collect()
}

fn oracle_outputs(plan: &Plan, inputs: &[Vec<u8>]) -> Result<Vec<Vec<u8>>> {
    let spec = &plan.spec;
    Ok(match plan.kind {
        percoll::planner::CollectiveKind::Allgatherv => oracle::naive_allgatherv(spec, inputs)?,
        percoll::planner::CollectiveKind::ReduceScatter => {
            oracle::naive_reduce_scatter(spec, inputs)?
        }
        _ => oracle::naive_allreduce(spec, inputs)?,
    })
}

pub fn run(
    common: &CommonArgs,
    min_size: usize,
    max_size: usize,
    size_step: usize,
    iterations: usize,
    output: Option<&Path>,
) -> Result<bool> {
    anyhow::ensure!(min_size <= max_size, "min size above max size");
    anyhow::ensure!(size_step >= 2, "geometric step must be at least 2");
    anyhow::ensure!(iterations >= 1, "need at least one iteration");
    let topology = common.topology()?;
    let cluster = Cluster::new(topology);
    let mut rng = StdRng::seed_from_u64(common.seed);
    let table = common.load_table()?;

    let mut csv = String::from("size,modeled_time,init_wall,exec_wall,factors,correct\n");
    let mut all_correct = true;
    let mut size = min_size.max(8);
    while size <= max_size {
        let counts = equal_counts(&common.collective, topology, size);

        let init_start = Instant::now();
        let fp = common.factor_plan(size)?;
        let plan = build_plan(common, topology, &counts, &fp)?;
        let program = compile(&plan)?;
        let init_wall = init_start.elapsed().as_secs_f64();

        let diags = validate(&program);
        anyhow::ensure!(diags.is_empty(), "program invalid: {diags:?}");

        let inputs = random_inputs(&plan, &mut rng);
        let mut exec_wall = 0.0f64;
        let mut outputs = Vec::new();
        let mut repeatable = true;
        for i in 0..iterations {
            let start = Instant::now();
            let got = run_collective(&cluster, &program, &inputs).context("execution failed")?;
            exec_wall += start.elapsed().as_secs_f64();
            if i == 0 {
                outputs = got;
            } else if outputs != got {
                repeatable = false;
            }
        }
        exec_wall /= iterations as f64;

        let correct = repeatable && outputs == oracle_outputs(&plan, &inputs)?;
        all_correct &= correct;

        let source = match &table {
            Some(t) => CostSource::Table {
                table: t.clone(),
                gamma: default_params().gamma,
            },
            None => CostSource::Params(default_params()),
        };
        let modeled = simulate_timeline(&plan, &source)?.total;

        let factors = if plan.factor_plan.factors().is_empty() {
            "1".to_string()
        } else {
            plan.factor_plan
                .factors()
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        csv.push_str(&format!(
            "{size},{modeled:.6e},{init_wall:.6e},{exec_wall:.6e},{factors},{correct}\n"
        ));
        if size == max_size {
            break;
        }
        size = (size * size_step).min(max_size);
    }

    print!("{csv}");
    if let Some(path) = output {
        let mut f =
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        f.write_all(csv.as_bytes())?;
    }
    Ok(all_correct)
}
