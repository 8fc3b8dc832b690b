//! Command-line harness: microbenchmarks over the simulator and cost model,
//! tuner invocation, plan inspection and the Fourier filter demo.

mod bench;
mod demo;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use percoll::costmodel::{autotune, MeasurementTable, ModelParams, TuneCollective};
use percoll::factorization::{FactorPlan, Variant};
use percoll::topology::{build_topology, Topology};

/// Per-rank byte size below which allreduce takes the prefix-scan path.
pub const SMALL_ALLREDUCE_CUTOFF: usize = 16 * 1024;

#[derive(Parser)]
#[command(
    name = "percoll",
    version,
    about = "Persistent collective communication engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// OSU-style size sweep: plan, compile, execute against the oracle and
    /// report modeled plus wall-clock times as CSV
    Bench(BenchArgs),
    /// Pick the cheapest factor sequence for one message size
    Tune(TuneArgs),
    /// Print the plan listing (and optionally the bytecode) for one setup
    PlanDump(PlanDumpArgs),
    /// Distributed Fourier band filter demo
    DftDemo(DemoArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Collective {
    Allgatherv,
    ReduceScatter,
    Allreduce,
    Bcast,
    Reduce,
}

impl Collective {
    pub fn name(self) -> &'static str {
        match self {
            Collective::Allgatherv => "allgatherv",
            Collective::ReduceScatter => "reduce-scatter",
            Collective::Allreduce => "allreduce",
            Collective::Bcast => "bcast",
            Collective::Reduce => "reduce",
        }
    }
}

#[derive(Args)]
pub struct CommonArgs {
    #[arg(long, value_enum, default_value_t = Collective::Allgatherv)]
    pub collective: Collective,
    /// Number of nodes in the simulated cluster
    #[arg(long, default_value_t = 8)]
    pub nodes: usize,
    /// Cores per node
    #[arg(long, default_value_t = 1)]
    pub cores: usize,
    /// Fixed factor sequence, e.g. 2,2,2
    #[arg(long, value_delimiter = ',')]
    pub factors: Option<Vec<usize>>,
    /// Pick factors with the try-all tuner instead
    #[arg(long)]
    pub tune: bool,
    /// Measurement table CSV (ports,size_bytes,time_seconds)
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Largest factor the tuner may use
    #[arg(long, default_value_t = 8)]
    pub max_factor: usize,
    /// Apply the pairing heuristic to non-equal sizes (default)
    #[arg(long, overrides_with = "no_reorder")]
    pub reorder: bool,
    /// Keep the given node order
    #[arg(long)]
    pub no_reorder: bool,
    #[arg(long, default_value_t = 24105)]
    pub seed: u64,
}

impl CommonArgs {
    pub fn reorder_enabled(&self) -> bool {
        !self.no_reorder
    }

    pub fn topology(&self) -> Result<Topology> {
        build_topology(self.nodes, self.cores).context("bad topology")
    }

    pub fn load_table(&self) -> Result<Option<MeasurementTable>> {
        match &self.table {
            None => Ok(None),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Ok(Some(MeasurementTable::from_csv(&text)?))
            }
        }
    }

    /// Factor plan for this run: explicit factors, tuner choice, or a
    /// radix-2 default. Ports are capped at the core count.
    pub fn factor_plan(&self, msg_size: usize) -> Result<FactorPlan> {
        let p = self.nodes;
        let c = self.cores;
        if let Some(factors) = &self.factors {
            if p == 1 && factors.is_empty() {
                return Ok(FactorPlan::empty(Variant::RecursiveMultiply));
            }
            let product: usize = factors.iter().product();
            let variant = if product == p {
                Variant::RecursiveMultiply
            } else if product > p {
                Variant::CyclicShift
            } else {
                bail!("factors {factors:?} do not cover {p} nodes");
            };
            return Ok(FactorPlan::with_ports_capped(
                variant,
                factors.clone(),
                p,
                c,
            )?);
        }
        if self.tune {
            let table = match self.load_table()? {
                Some(t) => t,
                None => default_table(c),
            };
            let collective = match self.collective {
                Collective::Allgatherv | Collective::Bcast => TuneCollective::Allgatherv,
                Collective::ReduceScatter | Collective::Reduce => TuneCollective::ReduceScatter,
                Collective::Allreduce => {
                    if msg_size < SMALL_ALLREDUCE_CUTOFF {
                        TuneCollective::AllreduceSmall {
                            target_factor: c + 1,
                        }
                    } else {
                        TuneCollective::AllreduceLarge
                    }
                }
            };
            let tuned = autotune(p, msg_size as u64, &table, self.max_factor, collective)?;
            let factors = tuned.factor_plan.factors().to_vec();
            if factors.is_empty() {
                return Ok(FactorPlan::empty(Variant::RecursiveMultiply));
            }
            return Ok(
                FactorPlan::with_ports_capped(tuned.factor_plan.variant(), factors, p, c)
                    .unwrap_or(tuned.factor_plan),
            );
        }
        default_factor_plan(p, c)
    }
}

/// Radix-2 fallback: recursive multiply for powers of two, cyclic shift
/// otherwise.
pub fn default_factor_plan(p: usize, c: usize) -> Result<FactorPlan> {
    if p == 1 {
        return Ok(FactorPlan::empty(Variant::RecursiveMultiply));
    }
    let steps = p.next_power_of_two().trailing_zeros() as usize;
    let variant = if p.is_power_of_two() {
        Variant::RecursiveMultiply
    } else {
        Variant::CyclicShift
    };
    Ok(FactorPlan::with_ports_capped(
        variant,
        vec![2; steps],
        p,
        c,
    )?)
}

/// Analytic defaults used when no measurement table is supplied.
pub fn default_params() -> ModelParams {
    ModelParams::new(2.0e-6, 5.0e-10, 2.0e-10, 1.0e-8).expect("valid defaults")
}

fn default_table(cores: usize) -> MeasurementTable {
    let params = default_params();
    let sizes: Vec<u64> = (0..=24).map(|q| 1u64 << q).collect();
    let ports: Vec<u32> = (1..=cores.max(1) as u32).collect();
    percoll::costmodel::synthesize_table(&params, &ports, &sizes)
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Smallest per-rank message size in bytes
    #[arg(long, default_value_t = 8)]
    min_size: usize,
    /// Largest per-rank message size in bytes
    #[arg(long, default_value_t = 4096)]
    max_size: usize,
    /// Geometric step between sizes
    #[arg(long, default_value_t = 2)]
    size_step: usize,
    /// Execution repetitions per size
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    /// Write the CSV report here as well as to stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Per-rank message size in bytes
    #[arg(long, default_value_t = 1024)]
    size: usize,
}

#[derive(Args)]
struct PlanDumpArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Per-rank message size in bytes (ignored when --counts is given)
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Explicit per-rank byte counts, e.g. 8,24,48,72
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    /// Also print the compiled bytecode
    #[arg(long)]
    disasm: bool,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    #[arg(long, default_value_t = 1)]
    cores: usize,
    /// Transform length N
    #[arg(long, default_value_t = 32)]
    transform_len: usize,
    /// Kept mode band lo,hi (inclusive)
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2])]
    modes: Vec<usize>,
    #[arg(long, default_value_t = 24105)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(args) => bench::run(
            &args.common,
            args.min_size,
            args.max_size,
            args.size_step,
            args.iterations,
            args.output.as_deref(),
        ),
        Command::Tune(args) => run_tune(&args),
        Command::PlanDump(args) => run_plan_dump(&args),
        Command::DftDemo(args) => demo::run(
            &args.nodes,
            args.cores,
            args.transform_len,
            &args.modes,
            args.seed,
        ),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_tune(args: &TuneArgs) -> Result<bool> {
    let table = match args.common.load_table()? {
        Some(t) => t,
        None => default_table(args.common.cores),
    };
    let collective = match args.common.collective {
        Collective::Allgatherv | Collective::Bcast => TuneCollective::Allgatherv,
        Collective::ReduceScatter | Collective::Reduce => TuneCollective::ReduceScatter,
        Collective::Allreduce => {
            if args.size < SMALL_ALLREDUCE_CUTOFF {
                TuneCollective::AllreduceSmall {
                    target_factor: args.common.cores + 1,
                }
            } else {
                TuneCollective::AllreduceLarge
            }
        }
    };
    let tuned = autotune(
        args.common.nodes,
        args.size as u64,
        &table,
        args.common.max_factor,
        collective,
    )?;
    println!(
        "collective={} nodes={} cores={} size={}",
        args.common.collective.name(),
        args.common.nodes,
        args.common.cores,
        args.size
    );
    println!(
        "tuned factors={:?} variant={} ports={:?} modeled_time={:.3e}",
        tuned.factor_plan.factors(),
        tuned.factor_plan.variant().name(),
        tuned.factor_plan.ports_per_step(),
        tuned.cost
    );
    Ok(true)
}

fn run_plan_dump(args: &PlanDumpArgs) -> Result<bool> {
    let topology = args.common.topology()?;
    let counts = match &args.counts {
        Some(c) => {
            if c.len() != topology.total_ranks() {
                bail!(
                    "--counts needs {} entries, got {}",
                    topology.total_ranks(),
                    c.len()
                );
            }
            c.clone()
        }
        None => bench::equal_counts(&args.common.collective, topology, args.size),
    };
    let fp = args.common.factor_plan(args.size)?;
    let plan = bench::build_plan(&args.common, topology, &counts, &fp)?;
    print!("{}", plan.dump());
    if args.disasm {
        let program = percoll::bytecode::compile(&plan)?;
        print!("{}", program.disassemble());
    }
    Ok(true)
}
