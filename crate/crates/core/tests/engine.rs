//! End-to-end checks: plan, compile, validate, execute on the simulated
//! cluster, compare against the naive oracles.

use percoll::bytecode::{compile, validate};
use percoll::costmodel::{simulate_timeline, CostSource, ModelParams};
use percoll::dtype::{Dtype, ReduceOp};
use percoll::factorization::{enumerate_factorizations, FactorPlan, Variant};
use percoll::oracle;
use percoll::planner::{
    plan_allgatherv, plan_allreduce_large, plan_allreduce_small, plan_bcast, plan_reduce,
    plan_reduce_scatter, CollectiveSpec, Plan,
};
use percoll::topology::build_topology;
use percoll::transport::{run_collective, Cluster};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn run_plan(plan: &Plan, inputs: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let program = compile(plan).expect("compiles");
    let diags = validate(&program);
    assert!(diags.is_empty(), "validation: {diags:?}");
    let cluster = Cluster::new(*plan.spec.topology());
    run_collective(&cluster, &program, inputs).expect("runs")
}

fn i64_inputs(rng: &mut StdRng, lens: &[usize]) -> Vec<Vec<u8>> {
    lens.iter()
        .map(|&len| {
            (0..len / 8)
                .flat_map(|_| rng.random_range(-1_000_000i64..1_000_000).to_le_bytes())
                .collect()
        })
        .collect()
}

#[test]
fn allgatherv_two_nodes() {
    let t = build_topology(2, 1).unwrap();
    let spec = CollectiveSpec::gathering(t, vec![3, 2], Dtype::Byte).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2], 2).unwrap();
    let plan = plan_allgatherv(&spec, &fp, false).unwrap();
    let inputs = vec![vec![1, 2, 3], vec![9, 8]];
    let outputs = run_plan(&plan, &inputs);
    assert_eq!(outputs[0], vec![1, 2, 3, 9, 8]);
    assert_eq!(outputs[1], vec![1, 2, 3, 9, 8]);
}

#[test]
fn allgatherv_single_node_multicore() {
    let t = build_topology(1, 3).unwrap();
    let spec = CollectiveSpec::gathering(t, vec![2, 0, 1], Dtype::Byte).unwrap();
    let fp = FactorPlan::empty(Variant::RecursiveMultiply);
    let plan = plan_allgatherv(&spec, &fp, false).unwrap();
    assert!(plan.steps.is_empty());
    let inputs = vec![vec![5, 6], vec![], vec![7]];
    let outputs = run_plan(&plan, &inputs);
    for out in outputs {
        assert_eq!(out, vec![5, 6, 7]);
    }
}

#[test]
fn reduce_scatter_matches_oracle_mixed_cores() {
    let mut rng = StdRng::seed_from_u64(7);
    let t = build_topology(4, 2).unwrap();
    let counts = vec![8, 16, 0, 8, 24, 8, 16, 8];
    let spec = CollectiveSpec::reducing(t, counts, Dtype::Int64, ReduceOp::Sum).unwrap();
    let total = spec.total_bytes();
    let inputs = i64_inputs(&mut rng, &[total; 8]);
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2], 4).unwrap();
    let plan = plan_reduce_scatter(&spec, &fp, false).unwrap();
    let outputs = run_plan(&plan, &inputs);
    let want = oracle::naive_reduce_scatter(&spec, &inputs).unwrap();
    assert_eq!(outputs, want);
}

#[test]
fn cyclic_shift_allgatherv_five_nodes_matches_oracle() {
    let mut rng = StdRng::seed_from_u64(9);
    let t = build_topology(5, 1).unwrap();
    let counts = vec![8, 0, 16, 8, 32];
    let spec = CollectiveSpec::gathering(t, counts.clone(), Dtype::Int64).unwrap();
    let inputs = i64_inputs(&mut rng, &counts);
    let fp = FactorPlan::with_full_ports(Variant::CyclicShift, vec![2, 2, 2], 5).unwrap();
    let plan = plan_allgatherv(&spec, &fp, false).unwrap();
    let outputs = run_plan(&plan, &inputs);
    let want = oracle::naive_allgatherv(&spec, &inputs).unwrap();
    assert_eq!(outputs, want);
}

#[test]
fn reversed_cyclic_shift_reduce_scatter_five_nodes() {
    // five nodes at radix 2 need three steps, the last one incomplete
    let mut rng = StdRng::seed_from_u64(11);
    let t = build_topology(5, 1).unwrap();
    let counts = vec![8, 8, 8, 8, 8];
    let spec = CollectiveSpec::reducing(t, counts, Dtype::Int64, ReduceOp::Sum).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::CyclicShift, vec![2, 2, 2], 5).unwrap();
    let plan = plan_reduce_scatter(&spec, &fp, false).unwrap();
    assert_eq!(plan.steps.len(), 3);
    let inputs = i64_inputs(&mut rng, &[40; 5]);
    let outputs = run_plan(&plan, &inputs);
    let want = oracle::naive_reduce_scatter(&spec, &inputs).unwrap();
    assert_eq!(outputs, want);
}

#[test]
fn allreduce_small_eleven_nodes_sums_rank_ids() {
    let t = build_topology(11, 1).unwrap();
    let spec = CollectiveSpec::reducing(t, vec![8; 11], Dtype::Int64, ReduceOp::Sum).unwrap();
    let plan = plan_allreduce_small(&spec, 2).unwrap();
    let inputs: Vec<Vec<u8>> = (0..11i64).map(|r| r.to_le_bytes().to_vec()).collect();
    let outputs = run_plan(&plan, &inputs);
    for out in outputs {
        assert_eq!(i64::from_le_bytes(out.try_into().unwrap()), 55);
    }
}

#[test]
fn allreduce_small_with_cores_and_min() {
    let mut rng = StdRng::seed_from_u64(13);
    let t = build_topology(6, 2).unwrap();
    let spec = CollectiveSpec::reducing(t, vec![24; 12], Dtype::Int64, ReduceOp::Min).unwrap();
    let plan = plan_allreduce_small(&spec, 3).unwrap();
    let inputs = i64_inputs(&mut rng, &[24; 12]);
    let outputs = run_plan(&plan, &inputs);
    let want = oracle::naive_allreduce(&spec, &inputs).unwrap();
    assert_eq!(outputs, want);
}

#[test]
fn allreduce_single_node_is_the_local_reduction() {
    let t = build_topology(1, 2).unwrap();
    let spec = CollectiveSpec::reducing(t, vec![16; 2], Dtype::Int64, ReduceOp::Sum).unwrap();
    let small = plan_allreduce_small(&spec, 3).unwrap();
    assert!(small.steps.is_empty());
    let a: Vec<u8> = [1i64, 2].iter().flat_map(|v| v.to_le_bytes()).collect();
    let b: Vec<u8> = [10i64, 20].iter().flat_map(|v| v.to_le_bytes()).collect();
    let outputs = run_plan(&small, &[a.clone(), b.clone()]);
    let want: Vec<u8> = [11i64, 22].iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(outputs, vec![want.clone(), want.clone()]);

    let fp = FactorPlan::empty(Variant::RecursiveMultiply);
    let large = plan_allreduce_large(&spec, &fp, &fp).unwrap();
    let outputs = run_plan(&large, &[a, b]);
    assert_eq!(outputs, vec![want.clone(), want]);
}

#[test]
fn allreduce_large_blocks_and_oracle() {
    let mut rng = StdRng::seed_from_u64(17);
    // p=3, n=4 elements -> blocks [2,1,1]
    let t = build_topology(3, 1).unwrap();
    let spec = CollectiveSpec::reducing(t, vec![32; 3], Dtype::Int64, ReduceOp::Sum).unwrap();
    let blocks = percoll::planner::allreduce_blocks(4, 3, 8);
    assert_eq!(blocks, vec![16, 8, 8]);
    let fp = FactorPlan::with_full_ports(Variant::CyclicShift, vec![2, 2], 3).unwrap();
    let plan = plan_allreduce_large(&spec, &fp, &fp).unwrap();
    let inputs = i64_inputs(&mut rng, &[32; 3]);
    let outputs = run_plan(&plan, &inputs);
    let want = oracle::naive_allreduce(&spec, &inputs).unwrap();
    assert_eq!(outputs, want);
}

#[test]
fn allreduce_large_equals_naive_p4() {
    let mut rng = StdRng::seed_from_u64(19);
    let t = build_topology(4, 2).unwrap();
    let spec = CollectiveSpec::reducing(t, vec![128; 8], Dtype::Int64, ReduceOp::Sum).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2], 4).unwrap();
    let plan = plan_allreduce_large(&spec, &fp, &fp).unwrap();
    let inputs = i64_inputs(&mut rng, &[128; 8]);
    let outputs = run_plan(&plan, &inputs);
    let want = oracle::naive_allreduce(&spec, &inputs).unwrap();
    assert_eq!(outputs, want);
}

#[test]
fn bcast_is_a_tree_with_seven_messages() {
    let t = build_topology(8, 1).unwrap();
    let mut counts = vec![0usize; 8];
    counts[0] = 64;
    let spec = CollectiveSpec::gathering(t, counts, Dtype::Byte).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::CyclicShift, vec![2, 2, 2], 8).unwrap();
    let plan = plan_bcast(&spec, &fp, false).unwrap();
    let messages: usize = plan.steps.iter().map(|s| s.transfers.len()).sum();
    assert_eq!(messages, 7);
    let mut inputs = vec![Vec::new(); 8];
    inputs[0] = (0..64u8).collect();
    let outputs = run_plan(&plan, &inputs);
    for out in outputs {
        assert_eq!(out, (0..64u8).collect::<Vec<u8>>());
    }
}

#[test]
fn reduce_two_nodes_single_message() {
    let t = build_topology(2, 1).unwrap();
    let spec = CollectiveSpec::reducing(t, vec![0, 16], Dtype::Int64, ReduceOp::Sum).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2], 2).unwrap();
    let plan = plan_reduce(&spec, &fp, false).unwrap();
    let messages: usize = plan.steps.iter().map(|s| s.transfers.len()).sum();
    assert_eq!(messages, 1);
    let a: Vec<u8> = [1i64, 2].iter().flat_map(|v| v.to_le_bytes()).collect();
    let b: Vec<u8> = [30i64, 40].iter().flat_map(|v| v.to_le_bytes()).collect();
    let outputs = run_plan(&plan, &[a, b]);
    assert!(outputs[0].is_empty());
    let want: Vec<u8> = [31i64, 42].iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(outputs[1], want);
}

#[test]
fn bcast_rejects_two_roots() {
    let t = build_topology(4, 1).unwrap();
    let spec = CollectiveSpec::gathering(t, vec![8, 8, 0, 0], Dtype::Byte).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2], 4).unwrap();
    assert!(plan_bcast(&spec, &fp, false).is_err());
}

#[test]
fn reorder_applies_to_allgatherv() {
    let mut rng = StdRng::seed_from_u64(23);
    let t = build_topology(4, 1).unwrap();
    let counts = vec![8, 24, 48, 72];
    let spec = CollectiveSpec::gathering(t, counts.clone(), Dtype::Int64).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2], 4).unwrap();
    let plan = plan_allgatherv(&spec, &fp, true).unwrap();
    assert_eq!(plan.rank_order.order(), &[1, 2, 0, 3]);
    let inputs = i64_inputs(&mut rng, &counts);
    let outputs = run_plan(&plan, &inputs);
    let want = oracle::naive_allgatherv(&spec, &inputs).unwrap();
    assert_eq!(outputs, want);
}

#[test]
fn mirror_property_reduce_scatter_vs_allgatherv() {
    // message (src, dst, len) multisets are equal with src/dst swapped
    for (p, factors, variant) in [
        (8usize, vec![2, 2, 2], Variant::RecursiveMultiply),
        (6, vec![3, 2], Variant::RecursiveMultiply),
        (7, vec![2, 2, 2], Variant::CyclicShift),
        (9, vec![3, 3], Variant::CyclicShift),
    ] {
        let t = build_topology(p, 1).unwrap();
        let counts: Vec<usize> = (0..p).map(|i| 8 * ((i * 13) % 5)).collect();
        let g_spec = CollectiveSpec::gathering(t, counts.clone(), Dtype::Int64).unwrap();
        let r_spec = CollectiveSpec::reducing(t, counts, Dtype::Int64, ReduceOp::Sum).unwrap();
        let fp = FactorPlan::with_full_ports(variant, factors, p).unwrap();
        let g = plan_allgatherv(&g_spec, &fp, false).unwrap();
        let r = plan_reduce_scatter(&r_spec, &fp, false).unwrap();
        let mut g_msgs: Vec<(usize, usize, usize)> = g
            .steps
            .iter()
            .flat_map(|s| s.transfers.iter().map(|t| (t.dst_node, t.src_node, t.len)))
            .collect();
        let mut r_msgs: Vec<(usize, usize, usize)> = r
            .steps
            .iter()
            .flat_map(|s| s.transfers.iter().map(|t| (t.src_node, t.dst_node, t.len)))
            .collect();
        g_msgs.sort();
        r_msgs.sort();
        assert_eq!(g_msgs, r_msgs, "p={p}");
    }
}

#[test]
fn scatter_pairs_then_parallel_gathers() {
    // sizes 0,1,0,1,0,1,0,1 with radix 2: step one is four pairwise
    // scatters, the rest run inside two disjoint quads.
    let t = build_topology(8, 1).unwrap();
    let counts = vec![0usize, 8, 0, 8, 0, 8, 0, 8];
    let spec = CollectiveSpec::gathering(t, counts.clone(), Dtype::Int64).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2, 2], 8).unwrap();
    let plan = plan_allgatherv(&spec, &fp, false).unwrap();
    assert_eq!(plan.steps[0].transfers.len(), 4);
    for tr in &plan.steps[0].transfers {
        assert_eq!(tr.src_node / 2, tr.dst_node / 2);
    }
    let mut rng = StdRng::seed_from_u64(29);
    let inputs = i64_inputs(&mut rng, &counts);
    let outputs = run_plan(&plan, &inputs);
    let want = oracle::naive_allgatherv(&spec, &inputs).unwrap();
    assert_eq!(outputs, want);
}

#[test]
fn sweep_all_factorizations_small() {
    // quick version of the acceptance sweep: p <= 6, c <= 2
    let mut rng = StdRng::seed_from_u64(31);
    for p in 1..=6usize {
        for c in 1..=2usize {
            let t = build_topology(p, c).unwrap();
            for factors in enumerate_factorizations(p, 6) {
                for variant in [Variant::RecursiveMultiply, Variant::CyclicShift] {
                    let fp = if factors.is_empty() {
                        FactorPlan::empty(variant)
                    } else {
                        FactorPlan::with_ports_capped(variant, factors.clone(), p, c).unwrap()
                    };
                    for _ in 0..3 {
                        let counts: Vec<usize> = (0..p * c)
                            .map(|_| 8 * rng.random_range(0..4usize))
                            .collect();
                        let g_spec =
                            CollectiveSpec::gathering(t, counts.clone(), Dtype::Int64).unwrap();
                        let g_plan = plan_allgatherv(&g_spec, &fp, true).unwrap();
                        let inputs = i64_inputs(&mut rng, &counts);
                        let got = run_plan(&g_plan, &inputs);
                        let want = oracle::naive_allgatherv(&g_spec, &inputs).unwrap();
                        assert_eq!(got, want, "allgatherv p={p} c={c} {factors:?} {variant:?}");

                        let r_spec = CollectiveSpec::reducing(
                            t,
                            counts.clone(),
                            Dtype::Int64,
                            ReduceOp::Sum,
                        )
                        .unwrap();
                        let r_plan = plan_reduce_scatter(&r_spec, &fp, true).unwrap();
                        let total = r_spec.total_bytes();
                        let inputs = i64_inputs(&mut rng, &vec![total; p * c]);
                        let got = run_plan(&r_plan, &inputs);
                        let want = oracle::naive_reduce_scatter(&r_spec, &inputs).unwrap();
                        assert_eq!(
                            got, want,
                            "reduce_scatter p={p} c={c} {factors:?} {variant:?}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn wide_cluster_with_multi_port_steps() {
    let mut rng = StdRng::seed_from_u64(37);
    let t = build_topology(16, 4).unwrap();
    let counts: Vec<usize> = (0..64).map(|_| 8 * rng.random_range(0..6usize)).collect();
    for factors in [vec![4usize, 4], vec![4, 2, 2], vec![2, 8]] {
        for variant in [Variant::RecursiveMultiply, Variant::CyclicShift] {
            let fp = FactorPlan::with_ports_capped(variant, factors.clone(), 16, 4).unwrap();
            let g_spec = CollectiveSpec::gathering(t, counts.clone(), Dtype::Int64).unwrap();
            let g_plan = plan_allgatherv(&g_spec, &fp, true).unwrap();
            let inputs = i64_inputs(&mut rng, &counts);
            let got = run_plan(&g_plan, &inputs);
            let want = oracle::naive_allgatherv(&g_spec, &inputs).unwrap();
            assert_eq!(got, want, "allgatherv {factors:?} {variant:?}");

            let r_spec =
                CollectiveSpec::reducing(t, counts.clone(), Dtype::Int64, ReduceOp::Max).unwrap();
            let r_plan = plan_reduce_scatter(&r_spec, &fp, true).unwrap();
            let total = r_spec.total_bytes();
            let inputs = i64_inputs(&mut rng, &vec![total; 64]);
            let got = run_plan(&r_plan, &inputs);
            let want = oracle::naive_reduce_scatter(&r_spec, &inputs).unwrap();
            assert_eq!(got, want, "reduce_scatter {factors:?} {variant:?}");
        }
    }
}

#[test]
fn allreduce_small_mixed_pipelines() {
    let mut rng = StdRng::seed_from_u64(43);
    // (p, target): exercises greedy groups, multi-step large primes and
    // their combinations
    for (p, target) in [(12usize, 4usize), (30, 4), (21, 3), (13, 3), (25, 6)] {
        let t = build_topology(p, 1).unwrap();
        let spec = CollectiveSpec::reducing(t, vec![32; p], Dtype::Int64, ReduceOp::Sum).unwrap();
        let plan = plan_allreduce_small(&spec, target).unwrap();
        let inputs = i64_inputs(&mut rng, &vec![32; p]);
        let got = run_plan(&plan, &inputs);
        let want = oracle::naive_allreduce(&spec, &inputs).unwrap();
        assert_eq!(got, want, "p={p} target={target}");
    }
}

#[test]
fn incomplete_multiradix_reduce_scatter_is_stable_under_jitter() {
    // an incomplete cyclic shift step stages overlapping ranges of
    // different lengths on one node; the reduce ops must stay element-
    // aligned across cores or concurrent updates get lost
    use percoll::transport::ClusterOptions;
    let mut rng = StdRng::seed_from_u64(61);
    for (p, factors, c) in [
        (8usize, vec![3usize, 3], 2usize),
        (8, vec![3, 3], 3),
        (13, vec![4, 4], 3),
        (7, vec![3, 3], 2),
    ] {
        let t = build_topology(p, c).unwrap();
        let counts = vec![16usize; p * c];
        let spec = CollectiveSpec::reducing(t, counts, Dtype::Int64, ReduceOp::Sum).unwrap();
        let fp =
            FactorPlan::with_ports_capped(Variant::CyclicShift, factors.clone(), p, c).unwrap();
        let plan = plan_reduce_scatter(&spec, &fp, false).unwrap();
        let program = compile(&plan).unwrap();
        assert!(validate(&program).is_empty());
        let total = spec.total_bytes();
        let inputs = i64_inputs(&mut rng, &vec![total; p * c]);
        let want = oracle::naive_reduce_scatter(&spec, &inputs).unwrap();
        for seed in 0..30u64 {
            let cluster = Cluster::with_options(
                t,
                ClusterOptions {
                    deadlock_timeout: std::time::Duration::from_secs(10),
                    jitter_seed: Some(seed),
                },
            );
            let got = run_collective(&cluster, &program, &inputs).unwrap();
            assert_eq!(got, want, "p={p} {factors:?} c={c} seed={seed}");
        }
    }
}

#[test]
fn float32_reduce_scatter_within_tolerance() {
    let mut rng = StdRng::seed_from_u64(53);
    let t = build_topology(6, 2).unwrap();
    let counts: Vec<usize> = (0..12).map(|_| 4 * rng.random_range(0..5usize)).collect();
    let spec = CollectiveSpec::reducing(t, counts, Dtype::Float32, ReduceOp::Sum).unwrap();
    let total = spec.total_bytes();
    let inputs: Vec<Vec<u8>> = (0..12)
        .map(|_| {
            (0..total / 4)
                .flat_map(|_| rng.random_range(0.5f32..1.5).to_le_bytes())
                .collect()
        })
        .collect();
    let fp = FactorPlan::with_ports_capped(Variant::CyclicShift, vec![2, 3], 6, 2).unwrap();
    let plan = plan_reduce_scatter(&spec, &fp, true).unwrap();
    let got = run_plan(&plan, &inputs);
    let want = oracle::naive_reduce_scatter(&spec, &inputs).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.len(), w.len());
        for (x, y) in g.chunks_exact(4).zip(w.chunks_exact(4)) {
            let x = f32::from_le_bytes(x.try_into().unwrap());
            let y = f32::from_le_bytes(y.try_into().unwrap());
            assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1.0));
        }
    }
}

#[test]
fn timeline_smoke_equal_sizes() {
    let t = build_topology(8, 1).unwrap();
    let spec = CollectiveSpec::gathering(t, vec![8; 8], Dtype::Int64).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2, 2], 8).unwrap();
    let plan = plan_allgatherv(&spec, &fp, false).unwrap();
    let params = ModelParams::new(1.0, 1.0, 0.0, 0.0).unwrap();
    let tl = simulate_timeline(&plan, &CostSource::Params(params)).unwrap();
    // alpha*3 + beta*(1+2+4)*8 = 3 + 56
    assert!((tl.total - 59.0).abs() < 1e-12);
}
