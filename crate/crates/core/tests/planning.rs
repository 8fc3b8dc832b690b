//! Plan structure checks: step shapes, port counts, network volume
//! accounting and the stable dump format.

use percoll::dtype::{Dtype, ReduceOp};
use percoll::factorization::{FactorPlan, Variant};
use percoll::planner::{
    plan_allgatherv, plan_allreduce_small, plan_reduce_scatter, CollectiveSpec,
};
use percoll::topology::build_topology;

#[test]
fn factors_five_three_use_four_then_two_ports() {
    let t = build_topology(15, 4).unwrap();
    let spec = CollectiveSpec::gathering(t, vec![8; 60], Dtype::Int64).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![5, 3], 15).unwrap();
    let plan = plan_allgatherv(&spec, &fp, false).unwrap();
    assert_eq!(plan.steps.len(), 2);
    let max_port = |s: usize| {
        plan.steps[s]
            .transfers
            .iter()
            .map(|t| t.src_port.max(t.dst_port))
            .max()
            .unwrap()
    };
    assert_eq!(max_port(0), 3);
    assert_eq!(max_port(1), 1);
    assert_eq!(plan.steps[0].transfers.len(), 15 * 4);
    assert_eq!(plan.steps[1].transfers.len(), 15 * 2);
}

#[test]
fn recursive_multiply_demands_exact_product() {
    let t = build_topology(5, 1).unwrap();
    let spec = CollectiveSpec::gathering(t, vec![8; 5], Dtype::Int64).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2], 4).unwrap();
    assert!(plan_allgatherv(&spec, &fp, false).is_err());
}

#[test]
fn network_volume_matches_the_bandwidth_terms() {
    // per node: injected bytes are (p-1)*n/p in total and
    // n*(p-1)/(r-1)/p through each port (the Eq-style per-port series)
    for (p, r) in [(8usize, 2usize), (16, 4), (9, 3), (16, 16)] {
        let per_node = 360usize; // divisible by lots of factors
        let t = build_topology(p, 1).unwrap();
        let spec = CollectiveSpec::gathering(t, vec![per_node; p], Dtype::Byte).unwrap();
        let mut steps = 0usize;
        let mut q = 1usize;
        while q < p {
            q *= r;
            steps += 1;
        }
        let fp =
            FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![r; steps], p).unwrap();
        let plan = plan_allgatherv(&spec, &fp, false).unwrap();
        let volumes = plan.network_volume_per_node();
        let injected = (p - 1) * per_node;
        assert!(volumes.iter().all(|&v| v == injected as u64), "p={p} r={r}");

        // port 0 of node 0, summed over steps
        let port0: usize = plan
            .steps
            .iter()
            .map(|s| {
                s.transfers
                    .iter()
                    .filter(|t| t.src_node == 0 && t.src_port == 0)
                    .map(|t| t.len)
                    .sum::<usize>()
            })
            .sum();
        let want = (p - 1) / (r - 1) * per_node;
        assert_eq!(port0, want, "p={p} r={r}");
    }
}

#[test]
fn compiled_programs_send_what_the_plan_says() {
    let t = build_topology(6, 2).unwrap();
    let counts: Vec<usize> = (0..12).map(|i| 8 * (i % 4)).collect();
    let spec = CollectiveSpec::reducing(t, counts, Dtype::Int64, ReduceOp::Sum).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::CyclicShift, vec![2, 3], 6).unwrap();
    let plan = plan_reduce_scatter(&spec, &fp, true).unwrap();
    let program = percoll::bytecode::compile(&plan).unwrap();
    assert_eq!(
        program.sent_bytes_per_node(),
        plan.network_volume_per_node()
    );
}

#[test]
fn reduce_scatter_reorders_like_the_gather() {
    let t = build_topology(4, 1).unwrap();
    let spec =
        CollectiveSpec::reducing(t, vec![8, 24, 48, 72], Dtype::Int64, ReduceOp::Sum).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2], 4).unwrap();
    let plan = plan_reduce_scatter(&spec, &fp, true).unwrap();
    assert_eq!(plan.rank_order.order(), &[1, 2, 0, 3]);
}

#[test]
fn allreduce_small_volume_is_binary_exchange_for_powers_of_two() {
    for k in 1..=6u32 {
        let p = 2usize.pow(k);
        let count = 64usize;
        let t = build_topology(p, 1).unwrap();
        let spec =
            CollectiveSpec::reducing(t, vec![count; p], Dtype::Int64, ReduceOp::Sum).unwrap();
        let plan = plan_allreduce_small(&spec, 2).unwrap();
        let volumes = plan.network_volume_per_node();
        assert!(volumes.iter().all(|&v| v == (k as usize * count) as u64));
    }
}

#[test]
fn staging_only_for_reducing_plans() {
    let t = build_topology(4, 2).unwrap();
    let g = CollectiveSpec::gathering(t, vec![8; 8], Dtype::Int64).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2], 4).unwrap();
    assert_eq!(plan_allgatherv(&g, &fp, false).unwrap().staging_len, 0);
    let r = CollectiveSpec::reducing(t, vec![8; 8], Dtype::Int64, ReduceOp::Sum).unwrap();
    assert!(plan_reduce_scatter(&r, &fp, false).unwrap().staging_len > 0);
}

#[test]
fn dump_golden_radix_two_quad() {
    let t = build_topology(4, 1).unwrap();
    let spec = CollectiveSpec::gathering(t, vec![16; 4], Dtype::Byte).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2, 2], 4).unwrap();
    let plan = plan_allgatherv(&spec, &fp, false).unwrap();
    let want = "\
plan allgatherv nodes=4 cores=1 variant=recursive-multiply factors=[2, 2] ports=[1, 1] order=[0, 1, 2, 3]
segment=64 staging=0 phase1-copies=4 phase1-reduces=0 phase3-copies=16
step 0:
  p0 n0->n1 seg[0..16) -> seg[0..16)
  p0 n1->n0 seg[16..32) -> seg[16..32)
  p0 n2->n3 seg[32..48) -> seg[32..48)
  p0 n3->n2 seg[48..64) -> seg[48..64)
step 1:
  p0 n0->n2 seg[0..32) -> seg[0..32)
  p0 n1->n3 seg[0..32) -> seg[0..32)
  p0 n2->n0 seg[32..64) -> seg[32..64)
  p0 n3->n1 seg[32..64) -> seg[32..64)
";
    assert_eq!(plan.dump(), want);
}

#[test]
fn dump_golden_reversed_cyclic_shift() {
    // five nodes, radix 2: three reversed steps at distances 4, 2, 1, each
    // receive staged and reduced into the head of the live range
    let t = build_topology(5, 1).unwrap();
    let spec = CollectiveSpec::reducing(t, vec![8; 5], Dtype::Int64, ReduceOp::Sum).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::CyclicShift, vec![2, 2, 2], 5).unwrap();
    let plan = plan_reduce_scatter(&spec, &fp, false).unwrap();
    let want = "\
plan reduce-scatter nodes=5 cores=1 variant=cyclic-shift factors=[2, 2, 2] ports=[1, 1, 1] order=[0, 1, 2, 3, 4]
segment=40 staging=16 phase1-copies=25 phase1-reduces=0 phase3-copies=5
step 0:
  p0 n1->n0 seg[32..40) -> stage[0..8)
  p0 n2->n1 seg[32..40) -> stage[0..8)
  p0 n3->n2 seg[32..40) -> stage[0..8)
  p0 n4->n3 seg[32..40) -> stage[0..8)
  p0 n0->n4 seg[32..40) -> stage[0..8)
  n0 reduce stage[0..8) -> seg[0..8)
  n1 reduce stage[0..8) -> seg[0..8)
  n2 reduce stage[0..8) -> seg[0..8)
  n3 reduce stage[0..8) -> seg[0..8)
  n4 reduce stage[0..8) -> seg[0..8)
step 1:
  p0 n3->n0 seg[16..32) -> stage[0..16)
  p0 n4->n1 seg[16..32) -> stage[0..16)
  p0 n0->n2 seg[16..32) -> stage[0..16)
  p0 n1->n3 seg[16..32) -> stage[0..16)
  p0 n2->n4 seg[16..32) -> stage[0..16)
  n0 reduce stage[0..16) -> seg[0..16)
  n1 reduce stage[0..16) -> seg[0..16)
  n2 reduce stage[0..16) -> seg[0..16)
  n3 reduce stage[0..16) -> seg[0..16)
  n4 reduce stage[0..16) -> seg[0..16)
step 2:
  p0 n4->n0 seg[8..16) -> stage[0..8)
  p0 n0->n1 seg[8..16) -> stage[0..8)
  p0 n1->n2 seg[8..16) -> stage[0..8)
  p0 n2->n3 seg[8..16) -> stage[0..8)
  p0 n3->n4 seg[8..16) -> stage[0..8)
  n0 reduce stage[0..8) -> seg[0..8)
  n1 reduce stage[0..8) -> seg[0..8)
  n2 reduce stage[0..8) -> seg[0..8)
  n3 reduce stage[0..8) -> seg[0..8)
  n4 reduce stage[0..8) -> seg[0..8)
";
    assert_eq!(plan.dump(), want);
}

#[test]
fn spec_rejects_bad_shapes() {
    let t = build_topology(2, 2).unwrap();
    assert!(CollectiveSpec::gathering(t, vec![8, 8], Dtype::Int64).is_err());
    assert!(CollectiveSpec::gathering(t, vec![7, 8, 8, 8], Dtype::Int64).is_err());
    let g = CollectiveSpec::gathering(t, vec![8; 4], Dtype::Int64).unwrap();
    let fp = FactorPlan::with_full_ports(Variant::RecursiveMultiply, vec![2], 2).unwrap();
    // gather spec refused by reduce_scatter
    assert!(plan_reduce_scatter(&g, &fp, false).is_err());
}
