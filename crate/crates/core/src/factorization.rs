//! Decomposition of node counts into per-step communication factors.
//!
//! A step with factor `f` exchanges messages with `f - 1` peers, using up to
//! `f - 1` ports in parallel. Recursive multiplying needs the factor product
//! to equal the node count exactly; cyclic shift also accepts an overshooting
//! product, in which case the last step is incomplete.

use crate::error::{Error, Result};

/// Algorithm family a factor sequence is executed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    RecursiveMultiply,
    CyclicShift,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::RecursiveMultiply => "recursive-multiply",
            Variant::CyclicShift => "cyclic-shift",
        }
    }
}

/// Ordered per-step factors together with the port count used in each step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorPlan {
    variant: Variant,
    factors: Vec<usize>,
    ports_per_step: Vec<usize>,
}

impl FactorPlan {
    /// Builds a plan and checks the variant invariants against `num_nodes`.
    pub fn new(
        variant: Variant,
        factors: Vec<usize>,
        ports_per_step: Vec<usize>,
        num_nodes: usize,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::invalid("node count must be positive"));
        }
        if factors.len() != ports_per_step.len() {
            return Err(Error::invalid("one port count per factor required"));
        }
        for (&f, &ports) in factors.iter().zip(&ports_per_step) {
            if f < 2 {
                return Err(Error::invalid(format!("factor {f} below 2")));
            }
            if ports < 1 || ports > f - 1 {
                return Err(Error::invalid(format!(
                    "ports {ports} outside [1, {}] for factor {f}",
                    f - 1
                )));
            }
        }
        let product: u128 = factors.iter().map(|&f| f as u128).product();
        match variant {
            Variant::RecursiveMultiply => {
                if product != num_nodes as u128 {
                    return Err(Error::invalid(format!(
                        "recursive multiply factors multiply to {product}, expected {num_nodes}"
                    )));
                }
            }
            Variant::CyclicShift => {
                if product < num_nodes as u128 {
                    return Err(Error::invalid(format!(
                        "cyclic shift factors multiply to {product} < {num_nodes}"
                    )));
                }
                if let Some(&last) = factors.last() {
                    if product / last as u128 >= num_nodes as u128 {
                        return Err(Error::invalid(
                            "last cyclic shift factor is redundant (coverage reached earlier)",
                        ));
                    }
                }
            }
        }
        Ok(FactorPlan {
            variant,
            factors,
            ports_per_step,
        })
    }

    /// Plan with the maximum port count `f - 1` for every step.
    pub fn with_full_ports(
        variant: Variant,
        factors: Vec<usize>,
        num_nodes: usize,
    ) -> Result<Self> {
        let ports = factors.iter().map(|&f| f - 1).collect();
        Self::new(variant, factors, ports, num_nodes)
    }

    /// Plan with per-step ports capped at `max_ports` (e.g. the core count).
    pub fn with_ports_capped(
        variant: Variant,
        factors: Vec<usize>,
        num_nodes: usize,
        max_ports: usize,
    ) -> Result<Self> {
        if max_ports == 0 {
            return Err(Error::invalid("port cap must be positive"));
        }
        let ports = factors.iter().map(|&f| (f - 1).min(max_ports)).collect();
        Self::new(variant, factors, ports, num_nodes)
    }

    /// Single-step trivial plan for one node.
    pub fn empty(variant: Variant) -> Self {
        FactorPlan {
            variant,
            factors: Vec::new(),
            ports_per_step: Vec::new(),
        }
    }

    /// Record of a grouped allreduce pipeline: per-group span caps make the
    /// flat factor product overshoot, so the plain cyclic shift coverage
    /// checks do not apply.
    pub(crate) fn pipeline_record(factors: Vec<usize>, ports_per_step: Vec<usize>) -> Self {
        FactorPlan {
            variant: Variant::CyclicShift,
            factors,
            ports_per_step,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn ports_per_step(&self) -> &[usize] {
        &self.ports_per_step
    }

    pub fn num_steps(&self) -> usize {
        self.factors.len()
    }

    pub fn max_ports(&self) -> usize {
        self.ports_per_step.iter().copied().max().unwrap_or(0)
    }
}

/// Prime factors of `p` in ascending order; `p = 1` gives an empty list.
pub fn prime_factorize(p: usize) -> Vec<usize> {
    let mut rest = p;
    let mut out = Vec::new();
    let mut d = 2;
    while d * d <= rest {
        while rest.is_multiple_of(d) {
            out.push(d);
            rest /= d;
        }
        d += 1;
    }
    if rest > 1 {
        out.push(rest);
    }
    out
}

/// Combines primes into factors bounded by `target`.
///
/// Rule: repeatedly seed a new factor with the largest remaining prime, then
/// multiply in the largest remaining primes that keep the factor at or below
/// `target`. All primes must already be at or below `target`; larger primes
/// take the multi-step route of [`steps_for_large_prime`].
pub fn greedy_combine(primes: &[usize], target: usize) -> Result<Vec<usize>> {
    if target < 2 {
        return Err(Error::invalid("target factor must be at least 2"));
    }
    if let Some(&p) = primes.iter().find(|&&p| p > target) {
        return Err(Error::invalid(format!(
            "prime {p} exceeds target factor {target}"
        )));
    }
    if primes.iter().any(|&p| p < 2) {
        return Err(Error::invalid("primes must be at least 2"));
    }
    let mut pool: Vec<usize> = primes.to_vec();
    pool.sort_unstable();
    let mut factors = Vec::new();
    while let Some(seed) = pool.pop() {
        let mut factor = seed;
        // largest-fill: scan remaining primes from the top
        let mut i = pool.len();
        while i > 0 {
            i -= 1;
            if factor * pool[i] <= target {
                factor *= pool.remove(i);
            }
        }
        factors.push(factor);
    }
    Ok(factors)
}

/// Multi-step cyclic shift fragment covering a prime larger than `target`:
/// the minimal number of steps of factor `target` whose span reaches `prime`.
pub fn steps_for_large_prime(prime: usize, target: usize) -> Result<FactorPlan> {
    if target < 2 {
        return Err(Error::invalid("target factor must be at least 2"));
    }
    if prime <= target {
        return Err(Error::invalid(format!(
            "prime {prime} fits below target {target}; use greedy_combine"
        )));
    }
    let mut steps = 0usize;
    let mut span = 1u128;
    while span < prime as u128 {
        span *= target as u128;
        steps += 1;
    }
    FactorPlan::with_full_ports(Variant::CyclicShift, vec![target; steps], prime)
}

/// All ordered compositions of `p` into factors in `[2, max_factor]`.
///
/// `p = 1` yields a single empty composition. Order matters: the per-step
/// message sizes grow from step to step, so cost is order-sensitive.
pub fn enumerate_factorizations(p: usize, max_factor: usize) -> Vec<Vec<usize>> {
    if p == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn recurse(
        rest: usize,
        max_factor: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if rest == 1 {
            out.push(current.clone());
            return;
        }
        for f in 2..=max_factor.min(rest) {
            if rest.is_multiple_of(f) {
                current.push(f);
                recurse(rest / f, max_factor, current, out);
                current.pop();
            }
        }
    }
    recurse(p, max_factor, &mut current, &mut out);
    out
}

/// One multiplicative group of the small-message allreduce pipeline.
///
/// `modulus` is the exact divisor of the node count the group realises;
/// `radix_steps` are the cyclic shift factors executed for it. Greedy factors
/// produce a single complete step; a prime above the target produces several
/// steps of the target factor with an incomplete span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineGroup {
    pub modulus: usize,
    pub radix_steps: Vec<usize>,
}

/// Factor pipeline for the prefix-scan allreduce: prime factorisation,
/// greedy combination up to `target`, multi-step handling of large primes.
/// Groups are ordered by descending modulus.
pub fn allreduce_pipeline(p: usize, target: usize) -> Result<Vec<PipelineGroup>> {
    if p == 0 {
        return Err(Error::invalid("node count must be positive"));
    }
    if target < 2 {
        return Err(Error::invalid("target factor must be at least 2"));
    }
    let primes = prime_factorize(p);
    let small: Vec<usize> = primes.iter().copied().filter(|&q| q <= target).collect();
    let large: Vec<usize> = primes.iter().copied().filter(|&q| q > target).collect();
    let mut groups: Vec<PipelineGroup> = greedy_combine(&small, target)?
        .into_iter()
        .map(|f| PipelineGroup {
            modulus: f,
            radix_steps: vec![f],
        })
        .collect();
    for q in large {
        let fragment = steps_for_large_prime(q, target)?;
        groups.push(PipelineGroup {
            modulus: q,
            radix_steps: fragment.factors().to_vec(),
        });
    }
    groups.sort_by_key(|g| std::cmp::Reverse(g.modulus));
    Ok(groups)
}
