//! Shared fixtures for the benchmarks.

use pfmech::data::gen_truthful;
use pfmech::ProblemInstance;

/// Truthful instances with every agent given some demand, so each solve
/// exercises the full interior-point path.
pub fn fixtures(n: usize, m: usize, count: usize, seed: u64) -> Vec<ProblemInstance> {
    gen_truthful(n, m, 4 * count + 16, seed)
        .expect("valid shape")
        .instances
        .into_iter()
        .filter(|i| (0..n).all(|a| i.agent_has_demand(a)))
        .take(count)
        .collect()
}
