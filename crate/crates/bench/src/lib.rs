//! Shared workloads for the benchmarks.

use susmap_core::evaluate::{BenchmarkConfig, ScenarioSpec};
use susmap_core::simulate::{simulate, SimScenario};
use susmap_core::spatial::pairwise_distances;
use susmap_core::{DistanceMatrix, OutbreakPanel, SusceptibilityField};

pub struct Workload {
    pub scenario: SimScenario,
    pub d: DistanceMatrix,
    pub panel: OutbreakPanel,
    pub beta: SusceptibilityField,
}

/// One replicate of the benchmark design with `n` units and `t` steps, GP
/// range 400 km.
pub fn workload(n: usize, t: usize) -> Workload {
    let cfg = BenchmarkConfig { n_units: n, n_times: t, ..BenchmarkConfig::default() };
    let scenario = cfg.scenario(&ScenarioSpec::gp(400.0), 0).expect("valid scenario");
    let (beta, panel) = simulate(&scenario).expect("simulation runs");
    let d = pairwise_distances(&scenario.units).expect("distances");
    Workload { scenario, d, panel, beta }
}
