//! Seeded random problem instances for fuzzing and benchmarks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::constraints::ConstraintSpec;
use crate::market::MarketModel;

#[derive(Debug, Clone, Copy)]
pub struct Ranges {
    pub max_agents: usize,
    pub max_scenarios: usize,
    pub alpha: (f64, f64),
    pub endowment: (f64, f64),
    pub total: (f64, f64),
}

impl Default for Ranges {
    fn default() -> Self {
        Self { max_agents: 5, max_scenarios: 8, alpha: (0.2, 5.0), endowment: (-3.0, 3.0), total: (-2.0, 2.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecFamily {
    /// Full sharing, no sharing or a random agent partition.
    Cluster,
    /// Two or more scenario events with their own partitions.
    ScenarioCluster,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub model: MarketModel,
    pub alphas: Vec<f64>,
    pub spec: ConstraintSpec,
    pub total: f64,
}

pub fn random_probs<R: Rng + ?Sized>(s: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..s).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = w.iter().sum();
    let mut p: Vec<f64> = w.iter().map(|x| x / sum).collect();
    let head: f64 = p[..s - 1].iter().sum();
    p[s - 1] = 1.0 - head;
    p
}

/// Random partition of `0..n`, chosen to hit full and no sharing often.
pub fn random_partition<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    match rng.random_range(0..4) {
        0 => vec![(0..n).collect()],
        1 => (0..n).map(|i| vec![i]).collect(),
        _ => {
            let k = rng.random_range(1..=n);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut groups = vec![Vec::new(); k];
            for (i, &agent) in order.iter().enumerate() {
                let g = if i < k { i } else { rng.random_range(0..k) };
                groups[g].push(agent);
            }
            groups
        }
    }
}

pub fn random_spec<R: Rng + ?Sized>(n: usize, s: usize, family: SpecFamily, rng: &mut R) -> ConstraintSpec {
    match family {
        SpecFamily::Cluster => ConstraintSpec::cluster(&random_partition(n, rng), n).expect("valid partition"),
        SpecFamily::ScenarioCluster => {
            let k = rng.random_range(2..=s.max(2)).min(s);
            let mut order: Vec<usize> = (0..s).collect();
            order.shuffle(rng);
            let mut events = vec![Vec::new(); k];
            for (i, &j) in order.iter().enumerate() {
                let e = if i < k { i } else { rng.random_range(0..k) };
                events[e].push(j);
            }
            let parts: Vec<_> = (0..k).map(|_| random_partition(n, rng)).collect();
            ConstraintSpec::scenario_cluster(&events, &parts, n, s).expect("valid clustering")
        }
    }
}

/// Instance with `n` agents and `s` scenarios.
pub fn sized_instance<R: Rng + ?Sized>(
    n: usize,
    s: usize,
    family: SpecFamily,
    ranges: &Ranges,
    rng: &mut R,
) -> Instance {
    let probs = random_probs(s, rng);
    let x: Vec<Vec<f64>> =
        (0..n).map(|_| (0..s).map(|_| rng.random_range(ranges.endowment.0..=ranges.endowment.1)).collect()).collect();
    let alphas = (0..n).map(|_| rng.random_range(ranges.alpha.0..=ranges.alpha.1)).collect();
    let spec = random_spec(n, s, family, rng);
    let total = rng.random_range(ranges.total.0..=ranges.total.1);
    Instance { model: MarketModel::from_parts(probs, x).expect("valid model"), alphas, spec, total }
}

/// Instance with random size within `ranges`. Scenario clusters need at
/// least two scenarios.
pub fn random_instance<R: Rng + ?Sized>(family: SpecFamily, ranges: &Ranges, rng: &mut R) -> Instance {
    let n = rng.random_range(1..=ranges.max_agents);
    let min_s = if family == SpecFamily::ScenarioCluster { 2 } else { 1 };
    let s = rng.random_range(min_s..=ranges.max_scenarios.max(min_s));
    sized_instance(n, s, family, ranges, rng)
}
