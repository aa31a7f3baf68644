//! Admissible allocation families and the pricing-measure structure they
//! induce.
//!
//! Every shipped family is a scenario-dependent clustering: the scenarios
//! are split into events, and on each event the agents are split into
//! groups whose summed exchanges must be deterministic there. The total
//! exchange must be one constant across all scenarios. Full sharing, no
//! sharing and plain clusters are the single-event cases, and are stored in
//! that canonical form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{MarketModel, PricingVector, ProbMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Full,
    None,
    Cluster,
    ScenarioCluster,
}

/// A canonical constraint family. Agent and scenario indices are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    kind: Kind,
    num_agents: usize,
    /// Empty for the single-event families, meaning "all scenarios".
    events: Vec<Vec<usize>>,
    /// One agent partition per event (exactly one when `events` is empty).
    partitions: Vec<Vec<Vec<usize>>>,
}

fn canonical_partition(groups: &[Vec<usize>], n: usize) -> Result<Vec<Vec<usize>>> {
    let mut seen = vec![false; n];
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        if g.is_empty() {
            return Err(Error::Validation("empty agent group".into()));
        }
        let mut g = g.clone();
        g.sort_unstable();
        for &i in &g {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            if seen[i] {
                return Err(Error::Validation(format!("agent {i} appears in two groups")));
            }
            seen[i] = true;
        }
        out.push(g);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Validation(format!("agent {missing} is in no group")));
    }
    out.sort_by_key(|g| g[0]);
    Ok(out)
}

impl ConstraintSpec {
    /// 𝔹 = 𝒞_ℝ: only the total exchange must be deterministic.
    pub fn full(num_agents: usize) -> Self {
        Self { kind: Kind::Full, num_agents, events: Vec::new(), partitions: vec![vec![(0..num_agents).collect()]] }
    }

    /// 𝔹 = ℝᴺ: every exchange is deterministic.
    pub fn no_sharing(num_agents: usize) -> Self {
        Self {
            kind: if num_agents == 1 { Kind::Full } else { Kind::None },
            num_agents,
            events: Vec::new(),
            partitions: vec![(0..num_agents).map(|i| vec![i]).collect()],
        }
    }

    pub fn cluster(groups: &[Vec<usize>], num_agents: usize) -> Result<Self> {
        let p = canonical_partition(groups, num_agents)?;
        let kind = if p.len() == 1 {
            Kind::Full
        } else if p.len() == num_agents {
            Kind::None
        } else {
            Kind::Cluster
        };
        Ok(Self { kind, num_agents, events: Vec::new(), partitions: vec![p] })
    }

    /// Scenario-dependent clustering. A single event reduces to [`Self::cluster`].
    pub fn scenario_cluster(
        events: &[Vec<usize>],
        partitions: &[Vec<Vec<usize>>],
        num_agents: usize,
        num_scenarios: usize,
    ) -> Result<Self> {
        if events.is_empty() || events.len() != partitions.len() {
            return Err(Error::Validation(format!(
                "{} events but {} agent partitions",
                events.len(),
                partitions.len()
            )));
        }
        let mut seen = vec![false; num_scenarios];
        let mut evs = Vec::with_capacity(events.len());
        for e in events {
            if e.is_empty() {
                return Err(Error::Validation("empty scenario event".into()));
            }
            let mut e = e.clone();
            e.sort_unstable();
            for &j in &e {
                if j >= num_scenarios {
                    return Err(Error::Validation(format!(
                        "scenario index {j} out of range for {num_scenarios} scenarios"
                    )));
                }
                if seen[j] {
                    return Err(Error::Validation(format!("scenario {j} appears in two events")));
                }
                seen[j] = true;
            }
            evs.push(e);
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("scenario {missing} is in no event")));
        }
        if evs.len() == 1 {
            return Self::cluster(&partitions[0], num_agents);
        }
        let parts = partitions.iter().map(|p| canonical_partition(p, num_agents)).collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..evs.len()).collect();
        order.sort_by_key(|&i| evs[i][0]);
        Ok(Self {
            kind: Kind::ScenarioCluster,
            num_agents,
            events: order.iter().map(|&i| evs[i].clone()).collect(),
            partitions: order.iter().map(|&i| parts[i].clone()).collect(),
        })
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    /// The agent partition when the spec has a single event.
    pub fn groups(&self) -> Option<&[Vec<usize>]> {
        if self.events.is_empty() {
            Some(&self.partitions[0])
        } else {
            None
        }
    }

    pub fn is_scenario_dependent(&self) -> bool {
        !self.events.is_empty()
    }

    pub fn check(&self, model: &MarketModel) -> Result<()> {
        if self.num_agents != model.num_agents() {
            return Err(Error::Dimension { expected: model.num_agents(), got: self.num_agents });
        }
        let s = model.num_scenarios();
        if let Some(&j) = self.events.iter().flatten().find(|&&j| j >= s) {
            return Err(Error::Validation(format!("scenario index {j} out of range for {s} scenarios")));
        }
        if !self.events.is_empty() && self.events.iter().map(Vec::len).sum::<usize>() != s {
            return Err(Error::Validation("events do not cover the scenario space".into()));
        }
        Ok(())
    }
}

/// Document form of a constraint family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_groups: Option<Vec<Vec<Vec<usize>>>>,
}

impl ConstraintBlock {
    pub fn to_spec(&self, num_agents: usize, num_scenarios: usize) -> Result<ConstraintSpec> {
        let need = |field: &str| Error::Schema(format!("variant '{}' needs '{field}'", self.variant));
        match self.variant.as_str() {
            "full" => Ok(ConstraintSpec::full(num_agents)),
            "none" => Ok(ConstraintSpec::no_sharing(num_agents)),
            "cluster" => ConstraintSpec::cluster(self.groups.as_ref().ok_or_else(|| need("groups"))?, num_agents),
            "scenario_cluster" => ConstraintSpec::scenario_cluster(
                self.events.as_ref().ok_or_else(|| need("events"))?,
                self.event_groups.as_ref().ok_or_else(|| need("event_groups"))?,
                num_agents,
                num_scenarios,
            ),
            "cone" | "polar" | "general" => Err(Error::Spec(format!(
                "general convex cones ('{}') are not supported; use full, none, cluster or scenario_cluster",
                self.variant
            ))),
            other => Err(Error::Schema(format!("unknown constraint variant '{other}'"))),
        }
    }

    pub fn from_spec(spec: &ConstraintSpec) -> Self {
        let mut b = Self { variant: String::new(), groups: None, events: None, event_groups: None };
        match spec.kind {
            Kind::Full => b.variant = "full".into(),
            Kind::None => b.variant = "none".into(),
            Kind::Cluster => {
                b.variant = "cluster".into();
                b.groups = Some(spec.partitions[0].clone());
            }
            Kind::ScenarioCluster => {
                b.variant = "scenario_cluster".into();
                b.events = Some(spec.events.clone());
                b.event_groups = Some(spec.partitions.clone());
            }
        }
        b
    }
}

/// One (event, group) pair. All agents of the group share one density on
/// the event's scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub event: usize,
    pub scenarios: Vec<usize>,
    pub group: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureStructure {
    pub cells: Vec<Cell>,
    pub events: Vec<Vec<usize>>,
    /// `agent_cell[event][agent]` is the index of the cell holding the agent.
    pub agent_cell: Vec<Vec<usize>>,
}

impl MeasureStructure {
    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    /// Cell indices belonging to one event.
    pub fn event_cells(&self, event: usize) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().enumerate().filter(move |(_, c)| c.event == event).map(|(i, _)| i)
    }
}

pub fn measure_structure(spec: &ConstraintSpec, num_scenarios: usize) -> MeasureStructure {
    let events =
        if spec.events.is_empty() { vec![(0..num_scenarios).collect::<Vec<_>>()] } else { spec.events.clone() };
    let mut cells = Vec::new();
    let mut agent_cell = Vec::with_capacity(events.len());
    for (i, (ev, part)) in events.iter().zip(&spec.partitions).enumerate() {
        let mut map = vec![0; spec.num_agents];
        for g in part {
            for &n in g {
                map[n] = cells.len();
            }
            cells.push(Cell { event: i, scenarios: ev.clone(), group: g.clone() });
        }
        agent_cell.push(map);
    }
    MeasureStructure { cells, events, agent_cell }
}

/// Result of [`membership`]. `group_sums` holds one constant per cell, in
/// the order of [`measure_structure`].
#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    pub is_member: bool,
    pub group_sums: Vec<f64>,
    pub max_deviation: f64,
}

/// Checks Y ∈ 𝔹: every cell's group sum is constant on its event and the
/// total is constant across all scenarios, each within `tol`.
pub fn membership(spec: &ConstraintSpec, y: &DMatrix<f64>, tol: f64) -> Result<Membership> {
    if y.nrows() != spec.num_agents {
        return Err(Error::Dimension { expected: spec.num_agents, got: y.nrows() });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("allocation has non-finite entries".into()));
    }
    let s = y.ncols();
    if let Some(&j) = spec.events.iter().flatten().find(|&&j| j >= s) {
        return Err(Error::Dimension { expected: j + 1, got: s });
    }
    let st = measure_structure(spec, s);
    let mut dev = 0f64;
    let mut sums = Vec::with_capacity(st.cells.len());
    for c in &st.cells {
        let vals: Vec<f64> = c.scenarios.iter().map(|&j| c.group.iter().map(|&n| y[(n, j)]).sum()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        dev = vals.iter().fold(dev, |d, v| d.max((v - mean).abs()));
        sums.push(mean);
    }
    let totals: Vec<f64> = (0..s).map(|j| y.column(j).sum()).collect();
    let tmean = totals.iter().sum::<f64>() / s.max(1) as f64;
    dev = totals.iter().fold(dev, |d, v| d.max((v - tmean).abs()));
    Ok(Membership { is_member: dev <= tol, group_sums: sums, max_deviation: dev })
}

/// Glues per-cell densities (indexed like `cell.scenarios`) into one
/// measure per agent.
pub fn assemble_pricing_vector(
    model: &MarketModel,
    structure: &MeasureStructure,
    cell_densities: &[Vec<f64>],
) -> Result<PricingVector> {
    if cell_densities.len() != structure.cells.len() {
        return Err(Error::Dimension { expected: structure.cells.len(), got: cell_densities.len() });
    }
    let n = model.num_agents();
    let mut dens = vec![vec![0.0; model.num_scenarios()]; n];
    for (c, d) in structure.cells.iter().zip(cell_densities) {
        if d.len() != c.scenarios.len() {
            return Err(Error::Dimension { expected: c.scenarios.len(), got: d.len() });
        }
        for &agent in &c.group {
            if agent >= n {
                return Err(Error::Index { index: agent, len: n });
            }
            for (&j, &q) in c.scenarios.iter().zip(d) {
                dens[agent][j] = q;
            }
        }
    }
    let measures = dens.into_iter().map(|d| ProbMeasure::new(model, d)).collect::<Result<_>>()?;
    Ok(PricingVector::new(measures))
}

/// Linear equalities C·vec(Y) = b describing 𝔹_A = {Y ∈ 𝔹 : Σ Yⁿ = A}.
/// `vec(Y)` is row-major: index n·S + ω.
pub fn linear_constraints(
    structure: &MeasureStructure,
    num_agents: usize,
    num_scenarios: usize,
    total: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let s = num_scenarios;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for c in &structure.cells {
        for w in c.scenarios.windows(2) {
            let mut r = vec![0.0; num_agents * s];
            for &n in &c.group {
                r[n * s + w[0]] = 1.0;
                r[n * s + w[1]] = -1.0;
            }
            rows.push(r);
            rhs.push(0.0);
        }
    }
    for j in 0..s {
        let mut r = vec![0.0; num_agents * s];
        for n in 0..num_agents {
            r[n * s + j] = 1.0;
        }
        rows.push(r);
        rhs.push(total);
    }
    let c = DMatrix::from_fn(rows.len(), num_agents * s, |i, k| rows[i][k]);
    (c, DVector::from_vec(rhs))
}

/// Random pricing vector in the admissible set: agents of a cell share a
/// positive density, and every agent puts the same mass on each event.
pub fn random_pricing<R: Rng + ?Sized>(
    model: &MarketModel,
    structure: &MeasureStructure,
    rng: &mut R,
) -> Result<PricingVector> {
    let p = model.probs();
    let raw: Vec<f64> = (0..structure.num_events()).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let densities: Vec<Vec<f64>> = structure
        .cells
        .iter()
        .map(|c| {
            let w: Vec<f64> = c.scenarios.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let mass: f64 = c.scenarios.iter().zip(&w).map(|(&j, x)| p[j] * x).sum();
            let target = raw[c.event] / total;
            w.iter().map(|x| x * target / mass).collect()
        })
        .collect();
    assemble_pricing_vector(model, structure, &densities)
}

/// Random element of 𝔹 with entries of order `scale`.
pub fn random_member<R: Rng + ?Sized>(
    structure: &MeasureStructure,
    num_agents: usize,
    num_scenarios: usize,
    scale: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(num_agents, num_scenarios);
    let total = rng.random_range(-scale..scale);
    for ev in 0..structure.num_events() {
        let cells: Vec<usize> = structure.event_cells(ev).collect();
        // group constants on this event, summing to the common total
        let mut consts: Vec<f64> = cells.iter().map(|_| rng.random_range(-scale..scale)).collect();
        let shift = (total - consts.iter().sum::<f64>()) / consts.len() as f64;
        consts.iter_mut().for_each(|c| *c += shift);
        for (&ci, &d) in cells.iter().zip(&consts) {
            let c = &structure.cells[ci];
            for &j in &c.scenarios {
                let mut vals: Vec<f64> = c.group.iter().map(|_| rng.random_range(-scale..scale)).collect();
                let fix = (d - vals.iter().sum::<f64>()) / vals.len() as f64;
                vals.iter_mut().for_each(|v| *v += fix);
                for (&n, v) in c.group.iter().zip(vals) {
                    y[(n, j)] = v;
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model4() -> MarketModel {
        MarketModel::from_parts(vec![0.25; 4], vec![vec![1.0, 0.0, -1.0, 2.0]; 4]).unwrap()
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(ConstraintSpec::cluster(&[vec![1, 0, 2]], 3).unwrap(), ConstraintSpec::full(3));
        assert_eq!(ConstraintSpec::cluster(&[vec![2], vec![0], vec![1]], 3).unwrap(), ConstraintSpec::no_sharing(3));
        let one_event = ConstraintSpec::scenario_cluster(&[vec![0, 1]], &[vec![vec![0, 1]]], 2, 2).unwrap();
        assert_eq!(one_event, ConstraintSpec::full(2));
        assert!(ConstraintSpec::cluster(&[vec![0], vec![0, 1]], 2).is_err());
        assert!(ConstraintSpec::cluster(&[vec![0]], 2).is_err());
        assert!(matches!(ConstraintSpec::cluster(&[vec![0, 5]], 2), Err(Error::Index { .. })));
    }

    #[test]
    fn cell_counts() {
        assert_eq!(measure_structure(&ConstraintSpec::full(4), 4).cells.len(), 1);
        let c = ConstraintSpec::cluster(&[vec![0, 1], vec![2, 3]], 4).unwrap();
        assert_eq!(measure_structure(&c, 4).cells.len(), 2);
        let sc = ConstraintSpec::scenario_cluster(
            &[vec![0, 1], vec![2, 3]],
            &[vec![vec![0, 1, 2, 3]], (0..4).map(|i| vec![i]).collect()],
            4,
            4,
        )
        .unwrap();
        assert_eq!(measure_structure(&sc, 4).cells.len(), 1 + 4);
    }

    #[test]
    fn membership_examples() {
        let y = DMatrix::from_row_slice(2, 2, &[-0.5, 0.5, 0.5, -0.5]);
        let m = membership(&ConstraintSpec::full(2), &y, 1e-9).unwrap();
        assert!(m.is_member);
        assert_eq!(m.group_sums, vec![0.0]);
        assert!(!membership(&ConstraintSpec::no_sharing(2), &y, 1e-9).unwrap().is_member);
        let c = DMatrix::from_row_slice(2, 2, &[3.0, 3.0, -1.0, -1.0]);
        assert!(membership(&ConstraintSpec::no_sharing(2), &c, 1e-9).unwrap().is_member);
        assert!(membership(&ConstraintSpec::full(3), &c, 1e-9).is_err());
    }

    #[test]
    fn assembling_cluster_densities() {
        let model = model4();
        let c = ConstraintSpec::cluster(&[vec![0, 1], vec![2, 3]], 4).unwrap();
        let st = measure_structure(&c, 4);
        let d1 = vec![0.5, 1.5, 1.0, 1.0];
        let d2 = vec![2.0, 0.5, 0.5, 1.0];
        let pv = assemble_pricing_vector(&model, &st, &[d1.clone(), d2.clone()]).unwrap();
        assert_eq!(pv.density(1), &d1[..]);
        assert_eq!(pv.density(3), &d2[..]);
        let bad = assemble_pricing_vector(&model, &st, &[vec![0.9; 4], d2]);
        assert!(matches!(bad, Err(Error::Normalization { .. })));
        let full = measure_structure(&ConstraintSpec::full(4), 4);
        let pv = assemble_pricing_vector(&model, &full, &[vec![1.0; 4]]).unwrap();
        assert_eq!(pv, PricingVector::reference(&model));
    }

    #[test]
    fn random_members_satisfy_constraints_and_fair_pricing() {
        let model = model4();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sc = ConstraintSpec::scenario_cluster(
            &[vec![0, 3], vec![1, 2]],
            &[vec![vec![0, 1], vec![2, 3]], vec![vec![0], vec![1, 2, 3]]],
            4,
            4,
        )
        .unwrap();
        for spec in [ConstraintSpec::full(4), ConstraintSpec::no_sharing(4), sc] {
            let st = measure_structure(&spec, 4);
            for _ in 0..20 {
                let y = random_member(&st, 4, 4, 2.0, &mut rng);
                let m = membership(&spec, &y, 1e-12).unwrap();
                assert!(m.is_member);
                let total = y.column(0).sum();
                let (cm, b) = linear_constraints(&st, 4, 4, total);
                let flat = DVector::from_iterator(16, y.transpose().iter().copied());
                let resid = &cm * flat - b;
                assert!(resid.amax() < 1e-12);
                let q = random_pricing(&model, &st, &mut rng).unwrap();
                let priced: f64 = (0..4)
                    .map(|n| {
                        crate::market::expectation(&model, q.measure(n), &y.row(n).iter().copied().collect::<Vec<_>>())
                            .unwrap()
                    })
                    .sum();
                assert!((priced - total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_round_trip() {
        let b: ConstraintBlock = serde_json::from_str(r#"{"variant":"cluster","groups":[[0,1],[2]]}"#).unwrap();
        let spec = b.to_spec(3, 2).unwrap();
        assert_eq!(spec.kind(), Kind::Cluster);
        assert_eq!(ConstraintBlock::from_spec(&spec).to_spec(3, 2).unwrap(), spec);
        let cone = ConstraintBlock { variant: "cone".into(), groups: None, events: None, event_groups: None };
        assert!(matches!(cone.to_spec(3, 2), Err(Error::Spec(_))));
        let missing = ConstraintBlock { variant: "cluster".into(), groups: None, events: None, event_groups: None };
        assert!(matches!(missing.to_spec(3, 2), Err(Error::Schema(_))));
    }
}
