//! Finite scenario space, endowments and probability measures.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintBlock;
use crate::error::{Error, Result};
use crate::utility::UtilityBlock;

/// Tolerance on Σ P(ω) = 1.
pub const PROB_SUM_TOL: f64 = 1e-12;
/// Tolerance on Σ P(ω)·dQ/dP(ω) = 1.
pub const DENSITY_NORM_TOL: f64 = 1e-9;

/// JSON scenario document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub agents: Vec<String>,
    pub scenarios: Vec<String>,
    pub probs: Vec<f64>,
    pub endowments: Vec<Vec<f64>>,
    pub utility: UtilityBlock,
    pub constraints: ConstraintBlock,
    #[serde(rename = "budget_A", default)]
    pub budget_a: f64,
}

impl ScenarioDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario document serializes")
    }
}

/// Ω = {ω₁..ω_S} with P(ω) > 0 and the N×S endowment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    agent_ids: Vec<String>,
    scenario_ids: Vec<String>,
    probs: Vec<f64>,
    endowments: DMatrix<f64>,
}

impl MarketModel {
    pub fn new(
        agent_ids: Vec<String>,
        scenario_ids: Vec<String>,
        probs: Vec<f64>,
        endowments: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = agent_ids.len();
        let s = scenario_ids.len();
        if n == 0 {
            return Err(Error::Validation("at least one agent is required".into()));
        }
        if s == 0 {
            return Err(Error::Validation("at least one scenario is required".into()));
        }
        if probs.len() != s {
            return Err(Error::Validation(format!("{} probabilities for {} scenarios", probs.len(), s)));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p <= 0.0) {
            return Err(Error::Validation(format!("scenario {} has nonpositive probability {p}", scenario_ids[i])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Validation(format!("probabilities sum to {total}, not 1")));
        }
        if endowments.len() != n {
            return Err(Error::Validation(format!("endowment matrix has {} rows for {} agents", endowments.len(), n)));
        }
        for (row, id) in endowments.iter().zip(&agent_ids) {
            if row.len() != s {
                return Err(Error::Validation(format!(
                    "endowment row of {id} has {} entries, expected {s}",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("endowment row of {id} has non-finite entries")));
            }
        }
        let endowments = DMatrix::from_fn(n, s, |i, j| endowments[i][j]);
        Ok(Self { agent_ids, scenario_ids, probs, endowments })
    }

    /// Unlabelled constructor used by generators and tests.
    pub fn from_parts(probs: Vec<f64>, endowments: Vec<Vec<f64>>) -> Result<Self> {
        let agents = (1..=endowments.len()).map(|i| format!("agent{i}")).collect();
        let scenarios = (1..=probs.len()).map(|j| format!("w{j}")).collect();
        Self::new(agents, scenarios, probs, endowments)
    }

    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn num_scenarios(&self) -> usize {
        self.scenario_ids.len()
    }

    pub fn agent_ids(&self) -> &[String] {
        &self.agent_ids
    }

    pub fn scenario_ids(&self) -> &[String] {
        &self.scenario_ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn endowments(&self) -> &DMatrix<f64> {
        &self.endowments
    }

    pub fn endowment(&self, agent: usize, scenario: usize) -> f64 {
        self.endowments[(agent, scenario)]
    }

    /// Same scenario space, different endowments.
    pub fn with_endowments(&self, endowments: DMatrix<f64>) -> Result<Self> {
        if endowments.shape() != self.endowments.shape() {
            return Err(Error::Dimension { expected: self.endowments.len(), got: endowments.len() });
        }
        Ok(Self { endowments, ..self.clone() })
    }

    /// P-expectation of a scenario vector.
    pub fn mean(&self, rv: impl IntoIterator<Item = f64>) -> f64 {
        self.probs.iter().zip(rv).map(|(p, x)| p * x).sum()
    }
}

pub fn load_market(doc: &ScenarioDocument) -> Result<MarketModel> {
    MarketModel::new(doc.agents.clone(), doc.scenarios.clone(), doc.probs.clone(), doc.endowments.clone())
}

/// A probability measure Q ≪ P given by its density dQ/dP.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMeasure {
    density: Vec<f64>,
}

impl ProbMeasure {
    pub fn new(model: &MarketModel, density: Vec<f64>) -> Result<Self> {
        if density.len() != model.num_scenarios() {
            return Err(Error::Dimension { expected: model.num_scenarios(), got: density.len() });
        }
        if density.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Domain("densities must be finite and nonnegative".into()));
        }
        let mass = model.mean(density.iter().copied());
        if (mass - 1.0).abs() > DENSITY_NORM_TOL {
            return Err(Error::Normalization { mass });
        }
        Ok(Self { density })
    }

    /// The reference measure P itself.
    pub fn reference(model: &MarketModel) -> Self {
        Self { density: vec![1.0; model.num_scenarios()] }
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn is_equivalent(&self) -> bool {
        self.density.iter().all(|d| *d > 0.0)
    }
}

/// One pricing measure per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PricingVector {
    measures: Vec<ProbMeasure>,
}

impl PricingVector {
    pub fn new(measures: Vec<ProbMeasure>) -> Self {
        Self { measures }
    }

    pub fn from_densities(model: &MarketModel, densities: Vec<Vec<f64>>) -> Result<Self> {
        if densities.len() != model.num_agents() {
            return Err(Error::Dimension { expected: model.num_agents(), got: densities.len() });
        }
        let measures = densities.into_iter().map(|d| ProbMeasure::new(model, d)).collect::<Result<_>>()?;
        Ok(Self { measures })
    }

    /// (P, …, P).
    pub fn reference(model: &MarketModel) -> Self {
        Self { measures: vec![ProbMeasure::reference(model); model.num_agents()] }
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    pub fn measure(&self, agent: usize) -> &ProbMeasure {
        &self.measures[agent]
    }

    pub fn density(&self, agent: usize) -> &[f64] {
        self.measures[agent].density()
    }

    pub fn measures(&self) -> &[ProbMeasure] {
        &self.measures
    }

    pub fn min_density(&self) -> f64 {
        self.measures.iter().flat_map(|m| m.density.iter().copied()).fold(f64::INFINITY, f64::min)
    }

    pub fn densities_matrix(&self) -> DMatrix<f64> {
        let n = self.measures.len();
        let s = self.measures.first().map_or(0, |m| m.density.len());
        DMatrix::from_fn(n, s, |i, j| self.measures[i].density[j])
    }
}

/// E_Q[rv] = Σ P(ω)·dQ/dP(ω)·rv(ω).
pub fn expectation(model: &MarketModel, measure: &ProbMeasure, rv: &[f64]) -> Result<f64> {
    if rv.len() != model.num_scenarios() {
        return Err(Error::Dimension { expected: model.num_scenarios(), got: rv.len() });
    }
    Ok(model.probs.iter().zip(&measure.density).zip(rv).map(|((p, d), x)| p * d * x).sum())
}

/// H(Q, P) = E[dQ/dP · ln dQ/dP], with 0·ln 0 = 0.
pub fn relative_entropy(model: &MarketModel, measure: &ProbMeasure) -> f64 {
    model.probs.iter().zip(&measure.density).map(|(p, d)| if *d > 0.0 { p * d * d.ln() } else { 0.0 }).sum()
}

/// Scenario-wise sum of the endowments of the agents in `group`.
pub fn group_aggregate(model: &MarketModel, group: &[usize]) -> Result<Vec<f64>> {
    if group.is_empty() {
        return Err(Error::Validation("empty agent group".into()));
    }
    let n = model.num_agents();
    if let Some(&bad) = group.iter().find(|&&i| i >= n) {
        return Err(Error::Index { index: bad, len: n });
    }
    Ok((0..model.num_scenarios()).map(|j| group.iter().map(|&i| model.endowments[(i, j)]).sum()).collect())
}

/// Writes labelled rows of scenario vectors as CSV with a scenario header.
pub fn write_rows_csv<W: Write>(
    out: W,
    model: &MarketModel,
    row_header: &str,
    rows: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![row_header.to_string()];
    header.extend(model.scenario_ids.iter().cloned());
    w.write_record(&header)?;
    for (label, values) in rows {
        if values.len() != model.num_scenarios() {
            return Err(Error::Dimension { expected: model.num_scenarios(), got: values.len() });
        }
        let mut record = vec![label.clone()];
        record.extend(values.iter().map(|v| format!("{v:.12e}")));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// N×S matrix as CSV, one row per agent.
pub fn write_matrix_csv<W: Write>(out: W, model: &MarketModel, m: &DMatrix<f64>) -> Result<()> {
    let rows: Vec<_> = (0..m.nrows())
        .map(|i| {
            let label = model.agent_ids.get(i).cloned().unwrap_or_else(|| i.to_string());
            (label, m.row(i).iter().copied().collect())
        })
        .collect();
    write_rows_csv(out, model, "agent", &rows)
}
