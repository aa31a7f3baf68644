//! Nested monotone root solves for the inner minimization over pricing
//! vectors at fixed λ.
//!
//! Work happens in y = λ·dQ/dP. Inside a cell with group constant d, each
//! scenario's y solves Σ_{n∈group} v′ₙ(y) = −d − X̄(ω). The cell mass
//! Σ P(ω)·y(ω) decreases in d. Every agent puts the same mass z on a given
//! event, so the cell constants of an event follow from z, and the event
//! total Σ d is decreasing in z. The masses of all events add up to λ.

use std::cell::{Cell as StdCell, RefCell};

use crate::constraints::MeasureStructure;
use crate::error::{Error, Result};
use crate::market::MarketModel;
use crate::roots::{solve_monotone, Monotone, RootOptions, Search};
use crate::utility::UtilityProfile;

/// ln y range searched for scenario roots, i.e. y ∈ [1e-300, 1e300].
pub(crate) const LN_Y_MIN: f64 = -690.7755278982137;
pub(crate) const LN_Y_MAX: f64 = 690.7755278982137;
/// Range for group constants and totals, in wealth units.
const D_LIMIT: f64 = 1e15;
const STEP: f64 = 0.5;

#[derive(Debug, Clone)]
pub(crate) struct InnerSolution {
    pub lambda: f64,
    pub total: f64,
    /// ln y per cell, indexed like the cell's scenarios.
    pub t: Vec<Vec<f64>>,
}

pub(crate) struct Inner<'a> {
    pub model: &'a MarketModel,
    pub profile: &'a UtilityProfile,
    pub st: &'a MeasureStructure,
    opts: RootOptions,
    xbar: Vec<Vec<f64>>,
    ln_p: Vec<Vec<f64>>,
    evals: StdCell<usize>,
    warm_t: RefCell<Vec<Vec<f64>>>,
    warm_d: RefCell<Vec<f64>>,
    warm_s: RefCell<Vec<f64>>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl<'a> Inner<'a> {
    pub fn new(
        model: &'a MarketModel,
        profile: &'a UtilityProfile,
        st: &'a MeasureStructure,
        opts: RootOptions,
        guess: f64,
    ) -> Self {
        let x = model.endowments();
        let p = model.probs();
        let xbar = st
            .cells
            .iter()
            .map(|c| c.scenarios.iter().map(|&j| c.group.iter().map(|&n| x[(n, j)]).sum()).collect())
            .collect();
        let ln_p = st.cells.iter().map(|c| c.scenarios.iter().map(|&j| p[j].ln()).collect()).collect();
        let warm_t = st.cells.iter().map(|c| vec![guess; c.scenarios.len()]).collect();
        Self {
            model,
            profile,
            st,
            opts,
            xbar,
            ln_p,
            evals: StdCell::new(0),
            warm_t: RefCell::new(warm_t),
            warm_d: RefCell::new(vec![guess; st.cells.len()]),
            warm_s: RefCell::new(vec![guess; st.events.len()]),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evals.get()
    }

    /// Σ_{n∈group} v′ₙ(y) for cell `ci`.
    pub fn group_vprime(&self, ci: usize, y: f64) -> f64 {
        self.st.cells[ci].group.iter().map(|&n| self.profile.agent(n).v_prime_unchecked(y)).sum()
    }

    /// ln y at the k-th scenario of cell `ci` for group constant `d`.
    pub fn scenario_t(&self, ci: usize, k: usize, d: f64) -> Result<f64> {
        let target = -d - self.xbar[ci][k];
        let start = self.warm_t.borrow()[ci][k];
        let f = |t: f64| {
            self.evals.set(self.evals.get() + 1);
            Ok(self.group_vprime(ci, t.exp()) - target)
        };
        let search = Search { start, step: STEP, lower: LN_Y_MIN, upper: LN_Y_MAX };
        let (t, _) = solve_monotone(f, Monotone::Increasing, search, &self.opts, "scenario density")?;
        self.warm_t.borrow_mut()[ci][k] = t;
        Ok(t)
    }

    pub fn cell_ts(&self, ci: usize, d: f64) -> Result<Vec<f64>> {
        (0..self.xbar[ci].len()).map(|k| self.scenario_t(ci, k, d)).collect()
    }

    /// ln Σ_{ω∈event} P(ω)·y(ω) for group constant `d`.
    pub fn cell_log_mass(&self, ci: usize, d: f64) -> Result<f64> {
        let ts = self.cell_ts(ci, d)?;
        Ok(log_sum_exp(ts.iter().zip(&self.ln_p[ci]).map(|(t, lp)| t + lp)))
    }

    /// Group constant d with cell mass e^{ln_z}.
    pub fn cell_constant(&self, ci: usize, ln_z: f64) -> Result<f64> {
        let start = self.warm_d.borrow()[ci];
        let f = |d: f64| Ok(self.cell_log_mass(ci, d)? - ln_z);
        let search = Search { start, step: STEP, lower: -D_LIMIT, upper: D_LIMIT };
        let (d, _) = solve_monotone(f, Monotone::Decreasing, search, &self.opts, "cell constant")?;
        self.warm_d.borrow_mut()[ci] = d;
        Ok(d)
    }

    /// Σ of the cell constants of `event` when each agent puts mass e^{ln_z} on it.
    pub fn event_total(&self, event: usize, ln_z: f64) -> Result<f64> {
        self.st.event_cells(event).map(|ci| self.cell_constant(ci, ln_z)).sum()
    }

    /// ln z for which the event total equals `total`.
    pub fn event_log_mass(&self, event: usize, total: f64) -> Result<f64> {
        let start = self.warm_s.borrow()[event];
        let f = |s: f64| Ok(self.event_total(event, s)? - total);
        let search = Search { start, step: STEP, lower: LN_Y_MIN, upper: LN_Y_MAX };
        let (s, _) = match solve_monotone(f, Monotone::Decreasing, search, &self.opts, "event mass") {
            Err(Error::Bracket(msg)) => {
                // a root left of the search range means λ → 0
                return Err(match self.event_total(event, start) {
                    Ok(v) if v < total => Error::Boundary(msg),
                    _ => Error::Bracket(msg),
                });
            }
            r => r?,
        };
        self.warm_s.borrow_mut()[event] = s;
        Ok(s)
    }

    fn collect(&self, ln_z: Vec<f64>, total: f64) -> Result<InnerSolution> {
        let mut t = Vec::with_capacity(self.st.cells.len());
        for (ci, c) in self.st.cells.iter().enumerate() {
            let dc = self.cell_constant(ci, ln_z[c.event])?;
            t.push(self.cell_ts(ci, dc)?);
        }
        let lambda = log_sum_exp(ln_z.iter().copied()).exp();
        Ok(InnerSolution { lambda, total, t })
    }

    /// Inner optimum on the curve where the total exchange equals `total`.
    pub fn at_total(&self, total: f64) -> Result<InnerSolution> {
        let ln_z = (0..self.st.num_events()).map(|i| self.event_log_mass(i, total)).collect::<Result<Vec<_>>>()?;
        self.collect(ln_z, total)
    }

    /// Inner optimum at a given λ.
    pub fn at_lambda(&self, lambda: f64) -> Result<InnerSolution> {
        let ln_l = lambda.ln();
        if self.st.num_events() == 1 {
            let total = self.event_total(0, ln_l)?;
            return self.collect(vec![ln_l], total);
        }
        let f = |total: f64| {
            let s = (0..self.st.num_events()).map(|i| self.event_log_mass(i, total)).collect::<Result<Vec<_>>>()?;
            Ok(log_sum_exp(s.into_iter()) - ln_l)
        };
        let search = Search { start: 0.0, step: STEP, lower: -D_LIMIT, upper: D_LIMIT };
        let (total, _) = solve_monotone(f, Monotone::Decreasing, search, &self.opts, "total exchange")?;
        let ln_z = (0..self.st.num_events()).map(|i| self.event_log_mass(i, total)).collect::<Result<Vec<_>>>()?;
        // event masses sum to λ up to the root tolerance; rescale exactly
        let shift = ln_l - log_sum_exp(ln_z.iter().copied());
        let ln_z: Vec<f64> = ln_z.into_iter().map(|s| s + shift).collect();
        self.collect(ln_z, total)
    }

    /// Per-agent y = λ·dQ/dP as an N×S table of logarithms.
    pub fn agent_log_y(&self, sol: &InnerSolution) -> Vec<Vec<f64>> {
        let n = self.model.num_agents();
        let mut out = vec![vec![0.0; self.model.num_scenarios()]; n];
        for (c, ts) in self.st.cells.iter().zip(&sol.t) {
            for &agent in &c.group {
                for (&j, &t) in c.scenarios.iter().zip(ts) {
                    out[agent][j] = t;
                }
            }
        }
        out
    }
}
