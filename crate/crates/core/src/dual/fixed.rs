//! Optimal allocations when the pricing vector is fixed in advance.

use nalgebra::DMatrix;

use super::inner::{LN_Y_MAX, LN_Y_MIN};
use super::{budgets, systemic_utility, SolverOptions};
use crate::error::{Error, Result};
use crate::market::{MarketModel, PricingVector, ProbMeasure};
use crate::roots::{solve_monotone, Monotone, Search};
use crate::utility::{AgentUtility, UtilityProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct QOptimal {
    pub y: DMatrix<f64>,
    pub a: Vec<f64>,
    pub lambda: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOptimum {
    pub y: Vec<f64>,
    pub lambda: f64,
    pub value: f64,
}

fn check_positive(pricing: &PricingVector) -> Result<()> {
    let m = pricing.min_density();
    if m > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("pricing densities must be positive, minimum is {m}")))
    }
}

/// Single agent: maximize E[u(X + Y)] subject to E_Q[Y] = budget.
/// The optimizer is Y = −X − v′(λ dQ/dP) with λ set by the budget.
pub fn agent_q_optimal(
    model: &MarketModel,
    agent: usize,
    utility: &AgentUtility,
    measure: &ProbMeasure,
    budget: f64,
    opts: &SolverOptions,
) -> Result<AgentOptimum> {
    if agent >= model.num_agents() {
        return Err(Error::Index { index: agent, len: model.num_agents() });
    }
    let q = measure.density();
    if q.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Domain("pricing density must be positive".into()));
    }
    let x: Vec<f64> = model.endowments().row(agent).iter().copied().collect();
    let p = model.probs();
    let ln_q: Vec<f64> = q.iter().map(|d| d.ln()).collect();
    let spend = |s: f64| -> Result<f64> {
        Ok((0..x.len()).map(|j| p[j] * q[j] * (-x[j] - utility.v_prime_unchecked((s + ln_q[j]).exp()))).sum::<f64>()
            - budget)
    };
    let search = Search { start: opts.initial_guess, step: 0.5, lower: LN_Y_MIN, upper: LN_Y_MAX };
    let (s, _) = solve_monotone(spend, Monotone::Decreasing, search, &opts.root, "agent multiplier")?;
    let y: Vec<f64> = (0..x.len()).map(|j| -x[j] - utility.v_prime_unchecked((s + ln_q[j]).exp())).collect();
    let value = model.mean((0..x.len()).map(|j| utility.u(x[j] + y[j])));
    Ok(AgentOptimum { y, lambda: s.exp(), value })
}

/// Q-optimal allocation with total budget A: one multiplier λ shared by all
/// agents, with Σₙ E_{Qⁿ}[Yⁿ] = A.
pub fn solve_q_optimal(
    model: &MarketModel,
    profile: &UtilityProfile,
    pricing: &PricingVector,
    total: f64,
    opts: &SolverOptions,
) -> Result<QOptimal> {
    profile.check_len(model.num_agents())?;
    if pricing.len() != model.num_agents() {
        return Err(Error::Dimension { expected: model.num_agents(), got: pricing.len() });
    }
    check_positive(pricing)?;
    let (n, s) = (model.num_agents(), model.num_scenarios());
    let x = model.endowments();
    let p = model.probs();
    let alloc = |ln_l: f64| {
        DMatrix::from_fn(n, s, |i, j| {
            let q = pricing.density(i)[j];
            -x[(i, j)] - profile.agent(i).v_prime_unchecked((ln_l + q.ln()).exp())
        })
    };
    let spend = |ln_l: f64| -> Result<f64> {
        let y = alloc(ln_l);
        Ok((0..n).map(|i| (0..s).map(|j| p[j] * pricing.density(i)[j] * y[(i, j)]).sum::<f64>()).sum::<f64>() - total)
    };
    let search = Search { start: opts.initial_guess, step: 0.5, lower: LN_Y_MIN, upper: LN_Y_MAX };
    let (ln_l, _) = solve_monotone(spend, Monotone::Decreasing, search, &opts.root, "budget multiplier")?;
    let y = alloc(ln_l);
    let a = budgets(model, pricing, &y)?;
    let value = systemic_utility(model, profile, &y);
    Ok(QOptimal { y, a, lambda: ln_l.exp(), value })
}
