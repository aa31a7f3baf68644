//! Dual solver: minimize
//! K(λ, Q) = λ(Σ E_{Qⁿ}[Xⁿ] + A) + Σ E[vₙ(λ dQⁿ/dP)]
//! over λ > 0 and admissible pricing vectors, then recover the allocation
//! Ŷⁿ = −Xⁿ − v′ₙ(λ̂ dQ̂ⁿ/dP).

mod fixed;
mod inner;
mod oracle;

pub use fixed::{agent_q_optimal, solve_q_optimal, AgentOptimum, QOptimal};
pub(crate) use oracle::affine_frame;
pub use oracle::{brute_force_primal, BruteForce, BruteForceOptions, MAX_ORACLE_SIZE};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::constraints::{measure_structure, Cell, ConstraintSpec, MeasureStructure};
use crate::error::{Error, Result};
use crate::market::{expectation, MarketModel, PricingVector, ProbMeasure};
use crate::roots::RootOptions;
use crate::utility::UtilityProfile;

use inner::{Inner, InnerSolution};

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub root: RootOptions,
    /// λ below this is reported as a boundary optimum.
    pub lambda_lower: f64,
    /// Densities at or below this mark Q̂ as not equivalent to P.
    pub density_floor: f64,
    /// Warm start for the inner roots (ln y, group constants, ln masses).
    pub initial_guess: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { root: RootOptions::default(), lambda_lower: 1e-12, density_floor: 1e-14, initial_guess: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub lambda: f64,
    pub pricing: PricingVector,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub root_evaluations: usize,
    /// max_ω |Σₙ Ŷⁿ(ω) − A|
    pub clearing_residual: f64,
    /// |Σₙ âₙ − A|
    pub budget_residual: f64,
    /// max |u′ₙ(Xⁿ+Ŷⁿ)/(λ̂ dQ̂ⁿ/dP) − 1|
    pub foc_residual: f64,
    /// dual value − primal value
    pub gap: f64,
    /// dψ/dλ at λ̂, i.e. A − Σₙ E_{Q̂ⁿ}[Ŷⁿ]
    pub stationarity: f64,
    pub min_density: f64,
    pub equivalent: bool,
    /// Largest ratio of d v′/d ln y over the y range used, per agent.
    pub vprime_conditioning: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub y: DMatrix<f64>,
    pub pricing: PricingVector,
    pub a: Vec<f64>,
    pub lambda: f64,
    pub primal_value: f64,
    pub dual_value: f64,
    pub diagnostics: Diagnostics,
}

/// Σₙ E[uₙ(Xⁿ + Yⁿ)].
pub fn systemic_utility(model: &MarketModel, profile: &UtilityProfile, y: &DMatrix<f64>) -> f64 {
    let x = model.endowments();
    (0..model.num_agents())
        .map(|n| {
            let u = profile.agent(n);
            model.mean((0..model.num_scenarios()).map(|j| u.u(x[(n, j)] + y[(n, j)])))
        })
        .sum()
}

/// Budgets aₙ = E_{Qⁿ}[Yⁿ].
pub fn budgets(model: &MarketModel, pricing: &PricingVector, y: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..y.nrows())
        .map(|n| {
            let row: Vec<f64> = y.row(n).iter().copied().collect();
            expectation(model, pricing.measure(n), &row)
        })
        .collect()
}

fn check_inputs(model: &MarketModel, profile: &UtilityProfile, spec: &ConstraintSpec) -> Result<()> {
    profile.check_len(model.num_agents())?;
    spec.check(model)
}

/// K(λ, Q) at a given point. Zero densities use v(0+) = u(+∞).
pub fn dual_objective(model: &MarketModel, profile: &UtilityProfile, total: f64, point: &DualPoint) -> Result<f64> {
    profile.check_len(model.num_agents())?;
    if point.pricing.len() != model.num_agents() {
        return Err(Error::Dimension { expected: model.num_agents(), got: point.pricing.len() });
    }
    let lambda = point.lambda;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("λ must be positive, got {lambda}")));
    }
    let x = model.endowments();
    let p = model.probs();
    let mut k = lambda * total;
    for n in 0..model.num_agents() {
        let u = profile.agent(n);
        for (j, &q) in point.pricing.density(n).iter().enumerate() {
            if q < 0.0 {
                return Err(Error::Domain(format!("negative density {q}")));
            }
            let y = lambda * q;
            k += p[j] * (y * x[(n, j)] + u.v_unchecked(y));
        }
    }
    Ok(k)
}

/// Optimal pricing restricted to one cell when each of its agents puts
/// mass `lambda·mass_share` on the cell's event.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMeasure {
    /// dQ/dP on the cell's scenarios.
    pub density: Vec<f64>,
    /// Deterministic group sum Σ_{n∈group} Yⁿ on the event.
    pub constant: f64,
}

pub fn inner_cell_measure(
    model: &MarketModel,
    profile: &UtilityProfile,
    cell: &Cell,
    lambda: f64,
    mass_share: f64,
    opts: &SolverOptions,
) -> Result<CellMeasure> {
    profile.check_len(model.num_agents())?;
    if !(lambda > 0.0) || !(mass_share > 0.0 && mass_share <= 1.0) {
        return Err(Error::Domain(format!("need λ > 0 and share in (0, 1], got {lambda}, {mass_share}")));
    }
    let st =
        MeasureStructure { cells: vec![cell.clone()], events: vec![cell.scenarios.clone()], agent_cell: Vec::new() };
    let inner = Inner::new(model, profile, &st, opts.root, opts.initial_guess);
    let ln_l = lambda.ln();
    let d = inner.cell_constant(0, ln_l + mass_share.ln())?;
    let ts = inner.cell_ts(0, d)?;
    Ok(CellMeasure { density: ts.iter().map(|t| (t - ln_l).exp()).collect(), constant: d })
}

fn pricing_from(model: &MarketModel, inner: &Inner, sol: &InnerSolution) -> Result<PricingVector> {
    let ln_l = sol.lambda.ln();
    let measures = inner
        .agent_log_y(sol)
        .into_iter()
        .map(|row| ProbMeasure::new(model, row.into_iter().map(|t| (t - ln_l).exp()).collect()))
        .collect::<Result<_>>()?;
    Ok(PricingVector::new(measures))
}

/// ψ(λ) = min_Q K(λ, Q) and its derivative A − Σₙ E_{Qⁿ}[Yⁿ], together
/// with the minimizing pricing vector.
pub fn dual_function(
    model: &MarketModel,
    profile: &UtilityProfile,
    spec: &ConstraintSpec,
    total: f64,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<(f64, f64, DualPoint)> {
    check_inputs(model, profile, spec)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("λ must be positive, got {lambda}")));
    }
    let st = measure_structure(spec, model.num_scenarios());
    let inner = Inner::new(model, profile, &st, opts.root, opts.initial_guess);
    let sol = inner.at_lambda(lambda)?;
    let point = DualPoint { lambda, pricing: pricing_from(model, &inner, &sol)? };
    let value = dual_objective(model, profile, total, &point)?;
    Ok((value, total - sol.total, point))
}

fn solve_inner<'a>(
    model: &'a MarketModel,
    profile: &'a UtilityProfile,
    st: &'a MeasureStructure,
    total: f64,
    opts: &SolverOptions,
) -> Result<(Inner<'a>, InnerSolution)> {
    let inner = Inner::new(model, profile, st, opts.root, opts.initial_guess);
    let sol = inner.at_total(total)?;
    if !(sol.lambda >= opts.lambda_lower) {
        return Err(Error::Boundary(format!(
            "stationary λ = {:e} is below {:e}; the systemic supremum is nearly Σ uₙ(+∞)",
            sol.lambda, opts.lambda_lower
        )));
    }
    Ok((inner, sol))
}

/// λ̂ and Q̂: the point where ψ′(λ) = A − Σₙ E_{Qⁿ}[Yⁿ] vanishes.
///
/// ψ′ depends on λ only through the total exchange D, and D ↦ λ(D) is
/// monotone, so the stationary point is the inner optimum at D = A.
pub fn solve_lambda(
    model: &MarketModel,
    profile: &UtilityProfile,
    spec: &ConstraintSpec,
    total: f64,
    opts: &SolverOptions,
) -> Result<DualPoint> {
    check_inputs(model, profile, spec)?;
    let st = measure_structure(spec, model.num_scenarios());
    let (inner, sol) = solve_inner(model, profile, &st, total, opts)?;
    Ok(DualPoint { lambda: sol.lambda, pricing: pricing_from(model, &inner, &sol)? })
}

/// Ŷⁿ = −Xⁿ − v′ₙ(λ dQⁿ/dP).
pub fn recover_allocation(model: &MarketModel, profile: &UtilityProfile, point: &DualPoint) -> Result<DMatrix<f64>> {
    profile.check_len(model.num_agents())?;
    let x = model.endowments();
    let mut y = DMatrix::zeros(model.num_agents(), model.num_scenarios());
    for n in 0..model.num_agents() {
        let u = profile.agent(n);
        for (j, &q) in point.pricing.density(n).iter().enumerate() {
            let arg = point.lambda * q;
            if !(arg > 0.0) {
                return Err(Error::Domain(format!("density of agent {n} vanishes at scenario {j}; v′(0+) = −∞")));
            }
            y[(n, j)] = -x[(n, j)] - u.v_prime_unchecked(arg);
        }
    }
    Ok(y)
}

fn vprime_conditioning(profile: &UtilityProfile, log_y: &[Vec<f64>]) -> f64 {
    let h = 1e-4;
    let mut worst = 1f64;
    for (n, row) in log_y.iter().enumerate() {
        let u = profile.agent(n);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let slopes: Vec<f64> = [lo, 0.5 * (lo + hi), hi]
            .iter()
            .map(|t| (u.v_prime_unchecked((t + h).exp()) - u.v_prime_unchecked((t - h).exp())) / (2.0 * h))
            .collect();
        let max = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = slopes.iter().copied().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            worst = worst.max(max / min);
        } else {
            worst = f64::INFINITY;
        }
    }
    worst
}

/// Residuals of an allocation against the equilibrium conditions.
pub(crate) fn residuals(
    model: &MarketModel,
    profile: &UtilityProfile,
    total: f64,
    y: &DMatrix<f64>,
    lambda: f64,
    pricing: &PricingVector,
    a: &[f64],
) -> (f64, f64, f64) {
    let x = model.endowments();
    let clearing = (0..model.num_scenarios()).map(|j| (y.column(j).sum() - total).abs()).fold(0.0, f64::max);
    let budget = (a.iter().sum::<f64>() - total).abs();
    let mut foc = 0f64;
    for n in 0..model.num_agents() {
        let u = profile.agent(n);
        for (j, &q) in pricing.density(n).iter().enumerate() {
            let r = u.u_prime(x[(n, j)] + y[(n, j)]) / (lambda * q) - 1.0;
            foc = foc.max(if r.is_nan() { f64::INFINITY } else { r.abs() });
        }
    }
    (clearing, budget, foc)
}

/// Full equilibrium: allocation, pricing vector, budgets, λ̂, values and
/// residuals.
pub fn solve_sorte(
    model: &MarketModel,
    profile: &UtilityProfile,
    spec: &ConstraintSpec,
    total: f64,
    opts: &SolverOptions,
) -> Result<EquilibriumSolution> {
    check_inputs(model, profile, spec)?;
    let st = measure_structure(spec, model.num_scenarios());
    let (inner, sol) = solve_inner(model, profile, &st, total, opts)?;
    let point = DualPoint { lambda: sol.lambda, pricing: pricing_from(model, &inner, &sol)? };
    let y = recover_allocation(model, profile, &point)?;
    let a = budgets(model, &point.pricing, &y)?;
    let primal_value = systemic_utility(model, profile, &y);
    let dual_value = dual_objective(model, profile, total, &point)?;
    let (clearing, budget, foc) = residuals(model, profile, total, &y, point.lambda, &point.pricing, &a);
    let min_density = point.pricing.min_density();
    let diagnostics = Diagnostics {
        root_evaluations: inner.evaluations(),
        clearing_residual: clearing,
        budget_residual: budget,
        foc_residual: foc,
        gap: dual_value - primal_value,
        stationarity: total - a.iter().sum::<f64>(),
        min_density,
        equivalent: min_density > opts.density_floor,
        vprime_conditioning: vprime_conditioning(profile, &inner.agent_log_y(&sol)),
    };
    Ok(EquilibriumSolution {
        y,
        pricing: point.pricing,
        a,
        lambda: point.lambda,
        primal_value,
        dual_value,
        diagnostics,
    })
}
