//! Closed forms for exponential utilities uₙ(x) = 1 − exp(−αₙx) under
//! cluster constraints, Bühlmann equilibria and the weight translation.

use nalgebra::DMatrix;

use crate::constraints::ConstraintSpec;
use crate::dual::{
    agent_q_optimal, budgets, dual_objective, residuals, systemic_utility, Diagnostics, DualPoint, EquilibriumSolution,
    SolverOptions,
};
use crate::error::{Error, Result};
use crate::market::{group_aggregate, MarketModel, PricingVector, ProbMeasure};
use crate::utility::{apply_weights, UtilityProfile};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpAggregates {
    pub groups: Vec<Vec<usize>>,
    /// β_m = Σ_{n∈I_m} 1/αₙ
    pub beta_m: Vec<f64>,
    /// β = Σ 1/αₙ
    pub beta: f64,
    /// ξ = Σ (1/αₙ) ln(1/αₙ)
    pub xi: f64,
    /// R(n) = (1/αₙ)/β
    pub r: Vec<f64>,
    /// ln E[exp(−X̄_m/β_m)]
    pub ln_e: Vec<f64>,
    pub d_m: Vec<f64>,
    /// μ = A − Σ β_m ln E[exp(−X̄_m/β_m)], as in the derivation
    pub mu: f64,
    /// λ̂ = exp(−(μ + ξ)/β)
    pub lambda: f64,
}

fn log_mean_exp(probs: &[f64], xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + probs.iter().zip(xs).map(|(p, x)| p * (x - m).exp()).sum::<f64>().ln()
}

fn check_alphas(model: &MarketModel, alphas: &[f64]) -> Result<()> {
    if alphas.len() != model.num_agents() {
        return Err(Error::Dimension { expected: model.num_agents(), got: alphas.len() });
    }
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::Domain(format!("risk aversion must be positive, got {a}")));
    }
    Ok(())
}

fn cluster_groups(spec: &ConstraintSpec) -> Result<Vec<Vec<usize>>> {
    spec.groups()
        .map(<[_]>::to_vec)
        .ok_or_else(|| Error::Spec("no closed form for scenario-dependent clusters; use the dual solver".into()))
}

pub fn exp_aggregates(model: &MarketModel, alphas: &[f64], spec: &ConstraintSpec, total: f64) -> Result<ExpAggregates> {
    check_alphas(model, alphas)?;
    spec.check(model)?;
    let groups = cluster_groups(spec)?;
    let inv: Vec<f64> = alphas.iter().map(|a| 1.0 / a).collect();
    let beta: f64 = inv.iter().sum();
    let xi: f64 = inv.iter().map(|b| b * b.ln()).sum();
    let r: Vec<f64> = inv.iter().map(|b| b / beta).collect();
    let beta_m: Vec<f64> = groups.iter().map(|g| g.iter().map(|&n| inv[n]).sum()).collect();
    let ln_e = groups
        .iter()
        .zip(&beta_m)
        .map(|(g, &bm)| {
            let xbar = group_aggregate(model, g)?;
            let z: Vec<f64> = xbar.iter().map(|x| -x / bm).collect();
            Ok(log_mean_exp(model.probs(), &z))
        })
        .collect::<Result<Vec<_>>>()?;
    let weighted: f64 = beta_m.iter().zip(&ln_e).map(|(b, l)| b / beta * l).sum();
    let d_m = ln_e.iter().map(|l| weighted - l).collect();
    let mu = total - beta_m.iter().zip(&ln_e).map(|(b, l)| b * l).sum::<f64>();
    let lambda = (-(mu + xi) / beta).exp();
    Ok(ExpAggregates { groups, beta_m, beta, xi, r, ln_e, d_m, mu, lambda })
}

/// Equilibrium for cluster-type constraints in closed form.
pub fn sorte_exponential(
    model: &MarketModel,
    alphas: &[f64],
    spec: &ConstraintSpec,
    total: f64,
) -> Result<EquilibriumSolution> {
    let agg = exp_aggregates(model, alphas, spec, total)?;
    let (n, s) = (model.num_agents(), model.num_scenarios());
    let x = model.endowments();
    let e_r_ln_alpha: f64 = agg.r.iter().zip(alphas).map(|(r, a)| r * a.ln()).sum();
    let mut y = DMatrix::zeros(n, s);
    let mut dens = vec![Vec::new(); n];
    for (m, g) in agg.groups.iter().enumerate() {
        let xbar = group_aggregate(model, g)?;
        let bm = agg.beta_m[m];
        let q: Vec<f64> = xbar.iter().map(|xb| (-xb / bm - agg.ln_e[m]).exp()).collect();
        for &k in g {
            let shift = total / agg.beta + alphas[k].ln() - e_r_ln_alpha;
            for j in 0..s {
                y[(k, j)] = -x[(k, j)] + (xbar[j] / bm - agg.d_m[m] + shift) / alphas[k];
            }
            dens[k] = q.clone();
        }
    }
    let pricing = PricingVector::new(dens.into_iter().map(|d| ProbMeasure::new(model, d)).collect::<Result<_>>()?);
    let profile = UtilityProfile::exponential(alphas)?;
    let a = budgets(model, &pricing, &y)?;
    let primal_value = systemic_utility(model, &profile, &y);
    let dual_value = systemic_value_exponential(model, alphas, spec, total)?;
    let (clearing, budget, foc) = residuals(model, &profile, total, &y, agg.lambda, &pricing, &a);
    let min_density = pricing.min_density();
    let diagnostics = Diagnostics {
        root_evaluations: 0,
        clearing_residual: clearing,
        budget_residual: budget,
        foc_residual: foc,
        gap: dual_value - primal_value,
        stationarity: total - a.iter().sum::<f64>(),
        min_density,
        equivalent: min_density > 0.0,
        vprime_conditioning: 1.0,
    };
    Ok(EquilibriumSolution { y, pricing, a, lambda: agg.lambda, primal_value, dual_value, diagnostics })
}

/// N − β·exp(−(A + ξ − Σⱼ βⱼ ln E[exp(−X̄ⱼ/βⱼ)])/β), which equals N − β·λ̂.
pub fn systemic_value_exponential(
    model: &MarketModel,
    alphas: &[f64],
    spec: &ConstraintSpec,
    total: f64,
) -> Result<f64> {
    let agg = exp_aggregates(model, alphas, spec, total)?;
    let sum_ln: f64 = agg.beta_m.iter().zip(&agg.ln_e).map(|(b, l)| b * l).sum();
    Ok(model.num_agents() as f64 - agg.beta * (-(total + agg.xi - sum_ln) / agg.beta).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buhlmann {
    pub y: DMatrix<f64>,
    /// The single pricing measure, repeated for every agent.
    pub pricing: PricingVector,
    /// Per-agent budget multipliers.
    pub lambdas: Vec<f64>,
    pub value: f64,
}

/// Risk-exchange equilibrium with exogenous budgets `a`: one pricing
/// measure with density ∝ exp(−X̄/β), each agent optimal at budget aₙ.
pub fn buhlmann_equilibrium(model: &MarketModel, alphas: &[f64], a: &[f64], opts: &SolverOptions) -> Result<Buhlmann> {
    check_alphas(model, alphas)?;
    if a.len() != model.num_agents() {
        return Err(Error::Dimension { expected: model.num_agents(), got: a.len() });
    }
    let total: f64 = a.iter().sum();
    let full = ConstraintSpec::full(model.num_agents());
    let agg = exp_aggregates(model, alphas, &full, total)?;
    let xbar = group_aggregate(model, &agg.groups[0])?;
    let q: Vec<f64> = xbar.iter().map(|xb| (-xb / agg.beta - agg.ln_e[0]).exp()).collect();
    let measure = ProbMeasure::new(model, q)?;
    let profile = UtilityProfile::exponential(alphas)?;
    let mut y = DMatrix::zeros(model.num_agents(), model.num_scenarios());
    let mut lambdas = Vec::with_capacity(a.len());
    for (n, &budget) in a.iter().enumerate() {
        let opt = agent_q_optimal(model, n, profile.agent(n), &measure, budget, opts)?;
        for (j, v) in opt.y.into_iter().enumerate() {
            y[(n, j)] = v;
        }
        lambdas.push(opt.lambda);
    }
    let value = systemic_utility(model, &profile, &y);
    let pricing = PricingVector::new(vec![measure; model.num_agents()]);
    Ok(Buhlmann { y, pricing, lambdas, value })
}

/// gₖ(γ) = (1/αₖ)(ln γₖ − E_R[ln γ]).
pub fn weight_shift(alphas: &[f64], gammas: &[f64]) -> Result<Vec<f64>> {
    if alphas.len() != gammas.len() {
        return Err(Error::Dimension { expected: alphas.len(), got: gammas.len() });
    }
    if let Some(g) = gammas.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(Error::Domain(format!("weight must be positive, got {g}")));
    }
    let beta: f64 = alphas.iter().map(|a| 1.0 / a).sum();
    let e_r: f64 = alphas.iter().zip(gammas).map(|(a, g)| g.ln() / (a * beta)).sum();
    Ok(alphas.iter().zip(gammas).map(|(a, g)| (g.ln() - e_r) / a).collect())
}

/// Equilibrium for the weighted utilities γₙuₙ obtained by translating an
/// unweighted exponential equilibrium: Ŷ + g(γ), same Q̂, â + g(γ).
pub fn weight_translation(
    model: &MarketModel,
    base: &EquilibriumSolution,
    alphas: &[f64],
    gammas: &[f64],
) -> Result<EquilibriumSolution> {
    check_alphas(model, alphas)?;
    let g = weight_shift(alphas, gammas)?;
    let beta: f64 = alphas.iter().map(|a| 1.0 / a).sum();
    let e_r: f64 = alphas.iter().zip(gammas).map(|(a, g)| g.ln() / (a * beta)).sum();
    let mut y = base.y.clone();
    for (n, gn) in g.iter().enumerate() {
        y.row_mut(n).add_scalar_mut(*gn);
    }
    let a: Vec<f64> = base.a.iter().zip(&g).map(|(a, g)| a + g).collect();
    let total: f64 = base.a.iter().sum();
    let lambda = base.lambda * e_r.exp();
    let profile = apply_weights(&UtilityProfile::exponential(alphas)?, gammas)?;
    let primal_value = systemic_utility(model, &profile, &y);
    let point = DualPoint { lambda, pricing: base.pricing.clone() };
    let dual_value = dual_objective(model, &profile, total, &point)?;
    let (clearing, budget, foc) = residuals(model, &profile, total, &y, lambda, &base.pricing, &a);
    let diagnostics = Diagnostics {
        clearing_residual: clearing,
        budget_residual: budget,
        foc_residual: foc,
        gap: dual_value - primal_value,
        stationarity: total - a.iter().sum::<f64>(),
        ..base.diagnostics.clone()
    };
    Ok(EquilibriumSolution { y, pricing: base.pricing.clone(), a, lambda, primal_value, dual_value, diagnostics })
}
