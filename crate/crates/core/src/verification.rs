//! Independent checks of a claimed equilibrium and the comparison
//! benchmarks around it.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{measure_structure, membership, random_member, ConstraintSpec};
use crate::dual::{affine_frame, SolverOptions};
use crate::error::{Error, Result};
use crate::market::{expectation, MarketModel, PricingVector};
use crate::par::{self, Execution};
use crate::roots::{solve_monotone, Monotone, Search};
use crate::utility::UtilityProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub passed: bool,
    pub residual: f64,
    pub detail: String,
}

impl ConditionCheck {
    fn new(residual: f64, tol: f64, detail: String) -> Self {
        Self { passed: residual <= tol, residual, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// (1) each agent optimal for its own budget under its own measure
    pub agent_optimality: ConditionCheck,
    /// (2) the budget split maximizes systemic utility: equal multipliers
    pub budget_optimality: ConditionCheck,
    /// (3) Y ∈ 𝔹 and Σₙ Yⁿ = A
    pub feasibility: ConditionCheck,
    /// λₙ = E[u′ₙ(Xⁿ+Yⁿ)], the P-mean of u′ₙ/(dQⁿ/dP)·dQⁿ/dP
    /// max relative deviation of u′ₙ(Xⁿ+Yⁿ)/(λₙ dQⁿ/dP) from 1
    pub foc_residual: f64,
    /// max |E_{Qⁿ}[Yⁿ] − aₙ|
    pub budget_residual: f64,
    pub agent_lambdas: Vec<f64>,
    /// E[uₙ(Xⁿ+Yⁿ)] − E[uₙ(Xⁿ)]; information only
    pub utility_gains: Vec<f64>,
    pub passed: bool,
}

/// Checks the three defining conditions with residuals. Multiplier
/// comparisons are relative; budgets and clearing are absolute.
#[allow(clippy::too_many_arguments)]
pub fn verify_sorte(
    model: &MarketModel,
    profile: &UtilityProfile,
    spec: &ConstraintSpec,
    total: f64,
    y: &DMatrix<f64>,
    pricing: &PricingVector,
    a: &[f64],
    tol: f64,
) -> Result<VerificationReport> {
    let (n, s) = (model.num_agents(), model.num_scenarios());
    profile.check_len(n)?;
    spec.check(model)?;
    if y.shape() != (n, s) {
        return Err(Error::Dimension { expected: n * s, got: y.len() });
    }
    if pricing.len() != n || a.len() != n {
        return Err(Error::Dimension { expected: n, got: pricing.len().min(a.len()) });
    }
    let x = model.endowments();
    let mut lambdas = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);
    let mut foc = 0f64;
    let mut budget = 0f64;
    let mut worst_agent = 0;
    for k in 0..n {
        let u = profile.agent(k);
        let marg: Vec<f64> = (0..s).map(|j| u.u_prime(x[(k, j)] + y[(k, j)])).collect();
        let lam = model.mean(marg.iter().copied());
        let q = pricing.density(k);
        let dev = (0..s)
            .map(|j| {
                let r = marg[j] / (lam * q[j]) - 1.0;
                if r.is_finite() {
                    r.abs()
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max);
        let row: Vec<f64> = y.row(k).iter().copied().collect();
        let b = (expectation(model, pricing.measure(k), &row)? - a[k]).abs();
        if dev.max(b) > foc.max(budget) {
            worst_agent = k;
        }
        foc = foc.max(dev);
        budget = budget.max(b);
        lambdas.push(lam);
        gains.push(model.mean((0..s).map(|j| u.u(x[(k, j)] + y[(k, j)]))) - model.mean((0..s).map(|j| u.u(x[(k, j)]))));
    }
    let agent_optimality = ConditionCheck::new(
        foc.max(budget),
        tol,
        format!(
            "max relative deviation of u'/(λ dQ/dP) from 1: {foc:.3e}; max budget mismatch {budget:.3e} (agent {worst_agent})"
        ),
    );
    let mean_l = lambdas.iter().sum::<f64>() / n as f64;
    let spread = lambdas.iter().map(|l| (l / mean_l - 1.0).abs()).fold(0.0, f64::max);
    let budget_optimality =
        ConditionCheck::new(spread, tol, format!("max relative spread of agent multipliers: {spread:.3e}"));
    let mem = membership(spec, y, tol)?;
    let clearing = (0..s).map(|j| (y.column(j).sum() - total).abs()).fold(0.0, f64::max);
    let split = (a.iter().sum::<f64>() - total).abs();
    let feasibility = ConditionCheck::new(
        mem.max_deviation.max(clearing).max(split),
        tol,
        format!(
            "group-sum deviation {:.3e}; clearing residual {clearing:.3e}; budget total residual {split:.3e}",
            mem.max_deviation
        ),
    );
    let passed = agent_optimality.passed && budget_optimality.passed && feasibility.passed;
    Ok(VerificationReport {
        agent_optimality,
        budget_optimality,
        feasibility,
        foc_residual: foc,
        budget_residual: budget,
        agent_lambdas: lambdas,
        utility_gains: gains,
        passed,
    })
}

/// Feasible sets for the Pareto check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeasibleSet {
    /// {Y ∈ 𝔹 : Σₙ Yⁿ ≤ A}
    Constraint,
    /// {Y : Σₙ E_{Q̂ⁿ}[Yⁿ] ≤ A}
    Budget,
}

#[derive(Debug, Clone, Copy)]
pub struct ParetoOptions {
    pub trials: usize,
    pub seed: u64,
    /// Strict improvement threshold, relative to max(1, |Uₙ|).
    pub tol: f64,
    pub execution: Execution,
}

impl Default for ParetoOptions {
    fn default() -> Self {
        Self { trials: 500, seed: 0, tol: 1e-9, execution: Execution::Parallel }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoCheck {
    pub is_pareto: bool,
    /// Utility changes of the first improving step found.
    pub improvement: Option<Vec<f64>>,
}

fn agent_utilities(model: &MarketModel, profile: &UtilityProfile, y: &DMatrix<f64>) -> Vec<f64> {
    let x = model.endowments();
    (0..model.num_agents())
        .map(|k| {
            let u = profile.agent(k);
            model.mean((0..model.num_scenarios()).map(|j| u.u(x[(k, j)] + y[(k, j)])))
        })
        .collect()
}

/// Min-norm point of the convex hull of the rows of `g` (Frank–Wolfe on the
/// simplex). Nonzero output has a positive inner product with every row.
fn common_ascent(g: &[DVector<f64>]) -> DVector<f64> {
    let k = g.len();
    let mut w = vec![1.0 / k as f64; k];
    let gram = DMatrix::from_fn(k, k, |i, j| g[i].dot(&g[j]));
    for _ in 0..500 {
        let gw: Vec<f64> = (0..k).map(|i| (0..k).map(|j| gram[(i, j)] * w[j]).sum()).collect();
        let (imin, _) = gw.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b });
        let wgw: f64 = (0..k).map(|i| w[i] * gw[i]).sum();
        let denom = wgw - 2.0 * gw[imin] + gram[(imin, imin)];
        if denom <= 0.0 {
            break;
        }
        let step = ((wgw - gw[imin]) / denom).clamp(0.0, 1.0);
        if step < 1e-15 {
            break;
        }
        for (i, wi) in w.iter_mut().enumerate() {
            *wi *= 1.0 - step;
            if i == imin {
                *wi += step;
            }
        }
    }
    g.iter().zip(&w).fold(DVector::zeros(g[0].len()), |acc, (gi, wi)| acc + gi * *wi)
}

/// Randomized search for a Pareto improvement of `y` inside the chosen
/// feasible set. Directions are projected onto the set's direction space.
/// They are random, random-weighted utility gradients, or a perturbed
/// common-ascent direction, each followed by a step-halving line search.
#[allow(clippy::too_many_arguments)]
pub fn check_pareto(
    model: &MarketModel,
    profile: &UtilityProfile,
    spec: &ConstraintSpec,
    set: FeasibleSet,
    y: &DMatrix<f64>,
    pricing: &PricingVector,
    opts: &ParetoOptions,
) -> Result<ParetoCheck> {
    let (n, s) = (model.num_agents(), model.num_scenarios());
    profile.check_len(n)?;
    spec.check(model)?;
    if n == 1 {
        return Ok(ParetoCheck { is_pareto: true, improvement: None });
    }
    let dim = n * s;
    let proj = match set {
        FeasibleSet::Constraint => affine_frame(spec, n, s, 0.0).1,
        FeasibleSet::Budget => {
            let p = model.probs();
            let w = DVector::from_fn(dim, |k, _| p[k % s] * pricing.density(k / s)[k % s]);
            DMatrix::identity(dim, dim) - &w * w.transpose() / w.norm_squared()
        }
    };
    let x = model.endowments();
    let grads: Vec<DVector<f64>> = (0..n)
        .map(|k| {
            let mut g = DVector::zeros(dim);
            for j in 0..s {
                g[k * s + j] = model.probs()[j] * profile.agent(k).u_prime(x[(k, j)] + y[(k, j)]);
            }
            &proj * g
        })
        .collect();
    let ascent = common_ascent(&grads);
    let base = agent_utilities(model, profile, y);
    let thresholds: Vec<f64> = base.iter().map(|u| opts.tol * u.abs().max(1.0)).collect();
    let noise: Vec<f64> = base.iter().map(|u| 1e-14 * u.abs().max(1.0)).collect();

    let trial = |i: usize| -> Option<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
        let raw = match i % 3 {
            0 => {
                let scale = ascent.amax().max(1e-300);
                &ascent
                    + DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
                        * (scale * 0.1 * (i / 3) as f64 / opts.trials.max(1) as f64)
            }
            1 => {
                let w: Vec<f64> = (0..n).map(|_| -rng.random_range(f64::MIN_POSITIVE..1.0f64).ln()).collect();
                grads.iter().zip(&w).fold(DVector::zeros(dim), |acc, (g, wi)| acc + g * *wi)
            }
            _ => DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)),
        };
        let d = &proj * raw;
        let norm = d.amax();
        if !(norm > 0.0) {
            return None;
        }
        // concavity: Uₙ(y + t d) − Uₙ(y) ≤ t⟨∇Uₙ, d⟩
        let slopes: Vec<f64> = grads.iter().map(|g| g.dot(&d)).collect();
        let mut t = 1.0 / norm;
        while slopes.iter().zip(&thresholds).any(|(c, th)| t * c > *th) {
            let cand = DMatrix::from_fn(n, s, |k, j| y[(k, j)] + t * d[k * s + j]);
            let u = agent_utilities(model, profile, &cand);
            let delta: Vec<f64> = u.iter().zip(&base).map(|(a, b)| a - b).collect();
            let weak = delta.iter().zip(&noise).all(|(dl, e)| *dl >= -e);
            let strict = delta.iter().zip(&thresholds).any(|(dl, th)| dl > th);
            if weak && strict {
                return Some(delta);
            }
            t *= 0.5;
        }
        None
    };
    let found = par::map_range(opts.trials, opts.execution, trial);
    let improvement = found.into_iter().flatten().next();
    Ok(ParetoCheck { is_pareto: improvement.is_none(), improvement })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairPricing {
    pub passed: bool,
    /// max over samples of Σₙ E_{Qⁿ}[Yⁿ] − Σₙ Yⁿ
    pub worst_excess: f64,
}

/// Samples Y ∈ 𝔹 and checks Σₙ E_{Qⁿ}[Yⁿ] ≤ Σₙ Yⁿ + tol.
pub fn check_fair_pricing(
    model: &MarketModel,
    spec: &ConstraintSpec,
    pricing: &PricingVector,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<FairPricing> {
    spec.check(model)?;
    let (n, s) = (model.num_agents(), model.num_scenarios());
    if pricing.len() != n {
        return Err(Error::Dimension { expected: n, got: pricing.len() });
    }
    let st = measure_structure(spec, s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let y = random_member(&st, n, s, 1.0, &mut rng);
        let mut priced = 0.0;
        for k in 0..n {
            let row: Vec<f64> = y.row(k).iter().copied().collect();
            priced += expectation(model, pricing.measure(k), &row)?;
        }
        let total = model.mean((0..s).map(|j| y.column(j).sum()));
        worst = worst.max(priced - total);
    }
    Ok(FairPricing { passed: worst <= tol, worst_excess: worst })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deterministic {
    pub a: Vec<f64>,
    pub value: f64,
    /// Common marginal expected utility E[u′ₙ(Xⁿ+aₙ)].
    pub multiplier: f64,
}

/// Best split of A into deterministic amounts: maximize Σₙ E[uₙ(Xⁿ+aₙ)]
/// with Σₙ aₙ = A by equalizing E[u′ₙ(Xⁿ+aₙ)].
pub fn deterministic_allocation(
    model: &MarketModel,
    profile: &UtilityProfile,
    total: f64,
    opts: &SolverOptions,
) -> Result<Deterministic> {
    let (n, s) = (model.num_agents(), model.num_scenarios());
    profile.check_len(n)?;
    let x = model.endowments();
    let amount = |k: usize, ln_mu: f64| -> Result<f64> {
        let u = profile.agent(k);
        let f = |a: f64| {
            let m = model.mean((0..s).map(|j| u.u_prime(x[(k, j)] + a)));
            Ok(m.ln() - ln_mu)
        };
        let search = Search { start: 0.0, step: 0.5, lower: -1e15, upper: 1e15 };
        Ok(solve_monotone(f, Monotone::Decreasing, search, &opts.root, "deterministic amount")?.0)
    };
    let excess = |ln_mu: f64| -> Result<f64> {
        let mut sum = 0.0;
        for k in 0..n {
            sum += amount(k, ln_mu)?;
        }
        Ok(sum - total)
    };
    let search = Search { start: 0.0, step: 0.5, lower: -700.0, upper: 700.0 };
    let (ln_mu, _) = solve_monotone(excess, Monotone::Decreasing, search, &opts.root, "marginal utility")?;
    let a = (0..n).map(|k| amount(k, ln_mu)).collect::<Result<Vec<_>>>()?;
    let value = (0..n).map(|k| model.mean((0..s).map(|j| profile.agent(k).u(x[(k, j)] + a[k])))).sum();
    Ok(Deterministic { a, value, multiplier: ln_mu.exp() })
}
