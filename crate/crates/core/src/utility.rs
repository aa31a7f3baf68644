//! Utility families with their convex conjugates.
//!
//! Each agent exposes the quadruple (u, u′, v, v′) where
//! v(y) = sup_x { u(x) − x·y }. Exponential utilities are built in; any other
//! family is supplied through [`CustomUtility`] and validated numerically at
//! registration.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponents beyond this magnitude are evaluated through logarithms.
const LOG_GUARD: f64 = 700.0;

/// User-supplied utility, given as u, u′, its conjugate v and v′.
pub trait CustomUtility: Send + Sync + fmt::Debug {
    fn u(&self, x: f64) -> f64;
    fn u_prime(&self, x: f64) -> f64;
    fn v(&self, y: f64) -> f64;
    fn v_prime(&self, y: f64) -> f64;
    /// u(+∞), which is also v(0+). May be `f64::INFINITY`.
    fn sup_value(&self) -> f64;
}

#[derive(Debug, Clone)]
pub enum Family {
    /// u(x) = 1 − exp(−αx)
    Exponential {
        alpha: f64,
    },
    Custom(Arc<dyn CustomUtility>),
}

/// γ·u for one agent.
#[derive(Debug, Clone)]
pub struct AgentUtility {
    family: Family,
    weight: f64,
}

fn check_weight(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("weight must be positive, got {gamma}")))
    }
}

impl AgentUtility {
    pub fn exponential(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Domain(format!("risk aversion must be positive, got {alpha}")));
        }
        Ok(Self { family: Family::Exponential { alpha }, weight: 1.0 })
    }

    /// Registers a custom family after checking the numeric invariants in
    /// [`check_invariants`].
    pub fn custom(f: Arc<dyn CustomUtility>) -> Result<Self> {
        let au = Self { family: Family::Custom(f), weight: 1.0 };
        check_invariants(&au)?;
        Ok(au)
    }

    pub fn with_weight(&self, gamma: f64) -> Result<Self> {
        check_weight(gamma)?;
        Ok(Self { family: self.family.clone(), weight: self.weight * gamma })
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.family {
            Family::Exponential { alpha } => Some(alpha),
            Family::Custom(_) => None,
        }
    }

    pub fn u(&self, x: f64) -> f64 {
        match &self.family {
            Family::Exponential { alpha } => {
                let g = self.weight;
                let arg = -alpha * x;
                if arg > LOG_GUARD {
                    g - (g.ln() + arg).exp()
                } else {
                    g - g * arg.exp()
                }
            }
            Family::Custom(f) => self.weight * f.u(x),
        }
    }

    pub fn u_prime(&self, x: f64) -> f64 {
        match &self.family {
            Family::Exponential { alpha } => {
                let arg = -alpha * x;
                if arg > LOG_GUARD {
                    (self.weight.ln() + alpha.ln() + arg).exp()
                } else {
                    self.weight * alpha * arg.exp()
                }
            }
            Family::Custom(f) => self.weight * f.u_prime(x),
        }
    }

    pub fn v(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("conjugate needs y > 0, got {y}")));
        }
        Ok(self.v_unchecked(y))
    }

    pub fn v_prime(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::Domain(format!("conjugate derivative needs y > 0, got {y}")));
        }
        Ok(self.v_prime_unchecked(y))
    }

    /// v(0+) = u(+∞).
    pub fn sup_value(&self) -> f64 {
        match &self.family {
            Family::Exponential { .. } => self.weight,
            Family::Custom(f) => self.weight * f.sup_value(),
        }
    }

    /// v(y) for y > 0 without the domain check. y = 0 maps to u(+∞).
    pub(crate) fn v_unchecked(&self, y: f64) -> f64 {
        if y == 0.0 {
            return self.sup_value();
        }
        match &self.family {
            Family::Exponential { alpha } => {
                let g = self.weight;
                let r = y / alpha;
                g - r + r * (y.ln() - (g * alpha).ln())
            }
            Family::Custom(f) => self.weight * f.v(y / self.weight),
        }
    }

    pub(crate) fn v_prime_unchecked(&self, y: f64) -> f64 {
        match &self.family {
            Family::Exponential { alpha } => (y.ln() - (self.weight * alpha).ln()) / alpha,
            Family::Custom(f) => f.v_prime(y / self.weight),
        }
    }
}

/// One utility per agent.
#[derive(Debug, Clone)]
pub struct UtilityProfile {
    agents: Vec<AgentUtility>,
}

impl UtilityProfile {
    pub fn new(agents: Vec<AgentUtility>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::Validation("utility profile is empty".into()));
        }
        Ok(Self { agents })
    }

    pub fn exponential(alphas: &[f64]) -> Result<Self> {
        Self::new(alphas.iter().map(|&a| AgentUtility::exponential(a)).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn agent(&self, n: usize) -> &AgentUtility {
        &self.agents[n]
    }

    pub fn agents(&self) -> &[AgentUtility] {
        &self.agents
    }

    pub fn weights(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.weight).collect()
    }

    /// Risk aversions when every agent is exponential.
    pub fn alphas(&self) -> Option<Vec<f64>> {
        self.agents.iter().map(AgentUtility::alpha).collect()
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.agents.len() == n {
            Ok(())
        } else {
            Err(Error::Dimension { expected: n, got: self.agents.len() })
        }
    }
}

/// Replaces uₙ by γₙ·uₙ.
pub fn apply_weights(profile: &UtilityProfile, gammas: &[f64]) -> Result<UtilityProfile> {
    profile.check_len(gammas.len())?;
    let agents = profile.agents.iter().zip(gammas).map(|(a, &g)| a.with_weight(g)).collect::<Result<_>>()?;
    Ok(UtilityProfile { agents })
}

/// Document form of the utility profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityBlock {
    pub family: String,
    pub alphas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
}

impl UtilityBlock {
    pub fn to_profile(&self, num_agents: usize) -> Result<UtilityProfile> {
        if self.family != "exponential" {
            return Err(Error::Schema(format!(
                "unknown utility family '{}', only 'exponential' is supported",
                self.family
            )));
        }
        if self.alphas.len() != num_agents {
            return Err(Error::Validation(format!("{} risk aversions for {num_agents} agents", self.alphas.len())));
        }
        let base = UtilityProfile::exponential(&self.alphas)?;
        match &self.gammas {
            Some(g) => {
                if g.len() != num_agents {
                    return Err(Error::Validation(format!("{} weights for {num_agents} agents", g.len())));
                }
                apply_weights(&base, g)
            }
            None => Ok(base),
        }
    }
}

/// Worst residuals found by [`check_invariants`].
#[derive(Debug, Clone, Copy, Default)]
pub struct InvariantReport {
    pub conjugacy: f64,
    pub inverse_marginal: f64,
    pub convexity: f64,
}

/// Log-spaced y grid used by the conjugacy checks.
pub fn conjugacy_grid() -> Vec<f64> {
    (0..=60).map(|k| 10f64.powf(-6.0 + 0.2 * k as f64)).collect()
}

/// Numeric checks of strict monotonicity, concavity, the growth conditions
/// at ±10⁶ and the conjugacy identities on [`conjugacy_grid`].
pub fn check_invariants(au: &AgentUtility) -> Result<InvariantReport> {
    let fail = |msg: String| Err(Error::Validation(msg));
    // x range where the marginal utility spans 1e-6..1e6 times u'(0)
    let slope0 = au.u_prime(0.0);
    let mut xs: Vec<f64> =
        conjugacy_grid().iter().map(|y| -au.v_prime_unchecked(y * slope0)).filter(|x| x.is_finite()).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        return fail("v' does not produce a usable x range".into());
    }
    for w in xs.windows(2) {
        let (a, b) = (w[0], w[1]);
        if !(au.u(a) < au.u(b)) {
            return fail(format!("u is not strictly increasing on [{a}, {b}]"));
        }
        let (da, db) = (au.u_prime(a), au.u_prime(b));
        if !(da > 0.0 && db > 0.0) {
            return fail(format!("u' is not positive near {a}"));
        }
        if !(da > db) {
            return fail(format!("u' is not strictly decreasing on [{a}, {b}]"));
        }
    }
    let left = au.u(-1e6) / -1e6;
    if !(left > 100.0 * slope0) {
        return fail(format!("u(x)/x = {left} at x = -1e6 does not blow up"));
    }
    let right = au.u(1e6) / 1e6;
    if !(right < 1e-3 * slope0) {
        return fail(format!("u(x)/x = {right} at x = 1e6 does not vanish"));
    }

    let ys = conjugacy_grid();
    let mut rep = InvariantReport::default();
    let mut prev_vp = f64::NEG_INFINITY;
    for &y in &ys {
        let v = au.v(y)?;
        let vp = au.v_prime(y)?;
        if !(vp > prev_vp) {
            return fail(format!("v' is not strictly increasing at y = {y}"));
        }
        prev_vp = vp;
        let lhs = au.u(-vp);
        let rhs = v - y * vp;
        let scale = 1f64.max(v.abs()).max((y * vp).abs());
        let conj = (lhs - rhs).abs() / scale;
        if !(conj <= 1e-10) {
            return fail(format!("conjugacy residual {conj} at y = {y}"));
        }
        let inv = (au.u_prime(-vp) - y).abs() / 1f64.max(y);
        if !(inv <= 1e-10) {
            return fail(format!("inverse-marginal residual {inv} at y = {y}"));
        }
        let h = 1e-3 * y;
        let second = au.v(y + h)? - 2.0 * v + au.v(y - h)?;
        let convex = -second / 1f64.max(v.abs());
        if convex > 1e-9 {
            return fail(format!("v is not convex at y = {y}"));
        }
        rep.conjugacy = rep.conjugacy.max(conj);
        rep.inverse_marginal = rep.inverse_marginal.max(inv);
        rep.convexity = rep.convexity.max(convex);
    }
    Ok(rep)
}
