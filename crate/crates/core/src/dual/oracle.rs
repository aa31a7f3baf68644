//! Brute-force primal maximization, used as an independent check on the
//! dual solver.
//!
//! The affine set 𝔹_A is written as y₀ + range(P) with P the orthogonal
//! projector onto the null space of the constraint matrix. Ascent runs in
//! that subspace with quasi-Newton (BFGS) directions and Armijo
//! backtracking, from several seeded random starts.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::{linear_constraints, measure_structure, ConstraintSpec};
use crate::error::{Error, Result};
use crate::market::MarketModel;
use crate::par::{self, Execution};
use crate::utility::UtilityProfile;

/// Largest N·S accepted by [`brute_force_primal`].
pub const MAX_ORACLE_SIZE: usize = 64;

#[derive(Debug, Clone, Copy)]
pub struct BruteForceOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop when the projected gradient's sup-norm falls below
    /// `gtol · max(1, |∇f|∞ at the start)`.
    pub gtol: f64,
    /// Half-width of the uniform perturbation used for random starts.
    pub start_scale: f64,
    pub execution: Execution,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        Self { starts: 6, seed: 0, max_iter: 4000, gtol: 1e-12, start_scale: 1.0, execution: Execution::Parallel }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub y: DMatrix<f64>,
    pub value: f64,
    /// Final value of each start, in start order.
    pub start_values: Vec<f64>,
    pub iterations: usize,
}

/// Affine parametrization of 𝔹_A: particular solution and null-space
/// projector, both in row-major vec(Y) coordinates.
pub(crate) fn affine_frame(
    spec: &ConstraintSpec,
    num_agents: usize,
    num_scenarios: usize,
    total: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let st = measure_structure(spec, num_scenarios);
    let (c, b) = linear_constraints(&st, num_agents, num_scenarios, total);
    let k = c.ncols();
    // The SVD of the rank-deficient C is unreliable here; the row space is
    // taken from the eigenvectors of CᵀC instead.
    let eig = (c.transpose() * &c).symmetric_eigen();
    let emax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut proj = DMatrix::identity(k, k);
    let mut pinv = DMatrix::zeros(k, k);
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > 1e-12 * emax {
            let v = eig.eigenvectors.column(i);
            proj -= v * v.transpose();
            pinv += v * v.transpose() / ev;
        }
    }
    let y0 = pinv * c.transpose() * b;
    (y0, proj)
}

struct Objective<'a> {
    model: &'a MarketModel,
    profile: &'a UtilityProfile,
}

impl Objective<'_> {
    fn value(&self, y: &DVector<f64>) -> f64 {
        let s = self.model.num_scenarios();
        let x = self.model.endowments();
        let p = self.model.probs();
        let mut f = 0.0;
        for n in 0..self.model.num_agents() {
            let u = self.profile.agent(n);
            for j in 0..s {
                f += p[j] * u.u(x[(n, j)] + y[n * s + j]);
            }
        }
        f
    }

    fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        let s = self.model.num_scenarios();
        let x = self.model.endowments();
        let p = self.model.probs();
        DVector::from_fn(y.len(), |k, _| {
            let (n, j) = (k / s, k % s);
            p[j] * self.profile.agent(n).u_prime(x[(n, j)] + y[k])
        })
    }
}

fn ascend(
    obj: &Objective,
    y0: &DVector<f64>,
    proj: &DMatrix<f64>,
    start: DVector<f64>,
    opts: &BruteForceOptions,
) -> (DVector<f64>, f64, usize) {
    let mut y = start;
    let mut f = obj.value(&y);
    let mut g = proj * obj.gradient(&y);
    let scale = g.amax().max(1.0);
    let mut h = proj / g.norm().max(1.0);
    let mut iters = 0;
    while iters < opts.max_iter {
        iters += 1;
        if g.amax() <= opts.gtol * scale {
            break;
        }
        let mut d = &h * &g;
        if d.dot(&g) <= 0.0 {
            h = proj / g.norm().max(1.0);
            d = &h * &g;
        }
        let slope = d.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let trial = &y + &d * t;
            let ft = obj.value(&trial);
            if ft.is_finite() && ft >= f + 1e-4 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((mut y_new, f_new)) = accepted else { break };
        // keep the iterate on the affine set
        y_new = y0 + proj * (&y_new - y0);
        let g_new = proj * obj.gradient(&y_new);
        let s = &y_new - &y;
        // curvature pair for the minimization of −f
        let r = &g - &g_new;
        let sr = s.dot(&r);
        if sr > 1e-300 {
            let hr = &h * &r;
            let rho = 1.0 / sr;
            let rhr = r.dot(&hr);
            h += (&s * s.transpose()) * (rho * (1.0 + rho * rhr)) - (&hr * s.transpose() + &s * hr.transpose()) * rho;
        }
        let stalled = f_new - f <= 1e-16 * f.abs().max(1.0) && t < 1e-12;
        y = y_new;
        f = f_new;
        g = g_new;
        if stalled {
            break;
        }
    }
    let f = obj.value(&y);
    (y, f, iters)
}

/// Maximizes Σₙ E[uₙ(Xⁿ+Yⁿ)] over 𝔹_A directly. Deterministic given the
/// seed; the result does not depend on the execution mode.
pub fn brute_force_primal(
    model: &MarketModel,
    profile: &UtilityProfile,
    spec: &ConstraintSpec,
    total: f64,
    opts: &BruteForceOptions,
) -> Result<BruteForce> {
    profile.check_len(model.num_agents())?;
    spec.check(model)?;
    let (n, s) = (model.num_agents(), model.num_scenarios());
    if n * s > MAX_ORACLE_SIZE {
        return Err(Error::Scale(format!("N·S = {} exceeds {MAX_ORACLE_SIZE}", n * s)));
    }
    let (y0, proj) = affine_frame(spec, n, s, total);
    let obj = Objective { model, profile };
    let runs = par::map_range(opts.starts.max(1), opts.execution, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
        let z = DVector::from_fn(n * s, |_, _| rng.random_range(-opts.start_scale..=opts.start_scale));
        let start = if i == 0 { y0.clone() } else { &y0 + &proj * z };
        ascend(&obj, &y0, &proj, start, opts)
    });
    let start_values: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let iterations = runs.iter().map(|r| r.2).sum();
    let best = runs
        .into_iter()
        .filter(|r| r.1.is_finite())
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(Error::Convergence { what: "brute-force ascent", iterations })?;
    let y = DMatrix::from_fn(n, s, |i, j| best.0[i * s + j]);
    Ok(BruteForce { y, value: best.1, start_values, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_value() {
        let model = MarketModel::from_parts(vec![0.5, 0.5], vec![vec![0.0; 2]; 2]).unwrap();
        let profile = UtilityProfile::exponential(&[1.0, 2.0]).unwrap();
        let r = brute_force_primal(&model, &profile, &ConstraintSpec::full(2), 0.0, &Default::default()).unwrap();
        assert!((r.value - (2.0 - 1.5 * 2f64.cbrt())).abs() < 1e-9);
        assert!((r.y[(1, 0)] - 0.231049).abs() < 1e-5);
    }

    #[test]
    fn affine_frame_spans_the_constraint_set() {
        let specs = [
            (ConstraintSpec::cluster(&[vec![0, 1], vec![2]], 3).unwrap(), 2),
            (ConstraintSpec::full(3), 6),
            (ConstraintSpec::no_sharing(4), 3),
            (
                ConstraintSpec::scenario_cluster(
                    &[vec![0, 2], vec![1, 5], vec![3], vec![4]],
                    &[
                        vec![vec![0], vec![1], vec![2], vec![3], vec![4]],
                        vec![vec![0, 1, 2, 3, 4]],
                        vec![vec![0, 3], vec![1], vec![2], vec![4]],
                        vec![vec![0, 3, 4], vec![1, 2]],
                    ],
                    5,
                    6,
                )
                .unwrap(),
                6,
            ),
            (
                ConstraintSpec::scenario_cluster(
                    &[vec![0, 2], vec![1, 3, 4]],
                    &[vec![vec![0, 1, 2]], vec![vec![0], vec![1, 2]]],
                    3,
                    5,
                )
                .unwrap(),
                5,
            ),
        ];
        for (spec, s) in specs {
            let (y0, proj) = affine_frame(&spec, spec.num_agents(), s, 1.5);
            let st = measure_structure(&spec, s);
            let (c, b) = linear_constraints(&st, spec.num_agents(), s, 1.5);
            assert!((&c * &y0 - &b).amax() < 1e-12);
            assert!((&c * &proj).amax() < 1e-12);
            assert!((&proj * &proj - &proj).amax() < 1e-12);
        }
    }

    #[test]
    fn size_limit() {
        let model = MarketModel::from_parts(vec![1.0 / 13.0; 13], vec![vec![0.0; 13]; 5]).unwrap();
        let profile = UtilityProfile::exponential(&[1.0; 5]).unwrap();
        let r = brute_force_primal(&model, &profile, &ConstraintSpec::full(5), 0.0, &Default::default());
        assert!(matches!(r, Err(Error::Scale(_))));
    }
}
