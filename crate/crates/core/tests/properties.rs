use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sorte::constraints::{measure_structure, membership, random_pricing};
use sorte::dual::{brute_force_primal, solve_q_optimal, solve_sorte, BruteForceOptions, SolverOptions};
use sorte::exponential::weight_shift;
use sorte::instances::{random_instance, sized_instance, Instance, Ranges, SpecFamily};
use sorte::par::Execution;
use sorte::roots::{solve_monotone, Monotone, RootOptions, Search};
use sorte::utility::{AgentUtility, UtilityProfile};
use sorte::verification::{
    check_fair_pricing, check_pareto, deterministic_allocation, verify_sorte, FeasibleSet, ParetoOptions,
};

fn instance(seed: u64, scenario_dependent: bool) -> Instance {
    let fam = if scenario_dependent { SpecFamily::ScenarioCluster } else { SpecFamily::Cluster };
    random_instance(fam, &Ranges::default(), &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn exponential_conjugacy(alpha in 0.2f64..5.0, ln_y in -13.0f64..13.0) {
        let u = AgentUtility::exponential(alpha).unwrap();
        let y = ln_y.exp();
        let x = -u.v_prime(y).unwrap();
        prop_assert!((u.u_prime(x) / y - 1.0).abs() < 1e-12);
        let v = u.v(y).unwrap();
        prop_assert!((v - (u.u(x) - x * y)).abs() < 1e-9 * v.abs().max(1.0));
    }

    #[test]
    fn solver_output_is_an_equilibrium(seed in any::<u64>(), sd in any::<bool>()) {
        let i = instance(seed, sd);
        let p = UtilityProfile::exponential(&i.alphas).unwrap();
        let sol = solve_sorte(&i.model, &p, &i.spec, i.total, &SolverOptions::default()).unwrap();
        let scale = sol.primal_value.abs().max(1.0);
        prop_assert!(sol.diagnostics.gap.abs() <= 1e-8 * scale);
        prop_assert!(sol.diagnostics.clearing_residual <= 1e-9);
        prop_assert!((sol.a.iter().sum::<f64>() - i.total).abs() <= 1e-9);
        prop_assert!(sol.diagnostics.equivalent);
        prop_assert!(membership(&i.spec, &sol.y, 1e-9).unwrap().is_member);
        let r = verify_sorte(&i.model, &p, &i.spec, i.total, &sol.y, &sol.pricing, &sol.a, 1e-7).unwrap();
        prop_assert!(r.passed, "{:?}", r);
        let fair = check_fair_pricing(&i.model, &i.spec, &sol.pricing, 20, seed, 1e-9).unwrap();
        prop_assert!(fair.passed && fair.worst_excess.abs() < 1e-9);
    }

    #[test]
    fn deterministic_below_equilibrium_below_fixed_pricing(seed in any::<u64>(), sd in any::<bool>()) {
        let i = instance(seed, sd);
        let p = UtilityProfile::exponential(&i.alphas).unwrap();
        let opts = SolverOptions::default();
        let sol = solve_sorte(&i.model, &p, &i.spec, i.total, &opts).unwrap();
        let det = deterministic_allocation(&i.model, &p, i.total, &opts).unwrap();
        let scale = sol.primal_value.abs().max(1.0);
        prop_assert!(det.value <= sol.primal_value + 1e-12 * scale);
        let st = measure_structure(&i.spec, i.model.num_scenarios());
        let q = random_pricing(&i.model, &st, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        let fixed = solve_q_optimal(&i.model, &p, &q, i.total, &opts).unwrap();
        prop_assert!(sol.primal_value <= fixed.value + 1e-12 * scale);
    }

    #[test]
    fn value_increases_with_total(seed in any::<u64>(), sd in any::<bool>(), step in 0.01f64..2.0) {
        let i = instance(seed, sd);
        let p = UtilityProfile::exponential(&i.alphas).unwrap();
        let opts = SolverOptions::default();
        let lo = solve_sorte(&i.model, &p, &i.spec, i.total, &opts).unwrap();
        let hi = solve_sorte(&i.model, &p, &i.spec, i.total + step, &opts).unwrap();
        prop_assert!(hi.primal_value > lo.primal_value);
        prop_assert!(hi.lambda < lo.lambda);
    }

    #[test]
    fn weight_shift_sums_to_zero(
        params in prop::collection::vec((0.2f64..5.0, 0.5f64..2.0), 1..6)
    ) {
        let (alphas, gammas): (Vec<f64>, Vec<f64>) = params.into_iter().unzip();
        let g = weight_shift(&alphas, &gammas).unwrap();
        prop_assert!(g.iter().sum::<f64>().abs() <= 1e-14);
        let equal = weight_shift(&alphas, &vec![gammas[0]; alphas.len()]).unwrap();
        prop_assert!(equal.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn monotone_roots(a in 0.1f64..10.0, b in -5.0f64..5.0, c in -50.0f64..50.0) {
        let f = |x: f64| Ok(a * x * x * x + b.abs() * x + c);
        let search = Search { start: 0.0, step: 0.5, lower: -1e6, upper: 1e6 };
        let (x, _) = solve_monotone(f, Monotone::Increasing, search, &RootOptions::default(), "cubic").unwrap();
        prop_assert!((a * x * x * x + b.abs() * x + c).abs() <= 1e-9 * c.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn execution_mode_does_not_change_results(seed in any::<u64>(), sd in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fam = if sd { SpecFamily::ScenarioCluster } else { SpecFamily::Cluster };
        let i = sized_instance(3, 4, fam, &Ranges::default(), &mut rng);
        let p = UtilityProfile::exponential(&i.alphas).unwrap();
        let run = |execution| {
            brute_force_primal(&i.model, &p, &i.spec, i.total, &BruteForceOptions { execution, ..Default::default() })
                .unwrap()
        };
        prop_assert_eq!(run(Execution::Parallel), run(Execution::Sequential));
        let sol = solve_sorte(&i.model, &p, &i.spec, i.total, &SolverOptions::default()).unwrap();
        let mut y = sol.y.clone();
        y[(0, 0)] += 0.2;
        y[(1, 0)] -= 0.2;
        let check = |execution| {
            let opts = ParetoOptions { trials: 60, seed, execution, ..Default::default() };
            check_pareto(&i.model, &p, &i.spec, FeasibleSet::Budget, &y, &sol.pricing, &opts).unwrap()
        };
        prop_assert_eq!(check(Execution::Parallel), check(Execution::Sequential));
    }
}
