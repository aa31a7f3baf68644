//! Acceptance criteria 1–10. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sorte::constraints::{measure_structure, membership, random_member, random_pricing, ConstraintSpec, Kind};
use sorte::dual::{brute_force_primal, dual_objective, solve_sorte, DualPoint, EquilibriumSolution, SolverOptions};
use sorte::exponential::{buhlmann_equilibrium, sorte_exponential, weight_shift, weight_translation};
use sorte::instances::{random_instance, sized_instance, Instance, Ranges, SpecFamily};
use sorte::market::{expectation, group_aggregate, MarketModel};
use sorte::utility::{apply_weights, UtilityProfile};
use sorte::verification::{check_pareto, deterministic_allocation, verify_sorte, FeasibleSet, ParetoOptions};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn solve(i: &Instance) -> (UtilityProfile, EquilibriumSolution) {
    let p = UtilityProfile::exponential(&i.alphas).unwrap();
    let sol = solve_sorte(&i.model, &p, &i.spec, i.total, &SolverOptions::default()).unwrap();
    (p, sol)
}

fn fuzz(seed: u64, count: usize, mixed: bool) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let fam = if mixed && k % 2 == 1 { SpecFamily::ScenarioCluster } else { SpecFamily::Cluster };
            random_instance(fam, &Ranges::default(), &mut rng)
        })
        .collect()
}

fn toy_solution(alphas: &[f64], s: usize) -> (MarketModel, EquilibriumSolution) {
    let n = alphas.len();
    let model = MarketModel::from_parts(vec![1.0 / s as f64; s], vec![vec![0.0; s]; n]).unwrap();
    let p = UtilityProfile::exponential(alphas).unwrap();
    let sol = solve_sorte(&model, &p, &ConstraintSpec::full(n), 0.0, &SolverOptions::default()).unwrap();
    (model, sol)
}

fn criterion_1() -> Outcome {
    let mut worst = 0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases: Vec<Vec<f64>> = vec![vec![1.0, 2.0]];
    for _ in 0..20 {
        let n = rng.random_range(2..=5);
        cases.push((0..n).map(|_| rng.random_range(0.2..5.0)).collect());
    }
    for alphas in &cases {
        let (_, sol) = toy_solution(alphas, 3);
        let beta: f64 = alphas.iter().map(|a| 1.0 / a).sum();
        let xi: f64 = alphas.iter().map(|a| (1.0 / a) * (1.0 / a).ln()).sum();
        let e_r: f64 = alphas.iter().map(|a| a.ln() / (a * beta)).sum();
        for (k, a) in alphas.iter().enumerate() {
            let expected = (a.ln() - e_r) / a;
            for j in 0..3 {
                worst = worst.max((sol.y[(k, j)] - expected).abs());
                worst = worst.max((sol.pricing.density(k)[j] - 1.0).abs());
            }
        }
        let value = alphas.len() as f64 - beta * (-xi / beta).exp();
        worst = worst.max((sol.primal_value - value).abs());
    }
    let (_, toy) = toy_solution(&[1.0, 2.0], 2);
    worst = worst.max((toy.y[(0, 0)] + 0.231049060186648).abs());
    worst = worst.max((toy.y[(1, 1)] - 0.231049060186648).abs());
    worst = worst.max((toy.primal_value - (2.0 - 1.5 * 2f64.cbrt())).abs());
    let (_, eq) = toy_solution(&[1.7; 3], 4);
    let zero = eq.y.amax().max(eq.a.iter().fold(0f64, |m, a| m.max(a.abs()))).max(eq.primal_value.abs());
    let dens = (0..3).flat_map(|k| eq.pricing.density(k).to_vec()).fold(0f64, |m, d| m.max((d - 1.0).abs()));
    worst = worst.max(zero).max(dens);
    (worst <= 1e-8, format!("toy value {:.10}, worst deviation {worst:.2e}", toy.primal_value))
}

fn criterion_2() -> Outcome {
    let mut worst = [0f64; 5];
    for i in fuzz(2, 200, false) {
        let (_, sol) = solve(&i);
        let cf = sorte_exponential(&i.model, &i.alphas, &i.spec, i.total).unwrap();
        worst[0] = worst[0].max(max_abs(&sol.y, &cf.y));
        worst[1] = worst[1].max(max_abs(&sol.pricing.densities_matrix(), &cf.pricing.densities_matrix()));
        worst[2] = worst[2].max(sol.a.iter().zip(&cf.a).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        worst[3] = worst[3].max(rel(sol.lambda, cf.lambda));
        worst[4] = worst[4].max(rel(sol.primal_value, cf.dual_value));
    }
    let ok = worst.iter().all(|w| *w <= 1e-8);
    (
        ok,
        format!(
            "200 instances: Y {:.1e}, densities {:.1e}, budgets {:.1e}, lambda (rel) {:.1e}, value (rel) {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut dv, mut dy, mut infeasible) = (0f64, 0f64, 0);
    for k in 0..50 {
        let fam = if k % 2 == 0 { SpecFamily::Cluster } else { SpecFamily::ScenarioCluster };
        let n = rng.random_range(1..=4usize);
        let s = rng.random_range(2..=(12 / n).max(2));
        let i = sized_instance(n, s, fam, &Ranges::default(), &mut rng);
        let (p, sol) = solve(&i);
        let b = brute_force_primal(&i.model, &p, &i.spec, i.total, &Default::default()).unwrap();
        if !membership(&i.spec, &b.y, 1e-8).unwrap().is_member {
            infeasible += 1;
        }
        dv = dv.max((b.value - sol.primal_value).abs());
        dy = dy.max(max_abs(&b.y, &sol.y));
    }
    (
        dv <= 1e-5 && dy <= 1e-4 && infeasible == 0,
        format!("50 instances: value {dv:.1e}, allocation {dy:.1e}, infeasible oracle points {infeasible}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut gap, mut weak) = (0f64, f64::INFINITY);
    let instances = fuzz(40, 60, true);
    for i in &instances {
        let (p, sol) = solve(i);
        gap = gap.max(sol.diagnostics.gap.abs() / sol.primal_value.abs().max(1.0));
        let st = measure_structure(&i.spec, i.model.num_scenarios());
        for _ in 0..100 {
            let pricing = random_pricing(&i.model, &st, &mut rng).unwrap();
            let lambda = sol.lambda * rng.random_range(-3.0f64..3.0).exp();
            let k = dual_objective(&i.model, &p, i.total, &DualPoint { lambda, pricing }).unwrap();
            weak = weak.min((k - sol.primal_value) / sol.primal_value.abs().max(1.0));
        }
    }
    (
        gap <= 1e-8 && weak >= -1e-12,
        format!("60 instances: max relative gap {gap:.1e}; min (dual − primal) over 6000 dual points {weak:.1e}"),
    )
}

fn criterion_5() -> Outcome {
    let (mut failed, mut clearing, mut a_id, mut formula) = (0, 0f64, 0f64, 0f64);
    let instances = fuzz(5, 200, true);
    for i in &instances {
        let (p, sol) = solve(i);
        let r = verify_sorte(&i.model, &p, &i.spec, i.total, &sol.y, &sol.pricing, &sol.a, 1e-7).unwrap();
        if !r.passed {
            failed += 1;
        }
        let (n, s) = (i.model.num_agents(), i.model.num_scenarios());
        let mut priced = 0.0;
        for k in 0..n {
            let row: Vec<f64> = sol.y.row(k).iter().copied().collect();
            let e = expectation(&i.model, sol.pricing.measure(k), &row).unwrap();
            a_id = a_id.max((e - sol.a[k]).abs());
            priced += e;
        }
        for j in 0..s {
            let col = sol.y.column(j).sum();
            clearing = clearing.max((col - i.total).abs());
            formula = formula.max((col - priced).abs());
        }
    }
    (
        failed == 0 && clearing <= 1e-9 && a_id <= 1e-10 && formula <= 1e-9,
        format!(
            "200 instances: verification failures {failed}, clearing {clearing:.1e}, budget identity {a_id:.1e}, ΣY = ΣE_Q[Y] {formula:.1e}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut group = 0f64;
    for i in fuzz(6, 100, true) {
        let (_, sol) = solve(&i);
        let st = measure_structure(&i.spec, i.model.num_scenarios());
        for c in &st.cells {
            for &k in &c.group {
                for &j in &c.scenarios {
                    group = group.max((sol.pricing.density(k)[j] - sol.pricing.density(c.group[0])[j]).abs());
                }
            }
        }
    }
    // scenarios 3..6 repeat the aggregate of scenarios 0..3 with a different split
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut tie = 0f64;
    for _ in 0..30 {
        let n = rng.random_range(2..=5usize);
        let mut x = vec![vec![0.0; 6]; n];
        for j in 0..3 {
            let mut shift: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = shift.iter().sum::<f64>() / n as f64;
            shift.iter_mut().for_each(|v| *v -= m);
            for k in 0..n {
                x[k][j] = rng.random_range(-3.0..3.0);
                x[k][j + 3] = x[k][j] + shift[k];
            }
        }
        let probs = sorte::instances::random_probs(6, &mut rng);
        let model = MarketModel::from_parts(probs, x).unwrap();
        let alphas: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..5.0)).collect();
        let p = UtilityProfile::exponential(&alphas).unwrap();
        let sol =
            solve_sorte(&model, &p, &ConstraintSpec::full(n), rng.random_range(-2.0..2.0), &SolverOptions::default())
                .unwrap();
        for k in 0..n {
            let d = sol.pricing.density(k);
            for j in 0..3 {
                tie = tie.max((d[j] - d[j + 3]).abs());
            }
        }
    }
    (
        group <= 1e-12 && tie <= 1e-10,
        format!("group density spread {group:.1e}; equal-aggregate scenario spread {tie:.1e}"),
    )
}

fn criterion_7() -> Outcome {
    let model = MarketModel::from_parts(
        vec![0.2, 0.3, 0.1, 0.4],
        vec![
            vec![1.0, -1.0, 0.5, 0.0],
            vec![0.5, 0.0, -1.0, 2.0],
            vec![-2.0, 1.0, 1.5, 0.0],
            vec![0.0, 1.0, -0.5, -1.0],
        ],
    )
    .unwrap();
    let alphas = [1.0, 2.0, 0.5, 3.0];
    let groups = [vec![0, 1], vec![2, 3]];
    let spec = ConstraintSpec::cluster(&groups, 4).unwrap();
    let p = UtilityProfile::exponential(&alphas).unwrap();
    let sol = solve_sorte(&model, &p, &spec, 0.0, &SolverOptions::default()).unwrap();
    let diff =
        sol.pricing.density(0).iter().zip(sol.pricing.density(2)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut formula = 0f64;
    for g in &groups {
        let beta: f64 = g.iter().map(|&k| 1.0 / alphas[k]).sum();
        let xbar = group_aggregate(&model, g).unwrap();
        let w: Vec<f64> = xbar.iter().map(|x| (-x / beta).exp()).collect();
        let norm = model.mean(w.iter().copied());
        for &k in g {
            for (d, wj) in sol.pricing.density(k).iter().zip(&w) {
                formula = formula.max((d - wj / norm).abs());
            }
        }
    }
    (diff > 1e-3 && formula <= 1e-8, format!("cluster densities differ by {diff:.3e}; closed-form match {formula:.1e}"))
}

fn criterion_8() -> Outcome {
    let opts = SolverOptions::default();
    let (mut order, mut full_order, mut buhl_eq, mut none_eq) = (f64::INFINITY, f64::INFINITY, 0f64, 0f64);
    for i in fuzz(8, 100, true) {
        let (p, sol) = solve(&i);
        let n = i.model.num_agents();
        let det = deterministic_allocation(&i.model, &p, i.total, &opts).unwrap();
        order = order.min((sol.primal_value - det.value) / sol.primal_value.abs().max(1.0));
        let full = solve_sorte(&i.model, &p, &ConstraintSpec::full(n), i.total, &opts).unwrap();
        let split = vec![i.total / n as f64; n];
        let b = buhlmann_equilibrium(&i.model, &i.alphas, &split, &opts).unwrap();
        full_order = full_order.min((full.primal_value - b.value) / full.primal_value.abs().max(1.0));
        let bh = buhlmann_equilibrium(&i.model, &i.alphas, &full.a, &opts).unwrap();
        buhl_eq = buhl_eq.max(rel(bh.value, full.primal_value));
        if i.spec.kind() == Kind::None || n == 1 {
            none_eq = none_eq.max(rel(det.value, sol.primal_value));
        }
        let none = solve_sorte(&i.model, &p, &ConstraintSpec::no_sharing(n), i.total, &opts).unwrap();
        none_eq = none_eq.max(rel(det.value, none.primal_value));
    }
    let model = MarketModel::from_parts(
        vec![0.25; 4],
        vec![vec![2.0, -2.0, 1.0, -1.0], vec![-2.0, 2.0, -1.0, 1.0], vec![0.5, 0.0, -0.5, 0.0]],
    )
    .unwrap();
    let p = UtilityProfile::exponential(&[0.5, 2.0, 1.0]).unwrap();
    let sol = solve_sorte(&model, &p, &ConstraintSpec::full(3), 0.0, &opts).unwrap();
    let det = deterministic_allocation(&model, &p, 0.0, &opts).unwrap();
    let strict = sol.primal_value - det.value;
    let ok = order >= -1e-12 && full_order >= -1e-12 && buhl_eq <= 1e-8 && none_eq <= 1e-8 && strict > 1e-3;
    (
        ok,
        format!(
            "min(sorte − deterministic) {order:.1e}; min(full − buhlmann) {full_order:.1e}; buhlmann at equilibrium budgets {buhl_eq:.1e}; no sharing = deterministic {none_eq:.1e}; constructed gain {strict:.4}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut dy, mut dq, mut sum_g) = (0f64, 0f64, 0f64);
    for k in 0..50 {
        let fam = if k % 2 == 0 { SpecFamily::Cluster } else { SpecFamily::ScenarioCluster };
        let i = random_instance(fam, &Ranges::default(), &mut rng);
        let n = i.model.num_agents();
        let gammas: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let (p, base) = solve(&i);
        let weighted =
            solve_sorte(&i.model, &apply_weights(&p, &gammas).unwrap(), &i.spec, i.total, &SolverOptions::default())
                .unwrap();
        let moved = weight_translation(&i.model, &base, &i.alphas, &gammas).unwrap();
        dy = dy.max(max_abs(&weighted.y, &moved.y));
        dq = dq.max(max_abs(&weighted.pricing.densities_matrix(), &base.pricing.densities_matrix()));
        sum_g = sum_g.max(weight_shift(&i.alphas, &gammas).unwrap().iter().sum::<f64>().abs());
    }
    (
        dy <= 1e-8 && dq <= 1e-8 && sum_g <= 1e-14,
        format!("50 pairs: allocation {dy:.1e}, densities {dq:.1e}, |Σg| {sum_g:.1e}"),
    )
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut sorte_fail, mut checked) = (0, 0);
    let (mut runs, mut detected) = (0, 0);
    let mut k = 0u64;
    while runs < 100 {
        k += 1;
        let fam = if k.is_multiple_of(2) { SpecFamily::Cluster } else { SpecFamily::ScenarioCluster };
        let i = random_instance(fam, &Ranges::default(), &mut rng);
        let n = i.model.num_agents();
        if n < 2 {
            continue;
        }
        let (p, sol) = solve(&i);
        let s = i.model.num_scenarios();
        let st = measure_structure(&i.spec, s);
        let z = random_member(&st, n, s, 0.3, &mut rng);
        let y = &sol.y + z.add_scalar(-z.column(0).sum() / n as f64);
        let r = verify_sorte(&i.model, &p, &i.spec, i.total, &y, &sol.pricing, &sol.a, 1e-7).unwrap();
        if r.foc_residual <= 1e-3 {
            continue;
        }
        for set in [FeasibleSet::Constraint, FeasibleSet::Budget] {
            let opts = ParetoOptions { trials: 500, seed: k, ..Default::default() };
            if checked < 40 {
                checked += 1;
                if !check_pareto(&i.model, &p, &i.spec, set, &sol.y, &sol.pricing, &opts).unwrap().is_pareto {
                    sorte_fail += 1;
                }
            }
            runs += 1;
            if !check_pareto(&i.model, &p, &i.spec, set, &y, &sol.pricing, &opts).unwrap().is_pareto {
                detected += 1;
            }
        }
    }
    let rate = detected as f64 / runs as f64;
    (
        sorte_fail == 0 && rate >= 0.99,
        format!(
            "equilibria judged Pareto {}/{checked}; perturbed allocations rejected {detected}/{runs}",
            checked - sorte_fail
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("toy example", criterion_1),
        ("closed-form equivalence", criterion_2),
        ("brute-force equivalence", criterion_3),
        ("strong and weak duality", criterion_4),
        ("equilibrium conditions", criterion_5),
        ("pricing measure structure", criterion_6),
        ("multiple pricing measures", criterion_7),
        ("value ordering", criterion_8),
        ("weight translation", criterion_9),
        ("pareto optimality", criterion_10),
    ];
    let mut all = true;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let t = std::time::Instant::now();
        let (ok, detail) = f();
        all &= ok;
        println!(
            "criterion {:>2} {:<27} {}  {detail}  ({:.2?})",
            k + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            t.elapsed()
        );
    }
    if !all {
        std::process::exit(1);
    }
}
