//! Command-line front end. [`run`] parses arguments, does the work and
//! returns the process exit code: 0 on success, 2 when a verification or
//! ordering check fails, 1 on any error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSpec, Kind};
use crate::dual::{
    brute_force_primal, solve_sorte, systemic_utility, BruteForceOptions, Diagnostics, EquilibriumSolution,
    SolverOptions,
};
use crate::error::{Error, Result};
use crate::exponential::buhlmann_equilibrium;
use crate::market::{load_market, write_matrix_csv, MarketModel, PricingVector, ScenarioDocument};
use crate::par::{self, Execution};
use crate::utility::{apply_weights, UtilityProfile};
use crate::verification::{deterministic_allocation, verify_sorte, VerificationReport};

#[derive(Debug, Parser)]
#[command(name = "sorte", version, about = "Systemic optimal risk transfer equilibria")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Tolerance for verification residuals and comparisons.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Param {
    #[value(name = "A")]
    Total,
    Gamma,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for the equilibrium and verify it.
    Solve {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Also maximize the primal directly and report the discrepancy.
        #[arg(long)]
        oracle: bool,
    },
    /// Compare deterministic, Bühlmann and equilibrium values.
    Compare {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Exogenous budgets for the Bühlmann equilibrium, comma separated.
        /// Defaults to an equal split of A.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        budget_vector: Option<Vec<f64>>,
    },
    /// Solve over a grid of A or weight values.
    Sweep {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: Param,
        /// Comma separated values or lo:hi:count.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        /// Vary only this agent's weight (0-based); all weights otherwise.
        #[arg(long)]
        agent: Option<usize>,
    },
    /// Check a claimed solution written by `solve --format json`.
    Verify {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solution: PathBuf,
    },
}

struct Problem {
    doc: ScenarioDocument,
    model: MarketModel,
    profile: UtilityProfile,
    spec: ConstraintSpec,
    total: f64,
}

fn load(path: &Path) -> Result<Problem> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let doc = ScenarioDocument::from_json(&text)?;
    let model = load_market(&doc)?;
    let profile = doc.utility.to_profile(model.num_agents())?;
    let spec = doc.constraints.to_spec(model.num_agents(), model.num_scenarios())?;
    if !doc.budget_a.is_finite() {
        return Err(Error::Validation("budget_A must be finite".into()));
    }
    let total = doc.budget_a;
    Ok(Problem { doc, model, profile, spec, total })
}

/// Output of `solve --format json`, also the input of `verify`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub agents: Vec<String>,
    pub scenarios: Vec<String>,
    pub allocation: Vec<Vec<f64>>,
    pub densities: Vec<Vec<f64>>,
    pub budgets: Vec<f64>,
    pub lambda: f64,
    pub primal_value: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub diagnostics: Diagnostics,
    pub verification: VerificationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub value: f64,
    pub value_difference: f64,
    pub max_allocation_difference: f64,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn fmt(v: f64) -> String {
    if v == 0.0 || (1e-4..1e7).contains(&v.abs()) {
        format!("{v:.10}")
    } else {
        format!("{v:.6e}")
    }
}

fn status(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn text_matrix(out: &mut dyn Write, model: &MarketModel, title: &str, m: &[Vec<f64>]) -> Result<()> {
    writeln!(out, "{title}")?;
    write!(out, "  {:<12}", "agent")?;
    for s in model.scenario_ids() {
        write!(out, " {s:>16}")?;
    }
    writeln!(out)?;
    for (label, row) in model.agent_ids().iter().zip(m) {
        write!(out, "  {label:<12}")?;
        for v in row {
            write!(out, " {:>16}", fmt(*v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn text_verification(out: &mut dyn Write, r: &VerificationReport) -> Result<()> {
    writeln!(out, "verification")?;
    for (name, c) in [
        ("(1) agent optimality", &r.agent_optimality),
        ("(2) budget optimality", &r.budget_optimality),
        ("(3) feasibility", &r.feasibility),
    ] {
        writeln!(out, "  {name:<24} {}  residual {:.3e}  {}", status(c.passed), c.residual, c.detail)?;
    }
    writeln!(out, "  {:<24} {}", "overall", status(r.passed))?;
    Ok(())
}

fn csv_pairs(out: &mut dyn Write, header: [&str; 2], pairs: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for (k, v) in pairs {
        w.write_record([k, v])?;
    }
    w.flush()?;
    Ok(())
}

fn solve_report(p: &Problem, sol: &EquilibriumSolution, tol: f64) -> Result<SolveReport> {
    let verification = verify_sorte(&p.model, &p.profile, &p.spec, p.total, &sol.y, &sol.pricing, &sol.a, tol)?;
    Ok(SolveReport {
        agents: p.model.agent_ids().to_vec(),
        scenarios: p.model.scenario_ids().to_vec(),
        allocation: rows(&sol.y),
        densities: rows(&sol.pricing.densities_matrix()),
        budgets: sol.a.clone(),
        lambda: sol.lambda,
        primal_value: sol.primal_value,
        dual_value: sol.dual_value,
        gap: sol.diagnostics.gap,
        diagnostics: sol.diagnostics.clone(),
        verification,
        oracle: None,
    })
}

fn cmd_solve(path: &Path, c: &Common, oracle: bool, out: &mut dyn Write) -> Result<i32> {
    let p = load(path)?;
    let sol = solve_sorte(&p.model, &p.profile, &p.spec, p.total, &SolverOptions::default())?;
    let mut report = solve_report(&p, &sol, c.tol)?;
    if oracle {
        let opts = BruteForceOptions { seed: c.seed, ..Default::default() };
        let b = brute_force_primal(&p.model, &p.profile, &p.spec, p.total, &opts)?;
        report.oracle = Some(OracleReport {
            value: b.value,
            value_difference: b.value - sol.primal_value,
            max_allocation_difference: (&b.y - &sol.y).amax(),
        });
    }
    match c.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes"))?,
        Format::Csv => {
            write_matrix_csv(&mut *out, &p.model, &sol.y)?;
            writeln!(out)?;
            write_matrix_csv(&mut *out, &p.model, &sol.pricing.densities_matrix())?;
            writeln!(out)?;
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(["agent", "budget", "multiplier"])?;
            for (k, id) in p.model.agent_ids().iter().enumerate() {
                w.write_record([
                    id.clone(),
                    format!("{:.12e}", report.budgets[k]),
                    format!("{:.12e}", report.verification.agent_lambdas[k]),
                ])?;
            }
            w.flush()?;
            drop(w);
            writeln!(out)?;
            let d = &report.diagnostics;
            let mut pairs: Vec<(String, String)> = [
                ("lambda", report.lambda),
                ("primal_value", report.primal_value),
                ("dual_value", report.dual_value),
                ("gap", report.gap),
                ("clearing_residual", d.clearing_residual),
                ("budget_residual", d.budget_residual),
                ("foc_residual", d.foc_residual),
                ("min_density", d.min_density),
            ]
            .iter()
            .map(|(k, v)| (k.to_string(), format!("{v:.12e}")))
            .collect();
            if let Some(o) = &report.oracle {
                pairs.push(("oracle_value".into(), format!("{:.12e}", o.value)));
                pairs
                    .push(("oracle_max_allocation_difference".into(), format!("{:.12e}", o.max_allocation_difference)));
            }
            pairs.push(("verification".into(), status(report.verification.passed).into()));
            csv_pairs(out, ["quantity", "value"], &pairs)?;
        }
        Format::Text => {
            writeln!(
                out,
                "equilibrium: {} agents, {} scenarios, A = {}",
                p.model.num_agents(),
                p.model.num_scenarios(),
                fmt(p.total)
            )?;
            writeln!(out, "  lambda        {}", fmt(report.lambda))?;
            writeln!(out, "  primal value  {}", fmt(report.primal_value))?;
            writeln!(out, "  dual value    {}", fmt(report.dual_value))?;
            writeln!(out, "  gap           {:.3e}", report.gap)?;
            let d = &report.diagnostics;
            writeln!(
                out,
                "  residuals     clearing {:.3e}  budget {:.3e}  foc {:.3e}  min density {:.3e}",
                d.clearing_residual, d.budget_residual, d.foc_residual, d.min_density
            )?;
            writeln!(out)?;
            text_matrix(out, &p.model, "allocation", &report.allocation)?;
            writeln!(out)?;
            text_matrix(out, &p.model, "pricing densities", &report.densities)?;
            writeln!(out)?;
            writeln!(out, "budgets")?;
            for (k, id) in p.model.agent_ids().iter().enumerate() {
                writeln!(
                    out,
                    "  {id:<12} {:>16}  multiplier {}  utility gain {}",
                    fmt(report.budgets[k]),
                    fmt(report.verification.agent_lambdas[k]),
                    fmt(report.verification.utility_gains[k])
                )?;
            }
            if let Some(o) = &report.oracle {
                writeln!(out)?;
                writeln!(
                    out,
                    "oracle: value {}  value difference {:.3e}  max allocation difference {:.3e}",
                    fmt(o.value),
                    o.value_difference,
                    o.max_allocation_difference
                )?;
            }
            writeln!(out)?;
            text_verification(out, &report.verification)?;
        }
    }
    Ok(if report.verification.passed { 0 } else { 2 })
}

#[derive(Debug, Deserialize)]
struct ClaimedSolution {
    allocation: Vec<Vec<f64>>,
    densities: Vec<Vec<f64>>,
    budgets: Vec<f64>,
}

fn cmd_verify(path: &Path, c: &Common, solution: &Path, out: &mut dyn Write) -> Result<i32> {
    let p = load(path)?;
    let text = std::fs::read_to_string(solution).map_err(|e| Error::Io(format!("{}: {e}", solution.display())))?;
    let claim: ClaimedSolution = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
    let (n, s) = (p.model.num_agents(), p.model.num_scenarios());
    if claim.allocation.len() != n || claim.allocation.iter().any(|r| r.len() != s) {
        return Err(Error::Dimension { expected: n * s, got: claim.allocation.iter().map(Vec::len).sum() });
    }
    let y = DMatrix::from_fn(n, s, |i, j| claim.allocation[i][j]);
    let pricing = PricingVector::from_densities(&p.model, claim.densities)?;
    let r = verify_sorte(&p.model, &p.profile, &p.spec, p.total, &y, &pricing, &claim.budgets, c.tol)?;
    match c.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&r).expect("report serializes"))?,
        Format::Csv => {
            let pairs: Vec<(String, String)> = [
                ("agent_optimality", &r.agent_optimality),
                ("budget_optimality", &r.budget_optimality),
                ("feasibility", &r.feasibility),
            ]
            .iter()
            .map(|(k, v)| (k.to_string(), format!("{:.12e}", v.residual)))
            .collect();
            csv_pairs(out, ["condition", "residual"], &pairs)?;
        }
        Format::Text => text_verification(out, &r)?,
    }
    Ok(if r.passed { 0 } else { 2 })
}

#[derive(Debug, Clone, Serialize)]
struct Comparison {
    deterministic: f64,
    buhlmann_budgets: Vec<f64>,
    buhlmann: Option<f64>,
    buhlmann_at_equilibrium_budgets: Option<f64>,
    sorte_full_sharing: Option<f64>,
    sorte: f64,
    checks: Vec<Check>,
}

#[derive(Debug, Clone, Serialize)]
struct Check {
    name: String,
    passed: bool,
}

fn cmd_compare(path: &Path, c: &Common, budget: Option<Vec<f64>>, out: &mut dyn Write) -> Result<i32> {
    let p = load(path)?;
    let n = p.model.num_agents();
    let opts = SolverOptions::default();
    let a = budget.unwrap_or_else(|| vec![p.total / n as f64; n]);
    if a.len() != n {
        return Err(Error::Dimension { expected: n, got: a.len() });
    }
    let sum: f64 = a.iter().sum();
    if (sum - p.total).abs() > 1e-9 * p.total.abs().max(1.0) {
        return Err(Error::Validation(format!("budget vector sums to {sum}, expected A = {}", p.total)));
    }
    let det = deterministic_allocation(&p.model, &p.profile, p.total, &opts)?;
    let sol = solve_sorte(&p.model, &p.profile, &p.spec, p.total, &opts)?;
    let le = |lo: f64, hi: f64| lo <= hi + c.tol * hi.abs().max(1.0);
    let mut checks = vec![Check { name: "deterministic <= sorte".into(), passed: le(det.value, sol.primal_value) }];
    let (mut buhl, mut buhl_hat, mut full_value) = (None, None, None);
    if let Some(alphas) = p.profile.alphas() {
        let full = if p.spec.kind() == Kind::Full {
            sol.clone()
        } else {
            solve_sorte(&p.model, &p.profile, &ConstraintSpec::full(n), p.total, &opts)?
        };
        let b = buhlmann_equilibrium(&p.model, &alphas, &a, &opts)?;
        let bh = buhlmann_equilibrium(&p.model, &alphas, &full.a, &opts)?;
        let (bv, bhv) = (systemic_utility(&p.model, &p.profile, &b.y), systemic_utility(&p.model, &p.profile, &bh.y));
        let fv = full.primal_value;
        checks.push(Check { name: "sorte <= sorte with full sharing".into(), passed: le(sol.primal_value, fv) });
        checks.push(Check { name: "buhlmann <= sorte with full sharing".into(), passed: le(bv, fv) });
        checks.push(Check {
            name: "buhlmann at equilibrium budgets = sorte with full sharing".into(),
            passed: (bhv - fv).abs() <= c.tol * fv.abs().max(1.0),
        });
        buhl = Some(bv);
        buhl_hat = Some(bhv);
        full_value = Some(fv);
    }
    let cmp = Comparison {
        deterministic: det.value,
        buhlmann_budgets: a,
        buhlmann: buhl,
        buhlmann_at_equilibrium_budgets: buhl_hat,
        sorte_full_sharing: full_value,
        sorte: sol.primal_value,
        checks,
    };
    let values: Vec<(String, Option<f64>)> = vec![
        ("deterministic".into(), Some(cmp.deterministic)),
        ("buhlmann".into(), cmp.buhlmann),
        ("buhlmann_at_equilibrium_budgets".into(), cmp.buhlmann_at_equilibrium_budgets),
        ("sorte_full_sharing".into(), cmp.sorte_full_sharing),
        ("sorte".into(), Some(cmp.sorte)),
    ];
    match c.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&cmp).expect("comparison serializes"))?,
        Format::Csv => {
            let mut pairs: Vec<(String, String)> =
                values.iter().map(|(k, v)| (k.clone(), v.map(|x| format!("{x:.12e}")).unwrap_or_default())).collect();
            pairs.extend(cmp.checks.iter().map(|ch| (ch.name.clone(), status(ch.passed).to_string())));
            csv_pairs(out, ["quantity", "value"], &pairs)?;
        }
        Format::Text => {
            writeln!(out, "value comparison")?;
            for (k, v) in &values {
                writeln!(out, "  {k:<34} {}", v.map(fmt).unwrap_or_else(|| "n/a".into()))?;
            }
            writeln!(out, "checks")?;
            for ch in &cmp.checks {
                writeln!(out, "  {:<58} {}", ch.name, status(ch.passed))?;
            }
        }
    }
    Ok(if cmp.checks.iter().all(|ch| ch.passed) { 0 } else { 2 })
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Validation(format!("invalid grid '{spec}'"));
    let parts: Vec<&str> = spec.split(':').collect();
    let grid = match parts.as_slice() {
        [lo, hi, count] => {
            let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
            let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
            let count: usize = count.trim().parse().map_err(|_| bad())?;
            match count {
                0 => return Err(bad()),
                1 => vec![lo],
                _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
            }
        }
        [list] => list.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<Vec<f64>>>()?,
        _ => return Err(bad()),
    };
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(grid)
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    parameter: f64,
    value: f64,
    lambda: f64,
    budgets: Vec<f64>,
}

fn cmd_sweep(
    path: &Path,
    c: &Common,
    param: Param,
    grid: &str,
    agent: Option<usize>,
    out: &mut dyn Write,
) -> Result<i32> {
    let p = load(path)?;
    let grid = parse_grid(grid)?;
    let n = p.model.num_agents();
    if let Some(k) = agent {
        if k >= n {
            return Err(Error::Index { index: k, len: n });
        }
    }
    let mut unweighted = p.doc.utility.clone();
    unweighted.gammas = None;
    let base = unweighted.to_profile(n)?;
    let base_weights = p.profile.weights();
    let opts = SolverOptions::default();
    let results = par::map(&grid, Execution::Parallel, |&v| -> Result<SweepRow> {
        let (profile, total) = match param {
            Param::Total => (p.profile.clone(), v),
            Param::Gamma => {
                let gammas: Vec<f64> = match agent {
                    Some(k) => (0..n).map(|i| if i == k { v } else { base_weights[i] }).collect(),
                    None => vec![v; n],
                };
                (apply_weights(&base, &gammas)?, p.total)
            }
        };
        let sol = solve_sorte(&p.model, &profile, &p.spec, total, &opts)?;
        Ok(SweepRow { parameter: v, value: sol.primal_value, lambda: sol.lambda, budgets: sol.a })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut monotone = true;
    if param == Param::Total {
        let mut sorted: Vec<&SweepRow> = rows.iter().collect();
        sorted.sort_by(|a, b| a.parameter.total_cmp(&b.parameter));
        monotone = sorted.windows(2).all(|w| w[0].parameter == w[1].parameter || w[1].value > w[0].value);
    }
    let name = match param {
        Param::Total => "A",
        Param::Gamma => "gamma",
    };
    match c.format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(&rows).expect("rows serialize"))?,
        Format::Csv | Format::Text => {
            let mut header = vec![name.to_string(), "value".into(), "lambda".into()];
            header.extend(p.model.agent_ids().iter().map(|id| format!("a_{id}")));
            if c.format == Format::Csv {
                let mut w = csv::Writer::from_writer(&mut *out);
                w.write_record(&header)?;
                for r in &rows {
                    let mut rec = vec![
                        format!("{:.12e}", r.parameter),
                        format!("{:.12e}", r.value),
                        format!("{:.12e}", r.lambda),
                    ];
                    rec.extend(r.budgets.iter().map(|a| format!("{a:.12e}")));
                    w.write_record(&rec)?;
                }
                w.flush()?;
            } else {
                for h in &header {
                    write!(out, "{h:>18}")?;
                }
                writeln!(out)?;
                for r in &rows {
                    write!(out, "{:>18}{:>18}{:>18}", fmt(r.parameter), fmt(r.value), fmt(r.lambda))?;
                    for a in &r.budgets {
                        write!(out, "{:>18}", fmt(*a))?;
                    }
                    writeln!(out)?;
                }
                if param == Param::Total {
                    writeln!(out, "value strictly increasing in A: {}", status(monotone))?;
                }
            }
        }
    }
    Ok(if monotone { 0 } else { 2 })
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let help = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let target: &mut dyn Write = if help { out } else { err };
            let _ = write!(target, "{}", e.render());
            return if help { 0 } else { 1 };
        }
    };
    let result = match &cli.command {
        Command::Solve { path, common, oracle } => cmd_solve(path, common, *oracle, out),
        Command::Compare { path, common, budget_vector } => cmd_compare(path, common, budget_vector.clone(), out),
        Command::Sweep { path, common, param, grid, agent } => cmd_sweep(path, common, *param, grid, *agent, out),
        Command::Verify { path, common, solution } => cmd_verify(path, common, solution, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
