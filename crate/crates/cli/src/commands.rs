use std::fmt::Write as _;

use anyhow::{bail, Result};
use memctrl_core::analytic::{self, ReferenceControl, SwitchRegime};
use memctrl_core::io::{
    adjoint_csv, gradient_triplets, hamiltonian_triplets, plan_to_dense_csv, plan_to_triplets, pmp_csv,
    records_csv, trajectory_csv,
};
use memctrl_core::problem::TimePoly;
use memctrl_core::{
    cost_breakdown, gradient_at, minimize, pmp_residual_of, relaxation_gap, solve_forward, solve_forward_picard,
    switch_report, CostBreakdown, FwOptions, ProblemSpec, StepRule, SwitchReport, TriangularPlan,
};
use serde::Serialize;
use serde_json::json;

use crate::inputs;
use crate::run::{Plot, RunDir};
use crate::{AnalyticArgs, FwArgs, ForwardArgs, Instance, OptimizeArgs, ProblemArgs, RelaxArgs, StepArg, VerifyArgs};

/// Picard sweeps allowed by `forward --picard`.
const PICARD_MAX_SWEEPS: usize = 200;
const PICARD_TOL: f64 = 1e-12;

/// Loaded problem and plans plus the run directory they were recorded in.
struct Prepared {
    problem: ProblemSpec,
    plans: Vec<Option<TriangularPlan>>,
    run: RunDir,
}

/// Loads the problem and the `(flag, spec)` plans, then opens the run
/// directory. Plan files are copied in as triplets so the replay arguments
/// only refer to files inside the directory.
fn prepare(
    command: &'static str,
    common: &ProblemArgs,
    plan_flags: &[(&str, Option<&str>)],
    extra: Vec<String>,
) -> Result<Prepared> {
    let problem = inputs::load(&common.problem, common.n)?;
    let mut replay = vec![command.to_owned(), "--problem".into(), "problem.json".into()];
    let mut plans = Vec::new();
    let mut copies = Vec::new();
    let mut recorded = serde_json::Map::new();
    for &(flag, spec) in plan_flags {
        let Some(spec) = spec else {
            plans.push(None);
            continue;
        };
        let plan = inputs::plan(spec, problem.grid())?;
        replay.push(format!("--{flag}"));
        if inputs::is_keyword(spec) {
            replay.push(spec.to_owned());
            recorded.insert(flag.to_owned(), spec.into());
        } else {
            let name = format!("{flag}_in.txt");
            let text = plan_to_triplets(&plan);
            replay.push(name.clone());
            recorded.insert(flag.to_owned(), text.clone().into());
            copies.push((name, text));
        }
        plans.push(Some(plan));
    }
    replay.extend(extra);
    let inputs = json!({ "problem": problem.to_file(), "plans": recorded });
    let mut run = RunDir::create(command, replay, inputs, common.out.as_deref())?;
    run.write_problem(&problem)?;
    for (name, text) in copies {
        run.write(&name, &text)?;
    }
    Ok(Prepared { problem, plans, run })
}

fn report_dir(path: &std::path::Path) {
    say!("run: {}", path.display());
}

#[derive(Serialize)]
struct ForwardResult {
    n_steps: usize,
    cost: f64,
    breakdown: CostBreakdown,
    x_final: Vec<f64>,
    sup_norm: f64,
    picard_sweeps: Option<usize>,
    picard_distance: Option<f64>,
}

#[derive(Serialize)]
struct PicardRow {
    sweep: usize,
    residual: f64,
}

pub fn forward(args: &ForwardArgs, argv: &[String]) -> Result<()> {
    let extra = if args.picard { vec!["--picard".to_owned()] } else { Vec::new() };
    let Prepared { problem, plans, mut run } = prepare("forward", &args.common, &[("plan", Some(&args.plan))], extra)?;
    let plan = plans[0].as_ref().expect("plan is always given");
    let traj = solve_forward(&problem, plan)?;
    let breakdown = cost_breakdown(&problem, plan, traj.states())?;
    run.write("trajectory.csv", &trajectory_csv(&traj))?;
    let mut plots = vec![Plot { csv: "trajectory.csv", title: "state", log_y: false }];
    let (mut sweeps, mut distance) = (None, None);
    if args.picard {
        let sol = solve_forward_picard(&problem, plan, PICARD_TOL, PICARD_MAX_SWEEPS)?;
        let rows: Vec<PicardRow> =
            sol.residuals.iter().enumerate().map(|(k, &r)| PicardRow { sweep: k + 1, residual: r }).collect();
        run.write("picard.csv", &records_csv(&rows)?)?;
        plots.push(Plot { csv: "picard.csv", title: "Picard residual", log_y: true });
        sweeps = Some(sol.iterations());
        distance = Some(sol.trajectory.sup_distance(&traj)?);
    }
    let result = ForwardResult {
        n_steps: problem.grid().n_steps(),
        cost: breakdown.total(),
        breakdown,
        x_final: traj.terminal().iter().copied().collect(),
        sup_norm: traj.sup_bound(),
        picard_sweeps: sweeps,
        picard_distance: distance,
    };
    say!("cost {:.10e}  x(1) = {:?}", result.cost, result.x_final);
    let path = run.finish(argv, None, &result, &plots)?;
    report_dir(&path);
    Ok(())
}

pub fn fw_options(fw: &FwArgs) -> FwOptions {
    FwOptions {
        max_iters: fw.max_iters,
        gap_tol: fw.gap_tol,
        step_rule: match fw.step {
            StepArg::Dim => StepRule::Diminishing,
            StepArg::Ls => StepRule::Backtracking,
        },
        n_starts: fw.starts,
        seed: fw.seed,
    }
}

pub fn fw_replay(fw: &FwArgs) -> Vec<String> {
    let step = match fw.step {
        StepArg::Dim => "dim",
        StepArg::Ls => "ls",
    };
    [
        ("--gap-tol", fw.gap_tol.to_string()),
        ("--max-iters", fw.max_iters.to_string()),
        ("--starts", fw.starts.to_string()),
        ("--seed", fw.seed.to_string()),
        ("--step", step.to_owned()),
    ]
    .into_iter()
    .flat_map(|(k, v)| [k.to_owned(), v])
    .collect()
}

#[derive(Serialize)]
pub struct OptimizeResult {
    pub n_steps: usize,
    pub cost: f64,
    pub breakdown: CostBreakdown,
    pub gap: f64,
    pub converged: bool,
    pub iterations: usize,
    pub start: String,
    pub switch: SwitchReport,
    pub max_residual: f64,
    pub worst_row: usize,
}

#[derive(Serialize)]
struct HistoryRow {
    iteration: usize,
    cost: f64,
    gap: f64,
}

pub const OPTIMIZE_PLOTS: [Plot; 4] = [
    Plot { csv: "trajectory.csv", title: "optimal state", log_y: false },
    Plot { csv: "adjoint.csv", title: "costate", log_y: false },
    Plot { csv: "history.csv", title: "Frank-Wolfe history", log_y: true },
    Plot { csv: "pmp.csv", title: "row residuals", log_y: false },
];

/// Optimizes and writes plan, paths, history and residuals into `run`.
pub fn optimize_into(
    run: &mut RunDir,
    problem: &ProblemSpec,
    opts: &FwOptions,
    warm: Option<&TriangularPlan>,
) -> Result<OptimizeResult> {
    let r = minimize(problem, opts, warm)?;
    let (traj, adj, _) = gradient_at(problem, &r.plan)?;
    let pmp = pmp_residual_of(problem, &r.plan, false)?;
    let history: Vec<HistoryRow> = r
        .cost_history
        .iter()
        .zip(&r.gap_history)
        .enumerate()
        .map(|(k, (&cost, &gap))| HistoryRow { iteration: k, cost, gap })
        .collect();
    run.write("plan.csv", &plan_to_dense_csv(&r.plan))?;
    run.write("trajectory.csv", &trajectory_csv(&traj))?;
    run.write("adjoint.csv", &adjoint_csv(&adj))?;
    run.write("history.csv", &records_csv(&history)?)?;
    run.write("pmp.csv", &pmp_csv(problem.grid(), &pmp))?;
    Ok(OptimizeResult {
        n_steps: problem.grid().n_steps(),
        cost: r.cost,
        breakdown: cost_breakdown(problem, &r.plan, traj.states())?,
        gap: r.gap,
        converged: r.converged,
        iterations: r.iterations,
        start: r.start,
        switch: switch_report(&r.plan),
        max_residual: pmp.max_residual,
        worst_row: pmp.worst_row,
    })
}

pub fn optimize(args: &OptimizeArgs, argv: &[String]) -> Result<()> {
    let opts = fw_options(&args.fw);
    opts.validate()?;
    let Prepared { problem, plans, mut run } =
        prepare("optimize", &args.common, &[("warm", args.warm.as_deref())], fw_replay(&args.fw))?;
    let result = optimize_into(&mut run, &problem, &opts, plans[0].as_ref())?;
    say!(
        "cost {:.10e}  gap {:.3e}  converged {}  iterations {}  start {}",
        result.cost, result.gap, result.converged, result.iterations, result.start
    );
    if let Some(t) = result.switch.switch_time {
        say!("switch at t = {t} (index {}), bang-bang {}", result.switch.switch_index.unwrap_or(0), result.switch.bang_bang);
    }
    let path = run.finish(argv, Some(opts.seed), &result, &OPTIMIZE_PLOTS)?;
    report_dir(&path);
    Ok(())
}

#[derive(Serialize)]
struct VerifyResult {
    max_residual: f64,
    worst_row: usize,
    sum_residuals: f64,
    fw_gap: f64,
    tol: f64,
    passed: bool,
}

pub fn verify(args: &VerifyArgs, argv: &[String]) -> Result<()> {
    if !(args.tol >= 0.0) {
        bail!("--tol must be nonnegative, got {}", args.tol);
    }
    let mut extra = vec!["--tol".to_owned(), args.tol.to_string()];
    if args.table {
        extra.push("--table".into());
    }
    let Prepared { problem, plans, mut run } = prepare("verify", &args.common, &[("plan", Some(&args.plan))], extra)?;
    let plan = plans[0].as_ref().expect("plan is always given");
    let report = pmp_residual_of(&problem, plan, args.table)?;
    let (_, _, grad) = gradient_at(&problem, plan)?;
    run.write("pmp.csv", &pmp_csv(problem.grid(), &report))?;
    run.write("gradient.txt", &gradient_triplets(&grad))?;
    if let Some(table) = hamiltonian_triplets(&report) {
        run.write("hamiltonian.txt", &table)?;
    }
    let result = VerifyResult {
        max_residual: report.max_residual,
        worst_row: report.worst_row,
        sum_residuals: report.sum_residuals(),
        fw_gap: problem.grid().step() * report.sum_residuals(),
        tol: args.tol,
        passed: report.max_residual <= args.tol,
    };
    say!("{:>6} {:>14}", "t", "residual");
    let grid = problem.grid();
    let stride = (grid.n_steps() / 10).max(1);
    for i in (0..grid.n_steps()).step_by(stride) {
        say!("{:>6.3} {:>14.6e}", grid.node(i), report.residuals[i]);
    }
    say!("max residual {:.6e} at row {} (tol {:e})", result.max_residual, result.worst_row, args.tol);
    let passed = result.passed;
    let path = run.finish(argv, None, &result, &[Plot { csv: "pmp.csv", title: "row residuals", log_y: false }])?;
    report_dir(&path);
    if !passed {
        bail!("maximum-principle residual {:e} exceeds tolerance {:e}", report.max_residual, args.tol);
    }
    Ok(())
}

#[derive(Serialize)]
struct RelaxResult {
    plan_cost: f64,
    levels: Vec<usize>,
    delay_costs: Vec<f64>,
    min_delay_cost: f64,
}

pub fn relax(args: &RelaxArgs, argv: &[String]) -> Result<()> {
    if args.levels.is_empty() || args.levels.contains(&0) {
        bail!("--levels needs positive integers");
    }
    let levels = args.levels.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let Prepared { problem, plans, mut run } =
        prepare("relax", &args.common, &[("plan", Some(&args.plan))], vec!["--levels".into(), levels])?;
    let plan = plans[0].as_ref().expect("plan is always given");
    let rows = relaxation_gap(&problem, plan, &args.levels)?;
    run.write("relax.csv", &records_csv(&rows)?)?;
    say!("{:>4} {:>8} {:>16} {:>16} {:>12}", "n", "steps", "F(theta_n)", "J(plan)", "gap");
    for r in &rows {
        say!("{:>4} {:>8} {:>16.8e} {:>16.8e} {:>12.4e}", r.n, r.n_steps, r.delay_cost, r.plan_cost, r.gap);
    }
    let result = RelaxResult {
        plan_cost: rows[0].plan_cost,
        levels: args.levels.clone(),
        delay_costs: rows.iter().map(|r| r.delay_cost).collect(),
        min_delay_cost: rows.iter().map(|r| r.delay_cost).fold(f64::INFINITY, f64::min),
    };
    let path = run.finish(argv, None, &result, &[Plot { csv: "relax.csv", title: "relaxation gap", log_y: true }])?;
    report_dir(&path);
    Ok(())
}

fn instance_problem(args: &AnalyticArgs) -> Result<ProblemSpec> {
    Ok(match args.instance {
        Instance::Scalar => analytic::scalar_instance(args.alpha, args.a, args.b, args.n)?,
        Instance::Nonexistence => analytic::nonexistence_instance(args.n)?.problem,
        Instance::TwoDim => analytic::two_dim_instance(
            args.alpha,
            args.beta,
            TimePoly::constant(args.a),
            TimePoly::constant(args.b),
            1.0,
            -1.0,
            args.n,
        )?,
    })
}

#[derive(Serialize)]
struct CostateRow {
    t: f64,
    q_closed: f64,
    q_discrete: f64,
    x_discrete: f64,
}

pub fn analytic(args: &AnalyticArgs, argv: &[String]) -> Result<()> {
    let problem = instance_problem(args)?;
    if let Some(path) = &args.emit_problem {
        std::fs::write(path, serde_json::to_string_pretty(&problem.to_file())? + "\n")?;
        say!("wrote {}", path.display());
        return Ok(());
    }
    match args.instance {
        Instance::Scalar => scalar_table(args, problem, argv),
        Instance::Nonexistence => nonexistence_table(args, problem, argv),
        Instance::TwoDim => two_dim_table(args, problem, argv),
    }
}

fn analytic_run(args: &AnalyticArgs, problem: &ProblemSpec) -> Result<RunDir> {
    let instance = match args.instance {
        Instance::Scalar => "scalar",
        Instance::Nonexistence => "nonexistence",
        Instance::TwoDim => "two-dim",
    };
    let replay: Vec<String> = [
        ("--instance", instance.to_owned()),
        ("--alpha", args.alpha.to_string()),
        ("--beta", args.beta.to_string()),
        ("--a", args.a.to_string()),
        ("--b", args.b.to_string()),
        ("--n", args.n.to_string()),
    ]
    .into_iter()
    .flat_map(|(k, v)| [k.to_owned(), v])
    .collect();
    let mut full = vec!["analytic".to_owned()];
    full.extend(replay);
    let mut run = RunDir::create("analytic", full, json!({ "problem": problem.to_file() }), None)?;
    run.write_problem(problem)?;
    Ok(run)
}

#[derive(Serialize)]
struct ScalarTable {
    threshold: f64,
    ratio: f64,
    t0: f64,
    t0_index: f64,
    discrete_switch: Option<usize>,
    reference_costs: Vec<(String, f64, f64)>,
}

fn scalar_table(args: &AnalyticArgs, problem: ProblemSpec, argv: &[String]) -> Result<()> {
    let (alpha, a, b, n) = (args.alpha, args.a, args.b, args.n);
    let regime = analytic::scalar_switch(alpha, a, b)?;
    let costate = analytic::scalar_costate(alpha, a, b)?;
    let threshold = analytic::scalar_threshold(alpha);
    let t0 = regime.t0();
    let switch = (t0 * n as f64).ceil() as usize;
    let plan = TriangularPlan::bang_bang(problem.grid(), switch.min(n));
    let (traj, adj, _) = gradient_at(&problem, &plan)?;

    let mut out = String::new();
    writeln!(out, "alpha = {alpha}, a = {a}, b = {b}, N = {n}")?;
    writeln!(out, "threshold (e^a - 1)/(a e^a) = {threshold:.8}, b/a = {:.8}", b / a)?;
    match regime {
        SwitchRegime::AllRecent => writeln!(out, "regime: delta_t on the whole interval")?,
        SwitchRegime::Switch { t0 } => {
            writeln!(out, "regime: delta_0 before t0 = {t0:.8}, delta_t after (t0 N = {:.3})", t0 * n as f64)?
        }
    }
    let mut references = Vec::new();
    writeln!(out, "\n{:<10} {:>14} {:>14}", "control", "closed form", "discrete")?;
    for (name, control, grid_plan) in [
        ("delta_0", ReferenceControl::AllZero, TriangularPlan::origin(problem.grid())),
        ("delta_t", ReferenceControl::AllRecent, TriangularPlan::recent(problem.grid())),
    ] {
        let r = analytic::scalar_reference(alpha, control);
        let closed = a * r.integral() + b * r.terminal();
        let t = solve_forward(&problem, &grid_plan)?;
        let discrete = cost_breakdown(&problem, &grid_plan, t.states())?.total();
        writeln!(out, "{name:<10} {closed:>14.8} {discrete:>14.8}")?;
        references.push((name.to_owned(), closed, discrete));
    }
    writeln!(out, "\n{:>6} {:>12} {:>12}", "t", "q closed", "q discrete")?;
    let grid = problem.grid();
    let rows: Vec<CostateRow> = (0..=n)
        .map(|i| CostateRow {
            t: grid.node(i),
            q_closed: costate.eval(grid.node(i)),
            q_discrete: adj.q(i)[0],
            x_discrete: traj.state(i)[0],
        })
        .collect();
    let stride = (n / 10).max(1);
    for r in rows.iter().step_by(stride) {
        writeln!(out, "{:>6.3} {:>12.6} {:>12.6}", r.t, r.q_closed, r.q_discrete)?;
    }
    say!("{}", out.trim_end());

    let mut run = analytic_run(args, &problem)?;
    run.write("analytic.csv", &records_csv(&rows)?)?;
    run.write("table.txt", &out)?;
    let table = ScalarTable {
        threshold,
        ratio: b / a,
        t0,
        t0_index: t0 * n as f64,
        discrete_switch: switch_report(&plan).switch_index,
        reference_costs: references,
    };
    let path = run.finish(argv, None, &table, &[Plot { csv: "analytic.csv", title: "costate and state", log_y: false }])?;
    report_dir(&path);
    Ok(())
}

#[derive(Serialize)]
struct NonexistenceRow {
    t: f64,
    x_closed: f64,
    x_discrete: f64,
}

fn nonexistence_table(args: &AnalyticArgs, problem: ProblemSpec, argv: &[String]) -> Result<()> {
    let plan = analytic::NonexistenceInstance::optimal_plan(problem.grid());
    let traj = solve_forward(&problem, &plan)?;
    let cost = cost_breakdown(&problem, &plan, traj.states())?;
    let grid = problem.grid();
    let rows: Vec<NonexistenceRow> = (0..=grid.n_steps())
        .map(|i| NonexistenceRow {
            t: grid.node(i),
            x_closed: analytic::nonexistence_state(grid.node(i)),
            x_discrete: traj.state(i)[0],
        })
        .collect();
    let err = rows.iter().map(|r| (r.x_closed - r.x_discrete).abs()).fold(0.0, f64::max);
    say!("half plan on N = {}: J = {:.6e} (tracking {:.6e}, memory {:.6e})", args.n, cost.total(), cost.running, cost.memory);
    say!("sup |x - (2 e^(t/2) - 1)| = {err:.6e}");
    let mut run = analytic_run(args, &problem)?;
    run.write("analytic.csv", &records_csv(&rows)?)?;
    let path = run.finish(
        argv,
        None,
        &json!({ "cost": cost.total(), "breakdown": cost, "state_error": err }),
        &[Plot { csv: "analytic.csv", title: "state", log_y: false }],
    )?;
    report_dir(&path);
    Ok(())
}

fn two_dim_table(args: &AnalyticArgs, problem: ProblemSpec, argv: &[String]) -> Result<()> {
    let (a, b) = (args.a, args.b);
    let report = analytic::two_dim_conditions(args.alpha, args.beta, &|_| a, &|_| b, 1.0, -1.0, args.n)?;
    say!("|x| <= {:.6}, |y| <= {:.6}, |q1| <= {:.6}, |q2| <= {:.6}", report.x_bound, report.y_bound, report.q1_bound, report.q2_bound);
    say!("margins: a {:.6}, b {:.6}", report.a_margin, report.b_margin);
    say!(
        "delta_0 near t = 1: {}, delta_t near t = 0: {}, delta_0 throughout: {}",
        report.origin_near_end, report.recent_near_start, report.origin_everywhere
    );
    let run = analytic_run(args, &problem)?;
    let path = run.finish(argv, None, &report, &[])?;
    report_dir(&path);
    Ok(())
}
