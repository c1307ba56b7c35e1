//! Realizing relaxed plans by delay functions.
//!
//! A plan `γ = ν_t ⊗ dt` is approximated by `δ_{θ_n} ⊗ dt`, where `θ_n(t)`
//! samples `ν_t` through its quantile function at the fast phase
//! `frac(n t)`. As `n` grows the Dirac plans converge weakly-* to `γ`, and
//! so do the costs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{solve_deviated, solve_forward};
use crate::measures::{DelayFunction, TriangularPlan};
use crate::problem::{cost_breakdown, total_cost, ProblemSpec};

/// Minimum number of fine cells per oscillation period.
pub const CELLS_PER_PERIOD: usize = 4;

/// Refinement factor used for oscillation `n` on a grid of `n_steps`
/// steps: at least `n`, and large enough that each period spans
/// [`CELLS_PER_PERIOD`] fine cells.
pub fn refinement_factor(n_steps: usize, n: usize) -> usize {
    n * CELLS_PER_PERIOD.div_ceil(n_steps).max(1)
}

/// Smallest `j` whose cumulative weight exceeds `u`.
fn quantile(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &w) in row.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = j;
            if acc > u {
                return j;
            }
        }
    }
    last
}

/// Delay function on the grid refined by [`refinement_factor`] whose value
/// on fine cell `k` is the quantile of the coarse row containing it, taken
/// at the phase `frac(n τ)` of the cell midpoint `τ`, clipped at the cell's
/// own node.
pub fn delay_realization(plan: &TriangularPlan, n: usize) -> Result<DelayFunction> {
    if n == 0 {
        return Err(Error::InvalidArgument("oscillation count must be at least 1".into()));
    }
    let coarse = plan.grid();
    let factor = refinement_factor(coarse.n_steps(), n);
    let fine = coarse.refine(factor)?;
    let hf = fine.step();
    let theta = (0..fine.n_steps())
        .map(|k| {
            let i = k / factor;
            let mid = fine.node(k) + 0.5 * hf;
            let phase = (n as f64 * mid).fract();
            let j = quantile(plan.row(i), phase);
            (j * factor).min(k)
        })
        .collect();
    DelayFunction::new(fine, theta)
}

/// `F(θ) = J(δ_θ ⊗ dt)` on the grid of `delay`.
pub fn delay_cost(problem: &ProblemSpec, delay: &DelayFunction) -> Result<f64> {
    let fine_problem = problem.with_n_steps(delay.grid().n_steps())?;
    let traj = solve_deviated(&fine_problem, delay)?;
    let grid = delay.grid();
    let h = grid.step();
    let memory: f64 = delay
        .theta()
        .iter()
        .enumerate()
        .map(|(k, &j)| fine_problem.cost().memory(grid.node(k), grid.node(j)))
        .sum::<f64>()
        * h;
    let parts = running_terminal(&fine_problem, traj.states())?;
    Ok(parts + memory)
}

fn running_terminal(problem: &ProblemSpec, states: &[nalgebra::DVector<f64>]) -> Result<f64> {
    let grid = problem.grid();
    let n = grid.n_steps();
    let h = grid.step();
    let mut running = 0.0;
    for (i, x) in states.iter().take(n).enumerate() {
        running += problem.cost().running(grid.node(i), x);
    }
    let total = h * running + problem.cost().terminal(&states[n]);
    if !total.is_finite() {
        return Err(Error::NonFinite { what: "delay cost", node: n });
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapRow {
    pub n: usize,
    pub n_steps: usize,
    pub delay_cost: f64,
    pub plan_cost: f64,
    pub gap: f64,
}

/// `F(θ_n)` and `|F(θ_n) − J(γ)|` for each oscillation count.
pub fn relaxation_gap(problem: &ProblemSpec, plan: &TriangularPlan, n_list: &[usize]) -> Result<Vec<GapRow>> {
    if !problem.cost().memory.is_closed_form() {
        return Err(Error::InvalidArgument(
            "relaxation needs a continuous memory cost; tabulated costs are not supported".into(),
        ));
    }
    problem.grid().check_same(&plan.grid())?;
    let traj = solve_forward(problem, plan)?;
    let plan_cost = total_cost(problem, plan, &traj)?;
    n_list
        .iter()
        .map(|&n| {
            let delay = delay_realization(plan, n)?;
            let f = delay_cost(problem, &delay)?;
            Ok(GapRow {
                n,
                n_steps: delay.grid().n_steps(),
                delay_cost: f,
                plan_cost,
                gap: (f - plan_cost).abs(),
            })
        })
        .collect()
}

/// `true` when each gap is at most `(1 + slack)` times the previous one.
pub fn gaps_decreasing(rows: &[GapRow], slack: f64) -> bool {
    rows.windows(2).all(|w| w[1].gap <= (1.0 + slack) * w[0].gap)
}

/// `∫ φ dγ` for the plan (left nodes) and `∫ φ d(δ_θ ⊗ dt)` for a delay.
pub fn plan_moment(plan: &TriangularPlan, phi: impl Fn(f64, f64) -> f64) -> f64 {
    let grid = plan.grid();
    plan.integrate(|i, j| phi(grid.node(i), grid.node(j)))
}

pub fn delay_moment(delay: &DelayFunction, phi: impl Fn(f64, f64) -> f64) -> f64 {
    let grid = delay.grid();
    grid.step()
        * delay
            .theta()
            .iter()
            .enumerate()
            .map(|(k, &j)| phi(grid.node(k), grid.node(j)))
            .sum::<f64>()
}

/// Discrete cost of a plan split into terms; re-exported for reporting.
pub fn plan_cost_terms(problem: &ProblemSpec, plan: &TriangularPlan) -> Result<crate::problem::CostBreakdown> {
    let traj = solve_forward(problem, plan)?;
    cost_breakdown(problem, plan, traj.states())
}
