//! Frank–Wolfe minimization over the polytope of triangular plans.
//!
//! The linear minimization oracle over the plan polytope decouples by rows:
//! each row puts all of its mass on a minimizer of the corresponding
//! gradient row, which is a maximizer of the Hamiltonian row. Iterates are
//! convex combinations of feasible plans and need no projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{gradient_at, PlanGradient};
use crate::error::{Error, Result};
use crate::measures::{convex_combine, TriangularPlan};
use crate::problem::{total_cost, ProblemSpec};

/// Sufficient-decrease constant of the backtracking rule.
pub const ARMIJO: f64 = 1e-4;
/// Shrink factor of the backtracking rule.
pub const SHRINK: f64 = 0.5;
const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `s_k = 2 / (k + 2)`.
    Diminishing,
    /// Start from `s = 1`, halve until sufficient decrease.
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwOptions {
    pub max_iters: usize,
    pub gap_tol: f64,
    pub step_rule: StepRule,
    /// Number of random Dirichlet starts, in addition to the `δ_t` and `δ_0`
    /// plans.
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for FwOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            gap_tol: 1e-8,
            step_rule: StepRule::Backtracking,
            n_starts: 4,
            seed: 0,
        }
    }
}

impl FwOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.gap_tol > 0.0) {
            return Err(Error::InvalidArgument(format!("gap_tol must be positive, got {}", self.gap_tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FwResult {
    pub plan: TriangularPlan,
    pub cost: f64,
    /// Gap at the final plan.
    pub gap: f64,
    pub gap_history: Vec<f64>,
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Which start produced this result.
    pub start: String,
}

/// Row-wise minimizer of the gradient; exact ties go to the earliest node,
/// so rows whose gradient is flat (for instance the last row when there is
/// no terminal cost) resolve to `δ_0`.
pub fn fw_oracle(gradient: &PlanGradient) -> TriangularPlan {
    let grid = gradient.grid();
    TriangularPlan::dirac(grid, |i| {
        let row = gradient.row(i);
        let mut best = 0;
        for (j, &g) in row.iter().enumerate() {
            if g < row[best] {
                best = j;
            }
        }
        best
    })
    .expect("row minimizers are admissible")
}

/// `Σ_{i,j} G[i][j] (current − oracle)[i][j]`, evaluated row by row after
/// shifting each gradient row by its minimum.
pub fn fw_gap(gradient: &PlanGradient, current: &TriangularPlan, oracle: &TriangularPlan) -> Result<f64> {
    gradient.grid().check_same(&current.grid())?;
    current.grid().check_same(&oracle.grid())?;
    Ok((0..current.n_steps())
        .map(|i| {
            let row = gradient.row(i);
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            row.iter()
                .zip(current.row(i).iter().zip(oracle.row(i)))
                .map(|(g, (c, o))| (c - o) * (g - min))
                .sum::<f64>()
        })
        .sum())
}

fn cost_of(problem: &ProblemSpec, plan: &TriangularPlan) -> Result<f64> {
    let traj = crate::forward::solve_forward(problem, plan)?;
    total_cost(problem, plan, &traj)
}

/// Frank–Wolfe from a single starting plan.
pub fn frank_wolfe(problem: &ProblemSpec, start: TriangularPlan, opts: &FwOptions) -> Result<FwResult> {
    opts.validate()?;
    problem.grid().check_same(&start.grid())?;
    let mut plan = start;
    let (traj, _, mut grad) = gradient_at(problem, &plan)?;
    let mut cost = total_cost(problem, &plan, &traj)?;
    let mut gap_history = Vec::new();
    let mut cost_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut gap;
    loop {
        let oracle = fw_oracle(&grad);
        gap = fw_gap(&grad, &plan, &oracle)?.max(0.0);
        gap_history.push(gap);
        cost_history.push(cost);
        if gap <= opts.gap_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        let next = match opts.step_rule {
            StepRule::Diminishing => {
                let s = 2.0 / (iterations as f64 + 2.0);
                let cand = convex_combine(&plan, &oracle, s)?;
                let c = cost_of(problem, &cand)?;
                Some((cand, c))
            }
            StepRule::Backtracking => {
                let mut s = 1.0;
                let mut found = None;
                while s >= MIN_STEP {
                    let cand = convex_combine(&plan, &oracle, s)?;
                    let c = cost_of(problem, &cand)?;
                    if c <= cost - ARMIJO * s * gap {
                        found = Some((cand, c));
                        break;
                    }
                    s *= SHRINK;
                }
                found
            }
        };
        iterations += 1;
        let Some((cand, c)) = next else {
            log::debug!("line search stalled at gap {gap:e}");
            break;
        };
        plan = cand;
        cost = c;
        grad = gradient_at(problem, &plan)?.2;
    }
    Ok(FwResult {
        plan,
        cost,
        gap,
        gap_history,
        cost_history,
        iterations,
        converged,
        start: String::new(),
    })
}

/// Starting plans: `δ_t`, `δ_0`, then `n_starts` Dirichlet draws, plus the
/// warm start when given.
pub fn starting_plans(problem: &ProblemSpec, opts: &FwOptions, warm_start: Option<&TriangularPlan>) -> Vec<(String, TriangularPlan)> {
    let grid = problem.grid();
    let mut starts = Vec::new();
    if let Some(w) = warm_start {
        starts.push(("warm".to_string(), w.clone()));
    }
    starts.push(("recent".to_string(), TriangularPlan::recent(grid)));
    starts.push(("origin".to_string(), TriangularPlan::origin(grid)));
    for k in 0..opts.n_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k as u64));
        starts.push((format!("dirichlet-{k}"), TriangularPlan::dirichlet(grid, &mut rng)));
    }
    starts
}

/// Multi-start Frank–Wolfe. Returns the lowest-cost converged run, or the
/// lowest-cost run when none converged. Starts that blow up are skipped.
pub fn minimize(problem: &ProblemSpec, opts: &FwOptions, warm_start: Option<&TriangularPlan>) -> Result<FwResult> {
    opts.validate()?;
    if let Some(w) = warm_start {
        problem.grid().check_same(&w.grid())?;
    }
    let starts = starting_plans(problem, opts, warm_start);
    let runs: Vec<(String, Result<FwResult>)> = starts
        .into_par_iter()
        .map(|(label, plan)| {
            let run = frank_wolfe(problem, plan, opts);
            (label, run)
        })
        .collect();
    let mut best: Option<FwResult> = None;
    let mut last_err = None;
    for (label, run) in runs {
        match run {
            Ok(mut r) => {
                r.start = label;
                let better = match &best {
                    None => true,
                    Some(b) => (r.converged && !b.converged) || (r.converged == b.converged && r.cost < b.cost),
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e) if e.is_blow_up() => {
                log::warn!("start {label} abandoned: {e}");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one start ran"))
}

/// Location of the switch from `δ_0` rows to `δ_t` rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchReport {
    /// First row `i ≥ 1` whose dominant atom is its own node.
    pub switch_index: Option<usize>,
    pub switch_time: Option<f64>,
    /// Every row is a Dirac mass at `0` or at its own node, with all
    /// `δ_0` rows before all `δ_t` rows.
    pub bang_bang: bool,
}

pub fn switch_report(plan: &TriangularPlan) -> SwitchReport {
    let n = plan.n_steps();
    let switch_index = (1..n).find(|&i| plan.dominant_column(i) == i);
    let bang_bang = (0..n).all(|i| match plan.dirac_column(i) {
        Some(0) => switch_index.is_none_or(|s| i < s || i == 0),
        Some(j) => j == i && switch_index.is_some_and(|s| i >= s),
        None => false,
    });
    SwitchReport {
        switch_index,
        switch_time: switch_index.map(|i| plan.grid().node(i)),
        bang_bang,
    }
}
