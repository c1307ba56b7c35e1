//! Maximum-principle diagnostics and sparse reduction of plans.
//!
//! On the grid, row `i` of an optimal plan must put all of its mass on the
//! maximizers of the Hamiltonian row `H[i][j] = q_{i+1} · f(s_j, x_j) − g(t_i, s_j)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::adjoint::{solve_adjoint_discrete, AdjointPath};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, Trajectory};
use crate::measures::TriangularPlan;
use crate::problem::ProblemSpec;

/// Relative tolerance for deciding that two Hamiltonian values tie.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PmpReport {
    /// `r_i = max_j H[i][j] − Σ_j w[i][j] H[i][j]`.
    pub residuals: Vec<f64>,
    pub worst_row: usize,
    pub max_residual: f64,
    /// `H[i][j]` for `j ≤ i`, when requested.
    pub hamiltonian: Option<Vec<Vec<f64>>>,
    /// Whether row `i` is supported in its argmax set up to [`TIE_TOLERANCE`].
    pub support_in_argmax: Vec<bool>,
}

impl PmpReport {
    pub fn sum_residuals(&self) -> f64 {
        self.residuals.iter().sum()
    }
}

fn hamiltonian_row(
    problem: &ProblemSpec,
    i: usize,
    q: &DVector<f64>,
    drift: &[DVector<f64>],
) -> Vec<f64> {
    let grid = problem.grid();
    let t = grid.node(i);
    (0..=i)
        .map(|j| q.dot(&drift[j]) - problem.cost().memory(t, grid.node(j)))
        .collect()
}

fn row_residual(row: &[f64], weights: &[f64]) -> (f64, bool) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Σ_j w_j (max − H_j) is a sum of nonnegative terms
    let residual: f64 = row
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|(h, w)| w * (max - h))
        .sum();
    let tie = TIE_TOLERANCE * max.abs().max(1.0);
    let supported = row
        .iter()
        .zip(weights)
        .all(|(h, &w)| w == 0.0 || max - h <= tie);
    (residual, supported)
}

/// Complementarity residuals of the discrete maximum principle.
pub fn pmp_residual(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    traj: &Trajectory,
    adj: &AdjointPath,
    keep_table: bool,
) -> Result<PmpReport> {
    problem.grid().check_same(&plan.grid())?;
    plan.grid().check_same(&traj.grid())?;
    plan.grid().check_same(&adj.grid())?;
    let n = plan.n_steps();
    let mut residuals = Vec::with_capacity(n);
    let mut supported = Vec::with_capacity(n);
    let mut table = keep_table.then(|| Vec::with_capacity(n));
    for i in 0..n {
        let row = hamiltonian_row(problem, i, adj.q(i + 1), &adj.drift);
        let (r, s) = row_residual(&row, plan.row(i));
        residuals.push(r);
        supported.push(s);
        if let Some(t) = table.as_mut() {
            t.push(row);
        }
    }
    let (worst_row, max_residual) = residuals
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, r)| if r > best.1 { (i, r) } else { best });
    Ok(PmpReport {
        residuals,
        worst_row,
        max_residual,
        hamiltonian: table,
        support_in_argmax: supported,
    })
}

/// Convenience wrapper solving forward and adjoint first.
pub fn pmp_residual_of(problem: &ProblemSpec, plan: &TriangularPlan, keep_table: bool) -> Result<PmpReport> {
    let traj = solve_forward(problem, plan)?;
    let adj = solve_adjoint_discrete(problem, plan, &traj)?;
    pmp_residual(problem, plan, &traj, &adj, keep_table)
}

/// Sufficient optimality test for problems linear in the state with convex
/// costs: for each candidate `η`, every row of `plan` must be supported in
/// the argmax of `q_{i+1} · A(s_j) x_η(s_j) − g(t_i, s_j)`.
pub fn sufficiency_check(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    candidates: &[TriangularPlan],
) -> Result<Vec<bool>> {
    problem.check_linear_convex()?;
    let traj = solve_forward(problem, plan)?;
    let adj = solve_adjoint_discrete(problem, plan, &traj)?;
    let grid = plan.grid();
    candidates
        .iter()
        .map(|eta| {
            grid.check_same(&eta.grid())?;
            let x_eta = solve_forward(problem, eta)?;
            let drift: Vec<DVector<f64>> = x_eta
                .states()
                .iter()
                .enumerate()
                .map(|(j, x)| problem.dynamics().eval(grid.node(j), x))
                .collect();
            Ok((0..plan.n_steps()).all(|i| {
                let row = hamiltonian_row(problem, i, adj.q(i + 1), &drift);
                row_residual(&row, plan.row(i)).1
            }))
        })
        .collect()
}

/// Moment vectors `(1, f(s_j, x_j), g(t_i, s_j))` preserved by pruning.
fn moments(problem: &ProblemSpec, traj: &Trajectory, i: usize, j: usize, with_memory: bool) -> Vec<f64> {
    let grid = traj.grid();
    let mut v = Vec::with_capacity(problem.dim() + 2);
    v.push(1.0);
    v.extend(problem.dynamics().eval(grid.node(j), traj.state(j)).iter());
    if with_memory {
        v.push(problem.cost().memory(grid.node(i), grid.node(j)));
    }
    v
}

/// Removes atoms from one probability vector while keeping
/// `Σ_j w_j v_j` fixed, until at most `dim(v)` atoms remain.
fn reduce_row(row_index: usize, weights: &mut [f64], vectors: &[Vec<f64>]) -> Result<()> {
    let m = vectors.first().map_or(0, |v| v.len());
    let mut support: Vec<usize> = (0..weights.len()).filter(|&j| weights[j] > 0.0).collect();
    while support.len() > m {
        let active = &support[..=m];
        // square system: m moment rows padded with a zero row
        let mat = DMatrix::from_fn(m + 1, m + 1, |r, c| if r < m { vectors[active[c]][r] } else { 0.0 });
        let svd = mat.try_svd(false, true, f64::EPSILON, 200).ok_or_else(|| Error::RankFailure {
            row: row_index,
            reason: "SVD did not converge".into(),
        })?;
        let v_t = svd.v_t.expect("requested");
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |b, (k, &s)| if s < b.1 { (k, s) } else { b })
            .0;
        let mut dir: Vec<f64> = v_t.row(smallest).iter().copied().collect();
        if dir.iter().any(|c| !c.is_finite()) {
            return Err(Error::RankFailure {
                row: row_index,
                reason: "non-finite null vector".into(),
            });
        }
        if !dir.iter().any(|&c| c > 0.0) {
            dir.iter_mut().for_each(|c| *c = -*c);
        }
        // largest step keeping every weight nonnegative
        let (pivot, tau) = dir
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(|(k, &c)| (k, weights[active[k]] / c))
            .fold((usize::MAX, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
        if pivot == usize::MAX {
            return Err(Error::RankFailure {
                row: row_index,
                reason: "null vector has no positive entry".into(),
            });
        }
        for (k, &c) in dir.iter().enumerate() {
            let j = active[k];
            weights[j] = if k == pivot { 0.0 } else { (weights[j] - tau * c).max(0.0) };
        }
        support.retain(|&j| weights[j] > 0.0);
    }
    Ok(())
}

/// Rewrites every row with at most `d + 2` atoms (`d + 1` without memory
/// cost) so that the memory drift `Σ_j w[i][j] f(s_j, x_j)` and the memory
/// cost `Σ_j w[i][j] g(t_i, s_j)` of each row are unchanged.
pub fn caratheodory_prune(problem: &ProblemSpec, plan: &TriangularPlan, traj: &Trajectory) -> Result<TriangularPlan> {
    problem.grid().check_same(&plan.grid())?;
    plan.grid().check_same(&traj.grid())?;
    let with_memory = !problem.cost().memory.is_zero();
    let rows: Vec<Vec<f64>> = (0..plan.n_steps())
        .into_par_iter()
        .map(|i| {
            let mut weights = plan.row(i).to_vec();
            let vectors: Vec<Vec<f64>> = (0..=i).map(|j| moments(problem, traj, i, j, with_memory)).collect();
            reduce_row(i, &mut weights, &vectors)?;
            Ok(weights)
        })
        .collect::<Result<_>>()?;
    TriangularPlan::from_rows(plan.grid(), &rows)
}

/// Per-row preserved quantities `(Σ w f, Σ w g)`, flattened.
pub fn row_moments(problem: &ProblemSpec, plan: &TriangularPlan, traj: &Trajectory) -> Vec<Vec<f64>> {
    (0..plan.n_steps())
        .map(|i| {
            let mut acc = vec![0.0; problem.dim() + 2];
            for (j, &w) in plan.row(i).iter().enumerate() {
                if w != 0.0 {
                    for (a, v) in acc.iter_mut().zip(moments(problem, traj, i, j, true)) {
                        *a += w * v;
                    }
                }
            }
            acc
        })
        .collect()
}
