//! State equation `ẋ(t) = local(t, x(t)) + ⟨f(·, x(·)), ν_t⟩`, `x(0) = x₀`.
//!
//! Row `i` of the plan acts on `[t_i, t_{i+1})` and only charges nodes
//! `s_j ≤ t_i`, whose states are already known when stepping from `t_i`, so
//! the Euler scheme is explicit.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{DelayFunction, TimeGrid, TriangularPlan};
use crate::problem::ProblemSpec;

/// States with `|x| > BLOW_UP_THRESHOLD` abort the solve.
pub const BLOW_UP_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    states: Vec<DVector<f64>>,
    sup_bound: f64,
}

impl Trajectory {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &DVector<f64> {
        &self.states[i]
    }

    pub fn terminal(&self) -> &DVector<f64> {
        &self.states[self.states.len() - 1]
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// A-priori bound `M` on `max_i |x_i|`.
    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    pub fn max_norm(&self) -> f64 {
        self.states.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    /// Values of component `k` along the grid.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[k]).collect()
    }

    /// `max_i |x_i − y_i|` over the nodes of this trajectory, reading `other`
    /// at the same times. `other` must live on a grid refined by an integer
    /// factor.
    pub fn sup_distance(&self, other: &Trajectory) -> Result<f64> {
        let n = self.grid.n_steps();
        let m = other.grid.n_steps();
        if !m.is_multiple_of(n) {
            return Err(Error::GridMismatch { left: n, right: m });
        }
        let r = m / n;
        Ok((0..=n)
            .map(|i| (&self.states[i] - &other.states[i * r]).norm())
            .fold(0.0, f64::max))
    }
}

/// Grönwall bound `M = (|x₀| + sup_t |F(t, 0)|) e^{K}` for the drift `F`
/// with Lipschitz constant `K`.
pub fn a_priori_bound(problem: &ProblemSpec) -> f64 {
    let dynamics = problem.dynamics();
    let grid = problem.grid();
    let zero = DVector::zeros(problem.dim());
    let f0 = grid
        .nodes()
        .map(|t| {
            let mut v = dynamics.eval(t, &zero).norm();
            if let Some(l) = dynamics.local_eval(t, &zero) {
                v += l.norm();
            }
            v
        })
        .fold(0.0, f64::max);
    (problem.x0().norm() + f0) * dynamics.total_lipschitz().exp()
}

fn check_state(x: &DVector<f64>, step: usize) -> Result<()> {
    let norm = x.norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite { what: "state", node: step });
    }
    if norm > BLOW_UP_THRESHOLD {
        return Err(Error::BlowUp { step, norm });
    }
    Ok(())
}

/// Drift of row `i` given the memory values `fvals[j] = f(s_j, x_j)` and the
/// current state.
fn row_drift(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    i: usize,
    x_i: &DVector<f64>,
    fvals: &[DVector<f64>],
) -> DVector<f64> {
    let t = plan.grid().node(i);
    let mut acc = DVector::zeros(x_i.len());
    for (j, &w) in plan.row(i).iter().enumerate() {
        if w != 0.0 {
            acc.axpy(w, &fvals[j], 1.0);
        }
    }
    if let Some(l) = problem.dynamics().local_eval(t, x_i) {
        acc += l;
    }
    acc
}

/// Explicit Euler solve of the memory equation under `plan`.
pub fn solve_forward(problem: &ProblemSpec, plan: &TriangularPlan) -> Result<Trajectory> {
    let grid = plan.grid();
    problem.grid().check_same(&grid)?;
    let n = grid.n_steps();
    let h = grid.step();
    let dynamics = problem.dynamics();
    let mut states = Vec::with_capacity(n + 1);
    let mut fvals = Vec::with_capacity(n + 1);
    states.push(problem.x0().clone());
    for i in 0..n {
        fvals.push(dynamics.eval(grid.node(i), &states[i]));
        let drift = row_drift(problem, plan, i, &states[i], &fvals);
        let next = &states[i] + drift * h;
        check_state(&next, i + 1)?;
        states.push(next);
    }
    Ok(Trajectory {
        grid,
        states,
        sup_bound: a_priori_bound(problem),
    })
}

/// Solve of the deviated equation `ẋ = local(t, x) + f(θ(t), x(θ(t)))`
/// without materializing the Dirac plan. Agrees bitwise with
/// [`solve_forward`] on `plan_from_delay(delay)`.
pub fn solve_deviated(problem: &ProblemSpec, delay: &DelayFunction) -> Result<Trajectory> {
    let grid = delay.grid();
    problem.grid().check_same(&grid)?;
    let n = grid.n_steps();
    let h = grid.step();
    let dynamics = problem.dynamics();
    let mut states: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    let mut fvals: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    states.push(problem.x0().clone());
    for i in 0..n {
        let t = grid.node(i);
        fvals.push(dynamics.eval(t, &states[i]));
        let mut drift = DVector::zeros(states[i].len());
        drift.axpy(1.0, &fvals[delay.at(i)], 1.0);
        if let Some(l) = dynamics.local_eval(t, &states[i]) {
            drift += l;
        }
        let next = &states[i] + drift * h;
        check_state(&next, i + 1)?;
        states.push(next);
    }
    Ok(Trajectory {
        grid,
        states,
        sup_bound: a_priori_bound(problem),
    })
}

/// Outcome of the Picard solve.
#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub trajectory: Trajectory,
    /// `‖x^{k+1} − x^k‖_λ` after each sweep.
    pub residuals: Vec<f64>,
    /// Weight `λ` of the norm `‖x‖_λ = max_i e^{−λ t_i} |x_i|`.
    pub lambda: f64,
}

impl PicardSolution {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }

    /// Successive residual ratios `r_{k+1} / r_k`, skipping exact zeros.
    pub fn ratios(&self) -> Vec<f64> {
        self.residuals
            .windows(2)
            .filter(|w| w[0] > 0.0 && w[1] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

/// Fixed-point iteration `x ← T x` with
/// `(T x)(t_{i+1}) = (T x)(t_i) + h [local(t_i, x_i) + Σ_j w[i][j] f(s_j, x_j)]`,
/// started from the constant path `x ≡ x₀`, measured in the weighted norm
/// with `λ = 2K`.
pub fn solve_forward_picard(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    tol: f64,
    max_iter: usize,
) -> Result<PicardSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let grid = plan.grid();
    problem.grid().check_same(&grid)?;
    let n = grid.n_steps();
    let h = grid.step();
    let dynamics = problem.dynamics();
    let lambda = 2.0 * dynamics.total_lipschitz();
    let weights: Vec<f64> = grid.nodes().map(|t| (-lambda * t).exp()).collect();

    let mut current = vec![problem.x0().clone(); n + 1];
    let mut residuals = Vec::new();
    for _ in 0..max_iter {
        let fvals: Vec<DVector<f64>> = (0..=n)
            .map(|j| dynamics.eval(grid.node(j), &current[j]))
            .collect();
        let mut next = Vec::with_capacity(n + 1);
        next.push(problem.x0().clone());
        for i in 0..n {
            let drift = row_drift(problem, plan, i, &current[i], &fvals);
            let x = &next[i] + drift * h;
            check_state(&x, i + 1)?;
            next.push(x);
        }
        let residual = next
            .iter()
            .zip(&current)
            .zip(&weights)
            .map(|((a, b), w)| w * (a - b).norm())
            .fold(0.0, f64::max);
        residuals.push(residual);
        current = next;
        if residual <= tol {
            return Ok(PicardSolution {
                trajectory: Trajectory {
                    grid,
                    states: current,
                    sup_bound: a_priori_bound(problem),
                },
                residuals,
                lambda,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// Coarse plan carried to a grid refined by `factor`: fine row `k` reuses
/// the weights of coarse row `k / factor`. Past atoms keep their coarse
/// time; the diagonal atom of rows `i ≥ 1` stands for the present and
/// moves to `k`. Row 0 keeps its atom at `0`, so both the `δ_0` and the
/// `δ_t` plan refine to themselves away from the first coarse cell.
pub fn embed_plan(plan: &TriangularPlan, factor: usize) -> Result<TriangularPlan> {
    let coarse = plan.grid();
    let fine = coarse.refine(factor)?;
    let mut rows = Vec::with_capacity(fine.n_steps());
    for k in 0..fine.n_steps() {
        let i = k / factor;
        let mut row = vec![0.0; k + 1];
        for (j, &w) in plan.row(i).iter().enumerate() {
            let col = if j == i && i > 0 { k } else { j * factor };
            row[col] += w;
        }
        rows.push(row);
    }
    TriangularPlan::from_rows(fine, &rows)
}

/// One line of the refinement table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefinementRow {
    pub factor: usize,
    pub n_steps: usize,
    /// Sup over coarse nodes of the change from the previous level (the
    /// coarse solve for the first factor).
    pub deviation: f64,
    /// Sup over coarse nodes of the distance to the coarse solve.
    pub deviation_from_coarse: f64,
}

/// Re-solves the embedded plan on successively refined grids. As the grid
/// is refined the embedded plans converge weakly-* and the trajectories
/// converge uniformly; the table records how fast.
pub fn weakstar_refinement_check(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    factors: &[usize],
) -> Result<Vec<RefinementRow>> {
    if let Some(f) = factors.iter().find(|&&f| f < 2) {
        return Err(Error::InvalidArgument(format!("refinement factors must be >= 2, got {f}")));
    }
    let coarse = solve_forward(problem, plan)?;
    let mut previous = coarse.clone();
    let mut table = Vec::with_capacity(factors.len());
    for &factor in factors {
        let fine_plan = embed_plan(plan, factor)?;
        let fine_problem = problem.with_n_steps(fine_plan.n_steps())?;
        let fine = solve_forward(&fine_problem, &fine_plan)?;
        let deviation_from_coarse = coarse.sup_distance(&fine)?;
        // compare on the coarse nodes, which both levels contain
        let deviation = (0..=coarse.grid().n_steps())
            .map(|i| {
                let a = &previous.states()[i * previous.grid().n_steps() / coarse.grid().n_steps()];
                let b = &fine.states()[i * factor];
                (a - b).norm()
            })
            .fold(0.0, f64::max);
        table.push(RefinementRow {
            factor,
            n_steps: fine_plan.n_steps(),
            deviation,
            deviation_from_coarse,
        });
        previous = fine;
    }
    Ok(table)
}

/// `true` when every deviation is at most `(1 + slack)` times its
/// predecessor.
pub fn deviations_monotone(table: &[RefinementRow], slack: f64) -> bool {
    table
        .windows(2)
        .all(|w| w[1].deviation <= (1.0 + slack) * w[0].deviation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{convex_combine, plan_from_delay};
    use crate::problem::{CostSpec, MemoryCost, RunningCost, TerminalCost, TimePoly, VectorField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn no_cost() -> CostSpec {
        CostSpec {
            running: RunningCost::None,
            terminal: TerminalCost::None,
            memory: MemoryCost::None,
        }
    }

    fn scalar(alpha: f64, n: usize) -> ProblemSpec {
        ProblemSpec::new(VectorField::LinearScalar { alpha }, None, no_cost(), vec![1.0], n).unwrap()
    }

    fn zero_field(n: usize) -> ProblemSpec {
        ProblemSpec::new(
            VectorField::Polynomial { coeffs: vec![vec![]] },
            None,
            no_cost(),
            vec![2.5],
            n,
        )
        .unwrap()
    }

    #[test]
    fn zero_field_keeps_initial_state() {
        let p = zero_field(10);
        let traj = solve_forward(&p, &TriangularPlan::uniform(p.grid())).unwrap();
        assert!(traj.states().iter().all(|x| x[0] == 2.5));
    }

    #[test]
    fn origin_plan_is_exact_for_linear_scalar() {
        let p = scalar(0.5, 50);
        let traj = solve_forward(&p, &TriangularPlan::origin(p.grid())).unwrap();
        for (i, x) in traj.states().iter().enumerate() {
            assert!((x[0] - (1.0 + 0.5 * p.grid().node(i))).abs() < 1e-14);
        }
    }

    #[test]
    fn recent_plan_converges_to_exponential() {
        let mut errors = Vec::new();
        for n in [100, 200, 400] {
            let p = scalar(0.5, n);
            let traj = solve_forward(&p, &TriangularPlan::recent(p.grid())).unwrap();
            let err = (0..=n)
                .map(|i| (traj.state(i)[0] - (0.5 * p.grid().node(i)).exp()).abs())
                .fold(0.0, f64::max);
            errors.push(err * n as f64);
        }
        // Euler on ẋ = αx: leading error (α²/2) t e^{αt} h, largest at t = 1
        let leading = 0.125 * 0.5f64.exp();
        assert!(errors.iter().all(|&e| (e / leading - 1.0).abs() < 0.02), "{errors:?}");
    }

    #[test]
    fn half_plan_tracks_nonexistence_reference() {
        let n = 400;
        let p = scalar(1.0, n);
        let g = p.grid();
        let plan = convex_combine(&TriangularPlan::origin(g), &TriangularPlan::recent(g), 0.5).unwrap();
        let traj = solve_forward(&p, &plan).unwrap();
        let err = (0..=n)
            .map(|i| (traj.state(i)[0] - (-1.0 + 2.0 * (g.node(i) / 2.0).exp())).abs())
            .fold(0.0, f64::max);
        assert!(err < 1.0 / n as f64);
    }

    #[test]
    fn deviated_matches_plan_solve_bitwise() {
        let p = scalar(0.7, 30);
        let delay = DelayFunction::new(p.grid(), (0..30).map(|i| i / 3).collect()).unwrap();
        let a = solve_deviated(&p, &delay).unwrap();
        let b = solve_forward(&p, &plan_from_delay(&delay)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blow_up_reported_with_step() {
        let p = ProblemSpec::new(
            VectorField::Polynomial {
                coeffs: vec![vec![TimePoly(vec![]), TimePoly(vec![]), TimePoly(vec![50.0])]],
            },
            None,
            no_cost(),
            vec![1.0],
            100,
        )
        .unwrap();
        match solve_forward(&p, &TriangularPlan::recent(p.grid())) {
            Err(Error::BlowUp { step, .. }) => assert!(step > 0 && step <= 100),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn picard_zero_field_one_iteration() {
        let p = zero_field(12);
        let sol = solve_forward_picard(&p, &TriangularPlan::uniform(p.grid()), 1e-14, 10).unwrap();
        assert_eq!(sol.iterations(), 1);
        assert_eq!(sol.residuals, vec![0.0]);
    }

    #[test]
    fn picard_matches_explicit_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = scalar(0.5, 25);
        for _ in 0..10 {
            let plan = TriangularPlan::dirichlet(p.grid(), &mut rng);
            let direct = solve_forward(&p, &plan).unwrap();
            let sol = solve_forward_picard(&p, &plan, 1e-15, 200).unwrap();
            assert!(direct.sup_distance(&sol.trajectory).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn picard_max_iter_error() {
        let p = scalar(0.5, 40);
        let err = solve_forward_picard(&p, &TriangularPlan::recent(p.grid()), 1e-15, 2).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 2, .. }));
        assert!(solve_forward_picard(&p, &TriangularPlan::recent(p.grid()), 0.0, 2).is_err());
    }

    #[test]
    fn embedding_keeps_past_atoms_and_moves_the_present() {
        let g = TimeGrid::new(3).unwrap();
        let fine = embed_plan(&TriangularPlan::bang_bang(g, 1), 2).unwrap();
        assert_eq!(fine, TriangularPlan::bang_bang(g.refine(2).unwrap(), 2));
        let origin = TriangularPlan::origin(g);
        assert_eq!(embed_plan(&origin, 4).unwrap(), TriangularPlan::origin(g.refine(4).unwrap()));
        let rows = vec![vec![1.0], vec![0.5, 0.5], vec![0.0, 1.0, 0.0]];
        let fine = embed_plan(&TriangularPlan::from_rows(g, &rows).unwrap(), 2).unwrap();
        assert_eq!(fine.dirac_column(1), Some(0));
        assert_eq!(fine.weight(3, 0), 0.5);
        assert_eq!(fine.weight(3, 3), 0.5);
        // coarse row 2 charges s = 1/3, the fine rows 4 and 5 charge fine node 2
        assert_eq!(fine.dirac_column(4), Some(2));
        assert_eq!(fine.dirac_column(5), Some(2));
    }

    #[test]
    fn refinement_of_zero_field_is_flat() {
        let p = zero_field(8);
        let table = weakstar_refinement_check(&p, &TriangularPlan::uniform(p.grid()), &[2, 4]).unwrap();
        assert!(table.iter().all(|r| r.deviation == 0.0));
        assert!(weakstar_refinement_check(&p, &TriangularPlan::uniform(p.grid()), &[1]).is_err());
    }
}
