//! Costate of the memory equation and gradients with respect to the plan.
//!
//! Two routes are provided. [`solve_adjoint_discrete`] is the exact
//! transpose of the linearized Euler scheme, so [`cost_gradient`] is the
//! exact derivative of the discrete cost. [`solve_adjoint_fixed_point`]
//! discretizes the backward integral equation
//!
//! ```text
//! q(t) = −b − ∫_t^1 B ds + ∫_t^1 Lᵀ q ds + ∫_[t,1] Aᵀ(s) ⟨q, ν*_s⟩ dν(s)
//! ```
//!
//! through the reverse disintegration of the plan and solves it by the
//! contraction iteration in the weighted `L¹` norm. The two routes agree to
//! first order in the step.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{solve_forward, Trajectory};
use crate::measures::{convex_combine, second_marginal, TimeGrid, TriangularPlan};
use crate::problem::ProblemSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    grid: TimeGrid,
    costate: Vec<DVector<f64>>,
    /// `A_j = D_x f(s_j, x_j)`.
    pub jac: Vec<DMatrix<f64>>,
    /// `a_j = f(s_j, x_j)`.
    pub drift: Vec<DVector<f64>>,
    /// `B_j = ∇_x j(s_j, x_j)`.
    pub running_grad: Vec<DVector<f64>>,
    /// `b = ∇h(x_N)`.
    pub terminal_grad: DVector<f64>,
}

impl AdjointPath {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn costate(&self) -> &[DVector<f64>] {
        &self.costate
    }

    /// `q_i`.
    pub fn q(&self, i: usize) -> &DVector<f64> {
        &self.costate[i]
    }

    pub fn component(&self, k: usize) -> Vec<f64> {
        self.costate.iter().map(|q| q[k]).collect()
    }
}

/// Coefficients `A, a, B, b` along a trajectory.
struct Coefficients {
    jac: Vec<DMatrix<f64>>,
    drift: Vec<DVector<f64>>,
    running_grad: Vec<DVector<f64>>,
    local_jac: Option<Vec<DMatrix<f64>>>,
    terminal_grad: DVector<f64>,
}

fn coefficients(problem: &ProblemSpec, traj: &Trajectory) -> Coefficients {
    let grid = traj.grid();
    let dynamics = problem.dynamics();
    let cost = problem.cost();
    let nodes = || traj.states().iter().enumerate().map(|(i, x)| (grid.node(i), x));
    Coefficients {
        jac: nodes().map(|(s, x)| dynamics.jac(s, x)).collect(),
        drift: nodes().map(|(s, x)| dynamics.eval(s, x)).collect(),
        running_grad: nodes().map(|(s, x)| cost.running_grad(s, x)).collect(),
        local_jac: dynamics
            .local_term()
            .map(|_| nodes().map(|(s, x)| dynamics.local_jac(s, x).unwrap()).collect()),
        terminal_grad: cost.terminal_grad(traj.terminal()),
    }
}

fn check_inputs(problem: &ProblemSpec, plan: &TriangularPlan, traj: &Trajectory) -> Result<()> {
    problem.grid().check_same(&plan.grid())?;
    plan.grid().check_same(&traj.grid())
}

/// Exact discrete adjoint. With `p = −q`:
///
/// `p_N = ∇h(x_N)`,
/// `p_m = p_{m+1} + h ∇_x j(t_m, x_m) + h L_mᵀ p_{m+1} + h A_mᵀ Σ_{i≥m} w[i][m] p_{i+1}`.
pub fn solve_adjoint_discrete(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    traj: &Trajectory,
) -> Result<AdjointPath> {
    check_inputs(problem, plan, traj)?;
    let grid = plan.grid();
    let n = grid.n_steps();
    let h = grid.step();
    let c = coefficients(problem, traj);

    let mut p = vec![DVector::zeros(problem.dim()); n + 1];
    p[n] = c.terminal_grad.clone();
    for m in (0..n).rev() {
        let mut pulled = DVector::zeros(problem.dim());
        for i in m..n {
            let w = plan.weight(i, m);
            if w != 0.0 {
                pulled.axpy(w, &p[i + 1], 1.0);
            }
        }
        let mut next = &p[m + 1] + &c.running_grad[m] * h;
        next += c.jac[m].tr_mul(&pulled) * h;
        if let Some(lj) = &c.local_jac {
            next += lj[m].tr_mul(&p[m + 1]) * h;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "costate", node: m });
        }
        p[m] = next;
    }
    Ok(AdjointPath {
        grid,
        costate: p.into_iter().map(|v| -v).collect(),
        jac: c.jac,
        drift: c.drift,
        running_grad: c.running_grad,
        terminal_grad: c.terminal_grad,
    })
}

/// Result of the fixed-point route.
#[derive(Debug, Clone)]
pub struct FixedPointAdjoint {
    pub path: AdjointPath,
    /// Weighted `L¹` distance between successive iterates.
    pub residuals: Vec<f64>,
    pub lambda: f64,
}

/// Discretized backward integral equation solved by the contraction map
///
/// `(T q)_i = −b − h Σ_{m≥i} B_m + h Σ_{m≥i} L_mᵀ q_m + Σ_{m≥i} ν_m A_mᵀ Σ_k ν*_m[k] q_k`
///
/// in the norm `‖q‖ = h Σ_i e^{λ t_i} |q_i|` with `λ = 2 ‖A‖_∞`. The row
/// time `t_k` of the reverse disintegration reads `q` at its own node.
pub fn solve_adjoint_fixed_point(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    traj: &Trajectory,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointAdjoint> {
    check_inputs(problem, plan, traj)?;
    let grid = plan.grid();
    let n = grid.n_steps();
    let h = grid.step();
    let d = problem.dim();
    let c = coefficients(problem, traj);
    let rd = second_marginal(plan);

    let norm_a = c
        .jac
        .iter()
        .map(|a| a.norm())
        .chain(c.local_jac.iter().flatten().map(|l| l.norm()))
        .fold(0.0, f64::max);
    let lambda = 2.0 * norm_a;
    let weights: Vec<f64> = grid.nodes().map(|t| h * (lambda * t).exp()).collect();

    // source term −b − h Σ_{m≥i} B_m, accumulated backward
    let mut source = vec![DVector::zeros(d); n + 1];
    source[n] = -&c.terminal_grad;
    for i in (0..n).rev() {
        source[i] = &source[i + 1] - &c.running_grad[i] * h;
    }

    let mut q = vec![DVector::zeros(d); n + 1];
    let mut residuals = Vec::new();
    for _ in 0..max_iter {
        let mut next = vec![DVector::zeros(d); n + 1];
        let mut tail = DVector::zeros(d);
        next[n] = source[n].clone();
        for m in (0..n).rev() {
            if let Some(cond) = rd.nu_star(m) {
                let mut avg = DVector::zeros(d);
                for (offset, &weight) in cond.iter().enumerate() {
                    if weight != 0.0 {
                        avg.axpy(weight, &q[m + offset], 1.0);
                    }
                }
                tail += c.jac[m].tr_mul(&avg) * rd.nu()[m];
            }
            if let Some(lj) = &c.local_jac {
                tail += lj[m].tr_mul(&q[m]) * h;
            }
            next[m] = &source[m] + &tail;
        }
        let residual: f64 = next
            .iter()
            .zip(&q)
            .zip(&weights)
            .map(|((a, b), w)| w * (a - b).norm())
            .sum();
        if !residual.is_finite() {
            return Err(Error::NonFinite { what: "costate", node: 0 });
        }
        residuals.push(residual);
        q = next;
        if residual <= tol {
            return Ok(FixedPointAdjoint {
                path: AdjointPath {
                    grid,
                    costate: q,
                    jac: c.jac,
                    drift: c.drift,
                    running_grad: c.running_grad,
                    terminal_grad: c.terminal_grad,
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

/// Partial derivatives `G[i][j] = ∂J/∂w[i][j]` of the discrete cost, stored
/// lower-triangular like the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanGradient {
    grid: TimeGrid,
    entries: Vec<Vec<f64>>,
}

impl PlanGradient {
    pub fn from_rows(grid: TimeGrid, entries: Vec<Vec<f64>>) -> Result<Self> {
        if entries.len() != grid.n_steps() || entries.iter().enumerate().any(|(i, r)| r.len() != i + 1)
        {
            return Err(Error::Dimension("gradient rows must be lower-triangular".into()));
        }
        Ok(Self { grid, entries })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.entries[i][j]
        }
    }

    /// `Σ_{i,j} G[i][j] w[i][j]`.
    pub fn pair(&self, plan: &TriangularPlan) -> f64 {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, g)| g.iter().zip(plan.row(i)).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }
}

/// `G[i][j] = h [g(t_i, s_j) − q_{i+1} · f(s_j, x_j)]`.
pub fn cost_gradient(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    traj: &Trajectory,
    adj: &AdjointPath,
) -> Result<PlanGradient> {
    check_inputs(problem, plan, traj)?;
    plan.grid().check_same(&adj.grid())?;
    let grid = plan.grid();
    let h = grid.step();
    let memory = &problem.cost().memory;
    let entries = (0..grid.n_steps())
        .map(|i| {
            let t = grid.node(i);
            let q = adj.q(i + 1);
            (0..=i)
                .map(|j| h * (memory.eval(t, grid.node(j)) - q.dot(&adj.drift[j])))
                .collect()
        })
        .collect();
    Ok(PlanGradient { grid, entries })
}

/// Forward, adjoint and gradient in one call.
pub fn gradient_at(problem: &ProblemSpec, plan: &TriangularPlan) -> Result<(Trajectory, AdjointPath, PlanGradient)> {
    let traj = solve_forward(problem, plan)?;
    let adj = solve_adjoint_discrete(problem, plan, &traj)?;
    let grad = cost_gradient(problem, plan, &traj, &adj)?;
    Ok((traj, adj, grad))
}

/// Solution of the discrete linearized system along `traj`:
/// `z_{i+1} = z_i + h [L_i z_i + Σ_j w[i][j] A_j z_j + Σ_j (η − γ)[i][j] a_j]`.
pub fn linearized_state(
    problem: &ProblemSpec,
    gamma: &TriangularPlan,
    eta: &TriangularPlan,
    traj: &Trajectory,
) -> Result<Vec<DVector<f64>>> {
    check_inputs(problem, gamma, traj)?;
    gamma.grid().check_same(&eta.grid())?;
    let grid = gamma.grid();
    let n = grid.n_steps();
    let h = grid.step();
    let d = problem.dim();
    let c = coefficients(problem, traj);
    let mut z = vec![DVector::zeros(d)];
    let mut az: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
    for i in 0..n {
        az.push(&c.jac[i] * &z[i]);
        let mut drift = DVector::zeros(d);
        for j in 0..=i {
            let w = gamma.weight(i, j);
            if w != 0.0 {
                drift.axpy(w, &az[j], 1.0);
            }
            let dw = eta.weight(i, j) - w;
            if dw != 0.0 {
                drift.axpy(dw, &c.drift[j], 1.0);
            }
        }
        if let Some(lj) = &c.local_jac {
            drift += &lj[i] * &z[i];
        }
        z.push(&z[i] + drift * h);
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Both sides of the duality identity
/// `h Σ B·z + b·z_N = −h Σ_i q_{i+1} · Σ_j (η − γ)[i][j] a_j`.
pub fn duality_check(
    problem: &ProblemSpec,
    gamma: &TriangularPlan,
    eta: &TriangularPlan,
    traj: &Trajectory,
    adj: &AdjointPath,
) -> Result<DualityReport> {
    let z = linearized_state(problem, gamma, eta, traj)?;
    let grid = gamma.grid();
    let n = grid.n_steps();
    let h = grid.step();
    let lhs = h * (0..n).map(|i| adj.running_grad[i].dot(&z[i])).sum::<f64>()
        + adj.terminal_grad.dot(&z[n]);
    let rhs = -h * (0..n)
        .map(|i| {
            let mut moved = DVector::zeros(problem.dim());
            for j in 0..=i {
                let dw = eta.weight(i, j) - gamma.weight(i, j);
                if dw != 0.0 {
                    moved.axpy(dw, &adj.drift[j], 1.0);
                }
            }
            adj.q(i + 1).dot(&moved)
        })
        .sum::<f64>();
    Ok(DualityReport {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearizationRow {
    pub eps: f64,
    /// `max_i |z_ε(t_i) − z(t_i)|` with `z_ε = (x_ε − x) / ε`.
    pub residual: f64,
}

/// Compares difference quotients of the state along `γ + ε(η − γ)` with the
/// linearized state.
pub fn linearization_residual(
    problem: &ProblemSpec,
    gamma: &TriangularPlan,
    eta: &TriangularPlan,
    eps_list: &[f64],
) -> Result<Vec<LinearizationRow>> {
    if let Some(e) = eps_list.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1), got {e}")));
    }
    let traj = solve_forward(problem, gamma)?;
    let z = linearized_state(problem, gamma, eta, &traj)?;
    eps_list
        .iter()
        .map(|&eps| {
            let moved = convex_combine(gamma, eta, eps)?;
            let traj_eps = solve_forward(problem, &moved)?;
            let residual = traj_eps
                .states()
                .iter()
                .zip(traj.states())
                .zip(&z)
                .map(|((xe, x), zi)| ((xe - x) / eps - zi).norm())
                .fold(0.0, f64::max);
            Ok(LinearizationRow { eps, residual })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{total_cost, CostSpec, MemoryCost, RunningCost, TerminalCost, VectorField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(alpha: f64, a: f64, b: f64, n: usize) -> ProblemSpec {
        ProblemSpec::new(
            VectorField::LinearScalar { alpha },
            None,
            CostSpec {
                running: RunningCost::Linear { weights: vec![a] },
                terminal: TerminalCost::Linear { weights: vec![-b] },
                memory: MemoryCost::None,
            },
            vec![1.0],
            n,
        )
        .unwrap()
    }

    #[test]
    fn constant_costate_without_sources() {
        let p = ProblemSpec::new(
            VectorField::LinearScalar { alpha: 0.0 },
            None,
            CostSpec {
                running: RunningCost::None,
                terminal: TerminalCost::Linear { weights: vec![0.7] },
                memory: MemoryCost::None,
            },
            vec![1.0],
            20,
        )
        .unwrap();
        let plan = TriangularPlan::uniform(p.grid());
        let traj = solve_forward(&p, &plan).unwrap();
        let adj = solve_adjoint_discrete(&p, &plan, &traj).unwrap();
        assert!(adj.costate().iter().all(|q| q[0] == -0.7));
    }

    #[test]
    fn terminal_condition_is_exact() {
        let p = scalar(0.5, 1.0, 0.3, 15);
        let plan = TriangularPlan::uniform(p.grid());
        let traj = solve_forward(&p, &plan).unwrap();
        let adj = solve_adjoint_discrete(&p, &plan, &traj).unwrap();
        assert_eq!(adj.q(15)[0], 0.3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = scalar(0.8, 1.0, 0.5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = TriangularPlan::dirichlet(p.grid(), &mut rng);
        let (_, _, grad) = gradient_at(&p, &plan).unwrap();
        let cost = |plan: &TriangularPlan| {
            let traj = solve_forward(&p, plan).unwrap();
            total_cost(&p, plan, &traj).unwrap()
        };
        for i in 0..12 {
            for j in 0..=i {
                let step = 1e-6;
                let mut row = plan.row(i).to_vec();
                row[j] += step;
                let plus = TriangularPlan::from_flat_unchecked(p.grid(), perturbed(&plan, i, &row));
                row[j] -= 2.0 * step;
                let minus = TriangularPlan::from_flat_unchecked(p.grid(), perturbed(&plan, i, &row));
                let fd = (cost(&plus) - cost(&minus)) / (2.0 * step);
                let g = grad.entry(i, j);
                assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "({i},{j}) fd {fd} vs {g}");
            }
        }
    }

    fn perturbed(plan: &TriangularPlan, i: usize, row: &[f64]) -> Vec<f64> {
        let mut flat = plan.flat().to_vec();
        let start = i * (i + 1) / 2;
        flat[start..start + i + 1].copy_from_slice(row);
        flat
    }

    #[test]
    fn zero_field_zero_memory_gradient_vanishes() {
        let p = ProblemSpec::new(
            VectorField::Polynomial { coeffs: vec![vec![]] },
            None,
            CostSpec {
                running: RunningCost::Linear { weights: vec![1.0] },
                terminal: TerminalCost::Linear { weights: vec![1.0] },
                memory: MemoryCost::None,
            },
            vec![1.0],
            10,
        )
        .unwrap();
        let (_, _, grad) = gradient_at(&p, &TriangularPlan::uniform(p.grid())).unwrap();
        assert!((0..10).all(|i| grad.row(i).iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn duality_zero_perturbation() {
        let p = scalar(0.5, 1.0, 0.5, 10);
        let plan = TriangularPlan::uniform(p.grid());
        let traj = solve_forward(&p, &plan).unwrap();
        let adj = solve_adjoint_discrete(&p, &plan, &traj).unwrap();
        let rep = duality_check(&p, &plan, &plan, &traj, &adj).unwrap();
        assert_eq!((rep.lhs, rep.rhs, rep.gap), (0.0, 0.0, 0.0));
    }

    #[test]
    fn linearization_exact_for_state_independent_field() {
        use crate::problem::TimePoly;
        let p = ProblemSpec::new(
            VectorField::Polynomial {
                coeffs: vec![vec![TimePoly(vec![0.3, -1.2, 0.8])]],
            },
            None,
            CostSpec {
                running: RunningCost::None,
                terminal: TerminalCost::None,
                memory: MemoryCost::None,
            },
            vec![0.4],
            16,
        )
        .unwrap();
        let g = p.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = TriangularPlan::dirichlet(g, &mut rng);
        let eta = TriangularPlan::dirichlet(g, &mut rng);
        for row in linearization_residual(&p, &gamma, &eta, &[0.5, 0.1, 0.01]).unwrap() {
            assert!(row.residual <= 1e-12, "{row:?}");
        }
        let same = linearization_residual(&p, &gamma, &gamma, &[0.1]).unwrap();
        assert_eq!(same[0].residual, 0.0);
        assert!(linearization_residual(&p, &gamma, &gamma, &[1.0]).is_err());
    }

    #[test]
    fn linearization_first_order_for_state_dependent_fields() {
        use crate::problem::TimePoly;
        // the plan multiplies the state, so even a linear f leaves an O(ε) residual
        let square = ProblemSpec::new(
            VectorField::Polynomial {
                coeffs: vec![vec![TimePoly(vec![0.0]), TimePoly(vec![0.0]), TimePoly(vec![0.8])]],
            },
            None,
            CostSpec {
                running: RunningCost::None,
                terminal: TerminalCost::None,
                memory: MemoryCost::None,
            },
            vec![0.5],
            16,
        )
        .unwrap();
        for p in [scalar(0.9, 1.0, 0.5, 16), square] {
            let g = p.grid();
            let rows =
                linearization_residual(&p, &TriangularPlan::origin(g), &TriangularPlan::recent(g), &[1e-1, 1e-2, 1e-3])
                    .unwrap();
            for w in rows.windows(2) {
                let ratio = w[0].residual / w[1].residual;
                assert!((ratio - 10.0).abs() < 1.0, "{rows:?}");
            }
        }
    }

    #[test]
    fn fixed_point_route_close_to_discrete() {
        for n in [50, 100, 200] {
            let p = scalar(0.5, 1.0, 0.5, n);
            let plan = TriangularPlan::bang_bang(p.grid(), n / 2);
            let traj = solve_forward(&p, &plan).unwrap();
            let exact = solve_adjoint_discrete(&p, &plan, &traj).unwrap();
            let fp = solve_adjoint_fixed_point(&p, &plan, &traj, 1e-13, 500).unwrap();
            assert_eq!(fp.path.q(n)[0], 0.5);
            let err = (0..=n)
                .map(|i| (exact.q(i)[0] - fp.path.q(i)[0]).abs())
                .fold(0.0, f64::max);
            assert!(err * (n as f64) < 2.0, "n = {n}: err {err}");
        }
    }
}
