//! Controlled system and cost ingredients.
//!
//! Every ingredient is one of a small catalog of closed forms with analytic
//! derivatives, so problems serialize to JSON and evaluation stays
//! allocation-light and thread-safe.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{TimeGrid, TriangularPlan};

/// Number of quasi-random points used by the derivative spot-check.
pub const SPOT_CHECK_POINTS: usize = 16;
/// Relative tolerance of the derivative spot-check.
pub const SPOT_CHECK_TOLERANCE: f64 = 1e-5;

pub const DYNAMICS_KINDS: &str = "linear_scalar, diag2d, linear, polynomial";
pub const RUNNING_KINDS: &str = "none, linear, quadratic, tracking";
pub const TERMINAL_KINDS: &str = "none, linear, quadratic";
pub const MEMORY_KINDS: &str = "none, wasserstein, product, table";

/// Polynomial in time, `c(t) = Σ_q c_q t^q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct TimePoly(pub Vec<f64>);

impl TimePoly {
    pub fn constant(c: f64) -> Self {
        Self(vec![c])
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * t + c)
    }

    /// Upper bound of `|c(t)|` on `[0, 1]`.
    pub fn sup_bound(&self) -> f64 {
        self.0.iter().map(|c| c.abs()).sum()
    }
}

/// Closed-form vector fields `(t, x) ↦ F(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VectorField {
    /// `F(x) = α x` in one dimension.
    LinearScalar { alpha: f64 },
    /// `F(x, y) = (α x, β y)`.
    Diag2d { alpha: f64, beta: f64 },
    /// `F(x) = A x` with a constant square matrix.
    Linear { matrix: Vec<Vec<f64>> },
    /// Componentwise polynomial: `F_k(t, x) = Σ_p c_{k,p}(t) x_k^p`, where
    /// `coeffs[k][p]` lists the time coefficients of `c_{k,p}`.
    Polynomial { coeffs: Vec<Vec<TimePoly>> },
}

impl VectorField {
    pub fn dim(&self) -> usize {
        match self {
            VectorField::LinearScalar { .. } => 1,
            VectorField::Diag2d { .. } => 2,
            VectorField::Linear { matrix } => matrix.len(),
            VectorField::Polynomial { coeffs } => coeffs.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            VectorField::Linear { matrix } => {
                let d = matrix.len();
                if d == 0 || matrix.iter().any(|r| r.len() != d) {
                    return Err(Error::Dimension(format!(
                        "linear dynamics matrix must be square and nonempty, got {d} rows"
                    )));
                }
            }
            VectorField::Polynomial { coeffs } if coeffs.is_empty() => {
                return Err(Error::Dimension("polynomial dynamics needs at least one component".into()))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            VectorField::LinearScalar { alpha } => DVector::from_element(1, alpha * x[0]),
            VectorField::Diag2d { alpha, beta } => {
                DVector::from_column_slice(&[alpha * x[0], beta * x[1]])
            }
            VectorField::Linear { matrix } => {
                DVector::from_fn(matrix.len(), |k, _| {
                    matrix[k].iter().zip(x.iter()).map(|(a, b)| a * b).sum()
                })
            }
            VectorField::Polynomial { coeffs } => DVector::from_fn(coeffs.len(), |k, _| {
                coeffs[k]
                    .iter()
                    .rev()
                    .fold(0.0, |acc, c| acc * x[k] + c.eval(t))
            }),
        }
    }

    pub fn jacobian(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            VectorField::LinearScalar { alpha } => DMatrix::from_element(1, 1, *alpha),
            VectorField::Diag2d { alpha, beta } => {
                DMatrix::from_diagonal(&DVector::from_column_slice(&[*alpha, *beta]))
            }
            VectorField::Linear { matrix } => {
                let d = matrix.len();
                DMatrix::from_fn(d, d, |r, c| matrix[r][c])
            }
            VectorField::Polynomial { coeffs } => {
                let d = coeffs.len();
                let mut jac = DMatrix::zeros(d, d);
                for k in 0..d {
                    let mut acc = 0.0;
                    for (p, c) in coeffs[k].iter().enumerate().skip(1).rev() {
                        acc = acc * x[k] + p as f64 * c.eval(t);
                    }
                    jac[(k, k)] = acc;
                }
                jac
            }
        }
    }

    /// `true` when `F(t, x) = A(t) x`.
    pub fn is_linear(&self) -> bool {
        match self {
            VectorField::Polynomial { coeffs } => coeffs.iter().all(|c| {
                c.iter()
                    .enumerate()
                    .all(|(p, poly)| p == 1 || poly.0.iter().all(|&v| v == 0.0))
            }),
            _ => true,
        }
    }

    /// Lipschitz bound in `x`, global for the linear kinds and valid on the
    /// ball `|x|_∞ ≤ radius` for polynomials of higher degree.
    pub fn lipschitz_bound(&self, radius: f64) -> f64 {
        match self {
            VectorField::LinearScalar { alpha } => alpha.abs(),
            VectorField::Diag2d { alpha, beta } => alpha.abs().max(beta.abs()),
            VectorField::Linear { matrix } => {
                let d = matrix.len();
                let m = DMatrix::from_fn(d, d, |r, c| matrix[r][c]);
                m.singular_values().max()
            }
            VectorField::Polynomial { coeffs } => coeffs
                .iter()
                .map(|c| {
                    c.iter()
                        .enumerate()
                        .skip(1)
                        .map(|(p, poly)| p as f64 * poly.sup_bound() * radius.powi(p as i32 - 1))
                        .sum::<f64>()
                })
                .fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    #[serde(flatten)]
    pub field: VectorField,
    /// Declared Lipschitz constant of the memory drift; estimated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    /// Optional instantaneous term added to the drift.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_term: Option<VectorField>,
}

/// Drift `ẋ(t) = local(t, x(t)) + ⟨f(·, x(·)), ν_t⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    memory: VectorField,
    local: Option<VectorField>,
    lipschitz_k: f64,
    local_lipschitz: f64,
}

impl Dynamics {
    pub fn new(memory: VectorField, local: Option<VectorField>, lipschitz_k: f64) -> Result<Self> {
        memory.validate()?;
        if let Some(l) = &local {
            l.validate()?;
            if l.dim() != memory.dim() {
                return Err(Error::Dimension(format!(
                    "local term has dimension {}, dynamics has {}",
                    l.dim(),
                    memory.dim()
                )));
            }
        }
        if !(lipschitz_k >= 0.0) || !lipschitz_k.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "Lipschitz constant must be finite and nonnegative, got {lipschitz_k}"
            )));
        }
        let local_lipschitz = local.as_ref().map_or(0.0, |l| l.lipschitz_bound(1.0));
        Ok(Self {
            memory,
            local,
            lipschitz_k,
            local_lipschitz,
        })
    }

    pub fn dim(&self) -> usize {
        self.memory.dim()
    }

    pub fn field(&self) -> &VectorField {
        &self.memory
    }

    pub fn local_term(&self) -> Option<&VectorField> {
        self.local.as_ref()
    }

    /// `f(s, x)`.
    pub fn eval(&self, s: f64, x: &DVector<f64>) -> DVector<f64> {
        self.memory.eval(s, x)
    }

    /// `D_x f(s, x)`.
    pub fn jac(&self, s: f64, x: &DVector<f64>) -> DMatrix<f64> {
        self.memory.jacobian(s, x)
    }

    pub fn local_eval(&self, t: f64, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.local.as_ref().map(|l| l.eval(t, x))
    }

    pub fn local_jac(&self, t: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.local.as_ref().map(|l| l.jacobian(t, x))
    }

    pub fn lipschitz_k(&self) -> f64 {
        self.lipschitz_k
    }

    /// Lipschitz constant of the whole drift, memory plus local term.
    pub fn total_lipschitz(&self) -> f64 {
        self.lipschitz_k + self.local_lipschitz
    }

    /// Largest observed ratio `|f(t,x) − f(t,y)| / |x − y|` over the sample
    /// points, compared against the declared constant. Returns the offending
    /// point when the ratio exceeds it.
    pub fn lipschitz_violation(&self, radius: f64) -> Option<(f64, Vec<f64>, f64)> {
        let d = self.dim();
        for m in 0..SPOT_CHECK_POINTS {
            let (t, x) = halton_point(m, d, radius);
            let (_, y) = halton_point(m + SPOT_CHECK_POINTS, d, radius);
            let dist = (&x - &y).norm();
            if dist == 0.0 {
                continue;
            }
            let ratio = (self.eval(t, &x) - self.eval(t, &y)).norm() / dist;
            if ratio > self.lipschitz_k * (1.0 + 1e-9) + 1e-12 {
                return Some((t, x.iter().copied().collect(), ratio));
            }
        }
        None
    }
}

/// Reference path of a tracking cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Constant { value: Vec<f64> },
    /// `r(t) = offset + scale · e^{rate t}` in every component.
    ExpAffine { offset: f64, scale: f64, rate: f64 },
}

impl Target {
    pub fn eval(&self, t: f64, k: usize) -> f64 {
        match self {
            Target::Constant { value } => value[k],
            Target::ExpAffine {
                offset,
                scale,
                rate,
            } => offset + scale * (rate * t).exp(),
        }
    }
}

/// Running cost `j(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunningCost {
    None,
    /// `j = c · x`.
    Linear { weights: Vec<f64> },
    /// `j = ½ Σ_k w_k(t) x_k²`.
    Quadratic { weights: Vec<TimePoly> },
    /// `j = |x − r(t)|²`.
    Tracking { target: Target },
}

impl RunningCost {
    fn dim(&self) -> Option<usize> {
        match self {
            RunningCost::Linear { weights } => Some(weights.len()),
            RunningCost::Quadratic { weights } => Some(weights.len()),
            RunningCost::Tracking {
                target: Target::Constant { value },
            } => Some(value.len()),
            _ => None,
        }
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>) -> f64 {
        match self {
            RunningCost::None => 0.0,
            RunningCost::Linear { weights } => dot(weights, x),
            RunningCost::Quadratic { weights } => weights
                .iter()
                .zip(x.iter())
                .map(|(w, v)| 0.5 * w.eval(t) * v * v)
                .sum(),
            RunningCost::Tracking { target } => x
                .iter()
                .enumerate()
                .map(|(k, v)| (v - target.eval(t, k)).powi(2))
                .sum(),
        }
    }

    pub fn grad(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        match self {
            RunningCost::None => DVector::zeros(x.len()),
            RunningCost::Linear { weights } => DVector::from_column_slice(weights),
            RunningCost::Quadratic { weights } => {
                DVector::from_fn(x.len(), |k, _| weights[k].eval(t) * x[k])
            }
            RunningCost::Tracking { target } => {
                DVector::from_fn(x.len(), |k, _| 2.0 * (x[k] - target.eval(t, k)))
            }
        }
    }

    fn is_convex(&self) -> bool {
        match self {
            RunningCost::Quadratic { weights } => weights.iter().all(|w| {
                // nonnegative on [0, 1], checked on a fine sample
                (0..=1000).all(|m| w.eval(m as f64 / 1000.0) >= 0.0)
            }),
            _ => true,
        }
    }
}

/// Terminal cost `h(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalCost {
    None,
    /// `h = c · x`.
    Linear { weights: Vec<f64> },
    /// `h = ½ Σ_k w_k (x_k − r_k)²`, `r = 0` when no target is given.
    Quadratic {
        weights: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<Vec<f64>>,
    },
}

impl TerminalCost {
    fn dim(&self) -> Option<usize> {
        match self {
            TerminalCost::None => None,
            TerminalCost::Linear { weights } | TerminalCost::Quadratic { weights, .. } => {
                Some(weights.len())
            }
        }
    }

    fn target(&self, k: usize) -> f64 {
        match self {
            TerminalCost::Quadratic {
                target: Some(r), ..
            } => r[k],
            _ => 0.0,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            TerminalCost::None => 0.0,
            TerminalCost::Linear { weights } => dot(weights, x),
            TerminalCost::Quadratic { weights, .. } => weights
                .iter()
                .enumerate()
                .map(|(k, w)| 0.5 * w * (x[k] - self.target(k)).powi(2))
                .sum(),
        }
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            TerminalCost::None => DVector::zeros(x.len()),
            TerminalCost::Linear { weights } => DVector::from_column_slice(weights),
            TerminalCost::Quadratic { weights, .. } => {
                DVector::from_fn(x.len(), |k, _| weights[k] * (x[k] - self.target(k)))
            }
        }
    }

    fn is_convex(&self) -> bool {
        match self {
            TerminalCost::Quadratic { weights, .. } => weights.iter().all(|&w| w >= 0.0),
            _ => true,
        }
    }
}

/// Memory cost `g(t, s)` on the triangle `s ≤ t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemoryCost {
    None,
    /// `g = λ |t − s|^p`.
    Wasserstein { lambda: f64, p: f64 },
    /// `g = scale · s (t − s)`.
    Product {
        #[serde(default = "one")]
        scale: f64,
    },
    /// Node values: `values[i][j] = g(t_i, s_j)` for `j ≤ i ≤ N`.
    Table { values: Vec<Vec<f64>> },
}

fn one() -> f64 {
    1.0
}

impl MemoryCost {
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        match self {
            MemoryCost::None => 0.0,
            MemoryCost::Wasserstein { lambda, p } => {
                if *lambda == 0.0 {
                    0.0
                } else {
                    lambda * (t - s).abs().powf(*p)
                }
            }
            MemoryCost::Product { scale } => scale * s * (t - s),
            MemoryCost::Table { values } => {
                let n = values.len() - 1;
                let grid = TimeGrid::new(n.max(1)).expect("validated");
                let i = grid.nearest(t);
                let j = grid.nearest(s).min(i);
                values[i][j]
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            MemoryCost::None => true,
            MemoryCost::Wasserstein { lambda, .. } => *lambda == 0.0,
            MemoryCost::Product { scale } => *scale == 0.0,
            MemoryCost::Table { values } => values.iter().flatten().all(|&v| v == 0.0),
        }
    }

    /// Closed-form kinds are continuous on the triangle; tables are not.
    pub fn is_closed_form(&self) -> bool {
        !matches!(self, MemoryCost::Table { .. })
    }

    fn validate(&self, grid: TimeGrid) -> Result<()> {
        match self {
            MemoryCost::Wasserstein { lambda, p } => {
                if !(*p >= 1.0) || !(*lambda >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "Wasserstein memory cost needs p >= 1 and lambda >= 0, got p = {p}, lambda = {lambda}"
                    )));
                }
            }
            MemoryCost::Table { values } => {
                let n = grid.n_steps();
                if values.len() != n + 1 {
                    return Err(Error::Dimension(format!(
                        "memory table has {} rows, grid needs {}",
                        values.len(),
                        n + 1
                    )));
                }
                for (i, row) in values.iter().enumerate() {
                    if row.len() < i + 1 {
                        return Err(Error::Dimension(format!(
                            "memory table row {i} has {} entries, needs {}",
                            row.len(),
                            i + 1
                        )));
                    }
                    if let Some(j) = row[..=i].iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            what: "memory table entry",
                            node: j,
                        });
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub running: RunningCost,
    pub terminal: TerminalCost,
    #[serde(default = "no_memory")]
    pub memory: MemoryCost,
}

fn no_memory() -> MemoryCost {
    MemoryCost::None
}

impl CostSpec {
    pub fn running(&self, t: f64, x: &DVector<f64>) -> f64 {
        self.running.eval(t, x)
    }

    pub fn running_grad(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.running.grad(t, x)
    }

    pub fn terminal(&self, x: &DVector<f64>) -> f64 {
        self.terminal.eval(x)
    }

    pub fn terminal_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.terminal.grad(x)
    }

    pub fn memory(&self, t: f64, s: f64) -> f64 {
        self.memory.eval(t, s)
    }
}

/// On-disk form of a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub dynamics: DynamicsConfig,
    pub cost: CostSpec,
    pub x0: Vec<f64>,
    pub n_steps: usize,
}

/// Validated optimal control problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemFile", into = "ProblemFile")]
pub struct ProblemSpec {
    config: DynamicsConfig,
    dynamics: Dynamics,
    cost: CostSpec,
    x0: DVector<f64>,
    grid: TimeGrid,
}

impl TryFrom<ProblemFile> for ProblemSpec {
    type Error = Error;

    fn try_from(file: ProblemFile) -> Result<Self> {
        let grid = TimeGrid::new(file.n_steps)?;
        let config = file.dynamics;
        config.field.validate()?;
        let radius = spot_radius(&file.x0);
        let k = match config.lipschitz {
            Some(k) => k,
            None => config.field.lipschitz_bound(radius),
        };
        let dynamics = Dynamics::new(config.field.clone(), config.local_term.clone(), k)?;
        Self::assemble(config, dynamics, file.cost, file.x0, grid)
    }
}

impl From<ProblemSpec> for ProblemFile {
    fn from(p: ProblemSpec) -> Self {
        ProblemFile {
            dynamics: p.config,
            cost: p.cost,
            x0: p.x0.iter().copied().collect(),
            n_steps: p.grid.n_steps(),
        }
    }
}

fn spot_radius(x0: &[f64]) -> f64 {
    1.0 + x0.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

impl ProblemSpec {
    pub fn new(
        field: VectorField,
        local_term: Option<VectorField>,
        cost: CostSpec,
        x0: Vec<f64>,
        n_steps: usize,
    ) -> Result<Self> {
        ProblemFile {
            dynamics: DynamicsConfig {
                field,
                lipschitz: None,
                local_term,
            },
            cost,
            x0,
            n_steps,
        }
        .try_into()
    }

    fn assemble(
        config: DynamicsConfig,
        dynamics: Dynamics,
        cost: CostSpec,
        x0: Vec<f64>,
        grid: TimeGrid,
    ) -> Result<Self> {
        let d = dynamics.dim();
        if x0.len() != d {
            return Err(Error::Dimension(format!(
                "x0 has {} components, dynamics has dimension {d}",
                x0.len()
            )));
        }
        if let Some(i) = x0.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "initial state component",
                node: i,
            });
        }
        for (what, dim) in [("running cost", cost.running.dim()), ("terminal cost", cost.terminal.dim())] {
            if let Some(m) = dim {
                if m != d {
                    return Err(Error::Dimension(format!(
                        "{what} has dimension {m}, dynamics has dimension {d}"
                    )));
                }
            }
        }
        cost.memory.validate(grid)?;
        let problem = Self {
            config,
            dynamics,
            cost,
            x0: DVector::from_vec(x0),
            grid,
        };
        problem.spot_check_gradients()?;
        Ok(problem)
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Same problem on a grid with `n_steps` steps.
    pub fn with_n_steps(&self, n_steps: usize) -> Result<Self> {
        let grid = TimeGrid::new(n_steps)?;
        self.cost.memory.validate(grid)?;
        Ok(Self {
            grid,
            ..self.clone()
        })
    }

    /// Same problem with another cost.
    pub fn with_cost(&self, cost: CostSpec) -> Result<Self> {
        Self::assemble(
            self.config.clone(),
            self.dynamics.clone(),
            cost,
            self.x0.iter().copied().collect(),
            self.grid,
        )
    }

    pub fn to_file(&self) -> ProblemFile {
        self.clone().into()
    }

    /// `Ok` when `f(s, x) = A(s) x` without local term and `j(t, ·)`, `h`
    /// are convex.
    pub fn check_linear_convex(&self) -> Result<()> {
        if !self.dynamics.field().is_linear() {
            return Err(Error::NotLinearConvex("dynamics are not linear in x".into()));
        }
        if self.dynamics.local_term().is_some() {
            return Err(Error::NotLinearConvex("local term present".into()));
        }
        if !self.cost.running.is_convex() {
            return Err(Error::NotLinearConvex("running cost not convex in x".into()));
        }
        if !self.cost.terminal.is_convex() {
            return Err(Error::NotLinearConvex("terminal cost not convex".into()));
        }
        Ok(())
    }

    /// Compares analytic derivatives against central differences on
    /// quasi-random points.
    pub fn spot_check_gradients(&self) -> Result<()> {
        let d = self.dim();
        let radius = spot_radius(self.x0.as_slice());
        for m in 0..SPOT_CHECK_POINTS {
            let (t, x) = halton_point(m, d, radius);
            let fail = |what: &'static str, error: f64| Error::GradientCheck {
                what,
                t,
                x: x.iter().copied().collect(),
                error,
            };
            let jac = self.dynamics.jac(t, &x);
            let fd = fd_jacobian(|y| self.dynamics.eval(t, y), &x);
            let err = rel_error(&jac, &fd);
            if err > SPOT_CHECK_TOLERANCE {
                return Err(fail("dynamics Jacobian", err));
            }
            if let Some(local) = self.dynamics.local_term() {
                let err = rel_error(
                    &local.jacobian(t, &x),
                    &fd_jacobian(|y| local.eval(t, y), &x),
                );
                if err > SPOT_CHECK_TOLERANCE {
                    return Err(fail("local term Jacobian", err));
                }
            }
            let g = self.cost.running_grad(t, &x);
            let fd = fd_jacobian(|y| DVector::from_element(1, self.cost.running(t, y)), &x);
            let err = rel_error(&DMatrix::from_row_slice(1, d, g.as_slice()), &fd);
            if err > SPOT_CHECK_TOLERANCE {
                return Err(fail("running cost gradient", err));
            }
            let g = self.cost.terminal_grad(&x);
            let fd = fd_jacobian(|y| DVector::from_element(1, self.cost.terminal(y)), &x);
            let err = rel_error(&DMatrix::from_row_slice(1, d, g.as_slice()), &fd);
            if err > SPOT_CHECK_TOLERANCE {
                return Err(fail("terminal cost gradient", err));
            }
        }
        Ok(())
    }
}

fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, d);
    for c in 0..d {
        let step = 1e-6 * x[c].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += step;
        xm[c] -= step;
        let col = (f(&xp) - f(&xm)) / (2.0 * step);
        jac.set_column(c, &col);
    }
    jac
}

fn rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn radical_inverse(mut n: usize, base: usize) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while n > 0 {
        out += (n % base) as f64 * inv;
        n /= base;
        inv /= base as f64;
    }
    out
}

const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Halton point `m` in `[0, 1] × [−radius, radius]^d`.
fn halton_point(m: usize, d: usize, radius: f64) -> (f64, DVector<f64>) {
    let idx = m + 1;
    let t = radical_inverse(idx, PRIMES[0]);
    let x = DVector::from_fn(d, |k, _| {
        let u = radical_inverse(idx, PRIMES[(k + 1) % PRIMES.len()]);
        radius * (2.0 * u - 1.0)
    });
    (t, x)
}

fn dot(w: &[f64], x: &DVector<f64>) -> f64 {
    w.iter().zip(x.iter()).map(|(a, b)| a * b).sum()
}

/// Reads, validates and spot-checks a JSON problem file.
pub fn load_problem(path: impl AsRef<Path>) -> Result<ProblemSpec> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_problem(&text)
}

pub fn parse_problem(text: &str) -> Result<ProblemSpec> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    check_kinds(&value)?;
    let file: ProblemFile =
        serde_json::from_value(value).map_err(|e| Error::Parse(e.to_string()))?;
    let problem = ProblemSpec::try_from(file)?;
    let radius = spot_radius(problem.x0.as_slice());
    if let Some((t, x, ratio)) = problem.dynamics.lipschitz_violation(radius) {
        log::warn!(
            "declared Lipschitz constant {} exceeded at t = {t}, x = {x:?} (observed ratio {ratio})",
            problem.dynamics.lipschitz_k()
        );
    }
    Ok(problem)
}

fn check_kinds(value: &serde_json::Value) -> Result<()> {
    let kind_of = |v: Option<&serde_json::Value>| -> Option<String> {
        v.and_then(|v| v.get("kind")).and_then(|k| k.as_str()).map(str::to_owned)
    };
    let check = |what: &'static str, kind: Option<String>, expected: &'static str| -> Result<()> {
        match kind {
            Some(k) if !expected.split(", ").any(|e| e == k) => Err(Error::UnknownKind {
                what,
                kind: k,
                expected,
            }),
            _ => Ok(()),
        }
    };
    let dynamics = value.get("dynamics");
    check("dynamics", kind_of(dynamics), DYNAMICS_KINDS)?;
    check(
        "local term",
        kind_of(dynamics.and_then(|d| d.get("local_term"))),
        DYNAMICS_KINDS,
    )?;
    let cost = value.get("cost");
    check("running cost", kind_of(cost.and_then(|c| c.get("running"))), RUNNING_KINDS)?;
    check("terminal cost", kind_of(cost.and_then(|c| c.get("terminal"))), TERMINAL_KINDS)?;
    check("memory cost", kind_of(cost.and_then(|c| c.get("memory"))), MEMORY_KINDS)?;
    Ok(())
}

/// Split of the discrete cost into its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub running: f64,
    pub terminal: f64,
    pub memory: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.running + self.terminal + self.memory
    }
}

/// `h Σ_{i,j} w[i][j] g(t_i, s_j)`.
pub fn memory_cost(problem: &ProblemSpec, plan: &TriangularPlan) -> f64 {
    if problem.cost.memory.is_zero() {
        return 0.0;
    }
    let grid = plan.grid();
    plan.integrate(|i, j| problem.cost.memory(grid.node(i), grid.node(j)))
}

/// Left-endpoint discretization of the cost, term by term.
pub fn cost_breakdown(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    states: &[DVector<f64>],
) -> Result<CostBreakdown> {
    let grid = plan.grid();
    problem.grid.check_same(&grid)?;
    let n = grid.n_steps();
    if states.len() != n + 1 {
        return Err(Error::Dimension(format!(
            "trajectory has {} nodes, grid has {}",
            states.len(),
            n + 1
        )));
    }
    let h = grid.step();
    let mut running = 0.0;
    for (i, x) in states.iter().take(n).enumerate() {
        let v = problem.cost.running(grid.node(i), x);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "running cost",
                node: i,
            });
        }
        running += v;
    }
    let terminal = problem.cost.terminal(&states[n]);
    if !terminal.is_finite() {
        return Err(Error::NonFinite {
            what: "terminal cost",
            node: n,
        });
    }
    let memory = memory_cost(problem, plan);
    if !memory.is_finite() {
        return Err(Error::NonFinite {
            what: "memory cost",
            node: 0,
        });
    }
    Ok(CostBreakdown {
        running: h * running,
        terminal,
        memory,
    })
}

/// `J = h Σ_{i<N} j(t_i, x_i) + h(x_N) + h Σ w[i][j] g(t_i, s_j)`.
pub fn total_cost(
    problem: &ProblemSpec,
    plan: &TriangularPlan,
    traj: &crate::forward::Trajectory,
) -> Result<f64> {
    cost_breakdown(problem, plan, traj.states()).map(|c| c.total())
}
