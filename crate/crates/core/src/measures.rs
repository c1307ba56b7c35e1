//! Discrete memory controls.
//!
//! A control is a family of probability measures `ν_t` on `[0, t]`. On a
//! uniform grid of `N` steps, the control acting on the interval
//! `[t_i, t_{i+1})` is a probability vector over the past nodes
//! `s_0, …, s_i`. Stacking those rows gives a lower-triangular,
//! row-stochastic matrix, [`TriangularPlan`], which is the discrete version
//! of the plan `γ = ν_t ⊗ dt` on the triangle `{s ≤ t}`.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row sums accepted when building a plan from external data.
/// Accepted rows are renormalized so the stored sums are exact to rounding.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;
const RENORMALIZE_THRESHOLD: f64 = 1e-12;

/// Uniform grid `t_i = i / N` on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeGrid {
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        Ok(Self { n_steps })
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn step(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        i as f64 / self.n_steps as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |i| self.node(i))
    }

    /// Grid with `factor` times as many steps; coarse node `i` is fine node
    /// `i * factor`.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("refinement factor must be positive".into()));
        }
        Self::new(self.n_steps * factor)
    }

    /// Index of the grid node nearest to `t`, clamped to `[0, N]`.
    pub fn nearest(&self, t: f64) -> usize {
        let i = (t * self.n_steps as f64).round();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.n_steps)
        }
    }

    pub fn check_same(&self, other: &TimeGrid) -> Result<()> {
        if self.n_steps != other.n_steps {
            return Err(Error::GridMismatch {
                left: self.n_steps,
                right: other.n_steps,
            });
        }
        Ok(())
    }
}

#[inline]
fn row_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

/// Lower-triangular row-stochastic weight matrix.
///
/// Row `i` (for `i = 0..N-1`) holds the weights of `ν_{t_i}` on the nodes
/// `s_0..=s_i`. Entries above the diagonal are structurally zero and are not
/// stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularPlan {
    grid: TimeGrid,
    weights: Vec<f64>,
}

impl TriangularPlan {
    /// Builds a plan from explicit rows. Row `i` may have length `i + 1` or
    /// `N + 1`; in the latter case the entries past the diagonal must be
    /// exactly zero.
    pub fn from_rows(grid: TimeGrid, rows: &[Vec<f64>]) -> Result<Self> {
        let n = grid.n_steps();
        if rows.len() != n {
            return Err(Error::InvalidPlan(format!(
                "expected {n} rows, found {}",
                rows.len()
            )));
        }
        let mut weights = Vec::with_capacity(row_offset(n));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 && row.len() != n + 1 {
                return Err(Error::InvalidPlan(format!(
                    "row {i} has {} entries, expected {} or {}",
                    row.len(),
                    i + 1,
                    n + 1
                )));
            }
            if let Some(j) = row.iter().skip(i + 1).position(|&w| w != 0.0) {
                return Err(Error::InvalidPlan(format!(
                    "row {i} charges future node {} (nonanticipativity)",
                    i + 1 + j
                )));
            }
            weights.extend_from_slice(&row[..=i]);
        }
        Self::from_flat(grid, weights)
    }

    fn from_flat(grid: TimeGrid, mut weights: Vec<f64>) -> Result<Self> {
        let n = grid.n_steps();
        debug_assert_eq!(weights.len(), row_offset(n));
        for i in 0..n {
            let row = &mut weights[row_offset(i)..row_offset(i + 1)];
            if let Some(j) = row.iter().position(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::InvalidPlan(format!(
                    "row {i}, column {j}: weight {} is not a nonnegative number",
                    row[j]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidPlan(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
            // rows already normalized up to roundoff are kept bit for bit
            if (sum - 1.0).abs() > RENORMALIZE_THRESHOLD {
                row.iter_mut().for_each(|w| *w /= sum);
            }
        }
        Ok(Self { grid, weights })
    }

    /// Plan whose row `i` is the Dirac mass at column `column(i) <= i`.
    pub fn dirac(grid: TimeGrid, column: impl Fn(usize) -> usize) -> Result<Self> {
        let n = grid.n_steps();
        let mut weights = vec![0.0; row_offset(n)];
        for i in 0..n {
            let j = column(i);
            if j > i {
                return Err(Error::InvalidPlan(format!(
                    "row {i} cannot charge future node {j}"
                )));
            }
            weights[row_offset(i) + j] = 1.0;
        }
        Ok(Self { grid, weights })
    }

    /// `ν_t = δ_t`: every row charges its own (most recent) node.
    pub fn recent(grid: TimeGrid) -> Self {
        Self::dirac(grid, |i| i).expect("diagonal is admissible")
    }

    /// `ν_t = δ_0`: every row charges the initial node.
    pub fn origin(grid: TimeGrid) -> Self {
        Self::dirac(grid, |_| 0).expect("column 0 is admissible")
    }

    /// `ν_t` uniform over the past nodes.
    pub fn uniform(grid: TimeGrid) -> Self {
        let n = grid.n_steps();
        let mut weights = Vec::with_capacity(row_offset(n));
        for i in 0..n {
            let w = 1.0 / (i + 1) as f64;
            weights.extend(std::iter::repeat_n(w, i + 1));
        }
        Self { grid, weights }
    }

    /// Rows drawn independently from the flat Dirichlet distribution.
    pub fn dirichlet<R: Rng + ?Sized>(grid: TimeGrid, rng: &mut R) -> Self {
        let n = grid.n_steps();
        let mut weights = Vec::with_capacity(row_offset(n));
        for i in 0..n {
            let start = weights.len();
            let mut sum = 0.0;
            for _ in 0..=i {
                let e: f64 = rng.sample(Exp1);
                sum += e;
                weights.push(e);
            }
            weights[start..].iter_mut().for_each(|w| *w /= sum);
        }
        Self { grid, weights }
    }

    /// Bang-bang plan: `δ_0` on rows `i < switch`, `δ_t` on rows `i >= switch`.
    pub fn bang_bang(grid: TimeGrid, switch: usize) -> Self {
        Self::dirac(grid, |i| if i < switch { 0 } else { i }).expect("admissible")
    }

    #[inline]
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// Weights of row `i` on columns `0..=i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[row_offset(i)..row_offset(i + 1)]
    }

    /// Entry `w[i][j]`, zero above the diagonal.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.weights[row_offset(i) + j]
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n_steps()).map(move |i| self.row(i))
    }

    /// Number of nonzero weights in row `i`.
    pub fn row_support(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&w| w > 0.0).count()
    }

    /// Column carrying the largest weight of row `i` (ties toward the most
    /// recent node).
    pub fn dominant_column(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (j, &w) in row.iter().enumerate() {
            if w >= row[best] {
                best = j;
            }
        }
        best
    }

    /// `Some(j)` if row `i` is a Dirac mass at column `j`.
    pub fn dirac_column(&self, i: usize) -> Option<usize> {
        let row = self.row(i);
        let mut found = None;
        for (j, &w) in row.iter().enumerate() {
            if w != 0.0 {
                if found.is_some() || w != 1.0 {
                    return None;
                }
                found = Some(j);
            }
        }
        found
    }

    /// Sum of `w[i][j] * φ(i, j)` over the triangle, each row weighted by the
    /// step `h`; the discrete `∫ φ dγ`.
    pub fn integrate(&self, mut phi: impl FnMut(usize, usize) -> f64) -> f64 {
        let h = self.grid.step();
        let mut total = 0.0;
        for i in 0..self.n_steps() {
            let row: f64 = self
                .row(i)
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(j, &w)| w * phi(i, j))
                .sum();
            total += row;
        }
        h * total
    }

    /// Replaces row `i`. The new row must be a probability vector on
    /// `0..=i`.
    pub fn with_row(&self, i: usize, row: &[f64]) -> Result<Self> {
        if i >= self.n_steps() || row.len() != i + 1 {
            return Err(Error::InvalidPlan(format!("row {i} replacement has wrong shape")));
        }
        let mut weights = self.weights.clone();
        weights[row_offset(i)..row_offset(i + 1)].copy_from_slice(row);
        Self::from_flat(self.grid, weights)
    }

    pub(crate) fn from_flat_unchecked(grid: TimeGrid, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), row_offset(grid.n_steps()));
        Self { grid, weights }
    }

    pub(crate) fn flat(&self) -> &[f64] {
        &self.weights
    }

    /// Largest `|Σ_j w[i][j] − 1|` over rows.
    pub fn max_row_sum_error(&self) -> f64 {
        self.rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Second marginal `ν` of a plan and the reverse disintegration
/// `γ = ν ⊗ ν*_s`.
///
/// `nu[j]` is the total mass the plan puts on memory node `s_j`; for every
/// node with positive mass `nu_star(j)` is a probability vector over the
/// rows `i = j..N-1` that draw on that node. Nodes that are never charged
/// carry no conditional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseDisintegration {
    grid: TimeGrid,
    nu: Vec<f64>,
    nu_star: Vec<Option<Vec<f64>>>,
}

impl ReverseDisintegration {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Node masses `ν_j`, `j = 0..=N`.
    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    /// Conditional row distribution for node `j`, indexed by `i - j`.
    pub fn nu_star(&self, j: usize) -> Option<&[f64]> {
        self.nu_star[j].as_deref()
    }

    /// Rebuilds the plan weights from `(ν, ν*)`: `w[i][j] = ν_j ν*_j[i] / h`.
    pub fn recombine(&self) -> Result<TriangularPlan> {
        let n = self.grid.n_steps();
        let h = self.grid.step();
        let mut weights = vec![0.0; row_offset(n)];
        for (j, cond) in self.nu_star.iter().enumerate() {
            if let Some(cond) = cond {
                for (k, &c) in cond.iter().enumerate() {
                    let i = j + k;
                    weights[row_offset(i) + j] = self.nu[j] * c / h;
                }
            }
        }
        TriangularPlan::from_flat(self.grid, weights)
    }
}

/// Second marginal and reverse disintegration of `plan`.
pub fn second_marginal(plan: &TriangularPlan) -> ReverseDisintegration {
    let grid = plan.grid();
    let n = grid.n_steps();
    let h = grid.step();
    let mut nu = vec![0.0; n + 1];
    let mut nu_star = Vec::with_capacity(n + 1);
    for (j, nu_j) in nu.iter_mut().enumerate() {
        let column: Vec<f64> = (j..n).map(|i| plan.weight(i, j)).collect();
        let total: f64 = column.iter().sum();
        *nu_j = h * total;
        if total > 0.0 {
            nu_star.push(Some(column.into_iter().map(|w| w / total).collect()));
        } else {
            nu_star.push(None);
        }
    }
    ReverseDisintegration { grid, nu, nu_star }
}

/// Piecewise-constant deviation `θ` with `θ(t) ≤ t`, stored as the node
/// index charged on each interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayFunction {
    grid: TimeGrid,
    theta: Vec<usize>,
}

impl DelayFunction {
    pub fn new(grid: TimeGrid, theta: Vec<usize>) -> Result<Self> {
        if theta.len() != grid.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "delay function needs {} entries, found {}",
                grid.n_steps(),
                theta.len()
            )));
        }
        if let Some((i, &j)) = theta.iter().enumerate().find(|(i, &j)| j > *i) {
            return Err(Error::InvalidArgument(format!(
                "delay at row {i} points to future node {j}"
            )));
        }
        Ok(Self { grid, theta })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn theta(&self) -> &[usize] {
        &self.theta
    }

    pub fn at(&self, i: usize) -> usize {
        self.theta[i]
    }
}

/// Plan `δ_θ ⊗ dt` of a delay function.
pub fn plan_from_delay(delay: &DelayFunction) -> TriangularPlan {
    TriangularPlan::dirac(delay.grid(), |i| delay.at(i)).expect("delay functions are admissible")
}

/// `W_p^p(δ_t, μ) = Σ w |t − s|^p` for a discrete measure given as
/// `(position, weight)` atoms.
pub fn dirac_distance_pow(t: f64, atoms: impl IntoIterator<Item = (f64, f64)>, p: f64) -> f64 {
    atoms.into_iter().map(|(s, w)| w * (t - s).abs().powf(p)).sum()
}

/// Per-row memory penalty `W_p^p(δ_{t_i}, ν_{t_i}) = Σ_j w[i][j] |t_i − s_j|^p`.
pub fn wasserstein_penalty(plan: &TriangularPlan, p: f64) -> Result<Vec<f64>> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Wasserstein exponent must be a finite p >= 1, got {p}"
        )));
    }
    let grid = plan.grid();
    Ok((0..plan.n_steps())
        .map(|i| {
            let atoms = plan.row(i).iter().enumerate().map(|(j, &w)| (grid.node(j), w));
            dirac_distance_pow(grid.node(i), atoms, p)
        })
        .collect())
}

/// `(1 − s) a + s b`.
pub fn convex_combine(a: &TriangularPlan, b: &TriangularPlan, s: f64) -> Result<TriangularPlan> {
    a.grid().check_same(&b.grid())?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "convex weight must lie in [0, 1], got {s}"
        )));
    }
    let weights = a
        .flat()
        .iter()
        .zip(b.flat())
        .map(|(&x, &y)| (1.0 - s) * x + s * y)
        .collect();
    Ok(TriangularPlan::from_flat_unchecked(a.grid(), weights))
}
