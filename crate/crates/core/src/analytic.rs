//! Closed-form oracles: the scalar switching example, the two-dimensional
//! sign conditions, and an instance whose optimum is not a delay function.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{convex_combine, TimeGrid, TriangularPlan};
use crate::problem::{CostSpec, MemoryCost, ProblemSpec, RunningCost, Target, TerminalCost, TimePoly, VectorField};

/// `(e^α − 1) / (α e^α)`; the limit `1` at `α = 0`.
pub fn scalar_threshold(alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    -(-alpha).exp_m1() / alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum SwitchRegime {
    /// `ν_t = δ_t` for every `t`.
    AllRecent,
    /// `ν_t = δ_0` on `(0, t0)` and `δ_t` on `(t0, 1)`.
    Switch { t0: f64 },
}

impl SwitchRegime {
    /// Switching time, `0` when every row is recent.
    pub fn t0(&self) -> f64 {
        match self {
            SwitchRegime::AllRecent => 0.0,
            SwitchRegime::Switch { t0 } => *t0,
        }
    }
}

fn require_positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be positive and finite, got {v}")))
    }
}

/// Optimal structure for `ẋ = α⟨x, ν_t⟩`, `x(0) = 1`,
/// `J = a ∫x − b x(1)`.
pub fn scalar_switch(alpha: f64, a: f64, b: f64) -> Result<SwitchRegime> {
    require_positive("alpha", alpha)?;
    require_positive("a", a)?;
    require_positive("b", b)?;
    if b / a >= scalar_threshold(alpha) {
        return Ok(SwitchRegime::AllRecent);
    }
    let t0 = 1.0 - (a / (a - alpha * b)).ln() / alpha;
    Ok(SwitchRegime::Switch { t0 })
}

/// Costate of the scalar example at the optimal control, with `q(1) = b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarCostate {
    pub alpha: f64,
    pub a: f64,
    pub b: f64,
    pub regime: SwitchRegime,
}

impl ScalarCostate {
    pub fn eval(&self, t: f64) -> f64 {
        let t0 = self.regime.t0();
        let (alpha, a, b) = (self.alpha, self.a, self.b);
        if t < t0 {
            a * (t - t0)
        } else {
            a / alpha + (b - a / alpha) * (alpha * (1.0 - t)).exp()
        }
    }
}

pub fn scalar_costate(alpha: f64, a: f64, b: f64) -> Result<ScalarCostate> {
    let regime = scalar_switch(alpha, a, b)?;
    Ok(ScalarCostate { alpha, a, b, regime })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceControl {
    /// `ν_t = δ_0`.
    AllZero,
    /// `ν_t = δ_t`.
    AllRecent,
}

/// Closed-form trajectory of `ẋ = α⟨x, ν_t⟩`, `x(0) = 1` under a constant
/// Dirac control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarReference {
    pub alpha: f64,
    pub control: ReferenceControl,
}

impl ScalarReference {
    pub fn state(&self, t: f64) -> f64 {
        match self.control {
            ReferenceControl::AllZero => 1.0 + self.alpha * t,
            ReferenceControl::AllRecent => (self.alpha * t).exp(),
        }
    }

    /// `∫_0^1 x dt`, the cost with weights `a = 1, b = 0`.
    pub fn integral(&self) -> f64 {
        let alpha = self.alpha;
        match self.control {
            ReferenceControl::AllZero => 1.0 + alpha / 2.0,
            ReferenceControl::AllRecent if alpha == 0.0 => 1.0,
            ReferenceControl::AllRecent => alpha.exp_m1() / alpha,
        }
    }

    /// `−x(1)`, the cost with weights `a = 0, b = 1`.
    pub fn terminal(&self) -> f64 {
        -self.state(1.0)
    }
}

pub fn scalar_reference(alpha: f64, control: ReferenceControl) -> ScalarReference {
    ScalarReference { alpha, control }
}

/// The scalar example on `n_steps` steps: `f = αx`, `x0 = 1`, `j = a x`,
/// `h = −b x`, `g = 0`.
pub fn scalar_instance(alpha: f64, a: f64, b: f64, n_steps: usize) -> Result<ProblemSpec> {
    ProblemSpec::new(
        VectorField::LinearScalar { alpha },
        None,
        CostSpec {
            running: RunningCost::Linear { weights: vec![a] },
            terminal: TerminalCost::Linear { weights: vec![-b] },
            memory: MemoryCost::None,
        },
        vec![1.0],
        n_steps,
    )
}

/// `x*(t) = −1 + 2 e^{t/2}`, the state of the half-and-half plan.
pub fn nonexistence_state(t: f64) -> f64 {
    -1.0 + 2.0 * (0.5 * t).exp()
}

/// Problem with `f = x`, `x0 = 1`, `j = |x − x*|²`, `g = s(t − s)` and no
/// terminal cost. Its minimum `0` is attained only by `(δ_0 + δ_t)/2`, so no
/// delay function is optimal.
#[derive(Debug, Clone, PartialEq)]
pub struct NonexistenceInstance {
    pub problem: ProblemSpec,
}

impl NonexistenceInstance {
    pub fn new(n_steps: usize) -> Result<Self> {
        let problem = ProblemSpec::new(
            VectorField::LinearScalar { alpha: 1.0 },
            None,
            CostSpec {
                running: RunningCost::Tracking {
                    target: Target::ExpAffine {
                        offset: -1.0,
                        scale: 2.0,
                        rate: 0.5,
                    },
                },
                terminal: TerminalCost::None,
                memory: MemoryCost::Product { scale: 1.0 },
            },
            vec![1.0],
            n_steps,
        )?;
        Ok(Self { problem })
    }

    /// `(δ_0 + δ_t)/2` in every row of `grid`.
    pub fn optimal_plan(grid: TimeGrid) -> TriangularPlan {
        convex_combine(&TriangularPlan::origin(grid), &TriangularPlan::recent(grid), 0.5)
            .expect("same grid, s = 1/2")
    }

    pub fn plan(&self) -> TriangularPlan {
        Self::optimal_plan(self.problem.grid())
    }
}

pub fn nonexistence_instance(n_steps: usize) -> Result<NonexistenceInstance> {
    NonexistenceInstance::new(n_steps)
}

/// `ẋ = α⟨x, ν_t⟩`, `ẏ = β⟨y, ν_t⟩`, running cost `½(a x² + b y²)`.
pub fn two_dim_instance(
    alpha: f64,
    beta: f64,
    a: TimePoly,
    b: TimePoly,
    x0: f64,
    y0: f64,
    n_steps: usize,
) -> Result<ProblemSpec> {
    ProblemSpec::new(
        VectorField::Diag2d { alpha, beta },
        None,
        CostSpec {
            running: RunningCost::Quadratic { weights: vec![a, b] },
            terminal: TerminalCost::None,
            memory: MemoryCost::None,
        },
        vec![x0, y0],
        n_steps,
    )
}

/// Bounds and end-behavior predicates of the two-dimensional example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoDimReport {
    pub x_bound: f64,
    pub y_bound: f64,
    pub q1_bound: f64,
    pub q2_bound: f64,
    /// `∫a₋ − (1/(1−α))∫a₊ − α‖a‖/(1−α)²`.
    pub a_margin: f64,
    /// Same with `b` and `β`.
    pub b_margin: f64,
    /// `a(1) > 0` and `b(1) > 0`: `ν_t = δ_0` near `t = 1`.
    pub origin_near_end: bool,
    /// Both margins positive: `ν_t = δ_t` near `t = 0`.
    pub recent_near_start: bool,
    /// `a` and `b` positive at every node: `ν_t = δ_0` throughout.
    pub origin_everywhere: bool,
}

struct WeightStats {
    pos: f64,
    neg: f64,
    sup: f64,
    min: f64,
}

/// Trapezoid integrals of the positive and negative parts on `n` steps.
fn weight_stats(w: &dyn Fn(f64) -> f64, n: usize) -> WeightStats {
    let h = 1.0 / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| w(i as f64 * h)).collect();
    let trap = |f: &dyn Fn(f64) -> f64| {
        h * (0.5 * (f(vals[0]) + f(vals[n])) + vals[1..n].iter().map(|&v| f(v)).sum::<f64>())
    };
    WeightStats {
        pos: trap(&|v: f64| v.max(0.0)),
        neg: trap(&|v: f64| (-v).max(0.0)),
        sup: vals.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        min: vals.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

fn margin(s: &WeightStats, rate: f64) -> f64 {
    s.neg - s.pos / (1.0 - rate) - rate * s.sup / (1.0 - rate).powi(2)
}

pub fn two_dim_conditions(
    alpha: f64,
    beta: f64,
    a: &dyn Fn(f64) -> f64,
    b: &dyn Fn(f64) -> f64,
    x0: f64,
    y0: f64,
    n_steps: usize,
) -> Result<TwoDimReport> {
    for (what, v) in [("alpha", alpha), ("beta", beta)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::InvalidArgument(format!("{what} must lie in (0, 1), got {v}")));
        }
    }
    if !(x0 > 0.0) || !(y0 < 0.0) {
        return Err(Error::InvalidArgument(format!("need x0 > 0 and y0 < 0, got {x0}, {y0}")));
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument("quadrature needs at least one step".into()));
    }
    let sa = weight_stats(a, n_steps);
    let sb = weight_stats(b, n_steps);
    let a_margin = margin(&sa, alpha);
    let b_margin = margin(&sb, beta);
    Ok(TwoDimReport {
        x_bound: x0 / (1.0 - alpha),
        y_bound: y0.abs() / (1.0 - beta),
        q1_bound: sa.sup * x0 / (1.0 - alpha).powi(2),
        q2_bound: sb.sup * y0.abs() / (1.0 - beta).powi(2),
        a_margin,
        b_margin,
        origin_near_end: a(1.0) > 0.0 && b(1.0) > 0.0,
        recent_near_start: a_margin > 0.0 && b_margin > 0.0,
        origin_everywhere: sa.min > 0.0 && sb.min > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::solve_forward;
    use crate::problem::total_cost;

    #[test]
    fn threshold_value() {
        let alpha: f64 = 0.5;
        let direct = (alpha.exp() - 1.0) / (alpha * alpha.exp());
        assert!((scalar_threshold(alpha) - direct).abs() < 1e-15);
        assert!((scalar_threshold(0.5) - 0.78694).abs() < 1e-5);
    }

    #[test]
    fn switch_regimes() {
        assert_eq!(scalar_switch(0.5, 1.0, 0.8).unwrap(), SwitchRegime::AllRecent);
        let t0 = scalar_switch(0.5, 1.0, 0.5).unwrap().t0();
        assert!((t0 - (1.0 - 2.0 * (1.0f64 / 0.75).ln())).abs() < 1e-14);
        assert!((t0 - 0.42462).abs() < 1e-4);
        let near_zero_b = scalar_switch(0.5, 1.0, 1e-9).unwrap().t0();
        assert!(near_zero_b > 1.0 - 1e-8);
        assert!(scalar_switch(0.0, 1.0, 0.5).is_err());
        assert!(scalar_switch(0.5, -1.0, 0.5).is_err());
        assert!(scalar_switch(0.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn switch_time_tends_to_zero_at_threshold() {
        let th = scalar_threshold(0.5);
        let t0 = scalar_switch(0.5, 1.0, th * (1.0 - 1e-9)).unwrap().t0();
        assert!(t0 > 0.0 && t0 < 1e-8);
    }

    #[test]
    fn costate_is_continuous_and_matches_terminal() {
        let q = scalar_costate(0.5, 1.0, 0.5).unwrap();
        let t0 = q.regime.t0();
        assert!(q.eval(t0 - 1e-12).abs() < 1e-10);
        assert!(q.eval(t0 + 1e-12).abs() < 1e-10);
        assert!((q.eval(1.0) - 0.5).abs() < 1e-15);
        assert!(q.eval(0.1) < 0.0 && q.eval(0.9) > 0.0);
        let q = scalar_costate(0.5, 1.0, 0.8).unwrap();
        assert!((0..=100).all(|i| q.eval(i as f64 / 100.0) > 0.0));
    }

    #[test]
    fn references() {
        let zero = scalar_reference(1.0, ReferenceControl::AllZero);
        assert_eq!(zero.state(1.0), 2.0);
        assert_eq!(zero.integral(), 1.5);
        let recent = scalar_reference(1.0, ReferenceControl::AllRecent);
        assert!((recent.terminal() + std::f64::consts::E).abs() < 1e-15);
        for c in [ReferenceControl::AllZero, ReferenceControl::AllRecent] {
            let r = scalar_reference(0.0, c);
            assert_eq!(r.state(0.7), 1.0);
            assert_eq!(r.integral(), 1.0);
        }
    }

    #[test]
    fn nonexistence_identity() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            assert!(((0.5 * t).exp() - 0.5 * (1.0 + nonexistence_state(t))).abs() < 1e-15);
        }
    }

    #[test]
    fn nonexistence_plan_nearly_free() {
        let inst = nonexistence_instance(400).unwrap();
        let plan = inst.plan();
        let traj = solve_forward(&inst.problem, &plan).unwrap();
        let cost = total_cost(&inst.problem, &plan, &traj).unwrap();
        assert!(cost > 0.0 && cost < 1e-2, "{cost}");
        let err = (0..=400)
            .map(|i| (traj.state(i)[0] - nonexistence_state(i as f64 / 400.0)).abs())
            .fold(0.0, f64::max);
        assert!(err < 2.0 / 400.0, "{err}");
    }

    #[test]
    fn two_dim_positive_weights() {
        let one = |_: f64| 1.0;
        let r = two_dim_conditions(0.5, 0.5, &one, &one, 1.0, -1.0, 100).unwrap();
        assert!(r.origin_near_end && r.origin_everywhere && !r.recent_near_start);
        assert_eq!(r.x_bound, 2.0);
        assert_eq!(r.q1_bound, 4.0);
        assert_eq!(r.q2_bound, 4.0);
    }

    #[test]
    fn two_dim_deep_dip_predicts_recent_start() {
        let a = |t: f64| if t < 0.2 { -30.0 } else { 0.5 };
        let r = two_dim_conditions(0.1, 0.1, &a, &a, 1.0, -2.0, 1000).unwrap();
        // ∫a₋ = 6, ∫a₊ = 0.4, ‖a‖ = 30
        let expected = 6.0 - 0.4 / 0.9 - 0.1 * 30.0 / 0.81;
        assert!((r.a_margin - expected).abs() < 0.05, "{}", r.a_margin);
        assert!(r.recent_near_start && r.origin_near_end && !r.origin_everywhere);
    }

    #[test]
    fn two_dim_small_rate_limit() {
        let a = |t: f64| 1.0 - 2.0 * t;
        let r = two_dim_conditions(1e-12, 1e-12, &a, &a, 1.0, -1.0, 1000).unwrap();
        assert!(r.a_margin.abs() < 1e-6);
        let a = |t: f64| 0.9 - 2.0 * t;
        let r = two_dim_conditions(1e-12, 1e-12, &a, &a, 1.0, -1.0, 1000).unwrap();
        // ∫a₋ − ∫a₊ = 1.1²/4 − 0.9²/4
        assert!((r.a_margin - 0.1).abs() < 1e-5);
    }

    #[test]
    fn two_dim_rejects_rates() {
        let one = |_: f64| 1.0;
        assert!(two_dim_conditions(1.0, 0.5, &one, &one, 1.0, -1.0, 10).is_err());
        assert!(two_dim_conditions(0.5, 0.0, &one, &one, 1.0, -1.0, 10).is_err());
        assert!(two_dim_conditions(0.5, 0.5, &one, &one, -1.0, -1.0, 10).is_err());
    }
}
