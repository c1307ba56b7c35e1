//! Optimal control of ODEs whose drift reads the past state through a
//! nonanticipative family of probability measures `ν_t` on `[0, t]`:
//!
//! ```text
//! ẋ(t) = ∫ f(s, x(s)) dν_t(s),   J(γ) = ∫ j(t, x) dt + h(x(1)) + ∫∫ g dγ.
//! ```
//!
//! Plans `γ = ν_t ⊗ dt` are discretized as lower-triangular row-stochastic
//! matrices on a uniform grid ([`TriangularPlan`]). The crate provides the
//! forward solver, the discrete adjoint and plan gradient, maximum-principle
//! residuals, Frank–Wolfe minimization, Carathéodory pruning, realization of
//! plans by delay functions, and closed-form reference solutions.
//!
//! ```
//! use memctrl_core::{analytic, minimize, FwOptions, switch_report};
//!
//! let problem = analytic::scalar_instance(0.5, 1.0, 0.5, 40).unwrap();
//! let result = minimize(&problem, &FwOptions::default(), None).unwrap();
//! let t0 = analytic::scalar_switch(0.5, 1.0, 0.5).unwrap().t0();
//! let found = switch_report(&result.plan).switch_time.unwrap();
//! assert!((found - t0).abs() <= 2.0 / 40.0);
//! ```

pub mod adjoint;
pub mod analytic;
pub mod error;
pub mod forward;
pub mod io;
pub mod measures;
pub mod optimize;
pub mod pmp;
pub mod problem;
pub mod relax;

pub use adjoint::{
    cost_gradient, duality_check, gradient_at, linearization_residual, linearized_state, solve_adjoint_discrete,
    solve_adjoint_fixed_point, AdjointPath, DualityReport, FixedPointAdjoint, PlanGradient,
};
pub use error::{Error, Result};
pub use forward::{solve_deviated, solve_forward, solve_forward_picard, PicardSolution, Trajectory};
pub use measures::{
    convex_combine, plan_from_delay, second_marginal, wasserstein_penalty, DelayFunction, ReverseDisintegration,
    TimeGrid, TriangularPlan,
};
pub use optimize::{frank_wolfe, minimize, switch_report, FwOptions, FwResult, StepRule, SwitchReport};
pub use pmp::{caratheodory_prune, pmp_residual, pmp_residual_of, sufficiency_check, PmpReport};
pub use problem::{
    cost_breakdown, load_problem, parse_problem, total_cost, CostBreakdown, CostSpec, MemoryCost, ProblemSpec,
    RunningCost, TerminalCost, VectorField,
};
pub use relax::{delay_realization, relaxation_gap, GapRow};
