use std::path::Path;

use anyhow::{bail, Context, Result};
use memctrl_core::analytic::NonexistenceInstance;
use memctrl_core::io::load_plan;
use memctrl_core::{parse_problem, ProblemSpec, TimeGrid, TriangularPlan};

pub fn read_problem_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Validates a JSON problem, applying the step-count override first.
pub fn problem_from_value(mut value: serde_json::Value, n: Option<usize>) -> Result<ProblemSpec> {
    if let Some(n) = n {
        value["n_steps"] = n.into();
    }
    Ok(parse_problem(&value.to_string())?)
}

pub fn load(path: &Path, n: Option<usize>) -> Result<ProblemSpec> {
    problem_from_value(read_problem_json(path)?, n).with_context(|| format!("problem {}", path.display()))
}

/// A plan keyword or a plan file checked against the problem grid.
pub fn plan(spec: &str, grid: TimeGrid) -> Result<TriangularPlan> {
    let plan = match spec {
        "zero" => TriangularPlan::origin(grid),
        "recent" => TriangularPlan::recent(grid),
        "half" => NonexistenceInstance::optimal_plan(grid),
        "uniform" => TriangularPlan::uniform(grid),
        path => load_plan(path).with_context(|| format!("plan {path}"))?,
    };
    if plan.n_steps() != grid.n_steps() {
        bail!("plan has {} steps but the problem grid has {}", plan.n_steps(), grid.n_steps());
    }
    Ok(plan)
}

pub fn is_keyword(spec: &str) -> bool {
    matches!(spec, "zero" | "recent" | "half" | "uniform")
}
