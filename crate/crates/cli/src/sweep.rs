//! Cartesian parameter sweeps. Each point is an ordinary `optimize` or
//! `forward` run in its own directory under the sweep directory.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use memctrl_core::analytic::{scalar_switch, SwitchRegime};
use memctrl_core::problem::{ProblemFile, RunningCost, TerminalCost};
use memctrl_core::{cost_breakdown, solve_forward, FwOptions, MemoryCost, ProblemSpec, VectorField};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::commands::{fw_options, fw_replay, optimize_into, OPTIMIZE_PLOTS};
use crate::inputs;
use crate::run::{Plot, RunDir};
use crate::SweepArgs;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub values: Vec<f64>,
}

/// `name=start:end:count` (inclusive, evenly spaced) or `name=v1,v2,...`.
pub fn parse_param(spec: &str) -> Result<Param> {
    let (name, rhs) = spec.split_once('=').ok_or_else(|| anyhow!("parameter `{spec}` needs the form name=values"))?;
    let name = name.trim();
    if name.is_empty() {
        bail!("parameter `{spec}` has an empty name");
    }
    let num = |s: &str| s.trim().parse::<f64>().with_context(|| format!("bad number `{s}` in `{spec}`"));
    let values = if rhs.contains(':') {
        let parts: Vec<&str> = rhs.split(':').collect();
        let [start, end, count] = parts[..] else {
            bail!("range `{rhs}` needs start:end:count");
        };
        let (start, end) = (num(start)?, num(end)?);
        let count: usize = count.trim().parse().with_context(|| format!("bad count in `{spec}`"))?;
        match count {
            0 => bail!("range `{rhs}` has no points"),
            1 => vec![start],
            _ => (0..count).map(|k| start + (end - start) * k as f64 / (count - 1) as f64).collect(),
        }
    } else {
        rhs.split(',').map(num).collect::<Result<_>>()?
    };
    Ok(Param { name: name.to_owned(), values })
}

/// Every combination, the first parameter varying slowest.
pub fn grid(params: &[Param]) -> Vec<Vec<f64>> {
    params.iter().fold(vec![Vec::new()], |acc, p| {
        acc.iter()
            .flat_map(|prefix| {
                p.values.iter().map(move |&v| {
                    let mut point = prefix.clone();
                    point.push(v);
                    point
                })
            })
            .collect()
    })
}

fn lookup<'a>(root: &'a mut Value, path: &[&str]) -> Result<&'a mut Value> {
    let mut node = root;
    for seg in path {
        node = match node {
            Value::Object(map) => map.get_mut(*seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
            _ => None,
        }
        .ok_or_else(|| anyhow!("no field `{}` in the problem", path.join(".")))?;
    }
    Ok(node)
}

/// Replaces a number, keeping integers integral and turning a time
/// polynomial into the constant `[v]`.
fn assign(slot: &mut Value, v: f64, what: &str) -> Result<()> {
    *slot = match slot {
        Value::Number(n) if n.is_u64() => {
            if v < 0.0 || v.fract() != 0.0 {
                bail!("`{what}` needs a nonnegative integer, got {v}");
            }
            json!(v as u64)
        }
        Value::Number(_) => json!(v),
        Value::Array(items) if items.iter().all(Value::is_number) => json!([v]),
        _ => bail!("`{what}` is not a number"),
    };
    Ok(())
}

fn kind(problem: &Value, path: &[&str]) -> Option<String> {
    let mut node = problem;
    for seg in path {
        node = node.get(seg)?;
    }
    node.get("kind")?.as_str().map(str::to_owned)
}

/// Sets one parameter. Aliases follow the scalar and two-dimensional
/// examples: `b` is the reward weight of a linear terminal cost (stored as
/// `−b`) or else the second quadratic running weight.
pub fn apply(problem: &mut Value, name: &str, v: f64) -> Result<()> {
    let (path, value): (Vec<&str>, f64) = match name {
        "n" => (vec!["n_steps"], v),
        "alpha" => (vec!["dynamics", "alpha"], v),
        "beta" => (vec!["dynamics", "beta"], v),
        "lambda" => (vec!["cost", "memory", "lambda"], v),
        "p" => (vec!["cost", "memory", "p"], v),
        "a" => (vec!["cost", "running", "weights", "0"], v),
        "b" if kind(problem, &["cost", "terminal"]).as_deref() == Some("linear") => {
            (vec!["cost", "terminal", "weights", "0"], -v)
        }
        "b" if kind(problem, &["cost", "running"]).as_deref() == Some("quadratic") => {
            (vec!["cost", "running", "weights", "1"], v)
        }
        "b" => bail!("alias `b` needs a linear terminal cost or a two-weight quadratic running cost"),
        path => (path.split('.').collect(), v),
    };
    assign(lookup(problem, &path)?, value, name)
}

/// Closed-form switching time when the point is the scalar example.
fn scalar_t0(problem: &ProblemSpec) -> Option<f64> {
    let file: ProblemFile = problem.to_file();
    let VectorField::LinearScalar { alpha } = file.dynamics.field else { return None };
    let (RunningCost::Linear { weights: a }, TerminalCost::Linear { weights: c }, MemoryCost::None) =
        (&file.cost.running, &file.cost.terminal, &file.cost.memory)
    else {
        return None;
    };
    if file.dynamics.local_term.is_some() || file.x0 != [1.0] {
        return None;
    }
    match scalar_switch(alpha, a[0], -c[0]).ok()? {
        SwitchRegime::AllRecent => Some(0.0),
        SwitchRegime::Switch { t0 } => Some(t0),
    }
}

struct PointRow {
    dir: String,
    values: Vec<f64>,
    n_steps: usize,
    cost: f64,
    gap: Option<f64>,
    converged: Option<bool>,
    iterations: Option<usize>,
    switch_index: Option<usize>,
    t0: Option<f64>,
}

/// Settings shared by every point of a sweep.
struct Sweep<'a> {
    base: &'a Value,
    params: &'a [Param],
    args: &'a SweepArgs,
    opts: &'a FwOptions,
    dir: &'a std::path::Path,
    argv: &'a [String],
}

fn run_point(sweep: &Sweep, values: &[f64], k: usize) -> Result<PointRow> {
    let Sweep { base, params, args, opts, dir: sweep_dir, argv } = *sweep;
    let mut value = base.clone();
    for (p, &v) in params.iter().zip(values) {
        apply(&mut value, &p.name, v)?;
    }
    let problem = inputs::problem_from_value(value, None).with_context(|| format!("sweep point {k}"))?;
    let dir = format!("point-{k:03}");
    let (command, replay) = if args.optimize {
        let mut r = vec!["optimize".to_owned(), "--problem".into(), "problem.json".into()];
        r.extend(fw_replay(&args.fw));
        ("optimize", r)
    } else {
        if !inputs::is_keyword(&args.plan) {
            bail!("sweeps without --optimize take a plan keyword (zero, recent, half, uniform)");
        }
        ("forward", vec!["forward".into(), "--problem".into(), "problem.json".into(), "--plan".into(), args.plan.clone()])
    };
    let inputs = json!({ "problem": problem.to_file(), "plans": { "plan": args.plan } });
    let mut run = RunDir::create(command, replay, inputs, Some(&sweep_dir.join(&dir)))?;
    run.write_problem(&problem)?;
    let t0 = scalar_t0(&problem);
    let n_steps = problem.grid().n_steps();
    let row = if args.optimize {
        let r = optimize_into(&mut run, &problem, opts, None)?;
        let row = PointRow {
            dir,
            values: values.to_vec(),
            n_steps,
            cost: r.cost,
            gap: Some(r.gap),
            converged: Some(r.converged),
            iterations: Some(r.iterations),
            switch_index: r.switch.switch_index,
            t0,
        };
        run.finish(argv, Some(opts.seed), &r, &OPTIMIZE_PLOTS)?;
        row
    } else {
        let plan = inputs::plan(&args.plan, problem.grid())?;
        let traj = solve_forward(&problem, &plan)?;
        let breakdown = cost_breakdown(&problem, &plan, traj.states())?;
        run.write("trajectory.csv", &memctrl_core::io::trajectory_csv(&traj))?;
        let result = json!({ "cost": breakdown.total(), "breakdown": breakdown });
        run.finish(argv, None, &result, &[Plot { csv: "trajectory.csv", title: "state", log_y: false }])?;
        PointRow {
            dir,
            values: values.to_vec(),
            n_steps,
            cost: breakdown.total(),
            gap: None,
            converged: None,
            iterations: None,
            switch_index: None,
            t0,
        }
    };
    Ok(row)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn summary_csv(params: &[Param], rows: &[PointRow]) -> String {
    let mut out = String::from("point,dir");
    for p in params {
        out.push(',');
        out.push_str(&p.name);
    }
    out.push_str(",n_steps,cost,gap,converged,iterations,switch_index,switch_time,t0,switch_error_cells,within_two_cells\n");
    for (k, r) in rows.iter().enumerate() {
        let _ = write!(out, "{k},{}", r.dir);
        for v in &r.values {
            let _ = write!(out, ",{v}");
        }
        let n = r.n_steps as f64;
        let switch_time = r.switch_index.map(|i| i as f64 / n);
        let cells = match (r.switch_index, r.t0) {
            (Some(i), Some(t0)) => Some((i as f64 - t0 * n).abs()),
            // no switch means δ_t from the first row
            (None, Some(t0)) if r.gap.is_some() => Some(t0 * n),
            _ => None,
        };
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{},{},{},{}",
            r.n_steps,
            r.cost,
            opt(r.gap),
            opt(r.converged),
            opt(r.iterations),
            opt(r.switch_index),
            opt(switch_time),
            opt(r.t0),
            opt(cells),
            opt(cells.map(|c| c <= 2.0)),
        );
    }
    out
}

pub fn run(args: &SweepArgs, argv: &[String]) -> Result<()> {
    let params: Vec<Param> = args.params.iter().map(|s| parse_param(s)).collect::<Result<_>>()?;
    let opts = fw_options(&args.fw);
    opts.validate()?;
    let base = inputs::read_problem_json(&args.problem)?;
    inputs::problem_from_value(base.clone(), None).context("base problem of the sweep")?;

    let mut replay = vec!["sweep".to_owned(), "--problem".into(), "problem.json".into()];
    for s in &args.params {
        replay.push("--param".into());
        replay.push(s.clone());
    }
    if args.optimize {
        replay.push("--optimize".into());
        replay.extend(fw_replay(&args.fw));
    } else {
        replay.push("--plan".into());
        replay.push(args.plan.clone());
    }
    let mut run = RunDir::create("sweep", replay, json!({ "problem": base }), args.out.as_deref())?;
    run.write_json("problem.json", &base)?;
    let sweep_dir = run.path().to_path_buf();

    let sweep = Sweep { base: &base, params: &params, args, opts: &opts, dir: &sweep_dir, argv };
    let points = grid(&params);
    let rows: Vec<PointRow> = points
        .par_iter()
        .enumerate()
        .map(|(k, values)| run_point(&sweep, values, k))
        .collect::<Result<_>>()?;
    let summary = summary_csv(&params, &rows);
    run.write("summary.csv", &summary)?;
    say!("{}", summary.trim_end());
    let path = run.finish(
        argv,
        args.optimize.then_some(opts.seed),
        &json!({ "points": rows.len(), "parameters": params.iter().map(|p| &p.name).collect::<Vec<_>>() }),
        &[],
    )?;
    say!("run: {}", path.display());
    Ok(())
}
