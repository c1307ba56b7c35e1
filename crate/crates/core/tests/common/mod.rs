//! Random instance generators and an independent cost evaluator shared by
//! the integration tests.
#![allow(dead_code)]

use memctrl_core::problem::{Target, TimePoly};
use memctrl_core::{CostSpec, MemoryCost, ProblemSpec, RunningCost, TerminalCost, VectorField};
use rand::Rng;

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn matrix<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..d).map(|_| (0..d).map(|_| uniform(rng, -scale, scale)).collect()).collect()
}

fn field<R: Rng>(rng: &mut R, d: usize) -> VectorField {
    match (d, rng.random_range(0..3)) {
        (1, 0) => VectorField::LinearScalar {
            alpha: uniform(rng, -1.0, 1.0),
        },
        (2, 0) => VectorField::Diag2d {
            alpha: uniform(rng, -1.0, 1.0),
            beta: uniform(rng, -1.0, 1.0),
        },
        (_, 1) => VectorField::Linear { matrix: matrix(rng, d, 0.8) },
        _ => VectorField::Polynomial {
            coeffs: (0..d)
                .map(|_| {
                    vec![
                        TimePoly(vec![uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5)]),
                        TimePoly(vec![uniform(rng, -0.8, 0.8)]),
                        TimePoly(vec![uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2)]),
                    ]
                })
                .collect(),
        },
    }
}

fn running<R: Rng>(rng: &mut R, d: usize) -> RunningCost {
    match rng.random_range(0..3) {
        0 => RunningCost::Linear {
            weights: (0..d).map(|_| uniform(rng, -1.0, 1.0)).collect(),
        },
        1 => RunningCost::Quadratic {
            weights: (0..d)
                .map(|_| TimePoly(vec![uniform(rng, 0.1, 1.0), uniform(rng, -0.5, 0.5)]))
                .collect(),
        },
        _ => RunningCost::Tracking {
            target: if rng.random_bool(0.5) {
                Target::Constant {
                    value: (0..d).map(|_| uniform(rng, -1.0, 1.0)).collect(),
                }
            } else {
                Target::ExpAffine {
                    offset: uniform(rng, -1.0, 1.0),
                    scale: uniform(rng, -1.0, 1.0),
                    rate: uniform(rng, -1.0, 1.0),
                }
            },
        },
    }
}

fn terminal<R: Rng>(rng: &mut R, d: usize) -> TerminalCost {
    match rng.random_range(0..3) {
        0 => TerminalCost::None,
        1 => TerminalCost::Linear {
            weights: (0..d).map(|_| uniform(rng, -1.0, 1.0)).collect(),
        },
        _ => TerminalCost::Quadratic {
            weights: (0..d).map(|_| uniform(rng, 0.1, 2.0)).collect(),
            target: Some((0..d).map(|_| uniform(rng, -1.0, 1.0)).collect()),
        },
    }
}

fn memory<R: Rng>(rng: &mut R) -> MemoryCost {
    match rng.random_range(0..3) {
        0 => MemoryCost::None,
        1 => MemoryCost::Wasserstein {
            lambda: uniform(rng, 0.0, 1.0),
            p: [1.0, 1.5, 2.0][rng.random_range(0..3)],
        },
        _ => MemoryCost::Product {
            scale: uniform(rng, -1.0, 1.0),
        },
    }
}

/// Random catalog problem with `d ≤ 3` and an optional local linear term.
pub fn random_problem<R: Rng>(rng: &mut R, n_steps: usize) -> ProblemSpec {
    let d = rng.random_range(1..=3);
    let local = rng
        .random_bool(0.3)
        .then(|| VectorField::Linear { matrix: matrix(rng, d, 0.3) });
    let cost = CostSpec {
        running: running(rng, d),
        terminal: terminal(rng, d),
        memory: memory(rng),
    };
    let x0 = (0..d).map(|_| uniform(rng, -1.0, 1.0)).collect();
    ProblemSpec::new(field(rng, d), local, cost, x0, n_steps).expect("generated problem is valid")
}

/// Problem linear in the state with convex costs, kept in plain numbers so
/// the test can evaluate Dirac-row plans on its own.
#[derive(Debug, Clone)]
pub struct LinearConvex {
    pub n_steps: usize,
    pub a: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    /// `j = c·x + ½ Σ w_k x_k²`.
    pub lin: Vec<f64>,
    pub quad: Vec<f64>,
    /// `h = e·x + ½ Σ v_k (x_k − r_k)²`.
    pub term_lin: Vec<f64>,
    pub term_quad: Vec<f64>,
    pub term_target: Vec<f64>,
    /// `g = λ |t − s|^p`.
    pub lambda: f64,
    pub p: f64,
}

pub fn random_linear_convex<R: Rng>(rng: &mut R, n_steps: usize) -> LinearConvex {
    let d = rng.random_range(1..=2);
    let pick_linear = rng.random_bool(0.5);
    let vec = |rng: &mut R, lo: f64, hi: f64| (0..d).map(|_| uniform(rng, lo, hi)).collect::<Vec<_>>();
    LinearConvex {
        n_steps,
        a: matrix(rng, d, 1.5),
        x0: vec(rng, -1.0, 1.0),
        lin: if pick_linear { vec(rng, -1.0, 1.0) } else { vec![0.0; d] },
        quad: if pick_linear { vec![0.0; d] } else { vec(rng, 0.0, 2.0) },
        term_lin: if pick_linear { vec(rng, -1.0, 1.0) } else { vec![0.0; d] },
        term_quad: if pick_linear { vec![0.0; d] } else { vec(rng, 0.0, 2.0) },
        term_target: vec(rng, -1.0, 1.0),
        lambda: uniform(rng, 0.0, 0.5),
        p: [1.0, 2.0][rng.random_range(0..2)],
    }
}

impl LinearConvex {
    pub fn problem(&self) -> ProblemSpec {
        let d = self.x0.len();
        let linear = self.quad.iter().all(|&w| w == 0.0);
        let cost = CostSpec {
            running: if linear {
                RunningCost::Linear { weights: self.lin.clone() }
            } else {
                RunningCost::Quadratic {
                    weights: self.quad.iter().map(|&w| TimePoly::constant(w)).collect(),
                }
            },
            terminal: if linear {
                TerminalCost::Linear { weights: self.term_lin.clone() }
            } else {
                TerminalCost::Quadratic {
                    weights: self.term_quad.clone(),
                    target: Some(self.term_target.clone()),
                }
            },
            memory: MemoryCost::Wasserstein {
                lambda: self.lambda,
                p: self.p,
            },
        };
        assert_eq!(self.a.len(), d);
        ProblemSpec::new(
            VectorField::Linear { matrix: self.a.clone() },
            None,
            cost,
            self.x0.clone(),
            self.n_steps,
        )
        .expect("valid linear-convex problem")
    }
}

/// Explicit Euler cost of the Dirac-row plan `ν_{t_i} = δ_{t_{θ_i}}`,
/// written out independently of the library.
pub fn dirac_cost_linear(spec: &LinearConvex, theta: &[usize]) -> f64 {
    let n = spec.n_steps;
    let h = 1.0 / n as f64;
    let d = spec.x0.len();
    let mut xs = vec![spec.x0.clone()];
    for i in 0..n {
        let past = &xs[theta[i]];
        let next: Vec<f64> = (0..d)
            .map(|k| xs[i][k] + h * (0..d).map(|l| spec.a[k][l] * past[l]).sum::<f64>())
            .collect();
        xs.push(next);
    }
    let mut cost = 0.0;
    for (i, &th) in theta.iter().enumerate().take(n) {
        let x = &xs[i];
        let run: f64 = (0..d).map(|k| spec.lin[k] * x[k] + 0.5 * spec.quad[k] * x[k] * x[k]).sum();
        let dt = (i - th) as f64 * h;
        let g = if spec.lambda == 0.0 { 0.0 } else { spec.lambda * dt.powf(spec.p) };
        cost += h * (run + g);
    }
    let x = &xs[n];
    cost + (0..d)
        .map(|k| spec.term_lin[k] * x[k] + 0.5 * spec.term_quad[k] * (x[k] - spec.term_target[k]).powi(2))
        .sum::<f64>()
}

/// Fine plan whose row `k` carries coarse row `k / r` with every atom left at
/// its coarse node, which is what the delay realization samples from.
pub fn spread_at_coarse_nodes(plan: &memctrl_core::TriangularPlan, r: usize) -> memctrl_core::TriangularPlan {
    let n = plan.n_steps() * r;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut out = vec![0.0; k + 1];
            for (j, &w) in plan.row(k / r).iter().enumerate() {
                out[j * r] += w;
            }
            out
        })
        .collect();
    let grid = memctrl_core::TimeGrid::new(n).expect("positive step count");
    memctrl_core::TriangularPlan::from_rows(grid, &rows).expect("rows stay stochastic")
}
