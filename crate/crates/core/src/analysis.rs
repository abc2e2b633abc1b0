//! Error norms against manufactured solutions, order fits and constraint
//! tables.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::quadrature::{basis_gradients, element_points};
use crate::fem::FemSystem;
use crate::grid::{make_time_grid, TimeGrid};
use crate::optimizer::{constraint_integral, gp_iterate, OptimizerConfig, OptimizerOutcome, FEASIBILITY_TOL};
use crate::paths::{compensated_sum, mc_mean, mc_variance, strong_norm_from_squares, BrownianEnsemble};
use crate::problems::ManufacturedProblem;
use crate::spde::{PathEnsembleTrajectory, SpdeSolver, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    pub strong_l2_state: f64,
    pub strong_l2_adjoint: f64,
    pub strong_l2_control: f64,
    pub h1_state: f64,
    pub h1_adjoint: f64,
    pub mu_error: f64,
    pub h: f64,
    pub tau: f64,
    pub paths: usize,
    pub seed: u64,
}

/// Numerical solution to be measured.
#[derive(Debug, Clone)]
pub struct SolutionBundle<'a> {
    pub control: &'a Trajectory,
    /// Expected adjoint including the multiplier term.
    pub adjoint_mean: &'a Trajectory,
    pub mu: f64,
    /// Per-path states; simulated one path at a time from `control` when absent.
    pub states: Option<&'a PathEnsembleTrajectory>,
}

/// Grid of quadrature points with the exact state gradient at each level,
/// split as `∇X(t, x, w) = g0 + w·g1`.
struct GradientTable {
    weights: Vec<f64>,
    points: Vec<[f64; 2]>,
    per_element: usize,
}

impl GradientTable {
    fn new(system: &FemSystem) -> GradientTable {
        let mesh = system.mesh();
        let mut weights = Vec::new();
        let mut points = Vec::new();
        let mut per_element = 0;
        for e in 0..mesh.n_elements() {
            let q = element_points(mesh, e);
            per_element = q.len();
            for p in q {
                weights.push(p.weight);
                points.push(p.x);
            }
        }
        GradientTable { weights, points, per_element }
    }

    fn gradients(&self, dim: usize, g: impl Fn(&[f64]) -> f64) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| gradient(&g, &p[..dim])).collect()
    }
}

// Fourth-order central differences.
fn gradient(g: &impl Fn(&[f64]) -> f64, x: &[f64]) -> [f64; 2] {
    const H: f64 = 1e-3;
    let mut out = [0.0; 2];
    let mut p = [0.0; 2];
    for d in 0..x.len() {
        p[..x.len()].copy_from_slice(x);
        let mut at = |s: f64| {
            p[d] = x[d] + s;
            g(&p[..x.len()])
        };
        out[d] = (-at(2.0 * H) + 8.0 * at(H) - 8.0 * at(-H) + at(-2.0 * H)) / (12.0 * H);
    }
    out
}

/// `∫ |∇u_exact − ∇u_h|²` with the exact gradient sampled at quadrature points.
fn h1_error_sq(system: &FemSystem, table: &GradientTable, values: &[f64], exact: impl Fn(usize) -> [f64; 2]) -> f64 {
    let mesh = system.mesh();
    let terms = (0..mesh.n_elements()).map(|e| {
        let grads = discrete_gradient(mesh, e, values);
        (0..table.per_element)
            .map(|k| {
                let q = e * table.per_element + k;
                let g = exact(q);
                table.weights[q] * ((g[0] - grads[0]).powi(2) + (g[1] - grads[1]).powi(2))
            })
            .sum::<f64>()
    });
    compensated_sum(terms)
}

fn discrete_gradient(mesh: &crate::grid::Mesh, e: usize, values: &[f64]) -> [f64; 2] {
    let b = basis_gradients(mesh, e);
    let mut g = [0.0; 2];
    for (a, &node) in mesh.element(e).iter().enumerate() {
        if let Some(i) = mesh.interior_index(node) {
            g[0] += values[i] * b[a][0];
            g[1] += values[i] * b[a][1];
        }
    }
    g
}

/// Errors of a numerical solution against `problem`'s exact one.
///
/// State errors are taken path by path against `exact_x(t_n, ·, W_p(t_n))`;
/// adjoint and control errors are deterministic. Exact solutions enter by
/// nodal interpolation for L² norms, while H¹ errors integrate the exact
/// gradient by quadrature.
pub fn compute_errors(
    problem: &ManufacturedProblem,
    bundle: &SolutionBundle<'_>,
    ensemble: &BrownianEnsemble,
    system: &FemSystem,
    grid: &TimeGrid,
) -> Result<ErrorReport> {
    let steps = grid.steps();
    let n = system.n();
    let mesh = system.mesh();
    let dim = mesh.dim();
    if !ensemble.matches(grid) {
        return Err(Error::invalid("ensemble does not match the time grid"));
    }
    for (name, t) in [("control", bundle.control), ("adjoint", bundle.adjoint_mean)] {
        if t.levels() != steps + 1 || t.n_nodes() != n {
            return Err(Error::invalid(format!("{name} does not match the grid")));
        }
    }
    if let Some(states) = bundle.states {
        if states.len() != ensemble.paths() {
            return Err(Error::invalid("state ensemble and Brownian ensemble differ in size"));
        }
    }
    let tau = grid.tau();
    let table = GradientTable::new(system);
    let x_fn = &problem.exact_x;

    // Exact state split into w-independent part and w-slope.
    let (nodal0, nodal1): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let t = grid.time(k);
            let a = mesh.interpolate(|x| x_fn(t, x, 0.0));
            let b: Vec<f64> = mesh.interpolate(|x| x_fn(t, x, 1.0)).iter().zip(&a).map(|(b, a)| b - a).collect();
            (a, b)
        })
        .unzip();
    let (grad0, grad1): (Vec<Vec<[f64; 2]>>, Vec<Vec<[f64; 2]>>) = (0..=steps)
        .into_par_iter()
        .map(|k| {
            let t = grid.time(k);
            let a = table.gradients(dim, |x| x_fn(t, x, 0.0));
            let b: Vec<[f64; 2]> = table
                .gradients(dim, |x| x_fn(t, x, 1.0))
                .iter()
                .zip(&a)
                .map(|(b, a)| [b[0] - a[0], b[1] - a[1]])
                .collect();
            (a, b)
        })
        .unzip();

    let solver = SpdeSolver::new(system, *grid, problem.spec.gamma)?;
    let path_data = solver.path_data(&problem.spec)?;
    let per_path = |p: usize| -> Result<(Vec<f64>, f64)> {
        let simulated;
        let x = match bundle.states {
            Some(states) => states.path(p),
            None => {
                simulated = solver.forward_path(&problem.spec, &path_data, bundle.control, ensemble, p)?;
                &simulated
            }
        };
        let levels = ensemble.path_levels(p);
        let mut squares = Vec::with_capacity(steps + 1);
        let mut e = vec![0.0; n];
        for k in 0..=steps {
            let w = levels[k];
            for i in 0..n {
                e[i] = x.level(k)[i] - (nodal0[k][i] + w * nodal1[k][i]);
            }
            squares.push(system.mass_inner(&e, &e));
        }
        let h1 = compensated_sum((1..=steps).map(|k| {
            let w = levels[k];
            h1_error_sq(system, &table, x.level(k), |q| {
                [grad0[k][q][0] + w * grad1[k][q][0], grad0[k][q][1] + w * grad1[k][q][1]]
            })
        }));
        Ok((squares, tau * h1))
    };
    let results = (0..ensemble.paths()).into_par_iter().map(per_path).collect::<Result<Vec<_>>>()?;
    let (squares, h1s): (Vec<Vec<f64>>, Vec<f64>) = results.into_iter().unzip();
    let strong_l2_state = strong_norm_from_squares(&squares)?;
    let h1_state = mc_mean(&h1s)?.max(0.0).sqrt();

    let deterministic_l2 = |numerical: &Trajectory, exact: &dyn Fn(f64, &[f64]) -> f64, levels: std::ops::Range<usize>| {
        levels
            .map(|k| {
                let t = grid.time(k);
                let ex = mesh.interpolate(|x| exact(t, x));
                let e: Vec<f64> = numerical.level(k).iter().zip(&ex).map(|(a, b)| a - b).collect();
                system.mass_inner(&e, &e)
            })
            .fold(0.0, f64::max)
            .sqrt()
    };
    let strong_l2_adjoint = deterministic_l2(bundle.adjoint_mean, &*problem.exact_y, 0..steps + 1);
    let strong_l2_control = deterministic_l2(bundle.control, &*problem.exact_u, 0..steps);

    let y_fn = &problem.exact_y;
    let h1_adjoint = (tau
        * compensated_sum((0..steps).map(|k| {
            let t = grid.time(k);
            let g = table.gradients(dim, |x| y_fn(t, x));
            h1_error_sq(system, &table, bundle.adjoint_mean.level(k), |q| g[q])
        })))
    .max(0.0)
    .sqrt();

    Ok(ErrorReport {
        strong_l2_state,
        strong_l2_adjoint,
        strong_l2_control,
        h1_state,
        h1_adjoint,
        mu_error: (bundle.mu - problem.exact_mu).abs(),
        h: mesh.h(),
        tau,
        paths: ensemble.paths(),
        seed: ensemble.seed(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderFit {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub r_squared: f64,
}

/// Least-squares slope of `log e` against `log x`.
pub fn fit_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    if points.len() < 2 {
        return Err(Error::invalid("order fit needs at least two points"));
    }
    if points.iter().any(|&(x, e)| !(x > 0.0) || !(e > 0.0) || !x.is_finite() || !e.is_finite()) {
        return Err(Error::invalid("order fit needs positive finite values"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, e)| (x.ln(), e.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("order fit needs at least two distinct scales"));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(OrderFit { points: points.to_vec(), slope, r_squared })
}

/// Spatial cells per direction and number of time steps on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Resolution {
    pub cells: usize,
    pub steps: usize,
}

/// How the expectation in the constraint integral is evaluated for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Estimator {
    /// Exact expectation from the mean-field recursion.
    MeanField,
    /// Path average of the per-path integrals.
    MonteCarlo { paths: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableCell {
    pub delta: f64,
    pub resolution: Resolution,
    pub h: f64,
    pub tau: f64,
    /// Value under the requested estimator.
    pub integral: f64,
    /// Standard error of a Monte Carlo estimate, zero for the mean field.
    pub stderr: f64,
    pub mean_field_integral: f64,
    /// Largest `I − δ` over all projected iterates.
    pub worst_excess: f64,
    pub mu: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Optimizes a manufactured problem at one resolution.
pub fn solve_at(
    problem: &ManufacturedProblem,
    resolution: Resolution,
    config: &OptimizerConfig,
) -> Result<(FemSystem, TimeGrid, OptimizerOutcome)> {
    let system = FemSystem::assemble(problem.domain.mesh(resolution.cells)?)?;
    let grid = make_time_grid(problem.spec.horizon, resolution.steps)?;
    let outcome = gp_iterate(&problem.spec, &system, &grid, config)?;
    Ok((system, grid, outcome))
}

/// Optimizes at one resolution and measures errors over `paths` samples.
pub fn convergence_point(
    problem: &ManufacturedProblem,
    resolution: Resolution,
    config: &OptimizerConfig,
    paths: usize,
    seed: u64,
) -> Result<(ErrorReport, OptimizerOutcome)> {
    let (system, grid, outcome) = solve_at(problem, resolution, config)?;
    let ensemble = BrownianEnsemble::sample(paths, &grid, seed)?;
    let bundle =
        SolutionBundle { control: &outcome.control, adjoint_mean: &outcome.adjoint_mean, mu: outcome.mu, states: None };
    let report = compute_errors(problem, &bundle, &ensemble, &system, &grid)?;
    Ok((report, outcome))
}

/// Path average of the constraint integral under a fixed control.
pub fn monte_carlo_integral(
    problem: &ManufacturedProblem,
    control: &Trajectory,
    system: &FemSystem,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let ensemble = BrownianEnsemble::sample(paths, grid, seed)?;
    let solver = SpdeSolver::new(system, *grid, problem.spec.gamma)?;
    let data = solver.path_data(&problem.spec)?;
    let values = (0..paths)
        .into_par_iter()
        .map(|p| {
            let x = solver.forward_path(&problem.spec, &data, control, &ensemble, p)?;
            constraint_integral(&x, system, grid)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((mc_mean(&values)?, mc_variance(&values)?.1))
}

/// Converged constraint integrals for every `(δ, resolution)` pair, rows
/// ordered by δ then resolution.
pub fn constraint_table(
    problem: &ManufacturedProblem,
    deltas: &[f64],
    resolutions: &[Resolution],
    config: &OptimizerConfig,
    estimator: Estimator,
) -> Result<Vec<TableCell>> {
    let jobs: Vec<(f64, Resolution)> = deltas.iter().flat_map(|&d| resolutions.iter().map(move |&r| (d, r))).collect();
    jobs.into_par_iter()
        .map(|(delta, resolution)| {
            let p = problem.with_delta(delta);
            let (system, grid, outcome) = solve_at(&p, resolution, config)?;
            let worst = outcome.records.iter().map(|r| r.constraint_integral).fold(outcome.constraint_integral, f64::max);
            if worst > delta + FEASIBILITY_TOL {
                return Err(Error::InvalidState(format!(
                    "constraint violated at delta = {delta}, cells = {}: integral {worst}",
                    resolution.cells
                )));
            }
            let (integral, stderr) = match estimator {
                Estimator::MeanField => (outcome.constraint_integral, 0.0),
                Estimator::MonteCarlo { paths, seed } => {
                    monte_carlo_integral(&p, &outcome.control, &system, &grid, paths, seed)?
                }
            };
            Ok(TableCell {
                delta,
                resolution,
                h: system.mesh().h(),
                tau: grid.tau(),
                integral,
                stderr,
                mean_field_integral: outcome.constraint_integral,
                worst_excess: outcome.records.iter().map(|r| r.constraint_integral - delta).fold(f64::NEG_INFINITY, f64::max),
                mu: outcome.mu,
                iterations: outcome.records.len(),
                converged: outcome.converged,
            })
        })
        .collect()
}

/// Scientific format with five decimals and an unpadded exponent, e.g. `1.99913E-1`.
pub fn format_scientific(v: f64) -> String {
    format!("{v:.5E}")
}
