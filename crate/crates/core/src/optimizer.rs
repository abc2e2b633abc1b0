//! Gradient projection for the integral-constrained control problem.
//!
//! Iterates on the expected state and adjoint. Since `m̃` and `q̃` do not
//! depend on the control they are computed once per run.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::FemSystem;
use crate::grid::TimeGrid;
use crate::paths::compensated_sum;
use crate::spde::{MeanFieldData, ProblemSpec, SpdeSolver, Trajectory};

/// Constraint violations up to this size are tolerated after projection.
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub rho: f64,
    pub eps0: f64,
    pub max_iter: usize,
    /// Initial control; zero when absent.
    pub u0: Option<Trajectory>,
    /// Reject step sizes outside the certified contraction range.
    pub certify: bool,
}

impl OptimizerConfig {
    /// `ρ = 0.9/(α + e^T)`, `ε₀ = 1e-6`, 500 iterations.
    pub fn for_spec(spec: &ProblemSpec) -> OptimizerConfig {
        OptimizerConfig { rho: default_rho(spec.alpha, spec.horizon), eps0: 1e-6, max_iter: 500, u0: None, certify: false }
    }

    pub fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.eps0 > 0.0) {
            return Err(Error::invalid(format!("eps0 must be positive, got {}", self.eps0)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if self.certify && contraction_certificate(spec.alpha, spec.horizon, self.rho).is_none() {
            return Err(Error::invalid(format!(
                "rho = {} is outside the certified range (0, {})",
                self.rho,
                2.0 / (spec.alpha + 2.0 * spec.horizon.exp())
            )));
        }
        Ok(())
    }
}

pub fn default_rho(alpha: f64, horizon: f64) -> f64 {
    0.9 / (alpha + horizon.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub mu: f64,
    pub step_error: f64,
    /// Constraint integral of the projected state.
    pub constraint_integral: f64,
    pub cost_j: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizerOutcome {
    pub control: Trajectory,
    pub mu: f64,
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    /// Expected state under `control`.
    pub state_mean: Trajectory,
    /// Expected adjoint under `control`, including the multiplier term.
    pub adjoint_mean: Trajectory,
    pub constraint_integral: f64,
}

/// `τ Σ_{n<N} (1, x̄^{n+1})`
pub fn constraint_integral(x_mean: &Trajectory, system: &FemSystem, grid: &TimeGrid) -> Result<f64> {
    if x_mean.levels() != grid.steps() + 1 || x_mean.n_nodes() != system.n() {
        return Err(Error::invalid("state does not match the grid"));
    }
    let tau = grid.tau();
    Ok(tau * compensated_sum((1..=grid.steps()).map(|n| system.integral(x_mean.level(n)))))
}

/// `μ = max(I − δ, 0) / (ρ Q)`
pub fn select_multiplier(integral_half: f64, delta: f64, rho: f64, qtilde_integral: f64) -> Result<f64> {
    let denom = rho * qtilde_integral;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::InvalidState(format!(
            "multiplier denominator rho * Q = {denom} is not positive"
        )));
    }
    Ok((integral_half - delta).max(0.0) / denom)
}

/// Contraction factor of the iteration for step size `rho`, or `None`
/// if `rho` is outside the range where one is guaranteed.
pub fn contraction_certificate(alpha: f64, horizon: f64, rho: f64) -> Option<f64> {
    let et = horizon.exp();
    if !(rho > 0.0) {
        return None;
    }
    if rho <= 1.0 / (alpha + et) {
        Some(1.0 - rho * alpha)
    } else if rho < 2.0 / (alpha + 2.0 * et) {
        let f = rho * rho * (alpha + 1.0) * (alpha + 2.0 * et) - rho * (2.0 * alpha + 2.0) + 1.0;
        (f > 0.0 && f < 1.0).then(|| f.sqrt())
    } else {
        None
    }
}

/// `τ Σ_{n<N} ‖v^n‖²_M`
pub fn control_norm_sq(v: &Trajectory, system: &FemSystem, grid: &TimeGrid) -> f64 {
    grid.tau() * compensated_sum((0..grid.steps()).map(|n| system.mass_inner(v.level(n), v.level(n))))
}

pub fn control_distance(a: &Trajectory, b: &Trajectory, system: &FemSystem, grid: &TimeGrid) -> f64 {
    let tau = grid.tau();
    let sum = compensated_sum((0..grid.steps()).map(|n| {
        let d: Vec<f64> = a.level(n).iter().zip(b.level(n)).map(|(x, y)| x - y).collect();
        system.mass_inner(&d, &d)
    }));
    (tau * sum).max(0.0).sqrt()
}

/// Projection onto the feasible half-space along `m̃`.
///
/// `m̃` represents the constraint functional in the `τ`-weighted mass inner
/// product, so the projection is orthogonal and nonexpansive.
#[derive(Debug, Clone)]
pub struct Projector {
    pub mtilde: Trajectory,
    pub qtilde: Trajectory,
    /// `Q = τ Σ (1, q̃^{n+1})`
    pub q: f64,
    pub delta: f64,
}

impl Projector {
    pub fn new(solver: &SpdeSolver<'_>, delta: f64) -> Result<Projector> {
        let mtilde = solver.mtilde_solve()?;
        let qtilde = solver.qtilde_solve(&mtilde)?;
        let q = constraint_integral(&qtilde, solver.system(), solver.grid())?;
        if !(q > 0.0) {
            return Err(Error::InvalidState(format!("constraint response Q = {q} is not positive")));
        }
        Ok(Projector { mtilde, qtilde, q, delta })
    }

    /// Projects `v` whose expected state is `x_mean`. Returns the projected
    /// control and state together with `ρμ`.
    pub fn project_with_state(
        &self,
        v: &Trajectory,
        x_mean: &Trajectory,
        system: &FemSystem,
        grid: &TimeGrid,
    ) -> Result<(Trajectory, Trajectory, f64)> {
        let integral = constraint_integral(x_mean, system, grid)?;
        let shift = select_multiplier(integral, self.delta, 1.0, self.q)?;
        if shift == 0.0 {
            return Ok((v.clone(), x_mean.clone(), 0.0));
        }
        Ok((v.add_scaled(-shift, &self.mtilde), x_mean.add_scaled(-shift, &self.qtilde), shift))
    }

    pub fn project(&self, solver: &SpdeSolver<'_>, data: &MeanFieldData, v: &Trajectory) -> Result<Trajectory> {
        let x = solver.forward_mean_with(data, v)?;
        Ok(self.project_with_state(v, &x, solver.system(), solver.grid())?.0)
    }
}

/// Expected tracking cost of the mean quantities,
/// `½ τ Σ_{n<N} (‖x̄^{n+1} − x̄_d(t_{n+1})‖² + α ‖u^n‖²)`.
struct CostEvaluator {
    target_sq: f64,
    alpha: f64,
    tau: f64,
}

impl CostEvaluator {
    fn new(spec: &ProblemSpec, system: &FemSystem, grid: &TimeGrid) -> Result<CostEvaluator> {
        let xd = spec.mean_target.as_ref().ok_or_else(|| Error::invalid("problem has no mean target"))?;
        let target_sq = compensated_sum((1..=grid.steps()).map(|n| {
            let t = grid.time(n);
            system.integrate(|x| xd(t, x).powi(2))
        }));
        Ok(CostEvaluator { target_sq, alpha: spec.alpha, tau: grid.tau() })
    }

    fn cost(&self, x: &Trajectory, u: &Trajectory, data: &MeanFieldData, system: &FemSystem) -> f64 {
        let steps = data.forcing_loads.len();
        let terms = (0..steps).map(|n| {
            let xn = x.level(n + 1);
            let cross: f64 = xn.iter().zip(&data.target_loads[n + 1]).map(|(a, b)| a * b).sum();
            system.mass_inner(xn, xn) - 2.0 * cross + self.alpha * system.mass_inner(u.level(n), u.level(n))
        });
        0.5 * self.tau * (compensated_sum(terms) + self.target_sq)
    }
}

pub fn gp_iterate(spec: &ProblemSpec, system: &FemSystem, grid: &TimeGrid, config: &OptimizerConfig) -> Result<OptimizerOutcome> {
    gp_iterate_observed(spec, system, grid, config, |_, _| {})
}

/// As [`gp_iterate`], calling `observer(i, u^i)` for every iterate
/// including the initial control.
pub fn gp_iterate_observed(
    spec: &ProblemSpec,
    system: &FemSystem,
    grid: &TimeGrid,
    config: &OptimizerConfig,
    mut observer: impl FnMut(usize, &Trajectory),
) -> Result<OptimizerOutcome> {
    config.validate(spec)?;
    let solver = SpdeSolver::new(system, *grid, spec.gamma)?;
    let data = solver.mean_field_data(spec)?;
    let projector = Projector::new(&solver, spec.delta)?;
    let cost = CostEvaluator::new(spec, system, grid)?;
    let steps = grid.steps();
    let rho = config.rho;

    let mut u = match &config.u0 {
        Some(u0) => {
            if u0.levels() < steps || u0.n_nodes() != system.n() {
                return Err(Error::invalid("initial control does not match the grid"));
            }
            let mut u = Trajectory::zeros(steps + 1, system.n());
            for n in 0..steps {
                u.level_mut(n).copy_from_slice(u0.level(n));
            }
            u
        }
        None => Trajectory::zeros(steps + 1, system.n()),
    };
    let mut x = solver.forward_mean_with(&data, &u)?;
    observer(0, &u);

    let mut records = Vec::new();
    let mut best: Option<(f64, Trajectory, Trajectory, f64)> = None;
    let mut mu = 0.0;
    for i in 0..config.max_iter {
        let y = solver.backward_mean_adjoint_with(&data, &x, 0.0)?;
        let mut u_half = Trajectory::zeros(steps + 1, system.n());
        for n in 0..steps {
            let (un, yn) = (u.level(n), y.level(n));
            for (k, v) in u_half.level_mut(n).iter_mut().enumerate() {
                *v = un[k] - rho * (spec.alpha * un[k] + yn[k]);
            }
        }
        let x_half = solver.forward_mean_with(&data, &u_half)?;
        let (u_next, x_next, shift) = projector.project_with_state(&u_half, &x_half, system, grid)?;
        mu = shift / rho;

        let step_error = control_distance(&u_next, &u, system, grid);
        let integral = constraint_integral(&x_next, system, grid)?;
        records.push(IterationRecord {
            iter: i,
            mu,
            step_error,
            constraint_integral: integral,
            cost_j: cost.cost(&x_next, &u_next, &data, system),
        });
        u = u_next;
        x = x_next;
        observer(i + 1, &u);

        if step_error <= config.eps0 {
            return finish(&solver, &data, &projector, u, x, mu, records, true);
        }
        if best.as_ref().is_none_or(|b| step_error < b.0) {
            best = Some((step_error, u.clone(), x.clone(), mu));
        }
    }
    let (_, u, x, mu) = best.unwrap_or((0.0, u, x, mu));
    finish(&solver, &data, &projector, u, x, mu, records, false)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    solver: &SpdeSolver<'_>,
    data: &MeanFieldData,
    projector: &Projector,
    control: Trajectory,
    x: Trajectory,
    mu: f64,
    records: Vec<IterationRecord>,
    converged: bool,
) -> Result<OptimizerOutcome> {
    // The adjoint is affine in μ with slope m̃.
    let adjoint_mean = solver.backward_mean_adjoint_with(data, &x, 0.0)?.add_scaled(mu, &projector.mtilde);
    let constraint_integral = constraint_integral(&x, solver.system(), solver.grid())?;
    Ok(OptimizerOutcome { control, mu, records, converged, state_mean: x, adjoint_mean, constraint_integral })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_interval_mesh, make_time_grid};
    use crate::problems::example1;
    use std::sync::Arc;

    fn setup(cells: usize, steps: usize) -> (FemSystem, TimeGrid) {
        (FemSystem::assemble(make_interval_mesh(0.0, 1.0, cells).unwrap()).unwrap(), make_time_grid(1.0, steps).unwrap())
    }

    #[test]
    fn constraint_integral_examples() {
        let (sys, grid) = setup(8, 5);
        let zero = Trajectory::zeros(6, sys.n());
        assert_eq!(constraint_integral(&zero, &sys, &grid).unwrap(), 0.0);
        let v: Vec<f64> = (0..sys.n()).map(|i| 0.3 + i as f64).collect();
        let constant = Trajectory::from_levels(vec![v.clone(); 6]);
        let expect = sys.integral(&v);
        assert!((constraint_integral(&constant, &sys, &grid).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn multiplier_examples() {
        assert_eq!(select_multiplier(0.1, 0.2, 1.0, 1.0).unwrap(), 0.0);
        assert!((select_multiplier(0.25, 0.2, 0.5, 1.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(select_multiplier(1.0, 0.0, 1.0, 0.0), Err(Error::InvalidState(_))));
        assert!(matches!(select_multiplier(1.0, 0.0, -1.0, 1.0), Err(Error::InvalidState(_))));
    }

    #[test]
    fn certificate_branches() {
        assert!((contraction_certificate(1.0, 1.0, 0.2).unwrap() - 0.8).abs() < 1e-15);
        let e = 1f64.exp();
        let f = 0.09 * 2.0 * (1.0 + 2.0 * e) - 0.3 * 4.0 + 1.0;
        assert!(f > 0.0 && f < 1.0);
        assert!((contraction_certificate(1.0, 1.0, 0.3).unwrap() - f.sqrt()).abs() < 1e-15);
        assert_eq!(contraction_certificate(1.0, 1.0, 0.5), None);
        assert_eq!(contraction_certificate(1.0, 1.0, 0.0), None);
    }

    #[test]
    fn config_validation() {
        let spec = example1(0.1, 1.0).spec;
        let mut c = OptimizerConfig::for_spec(&spec);
        assert!(c.validate(&spec).is_ok());
        c.certify = true;
        c.rho = 0.5;
        assert!(c.validate(&spec).is_err());
        c.rho = 0.2;
        assert!(c.validate(&spec).is_ok());
        c.eps0 = 0.0;
        assert!(c.validate(&spec).is_err());
    }

    #[test]
    fn fixed_point_exits_immediately() {
        let (sys, grid) = setup(8, 8);
        let mut spec = example1(0.0, 0.0).spec;
        let zero: crate::spde::SpaceTimeFn = Arc::new(|_, _| 0.0);
        spec.mean_forcing = Some(zero.clone());
        spec.mean_target = Some(zero);
        spec.delta = 1.0;
        let out = gp_iterate(&spec, &sys, &grid, &OptimizerConfig::for_spec(&spec)).unwrap();
        assert!(out.converged);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].step_error, 0.0);
        assert_eq!(out.mu, 0.0);
    }

    #[test]
    fn projection_hits_delta_when_active() {
        let (sys, grid) = setup(10, 10);
        let spec = example1(0.1, 1.0).spec.with_delta(0.05);
        let solver = SpdeSolver::new(&sys, grid, 1.0).unwrap();
        let data = solver.mean_field_data(&spec).unwrap();
        let proj = Projector::new(&solver, spec.delta).unwrap();
        let v = Trajectory::zeros(11, sys.n());
        let x = solver.forward_mean_with(&data, &v).unwrap();
        let (p, _, shift) = proj.project_with_state(&v, &x, &sys, &grid).unwrap();
        assert!(shift > 0.0);
        let xp = solver.forward_mean_with(&data, &p).unwrap();
        assert!((constraint_integral(&xp, &sys, &grid).unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn qtilde_integral_equals_mtilde_norm() {
        let (sys, grid) = setup(12, 9);
        let solver = SpdeSolver::new(&sys, grid, 0.7).unwrap();
        let proj = Projector::new(&solver, 0.0).unwrap();
        let norm = control_norm_sq(&proj.mtilde, &sys, &grid);
        assert!((proj.q - norm).abs() <= 1e-12 * norm);
    }

    #[test]
    fn example1_multiplier_error_halves_under_refinement() {
        let p = example1(0.1, 1.0);
        let mut errors = Vec::new();
        for k in [40, 80] {
            let (sys, grid) = setup(k, k);
            let out = gp_iterate(&p.spec, &sys, &grid, &OptimizerConfig::for_spec(&p.spec)).unwrap();
            assert!(out.converged);
            for r in &out.records {
                assert!(r.mu >= 0.0);
                assert!(r.constraint_integral <= p.spec.delta + FEASIBILITY_TOL);
            }
            assert!((out.constraint_integral - p.spec.delta).abs() < 1e-8);
            errors.push((out.mu - 1.0).abs());
        }
        let ratio = errors[1] / errors[0];
        assert!(ratio > 0.35 && ratio < 0.65, "{errors:?}");
    }

    #[test]
    fn slack_constraint_gives_zero_multiplier() {
        let (sys, grid) = setup(16, 16);
        let p = example1(0.1, 1.0);
        let spec = p.spec.with_delta(10.0);
        let out = gp_iterate(&spec, &sys, &grid, &OptimizerConfig::for_spec(&spec)).unwrap();
        assert!(out.records.iter().all(|r| r.mu == 0.0));
        assert!(out.constraint_integral < 10.0);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let (sys, grid) = setup(8, 8);
        let p = example1(0.1, 1.0);
        let mut c = OptimizerConfig::for_spec(&p.spec);
        c.max_iter = 3;
        let out = gp_iterate(&p.spec, &sys, &grid, &c).unwrap();
        assert!(!out.converged);
        assert_eq!(out.records.len(), 3);
    }
}
