//! Time stepping for the discrete state, adjoint and auxiliary systems.
//!
//! Every step solves `(M + τγA) x = rhs` with one factorization shared by
//! all paths and all steps. Controls and the noise coefficient are read at
//! left endpoints `t_n`; states and targets at right endpoints `t_{n+1}`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{EulerSolver, FemSystem, NodalField};
use crate::grid::TimeGrid;
use crate::paths::{compensated_sum, BrownianEnsemble};

pub type SpaceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type SpaceTimeFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// Coefficient depending on time, space and the Brownian value `W_t`.
pub type PathFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;

/// Data of a control problem: `min ½∫E[‖X−X_d‖² + α‖U‖²]` subject to
/// `dX = [γΔX + f + U]dt + σ dW`, `X(0) = X₀` and `∫∫E[X] ≤ δ`.
#[derive(Clone)]
pub struct ProblemSpec {
    pub alpha: f64,
    pub delta: f64,
    pub horizon: f64,
    pub gamma: f64,
    pub x0: SpaceFn,
    pub sigma: SpaceTimeFn,
    pub forcing: PathFn,
    pub target: PathFn,
    /// `E[f(t, x, W_t)]`, required by the mean-field solves.
    pub mean_forcing: Option<SpaceTimeFn>,
    /// `E[X_d(t, x, W_t)]`, required by the mean-field solves.
    pub mean_target: Option<SpaceTimeFn>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("alpha", &self.alpha)
            .field("delta", &self.delta)
            .field("horizon", &self.horizon)
            .field("gamma", &self.gamma)
            .field("mean_forcing", &self.mean_forcing.is_some())
            .field("mean_target", &self.mean_target.is_some())
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !self.delta.is_finite() {
            return Err(Error::invalid("delta must be finite"));
        }
        Ok(())
    }

    pub fn with_delta(mut self, delta: f64) -> ProblemSpec {
        self.delta = delta;
        self
    }
}

/// Nodal fields at time levels `0..levels`, stored level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n_nodes: usize,
    levels: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(levels: usize, n_nodes: usize) -> Trajectory {
        Trajectory { n_nodes, levels, data: vec![0.0; levels * n_nodes] }
    }

    pub fn from_levels(levels: Vec<Vec<f64>>) -> Trajectory {
        let n_nodes = levels.first().map_or(0, Vec::len);
        assert!(levels.iter().all(|l| l.len() == n_nodes), "levels of different length");
        Trajectory { n_nodes, levels: levels.len(), data: levels.concat() }
    }

    /// `g(t_n)` on every level.
    pub fn from_fn(grid: &TimeGrid, n_nodes: usize, mut g: impl FnMut(usize, f64) -> Vec<f64>) -> Trajectory {
        let levels: Vec<Vec<f64>> = (0..=grid.steps()).map(|n| g(n, grid.time(n))).collect();
        assert!(levels.iter().all(|l| l.len() == n_nodes));
        Trajectory::from_levels(levels)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn level(&self, n: usize) -> &[f64] {
        &self.data[n * self.n_nodes..(n + 1) * self.n_nodes]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.n_nodes..(n + 1) * self.n_nodes]
    }

    pub fn field(&self, n: usize) -> NodalField {
        self.level(n).to_vec().into()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn same_shape(&self, other: &Trajectory) -> bool {
        self.levels == other.levels && self.n_nodes == other.n_nodes
    }

    /// `self + c * other`
    pub fn add_scaled(&self, c: f64, other: &Trajectory) -> Trajectory {
        assert!(self.same_shape(other), "trajectory shapes differ");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + c * b).collect();
        Trajectory { n_nodes: self.n_nodes, levels: self.levels, data }
    }

    pub fn scale(&self, c: f64) -> Trajectory {
        Trajectory { n_nodes: self.n_nodes, levels: self.levels, data: self.data.iter().map(|v| c * v).collect() }
    }
}

/// Per-path trajectories sharing one grid and mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsembleTrajectory {
    paths: Vec<Trajectory>,
}

impl PathEnsembleTrajectory {
    pub fn new(paths: Vec<Trajectory>) -> Result<PathEnsembleTrajectory> {
        if let Some(first) = paths.first() {
            if paths.iter().any(|p| !p.same_shape(first)) {
                return Err(Error::invalid("path trajectories have different shapes"));
            }
        }
        Ok(PathEnsembleTrajectory { paths })
    }

    pub fn paths(&self) -> &[Trajectory] {
        &self.paths
    }

    pub fn path(&self, p: usize) -> &Trajectory {
        &self.paths[p]
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Componentwise mean over paths, level by level.
    pub fn mean(&self) -> Result<Trajectory> {
        let first = self.paths.first().ok_or_else(|| Error::invalid("mean of an empty ensemble"))?;
        let p = self.paths.len() as f64;
        let data =
            (0..first.data.len()).map(|k| compensated_sum(self.paths.iter().map(|t| t.data[k])) / p).collect();
        Ok(Trajectory { n_nodes: first.n_nodes, levels: first.levels, data })
    }
}

/// Precomputed loads for the mean-field recursions.
#[derive(Debug, Clone)]
pub struct MeanFieldData {
    /// `Π_h X₀`
    pub initial: Vec<f64>,
    /// `load(f̄(t_n))` for `n` in `0..N`.
    pub forcing_loads: Vec<Vec<f64>>,
    /// `load(x̄_d(t_n))` for `n` in `0..=N` (level 0 unused by the scheme).
    pub target_loads: Vec<Vec<f64>>,
}

/// Shared per-path data: initial value and noise loads `load(σ(t_n))`.
#[derive(Debug, Clone)]
pub struct PathData {
    pub initial: Vec<f64>,
    pub sigma_loads: Vec<Vec<f64>>,
}

/// Implicit Euler stepper bound to one system, grid and diffusion scale.
#[derive(Debug, Clone)]
pub struct SpdeSolver<'a> {
    system: &'a FemSystem,
    grid: TimeGrid,
    gamma: f64,
    euler: EulerSolver,
}

impl<'a> SpdeSolver<'a> {
    pub fn new(system: &'a FemSystem, grid: TimeGrid, gamma: f64) -> Result<SpdeSolver<'a>> {
        if !(gamma > 0.0) {
            return Err(Error::invalid(format!("diffusion scale must be positive, got {gamma}")));
        }
        let euler = system.euler(grid.tau() * gamma)?;
        Ok(SpdeSolver { system, grid, gamma, euler })
    }

    pub fn system(&self) -> &'a FemSystem {
        self.system
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    fn check_spec(&self, spec: &ProblemSpec) -> Result<()> {
        spec.validate()?;
        if (spec.gamma - self.gamma).abs() > 1e-15 * self.gamma {
            return Err(Error::invalid(format!(
                "problem diffusion scale {} does not match the solver's {}",
                spec.gamma, self.gamma
            )));
        }
        if (spec.horizon - self.grid.horizon()).abs() > 1e-12 * spec.horizon {
            return Err(Error::invalid("problem horizon does not match the time grid"));
        }
        Ok(())
    }

    fn check_control(&self, control: &Trajectory) -> Result<()> {
        if control.levels() < self.grid.steps() || control.n_nodes() != self.n() {
            return Err(Error::invalid(format!(
                "control has {} levels of {} nodes, expected at least {} levels of {}",
                control.levels(),
                control.n_nodes(),
                self.grid.steps(),
                self.n()
            )));
        }
        Ok(())
    }

    /// `rhs = M x_n + τ F_n + τ M u_n (+ ΔW · S_n)`, shared by the mean and
    /// per-path recursions so that a zero increment reproduces the mean step
    /// bit for bit.
    fn state_rhs(&self, x: &[f64], forcing_load: &[f64], u: &[f64], noise: Option<(f64, &[f64])>) -> Vec<f64> {
        let tau = self.grid.tau();
        let mass = self.system.mass();
        let mx = mass.mul_vec(x);
        let mu = mass.mul_vec(u);
        let mut rhs: Vec<f64> =
            mx.iter().zip(forcing_load).zip(&mu).map(|((a, f), m)| a + tau * f + tau * m).collect();
        if let Some((dw, sigma_load)) = noise {
            rhs.iter_mut().zip(sigma_load).for_each(|(r, s)| *r += dw * s);
        }
        rhs
    }

    pub fn mean_field_data(&self, spec: &ProblemSpec) -> Result<MeanFieldData> {
        self.check_spec(spec)?;
        let f = spec.mean_forcing.as_ref().ok_or_else(|| Error::invalid("problem has no mean forcing"))?;
        let xd = spec.mean_target.as_ref().ok_or_else(|| Error::invalid("problem has no mean target"))?;
        let initial = self.system.l2_project(|x| (spec.x0)(x))?.into_vec();
        let grid = self.grid;
        let forcing_loads = (0..grid.steps())
            .into_par_iter()
            .map(|n| self.system.load_vector(|x| f(grid.time(n), x)))
            .collect();
        let target_loads = (0..=grid.steps())
            .into_par_iter()
            .map(|n| self.system.load_vector(|x| xd(grid.time(n), x)))
            .collect();
        Ok(MeanFieldData { initial, forcing_loads, target_loads })
    }

    pub fn path_data(&self, spec: &ProblemSpec) -> Result<PathData> {
        self.check_spec(spec)?;
        let initial = self.system.l2_project(|x| (spec.x0)(x))?.into_vec();
        let grid = self.grid;
        let sigma_loads = (0..grid.steps())
            .into_par_iter()
            .map(|n| self.system.load_vector(|x| (spec.sigma)(grid.time(n), x)))
            .collect();
        Ok(PathData { initial, sigma_loads })
    }

    /// Expected state under a deterministic control.
    pub fn forward_mean(&self, spec: &ProblemSpec, control: &Trajectory) -> Result<Trajectory> {
        let data = self.mean_field_data(spec)?;
        self.forward_mean_with(&data, control)
    }

    pub fn forward_mean_with(&self, data: &MeanFieldData, control: &Trajectory) -> Result<Trajectory> {
        self.check_control(control)?;
        let n_steps = self.grid.steps();
        let mut out = Trajectory::zeros(n_steps + 1, self.n());
        out.level_mut(0).copy_from_slice(&data.initial);
        for n in 0..n_steps {
            let mut rhs = self.state_rhs(out.level(n), &data.forcing_loads[n], control.level(n), None);
            self.euler.solve_in_place(&mut rhs)?;
            out.level_mut(n + 1).copy_from_slice(&rhs);
        }
        Ok(out)
    }

    /// State of a single Brownian path.
    pub fn forward_path(
        &self,
        spec: &ProblemSpec,
        data: &PathData,
        control: &Trajectory,
        ensemble: &BrownianEnsemble,
        p: usize,
    ) -> Result<Trajectory> {
        self.check_control(control)?;
        let n_steps = self.grid.steps();
        let levels = ensemble.path_levels(p);
        let mut out = Trajectory::zeros(n_steps + 1, self.n());
        out.level_mut(0).copy_from_slice(&data.initial);
        for n in 0..n_steps {
            let t = self.grid.time(n);
            let w = levels[n];
            let forcing = self.system.load_vector(|x| (spec.forcing)(t, x, w));
            let dw = ensemble.increment(p, n);
            let mut rhs = self.state_rhs(out.level(n), &forcing, control.level(n), Some((dw, &data.sigma_loads[n])));
            self.euler.solve_in_place(&mut rhs)?;
            out.level_mut(n + 1).copy_from_slice(&rhs);
        }
        Ok(out)
    }

    /// States of every path in the ensemble.
    pub fn forward_paths(
        &self,
        spec: &ProblemSpec,
        control: &Trajectory,
        ensemble: &BrownianEnsemble,
    ) -> Result<PathEnsembleTrajectory> {
        if !ensemble.matches(&self.grid) {
            return Err(Error::invalid("ensemble does not match the time grid"));
        }
        let data = self.path_data(spec)?;
        let paths = (0..ensemble.paths())
            .into_par_iter()
            .map(|p| self.forward_path(spec, &data, control, ensemble, p))
            .collect::<Result<Vec<_>>>()?;
        PathEnsembleTrajectory::new(paths)
    }

    /// Expected adjoint: `ȳ^N = 0` and
    /// `(M + τγA) ȳ^n = M ȳ^{n+1} + τ (M x̄^{n+1} − load(x̄_d(t_{n+1}))) + τ μ load(1)`.
    pub fn backward_mean_adjoint(&self, spec: &ProblemSpec, x_mean: &Trajectory, mu: f64) -> Result<Trajectory> {
        let data = self.mean_field_data(spec)?;
        self.backward_mean_adjoint_with(&data, x_mean, mu)
    }

    pub fn backward_mean_adjoint_with(&self, data: &MeanFieldData, x_mean: &Trajectory, mu: f64) -> Result<Trajectory> {
        let n_steps = self.grid.steps();
        if x_mean.levels() != n_steps + 1 || x_mean.n_nodes() != self.n() {
            return Err(Error::invalid("mean state does not match the grid"));
        }
        let tau = self.grid.tau();
        let mass = self.system.mass();
        let unit = self.system.unit_load();
        let mut out = Trajectory::zeros(n_steps + 1, self.n());
        for n in (0..n_steps).rev() {
            let my = mass.mul_vec(out.level(n + 1));
            let mx = mass.mul_vec(x_mean.level(n + 1));
            let target = &data.target_loads[n + 1];
            let mut rhs: Vec<f64> = (0..self.n()).map(|i| my[i] + tau * (mx[i] - target[i]) + tau * mu * unit[i]).collect();
            self.euler.solve_in_place(&mut rhs)?;
            out.level_mut(n).copy_from_slice(&rhs);
        }
        Ok(out)
    }

    /// Adjoint of the constraint functional: `m̃^N = 0`,
    /// `(M + τγA) m̃^n = M m̃^{n+1} + τ load(1)`.
    pub fn mtilde_solve(&self) -> Result<Trajectory> {
        let n_steps = self.grid.steps();
        let tau = self.grid.tau();
        let unit = self.system.unit_load();
        let mut out = Trajectory::zeros(n_steps + 1, self.n());
        for n in (0..n_steps).rev() {
            let mut rhs = self.system.apply_mass(out.level(n + 1));
            rhs.iter_mut().zip(unit).for_each(|(r, l)| *r += tau * l);
            self.euler.solve_in_place(&mut rhs)?;
            out.level_mut(n).copy_from_slice(&rhs);
        }
        Ok(out)
    }

    /// State response to the control `m̃`: `q̃^0 = 0`,
    /// `(M + τγA) q̃^{n+1} = M q̃^n + τ M m̃^n`.
    pub fn qtilde_solve(&self, mtilde: &Trajectory) -> Result<Trajectory> {
        let n_steps = self.grid.steps();
        if mtilde.levels() != n_steps + 1 || mtilde.n_nodes() != self.n() {
            return Err(Error::invalid("m̃ does not match the grid"));
        }
        let tau = self.grid.tau();
        let mut out = Trajectory::zeros(n_steps + 1, self.n());
        for n in 0..n_steps {
            let mq = self.system.apply_mass(out.level(n));
            let mm = self.system.apply_mass(mtilde.level(n));
            let mut rhs: Vec<f64> = mq.iter().zip(&mm).map(|(a, b)| a + tau * b).collect();
            self.euler.solve_in_place(&mut rhs)?;
            out.level_mut(n + 1).copy_from_slice(&rhs);
        }
        Ok(out)
    }
}

/// Regression estimate of `Z(t_n) = E[payoff · ΔW_{n+1} | F_{t_n}]` per node.
///
/// The conditional expectation is modelled as `c + d·W(t_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZEstimate {
    /// `(c, d)` per interior node.
    pub coefficients: Vec<[f64; 2]>,
    /// False when every path has the same `W(t_n)` and only `{1}` was fitted.
    pub used_brownian_regressor: bool,
}

impl ZEstimate {
    pub fn evaluate(&self, w: f64) -> NodalField {
        self.coefficients.iter().map(|[c, d]| c + d * w).collect::<Vec<_>>().into()
    }

    /// Fitted values averaged over the ensemble's `W(t_n)`.
    pub fn mean_fitted(&self, ensemble: &BrownianEnsemble, n: usize) -> NodalField {
        let wbar = compensated_sum((0..ensemble.paths()).map(|p| ensemble.brownian(p, n))) / ensemble.paths() as f64;
        self.evaluate(wbar)
    }
}

/// Least squares fit `y ≈ c + d·w`; falls back to `y ≈ c` when `w` is
/// constant.
fn fit_affine(w: &[f64], y: &[f64], wbar: f64, sww: f64) -> [f64; 2] {
    let ybar = compensated_sum(y.iter().copied()) / y.len() as f64;
    if sww == 0.0 {
        return [ybar, 0.0];
    }
    let swy = compensated_sum(w.iter().zip(y).map(|(a, b)| (a - wbar) * (b - ybar)));
    let d = swy / sww;
    [ybar - d * wbar, d]
}

/// Least-squares Monte Carlo estimate of `Z` at level `n`.
///
/// `payoff[p]` holds the level-`n+1` field of path `p`. The payoff is first
/// centred by its own regression on `{1, W(t_n)}`; the centred part times
/// `ΔW_{n+1}` is then regressed on the same basis. Centring subtracts an
/// `F_{t_n}`-measurable estimate and so leaves the target expectation
/// unchanged while removing most of the sampling variance.
pub fn lsmc_z_estimate<V: AsRef<[f64]> + Sync>(
    ensemble: &BrownianEnsemble,
    n: usize,
    payoff: &[V],
) -> Result<ZEstimate> {
    let paths = ensemble.paths();
    if payoff.len() != paths {
        return Err(Error::invalid(format!("{} payoff fields for {paths} paths", payoff.len())));
    }
    if n >= ensemble.steps() {
        return Err(Error::invalid(format!("level {n} has no forward increment")));
    }
    let n_nodes = payoff.first().map_or(0, |v| v.as_ref().len());
    if payoff.iter().any(|v| v.as_ref().len() != n_nodes) {
        return Err(Error::invalid("payoff fields have different lengths"));
    }
    let w: Vec<f64> = (0..paths).map(|p| ensemble.brownian(p, n)).collect();
    let dw: Vec<f64> = (0..paths).map(|p| ensemble.increment(p, n)).collect();
    let wbar = compensated_sum(w.iter().copied()) / paths as f64;
    let mut sww = compensated_sum(w.iter().map(|v| (v - wbar).powi(2)));
    // all W(t_n) equal (n = 0): rank-deficient design
    let spread = w.iter().fold(0.0f64, |m, v| m.max((v - wbar).abs()));
    if spread <= 1e-300 || sww <= 1e-28 * (1.0 + wbar * wbar) * paths as f64 {
        sww = 0.0;
    }
    let coefficients = (0..n_nodes)
        .into_par_iter()
        .map(|i| {
            let y: Vec<f64> = payoff.iter().map(|v| v.as_ref()[i]).collect();
            let [c0, d0] = fit_affine(&w, &y, wbar, sww);
            let centred: Vec<f64> = (0..paths).map(|p| (y[p] - c0 - d0 * w[p]) * dw[p]).collect();
            fit_affine(&w, &centred, wbar, sww)
        })
        .collect();
    Ok(ZEstimate { coefficients, used_brownian_regressor: sww > 0.0 })
}
