//! Reproducible Brownian increment ensembles and Monte Carlo reductions.
//!
//! Path `p` draws its increments from its own ChaCha8 stream (master seed,
//! stream index `p`), so a path never depends on how many other paths were
//! requested or on how work is scheduled. Reductions run sequentially over
//! path index on results collected in order, which makes every estimate
//! bit-identical for any thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::FemSystem;
use crate::grid::TimeGrid;
use crate::spde::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct BrownianEnsemble {
    paths: usize,
    steps: usize,
    tau: f64,
    seed: u64,
    increments: Vec<f64>,
    levels: Vec<f64>,
}

impl BrownianEnsemble {
    /// Draws `paths` independent paths of `grid.steps()` increments `~ N(0, τ)`.
    pub fn sample(paths: usize, grid: &TimeGrid, seed: u64) -> Result<BrownianEnsemble> {
        if paths == 0 {
            return Err(Error::invalid("ensemble needs at least one path"));
        }
        let steps = grid.steps();
        let scale = grid.tau().sqrt();
        let increments: Vec<f64> = (0..paths)
            .into_par_iter()
            .flat_map_iter(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64);
                (0..steps).map(move |_| scale * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()
            })
            .collect();
        Ok(Self::from_increments(paths, grid, seed, increments))
    }

    /// All-zero increments: every path reduces to the deterministic scheme.
    pub fn zeros(paths: usize, grid: &TimeGrid) -> Result<BrownianEnsemble> {
        if paths == 0 {
            return Err(Error::invalid("ensemble needs at least one path"));
        }
        Ok(Self::from_increments(paths, grid, 0, vec![0.0; paths * grid.steps()]))
    }

    /// Builds an ensemble from explicit increments laid out path-major.
    pub fn from_increments(paths: usize, grid: &TimeGrid, seed: u64, increments: Vec<f64>) -> BrownianEnsemble {
        let steps = grid.steps();
        assert_eq!(increments.len(), paths * steps, "increment array has wrong shape");
        let mut levels = Vec::with_capacity(paths * (steps + 1));
        for p in 0..paths {
            let mut w = 0.0;
            levels.push(w);
            for dw in &increments[p * steps..(p + 1) * steps] {
                w += dw;
                levels.push(w);
            }
        }
        BrownianEnsemble { paths, steps, tau: grid.tau(), seed, increments, levels }
    }

    /// The mirrored ensemble with every increment negated.
    pub fn antithetic(&self) -> BrownianEnsemble {
        let mut out = self.clone();
        out.increments.iter_mut().for_each(|v| *v = -*v);
        out.levels.iter_mut().for_each(|v| *v = -*v);
        out
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `ΔW_{n+1} = W(t_{n+1}) - W(t_n)` of path `p`, for `n` in `0..N`.
    pub fn increment(&self, p: usize, n: usize) -> f64 {
        self.increments[p * self.steps + n]
    }

    pub fn path_increments(&self, p: usize) -> &[f64] {
        &self.increments[p * self.steps..(p + 1) * self.steps]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `W(t_n)` of path `p`, for `n` in `0..=N`.
    pub fn brownian(&self, p: usize, n: usize) -> f64 {
        self.levels[p * (self.steps + 1) + n]
    }

    pub fn path_levels(&self, p: usize) -> &[f64] {
        &self.levels[p * (self.steps + 1)..(p + 1) * (self.steps + 1)]
    }

    pub fn matches(&self, grid: &TimeGrid) -> bool {
        self.steps == grid.steps() && (self.tau - grid.tau()).abs() <= 1e-14 * grid.tau()
    }
}

/// Neumaier-compensated sum in index order.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Mean over paths of scalar values.
pub fn mc_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("Monte Carlo mean of zero paths"));
    }
    Ok(compensated_sum(values.iter().copied()) / values.len() as f64)
}

/// Componentwise mean over paths of equally sized vectors.
pub fn mc_mean_fields<V: AsRef<[f64]>>(fields: &[V]) -> Result<Vec<f64>> {
    let first = fields.first().ok_or_else(|| Error::invalid("Monte Carlo mean of zero paths"))?;
    let len = first.as_ref().len();
    if fields.iter().any(|f| f.as_ref().len() != len) {
        return Err(Error::invalid("Monte Carlo mean over fields of different lengths"));
    }
    let p = fields.len() as f64;
    Ok((0..len).map(|i| compensated_sum(fields.iter().map(|f| f.as_ref()[i])) / p).collect())
}

/// Sample variance (unbiased) and standard error of the mean.
pub fn mc_variance(values: &[f64]) -> Result<(f64, f64)> {
    let mean = mc_mean(values)?;
    if values.len() < 2 {
        return Ok((0.0, 0.0));
    }
    let n = values.len() as f64;
    let var = compensated_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1.0);
    Ok((var, (var / n).sqrt()))
}

/// `sqrt(max_n mean_p s[p][n])` from per-path per-level squared norms.
pub fn strong_norm_from_squares<V: AsRef<[f64]>>(squares: &[V]) -> Result<f64> {
    let mean = mc_mean_fields(squares)?;
    Ok(mean.into_iter().fold(0.0, f64::max).sqrt())
}

/// `sqrt(max_n E‖e_n‖²)` with `‖·‖` the L² norm through the mass matrix.
pub fn strong_error_norm(errors: &[Trajectory], system: &FemSystem) -> Result<f64> {
    let first = errors.first().ok_or_else(|| Error::invalid("strong error of zero paths"))?;
    let (levels, n) = (first.levels(), first.n_nodes());
    if n != system.n() {
        return Err(Error::invalid(format!("error fields have {n} nodes, system has {}", system.n())));
    }
    if errors.iter().any(|e| e.levels() != levels || e.n_nodes() != n) {
        return Err(Error::invalid("error trajectories have inconsistent shapes"));
    }
    let squares: Vec<Vec<f64>> = errors
        .par_iter()
        .map(|e| (0..levels).map(|k| system.mass_inner(e.level(k), e.level(k))).collect())
        .collect();
    strong_norm_from_squares(&squares)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_interval_mesh, make_time_grid};

    #[test]
    fn sample_shape_and_variance() {
        let g = make_time_grid(1.0, 40).unwrap();
        let e = BrownianEnsemble::sample(2000, &g, 7).unwrap();
        assert_eq!(e.increments().len(), 2000 * 40);
        let (var, _) = mc_variance(e.increments()).unwrap();
        assert!((var - 1.0 / 40.0).abs() < 0.1 / 40.0, "var {var}");
        let mean = mc_mean(e.increments()).unwrap();
        assert!(mean.abs() <= 4.0 * (g.tau() / (2000.0 * 40.0)).sqrt());
        let terminal: Vec<f64> = (0..2000).map(|p| e.brownian(p, 40)).collect();
        let (vt, _) = mc_variance(&terminal).unwrap();
        assert!((vt - 1.0).abs() < 0.1, "terminal variance {vt}");
    }

    #[test]
    fn sampling_is_deterministic_and_prefix_stable() {
        let g = make_time_grid(1.0, 16).unwrap();
        let a = BrownianEnsemble::sample(50, &g, 11).unwrap();
        let b = BrownianEnsemble::sample(50, &g, 11).unwrap();
        assert_eq!(a, b);
        let c = BrownianEnsemble::sample(80, &g, 11).unwrap();
        assert_eq!(a.increments(), &c.increments()[..50 * 16]);
        let d = BrownianEnsemble::sample(50, &g, 12).unwrap();
        assert_ne!(a.increments(), d.increments());
    }

    #[test]
    fn sampling_ignores_thread_count() {
        let g = make_time_grid(1.0, 10).unwrap();
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = serial.install(|| BrownianEnsemble::sample(300, &g, 3).unwrap());
        let b = wide.install(|| BrownianEnsemble::sample(300, &g, 3).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_paths_rejected() {
        let g = make_time_grid(1.0, 4).unwrap();
        assert!(BrownianEnsemble::sample(0, &g, 1).is_err());
        assert!(mc_mean(&[]).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mc_mean(&[2.5, 2.5, 2.5]).unwrap(), 2.5);
        assert_eq!(mc_mean(&[1.0, -1.0]).unwrap(), 0.0);
        let g = make_time_grid(1.0, 1).unwrap();
        let e = BrownianEnsemble::sample(100_000, &g, 5).unwrap();
        let m = mc_mean(e.increments()).unwrap();
        assert!(m.abs() <= 4.0 / (100_000f64).sqrt());
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn antithetic_negates() {
        let g = make_time_grid(1.0, 5).unwrap();
        let e = BrownianEnsemble::sample(3, &g, 9).unwrap();
        let a = e.antithetic();
        for p in 0..3 {
            for n in 0..=5 {
                assert_eq!(a.brownian(p, n), -e.brownian(p, n));
            }
        }
    }

    #[test]
    fn strong_error_examples() {
        let s = FemSystem::assemble(make_interval_mesh(0.0, 1.0, 2).unwrap()).unwrap();
        let one = Trajectory::from_levels(vec![vec![1.0]]);
        let v = strong_error_norm(&[one], &s).unwrap();
        assert!((v - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let zero = Trajectory::zeros(3, 1);
        assert_eq!(strong_error_norm(&[zero.clone(), zero], &s).unwrap(), 0.0);
        let a = Trajectory::from_levels(vec![vec![0.3], vec![-0.2]]);
        let b = Trajectory::from_levels(vec![vec![0.6], vec![-0.4]]);
        let na = strong_error_norm(&[a.clone(), a], &s).unwrap();
        let nb = strong_error_norm(&[b.clone(), b], &s).unwrap();
        assert!((nb - 2.0 * na).abs() < 1e-15);
        let bad = Trajectory::zeros(2, 1);
        let good = Trajectory::zeros(3, 1);
        assert!(strong_error_norm(&[good, bad], &s).is_err());
    }
}
