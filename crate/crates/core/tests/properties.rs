use std::sync::Arc;

use stocon_core::analysis::{convergence_point, Resolution};
use stocon_core::optimizer::{constraint_integral, gp_iterate, OptimizerConfig};
use stocon_core::paths::{mc_mean, mc_variance};
use stocon_core::problems::{example1, example2};
use stocon_core::{make_interval_mesh, make_time_grid, BrownianEnsemble, FemSystem, SpdeSolver, Trajectory};

fn system(cells: usize) -> FemSystem {
    FemSystem::assemble(make_interval_mesh(0.0, 1.0, cells).unwrap()).unwrap()
}

#[test]
fn zero_increment_paths_reproduce_the_mean_bitwise() {
    let p = example1(0.1, 1.0);
    let sys = system(12);
    let grid = make_time_grid(1.0, 10).unwrap();
    let solver = SpdeSolver::new(&sys, grid, 1.0).unwrap();
    let u = Trajectory::from_fn(&grid, sys.n(), |_, t| sys.mesh().interpolate(|x| (p.exact_u)(t, x)));
    let mean = solver.forward_mean(&p.spec, &u).unwrap();
    let zeros = BrownianEnsemble::zeros(3, &grid).unwrap();
    let paths = solver.forward_paths(&p.spec, &u, &zeros).unwrap();
    for path in paths.paths() {
        assert_eq!(path.as_slice(), mean.as_slice());
    }
}

#[test]
fn path_mean_matches_mean_field_within_four_stderr() {
    let p = example1(0.1, 1.0);
    let sys = system(20);
    let grid = make_time_grid(1.0, 20).unwrap();
    let solver = SpdeSolver::new(&sys, grid, 1.0).unwrap();
    let u = Trajectory::zeros(21, sys.n());
    let mean = solver.forward_mean(&p.spec, &u).unwrap();
    let ens = BrownianEnsemble::sample(2000, &grid, 3).unwrap();
    let paths = solver.forward_paths(&p.spec, &u, &ens).unwrap();
    let mid = sys.n() / 2;
    for n in [5, 10, 20] {
        let values: Vec<f64> = paths.paths().iter().map(|x| x.level(n)[mid]).collect();
        let m = mc_mean(&values).unwrap();
        let (_, se) = mc_variance(&values).unwrap();
        assert!((m - mean.level(n)[mid]).abs() <= 4.0 * se, "level {n}: {m} vs {}", mean.level(n)[mid]);
    }
}

#[test]
fn forward_paths_are_linear_in_data() {
    let p = example1(0.1, 1.0);
    let sys = system(10);
    let grid = make_time_grid(1.0, 8).unwrap();
    let solver = SpdeSolver::new(&sys, grid, 1.0).unwrap();
    let ens = BrownianEnsemble::sample(4, &grid, 9).unwrap();
    let u1 = Trajectory::from_fn(&grid, sys.n(), |n, _| vec![0.3 * n as f64; sys.n()]);
    let u2 = Trajectory::from_fn(&grid, sys.n(), |_, t| sys.mesh().interpolate(|x| t * x[0]));
    let mut spec2 = p.spec.clone();
    spec2.x0 = Arc::new(|x| x[0] * (1.0 - x[0]));
    spec2.forcing = Arc::new(|t, x, w| t + x[0] * w);
    spec2.sigma = Arc::new(|_, _| 0.0);
    let mut sum_spec = p.spec.clone();
    let (f1, f2) = (p.spec.forcing.clone(), spec2.forcing.clone());
    let x01 = p.spec.x0.clone();
    sum_spec.forcing = Arc::new(move |t, x, w| f1(t, x, w) + f2(t, x, w));
    sum_spec.x0 = Arc::new(move |x| x01(x) + x[0] * (1.0 - x[0]));
    let a = solver.forward_paths(&p.spec, &u1, &ens).unwrap();
    let b = solver.forward_paths(&spec2, &u2, &ens).unwrap();
    let c = solver.forward_paths(&sum_spec, &u1.add_scaled(1.0, &u2), &ens).unwrap();
    for q in 0..4 {
        for ((x, y), z) in a.path(q).as_slice().iter().zip(b.path(q).as_slice()).zip(c.path(q).as_slice()) {
            assert!((x + y - z).abs() <= 1e-10);
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let p = example1(0.1, 1.0);
    let cfg = OptimizerConfig::for_spec(&p.spec);
    let res = Resolution { cells: 16, steps: 16 };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| convergence_point(&p, res, &cfg, 300, 5).unwrap().0)
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn strong_error_is_stable_across_seeds() {
    let p = example1(0.1, 1.0);
    let cfg = OptimizerConfig::for_spec(&p.spec);
    let res = Resolution { cells: 40, steps: 40 };
    let a = convergence_point(&p, res, &cfg, 2000, 1).unwrap().0.strong_l2_state;
    let b = convergence_point(&p, res, &cfg, 2000, 2).unwrap().0.strong_l2_state;
    assert!(a / b < 2.0 && b / a < 2.0, "{a} {b}");
}

#[test]
fn example2_optimizer_respects_constraint() {
    let p = example2(0.2, 0.2, 0.5, 0.8).with_delta(1.0);
    let sys = FemSystem::assemble(p.domain.mesh(12).unwrap()).unwrap();
    let grid = make_time_grid(1.0, 12).unwrap();
    let out = gp_iterate(&p.spec, &sys, &grid, &OptimizerConfig::for_spec(&p.spec)).unwrap();
    assert!(out.converged);
    assert!((constraint_integral(&out.state_mean, &sys, &grid).unwrap() - 1.0).abs() < 1e-8);
    assert!(out.records.iter().all(|r| r.constraint_integral <= 1.0 + 1e-8 && r.mu >= 0.0));
}

/// Composite 3-point Gauss-Legendre nodes and weights on `[0, 1]`.
fn gauss_rule(panels: usize) -> Vec<(f64, f64)> {
    let r = (0.6f64).sqrt() / 2.0;
    let local = [(0.5 - r, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + r, 5.0 / 18.0)];
    let h = 1.0 / panels as f64;
    (0..panels).flat_map(|k| local.map(|(x, w)| ((k as f64 + x) * h, w * h))).collect()
}

#[test]
fn exact_mean_state_integral_matches_delta() {
    let rule = gauss_rule(40);
    for p in [example1(0.1, 1.0), example2(0.2, 0.2, 0.5, 0.8)] {
        let mut total = 0.0;
        for &(t, wt) in &rule {
            for &(x, wx) in &rule {
                if p.domain.dim() == 1 {
                    total += wt * wx * p.exact_x_mean(t, &[x]);
                } else {
                    for &(y, wy) in &rule {
                        total += wt * wx * wy * p.exact_x_mean(t, &[x, y]);
                    }
                }
            }
        }
        assert!((total - p.spec.delta).abs() < 1e-8, "{}: {total} vs {}", p.name, p.spec.delta);
    }
}
