//! Benchmarks for the solver kernels. See `benches/kernels.rs`.

use stocon_core::{make_interval_mesh, make_time_grid, FemSystem, TimeGrid};

/// Unit-interval system with `cells` cells and a uniform grid on `[0, 1]`.
pub fn setup(cells: usize, steps: usize) -> (FemSystem, TimeGrid) {
    let sys = FemSystem::assemble(make_interval_mesh(0.0, 1.0, cells).expect("mesh")).expect("assembly");
    (sys, make_time_grid(1.0, steps).expect("grid"))
}
