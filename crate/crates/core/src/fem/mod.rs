//! P1 finite elements on interior nodes: mass and stiffness assembly, load
//! vectors, the discrete L² projection and implicit Euler solves.

pub mod quadrature;
pub mod sparse;

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::grid::Mesh;
use quadrature::{basis_gradients, element_points};
pub use sparse::{BandedCholesky, CsrMatrix, SpdSolver};

/// Coefficients of a P1 function on interior nodes; boundary values are zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodalField(Vec<f64>);

impl NodalField {
    pub fn zeros(n: usize) -> NodalField {
        NodalField(vec![0.0; n])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for NodalField {
    fn from(v: Vec<f64>) -> Self {
        NodalField(v)
    }
}

impl Deref for NodalField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for NodalField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Assembled operators of a mesh.
#[derive(Debug, Clone)]
pub struct FemSystem {
    mesh: Mesh,
    mass: CsrMatrix,
    stiffness: CsrMatrix,
    mass_solver: SpdSolver,
    unit_load: Vec<f64>,
}

/// Solver for `(M + c A) x = rhs`, where `c` is the time step times the
/// diffusion scale.
#[derive(Debug, Clone)]
pub struct EulerSolver {
    coefficient: f64,
    solver: SpdSolver,
}

impl EulerSolver {
    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<NodalField> {
        self.solver.solve(rhs).map(NodalField)
    }

    pub fn solve_in_place(&self, x: &mut [f64]) -> Result<()> {
        self.solver.solve_in_place(x)
    }
}

impl FemSystem {
    pub fn assemble(mesh: Mesh) -> Result<FemSystem> {
        let n = mesh.n_interior();
        if n == 0 {
            return Err(Error::invalid("mesh has no interior nodes"));
        }
        let mut mass_t = Vec::new();
        let mut stiff_t = Vec::new();
        for e in 0..mesh.n_elements() {
            let v = mesh.element(e);
            let k = v.len();
            let vol = mesh.element_volume(e);
            let grads = basis_gradients(&mesh, e);
            for a in 0..k {
                let Some(i) = mesh.interior_index(v[a]) else { continue };
                for b in 0..k {
                    let Some(j) = mesh.interior_index(v[b]) else { continue };
                    // exact P1 products: ∫φ_aφ_b = vol·(1+δ_ab)/((d+1)(d+2))
                    let denom = if k == 2 { 6.0 } else { 12.0 };
                    let m = vol * if a == b { 2.0 } else { 1.0 } / denom;
                    let s = vol * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                    mass_t.push((i, j, m));
                    stiff_t.push((i, j, s));
                }
            }
        }
        let mass = CsrMatrix::from_triplets(n, mass_t);
        let stiffness = CsrMatrix::from_triplets(n, stiff_t);
        let mass_solver = SpdSolver::new(&mass);
        let mut sys = FemSystem { mesh, mass, stiffness, mass_solver, unit_load: Vec::new() };
        sys.unit_load = sys.load_vector(|_| 1.0);
        Ok(sys)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn n(&self) -> usize {
        self.mass.n()
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    /// `(1, φ_i)`, the load of the constant function one.
    pub fn unit_load(&self) -> &[f64] {
        &self.unit_load
    }

    /// `b_i = ∫ g φ_i` by the element quadrature rule.
    pub fn load_vector(&self, g: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut b = vec![0.0; self.n()];
        self.add_load(&g, 1.0, &mut b);
        b
    }

    /// `b += scale * load(g)`
    pub fn add_load(&self, g: impl Fn(&[f64]) -> f64, scale: f64, b: &mut [f64]) {
        let mesh = &self.mesh;
        let dim = mesh.dim();
        for e in 0..mesh.n_elements() {
            let v = mesh.element(e);
            for q in element_points(mesh, e) {
                let gq = g(&q.x[..dim]) * q.weight * scale;
                for (a, &node) in v.iter().enumerate() {
                    if let Some(i) = mesh.interior_index(node) {
                        b[i] += gq * q.basis[a];
                    }
                }
            }
        }
    }

    /// `∫ g dx` by the element quadrature rule.
    pub fn integrate(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        let mesh = &self.mesh;
        let dim = mesh.dim();
        (0..mesh.n_elements())
            .flat_map(|e| element_points(mesh, e))
            .map(|q| g(&q.x[..dim]) * q.weight)
            .sum()
    }

    /// Discrete L² projection onto the interior P1 space.
    pub fn l2_project(&self, g: impl Fn(&[f64]) -> f64) -> Result<NodalField> {
        let b = self.load_vector(g);
        self.solve_mass(&b)
    }

    pub fn solve_mass(&self, rhs: &[f64]) -> Result<NodalField> {
        self.mass_solver.solve(rhs).map(NodalField)
    }

    pub fn apply_mass(&self, x: &[f64]) -> Vec<f64> {
        self.mass.mul_vec(x)
    }

    /// Factorizes `M + coefficient·A`.
    pub fn euler(&self, coefficient: f64) -> Result<EulerSolver> {
        if !(coefficient > 0.0) || !coefficient.is_finite() {
            return Err(Error::invalid(format!("implicit Euler coefficient must be positive, got {coefficient}")));
        }
        let op = self.mass.add_scaled(coefficient, &self.stiffness);
        Ok(EulerSolver { coefficient, solver: SpdSolver::new(&op) })
    }

    /// Single solve of `(M + τA) x = rhs` with a fresh factorization.
    pub fn euler_solve(&self, tau: f64, rhs: &[f64]) -> Result<NodalField> {
        if rhs.len() != self.n() {
            return Err(Error::invalid(format!("rhs has length {}, expected {}", rhs.len(), self.n())));
        }
        self.euler(tau)?.solve(rhs)
    }

    /// `(‖x‖_{L²}, |x|_{H¹})` of the P1 function with coefficients `x`.
    pub fn norms(&self, x: &[f64]) -> (f64, f64) {
        (self.mass.bilinear(x, x).max(0.0).sqrt(), self.stiffness.bilinear(x, x).max(0.0).sqrt())
    }

    /// `xᵀ M y`
    pub fn mass_inner(&self, x: &[f64], y: &[f64]) -> f64 {
        self.mass.bilinear(x, y)
    }

    /// `∫ x dx` of the P1 function with coefficients `x`.
    pub fn integral(&self, x: &[f64]) -> f64 {
        self.unit_load.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_interval_mesh, make_rectangle_mesh};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn interval(cells: usize) -> FemSystem {
        FemSystem::assemble(make_interval_mesh(0.0, 1.0, cells).unwrap()).unwrap()
    }

    #[test]
    fn single_node_matrices() {
        let s = interval(2);
        assert_relative_eq!(s.mass().get(0, 0), 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s.stiffness().get(0, 0), 4.0, epsilon = 1e-14);
    }

    #[test]
    fn quarter_spacing_matrices() {
        let s = interval(4);
        for i in 0..3 {
            assert_relative_eq!(s.mass().get(i, i), 1.0 / 6.0, epsilon = 1e-15);
            assert_relative_eq!(s.stiffness().get(i, i), 8.0, epsilon = 1e-13);
            if i + 1 < 3 {
                assert_relative_eq!(s.mass().get(i, i + 1), 1.0 / 24.0, epsilon = 1e-15);
                assert_relative_eq!(s.stiffness().get(i, i + 1), -4.0, epsilon = 1e-13);
            }
        }
        assert_eq!(s.mass().get(0, 2), 0.0);
    }

    #[test]
    fn unit_square_center_stiffness() {
        // Six triangles touch the centre node: two contribute 1 each through
        // the x/y legs, four contribute 1/2 each.
        let s = FemSystem::assemble(make_rectangle_mesh([0.0, 0.0], [1.0, 1.0], 2, 2).unwrap()).unwrap();
        assert_eq!(s.n(), 1);
        assert_relative_eq!(s.stiffness().get(0, 0), 4.0, epsilon = 1e-13);
    }

    #[test]
    fn no_interior_rejected() {
        let err = FemSystem::assemble(make_interval_mesh(0.0, 1.0, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn operators_symmetric_and_mass_positive() {
        for s in [
            interval(9),
            FemSystem::assemble(make_rectangle_mesh([0.0, 0.0], [1.0, 2.0], 5, 6).unwrap()).unwrap(),
        ] {
            assert!(s.mass().max_asymmetry() <= 1e-15);
            assert!(s.stiffness().max_asymmetry() <= 1e-12);
            for i in 0..s.n() {
                assert!(s.mass().row(i).map(|(_, v)| v).sum::<f64>() > 0.0);
            }
        }
    }

    #[test]
    fn stiffness_annihilates_linear_away_from_boundary() {
        // A applied to the interpolant of a linear function is nonzero only
        // in rows adjacent to the boundary.
        let s = FemSystem::assemble(make_rectangle_mesh([0.0, 0.0], [1.0, 1.0], 6, 6).unwrap()).unwrap();
        let x = s.mesh().interpolate(|p| 0.3 + 2.0 * p[0] - p[1]);
        let r = s.stiffness().mul_vec(&x);
        for i in 0..s.n() {
            let p = s.mesh().point(s.mesh().interior_node(i));
            let deep = p.iter().all(|&c| c > 1.5 / 6.0 && c < 1.0 - 1.5 / 6.0);
            if deep {
                assert!(r[i].abs() < 1e-12, "row {i}: {}", r[i]);
            }
        }
    }

    #[test]
    fn load_vector_examples() {
        assert_relative_eq!(interval(2).load_vector(|_| 1.0)[0], 0.5, epsilon = 1e-15);
        for v in interval(4).load_vector(|_| 1.0) {
            assert_relative_eq!(v, 0.25, epsilon = 1e-15);
        }
        assert!(interval(4).load_vector(|_| 0.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_examples() {
        let s = interval(8);
        assert!(s.l2_project(|_| 0.0).unwrap().iter().all(|&v| v == 0.0));
        // hat function of interior index 3 (node at x = 4/8)
        let hat = |p: &[f64]| (1.0 - (p[0] - 0.5).abs() * 8.0).max(0.0);
        let p = s.l2_project(hat).unwrap();
        for (i, v) in p.iter().enumerate() {
            let expect = if i == 3 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "{i}: {v}");
        }
    }

    #[test]
    fn projection_of_sine_is_second_order_close_to_interpolant() {
        // Reference: the h=1/4 projection against interpolant at increasing
        // resolution shows the gap shrinking like h².
        let gap = |cells: usize| {
            let s = interval(cells);
            let p = s.l2_project(|x| (PI * x[0]).sin()).unwrap();
            let i = s.mesh().interpolate(|x| (PI * x[0]).sin());
            p.iter().zip(&i).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let g4 = gap(4);
        let g8 = gap(8);
        let g16 = gap(16);
        assert!(g4 < 0.25 * 0.25 * 2.0);
        assert!((g4 / g8).log2() > 1.8 && (g8 / g16).log2() > 1.8);
    }

    #[test]
    fn projection_galerkin_orthogonality() {
        let s = FemSystem::assemble(make_rectangle_mesh([0.0, 0.0], [1.0, 1.0], 7, 5).unwrap()).unwrap();
        let g = |p: &[f64]| (3.0 * p[0]).exp() * p[1].cos();
        let p = s.l2_project(g).unwrap();
        let b = s.load_vector(g);
        let mp = s.apply_mass(&p);
        for (u, v) in mp.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn euler_examples() {
        let s = interval(2);
        let x = s.euler_solve(0.5, &[1.0 / 3.0]).unwrap();
        assert_relative_eq!(x[0], 1.0 / 7.0, epsilon = 1e-15);
        assert_eq!(s.euler_solve(0.5, &[0.0]).unwrap()[0], 0.0);
        assert!(s.euler_solve(0.0, &[1.0]).is_err());
        assert!(s.euler_solve(0.5, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn euler_refactorization_matches_fresh_assembly() {
        let s = interval(10);
        let rhs: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).cos()).collect();
        let a = s.euler(0.1).unwrap().solve(&rhs).unwrap();
        let b = s.euler(0.2).unwrap().solve(&rhs).unwrap();
        let fresh = interval(10);
        assert_eq!(a, fresh.euler_solve(0.1, &rhs).unwrap());
        assert_eq!(b, fresh.euler_solve(0.2, &rhs).unwrap());
        assert_ne!(a, b);
    }

    #[test]
    fn euler_solve_is_linear() {
        let s = FemSystem::assemble(make_rectangle_mesh([0.0, 0.0], [1.0, 1.0], 6, 6).unwrap()).unwrap();
        let e = s.euler(0.03).unwrap();
        let r1: Vec<f64> = (0..s.n()).map(|i| (i as f64).sin()).collect();
        let r2: Vec<f64> = (0..s.n()).map(|i| (i as f64 * 0.3).cos()).collect();
        let comb: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let x1 = e.solve(&r1).unwrap();
        let x2 = e.solve(&r2).unwrap();
        let xc = e.solve(&comb).unwrap();
        for i in 0..s.n() {
            let lin = 2.0 * x1[i] - 0.5 * x2[i];
            assert!((xc[i] - lin).abs() <= 1e-9 * lin.abs().max(1.0));
        }
    }

    #[test]
    fn norms_examples() {
        let s = interval(2);
        assert_eq!(s.norms(&[0.0]), (0.0, 0.0));
        let (l2, h1) = s.norms(&[1.0]);
        assert_relative_eq!(l2, (1.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(h1, 2.0, epsilon = 1e-14);
        let (l2b, h1b) = s.norms(&[2.0]);
        assert_relative_eq!(l2b, 2.0 * l2, epsilon = 1e-15);
        assert_relative_eq!(h1b, 2.0 * h1, epsilon = 1e-14);
    }

    #[test]
    fn cg_fallback_agrees_with_direct() {
        let s = interval(12);
        let op = s.mass().add_scaled(0.05, s.stiffness());
        let rhs = s.load_vector(|x| x[0] * (1.0 - x[0]));
        let d = SpdSolver::new(&op).solve(&rhs).unwrap();
        let c = SpdSolver::iterative(&op).solve(&rhs).unwrap();
        for (u, v) in d.iter().zip(&c) {
            assert!((u - v).abs() < 1e-11);
        }
    }
}
