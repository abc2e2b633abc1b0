//! Uniform time partitions and structured simplicial meshes.
//!
//! Meshes carry a dense renumbering of their interior nodes; every operator
//! in [`crate::fem`] lives on that interior index space (homogeneous
//! Dirichlet data are eliminated).

use crate::error::{Error, Result};

/// Uniform partition `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    tau: f64,
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `t_n = n * tau`, with the last point pinned to `T`.
    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.tau
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.time(n)).collect()
    }
}

pub fn make_time_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::invalid(format!("time horizon must be positive, got {horizon}")));
    }
    if steps == 0 {
        return Err(Error::invalid("time grid needs at least one step"));
    }
    Ok(TimeGrid { horizon, steps, tau: horizon / steps as f64 })
}

/// A conforming simplicial mesh of an interval or a rectangle.
///
/// Nodes are stored as `[x, y]` pairs; in 1D the second coordinate is zero
/// and [`Mesh::point`] returns a one-element slice.
#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    nodes: Vec<[f64; 2]>,
    connectivity: Vec<usize>,
    boundary: Vec<bool>,
    interior_of_node: Vec<Option<usize>>,
    interior_nodes: Vec<usize>,
    h: f64,
    lower: [f64; 2],
    upper: [f64; 2],
}

impl Mesh {
    fn from_parts(
        dim: usize,
        nodes: Vec<[f64; 2]>,
        connectivity: Vec<usize>,
        lower: [f64; 2],
        upper: [f64; 2],
    ) -> Mesh {
        let tol: Vec<f64> = (0..dim).map(|d| 1e-12 * (upper[d] - lower[d])).collect();
        let boundary: Vec<bool> = nodes
            .iter()
            .map(|p| (0..dim).any(|d| (p[d] - lower[d]).abs() <= tol[d] || (p[d] - upper[d]).abs() <= tol[d]))
            .collect();
        let mut interior_of_node = vec![None; nodes.len()];
        let mut interior_nodes = Vec::new();
        for (i, &b) in boundary.iter().enumerate() {
            if !b {
                interior_of_node[i] = Some(interior_nodes.len());
                interior_nodes.push(i);
            }
        }
        let mut mesh = Mesh {
            dim,
            nodes,
            connectivity,
            boundary,
            interior_of_node,
            interior_nodes,
            h: 0.0,
            lower,
            upper,
        };
        mesh.h = (0..mesh.n_elements()).map(|e| mesh.element_diameter(e)).fold(0.0, f64::max);
        mesh
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.connectivity.len() / (self.dim + 1)
    }

    pub fn n_interior(&self) -> usize {
        self.interior_nodes.len()
    }

    /// Maximum element diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn point(&self, node: usize) -> &[f64] {
        &self.nodes[node][..self.dim]
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let k = self.dim + 1;
        &self.connectivity[e * k..(e + 1) * k]
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    /// Dense interior index of a mesh node, `None` on the boundary.
    pub fn interior_index(&self, node: usize) -> Option<usize> {
        self.interior_of_node[node]
    }

    /// Mesh node carrying interior index `i`.
    pub fn interior_node(&self, i: usize) -> usize {
        self.interior_nodes[i]
    }

    /// Lower and upper corners of the bounding box.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        (self.lower, self.upper)
    }

    /// Signed length (1D) or signed area (2D) of an element.
    pub fn element_volume(&self, e: usize) -> f64 {
        let v = self.element(e);
        let a = self.nodes[v[0]];
        let b = self.nodes[v[1]];
        if self.dim == 1 {
            b[0] - a[0]
        } else {
            let c = self.nodes[v[2]];
            0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
        }
    }

    pub fn element_diameter(&self, e: usize) -> f64 {
        let v = self.element(e);
        let mut d: f64 = 0.0;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                let p = self.nodes[v[i]];
                let q = self.nodes[v[j]];
                d = d.max(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
            }
        }
        d
    }

    /// Nodal interpolant of `g` restricted to interior nodes.
    pub fn interpolate(&self, g: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        self.interior_nodes.iter().map(|&n| g(self.point(n))).collect()
    }
}

pub fn make_interval_mesh(a: f64, b: f64, cells: usize) -> Result<Mesh> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid(format!("interval endpoints must satisfy a < b, got [{a}, {b}]")));
    }
    if cells == 0 {
        return Err(Error::invalid("interval mesh needs at least one cell"));
    }
    let width = b - a;
    let nodes = (0..=cells)
        .map(|i| {
            let x = if i == cells { b } else { a + width * i as f64 / cells as f64 };
            [x, 0.0]
        })
        .collect();
    let connectivity = (0..cells).flat_map(|i| [i, i + 1]).collect();
    Ok(Mesh::from_parts(1, nodes, connectivity, [a, 0.0], [b, 0.0]))
}

/// Structured triangulation of a rectangle; every cell is cut along its
/// lower-left to upper-right diagonal.
pub fn make_rectangle_mesh(
    corner_min: [f64; 2],
    corner_max: [f64; 2],
    cells_x: usize,
    cells_y: usize,
) -> Result<Mesh> {
    if !(corner_min[0] < corner_max[0] && corner_min[1] < corner_max[1]) {
        return Err(Error::invalid(format!(
            "rectangle corners must be ordered componentwise, got {corner_min:?} and {corner_max:?}"
        )));
    }
    if cells_x == 0 || cells_y == 0 {
        return Err(Error::invalid("rectangle mesh needs at least one cell per direction"));
    }
    let coord = |lo: f64, hi: f64, i: usize, n: usize| {
        if i == n {
            hi
        } else {
            lo + (hi - lo) * i as f64 / n as f64
        }
    };
    let mut nodes = Vec::with_capacity((cells_x + 1) * (cells_y + 1));
    for j in 0..=cells_y {
        for i in 0..=cells_x {
            nodes.push([
                coord(corner_min[0], corner_max[0], i, cells_x),
                coord(corner_min[1], corner_max[1], j, cells_y),
            ]);
        }
    }
    let id = |i: usize, j: usize| j * (cells_x + 1) + i;
    let mut connectivity = Vec::with_capacity(6 * cells_x * cells_y);
    for j in 0..cells_y {
        for i in 0..cells_x {
            let (sw, se, nw, ne) = (id(i, j), id(i + 1, j), id(i, j + 1), id(i + 1, j + 1));
            connectivity.extend_from_slice(&[sw, se, ne]);
            connectivity.extend_from_slice(&[sw, ne, nw]);
        }
    }
    Ok(Mesh::from_parts(2, nodes, connectivity, corner_min, corner_max))
}
