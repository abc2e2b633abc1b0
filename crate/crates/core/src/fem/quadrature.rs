//! Element quadrature for load vectors and error integrals.
//!
//! Segments use 3-point Gauss-Legendre (exact to degree 5); triangles use
//! the edge-midpoint rule (exact to degree 2).

use crate::grid::Mesh;

/// One quadrature point of an element: physical coordinates, weight
/// (already scaled by the element measure) and the values of the element's
/// local P1 basis functions.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint {
    pub x: [f64; 2],
    pub weight: f64,
    pub basis: [f64; 3],
}

const GAUSS3_NODES: [f64; 3] = [
    0.112_701_665_379_258_31, // 0.5 - 0.5*sqrt(3/5)
    0.5,
    0.887_298_334_620_741_7,
];
const GAUSS3_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

const MIDPOINT_BARY: [[f64; 3]; 3] = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];

pub fn element_points(mesh: &Mesh, e: usize) -> Vec<QuadPoint> {
    let v = mesh.element(e);
    let vol = mesh.element_volume(e);
    if mesh.dim() == 1 {
        let a = mesh.point(v[0])[0];
        let b = mesh.point(v[1])[0];
        GAUSS3_NODES
            .iter()
            .zip(GAUSS3_WEIGHTS)
            .map(|(&xi, w)| QuadPoint { x: [a + xi * (b - a), 0.0], weight: w * vol, basis: [1.0 - xi, xi, 0.0] })
            .collect()
    } else {
        let p: Vec<&[f64]> = v.iter().map(|&n| mesh.point(n)).collect();
        MIDPOINT_BARY
            .iter()
            .map(|l| QuadPoint {
                x: [
                    l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                    l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
                ],
                weight: vol / 3.0,
                basis: *l,
            })
            .collect()
    }
}

/// Constant gradients of the local basis functions on element `e`.
pub fn basis_gradients(mesh: &Mesh, e: usize) -> [[f64; 2]; 3] {
    let v = mesh.element(e);
    if mesh.dim() == 1 {
        let len = mesh.element_volume(e);
        [[-1.0 / len, 0.0], [1.0 / len, 0.0], [0.0, 0.0]]
    } else {
        let p0 = mesh.point(v[0]);
        let p1 = mesh.point(v[1]);
        let p2 = mesh.point(v[2]);
        let det = 2.0 * mesh.element_volume(e);
        [
            [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
            [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
            [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
        ]
    }
}
