//! Reference-element machinery: quadrature, Lagrange bases, affine element
//! maps and degree-of-freedom maps.

pub mod basis;
pub mod dofmap;
pub mod quadrature;

use thiserror::Error;

use crate::mesh::Point;

pub use basis::{lagrange_basis, MAX_LOCAL};
pub use dofmap::{build_dof_map, eval_discrete, interpolate_nodal, DofMap};
pub use quadrature::{line_rule, quadrature_rule, LineRule, QuadratureRule};

/// Quadrature order used for every volume and edge integral (`2 (s + 1) + 2` with `s = 1`).
pub const DEFAULT_QUADRATURE_ORDER: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum FemError {
    #[error("quadrature order {0} is not supported (1..=10)")]
    UnsupportedOrder(usize),
    #[error("polynomial degree {0} is not supported (1 or 2)")]
    UnsupportedDegree(usize),
    #[error("point {0:?} lies outside the reference triangle")]
    OutsideReference([f64; 2]),
    #[error("point {point:?} lies outside element {element}")]
    OutsideElement { element: usize, point: Point },
    #[error("element {0} does not belong to the dof map's subdomain")]
    ForeignElement(usize),
    #[error("component count must be positive")]
    NoComponents,
    #[error("coefficient vector has length {got}, expected {expected}")]
    CoefficientLength { got: usize, expected: usize },
}

/// `x = origin + jac * xi` for a straight-sided triangle.
#[derive(Clone, Copy, Debug)]
pub struct AffineMap {
    pub origin: Point,
    pub jac: [[f64; 2]; 2],
    pub inv: [[f64; 2]; 2],
    pub det: f64,
}

impl AffineMap {
    pub fn new(p: [Point; 3]) -> Self {
        let jac = [
            [p[1][0] - p[0][0], p[2][0] - p[0][0]],
            [p[1][1] - p[0][1], p[2][1] - p[0][1]],
        ];
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        let inv = [
            [jac[1][1] / det, -jac[0][1] / det],
            [-jac[1][0] / det, jac[0][0] / det],
        ];
        AffineMap {
            origin: p[0],
            jac,
            inv,
            det,
        }
    }

    pub fn map(&self, xi: [f64; 2]) -> Point {
        [
            self.origin[0] + self.jac[0][0] * xi[0] + self.jac[0][1] * xi[1],
            self.origin[1] + self.jac[1][0] * xi[0] + self.jac[1][1] * xi[1],
        ]
    }

    pub fn inverse(&self, x: Point) -> [f64; 2] {
        let d = [x[0] - self.origin[0], x[1] - self.origin[1]];
        [
            self.inv[0][0] * d[0] + self.inv[0][1] * d[1],
            self.inv[1][0] * d[0] + self.inv[1][1] * d[1],
        ]
    }

    /// `J^{-T} g`
    pub fn grad(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.inv[0][0] * g[0] + self.inv[1][0] * g[1],
            self.inv[0][1] * g[0] + self.inv[1][1] * g[1],
        ]
    }

    /// `J^{-T} H J^{-1}`
    pub fn hessian(&self, h: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (r, row) in out.iter_mut().enumerate() {
            for (s, v) in row.iter_mut().enumerate() {
                for a in 0..2 {
                    for b in 0..2 {
                        *v += self.inv[a][r] * h[a][b] * self.inv[b][s];
                    }
                }
            }
        }
        out
    }
}

/// Basis values, physical gradients and physical Hessians at one point.
#[derive(Clone, Debug)]
pub struct PhysicalBasis {
    pub n: usize,
    pub values: [f64; MAX_LOCAL],
    pub grads: [[f64; 2]; MAX_LOCAL],
    pub hess: [[[f64; 2]; 2]; MAX_LOCAL],
}

impl PhysicalBasis {
    pub fn at(degree: usize, map: &AffineMap, xi: [f64; 2]) -> Self {
        let mut values = [0.0; MAX_LOCAL];
        let mut ref_grads = [[0.0; 2]; MAX_LOCAL];
        basis::eval_into(degree, xi, &mut values, &mut ref_grads);
        let n = basis::local_count(degree);
        let ref_hess = basis::reference_hessians(degree);
        let mut grads = [[0.0; 2]; MAX_LOCAL];
        let mut hess = [[[0.0; 2]; 2]; MAX_LOCAL];
        for i in 0..n {
            grads[i] = map.grad(ref_grads[i]);
            hess[i] = map.hessian(ref_hess[i]);
        }
        PhysicalBasis {
            n,
            values,
            grads,
            hess,
        }
    }
}

/// Value, gradient and Hessian of one scalar component of a discrete field.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScalarSample {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

impl ScalarSample {
    pub fn from_local(local: &[f64], basis: &PhysicalBasis) -> Self {
        let mut s = ScalarSample::default();
        for (i, &c) in local.iter().enumerate().take(basis.n) {
            s.value += c * basis.values[i];
            s.grad[0] += c * basis.grads[i][0];
            s.grad[1] += c * basis.grads[i][1];
            for r in 0..2 {
                for q in 0..2 {
                    s.hess[r][q] += c * basis.hess[i][r][q];
                }
            }
        }
        s
    }

    pub fn laplacian(&self) -> f64 {
        self.hess[0][0] + self.hess[1][1]
    }
}
