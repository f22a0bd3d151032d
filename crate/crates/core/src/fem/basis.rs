//! Nodal Lagrange bases of degree 1 and 2 on the reference triangle.
//!
//! Local node order: the three vertices, then (degree 2) the midpoints of the
//! edges `0-1`, `1-2`, `2-0`.

use super::FemError;

pub const MAX_LOCAL: usize = 6;

const GRAD_LAMBDA: [[f64; 2]; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
const EDGE_PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

/// Number of local basis functions.
pub fn local_count(degree: usize) -> usize {
    match degree {
        1 => 3,
        2 => 6,
        _ => 0,
    }
}

/// Reference coordinates of the local nodes.
pub fn reference_nodes(degree: usize) -> &'static [[f64; 2]] {
    const P2: [[f64; 2]; 6] = [
        [0.0, 0.0],
        [1.0, 0.0],
        [0.0, 1.0],
        [0.5, 0.0],
        [0.5, 0.5],
        [0.0, 0.5],
    ];
    match degree {
        1 => &P2[..3],
        _ => &P2[..],
    }
}

/// Values and reference gradients at `xi`, written into fixed buffers.
pub fn eval_into(
    degree: usize,
    xi: [f64; 2],
    values: &mut [f64; MAX_LOCAL],
    grads: &mut [[f64; 2]; MAX_LOCAL],
) {
    let lam = [1.0 - xi[0] - xi[1], xi[0], xi[1]];
    match degree {
        1 => {
            for i in 0..3 {
                values[i] = lam[i];
                grads[i] = GRAD_LAMBDA[i];
            }
        }
        _ => {
            for i in 0..3 {
                values[i] = lam[i] * (2.0 * lam[i] - 1.0);
                let s = 4.0 * lam[i] - 1.0;
                grads[i] = [s * GRAD_LAMBDA[i][0], s * GRAD_LAMBDA[i][1]];
            }
            for (k, &(a, b)) in EDGE_PAIRS.iter().enumerate() {
                values[3 + k] = 4.0 * lam[a] * lam[b];
                grads[3 + k] = [
                    4.0 * (lam[a] * GRAD_LAMBDA[b][0] + lam[b] * GRAD_LAMBDA[a][0]),
                    4.0 * (lam[a] * GRAD_LAMBDA[b][1] + lam[b] * GRAD_LAMBDA[a][1]),
                ];
            }
        }
    }
}

/// Constant reference Hessians (all zero for degree 1).
pub fn reference_hessians(degree: usize) -> [[[f64; 2]; 2]; MAX_LOCAL] {
    let mut h = [[[0.0; 2]; 2]; MAX_LOCAL];
    if degree != 2 {
        return h;
    }
    let outer = |a: [f64; 2], b: [f64; 2]| [[a[0] * b[0], a[0] * b[1]], [a[1] * b[0], a[1] * b[1]]];
    for (i, hi) in h.iter_mut().enumerate().take(3) {
        let g = GRAD_LAMBDA[i];
        let o = outer(g, g);
        *hi = [
            [4.0 * o[0][0], 4.0 * o[0][1]],
            [4.0 * o[1][0], 4.0 * o[1][1]],
        ];
    }
    for (k, &(a, b)) in EDGE_PAIRS.iter().enumerate() {
        let ab = outer(GRAD_LAMBDA[a], GRAD_LAMBDA[b]);
        let ba = outer(GRAD_LAMBDA[b], GRAD_LAMBDA[a]);
        for r in 0..2 {
            for c in 0..2 {
                h[3 + k][r][c] = 4.0 * (ab[r][c] + ba[r][c]);
            }
        }
    }
    h
}

/// Values and reference gradients of every nodal basis function at `point`.
pub fn lagrange_basis(
    degree: usize,
    point: [f64; 2],
) -> Result<(Vec<f64>, Vec<[f64; 2]>), FemError> {
    if degree != 1 && degree != 2 {
        return Err(FemError::UnsupportedDegree(degree));
    }
    let tol = 1e-12;
    if point[0] < -tol || point[1] < -tol || point[0] + point[1] > 1.0 + tol {
        return Err(FemError::OutsideReference(point));
    }
    let mut v = [0.0; MAX_LOCAL];
    let mut g = [[0.0; 2]; MAX_LOCAL];
    eval_into(degree, point, &mut v, &mut g);
    let n = local_count(degree);
    Ok((v[..n].to_vec(), g[..n].to_vec()))
}
