//! Gauss rules on the reference triangle `{x, y >= 0, x + y <= 1}` and on `[0, 1]`.
//!
//! Triangle rules are collapsed (Duffy) tensor products of Gauss-Legendre
//! rules. All weights are positive and all points are strictly interior.

use super::FemError;

pub const MAX_ORDER: usize = 10;

#[derive(Clone, Debug)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    /// Weights on the reference triangle; they sum to its area, 1/2.
    pub weights: Vec<f64>,
    pub exactness_degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, f: impl Fn([f64; 2]) -> f64) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(&p, &w)| w * f(p))
            .sum()
    }
}

/// Gauss-Legendre rule on `[0, 1]` with weights summing to one.
#[derive(Clone, Debug)]
pub struct LineRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `m`-point Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration
/// on the three-term recurrence.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gauss rule on `[0, 1]` exact for polynomials up to `order`.
pub fn line_rule(order: usize) -> LineRule {
    let m = order / 2 + 1;
    let (x, w) = gauss_legendre(m);
    LineRule {
        points: x.iter().map(|t| 0.5 * (t + 1.0)).collect(),
        weights: w.iter().map(|w| 0.5 * w).collect(),
    }
}

/// Rule on the reference triangle exact for total degree `order`.
pub fn quadrature_rule(order: usize) -> Result<QuadratureRule, FemError> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(FemError::UnsupportedOrder(order));
    }
    // x = s, y = r (1 - s): integrand degree in s grows by one through the Jacobian
    let m = (order + 2).div_ceil(2);
    let (x, w) = gauss_legendre(m);
    let s: Vec<f64> = x.iter().map(|t| 0.5 * (t + 1.0)).collect();
    let ws: Vec<f64> = w.iter().map(|w| 0.5 * w).collect();
    let mut points = Vec::with_capacity(m * m);
    let mut weights = Vec::with_capacity(m * m);
    for (i, &si) in s.iter().enumerate() {
        for (j, &rj) in s.iter().enumerate() {
            points.push([si, rj * (1.0 - si)]);
            weights.push(ws[i] * ws[j] * (1.0 - si));
        }
    }
    Ok(QuadratureRule {
        points,
        weights,
        exactness_degree: order,
    })
}
