//! Residual a posteriori estimators, the time estimator and exact error norms.
//!
//! Every estimator value is a squared quantity. Interior faces are counted
//! once per owning element, each time weighted with that element's diameter.

use thiserror::Error;

use crate::assembly::{
    assemble_form, AssemblyError, ExactFields, FormKind, ParameterSet, SourceTerms, Spaces,
};
use crate::fem::{AffineMap, PhysicalBasis, ScalarSample};
use crate::mesh::{Point, Subdomain};
use crate::timeloop::StateTrajectory;

pub use crate::assembly::galerkin_orthogonality_residual;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("time node {n} is out of range (trajectory has {nodes} nodes)")]
    NodeOutOfRange { n: usize, nodes: usize },
    #[error("the estimator needs at least two time nodes")]
    SingleNode,
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

/// How the norm of a traction jump `w` across a face with unit normal `n` is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum JumpMode {
    /// `|w|^2`
    #[default]
    Traction,
    /// `|w (.) n|_F^2 = (|w|^2 + (w . n)^2) / 2`
    Symmetric,
}

impl JumpMode {
    pub fn norm_sq(self, w: [f64; 2], n: [f64; 2]) -> f64 {
        let ww = w[0] * w[0] + w[1] * w[1];
        match self {
            JumpMode::Traction => ww,
            JumpMode::Symmetric => {
                let wn = w[0] * n[0] + w[1] * n[1];
                0.5 * (ww + wn * wn)
            }
        }
    }
}

impl std::str::FromStr for JumpMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "traction" => Ok(JumpMode::Traction),
            "symmetric" => Ok(JumpMode::Symmetric),
            other => Err(format!(
                "unknown jump mode `{other}` (expected traction or symmetric)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EstimatorOptions {
    pub jump: JumpMode,
    pub include_eta_data: bool,
}

/// One estimator at one time node with its per-triangle split (zero outside the subdomain).
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEstimate {
    pub total: f64,
    pub per_element: Vec<f64>,
}

impl NodeEstimate {
    fn from_elements(per_element: Vec<f64>) -> Self {
        NodeEstimate {
            total: per_element.iter().sum(),
            per_element,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorReport {
    /// Nodes `0..=N_T`.
    pub e_d_n: Vec<NodeEstimate>,
    /// Entry `n - 1` is step `n`.
    pub e_d_dt_n: Vec<NodeEstimate>,
    pub e_j_n: Vec<NodeEstimate>,
    pub e_up_n: Vec<NodeEstimate>,
    pub e_d: f64,
    pub e_d_dt: f64,
    pub e_j: f64,
    pub e_up: f64,
    pub eta_time: f64,
    pub eta_ok: f64,
    pub eta_data: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorReport {
    pub err_d_linf: f64,
    pub err_j_linf: f64,
    pub err_u_l2: f64,
    pub err_j_l2: f64,
    pub err_e: f64,
    pub div_u_l2: f64,
    pub i_eff: f64,
}

/// `eta_ok / ERR_e`
pub fn efficiency_index(eta_ok: f64, err_e: f64) -> f64 {
    eta_ok / err_e
}

type Mat2 = [[f64; 2]; 2];

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm_sq(a: [f64; 2]) -> f64 {
    dot(a, a)
}

fn mat_vec(m: Mat2, v: [f64; 2]) -> [f64; 2] {
    [dot(m[0], v), dot(m[1], v)]
}

/// `2 mu eps(g) + lambda tr(g) I` for a gradient with component rows.
fn stress(g: Mat2, mu: f64, lambda: f64) -> Mat2 {
    let div = g[0][0] + g[1][1];
    let mut s = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            s[i][j] = mu * (g[i][j] + g[j][i]);
        }
        s[i][i] += lambda * div;
    }
    s
}

/// `2 mu eps : eps + lambda div^2`
fn strain_energy(g: Mat2, mu: f64, lambda: f64) -> f64 {
    let div = g[0][0] + g[1][1];
    let off = 0.5 * (g[0][1] + g[1][0]);
    2.0 * mu * (g[0][0] * g[0][0] + g[1][1] * g[1][1] + 2.0 * off * off) + lambda * div * div
}

/// `mu Delta v + (mu + lambda) grad div v` from component Hessians.
fn div_stress(h: [Mat2; 2], mu: f64, lambda: f64) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (i, o) in out.iter_mut().enumerate() {
        let lap = h[i][0][0] + h[i][1][1];
        let grad_div = h[0][i][0] + h[1][i][1];
        *o = mu * lap + (mu + lambda) * grad_div;
    }
    out
}

fn vector_sample(
    map: &crate::fem::DofMap,
    coeffs: &[f64],
    t: usize,
    basis: &PhysicalBasis,
) -> [ScalarSample; 2] {
    [
        map.sample(coeffs, t, 0, basis),
        map.sample(coeffs, t, 1, basis),
    ]
}

fn grad_of(s: &[ScalarSample; 2]) -> Mat2 {
    [s[0].grad, s[1].grad]
}

/// Source evaluation: at one time, or a backward difference quotient.
#[derive(Clone, Copy)]
enum SourceAt {
    Time(f64),
    Quotient { t: f64, t_prev: f64, inv_dt: f64 },
}

impl SourceAt {
    fn elastic(self, s: &dyn SourceTerms, x: Point) -> [f64; 2] {
        match self {
            SourceAt::Time(t) => s.elastic_force(t, x),
            SourceAt::Quotient { t, t_prev, inv_dt } => {
                let (a, b) = (s.elastic_force(t, x), s.elastic_force(t_prev, x));
                [(a[0] - b[0]) * inv_dt, (a[1] - b[1]) * inv_dt]
            }
        }
    }
}

/// Physical points and weights (including the edge length) of the edge rule.
fn edge_points(spaces: &Spaces, e: usize) -> Vec<(Point, f64)> {
    let mesh = &spaces.mesh;
    let edge = &mesh.edges[e];
    let a = mesh.vertices[edge.vertices[0]];
    let b = mesh.vertices[edge.vertices[1]];
    spaces
        .line
        .points
        .iter()
        .zip(&spaces.line.weights)
        .map(|(&s, &w)| {
            (
                [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])],
                w * edge.length,
            )
        })
        .collect()
}

struct Ctx<'a> {
    spaces: &'a Spaces,
    params: &'a ParameterSet,
    h: Vec<f64>,
    maps: Vec<AffineMap>,
}

impl<'a> Ctx<'a> {
    fn new(spaces: &'a Spaces, params: &'a ParameterSet) -> Self {
        let mesh = &spaces.mesh;
        let h = (0..mesh.num_triangles())
            .map(|t| mesh.element_geometry(t).map(|g| g.h).unwrap_or(0.0))
            .collect();
        let maps = (0..mesh.num_triangles())
            .map(|t| AffineMap::new(mesh.triangle_points(t)))
            .collect();
        Ctx {
            spaces,
            params,
            h,
            maps,
        }
    }

    fn basis(&self, degree: usize, t: usize, x: Point) -> PhysicalBasis {
        let m = &self.maps[t];
        PhysicalBasis::at(degree, m, m.inverse(x))
    }

    fn volume_points(&self, t: usize) -> impl Iterator<Item = ([f64; 2], Point, f64)> + '_ {
        let m = self.maps[t];
        let jac = m.det.abs();
        self.spaces
            .quad
            .points
            .iter()
            .zip(&self.spaces.quad.weights)
            .map(move |(&xi, &w)| (xi, m.map(xi), w * jac))
    }

    fn n_triangles(&self) -> usize {
        self.spaces.mesh.num_triangles()
    }

    /// Displacement residual terms for `(d, p_J)` against the source evaluation `src`.
    fn elastic_residual(
        &self,
        d: &[f64],
        p: &[f64],
        sources: &dyn SourceTerms,
        src: SourceAt,
        jump: JumpMode,
    ) -> Vec<f64> {
        let sp = self.spaces;
        let prm = self.params;
        let (dm, pm) = (&sp.displacement, &sp.pressure);
        let nj = prm.n_networks();
        let e = prm.exchanging();
        let mut vol = vec![0.0; self.n_triangles()];
        let mut face = vec![0.0; self.n_triangles()];
        for &t in &dm.elements {
            for (xi, x, w) in self.volume_points(t) {
                let b = PhysicalBasis::at(2, &self.maps[t], xi);
                let ds = vector_sample(dm, d, t, &b);
                let ds_div = div_stress([ds[0].hess, ds[1].hess], prm.mu_el, prm.lambda);
                let mut r = src.elastic(sources, x);
                r[0] += ds_div[0];
                r[1] += ds_div[1];
                for j in 0..nj {
                    let g = pm.sample(p, t, j, &b).grad;
                    r[0] -= prm.networks[j].alpha * g[0];
                    r[1] -= prm.networks[j].alpha * g[1];
                }
                vol[t] += w * norm_sq(r);
            }
        }
        let traction = |t: usize, x: Point, n: [f64; 2]| {
            let b = self.basis(2, t, x);
            mat_vec(
                stress(grad_of(&vector_sample(dm, d, t, &b)), prm.mu_el, prm.lambda),
                n,
            )
        };
        for &ei in &sp.facets.interior_elastic {
            let edge = &sp.mesh.edges[ei];
            let (t1, t2) = (edge.owners[0].triangle, edge.owners[1].triangle);
            for (x, w) in edge_points(sp, ei) {
                let a = traction(t1, x, edge.normal);
                let c = traction(t2, x, edge.normal);
                let j = jump.norm_sq([a[0] - c[0], a[1] - c[1]], edge.normal);
                face[t1] += self.h[t1] * w * j;
                face[t2] += self.h[t2] * w * j;
            }
        }
        for (k, &ei) in sp.facets.interface.iter().enumerate() {
            let n = sp.facets.interface_normals[k].0;
            let t = sp.mesh.edges[ei]
                .owner_in(&sp.mesh, Subdomain::Elastic)
                .expect("elastic owner")
                .triangle;
            for (x, w) in edge_points(sp, ei) {
                let b = self.basis(2, t, x);
                let sn = mat_vec(
                    stress(grad_of(&vector_sample(dm, d, t, &b)), prm.mu_el, prm.lambda),
                    n,
                );
                let mut coef = 0.0;
                for j in 0..nj {
                    coef += prm.networks[j].alpha * pm.sample(p, t, j, &b).value;
                }
                coef -= pm.sample(p, t, e, &b).value;
                let r = [-sn[0] + coef * n[0], -sn[1] + coef * n[1]];
                face[t] += self.h[t] * w * norm_sq(r);
            }
        }
        (0..self.n_triangles())
            .map(|t| self.h[t] * self.h[t] * vol[t] + face[t])
            .collect()
    }

    /// Network residual terms at step `n`.
    fn network_residual(
        &self,
        tr: &StateTrajectory,
        n: usize,
        sources: &dyn SourceTerms,
    ) -> Vec<f64> {
        let sp = self.spaces;
        let prm = self.params;
        let (dm, pm, um) = (&sp.displacement, &sp.pressure, &sp.velocity);
        let nj = prm.n_networks();
        let inv_dt = 1.0 / tr.grid.dt;
        let t_n = tr.grid.time(n);
        let p = tr.pressure(n);
        let dp: Vec<f64> = p
            .iter()
            .zip(tr.pressure(n - 1))
            .map(|(a, b)| (a - b) * inv_dt)
            .collect();
        let dd: Vec<f64> = tr
            .displacement(n)
            .iter()
            .zip(tr.displacement(n - 1))
            .map(|(a, b)| (a - b) * inv_dt)
            .collect();
        let u = tr.velocity(n);
        let mut vol = vec![0.0; self.n_triangles()];
        let mut face = vec![0.0; self.n_triangles()];
        let mut g = vec![0.0; nj];
        let mut pv = vec![0.0; nj];
        for &t in &pm.elements {
            for (xi, x, w) in self.volume_points(t) {
                let b = PhysicalBasis::at(2, &self.maps[t], xi);
                sources.network_sources(t_n, x, &mut g);
                let dds = vector_sample(dm, &dd, t, &b);
                let div_dd = dds[0].grad[0] + dds[1].grad[1];
                for (j, v) in pv.iter_mut().enumerate() {
                    *v = pm.sample(p, t, j, &b).value;
                }
                let mut sum = 0.0;
                for j in 0..nj {
                    let net = &prm.networks[j];
                    let s = pm.sample(p, t, j, &b);
                    let mut r = g[j] - net.storage * pm.sample(&dp, t, j, &b).value
                        + net.conductivity() * s.laplacian()
                        - net.alpha * div_dd
                        - net.external_exchange * s.value;
                    for k in (0..nj).filter(|&k| k != j) {
                        r -= prm.exchange[j][k] * (pv[j] - pv[k]);
                    }
                    sum += r * r;
                }
                vol[t] += w * sum;
            }
        }
        for &ei in &sp.facets.interior_elastic {
            let edge = &sp.mesh.edges[ei];
            let (t1, t2) = (edge.owners[0].triangle, edge.owners[1].triangle);
            for (x, w) in edge_points(sp, ei) {
                let (b1, b2) = (self.basis(2, t1, x), self.basis(2, t2, x));
                let mut sum = 0.0;
                for j in 0..nj {
                    let k = prm.networks[j].conductivity();
                    let jump = k
                        * (dot(pm.sample(p, t1, j, &b1).grad, edge.normal)
                            - dot(pm.sample(p, t2, j, &b2).grad, edge.normal));
                    sum += jump * jump;
                }
                face[t1] += self.h[t1] * w * sum;
                face[t2] += self.h[t2] * w * sum;
            }
        }
        for (k, &ei) in sp.facets.interface.iter().enumerate() {
            let (n_el, n_f) = sp.facets.interface_normals[k];
            let edge = &sp.mesh.edges[ei];
            let te = edge
                .owner_in(&sp.mesh, Subdomain::Elastic)
                .expect("elastic owner")
                .triangle;
            let tf = edge
                .owner_in(&sp.mesh, Subdomain::Fluid)
                .expect("fluid owner")
                .triangle;
            for (x, w) in edge_points(sp, ei) {
                let be = self.basis(2, te, x);
                let bf = self.basis(2, tf, x);
                let mut r = 0.0;
                for j in 0..nj {
                    r -= prm.networks[j].conductivity() * dot(pm.sample(p, te, j, &be).grad, n_el);
                }
                let ddv = vector_sample(dm, &dd, te, &be);
                let uv = vector_sample(um, u, tf, &bf);
                r += dot([ddv[0].value, ddv[1].value], n_el) + dot([uv[0].value, uv[1].value], n_f);
                face[te] += self.h[te] * w * r * r;
            }
        }
        (0..self.n_triangles())
            .map(|t| self.h[t] * self.h[t] * vol[t] + face[t])
            .collect()
    }

    /// Stokes residual terms at node `n`, including the unweighted divergence term.
    fn fluid_residual(
        &self,
        tr: &StateTrajectory,
        n: usize,
        sources: &dyn SourceTerms,
        jump: JumpMode,
    ) -> Vec<f64> {
        let sp = self.spaces;
        let prm = self.params;
        let (um, qm, pm) = (&sp.velocity, &sp.stokes_pressure, &sp.pressure);
        let t_n = tr.grid.time(n);
        let u = tr.velocity(n);
        let q = tr.stokes_pressure(n);
        let pj = tr.pressure(n);
        let e = prm.exchanging();
        let mu = prm.mu_f;
        let mut vol = vec![0.0; self.n_triangles()];
        let mut div = vec![0.0; self.n_triangles()];
        let mut face = vec![0.0; self.n_triangles()];
        for &t in &um.elements {
            for (xi, x, w) in self.volume_points(t) {
                let b2 = PhysicalBasis::at(2, &self.maps[t], xi);
                let b1 = PhysicalBasis::at(1, &self.maps[t], xi);
                let us = vector_sample(um, u, t, &b2);
                let dt = div_stress([us[0].hess, us[1].hess], mu, 0.0);
                let gq = qm.sample(q, t, 0, &b1).grad;
                let f = sources.fluid_force(t_n, x);
                let r = [f[0] + dt[0] - gq[0], f[1] + dt[1] - gq[1]];
                vol[t] += w * norm_sq(r);
                let d = us[0].grad[0] + us[1].grad[1];
                div[t] += w * d * d;
            }
        }
        let traction = |t: usize, x: Point, n: [f64; 2]| {
            let b = self.basis(2, t, x);
            mat_vec(stress(grad_of(&vector_sample(um, u, t, &b)), mu, 0.0), n)
        };
        for &ei in &sp.facets.interior_fluid {
            let edge = &sp.mesh.edges[ei];
            let (t1, t2) = (edge.owners[0].triangle, edge.owners[1].triangle);
            for (x, w) in edge_points(sp, ei) {
                let a = traction(t1, x, edge.normal);
                let c = traction(t2, x, edge.normal);
                let j = jump.norm_sq([a[0] - c[0], a[1] - c[1]], edge.normal);
                face[t1] += self.h[t1] * w * j;
                face[t2] += self.h[t2] * w * j;
            }
        }
        for (k, &ei) in sp.facets.interface.iter().enumerate() {
            let n_f = sp.facets.interface_normals[k].1;
            let edge = &sp.mesh.edges[ei];
            let te = edge
                .owner_in(&sp.mesh, Subdomain::Elastic)
                .expect("elastic owner")
                .triangle;
            let tf = edge
                .owner_in(&sp.mesh, Subdomain::Fluid)
                .expect("fluid owner")
                .triangle;
            for (x, w) in edge_points(sp, ei) {
                let tn = traction(tf, x, n_f);
                let qv = qm.sample(q, tf, 0, &self.basis(1, tf, x)).value;
                let pe = pm.sample(pj, te, e, &self.basis(2, te, x)).value;
                let r = [-tn[0] + (qv - pe) * n_f[0], -tn[1] + (qv - pe) * n_f[1]];
                face[tf] += self.h[tf] * w * norm_sq(r);
            }
        }
        (0..self.n_triangles())
            .map(|t| self.h[t] * self.h[t] * vol[t] + div[t] + face[t])
            .collect()
    }
}

fn check_node(tr: &StateTrajectory, n: usize) -> Result<(), EstimatorError> {
    if n >= tr.states.len() {
        return Err(EstimatorError::NodeOutOfRange {
            n,
            nodes: tr.states.len(),
        });
    }
    Ok(())
}

/// Displacement estimator at node `n`, sources sampled at `t^n`.
pub fn estimate_e_d(
    tr: &StateTrajectory,
    n: usize,
    sources: &dyn SourceTerms,
    params: &ParameterSet,
    jump: JumpMode,
) -> Result<NodeEstimate, EstimatorError> {
    check_node(tr, n)?;
    let ctx = Ctx::new(&tr.spaces, params);
    let src = SourceAt::Time(tr.grid.time(n));
    Ok(NodeEstimate::from_elements(ctx.elastic_residual(
        tr.displacement(n),
        tr.pressure(n),
        sources,
        src,
        jump,
    )))
}

/// Difference-quotient displacement estimator: the aggregate
/// `(sum_n dt sqrt(E_n))^2` and the per-step values.
pub fn estimate_e_d_dt(
    tr: &StateTrajectory,
    sources: &dyn SourceTerms,
    params: &ParameterSet,
    jump: JumpMode,
) -> Result<(f64, Vec<NodeEstimate>), EstimatorError> {
    if tr.states.len() < 2 {
        return Err(EstimatorError::SingleNode);
    }
    let ctx = Ctx::new(&tr.spaces, params);
    let dt = tr.grid.dt;
    let inv_dt = 1.0 / dt;
    let mut steps = Vec::with_capacity(tr.states.len() - 1);
    for n in 1..tr.states.len() {
        let quotient = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| (x - y) * inv_dt).collect()
        };
        let dd = quotient(tr.displacement(n), tr.displacement(n - 1));
        let dp = quotient(tr.pressure(n), tr.pressure(n - 1));
        let src = SourceAt::Quotient {
            t: tr.grid.time(n),
            t_prev: tr.grid.time(n - 1),
            inv_dt,
        };
        steps.push(NodeEstimate::from_elements(
            ctx.elastic_residual(&dd, &dp, sources, src, jump),
        ));
    }
    let root_sum: f64 = steps.iter().map(|s| dt * s.total.sqrt()).sum();
    Ok((root_sum * root_sum, steps))
}

/// Network estimator at step `n >= 1`.
pub fn estimate_e_j(
    tr: &StateTrajectory,
    n: usize,
    sources: &dyn SourceTerms,
    params: &ParameterSet,
) -> Result<NodeEstimate, EstimatorError> {
    check_node(tr, n)?;
    if n == 0 {
        return Err(EstimatorError::NodeOutOfRange {
            n,
            nodes: tr.states.len(),
        });
    }
    let ctx = Ctx::new(&tr.spaces, params);
    Ok(NodeEstimate::from_elements(
        ctx.network_residual(tr, n, sources),
    ))
}

/// Stokes estimator at node `n`.
pub fn estimate_e_up(
    tr: &StateTrajectory,
    n: usize,
    sources: &dyn SourceTerms,
    params: &ParameterSet,
    jump: JumpMode,
) -> Result<NodeEstimate, EstimatorError> {
    check_node(tr, n)?;
    let ctx = Ctx::new(&tr.spaces, params);
    Ok(NodeEstimate::from_elements(
        ctx.fluid_residual(tr, n, sources, jump),
    ))
}

/// `sum_n (dt / 3) a~_J(p^n - p^{n-1}, p^n - p^{n-1})`, using the assembled form.
pub fn eta_time(tr: &StateTrajectory, params: &ParameterSet) -> Result<f64, EstimatorError> {
    if tr.states.len() < 2 {
        return Err(EstimatorError::SingleNode);
    }
    let sp = &tr.spaces;
    let a = assemble_form(
        FormKind::NetworkDiffusion,
        &sp.pressure,
        &sp.pressure,
        params,
        &sp.mesh,
        &sp.quad,
    )?;
    let mut total = 0.0;
    for n in 1..tr.states.len() {
        let diff: Vec<f64> = tr
            .pressure(n)
            .iter()
            .zip(tr.pressure(n - 1))
            .map(|(a, b)| a - b)
            .collect();
        total += tr.grid.dt / 3.0 * a.bilinear(&diff, &diff);
    }
    Ok(total)
}

const GAUSS4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// `||p_h - pi0 p_h||^2` in time by 4-point Gauss quadrature, with the spatial
/// norm integrated pointwise rather than through the assembled matrix.
pub fn eta_time_quadrature(
    tr: &StateTrajectory,
    params: &ParameterSet,
) -> Result<f64, EstimatorError> {
    if tr.states.len() < 2 {
        return Err(EstimatorError::SingleNode);
    }
    let ctx = Ctx::new(&tr.spaces, params);
    let dt = tr.grid.dt;
    let mut total = 0.0;
    for n in 1..tr.states.len() {
        let diff: Vec<f64> = tr
            .pressure(n)
            .iter()
            .zip(tr.pressure(n - 1))
            .map(|(a, b)| a - b)
            .collect();
        let energy = network_energy(&ctx, &diff, None, 0.0);
        for &(s, w) in &GAUSS4 {
            // p_h(t) - p^n = (t - t^n) / dt (p^n - p^{n-1}), with (t - t^n) / dt = (s - 1) / 2
            let theta = 0.5 * (s - 1.0);
            total += 0.5 * w * dt * theta * theta * energy;
        }
    }
    Ok(total)
}

/// `a~_J(e, e)` with `e = exact(t) - p`, or `-p` when `exact` is `None`.
fn network_energy(ctx: &Ctx, p: &[f64], exact: Option<&dyn ExactFields>, t: f64) -> f64 {
    let pm = &ctx.spaces.pressure;
    let prm = ctx.params;
    let nj = prm.n_networks();
    let mut ev = vec![0.0; nj];
    let mut eg = vec![[0.0; 2]; nj];
    let mut total = 0.0;
    for &k in &pm.elements {
        for (xi, x, w) in ctx.volume_points(k) {
            let b = PhysicalBasis::at(2, &ctx.maps[k], xi);
            if let Some(ex) = exact {
                ex.pressures(t, x, &mut ev);
                ex.pressure_grads(t, x, &mut eg);
            }
            let e: Vec<(f64, [f64; 2])> = (0..nj)
                .map(|j| {
                    let s = pm.sample(p, k, j, &b);
                    (
                        ev[j] - s.value,
                        [eg[j][0] - s.grad[0], eg[j][1] - s.grad[1]],
                    )
                })
                .collect();
            let mut v = 0.0;
            for j in 0..nj {
                let net = &prm.networks[j];
                v += net.conductivity() * norm_sq(e[j].1) + net.external_exchange * e[j].0 * e[j].0;
                for k2 in (0..nj).filter(|&k2| k2 != j) {
                    v += prm.exchange[j][k2] * (e[j].0 - e[k2].0) * e[j].0;
                }
            }
            total += w * v;
        }
    }
    total
}

fn storage_energy(ctx: &Ctx, p: &[f64], exact: &dyn ExactFields, t: f64) -> f64 {
    let pm = &ctx.spaces.pressure;
    let nj = ctx.params.n_networks();
    let mut ev = vec![0.0; nj];
    let mut total = 0.0;
    for &k in &pm.elements {
        for (xi, x, w) in ctx.volume_points(k) {
            let b = PhysicalBasis::at(2, &ctx.maps[k], xi);
            exact.pressures(t, x, &mut ev);
            for (j, net) in ctx.params.networks.iter().enumerate() {
                let e = ev[j] - pm.sample(p, k, j, &b).value;
                total += w * net.storage * e * e;
            }
        }
    }
    total
}

fn vector_energy(ctx: &Ctx, sub: Subdomain, v: &[f64], exact: &dyn ExactFields, t: f64) -> f64 {
    let (map, mu, lambda) = match sub {
        Subdomain::Elastic => (
            &ctx.spaces.displacement,
            ctx.params.mu_el,
            ctx.params.lambda,
        ),
        Subdomain::Fluid => (&ctx.spaces.velocity, ctx.params.mu_f, 0.0),
    };
    let mut total = 0.0;
    for &k in &map.elements {
        for (xi, x, w) in ctx.volume_points(k) {
            let b = PhysicalBasis::at(2, &ctx.maps[k], xi);
            let g = grad_of(&vector_sample(map, v, k, &b));
            let ge = match sub {
                Subdomain::Elastic => exact.displacement_grad(t, x),
                Subdomain::Fluid => exact.velocity_grad(t, x),
            };
            let e = [
                [ge[0][0] - g[0][0], ge[0][1] - g[0][1]],
                [ge[1][0] - g[1][0], ge[1][1] - g[1][1]],
            ];
            total += w * strain_energy(e, mu, lambda);
        }
    }
    total
}

fn divergence_sq(ctx: &Ctx, u: &[f64]) -> f64 {
    let um = &ctx.spaces.velocity;
    let mut total = 0.0;
    for &k in &um.elements {
        for (xi, _, w) in ctx.volume_points(k) {
            let b = PhysicalBasis::at(2, &ctx.maps[k], xi);
            let s = vector_sample(um, u, k, &b);
            let d = s[0].grad[0] + s[1].grad[1];
            total += w * d * d;
        }
    }
    total
}

/// Energy-norm errors against `exact`. Supremum terms use the time nodes; integrals
/// use two Gauss points per step with the discrete field linear in time.
pub fn error_norms(
    tr: &StateTrajectory,
    exact: &dyn ExactFields,
    params: &ParameterSet,
    eta_ok: f64,
) -> ErrorReport {
    let ctx = Ctx::new(&tr.spaces, params);
    let mut r = ErrorReport::default();
    for n in 0..tr.states.len() {
        let t = tr.grid.time(n);
        r.err_d_linf = r.err_d_linf.max(vector_energy(
            &ctx,
            Subdomain::Elastic,
            tr.displacement(n),
            exact,
            t,
        ));
        r.err_j_linf = r
            .err_j_linf
            .max(storage_energy(&ctx, tr.pressure(n), exact, t));
    }
    let g = 0.5 / 3f64.sqrt();
    let dt = tr.grid.dt;
    for n in 1..tr.states.len() {
        for theta in [0.5 - g, 0.5 + g] {
            let t = tr.grid.time(n - 1) + theta * dt;
            let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (1.0 - theta) * x + theta * y)
                    .collect()
            };
            let u = lerp(tr.velocity(n - 1), tr.velocity(n));
            let p = lerp(tr.pressure(n - 1), tr.pressure(n));
            r.err_u_l2 += 0.5 * dt * vector_energy(&ctx, Subdomain::Fluid, &u, exact, t);
            r.err_j_l2 += 0.5 * dt * network_energy(&ctx, &p, Some(exact), t);
            r.div_u_l2 += 0.5 * dt * divergence_sq(&ctx, &u);
        }
    }
    r.err_e = r.err_d_linf + r.err_j_linf + r.err_u_l2 + r.err_j_l2;
    r.i_eff = efficiency_index(eta_ok, r.err_e);
    r
}

/// Initial-data terms: energy norms of the interpolation errors of `d_0`, `u_0`, `p_J0`.
pub fn eta_data(tr: &StateTrajectory, initial: &dyn ExactFields, params: &ParameterSet) -> f64 {
    let ctx = Ctx::new(&tr.spaces, params);
    vector_energy(&ctx, Subdomain::Elastic, tr.displacement(0), initial, 0.0)
        + vector_energy(&ctx, Subdomain::Fluid, tr.velocity(0), initial, 0.0)
        + network_energy(&ctx, tr.pressure(0), Some(initial), 0.0)
}

/// All estimators of a trajectory. `initial` is only used for `eta_data`.
pub fn estimate(
    tr: &StateTrajectory,
    sources: &dyn SourceTerms,
    params: &ParameterSet,
    opts: &EstimatorOptions,
    initial: Option<&dyn ExactFields>,
) -> Result<EstimatorReport, EstimatorError> {
    if tr.states.len() < 2 {
        return Err(EstimatorError::SingleNode);
    }
    let dt = tr.grid.dt;
    let nodes = tr.states.len();
    let e_d_n = (0..nodes)
        .map(|n| estimate_e_d(tr, n, sources, params, opts.jump))
        .collect::<Result<Vec<_>, _>>()?;
    let (e_d_dt, e_d_dt_n) = estimate_e_d_dt(tr, sources, params, opts.jump)?;
    let e_j_n = (1..nodes)
        .map(|n| estimate_e_j(tr, n, sources, params))
        .collect::<Result<Vec<_>, _>>()?;
    let e_up_n = (1..nodes)
        .map(|n| estimate_e_up(tr, n, sources, params, opts.jump))
        .collect::<Result<Vec<_>, _>>()?;
    let e_d = e_d_n.iter().map(|e| e.total).fold(0.0, f64::max);
    let e_j = e_j_n.iter().map(|e| dt * e.total).sum();
    let e_up = e_up_n.iter().map(|e| dt * e.total).sum();
    let eta_data = match (opts.include_eta_data, initial) {
        (true, Some(init)) => Some(eta_data(tr, init, params)),
        _ => None,
    };
    Ok(EstimatorReport {
        eta_time: eta_time(tr, params)?,
        eta_ok: e_d + e_d_dt + e_j + e_up,
        e_d_n,
        e_d_dt_n,
        e_j_n,
        e_up_n,
        e_d,
        e_d_dt,
        e_j,
        e_up,
        eta_data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{FieldData, ZeroData};
    use crate::mesh::build_two_square_mesh;
    use crate::mms::Manufactured;
    use crate::timeloop::{run_time_loop, TimeGrid};
    use std::sync::Arc;

    fn spaces(n: usize) -> Arc<Spaces> {
        Arc::new(Spaces::new(build_two_square_mesh(n).unwrap(), 1).unwrap())
    }

    fn trajectory_from(spaces: Arc<Spaces>, dt: f64, states: Vec<Vec<f64>>) -> StateTrajectory {
        let steps = states.len() - 1;
        let grid = TimeGrid {
            t_final: dt * steps as f64,
            dt,
            steps,
        };
        StateTrajectory {
            layout: spaces.layout(),
            spaces,
            grid,
            states,
            diagnostics: Vec::new(),
        }
    }

    fn interpolated(
        s: &Arc<Spaces>,
        data: &dyn FieldData,
        times: &[f64],
        dt: f64,
    ) -> StateTrajectory {
        let states = times.iter().map(|&t| s.interpolate(data, t)).collect();
        trajectory_from(Arc::clone(s), dt, states)
    }

    struct Linear;
    impl FieldData for Linear {
        fn displacement(&self, _: f64, x: Point) -> [f64; 2] {
            [0.3 * x[0] - x[1], 2.0 * x[0] + 0.1 * x[1]]
        }
        fn pressures(&self, _: f64, _: Point, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn velocity(&self, _: f64, x: Point) -> [f64; 2] {
            [x[0] + x[1], -x[1]]
        }
        fn stokes_pressure(&self, _: f64, _: Point) -> f64 {
            0.0
        }
    }

    #[test]
    fn zero_state_gives_zero_estimators() {
        let s = spaces(2);
        let p = ParameterSet::single_network(0.5);
        let tr = interpolated(&s, &ZeroData, &[0.0, 1.0, 2.0], 1.0);
        let r = estimate(&tr, &ZeroData, &p, &EstimatorOptions::default(), None).unwrap();
        assert_eq!(
            (r.e_d, r.e_d_dt, r.e_j, r.e_up, r.eta_time, r.eta_ok),
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn linear_displacement_has_no_interior_jumps() {
        let s = spaces(3);
        let p = ParameterSet::single_network(0.5);
        let tr = interpolated(&s, &Linear, &[0.0], 1.0);
        let ctx = Ctx::new(&s, &p);
        // no interface term: isolate the interior faces by dropping the interface
        let mut sp = (*s).clone();
        sp.facets.interface.clear();
        sp.facets.interface_normals.clear();
        let ctx2 = Ctx { spaces: &sp, ..ctx };
        let v = ctx2.elastic_residual(
            tr.displacement(0),
            tr.pressure(0),
            &ZeroData,
            SourceAt::Time(0.0),
            JumpMode::Traction,
        );
        assert!(
            v.iter().all(|&x| x.abs() < 1e-22),
            "{:?}",
            v.iter().fold(0.0f64, |a, &b| a.max(b))
        );
    }

    #[test]
    fn time_constant_trajectory_has_zero_quotient_estimator() {
        let s = spaces(2);
        let p = ParameterSet::single_network(0.5);
        let tr = interpolated(&s, &Linear, &[0.0, 0.0, 0.0], 0.5);
        let (agg, steps) = estimate_e_d_dt(&tr, &ZeroData, &p, JumpMode::Traction).unwrap();
        assert_eq!(agg, 0.0);
        assert_eq!(steps.len(), 2);
        assert_eq!(eta_time(&tr, &p).unwrap(), 0.0);
    }

    #[test]
    fn quotient_estimator_is_quadratic_in_the_state() {
        let s = spaces(2);
        let p = ParameterSet::single_network(0.5);
        let m = Manufactured::unit(0.5).unwrap();
        let a = interpolated(&s, &m, &[0.0, 0.3], 1.0);
        let mut b = a.clone();
        b.states[1].iter_mut().for_each(|v| *v *= 2.0);
        b.states[0].iter_mut().for_each(|v| *v *= 2.0);
        let (_, sa) = estimate_e_d_dt(&a, &ZeroData, &p, JumpMode::Traction).unwrap();
        let (_, sb) = estimate_e_d_dt(&b, &ZeroData, &p, JumpMode::Traction).unwrap();
        assert!((sb[0].total - 4.0 * sa[0].total).abs() <= 1e-12 * sb[0].total);
    }

    #[test]
    fn constant_pressure_with_matching_source_has_zero_interior_residual() {
        struct Src;
        impl SourceTerms for Src {
            fn elastic_force(&self, _: f64, _: Point) -> [f64; 2] {
                [0.0; 2]
            }
            fn network_sources(&self, _: f64, _: Point, out: &mut [f64]) {
                // c (3 - 1) / dt + beta_e * 3 with dt = 1
                out[0] = 2.0 + 3.0;
            }
            fn fluid_force(&self, _: f64, _: Point) -> [f64; 2] {
                [0.0; 2]
            }
        }
        struct P(f64);
        impl FieldData for P {
            fn displacement(&self, _: f64, _: Point) -> [f64; 2] {
                [0.0; 2]
            }
            fn pressures(&self, _: f64, _: Point, out: &mut [f64]) {
                out[0] = self.0;
            }
            fn velocity(&self, _: f64, _: Point) -> [f64; 2] {
                [0.0; 2]
            }
            fn stokes_pressure(&self, _: f64, _: Point) -> f64 {
                0.0
            }
        }
        let s = spaces(2);
        let p = ParameterSet::single_network(0.5);
        let states = vec![s.interpolate(&P(1.0), 0.0), s.interpolate(&P(3.0), 0.0)];
        let tr = trajectory_from(Arc::clone(&s), 1.0, states);
        let e = estimate_e_j(&tr, 1, &Src, &p).unwrap();
        assert!(e.total < 1e-20, "{}", e.total);
    }

    #[test]
    fn exact_velocity_interpolant_is_nearly_divergence_free() {
        let m = Manufactured::unit(0.5).unwrap();
        let div = |n: usize| {
            let s = spaces(n);
            let ctx = Ctx::new(&s, &m.params);
            let u = s.interpolate(&m, 0.0);
            divergence_sq(&ctx, &u[s.layout().velocity.clone()])
        };
        let (coarse, fine) = (div(8), div(16));
        // interpolation error only: O(h^4) in the squared norm
        assert!(fine < 1e-3 && coarse / fine > 12.0, "{coarse} {fine}");
    }

    #[test]
    fn node_range_errors() {
        let s = spaces(1);
        let p = ParameterSet::single_network(0.5);
        let tr = interpolated(&s, &ZeroData, &[0.0, 1.0], 1.0);
        assert!(matches!(
            estimate_e_d(&tr, 2, &ZeroData, &p, JumpMode::Traction),
            Err(EstimatorError::NodeOutOfRange { .. })
        ));
        assert!(estimate_e_j(&tr, 0, &ZeroData, &p).is_err());
        let single = interpolated(&s, &ZeroData, &[0.0], 1.0);
        assert!(matches!(
            estimate_e_d_dt(&single, &ZeroData, &p, JumpMode::Traction),
            Err(EstimatorError::SingleNode)
        ));
    }

    #[test]
    fn eta_time_closed_form_matches_quadrature() {
        let m = Manufactured::unit(0.5).unwrap();
        let s = spaces(3);
        let tr = interpolated(&s, &m, &[0.0, 0.1, 0.2, 0.3], 0.1);
        let a = eta_time(&tr, &m.params).unwrap();
        let b = eta_time_quadrature(&tr, &m.params).unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() <= 1e-12 * a, "{a} {b}");
    }

    #[test]
    fn eta_time_for_a_unit_jump() {
        let s = spaces(2);
        let p = ParameterSet::single_network(0.5);
        let sp = &s;
        let a = assemble_form(
            FormKind::NetworkDiffusion,
            &sp.pressure,
            &sp.pressure,
            &p,
            &sp.mesh,
            &sp.quad,
        )
        .unwrap();
        let m = Manufactured::unit(0.5).unwrap();
        let phi = s.interpolate(&m, 0.0);
        let l = s.layout();
        let norm = a.bilinear(&phi[l.pressure.clone()], &phi[l.pressure.clone()]);
        let mut jump = vec![0.0; l.total()];
        for k in l.pressure.clone() {
            jump[k] = phi[k] / norm.sqrt();
        }
        let dt = 0.25;
        let tr = trajectory_from(Arc::clone(&s), dt, vec![vec![0.0; l.total()], jump]);
        assert!((eta_time(&tr, &p).unwrap() - dt / 3.0).abs() < 1e-14);
    }

    #[test]
    fn interpolant_errors_vanish_for_reproducible_fields() {
        struct Exact;
        impl FieldData for Exact {
            fn displacement(&self, t: f64, x: Point) -> [f64; 2] {
                [x[0] * x[1] + t, x[1] * x[1]]
            }
            fn pressures(&self, t: f64, x: Point, out: &mut [f64]) {
                out[0] = x[0] * x[0] - t;
            }
            fn velocity(&self, t: f64, x: Point) -> [f64; 2] {
                [x[1] * t, x[0]]
            }
            fn stokes_pressure(&self, _: f64, x: Point) -> f64 {
                x[0]
            }
        }
        impl ExactFields for Exact {
            fn displacement_grad(&self, _: f64, x: Point) -> [[f64; 2]; 2] {
                [[x[1], x[0]], [0.0, 2.0 * x[1]]]
            }
            fn pressure_grads(&self, _: f64, x: Point, out: &mut [[f64; 2]]) {
                out[0] = [2.0 * x[0], 0.0];
            }
            fn velocity_grad(&self, t: f64, _: Point) -> [[f64; 2]; 2] {
                [[0.0, t], [1.0, 0.0]]
            }
        }
        let s = spaces(2);
        let p = ParameterSet::single_network(0.5);
        let tr = interpolated(&s, &Exact, &[0.0, 0.5, 1.0], 0.5);
        let r = error_norms(&tr, &Exact, &p, 1.0);
        assert!(r.err_e < 1e-24, "{r:?}");
    }

    #[test]
    fn efficiency_index_arithmetic() {
        assert_eq!(efficiency_index(4.0, 2.0), 2.0);
    }

    #[test]
    fn jump_modes_are_equivalent_within_a_factor_two() {
        let w = [0.3, -1.2];
        let n = [0.6, 0.8];
        let a = JumpMode::Traction.norm_sq(w, n);
        let b = JumpMode::Symmetric.norm_sq(w, n);
        assert!(b <= a && 2.0 * b >= a);
    }

    #[test]
    fn perturbed_solution_breaks_galerkin_orthogonality() {
        let m = Manufactured::unit(0.5).unwrap();
        let s = spaces(2);
        let prev = s.interpolate(&m, 0.0);
        let asm = crate::assembly::StepAssembler::new(&s, &m.params, 1e-7).unwrap();
        let sys = asm.step_system(&s, &prev, 1e-7, &m).unwrap();
        let c = crate::assembly::apply_dirichlet(&sys, &s, &m, 1e-7);
        let mut x = crate::solver::sparse_solve(&c.matrix, &c.rhs).unwrap().x;
        assert!(galerkin_orthogonality_residual(&sys, &x) <= 1e-9);
        let k = (0..x.len()).find(|k| !sys.constrained.contains(k)).unwrap();
        x[k] += 1e-3;
        assert!(galerkin_orthogonality_residual(&sys, &x) > 1e-6);
    }

    #[test]
    fn aggregates_are_sums_of_breakdowns() {
        let m = Manufactured::unit(0.5).unwrap();
        let s = spaces(2);
        let grid = TimeGrid::new(3e-7, 1e-7).unwrap();
        let tr = run_time_loop(Arc::clone(&s), &m.params, grid, &m, &m, &m).unwrap();
        let r = estimate(
            &tr,
            &m,
            &m.params,
            &EstimatorOptions {
                include_eta_data: true,
                ..Default::default()
            },
            Some(&m),
        )
        .unwrap();
        for e in r
            .e_d_n
            .iter()
            .chain(&r.e_j_n)
            .chain(&r.e_up_n)
            .chain(&r.e_d_dt_n)
        {
            assert!(e.per_element.iter().all(|&v| v >= 0.0));
            let sum: f64 = e.per_element.iter().sum();
            assert!((sum - e.total).abs() <= 1e-13 * e.total.max(1e-300));
        }
        let sum = r.e_d + r.e_d_dt + r.e_j + r.e_up;
        assert!((sum - r.eta_ok).abs() <= 1e-13 * r.eta_ok);
        assert!(r.eta_data.unwrap() > 0.0);
    }
}
