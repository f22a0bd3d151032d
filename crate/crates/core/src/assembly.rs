//! Bilinear forms, interface coupling and the monolithic implicit-Euler step system.
//!
//! Unknown ordering: displacement `d`, network pressures `p_J`, Stokes
//! velocity `u`, Stokes pressure `p`. Matrix rows are test functions and
//! columns are trial functions.

use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::fem::{
    build_dof_map, line_rule, quadrature_rule, AffineMap, DofMap, FemError, LineRule,
    PhysicalBasis, QuadratureRule, DEFAULT_QUADRATURE_ORDER,
};
use crate::mesh::{classify_facets, FacetSet, Mesh, MeshError, Point, Subdomain};
use crate::sparse::{CsrMatrix, Triplets};

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("form {form:?}: {reason}")]
    FormSignature { form: FormKind, reason: String },
    #[error("the interface facet set is empty")]
    EmptyInterface,
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("state vector has length {got}, expected {expected}")]
    StateLength { got: usize, expected: usize },
}

/// Coefficients of one fluid network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    /// Biot coefficient `alpha_j`.
    pub alpha: f64,
    /// Storage coefficient `c_j`.
    pub storage: f64,
    /// Permeability `kappa_j`.
    pub permeability: f64,
    /// Fluid viscosity `mu_j`.
    pub viscosity: f64,
    /// External exchange `beta_j^e`.
    pub external_exchange: f64,
}

impl NetworkParams {
    pub fn conductivity(&self) -> f64 {
        self.permeability / self.viscosity
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub mu_el: f64,
    pub lambda: f64,
    pub mu_f: f64,
    /// Networks; the last one exchanges mass across the interface.
    pub networks: Vec<NetworkParams>,
    /// Inter-network exchange `beta[j][k]`.
    pub exchange: Vec<Vec<f64>>,
}

impl ParameterSet {
    /// Single network, every coefficient 1 except the Biot coefficient.
    pub fn single_network(alpha: f64) -> Self {
        ParameterSet {
            mu_el: 1.0,
            lambda: 1.0,
            mu_f: 1.0,
            networks: vec![NetworkParams {
                alpha,
                storage: 1.0,
                permeability: 1.0,
                viscosity: 1.0,
                external_exchange: 1.0,
            }],
            exchange: vec![vec![1.0]],
        }
    }

    pub fn n_networks(&self) -> usize {
        self.networks.len()
    }

    /// Index of the network that exchanges with the Stokes domain.
    pub fn exchanging(&self) -> usize {
        self.networks.len() - 1
    }

    pub fn validate(&self) -> Result<(), AssemblyError> {
        let bad = |m: &str| Err(AssemblyError::Parameter(m.to_string()));
        if self.networks.is_empty() {
            return bad("at least one network is required");
        }
        if !(self.mu_el > 0.0) || !(self.mu_f > 0.0) {
            return bad("mu_el and mu_f must be positive");
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite");
        }
        for (j, n) in self.networks.iter().enumerate() {
            if !(n.permeability > 0.0 && n.viscosity > 0.0) {
                return bad(&format!(
                    "network {j}: permeability and viscosity must be positive"
                ));
            }
            if !(n.storage >= 0.0 && n.external_exchange >= 0.0) {
                return bad(&format!(
                    "network {j}: storage and external exchange must be nonnegative"
                ));
            }
            if !(0.0..=1.0).contains(&n.alpha) {
                return bad(&format!("network {j}: alpha must lie in [0, 1]"));
            }
        }
        let nj = self.networks.len();
        if self.exchange.len() != nj || self.exchange.iter().any(|r| r.len() != nj) {
            return bad("exchange matrix must be #J x #J");
        }
        if self.exchange.iter().flatten().any(|&b| !(b >= 0.0)) {
            return bad("exchange coefficients must be nonnegative");
        }
        Ok(())
    }
}

/// Body forces and network sources.
pub trait SourceTerms: Sync {
    fn elastic_force(&self, t: f64, x: Point) -> [f64; 2];
    /// Writes `g_j(t, x)` for every network.
    fn network_sources(&self, t: f64, x: Point, out: &mut [f64]);
    fn fluid_force(&self, t: f64, x: Point) -> [f64; 2];
}

/// Field values used for initial and Dirichlet data.
pub trait FieldData: Sync {
    fn displacement(&self, t: f64, x: Point) -> [f64; 2];
    fn pressures(&self, t: f64, x: Point, out: &mut [f64]);
    fn velocity(&self, t: f64, x: Point) -> [f64; 2];
    fn stokes_pressure(&self, t: f64, x: Point) -> f64;
}

/// Field data with spatial gradients, used to measure errors. Gradient rows are components.
pub trait ExactFields: FieldData {
    fn displacement_grad(&self, t: f64, x: Point) -> [[f64; 2]; 2];
    fn pressure_grads(&self, t: f64, x: Point, out: &mut [[f64; 2]]);
    fn velocity_grad(&self, t: f64, x: Point) -> [[f64; 2]; 2];
}

/// Identically zero sources and data.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroData;

impl SourceTerms for ZeroData {
    fn elastic_force(&self, _: f64, _: Point) -> [f64; 2] {
        [0.0; 2]
    }
    fn network_sources(&self, _: f64, _: Point, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn fluid_force(&self, _: f64, _: Point) -> [f64; 2] {
        [0.0; 2]
    }
}

impl ExactFields for ZeroData {
    fn displacement_grad(&self, _: f64, _: Point) -> [[f64; 2]; 2] {
        [[0.0; 2]; 2]
    }
    fn pressure_grads(&self, _: f64, _: Point, out: &mut [[f64; 2]]) {
        out.fill([0.0; 2]);
    }
    fn velocity_grad(&self, _: f64, _: Point) -> [[f64; 2]; 2] {
        [[0.0; 2]; 2]
    }
}

impl FieldData for ZeroData {
    fn displacement(&self, _: f64, _: Point) -> [f64; 2] {
        [0.0; 2]
    }
    fn pressures(&self, _: f64, _: Point, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn velocity(&self, _: f64, _: Point) -> [f64; 2] {
        [0.0; 2]
    }
    fn stokes_pressure(&self, _: f64, _: Point) -> f64 {
        0.0
    }
}

/// Index ranges of the four fields inside the monolithic vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub displacement: Range<usize>,
    pub pressure: Range<usize>,
    pub velocity: Range<usize>,
    pub stokes_pressure: Range<usize>,
}

impl BlockLayout {
    pub fn new(nd: usize, np: usize, nu: usize, nq: usize) -> Self {
        BlockLayout {
            displacement: 0..nd,
            pressure: nd..nd + np,
            velocity: nd + np..nd + np + nu,
            stokes_pressure: nd + np + nu..nd + np + nu + nq,
        }
    }

    pub fn total(&self) -> usize {
        self.stokes_pressure.end
    }
}

/// Mesh, facet groups, the four finite element spaces and the quadrature rules.
#[derive(Clone, Debug)]
pub struct Spaces {
    pub mesh: Mesh,
    pub facets: FacetSet,
    /// Degree 2, two components, elastic subdomain.
    pub displacement: DofMap,
    /// Degree 2, one component per network, elastic subdomain.
    pub pressure: DofMap,
    /// Degree 2, two components, fluid subdomain.
    pub velocity: DofMap,
    /// Degree 1, fluid subdomain, no Dirichlet constraint.
    pub stokes_pressure: DofMap,
    pub quad: QuadratureRule,
    pub line: LineRule,
}

impl Spaces {
    pub fn new(mesh: Mesh, n_networks: usize) -> Result<Self, AssemblyError> {
        Self::with_order(mesh, n_networks, DEFAULT_QUADRATURE_ORDER)
    }

    pub fn with_order(mesh: Mesh, n_networks: usize, order: usize) -> Result<Self, AssemblyError> {
        let facets = classify_facets(&mesh)?;
        let mut displacement = build_dof_map(&mesh, Subdomain::Elastic, 2, 2)?;
        displacement.mark_dirichlet(&mesh, &facets.dirichlet_displacement);
        let mut pressure = build_dof_map(&mesh, Subdomain::Elastic, 2, n_networks)?;
        pressure.mark_dirichlet(&mesh, &facets.dirichlet_pressure);
        let mut velocity = build_dof_map(&mesh, Subdomain::Fluid, 2, 2)?;
        velocity.mark_dirichlet(&mesh, &facets.dirichlet_velocity);
        let stokes_pressure = build_dof_map(&mesh, Subdomain::Fluid, 1, 1)?;
        Ok(Spaces {
            quad: quadrature_rule(order)?,
            line: line_rule(order),
            mesh,
            facets,
            displacement,
            pressure,
            velocity,
            stokes_pressure,
        })
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout::new(
            self.displacement.ndofs(),
            self.pressure.ndofs(),
            self.velocity.ndofs(),
            self.stokes_pressure.ndofs(),
        )
    }

    /// Global indices of all Dirichlet-constrained unknowns, ascending.
    pub fn constrained_dofs(&self) -> Vec<usize> {
        let l = self.layout();
        let mut out: Vec<usize> = self
            .displacement
            .dirichlet_dofs()
            .iter()
            .map(|d| l.displacement.start + d)
            .chain(
                self.pressure
                    .dirichlet_dofs()
                    .iter()
                    .map(|d| l.pressure.start + d),
            )
            .chain(
                self.velocity
                    .dirichlet_dofs()
                    .iter()
                    .map(|d| l.velocity.start + d),
            )
            .collect();
        out.sort_unstable();
        out
    }

    /// Nodal interpolant of all four fields at time `t`.
    pub fn interpolate(&self, data: &dyn FieldData, t: f64) -> Vec<f64> {
        let l = self.layout();
        let nj = self.pressure.components;
        let mut x = vec![0.0; l.total()];
        let d =
            crate::fem::interpolate_nodal(&self.displacement, t, |t, p| data.displacement(t, p));
        let pj = crate::fem::interpolate_nodal(&self.pressure, t, |t, p| {
            let mut v = vec![0.0; nj];
            data.pressures(t, p, &mut v);
            v
        });
        let u = crate::fem::interpolate_nodal(&self.velocity, t, |t, p| data.velocity(t, p));
        let q = crate::fem::interpolate_nodal(&self.stokes_pressure, t, |t, p| {
            [data.stokes_pressure(t, p)]
        });
        x[l.displacement.clone()].copy_from_slice(&d);
        x[l.pressure.clone()].copy_from_slice(&pj);
        x[l.velocity.clone()].copy_from_slice(&u);
        x[l.stokes_pressure.clone()].copy_from_slice(&q);
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormKind {
    /// `a_el(d, d~) = (sigma(d), eps(d~))`
    Elastic,
    /// `a_f(u, v) = (tau(u), eps(v))`
    Fluid,
    /// `m_J(p, p~) = sum_j (c_j p_j, p~_j)`
    Storage,
    /// `a~_J`: diffusion plus external and inter-network exchange.
    NetworkDiffusion,
    /// `b_J(p~, d~) = -sum_j (alpha_j p~_j, div d~)`
    BiotCoupling,
    /// `b_f(p~, u~) = -(p~, div u~)`
    StokesDivergence,
}

fn check(form: FormKind, ok: bool, reason: &str) -> Result<(), AssemblyError> {
    if ok {
        Ok(())
    } else {
        Err(AssemblyError::FormSignature {
            form,
            reason: reason.to_string(),
        })
    }
}

fn validate_form(
    form: FormKind,
    trial: &DofMap,
    test: &DofMap,
    nj: usize,
) -> Result<(), AssemblyError> {
    use FormKind::*;
    let (sub, trial_c, test_c) = match form {
        Elastic => (Subdomain::Elastic, 2, 2),
        Fluid => (Subdomain::Fluid, 2, 2),
        Storage | NetworkDiffusion => (Subdomain::Elastic, nj, nj),
        BiotCoupling => (Subdomain::Elastic, nj, 2),
        StokesDivergence => (Subdomain::Fluid, 1, 2),
    };
    check(
        form,
        trial.subdomain == sub && test.subdomain == sub,
        "maps live on the wrong subdomain",
    )?;
    check(
        form,
        trial.components == trial_c,
        "trial component count does not match the form",
    )?;
    check(
        form,
        test.components == test_c,
        "test component count does not match the form",
    )
}

/// Matrix of a bilinear form: entry `(i, j)` is the form evaluated at trial basis `j`, test basis `i`.
pub fn assemble_form(
    form: FormKind,
    trial: &DofMap,
    test: &DofMap,
    params: &ParameterSet,
    mesh: &Mesh,
    quad: &QuadratureRule,
) -> Result<CsrMatrix, AssemblyError> {
    params.validate()?;
    let nj = params.n_networks();
    validate_form(form, trial, test, nj)?;
    let mut trip = Triplets::new(test.ndofs(), trial.ndofs());
    let ntr = trial.local_count();
    let nte = test.local_count();
    let mut local = vec![0.0; trial.components * ntr * test.components * nte];
    let ncol = trial.components * ntr;
    for &t in &test.elements {
        let affine = AffineMap::new(mesh.triangle_points(t));
        let jac = affine.det.abs();
        local.fill(0.0);
        for (&xi, &w) in quad.points.iter().zip(&quad.weights) {
            let wq = w * jac;
            let bt = PhysicalBasis::at(trial.degree, &affine, xi);
            let bs = PhysicalBasis::at(test.degree, &affine, xi);
            accumulate_local(form, params, &bt, &bs, ntr, nte, wq, ncol, &mut local);
        }
        let rows = test.element_dofs(t);
        let cols = trial.element_dofs(t);
        for (r, &gr) in rows.iter().enumerate() {
            for (c, &gc) in cols.iter().enumerate() {
                let v = local[r * ncol + c];
                if v != 0.0 {
                    trip.push(gr, gc, v);
                }
            }
        }
    }
    Ok(trip.to_csr())
}

#[allow(clippy::too_many_arguments)]
fn accumulate_local(
    form: FormKind,
    params: &ParameterSet,
    trial: &PhysicalBasis,
    test: &PhysicalBasis,
    ntr: usize,
    nte: usize,
    wq: f64,
    ncol: usize,
    local: &mut [f64],
) {
    let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
    match form {
        FormKind::Elastic | FormKind::Fluid => {
            // 2 mu eps(phi):eps(psi) + lambda div phi div psi, phi = e_a N_i, psi = e_b M_j
            let (mu, lambda) = match form {
                FormKind::Elastic => (params.mu_el, params.lambda),
                _ => (params.mu_f, 0.0),
            };
            for b in 0..2 {
                for j in 0..nte {
                    let gm = test.grads[j];
                    let row = b * nte + j;
                    for a in 0..2 {
                        for i in 0..ntr {
                            let gn = trial.grads[i];
                            let mut v = mu * gn[b] * gm[a] + lambda * gn[a] * gm[b];
                            if a == b {
                                v += mu * dot(gn, gm);
                            }
                            local[row * ncol + a * ntr + i] += wq * v;
                        }
                    }
                }
            }
        }
        FormKind::Storage => {
            for (jn, net) in params.networks.iter().enumerate() {
                for j in 0..nte {
                    for i in 0..ntr {
                        local[(jn * nte + j) * ncol + jn * ntr + i] +=
                            wq * net.storage * trial.values[i] * test.values[j];
                    }
                }
            }
        }
        FormKind::NetworkDiffusion => {
            let nj = params.n_networks();
            for (jn, net) in params.networks.iter().enumerate() {
                let inter: f64 = (0..nj)
                    .filter(|&k| k != jn)
                    .map(|k| params.exchange[jn][k])
                    .sum();
                let reaction = net.external_exchange + inter;
                for j in 0..nte {
                    let row = jn * nte + j;
                    for i in 0..ntr {
                        let mass = trial.values[i] * test.values[j];
                        local[row * ncol + jn * ntr + i] += wq
                            * (net.conductivity() * dot(trial.grads[i], test.grads[j])
                                + reaction * mass);
                        for k in (0..nj).filter(|&k| k != jn) {
                            local[row * ncol + k * ntr + i] -= wq * params.exchange[jn][k] * mass;
                        }
                    }
                }
            }
        }
        FormKind::BiotCoupling => {
            for (jn, net) in params.networks.iter().enumerate() {
                for b in 0..2 {
                    for j in 0..nte {
                        for i in 0..ntr {
                            local[(b * nte + j) * ncol + jn * ntr + i] -=
                                wq * net.alpha * trial.values[i] * test.grads[j][b];
                        }
                    }
                }
            }
        }
        FormKind::StokesDivergence => {
            for b in 0..2 {
                for j in 0..nte {
                    for i in 0..ntr {
                        local[(b * nte + j) * ncol + i] -= wq * trial.values[i] * test.grads[j][b];
                    }
                }
            }
        }
    }
}

/// `J_side(p~_E, phi) = int_Sigma p~_E phi . n_side`; rows are vector dofs, columns pressure dofs.
pub fn assemble_interface_coupling(
    side: Subdomain,
    pressure: &DofMap,
    vector: &DofMap,
    mesh: &Mesh,
    facets: &FacetSet,
    line: &LineRule,
) -> Result<CsrMatrix, AssemblyError> {
    if facets.interface.is_empty() {
        return Err(AssemblyError::EmptyInterface);
    }
    if pressure.subdomain != Subdomain::Elastic
        || vector.subdomain != side
        || vector.components != 2
    {
        return Err(AssemblyError::Parameter(
            "interface coupling needs an elastic pressure map and a vector map on the given side"
                .into(),
        ));
    }
    let e_comp = pressure.components - 1;
    let mut trip = Triplets::new(vector.ndofs(), pressure.ndofs());
    for (k, &e) in facets.interface.iter().enumerate() {
        let edge = &mesh.edges[e];
        let (n_el, n_f) = facets.interface_normals[k];
        let normal = if side == Subdomain::Elastic {
            n_el
        } else {
            n_f
        };
        let owner_el = edge
            .owner_in(mesh, Subdomain::Elastic)
            .expect("interface edge has an elastic owner");
        let owner_v = edge
            .owner_in(mesh, side)
            .expect("interface edge has an owner on each side");
        let map_p = AffineMap::new(mesh.triangle_points(owner_el.triangle));
        let map_v = AffineMap::new(mesh.triangle_points(owner_v.triangle));
        let a = mesh.vertices[edge.vertices[0]];
        let b = mesh.vertices[edge.vertices[1]];
        let pn = pressure.element_nodes(owner_el.triangle);
        let vn = vector.element_nodes(owner_v.triangle);
        for (&s, &w) in line.points.iter().zip(&line.weights) {
            let x = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
            let wl = w * edge.length;
            let bp = PhysicalBasis::at(pressure.degree, &map_p, map_p.inverse(x));
            let bv = PhysicalBasis::at(vector.degree, &map_v, map_v.inverse(x));
            for (i, &node_v) in vn.iter().enumerate() {
                for c in 0..2 {
                    let row = vector.dof(node_v, c);
                    for (j, &node_p) in pn.iter().enumerate() {
                        let v = wl * bp.values[j] * bv.values[i] * normal[c];
                        if v != 0.0 {
                            trip.push(row, pressure.dof(node_p, e_comp), v);
                        }
                    }
                }
            }
        }
    }
    Ok(trip.to_csr())
}

/// Assembled form matrices shared by every time step.
#[derive(Clone, Debug)]
pub struct FormMatrices {
    pub elastic: CsrMatrix,
    pub fluid: CsrMatrix,
    pub storage: CsrMatrix,
    pub diffusion: CsrMatrix,
    /// Rows displacement, columns pressure.
    pub biot: CsrMatrix,
    /// Rows velocity, columns Stokes pressure.
    pub divergence: CsrMatrix,
    /// Rows displacement, columns pressure.
    pub interface_el: CsrMatrix,
    /// Rows velocity, columns pressure.
    pub interface_f: CsrMatrix,
}

impl FormMatrices {
    pub fn assemble(spaces: &Spaces, params: &ParameterSet) -> Result<Self, AssemblyError> {
        let m = &spaces.mesh;
        let q = &spaces.quad;
        let (d, pj, u, p) = (
            &spaces.displacement,
            &spaces.pressure,
            &spaces.velocity,
            &spaces.stokes_pressure,
        );
        Ok(FormMatrices {
            elastic: assemble_form(FormKind::Elastic, d, d, params, m, q)?,
            fluid: assemble_form(FormKind::Fluid, u, u, params, m, q)?,
            storage: assemble_form(FormKind::Storage, pj, pj, params, m, q)?,
            diffusion: assemble_form(FormKind::NetworkDiffusion, pj, pj, params, m, q)?,
            biot: assemble_form(FormKind::BiotCoupling, pj, d, params, m, q)?,
            divergence: assemble_form(FormKind::StokesDivergence, p, u, params, m, q)?,
            interface_el: assemble_interface_coupling(
                Subdomain::Elastic,
                pj,
                d,
                m,
                &spaces.facets,
                &spaces.line,
            )?,
            interface_f: assemble_interface_coupling(
                Subdomain::Fluid,
                pj,
                u,
                m,
                &spaces.facets,
                &spaces.line,
            )?,
        })
    }
}

/// One step's linear system, before or after Dirichlet constraints.
#[derive(Clone, Debug)]
pub struct AssembledSystem {
    pub matrix: Arc<CsrMatrix>,
    pub rhs: Vec<f64>,
    pub layout: BlockLayout,
    /// Constrained global indices, ascending.
    pub constrained: Vec<usize>,
    /// Boundary values aligned with `constrained` (filled by [`apply_dirichlet`]).
    pub boundary_values: Vec<f64>,
}

/// Builds the time-independent step matrix once; right-hand sides are cheap per step.
#[derive(Clone, Debug)]
pub struct StepAssembler {
    pub layout: BlockLayout,
    pub forms: FormMatrices,
    pub dt: f64,
    matrix: Arc<CsrMatrix>,
    /// `(1/dt) (M p - B^T d - J_el^T d)` restricted to the pressure rows, as one operator on the full state.
    history: CsrMatrix,
    constrained: Vec<usize>,
}

impl StepAssembler {
    pub fn new(spaces: &Spaces, params: &ParameterSet, dt: f64) -> Result<Self, AssemblyError> {
        if !(dt > 0.0) {
            return Err(AssemblyError::NonPositiveStep(dt));
        }
        let forms = FormMatrices::assemble(spaces, params)?;
        let l = spaces.layout();
        let (od, op, ou, oq) = (
            l.displacement.start,
            l.pressure.start,
            l.velocity.start,
            l.stokes_pressure.start,
        );
        let inv = 1.0 / dt;
        let biot_t = forms.biot.transpose();
        let jel_t = forms.interface_el.transpose();
        let jf_t = forms.interface_f.transpose();

        let n = l.total();
        let mut a = Triplets::new(n, n);
        // (i) a_el(d) + b_J(p_J) + J_el(p_E)
        a.add_block(od, od, &forms.elastic, 1.0);
        a.add_block(od, op, &forms.biot, 1.0);
        a.add_block(od, op, &forms.interface_el, 1.0);
        // (ii) (1/dt) m_J(p_J) + a~_J(p_J) - (1/dt) b_J(., d) - (1/dt) J_el(., d) - J_f(., u)
        a.add_block(op, op, &forms.storage, inv);
        a.add_block(op, op, &forms.diffusion, 1.0);
        a.add_block(op, od, &biot_t, -inv);
        a.add_block(op, od, &jel_t, -inv);
        a.add_block(op, ou, &jf_t, -1.0);
        // (iii) a_f(u) + b_f(p) + J_f(p_E)
        a.add_block(ou, ou, &forms.fluid, 1.0);
        a.add_block(ou, oq, &forms.divergence, 1.0);
        a.add_block(ou, op, &forms.interface_f, 1.0);
        // (iv) b_f(., u)
        a.add_block(oq, ou, &forms.divergence.transpose(), 1.0);

        let mut h = Triplets::new(n, n);
        h.add_block(op, op, &forms.storage, inv);
        h.add_block(op, od, &biot_t, -inv);
        h.add_block(op, od, &jel_t, -inv);

        Ok(StepAssembler {
            layout: l,
            dt,
            matrix: Arc::new(a.to_csr()),
            history: h.to_csr(),
            constrained: spaces.constrained_dofs(),
            forms,
        })
    }

    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.matrix
    }

    /// Unconstrained system of the step ending at `t_n`.
    pub fn step_system(
        &self,
        spaces: &Spaces,
        prev: &[f64],
        t_n: f64,
        sources: &dyn SourceTerms,
    ) -> Result<AssembledSystem, AssemblyError> {
        if prev.len() != self.layout.total() {
            return Err(AssemblyError::StateLength {
                got: prev.len(),
                expected: self.layout.total(),
            });
        }
        let mut rhs = self.history.mul_vec(prev);
        let loads = load_vectors(spaces, t_n, sources);
        for (r, v) in rhs.iter_mut().zip(&loads) {
            *r += v;
        }
        Ok(AssembledSystem {
            matrix: Arc::clone(&self.matrix),
            rhs,
            layout: self.layout.clone(),
            constrained: self.constrained.clone(),
            boundary_values: Vec::new(),
        })
    }
}

/// Unconstrained step system; see [`StepAssembler`] for repeated use.
pub fn assemble_step_system(
    spaces: &Spaces,
    params: &ParameterSet,
    prev: &[f64],
    dt: f64,
    t_n: f64,
    sources: &dyn SourceTerms,
) -> Result<AssembledSystem, AssemblyError> {
    StepAssembler::new(spaces, params, dt)?.step_system(spaces, prev, t_n, sources)
}

/// `(f_el, .)`, `(g, .)`, `(f_f, .)` at time `t`, laid out as a full state vector.
pub fn load_vectors(spaces: &Spaces, t: f64, sources: &dyn SourceTerms) -> Vec<f64> {
    let l = spaces.layout();
    let mut out = vec![0.0; l.total()];
    let mesh = &spaces.mesh;
    let nj = spaces.pressure.components;
    let mut g = vec![0.0; nj];

    let d = &spaces.displacement;
    let pj = &spaces.pressure;
    for &t_el in &d.elements {
        let affine = AffineMap::new(mesh.triangle_points(t_el));
        let jac = affine.det.abs();
        let dn = d.element_nodes(t_el);
        let pn = pj.element_nodes(t_el);
        for (&xi, &w) in spaces.quad.points.iter().zip(&spaces.quad.weights) {
            let x = affine.map(xi);
            let b = PhysicalBasis::at(2, &affine, xi);
            let f = sources.elastic_force(t, x);
            sources.network_sources(t, x, &mut g);
            for i in 0..b.n {
                let wv = w * jac * b.values[i];
                for c in 0..2 {
                    out[l.displacement.start + d.dof(dn[i], c)] += wv * f[c];
                }
                for (jn, gj) in g.iter().enumerate() {
                    out[l.pressure.start + pj.dof(pn[i], jn)] += wv * gj;
                }
            }
        }
    }
    let u = &spaces.velocity;
    for &t_f in &u.elements {
        let affine = AffineMap::new(mesh.triangle_points(t_f));
        let jac = affine.det.abs();
        let un = u.element_nodes(t_f);
        for (&xi, &w) in spaces.quad.points.iter().zip(&spaces.quad.weights) {
            let x = affine.map(xi);
            let b = PhysicalBasis::at(2, &affine, xi);
            let f = sources.fluid_force(t, x);
            for i in 0..b.n {
                for c in 0..2 {
                    out[l.velocity.start + u.dof(un[i], c)] += w * jac * b.values[i] * f[c];
                }
            }
        }
    }
    out
}

/// Dirichlet values at `t` for the constrained unknowns of `spaces`.
pub fn dirichlet_values(
    spaces: &Spaces,
    constrained: &[usize],
    data: &dyn FieldData,
    t: f64,
) -> Vec<f64> {
    let full = spaces.interpolate(data, t);
    constrained.iter().map(|&k| full[k]).collect()
}

/// Zeroes constrained rows and columns and puts ones on their diagonal.
pub fn constrain_matrix(matrix: &CsrMatrix, constrained: &[usize]) -> CsrMatrix {
    let mut is_c = vec![false; matrix.nrows()];
    for &k in constrained {
        is_c[k] = true;
    }
    let mut out = matrix.clone();
    for i in 0..matrix.nrows() {
        for k in matrix.row_range(i) {
            let j = matrix.col_at(k);
            if is_c[i] || is_c[j] {
                out.values_mut()[k] = 0.0;
            }
        }
    }
    let mut entries: Vec<(usize, usize, f64)> = out.iter().filter(|e| e.2 != 0.0).collect();
    entries.extend(constrained.iter().map(|&k| (k, k, 1.0)));
    CsrMatrix::from_triplets(matrix.nrows(), matrix.ncols(), &entries)
}

/// Moves known boundary values to the right-hand side and pins constrained entries.
pub fn constrain_rhs(
    matrix: &CsrMatrix,
    rhs: &[f64],
    constrained: &[usize],
    values: &[f64],
) -> Vec<f64> {
    let mut g = vec![0.0; matrix.ncols()];
    for (&k, &v) in constrained.iter().zip(values) {
        g[k] = v;
    }
    let ag = matrix.mul_vec(&g);
    let mut out: Vec<f64> = rhs.iter().zip(&ag).map(|(r, a)| r - a).collect();
    for (&k, &v) in constrained.iter().zip(values) {
        out[k] = v;
    }
    out
}

/// Row replacement with column elimination, using nodal values of `data` at `t_n`.
pub fn apply_dirichlet(
    system: &AssembledSystem,
    spaces: &Spaces,
    data: &dyn FieldData,
    t_n: f64,
) -> AssembledSystem {
    let values = dirichlet_values(spaces, &system.constrained, data, t_n);
    apply_dirichlet_values(system, &values)
}

pub fn apply_dirichlet_values(system: &AssembledSystem, values: &[f64]) -> AssembledSystem {
    AssembledSystem {
        matrix: Arc::new(constrain_matrix(&system.matrix, &system.constrained)),
        rhs: constrain_rhs(&system.matrix, &system.rhs, &system.constrained, values),
        layout: system.layout.clone(),
        constrained: system.constrained.clone(),
        boundary_values: values.to_vec(),
    }
}

/// Largest unconstrained entry of `rhs - A x`, relative to `||rhs||`.
pub fn galerkin_orthogonality_residual(system: &AssembledSystem, solution: &[f64]) -> f64 {
    let ax = system.matrix.mul_vec(solution);
    let mut is_c = vec![false; system.rhs.len()];
    for &k in &system.constrained {
        is_c[k] = true;
    }
    let max = system
        .rhs
        .iter()
        .zip(&ax)
        .zip(&is_c)
        .filter(|(_, &c)| !c)
        .map(|((r, a), _)| (r - a).abs())
        .fold(0.0, f64::max);
    let scale = system.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if max == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        max / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::interpolate_nodal;
    use crate::mesh::build_two_square_mesh;
    use crate::solver::sparse_solve;
    use proptest::prelude::*;

    fn spaces(n: usize) -> Spaces {
        Spaces::new(build_two_square_mesh(n).unwrap(), 1).unwrap()
    }

    fn params() -> ParameterSet {
        ParameterSet::single_network(1.0)
    }

    fn form(s: &Spaces, kind: FormKind, trial: &DofMap, test: &DofMap) -> CsrMatrix {
        assemble_form(kind, trial, test, &params(), &s.mesh, &s.quad).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn elastic_form_of_linear_stretch() {
        let s = spaces(2);
        let a = form(&s, FormKind::Elastic, &s.displacement, &s.displacement);
        let d = interpolate_nodal(&s.displacement, 0.0, |_, x| [x[0], 0.0]);
        // 2 mu |eps|^2 + lambda (div)^2 = 3 on area 1/4
        assert!(close(a.bilinear(&d, &d), 0.75));
    }

    #[test]
    fn fluid_form_and_divergence() {
        let s = spaces(2);
        let a = form(&s, FormKind::Fluid, &s.velocity, &s.velocity);
        let u = interpolate_nodal(&s.velocity, 0.0, |_, x| [x[0], 0.0]);
        assert!(close(a.bilinear(&u, &u), 0.5));
        let b = form(
            &s,
            FormKind::StokesDivergence,
            &s.stokes_pressure,
            &s.velocity,
        );
        let one = vec![1.0; s.stokes_pressure.ndofs()];
        assert!(close(b.bilinear(&u, &one), -0.25));
    }

    #[test]
    fn storage_and_biot_forms() {
        let s = spaces(2);
        let m = form(&s, FormKind::Storage, &s.pressure, &s.pressure);
        let one = vec![1.0; s.pressure.ndofs()];
        assert!(close(m.bilinear(&one, &one), 0.25));
        let b = form(&s, FormKind::BiotCoupling, &s.pressure, &s.displacement);
        let d = interpolate_nodal(&s.displacement, 0.0, |_, x| [x[0], 0.0]);
        assert!(close(b.bilinear(&d, &one), -0.25));
        let k = form(&s, FormKind::NetworkDiffusion, &s.pressure, &s.pressure);
        // constant pressure: only the external exchange contributes
        assert!(close(k.bilinear(&one, &one), 0.25));
    }

    #[test]
    fn interface_coupling_values() {
        let s = spaces(2);
        let jel = assemble_interface_coupling(
            Subdomain::Elastic,
            &s.pressure,
            &s.displacement,
            &s.mesh,
            &s.facets,
            &s.line,
        )
        .unwrap();
        let jf = assemble_interface_coupling(
            Subdomain::Fluid,
            &s.pressure,
            &s.velocity,
            &s.mesh,
            &s.facets,
            &s.line,
        )
        .unwrap();
        let one = vec![1.0; s.pressure.ndofs()];
        let dx = interpolate_nodal(&s.displacement, 0.0, |_, _| [1.0, 0.0]);
        let dy = interpolate_nodal(&s.displacement, 0.0, |_, _| [0.0, 1.0]);
        let ux = interpolate_nodal(&s.velocity, 0.0, |_, _| [1.0, 0.0]);
        assert!(close(jel.bilinear(&dx, &one), 0.5));
        assert!(close(jel.bilinear(&dy, &one), 0.0));
        assert!(close(jf.bilinear(&ux, &one), -0.5));
    }

    #[test]
    fn empty_interface_is_rejected() {
        let mut s = spaces(1);
        s.facets.interface.clear();
        let r = assemble_interface_coupling(
            Subdomain::Elastic,
            &s.pressure,
            &s.displacement,
            &s.mesh,
            &s.facets,
            &s.line,
        );
        assert!(matches!(r, Err(AssemblyError::EmptyInterface)));
    }

    #[test]
    fn form_signature_is_checked() {
        let s = spaces(1);
        let r = assemble_form(
            FormKind::Elastic,
            &s.velocity,
            &s.velocity,
            &params(),
            &s.mesh,
            &s.quad,
        );
        assert!(matches!(r, Err(AssemblyError::FormSignature { .. })));
        let r = assemble_form(
            FormKind::BiotCoupling,
            &s.displacement,
            &s.pressure,
            &params(),
            &s.mesh,
            &s.quad,
        );
        assert!(r.is_err());
    }

    #[test]
    fn parameter_validation() {
        let mut p = params();
        assert!(p.validate().is_ok());
        p.networks[0].permeability = 0.0;
        assert!(p.validate().is_err());
        let mut p = params();
        p.exchange = vec![];
        assert!(p.validate().is_err());
    }

    #[test]
    fn symmetric_forms_are_symmetric() {
        let s = Spaces::new(build_two_square_mesh(2).unwrap(), 2).unwrap();
        let mut p = params();
        p.networks.push(p.networks[0].clone());
        p.exchange = vec![vec![0.0, 0.7], vec![0.7, 0.0]];
        for (kind, m) in [
            (FormKind::Elastic, &s.displacement),
            (FormKind::Fluid, &s.velocity),
            (FormKind::Storage, &s.pressure),
            (FormKind::NetworkDiffusion, &s.pressure),
        ] {
            let a = assemble_form(kind, m, m, &p, &s.mesh, &s.quad).unwrap();
            assert!(a.asymmetry() <= 1e-12 * a.frobenius_norm(), "{kind:?}");
        }
    }

    #[test]
    fn interface_terms_cancel_for_continuous_fields() {
        let s = spaces(3);
        let jel = assemble_interface_coupling(
            Subdomain::Elastic,
            &s.pressure,
            &s.displacement,
            &s.mesh,
            &s.facets,
            &s.line,
        )
        .unwrap();
        let jf = assemble_interface_coupling(
            Subdomain::Fluid,
            &s.pressure,
            &s.velocity,
            &s.mesh,
            &s.facets,
            &s.line,
        )
        .unwrap();
        let field = |_: f64, x: Point| [1.0 + x[1] * x[1], x[0] - 2.0 * x[1]];
        let d = interpolate_nodal(&s.displacement, 0.0, field);
        let u = interpolate_nodal(&s.velocity, 0.0, field);
        let p = interpolate_nodal(&s.pressure, 0.0, |_, x| [x[1].sin() + 0.3]);
        let sum = jel.bilinear(&d, &p) + jf.bilinear(&u, &p);
        assert!(sum.abs() < 1e-13, "{sum}");
    }

    #[test]
    fn step_matrix_blocks_are_transposed_couplings() {
        let s = spaces(2);
        let dt = 0.1;
        let asm = StepAssembler::new(&s, &params(), dt).unwrap();
        let l = &asm.layout;
        let a = asm.matrix();
        let f = &asm.forms;
        for (i, j, v) in f.biot.iter() {
            let up = a.get(l.displacement.start + i, l.pressure.start + j);
            let low = a.get(l.pressure.start + j, l.displacement.start + i);
            let jel = f.interface_el.get(i, j);
            assert!((up - (v + jel)).abs() < 1e-14);
            assert!((low + (v + jel) / dt).abs() < 1e-12);
        }
        for (i, j, v) in f.divergence.iter() {
            assert_eq!(a.get(l.velocity.start + i, l.stokes_pressure.start + j), v);
            assert_eq!(a.get(l.stokes_pressure.start + j, l.velocity.start + i), v);
        }
        assert!(a.asymmetry() > 0.0);
    }

    #[test]
    fn constraining_everything_returns_the_interpolant() {
        struct Data;
        impl FieldData for Data {
            fn displacement(&self, t: f64, x: Point) -> [f64; 2] {
                [x[0] * x[1] + t, x[1]]
            }
            fn pressures(&self, _: f64, x: Point, out: &mut [f64]) {
                out[0] = x[0] * x[0];
            }
            fn velocity(&self, _: f64, x: Point) -> [f64; 2] {
                [x[1], -x[0]]
            }
            fn stokes_pressure(&self, _: f64, x: Point) -> f64 {
                x[0] + 2.0
            }
        }
        let s = spaces(2);
        let prev = vec![0.0; s.layout().total()];
        let mut sys = assemble_step_system(&s, &params(), &prev, 0.5, 0.5, &ZeroData).unwrap();
        sys.constrained = (0..s.layout().total()).collect();
        let c = apply_dirichlet(&sys, &s, &Data, 0.5);
        let x = sparse_solve(&c.matrix, &c.rhs).unwrap().x;
        let expect = s.interpolate(&Data, 0.5);
        for (a, b) in x.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_system_has_zero_galerkin_residual() {
        let s = spaces(1);
        let prev = vec![0.0; s.layout().total()];
        let sys = assemble_step_system(&s, &params(), &prev, 0.1, 0.1, &ZeroData).unwrap();
        assert_eq!(galerkin_orthogonality_residual(&sys, &prev), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = spaces(1);
        assert!(matches!(
            StepAssembler::new(&s, &params(), 0.0),
            Err(AssemblyError::NonPositiveStep(_))
        ));
        let r = assemble_step_system(&s, &params(), &[0.0; 3], 0.1, 0.1, &ZeroData);
        assert!(matches!(r, Err(AssemblyError::StateLength { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn elastic_and_fluid_forms_are_coercive_on_constrained_fields(
            seed in proptest::collection::vec(-1.0f64..1.0, 64),
        ) {
            let s = spaces(2);
            for (kind, m) in [(FormKind::Elastic, &s.displacement), (FormKind::Fluid, &s.velocity)] {
                let a = form(&s, kind, m, m);
                let v: Vec<f64> = (0..m.ndofs())
                    .map(|k| if m.is_dirichlet(k) { 0.0 } else { seed[k % seed.len()] })
                    .collect();
                let e = a.bilinear(&v, &v);
                let nrm: f64 = v.iter().map(|x| x * x).sum();
                prop_assert!(e >= 0.0);
                prop_assert!(nrm == 0.0 || e > 1e-8 * nrm);
            }
        }
    }
}
