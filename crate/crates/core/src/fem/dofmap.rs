//! Continuous Lagrange degree-of-freedom maps on one subdomain.
//!
//! Scalar nodes are numbered vertices first, then edge midpoints (degree 2).
//! A field with `c` components stores component `k` of node `i` at `k * n_nodes + i`.

use std::collections::HashMap;

use super::{basis, AffineMap, FemError, PhysicalBasis, ScalarSample, MAX_LOCAL};
use crate::mesh::{Mesh, Point, Subdomain};

const NOT_HERE: usize = usize::MAX;
const ON_BOUNDARY_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct DofMap {
    pub subdomain: Subdomain,
    pub degree: usize,
    pub components: usize,
    /// Geometric location of each scalar node.
    pub nodes: Vec<Point>,
    /// Triangles of the subdomain, in mesh order.
    pub elements: Vec<usize>,
    element_nodes: Vec<[usize; MAX_LOCAL]>,
    slot_of: Vec<usize>,
    dirichlet: Vec<usize>,
    is_dirichlet: Vec<bool>,
}

impl DofMap {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn ndofs(&self) -> usize {
        self.nodes.len() * self.components
    }

    pub fn local_count(&self) -> usize {
        basis::local_count(self.degree)
    }

    pub fn dof(&self, node: usize, comp: usize) -> usize {
        comp * self.nodes.len() + node
    }

    pub fn contains(&self, triangle: usize) -> bool {
        self.slot_of.get(triangle).is_some_and(|&s| s != NOT_HERE)
    }

    /// Scalar node ids of a triangle, in local basis order.
    pub fn element_nodes(&self, triangle: usize) -> &[usize] {
        let slot = self.slot_of[triangle];
        assert!(
            slot != NOT_HERE,
            "triangle {triangle} is not in this dof map"
        );
        &self.element_nodes[slot][..self.local_count()]
    }

    /// All dofs of a triangle, component-major.
    pub fn element_dofs(&self, triangle: usize) -> Vec<usize> {
        let nodes = self.element_nodes(triangle);
        (0..self.components)
            .flat_map(|c| nodes.iter().map(move |&n| self.dof(n, c)))
            .collect()
    }

    /// Local coefficients of component `comp` on a triangle.
    pub fn gather(&self, coeffs: &[f64], triangle: usize, comp: usize) -> [f64; MAX_LOCAL] {
        let mut out = [0.0; MAX_LOCAL];
        for (o, &n) in out.iter_mut().zip(self.element_nodes(triangle)) {
            *o = coeffs[self.dof(n, comp)];
        }
        out
    }

    /// Value, gradient and Hessian of component `comp` at a physical basis sample.
    pub fn sample(
        &self,
        coeffs: &[f64],
        triangle: usize,
        comp: usize,
        basis: &PhysicalBasis,
    ) -> ScalarSample {
        let local = self.gather(coeffs, triangle, comp);
        ScalarSample::from_local(&local[..self.local_count()], basis)
    }

    /// Marks every dof whose node lies on one of the given edges (closed segments).
    pub fn mark_dirichlet(&mut self, mesh: &Mesh, edges: &[usize]) {
        let segments: Vec<(Point, Point)> = edges
            .iter()
            .map(|&e| {
                let [a, b] = mesh.edges[e].vertices;
                (mesh.vertices[a], mesh.vertices[b])
            })
            .collect();
        let mut on_boundary = vec![false; self.nodes.len()];
        for (flag, &p) in on_boundary.iter_mut().zip(&self.nodes) {
            *flag = segments
                .iter()
                .any(|&(a, b)| point_on_segment(p, a, b, ON_BOUNDARY_TOL));
        }
        self.is_dirichlet = vec![false; self.ndofs()];
        self.dirichlet.clear();
        for c in 0..self.components {
            for (n, &flag) in on_boundary.iter().enumerate() {
                if flag {
                    let d = self.dof(n, c);
                    self.is_dirichlet[d] = true;
                    self.dirichlet.push(d);
                }
            }
        }
        self.dirichlet.sort_unstable();
    }

    pub fn dirichlet_dofs(&self) -> &[usize] {
        &self.dirichlet
    }

    pub fn is_dirichlet(&self, dof: usize) -> bool {
        self.is_dirichlet.get(dof).copied().unwrap_or(false)
    }

    pub fn affine(&self, mesh: &Mesh, triangle: usize) -> AffineMap {
        AffineMap::new(mesh.triangle_points(triangle))
    }
}

fn point_on_segment(p: Point, a: Point, b: Point, tol: f64) -> bool {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = (ap[0] * ab[0] + ap[1] * ab[1]) / len2;
    if !(-tol..=1.0 + tol).contains(&t) {
        return false;
    }
    let cross = ab[0] * ap[1] - ab[1] * ap[0];
    cross.abs() / len2.sqrt() <= tol
}

pub fn build_dof_map(
    mesh: &Mesh,
    subdomain: Subdomain,
    degree: usize,
    components: usize,
) -> Result<DofMap, FemError> {
    if degree != 1 && degree != 2 {
        return Err(FemError::UnsupportedDegree(degree));
    }
    if components == 0 {
        return Err(FemError::NoComponents);
    }
    let elements: Vec<usize> = mesh.triangles_in(subdomain).collect();
    let mut slot_of = vec![NOT_HERE; mesh.num_triangles()];
    let mut vertex_node: HashMap<usize, usize> = HashMap::new();
    let mut nodes = Vec::new();
    for &t in &elements {
        for &v in &mesh.triangles[t].vertices {
            vertex_node.entry(v).or_insert_with(|| {
                nodes.push(mesh.vertices[v]);
                nodes.len() - 1
            });
        }
    }
    let mut edge_node: HashMap<usize, usize> = HashMap::new();
    if degree == 2 {
        for &t in &elements {
            for &e in &mesh.triangle_edges[t] {
                edge_node.entry(e).or_insert_with(|| {
                    nodes.push(mesh.edges[e].midpoint(mesh));
                    nodes.len() - 1
                });
            }
        }
    }
    let mut element_nodes = Vec::with_capacity(elements.len());
    for (slot, &t) in elements.iter().enumerate() {
        slot_of[t] = slot;
        let mut local = [0usize; MAX_LOCAL];
        for (i, v) in mesh.triangles[t].vertices.iter().enumerate() {
            local[i] = vertex_node[v];
        }
        if degree == 2 {
            for (i, e) in mesh.triangle_edges[t].iter().enumerate() {
                local[3 + i] = edge_node[e];
            }
        }
        element_nodes.push(local);
    }
    let ndofs = nodes.len() * components;
    Ok(DofMap {
        subdomain,
        degree,
        components,
        nodes,
        elements,
        element_nodes,
        slot_of,
        dirichlet: Vec::new(),
        is_dirichlet: vec![false; ndofs],
    })
}

/// Nodal interpolant: coefficients are the field values at the geometric nodes.
pub fn interpolate_nodal<F, V>(map: &DofMap, t: f64, field: F) -> Vec<f64>
where
    F: Fn(f64, Point) -> V,
    V: AsRef<[f64]>,
{
    let mut out = vec![0.0; map.ndofs()];
    for (n, &x) in map.nodes.iter().enumerate() {
        let v = field(t, x);
        for (c, &value) in v.as_ref().iter().enumerate().take(map.components) {
            out[map.dof(n, c)] = value;
        }
    }
    out
}

/// Value and gradient of every component at a physical point inside `triangle`.
pub fn eval_discrete(
    coeffs: &[f64],
    map: &DofMap,
    mesh: &Mesh,
    triangle: usize,
    point: Point,
) -> Result<(Vec<f64>, Vec<[f64; 2]>), FemError> {
    if coeffs.len() != map.ndofs() {
        return Err(FemError::CoefficientLength {
            got: coeffs.len(),
            expected: map.ndofs(),
        });
    }
    if !map.contains(triangle) {
        return Err(FemError::ForeignElement(triangle));
    }
    let affine = map.affine(mesh, triangle);
    let xi = affine.inverse(point);
    let tol = 1e-10;
    if xi[0] < -tol || xi[1] < -tol || xi[0] + xi[1] > 1.0 + tol {
        return Err(FemError::OutsideElement {
            element: triangle,
            point,
        });
    }
    let basis = PhysicalBasis::at(map.degree, &affine, xi);
    let mut values = Vec::with_capacity(map.components);
    let mut grads = Vec::with_capacity(map.components);
    for c in 0..map.components {
        let s = map.sample(coeffs, triangle, c, &basis);
        values.push(s.value);
        grads.push(s.grad);
    }
    Ok((values, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_two_square_mesh, classify_facets, uniform_refine};

    #[test]
    fn counts_on_single_cell_elastic_submesh() {
        let m = build_two_square_mesh(1).unwrap();
        assert_eq!(
            build_dof_map(&m, Subdomain::Elastic, 2, 1).unwrap().ndofs(),
            9
        );
        assert_eq!(
            build_dof_map(&m, Subdomain::Elastic, 1, 1).unwrap().ndofs(),
            4
        );
        assert_eq!(
            build_dof_map(&m, Subdomain::Elastic, 2, 2).unwrap().ndofs(),
            18
        );
        assert!(matches!(
            build_dof_map(&m, Subdomain::Elastic, 3, 1),
            Err(FemError::UnsupportedDegree(3))
        ));
    }

    #[test]
    fn shared_entities_share_dofs() {
        let m = build_two_square_mesh(2).unwrap();
        let map = build_dof_map(&m, Subdomain::Fluid, 2, 1).unwrap();
        for edge in m.edges.iter().filter(|e| e.owners.len() == 2) {
            let [a, b] = [edge.owners[0], edge.owners[1]];
            if !(map.contains(a.triangle) && map.contains(b.triangle)) {
                continue;
            }
            let na = map.element_nodes(a.triangle)[3 + a.local];
            let nb = map.element_nodes(b.triangle)[3 + b.local];
            assert_eq!(na, nb);
        }
    }

    #[test]
    fn constant_field_interpolates_to_constant() {
        let m = build_two_square_mesh(2).unwrap();
        let map = build_dof_map(&m, Subdomain::Elastic, 2, 2).unwrap();
        let c = interpolate_nodal(&map, 0.0, |_, _| [3.5, -1.0]);
        assert!(c[..map.n_nodes()].iter().all(|&v| v == 3.5));
        assert!(c[map.n_nodes()..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn quadratic_reproduced_by_degree_two() {
        let m = build_two_square_mesh(3).unwrap();
        let map = build_dof_map(&m, Subdomain::Fluid, 2, 1).unwrap();
        let c = interpolate_nodal(&map, 0.0, |_, x| [x[0] * x[0] + x[1]]);
        for &t in &map.elements {
            let p = m.triangle_points(t);
            let x = [
                (p[0][0] + p[1][0] + p[2][0]) / 3.0,
                (p[0][1] + p[1][1] + p[2][1]) / 3.0,
            ];
            let (v, g) = eval_discrete(&c, &map, &m, t, x).unwrap();
            assert!((v[0] - (x[0] * x[0] + x[1])).abs() < 1e-13);
            assert!((g[0][0] - 2.0 * x[0]).abs() < 1e-12 && (g[0][1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_space_misses_bilinear_term() {
        let m = build_two_square_mesh(1).unwrap();
        let map = build_dof_map(&m, Subdomain::Fluid, 1, 1).unwrap();
        let c = interpolate_nodal(&map, 0.0, |_, x| [x[0] * x[1]]);
        for (n, x) in map.nodes.iter().enumerate() {
            assert_eq!(c[n], x[0] * x[1]);
        }
        let t = map.elements[0];
        let p = m.triangle_points(t);
        let mid = [0.5 * (p[0][0] + p[2][0]), 0.5 * (p[0][1] + p[2][1])];
        let (v, _) = eval_discrete(&c, &map, &m, t, mid).unwrap();
        assert!((v[0] - mid[0] * mid[1]).abs() > 1e-3);
    }

    #[test]
    fn linear_gradient_is_constant_and_zero_field_vanishes() {
        let m = build_two_square_mesh(2).unwrap();
        let map = build_dof_map(&m, Subdomain::Elastic, 1, 1).unwrap();
        let c = interpolate_nodal(&map, 0.0, |_, x| [2.0 * x[0] - 3.0 * x[1] + 1.0]);
        let z = vec![0.0; map.ndofs()];
        for &t in &map.elements {
            let p = m.triangle_points(t);
            let (_, g) = eval_discrete(&c, &map, &m, t, p[0]).unwrap();
            assert!((g[0][0] - 2.0).abs() < 1e-13 && (g[0][1] + 3.0).abs() < 1e-13);
            let (v0, g0) = eval_discrete(&z, &map, &m, t, p[1]).unwrap();
            assert_eq!(v0[0], 0.0);
            assert_eq!(g0[0], [0.0, 0.0]);
        }
        let far = eval_discrete(&c, &map, &m, map.elements[0], [5.0, 5.0]);
        assert!(matches!(far, Err(FemError::OutsideElement { .. })));
    }

    #[test]
    fn dirichlet_nodes_are_on_outer_boundary() {
        let m = uniform_refine(&build_two_square_mesh(2).unwrap());
        let f = classify_facets(&m).unwrap();
        let mut map = build_dof_map(&m, Subdomain::Elastic, 2, 1).unwrap();
        map.mark_dirichlet(&m, &f.dirichlet_displacement);
        let on_outer = |p: Point| {
            (p[0] + 0.5).abs() < 1e-12 || p[1].abs() < 1e-12 || (p[1] - 0.5).abs() < 1e-12
        };
        for (n, &p) in map.nodes.iter().enumerate() {
            assert_eq!(map.is_dirichlet(map.dof(n, 0)), on_outer(p), "node {p:?}");
        }
        // interface corners belong to the boundary closure
        let corner = map
            .nodes
            .iter()
            .position(|p| p[0] == 0.0 && p[1] == 0.0)
            .unwrap();
        assert!(map.is_dirichlet(corner));
    }
}
