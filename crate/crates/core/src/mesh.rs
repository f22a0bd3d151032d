//! Conforming triangulations of the two-subdomain geometry.
//!
//! The poroelastic block occupies `(-0.5, 0) x (0, 0.5)` and the Stokes block
//! `(0, 0.5) x (0, 0.5)`; the interface is the segment `{0} x (0, 0.5)`.
//! Vertices on the interface are shared by both submeshes.

use std::collections::HashMap;
use std::io::{self, Write};

use thiserror::Error;

pub type Point = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("cell count per square edge must be at least 1")]
    ZeroCells,
    #[error("triangle {0} is degenerate")]
    Degenerate(usize),
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifold(usize, usize),
    #[error("edge {0} lies on the interface but is owned by a single subdomain")]
    NonConformingInterface(usize),
    #[error("element id {0} out of range")]
    InvalidElement(usize),
    #[error("vertex index {0} out of range")]
    InvalidVertex(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subdomain {
    Elastic,
    Fluid,
}

impl Subdomain {
    pub fn tag(self) -> u8 {
        match self {
            Subdomain::Elastic => 0,
            Subdomain::Fluid => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    InteriorElastic,
    InteriorFluid,
    Interface,
    Boundary(Subdomain),
}

#[derive(Clone, Debug)]
pub struct Triangle {
    pub vertices: [usize; 3],
    pub subdomain: Subdomain,
}

/// One triangle adjacent to an edge. `sign` turns the edge's canonical normal
/// into this triangle's outward normal.
#[derive(Clone, Copy, Debug)]
pub struct EdgeOwner {
    pub triangle: usize,
    pub local: usize,
    pub sign: f64,
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub vertices: [usize; 2],
    pub owners: Vec<EdgeOwner>,
    /// Unit normal; outward from the first owner, and equal to `n_el` on interface edges.
    pub normal: Point,
    pub length: f64,
    pub kind: EdgeKind,
}

impl Edge {
    pub fn midpoint(&self, mesh: &Mesh) -> Point {
        let a = mesh.vertices[self.vertices[0]];
        let b = mesh.vertices[self.vertices[1]];
        [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
    }

    pub fn owner_in(&self, mesh: &Mesh, sub: Subdomain) -> Option<EdgeOwner> {
        self.owners
            .iter()
            .copied()
            .find(|o| mesh.triangles[o.triangle].subdomain == sub)
    }
}

#[derive(Clone, Debug)]
pub struct ElementGeometry {
    /// Diameter (longest edge).
    pub h: f64,
    pub area: f64,
    /// Outward unit normal of local edge `i`, which joins local vertices `i` and `i + 1`.
    pub normals: [Point; 3],
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<Triangle>,
    pub edges: Vec<Edge>,
    /// Global edge id of each local edge of each triangle.
    pub triangle_edges: Vec<[usize; 3]>,
}

fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn distance(a: Point, b: Point) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

impl Mesh {
    /// Builds the edge structure from raw triangles, flipping clockwise ones.
    pub fn from_triangles(
        vertices: Vec<Point>,
        mut triangles: Vec<Triangle>,
    ) -> Result<Self, MeshError> {
        for (t, tri) in triangles.iter_mut().enumerate() {
            if let Some(&v) = tri.vertices.iter().find(|&&v| v >= vertices.len()) {
                return Err(MeshError::InvalidVertex(v));
            }
            let [a, b, c] = tri.vertices.map(|v| vertices[v]);
            let area = signed_area(a, b, c);
            let scale = distance(a, b).max(distance(b, c)).max(distance(c, a));
            if area.abs() <= 1e-14 * scale * scale || !area.is_finite() {
                return Err(MeshError::Degenerate(t));
            }
            if area < 0.0 {
                tri.vertices.swap(1, 2);
            }
        }

        let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let mut local_ids = [0usize; 3];
            for (local, id) in local_ids.iter_mut().enumerate() {
                let a = tri.vertices[local];
                let b = tri.vertices[(local + 1) % 3];
                let key = (a.min(b), a.max(b));
                let pa = vertices[a];
                let pb = vertices[b];
                let len = distance(pa, pb);
                // outward normal of a counter-clockwise triangle
                let outward = [(pb[1] - pa[1]) / len, -(pb[0] - pa[0]) / len];
                let e = *lookup.entry(key).or_insert_with(|| {
                    edges.push(Edge {
                        vertices: [key.0, key.1],
                        owners: Vec::with_capacity(2),
                        normal: outward,
                        length: len,
                        kind: EdgeKind::Boundary(tri.subdomain),
                    });
                    edges.len() - 1
                });
                let edge = &mut edges[e];
                if edge.owners.len() == 2 {
                    return Err(MeshError::NonManifold(key.0, key.1));
                }
                let dot = edge.normal[0] * outward[0] + edge.normal[1] * outward[1];
                edge.owners.push(EdgeOwner {
                    triangle: t,
                    local,
                    sign: dot.signum(),
                });
                *id = e;
            }
            triangle_edges.push(local_ids);
        }

        for edge in edges.iter_mut() {
            edge.kind = match edge.owners.as_slice() {
                [only] => EdgeKind::Boundary(triangles[only.triangle].subdomain),
                [a, b] => {
                    let sa = triangles[a.triangle].subdomain;
                    let sb = triangles[b.triangle].subdomain;
                    match (sa, sb) {
                        (Subdomain::Elastic, Subdomain::Elastic) => EdgeKind::InteriorElastic,
                        (Subdomain::Fluid, Subdomain::Fluid) => EdgeKind::InteriorFluid,
                        _ => EdgeKind::Interface,
                    }
                }
                _ => unreachable!("edges are created with one owner"),
            };
            if edge.kind == EdgeKind::Interface
                && triangles[edge.owners[0].triangle].subdomain == Subdomain::Fluid
            {
                edge.normal = [-edge.normal[0], -edge.normal[1]];
                for o in edge.owners.iter_mut() {
                    o.sign = -o.sign;
                }
            }
        }

        Ok(Mesh {
            vertices,
            triangles,
            edges,
            triangle_edges,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        self.triangles[t].vertices.map(|v| self.vertices[v])
    }

    pub fn element_geometry(&self, t: usize) -> Result<ElementGeometry, MeshError> {
        let tri = self.triangles.get(t).ok_or(MeshError::InvalidElement(t))?;
        let p = tri.vertices.map(|v| self.vertices[v]);
        let mut h: f64 = 0.0;
        let mut normals = [[0.0; 2]; 3];
        for i in 0..3 {
            let a = p[i];
            let b = p[(i + 1) % 3];
            let len = distance(a, b);
            h = h.max(len);
            normals[i] = [(b[1] - a[1]) / len, -(b[0] - a[0]) / len];
        }
        Ok(ElementGeometry {
            h,
            area: signed_area(p[0], p[1], p[2]),
            normals,
        })
    }

    /// Largest element diameter.
    pub fn h_max(&self) -> f64 {
        (0..self.num_triangles())
            .map(|t| self.element_geometry(t).map(|g| g.h).unwrap_or(0.0))
            .fold(0.0, f64::max)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles())
            .map(|t| self.element_geometry(t).map(|g| g.area).unwrap_or(0.0))
            .sum()
    }

    pub fn triangles_in(&self, sub: Subdomain) -> impl Iterator<Item = usize> + '_ {
        self.triangles
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.subdomain == sub)
            .map(|(i, _)| i)
    }

    /// Plain-text dump: a header, one `x y` line per vertex, then `v0 v1 v2 tag` per triangle.
    pub fn write_dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "vertices {} triangles {}",
            self.vertices.len(),
            self.triangles.len()
        )?;
        for v in &self.vertices {
            writeln!(out, "{} {}", v[0], v[1])?;
        }
        for t in &self.triangles {
            let [a, b, c] = t.vertices;
            writeln!(out, "{a} {b} {c} {}", t.subdomain.tag())?;
        }
        Ok(())
    }
}

/// Uniform mesh of the two unit-half squares: `n x n` cells per square, each
/// cut along its bottom-left to top-right diagonal.
pub fn build_two_square_mesh(n: usize) -> Result<Mesh, MeshError> {
    if n == 0 {
        return Err(MeshError::ZeroCells);
    }
    let nx = 2 * n;
    let step = 0.5 / n as f64;
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=nx {
            // interface column is exactly x = 0
            let x = if i == n { 0.0 } else { -0.5 + i as f64 * step };
            vertices.push([x, j as f64 * step]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * n);
    for j in 0..n {
        for i in 0..nx {
            let subdomain = if i < n {
                Subdomain::Elastic
            } else {
                Subdomain::Fluid
            };
            let (v00, v10, v11, v01) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push(Triangle {
                vertices: [v00, v10, v11],
                subdomain,
            });
            triangles.push(Triangle {
                vertices: [v00, v11, v01],
                subdomain,
            });
        }
    }
    Mesh::from_triangles(vertices, triangles)
}

/// Red refinement: every triangle is split into four congruent children
/// through its edge midpoints.
pub fn uniform_refine(mesh: &Mesh) -> Mesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoint_of = Vec::with_capacity(mesh.edges.len());
    for edge in &mesh.edges {
        midpoint_of.push(vertices.len());
        vertices.push(edge.midpoint(mesh));
    }
    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = tri.vertices;
        let [eab, ebc, eca] = mesh.triangle_edges[t].map(|e| midpoint_of[e]);
        let sub = tri.subdomain;
        for verts in [[a, eab, eca], [eab, b, ebc], [eca, ebc, c], [eab, ebc, eca]] {
            triangles.push(Triangle {
                vertices: verts,
                subdomain: sub,
            });
        }
    }
    Mesh::from_triangles(vertices, triangles).expect("refinement of a valid mesh is valid")
}

/// Edge groups used by assembly and estimation.
#[derive(Clone, Debug, Default)]
pub struct FacetSet {
    pub interior_elastic: Vec<usize>,
    pub interior_fluid: Vec<usize>,
    pub interface: Vec<usize>,
    /// Dirichlet edges of the displacement.
    pub dirichlet_displacement: Vec<usize>,
    /// Dirichlet edges shared by every network pressure.
    pub dirichlet_pressure: Vec<usize>,
    pub dirichlet_velocity: Vec<usize>,
    /// `(n_el, n_f)` for each entry of `interface`.
    pub interface_normals: Vec<(Point, Point)>,
}

impl FacetSet {
    pub fn boundary_elastic(&self) -> &[usize] {
        &self.dirichlet_displacement
    }

    pub fn boundary_fluid(&self) -> &[usize] {
        &self.dirichlet_velocity
    }
}

/// Groups the edges; the whole outer boundary is Dirichlet for every field.
pub fn classify_facets(mesh: &Mesh) -> Result<FacetSet, MeshError> {
    let mut touches = vec![[false; 2]; mesh.num_vertices()];
    for tri in &mesh.triangles {
        for &v in &tri.vertices {
            touches[v][tri.subdomain.tag() as usize] = true;
        }
    }
    let on_both = |v: usize| touches[v][0] && touches[v][1];

    let mut set = FacetSet::default();
    for (e, edge) in mesh.edges.iter().enumerate() {
        match edge.kind {
            EdgeKind::InteriorElastic => set.interior_elastic.push(e),
            EdgeKind::InteriorFluid => set.interior_fluid.push(e),
            EdgeKind::Interface => {
                set.interface.push(e);
                let n = edge.normal;
                set.interface_normals.push((n, [-n[0], -n[1]]));
            }
            EdgeKind::Boundary(sub) => {
                if on_both(edge.vertices[0]) && on_both(edge.vertices[1]) {
                    return Err(MeshError::NonConformingInterface(e));
                }
                match sub {
                    Subdomain::Elastic => {
                        set.dirichlet_displacement.push(e);
                        set.dirichlet_pressure.push(e);
                    }
                    Subdomain::Fluid => set.dirichlet_velocity.push(e),
                }
            }
        }
    }
    Ok(set)
}
