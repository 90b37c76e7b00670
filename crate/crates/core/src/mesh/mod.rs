//! Conforming triangle meshes over a square domain with one closed polygonal
//! interface separating a molecular region from solvent, plus newest-vertex
//! bisection refinement, Dorfler marking, nested-mesh bookkeeping and a text
//! interchange format.
//!
//! Triangle vertex order carries the bisection state: the refinement edge of
//! a triangle is always the edge between its first two listed vertices, and
//! all triangles are counterclockwise. Connectivity (edges, adjacency, tags)
//! is derived once at construction and never mutated.

mod build;
mod hierarchy;
mod io;
mod refine;

pub use build::{build_disk_in_disk, build_disk_in_square};
pub use hierarchy::MeshHierarchy;
pub use io::{read_pbemesh, write_pbemesh};
pub use refine::{mark_dorfler, refine, refine_uniform, Refined};

use thiserror::Error;

pub type VertexId = usize;
pub type ElemId = usize;
pub type EdgeId = usize;

/// Subdomain a triangle belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Molecule,
    Solvent,
}

/// Classification of distinguished edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeTag {
    /// On the outer (Dirichlet) boundary of the computational domain.
    Outer,
    /// Shared by a molecule triangle and a solvent triangle.
    Interface,
}

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("vertex index {0} out of range")]
    VertexOutOfRange(usize),
    #[error("triangle {0} has non-positive area {1:e}")]
    DegenerateTriangle(usize, f64),
    #[error("edge ({0},{1}) shared by more than two triangles")]
    NonManifoldEdge(usize, usize),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("marking: {0}")]
    Marking(String),
    #[error("mesh file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable conforming triangulation.
///
/// `triangles[t] = [a, b, c]` counterclockwise with refinement edge `(a, b)`.
/// `edge_of_tri[t][i]` is the edge opposite local vertex `i`, so the
/// refinement edge is local edge 2.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[VertexId; 3]>,
    pub regions: Vec<Region>,
    pub edges: Vec<[VertexId; 2]>,
    pub edge_of_tri: Vec<[EdgeId; 3]>,
    pub tri_of_edge: Vec<[Option<ElemId>; 2]>,
    pub edge_tags: Vec<Option<EdgeTag>>,
}

impl TriMesh {
    /// Builds connectivity from raw arrays and validates conformity.
    /// Triangle vertex order is taken as given (orientation and refinement
    /// edge are the caller's statement of intent).
    pub fn from_raw(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[VertexId; 3]>,
        regions: Vec<Region>,
    ) -> Result<Self, MeshError> {
        assert_eq!(triangles.len(), regions.len());
        let nv = vertices.len();
        for t in &triangles {
            for &v in t {
                if v >= nv {
                    return Err(MeshError::VertexOutOfRange(v));
                }
            }
        }
        let mut scale: f64 = 0.0;
        for v in &vertices {
            scale = scale.max(v[0].abs()).max(v[1].abs());
        }
        let area_floor = 1e-14 * scale * scale;
        for (t, tri) in triangles.iter().enumerate() {
            let a = signed_area(
                vertices[tri[0]],
                vertices[tri[1]],
                vertices[tri[2]],
            );
            if a <= area_floor {
                return Err(MeshError::DegenerateTriangle(t, a));
            }
        }

        // discover edges in deterministic (triangle, local-edge) order
        let mut edge_ids: std::collections::HashMap<(usize, usize), EdgeId> =
            std::collections::HashMap::new();
        let mut edges: Vec<[VertexId; 2]> = Vec::new();
        let mut edge_of_tri = vec![[0usize; 3]; triangles.len()];
        let mut tri_of_edge: Vec<[Option<ElemId>; 2]> = Vec::new();
        for (t, tri) in triangles.iter().enumerate() {
            for i in 0..3 {
                // local edge i is opposite local vertex i
                let a = tri[(i + 1) % 3];
                let b = tri[(i + 2) % 3];
                let key = (a.min(b), a.max(b));
                let e = *edge_ids.entry(key).or_insert_with(|| {
                    edges.push([key.0, key.1]);
                    tri_of_edge.push([None, None]);
                    edges.len() - 1
                });
                edge_of_tri[t][i] = e;
                let slot = &mut tri_of_edge[e];
                if slot[0].is_none() {
                    slot[0] = Some(t);
                } else if slot[1].is_none() {
                    slot[1] = Some(t);
                } else {
                    return Err(MeshError::NonManifoldEdge(key.0, key.1));
                }
            }
        }

        let mut edge_tags = vec![None; edges.len()];
        for (e, adj) in tri_of_edge.iter().enumerate() {
            match adj {
                [Some(t0), Some(t1)] => {
                    if regions[*t0] != regions[*t1] {
                        edge_tags[e] = Some(EdgeTag::Interface);
                    }
                }
                [Some(_), None] => edge_tags[e] = Some(EdgeTag::Outer),
                _ => unreachable!(),
            }
        }

        Ok(TriMesh {
            vertices,
            triangles,
            regions,
            edges,
            edge_of_tri,
            tri_of_edge,
            edge_tags,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn coords(&self, t: ElemId) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        ]
    }

    pub fn area(&self, t: ElemId) -> f64 {
        let [p0, p1, p2] = self.coords(t);
        signed_area(p0, p1, p2)
    }

    pub fn centroid(&self, t: ElemId) -> [f64; 2] {
        let [p0, p1, p2] = self.coords(t);
        [
            (p0[0] + p1[0] + p2[0]) / 3.0,
            (p0[1] + p1[1] + p2[1]) / 3.0,
        ]
    }

    pub fn diameter(&self, t: ElemId) -> f64 {
        let [p0, p1, p2] = self.coords(t);
        dist(p0, p1).max(dist(p1, p2)).max(dist(p2, p0))
    }

    pub fn edge_length(&self, e: EdgeId) -> f64 {
        let [a, b] = self.edges[e];
        dist(self.vertices[a], self.vertices[b])
    }

    /// Unit normal of the edge, fixed globally as the left-hand perpendicular
    /// of the direction from the lower to the higher vertex id.
    pub fn edge_normal(&self, e: EdgeId) -> [f64; 2] {
        let [a, b] = self.edges[e];
        let dx = self.vertices[b][0] - self.vertices[a][0];
        let dy = self.vertices[b][1] - self.vertices[a][1];
        let len = (dx * dx + dy * dy).sqrt();
        [dy / len, -dx / len]
    }

    /// +1 when the global edge normal points out of triangle `t`, else -1.
    pub fn edge_sign(&self, t: ElemId, local_edge: usize) -> f64 {
        let e = self.edge_of_tri[t][local_edge];
        let n = self.edge_normal(e);
        let [a, _] = self.edges[e];
        let opp = self.triangles[t][local_edge];
        let pa = self.vertices[a];
        let po = self.vertices[opp];
        // normal points away from the opposite vertex iff outward
        let d = (pa[0] - po[0]) * n[0] + (pa[1] - po[1]) * n[1];
        if d > 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Vertices lying on the outer boundary.
    pub fn outer_boundary_vertices(&self) -> Vec<bool> {
        let mut flag = vec![false; self.num_vertices()];
        for (e, tag) in self.edge_tags.iter().enumerate() {
            if *tag == Some(EdgeTag::Outer) {
                flag[self.edges[e][0]] = true;
                flag[self.edges[e][1]] = true;
            }
        }
        flag
    }

    /// Vertices on the molecule/solvent interface.
    pub fn interface_vertices(&self) -> Vec<bool> {
        let mut flag = vec![false; self.num_vertices()];
        for (e, tag) in self.edge_tags.iter().enumerate() {
            if *tag == Some(EdgeTag::Interface) {
                flag[self.edges[e][0]] = true;
                flag[self.edges[e][1]] = true;
            }
        }
        flag
    }

    /// Gradients of the three P1 hat functions on triangle `t` and its area.
    pub fn p1_gradients(&self, t: ElemId) -> ([[f64; 2]; 3], f64) {
        let [p0, p1, p2] = self.coords(t);
        let area = signed_area(p0, p1, p2);
        let f = 1.0 / (2.0 * area);
        let g0 = [(p1[1] - p2[1]) * f, (p2[0] - p1[0]) * f];
        let g1 = [(p2[1] - p0[1]) * f, (p0[0] - p2[0]) * f];
        let g2 = [(p0[1] - p1[1]) * f, (p1[0] - p0[0]) * f];
        ([g0, g1, g2], area)
    }

    /// Barycentric coordinates of `x` with respect to triangle `t`.
    pub fn barycentric(&self, t: ElemId, x: [f64; 2]) -> [f64; 3] {
        let [p0, p1, p2] = self.coords(t);
        let total = signed_area(p0, p1, p2);
        let l0 = signed_area(x, p1, p2) / total;
        let l1 = signed_area(p0, x, p2) / total;
        [l0, l1, 1.0 - l0 - l1]
    }

    /// Total mesh area (signed areas are all positive after validation).
    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.area(t)).sum()
    }

    /// Extracts the sub-mesh of one region. Element and vertex order follow
    /// the parent mesh. Returns the sub-mesh together with index maps.
    pub fn extract_region(&self, region: Region) -> (TriMesh, SubmeshMap) {
        let mut vmap = vec![usize::MAX; self.num_vertices()];
        let mut vertex_to_parent = Vec::new();
        let mut triangles = Vec::new();
        let mut regions = Vec::new();
        let mut elem_to_parent = Vec::new();
        let mut parent_to_sub = vec![None; self.num_triangles()];
        for t in 0..self.num_triangles() {
            if self.regions[t] != region {
                continue;
            }
            let mut tri = [0usize; 3];
            for (i, &v) in self.triangles[t].iter().enumerate() {
                if vmap[v] == usize::MAX {
                    vmap[v] = vertex_to_parent.len();
                    vertex_to_parent.push(v);
                }
                tri[i] = vmap[v];
            }
            parent_to_sub[t] = Some(triangles.len());
            elem_to_parent.push(t);
            triangles.push(tri);
            regions.push(region);
        }
        let vertices = vertex_to_parent
            .iter()
            .map(|&v| self.vertices[v])
            .collect();
        let sub = TriMesh::from_raw(vertices, triangles, regions)
            .expect("sub-mesh of a valid mesh is valid");
        (
            sub,
            SubmeshMap {
                elem_to_parent,
                vertex_to_parent,
                parent_to_sub,
            },
        )
    }

    /// Structural checks beyond what construction enforces; used by tests
    /// and by the mesh reader.
    pub fn validate(&self) -> Result<(), MeshError> {
        let mut referenced = vec![false; self.num_vertices()];
        for tri in &self.triangles {
            for &v in tri {
                referenced[v] = true;
            }
        }
        if let Some(v) = referenced.iter().position(|r| !r) {
            return Err(MeshError::InvalidGeometry(format!(
                "vertex {} not referenced by any triangle",
                v
            )));
        }
        // every interface edge separates regions, every outer edge has one side
        for (e, tag) in self.edge_tags.iter().enumerate() {
            match tag {
                Some(EdgeTag::Interface) => {
                    let [a, b] = self.tri_of_edge[e];
                    let (a, b) = (a.unwrap(), b.unwrap());
                    if self.regions[a] == self.regions[b] {
                        return Err(MeshError::InvalidGeometry(format!(
                            "interface edge {} does not separate regions",
                            e
                        )));
                    }
                }
                Some(EdgeTag::Outer) => {
                    if self.tri_of_edge[e][1].is_some() {
                        return Err(MeshError::InvalidGeometry(format!(
                            "outer edge {} has two neighbors",
                            e
                        )));
                    }
                }
                None => {}
            }
        }
        Ok(())
    }

    /// Number of closed loops formed by the interface edges.
    pub fn interface_loop_count(&self) -> usize {
        let mut next: std::collections::HashMap<usize, Vec<usize>> =
            std::collections::HashMap::new();
        let mut iface_edges = Vec::new();
        for (e, tag) in self.edge_tags.iter().enumerate() {
            if *tag == Some(EdgeTag::Interface) {
                iface_edges.push(e);
                let [a, b] = self.edges[e];
                next.entry(a).or_default().push(e);
                next.entry(b).or_default().push(e);
            }
        }
        let mut seen = vec![false; self.num_edges()];
        let mut loops = 0;
        for &start in &iface_edges {
            if seen[start] {
                continue;
            }
            loops += 1;
            // walk the loop
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(e) = stack.pop() {
                for &v in &self.edges[e] {
                    for &e2 in next.get(&v).map(|v| v.as_slice()).unwrap_or(&[]) {
                        if !seen[e2] {
                            seen[e2] = true;
                            stack.push(e2);
                        }
                    }
                }
            }
        }
        loops
    }
}

/// Index maps produced by [`TriMesh::extract_region`].
#[derive(Debug, Clone)]
pub struct SubmeshMap {
    pub elem_to_parent: Vec<ElemId>,
    pub vertex_to_parent: Vec<VertexId>,
    pub parent_to_sub: Vec<Option<ElemId>>,
}

pub fn signed_area(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2]) -> f64 {
    0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
