//! Lowest-order Raviart-Thomas flux fields and the two flux producers used
//! by the bound computations: patchwise equilibration (exact elementwise
//! divergence targets) and global majorant minimization (weighted
//! divergence/gap trade-off solved by normal equations).
//!
//! Edge coefficients store the integrated normal flux through each mesh
//! edge with respect to the global lower-to-higher vertex orientation, so a
//! single coefficient serves both neighbouring triangles.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::mesh::{EdgeId, ElemId, Region, TriMesh, VertexId};
use crate::quad::{self, Rule};
use crate::sparse::{pcg, CsrMatrix};

#[derive(Debug, thiserror::Error)]
pub enum FluxError {
    #[error("data length {0} does not match mesh element count {1}")]
    SizeMismatch(usize, usize),
    #[error("singular local problem at vertex {0}")]
    SingularPatch(VertexId),
    #[error("flux solver stalled at relative residual {residual} after {iterations} iterations")]
    SolverStalled { iterations: usize, residual: f64 },
}

/// An RT0 vector field: one integrated normal flux per edge.
#[derive(Debug, Clone)]
pub struct FluxFieldRT0 {
    pub mesh: Arc<TriMesh>,
    pub coeffs: Vec<f64>,
}

impl FluxFieldRT0 {
    pub fn zero(mesh: &Arc<TriMesh>) -> Self {
        FluxFieldRT0 {
            mesh: Arc::clone(mesh),
            coeffs: vec![0.0; mesh.num_edges()],
        }
    }

    /// Edge-midpoint interpolant of a vector field; exact when the normal
    /// trace of `q` is linear along every edge.
    pub fn interpolate<F: Fn([f64; 2]) -> [f64; 2]>(mesh: &Arc<TriMesh>, q: F) -> Self {
        let coeffs = (0..mesh.num_edges())
            .map(|e| {
                let [a, b] = mesh.edges[e];
                let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
                let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
                let n = mesh.edge_normal(e);
                let v = q(mid);
                mesh.edge_length(e) * (v[0] * n[0] + v[1] * n[1])
            })
            .collect();
        FluxFieldRT0 {
            mesh: Arc::clone(mesh),
            coeffs,
        }
    }

    /// Field value inside triangle `t` at physical point `x`. The basis for
    /// an integrated-flux coefficient is `sign/(2|K|) (x - p_opp)`.
    pub fn value_at(&self, t: ElemId, x: [f64; 2]) -> [f64; 2] {
        let area = self.mesh.area(t);
        let mut v = [0.0, 0.0];
        for i in 0..3 {
            let e = self.mesh.edge_of_tri[t][i];
            let opp = self.mesh.vertices[self.mesh.triangles[t][i]];
            let scale = self.coeffs[e] * self.mesh.edge_sign(t, i) / (2.0 * area);
            v[0] += scale * (x[0] - opp[0]);
            v[1] += scale * (x[1] - opp[1]);
        }
        v
    }

    /// Constant divergence on triangle `t`: outflow over area.
    pub fn divergence(&self, t: ElemId) -> f64 {
        let area = self.mesh.area(t);
        let mut d = 0.0;
        for i in 0..3 {
            let e = self.mesh.edge_of_tri[t][i];
            d += self.coeffs[e] * self.mesh.edge_sign(t, i);
        }
        d / area
    }

    /// L2 norm of the (piecewise constant) divergence.
    pub fn div_l2_norm(&self) -> f64 {
        (0..self.mesh.num_triangles())
            .map(|t| {
                let d = self.divergence(t);
                self.mesh.area(t) * d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `a * other` coefficientwise.
    pub fn scaled_add(&mut self, a: f64, other: &FluxFieldRT0) {
        for (c, o) in self.coeffs.iter_mut().zip(other.coeffs.iter()) {
            *c += a * o;
        }
    }
}

/// Re-expresses an RT0 field on a nested refinement: every fine-edge
/// coefficient is the integrated normal trace of the coarse field through
/// that edge, evaluated on the parent element of an adjacent fine element.
/// Exact (each fine edge lies inside one parent or on a parent edge, where
/// the normal trace is single-valued) and divergence values carry over.
pub fn transfer_rt0(
    coarse: &FluxFieldRT0,
    fine_mesh: &Arc<TriMesh>,
    ancestors: &[ElemId],
) -> Result<FluxFieldRT0, FluxError> {
    if ancestors.len() != fine_mesh.num_triangles() {
        return Err(FluxError::SizeMismatch(
            ancestors.len(),
            fine_mesh.num_triangles(),
        ));
    }
    let mut coeffs = vec![0.0; fine_mesh.num_edges()];
    for (e, coeff) in coeffs.iter_mut().enumerate() {
        let t = fine_mesh.tri_of_edge[e][0].expect("every edge has an adjacent element");
        let parent = ancestors[t];
        let [a, b] = fine_mesh.edges[e];
        let (pa, pb) = (fine_mesh.vertices[a], fine_mesh.vertices[b]);
        let mid = [(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0];
        let n = fine_mesh.edge_normal(e);
        let v = coarse.value_at(parent, mid);
        *coeff = fine_mesh.edge_length(e) * (v[0] * n[0] + v[1] * n[1]);
    }
    Ok(FluxFieldRT0 {
        mesh: Arc::clone(fine_mesh),
        coeffs,
    })
}

/// Elementwise means of a scalar function.
pub fn projection_p0<F: Fn(ElemId, [f64; 2]) -> f64>(
    mesh: &TriMesh,
    f: F,
    rule: Rule,
) -> Vec<f64> {
    (0..mesh.num_triangles())
        .map(|t| {
            let [p0, p1, p2] = mesh.coords(t);
            quad::integrate(rule, p0, p1, p2, |x, y| f(t, [x, y])) / mesh.area(t)
        })
        .collect()
}

/// Hat-function moments per element: `result[t][a]` integrates the local
/// hat of vertex `a` against `f` over element `t`.
pub fn vertex_moments<F: Fn(ElemId, [f64; 2]) -> f64>(
    mesh: &TriMesh,
    f: F,
    rule: Rule,
) -> Vec<[f64; 3]> {
    let pts = quad::points(rule);
    (0..mesh.num_triangles())
        .map(|t| {
            let [p0, p1, p2] = mesh.coords(t);
            let jac = 2.0 * mesh.area(t);
            let mut m = [0.0; 3];
            for q in &pts {
                let x = p0[0] + (p1[0] - p0[0]) * q.x + (p2[0] - p0[0]) * q.y;
                let y = p0[1] + (p1[1] - p0[1]) * q.x + (p2[1] - p0[1]) * q.y;
                let v = f(t, [x, y]);
                let l = [1.0 - q.x - q.y, q.x, q.y];
                for a in 0..3 {
                    m[a] += q.w * jac * v * l[a];
                }
            }
            m
        })
        .collect()
}

// Entries of the local RT0 basis product integral over triangle t with a
// scalar weight, by degree-4 quadrature (exact: the integrand is quadratic).
fn local_rt0_mass(mesh: &TriMesh, t: ElemId, weight: f64) -> [[f64; 9]; 1] {
    let [p0, p1, p2] = mesh.coords(t);
    let area = mesh.area(t);
    let jac = 2.0 * area;
    let opp = [
        mesh.vertices[mesh.triangles[t][0]],
        mesh.vertices[mesh.triangles[t][1]],
        mesh.vertices[mesh.triangles[t][2]],
    ];
    let mut scale = [0.0; 3];
    for i in 0..3 {
        scale[i] = mesh.edge_sign(t, i) / (2.0 * area);
    }
    let mut m = [[0.0; 9]; 1];
    for q in quad::points(Rule::Degree4) {
        let x = p0[0] + (p1[0] - p0[0]) * q.x + (p2[0] - p0[0]) * q.y;
        let y = p0[1] + (p1[1] - p0[1]) * q.x + (p2[1] - p0[1]) * q.y;
        let mut basis = [[0.0; 2]; 3];
        for i in 0..3 {
            basis[i] = [scale[i] * (x - opp[i][0]), scale[i] * (y - opp[i][1])];
        }
        for i in 0..3 {
            for j in 0..3 {
                m[0][3 * i + j] += q.w
                    * jac
                    * weight
                    * (basis[i][0] * basis[j][0] + basis[i][1] * basis[j][1]);
            }
        }
    }
    m
}

/// Patchwise equilibration: returns an RT0 field whose divergence on each
/// element equals the elementwise mean of the hat moments, by solving one
/// small constrained least-squares problem per vertex and summing.
///
/// `moments[t][a]` must integrate the hat of local vertex `a` against the
/// divergence target density over `t`, and `q0` is the piecewise-constant
/// flux the result should stay close to (in the `1/eps` norm). Exact
/// elementwise divergence relies on the caller passing Galerkin-consistent
/// data: for every interior vertex the moment total must cancel the
/// `q0`-gradient pairing, which holds when `q0` is the discrete flux of the
/// solution the moments were assembled from.
pub fn equilibrate_patchwise(
    mesh: &Arc<TriMesh>,
    moments: &[[f64; 3]],
    q0: &[[f64; 2]],
    eps_m: f64,
    eps_s: f64,
) -> Result<FluxFieldRT0, FluxError> {
    if moments.len() != mesh.num_triangles() {
        return Err(FluxError::SizeMismatch(moments.len(), mesh.num_triangles()));
    }
    if q0.len() != mesh.num_triangles() {
        return Err(FluxError::SizeMismatch(q0.len(), mesh.num_triangles()));
    }
    let mut patches: Vec<Vec<ElemId>> = vec![Vec::new(); mesh.num_vertices()];
    for t in 0..mesh.num_triangles() {
        for &v in &mesh.triangles[t] {
            patches[v].push(t);
        }
    }
    let mut result = FluxFieldRT0::zero(mesh);
    for z in 0..mesh.num_vertices() {
        let elems = &patches[z];
        if elems.is_empty() {
            continue;
        }
        // free DOFs: spoke edges plus rim edges on the outer boundary
        let mut free: Vec<EdgeId> = Vec::new();
        let mut patch_boundary_dof = false;
        for &t in elems {
            for i in 0..3 {
                let e = mesh.edge_of_tri[t][i];
                let [a, b] = mesh.edges[e];
                let is_spoke = a == z || b == z;
                let on_boundary = mesh.tri_of_edge[e][1].is_none();
                if (is_spoke || on_boundary) && !free.contains(&e) {
                    free.push(e);
                    if on_boundary {
                        patch_boundary_dof = true;
                    }
                }
            }
        }
        let n_free = free.len();
        let index_of = |e: EdgeId| free.iter().position(|&f| f == e);

        // target: RT0 interpolant of (hat_z * q0), averaging the normal
        // trace across interior spokes
        let mut c_target = vec![0.0; n_free];
        for (k, &e) in free.iter().enumerate() {
            let [a, b] = mesh.edges[e];
            if a != z && b != z {
                continue;
            }
            let n = mesh.edge_normal(e);
            let len = mesh.edge_length(e);
            let [t0, t1] = mesh.tri_of_edge[e];
            let mut trace = 0.0;
            let mut sides = 0.0;
            for t in [t0, t1].into_iter().flatten() {
                if elems.contains(&t) {
                    trace += q0[t][0] * n[0] + q0[t][1] * n[1];
                    sides += 1.0;
                }
            }
            // hat of z integrates to len/2 along a spoke
            c_target[k] = 0.5 * len * trace / sides;
        }

        // weighted mass matrix and target load over the patch
        let mut m = DMatrix::<f64>::zeros(n_free, n_free);
        for &t in elems {
            let w = match mesh.regions[t] {
                Region::Molecule => 1.0 / eps_m,
                Region::Solvent => 1.0 / eps_s,
            };
            let local = local_rt0_mass(mesh, t, w);
            for i in 0..3 {
                let Some(gi) = index_of(mesh.edge_of_tri[t][i]) else {
                    continue;
                };
                for j in 0..3 {
                    let Some(gj) = index_of(mesh.edge_of_tri[t][j]) else {
                        continue;
                    };
                    m[(gi, gj)] += local[0][3 * i + j];
                }
            }
        }
        let mut b = DVector::<f64>::zeros(n_free);
        for i in 0..n_free {
            let mut acc = 0.0;
            for j in 0..n_free {
                acc += m[(i, j)] * c_target[j];
            }
            b[i] = acc;
        }

        // divergence constraints, one row per patch element
        let n_con_full = elems.len();
        let drop_row = !patch_boundary_dof && n_con_full > 1;
        let n_con = if drop_row { n_con_full - 1 } else { n_con_full };
        let mut bmat = DMatrix::<f64>::zeros(n_con, n_free);
        let mut d = DVector::<f64>::zeros(n_con);
        for (row, &t) in elems.iter().take(n_con).enumerate() {
            let area = mesh.area(t);
            for i in 0..3 {
                if let Some(gi) = index_of(mesh.edge_of_tri[t][i]) {
                    bmat[(row, gi)] = mesh.edge_sign(t, i) / area;
                }
            }
            let local = mesh.triangles[t].iter().position(|&v| v == z).unwrap();
            let (grads, _) = mesh.p1_gradients(t);
            d[row] = moments[t][local] / area
                + q0[t][0] * grads[local][0]
                + q0[t][1] * grads[local][1];
        }

        // KKT system for min 1/2 c'Mc - c'b subject to Bc = d
        let dim = n_free + n_con;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        kkt.view_mut((0, 0), (n_free, n_free)).copy_from(&m);
        kkt.view_mut((0, n_free), (n_free, n_con))
            .copy_from(&bmat.transpose());
        kkt.view_mut((n_free, 0), (n_con, n_free)).copy_from(&bmat);
        let mut rhs = DVector::<f64>::zeros(dim);
        rhs.rows_mut(0, n_free).copy_from(&b);
        rhs.rows_mut(n_free, n_con).copy_from(&d);
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or(FluxError::SingularPatch(z))?;
        for (k, &e) in free.iter().enumerate() {
            result.coeffs[e] += sol[k];
        }
    }
    Ok(result)
}

/// Result of the global weighted majorant minimization.
#[derive(Debug, Clone)]
pub struct MajorantMin {
    pub flux: FluxFieldRT0,
    pub alpha: f64,
    /// `friedrichs/sqrt(eps_min) * ||div y|| + ||target - y||_{1/eps}`.
    pub majorant: f64,
    pub div_norm: f64,
    pub gap_norm: f64,
}

// Squared majorant at weight alpha: (1+alpha) p + (1+1/alpha) b, with
// p the scaled divergence part and b the squared gap.
#[cfg(test)]
fn weighted_value(p: f64, b: f64, alpha: f64) -> f64 {
    (1.0 + alpha) * p + (1.0 + 1.0 / alpha) * b
}

/// Minimizes the weighted majorant over all RT0 fields: two sweeps of
/// normal equations with the weight updated to its closed-form optimum
/// between them.
pub fn minimize_majorant_linear<F: Fn(ElemId, [f64; 2]) -> [f64; 2]>(
    mesh: &Arc<TriMesh>,
    eps_m: f64,
    eps_s: f64,
    friedrichs: f64,
    target: F,
    rule: Rule,
) -> Result<MajorantMin, FluxError> {
    let eps_min = eps_m.min(eps_s);
    let c_div = friedrichs * friedrichs / eps_min;
    let ne = mesh.num_edges();

    // divergence bilinear form: sum_K |K| div div'
    let mut div_trips = Vec::with_capacity(9 * mesh.num_triangles());
    // 1/eps RT0 mass
    let mut mass_trips = Vec::with_capacity(9 * mesh.num_triangles());
    // target load: int (1/eps) target . basis_e
    let mut g = vec![0.0; ne];
    let pts = quad::points(rule);
    for t in 0..mesh.num_triangles() {
        let area = mesh.area(t);
        let w = match mesh.regions[t] {
            Region::Molecule => 1.0 / eps_m,
            Region::Solvent => 1.0 / eps_s,
        };
        let edges = mesh.edge_of_tri[t];
        let mut s = [0.0; 3];
        for i in 0..3 {
            s[i] = mesh.edge_sign(t, i);
        }
        for i in 0..3 {
            for j in 0..3 {
                div_trips.push((edges[i], edges[j], s[i] * s[j] / area));
            }
        }
        let local = local_rt0_mass(mesh, t, w);
        for i in 0..3 {
            for j in 0..3 {
                mass_trips.push((edges[i], edges[j], local[0][3 * i + j]));
            }
        }
        let [p0, p1, p2] = mesh.coords(t);
        let jac = 2.0 * area;
        let opp = [
            mesh.vertices[mesh.triangles[t][0]],
            mesh.vertices[mesh.triangles[t][1]],
            mesh.vertices[mesh.triangles[t][2]],
        ];
        for q in &pts {
            let x = p0[0] + (p1[0] - p0[0]) * q.x + (p2[0] - p0[0]) * q.y;
            let y = p0[1] + (p1[1] - p0[1]) * q.x + (p2[1] - p0[1]) * q.y;
            let tv = target(t, [x, y]);
            for i in 0..3 {
                let bx = s[i] / (2.0 * area) * (x - opp[i][0]);
                let by = s[i] / (2.0 * area) * (y - opp[i][1]);
                g[edges[i]] += q.w * jac * w * (tv[0] * bx + tv[1] * by);
            }
        }
    }
    let div_mat = CsrMatrix::from_triplets(ne, &div_trips);
    let mass = CsrMatrix::from_triplets(ne, &mass_trips);

    let solve_at = |alpha: f64| -> Result<FluxFieldRT0, FluxError> {
        let ca = (1.0 + alpha) * c_div;
        let cb = 1.0 + 1.0 / alpha;
        let mut trips = Vec::with_capacity(div_mat.values.len() + mass.values.len());
        for r in 0..ne {
            for k in div_mat.row_ptr[r]..div_mat.row_ptr[r + 1] {
                trips.push((r, div_mat.col_idx[k], ca * div_mat.values[k]));
            }
            for k in mass.row_ptr[r]..mass.row_ptr[r + 1] {
                trips.push((r, mass.col_idx[k], cb * mass.values[k]));
            }
        }
        let system = CsrMatrix::from_triplets(ne, &trips);
        let rhs: Vec<f64> = g.iter().map(|v| cb * v).collect();
        let sol = pcg(&system, &rhs, 1e-12, 40 * ne + 200);
        if !sol.converged {
            return Err(FluxError::SolverStalled {
                iterations: sol.iterations,
                residual: sol.relative_residual,
            });
        }
        Ok(FluxFieldRT0 {
            mesh: Arc::clone(mesh),
            coeffs: sol.x,
        })
    };
    let parts = |flux: &FluxFieldRT0| -> (f64, f64) {
        let a: f64 = (0..mesh.num_triangles())
            .map(|t| {
                let d = flux.divergence(t);
                mesh.area(t) * d * d
            })
            .sum();
        let mut b = 0.0;
        for t in 0..mesh.num_triangles() {
            let w = match mesh.regions[t] {
                Region::Molecule => 1.0 / eps_m,
                Region::Solvent => 1.0 / eps_s,
            };
            let [p0, p1, p2] = mesh.coords(t);
            b += quad::integrate(rule, p0, p1, p2, |x, y| {
                let tv = target(t, [x, y]);
                let yv = flux.value_at(t, [x, y]);
                let dx = tv[0] - yv[0];
                let dy = tv[1] - yv[1];
                w * (dx * dx + dy * dy)
            });
        }
        (c_div * a, b)
    };

    let mut alpha = 1.0;
    let mut flux = solve_at(alpha)?;
    let (mut p, mut b) = parts(&flux);
    let scale = p + b;
    if p > 1e-24 * scale && b > 1e-24 * scale {
        alpha = (b / p).sqrt().clamp(1e-6, 1e6);
        flux = solve_at(alpha)?;
        let refreshed = parts(&flux);
        p = refreshed.0;
        b = refreshed.1;
    }
    let div_norm = (p / c_div).sqrt();
    let gap_norm = b.sqrt();
    Ok(MajorantMin {
        flux,
        alpha,
        majorant: p.sqrt() + gap_norm,
        div_norm,
        gap_norm,
    })
}
