//! P1 finite elements: stiffness assembly, Dirichlet elimination, the four
//! constrained solves (harmonic, linear, nonlinear, direct), energy
//! functionals, and field norms.
//!
//! The nonlinear solves use damped Newton with an energy-descent line
//! search; sinh/cosh arguments are clamped at +-700 and every clamp in a
//! final assembly is counted, so saturated runs can be flagged instead of
//! silently reporting overflowed bounds.

use std::sync::Arc;

use crate::mesh::{ElemId, Region, TriMesh};
use crate::problem::{ProblemError, ProblemSpec};
use crate::quad::{self, Rule};
use crate::sparse::{pcg, CsrMatrix};

/// Clamp threshold for sinh/cosh arguments.
pub const SINH_CLAMP: f64 = 700.0;

/// Relative residual target for the conjugate-gradient solves.
pub const DEFAULT_LIN_TOL: f64 = 1e-12;

/// Relative residual target for Newton iterations.
pub const DEFAULT_NEWTON_TOL: f64 = 1e-10;

const MAX_NEWTON: usize = 30;
const MAX_HALVINGS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum FemError {
    #[error("degenerate triangle {0}")]
    Degenerate(ElemId),
    #[error("linear solver stalled at relative residual {residual} after {iterations} iterations")]
    SolverStalled { iterations: usize, residual: f64 },
    #[error("Newton stalled at relative residual {residual} after {iterations} iterations")]
    NewtonStalled { iterations: usize, residual: f64 },
    #[error("no unconstrained nodes to solve for")]
    EmptyInterior,
    #[error("field size {0} does not match mesh vertex count {1}")]
    SizeMismatch(usize, usize),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// A continuous piecewise-linear field: one coefficient per mesh vertex.
/// Entries under the Dirichlet mask hold their imposed values.
#[derive(Debug, Clone)]
pub struct ScalarFieldP1 {
    pub mesh: Arc<TriMesh>,
    pub values: Vec<f64>,
    pub dirichlet: Vec<bool>,
}

impl ScalarFieldP1 {
    pub fn zero(mesh: &Arc<TriMesh>) -> Self {
        ScalarFieldP1 {
            mesh: Arc::clone(mesh),
            values: vec![0.0; mesh.num_vertices()],
            dirichlet: vec![false; mesh.num_vertices()],
        }
    }

    /// Nodal interpolant of a function, with no constrained entries.
    pub fn interpolate<F: Fn([f64; 2]) -> f64>(mesh: &Arc<TriMesh>, f: F) -> Self {
        ScalarFieldP1 {
            mesh: Arc::clone(mesh),
            values: mesh.vertices.iter().map(|&p| f(p)).collect(),
            dirichlet: vec![false; mesh.num_vertices()],
        }
    }

    /// Field value inside triangle `t` at physical point `x`.
    pub fn value_in(&self, t: ElemId, x: [f64; 2]) -> f64 {
        let l = self.mesh.barycentric(t, x);
        let tri = self.mesh.triangles[t];
        l[0] * self.values[tri[0]] + l[1] * self.values[tri[1]] + l[2] * self.values[tri[2]]
    }

    /// Constant gradient on triangle `t`.
    pub fn gradient(&self, t: ElemId) -> [f64; 2] {
        let (grads, _) = self.mesh.p1_gradients(t);
        let tri = self.mesh.triangles[t];
        let mut g = [0.0, 0.0];
        for i in 0..3 {
            g[0] += self.values[tri[i]] * grads[i][0];
            g[1] += self.values[tri[i]] * grads[i][1];
        }
        g
    }

    /// Largest nodal magnitude.
    pub fn linf_nodal(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Per-level ledger row filled by the adaptive driver; every report and
/// relative bound is computed from these fields.
#[derive(Debug, Clone)]
pub struct LevelRecord {
    pub level: usize,
    pub elements: usize,
    pub l2_norm: f64,
    /// Energy norm |||grad v||| of the iterate.
    pub energy_norm: f64,
    /// Dual gap |||eps grad v − y*|||_* of the pair.
    pub dual_gap: f64,
    /// Stage majorant as reported (M+ for linear stages, sqrt(2) M+ for
    /// nonlinear ones).
    pub majorant: f64,
    /// Energy-difference minorant; linear stages only.
    pub minorant: Option<f64>,
    pub energy_j: f64,
    /// L2 norm of div y0 of the minimized flux.
    pub div_norm: f64,
    /// Combined energy norm of the (iterate, flux) pair.
    pub cen_pair: f64,
    /// Nonlinear duality term 2 D_F; zero on linear stages.
    pub df2: f64,
    /// Weight from the majorant minimization, when one was run.
    pub alpha: Option<f64>,
}

/// sinh with the argument clamped to +-SINH_CLAMP; counts clamps.
pub(crate) fn clamped_sinh(x: f64, clamps: &mut u64) -> f64 {
    if x.abs() > SINH_CLAMP {
        *clamps += 1;
        SINH_CLAMP.copysign(x).sinh()
    } else {
        x.sinh()
    }
}

/// cosh with the argument clamped to +-SINH_CLAMP; counts clamps.
pub(crate) fn clamped_cosh(x: f64, clamps: &mut u64) -> f64 {
    if x.abs() > SINH_CLAMP {
        *clamps += 1;
        f64::INFINITY
    } else {
        x.cosh()
    }
}

fn eps_of(region: Region, eps_m: f64, eps_s: f64) -> f64 {
    match region {
        Region::Molecule => eps_m,
        Region::Solvent => eps_s,
    }
}

/// Assembles the full (unconstrained) stiffness matrix of the dielectric
/// form; rows of the result sum to zero.
pub fn assemble_stiffness(mesh: &TriMesh, eps_m: f64, eps_s: f64) -> Result<CsrMatrix, FemError> {
    let mut trips = Vec::with_capacity(9 * mesh.num_triangles());
    for t in 0..mesh.num_triangles() {
        let (grads, area) = mesh.p1_gradients(t);
        if !(area > 0.0) {
            return Err(FemError::Degenerate(t));
        }
        let eps = eps_of(mesh.regions[t], eps_m, eps_s);
        let tri = mesh.triangles[t];
        for i in 0..3 {
            for j in 0..3 {
                let v = eps * area * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                trips.push((tri[i], tri[j], v));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(mesh.num_vertices(), &trips))
}

/// Symmetric Dirichlet elimination: constrained rows/columns become the
/// identity, their coupling moves to the right-hand side.
pub fn apply_dirichlet(
    a: &CsrMatrix,
    mask: &[bool],
    bc_values: &[f64],
    rhs: &mut [f64],
) -> CsrMatrix {
    let mut trips = Vec::with_capacity(a.values.len());
    for r in 0..a.n {
        if mask[r] {
            trips.push((r, r, 1.0));
            continue;
        }
        for k in a.row_ptr[r]..a.row_ptr[r + 1] {
            let c = a.col_idx[k];
            if mask[c] {
                rhs[r] -= a.values[k] * bc_values[c];
            } else {
                trips.push((r, c, a.values[k]));
            }
        }
    }
    for (r, &m) in mask.iter().enumerate() {
        if m {
            rhs[r] = bc_values[r];
        }
    }
    CsrMatrix::from_triplets(a.n, &trips)
}

/// Constrained SPD solve used by every linear stage.
fn solve_constrained(
    a: &CsrMatrix,
    mask: &[bool],
    bc_values: &[f64],
    rhs: &[f64],
    lin_tol: f64,
) -> Result<(Vec<f64>, usize, f64), FemError> {
    if mask.iter().all(|&m| m) {
        return Err(FemError::EmptyInterior);
    }
    let mut b = rhs.to_vec();
    let constrained = apply_dirichlet(a, mask, bc_values, &mut b);
    let result = pcg(&constrained, &b, lin_tol, 20 * a.n + 200);
    if !result.converged {
        return Err(FemError::SolverStalled {
            iterations: result.iterations,
            residual: result.relative_residual,
        });
    }
    Ok((result.x, result.iterations, result.relative_residual))
}

/// Outcome details of a constrained linear solve.
#[derive(Debug, Clone)]
pub struct LinearSolveInfo {
    pub iterations: usize,
    pub relative_residual: f64,
    /// How far interior nodal extrema exceed the boundary-data range; zero
    /// on meshes satisfying the discrete maximum principle.
    pub max_principle_violation: f64,
}

/// Solves the discrete Laplace problem on the molecule sub-mesh with the
/// negated Coulombic field as boundary data.
pub fn solve_harmonic(
    mesh: &Arc<TriMesh>,
    spec: &ProblemSpec,
    lin_tol: f64,
) -> Result<(ScalarFieldP1, LinearSolveInfo), FemError> {
    let mask = mesh.outer_boundary_vertices();
    let mut bc = vec![0.0; mesh.num_vertices()];
    for (v, &on) in mask.iter().enumerate() {
        if on {
            let (g, _) = spec.green_2d(mesh.vertices[v])?;
            bc[v] = -g;
        }
    }
    let a = assemble_stiffness(mesh, 1.0, 1.0)?;
    let rhs = vec![0.0; mesh.num_vertices()];
    let (values, iterations, relative_residual) = solve_constrained(&a, &mask, &bc, &rhs, lin_tol)?;

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, &on) in mask.iter().enumerate() {
        if on {
            lo = lo.min(bc[v]);
            hi = hi.max(bc[v]);
        }
    }
    let mut violation = 0.0_f64;
    for (v, &on) in mask.iter().enumerate() {
        if !on {
            violation = violation.max(values[v] - hi).max(lo - values[v]);
        }
    }
    Ok((
        ScalarFieldP1 {
            mesh: Arc::clone(mesh),
            values,
            dirichlet: mask,
        },
        LinearSolveInfo {
            iterations,
            relative_residual,
            max_principle_violation: violation.max(0.0),
        },
    ))
}

/// Solves the linear component: dielectric form against the given load,
/// with nodal boundary data from `bc` on the outer boundary.
pub fn solve_linear_component<F: Fn([f64; 2]) -> f64>(
    mesh: &Arc<TriMesh>,
    spec: &ProblemSpec,
    load: &[f64],
    bc: F,
    lin_tol: f64,
) -> Result<(ScalarFieldP1, LinearSolveInfo), FemError> {
    if load.len() != mesh.num_vertices() {
        return Err(FemError::SizeMismatch(load.len(), mesh.num_vertices()));
    }
    let mask = mesh.outer_boundary_vertices();
    let mut bc_values = vec![0.0; mesh.num_vertices()];
    for (v, &on) in mask.iter().enumerate() {
        if on {
            bc_values[v] = bc(mesh.vertices[v]);
        }
    }
    let a = assemble_stiffness(mesh, spec.eps_m, spec.eps_s)?;
    let (values, iterations, relative_residual) =
        solve_constrained(&a, &mask, &bc_values, load, lin_tol)?;
    Ok((
        ScalarFieldP1 {
            mesh: Arc::clone(mesh),
            values,
            dirichlet: mask,
        },
        LinearSolveInfo {
            iterations,
            relative_residual,
            max_principle_violation: 0.0,
        },
    ))
}

/// Outcome details of a damped Newton solve.
#[derive(Debug, Clone)]
pub struct NewtonInfo {
    pub newton_iterations: usize,
    pub cg_iterations_total: usize,
    pub final_relative_residual: f64,
    /// Clamp events in the final residual assembly; nonzero means the
    /// reported solution saturated the nonlinearity.
    pub saturation_count: u64,
}

struct NonlinearSystem<'a> {
    mesh: &'a Arc<TriMesh>,
    spec: &'a ProblemSpec,
    stiffness: CsrMatrix,
    mask: Vec<bool>,
    bc_values: Vec<f64>,
    load: Vec<f64>,
    /// Shift values per solvent element and quadrature point.
    shift_at: Vec<Option<Vec<f64>>>,
    quad_pts: Vec<quad::QuadPoint>,
}

impl<'a> NonlinearSystem<'a> {
    fn new<W: Fn(ElemId, [f64; 2]) -> f64>(
        mesh: &'a Arc<TriMesh>,
        spec: &'a ProblemSpec,
        shift: W,
        load: Vec<f64>,
        mask: Vec<bool>,
        bc_values: Vec<f64>,
    ) -> Result<Self, FemError> {
        let stiffness = assemble_stiffness(mesh, spec.eps_m, spec.eps_s)?;
        let quad_pts = quad::points(Rule::Degree7);
        let mut shift_at = vec![None; mesh.num_triangles()];
        for t in 0..mesh.num_triangles() {
            if mesh.regions[t] != Region::Solvent {
                continue;
            }
            let [p0, p1, p2] = mesh.coords(t);
            let vals = quad_pts
                .iter()
                .map(|q| {
                    let x = p0[0] + (p1[0] - p0[0]) * q.x + (p2[0] - p0[0]) * q.y;
                    let y = p0[1] + (p1[1] - p0[1]) * q.x + (p2[1] - p0[1]) * q.y;
                    shift(t, [x, y])
                })
                .collect();
            shift_at[t] = Some(vals);
        }
        Ok(NonlinearSystem {
            mesh,
            spec,
            stiffness,
            mask,
            bc_values,
            load,
            shift_at,
            quad_pts,
        })
    }

    // P1 values of `u` at the quadrature points of element t.
    fn u_at_quad(&self, u: &[f64], t: ElemId) -> Vec<f64> {
        let tri = self.mesh.triangles[t];
        self.quad_pts
            .iter()
            .map(|q| {
                let l0 = 1.0 - q.x - q.y;
                l0 * u[tri[0]] + q.x * u[tri[1]] + q.y * u[tri[2]]
            })
            .collect()
    }

    /// Residual on free nodes (Dirichlet rows zeroed) and its norm.
    fn residual(&self, u: &[f64], clamps: &mut u64) -> (Vec<f64>, f64) {
        let mut r = vec![0.0; u.len()];
        self.stiffness.mul_vec(u, &mut r);
        for (ri, li) in r.iter_mut().zip(self.load.iter()) {
            *ri -= li;
        }
        for t in 0..self.mesh.num_triangles() {
            let shift = match &self.shift_at[t] {
                Some(s) => s,
                None => continue,
            };
            let jac = 2.0 * self.mesh.area(t);
            let tri = self.mesh.triangles[t];
            let uq = self.u_at_quad(u, t);
            for (k, q) in self.quad_pts.iter().enumerate() {
                let s = self.spec.ks2 * clamped_sinh(uq[k] + shift[k], clamps);
                let l = [1.0 - q.x - q.y, q.x, q.y];
                for i in 0..3 {
                    r[tri[i]] += q.w * jac * s * l[i];
                }
            }
        }
        for (ri, &m) in r.iter_mut().zip(self.mask.iter()) {
            if m {
                *ri = 0.0;
            }
        }
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        (r, norm)
    }

    /// Jacobian: stiffness plus the cosh-weighted solvent mass matrix.
    fn jacobian(&self, u: &[f64], clamps: &mut u64) -> CsrMatrix {
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        for t in 0..self.mesh.num_triangles() {
            let shift = match &self.shift_at[t] {
                Some(s) => s,
                None => continue,
            };
            let jac = 2.0 * self.mesh.area(t);
            let tri = self.mesh.triangles[t];
            let uq = self.u_at_quad(u, t);
            let mut local = [[0.0; 3]; 3];
            for (k, q) in self.quad_pts.iter().enumerate() {
                let c = self.spec.ks2 * clamped_cosh(uq[k] + shift[k], clamps);
                let c = if c.is_finite() { c } else { f64::MAX / 1e30 };
                let l = [1.0 - q.x - q.y, q.x, q.y];
                for i in 0..3 {
                    for j in 0..3 {
                        local[i][j] += q.w * jac * c * l[i] * l[j];
                    }
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    trips.push((tri[i], tri[j], local[i][j]));
                }
            }
        }
        let mass = CsrMatrix::from_triplets(self.mesh.num_vertices(), &trips);
        let mut all = Vec::with_capacity(self.stiffness.values.len() + mass.values.len());
        for r in 0..self.stiffness.n {
            for k in self.stiffness.row_ptr[r]..self.stiffness.row_ptr[r + 1] {
                all.push((r, self.stiffness.col_idx[k], self.stiffness.values[k]));
            }
            for k in mass.row_ptr[r]..mass.row_ptr[r + 1] {
                all.push((r, mass.col_idx[k], mass.values[k]));
            }
        }
        CsrMatrix::from_triplets(self.mesh.num_vertices(), &all)
    }

    /// Energy functional: quadratic part, cosh well, minus the load term.
    fn energy(&self, u: &[f64], clamps: &mut u64) -> f64 {
        let mut au = vec![0.0; u.len()];
        self.stiffness.mul_vec(u, &mut au);
        let quad_part: f64 = u.iter().zip(au.iter()).map(|(a, b)| a * b).sum::<f64>() / 2.0;
        let load_part: f64 = u.iter().zip(self.load.iter()).map(|(a, b)| a * b).sum();
        let mut well = 0.0;
        for t in 0..self.mesh.num_triangles() {
            let shift = match &self.shift_at[t] {
                Some(s) => s,
                None => continue,
            };
            let jac = 2.0 * self.mesh.area(t);
            let uq = self.u_at_quad(u, t);
            for (k, q) in self.quad_pts.iter().enumerate() {
                let c = clamped_cosh(uq[k] + shift[k], clamps);
                if c.is_infinite() {
                    return f64::INFINITY;
                }
                well += q.w * jac * self.spec.ks2 * c;
            }
        }
        quad_part + well - load_part
    }

    fn solve(
        &self,
        initial: Option<Vec<f64>>,
        lin_tol: f64,
        newton_tol: f64,
    ) -> Result<(Vec<f64>, NewtonInfo), FemError> {
        let n = self.mesh.num_vertices();
        let mut u = initial.unwrap_or_else(|| vec![0.0; n]);
        for (v, &m) in self.mask.iter().enumerate() {
            if m {
                u[v] = self.bc_values[v];
            }
        }
        let mut scratch = 0u64;
        let (mut res, mut res_norm) = self.residual(&u, &mut scratch);
        let res0 = res_norm;
        let mut cg_total = 0;
        let mut iterations = 0;
        if res0 > 0.0 {
            let mut energy = self.energy(&u, &mut scratch);
            while res_norm > newton_tol * res0 {
                if iterations >= MAX_NEWTON {
                    return Err(FemError::NewtonStalled {
                        iterations,
                        residual: res_norm / res0,
                    });
                }
                let jac = self.jacobian(&u, &mut scratch);
                let mut rhs: Vec<f64> = res.iter().map(|v| -v).collect();
                let constrained = apply_dirichlet(&jac, &self.mask, &vec![0.0; n], &mut rhs);
                let step = pcg(&constrained, &rhs, lin_tol, 20 * n + 200);
                if !step.converged {
                    return Err(FemError::SolverStalled {
                        iterations: step.iterations,
                        residual: step.relative_residual,
                    });
                }
                cg_total += step.iterations;
                let mut accepted = false;
                let mut scale = 1.0;
                for _ in 0..=MAX_HALVINGS {
                    let trial: Vec<f64> = u
                        .iter()
                        .zip(step.x.iter())
                        .map(|(a, d)| a + scale * d)
                        .collect();
                    let mut trial_clamps = 0u64;
                    let trial_energy = self.energy(&trial, &mut trial_clamps);
                    let (trial_res, trial_norm) = self.residual(&trial, &mut trial_clamps);
                    // near convergence the energy settles at rounding level
                    // before the residual does, so residual descent at flat
                    // energy still counts as progress
                    let improves = if energy.is_finite() {
                        trial_energy < energy
                            || (trial_energy <= energy + 1e-12 * energy.abs().max(1.0)
                                && trial_norm < res_norm)
                    } else {
                        trial_norm < res_norm
                    };
                    if improves {
                        u = trial;
                        energy = trial_energy;
                        res = trial_res;
                        res_norm = trial_norm;
                        accepted = true;
                        break;
                    }
                    scale /= 2.0;
                }
                if !accepted {
                    return Err(FemError::NewtonStalled {
                        iterations,
                        residual: res_norm / res0,
                    });
                }
                iterations += 1;
            }
        }
        let mut saturation = 0u64;
        let (_, final_norm) = self.residual(&u, &mut saturation);
        Ok((
            u,
            NewtonInfo {
                newton_iterations: iterations,
                cg_iterations_total: cg_total,
                final_relative_residual: if res0 > 0.0 { final_norm / res0 } else { 0.0 },
                saturation_count: saturation,
            },
        ))
    }
}

/// Solves the nonlinear component with zero outer boundary data: the
/// dielectric form plus the ionic sinh term evaluated at iterate + shift.
pub fn solve_nonlinear_component<W: Fn(ElemId, [f64; 2]) -> f64>(
    mesh: &Arc<TriMesh>,
    spec: &ProblemSpec,
    shift: W,
    initial: Option<Vec<f64>>,
    lin_tol: f64,
    newton_tol: f64,
) -> Result<(ScalarFieldP1, NewtonInfo), FemError> {
    let mask = mesh.outer_boundary_vertices();
    let bc_values = vec![0.0; mesh.num_vertices()];
    let system = NonlinearSystem::new(
        mesh,
        spec,
        shift,
        vec![0.0; mesh.num_vertices()],
        mask.clone(),
        bc_values,
    )?;
    let (values, info) = system.solve(initial, lin_tol, newton_tol)?;
    Ok((
        ScalarFieldP1 {
            mesh: Arc::clone(mesh),
            values,
            dirichlet: mask,
        },
        info,
    ))
}

/// Solves the no-split regular problem: sinh shift zero, load from the
/// interface functional, constant outer boundary data g.
pub fn solve_direct_regular(
    mesh: &Arc<TriMesh>,
    spec: &ProblemSpec,
    load: &[f64],
    initial: Option<Vec<f64>>,
    lin_tol: f64,
    newton_tol: f64,
) -> Result<(ScalarFieldP1, NewtonInfo), FemError> {
    if load.len() != mesh.num_vertices() {
        return Err(FemError::SizeMismatch(load.len(), mesh.num_vertices()));
    }
    let mask = mesh.outer_boundary_vertices();
    let bc_values = vec![spec.g; mesh.num_vertices()];
    let system = NonlinearSystem::new(
        mesh,
        spec,
        |_, _| 0.0,
        load.to_vec(),
        mask.clone(),
        bc_values,
    )?;
    let (values, info) = system.solve(initial, lin_tol, newton_tol)?;
    Ok((
        ScalarFieldP1 {
            mesh: Arc::clone(mesh),
            values,
            dirichlet: mask,
        },
        info,
    ))
}

/// Quadratic energy functional of a linear stage: half the dielectric form
/// minus the load pairing.
pub fn energy_j_linear(field: &ScalarFieldP1, spec: &ProblemSpec, load: &[f64]) -> f64 {
    let a = assemble_stiffness(&field.mesh, spec.eps_m, spec.eps_s).expect("validated mesh");
    let mut av = vec![0.0; field.values.len()];
    a.mul_vec(&field.values, &mut av);
    let quad_part: f64 = field
        .values
        .iter()
        .zip(av.iter())
        .map(|(x, y)| x * y)
        .sum::<f64>()
        / 2.0;
    let load_part: f64 = field
        .values
        .iter()
        .zip(load.iter())
        .map(|(x, y)| x * y)
        .sum();
    quad_part - load_part
}

/// Nonlinear energy: half-form plus the cosh well at iterate + shift.
/// Returns +infinity (and counts) when the well overflows after clamping.
pub fn energy_j_nonlinear<W: Fn(ElemId, [f64; 2]) -> f64>(
    field: &ScalarFieldP1,
    spec: &ProblemSpec,
    shift: W,
    clamps: &mut u64,
) -> f64 {
    let mesh = &field.mesh;
    let a = assemble_stiffness(mesh, spec.eps_m, spec.eps_s).expect("validated mesh");
    let mut av = vec![0.0; field.values.len()];
    a.mul_vec(&field.values, &mut av);
    let quad_part: f64 = field
        .values
        .iter()
        .zip(av.iter())
        .map(|(x, y)| x * y)
        .sum::<f64>()
        / 2.0;
    let mut well = 0.0;
    for t in 0..mesh.num_triangles() {
        if mesh.regions[t] != Region::Solvent {
            continue;
        }
        let [p0, p1, p2] = mesh.coords(t);
        let tri = mesh.triangles[t];
        let jac = 2.0 * mesh.area(t);
        for q in quad::points(Rule::Degree7) {
            let x = p0[0] + (p1[0] - p0[0]) * q.x + (p2[0] - p0[0]) * q.y;
            let y = p0[1] + (p1[1] - p0[1]) * q.x + (p2[1] - p0[1]) * q.y;
            let l0 = 1.0 - q.x - q.y;
            let u = l0 * field.values[tri[0]]
                + q.x * field.values[tri[1]]
                + q.y * field.values[tri[2]];
            let c = clamped_cosh(u + shift(t, [x, y]), clamps);
            if c.is_infinite() {
                return f64::INFINITY;
            }
            well += q.w * jac * spec.ks2 * c;
        }
    }
    quad_part + well
}

/// Direct-problem energy: nonlinear energy with zero shift minus the load
/// pairing.
pub fn energy_j_direct(
    field: &ScalarFieldP1,
    spec: &ProblemSpec,
    load: &[f64],
    clamps: &mut u64,
) -> f64 {
    let well = energy_j_nonlinear(field, spec, |_, _| 0.0, clamps);
    let load_part: f64 = field
        .values
        .iter()
        .zip(load.iter())
        .map(|(x, y)| x * y)
        .sum();
    well - load_part
}

/// L2 norm of a P1 field (exact quadrature).
pub fn l2_norm(field: &ScalarFieldP1) -> f64 {
    let mesh = &field.mesh;
    let mut acc = 0.0;
    for t in 0..mesh.num_triangles() {
        let tri = mesh.triangles[t];
        let jac = 2.0 * mesh.area(t);
        for q in quad::points(Rule::Degree4) {
            let l0 = 1.0 - q.x - q.y;
            let u = l0 * field.values[tri[0]]
                + q.x * field.values[tri[1]]
                + q.y * field.values[tri[2]];
            acc += q.w * jac * u * u;
        }
    }
    acc.sqrt()
}

/// Energy norm |||grad v||| = sqrt(int eps |grad v|^2); exact for P1.
pub fn energy_norm(field: &ScalarFieldP1, eps_m: f64, eps_s: f64) -> f64 {
    let mesh = &field.mesh;
    let mut acc = 0.0;
    for t in 0..mesh.num_triangles() {
        let g = field.gradient(t);
        let eps = eps_of(mesh.regions[t], eps_m, eps_s);
        acc += eps * (g[0] * g[0] + g[1] * g[1]) * mesh.area(t);
    }
    acc.sqrt()
}

/// Energy norm of the difference between a field on a fine mesh and one on
/// a coarse ancestor mesh, integrated exactly over fine elements.
pub fn energy_norm_difference(
    fine: &ScalarFieldP1,
    coarse: &ScalarFieldP1,
    ancestors: &[ElemId],
    eps_m: f64,
    eps_s: f64,
) -> f64 {
    let mesh = &fine.mesh;
    let mut acc = 0.0;
    for t in 0..mesh.num_triangles() {
        let gf = fine.gradient(t);
        let gc = coarse.gradient(ancestors[t]);
        let eps = eps_of(mesh.regions[t], eps_m, eps_s);
        let dx = gf[0] - gc[0];
        let dy = gf[1] - gc[1];
        acc += eps * (dx * dx + dy * dy) * mesh.area(t);
    }
    acc.sqrt()
}

/// Carries nodal values of a coarse-mesh field onto a descendant mesh via
/// the element ancestry (exact for P1: children cover their parent).
pub fn transfer_to_descendant(
    coarse: &ScalarFieldP1,
    fine_mesh: &Arc<TriMesh>,
    ancestors: &[ElemId],
) -> ScalarFieldP1 {
    let mut values = vec![0.0; fine_mesh.num_vertices()];
    let mut seen = vec![false; fine_mesh.num_vertices()];
    for t in 0..fine_mesh.num_triangles() {
        let parent = ancestors[t];
        for &v in &fine_mesh.triangles[t] {
            if !seen[v] {
                values[v] = coarse.value_in(parent, fine_mesh.vertices[v]);
                seen[v] = true;
            }
        }
    }
    ScalarFieldP1 {
        mesh: Arc::clone(fine_mesh),
        values,
        dirichlet: vec![false; fine_mesh.num_vertices()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_disk_in_disk, build_disk_in_square, refine_uniform, MeshHierarchy};
    use crate::problem::{friedrichs_bound, interface_load_2term, FriedrichsDomain, PointCharge};

    fn unit_square_mesh(n: usize) -> TriMesh {
        // structured crossed-diagonal pattern on the unit square
        let mut vertices = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
        let id = |i: usize, j: usize| j * (n + 1) + i;
        let mut triangles = Vec::new();
        for j in 0..n {
            for i in 0..n {
                triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        let regions = vec![Region::Solvent; triangles.len()];
        TriMesh::from_raw(vertices, triangles, regions).unwrap()
    }

    fn plain_spec() -> ProblemSpec {
        ProblemSpec {
            eps_m: 1.0,
            eps_s: 1.0,
            ks2: 0.0,
            charge_scale: 1.0,
            charges: Vec::new(),
            g: 0.0,
            dimension: 2,
        }
    }

    #[test]
    fn element_matrix_of_unit_right_triangle() {
        let mesh = TriMesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 1, 2]],
            vec![Region::Solvent],
        )
        .unwrap();
        let a = assemble_stiffness(&mesh, 1.0, 1.0).unwrap();
        let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (a.get(i, j) - expect[i][j]).abs() < 1e-14,
                    "A[{}][{}] = {}",
                    i,
                    j,
                    a.get(i, j)
                );
            }
        }
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_scale_with_eps() {
        let mesh = build_disk_in_disk(3.0, [0.0, 0.0], 1.0, 0.7).unwrap();
        let a = assemble_stiffness(&mesh, 2.0, 80.0).unwrap();
        for r in 0..a.n {
            let sum: f64 = (a.row_ptr[r]..a.row_ptr[r + 1])
                .map(|k| a.values[k])
                .sum();
            assert!(sum.abs() < 1e-10, "row {} sums to {}", r, sum);
        }
        let b = assemble_stiffness(&mesh, 4.0, 160.0).unwrap();
        for k in 0..a.values.len() {
            assert!((b.values[k] - 2.0 * a.values[k]).abs() < 1e-12 * a.values[k].abs().max(1.0));
        }
    }

    #[test]
    fn energy_of_linear_interpolant_is_integral_of_eps() {
        let mesh = Arc::new(unit_square_mesh(5));
        let field = ScalarFieldP1::interpolate(&mesh, |p| p[0]);
        let a = assemble_stiffness(&mesh, 3.0, 3.0).unwrap();
        let mut av = vec![0.0; field.values.len()];
        a.mul_vec(&field.values, &mut av);
        let energy: f64 = field.values.iter().zip(av.iter()).map(|(x, y)| x * y).sum();
        assert!((energy - 3.0).abs() < 1e-12);
        assert!((energy_norm(&field, 3.0, 3.0) - 3.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn harmonic_solve_with_zero_charges_is_zero() {
        let full = build_disk_in_disk(3.0, [0.0, 0.0], 1.0, 0.5).unwrap();
        let (molecule, _) = full.extract_region(Region::Molecule);
        let mesh = Arc::new(molecule);
        let (field, info) = solve_harmonic(&mesh, &plain_spec(), 1e-12).unwrap();
        assert!(field.values.iter().all(|&v| v == 0.0));
        assert_eq!(info.max_principle_violation, 0.0);
    }

    #[test]
    fn harmonic_solve_is_radially_symmetric_for_centered_charge() {
        // interface at radius 2 so the log potential is nonzero there
        let full = build_disk_in_disk(4.0, [0.0, 0.0], 2.0, 0.5).unwrap();
        let (molecule, _) = full.extract_region(Region::Molecule);
        let mesh = Arc::new(molecule);
        let mut spec = plain_spec();
        spec.eps_m = 2.0;
        spec.charges = vec![PointCharge {
            position: [0.0, 0.0, 0.0],
            valence: 1,
        }];
        let (field, info) = solve_harmonic(&mesh, &spec, 1e-12).unwrap();
        // boundary data -G is constant on the polygon ring (all interface
        // vertices sit on the circle), so the discrete solution is that
        // constant everywhere
        let boundary = mesh.outer_boundary_vertices();
        let bc = field
            .values
            .iter()
            .zip(boundary.iter())
            .find(|(_, &b)| b)
            .map(|(v, _)| *v)
            .unwrap();
        for v in 0..mesh.num_vertices() {
            assert!(
                (field.values[v] - bc).abs() < 1e-9 * bc.abs(),
                "vertex {}: {} vs {}",
                v,
                field.values[v],
                bc
            );
        }
        assert!(info.max_principle_violation < 1e-9 * bc.abs());
    }

    #[test]
    fn linear_component_satisfies_galerkin_optimality() {
        let mesh = Arc::new(build_disk_in_disk(3.0, [0.0, 0.0], 1.0, 0.5).unwrap());
        let mut spec = plain_spec();
        spec.eps_m = 2.0;
        spec.eps_s = 80.0;
        spec.charge_scale = 7.0;
        spec.charges = vec![PointCharge {
            position: [0.2, -0.1, 0.0],
            valence: 2,
        }];
        let load = interface_load_2term(&mesh, &spec).unwrap();
        let bc = |p: [f64; 2]| spec.g - spec.green_2d(p).unwrap().0;
        let (field, _) = solve_linear_component(&mesh, &spec, &load, bc, 1e-13).unwrap();
        let j0 = energy_j_linear(&field, &spec, &load);
        let boundary = mesh.outer_boundary_vertices();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        for _ in 0..20 {
            let j = rand::Rng::gen_range(&mut rng, 0..mesh.num_vertices());
            if boundary[j] {
                continue;
            }
            for t in [1e-3, -1e-3] {
                let mut pert = field.clone();
                pert.values[j] += t;
                assert!(energy_j_linear(&pert, &spec, &load) >= j0 - 1e-12 * j0.abs());
            }
        }
    }

    #[test]
    fn linear_component_converges_to_radial_closed_form() {
        // concentric disks, centered unit charge: the solution is constant
        // in the molecule and a + b ln r in the solvent
        let mut spec = plain_spec();
        spec.eps_m = 2.0;
        spec.eps_s = 40.0;
        spec.charge_scale = 6.0;
        spec.charges = vec![PointCharge {
            position: [0.0, 0.0, 0.0],
            valence: 1,
        }];
        let (r_if, r_out): (f64, f64) = (1.0, 3.0);
        let cs = spec.charge_scale;
        let b_s = cs * (spec.eps_s - spec.eps_m)
            / (2.0 * std::f64::consts::PI * spec.eps_m * spec.eps_s);
        let g_coef = cs / (2.0 * std::f64::consts::PI * spec.eps_m);
        let a_s = (g_coef - b_s) * r_out.ln();
        let a_m = a_s + b_s * r_if.ln();
        let exact_grad = |p: [f64; 2]| -> [f64; 2] {
            let r2 = p[0] * p[0] + p[1] * p[1];
            if r2 <= r_if * r_if {
                [0.0, 0.0]
            } else {
                [b_s * p[0] / r2, b_s * p[1] / r2]
            }
        };
        let _ = a_m;

        let mut errors = Vec::new();
        for h in [0.5, 0.25, 0.125] {
            let mesh = Arc::new(build_disk_in_disk(r_out, [0.0, 0.0], r_if, h).unwrap());
            let load = interface_load_2term(&mesh, &spec).unwrap();
            let bc = |p: [f64; 2]| -spec.green_2d(p).unwrap().0;
            let (field, _) = solve_linear_component(&mesh, &spec, &load, bc, 1e-13).unwrap();
            let mut err2 = 0.0;
            for t in 0..mesh.num_triangles() {
                let g = field.gradient(t);
                let [p0, p1, p2] = mesh.coords(t);
                let eps = match mesh.regions[t] {
                    Region::Molecule => spec.eps_m,
                    Region::Solvent => spec.eps_s,
                };
                err2 += quad::integrate(Rule::Degree7, p0, p1, p2, |x, y| {
                    let ge = exact_grad([x, y]);
                    eps * ((g[0] - ge[0]).powi(2) + (g[1] - ge[1]).powi(2))
                });
            }
            errors.push(err2.sqrt());
        }
        for k in 1..errors.len() {
            let ratio = errors[k - 1] / errors[k];
            assert!(
                ratio > 1.5 && ratio < 3.0,
                "errors {:?} ratio {}",
                errors,
                ratio
            );
        }
        let norm = b_s.abs();
        assert!(errors[2] < 0.2 * norm, "final error {} vs {}", errors[2], norm);
    }

    #[test]
    fn nonlinear_solve_with_zero_shift_and_data_is_zero() {
        let mesh = Arc::new(build_disk_in_disk(3.0, [0.0, 0.0], 1.0, 0.5).unwrap());
        let mut spec = plain_spec();
        spec.ks2 = 1.0;
        let (field, info) =
            solve_nonlinear_component(&mesh, &spec, |_, _| 0.0, None, 1e-12, 1e-10).unwrap();
        assert!(field.values.iter().all(|&v| v == 0.0));
        assert_eq!(info.newton_iterations, 0);
        assert_eq!(info.saturation_count, 0);
    }

    #[test]
    fn nonlinear_solve_matches_linearization_for_tiny_data() {
        // with charge_scale shrunk by 1e-6 the sinh is effectively linear;
        // compare against the linearized solve on the same mesh
        let mesh = Arc::new(build_disk_in_disk(3.0, [0.0, 0.0], 1.0, 0.45).unwrap());
        let mut spec = plain_spec();
        spec.eps_m = 2.0;
        spec.eps_s = 80.0;
        spec.ks2 = 0.8;
        spec.charge_scale = 7.0e-6;
        spec.charges = vec![PointCharge {
            position: [0.15, 0.1, 0.0],
            valence: 2,
        }];
        let load = interface_load_2term(&mesh, &spec).unwrap();
        let bc = |p: [f64; 2]| -spec.green_2d(p).unwrap().0;
        let (ul, _) = solve_linear_component(&mesh, &spec, &load, bc, 1e-13).unwrap();
        let shift = |_: ElemId, p: [f64; 2]| {
            let t = containing_triangle(&mesh, p);
            spec.green_2d(p).unwrap().0 + ul.value_in(t, p)
        };
        let (un, info) =
            solve_nonlinear_component(&mesh, &spec, shift, None, 1e-13, 1e-12).unwrap();
        assert!(info.saturation_count == 0);

        // linearized: a(u,v) + int ks2 (u + w) v = 0
        let a = assemble_stiffness(&mesh, spec.eps_m, spec.eps_s).unwrap();
        let mut trips = Vec::new();
        let mut rhs = vec![0.0; mesh.num_vertices()];
        for t in 0..mesh.num_triangles() {
            if mesh.regions[t] != Region::Solvent {
                continue;
            }
            let [p0, p1, p2] = mesh.coords(t);
            let tri = mesh.triangles[t];
            let jac = 2.0 * mesh.area(t);
            for q in quad::points(Rule::Degree7) {
                let x = p0[0] + (p1[0] - p0[0]) * q.x + (p2[0] - p0[0]) * q.y;
                let y = p0[1] + (p1[1] - p0[1]) * q.x + (p2[1] - p0[1]) * q.y;
                let w = shift(0, [x, y]);
                let l = [1.0 - q.x - q.y, q.x, q.y];
                for i in 0..3 {
                    rhs[tri[i]] -= q.w * jac * spec.ks2 * w * l[i];
                    for j in 0..3 {
                        trips.push((tri[i], tri[j], q.w * jac * spec.ks2 * l[i] * l[j]));
                    }
                }
            }
        }
        for r in 0..a.n {
            for k in a.row_ptr[r]..a.row_ptr[r + 1] {
                trips.push((r, a.col_idx[k], a.values[k]));
            }
        }
        let system = CsrMatrix::from_triplets(mesh.num_vertices(), &trips);
        let mask = mesh.outer_boundary_vertices();
        let constrained = apply_dirichlet(&system, &mask, &vec![0.0; a.n], &mut rhs);
        let lin = pcg(&constrained, &rhs, 1e-14, 20 * a.n);
        assert!(lin.converged);
        let diff = ScalarFieldP1 {
            mesh: Arc::clone(&mesh),
            values: un
                .values
                .iter()
                .zip(lin.x.iter())
                .map(|(a, b)| a - b)
                .collect(),
            dirichlet: vec![false; mesh.num_vertices()],
        };
        let err = energy_norm(&diff, spec.eps_m, spec.eps_s);
        let scale = energy_norm(&un, spec.eps_m, spec.eps_s);
        assert!(err <= 1e-10 * scale, "err {} vs scale {}", err, scale);
    }

    fn containing_triangle(mesh: &TriMesh, p: [f64; 2]) -> ElemId {
        let mut best = 0;
        let mut best_depth = f64::NEG_INFINITY;
        for t in 0..mesh.num_triangles() {
            let l = mesh.barycentric(t, p);
            let depth = l[0].min(l[1]).min(l[2]);
            if depth > best_depth {
                best_depth = depth;
                best = t;
            }
        }
        best
    }

    #[test]
    fn newton_energy_decreases_and_perturbation_contracts() {
        let mesh = Arc::new(build_disk_in_disk(3.0, [0.0, 0.0], 1.0, 0.5).unwrap());
        let mut spec = plain_spec();
        spec.eps_m = 2.0;
        spec.eps_s = 80.0;
        spec.ks2 = 1.0;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
        for _ in 0..5 {
            let (ax, ay) = (
                rand::Rng::gen_range(&mut rng, -1.5..1.5),
                rand::Rng::gen_range(&mut rng, -1.5..1.5),
            );
            let (bx, by) = (
                rand::Rng::gen_range(&mut rng, -1.5..1.5),
                rand::Rng::gen_range(&mut rng, -1.5..1.5),
            );
            let w1 = move |_, p: [f64; 2]| ax * p[0] + ay * p[1];
            let w2 = move |_, p: [f64; 2]| bx * p[0] + by * p[1];
            let (u1, _) = solve_nonlinear_component(&mesh, &spec, w1, None, 1e-13, 1e-11).unwrap();
            let (u2, _) = solve_nonlinear_component(&mesh, &spec, w2, None, 1e-13, 1e-11).unwrap();
            let diff = ScalarFieldP1 {
                mesh: Arc::clone(&mesh),
                values: u1
                    .values
                    .iter()
                    .zip(u2.values.iter())
                    .map(|(a, b)| a - b)
                    .collect(),
                dirichlet: vec![false; mesh.num_vertices()],
            };
            let lhs = energy_norm(&diff, spec.eps_m, spec.eps_s);
            let wdiff = ScalarFieldP1::interpolate(&mesh, |p| w1(0, p) - w2(0, p));
            let rhs = energy_norm(&wdiff, spec.eps_m, spec.eps_s);
            assert!(
                lhs <= rhs * (1.0 + 1e-6),
                "contraction violated: {} vs {}",
                lhs,
                rhs
            );
        }
    }

    #[test]
    fn friedrichs_square_bound_dominates_discrete_eigenvalue() {
        // inverse power iteration for the smallest eigenvalue of the
        // Dirichlet Laplacian on the unit square; the printed bound must
        // sit above 1/sqrt(lambda_h), which converges to it from below
        let mesh = Arc::new(unit_square_mesh(16));
        let a = assemble_stiffness(&mesh, 1.0, 1.0).unwrap();
        let mut mass_trips = Vec::new();
        for t in 0..mesh.num_triangles() {
            let tri = mesh.triangles[t];
            let area = mesh.area(t);
            for i in 0..3 {
                for j in 0..3 {
                    let v = area / if i == j { 6.0 } else { 12.0 };
                    mass_trips.push((tri[i], tri[j], v));
                }
            }
        }
        let m = CsrMatrix::from_triplets(mesh.num_vertices(), &mass_trips);
        let mask = mesh.outer_boundary_vertices();
        let mut dummy = vec![0.0; a.n];
        let ac = apply_dirichlet(&a, &mask, &vec![0.0; a.n], &mut dummy);
        let mut x: Vec<f64> = (0..a.n)
            .map(|i| if mask[i] { 0.0 } else { (i as f64).sin() + 1.0 })
            .collect();
        let mut lambda = 0.0;
        for _ in 0..60 {
            let mut mx = vec![0.0; a.n];
            m.mul_vec(&x, &mut mx);
            for (v, &msk) in mx.iter_mut().zip(mask.iter()) {
                if msk {
                    *v = 0.0;
                }
            }
            let sol = pcg(&ac, &mx, 1e-13, 20 * a.n);
            assert!(sol.converged);
            x = sol.x;
            let mut ax = vec![0.0; a.n];
            ac.mul_vec(&x, &mut ax);
            let mut mx2 = vec![0.0; a.n];
            m.mul_vec(&x, &mut mx2);
            let num: f64 = x.iter().zip(ax.iter()).map(|(p, q)| p * q).sum();
            let den: f64 = x.iter().zip(mx2.iter()).map(|(p, q)| p * q).sum();
            lambda = num / den;
            let norm = den.sqrt();
            for v in x.iter_mut() {
                *v /= norm;
            }
        }
        let discrete = 1.0 / lambda.sqrt();
        let bound = friedrichs_bound(FriedrichsDomain::Square { side: 1.0 }).unwrap();
        assert!(
            bound >= discrete,
            "bound {} below discrete estimate {}",
            bound,
            discrete
        );
        assert!(
            bound <= discrete * 1.01,
            "bound {} more than 1% above discrete estimate {}",
            bound,
            discrete
        );
    }

    #[test]
    fn transfer_and_difference_norms_work_across_refinement() {
        let root = build_disk_in_square(6.0, [0.0, 0.0], 1.0, 0.8).unwrap();
        let mut hierarchy = MeshHierarchy::new(root);
        let refined = refine_uniform(hierarchy.mesh(0));
        hierarchy.push(refined);
        let coarse_mesh = Arc::clone(hierarchy.mesh(0));
        let fine_mesh = Arc::clone(hierarchy.mesh(1));
        let coarse = ScalarFieldP1::interpolate(&coarse_mesh, |p| 2.0 * p[0] - 0.5 * p[1]);
        let ancestors = hierarchy.ancestor_map(1, 0);
        let lifted = transfer_to_descendant(&coarse, &fine_mesh, &ancestors);
        // a globally linear field transfers exactly
        for (v, &p) in fine_mesh.vertices.iter().enumerate() {
            assert!((lifted.values[v] - (2.0 * p[0] - 0.5 * p[1])).abs() < 1e-12);
        }
        let diff = energy_norm_difference(&lifted, &coarse, &ancestors, 1.0, 1.0);
        assert!(diff < 1e-12);
    }
}
