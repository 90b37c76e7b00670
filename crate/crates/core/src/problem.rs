//! Problem data: piecewise dielectric coefficients, the ionic coefficient,
//! point charges with the analytic Coulombic field G they generate, the
//! interface load functionals, and Friedrichs constants for the divergence
//! penalty terms.
//!
//! Physical constants never appear individually; the single prefactor
//! `charge_scale` multiplies the point sources, and `ks2` carries the ionic
//! strength. The 2D field uses the constant for which the piecewise-constant
//! dielectric operator applied to G reproduces `charge_scale * valence`
//! times a point mass (log kernel: Delta ln r = 2 pi delta).

use std::path::Path;

use crate::flux::FluxFieldRT0;
use crate::mesh::{Region, SubmeshMap, TriMesh};
use crate::quad::{self, Rule};

/// First zero of the Bessel function J0; enters the disk Friedrichs bound.
pub const FIRST_BESSEL_ZERO: f64 = 2.404_825_557_695_773;

/// A point source with integer valence, positioned in the molecular region.
/// The third coordinate is used only by the 3D field evaluation and must be
/// zero in 2D runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCharge {
    pub position: [f64; 3],
    pub valence: i32,
}

/// Coefficients and sources of the regularized interface problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    /// Dielectric constant in the molecular region.
    pub eps_m: f64,
    /// Dielectric constant in the solvent region.
    pub eps_s: f64,
    /// Ionic coefficient k^2 in the solvent; zero in the molecule.
    pub ks2: f64,
    /// Prefactor multiplying the point sources.
    pub charge_scale: f64,
    pub charges: Vec<PointCharge>,
    /// Outer Dirichlet data (constant).
    pub g: f64,
    /// 2 for solving; 3 is allowed for field evaluation only.
    pub dimension: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error("invalid problem data: {0}")]
    Invalid(String),
    #[error("field evaluated at singular point ({0}, {1})")]
    SingularPoint(f64, f64),
    #[error("charge {0} at distance {1} from the disk center; must stay {2} inside the interface")]
    ChargeOutsideMolecule(usize, f64, f64),
    #[error("charge file line {0}: {1}")]
    Format(usize, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ProblemSpec {
    /// Checks coefficient signs and the dimension flag.
    pub fn validate(&self) -> Result<(), ProblemError> {
        if !(self.eps_m > 0.0 && self.eps_m.is_finite()) {
            return Err(ProblemError::Invalid(format!("eps_m = {}", self.eps_m)));
        }
        if !(self.eps_s > 0.0 && self.eps_s.is_finite()) {
            return Err(ProblemError::Invalid(format!("eps_s = {}", self.eps_s)));
        }
        if !(self.ks2 >= 0.0 && self.ks2.is_finite()) {
            return Err(ProblemError::Invalid(format!("ks2 = {}", self.ks2)));
        }
        if !(self.charge_scale > 0.0 && self.charge_scale.is_finite()) {
            return Err(ProblemError::Invalid(format!(
                "charge_scale = {}",
                self.charge_scale
            )));
        }
        if self.dimension != 2 && self.dimension != 3 {
            return Err(ProblemError::Invalid(format!(
                "dimension = {}",
                self.dimension
            )));
        }
        if self.dimension == 2 {
            for (i, c) in self.charges.iter().enumerate() {
                if c.position[2] != 0.0 {
                    return Err(ProblemError::Invalid(format!(
                        "charge {} has nonzero third coordinate in a 2D problem",
                        i
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that every charge sits at least `margin` inside the interface
    /// circle of the given center and radius.
    pub fn charges_inside_disk(
        &self,
        center: [f64; 2],
        radius: f64,
        margin: f64,
    ) -> Result<(), ProblemError> {
        for (i, c) in self.charges.iter().enumerate() {
            let d = ((c.position[0] - center[0]).powi(2) + (c.position[1] - center[1]).powi(2))
                .sqrt();
            if d > radius - margin {
                return Err(ProblemError::ChargeOutsideMolecule(i, d, margin));
            }
        }
        Ok(())
    }

    /// Value and gradient of the 2D Coulombic field at one point.
    pub fn green_2d(&self, x: [f64; 2]) -> Result<(f64, [f64; 2]), ProblemError> {
        let factor = -self.charge_scale / (2.0 * std::f64::consts::PI * self.eps_m);
        let mut val = 0.0;
        let mut grad = [0.0, 0.0];
        for c in &self.charges {
            let dx = x[0] - c.position[0];
            let dy = x[1] - c.position[1];
            let r2 = dx * dx + dy * dy;
            let scale = 1.0 + x[0].abs() + x[1].abs() + c.position[0].abs() + c.position[1].abs();
            if r2.sqrt() <= 1e-12 * scale {
                return Err(ProblemError::SingularPoint(x[0], x[1]));
            }
            let z = c.valence as f64;
            val += factor * z * 0.5 * r2.ln();
            grad[0] += factor * z * dx / r2;
            grad[1] += factor * z * dy / r2;
        }
        Ok((val, grad))
    }

    /// Batch 2D field evaluation; values and gradients per point.
    #[allow(clippy::type_complexity)]
    pub fn eval_g(&self, points: &[[f64; 2]]) -> Result<(Vec<f64>, Vec<[f64; 2]>), ProblemError> {
        let mut vals = Vec::with_capacity(points.len());
        let mut grads = Vec::with_capacity(points.len());
        for &x in points {
            let (v, g) = self.green_2d(x)?;
            vals.push(v);
            grads.push(g);
        }
        Ok((vals, grads))
    }

    /// Batch 3D field evaluation: 1/r kernel with the 4 pi constant.
    #[allow(clippy::type_complexity)]
    pub fn eval_g_3d(
        &self,
        points: &[[f64; 3]],
    ) -> Result<(Vec<f64>, Vec<[f64; 3]>), ProblemError> {
        let factor = self.charge_scale / (4.0 * std::f64::consts::PI * self.eps_m);
        let mut vals = Vec::with_capacity(points.len());
        let mut grads = Vec::with_capacity(points.len());
        for &x in points {
            let mut val = 0.0;
            let mut grad = [0.0; 3];
            for c in &self.charges {
                let d = [
                    x[0] - c.position[0],
                    x[1] - c.position[1],
                    x[2] - c.position[2],
                ];
                let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let r = r2.sqrt();
                let scale = 1.0
                    + x.iter().map(|v| v.abs()).sum::<f64>()
                    + c.position.iter().map(|v| v.abs()).sum::<f64>();
                if r <= 1e-12 * scale {
                    return Err(ProblemError::SingularPoint(x[0], x[1]));
                }
                let z = c.valence as f64;
                val += factor * z / r;
                for k in 0..3 {
                    grad[k] -= factor * z * d[k] / (r2 * r);
                }
            }
            vals.push(val);
            grads.push(grad);
        }
        Ok((vals, grads))
    }
}

/// Shapes for which a Friedrichs constant bound is available.
#[derive(Debug, Clone, Copy)]
pub enum FriedrichsDomain {
    /// Cube of the given side (3D).
    Cube { side: f64 },
    /// Square of the given side (2D).
    Square { side: f64 },
    /// Disk of the given radius (2D).
    Disk { radius: f64 },
}

/// Upper bound for the Friedrichs constant of the zero-trace space on the
/// given domain, from the first Dirichlet eigenvalue of the Laplacian.
pub fn friedrichs_bound(domain: FriedrichsDomain) -> Result<f64, ProblemError> {
    let check = |s: f64, what: &str| {
        if s > 0.0 && s.is_finite() {
            Ok(())
        } else {
            Err(ProblemError::Invalid(format!("{} must be positive", what)))
        }
    };
    match domain {
        FriedrichsDomain::Cube { side } => {
            check(side, "cube side")?;
            Ok(side * 3.0_f64.sqrt() / (3.0 * std::f64::consts::PI))
        }
        FriedrichsDomain::Square { side } => {
            check(side, "square side")?;
            Ok(side * 2.0_f64.sqrt() / (2.0 * std::f64::consts::PI))
        }
        FriedrichsDomain::Disk { radius } => {
            check(radius, "disk radius")?;
            Ok(radius / FIRST_BESSEL_ZERO)
        }
    }
}

/// Per-element integral of the field gradient over solvent elements, by the
/// elevated quadrature rule. Entry is `None` on molecule elements.
pub(crate) fn solvent_grad_g_integrals(
    mesh: &TriMesh,
    spec: &ProblemSpec,
    rule: Rule,
) -> Result<Vec<Option<[f64; 2]>>, ProblemError> {
    let pts = quad::points(rule);
    let mut out = vec![None; mesh.num_triangles()];
    for t in 0..mesh.num_triangles() {
        if mesh.regions[t] != Region::Solvent {
            continue;
        }
        let [p0, p1, p2] = mesh.coords(t);
        let jac = 2.0 * mesh.area(t);
        let mut ig = [0.0, 0.0];
        for q in &pts {
            let x = p0[0] + (p1[0] - p0[0]) * q.x + (p2[0] - p0[0]) * q.y;
            let y = p0[1] + (p1[1] - p0[1]) * q.x + (p2[1] - p0[1]) * q.y;
            let (_, g) = spec.green_2d([x, y])?;
            ig[0] += q.w * g[0];
            ig[1] += q.w * g[1];
        }
        out[t] = Some([ig[0] * jac, ig[1] * jac]);
    }
    Ok(out)
}

/// Load vector of the dielectric-jump functional: for every P1 basis
/// function v, the integral of `(eps_m - eps_s) grad G . grad v` over the
/// solvent region. Assembled for all nodes; constrained rows are masked by
/// the solver.
pub fn interface_load_2term(mesh: &TriMesh, spec: &ProblemSpec) -> Result<Vec<f64>, ProblemError> {
    let mut load = vec![0.0; mesh.num_vertices()];
    let contrast = spec.eps_m - spec.eps_s;
    if contrast == 0.0 || spec.charges.is_empty() {
        return Ok(load);
    }
    let integrals = solvent_grad_g_integrals(mesh, spec, Rule::Degree7)?;
    for t in 0..mesh.num_triangles() {
        let ig = match integrals[t] {
            Some(v) => v,
            None => continue,
        };
        let (grads, _) = mesh.p1_gradients(t);
        for (i, &v) in mesh.triangles[t].iter().enumerate() {
            load[v] += contrast * (ig[0] * grads[i][0] + ig[1] * grads[i][1]);
        }
    }
    Ok(load)
}

/// Load vector of the harmonic-extension functional: minus the integral of
/// `eps_m T . grad v` over the molecular region (T is the reconstructed
/// flux on the molecule sub-mesh) plus the integral of
/// `eps_m grad G . grad v` over the solvent region.
pub fn interface_load_3term(
    mesh: &TriMesh,
    spec: &ProblemSpec,
    flux_h: &FluxFieldRT0,
    map: &SubmeshMap,
) -> Result<Vec<f64>, ProblemError> {
    if map.parent_to_sub.len() != mesh.num_triangles()
        || map.elem_to_parent.len() != flux_h.mesh.num_triangles()
    {
        return Err(ProblemError::Invalid(format!(
            "sub-mesh map covers {} parent / {} sub elements, mesh has {} and flux {}",
            map.parent_to_sub.len(),
            map.elem_to_parent.len(),
            mesh.num_triangles(),
            flux_h.mesh.num_triangles()
        )));
    }
    let mut load = vec![0.0; mesh.num_vertices()];
    let integrals = if spec.charges.is_empty() {
        None
    } else {
        Some(solvent_grad_g_integrals(mesh, spec, Rule::Degree7)?)
    };
    for t in 0..mesh.num_triangles() {
        let (grads, _) = mesh.p1_gradients(t);
        match mesh.regions[t] {
            Region::Molecule => {
                let sub = map.parent_to_sub[t].ok_or_else(|| {
                    ProblemError::Invalid(format!(
                        "molecule element {} missing from the sub-mesh map",
                        t
                    ))
                })?;
                // RT0 fields are linear, so the element integral is the
                // centroid value times the area
                let c = mesh.centroid(t);
                let v = flux_h.value_at(sub, c);
                let it = [mesh.area(t) * v[0], mesh.area(t) * v[1]];
                for (i, &vx) in mesh.triangles[t].iter().enumerate() {
                    load[vx] -= spec.eps_m * (it[0] * grads[i][0] + it[1] * grads[i][1]);
                }
            }
            Region::Solvent => {
                let ig = match integrals.as_ref().and_then(|v| v[t]) {
                    Some(v) => v,
                    None => continue,
                };
                for (i, &vx) in mesh.triangles[t].iter().enumerate() {
                    load[vx] += spec.eps_m * (ig[0] * grads[i][0] + ig[1] * grads[i][1]);
                }
            }
        }
    }
    Ok(load)
}

/// Reads a charge list: ASCII lines `x y [z] valence`, `#` comments.
pub fn read_charges(path: &Path) -> Result<Vec<PointCharge>, ProblemError> {
    let text = std::fs::read_to_string(path)?;
    parse_charges(&text)
}

/// Parses charge-list text; see [`read_charges`].
pub fn parse_charges(text: &str) -> Result<Vec<PointCharge>, ProblemError> {
    let mut charges = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let (coords, valence_tok) = match tokens.len() {
            3 => (&tokens[..2], tokens[2]),
            4 => (&tokens[..3], tokens[3]),
            n => {
                return Err(ProblemError::Format(
                    lineno + 1,
                    format!("expected 3 or 4 fields, got {}", n),
                ))
            }
        };
        let mut position = [0.0; 3];
        for (k, tok) in coords.iter().enumerate() {
            position[k] = tok.parse::<f64>().map_err(|_| {
                ProblemError::Format(lineno + 1, format!("bad coordinate {:?}", tok))
            })?;
        }
        let valence = valence_tok.parse::<i32>().map_err(|_| {
            ProblemError::Format(lineno + 1, format!("bad valence {:?}", valence_tok))
        })?;
        charges.push(PointCharge { position, valence });
    }
    Ok(charges)
}
