//! Guaranteed bounds on the discretization error: stage majorants built
//! from dual gaps, divergence penalties, and the nonlinear duality term,
//! energy-difference minorants, combined-energy-norm bounds, and the
//! relative-error report algebra.
//!
//! Every bound here is fully computable from a discrete iterate and a
//! reconstructed flux; no interpolation or shape-regularity constants
//! enter. Percentages are returned as plain ratios.

use crate::fem::{clamped_cosh, ScalarFieldP1};
use crate::flux::FluxFieldRT0;
use crate::mesh::{ElemId, Region, TriMesh};
use crate::quad::{self, Rule};

#[derive(Debug, thiserror::Error)]
pub enum EstimateError {
    #[error("flux divergence {value} on molecular element {element} exceeds the tolerance")]
    NonzeroMoleculeDivergence { element: ElemId, value: f64 },
    #[error("flux divergence {value} on element {element} with zero ionic coefficient")]
    ZeroIonicWithDivergence { element: ElemId, value: f64 },
    #[error("data length {0} does not match mesh element count {1}")]
    SizeMismatch(usize, usize),
}

/// Pointwise duality gap of the ionic potential well: for any potential
/// value `s` and scaled divergence `t` this is
/// `cosh(s) - t s + t arsinh(t) - sqrt(1 + t^2)`,
/// the Fenchel gap of the cosh pairing. It is nonnegative and vanishes
/// exactly when `t = sinh(s)`.
pub fn duality_gap_pointwise(s: f64, t: f64) -> f64 {
    s.cosh() - t * s + t * t.asinh() - (1.0 + t * t).sqrt()
}

/// Integrated duality term and its elementwise contributions.
#[derive(Debug, Clone)]
pub struct DualityTerm {
    pub value: f64,
    pub per_element: Vec<f64>,
}

/// Integrates the nonlinear duality term over the solvent: the pointwise
/// gap with `t = div y / ks2`, weighted by `ks2`. Elements outside the
/// solvent (and all elements when `ks2 = 0`) must carry divergence below
/// `div_tol` for the term to be meaningful.
pub fn df_term<F: Fn(ElemId, [f64; 2]) -> f64>(
    mesh: &TriMesh,
    ks2: f64,
    s_field: F,
    div: &[f64],
    div_tol: f64,
    rule: Rule,
    clamps: &mut u64,
) -> Result<DualityTerm, EstimateError> {
    if div.len() != mesh.num_triangles() {
        return Err(EstimateError::SizeMismatch(div.len(), mesh.num_triangles()));
    }
    let mut per_element = vec![0.0; mesh.num_triangles()];
    let mut value = 0.0;
    for t in 0..mesh.num_triangles() {
        if mesh.regions[t] == Region::Molecule {
            if div[t].abs() > div_tol {
                return Err(EstimateError::NonzeroMoleculeDivergence {
                    element: t,
                    value: div[t],
                });
            }
            continue;
        }
        if ks2 == 0.0 {
            if div[t].abs() > div_tol {
                return Err(EstimateError::ZeroIonicWithDivergence {
                    element: t,
                    value: div[t],
                });
            }
            continue;
        }
        let tt = div[t] / ks2;
        let [p0, p1, p2] = mesh.coords(t);
        let contrib = quad::integrate(rule, p0, p1, p2, |x, y| {
            let s = s_field(t, [x, y]);
            let cosh = clamped_cosh(s, clamps);
            ks2 * (cosh - tt * s + tt * tt.asinh() - (1.0 + tt * tt).sqrt())
        });
        per_element[t] = contrib;
        value += contrib;
    }
    Ok(DualityTerm { value, per_element })
}

/// Harmonic-stage bounds over the molecular sub-mesh.
#[derive(Debug, Clone)]
pub struct HarmonicMajorant {
    /// `sqrt(||grad v - T||^2 + C^2 ||div T||^2)`.
    pub majorant: f64,
    /// The additive primal-side bound `C ||div T|| + ||grad v - T||`.
    pub primal: f64,
    pub gap_norm: f64,
    pub div_norm: f64,
    /// Squared indicators: elementwise gap plus divergence penalty.
    pub indicators: Vec<f64>,
}

/// Evaluates the harmonic-stage majorant of a potential/flux pair on the
/// molecular sub-mesh (unit diffusion, plain L2 gap).
pub fn majorant_harmonic(
    field: &ScalarFieldP1,
    flux: &FluxFieldRT0,
    friedrichs: f64,
) -> HarmonicMajorant {
    let mesh = &field.mesh;
    let mut indicators = vec![0.0; mesh.num_triangles()];
    let mut gap_sq = 0.0;
    let mut div_sq = 0.0;
    for t in 0..mesh.num_triangles() {
        let g = field.gradient(t);
        let [p0, p1, p2] = mesh.coords(t);
        let gap = quad::integrate(Rule::Degree4, p0, p1, p2, |x, y| {
            let v = flux.value_at(t, [x, y]);
            (g[0] - v[0]).powi(2) + (g[1] - v[1]).powi(2)
        });
        let d = flux.divergence(t);
        let dsq = mesh.area(t) * d * d;
        indicators[t] = gap + friedrichs * friedrichs * dsq;
        gap_sq += gap;
        div_sq += dsq;
    }
    let gap_norm = gap_sq.sqrt();
    let div_norm = div_sq.sqrt();
    HarmonicMajorant {
        majorant: (gap_sq + friedrichs * friedrichs * div_sq).sqrt(),
        primal: friedrichs * div_norm + gap_norm,
        gap_norm,
        div_norm,
        indicators,
    }
}

/// Linear-stage majorant pieces for a given flux pair.
#[derive(Debug, Clone)]
pub struct LinearMajorant {
    /// `friedrichs/sqrt(eps_min) ||div y0|| + gap_norm`.
    pub majorant: f64,
    pub gap_norm: f64,
    pub div_norm: f64,
    /// Squared indicators: the elementwise dual-gap partition.
    pub indicators: Vec<f64>,
}

/// Evaluates the linear-stage majorant: dual-norm distance of the flux
/// pair to `eps grad v` plus the Friedrichs divergence penalty of the RT0
/// part. `y_g` is the analytic (divergence-free) flux portion.
pub fn majorant_linear<F: Fn(ElemId, [f64; 2]) -> [f64; 2]>(
    field: &ScalarFieldP1,
    eps_m: f64,
    eps_s: f64,
    friedrichs: f64,
    y0: &FluxFieldRT0,
    y_g: F,
    rule: Rule,
) -> LinearMajorant {
    let mesh = &field.mesh;
    let eps_min = eps_m.min(eps_s);
    let mut indicators = vec![0.0; mesh.num_triangles()];
    let mut gap_sq = 0.0;
    let mut div_sq = 0.0;
    for t in 0..mesh.num_triangles() {
        let eps = match mesh.regions[t] {
            Region::Molecule => eps_m,
            Region::Solvent => eps_s,
        };
        let g = field.gradient(t);
        let [p0, p1, p2] = mesh.coords(t);
        let gap = quad::integrate(rule, p0, p1, p2, |x, y| {
            let a = y_g(t, [x, y]);
            let b = y0.value_at(t, [x, y]);
            let dx = eps * g[0] - a[0] - b[0];
            let dy = eps * g[1] - a[1] - b[1];
            (dx * dx + dy * dy) / eps
        });
        let d = y0.divergence(t);
        let dsq = mesh.area(t) * d * d;
        gap_sq += gap;
        div_sq += dsq;
        indicators[t] = gap;
    }
    let gap_norm = gap_sq.sqrt();
    let div_norm = div_sq.sqrt();
    LinearMajorant {
        majorant: friedrichs / eps_min.sqrt() * div_norm + gap_norm,
        gap_norm,
        div_norm,
        indicators,
    }
}

/// Nonlinear-stage majorant pieces.
#[derive(Debug, Clone)]
pub struct NonlinearMajorant {
    /// `sqrt(gap^2 + 2 D_F)`; bounds the energy error directly (this is
    /// the sqrt-2-scaled stage majorant).
    pub sqrt2_majorant: f64,
    pub gap_norm: f64,
    pub df: f64,
    /// Squared indicators `gap_K^2 + 2 D_F_K`.
    pub indicators: Vec<f64>,
}

/// Evaluates the nonlinear-stage majorant for an equilibrated flux:
/// squared dual gap against `gap_target` plus twice the duality term of
/// the summed potential `s_field`.
pub fn majorant_nonlinear<F, S>(
    mesh: &TriMesh,
    eps_m: f64,
    eps_s: f64,
    ks2: f64,
    flux: &FluxFieldRT0,
    gap_target: F,
    s_field: S,
    div_tol: f64,
    rule: Rule,
    clamps: &mut u64,
) -> Result<NonlinearMajorant, EstimateError>
where
    F: Fn(ElemId, [f64; 2]) -> [f64; 2],
    S: Fn(ElemId, [f64; 2]) -> f64,
{
    let div: Vec<f64> = (0..mesh.num_triangles()).map(|t| flux.divergence(t)).collect();
    let duality = df_term(mesh, ks2, s_field, &div, div_tol, rule, clamps)?;
    let mut indicators = vec![0.0; mesh.num_triangles()];
    let mut gap_sq = 0.0;
    for t in 0..mesh.num_triangles() {
        let eps = match mesh.regions[t] {
            Region::Molecule => eps_m,
            Region::Solvent => eps_s,
        };
        let [p0, p1, p2] = mesh.coords(t);
        let gap = quad::integrate(rule, p0, p1, p2, |x, y| {
            let a = gap_target(t, [x, y]);
            let b = flux.value_at(t, [x, y]);
            let dx = a[0] - b[0];
            let dy = a[1] - b[1];
            (dx * dx + dy * dy) / eps
        });
        gap_sq += gap;
        indicators[t] = gap + 2.0 * duality.per_element[t];
    }
    Ok(NonlinearMajorant {
        sqrt2_majorant: (gap_sq + 2.0 * duality.value).sqrt(),
        gap_norm: gap_sq.sqrt(),
        df: duality.value,
        indicators,
    })
}

/// Dual norm `sqrt(int (1/eps) |q|^2)` of a pointwise flux field.
pub fn flux_dual_norm<F: Fn(ElemId, [f64; 2]) -> [f64; 2]>(
    mesh: &TriMesh,
    eps_m: f64,
    eps_s: f64,
    q: F,
    rule: Rule,
) -> f64 {
    let mut acc = 0.0;
    for t in 0..mesh.num_triangles() {
        let eps = match mesh.regions[t] {
            Region::Molecule => eps_m,
            Region::Solvent => eps_s,
        };
        let [p0, p1, p2] = mesh.coords(t);
        acc += quad::integrate(rule, p0, p1, p2, |x, y| {
            let v = q(t, [x, y]);
            (v[0] * v[0] + v[1] * v[1]) / eps
        });
    }
    acc.sqrt()
}

/// Energy-difference minorant `sqrt(max(0, 2 (J(v) - J(w))))` for the
/// error of `v`, where `w` is a better (lower-energy) comparison iterate.
/// The flag reports clamping, which means the energies were ordered the
/// wrong way round and the bound is vacuous.
pub fn minorant_from_energies(j_coarse: f64, j_fine: f64) -> (f64, bool) {
    let arg = 2.0 * (j_coarse - j_fine);
    if arg < 0.0 {
        (0.0, true)
    } else {
        (arg.sqrt(), false)
    }
}

/// Two-sided combined-energy-norm bounds of a linear-stage pair. The lower
/// bound is `None` when its squared form goes negative.
pub fn cen_bounds_linear(
    gap_norm: f64,
    div_norm: f64,
    friedrichs: f64,
    eps_min: f64,
    majorant: f64,
) -> (f64, Option<f64>) {
    let cross = 2.0 * friedrichs * div_norm / eps_min.sqrt() * majorant;
    let up = (gap_norm * gap_norm + cross).sqrt();
    let low_sq = gap_norm * gap_norm - cross;
    let low = if low_sq >= 0.0 { Some(low_sq.sqrt()) } else { None };
    (up, low)
}

/// `numerator / (norm - majorant)`; `None` when the denominator is not
/// positive and the bound carries no information.
pub fn ratio_upper(numerator: f64, norm: f64, majorant: f64) -> Option<f64> {
    let denom = norm - majorant;
    if denom > 0.0 {
        Some(numerator / denom)
    } else {
        None
    }
}

/// `numerator / (norm + majorant)`; `None` when the denominator is not
/// positive.
pub fn ratio_lower(numerator: f64, norm: f64, majorant: f64) -> Option<f64> {
    let denom = norm + majorant;
    if denom > 0.0 {
        Some(numerator / denom)
    } else {
        None
    }
}

/// Relative-error columns derived for one level of a stage report.
#[derive(Debug, Clone)]
pub struct DerivedRow {
    pub re_up: Option<f64>,
    pub re_low: Option<f64>,
    pub rcen_up: Option<f64>,
    pub rcen_low: Option<f64>,
    pub p_rel: f64,
    pub pre: f64,
}

/// Linear-stage report row: majorant/minorant ratios against a reference
/// level's norm and majorant, combined-norm bounds from the gap and
/// divergence, and the two practical estimates.
#[allow(clippy::too_many_arguments)]
pub fn derived_linear_row(
    majorant: f64,
    minorant: f64,
    gap_norm: f64,
    div_norm: f64,
    own_norm: f64,
    ref_norm: f64,
    ref_majorant: f64,
    friedrichs: f64,
    eps_min: f64,
) -> DerivedRow {
    let (cen_up, cen_low) = cen_bounds_linear(gap_norm, div_norm, friedrichs, eps_min, majorant);
    let sqrt2 = std::f64::consts::SQRT_2;
    DerivedRow {
        re_up: ratio_upper(majorant, ref_norm, ref_majorant),
        re_low: ratio_lower(minorant, ref_norm, ref_majorant),
        rcen_up: ratio_upper(cen_up, sqrt2 * ref_norm, sqrt2 * ref_majorant),
        rcen_low: cen_low
            .and_then(|low| ratio_lower(low, sqrt2 * ref_norm, sqrt2 * ref_majorant)),
        p_rel: gap_norm / (sqrt2 * own_norm),
        pre: gap_norm / own_norm,
    }
}

/// Nonlinear-stage report row; `ref_cen` is the combined norm of the
/// reference pair and `ref_majorant` its sqrt-2-scaled majorant. There is
/// no energy minorant on this stage.
pub fn derived_nonlinear_row(
    sqrt2_majorant: f64,
    gap_norm: f64,
    own_norm: f64,
    ref_norm: f64,
    ref_cen: f64,
    ref_majorant: f64,
) -> DerivedRow {
    let sqrt2 = std::f64::consts::SQRT_2;
    DerivedRow {
        re_up: ratio_upper(sqrt2_majorant, ref_norm, ref_majorant),
        re_low: None,
        rcen_up: ratio_upper(sqrt2_majorant, ref_cen, ref_majorant),
        rcen_low: ratio_lower(gap_norm / sqrt2, ref_cen, ref_majorant),
        p_rel: gap_norm / (sqrt2 * own_norm),
        pre: gap_norm / own_norm,
    }
}

/// Which bound family a record list belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Linear,
    Nonlinear,
}

/// Full per-level bound bundle assembled by the driver.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// Stage majorant as reported (M+ linear, sqrt(2) M+ nonlinear).
    pub majorant: f64,
    pub div_term: f64,
    pub gap_term: f64,
    /// Twice the duality term; zero on linear stages.
    pub df2_term: f64,
    pub minorant: Option<f64>,
    pub minorant_clamped: bool,
    pub cen_up: Option<f64>,
    pub cen_low: Option<f64>,
    /// Squared elementwise indicators.
    pub indicators: Vec<f64>,
    pub derived: DerivedRow,
    /// Index provenance (i, j, k, s) of the derived ratios.
    pub indices: [usize; 4],
}

/// Evaluates the relative bounds of level `i` against the reference pair
/// `(j, s)` from a stage's record list. Records store same-level
/// potential/flux pairs, so the flux index `k` must equal `i`; the
/// minorant stored in a record is always taken against the final level.
/// Returns `None` for out-of-range indices.
#[allow(clippy::too_many_arguments)]
pub fn relative_bounds(
    records: &[crate::fem::LevelRecord],
    i: usize,
    j: usize,
    k: usize,
    s: usize,
    stage: Stage,
    friedrichs: f64,
    eps_min: f64,
) -> Option<DerivedRow> {
    if i >= records.len() || j >= records.len() || s >= records.len() || k != i {
        return None;
    }
    let ri = &records[i];
    let rj = &records[j];
    let rs = &records[s];
    match stage {
        Stage::Linear => Some(derived_linear_row(
            ri.majorant,
            ri.minorant.unwrap_or(0.0),
            ri.dual_gap,
            ri.div_norm,
            ri.energy_norm,
            rj.energy_norm,
            rs.majorant,
            friedrichs,
            eps_min,
        )),
        Stage::Nonlinear => {
            let dual_s_sq = (rs.cen_pair * rs.cen_pair - rs.energy_norm * rs.energy_norm).max(0.0);
            let cen_js = (rj.energy_norm * rj.energy_norm + dual_s_sq).sqrt();
            Some(derived_nonlinear_row(
                ri.majorant,
                ri.dual_gap,
                ri.energy_norm,
                rj.energy_norm,
                cen_js,
                rs.majorant,
            ))
        }
    }
}

/// The three solution pipelines the driver can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    TwoTerm,
    ThreeTermSplit,
    ThreeTermDirect,
}

/// Combines stage majorants into the guaranteed bound on the energy error
/// of the assembled regular component.
pub fn overall_error(
    scheme: Scheme,
    eps_m: f64,
    harmonic: Option<f64>,
    linear: Option<f64>,
    sqrt2_nonlinear: f64,
) -> f64 {
    let h = harmonic.unwrap_or(0.0);
    let l = linear.unwrap_or(0.0);
    match scheme {
        Scheme::TwoTerm => 2.0 * l + sqrt2_nonlinear,
        Scheme::ThreeTermSplit => 2.0 * eps_m.sqrt() * h + 2.0 * l + sqrt2_nonlinear,
        Scheme::ThreeTermDirect => eps_m.sqrt() * h + sqrt2_nonlinear,
    }
}
