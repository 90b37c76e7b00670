//! Run configuration, the adaptive solve-estimate-mark-refine pipelines,
//! and the CSV/VTK/summary artifacts.
//!
//! A run owns a global mesh hierarchy. Three-term schemes first resolve
//! the molecular harmonic correction on the molecule sub-mesh, refining
//! the global mesh under its indicators; then either a linear interface
//! solve plus a shifted ionic solve (split) or one nonlinear solve of the
//! full regular problem (direct). Two-term schemes skip the harmonic
//! stage. Each stage appends one LevelRecord per adaptive level and its
//! relative-error columns are derived against the stage's final level.

use std::cell::Cell;
use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::estimate::{self, DerivedRow, Scheme, Stage};
use crate::fem::{self, LevelRecord, ScalarFieldP1};
use crate::flux::{self, FluxFieldRT0};
use crate::mesh::{self, ElemId, MeshHierarchy, Region, SubmeshMap, TriMesh};
use crate::problem::{self, FriedrichsDomain, ProblemSpec};
use crate::quad::Rule;

#[derive(Debug, thiserror::Error)]
pub enum DriverError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mesh(#[from] mesh::MeshError),
    #[error(transparent)]
    Problem(#[from] problem::ProblemError),
    #[error(transparent)]
    Fem(#[from] fem::FemError),
    #[error(transparent)]
    Flux(#[from] flux::FluxError),
    #[error(transparent)]
    Estimate(#[from] estimate::EstimateError),
}

/// Everything a run needs, parsed from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scheme: Scheme,
    pub eps_m: f64,
    pub eps_s: f64,
    pub ks2: f64,
    pub charge_scale: f64,
    pub g: f64,
    pub charges_file: Option<PathBuf>,
    pub square_side: f64,
    pub disk_center: [f64; 2],
    pub disk_radius: f64,
    pub h: f64,
    pub theta: f64,
    pub max_levels: usize,
    pub max_elements: usize,
    pub target_delta: Option<f64>,
    pub linear_rel_target: f64,
    pub freeze_factor: f64,
    pub harmonic_rel_tol: f64,
    pub lin_tol: f64,
    pub newton_tol: f64,
    pub output_dir: PathBuf,
    pub emit_csv: bool,
    pub emit_vtk: bool,
    pub emit_summary: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scheme: Scheme::TwoTerm,
            eps_m: 2.0,
            eps_s: 80.0,
            ks2: 10.0,
            charge_scale: 1.0,
            g: 0.0,
            charges_file: None,
            square_side: 8.0,
            disk_center: [0.0, 0.0],
            disk_radius: 1.0,
            h: 0.8,
            theta: 0.5,
            max_levels: 6,
            max_elements: 200_000,
            target_delta: None,
            linear_rel_target: 0.05,
            freeze_factor: 2.0,
            harmonic_rel_tol: 0.05,
            lin_tol: 1e-12,
            newton_tol: 1e-10,
            output_dir: PathBuf::from("out"),
            emit_csv: true,
            emit_vtk: true,
            emit_summary: true,
        }
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::TwoTerm => "two_term",
        Scheme::ThreeTermSplit => "three_term_split",
        Scheme::ThreeTermDirect => "three_term_direct",
    }
}

/// Parses a run configuration. Lines are `key = value`; `#` starts a
/// comment; unknown keys are rejected with their line number.
pub fn parse_config(text: &str) -> Result<RunConfig, DriverError> {
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or(DriverError::Config {
            line,
            message: format!("expected 'key = value', got '{}'", stripped),
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad_num = |what: &str| DriverError::Config {
            line,
            message: format!("invalid {} '{}'", what, value),
        };
        match key {
            "scheme" => {
                cfg.scheme = match value {
                    "two_term" => Scheme::TwoTerm,
                    "three_term_split" => Scheme::ThreeTermSplit,
                    "three_term_direct" => Scheme::ThreeTermDirect,
                    other => {
                        return Err(DriverError::Config {
                            line,
                            message: format!("unknown scheme '{}'", other),
                        })
                    }
                }
            }
            "eps_m" => cfg.eps_m = value.parse().map_err(|_| bad_num("number"))?,
            "eps_s" => cfg.eps_s = value.parse().map_err(|_| bad_num("number"))?,
            "ks2" => cfg.ks2 = value.parse().map_err(|_| bad_num("number"))?,
            "charge_scale" => cfg.charge_scale = value.parse().map_err(|_| bad_num("number"))?,
            "g" => cfg.g = value.parse().map_err(|_| bad_num("number"))?,
            "charges_file" => cfg.charges_file = Some(PathBuf::from(value)),
            "square_side" => cfg.square_side = value.parse().map_err(|_| bad_num("number"))?,
            "disk_center" => {
                let mut it = value.split_whitespace();
                let x: f64 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad_num("pair"))?;
                let y: f64 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad_num("pair"))?;
                if it.next().is_some() {
                    return Err(bad_num("pair"));
                }
                cfg.disk_center = [x, y];
            }
            "disk_radius" => cfg.disk_radius = value.parse().map_err(|_| bad_num("number"))?,
            "h" => cfg.h = value.parse().map_err(|_| bad_num("number"))?,
            "theta" => cfg.theta = value.parse().map_err(|_| bad_num("number"))?,
            "max_levels" => cfg.max_levels = value.parse().map_err(|_| bad_num("count"))?,
            "max_elements" => cfg.max_elements = value.parse().map_err(|_| bad_num("count"))?,
            "target_delta" => {
                cfg.target_delta = Some(value.parse().map_err(|_| bad_num("number"))?)
            }
            "linear_rel_target" => {
                cfg.linear_rel_target = value.parse().map_err(|_| bad_num("number"))?
            }
            "freeze_factor" => cfg.freeze_factor = value.parse().map_err(|_| bad_num("number"))?,
            "harmonic_rel_tol" => {
                cfg.harmonic_rel_tol = value.parse().map_err(|_| bad_num("number"))?
            }
            "lin_tol" => cfg.lin_tol = value.parse().map_err(|_| bad_num("number"))?,
            "newton_tol" => cfg.newton_tol = value.parse().map_err(|_| bad_num("number"))?,
            "output_dir" => cfg.output_dir = PathBuf::from(value),
            "emit_csv" => cfg.emit_csv = parse_bool(value, line)?,
            "emit_vtk" => cfg.emit_vtk = parse_bool(value, line)?,
            "emit_summary" => cfg.emit_summary = parse_bool(value, line)?,
            other => {
                return Err(DriverError::Config {
                    line,
                    message: format!("unknown key '{}'", other),
                })
            }
        }
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

fn parse_bool(value: &str, line: usize) -> Result<bool, DriverError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(DriverError::Config {
            line,
            message: format!("expected true or false, got '{}'", other),
        }),
    }
}

fn validate_config(cfg: &RunConfig) -> Result<(), DriverError> {
    let fail = |message: String| Err(DriverError::Config { line: 0, message });
    if !(cfg.theta > 0.0 && cfg.theta <= 1.0) {
        return fail(format!("theta {} outside (0, 1]", cfg.theta));
    }
    if cfg.max_levels == 0 {
        return fail("max_levels must be at least 1".into());
    }
    if let Some(d) = cfg.target_delta {
        if !(d > 0.0) {
            return fail(format!("target_delta {} must be positive", d));
        }
    }
    Ok(())
}

/// Loads a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, DriverError> {
    parse_config(&fs::read_to_string(path)?)
}

/// Serializes a configuration in the same flat format `parse_config`
/// reads; `load_config(emit_config(c))` reproduces `c`.
pub fn emit_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scheme = {}", scheme_name(cfg.scheme));
    let _ = writeln!(s, "eps_m = {}", cfg.eps_m);
    let _ = writeln!(s, "eps_s = {}", cfg.eps_s);
    let _ = writeln!(s, "ks2 = {}", cfg.ks2);
    let _ = writeln!(s, "charge_scale = {}", cfg.charge_scale);
    let _ = writeln!(s, "g = {}", cfg.g);
    if let Some(p) = &cfg.charges_file {
        let _ = writeln!(s, "charges_file = {}", p.display());
    }
    let _ = writeln!(s, "square_side = {}", cfg.square_side);
    let _ = writeln!(
        s,
        "disk_center = {} {}",
        cfg.disk_center[0], cfg.disk_center[1]
    );
    let _ = writeln!(s, "disk_radius = {}", cfg.disk_radius);
    let _ = writeln!(s, "h = {}", cfg.h);
    let _ = writeln!(s, "theta = {}", cfg.theta);
    let _ = writeln!(s, "max_levels = {}", cfg.max_levels);
    let _ = writeln!(s, "max_elements = {}", cfg.max_elements);
    if let Some(d) = cfg.target_delta {
        let _ = writeln!(s, "target_delta = {}", d);
    }
    let _ = writeln!(s, "linear_rel_target = {}", cfg.linear_rel_target);
    let _ = writeln!(s, "freeze_factor = {}", cfg.freeze_factor);
    let _ = writeln!(s, "harmonic_rel_tol = {}", cfg.harmonic_rel_tol);
    let _ = writeln!(s, "lin_tol = {}", cfg.lin_tol);
    let _ = writeln!(s, "newton_tol = {}", cfg.newton_tol);
    let _ = writeln!(s, "output_dir = {}", cfg.output_dir.display());
    let _ = writeln!(s, "emit_csv = {}", cfg.emit_csv);
    let _ = writeln!(s, "emit_vtk = {}", cfg.emit_vtk);
    let _ = writeln!(s, "emit_summary = {}", cfg.emit_summary);
    s
}

/// How far along the pipeline a run should go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopAfter {
    Harmonic,
    Linear,
    Full,
}

/// Outcome of a run: per-stage level records and the combined bound.
#[derive(Debug)]
pub struct RunSummary {
    pub scheme: Scheme,
    pub harmonic: Vec<LevelRecord>,
    pub linear: Vec<LevelRecord>,
    pub regular: Vec<LevelRecord>,
    pub freeze_level: Option<usize>,
    pub harmonic_majorant: Option<f64>,
    pub linear_majorant: Option<f64>,
    pub regular_majorant: Option<f64>,
    pub overall_bound: Option<f64>,
    pub overall_relative: Option<f64>,
    pub minorant_clamped: bool,
    pub overestimation_ratio: Option<f64>,
    pub saturation_count: u64,
    pub certified: bool,
    pub wall_seconds: f64,
}

fn build_spec(cfg: &RunConfig) -> Result<ProblemSpec, DriverError> {
    let charges = match &cfg.charges_file {
        Some(p) => problem::read_charges(p)?,
        None => Vec::new(),
    };
    let spec = ProblemSpec {
        eps_m: cfg.eps_m,
        eps_s: cfg.eps_s,
        ks2: cfg.ks2,
        charge_scale: cfg.charge_scale,
        charges,
        g: cfg.g,
        dimension: 2,
    };
    spec.validate()?;
    if !spec.charges.is_empty() {
        spec.charges_inside_disk(cfg.disk_center, cfg.disk_radius, 0.05 * cfg.disk_radius)?;
    }
    Ok(spec)
}

fn eps_of(mesh: &TriMesh, t: ElemId, eps_m: f64, eps_s: f64) -> f64 {
    match mesh.regions[t] {
        Region::Molecule => eps_m,
        Region::Solvent => eps_s,
    }
}

fn scaled_gradients(field: &ScalarFieldP1, eps_m: f64, eps_s: f64) -> Vec<[f64; 2]> {
    (0..field.mesh.num_triangles())
        .map(|t| {
            let e = eps_of(&field.mesh, t, eps_m, eps_s);
            let g = field.gradient(t);
            [e * g[0], e * g[1]]
        })
        .collect()
}

/// Output of the harmonic stage: the correction and its equilibrated flux
/// on the molecule sub-mesh of the global level where the stage stopped.
struct HarmonicStage {
    records: Vec<LevelRecord>,
    field: ScalarFieldP1,
    flux: FluxFieldRT0,
    submesh: Arc<TriMesh>,
    map: SubmeshMap,
    base_level: usize,
    majorant: f64,
}

fn run_harmonic_stage(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    hier: &mut MeshHierarchy,
    c_f_mol: f64,
) -> Result<HarmonicStage, DriverError> {
    let mut records = Vec::new();
    loop {
        let level = hier.len() - 1;
        let global = Arc::clone(hier.finest());
        let (sub_raw, map) = global.extract_region(Region::Molecule);
        let sub = Arc::new(sub_raw);
        let (uh, _info) = fem::solve_harmonic(&sub, spec, cfg.lin_tol)?;
        let moments = vec![[0.0; 3]; sub.num_triangles()];
        let q0: Vec<[f64; 2]> = (0..sub.num_triangles()).map(|t| uh.gradient(t)).collect();
        let t_flux = flux::equilibrate_patchwise(&sub, &moments, &q0, 1.0, 1.0)?;
        let hm = estimate::majorant_harmonic(&uh, &t_flux, c_f_mol);
        let norm = fem::energy_norm(&uh, 1.0, 1.0);
        records.push(LevelRecord {
            level: records.len(),
            elements: sub.num_triangles(),
            l2_norm: fem::l2_norm(&uh),
            energy_norm: norm,
            dual_gap: hm.gap_norm,
            majorant: hm.majorant,
            minorant: None,
            energy_j: 0.5 * norm * norm,
            div_norm: hm.div_norm,
            cen_pair: 0.0,
            df2: 0.0,
            alpha: None,
        });
        let done = hm.majorant <= cfg.harmonic_rel_tol * norm
            || hm.majorant <= f64::EPSILON * (1.0 + norm)
            || records.len() >= cfg.max_levels
            || global.num_triangles() >= cfg.max_elements;
        if done {
            return Ok(HarmonicStage {
                records,
                field: uh,
                flux: t_flux,
                submesh: sub,
                map,
                base_level: level,
                majorant: hm.majorant,
            });
        }
        let marked_sub = mesh::mark_dorfler(&hm.indicators, cfg.theta)?;
        let marked: Vec<ElemId> = marked_sub.iter().map(|&t| map.elem_to_parent[t]).collect();
        let refined = mesh::refine(hier.finest(), &marked)?;
        hier.push(refined);
    }
}

/// Harmonic flux re-expressed on the molecule sub-mesh of a descendant
/// mesh; `anc_to_base` maps the descendant's global elements onto the
/// harmonic stage's global level.
fn harmonic_flux_on(
    h: &HarmonicStage,
    sub: &Arc<TriMesh>,
    map: &SubmeshMap,
    anc_to_base: &[ElemId],
) -> Result<FluxFieldRT0, DriverError> {
    let ancestors: Vec<ElemId> = (0..sub.num_triangles())
        .map(|t| {
            let g = map.elem_to_parent[t];
            let g0 = anc_to_base[g];
            h.map.parent_to_sub[g0].expect("molecule elements descend from molecule elements")
        })
        .collect();
    Ok(flux::transfer_rt0(&h.flux, sub, &ancestors)?)
}

/// Analytic (divergence-free) part of the stage flux.
enum AnalyticFlux {
    None,
    /// `(eps_m - eps_s) grad G` on the solvent.
    Contrast,
    /// `-eps_m T` on the molecule, `eps_m grad G` on the solvent.
    Harmonic {
        t_flux: FluxFieldRT0,
        sub_of: Vec<Option<ElemId>>,
    },
}

impl AnalyticFlux {
    fn eval(&self, spec: &ProblemSpec, mesh: &TriMesh, t: ElemId, p: [f64; 2]) -> [f64; 2] {
        match self {
            AnalyticFlux::None => [0.0, 0.0],
            AnalyticFlux::Contrast => {
                if mesh.regions[t] == Region::Solvent {
                    let (_, g) = spec.green_2d(p).expect("charges sit inside the molecule");
                    let c = spec.eps_m - spec.eps_s;
                    [c * g[0], c * g[1]]
                } else {
                    [0.0, 0.0]
                }
            }
            AnalyticFlux::Harmonic { t_flux, sub_of } => {
                if mesh.regions[t] == Region::Molecule {
                    let sub = sub_of[t].expect("molecule element maps into the sub-mesh");
                    let v = t_flux.value_at(sub, p);
                    [-spec.eps_m * v[0], -spec.eps_m * v[1]]
                } else {
                    let (_, g) = spec.green_2d(p).expect("charges sit inside the molecule");
                    [spec.eps_m * g[0], spec.eps_m * g[1]]
                }
            }
        }
    }
}

struct LinearStage {
    records: Vec<LevelRecord>,
    field: ScalarFieldP1,
    base_level: usize,
    frozen_level: usize,
    majorant: f64,
    clamped: bool,
}

fn quad_rule_for(spec: &ProblemSpec) -> Rule {
    if spec.charges.is_empty() {
        Rule::Degree4
    } else {
        Rule::Degree7
    }
}

fn run_linear_stage(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    hier: &mut MeshHierarchy,
    harmonic: Option<&HarmonicStage>,
    c_f_omega: f64,
) -> Result<LinearStage, DriverError> {
    let base_level = hier.len() - 1;
    let eps_min = cfg.eps_m.min(cfg.eps_s);
    let rule = quad_rule_for(spec);
    let mut records = Vec::new();
    let mut energies = Vec::new();
    loop {
        let level = hier.len() - 1;
        let mesh = Arc::clone(hier.finest());
        let (load, y_g, bc_is_g): (Vec<f64>, AnalyticFlux, bool) = match harmonic {
            None => (
                problem::interface_load_2term(&mesh, spec)?,
                AnalyticFlux::Contrast,
                false,
            ),
            Some(h) => {
                let (sub_raw, map) = mesh.extract_region(Region::Molecule);
                let sub = Arc::new(sub_raw);
                let anc = hier.ancestor_map(level, h.base_level);
                let t_cur = harmonic_flux_on(h, &sub, &map, &anc)?;
                let load = problem::interface_load_3term(&mesh, spec, &t_cur, &map)?;
                (
                    load,
                    AnalyticFlux::Harmonic {
                        t_flux: t_cur,
                        sub_of: map.parent_to_sub.clone(),
                    },
                    true,
                )
            }
        };
        let (ul, _info) = if bc_is_g {
            fem::solve_linear_component(&mesh, spec, &load, |_| spec.g, cfg.lin_tol)?
        } else {
            fem::solve_linear_component(
                &mesh,
                spec,
                &load,
                |p| spec.g - spec.green_2d(p).expect("charges sit inside the molecule").0,
                cfg.lin_tol,
            )?
        };
        let grads = scaled_gradients(&ul, cfg.eps_m, cfg.eps_s);
        let target = |t: ElemId, p: [f64; 2]| {
            let a = y_g.eval(spec, &mesh, t, p);
            [grads[t][0] - a[0], grads[t][1] - a[1]]
        };
        let min = flux::minimize_majorant_linear(&mesh, cfg.eps_m, cfg.eps_s, c_f_omega, target, rule)?;
        let lm = estimate::majorant_linear(
            &ul,
            cfg.eps_m,
            cfg.eps_s,
            c_f_omega,
            &min.flux,
            |t, p| y_g.eval(spec, &mesh, t, p),
            rule,
        );
        let norm = fem::energy_norm(&ul, cfg.eps_m, cfg.eps_s);
        let cen = estimate::flux_dual_norm(
            &mesh,
            cfg.eps_m,
            cfg.eps_s,
            |t, p| {
                let a = y_g.eval(spec, &mesh, t, p);
                let b = min.flux.value_at(t, p);
                [a[0] + b[0], a[1] + b[1]]
            },
            rule,
        );
        energies.push(fem::energy_j_linear(&ul, spec, &load));
        records.push(LevelRecord {
            level: records.len(),
            elements: mesh.num_triangles(),
            l2_norm: fem::l2_norm(&ul),
            energy_norm: norm,
            dual_gap: lm.gap_norm,
            majorant: lm.majorant,
            minorant: None,
            energy_j: *energies.last().unwrap(),
            div_norm: lm.div_norm,
            cen_pair: (norm * norm + cen * cen).sqrt(),
            df2: 0.0,
            alpha: Some(min.alpha),
        });
        let own_rel = estimate::ratio_upper(lm.majorant, norm, lm.majorant);
        let done = matches!(own_rel, Some(r) if r <= cfg.freeze_factor * cfg.linear_rel_target)
            || lm.majorant <= f64::EPSILON * (1.0 + norm)
            || records.len() >= cfg.max_levels
            || mesh.num_triangles() >= cfg.max_elements;
        if done {
            let j_final = *energies.last().unwrap();
            let mut clamped = false;
            for (rec, &j) in records.iter_mut().zip(energies.iter()) {
                let (m, c) = estimate::minorant_from_energies(j, j_final);
                rec.minorant = Some(m);
                clamped |= c;
            }
            return Ok(LinearStage {
                records,
                field: ul,
                base_level,
                frozen_level: level,
                majorant: lm.majorant,
                clamped,
            });
        }
        let marked = mesh::mark_dorfler(&lm.indicators, cfg.theta)?;
        let refined = mesh::refine(hier.finest(), &marked)?;
        hier.push(refined);
    }
}

/// Point evaluator for the frozen linear iterate (plus the Coulombic
/// field for the two-term scheme), reachable from any mesh whose elements
/// carry ancestors on the freeze hierarchy's base level.
struct ShiftEval<'a> {
    global: &'a MeshHierarchy,
    base_level: usize,
    indices: Vec<Vec<Vec<ElemId>>>,
    frozen: &'a ScalarFieldP1,
    spec: &'a ProblemSpec,
    add_green: bool,
}

impl ShiftEval<'_> {
    fn eval(&self, base_elem: ElemId, p: [f64; 2]) -> f64 {
        let el = self
            .global
            .locate_with_index(self.base_level, base_elem, p, &self.indices);
        let mut v = self.frozen.value_in(el, p);
        if self.add_green {
            v += self
                .spec
                .green_2d(p)
                .expect("charges sit inside the molecule")
                .0;
        }
        v
    }
}

struct RegularStage {
    records: Vec<LevelRecord>,
    field: ScalarFieldP1,
    mesh: Arc<TriMesh>,
    hier: MeshHierarchy,
    overestimation_ratio: Option<f64>,
    saturation: u64,
    majorant: f64,
}

/// Divergence tolerance for the duality term: generous against patch-sum
/// rounding, far below any real equilibration defect.
fn div_tolerance(mesh: &TriMesh, rho_p0: &[f64], q0: &[[f64; 2]]) -> f64 {
    let rho_linf = rho_p0.iter().fold(0.0, |a: f64, &b| a.max(b.abs()));
    let qmax = q0
        .iter()
        .fold(0.0, |a: f64, b| a.max(b[0].abs()).max(b[1].abs()));
    let amin = (0..mesh.num_triangles())
        .map(|t| mesh.area(t))
        .fold(f64::INFINITY, f64::min);
    1e-7 * (1.0 + rho_linf + qmax / amin.sqrt().max(1e-300))
}

#[allow(clippy::too_many_arguments)]
fn run_regular_stage(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    global: &MeshHierarchy,
    base_level: usize,
    lin: Option<&LinearStage>,
    harmonic: Option<&HarmonicStage>,
    overall_base: f64,
    two_term: bool,
) -> Result<RegularStage, DriverError> {
    let direct = lin.is_none();
    let rule = Rule::Degree7;
    let mut hier = MeshHierarchy::new((**global.mesh(base_level)).clone());
    let mut records: Vec<LevelRecord> = Vec::new();
    let mut saturation = 0u64;
    let mut first_field: Option<ScalarFieldP1> = None;
    let mut prev_field: Option<ScalarFieldP1> = None;
    let shift = lin.map(|l| ShiftEval {
        global,
        base_level: l.base_level,
        indices: (l.base_level..l.frozen_level)
            .map(|lvl| global.children_index(lvl))
            .collect(),
        frozen: &l.field,
        spec,
        add_green: two_term,
    });
    loop {
        let nl_level = hier.len() - 1;
        let mesh = Arc::clone(hier.finest());
        let anc = hier.ancestor_map(nl_level, 0);
        let shift_at = |t: ElemId, p: [f64; 2]| match &shift {
            Some(s) => s.eval(anc[t], p),
            None => 0.0,
        };

        // analytic flux parts and the load of the direct problem
        let y_g = match (direct, harmonic) {
            (true, Some(h)) => {
                let (sub_raw, map) = mesh.extract_region(Region::Molecule);
                let sub = Arc::new(sub_raw);
                let t_cur = harmonic_flux_on(h, &sub, &map, &anc)?;
                Some((t_cur, map))
            }
            _ => None,
        };
        let initial = prev_field.take().map(|f: ScalarFieldP1| f.values);
        let (v, info) = if let Some((t_cur, map)) = &y_g {
            let load = problem::interface_load_3term(&mesh, spec, t_cur, map)?;
            fem::solve_direct_regular(&mesh, spec, &load, initial, cfg.lin_tol, cfg.newton_tol)?
        } else {
            fem::solve_nonlinear_component(
                &mesh,
                spec,
                shift_at,
                initial,
                cfg.lin_tol,
                cfg.newton_tol,
            )?
        };
        saturation += info.saturation_count;

        let clamps = Cell::new(0u64);
        let rho = |t: ElemId, p: [f64; 2]| {
            if mesh.regions[t] == Region::Solvent {
                let mut c = clamps.get();
                let s = fem::clamped_sinh(v.value_in(t, p) + shift_at(t, p), &mut c);
                clamps.set(c);
                spec.ks2 * s
            } else {
                0.0
            }
        };
        let moments = flux::vertex_moments(&mesh, rho, rule);
        let rho_p0 = flux::projection_p0(&mesh, rho, rule);
        let analytic = match &y_g {
            Some((t_cur, map)) => AnalyticFlux::Harmonic {
                t_flux: t_cur.clone(),
                sub_of: map.parent_to_sub.clone(),
            },
            None => AnalyticFlux::None,
        };
        // equilibration data: element means of the full flux target
        let grads = scaled_gradients(&v, cfg.eps_m, cfg.eps_s);
        let q0: Vec<[f64; 2]> = match &analytic {
            AnalyticFlux::None => grads.clone(),
            _ => {
                let means = flux::projection_means(&mesh, |t, p| {
                    let a = analytic.eval(spec, &mesh, t, p);
                    [grads[t][0] - a[0], grads[t][1] - a[1]]
                });
                means
            }
        };
        let y = flux::equilibrate_patchwise(&mesh, &moments, &q0, cfg.eps_m, cfg.eps_s)?;
        saturation += clamps.get();

        let div_tol = div_tolerance(&mesh, &rho_p0, &q0);
        let mut est_clamps = 0u64;
        let nm = estimate::majorant_nonlinear(
            &mesh,
            cfg.eps_m,
            cfg.eps_s,
            spec.ks2,
            &y,
            |t, p| {
                let a = analytic.eval(spec, &mesh, t, p);
                [grads[t][0] - a[0], grads[t][1] - a[1]]
            },
            |t, p| v.value_in(t, p) + shift_at(t, p),
            div_tol,
            rule,
            &mut est_clamps,
        )?;
        saturation += est_clamps;

        let norm = fem::energy_norm(&v, cfg.eps_m, cfg.eps_s);
        let dual = estimate::flux_dual_norm(
            &mesh,
            cfg.eps_m,
            cfg.eps_s,
            |t, p| {
                let a = analytic.eval(spec, &mesh, t, p);
                let b = y.value_at(t, p);
                // total stage flux: analytic part with its own sign plus y0
                [b[0] - a[0] + 2.0 * a[0] - a[0], b[1] + a[1] - a[1]]
            },
            rule,
        );
        let mut j_clamps = 0u64;
        let energy_j = if let Some((t_cur, map)) = &y_g {
            let load = problem::interface_load_3term(&mesh, spec, t_cur, map)?;
            fem::energy_j_direct(&v, spec, &load, &mut j_clamps)
        } else {
            fem::energy_j_nonlinear(&v, spec, shift_at, &mut j_clamps)
        };
        saturation += j_clamps;
        records.push(LevelRecord {
            level: records.len(),
            elements: mesh.num_triangles(),
            l2_norm: fem::l2_norm(&v),
            energy_norm: norm,
            dual_gap: nm.gap_norm,
            majorant: nm.sqrt2_majorant,
            minorant: None,
            energy_j,
            div_norm: y.div_l2_norm(),
            cen_pair: (norm * norm + dual * dual).sqrt(),
            df2: 2.0 * nm.df,
            alpha: None,
        });
        if first_field.is_none() {
            first_field = Some(v.clone());
        }

        let overall_now = overall_base + nm.sqrt2_majorant;
        let delta_met = matches!(cfg.target_delta, Some(d) if overall_now <= d);
        let done = delta_met
            || nm.sqrt2_majorant <= f64::EPSILON * (1.0 + norm)
            || records.len() >= cfg.max_levels
            || mesh.num_triangles() >= cfg.max_elements;
        if done {
            // overestimation diagnostic: the first iterate paired with the
            // final flux, both expressed on the final mesh
            let mut ratio = None;
            if records.len() >= 2 {
                let anc0 = hier.ancestor_map(hier.len() - 1, 0);
                let u0 = fem::transfer_to_descendant(
                    first_field.as_ref().unwrap(),
                    &mesh,
                    &anc0,
                );
                let grads0 = scaled_gradients(&u0, cfg.eps_m, cfg.eps_s);
                let mut c0 = 0u64;
                let m0 = estimate::majorant_nonlinear(
                    &mesh,
                    cfg.eps_m,
                    cfg.eps_s,
                    spec.ks2,
                    &y,
                    |t, p| {
                        let a = analytic.eval(spec, &mesh, t, p);
                        [grads0[t][0] - a[0], grads0[t][1] - a[1]]
                    },
                    |t, p| u0.value_in(t, p) + shift_at(t, p),
                    div_tol,
                    rule,
                    &mut c0,
                )?;
                if m0.sqrt2_majorant > 0.0 {
                    ratio = Some(records[0].majorant / m0.sqrt2_majorant);
                }
            }
            return Ok(RegularStage {
                records,
                field: v,
                mesh,
                hier,
                overestimation_ratio: ratio,
                saturation,
                majorant: nm.sqrt2_majorant,
            });
        }
        let marked = mesh::mark_dorfler(&nm.indicators, cfg.theta)?;
        let refined = mesh::refine(hier.finest(), &marked)?;
        let next_mesh = Arc::new(refined.mesh.clone());
        let _ = next_mesh;
        hier.push(refined);
        let anc_next = hier.ancestor_map(hier.len() - 1, hier.len() - 2);
        prev_field = Some(fem::transfer_to_descendant(&v, hier.finest(), &anc_next));
    }
}

fn first_tri_of_vertex(mesh: &TriMesh) -> Vec<ElemId> {
    let mut out = vec![usize::MAX; mesh.num_vertices()];
    for t in 0..mesh.num_triangles() {
        for &v in &mesh.triangles[t] {
            if out[v] == usize::MAX {
                out[v] = t;
            }
        }
    }
    out
}

/// Runs the configured pipeline up to `stop`, writing the enabled
/// artifacts into the output directory.
pub fn run_adaptive(cfg: &RunConfig, stop: StopAfter) -> Result<RunSummary, DriverError> {
    let start = Instant::now();
    let spec = build_spec(cfg)?;
    let initial = mesh::build_disk_in_square(
        cfg.square_side,
        cfg.disk_center,
        cfg.disk_radius,
        cfg.h,
    )?;
    run_pipeline(cfg, &spec, initial, stop, start)
}

/// Like `run_adaptive` but starting from a caller-provided mesh.
pub fn run_adaptive_on(
    cfg: &RunConfig,
    initial: TriMesh,
    stop: StopAfter,
) -> Result<RunSummary, DriverError> {
    let start = Instant::now();
    let spec = build_spec(cfg)?;
    run_pipeline(cfg, &spec, initial, stop, start)
}

fn run_pipeline(
    cfg: &RunConfig,
    spec: &ProblemSpec,
    initial: TriMesh,
    stop: StopAfter,
    start: Instant,
) -> Result<RunSummary, DriverError> {
    let emitting = cfg.emit_csv || cfg.emit_vtk || cfg.emit_summary;
    if emitting {
        fs::create_dir_all(&cfg.output_dir)?;
    }
    let c_f_omega = problem::friedrichs_bound(FriedrichsDomain::Square {
        side: cfg.square_side,
    })?;
    let c_f_mol = problem::friedrichs_bound(FriedrichsDomain::Disk {
        radius: cfg.disk_radius,
    })?;
    let eps_min = cfg.eps_m.min(cfg.eps_s);
    let mut hier = MeshHierarchy::new(initial);
    let three_term = cfg.scheme != Scheme::TwoTerm;

    let mut summary = RunSummary {
        scheme: cfg.scheme,
        harmonic: Vec::new(),
        linear: Vec::new(),
        regular: Vec::new(),
        freeze_level: None,
        harmonic_majorant: None,
        linear_majorant: None,
        regular_majorant: None,
        overall_bound: None,
        overall_relative: None,
        minorant_clamped: false,
        overestimation_ratio: None,
        saturation_count: 0,
        certified: true,
        wall_seconds: 0.0,
    };

    let harmonic = if three_term || stop == StopAfter::Harmonic {
        let h = run_harmonic_stage(cfg, spec, &mut hier, c_f_mol)?;
        summary.harmonic = h.records.clone();
        summary.harmonic_majorant = Some(h.majorant);
        if cfg.emit_csv {
            emit_csv(
                &cfg.output_dir.join("harmonic.csv"),
                &h.records,
                &derived_rows(&h.records, Stage::Linear, c_f_mol, 1.0),
            )?;
        }
        Some(h)
    } else {
        None
    };
    if stop == StopAfter::Harmonic {
        if let Some(h) = &harmonic {
            if cfg.emit_vtk {
                let point = vec![("u_harmonic".to_string(), h.field.values.clone())];
                let cells = vec![(
                    "indicator".to_string(),
                    estimate::majorant_harmonic(&h.field, &h.flux, c_f_mol).indicators,
                )];
                let vectors = vec![(
                    "flux".to_string(),
                    centroid_values(&h.flux, &h.submesh),
                )];
                emit_vtk(
                    &cfg.output_dir.join("solution.vtk"),
                    &h.submesh,
                    &point,
                    &cells,
                    &vectors,
                )?;
            }
        }
        return finish(cfg, summary, start);
    }

    let h_for_split = if cfg.scheme == Scheme::ThreeTermSplit {
        harmonic.as_ref()
    } else {
        None
    };
    let linear = if cfg.scheme != Scheme::ThreeTermDirect {
        let l = run_linear_stage(cfg, spec, &mut hier, h_for_split, c_f_omega)?;
        summary.linear = l.records.clone();
        summary.linear_majorant = Some(l.majorant);
        summary.freeze_level = Some(l.records.len() - 1);
        summary.minorant_clamped = l.clamped;
        if cfg.emit_csv {
            emit_csv(
                &cfg.output_dir.join("linear.csv"),
                &l.records,
                &derived_rows(&l.records, Stage::Linear, c_f_omega, eps_min),
            )?;
        }
        Some(l)
    } else {
        None
    };
    if stop == StopAfter::Linear {
        if let Some(l) = &linear {
            if cfg.emit_vtk {
                let mesh = Arc::clone(&l.field.mesh);
                let green = green_nodal(spec, &mesh);
                let potential: Vec<f64> = l
                    .field
                    .values
                    .iter()
                    .zip(green.iter())
                    .map(|(u, g)| u + g)
                    .collect();
                let point = vec![
                    ("u_stage".to_string(), l.field.values.clone()),
                    ("green".to_string(), green),
                    ("potential".to_string(), potential),
                ];
                let cells = vec![("region".to_string(), region_values(&mesh))];
                emit_vtk(
                    &cfg.output_dir.join("solution.vtk"),
                    &mesh,
                    &point,
                    &cells,
                    &[],
                )?;
            }
        }
        return finish(cfg, summary, start);
    }

    let overall_base = match cfg.scheme {
        Scheme::TwoTerm => 2.0 * linear.as_ref().map(|l| l.majorant).unwrap_or(0.0),
        Scheme::ThreeTermSplit => {
            2.0 * cfg.eps_m.sqrt() * harmonic.as_ref().map(|h| h.majorant).unwrap_or(0.0)
                + 2.0 * linear.as_ref().map(|l| l.majorant).unwrap_or(0.0)
        }
        Scheme::ThreeTermDirect => {
            cfg.eps_m.sqrt() * harmonic.as_ref().map(|h| h.majorant).unwrap_or(0.0)
        }
    };
    let base_level = match (&harmonic, cfg.scheme) {
        (Some(h), Scheme::ThreeTermSplit) | (Some(h), Scheme::ThreeTermDirect) => h.base_level,
        _ => 0,
    };
    let reg = run_regular_stage(
        cfg,
        spec,
        &hier,
        base_level,
        linear.as_ref(),
        if cfg.scheme == Scheme::ThreeTermDirect {
            harmonic.as_ref()
        } else {
            None
        },
        overall_base,
        cfg.scheme == Scheme::TwoTerm,
    )?;
    summary.regular = reg.records.clone();
    summary.regular_majorant = Some(reg.majorant);
    summary.overestimation_ratio = reg.overestimation_ratio;
    summary.saturation_count += reg.saturation;
    summary.certified = summary.saturation_count == 0;
    summary.overall_bound = Some(estimate::overall_error(
        cfg.scheme,
        cfg.eps_m,
        summary.harmonic_majorant,
        summary.linear_majorant,
        reg.majorant,
    ));

    // assembled regular component on the final mesh, for the relative
    // figure and the artifacts
    let mesh = Arc::clone(&reg.mesh);
    let (assembled, w_nodal) = match &linear {
        Some(l) => {
            let first_tri = first_tri_of_vertex(&mesh);
            let anc = reg.hier.ancestor_map(reg.hier.len() - 1, 0);
            let sh = ShiftEval {
                global: &hier,
                base_level: l.base_level,
                indices: (l.base_level..l.frozen_level)
                    .map(|lvl| hier.children_index(lvl))
                    .collect(),
                frozen: &l.field,
                spec,
                add_green: false,
            };
            let mut ul_vals = vec![0.0; mesh.num_vertices()];
            for (vtx, val) in ul_vals.iter_mut().enumerate() {
                let t = first_tri[vtx];
                *val = sh.eval(anc[t], mesh.vertices[vtx]);
            }
            let assembled: Vec<f64> = reg
                .field
                .values
                .iter()
                .zip(ul_vals.iter())
                .map(|(a, b)| a + b)
                .collect();
            (assembled, ul_vals)
        }
        None => (reg.field.values.clone(), vec![0.0; mesh.num_vertices()]),
    };
    let assembled_field = ScalarFieldP1 {
        mesh: Arc::clone(&mesh),
        values: assembled.clone(),
        dirichlet: vec![false; mesh.num_vertices()],
    };
    let denom = fem::energy_norm(&assembled_field, cfg.eps_m, cfg.eps_s);
    if denom > 0.0 {
        summary.overall_relative = summary.overall_bound.map(|b| b / denom);
    }

    if cfg.emit_csv {
        let name = if cfg.scheme == Scheme::ThreeTermDirect {
            "direct.csv"
        } else {
            "nonlinear.csv"
        };
        emit_csv(
            &cfg.output_dir.join(name),
            &reg.records,
            &derived_rows(&reg.records, Stage::Nonlinear, c_f_omega, eps_min),
        )?;
    }
    if cfg.emit_vtk {
        let green = green_nodal(spec, &mesh);
        let potential: Vec<f64> = assembled
            .iter()
            .zip(green.iter())
            .map(|(u, g)| u + g)
            .collect();
        let point = vec![
            ("u_stage".to_string(), reg.field.values.clone()),
            ("u_regular".to_string(), assembled),
            ("w_shift".to_string(), w_nodal),
            ("green".to_string(), green),
            ("potential".to_string(), potential),
        ];
        let cells = vec![("region".to_string(), region_values(&mesh))];
        emit_vtk(
            &cfg.output_dir.join("solution.vtk"),
            &mesh,
            &point,
            &cells,
            &[],
        )?;
    }
    finish(cfg, summary, start)
}

fn finish(
    cfg: &RunConfig,
    mut summary: RunSummary,
    start: Instant,
) -> Result<RunSummary, DriverError> {
    summary.wall_seconds = start.elapsed().as_secs_f64();
    if cfg.emit_summary {
        emit_summary(&cfg.output_dir.join("summary.txt"), &summary)?;
    }
    Ok(summary)
}

fn green_nodal(spec: &ProblemSpec, mesh: &TriMesh) -> Vec<f64> {
    mesh.vertices
        .iter()
        .map(|&p| {
            spec.green_2d(p)
                .expect("charges sit inside the molecule")
                .0
        })
        .collect()
}

fn region_values(mesh: &TriMesh) -> Vec<f64> {
    (0..mesh.num_triangles())
        .map(|t| match mesh.regions[t] {
            Region::Molecule => 0.0,
            Region::Solvent => 1.0,
        })
        .collect()
}

fn centroid_values(flux: &FluxFieldRT0, mesh: &TriMesh) -> Vec<[f64; 2]> {
    (0..mesh.num_triangles())
        .map(|t| {
            let [p0, p1, p2] = mesh.coords(t);
            let c = [
                (p0[0] + p1[0] + p2[0]) / 3.0,
                (p0[1] + p1[1] + p2[1]) / 3.0,
            ];
            flux.value_at(t, c)
        })
        .collect()
}

/// Derived relative-error columns, each level against the stage's final
/// level (`j = s = final`, `k = i`).
pub fn derived_rows(
    records: &[LevelRecord],
    stage: Stage,
    friedrichs: f64,
    eps_min: f64,
) -> Vec<Option<DerivedRow>> {
    if records.is_empty() {
        return Vec::new();
    }
    let p = records.len() - 1;
    (0..records.len())
        .map(|i| estimate::relative_bounds(records, i, p, i, p, stage, friedrichs, eps_min))
        .collect()
}

fn format_sig6(x: f64) -> String {
    format!("{:.5e}", x)
}

fn opt_col(x: Option<f64>) -> String {
    x.map(format_sig6).unwrap_or_default()
}

/// Writes per-level records with their derived columns; 6 significant
/// digits throughout.
pub fn emit_csv(
    path: &Path,
    records: &[LevelRecord],
    derived: &[Option<DerivedRow>],
) -> Result<(), DriverError> {
    let mut s = String::new();
    s.push_str(
        "level,elements,l2_norm,energy_norm,gap,M_minus,M_plus,J,RE_low,RE_up,RCEN_low,RCEN_up,P_rel,PRE\n",
    );
    for (rec, d) in records.iter().zip(derived.iter()) {
        let (re_low, re_up, rcen_low, rcen_up, p_rel, pre) = match d {
            Some(d) => (
                opt_col(d.re_low),
                opt_col(d.re_up),
                opt_col(d.rcen_low),
                opt_col(d.rcen_up),
                format_sig6(d.p_rel),
                format_sig6(d.pre),
            ),
            None => Default::default(),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            rec.level,
            rec.elements,
            format_sig6(rec.l2_norm),
            format_sig6(rec.energy_norm),
            format_sig6(rec.dual_gap),
            opt_col(rec.minorant),
            format_sig6(rec.majorant),
            format_sig6(rec.energy_j),
            re_low,
            re_up,
            rcen_low,
            rcen_up,
            p_rel,
            pre,
        );
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes a legacy ASCII VTK unstructured grid with the given point and
/// cell attributes.
pub fn emit_vtk(
    path: &Path,
    mesh: &TriMesh,
    point_fields: &[(String, Vec<f64>)],
    cell_scalars: &[(String, Vec<f64>)],
    cell_vectors: &[(String, Vec<[f64; 2]>)],
) -> Result<(), DriverError> {
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str("pbesolve output\n");
    s.push_str("ASCII\n");
    s.push_str("DATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.num_vertices());
    for p in &mesh.vertices {
        let _ = writeln!(s, "{:.9e} {:.9e} 0.0", p[0], p[1]);
    }
    let m = mesh.num_triangles();
    let _ = writeln!(s, "CELLS {} {}", m, 4 * m);
    for tri in &mesh.triangles {
        let _ = writeln!(s, "3 {} {} {}", tri[0], tri[1], tri[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", m);
    for _ in 0..m {
        s.push_str("5\n");
    }
    if !point_fields.is_empty() {
        let _ = writeln!(s, "POINT_DATA {}", mesh.num_vertices());
        for (name, values) in point_fields {
            let _ = writeln!(s, "SCALARS {} double 1", name);
            s.push_str("LOOKUP_TABLE default\n");
            for v in values {
                let _ = writeln!(s, "{:.9e}", v);
            }
        }
    }
    if !cell_scalars.is_empty() || !cell_vectors.is_empty() {
        let _ = writeln!(s, "CELL_DATA {}", m);
        for (name, values) in cell_scalars {
            let _ = writeln!(s, "SCALARS {} double 1", name);
            s.push_str("LOOKUP_TABLE default\n");
            for v in values {
                let _ = writeln!(s, "{:.9e}", v);
            }
        }
        for (name, values) in cell_vectors {
            let _ = writeln!(s, "VECTORS {} double", name);
            for v in values {
                let _ = writeln!(s, "{:.9e} {:.9e} 0.0", v[0], v[1]);
            }
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes the run summary as `key = value` lines.
pub fn emit_summary(path: &Path, summary: &RunSummary) -> Result<(), DriverError> {
    let mut s = String::new();
    let _ = writeln!(s, "scheme = {}", scheme_name(summary.scheme));
    let _ = writeln!(s, "levels_harmonic = {}", summary.harmonic.len());
    let _ = writeln!(s, "levels_linear = {}", summary.linear.len());
    let _ = writeln!(s, "levels_regular = {}", summary.regular.len());
    if let Some(f) = summary.freeze_level {
        let _ = writeln!(s, "freeze_level = {}", f);
    }
    if let Some(m) = summary.harmonic_majorant {
        let _ = writeln!(s, "majorant_harmonic = {}", format_sig6(m));
    }
    if let Some(m) = summary.linear_majorant {
        let _ = writeln!(s, "majorant_linear = {}", format_sig6(m));
    }
    if let Some(m) = summary.regular_majorant {
        let _ = writeln!(s, "majorant_regular = {}", format_sig6(m));
    }
    if let Some(b) = summary.overall_bound {
        let _ = writeln!(s, "overall_bound = {}", format_sig6(b));
    }
    if let Some(r) = summary.overall_relative {
        let _ = writeln!(s, "overall_relative = {}", format_sig6(r));
    }
    if let Some(r) = summary.overestimation_ratio {
        let _ = writeln!(s, "overestimation_ratio = {}", format_sig6(r));
    }
    let _ = writeln!(s, "minorant_clamped = {}", summary.minorant_clamped);
    let _ = writeln!(s, "saturation_count = {}", summary.saturation_count);
    let _ = writeln!(s, "certified = {}", summary.certified);
    let _ = writeln!(s, "wall_seconds = {:.3}", summary.wall_seconds);
    fs::write(path, s)?;
    Ok(())
}

/// Re-derives the ratio columns of an emitted CSV from its norm and
/// majorant columns and checks them against the stored values. Returns
/// false when any row disagrees beyond 1e-4 relative.
pub fn verify_report(path: &Path) -> Result<bool, DriverError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| cols.iter().position(|c| *c == name);
    let (norm_c, gap_c, mm_c, mp_c) = match (
        find("energy_norm"),
        find("gap"),
        find("M_minus"),
        find("M_plus"),
    ) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => {
            return Err(DriverError::Config {
                line: 1,
                message: "missing expected CSV columns".into(),
            })
        }
    };
    let (re_low_c, re_up_c, p_rel_c, pre_c) = match (
        find("RE_low"),
        find("RE_up"),
        find("P_rel"),
        find("PRE"),
    ) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => {
            return Err(DriverError::Config {
                line: 1,
                message: "missing expected CSV columns".into(),
            })
        }
    };
    let rows: Vec<Vec<&str>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    let Some(last) = rows.last() else {
        return Ok(true);
    };
    let parse = |s: &str| -> Option<f64> { s.parse().ok() };
    let norm_p: f64 = parse(last[norm_c]).unwrap_or(f64::NAN);
    let m_p: f64 = parse(last[mp_c]).unwrap_or(f64::NAN);
    let agree = |stored: Option<f64>, fresh: Option<f64>| match (stored, fresh) {
        (Some(a), Some(b)) => (a - b).abs() <= 1e-4 * b.abs().max(1e-300),
        (None, _) => true,
        (Some(_), None) => false,
    };
    let mut ok = true;
    for row in &rows {
        let norm_i = parse(row[norm_c]).unwrap_or(f64::NAN);
        let gap_i = parse(row[gap_c]).unwrap_or(f64::NAN);
        let m_i = parse(row[mp_c]).unwrap_or(f64::NAN);
        ok &= agree(
            parse(row[re_up_c]),
            estimate::ratio_upper(m_i, norm_p, m_p),
        );
        if let Some(mm) = parse(row[mm_c]) {
            ok &= agree(
                parse(row[re_low_c]),
                estimate::ratio_lower(mm, norm_p, m_p),
            );
        }
        ok &= agree(
            parse(row[p_rel_c]),
            Some(gap_i / (std::f64::consts::SQRT_2 * norm_i)),
        );
        ok &= agree(parse(row[pre_c]), Some(gap_i / norm_i));
    }
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn config_round_trips_through_emit_and_parse() {
        let mut cfg = RunConfig::default();
        cfg.scheme = Scheme::ThreeTermSplit;
        cfg.target_delta = Some(12.5);
        cfg.charges_file = Some(PathBuf::from("charges.txt"));
        cfg.disk_center = [0.25, -0.5];
        let text = emit_config(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_rejects_unknown_keys_with_line_numbers() {
        let text = "eps_m = 2\n# fine\nwibble = 3\n";
        match parse_config(text) {
            Err(DriverError::Config { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("wibble"));
            }
            other => panic!("unexpected {:?}", other),
        }
        let bad_theta = parse_config("theta = 1.5\n");
        assert!(matches!(bad_theta, Err(DriverError::Config { .. })));
        let bad_pair = parse_config("disk_center = 1 2 3\n");
        assert!(matches!(bad_pair, Err(DriverError::Config { .. })));
    }

    #[test]
    fn six_significant_digit_formatting() {
        assert_eq!(format_sig6(123456.789), "1.23457e5");
        assert_eq!(format_sig6(-0.0012345649), "-1.23456e-3");
    }

    #[test]
    fn zero_charge_run_stops_at_level_zero_with_zero_bound() {
        let dir = tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.square_side = 6.0;
        cfg.h = 1.2;
        cfg.output_dir = dir.path().to_path_buf();
        let summary = run_adaptive(&cfg, StopAfter::Full).unwrap();
        assert_eq!(summary.linear.len(), 1);
        assert_eq!(summary.regular.len(), 1);
        assert!(summary.overall_bound.unwrap() <= 1e-10);
        assert!(summary.certified);
        assert!(dir.path().join("summary.txt").exists());
        assert!(dir.path().join("linear.csv").exists());
        assert!(dir.path().join("nonlinear.csv").exists());
    }

    fn write_single_charge(dir: &Path) -> PathBuf {
        let path = dir.join("charges.txt");
        fs::write(&path, "0.2 0.1 1\n").unwrap();
        path
    }

    #[test]
    fn two_term_smoke_run_is_internally_consistent() {
        let dir = tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.square_side = 6.0;
        cfg.h = 1.0;
        cfg.ks2 = 1.0;
        cfg.max_levels = 3;
        cfg.max_elements = 20_000;
        cfg.charges_file = Some(write_single_charge(dir.path()));
        cfg.output_dir = dir.path().join("out");
        let summary = run_adaptive(&cfg, StopAfter::Full).unwrap();
        assert!(!summary.linear.is_empty());
        assert!(!summary.regular.is_empty());
        assert!(summary.certified);
        for rec in &summary.linear {
            assert!(rec.majorant.is_finite() && rec.majorant > 0.0);
            let m = rec.minorant.expect("post-pass fills minorants");
            assert!(m <= rec.majorant * (1.0 + 1e-12), "{} vs {}", m, rec.majorant);
        }
        let overall = estimate::overall_error(
            Scheme::TwoTerm,
            cfg.eps_m,
            None,
            summary.linear_majorant,
            summary.regular_majorant.unwrap(),
        );
        assert!((summary.overall_bound.unwrap() - overall).abs() < 1e-12 * overall.max(1.0));

        let csv = fs::read_to_string(cfg.output_dir.join("linear.csv")).unwrap();
        assert_eq!(csv.lines().count(), summary.linear.len() + 1);
        assert!(csv.starts_with("level,elements,"));
        assert!(verify_report(&cfg.output_dir.join("linear.csv")).unwrap());
        assert!(verify_report(&cfg.output_dir.join("nonlinear.csv")).unwrap());

        let vtk = fs::read_to_string(cfg.output_dir.join("solution.vtk")).unwrap();
        assert!(vtk.starts_with("# vtk DataFile Version 3.0"));
        let cells_line = vtk
            .lines()
            .find(|l| l.starts_with("CELLS "))
            .expect("cells section");
        let m: usize = cells_line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert_eq!(m, summary.regular.last().unwrap().elements);
    }

    #[test]
    fn direct_smoke_run_reports_a_combined_bound() {
        let dir = tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.scheme = Scheme::ThreeTermDirect;
        cfg.square_side = 6.0;
        cfg.h = 1.0;
        cfg.ks2 = 1.0;
        cfg.max_levels = 2;
        cfg.max_elements = 20_000;
        cfg.charges_file = Some(write_single_charge(dir.path()));
        cfg.output_dir = dir.path().join("out");
        let summary = run_adaptive(&cfg, StopAfter::Full).unwrap();
        assert!(!summary.harmonic.is_empty());
        assert!(summary.linear.is_empty());
        assert!(!summary.regular.is_empty());
        let expected = cfg.eps_m.sqrt() * summary.harmonic_majorant.unwrap()
            + summary.regular_majorant.unwrap();
        let got = summary.overall_bound.unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.max(1.0));
        assert!(dir.path().join("out/direct.csv").exists());
    }

    #[test]
    fn stage_stops_produce_partial_artifacts() {
        let dir = tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.scheme = Scheme::ThreeTermSplit;
        cfg.square_side = 6.0;
        cfg.h = 1.2;
        cfg.ks2 = 1.0;
        cfg.max_levels = 2;
        cfg.charges_file = Some(write_single_charge(dir.path()));
        cfg.output_dir = dir.path().join("out");
        let summary = run_adaptive(&cfg, StopAfter::Harmonic).unwrap();
        assert!(!summary.harmonic.is_empty());
        assert!(summary.regular.is_empty());
        assert!(summary.overall_bound.is_none());
        assert!(dir.path().join("out/harmonic.csv").exists());
        assert!(dir.path().join("out/solution.vtk").exists());
    }
}
