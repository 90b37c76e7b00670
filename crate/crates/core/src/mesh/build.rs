//! Initial mesh generation: a disk-shaped molecular region inscribed in a
//! square (or circular) solvent domain, meshed by polar rings that morph
//! from the interface polygon out to the boundary. The interface is a
//! closed polygon inscribed in the circle; refinement later keeps it frozen
//! (midpoints stay on the straight segments), so the discrete geometry is
//! fixed at build time.

use super::{MeshError, Region, TriMesh};

#[derive(Debug, Clone, Copy)]
enum Outer {
    Square { side: f64 },
    Disk { radius: f64 },
}

/// Builds the disk-in-square mesh. The square is centered at the origin
/// with the given side; the molecular disk must lie strictly inside it.
/// `target_h` controls element size: all diameters come out <= 2*target_h.
pub fn build_disk_in_square(
    square_side: f64,
    disk_center: [f64; 2],
    disk_radius: f64,
    target_h: f64,
) -> Result<TriMesh, MeshError> {
    if !(square_side > 0.0 && square_side.is_finite()) {
        return Err(MeshError::InvalidGeometry(format!(
            "square side must be positive, got {}",
            square_side
        )));
    }
    if !(disk_radius > 0.0 && disk_radius < square_side / 2.0) {
        return Err(MeshError::InvalidGeometry(format!(
            "disk radius {} outside (0, side/2 = {})",
            disk_radius,
            square_side / 2.0
        )));
    }
    let half = square_side / 2.0;
    if disk_center[0].abs() + disk_radius >= half || disk_center[1].abs() + disk_radius >= half {
        return Err(MeshError::InvalidGeometry(
            "disk not strictly inside the square".into(),
        ));
    }
    if !(target_h > 0.0 && target_h.is_finite()) {
        return Err(MeshError::InvalidGeometry(format!(
            "target_h must be positive, got {}",
            target_h
        )));
    }
    build_rings(
        Outer::Square { side: square_side },
        disk_center,
        disk_radius,
        target_h,
    )
}

/// Disk-in-disk variant used for radially symmetric verification problems;
/// the outer boundary is the circle of `outer_radius` about the origin.
pub fn build_disk_in_disk(
    outer_radius: f64,
    disk_center: [f64; 2],
    disk_radius: f64,
    target_h: f64,
) -> Result<TriMesh, MeshError> {
    let c_norm = (disk_center[0].powi(2) + disk_center[1].powi(2)).sqrt();
    if !(disk_radius > 0.0 && c_norm + disk_radius < outer_radius) {
        return Err(MeshError::InvalidGeometry(
            "disk not strictly inside the outer disk".into(),
        ));
    }
    if !(target_h > 0.0 && target_h.is_finite()) {
        return Err(MeshError::InvalidGeometry("bad target_h".into()));
    }
    build_rings(
        Outer::Disk {
            radius: outer_radius,
        },
        disk_center,
        disk_radius,
        target_h,
    )
}

/// Distance from `c` along direction `u` to the outer boundary.
fn exit_distance(outer: Outer, c: [f64; 2], u: [f64; 2]) -> f64 {
    match outer {
        Outer::Square { side } => {
            let half = side / 2.0;
            let mut t = f64::INFINITY;
            if u[0] > 0.0 {
                t = t.min((half - c[0]) / u[0]);
            } else if u[0] < 0.0 {
                t = t.min((-half - c[0]) / u[0]);
            }
            if u[1] > 0.0 {
                t = t.min((half - c[1]) / u[1]);
            } else if u[1] < 0.0 {
                t = t.min((-half - c[1]) / u[1]);
            }
            t
        }
        Outer::Disk { radius } => {
            let cu = c[0] * u[0] + c[1] * u[1];
            let c2 = c[0] * c[0] + c[1] * c[1];
            -cu + (cu * cu + radius * radius - c2).sqrt()
        }
    }
}

fn build_rings(
    outer: Outer,
    c: [f64; 2],
    r: f64,
    h: f64,
) -> Result<TriMesh, MeshError> {
    // Spoke angles: uniform, fine enough that the azimuthal spacing at the
    // farthest boundary point stays below h. For a square outer boundary the
    // four corner directions replace their nearest uniform angle so corners
    // become mesh vertices exactly.
    let r_far = match outer {
        Outer::Square { side } => {
            let half = side / 2.0;
            [
                [half, half],
                [-half, half],
                [-half, -half],
                [half, -half],
            ]
            .iter()
            .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt())
            .fold(0.0, f64::max)
        }
        Outer::Disk { radius } => {
            radius + (c[0] * c[0] + c[1] * c[1]).sqrt()
        }
    };
    // dtheta * r_far <= 0.7 h leaves room for the sqrt(2) stretch where
    // spokes meet the square wall obliquely, keeping diameters under 2h.
    let n_nominal =
        (((2.0 * std::f64::consts::PI * r_far / (0.7 * h)).ceil() as usize).max(16) + 3) / 4 * 4;
    let dtheta = 2.0 * std::f64::consts::PI / n_nominal as f64;
    let mut angles: Vec<f64> = (0..n_nominal).map(|i| i as f64 * dtheta).collect();
    if let Outer::Square { side } = outer {
        let half = side / 2.0;
        for corner in [
            [half, half],
            [-half, half],
            [-half, -half],
            [half, -half],
        ] {
            let mut phi = (corner[1] - c[1]).atan2(corner[0] - c[0]);
            if phi < 0.0 {
                phi += 2.0 * std::f64::consts::PI;
            }
            // insert the corner direction, except when it would sit almost on
            // top of an existing spoke (then replace, avoiding a sliver)
            let nearest = angles
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let da = angle_gap(*a.1, phi);
                    let db = angle_gap(*b.1, phi);
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            if angle_gap(angles[nearest], phi) <= 0.3 * dtheta {
                angles[nearest] = phi;
            } else {
                angles.push(phi);
            }
        }
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    let n = angles.len();

    // Radial ladders. Inside the disk: uniform rings down to a small fan
    // around the center (all solved fields are harmonic there, so the thin
    // fan triangles are harmless). Outside: steps matched to the azimuthal
    // spacing so aspect ratios stay moderate near the interface, growing
    // geometrically and capped at h.
    let m_in = ((r / h).ceil() as usize).max(2);
    let inner_radii: Vec<f64> = (1..=m_in).map(|k| r * k as f64 / m_in as f64).collect();

    let mut ladder = vec![r];
    let mut rho = r;
    loop {
        let step = h.min(dtheta * rho);
        if rho + 1.25 * step >= r_far {
            ladder.push(r_far);
            break;
        }
        rho += step;
        ladder.push(rho);
    }
    let t_of = |rho: f64| (rho - r) / (r_far - r);

    // vertex layout: center, inner rings (inner to outer), interface ring is
    // inner_radii.last(), then outer rings following the ladder (excluding
    // the interface entry), boundary ring last.
    let mut vertices: Vec<[f64; 2]> = Vec::new();
    vertices.push(c);
    let mut rings: Vec<Vec<usize>> = Vec::new(); // vertex ids per ring, by spoke
    for &rho in &inner_radii {
        let ring: Vec<usize> = angles
            .iter()
            .map(|&th| {
                vertices.push([c[0] + rho * th.cos(), c[1] + rho * th.sin()]);
                vertices.len() - 1
            })
            .collect();
        rings.push(ring);
    }
    let n_inner_rings = rings.len();
    let exit: Vec<f64> = angles
        .iter()
        .map(|&th| exit_distance(outer, c, [th.cos(), th.sin()]))
        .collect();
    for &rho in ladder.iter().skip(1) {
        let t = t_of(rho);
        let is_boundary = t >= 1.0 - 1e-14;
        let ring: Vec<usize> = angles
            .iter()
            .enumerate()
            .map(|(i, &th)| {
                let d = r + (exit[i] - r) * t;
                let mut p = [c[0] + d * th.cos(), c[1] + d * th.sin()];
                if is_boundary {
                    if let Outer::Square { side } = outer {
                        let half = side / 2.0;
                        let snap = 1e-9 * side;
                        for coord in p.iter_mut() {
                            if (coord.abs() - half).abs() <= snap {
                                *coord = half.copysign(*coord);
                            }
                        }
                    }
                }
                vertices.push(p);
                vertices.len() - 1
            })
            .collect();
        rings.push(ring);
    }

    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut regions: Vec<Region> = Vec::new();
    // center fan
    let first = &rings[0];
    for i in 0..n {
        let j = (i + 1) % n;
        triangles.push([0, first[i], first[j]]);
        regions.push(Region::Molecule);
    }
    // ring bands
    for b in 0..rings.len() - 1 {
        let inner = &rings[b];
        let outer_ring = &rings[b + 1];
        // rings up to index n_inner_rings-1 lie inside the disk, with the
        // interface ring last among them
        let region = if b + 1 < n_inner_rings {
            Region::Molecule
        } else {
            Region::Solvent
        };
        for i in 0..n {
            let j = (i + 1) % n;
            let a = inner[i];
            let bb = inner[j];
            let cc = outer_ring[j];
            let d = outer_ring[i];
            // counterclockwise cycle of the band quad is a -> d -> cc -> bb
            triangles.push([a, d, cc]);
            triangles.push([a, cc, bb]);
            regions.push(region);
            regions.push(region);
        }
    }

    // rotate each triangle so its longest edge sits first (refinement edge)
    for tri in triangles.iter_mut() {
        *tri = rotate_longest_first(*tri, &vertices);
    }

    TriMesh::from_raw(vertices, triangles, regions)
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut d = (a - b).abs() % two_pi;
    if d > std::f64::consts::PI {
        d = two_pi - d;
    }
    d
}

fn rotate_longest_first(tri: [usize; 3], vertices: &[[f64; 2]]) -> [usize; 3] {
    let len2 = |a: usize, b: usize| {
        let pa = vertices[a];
        let pb = vertices[b];
        (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)
    };
    let l = [
        len2(tri[0], tri[1]),
        len2(tri[1], tri[2]),
        len2(tri[2], tri[0]),
    ];
    let mut best = 0;
    for k in 1..3 {
        if l[k] > l[best] {
            best = k;
        }
    }
    match best {
        0 => tri,
        1 => [tri[1], tri[2], tri[0]],
        _ => [tri[2], tri[0], tri[1]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::EdgeTag;

    #[test]
    fn disk_in_square_covers_square_exactly() {
        let m = build_disk_in_square(10.0, [0.0, 0.0], 1.0, 0.5).unwrap();
        m.validate().unwrap();
        assert!((m.total_area() - 100.0).abs() < 1e-10 * 100.0);
        // Euler characteristic of a triangulated square
        assert_eq!(
            m.num_vertices() as i64 - m.num_edges() as i64 + m.num_triangles() as i64,
            1
        );
    }

    #[test]
    fn element_diameters_bounded_by_twice_target() {
        for h in [0.5, 1.0] {
            let m = build_disk_in_square(10.0, [0.0, 0.0], 1.0, h).unwrap();
            let dmax = (0..m.num_triangles())
                .map(|t| m.diameter(t))
                .fold(0.0, f64::max);
            assert!(dmax <= 2.0 * h, "h={}: max diameter {}", h, dmax);
        }
    }

    #[test]
    fn interface_is_one_closed_polygon_on_the_circle() {
        let m = build_disk_in_square(10.0, [0.5, -0.25], 1.25, 0.5).unwrap();
        assert_eq!(m.interface_loop_count(), 1);
        for (e, tag) in m.edge_tags.iter().enumerate() {
            if *tag == Some(EdgeTag::Interface) {
                for &v in &m.edges[e] {
                    let p = m.vertices[v];
                    let rr = ((p[0] - 0.5).powi(2) + (p[1] + 0.25).powi(2)).sqrt();
                    assert!((rr - 1.25).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn corners_are_mesh_vertices() {
        let m = build_disk_in_square(8.0, [0.3, 0.1], 1.0, 0.7).unwrap();
        for corner in [[4.0, 4.0], [-4.0, 4.0], [-4.0, -4.0], [4.0, -4.0]] {
            assert!(
                m.vertices
                    .iter()
                    .any(|v| v[0] == corner[0] && v[1] == corner[1]),
                "missing corner {:?}",
                corner
            );
        }
    }

    #[test]
    fn region_areas_match_disk_and_complement() {
        let m = build_disk_in_square(10.0, [0.0, 0.0], 1.0, 0.25).unwrap();
        let mol: f64 = (0..m.num_triangles())
            .filter(|&t| m.regions[t] == Region::Molecule)
            .map(|t| m.area(t))
            .sum();
        // the molecule region is the polygon inscribed in the unit circle:
        // strictly below pi r^2 and within O((2 pi/n)^2) of it
        let n_iface = m
            .edge_tags
            .iter()
            .filter(|t| **t == Some(EdgeTag::Interface))
            .count() as f64;
        let pi = std::f64::consts::PI;
        assert!(mol < pi);
        let defect_bound = 3.0 * (2.0 * pi / n_iface).powi(2);
        assert!(
            pi - mol < defect_bound,
            "molecule area {} too far below pi (bound {})",
            mol,
            defect_bound
        );
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(build_disk_in_square(10.0, [0.0, 0.0], 6.0, 0.5).is_err());
        assert!(build_disk_in_square(10.0, [4.5, 0.0], 1.0, 0.5).is_err());
        assert!(build_disk_in_square(-1.0, [0.0, 0.0], 0.2, 0.5).is_err());
        assert!(build_disk_in_square(10.0, [0.0, 0.0], 1.0, 0.0).is_err());
        assert!(build_disk_in_disk(2.0, [1.5, 0.0], 1.0, 0.5).is_err());
    }

    #[test]
    fn disk_in_disk_is_valid_and_annular() {
        let m = build_disk_in_disk(4.0, [0.0, 0.0], 1.0, 0.5).unwrap();
        m.validate().unwrap();
        assert_eq!(m.interface_loop_count(), 1);
        let mol: f64 = (0..m.num_triangles())
            .filter(|&t| m.regions[t] == Region::Molecule)
            .map(|t| m.area(t))
            .sum();
        assert!(mol > 2.9 && mol < std::f64::consts::PI); // inscribed polygon
    }

    #[test]
    fn off_center_disk_still_valid() {
        let m = build_disk_in_square(12.0, [2.0, -1.5], 1.5, 0.8).unwrap();
        m.validate().unwrap();
        assert!((m.total_area() - 144.0).abs() < 1e-10 * 144.0);
        assert_eq!(m.interface_loop_count(), 1);
    }
}
