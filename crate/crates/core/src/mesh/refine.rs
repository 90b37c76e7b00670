//! Newest-vertex bisection with conformity closure, plus Dorfler (bulk)
//! marking. A triangle (a, b, c) has refinement edge (a, b); bisecting at
//! the midpoint m produces children (c, a, m) and (b, c, m), which keeps
//! orientation and hands each child the correct next refinement edge.
//!
//! Refinement works on marked edges, p1afem style: marking a triangle marks
//! its refinement edge, closure marks the refinement edge of any triangle
//! that has some marked edge, and the fixpoint of that rule admits a
//! conforming subdivision in one sweep. Midpoints are geometric midpoints
//! always, so interface and boundary polygons are frozen at their initial
//! shape and mesh areas are preserved exactly.

use super::{ElemId, MeshError, TriMesh, VertexId};

/// Result of one refinement pass: the new mesh plus, for every new triangle,
/// the triangle of the input mesh it came from. Nested meshes let fields be
/// evaluated across levels without point location.
#[derive(Debug, Clone)]
pub struct Refined {
    pub mesh: TriMesh,
    pub parent: Vec<ElemId>,
}

/// Bisects the marked triangles (and whatever closure drags in).
pub fn refine(mesh: &TriMesh, marked: &[ElemId]) -> Result<Refined, MeshError> {
    for &t in marked {
        if t >= mesh.num_triangles() {
            return Err(MeshError::Marking(format!(
                "marked element {} out of range",
                t
            )));
        }
    }
    let mut edge_marked = vec![false; mesh.num_edges()];
    for &t in marked {
        edge_marked[mesh.edge_of_tri[t][2]] = true;
    }
    refine_marked_edges(mesh, edge_marked)
}

/// Splits every triangle into four similar-shape children by marking all
/// edges (uniform refinement).
pub fn refine_uniform(mesh: &TriMesh) -> Refined {
    let edge_marked = vec![true; mesh.num_edges()];
    refine_marked_edges(mesh, edge_marked).expect("uniform refinement cannot fail")
}

fn refine_marked_edges(
    mesh: &TriMesh,
    mut edge_marked: Vec<bool>,
) -> Result<Refined, MeshError> {
    // closure: a triangle with any marked edge must have its refinement edge
    // marked; iterate to the fixpoint (marks only grow, so this terminates)
    loop {
        let mut changed = false;
        for t in 0..mesh.num_triangles() {
            let e = mesh.edge_of_tri[t];
            if (edge_marked[e[0]] || edge_marked[e[1]]) && !edge_marked[e[2]] {
                edge_marked[e[2]] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // midpoint vertices for marked edges, in edge-id order
    let mut vertices = mesh.vertices.clone();
    let mut midpoint: Vec<Option<VertexId>> = vec![None; mesh.num_edges()];
    for e in 0..mesh.num_edges() {
        if edge_marked[e] {
            let [a, b] = mesh.edges[e];
            let pa = mesh.vertices[a];
            let pb = mesh.vertices[b];
            vertices.push([(pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0]);
            midpoint[e] = Some(vertices.len() - 1);
        }
    }

    let mut triangles = Vec::with_capacity(mesh.num_triangles() * 2);
    let mut regions = Vec::with_capacity(mesh.num_triangles() * 2);
    let mut parent = Vec::with_capacity(mesh.num_triangles() * 2);
    for t in 0..mesh.num_triangles() {
        let [v0, v1, v2] = mesh.triangles[t];
        let e = mesh.edge_of_tri[t];
        let m2 = midpoint[e[2]]; // on (v0,v1)
        let m0 = midpoint[e[0]]; // on (v1,v2)
        let m1 = midpoint[e[1]]; // on (v2,v0)
        let mut emit = |tri: [VertexId; 3]| {
            triangles.push(tri);
            regions.push(mesh.regions[t]);
            parent.push(t);
        };
        match (m2, m0, m1) {
            (None, None, None) => emit([v0, v1, v2]),
            (Some(m2), None, None) => {
                emit([v2, v0, m2]);
                emit([v1, v2, m2]);
            }
            (Some(m2), Some(m0), None) => {
                emit([v2, v0, m2]);
                emit([m2, v1, m0]);
                emit([v2, m2, m0]);
            }
            (Some(m2), None, Some(m1)) => {
                emit([m2, v2, m1]);
                emit([v0, m2, m1]);
                emit([v1, v2, m2]);
            }
            (Some(m2), Some(m0), Some(m1)) => {
                emit([m2, v2, m1]);
                emit([v0, m2, m1]);
                emit([m2, v1, m0]);
                emit([v2, m2, m0]);
            }
            // closure guarantees the refinement edge is marked whenever any
            // edge of the triangle is
            _ => unreachable!("closure violated"),
        }
    }

    let mesh = TriMesh::from_raw(vertices, triangles, regions)?;
    Ok(Refined { mesh, parent })
}

/// Bulk marking: returns the smallest set of elements, greedily by largest
/// indicator, whose squared indicators sum to at least `theta^2` times the
/// total. Ties break toward lower element ids. Indicators must be
/// nonnegative and not all zero; `theta` must lie in (0, 1].
pub fn mark_dorfler(indicators: &[f64], theta: f64) -> Result<Vec<ElemId>, MeshError> {
    if indicators.is_empty() {
        return Err(MeshError::Marking("no indicators".into()));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(MeshError::Marking(format!(
            "theta {} outside (0, 1]",
            theta
        )));
    }
    for (i, &v) in indicators.iter().enumerate() {
        if !(v >= 0.0) {
            return Err(MeshError::Marking(format!(
                "indicator {} is negative or NaN: {}",
                i, v
            )));
        }
    }
    let mut order: Vec<usize> = (0..indicators.len()).collect();
    order.sort_by(|&a, &b| {
        indicators[b]
            .partial_cmp(&indicators[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    // total summed in the same (sorted) order as the prefix sums, so
    // theta = 1 selects exactly the positive indicators
    let total: f64 = order.iter().map(|&i| indicators[i] * indicators[i]).sum();
    if total == 0.0 {
        return Err(MeshError::Marking("all indicators are zero".into()));
    }
    let goal = theta * theta * total;
    let mut acc = 0.0;
    let mut selected = Vec::new();
    for &i in &order {
        if acc >= goal || indicators[i] == 0.0 {
            break;
        }
        acc += indicators[i] * indicators[i];
        selected.push(i);
    }
    selected.sort_unstable();
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_disk_in_square, Region};

    fn square_pair() -> TriMesh {
        TriMesh::from_raw(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[2, 0, 1], [0, 2, 3]],
            vec![Region::Solvent, Region::Solvent],
        )
        .unwrap()
    }

    #[test]
    fn single_mark_propagates_through_closure() {
        let m = square_pair();
        let r = refine(&m, &[0]).unwrap();
        // both triangles share the diagonal as refinement edge, so both split
        assert_eq!(r.mesh.num_triangles(), 4);
        r.mesh.validate().unwrap();
        assert!((r.mesh.total_area() - 1.0).abs() < 1e-14);
        assert_eq!(r.parent, vec![0, 0, 1, 1]);
    }

    #[test]
    fn mark_all_at_least_doubles_each_triangle() {
        let m = square_pair();
        let r = refine(&m, &[0, 1]).unwrap();
        assert!(r.mesh.num_triangles() >= 4);
        for t in 0..m.num_triangles() {
            assert!(r.parent.iter().filter(|&&p| p == t).count() >= 2);
        }
    }

    #[test]
    fn uniform_refinement_quarters_area_and_halves_diameter() {
        let m = build_disk_in_square(8.0, [0.0, 0.0], 1.0, 1.0).unwrap();
        let mut cur = m;
        let mut dmax_prev = (0..cur.num_triangles())
            .map(|t| cur.diameter(t))
            .fold(0.0, f64::max);
        for _ in 0..3 {
            let r = refine_uniform(&cur);
            assert_eq!(r.mesh.num_triangles(), 4 * cur.num_triangles());
            r.mesh.validate().unwrap();
            assert!((r.mesh.total_area() - cur.total_area()).abs() < 1e-9);
            let dmax = (0..r.mesh.num_triangles())
                .map(|t| r.mesh.diameter(t))
                .fold(0.0, f64::max);
            // halves each pass, up to a factor 1.5 of slack
            assert!(
                dmax <= 0.75 * dmax_prev + 1e-12,
                "diameter {} vs previous {}",
                dmax,
                dmax_prev
            );
            dmax_prev = dmax;
            cur = r.mesh;
        }
    }

    #[test]
    fn refinement_keeps_interface_frozen_and_conforming() {
        let m = build_disk_in_square(8.0, [0.0, 0.0], 1.0, 0.8).unwrap();
        let loops0 = m.interface_loop_count();
        // refine only interface-adjacent solvent triangles a few times
        let mut cur = m;
        for _ in 0..3 {
            let marked: Vec<usize> = (0..cur.num_triangles())
                .filter(|&t| {
                    cur.regions[t] == Region::Solvent
                        && cur.edge_of_tri[t]
                            .iter()
                            .any(|&e| cur.edge_tags[e] == Some(super::super::EdgeTag::Interface))
                })
                .collect();
            let r = refine(&cur, &marked).unwrap();
            r.mesh.validate().unwrap();
            assert_eq!(r.mesh.interface_loop_count(), loops0);
            assert!((r.mesh.total_area() - cur.total_area()).abs() < 1e-9);
            cur = r.mesh;
        }
    }

    #[test]
    fn children_partition_parents() {
        let m = build_disk_in_square(8.0, [0.0, 0.0], 1.0, 1.0).unwrap();
        let marked: Vec<usize> = (0..m.num_triangles()).step_by(7).collect();
        let r = refine(&m, &marked).unwrap();
        let mut child_area = vec![0.0; m.num_triangles()];
        for (c, &p) in r.parent.iter().enumerate() {
            child_area[p] += r.mesh.area(c);
        }
        for t in 0..m.num_triangles() {
            assert!((child_area[t] - m.area(t)).abs() < 1e-12 * m.area(t).max(1.0));
        }
    }

    #[test]
    fn dorfler_enumerated_cases() {
        // indicators 4,3,2,1 with theta^2 = 0.5: total sq = 16+9+4+1 = 30,
        // goal 15, first element alone gives 16 >= 15
        let theta = 0.5f64.sqrt();
        let marked = mark_dorfler(&[4.0, 3.0, 2.0, 1.0], theta).unwrap();
        assert_eq!(marked, vec![0]);
        // same values permuted: still exactly one element, the largest
        let marked = mark_dorfler(&[1.0, 4.0, 2.0, 3.0], theta).unwrap();
        assert_eq!(marked, vec![1]);
        // tie: equal indicators, lower id wins
        let marked = mark_dorfler(&[1.0, 1.0], 0.6).unwrap();
        assert_eq!(marked, vec![0]);
    }

    #[test]
    fn dorfler_theta_one_marks_every_positive() {
        let ind = vec![0.5, 0.0, 0.25, 1.5, 0.0, 0.1];
        let marked = mark_dorfler(&ind, 1.0).unwrap();
        assert_eq!(marked, vec![0, 2, 3, 5]);
    }

    #[test]
    fn dorfler_errors() {
        assert!(mark_dorfler(&[], 0.5).is_err());
        assert!(mark_dorfler(&[1.0], 0.0).is_err());
        assert!(mark_dorfler(&[1.0], 1.5).is_err());
        assert!(mark_dorfler(&[-1.0, 2.0], 0.5).is_err());
        assert!(mark_dorfler(&[0.0, 0.0], 0.5).is_err());
        assert!(mark_dorfler(&[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn repeated_bisection_terminates_with_bounded_growth() {
        // closure never cascades unboundedly: refining one element at a time
        // keeps the mesh valid and growth modest
        let mut cur = build_disk_in_square(8.0, [0.0, 0.0], 1.0, 1.0).unwrap();
        for k in 0..5 {
            let pick = (k * 37) % cur.num_triangles();
            let before = cur.num_triangles();
            let r = refine(&cur, &[pick]).unwrap();
            r.mesh.validate().unwrap();
            assert!(r.mesh.num_triangles() > before);
            cur = r.mesh;
        }
    }
}
