//! Bookkeeping for sequences of nested meshes. Every refinement records a
//! child-to-parent element map; composing those maps lets a field that lives
//! on a coarse level be evaluated on any finer level (each fine triangle
//! lies inside exactly one coarse triangle), and walking the maps downward
//! locates the fine triangle containing a point of a coarse one.

use super::{ElemId, Refined, TriMesh};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    meshes: Vec<Arc<TriMesh>>,
    /// `parents[k][c]` is the parent in level k-1 of element c of level k;
    /// `parents[0]` is empty.
    parents: Vec<Vec<ElemId>>,
}

impl MeshHierarchy {
    pub fn new(root: TriMesh) -> Self {
        MeshHierarchy {
            meshes: vec![Arc::new(root)],
            parents: vec![Vec::new()],
        }
    }

    pub fn push(&mut self, refined: Refined) {
        assert_eq!(refined.parent.len(), refined.mesh.num_triangles());
        self.meshes.push(Arc::new(refined.mesh));
        self.parents.push(refined.parent);
    }

    pub fn len(&self) -> usize {
        self.meshes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meshes.is_empty()
    }

    pub fn mesh(&self, level: usize) -> &Arc<TriMesh> {
        &self.meshes[level]
    }

    pub fn finest(&self) -> &Arc<TriMesh> {
        self.meshes.last().unwrap()
    }

    /// Maps every element of `fine_level` to its ancestor at `coarse_level`.
    pub fn ancestor_map(&self, fine_level: usize, coarse_level: usize) -> Vec<ElemId> {
        assert!(coarse_level <= fine_level);
        let mut map: Vec<ElemId> = (0..self.meshes[fine_level].num_triangles()).collect();
        for level in (coarse_level + 1..=fine_level).rev() {
            for e in map.iter_mut() {
                *e = self.parents[level][*e];
            }
        }
        map
    }

    /// Finds the element of `fine_level` containing `x`, starting from the
    /// element of `coarse_level` known to contain it. Points on shared child
    /// edges resolve deterministically to the child where `x` sits deepest.
    pub fn locate_descendant(
        &self,
        coarse_level: usize,
        coarse_elem: ElemId,
        x: [f64; 2],
        fine_level: usize,
    ) -> ElemId {
        assert!(coarse_level <= fine_level);
        let mut elem = coarse_elem;
        for level in coarse_level + 1..=fine_level {
            let mesh = &self.meshes[level];
            let parents = &self.parents[level];
            let mut best = usize::MAX;
            let mut best_depth = f64::NEG_INFINITY;
            for c in 0..mesh.num_triangles() {
                if parents[c] != elem {
                    continue;
                }
                let bary = mesh.barycentric(c, x);
                let depth = bary.iter().cloned().fold(f64::INFINITY, f64::min);
                if depth > best_depth {
                    best_depth = depth;
                    best = c;
                }
            }
            assert!(best != usize::MAX, "element {} has no children", elem);
            elem = best;
        }
        elem
    }

    /// Like `locate_descendant` but with the children index built once;
    /// use this when locating many points.
    pub fn children_index(&self, level: usize) -> Vec<Vec<ElemId>> {
        assert!(level + 1 < self.meshes.len());
        let mut children = vec![Vec::new(); self.meshes[level].num_triangles()];
        for (c, &p) in self.parents[level + 1].iter().enumerate() {
            children[p].push(c);
        }
        children
    }

    /// Locates, for a point inside `coarse_elem` of `coarse_level`, the
    /// containing element at `fine_level`, descending via prebuilt children
    /// indices (one per intermediate level).
    pub fn locate_with_index(
        &self,
        coarse_level: usize,
        coarse_elem: ElemId,
        x: [f64; 2],
        indices: &[Vec<Vec<ElemId>>],
    ) -> ElemId {
        let mut elem = coarse_elem;
        for (step, index) in indices.iter().enumerate() {
            let mesh = &self.meshes[coarse_level + step + 1];
            let mut best = usize::MAX;
            let mut best_depth = f64::NEG_INFINITY;
            for &c in &index[elem] {
                let bary = mesh.barycentric(c, x);
                let depth = bary.iter().cloned().fold(f64::INFINITY, f64::min);
                if depth > best_depth {
                    best_depth = depth;
                    best = c;
                }
            }
            assert!(best != usize::MAX);
            elem = best;
        }
        elem
    }
}
