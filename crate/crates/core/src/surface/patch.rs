use std::collections::VecDeque;
use std::sync::Arc;

use rayon::prelude::*;

use super::Surface;
use crate::error::{Error, Result};
use crate::volume::BinaryMask;

/// A subset of the vertices of a parent surface.
///
/// Set operations between patches of different parents are programming
/// errors and panic.
#[derive(Debug, Clone)]
pub struct SurfacePatch {
    parent: Arc<Surface>,
    member: Vec<bool>,
}

impl PartialEq for SurfacePatch {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.parent, &other.parent) && self.member == other.member
    }
}

impl SurfacePatch {
    pub fn empty(parent: &Arc<Surface>) -> Self {
        SurfacePatch {
            parent: parent.clone(),
            member: vec![false; parent.n_vertices()],
        }
    }

    pub fn full(parent: &Arc<Surface>) -> Self {
        SurfacePatch {
            parent: parent.clone(),
            member: vec![true; parent.n_vertices()],
        }
    }

    pub fn from_vertices(parent: &Arc<Surface>, ids: impl IntoIterator<Item = u32>) -> Result<Self> {
        let mut p = Self::empty(parent);
        for id in ids {
            *p.member
                .get_mut(id as usize)
                .ok_or_else(|| Error::invalid(format!("vertex {id} is not on the surface")))? = true;
        }
        Ok(p)
    }

    pub fn from_flags(parent: &Arc<Surface>, member: Vec<bool>) -> Result<Self> {
        if member.len() != parent.n_vertices() {
            return Err(Error::invalid("membership length differs from vertex count"));
        }
        Ok(SurfacePatch {
            parent: parent.clone(),
            member,
        })
    }

    pub fn parent(&self) -> &Arc<Surface> {
        &self.parent
    }

    pub fn contains(&self, v: usize) -> bool {
        self.member[v]
    }

    pub fn flags(&self) -> &[bool] {
        &self.member
    }

    pub fn members(&self) -> Vec<u32> {
        (0..self.member.len() as u32).filter(|&v| self.member[v as usize]).collect()
    }

    pub fn len(&self) -> usize {
        self.member.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.member.iter().any(|&b| b)
    }

    fn check_parent(&self, other: &Self) {
        assert!(
            Arc::ptr_eq(&self.parent, &other.parent),
            "patches belong to different surfaces"
        );
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        self.check_parent(other);
        SurfacePatch {
            parent: self.parent.clone(),
            member: self.member.iter().zip(&other.member).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.check_parent(other);
        self.member.iter().zip(&other.member).all(|(&a, &b)| !a || b)
    }

    /// Faces whose three vertices are all members.
    pub fn induced_faces(&self) -> Vec<u32> {
        self.parent
            .faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.iter().all(|&v| self.member[v as usize]))
            .map(|(i, _)| i as u32)
            .collect()
    }

    /// Area of the induced faces.
    pub fn area(&self) -> f64 {
        self.induced_faces()
            .iter()
            .map(|&f| self.parent.face_area(f as usize))
            .sum()
    }

    /// Per-vertex share of induced face area (a third of each face),
    /// indexed by parent vertex id. Sums to [`SurfacePatch::area`].
    pub fn vertex_areas(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.member.len()];
        for f in self.induced_faces() {
            let a = self.parent.face_area(f as usize) / 3.0;
            for &v in &self.parent.faces[f as usize] {
                out[v as usize] += a;
            }
        }
        out
    }

    /// Members with at least one neighbour outside the patch.
    pub fn boundary(&self) -> Self {
        let member = (0..self.member.len())
            .map(|v| {
                self.member[v]
                    && self.parent.adjacency[v].iter().any(|&u| !self.member[u as usize])
            })
            .collect();
        SurfacePatch {
            parent: self.parent.clone(),
            member,
        }
    }
}

/// Vertices that must not be reached by [`restricted_dilate`].
#[derive(Debug, Clone)]
pub struct PatchBoundaryRestriction {
    pub forbidden: SurfacePatch,
}

impl PatchBoundaryRestriction {
    pub fn new(forbidden: SurfacePatch) -> Self {
        PatchBoundaryRestriction { forbidden }
    }
}

/// Add one vertex ring per iteration, staying inside `domain`.
pub fn surface_dilate(p: &SurfacePatch, domain: &SurfacePatch, n: usize) -> SurfacePatch {
    p.check_parent(domain);
    let adj = &p.parent.adjacency;
    let mut cur = p.member.clone();
    for _ in 0..n {
        let next: Vec<bool> = (0..cur.len())
            .into_par_iter()
            .map(|v| cur[v] || (domain.member[v] && adj[v].iter().any(|&u| cur[u as usize])))
            .collect();
        if next == cur {
            break;
        }
        cur = next;
    }
    SurfacePatch {
        parent: p.parent.clone(),
        member: cur,
    }
}

/// Remove, per iteration, every member adjacent to a non-member.
pub fn surface_erode(p: &SurfacePatch, n: usize) -> SurfacePatch {
    let adj = &p.parent.adjacency;
    let mut cur = p.member.clone();
    for _ in 0..n {
        let next: Vec<bool> = (0..cur.len())
            .into_par_iter()
            .map(|v| cur[v] && adj[v].iter().all(|&u| cur[u as usize]))
            .collect();
        if next == cur {
            break;
        }
        cur = next;
    }
    SurfacePatch {
        parent: p.parent.clone(),
        member: cur,
    }
}

/// `surface_erode(surface_dilate(p, domain, n_d), n_e)`.
pub fn surface_close(p: &SurfacePatch, domain: &SurfacePatch, n_d: usize, n_e: usize) -> SurfacePatch {
    surface_erode(&surface_dilate(p, domain, n_d), n_e)
}

/// Dilate to a fixed point within `domain` minus the forbidden vertices.
/// Forbidden vertices already in `p` are dropped from the seed.
pub fn restricted_dilate(
    p: &SurfacePatch,
    domain: &SurfacePatch,
    r: &PatchBoundaryRestriction,
) -> SurfacePatch {
    p.check_parent(domain);
    p.check_parent(&r.forbidden);
    let allowed = domain.difference(&r.forbidden);
    let mut cur = p.difference(&r.forbidden).member;
    // Breadth-first growth reaches the same fixed point as repeated one-ring dilation.
    let mut queue: VecDeque<u32> = (0..cur.len() as u32).filter(|&v| cur[v as usize]).collect();
    let adj = &p.parent.adjacency;
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v as usize] {
            if !cur[u as usize] && allowed.member[u as usize] {
                cur[u as usize] = true;
                queue.push_back(u);
            }
        }
    }
    SurfacePatch {
        parent: p.parent.clone(),
        member: cur,
    }
}

/// Voxels scanned outward from a face when mapping a mask onto another
/// tissue's surface.
pub const DEFAULT_MAPPING_REACH: usize = 3;

/// [`patch_from_voxels_with`] using [`DEFAULT_MAPPING_REACH`].
pub fn patch_from_voxels(s: &Arc<Surface>, v: &BinaryMask) -> Result<SurfacePatch> {
    patch_from_voxels_with(s, v, DEFAULT_MAPPING_REACH)
}

/// Map a voxel set onto the surface.
///
/// A vertex joins the patch when every face using it was generated by a voxel
/// of `v`, or when, for some face using it, walking outward from the face
/// along its voxel axis meets a voxel of `v` within `reach` steps before
/// re-entering the generating mask. The first rule handles masks on the
/// surface's own tissue; the second projects a neighbouring tissue (such as
/// cartilage over bone) onto the surface across a thin gap.
pub fn patch_from_voxels_with(s: &Arc<Surface>, v: &BinaryMask, reach: usize) -> Result<SurfacePatch> {
    let gen = s
        .generator()
        .ok_or_else(|| Error::invalid("surface has no generating mask"))?;
    gen.geometry.ensure_same_grid(&v.geometry, "surface generator and voxel set")?;
    let g = &gen.geometry;
    let member = (0..s.n_vertices())
        .into_par_iter()
        .map(|vi| {
            let faces = s.faces_of(vi);
            if faces.is_empty() {
                return false;
            }
            let owned = faces
                .iter()
                .all(|&f| s.face_owner(f as usize).is_some_and(|o| v.data[o]));
            if owned {
                return true;
            }
            faces.iter().any(|&f| {
                let (Some(o), Some(step)) = (s.face_owner(f as usize), s.face_step(f as usize)) else {
                    return false;
                };
                let p = g.coords(o).map(|c| c as i64);
                for t in 1..=reach as i64 {
                    let q = [p[0] + step[0] * t, p[1] + step[1] * t, p[2] + step[2] * t];
                    match v.get_signed(q) {
                        None => return false,
                        Some(true) => return true,
                        Some(false) => {}
                    }
                    if gen.get_signed(q) == Some(true) {
                        return false;
                    }
                }
                false
            })
        })
        .collect();
    Ok(SurfacePatch {
        parent: s.clone(),
        member,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::mesh_from_mask;
    use crate::volume::{Geometry, Volume};

    fn block(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> BinaryMask {
        let mut m = Volume::filled(Geometry::axis_aligned(dims, [1.0; 3]), false);
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    m.set(i, j, k, true);
                }
            }
        }
        m
    }

    /// Vertices on the top face (z = top) of a block surface.
    fn top(s: &Arc<Surface>, z: f64) -> SurfacePatch {
        let ids = (0..s.n_vertices() as u32).filter(|&v| (s.vertices[v as usize].z - z).abs() < 1e-9);
        SurfacePatch::from_vertices(s, ids).unwrap()
    }

    fn near(s: &Arc<Surface>, top_z: f64, pred: impl Fn(f64, f64) -> bool) -> SurfacePatch {
        let ids = (0..s.n_vertices() as u32).filter(|&v| {
            let p = s.vertices[v as usize];
            (p.z - top_z).abs() < 1e-9 && pred(p.x, p.y)
        });
        SurfacePatch::from_vertices(s, ids).unwrap()
    }

    #[test]
    fn mapping_generator_and_empty() {
        let m = block([6, 6, 6], [1, 1, 1], [5, 5, 4]);
        let s = Arc::new(mesh_from_mask(&m).unwrap());
        assert_eq!(patch_from_voxels(&s, &m).unwrap(), SurfacePatch::full(&s));
        let e = m.map(|_| false);
        assert!(patch_from_voxels(&s, &e).unwrap().is_empty());
        let other = Volume::filled(Geometry::axis_aligned([5, 5, 5], [1.0; 3]), false);
        assert!(patch_from_voxels(&s, &other).is_err());
    }

    #[test]
    fn cartilage_footprint_on_bone() {
        // Bone block with a smaller cartilage slab on top.
        for gap in [0usize, 1, 2] {
            let dims = [12, 12, 10];
            let bone = block(dims, [1, 1, 1], [11, 11, 4]);
            let cart = block(dims, [3, 4, 4 + gap], [9, 8, 6 + gap]);
            let s = Arc::new(mesh_from_mask(&bone).unwrap());
            let p = patch_from_voxels(&s, &cart).unwrap();
            // Bone top is at z = 3.5; footprint corners x in [2.5, 8.5], y in [3.5, 7.5].
            let expect = near(&s, 3.5, |x, y| (2.5..=8.5).contains(&x) && (3.5..=7.5).contains(&y));
            assert_eq!(p, expect, "gap {gap}");
            assert_eq!(p.len(), 7 * 5);
            assert!((p.area() - 24.0).abs() < 1e-9);
        }
    }

    #[test]
    fn footprint_beyond_reach_is_ignored() {
        let dims = [12, 12, 12];
        let bone = block(dims, [1, 1, 1], [11, 11, 4]);
        let cart = block(dims, [3, 3, 7], [9, 9, 9]);
        let s = Arc::new(mesh_from_mask(&bone).unwrap());
        assert!(patch_from_voxels(&s, &cart).unwrap().is_empty());
    }

    #[test]
    fn dilate_ring_and_saturation() {
        let m = block([12, 12, 4], [1, 1, 1], [11, 11, 2]);
        let s = Arc::new(mesh_from_mask(&m).unwrap());
        let domain = top(&s, 1.5);
        let centre = near(&s, 1.5, |x, y| x == 5.5 && y == 5.5);
        assert_eq!(centre.len(), 1);
        let v = centre.members()[0] as usize;
        let d1 = surface_dilate(&centre, &domain, 1);
        let mut expect: Vec<u32> = s.adjacency[v].clone();
        expect.push(v as u32);
        expect.sort_unstable();
        assert_eq!(d1.members(), expect);
        assert_eq!(surface_dilate(&domain, &domain, 3), domain);
        assert_eq!(surface_dilate(&centre, &domain, 100), domain);
    }

    #[test]
    fn erode_strip_and_closed_surface() {
        let m = block([12, 12, 4], [1, 1, 1], [11, 11, 2]);
        let s = Arc::new(mesh_from_mask(&m).unwrap());
        let full = SurfacePatch::full(&s);
        assert_eq!(surface_erode(&full, 5), full);
        // Three vertex columns wide strip on the top face.
        let strip = near(&s, 1.5, |x, y| (4.5..=6.5).contains(&x) && (2.5..=8.5).contains(&y));
        let e = surface_erode(&strip, 1);
        assert!(e.members().iter().all(|&v| (s.vertices[v as usize].x - 5.5).abs() < 1e-9));
        assert_eq!(e.len(), 5);
        assert!(surface_erode(&strip, 3).is_empty());
    }

    #[test]
    fn closing_fills_one_ring_hole() {
        let m = block([24, 24, 4], [1, 1, 1], [23, 23, 2]);
        let s = Arc::new(mesh_from_mask(&m).unwrap());
        let domain = SurfacePatch::full(&s);
        let square = near(&s, 1.5, |x, y| (4.5..=18.5).contains(&x) && (4.5..=18.5).contains(&y));
        let centre = near(&s, 1.5, |x, y| x == 11.5 && y == 11.5);
        let hole_vertex = centre.members()[0] as usize;
        let mut hole = centre.clone();
        for &u in &s.adjacency[hole_vertex] {
            hole = hole.union(&SurfacePatch::from_vertices(&s, [u]).unwrap());
        }
        let punched = square.difference(&hole);
        let closed = surface_close(&punched, &domain, 4, 4);
        assert!(hole.is_subset_of(&closed));
        assert_eq!(closed, square);
        assert!(surface_close(&SurfacePatch::empty(&s), &domain, 4, 4).is_empty());
    }

    #[test]
    fn restricted_dilation_respects_ring() {
        let m = block([24, 24, 4], [1, 1, 1], [23, 23, 2]);
        let s = Arc::new(mesh_from_mask(&m).unwrap());
        let domain = SurfacePatch::full(&s);
        let seed = near(&s, 1.5, |x, y| x == 11.5 && y == 11.5);
        let inside = near(&s, 1.5, |x, y| (6.5..=16.5).contains(&x) && (6.5..=16.5).contains(&y));
        let ring = surface_dilate(&inside, &domain, 1).difference(&inside);
        let r = PatchBoundaryRestriction::new(ring.clone());
        let out = restricted_dilate(&seed, &domain, &r);
        assert_eq!(out, inside);
        assert!(out.intersection(&ring).is_empty());
        let free = PatchBoundaryRestriction::new(SurfacePatch::empty(&s));
        assert_eq!(restricted_dilate(&seed, &domain, &free), domain);
    }

    #[test]
    fn vertex_areas_sum_to_area() {
        let m = block([8, 8, 8], [1, 1, 1], [6, 7, 4]);
        let s = Arc::new(mesh_from_mask(&m).unwrap());
        let p = top(&s, 3.5);
        let total: f64 = p.vertex_areas().iter().sum();
        assert!((total - p.area()).abs() < 1e-9);
        assert!((p.area() - 30.0).abs() < 1e-9);
    }
}
