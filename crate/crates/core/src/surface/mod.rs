//! Triangle surfaces built from voxel masks, vertex patches on them, and the
//! patch morphology used for surface segmentation and hole filling.
//!
//! Meshes are the exposed voxel faces of a mask, each quad split into two
//! triangles. Vertices sit on voxel corners and are shared between all faces
//! that meet there, so areas match direct face counting exactly and every
//! vertex knows which voxel generated it.

mod patch;
mod ply;

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::volume::BinaryMask;

pub use patch::{
    patch_from_voxels, patch_from_voxels_with, restricted_dilate, surface_close, surface_dilate,
    surface_erode, PatchBoundaryRestriction, SurfacePatch, DEFAULT_MAPPING_REACH,
};
pub use ply::{PlyFormat, PlyMesh};

/// Marker for vertices or faces that do not come from a voxel mask.
pub const NO_VOXEL: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct Surface {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// Sorted neighbour lists from shared triangle edges.
    pub adjacency: Vec<Vec<u32>>,
    /// Voxel index in the generating mask, or [`NO_VOXEL`].
    pub source_voxel: Vec<usize>,
    face_owner: Vec<usize>,
    /// Outward voxel step of each face: `axis * 2 + (positive as u8)`.
    face_dir: Vec<u8>,
    face_area: Vec<f64>,
    vertex_faces: Vec<Vec<u32>>,
    generator: Option<BinaryMask>,
}

fn dir_step(code: u8) -> [i64; 3] {
    let mut s = [0; 3];
    s[(code / 2) as usize] = if code % 2 == 1 { 1 } else { -1 };
    s
}

impl Surface {
    /// Mesh from explicit triangles, without voxel provenance.
    pub fn from_triangles(vertices: Vec<Vector3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        for f in &faces {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::invalid("face index out of range"));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid("degenerate face with repeated vertex"));
            }
        }
        let nf = faces.len();
        Ok(Self::assemble(
            vertices,
            faces,
            vec![NO_VOXEL; n as usize],
            vec![NO_VOXEL; nf],
            vec![u8::MAX; nf],
            None,
        ))
    }

    fn assemble(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[u32; 3]>,
        source_voxel: Vec<usize>,
        face_owner: Vec<usize>,
        face_dir: Vec<u8>,
        generator: Option<BinaryMask>,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); vertices.len()];
        let mut vertex_faces = vec![Vec::new(); vertices.len()];
        for (fi, f) in faces.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                adjacency[a as usize].push(b);
                adjacency[b as usize].push(a);
                vertex_faces[f[e] as usize].push(fi as u32);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        let face_area = faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|v| vertices[v as usize]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .collect();
        Surface {
            vertices,
            faces,
            adjacency,
            source_voxel,
            face_owner,
            face_dir,
            face_area,
            vertex_faces,
            generator,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        self.face_area[f]
    }

    /// Total area as the sum of triangle areas.
    pub fn area(&self) -> f64 {
        self.face_area.iter().sum()
    }

    pub fn faces_of(&self, v: usize) -> &[u32] {
        &self.vertex_faces[v]
    }

    /// Voxel whose exposed side produced the face, if any.
    pub fn face_owner(&self, f: usize) -> Option<usize> {
        (self.face_owner[f] != NO_VOXEL).then_some(self.face_owner[f])
    }

    /// Outward voxel-index step across the face, if it came from a mask.
    pub fn face_step(&self, f: usize) -> Option<[i64; 3]> {
        (self.face_dir[f] != u8::MAX).then(|| dir_step(self.face_dir[f]))
    }

    /// The mask the surface was extracted from.
    pub fn generator(&self) -> Option<&BinaryMask> {
        self.generator.as_ref()
    }

    /// Unit normal of a face following its winding.
    pub fn face_normal(&self, f: usize) -> Vector3<f64> {
        let [a, b, c] = self.faces[f].map(|v| self.vertices[v as usize]);
        (b - a).cross(&(c - a)).try_normalize(0.0).unwrap_or_else(Vector3::zeros)
    }

    /// Area-weighted vertex normals; zero for isolated vertices.
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        (0..self.n_vertices())
            .map(|v| {
                let s: Vector3<f64> = self.vertex_faces[v]
                    .iter()
                    .map(|&f| self.face_normal(f as usize) * self.face_area[f as usize])
                    .sum();
                s.try_normalize(0.0).unwrap_or_else(Vector3::zeros)
            })
            .collect()
    }
}

/// Extract the exposed voxel faces of `m` as a triangle surface.
///
/// Faces are wound counter-clockwise seen from outside the mask (for a
/// right-handed voxel-to-world map). A vertex's source voxel is the smallest
/// voxel index among the faces that use it.
pub fn mesh_from_mask(m: &BinaryMask) -> Result<Surface> {
    if m.is_empty_mask() {
        return Err(Error::Empty("cannot build a surface from an empty mask".into()));
    }
    let g = &m.geometry;
    let handed = g.direction.determinant() >= 0.0;
    let mut corner_ids: HashMap<[i64; 3], u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut source_voxel = Vec::new();
    let mut faces = Vec::new();
    let mut face_owner = Vec::new();
    let mut face_dir = Vec::new();

    for idx in m.indices() {
        let p = g.coords(idx).map(|v| v as i64);
        for axis in 0..3 {
            for positive in [false, true] {
                let mut q = p;
                q[axis] += if positive { 1 } else { -1 };
                if m.get_signed(q) == Some(true) {
                    continue;
                }
                // (axis, b, c) is a cyclic permutation so e_b × e_c = e_axis.
                let b = (axis + 1) % 3;
                let c = (axis + 2) % 3;
                let corner = |db: i64, dc: i64| {
                    let mut k = p;
                    k[axis] += positive as i64;
                    k[b] += db;
                    k[c] += dc;
                    k
                };
                let mut quad = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
                if positive != handed {
                    quad.swap(1, 3);
                }
                // Split along the diagonal joining the even-parity corners, a
                // checkerboard that reflections of even-sized grids preserve.
                if quad[0].iter().sum::<i64>().rem_euclid(2) == 1 {
                    quad.rotate_left(1);
                }
                let ids = quad.map(|k| {
                    *corner_ids.entry(k).or_insert_with(|| {
                        vertices.push(g.index_to_world([k[0] as f64 - 0.5, k[1] as f64 - 0.5, k[2] as f64 - 0.5]));
                        source_voxel.push(idx);
                        (vertices.len() - 1) as u32
                    })
                });
                let code = (axis * 2) as u8 + positive as u8;
                for tri in [[ids[0], ids[1], ids[2]], [ids[0], ids[2], ids[3]]] {
                    faces.push(tri);
                    face_owner.push(idx);
                    face_dir.push(code);
                }
            }
        }
    }
    Ok(Surface::assemble(
        vertices,
        faces,
        source_voxel,
        face_owner,
        face_dir,
        Some(m.clone()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Geometry, Volume};

    fn mask(dims: [usize; 3], spacing: [f64; 3], on: &[[usize; 3]]) -> BinaryMask {
        let mut m = Volume::filled(Geometry::axis_aligned(dims, spacing), false);
        for p in on {
            m.set(p[0], p[1], p[2], true);
        }
        m
    }

    #[test]
    fn unit_cube() {
        let s = mesh_from_mask(&mask([3, 3, 3], [1.0; 3], &[[1, 1, 1]])).unwrap();
        assert_eq!(s.n_vertices(), 8);
        assert_eq!(s.n_faces(), 12);
        assert!((s.area() - 6.0).abs() < 1e-12);
        assert!(s.adjacency.iter().all(|a| a.len() >= 3));
        // Outward normals point away from the voxel centre.
        let centre = s.generator().unwrap().geometry.voxel_center(13);
        for f in 0..s.n_faces() {
            let [a, b, c] = s.faces[f].map(|v| s.vertices[v as usize]);
            let mid = (a + b + c) / 3.0;
            assert!(s.face_normal(f).dot(&(mid - centre)) > 0.0);
        }
    }

    #[test]
    fn bar_area() {
        let s = mesh_from_mask(&mask([3, 3, 4], [1.0; 3], &[[1, 1, 1], [1, 1, 2]])).unwrap();
        assert!((s.area() - 10.0).abs() < 1e-12);
        assert_eq!(s.n_vertices(), 12);
    }

    #[test]
    fn anisotropic_voxel_area() {
        let s = mesh_from_mask(&mask([1, 1, 1], [0.7, 0.36, 0.36], &[[0, 0, 0]])).unwrap();
        assert!((s.area() - 1.26720).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(mesh_from_mask(&mask([2, 2, 2], [1.0; 3], &[])).is_err());
    }

    #[test]
    fn adjacency_symmetric_and_faces_valid() {
        let s = mesh_from_mask(&mask([4, 4, 4], [1.0; 3], &[[1, 1, 1], [2, 2, 2], [1, 2, 1]])).unwrap();
        for (v, nb) in s.adjacency.iter().enumerate() {
            for &u in nb {
                assert!(s.adjacency[u as usize].binary_search(&(v as u32)).is_ok());
            }
        }
        for f in &s.faces {
            assert!(f[0] != f[1] && f[1] != f[2] && f[0] != f[2]);
        }
    }

    #[test]
    fn from_triangles_validates() {
        let v = vec![Vector3::zeros(), Vector3::x(), Vector3::y()];
        assert!(Surface::from_triangles(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(Surface::from_triangles(v.clone(), vec![[0, 1, 1]]).is_err());
        let s = Surface::from_triangles(v, vec![[0, 1, 2]]).unwrap();
        assert!((s.area() - 0.5).abs() < 1e-15);
        assert_eq!(s.face_owner(0), None);
    }

    #[test]
    fn left_handed_grid_keeps_outward_winding() {
        let dir = nalgebra::Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let g = Geometry::new([3, 3, 3], [1.0; 3], [0.0; 3], dir).unwrap();
        let mut m = Volume::filled(g, false);
        m.set(1, 1, 1, true);
        let s = mesh_from_mask(&m).unwrap();
        let centre = m.geometry.voxel_center(13);
        for f in 0..s.n_faces() {
            let [a, b, c] = s.faces[f].map(|v| s.vertices[v as usize]);
            assert!(s.face_normal(f).dot(&((a + b + c) / 3.0 - centre)) > 0.0);
        }
    }
}
