//! Cartilage thickness along surface normals of the bone–cartilage interface.
//!
//! Normals come from the SVD of each vertex's k-nearest-neighbour position
//! matrix, are turned to point into the cartilage, smoothed over the mesh,
//! and followed until they leave through the articular surface.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{inner_surface_voxels, outer_surface_voxels, Connectivity, GapFill};
use crate::raycast::TriangleGrid;
use crate::spatial::PointIndex;
use crate::surface::{
    mesh_from_mask, patch_from_voxels, restricted_dilate, surface_close, PatchBoundaryRestriction,
    Surface, SurfacePatch,
};
use crate::volume::BinaryMask;

type V3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThicknessParams {
    /// Neighbourhood size for SVD normals.
    pub k: usize,
    pub smooth_iters: usize,
    pub max_ray_mm: f64,
    /// Surface closing dilation and erosion counts for the inner surface.
    pub n_d: usize,
    pub n_e: usize,
    /// Ball radius for orientation, in voxel diagonals.
    pub orient_radius_voxels: f64,
    pub connectivity: Connectivity,
    pub gap: GapFill,
}

impl Default for ThicknessParams {
    fn default() -> Self {
        ThicknessParams {
            k: 16,
            smooth_iters: 3,
            max_ray_mm: 15.0,
            n_d: 4,
            n_e: 4,
            orient_radius_voxels: 5.0,
            connectivity: Connectivity::Face6,
            gap: GapFill::default(),
        }
    }
}

/// Unit normals on the vertices of a patch, in ascending vertex order.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub vertices: Vec<u32>,
    pub normals: Vec<V3>,
    /// Vertices whose neighbourhood had rank below 2.
    pub degenerate: Vec<u32>,
}

impl NormalField {
    pub fn get(&self, v: u32) -> Option<V3> {
        self.vertices.binary_search(&v).ok().map(|i| self.normals[i])
    }

    fn position(&self, v: u32) -> Option<usize> {
        self.vertices.binary_search(&v).ok()
    }
}

/// Per-vertex thickness in mm; `None` where the ray found no articular surface.
#[derive(Debug, Clone, PartialEq)]
pub struct ThicknessMap {
    pub vertices: Vec<u32>,
    pub values: Vec<Option<f64>>,
}

impl ThicknessMap {
    pub fn get(&self, v: u32) -> Option<f64> {
        self.vertices
            .binary_search(&v)
            .ok()
            .and_then(|i| self.values[i])
    }

    /// Values per parent vertex with `NaN` for missing or sentinel entries.
    pub fn dense(&self, n_vertices: usize) -> Vec<f64> {
        let mut out = vec![f64::NAN; n_vertices];
        for (&v, t) in self.vertices.iter().zip(&self.values) {
            out[v as usize] = t.unwrap_or(f64::NAN);
        }
        out
    }

    /// CSV with columns vertex, x, y, z, thickness_mm (empty when undefined).
    pub fn write_csv(&self, path: impl AsRef<Path>, surface: &Surface) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        w.write_record(["vertex", "x", "y", "z", "thickness_mm"]).map_err(io)?;
        for (&v, t) in self.vertices.iter().zip(&self.values) {
            let p = surface.vertices[v as usize];
            w.write_record([
                v.to_string(),
                format!("{:.6}", p.x),
                format!("{:.6}", p.y),
                format!("{:.6}", p.z),
                t.map(|x| format!("{x:.6}")).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mean length of mesh edges touching the patch; used to size spatial grids.
fn mean_edge(p: &SurfacePatch) -> f64 {
    let s = p.parent();
    let (mut sum, mut n) = (0.0, 0usize);
    for v in p.members() {
        for &u in &s.adjacency[v as usize] {
            sum += (s.vertices[v as usize] - s.vertices[u as usize]).norm();
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Canonical sign for an unoriented direction: largest component positive.
fn canonical(n: V3) -> V3 {
    if n[n.iamax()] < 0.0 {
        -n
    } else {
        n
    }
}

/// SVD normals: for every patch vertex, the right singular vector of the
/// smallest singular value of its centred k-nearest-neighbour position matrix.
///
/// The result is unoriented (sign canonicalised). Neighbourhoods of rank
/// below 2 are listed in `degenerate` and take the mean of their
/// non-degenerate neighbours' normals.
pub fn estimate_normals_svd(inner: &SurfacePatch, k: usize) -> Result<NormalField> {
    if k < 4 {
        return Err(Error::invalid("normal neighbourhood size must be at least 4"));
    }
    let s = inner.parent();
    let vertices = inner.members();
    if vertices.len() < k {
        return Err(Error::invalid(format!(
            "patch has {} vertices, fewer than the neighbourhood size {k}",
            vertices.len()
        )));
    }
    let pts: Vec<V3> = vertices.iter().map(|&v| s.vertices[v as usize]).collect();
    let index = PointIndex::new(pts.clone(), 2.0 * mean_edge(inner));
    let raw: Vec<(V3, bool, Vec<u32>)> = pts
        .par_iter()
        .map(|q| {
            let nn = index.k_nearest(q, k);
            let mean: V3 = nn.iter().map(|&(i, _)| pts[i as usize]).sum::<V3>() / nn.len() as f64;
            let p = DMatrix::from_fn(nn.len(), 3, |r, c| pts[nn[r].0 as usize][c] - mean[c]);
            let svd = p.svd(false, true);
            let vt = svd.v_t.expect("requested V^T");
            let sv = &svd.singular_values;
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
            let degenerate = sv[order[1]] <= 1e-9 * sv[order[0]].max(f64::MIN_POSITIVE);
            let row = vt.row(order[2]);
            let n = V3::new(row[0], row[1], row[2]).normalize();
            (canonical(n), degenerate, nn.iter().map(|x| x.0).collect())
        })
        .collect();

    let surface_normals = if raw.iter().any(|r| r.1) {
        s.vertex_normals()
    } else {
        Vec::new()
    };
    let fallback = |i: usize| -> V3 {
        let sum: V3 = raw[i]
            .2
            .iter()
            .filter(|&&j| !raw[j as usize].1)
            .map(|&j| raw[j as usize].0)
            // Align with the running sum so opposite signs do not cancel.
            .fold(V3::zeros(), |acc, n| if acc.dot(&n) < 0.0 { acc - n } else { acc + n });
        sum.try_normalize(1e-12)
            .map(canonical)
            .or_else(|| surface_normals[vertices[i] as usize].try_normalize(1e-12))
            .unwrap_or_else(V3::z)
    };
    let mut normals = Vec::with_capacity(raw.len());
    let mut degenerate = Vec::new();
    for (i, r) in raw.iter().enumerate() {
        if r.1 {
            degenerate.push(vertices[i]);
            normals.push(fallback(i));
        } else {
            normals.push(r.0);
        }
    }
    Ok(NormalField {
        vertices,
        normals,
        degenerate,
    })
}

/// Point each normal into the cartilage.
///
/// The sign is chosen so the normal has a positive dot product with the
/// offset from the vertex to the centroid of cartilage voxel centres inside a
/// ball of `radius_voxels` voxel diagonals. Vertices with no cartilage nearby
/// or an offset perpendicular to the normal follow the majority of their
/// already-oriented patch neighbours.
pub fn reorient_normals(
    n: &NormalField,
    inner: &SurfacePatch,
    cart: &BinaryMask,
    radius_voxels: f64,
) -> NormalField {
    let s = inner.parent();
    let g = &cart.geometry;
    let radius = radius_voxels * g.voxel_diagonal();
    let inv = g.inverse_linear();
    let half: [i64; 3] = [0, 1, 2].map(|a| (radius * inv.row(a).norm()).ceil() as i64 + 1);

    let decided: Vec<Option<V3>> = n
        .vertices
        .par_iter()
        .zip(&n.normals)
        .map(|(&v, &nv)| {
            let p = s.vertices[v as usize];
            let c = g.world_to_index(&p).map(|x| x.round() as i64);
            let mut sum = V3::zeros();
            let mut count = 0usize;
            for i in c[0] - half[0]..=c[0] + half[0] {
                for j in c[1] - half[1]..=c[1] + half[1] {
                    for k in c[2] - half[2]..=c[2] + half[2] {
                        if cart.get_signed([i, j, k]) != Some(true) {
                            continue;
                        }
                        let w = g.index_to_world([i as f64, j as f64, k as f64]);
                        if (w - p).norm() <= radius {
                            sum += w;
                            count += 1;
                        }
                    }
                }
            }
            if count == 0 {
                return None;
            }
            let offset = sum / count as f64 - p;
            let d = offset.dot(&nv);
            if d.abs() <= 1e-9 * radius {
                None
            } else if d > 0.0 {
                Some(nv)
            } else {
                Some(-nv)
            }
        })
        .collect();

    let mut out: Vec<Option<V3>> = decided;
    // Resolve undecided vertices from decided neighbours, sweeping until stable.
    loop {
        let mut changed = false;
        for i in 0..out.len() {
            if out[i].is_some() {
                continue;
            }
            let v = n.vertices[i];
            let nv = n.normals[i];
            let mut vote = 0i64;
            for &u in &s.adjacency[v as usize] {
                if let Some(j) = n.position(u) {
                    if let Some(nu) = out[j] {
                        vote += if nu.dot(&nv) >= 0.0 { 1 } else { -1 };
                    }
                }
            }
            if vote != 0 {
                out[i] = Some(if vote > 0 { nv } else { -nv });
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    NormalField {
        vertices: n.vertices.clone(),
        normals: out
            .iter()
            .zip(&n.normals)
            .map(|(o, &nv)| o.unwrap_or(nv))
            .collect(),
        degenerate: n.degenerate.clone(),
    }
}

/// Average each normal with the mean of its patch neighbours `iters` times,
/// renormalising every round. A vanishing average keeps the previous vector.
pub fn smooth_normals(n: &NormalField, inner: &SurfacePatch, iters: usize) -> NormalField {
    let s = inner.parent();
    let mut cur = n.normals.clone();
    for _ in 0..iters {
        cur = (0..cur.len())
            .into_par_iter()
            .map(|i| {
                let v = n.vertices[i];
                let mut ring = V3::zeros();
                let mut count = 0usize;
                for &u in &s.adjacency[v as usize] {
                    if let Some(j) = n.position(u) {
                        ring += cur[j];
                        count += 1;
                    }
                }
                if count == 0 {
                    return cur[i];
                }
                (cur[i] + ring / count as f64).try_normalize(1e-12).unwrap_or(cur[i])
            })
            .collect();
    }
    NormalField {
        vertices: n.vertices.clone(),
        normals: cur,
        degenerate: n.degenerate.clone(),
    }
}

/// Faces of the outer patch's parent with at least one outer vertex.
fn outer_triangles(outer: &SurfacePatch) -> Vec<[V3; 3]> {
    let s = outer.parent();
    s.faces
        .iter()
        .filter(|f| f.iter().any(|&v| outer.contains(v as usize)))
        .map(|f| f.map(|v| s.vertices[v as usize]))
        .collect()
}

/// Distance from each inner vertex along its normal to the first outer
/// triangle, or `None` beyond `max_ray`. Vertices that belong to both
/// patches (zero-thickness contact) measure 0.
pub fn measure_thickness(
    inner: &SurfacePatch,
    outer: &SurfacePatch,
    n: &NormalField,
    max_ray: f64,
) -> ThicknessMap {
    let s = inner.parent();
    let same_parent = Arc::ptr_eq(inner.parent(), outer.parent());
    let tris = outer_triangles(outer);
    let grid = TriangleGrid::new(tris, 2.0 * mean_edge(outer).max(1e-6));
    let eps = 1e-9 * max_ray.max(1.0);
    let values = n
        .vertices
        .par_iter()
        .zip(&n.normals)
        .map(|(&v, d)| {
            if same_parent && outer.contains(v as usize) {
                return Some(0.0);
            }
            let o = s.vertices[v as usize];
            grid.first_hit(&o, d, max_ray, eps).or_else(|| {
                // A ray grazing along a wall from a rim vertex can slip past the
                // silhouette edge; retry from just inside the patch.
                let nb: Vec<V3> = s.adjacency[v as usize]
                    .iter()
                    .filter(|&&u| inner.contains(u as usize))
                    .map(|&u| s.vertices[u as usize])
                    .collect();
                if nb.is_empty() {
                    return None;
                }
                let toward = nb.iter().sum::<V3>() / nb.len() as f64 - o;
                let nudged = o + toward * 1e-4;
                grid.first_hit(&nudged, d, max_ray, eps)
                    .map(|t| t + (nudged - o).dot(d))
            })
        })
        .collect();
    ThicknessMap {
        vertices: n.vertices.clone(),
        values,
    }
}

/// Distance from each inner vertex to the nearest outer vertex.
pub fn thickness_3dnn(inner: &SurfacePatch, outer: &SurfacePatch) -> Result<ThicknessMap> {
    if inner.is_empty() || outer.is_empty() {
        return Err(Error::Empty("3dNN thickness needs nonempty patches".into()));
    }
    let so = outer.parent();
    let pts: Vec<V3> = outer.members().iter().map(|&v| so.vertices[v as usize]).collect();
    let index = PointIndex::new(pts, 2.0 * mean_edge(outer));
    let s = inner.parent();
    let vertices = inner.members();
    let values = vertices
        .par_iter()
        .map(|&v| index.nearest(&s.vertices[v as usize]).map(|x| x.1))
        .collect();
    Ok(ThicknessMap { vertices, values })
}

/// Cartilage mesh split into the bone-interface and articular patches.
#[derive(Debug, Clone)]
pub struct SurfaceSegmentation {
    pub mesh: Arc<Surface>,
    pub v_in: BinaryMask,
    pub v_out: BinaryMask,
    /// Closed inner surface.
    pub inner: SurfacePatch,
    /// Outer surface grown up to the inner one.
    pub outer: SurfacePatch,
}

/// Voxel classification, closing of the inner patch, and restricted dilation
/// of the outer patch up to the closed inner one.
pub fn segment_surfaces(
    cart: &BinaryMask,
    bone: &BinaryMask,
    params: &ThicknessParams,
) -> Result<SurfaceSegmentation> {
    let v_in = inner_surface_voxels(cart, bone, params.connectivity, params.gap)?;
    let v_out = outer_surface_voxels(cart, &v_in, params.connectivity)?;
    let mesh = Arc::new(mesh_from_mask(cart)?);
    let domain = SurfacePatch::full(&mesh);
    let inner = surface_close(&patch_from_voxels(&mesh, &v_in)?, &domain, params.n_d, params.n_e);
    let outer = restricted_dilate(
        &patch_from_voxels(&mesh, &v_out)?,
        &domain,
        &PatchBoundaryRestriction::new(inner.clone()),
    );
    Ok(SurfaceSegmentation {
        mesh,
        v_in,
        v_out,
        inner,
        outer,
    })
}

/// Full thickness mapping of one cartilage plate.
#[derive(Debug, Clone)]
pub struct ThicknessResult {
    pub surfaces: SurfaceSegmentation,
    pub normals: NormalField,
    pub thickness: ThicknessMap,
}

pub fn map_thickness(cart: &BinaryMask, bone: &BinaryMask, params: &ThicknessParams) -> Result<ThicknessResult> {
    let surfaces = segment_surfaces(cart, bone, params)?;
    let raw = estimate_normals_svd(&surfaces.inner, params.k)?;
    let oriented = reorient_normals(&raw, &surfaces.inner, cart, params.orient_radius_voxels);
    let normals = smooth_normals(&oriented, &surfaces.inner, params.smooth_iters);
    let thickness = measure_thickness(&surfaces.inner, &surfaces.outer, &normals, params.max_ray_mm);
    Ok(ThicknessResult {
        surfaces,
        normals,
        thickness,
    })
}
