//! Full-thickness cartilage loss on the subchondral bone surface.
//!
//! The subject's cartilage is merged with the warped template, projected onto
//! the bone, and completed into a pseudo-healthy footprint by filling
//! enclosed holes, extending the outline to fitted curves, and closing. Loss
//! is the part of that footprint the subject's own cartilage does not cover.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surface::{mesh_from_mask, patch_from_voxels, surface_close, Surface, SurfacePatch};
use crate::volume::BinaryMask;

type V3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Union,
    /// Keep only voxels both masks agree on. Provided for comparison; it
    /// removes exactly the regions the template is meant to restore.
    Intersection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compartment {
    Femoral,
    Tibial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveFitParams {
    /// Polynomial degree of the tibial outline curves.
    pub tibial_order: usize,
    /// Harmonic order of the femoral outline curves.
    pub femoral_order: usize,
    /// Inward deviation from the fit, in voxels, that marks a missing bin.
    pub tolerance_voxels: f64,
    /// Share of the outline, centred, used for fitting and filling.
    pub central_fraction: f64,
    pub rejection_rounds: usize,
    /// Femoral bins whose extent falls more than this many voxels short of
    /// the median extent lie outside the condylar outline (the trochlear
    /// bridge, the notch) and are neither fitted nor filled.
    pub femoral_max_depth_voxels: f64,
}

impl Default for CurveFitParams {
    fn default() -> Self {
        CurveFitParams {
            tibial_order: 3,
            femoral_order: 4,
            tolerance_voxels: 1.5,
            central_fraction: 0.8,
            rejection_rounds: 10,
            femoral_max_depth_voxels: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FclParams {
    pub merge: MergeMode,
    pub n_d: usize,
    pub n_e: usize,
    pub curvefit: CurveFitParams,
}

impl Default for FclParams {
    fn default() -> Self {
        FclParams {
            merge: MergeMode::Union,
            n_d: 4,
            n_e: 4,
            curvefit: CurveFitParams::default(),
        }
    }
}

pub fn merge_cartilage_masks(subject: &BinaryMask, warped_template: &BinaryMask, mode: MergeMode) -> Result<BinaryMask> {
    subject
        .geometry
        .ensure_same_grid(&warped_template.geometry, "subject and template cartilage")?;
    Ok(match mode {
        MergeMode::Union => subject.union(warped_template),
        MergeMode::Intersection => subject.intersection(warped_template),
    })
}

fn vertex_components(s: &Surface, include: impl Fn(usize) -> bool) -> (Vec<u32>, usize) {
    let n = s.n_vertices();
    let mut comp = vec![u32::MAX; n];
    let mut count = 0;
    for start in 0..n {
        if comp[start] != u32::MAX || !include(start) {
            continue;
        }
        comp[start] = count as u32;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &u in &s.adjacency[v] {
                let u = u as usize;
                if comp[u] == u32::MAX && include(u) {
                    comp[u] = count as u32;
                    queue.push_back(u);
                }
            }
        }
        count += 1;
    }
    (comp, count)
}

/// Fill the holes of a patch that are enclosed by it.
///
/// Within every connected piece of the surface that the patch touches, the
/// complement splits into components; the one with the largest area is the
/// exterior and every other one is a hole.
pub fn fill_holes_connectivity(p: &SurfacePatch) -> SurfacePatch {
    let s = p.parent();
    let (mesh_comp, _) = vertex_components(s, |_| true);
    let (holes, n_holes) = vertex_components(s, |v| !p.contains(v));
    if n_holes == 0 {
        return p.clone();
    }
    let mut vertex_area = vec![0.0; s.n_vertices()];
    for (f, tri) in s.faces.iter().enumerate() {
        for &v in tri {
            vertex_area[v as usize] += s.face_area(f) / 3.0;
        }
    }
    let mut area = vec![0.0; n_holes];
    let mut first = vec![usize::MAX; n_holes];
    let mut piece = vec![u32::MAX; n_holes];
    for v in 0..s.n_vertices() {
        if holes[v] != u32::MAX {
            let h = holes[v] as usize;
            area[h] += vertex_area[v];
            first[h] = first[h].min(v);
            piece[h] = mesh_comp[v];
        }
    }
    let touched: std::collections::HashSet<u32> = p.members().iter().map(|&v| mesh_comp[v as usize]).collect();
    // Exterior per surface piece: largest area, ties to the lowest vertex id.
    let mut exterior: BTreeMap<u32, usize> = BTreeMap::new();
    for h in 0..n_holes {
        let e = exterior.entry(piece[h]).or_insert(h);
        let better = area[h] > area[*e] || (area[h] == area[*e] && first[h] < first[*e]);
        if better {
            *e = h;
        }
    }
    let flags = (0..s.n_vertices())
        .map(|v| {
            if p.contains(v) {
                return true;
            }
            let h = holes[v] as usize;
            touched.contains(&piece[h]) && exterior[&piece[h]] != h
        })
        .collect();
    SurfacePatch::from_flags(s, flags).expect("flag length matches parent")
}

fn bin_width(s: &Surface) -> f64 {
    if let Some(g) = s.generator() {
        return g.geometry.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    }
    let mut lens: Vec<f64> = s
        .faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .map(|(a, b)| (s.vertices[a as usize] - s.vertices[b as usize]).norm())
        .collect();
    if lens.is_empty() {
        return 1.0;
    }
    lens.sort_by(f64::total_cmp);
    lens[lens.len() / 2]
}

/// Bin index of `x`. Values within rounding noise of a bin edge are snapped
/// first, so a point and its mirror image always land in mirrored bins.
fn bin(x: f64, width: f64) -> i64 {
    ((x / width * 1e6).round() / 1e6).round() as i64
}

/// Least squares via SVD; `None` when the system cannot be solved.
fn lstsq(rows: &[Vec<f64>], y: &[f64]) -> Option<DVector<f64>> {
    let a = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    a.svd(true, true).solve(&DVector::from_column_slice(y), 1e-12).ok()
}

/// One outline side: for every bin of `key`, the outermost `sign · val`.
struct OutlineSide<'a> {
    key: &'a [f64],
    val: &'a [f64],
    sign: f64,
}

/// Bins where the observed outline falls short of the fitted curve, with the
/// observed and fitted outer values (in `sign · val` units).
#[allow(clippy::too_many_arguments)]
fn short_bins(
    members: &[u32],
    side: &OutlineSide,
    bw_key: f64,
    basis: &dyn Fn(f64, f64, f64) -> Vec<f64>,
    n_coef: usize,
    tau: f64,
    max_depth: Option<f64>,
    params: &CurveFitParams,
) -> Option<BTreeMap<i64, (f64, f64)>> {
    let mut outline: BTreeMap<i64, f64> = BTreeMap::new();
    for &v in members {
        let b = bin(side.key[v as usize], bw_key);
        let x = side.sign * side.val[v as usize];
        let e = outline.entry(b).or_insert(f64::NEG_INFINITY);
        *e = e.max(x);
    }
    if let Some(depth) = max_depth {
        let mut xs: Vec<f64> = outline.values().copied().collect();
        xs.sort_by(f64::total_cmp);
        let median = *xs.get(xs.len() / 2)?;
        outline.retain(|_, x| *x >= median - depth);
    }
    let (&lo, _) = outline.first_key_value()?;
    let (&hi, _) = outline.last_key_value()?;
    let trim = (1.0 - params.central_fraction) / 2.0 * (hi - lo) as f64;
    let (clo, chi) = (lo as f64 + trim, hi as f64 - trim);
    let mid = (clo + chi) / 2.0;
    let half = ((chi - clo) / 2.0).max(1.0);
    let central: Vec<(i64, f64)> = outline
        .iter()
        .filter(|(&b, _)| b as f64 >= clo - 1e-9 && b as f64 <= chi + 1e-9)
        .map(|(&b, &x)| (b, x))
        .collect();
    if central.len() < n_coef + 2 {
        return None;
    }
    let rows: Vec<Vec<f64>> = central.iter().map(|&(b, _)| basis(b as f64 * bw_key, mid * bw_key, half * bw_key)).collect();
    // Grow the basis one term at a time so a low-order envelope decides the
    // outliers before the full fit can bend into a missing stretch.
    let mut inlier = vec![true; central.len()];
    let mut fit = vec![0.0; central.len()];
    for terms in 1..=n_coef {
        for _ in 0..=params.rejection_rounds {
            let (r, y): (Vec<Vec<f64>>, Vec<f64>) = rows
                .iter()
                .zip(&central)
                .zip(&inlier)
                .filter(|(_, &keep)| keep)
                .map(|((row, &(_, x)), _)| (row[..terms].to_vec(), x))
                .unzip();
            if r.len() < terms + 2 {
                return None;
            }
            let c = lstsq(&r, &y)?;
            fit = rows.iter().map(|row| row[..terms].iter().zip(c.iter()).map(|(a, b)| a * b).sum()).collect();
            let next: Vec<bool> = central.iter().zip(&fit).map(|(&(_, x), &f)| x - f >= -tau / 2.0).collect();
            if next == inlier {
                break;
            }
            inlier = next;
        }
    }
    Some(
        central
            .iter()
            .zip(&fit)
            .filter(|(&(_, x), &f)| x - f < -tau)
            .map(|(&(b, x), &f)| (b, (x, f)))
            .collect(),
    )
}

/// Centre of the least-squares circle through the points projected onto
/// the plane spanned by `e1`, `e2` (through `origin`); falls back to the
/// projected centroid when the fit is singular.
fn condyle_centre(pts: &[V3], origin: V3, e1: &V3, e2: &V3) -> V3 {
    let xy: Vec<(f64, f64)> = pts.iter().map(|q| ((q - origin).dot(e1), (q - origin).dot(e2))).collect();
    let rows: Vec<Vec<f64>> = xy.iter().map(|&(x, y)| vec![x, y, 1.0]).collect();
    let rhs: Vec<f64> = xy.iter().map(|&(x, y)| -(x * x + y * y)).collect();
    let (cx, cy) = match (rows.len() >= 3).then(|| lstsq(&rows, &rhs)).flatten() {
        Some(c) if c.iter().all(|v| v.is_finite()) => (-c[0] / 2.0, -c[1] / 2.0),
        _ => {
            let n = xy.len().max(1) as f64;
            (xy.iter().map(|p| p.0).sum::<f64>() / n, xy.iter().map(|p| p.1).sum::<f64>() / n)
        }
    };
    origin + e1 * cx + e2 * cy
}

fn mean_normal(s: &Surface, members: &[u32], normals: &[V3]) -> V3 {
    let _ = s;
    let sum: V3 = members.iter().map(|&v| normals[v as usize]).sum();
    sum.try_normalize(1e-12).unwrap_or(V3::z())
}

/// Extend a patch to the curves fitted through its outline.
///
/// Tibial outlines are fitted as polynomials in the patch's dominant plane,
/// along RAS-aligned in-plane axes. Femoral outlines are the medial and
/// lateral extents along the condylar axis as trigonometric polynomials of
/// the angle around it; the intercondylar gap is never bridged. Vertices
/// between the observed outline and the fit are added when they face the
/// same way as the patch and connect to it. A fit without enough outline
/// points is skipped with a warning.
pub fn fill_holes_curvefit(
    p: &SurfacePatch,
    compartment: Compartment,
    params: &CurveFitParams,
) -> Result<SurfacePatch> {
    if p.is_empty() {
        return Err(Error::Empty("cartilage footprint for outline fitting".into()));
    }
    let s = p.parent().clone();
    let members = p.members();
    let normals = s.vertex_normals();
    let bw = bin_width(&s);
    let tau = params.tolerance_voxels * bw;
    let n = s.n_vertices();
    let mut add = vec![false; n];

    match compartment {
        Compartment::Tibial => {
            let pts: Vec<V3> = members.iter().map(|&v| s.vertices[v as usize]).collect();
            let c: V3 = pts.iter().sum::<V3>() / pts.len() as f64;
            let mut cov = Matrix3::zeros();
            for q in &pts {
                let d = q - c;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let imin = (0..3).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap();
            let mut nrm: V3 = eig.eigenvectors.column(imin).into_owned();
            if nrm.dot(&mean_normal(&s, &members, &normals)) < 0.0 {
                nrm = -nrm;
            }
            let eu = (V3::x() - nrm * nrm.x)
                .try_normalize(0.1)
                .or_else(|| (V3::y() - nrm * nrm.y).try_normalize(0.1))
                .unwrap_or(V3::x());
            let ew = nrm.cross(&eu);
            let u: Vec<f64> = s.vertices.iter().map(|q| (q - c).dot(&eu)).collect();
            let w: Vec<f64> = s.vertices.iter().map(|q| (q - c).dot(&ew)).collect();
            let h: Vec<f64> = s.vertices.iter().map(|q| (q - c).dot(&nrm)).collect();
            let spread = members.iter().map(|&v| h[v as usize].abs()).fold(0.0, f64::max);
            let near = spread + 2.0 * bw;
            let order = params.tibial_order;
            let basis = move |x: f64, mid: f64, half: f64| {
                let t = (x - mid) / half;
                (0..=order).map(|k| t.powi(k as i32)).collect::<Vec<f64>>()
            };
            for (key, val) in [(&u, &w), (&w, &u)] {
                for sign in [1.0, -1.0] {
                    let side = OutlineSide { key, val, sign };
                    let Some(bins) = short_bins(&members, &side, bw, &basis, order + 1, tau, None, params) else {
                        log::warn!("tibial outline fit skipped: too few outline points");
                        continue;
                    };
                    for v in 0..n {
                        if p.contains(v) || normals[v].dot(&nrm) <= 0.3 || (h[v]).abs() > near {
                            continue;
                        }
                        let b = bin(key[v], bw);
                        if let Some(&(obs, fit)) = bins.get(&b) {
                            let x = sign * val[v];
                            if x > obs + 1e-9 && x <= fit + 0.5 * bw {
                                add[v] = true;
                            }
                        }
                    }
                }
            }
        }
        Compartment::Femoral => {
            let gen = s
                .generator()
                .ok_or_else(|| Error::invalid("femoral outline fit needs a bone surface built from a mask"))?;
            let g = &gen.geometry;
            let centers: Vec<V3> = gen.indices().map(|i| g.voxel_center(i)).collect();
            if centers.is_empty() {
                return Err(Error::Empty("femoral bone mask".into()));
            }
            let m: V3 = centers.iter().sum::<V3>() / centers.len() as f64;
            let mut cov = Matrix3::zeros();
            for q in &centers {
                let d = q - m;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let iax = (0..3)
                .max_by(|&a, &b| eig.eigenvectors[(0, a)].abs().total_cmp(&eig.eigenvectors[(0, b)].abs()))
                .unwrap();
            let mut axis: V3 = eig.eigenvectors.column(iax).into_owned();
            if axis.x < 0.0 {
                axis = -axis;
            }
            let down = -V3::z();
            let e1 = (down - axis * down.dot(&axis)).try_normalize(1e-6).unwrap_or(-V3::y());
            let e2 = axis.cross(&e1);
            let c = condyle_centre(&members.iter().map(|&v| s.vertices[v as usize]).collect::<Vec<_>>(), m, &e1, &e2);
            let mut sx = vec![0.0; n];
            let mut theta = vec![0.0; n];
            let mut rad = vec![0.0; n];
            let mut radial = vec![V3::zeros(); n];
            for v in 0..n {
                let d = s.vertices[v] - c;
                sx[v] = d.dot(&axis);
                let r = d - axis * sx[v];
                rad[v] = r.norm();
                radial[v] = r / rad[v].max(1e-12);
                theta[v] = r.dot(&e2).atan2(r.dot(&e1));
            }
            let r_mean = members.iter().map(|&v| rad[v as usize]).sum::<f64>() / members.len() as f64;
            let bw_theta = bw / r_mean.max(bw);
            let order = params.femoral_order;
            let basis = move |t: f64, _: f64, _: f64| {
                let mut row = vec![1.0];
                for k in 1..=order {
                    row.push((k as f64 * t).cos());
                    row.push((k as f64 * t).sin());
                }
                row
            };
            let mut rrange: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
            for &v in &members {
                let b = bin(theta[v as usize], bw_theta);
                let e = rrange.entry(b).or_insert((f64::INFINITY, f64::NEG_INFINITY));
                e.0 = e.0.min(rad[v as usize]);
                e.1 = e.1.max(rad[v as usize]);
            }
            for sign in [1.0, -1.0] {
                let side = OutlineSide {
                    key: &theta,
                    val: &sx,
                    sign,
                };
                let Some(bins) = short_bins(
                    &members,
                    &side,
                    bw_theta,
                    &basis,
                    2 * order + 1,
                    tau,
                    Some(params.femoral_max_depth_voxels * bw),
                    params,
                ) else {
                    log::warn!("femoral outline fit skipped: too few outline points");
                    continue;
                };
                for v in 0..n {
                    if p.contains(v) || normals[v].dot(&radial[v]) <= 0.3 {
                        continue;
                    }
                    let b = bin(theta[v], bw_theta);
                    let (Some(&(obs, fit)), Some(&(rlo, rhi))) = (bins.get(&b), rrange.get(&b)) else {
                        continue;
                    };
                    let x = sign * sx[v];
                    if rad[v] >= rlo - 2.0 * bw && rad[v] <= rhi + 2.0 * bw && x > obs + 1e-9 && x <= fit + 0.5 * bw {
                        add[v] = true;
                    }
                }
            }
        }
    }

    // Keep additions reachable from the patch through other additions.
    let mut out = p.flags().to_vec();
    let mut queue: VecDeque<u32> = members.iter().copied().collect();
    while let Some(v) = queue.pop_front() {
        for &u in &s.adjacency[v as usize] {
            if add[u as usize] && !out[u as usize] {
                out[u as usize] = true;
                queue.push_back(u);
            }
        }
    }
    SurfacePatch::from_flags(&s, out)
}

#[derive(Debug, Clone)]
pub struct FclResult {
    pub bone_surface: Arc<Surface>,
    /// Bone vertices under the subject's own cartilage.
    pub footprint: SurfacePatch,
    pub pseudo_healthy_patch: SurfacePatch,
    /// Pseudo-healthy vertices counted as denuded.
    pub fcl_patch: SurfacePatch,
    /// Pseudo-healthy faces with a denuded vertex.
    pub fcl_faces: Vec<u32>,
    pub fcl_percent: f64,
}

impl FclResult {
    /// Faces induced by the pseudo-healthy patch.
    pub fn pseudo_faces(&self) -> Vec<u32> {
        self.pseudo_healthy_patch.induced_faces()
    }
}

/// [`estimate_fcl_on`] with a bone surface meshed from `bone`.
pub fn estimate_fcl(
    cart: &BinaryMask,
    bone: &BinaryMask,
    warped_template_cart: &BinaryMask,
    compartment: Compartment,
    params: &FclParams,
) -> Result<FclResult> {
    cart.geometry.ensure_same_grid(&bone.geometry, "cartilage and bone")?;
    let mesh = Arc::new(mesh_from_mask(bone)?);
    estimate_fcl_on(&mesh, cart, warped_template_cart, compartment, params)
}

/// Pseudo-healthy footprint and its uncovered part on a bone surface.
///
/// Vertices that the closing step alone adds, and that closing would
/// equally add to the subject's own footprint, are treated as covered: they
/// are concavities of the outline rather than missing cartilage.
pub fn estimate_fcl_on(
    bone_surface: &Arc<Surface>,
    cart: &BinaryMask,
    warped_template_cart: &BinaryMask,
    compartment: Compartment,
    params: &FclParams,
) -> Result<FclResult> {
    let merged = merge_cartilage_masks(cart, warped_template_cart, params.merge)?;
    let full = SurfacePatch::full(bone_surface);
    let mapped = patch_from_voxels(bone_surface, &merged)?;
    if mapped.is_empty() {
        return Err(Error::Empty("pseudo-healthy cartilage footprint".into()));
    }
    let filled = fill_holes_connectivity(&mapped);
    let fitted = fill_holes_curvefit(&filled, compartment, &params.curvefit)?;
    let pseudo = surface_close(&fitted, &full, params.n_d, params.n_e);
    let footprint = patch_from_voxels(bone_surface, cart)?;

    let own_closing = surface_close(&footprint, &full, params.n_d, params.n_e).difference(&footprint);
    let pseudo_closing = pseudo.difference(&fitted);
    let denuded = pseudo
        .difference(&footprint)
        .difference(&own_closing.intersection(&pseudo_closing));

    let pseudo_faces = pseudo.induced_faces();
    let total: f64 = pseudo_faces.iter().map(|&f| bone_surface.face_area(f as usize)).sum();
    if total <= 0.0 {
        return Err(Error::Empty("pseudo-healthy surface area".into()));
    }
    let fcl_faces: Vec<u32> = pseudo_faces
        .into_iter()
        .filter(|&f| bone_surface.faces[f as usize].iter().any(|&v| denuded.contains(v as usize)))
        .collect();
    let lost: f64 = fcl_faces.iter().map(|&f| bone_surface.face_area(f as usize)).sum();
    Ok(FclResult {
        bone_surface: bone_surface.clone(),
        footprint,
        pseudo_healthy_patch: pseudo,
        fcl_patch: denuded,
        fcl_faces,
        fcl_percent: (100.0 * lost / total).clamp(0.0, 100.0),
    })
}
