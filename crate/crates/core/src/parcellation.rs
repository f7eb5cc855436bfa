//! Geometric subdivision of the femoral and tibial cartilage plates into 20
//! regions, and transfer of the surface labels into the cartilage volume.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcl::Compartment;
use crate::spatial::PointIndex;
use crate::surface::SurfacePatch;
use crate::volume::{BinaryMask, KneeSide, LabelSchema, LabelVolume, Volume};

type V3 = Vector3<f64>;

/// The 20 subregions, numbered as in the regional report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "aMFC")]
    AMfc = 1,
    #[serde(rename = "ecMFC")]
    EcMfc,
    #[serde(rename = "ccMFC")]
    CcMfc,
    #[serde(rename = "icMFC")]
    IcMfc,
    #[serde(rename = "pMFC")]
    PMfc,
    #[serde(rename = "aLFC")]
    ALfc,
    #[serde(rename = "ecLFC")]
    EcLfc,
    #[serde(rename = "ccLFC")]
    CcLfc,
    #[serde(rename = "icLFC")]
    IcLfc,
    #[serde(rename = "pLFC")]
    PLfc,
    #[serde(rename = "aMTC")]
    AMtc,
    #[serde(rename = "eMTC")]
    EMtc,
    #[serde(rename = "pMTC")]
    PMtc,
    #[serde(rename = "iMTC")]
    IMtc,
    #[serde(rename = "cMTC")]
    CMtc,
    #[serde(rename = "aLTC")]
    ALtc,
    #[serde(rename = "eLTC")]
    ELtc,
    #[serde(rename = "pLTC")]
    PLtc,
    #[serde(rename = "iLTC")]
    ILtc,
    #[serde(rename = "cLTC")]
    CLtc,
}

const NAMES: [&str; 20] = [
    "aMFC", "ecMFC", "ccMFC", "icMFC", "pMFC", "aLFC", "ecLFC", "ccLFC", "icLFC", "pLFC", "aMTC", "eMTC", "pMTC",
    "iMTC", "cMTC", "aLTC", "eLTC", "pLTC", "iLTC", "cLTC",
];

impl Region {
    pub const ALL: [Region; 20] = [
        Region::AMfc,
        Region::EcMfc,
        Region::CcMfc,
        Region::IcMfc,
        Region::PMfc,
        Region::ALfc,
        Region::EcLfc,
        Region::CcLfc,
        Region::IcLfc,
        Region::PLfc,
        Region::AMtc,
        Region::EMtc,
        Region::PMtc,
        Region::IMtc,
        Region::CMtc,
        Region::ALtc,
        Region::ELtc,
        Region::PLtc,
        Region::ILtc,
        Region::CLtc,
    ];

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Option<Region> {
        Region::ALL.get((code as usize).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        NAMES[self as usize - 1]
    }

    pub fn from_name(name: &str) -> Option<Region> {
        NAMES.iter().position(|n| *n == name).map(|i| Region::ALL[i])
    }

    pub fn plate(self) -> Plate {
        match self.code() {
            1..=10 => Plate::Fc,
            11..=15 => Plate::Mtc,
            _ => Plate::Ltc,
        }
    }

    /// Label schema mapping region codes to names.
    pub fn schema() -> LabelSchema {
        LabelSchema(Region::ALL.iter().map(|r| (r.code(), r.name().to_string())).collect())
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A cartilage plate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Plate {
    #[serde(rename = "FC")]
    Fc,
    #[serde(rename = "MTC")]
    Mtc,
    #[serde(rename = "LTC")]
    Ltc,
}

impl Plate {
    pub const ALL: [Plate; 3] = [Plate::Fc, Plate::Mtc, Plate::Ltc];

    pub fn compartment(self) -> Compartment {
        match self {
            Plate::Fc => Compartment::Femoral,
            _ => Compartment::Tibial,
        }
    }

    pub fn cartilage_label(self) -> u16 {
        match self {
            Plate::Fc => LabelSchema::FEMORAL_CARTILAGE,
            Plate::Mtc => LabelSchema::MEDIAL_TIBIAL_CARTILAGE,
            Plate::Ltc => LabelSchema::LATERAL_TIBIAL_CARTILAGE,
        }
    }

    pub fn bone_label(self) -> u16 {
        match self {
            Plate::Fc => LabelSchema::FEMUR,
            _ => LabelSchema::TIBIA,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plate::Fc => "FC",
            Plate::Mtc => "MTC",
            Plate::Ltc => "LTC",
        }
    }
}

/// Region labels on the vertices of one plate's patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ParcelPart {
    pub plate: Plate,
    pub patch: SurfacePatch,
    /// Region of each member of `patch`, in ascending vertex order.
    pub regions: Vec<Region>,
}

impl ParcelPart {
    pub fn vertices(&self) -> Vec<u32> {
        self.patch.members()
    }

    /// Region per parent vertex, `None` off the patch.
    pub fn dense(&self) -> Vec<Option<Region>> {
        let mut out = vec![None; self.patch.parent().n_vertices()];
        for (v, r) in self.patch.members().into_iter().zip(&self.regions) {
            out[v as usize] = Some(*r);
        }
        out
    }

    pub fn region_patch(&self, r: Region) -> SurfacePatch {
        let ids = self
            .patch
            .members()
            .into_iter()
            .zip(&self.regions)
            .filter(|(_, &x)| x == r)
            .map(|(v, _)| v);
        SurfacePatch::from_vertices(self.patch.parent(), ids).expect("members belong to the parent")
    }

    /// Area carried by each region's vertices (a third of every induced
    /// face of the plate patch per vertex).
    pub fn vertex_carried_areas(&self) -> BTreeMap<Region, f64> {
        let va = self.patch.vertex_areas();
        let mut out = BTreeMap::new();
        for (v, r) in self.patch.members().into_iter().zip(&self.regions) {
            *out.entry(*r).or_insert(0.0) += va[v as usize];
        }
        out
    }

    /// Region of a face by majority of its vertices; without a majority,
    /// the smallest region code. `None` unless all three are labelled.
    pub fn face_region(&self, dense: &[Option<Region>], f: usize) -> Option<Region> {
        let tri = self.patch.parent().faces[f];
        let r = [dense[tri[0] as usize]?, dense[tri[1] as usize]?, dense[tri[2] as usize]?];
        if r[0] == r[1] || r[0] == r[2] {
            Some(r[0])
        } else if r[1] == r[2] {
            Some(r[1])
        } else {
            r.iter().min().copied()
        }
    }
}

/// Per-vertex regions over the cartilage plates of one knee.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceParcellation {
    pub side: KneeSide,
    pub parts: Vec<ParcelPart>,
}

impl SurfaceParcellation {
    pub fn part(&self, plate: Plate) -> Option<&ParcelPart> {
        self.parts.iter().find(|p| p.plate == plate)
    }
}

/// Order-defining key that is unchanged when a knee is mirrored left–right
/// and its side flipped, so ties resolve the same way on both.
fn side_key(p: &V3, side: KneeSide) -> [f64; 3] {
    [p.x * side.medial_sign(), p.y, p.z]
}

fn cmp_keys(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn spacing_of(p: &SurfacePatch) -> f64 {
    p.parent()
        .generator()
        .map(|g| g.geometry.spacing.iter().copied().fold(f64::INFINITY, f64::min))
        .unwrap_or(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NotchEstimate {
    pub position: [f64; 3],
    /// Set when no two-lobed profile was found and the centroid was used.
    pub fallback: bool,
    pub depth_mm: f64,
}

/// Intercondylar notch as the saddle of the inferior profile.
///
/// Vertices are binned along x; each bin's lowest z forms the inferior
/// profile. A bin's saddle depth is how far it rises above the lowest
/// points on both sides. The middle of the deepest run of bins is the
/// notch; its lowest vertices give the position, snapped to a patch vertex.
/// Profiles shallower than two voxels fall back to the patch centroid.
pub fn detect_intercondylar_notch(fc: &SurfacePatch, side: KneeSide) -> Result<NotchEstimate> {
    let members = fc.members();
    if members.is_empty() {
        return Err(Error::Empty("femoral cartilage patch".into()));
    }
    let s = fc.parent();
    let pts: Vec<V3> = members.iter().map(|&v| s.vertices[v as usize]).collect();
    let bw = spacing_of(fc);
    let xmin = pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let bin_of = |p: &V3| ((p.x - xmin) / bw).round() as i64;
    let mut low: BTreeMap<i64, f64> = BTreeMap::new();
    for p in &pts {
        let e = low.entry(bin_of(p)).or_insert(f64::INFINITY);
        *e = e.min(p.z);
    }
    let bins: Vec<(i64, f64)> = low.into_iter().collect();
    let n = bins.len();
    let mut left_min = vec![f64::INFINITY; n];
    let mut right_min = vec![f64::INFINITY; n];
    for i in 1..n {
        left_min[i] = left_min[i - 1].min(bins[i - 1].1);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        right_min[i] = right_min[i + 1].min(bins[i + 1].1);
    }
    let depth: Vec<f64> = (0..n)
        .map(|i| (bins[i].1 - left_min[i]).min(bins[i].1 - right_min[i]).max(0.0))
        .map(|d| if d.is_finite() { d } else { 0.0 })
        .collect();
    let best = depth.iter().copied().fold(0.0, f64::max);
    let centroid = pts.iter().sum::<V3>() / pts.len() as f64;
    let snap = |target: V3, pool: &[u32]| -> V3 {
        let key = |v: u32| {
            let p = s.vertices[v as usize];
            ((p - target).norm(), side_key(&p, side), v)
        };
        let v = pool
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let (ka, kb) = (key(a), key(b));
                ka.0.total_cmp(&kb.0).then(cmp_keys(&ka.1, &kb.1)).then(ka.2.cmp(&kb.2))
            })
            .expect("pool is nonempty");
        s.vertices[v as usize]
    };
    let max_spacing = s
        .generator()
        .map(|g| g.geometry.spacing.iter().copied().fold(0.0, f64::max))
        .unwrap_or(bw);
    if best < 2.0 * max_spacing {
        log::warn!("no two-lobed femoral profile (saddle depth {best:.3} mm); notch falls back to the centroid");
        let p = snap(centroid, &members);
        return Ok(NotchEstimate {
            position: [p.x, p.y, p.z],
            fallback: true,
            depth_mm: best,
        });
    }
    // First run of consecutive bins at the maximal depth.
    let deepest: Vec<usize> = (0..n).filter(|&i| depth[i] >= best - 1e-9).collect();
    let mut run = vec![deepest[0]];
    for &i in &deepest[1..] {
        if i == run[run.len() - 1] + 1 && bins[i].0 == bins[i - 1].0 + 1 {
            run.push(i);
        } else {
            break;
        }
    }
    let mid: Vec<usize> = if run.len() % 2 == 1 {
        vec![run[run.len() / 2]]
    } else {
        vec![run[run.len() / 2 - 1], run[run.len() / 2]]
    };
    let mid_bins: Vec<i64> = mid.iter().map(|&i| bins[i].0).collect();
    let floor = mid.iter().map(|&i| bins[i].1).fold(f64::INFINITY, f64::min);
    let lowest: Vec<u32> = members
        .iter()
        .copied()
        .filter(|&v| {
            let p = s.vertices[v as usize];
            mid_bins.contains(&bin_of(&p)) && p.z <= floor + 0.5 * bw
        })
        .collect();
    let c = lowest.iter().map(|&v| s.vertices[v as usize]).sum::<V3>() / lowest.len() as f64;
    let p = snap(c, &members);
    Ok(NotchEstimate {
        position: [p.x, p.y, p.z],
        fallback: false,
        depth_mm: best,
    })
}

/// Splits the femoral plate at the notch into medial and lateral condyles,
/// then into anterior, central and posterior bands, and each central band
/// into three equal-area strips by distance from the notch.
pub fn parcellate_femoral(fc: &SurfacePatch, notch: &[f64; 3], side: KneeSide) -> Result<ParcelPart> {
    let members = fc.members();
    if members.is_empty() {
        return Err(Error::Empty("femoral cartilage patch".into()));
    }
    let s = fc.parent();
    let pts: Vec<V3> = members.iter().map(|&v| s.vertices[v as usize]).collect();
    let lo = pts.iter().fold(V3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = pts.iter().fold(V3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let nv = V3::from(*notch);
    if (0..3).any(|a| nv[a] < lo[a] - 1e-9 || nv[a] > hi[a] + 1e-9) {
        return Err(Error::Geometry(format!(
            "notch {notch:?} lies outside the femoral patch bounding box"
        )));
    }
    let posterior_plane = nv.y - 0.6 * (nv.y - lo.y);
    let ms = side.medial_sign();
    let va = fc.vertex_areas();

    #[derive(Clone, Copy, PartialEq)]
    enum Band {
        A,
        C,
        P,
    }
    let medial: Vec<bool> = pts.iter().map(|p| (p.x - nv.x) * ms >= 0.0).collect();
    let band: Vec<Band> = pts
        .iter()
        .map(|p| {
            if p.y > nv.y {
                Band::A
            } else if p.y < posterior_plane {
                Band::P
            } else {
                Band::C
            }
        })
        .collect();
    let mut regions: Vec<Region> = (0..pts.len())
        .map(|i| match (medial[i], band[i]) {
            (true, Band::A) => Region::AMfc,
            (true, Band::P) => Region::PMfc,
            (false, Band::A) => Region::ALfc,
            (false, Band::P) => Region::PLfc,
            (true, Band::C) => Region::CcMfc,
            (false, Band::C) => Region::CcLfc,
        })
        .collect();
    for (is_medial, strips) in [
        (true, [Region::IcMfc, Region::CcMfc, Region::EcMfc]),
        (false, [Region::IcLfc, Region::CcLfc, Region::EcLfc]),
    ] {
        let mut idx: Vec<usize> = (0..pts.len())
            .filter(|&i| medial[i] == is_medial && band[i] == Band::C)
            .collect();
        let key = |i: usize| {
            let k = side_key(&pts[i], side);
            [(pts[i].x - nv.x).abs(), k[0], k[1], k[2]]
        };
        idx.sort_by(|&a, &b| cmp_keys(&key(a), &key(b)).then(members[a].cmp(&members[b])));
        let total: f64 = idx.iter().map(|&i| va[members[i] as usize]).sum();
        let mut acc = 0.0;
        for &i in &idx {
            let a = va[members[i] as usize];
            let t = if total > 0.0 { 3.0 * (acc + a / 2.0) / total } else { 0.0 };
            regions[i] = strips[(t.floor() as usize).min(2)];
            acc += a;
        }
    }
    Ok(ParcelPart {
        plate: Plate::Fc,
        patch: fc.clone(),
        regions,
    })
}

/// Splits a tibial plate into a central ellipse carrying 20 % of its area
/// and four peripheral quadrants.
///
/// The ellipse is centred on the vertex mean with semi-axes along the two
/// leading principal directions in the ratio `(σ1/σ2)^½`. Quadrants are cut
/// by the diagonals between the principal axes; the axis closer to the y
/// direction separates anterior from posterior, the other exterior from
/// interior, interior facing the other tibial plate.
pub fn parcellate_tibial(tc: &SurfacePatch, side: KneeSide, plate: Plate) -> Result<ParcelPart> {
    let names = match plate {
        Plate::Mtc => [Region::CMtc, Region::AMtc, Region::PMtc, Region::EMtc, Region::IMtc],
        Plate::Ltc => [Region::CLtc, Region::ALtc, Region::PLtc, Region::ELtc, Region::ILtc],
        Plate::Fc => return Err(Error::invalid("tibial parcellation needs a tibial plate")),
    };
    let members = tc.members();
    if members.len() < 20 {
        return Err(Error::invalid(format!(
            "tibial patch has {} vertices; at least 20 are needed",
            members.len()
        )));
    }
    let s = tc.parent();
    let pts: Vec<V3> = members.iter().map(|&v| s.vertices[v as usize]).collect();
    let c = pts.iter().sum::<V3>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> V3 { eig.eigenvectors.column(order[k]).into_owned() };
    // Singular values of the centred position matrix are the square roots
    // of the scatter eigenvalues.
    let sigma = |k: usize| eig.eigenvalues[order[k]].max(0.0).sqrt();
    let (mut e1, mut e2) = (axis(0), axis(1));
    let (d1, d2) = (sigma(0).sqrt(), sigma(1).sqrt());
    if d2 <= 0.0 {
        return Err(Error::Geometry("tibial patch is degenerate (collinear)".into()));
    }

    let ms = side.medial_sign();
    let interior_x = match plate {
        Plate::Mtc => -ms,
        _ => ms,
    };
    let (mut ap, mut ml) = if e1.y.abs() >= e2.y.abs() { (e1, e2) } else { (e2, e1) };
    if ap.y < 0.0 {
        ap = -ap;
    }
    if ml.x * interior_x < 0.0 {
        ml = -ml;
    }
    // Keep e1/e2 signs consistent with the oriented axes for reporting.
    if e1.y.abs() >= e2.y.abs() {
        e1 = ap;
        e2 = ml;
    } else {
        e1 = ml;
        e2 = ap;
    }

    let va = tc.vertex_areas();
    let total: f64 = members.iter().map(|&v| va[v as usize]).sum();
    let r: Vec<f64> = pts
        .iter()
        .map(|p| {
            let d = p - c;
            ((d.dot(&e1) / d1).powi(2) + (d.dot(&e2) / d2).powi(2)).sqrt()
        })
        .collect();
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    let key = |i: usize| {
        let k = side_key(&pts[i], side);
        [r[i], k[0], k[1], k[2]]
    };
    idx.sort_by(|&a, &b| cmp_keys(&key(a), &key(b)).then(members[a].cmp(&members[b])));
    let target = 0.2 * total;
    let (mut acc, mut best_k, mut best_err) = (0.0, 0usize, target);
    for (k, &i) in idx.iter().enumerate() {
        acc += va[members[i] as usize];
        let err = (acc - target).abs();
        if err < best_err {
            best_err = err;
            best_k = k + 1;
        }
    }
    let mut central = vec![false; pts.len()];
    for &i in &idx[..best_k] {
        central[i] = true;
    }
    let regions = (0..pts.len())
        .map(|i| {
            if central[i] {
                return names[0];
            }
            let d = pts[i] - c;
            let (a, m) = (d.dot(&ap), d.dot(&ml));
            if a.abs() >= m.abs() {
                if a >= 0.0 {
                    names[1]
                } else {
                    names[2]
                }
            } else if m >= 0.0 {
                names[4]
            } else {
                names[3]
            }
        })
        .collect();
    Ok(ParcelPart {
        plate,
        patch: tc.clone(),
        regions,
    })
}

/// Labels every cartilage voxel with the region of the nearest labelled
/// vertex; equidistant vertices resolve to the smallest region code.
pub fn labels_to_volume(p: &SurfaceParcellation, cart: &BinaryMask) -> Result<LabelVolume> {
    let mut pts = Vec::new();
    let mut codes = Vec::new();
    for part in &p.parts {
        let s = part.patch.parent();
        for (v, r) in part.patch.members().into_iter().zip(&part.regions) {
            pts.push(s.vertices[v as usize]);
            codes.push(r.code());
        }
    }
    if pts.is_empty() {
        return Err(Error::Empty("surface parcellation".into()));
    }
    let g = &cart.geometry;
    let index = PointIndex::new(pts, 2.0 * g.voxel_diagonal());
    let mut out = Volume::filled(g.clone(), 0u16);
    for i in cart.indices().collect::<Vec<_>>() {
        let q = g.voxel_center(i);
        let near = index.k_nearest(&q, 8);
        let d0 = near[0].1;
        let code = near
            .iter()
            .take_while(|(_, d)| *d <= d0 + 1e-9)
            .map(|&(id, _)| codes[id as usize])
            .min()
            .expect("nonempty neighbour list");
        out.data[i] = code;
    }
    LabelVolume::new(out, Region::schema())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, Phantom, PhantomKind, PhantomSpec};
    use crate::surface::{mesh_from_mask, patch_from_voxels, Surface};
    use crate::volume::Geometry;
    use std::sync::Arc;

    fn plate_patch(ph: &Phantom) -> SurfacePatch {
        let mesh = Arc::new(mesh_from_mask(&ph.bone()).unwrap());
        patch_from_voxels(&mesh, &ph.cart()).unwrap()
    }

    fn mirror_x(m: &BinaryMask) -> BinaryMask {
        let d = m.dims();
        let mut out = m.clone();
        for i in 0..d[0] {
            for j in 0..d[1] {
                for k in 0..d[2] {
                    out.set(d[0] - 1 - i, j, k, m.get(i, j, k));
                }
            }
        }
        out
    }

    #[test]
    fn region_codes() {
        assert_eq!(Region::AMfc.code(), 1);
        assert_eq!(Region::CLtc.code(), 20);
        assert_eq!(Region::from_code(14), Some(Region::IMtc));
        assert_eq!(Region::from_code(0), None);
        assert_eq!(Region::from_code(21), None);
        assert_eq!(Region::IcLfc.name(), "icLFC");
        assert_eq!(Region::from_name("eMTC"), Some(Region::EMtc));
        assert_eq!(serde_json::to_string(&Region::CcMfc).unwrap(), "\"ccMFC\"");
        for r in Region::ALL {
            assert_eq!(Region::from_code(r.code()), Some(r));
        }
        assert_eq!(Region::schema().0.len(), 20);
    }

    #[test]
    fn notch_on_two_lobes() {
        let ph = generate(&PhantomSpec::new(PhantomKind::TwoLobeFc), 0).unwrap();
        let fc = plate_patch(&ph);
        let n = detect_intercondylar_notch(&fc, KneeSide::Right).unwrap();
        assert!(!n.fallback);
        let truth = V3::from(ph.truth.notch_mm.unwrap());
        let got = V3::from(n.position);
        assert!((got - truth).norm() <= 2.0, "{got:?} vs {truth:?}");
        // Symmetry plane.
        assert_eq!(got.x, truth.x);
    }

    #[test]
    fn notch_fallback_on_single_lobe() {
        let ph = generate(&PhantomSpec::new(PhantomKind::Slab), 0).unwrap();
        let n = detect_intercondylar_notch(&plate_patch(&ph), KneeSide::Right).unwrap();
        assert!(n.fallback);
        let mesh = Arc::new(Surface::from_triangles(vec![], vec![]).unwrap());
        assert!(detect_intercondylar_notch(&SurfacePatch::empty(&mesh), KneeSide::Right).is_err());
    }

    #[test]
    fn femoral_regions() {
        let ph = generate(&PhantomSpec::new(PhantomKind::TwoLobeFc), 0).unwrap();
        let fc = plate_patch(&ph);
        let n = detect_intercondylar_notch(&fc, KneeSide::Right).unwrap();
        let part = parcellate_femoral(&fc, &n.position, KneeSide::Right).unwrap();
        assert_eq!(part.regions.len(), fc.len());
        let areas = part.vertex_carried_areas();
        assert_eq!(areas.len(), 10);
        assert!(areas.keys().all(|r| r.plate() == Plate::Fc));
        for strips in [
            [Region::EcMfc, Region::CcMfc, Region::IcMfc],
            [Region::EcLfc, Region::CcLfc, Region::IcLfc],
        ] {
            let a = strips.map(|r| areas[&r]);
            let (mn, mx) = (a.iter().copied().fold(f64::INFINITY, f64::min), a.iter().copied().fold(0.0, f64::max));
            assert!((mx - mn) / mx <= 0.05, "{a:?}");
        }
        let med: f64 = areas.iter().filter(|(r, _)| r.code() <= 5).map(|(_, a)| a).sum();
        let lat: f64 = areas.iter().filter(|(r, _)| (6..=10).contains(&r.code())).map(|(_, a)| a).sum();
        assert!((med - lat).abs() / med.max(lat) <= 0.02, "{med} vs {lat}");
        // Right knee: medial toward −x.
        let dense = part.dense();
        let s = fc.parent();
        for v in fc.members() {
            let r = dense[v as usize].unwrap();
            let x = s.vertices[v as usize].x - n.position[0];
            if x < 0.0 {
                assert!(r.code() <= 5);
            } else if x > 0.0 {
                assert!(r.code() >= 6);
            }
        }
        assert!(parcellate_femoral(&fc, &[1e6, 0.0, 0.0], KneeSide::Right).is_err());
    }

    #[test]
    fn posterior_plane_at_sixty_percent() {
        // Notch at y = 0, posterior end at y = −50: plane at y = −30.
        let verts: Vec<V3> = (0..=10)
            .flat_map(|i| (0..=10).map(move |j| V3::new(i as f64 * 2.0, -50.0 + j as f64 * 5.0, 0.0)))
            .collect();
        let mut faces = Vec::new();
        for i in 0..10u32 {
            for j in 0..10u32 {
                let a = i * 11 + j;
                faces.push([a, a + 11, a + 12]);
                faces.push([a, a + 12, a + 1]);
            }
        }
        let s = Arc::new(Surface::from_triangles(verts, faces).unwrap());
        let part = parcellate_femoral(&SurfacePatch::full(&s), &[10.0, 0.0, 0.0], KneeSide::Right).unwrap();
        let dense = part.dense();
        for (p, r) in s.vertices.iter().zip(&dense) {
            let y = p.y;
            let r = r.unwrap();
            let posterior = matches!(r, Region::PMfc | Region::PLfc);
            assert_eq!(posterior, y < -30.0, "y={y} {r}");
        }
    }

    #[test]
    fn tibial_disc_central_fraction() {
        let ph = generate(&PhantomSpec::new(PhantomKind::TibialDisc), 0).unwrap();
        let tc = plate_patch(&ph);
        let part = parcellate_tibial(&tc, KneeSide::Right, Plate::Mtc).unwrap();
        let areas = part.vertex_carried_areas();
        let total: f64 = areas.values().sum();
        assert!((total - tc.area()).abs() < 1e-9);
        let frac = areas[&Region::CMtc] / total;
        assert!((frac - 0.2).abs() <= 0.005, "{frac}");
        assert_eq!(areas.len(), 5);
        // Concentric: the central vertices' centroid sits at the disc centre.
        let s = tc.parent();
        let cen = part.region_patch(Region::CMtc).members();
        let cc = cen.iter().map(|&v| s.vertices[v as usize]).sum::<V3>() / cen.len() as f64;
        let all = tc.members();
        let ac = all.iter().map(|&v| s.vertices[v as usize]).sum::<V3>() / all.len() as f64;
        assert!((cc - ac).xy().norm() < 0.5);
        assert!(parcellate_tibial(&tc, KneeSide::Right, Plate::Fc).is_err());
    }

    #[test]
    fn circular_disc_has_circular_centre() {
        let mut spec = PhantomSpec::new(PhantomKind::TibialDisc);
        spec.dims = [30, 30, 6];
        let ph = generate(&spec, 0).unwrap();
        let tc = plate_patch(&ph);
        let part = parcellate_tibial(&tc, KneeSide::Right, Plate::Ltc).unwrap();
        let s = tc.parent();
        let cen = part.region_patch(Region::CLtc).members();
        let c = tc.members().iter().map(|&v| s.vertices[v as usize]).sum::<V3>() / tc.len() as f64;
        let ext = |f: fn(&V3) -> f64| cen.iter().map(|&v| f(&(s.vertices[v as usize] - c)).abs()).fold(0.0, f64::max);
        assert!((ext(|d| d.x) - ext(|d| d.y)).abs() <= 1.0);
    }

    #[test]
    fn small_tibial_patch_rejected() {
        let ph = generate(&PhantomSpec::new(PhantomKind::TibialDisc), 0).unwrap();
        let tc = plate_patch(&ph);
        let few = SurfacePatch::from_vertices(tc.parent(), tc.members().into_iter().take(19)).unwrap();
        assert!(parcellate_tibial(&few, KneeSide::Right, Plate::Mtc).is_err());
    }

    #[test]
    fn side_flip_swaps_exterior_and_interior() {
        let ph = generate(&PhantomSpec::new(PhantomKind::TibialDisc), 0).unwrap();
        let tc = plate_patch(&ph);
        let r = parcellate_tibial(&tc, KneeSide::Right, Plate::Mtc).unwrap();
        let l = parcellate_tibial(&tc, KneeSide::Left, Plate::Mtc).unwrap();
        for (a, b) in r.regions.iter().zip(&l.regions) {
            let swapped = match a {
                Region::EMtc => Region::IMtc,
                Region::IMtc => Region::EMtc,
                x => *x,
            };
            assert_eq!(swapped, *b);
        }
    }

    /// Mirrors a phantom's masks, flips the side, and checks that every
    /// vertex keeps its region through the mirror map.
    #[test]
    fn mirror_consistency() {
        let ph = generate(&PhantomSpec::new(PhantomKind::TwoLobeFc), 0).unwrap();
        let run = |cart: &BinaryMask, bone: &BinaryMask, side| {
            let mesh = Arc::new(mesh_from_mask(bone).unwrap());
            let fc = patch_from_voxels(&mesh, cart).unwrap();
            let n = detect_intercondylar_notch(&fc, side).unwrap();
            parcellate_femoral(&fc, &n.position, side).unwrap()
        };
        let a = run(&ph.cart(), &ph.bone(), KneeSide::Right);
        let b = run(&mirror_x(&ph.cart()), &mirror_x(&ph.bone()), KneeSide::Left);
        check_mirrored(&a, &b, &ph.cart().geometry);

        let ph = generate(&PhantomSpec::new(PhantomKind::TibialDisc), 0).unwrap();
        let run = |cart: &BinaryMask, bone: &BinaryMask, side| {
            let mesh = Arc::new(mesh_from_mask(bone).unwrap());
            parcellate_tibial(&patch_from_voxels(&mesh, cart).unwrap(), side, Plate::Mtc).unwrap()
        };
        let a = run(&ph.cart(), &ph.bone(), KneeSide::Right);
        let b = run(&mirror_x(&ph.cart()), &mirror_x(&ph.bone()), KneeSide::Left);
        check_mirrored(&a, &b, &ph.cart().geometry);
    }

    fn check_mirrored(a: &ParcelPart, b: &ParcelPart, g: &Geometry) {
        let width = g.dims[0] as f64 * g.spacing[0];
        // Corner x maps to (width − spacing) − x under the index flip.
        let flip = width - g.spacing[0] + 2.0 * g.origin[0];
        let sb = b.patch.parent();
        let index = PointIndex::new(b.patch.members().iter().map(|&v| sb.vertices[v as usize]).collect(), 2.0);
        let bm = b.patch.members();
        let sa = a.patch.parent();
        assert_eq!(a.patch.len(), b.patch.len());
        let mut mismatched = 0;
        for (v, r) in a.patch.members().into_iter().zip(&a.regions) {
            let p = sa.vertices[v as usize];
            let q = V3::new(flip - p.x, p.y, p.z);
            let (id, d) = index.nearest(&q).unwrap();
            assert!(d < 1e-9);
            let w = bm[id as usize];
            let rb = b.regions[bm.iter().position(|&x| x == w).unwrap()];
            if rb != *r {
                mismatched += 1;
            }
        }
        assert_eq!(mismatched, 0);
    }

    #[test]
    fn labels_to_volume_halves() {
        let ph = generate(&PhantomSpec::new(PhantomKind::Slab), 0).unwrap();
        let tc = plate_patch(&ph);
        let s = tc.parent();
        let mid = 22.0;
        let regions = tc
            .members()
            .into_iter()
            .map(|v| if s.vertices[v as usize].x < mid { Region::AMtc } else { Region::PMtc })
            .collect();
        let p = SurfaceParcellation {
            side: KneeSide::Right,
            parts: vec![ParcelPart {
                plate: Plate::Mtc,
                patch: tc.clone(),
                regions,
            }],
        };
        let cart = ph.cart();
        let vol = labels_to_volume(&p, &cart).unwrap();
        let g = cart.geometry.clone();
        for i in cart.indices() {
            let code = vol.labels.data[i];
            assert!(code == Region::AMtc.code() || code == Region::PMtc.code());
            let x = g.voxel_center(i).x;
            if x < mid - 1.0 {
                assert_eq!(code, Region::AMtc.code());
            }
            if x > mid + 1.0 {
                assert_eq!(code, Region::PMtc.code());
            }
        }
        assert!(vol.labels.data.iter().zip(&cart.data).all(|(&c, &m)| (c != 0) == m));
        let empty = SurfaceParcellation {
            side: KneeSide::Right,
            parts: vec![],
        };
        assert!(labels_to_volume(&empty, &cart).is_err());
    }
}
