//! Synthetic knee-like label volumes with ground truth known by construction.
//!
//! Every phantom places bone and cartilage on an axis-aligned grid with a
//! background margin. Ground-truth values are counted while the voxels are
//! written and never come from the measurement code.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{save_labels, BinaryMask, Geometry, KneeSide, LabelSchema, LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Flat cartilage layer on a bone block.
    Slab,
    /// Slab with a full-thickness punched defect.
    CuboidDefect,
    /// Cartilage cap over the top and upper side walls of a bone block.
    Shell,
    /// Two femoral condyles bridged superiorly, cartilage underneath and on
    /// the anterior half of the bridge.
    TwoLobeFc,
    /// Elliptical tibial plateau with a cartilage disc on top.
    TibialDisc,
    /// Two-lobe femur above a tibia carrying medial and lateral discs.
    Knee,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    /// Share of the cartilage footprint area to denude, in (0, 1).
    pub fraction: f64,
    /// Lower corner of the defect in footprint cells; random when absent.
    #[serde(default)]
    pub location: Option<[usize; 2]>,
    /// Rotate the defect by a seeded angle in [15°, 75°).
    #[serde(default)]
    pub rotated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// Body bounding box in voxels. For the slab family and discs this is
    /// bone plus cartilage; for the femoral lobes it is the bone only, with
    /// `dims[1]` the condyle diameter.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub defect: Option<DefectSpec>,
    pub thickness_mm: f64,
    /// Width of the intercondylar gap in voxels (femoral kinds).
    #[serde(default = "default_notch_width")]
    pub notch_width: usize,
    #[serde(default)]
    pub side: KneeSide,
}

fn default_notch_width() -> usize {
    6
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind) -> Self {
        let (dims, thickness_mm, defect) = match kind {
            PhantomKind::Slab => ([40, 40, 10], 3.0, None),
            PhantomKind::CuboidDefect => (
                [40, 40, 10],
                3.0,
                Some(DefectSpec {
                    fraction: 0.2,
                    location: None,
                    rotated: false,
                }),
            ),
            PhantomKind::Shell => ([30, 30, 10], 3.0, None),
            PhantomKind::TwoLobeFc | PhantomKind::Knee => ([34, 20, 16], 2.0, None),
            PhantomKind::TibialDisc => ([36, 24, 8], 2.0, None),
        };
        PhantomSpec {
            kind,
            dims,
            spacing: [1.0; 3],
            defect,
            thickness_mm,
            notch_width: default_notch_width(),
            side: KneeSide::Right,
        }
    }

    pub fn with_defect(mut self, fraction: f64) -> Self {
        self.defect = Some(DefectSpec {
            fraction,
            location: None,
            rotated: false,
        });
        self
    }

    fn layers(&self) -> usize {
        (self.thickness_mm / self.spacing[2]).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid("phantom spacing must be positive"));
        }
        if !(self.thickness_mm.is_finite() && self.thickness_mm > 0.0) {
            return Err(Error::invalid("phantom thickness must be positive"));
        }
        if self.dims.contains(&0) {
            return Err(Error::invalid("phantom dims must be positive"));
        }
        if let Some(d) = &self.defect {
            if !(d.fraction > 0.0 && d.fraction < 1.0) {
                return Err(Error::invalid(format!(
                    "defect fraction {} is outside (0, 1)",
                    d.fraction
                )));
            }
            if matches!(self.kind, PhantomKind::Slab | PhantomKind::TwoLobeFc) {
                return Err(Error::invalid(format!("{:?} phantoms take no defect", self.kind)));
            }
        } else if self.kind == PhantomKind::CuboidDefect {
            return Err(Error::invalid("cuboid_defect phantom needs a defect"));
        }
        let h = self.layers();
        if h == 0 {
            return Err(Error::invalid("cartilage thinner than half a voxel"));
        }
        match self.kind {
            PhantomKind::Slab | PhantomKind::CuboidDefect | PhantomKind::Shell | PhantomKind::TibialDisc => {
                if h >= self.dims[2] {
                    return Err(Error::invalid("cartilage layers leave no bone in the body"));
                }
            }
            PhantomKind::TwoLobeFc | PhantomKind::Knee => {
                let [w, d, hgt] = self.dims;
                let g = self.notch_width;
                if d % 2 != 0 || d < 4 {
                    return Err(Error::invalid("condyle diameter dims[1] must be even and ≥ 4"));
                }
                if hgt <= d / 2 {
                    return Err(Error::invalid("dims[2] must exceed the condyle radius"));
                }
                if g < 2 || !g.is_multiple_of(2) || w <= g + 4 || !(w - g).is_multiple_of(2) {
                    return Err(Error::invalid(
                        "notch width must be even and leave two equal condyles of width ≥ 2",
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectTruth {
    pub cells: usize,
    /// Bounding box lower corner and size in footprint cells.
    pub corner: [usize; 2],
    pub size: [usize; 2],
    pub angle_deg: f64,
}

/// Values fixed by the construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    /// Cartilage height normal to the bone, `layers × spacing`.
    pub thickness_mm: f64,
    pub denuded_fraction: f64,
    /// Bone area the intact cartilage covers, where it is flat enough to
    /// count exactly.
    pub footprint_area_mm2: Option<f64>,
    pub defect: Option<DefectTruth>,
    pub region_areas_mm2: BTreeMap<String, f64>,
    /// World position of the intercondylar notch (femoral kinds).
    pub notch_mm: Option<[f64; 3]>,
    pub side: KneeSide,
}

/// A generated subject: label map, its defect-free template, and truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub labels: LabelVolume,
    pub template: LabelVolume,
    pub truth: PhantomTruth,
    /// Cartilage and bone label of the compartment the truth refers to.
    pub cart_label: u16,
    pub bone_label: u16,
}

impl Phantom {
    pub fn cart(&self) -> BinaryMask {
        self.labels.mask(self.cart_label)
    }

    pub fn bone(&self) -> BinaryMask {
        self.labels.mask(self.bone_label)
    }

    pub fn intact_cart(&self) -> BinaryMask {
        self.template.mask(self.cart_label)
    }

    /// Voxels removed by the defect.
    pub fn defect_mask(&self) -> BinaryMask {
        self.intact_cart().difference(&self.cart())
    }

    /// Writes `labels.nii.gz`, `template.nii.gz` and `truth.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_labels(dir.join("labels.nii.gz"), &self.labels)?;
        save_labels(dir.join("template.nii.gz"), &self.template)?;
        let doc = serde_json::json!({
            "spec": self.spec,
            "seed": self.seed,
            "truth": self.truth,
        });
        let path = dir.join("truth.json");
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

struct Canvas {
    labels: Volume<u16>,
}

impl Canvas {
    fn new(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Canvas {
            labels: Volume::filled(Geometry::axis_aligned(dims, spacing), 0),
        }
    }

    fn fill_box(&mut self, lo: [usize; 3], hi: [usize; 3], label: u16) {
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    self.labels.set(i, j, k, label);
                }
            }
        }
    }

    fn finish(self) -> Result<LabelVolume> {
        LabelVolume::new(self.labels, LabelSchema::knee_default())
    }
}

/// Footprint cells `(i, j)` a defect may occupy, and how it is cut into the
/// cartilage column `k_lo..k_hi` above each cell.
struct Punch<'a> {
    cells: &'a HashSet<(usize, usize)>,
    k_lo: usize,
    k_hi: usize,
    /// Number of cells to remove.
    target: usize,
}

fn rect_size(target: usize, max: [usize; 2]) -> [usize; 2] {
    let mut best = [1, 1];
    let mut key = (usize::MAX, usize::MAX);
    for a in 1..=max[0] {
        for b in 1..=max[1] {
            let k = ((a * b).abs_diff(target), a.abs_diff(b));
            if k < key {
                key = k;
                best = [a, b];
            }
        }
    }
    best
}

fn punch(
    canvas: &mut Canvas,
    label: u16,
    p: &Punch,
    spec: &DefectSpec,
    rng: &mut ChaCha8Rng,
) -> Result<DefectTruth> {
    let lo = [
        p.cells.iter().map(|c| c.0).min().unwrap_or(0),
        p.cells.iter().map(|c| c.1).min().unwrap_or(0),
    ];
    let hi = [
        p.cells.iter().map(|c| c.0).max().map_or(0, |x| x + 1),
        p.cells.iter().map(|c| c.1).max().map_or(0, |x| x + 1),
    ];
    let size = rect_size(p.target, [hi[0] - lo[0], hi[1] - lo[1]]);
    let angle = if spec.rotated {
        rng.random_range(15.0..75.0f64)
    } else {
        0.0
    };
    let (sin, cos) = angle.to_radians().sin_cos();
    let half = [size[0] as f64 / 2.0, size[1] as f64 / 2.0];
    let ext = [
        cos.abs() * half[0] + sin.abs() * half[1],
        sin.abs() * half[0] + cos.abs() * half[1],
    ];

    // Cells whose centres fall inside the (rotated) rectangle centred at c.
    let shape = |c: [f64; 2]| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let i0 = (c[0] - ext[0] - 1.0).floor().max(0.0) as usize;
        let j0 = (c[1] - ext[1] - 1.0).floor().max(0.0) as usize;
        for i in i0..(c[0] + ext[0] + 1.0).ceil() as usize {
            for j in j0..(c[1] + ext[1] + 1.0).ceil() as usize {
                let d = [i as f64 + 0.5 - c[0], j as f64 + 0.5 - c[1]];
                let u = cos * d[0] + sin * d[1];
                let v = -sin * d[0] + cos * d[1];
                if u.abs() < half[0] && v.abs() < half[1] {
                    out.push((i, j));
                }
            }
        }
        out
    };
    let fits = |cells: &[(usize, usize)], margin: usize| {
        !cells.is_empty()
            && cells.iter().all(|&(i, j)| {
                (i.saturating_sub(margin)..=i + margin)
                    .all(|a| (j.saturating_sub(margin)..=j + margin).all(|b| p.cells.contains(&(a, b))))
            })
    };

    let chosen = if let Some(loc) = spec.location {
        let c = [(lo[0] + loc[0]) as f64 + ext[0], (lo[1] + loc[1]) as f64 + ext[1]];
        let cells = shape(c);
        if !fits(&cells, 0) {
            return Err(Error::invalid("defect location does not fit the cartilage footprint"));
        }
        cells
    } else {
        let mut found = None;
        'search: for margin in [2usize, 0] {
            for _ in 0..2000 {
                let mut span = |a: usize, b: usize, e: f64| {
                    let (l, h) = (a as f64 + e, b as f64 - e);
                    if l > h {
                        None
                    } else if l == h {
                        Some(l)
                    } else {
                        Some(l + (h - l) * rng.random::<f64>())
                    }
                };
                let (Some(cx), Some(cy)) = (span(lo[0], hi[0], ext[0]), span(lo[1], hi[1], ext[1])) else {
                    break;
                };
                // Integer-sized axis-aligned defects sit on the cell lattice.
                let c = if spec.rotated {
                    [cx, cy]
                } else {
                    [(cx - half[0]).round() + half[0], (cy - half[1]).round() + half[1]]
                };
                let cells = shape(c);
                if fits(&cells, margin) {
                    found = Some(cells);
                    break 'search;
                }
            }
        }
        found.ok_or_else(|| Error::invalid("phantom dims do not fit the requested defect"))?
    };

    for &(i, j) in &chosen {
        for k in p.k_lo..p.k_hi {
            if canvas.labels.get(i, j, k) == label {
                canvas.labels.set(i, j, k, 0);
            }
        }
    }
    let corner = [
        chosen.iter().map(|c| c.0).min().unwrap(),
        chosen.iter().map(|c| c.1).min().unwrap(),
    ];
    let far = [
        chosen.iter().map(|c| c.0).max().unwrap() + 1,
        chosen.iter().map(|c| c.1).max().unwrap() + 1,
    ];
    Ok(DefectTruth {
        cells: chosen.len(),
        corner,
        size: [far[0] - corner[0], far[1] - corner[1]],
        angle_deg: angle,
    })
}

/// Generates the phantom for `spec`; identical `(spec, seed)` give identical
/// volumes.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec.kind {
        PhantomKind::Slab | PhantomKind::CuboidDefect => slab(spec, seed, &mut rng),
        PhantomKind::Shell => shell(spec, seed, &mut rng),
        PhantomKind::TibialDisc => disc(spec, seed, &mut rng),
        PhantomKind::TwoLobeFc | PhantomKind::Knee => lobes(spec, seed, &mut rng),
    }
}

const MARGIN: usize = 2;

fn slab(spec: &PhantomSpec, seed: u64, rng: &mut ChaCha8Rng) -> Result<Phantom> {
    let [w, d, z] = spec.dims;
    let h = spec.layers();
    let s = spec.spacing;
    let m = MARGIN;
    let mut c = Canvas::new([w + 2 * m, d + 2 * m, z + 2 * m], s);
    let (bone, cart) = (LabelSchema::TIBIA, LabelSchema::MEDIAL_TIBIAL_CARTILAGE);
    let top = m + z - h;
    c.fill_box([m, m, m], [m + w, m + d, top], bone);
    c.fill_box([m, m, top], [m + w, m + d, m + z], cart);
    let template = c.labels.clone();
    let cell_area = s[0] * s[1];
    let mut truth = PhantomTruth {
        thickness_mm: h as f64 * s[2],
        denuded_fraction: 0.0,
        footprint_area_mm2: Some((w * d) as f64 * cell_area),
        defect: None,
        region_areas_mm2: BTreeMap::new(),
        notch_mm: None,
        side: spec.side,
    };
    if let Some(ds) = &spec.defect {
        let cells: HashSet<_> = (m..m + w).flat_map(|i| (m..m + d).map(move |j| (i, j))).collect();
        let target = (ds.fraction * (w * d) as f64).round().max(1.0) as usize;
        let p = Punch {
            cells: &cells,
            k_lo: top,
            k_hi: m + z,
            target,
        };
        let dt = punch(&mut c, cart, &p, ds, rng)?;
        truth.denuded_fraction = dt.cells as f64 / (w * d) as f64;
        truth.defect = Some(dt);
    }
    Ok(Phantom {
        spec: spec.clone(),
        seed,
        labels: c.finish()?,
        template: LabelVolume::new(template, LabelSchema::knee_default())?,
        truth,
        cart_label: cart,
        bone_label: bone,
    })
}

fn shell(spec: &PhantomSpec, seed: u64, rng: &mut ChaCha8Rng) -> Result<Phantom> {
    let [w, d, z] = spec.dims;
    let h = spec.layers();
    let s = spec.spacing;
    // Side collars are as thick as the cap, measured along x and y.
    let hx = ((spec.thickness_mm / s[0]).round() as usize).max(1);
    let hy = ((spec.thickness_mm / s[1]).round() as usize).max(1);
    let m = MARGIN + hx.max(hy);
    let mut c = Canvas::new([w + 2 * m, d + 2 * m, z + 2 * m], s);
    let (bone, cart) = (LabelSchema::TIBIA, LabelSchema::MEDIAL_TIBIAL_CARTILAGE);
    let top = m + z - h;
    let collar = top - h;
    c.fill_box([m - hx, m - hy, collar], [m + w + hx, m + d + hy, m + z], cart);
    c.fill_box([m, m, m], [m + w, m + d, top], bone);
    // The collar wraps the block sides only; its outer corners stay empty.
    for (i0, i1) in [(m - hx, m), (m + w, m + w + hx)] {
        for (j0, j1) in [(m - hy, m), (m + d, m + d + hy)] {
            c.fill_box([i0, j0, collar], [i1, j1, top], 0);
        }
    }
    let template = c.labels.clone();
    let top_area = (w * d) as f64 * s[0] * s[1];
    let side_area = 2.0 * (w as f64 * s[0] + d as f64 * s[1]) * h as f64 * s[2];
    let footprint = top_area + side_area;
    let mut truth = PhantomTruth {
        thickness_mm: h as f64 * s[2],
        denuded_fraction: 0.0,
        footprint_area_mm2: Some(footprint),
        defect: None,
        region_areas_mm2: BTreeMap::new(),
        notch_mm: None,
        side: spec.side,
    };
    if let Some(ds) = &spec.defect {
        let cells: HashSet<_> = (m..m + w).flat_map(|i| (m..m + d).map(move |j| (i, j))).collect();
        let target = (ds.fraction * footprint / (s[0] * s[1])).round().max(1.0) as usize;
        let p = Punch {
            cells: &cells,
            k_lo: top,
            k_hi: m + z,
            target,
        };
        let dt = punch(&mut c, cart, &p, ds, rng)?;
        truth.denuded_fraction = dt.cells as f64 * s[0] * s[1] / footprint;
        truth.defect = Some(dt);
    }
    Ok(Phantom {
        spec: spec.clone(),
        seed,
        labels: c.finish()?,
        template: LabelVolume::new(template, LabelSchema::knee_default())?,
        truth,
        cart_label: cart,
        bone_label: bone,
    })
}

/// Cells of an ellipse inscribed in the `w × d` box at `(i0, j0)`.
fn ellipse_cells(i0: usize, j0: usize, w: usize, d: usize) -> HashSet<(usize, usize)> {
    let (a, b) = (w as f64 / 2.0, d as f64 / 2.0);
    let (ci, cj) = (i0 as f64 + a - 0.5, j0 as f64 + b - 0.5);
    let mut out = HashSet::new();
    for i in i0..i0 + w {
        for j in j0..j0 + d {
            let (u, v) = ((i as f64 - ci) / a, (j as f64 - cj) / b);
            if u * u + v * v <= 1.0 {
                out.insert((i, j));
            }
        }
    }
    out
}

fn disc(spec: &PhantomSpec, seed: u64, rng: &mut ChaCha8Rng) -> Result<Phantom> {
    let [w, d, z] = spec.dims;
    let h = spec.layers();
    let s = spec.spacing;
    let m = MARGIN;
    let mut c = Canvas::new([w + 2 * m, d + 2 * m, z + 2 * m], s);
    let (bone, cart) = (LabelSchema::TIBIA, LabelSchema::MEDIAL_TIBIAL_CARTILAGE);
    let top = m + z - h;
    let cells = ellipse_cells(m, m, w, d);
    for &(i, j) in &cells {
        c.fill_box([i, j, m], [i + 1, j + 1, top], bone);
        c.fill_box([i, j, top], [i + 1, j + 1, m + z], cart);
    }
    let template = c.labels.clone();
    let area = cells.len() as f64 * s[0] * s[1];
    let mut truth = PhantomTruth {
        thickness_mm: h as f64 * s[2],
        denuded_fraction: 0.0,
        footprint_area_mm2: Some(area),
        defect: None,
        region_areas_mm2: BTreeMap::from([("central".to_string(), 0.2 * area)]),
        notch_mm: None,
        side: spec.side,
    };
    if let Some(ds) = &spec.defect {
        let target = (ds.fraction * cells.len() as f64).round().max(1.0) as usize;
        let p = Punch {
            cells: &cells,
            k_lo: top,
            k_hi: m + z,
            target,
        };
        let dt = punch(&mut c, cart, &p, ds, rng)?;
        truth.denuded_fraction = dt.cells as f64 / cells.len() as f64;
        truth.defect = Some(dt);
    }
    Ok(Phantom {
        spec: spec.clone(),
        seed,
        labels: c.finish()?,
        template: LabelVolume::new(template, LabelSchema::knee_default())?,
        truth,
        cart_label: cart,
        bone_label: bone,
    })
}

/// Offsets within `radius_mm` of the origin, excluding it.
fn ball(radius_mm: f64, s: [f64; 3]) -> Vec<[i64; 3]> {
    let r = [0, 1, 2].map(|a| (radius_mm / s[a]).floor() as i64);
    let mut out = Vec::new();
    for a in -r[0]..=r[0] {
        for b in -r[1]..=r[1] {
            for c in -r[2]..=r[2] {
                let d2 = (a as f64 * s[0]).powi(2) + (b as f64 * s[1]).powi(2) + (c as f64 * s[2]).powi(2);
                if d2 > 0.0 && d2 <= radius_mm * radius_mm + 1e-9 {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

fn lobes(spec: &PhantomSpec, seed: u64, rng: &mut ChaCha8Rng) -> Result<Phantom> {
    let [w, d, hgt] = spec.dims;
    let s = spec.spacing;
    let g = spec.notch_width;
    let r = d / 2;
    let wc = (w - g) / 2;
    let h = spec.layers();
    let reach = [0, 1, 2].map(|a| (spec.thickness_mm / s[a]).ceil() as usize);
    let m = MARGIN + reach.iter().max().copied().unwrap_or(1);
    let knee = spec.kind == PhantomKind::Knee;
    // Tibia: 4 bone rows, h cartilage rows, then a 2-voxel joint space.
    let tib_rows = if knee { 4 + h + 2 } else { 0 };
    let (x0, y0) = (m, m);
    let z0 = m + tib_rows + if knee { reach[2] } else { 0 };
    let dims = [w + 2 * m, d + 2 * m, z0 + hgt + m];
    let mut c = Canvas::new(dims, s);
    let gap = x0 + wc..x0 + wc + g;
    let yc = y0 as f64 + r as f64 - 0.5;
    let zc = z0 as f64 + r as f64 - 0.5;
    let rr = (r * r) as f64;

    let is_bone = |i: usize, j: usize, k: usize| -> bool {
        if !(x0..x0 + w).contains(&i) || !(y0..y0 + d).contains(&j) || !(z0..z0 + hgt).contains(&k) {
            return false;
        }
        if k >= z0 + r {
            return true;
        }
        !gap.contains(&i) && (j as f64 - yc).powi(2) + (k as f64 - zc).powi(2) <= rr
    };
    let offsets = ball(spec.thickness_mm, s);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                if is_bone(i, j, k) {
                    c.labels.set(i, j, k, LabelSchema::FEMUR);
                }
            }
        }
    }
    let femur = c.labels.clone();
    for i in x0..x0 + w {
        for j in 0..dims[1] {
            for k in z0.saturating_sub(reach[2])..z0 + r {
                // In the gap only the anterior half of the bridge underside carries
                // cartilage, leaving the notch open posteriorly.
                if femur.get(i, j, k) != 0 || (gap.contains(&i) && (k + h < z0 + r || j < y0 + r)) {
                    continue;
                }
                let near = offsets.iter().any(|o| {
                    femur.get_signed([i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]]) == Some(LabelSchema::FEMUR)
                });
                if near {
                    c.labels.set(i, j, k, LabelSchema::FEMORAL_CARTILAGE);
                }
            }
        }
    }
    let geom = c.labels.geometry.clone();
    // Middle of the cartilage-covered bridge underside.
    let notch = geom.index_to_world([
        (x0 + wc) as f64 + g as f64 / 2.0 - 0.5,
        y0 as f64 + 1.5 * r as f64 - 0.5,
        z0 as f64 + r as f64 - 0.5,
    ]);
    let mut truth = PhantomTruth {
        thickness_mm: h as f64 * s[2],
        denuded_fraction: 0.0,
        footprint_area_mm2: None,
        defect: None,
        region_areas_mm2: BTreeMap::new(),
        notch_mm: Some([notch.x, notch.y, notch.z]),
        side: spec.side,
    };

    let (mut cart_label, mut bone_label) = (LabelSchema::FEMORAL_CARTILAGE, LabelSchema::FEMUR);
    let mut template = c.labels.clone();
    if knee {
        let tb = m;
        let top = tb + 4;
        c.fill_box([x0, y0, tb], [x0 + w, y0 + d, top], LabelSchema::TIBIA);
        // Discs sit under the condyles; the medial one follows the side.
        let low = ellipse_cells(x0, y0 + 1, wc, d - 2);
        let high = ellipse_cells(x0 + wc + g, y0 + 1, wc, d - 2);
        let (medial, lateral) = match spec.side {
            KneeSide::Right => (low, high),
            KneeSide::Left => (high, low),
        };
        for (cells, label) in [
            (&medial, LabelSchema::MEDIAL_TIBIAL_CARTILAGE),
            (&lateral, LabelSchema::LATERAL_TIBIAL_CARTILAGE),
        ] {
            for &(i, j) in cells {
                c.fill_box([i, j, top], [i + 1, j + 1, top + h], label);
            }
            let area = cells.len() as f64 * s[0] * s[1];
            let name = if label == LabelSchema::MEDIAL_TIBIAL_CARTILAGE { "MTC" } else { "LTC" };
            truth.region_areas_mm2.insert(format!("{name}_footprint"), area);
            truth.region_areas_mm2.insert(format!("c{name}"), 0.2 * area);
        }
        template = c.labels.clone();
        cart_label = LabelSchema::MEDIAL_TIBIAL_CARTILAGE;
        bone_label = LabelSchema::TIBIA;
        truth.footprint_area_mm2 = Some(medial.len() as f64 * s[0] * s[1]);
        if let Some(ds) = &spec.defect {
            let target = (ds.fraction * medial.len() as f64).round().max(1.0) as usize;
            let p = Punch {
                cells: &medial,
                k_lo: top,
                k_hi: top + h,
                target,
            };
            let dt = punch(&mut c, cart_label, &p, ds, rng)?;
            truth.denuded_fraction = dt.cells as f64 / medial.len() as f64;
            truth.defect = Some(dt);
        }
    }
    Ok(Phantom {
        spec: spec.clone(),
        seed,
        labels: c.finish()?,
        template: LabelVolume::new(template, LabelSchema::knee_default())?,
        truth,
        cart_label,
        bone_label,
    })
}
