//! Per-region morphometrics and agreement tables between reports.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cv_rmsd, pearson, phr, rmsd, MeasurementSeries};
use crate::error::{Error, Result};
use crate::fcl::FclResult;
use crate::parcellation::{labels_to_volume, ParcelPart, Plate, Region, SurfaceParcellation};
use crate::spatial::PointIndex;
use crate::thickness::ThicknessResult;
use crate::volume::BinaryMask;

pub const METRIC_COLUMNS: [&str; 4] = ["fcl_percent", "mean_thickness_mm", "surface_area_mm2", "volume_mm3"];

/// Denominator of the regional mean thickness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThicknessDenominator {
    /// Every pseudo-healthy bone vertex of the region; denuded ones count as 0.
    #[default]
    TotalSubchondral,
    /// Only vertices still covered by cartilage. Not the default.
    CoveredArea,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportOptions {
    pub denominator: ThicknessDenominator,
}

/// Everything measured on one cartilage plate.
#[derive(Debug, Clone, Copy)]
pub struct PlateMeasurements<'a> {
    pub plate: Plate,
    pub thickness: &'a ThicknessResult,
    pub fcl: &'a FclResult,
    pub cart: &'a BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: Region,
    pub fcl_percent: f64,
    pub mean_thickness_mm: f64,
    pub surface_area_mm2: f64,
    pub volume_mm3: f64,
    /// Set when the region has no area; the values are then zeros.
    #[serde(default)]
    pub empty: bool,
}

impl RegionRow {
    fn zero(region: Region) -> Self {
        RegionRow {
            region,
            fcl_percent: 0.0,
            mean_thickness_mm: 0.0,
            surface_area_mm2: 0.0,
            volume_mm3: 0.0,
            empty: true,
        }
    }

    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "fcl_percent" => Some(self.fcl_percent),
            "mean_thickness_mm" => Some(self.mean_thickness_mm),
            "surface_area_mm2" => Some(self.surface_area_mm2),
            "volume_mm3" => Some(self.volume_mm3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub params_sha256: String,
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    /// Provenance with the SHA-256 of the JSON encoding of `params`.
    pub fn new(params: &impl Serialize, inputs: BTreeMap<String, String>) -> Result<Self> {
        let bytes = serde_json::to_vec(params).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Provenance {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            params_sha256: hex::encode(Sha256::digest(&bytes)),
            inputs,
        })
    }

    /// One-line form used as the CSV comment header.
    pub fn header_line(&self) -> String {
        format!("# {} {} params_sha256={}", self.tool, self.version, self.params_sha256)
    }
}

/// Twenty rows, one per region in code order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalReport {
    pub provenance: Provenance,
    pub rows: Vec<RegionRow>,
}

impl RegionalReport {
    pub fn row(&self, r: Region) -> &RegionRow {
        &self.rows[r.code() as usize - 1]
    }

    pub fn total_area(&self) -> f64 {
        self.rows.iter().map(|r| r.surface_area_mm2).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() != 20 || self.rows.iter().zip(Region::ALL).any(|(row, r)| row.region != r) {
            return Err(Error::Format("a regional report needs one row per region in code order".into()));
        }
        for row in &self.rows {
            let vals = [row.fcl_percent, row.mean_thickness_mm, row.surface_area_mm2, row.volume_mm3];
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0) || row.fcl_percent > 100.0 {
                return Err(Error::Format(format!("invalid values in region {}", row.region)));
            }
        }
        Ok(())
    }

    pub fn write_csv_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", self.provenance.header_line()).map_err(|e| Error::io("report", e))?;
        let mut csv = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Format(e.to_string());
        csv.write_record(["region"].into_iter().chain(METRIC_COLUMNS)).map_err(io)?;
        for r in &self.rows {
            csv.write_record([
                r.region.name().to_string(),
                format!("{:.6}", r.fcl_percent),
                format!("{:.6}", r.mean_thickness_mm),
                format!("{:.6}", r.surface_area_mm2),
                format!("{:.6}", r.volume_mm3),
            ])
            .map_err(io)?;
        }
        csv.flush().map_err(|e| Error::io("report", e))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(f))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads a report CSV; the `#` header line, when present, restores the
    /// tool, version and parameter hash.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut provenance = Provenance::default();
        if let Some(line) = text.lines().next().and_then(|l| l.strip_prefix("# ")) {
            let mut it = line.split_whitespace();
            provenance.tool = it.next().unwrap_or_default().to_string();
            provenance.version = it.next().unwrap_or_default().to_string();
            if let Some(h) = it.next().and_then(|t| t.strip_prefix("params_sha256=")) {
                provenance.params_sha256 = h.to_string();
            }
        }
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
        let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| bad(format!("missing column {name}")))
        };
        let ri = col("region")?;
        let idx: Vec<usize> = METRIC_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
        let mut rows: BTreeMap<Region, RegionRow> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let region = Region::from_name(&rec[ri]).ok_or_else(|| bad(format!("unknown region {}", &rec[ri])))?;
            let v: Vec<f64> = idx
                .iter()
                .map(|&i| rec[i].trim().parse::<f64>().map_err(|e| bad(format!("{}: {e}", &rec[i]))))
                .collect::<Result<_>>()?;
            let row = RegionRow {
                region,
                fcl_percent: v[0],
                mean_thickness_mm: v[1],
                surface_area_mm2: v[2],
                volume_mm3: v[3],
                empty: v[2] == 0.0,
            };
            if rows.insert(region, row).is_some() {
                return Err(bad(format!("duplicate region {region}")));
            }
        }
        let report = RegionalReport {
            provenance,
            rows: rows.into_values().collect(),
        };
        report.validate().map_err(|e| bad(e.to_string()))?;
        Ok(report)
    }
}

/// Labelled voxel volume per region for one plate's parcellation.
pub fn region_volumes(part: &ParcelPart, cart: &BinaryMask) -> Result<BTreeMap<Region, f64>> {
    let single = SurfaceParcellation {
        side: Default::default(),
        parts: vec![part.clone()],
    };
    let vol = labels_to_volume(&single, cart)?;
    let vv = cart.geometry.voxel_volume();
    let mut out = BTreeMap::new();
    for &c in &vol.labels.data {
        if let Some(r) = Region::from_code(c) {
            *out.entry(r).or_insert(0.0) += vv;
        }
    }
    Ok(out)
}

/// Mean thickness, area, volume and FCL percentage for every region.
///
/// Bone vertices take the thickness of the nearest inner-surface vertex of
/// the cartilage mesh; denuded vertices contribute zero and vertices whose
/// ray found no outer surface are left out.
pub fn regional_quantify(
    plates: &[PlateMeasurements<'_>],
    parc: &SurfaceParcellation,
    opts: &ReportOptions,
    provenance: Provenance,
) -> Result<RegionalReport> {
    let mut rows: BTreeMap<Region, RegionRow> = Region::ALL.iter().map(|&r| (r, RegionRow::zero(r))).collect();
    for pm in plates {
        let part = parc
            .part(pm.plate)
            .ok_or_else(|| Error::invalid(format!("no parcellation for plate {}", pm.plate.name())))?;
        let bone = part.patch.parent();
        if !Arc::ptr_eq(bone, &pm.fcl.bone_surface) {
            return Err(Error::GeometryMismatch(format!(
                "{} parcellation and FCL use different bone surfaces",
                pm.plate.name()
            )));
        }
        let dense = part.dense();

        let surf = &pm.thickness.surfaces;
        let inner_ids = surf.inner.members();
        let index = PointIndex::new(
            inner_ids.iter().map(|&v| surf.mesh.vertices[v as usize]).collect(),
            2.0 * pm.cart.geometry.voxel_diagonal(),
        );
        let mut sum: BTreeMap<Region, f64> = BTreeMap::new();
        let mut count: BTreeMap<Region, usize> = BTreeMap::new();
        for (v, &r) in part.patch.members().into_iter().zip(&part.regions) {
            let value = if pm.fcl.fcl_patch.contains(v as usize) {
                match opts.denominator {
                    ThicknessDenominator::TotalSubchondral => Some(0.0),
                    ThicknessDenominator::CoveredArea => None,
                }
            } else {
                index
                    .nearest(&bone.vertices[v as usize])
                    .and_then(|(i, _)| pm.thickness.thickness.get(inner_ids[i as usize]))
            };
            if let Some(t) = value {
                *sum.entry(r).or_insert(0.0) += t;
                *count.entry(r).or_insert(0) += 1;
            }
        }

        let lost: HashSet<u32> = pm.fcl.fcl_faces.iter().copied().collect();
        let mut area: BTreeMap<Region, f64> = BTreeMap::new();
        let mut lost_area: BTreeMap<Region, f64> = BTreeMap::new();
        for f in part.patch.induced_faces() {
            let Some(r) = part.face_region(&dense, f as usize) else { continue };
            let a = bone.face_area(f as usize);
            *area.entry(r).or_insert(0.0) += a;
            if lost.contains(&f) {
                *lost_area.entry(r).or_insert(0.0) += a;
            }
        }
        let volumes = region_volumes(part, pm.cart)?;

        for (&r, &a) in &area {
            if a <= 0.0 {
                continue;
            }
            let row = rows.get_mut(&r).expect("all regions present");
            row.empty = false;
            row.surface_area_mm2 = a;
            row.fcl_percent = (100.0 * lost_area.get(&r).copied().unwrap_or(0.0) / a).clamp(0.0, 100.0);
            row.mean_thickness_mm = match count.get(&r) {
                Some(&n) if n > 0 => sum[&r] / n as f64,
                _ => 0.0,
            };
            row.volume_mm3 = volumes.get(&r).copied().unwrap_or(0.0);
        }
    }
    for row in rows.values().filter(|r| r.empty) {
        log::warn!("region {} has no area; reporting zeros", row.region);
    }
    let report = RegionalReport {
        provenance,
        rows: rows.into_values().collect(),
    };
    report.validate()?;
    Ok(report)
}

/// Agreement between paired test and reference reports, laid out with one
/// row per region plus a pooled `all` row, and for each metric column its
/// Pearson correlation, RMSD and CV_RMSD. FCL also gets the hit rate within
/// `tolerance` percentage points. Undefined cells are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementTable {
    pub columns: Vec<String>,
    pub rows: Vec<AgreementRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementRow {
    pub region: String,
    pub n: usize,
    pub values: Vec<Option<f64>>,
}

impl AgreementTable {
    pub fn get(&self, region: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.region == region)?.values[c]
    }

    pub fn write_csv_to(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Format(e.to_string());
        let mut head = vec!["region".to_string(), "n".to_string()];
        head.extend(self.columns.iter().cloned());
        csv.write_record(&head).map_err(io)?;
        for row in &self.rows {
            let mut rec = vec![row.region.clone(), row.n.to_string()];
            rec.extend(row.values.iter().map(|v| match v {
                Some(x) => format!("{x:.6}"),
                None => "NA".to_string(),
            }));
            csv.write_record(&rec).map_err(io)?;
        }
        csv.flush().map_err(|e| Error::io("agreement table", e))
    }
}

pub fn agreement(test: &[RegionalReport], reference: &[RegionalReport], tolerance: f64) -> Result<AgreementTable> {
    if test.len() != reference.len() || test.is_empty() {
        return Err(Error::invalid(format!(
            "agreement needs equally many test and reference reports ({} vs {})",
            test.len(),
            reference.len()
        )));
    }
    let mut columns = Vec::new();
    for m in METRIC_COLUMNS {
        for stat in ["pearson", "rmsd", "cv_rmsd"] {
            columns.push(format!("{m}_{stat}"));
        }
        if m == "fcl_percent" {
            columns.push(format!("{m}_phr"));
        }
    }
    let cells = |pairs: &[(f64, f64)], metric: &str| -> Vec<Option<f64>> {
        let (ys, yl): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let series = MeasurementSeries::new(ys.clone(), yl.clone()).ok();
        let mut out = vec![
            series.as_ref().and_then(|s| pearson(s).ok()),
            series.as_ref().map(rmsd),
            series.as_ref().and_then(|s| cv_rmsd(s).ok()),
        ];
        if metric == "fcl_percent" {
            out.push(phr(&ys, &yl, tolerance).ok());
        }
        out
    };
    let mut rows = Vec::new();
    let mut groups: Vec<(String, Vec<Region>)> = Region::ALL.iter().map(|r| (r.name().to_string(), vec![*r])).collect();
    groups.push(("all".to_string(), Region::ALL.to_vec()));
    for (name, regions) in groups {
        let mut values = Vec::new();
        let mut n = 0;
        for m in METRIC_COLUMNS {
            let pairs: Vec<(f64, f64)> = test
                .iter()
                .zip(reference)
                .flat_map(|(t, g)| {
                    regions
                        .iter()
                        .map(move |&r| (t.row(r).column(m).unwrap(), g.row(r).column(m).unwrap()))
                })
                .collect();
            n = pairs.len();
            values.extend(cells(&pairs, m));
        }
        rows.push(AgreementRow { region: name, n, values });
    }
    Ok(AgreementTable { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcl::{estimate_fcl_on, FclParams};
    use crate::phantom::{generate, Phantom, PhantomKind, PhantomSpec};
    use crate::surface::{mesh_from_mask, Surface, SurfacePatch};
    use crate::thickness::{map_thickness, ThicknessParams};
    use crate::volume::{Geometry, KneeSide, Volume};
    use nalgebra::Vector3;

    struct Plated {
        thick: ThicknessResult,
        fcl: FclResult,
        part: ParcelPart,
        cart: BinaryMask,
    }

    /// Whole plate as a single central region.
    fn single_region(ph: &Phantom) -> Plated {
        let cart = ph.cart();
        let bone = ph.bone();
        let mesh = Arc::new(mesh_from_mask(&bone).unwrap());
        let fcl = estimate_fcl_on(
            &mesh,
            &cart,
            &ph.intact_cart(),
            crate::fcl::Compartment::Tibial,
            &FclParams::default(),
        )
        .unwrap();
        let thick = map_thickness(&cart, &bone, &ThicknessParams::default()).unwrap();
        let patch = fcl.pseudo_healthy_patch.clone();
        let part = ParcelPart {
            plate: Plate::Mtc,
            regions: vec![Region::CMtc; patch.len()],
            patch,
        };
        Plated { thick, fcl, part, cart }
    }

    fn quantify(p: &Plated, opts: ReportOptions) -> RegionalReport {
        let parc = SurfaceParcellation {
            side: KneeSide::Right,
            parts: vec![p.part.clone()],
        };
        let pm = PlateMeasurements {
            plate: Plate::Mtc,
            thickness: &p.thick,
            fcl: &p.fcl,
            cart: &p.cart,
        };
        regional_quantify(&[pm], &parc, &opts, Provenance::new(&opts, BTreeMap::new()).unwrap()).unwrap()
    }

    #[test]
    fn voxel_volume_arithmetic() {
        let g = Geometry::axis_aligned([10, 4, 4], [0.7, 0.36, 0.36]);
        let mut cart = Volume::filled(g, false);
        for i in 0..10 {
            cart.set(i, 1, 1, true);
        }
        let s = Arc::new(
            Surface::from_triangles(
                vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)],
                vec![[0, 1, 2]],
            )
            .unwrap(),
        );
        let part = ParcelPart {
            plate: Plate::Mtc,
            patch: SurfacePatch::full(&s),
            regions: vec![Region::CMtc; 3],
        };
        let v = region_volumes(&part, &cart).unwrap();
        assert!((v[&Region::CMtc] - 0.907200).abs() < 1e-12);
    }

    #[test]
    fn intact_slab() {
        let ph = generate(&PhantomSpec::new(PhantomKind::Slab), 0).unwrap();
        let p = single_region(&ph);
        let rep = quantify(&p, ReportOptions::default());
        let row = rep.row(Region::CMtc);
        assert!((row.mean_thickness_mm - 3.0).abs() <= 0.36, "{}", row.mean_thickness_mm);
        assert_eq!(row.fcl_percent, 0.0);
        assert!((row.volume_mm3 - ph.cart().count() as f64).abs() < 1e-9);
        assert!((rep.total_area() - p.fcl.pseudo_healthy_patch.area()).abs() <= 1e-3 * rep.total_area());
        assert_eq!(rep.rows.iter().filter(|r| r.empty).count(), 19);
    }

    #[test]
    fn half_denuded_halves_thickness() {
        let ph = generate(&PhantomSpec::new(PhantomKind::CuboidDefect).with_defect(0.5), 3).unwrap();
        let p = single_region(&ph);
        let total = quantify(&p, ReportOptions::default()).row(Region::CMtc).clone();
        let covered = quantify(
            &p,
            ReportOptions {
                denominator: ThicknessDenominator::CoveredArea,
            },
        )
        .row(Region::CMtc)
        .clone();
        assert!((total.fcl_percent - 50.0).abs() <= 2.0, "{}", total.fcl_percent);
        assert!((total.mean_thickness_mm - 1.5).abs() <= 0.25, "{}", total.mean_thickness_mm);
        assert!((covered.mean_thickness_mm - 3.0).abs() <= 0.36, "{}", covered.mean_thickness_mm);
    }

    #[test]
    fn csv_round_trip_and_agreement() {
        let ph = generate(&PhantomSpec::new(PhantomKind::Slab), 0).unwrap();
        let mut rep = quantify(&single_region(&ph), ReportOptions::default());
        for (i, row) in rep.rows.iter_mut().enumerate() {
            row.fcl_percent = i as f64;
            row.mean_thickness_mm = 1.0 + 0.1 * i as f64;
            row.surface_area_mm2 = 100.0 + (i * i) as f64;
            row.volume_mm3 = 50.0 + 3.0 * i as f64;
            row.empty = false;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        rep.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# kneemorph "));
        assert_eq!(text.lines().nth(1).unwrap(), "region,fcl_percent,mean_thickness_mm,surface_area_mm2,volume_mm3");
        assert_eq!(text.lines().count(), 22);
        let back = RegionalReport::read_csv(&path).unwrap();
        for (a, b) in back.rows.iter().zip(&rep.rows) {
            assert_eq!(a.region, b.region);
            for m in METRIC_COLUMNS {
                assert!((a.column(m).unwrap() - b.column(m).unwrap()).abs() <= 5e-7);
            }
        }
        assert_eq!(back.provenance.params_sha256, rep.provenance.params_sha256);

        let t = agreement(std::slice::from_ref(&back), std::slice::from_ref(&back), 10.0).unwrap();
        assert_eq!(t.rows.len(), 21);
        for m in METRIC_COLUMNS {
            assert!((t.get("all", &format!("{m}_pearson")).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(t.get("all", &format!("{m}_rmsd")).unwrap(), 0.0);
        }
        assert_eq!(t.get("all", "fcl_percent_phr"), Some(1.0));
        // One subject: per-region series are too short.
        assert_eq!(t.get("aMFC", "fcl_percent_rmsd"), None);
        assert!(agreement(&[], &[], 1.0).is_err());
    }

    #[test]
    fn rejects_mismatched_surfaces() {
        let ph = generate(&PhantomSpec::new(PhantomKind::Slab), 0).unwrap();
        let p = single_region(&ph);
        let other = Arc::new(mesh_from_mask(&ph.bone()).unwrap());
        let part = ParcelPart {
            plate: Plate::Mtc,
            patch: SurfacePatch::full(&other),
            regions: vec![Region::CMtc; other.n_vertices()],
        };
        let parc = SurfaceParcellation {
            side: KneeSide::Right,
            parts: vec![part],
        };
        let pm = PlateMeasurements {
            plate: Plate::Mtc,
            thickness: &p.thick,
            fcl: &p.fcl,
            cart: &p.cart,
        };
        assert!(regional_quantify(&[pm], &parc, &ReportOptions::default(), Provenance::default()).is_err());
    }
}
