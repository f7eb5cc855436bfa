//! End-to-end analysis of one subject: load, reorient, optional template
//! warp, then thickness, FCL, parcellation and the regional report.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::fcl::{estimate_fcl_on, FclParams, FclResult};
use crate::metrics::{regional_quantify, PlateMeasurements, Provenance, RegionalReport, ReportOptions};
use crate::parcellation::{
    detect_intercondylar_notch, labels_to_volume, parcellate_femoral, parcellate_tibial, NotchEstimate, ParcelPart,
    Plate, Region, SurfaceParcellation,
};
use crate::surface::{mesh_from_mask, PlyFormat, PlyMesh, Surface, SurfacePatch};
use crate::thickness::{map_thickness, ThicknessParams, ThicknessResult};
use crate::volume::{
    load_labels, load_scalar, reorient_ras, save_labels, BinaryMask, KneeSide, LabelSchema, LabelVolume, Volume,
};
use crate::warp::{apply_field, integrate_svf, threshold_map, DeformationField, Interpolation, VelocityField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpParams {
    /// Scaling-and-squaring steps for velocity fields.
    pub steps: u32,
    /// Probability threshold applied to the warped template cartilage.
    pub threshold: f64,
}

impl Default for WarpParams {
    fn default() -> Self {
        WarpParams {
            steps: 7,
            threshold: 0.5,
        }
    }
}

/// Every numeric parameter; its JSON encoding is hashed into the provenance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineParams {
    pub thickness: ThicknessParams,
    pub fcl: FclParams,
    pub warp: WarpParams,
    pub report: ReportOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seg: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub template_seg: Option<PathBuf>,
    pub svf: Option<PathBuf>,
    pub dvf: Option<PathBuf>,
    pub out: PathBuf,
    pub side: KneeSide,
    pub labels: LabelSchema,
    pub params: PipelineParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seg: None,
            image: None,
            template_seg: None,
            svf: None,
            dvf: None,
            out: PathBuf::from("out"),
            side: KneeSide::default(),
            labels: LabelSchema::knee_default(),
            params: PipelineParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parameter ranges and input combinations; file existence is checked
    /// when loading.
    pub fn validate(&self) -> crate::Result<()> {
        if self.seg.is_none() {
            return Err(Error::invalid("no segmentation given"));
        }
        if self.svf.is_some() && self.dvf.is_some() {
            return Err(Error::invalid("give either a velocity or a deformation field, not both"));
        }
        if (self.svf.is_some() || self.dvf.is_some()) && self.template_seg.is_none() {
            return Err(Error::invalid("a field needs a template segmentation to warp"));
        }
        let p = &self.params;
        let t = &p.thickness;
        let checks = [
            (t.k >= 3 && t.k <= 256, "thickness.k must be in [3, 256]"),
            (t.smooth_iters <= 100, "thickness.smooth_iters must be at most 100"),
            (t.max_ray_mm > 0.0 && t.max_ray_mm.is_finite(), "thickness.max_ray_mm must be positive"),
            (t.n_d <= 64 && t.n_e <= 64, "thickness closing steps must be at most 64"),
            (p.fcl.n_d <= 64 && p.fcl.n_e <= 64, "fcl closing steps must be at most 64"),
            (
                (1..=12).contains(&p.fcl.curvefit.tibial_order) && (1..=12).contains(&p.fcl.curvefit.femoral_order),
                "curve orders must be in [1, 12]",
            ),
            (
                p.fcl.curvefit.central_fraction > 0.0 && p.fcl.curvefit.central_fraction <= 1.0,
                "curvefit.central_fraction must be in (0, 1]",
            ),
            (p.warp.steps <= 30, "warp.steps must be at most 30"),
            ((0.0..=1.0).contains(&p.warp.threshold), "warp.threshold must be in [0, 1]"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::invalid(msg));
            }
        }
        for name in ["femur", "tibia", "FC", "MTC", "LTC"] {
            if self.labels.label_of(name).is_none() {
                return Err(Error::invalid(format!("label schema has no '{name}' entry")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Load,
    Reorient,
    Warp,
    Thickness,
    Fcl,
    Parcellation,
    Report,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("stage is a string"))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    pub plate: Option<Plate>,
    #[source]
    pub source: Error,
}

impl PipelineError {
    fn at(stage: Stage) -> impl FnOnce(Error) -> PipelineError {
        move |source| PipelineError {
            stage,
            plate: None,
            source,
        }
    }

    fn on(stage: Stage, plate: Plate) -> impl FnOnce(Error) -> PipelineError {
        move |source| PipelineError {
            stage,
            plate: Some(plate),
            source,
        }
    }

    /// 2 for unusable inputs or configuration, 1 for failures later on.
    pub fn exit_code(&self) -> i32 {
        match self.stage {
            Stage::Config | Stage::Load => 2,
            _ => 1,
        }
    }
}

/// Results for one cartilage plate.
#[derive(Debug, Clone)]
pub struct PlateAnalysis {
    pub plate: Plate,
    pub cart: BinaryMask,
    pub thickness: ThicknessResult,
    pub fcl: FclResult,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub plates: Vec<PlateAnalysis>,
    pub notch: Option<NotchEstimate>,
    pub parcellation: SurfaceParcellation,
    pub report: RegionalReport,
    /// Region code of every cartilage voxel.
    pub atlas: LabelVolume,
}

/// Template cartilage after warping, one mask per plate, on the subject grid.
pub fn warp_template(
    template: &LabelVolume,
    field: Option<&DeformationField>,
    schema: &LabelSchema,
    threshold: f64,
) -> crate::Result<BTreeMap<Plate, BinaryMask>> {
    let mut out = BTreeMap::new();
    for plate in Plate::ALL {
        let code = plate_label(schema, plate.name())?;
        let mask = template.mask(code);
        let warped = match field {
            None => mask,
            Some(f) => threshold_map(&apply_field(&mask.to_scalar(), f, Interpolation::Trilinear)?, threshold)?,
        };
        out.insert(plate, warped);
    }
    Ok(out)
}

fn plate_label(schema: &LabelSchema, name: &str) -> crate::Result<u16> {
    schema
        .label_of(name)
        .ok_or_else(|| Error::invalid(format!("label schema has no '{name}' entry")))
}

fn centroid(p: &SurfacePatch) -> Vector3<f64> {
    let m = p.members();
    let s = p.parent();
    m.iter().map(|&v| s.vertices[v as usize]).sum::<Vector3<f64>>() / m.len().max(1) as f64
}

/// Gives vertices claimed by both tibial plates to the plate whose
/// pseudo-healthy centroid is nearer; ties go to the medial plate.
fn split_tibial_overlap(mtc: &SurfacePatch, ltc: &SurfacePatch) -> (SurfacePatch, SurfacePatch) {
    let shared = mtc.intersection(ltc);
    if shared.is_empty() {
        return (mtc.clone(), ltc.clone());
    }
    log::info!("{} vertices are shared by the tibial plates", shared.len());
    let (cm, cl) = (centroid(mtc), centroid(ltc));
    let s = mtc.parent();
    let to_lateral = shared.members().into_iter().filter(|&v| {
        let p = s.vertices[v as usize];
        (p - cl).norm() < (p - cm).norm()
    });
    let to_lateral = SurfacePatch::from_vertices(s, to_lateral).expect("shared vertices are on the mesh");
    let to_medial = shared.difference(&to_lateral);
    (mtc.difference(&to_lateral), ltc.difference(&to_medial))
}

fn label_code(labels: &LabelVolume, name: &str) -> Result<u16, PipelineError> {
    plate_label(&labels.schema, name).map_err(PipelineError::at(Stage::Config))
}

/// FCL for every plate with subject cartilage, in plate order. The two
/// tibial plates share one tibia mesh. Plates without cartilage are skipped
/// with a warning.
pub fn estimate_plate_fcl(
    labels: &LabelVolume,
    warped_template: &BTreeMap<Plate, BinaryMask>,
    params: &FclParams,
) -> Result<Vec<(Plate, BinaryMask, FclResult)>, PipelineError> {
    let mut present = Vec::new();
    for p in Plate::ALL {
        let m = labels.mask(label_code(labels, p.name())?);
        if m.is_empty_mask() {
            log::warn!("no {} cartilage in the segmentation; its regions report zeros", p.name());
        } else {
            present.push((p, m));
        }
    }
    let mesh_for = |bone: &str| -> Result<Option<Arc<Surface>>, PipelineError> {
        let wanted = present.iter().any(|(p, _)| (p.bone_label() == LabelSchema::FEMUR) == (bone == "femur"));
        if !wanted {
            return Ok(None);
        }
        let mask = labels.mask(label_code(labels, bone)?);
        let mesh = mesh_from_mask(&mask).map_err(PipelineError::at(Stage::Fcl))?;
        Ok(Some(Arc::new(mesh)))
    };
    let femur_mesh = mesh_for("femur")?;
    let tibia_mesh = mesh_for("tibia")?;
    let empty = labels.mask(0).map(|_| false);
    present
        .into_par_iter()
        .map(|(plate, cart)| {
            let mesh = if plate == Plate::Fc { &femur_mesh } else { &tibia_mesh };
            let mesh = mesh.as_ref().expect("mesh built for present plates");
            let template = warped_template.get(&plate).unwrap_or(&empty);
            let fcl = estimate_fcl_on(mesh, &cart, template, plate.compartment(), params)
                .map_err(PipelineError::on(Stage::Fcl, plate))?;
            Ok((plate, cart, fcl))
        })
        .collect()
}

/// Parcellates each plate's pseudo-healthy patch; the femoral plate also
/// yields the notch estimate.
pub fn parcellate_plates(
    pseudo: &BTreeMap<Plate, SurfacePatch>,
    side: KneeSide,
) -> Result<(SurfaceParcellation, Option<NotchEstimate>), PipelineError> {
    let mut parts: Vec<ParcelPart> = Vec::new();
    let mut notch = None;
    if let Some(fc) = pseudo.get(&Plate::Fc) {
        let n = detect_intercondylar_notch(fc, side).map_err(PipelineError::on(Stage::Parcellation, Plate::Fc))?;
        parts.push(parcellate_femoral(fc, &n.position, side).map_err(PipelineError::on(Stage::Parcellation, Plate::Fc))?);
        notch = Some(n);
    }
    let (mut mtc, mut ltc) = (pseudo.get(&Plate::Mtc).cloned(), pseudo.get(&Plate::Ltc).cloned());
    if let (Some(m), Some(l)) = (&mtc, &ltc) {
        let (m2, l2) = split_tibial_overlap(m, l);
        mtc = Some(m2);
        ltc = Some(l2);
    }
    for (plate, patch) in [(Plate::Mtc, mtc), (Plate::Ltc, ltc)] {
        if let Some(p) = patch {
            parts.push(parcellate_tibial(&p, side, plate).map_err(PipelineError::on(Stage::Parcellation, plate))?);
        }
    }
    Ok((SurfaceParcellation { side, parts }, notch))
}

/// Runs the analysis on a reoriented label volume.
///
/// `warped_template` holds each plate's template cartilage already on the
/// subject grid; missing plates are treated as an empty template. Plates
/// without subject cartilage are skipped and their regions report zeros.
pub fn analyze(
    labels: &LabelVolume,
    warped_template: &BTreeMap<Plate, BinaryMask>,
    side: KneeSide,
    params: &PipelineParams,
    provenance: Provenance,
) -> Result<Analysis, PipelineError> {
    let femur = labels.mask(label_code(labels, "femur")?);
    let tibia = labels.mask(label_code(labels, "tibia")?);
    let fcls = estimate_plate_fcl(labels, warped_template, &params.fcl)?;
    let plates: Vec<PlateAnalysis> = fcls
        .into_par_iter()
        .map(|(plate, cart, fcl)| {
            let bone = if plate == Plate::Fc { &femur } else { &tibia };
            let thickness =
                map_thickness(&cart, bone, &params.thickness).map_err(PipelineError::on(Stage::Thickness, plate))?;
            Ok(PlateAnalysis {
                plate,
                cart,
                thickness,
                fcl,
            })
        })
        .collect::<Result<_, PipelineError>>()?;

    let pseudo: BTreeMap<Plate, SurfacePatch> =
        plates.iter().map(|p| (p.plate, p.fcl.pseudo_healthy_patch.clone())).collect();
    let (parcellation, notch) = parcellate_plates(&pseudo, side)?;

    let measurements: Vec<PlateMeasurements<'_>> = plates
        .iter()
        .map(|p| PlateMeasurements {
            plate: p.plate,
            thickness: &p.thickness,
            fcl: &p.fcl,
            cart: &p.cart,
        })
        .collect();
    let report = regional_quantify(&measurements, &parcellation, &params.report, provenance)
        .map_err(PipelineError::at(Stage::Report))?;

    let mut atlas = Volume::filled(labels.geometry().clone(), 0u16);
    for part in &parcellation.parts {
        let cart = &plates.iter().find(|p| p.plate == part.plate).expect("parcelled plates were analysed").cart;
        let single = SurfaceParcellation {
            side,
            parts: vec![part.clone()],
        };
        let vol = labels_to_volume(&single, cart).map_err(PipelineError::on(Stage::Report, part.plate))?;
        for (a, &c) in atlas.data.iter_mut().zip(&vol.labels.data) {
            if c != 0 {
                *a = c;
            }
        }
    }
    let atlas = LabelVolume::new(atlas, Region::schema()).map_err(PipelineError::at(Stage::Report))?;

    Ok(Analysis {
        plates,
        notch,
        parcellation,
        report,
        atlas,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub analysis: Analysis,
    pub files: Vec<PathBuf>,
}

fn load_reoriented(path: &Path, schema: &LabelSchema) -> crate::Result<LabelVolume> {
    let v = load_labels(path, schema)?;
    LabelVolume::new(reorient_ras(&v.labels), v.schema)
}

/// Loads the inputs named in `cfg`, analyses them and writes the report,
/// atlas and meshes into `cfg.out`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate().map_err(PipelineError::at(Stage::Config))?;
    let load = PipelineError::at;
    let seg_path = cfg.seg.as_ref().expect("validated");
    let seg = load_labels(seg_path, &cfg.labels).map_err(load(Stage::Load))?;
    let image = match &cfg.image {
        Some(p) => Some(load_scalar(p).map_err(load(Stage::Load))?),
        None => None,
    };
    let template = match &cfg.template_seg {
        Some(p) => Some(load_reoriented(p, &cfg.labels).map_err(load(Stage::Load))?),
        None => None,
    };
    let field = match (&cfg.svf, &cfg.dvf) {
        (Some(p), _) => {
            let v = VelocityField::load(p).map_err(load(Stage::Load))?;
            Some(integrate_svf(&v, cfg.params.warp.steps).map_err(load(Stage::Warp))?)
        }
        (_, Some(p)) => Some(DeformationField::load(p).map_err(load(Stage::Load))?),
        _ => None,
    };

    let labels = LabelVolume::new(reorient_ras(&seg.labels), seg.schema.clone()).map_err(load(Stage::Reorient))?;
    if let Some(img) = &image {
        let img = reorient_ras(img);
        img.geometry
            .ensure_same_grid(labels.geometry(), "image and segmentation")
            .map_err(load(Stage::Reorient))?;
    }
    let warped = match &template {
        Some(t) => {
            t.geometry()
                .ensure_same_grid(labels.geometry(), "template and subject segmentations")
                .map_err(load(Stage::Warp))?;
            warp_template(t, field.as_ref(), &cfg.labels, cfg.params.warp.threshold).map_err(load(Stage::Warp))?
        }
        None => BTreeMap::new(),
    };

    let mut inputs = BTreeMap::new();
    for (k, v) in [
        ("seg", &cfg.seg),
        ("image", &cfg.image),
        ("template_seg", &cfg.template_seg),
        ("svf", &cfg.svf),
        ("dvf", &cfg.dvf),
    ] {
        if let Some(p) = v {
            inputs.insert(k.to_string(), p.display().to_string());
        }
    }
    let provenance = Provenance::new(&(cfg.side, &cfg.labels, &cfg.params), inputs).map_err(load(Stage::Report))?;
    let analysis = analyze(&labels, &warped, cfg.side, &cfg.params, provenance)?;
    let files = write_outputs(&cfg.out, &analysis, cfg).map_err(load(Stage::Write))?;
    Ok(PipelineOutput { analysis, files })
}

/// Writes `report.csv`, `report.json`, `atlas.nii.gz`, `config.json` and
/// per-plate PLY meshes. Returns the written paths.
pub fn write_outputs(out: &Path, a: &Analysis, cfg: &PipelineConfig) -> crate::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let mut push = |name: &str| {
        let p = out.join(name);
        files.push(p.clone());
        p
    };
    a.report.write_csv(push("report.csv"))?;
    a.report.write_json(push("report.json"))?;
    save_labels(push("atlas.nii.gz"), &a.atlas)?;
    let cfg_path = push("config.json");
    std::fs::write(&cfg_path, cfg.to_json() + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let header = a.report.provenance.header_line();
    let comment = header.trim_start_matches("# ");
    for p in &a.plates {
        let tag = p.plate.name().to_lowercase();
        let mesh = &p.thickness.surfaces.mesh;
        let mut t = vec![-1.0f32; mesh.n_vertices()];
        for (v, val) in p.thickness.thickness.vertices.iter().zip(&p.thickness.thickness.values) {
            if let Some(x) = val {
                t[*v as usize] = *x as f32;
            }
        }
        PlyMesh::from_surface(mesh)
            .with_comment(comment)
            .with_comment("thickness in mm, -1 where undefined")
            .with_float("thickness", &t)
            .with_flag("inner", p.thickness.surfaces.inner.flags())
            .with_flag("outer", p.thickness.surfaces.outer.flags())
            .write(push(&format!("thickness_{tag}.ply")), PlyFormat::default())?;
        PlyMesh::from_surface(&p.fcl.bone_surface)
            .with_comment(comment)
            .with_flag("footprint", p.fcl.footprint.flags())
            .with_flag("pseudo_healthy", p.fcl.pseudo_healthy_patch.flags())
            .with_flag("denuded", p.fcl.fcl_patch.flags())
            .write(push(&format!("fcl_{tag}.ply")), PlyFormat::default())?;
    }
    for (bone, plates) in [("femur", &[Plate::Fc][..]), ("tibia", &[Plate::Mtc, Plate::Ltc][..])] {
        let parts: Vec<&ParcelPart> = a.parcellation.parts.iter().filter(|p| plates.contains(&p.plate)).collect();
        let Some(first) = parts.first() else { continue };
        let mesh = first.patch.parent();
        let mut codes = vec![0i32; mesh.n_vertices()];
        for part in &parts {
            for (v, r) in part.patch.members().into_iter().zip(&part.regions) {
                codes[v as usize] = r.code() as i32;
            }
        }
        PlyMesh::from_surface(mesh)
            .with_comment(comment)
            .with_int("region", &codes)
            .write(push(&format!("regions_{bone}.ply")), PlyFormat::default())?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomKind, PhantomSpec};

    fn knee(defect: Option<f64>, side: KneeSide) -> crate::phantom::Phantom {
        let mut spec = PhantomSpec::new(PhantomKind::Knee);
        spec.side = side;
        if let Some(f) = defect {
            spec = spec.with_defect(f);
        }
        generate(&spec, 1).unwrap()
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_err());
        cfg.seg = Some("seg.nii.gz".into());
        cfg.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"side":"left","params":{"warp":{"steps":4}}}"#).unwrap();
        assert_eq!(partial.side, KneeSide::Left);
        assert_eq!(partial.params.warp.steps, 4);
        assert_eq!(partial.params.warp.threshold, 0.5);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sied":"left"}"#).is_err());
        cfg.svf = Some("v.nii.gz".into());
        assert!(cfg.validate().is_err());
        cfg.template_seg = Some("t.nii.gz".into());
        cfg.validate().unwrap();
        cfg.params.warp.threshold = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_segmentation_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            seg: Some(dir.path().join("absent.nii.gz")),
            out: dir.path().join("out"),
            ..Default::default()
        };
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Load);
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().starts_with("load stage failed"));
    }

    #[test]
    fn knee_phantom_end_to_end() {
        let ph = knee(Some(0.2), KneeSide::Right);
        let warped = warp_template(&ph.template, None, &LabelSchema::knee_default(), 0.5).unwrap();
        let a = analyze(
            &ph.labels,
            &warped,
            KneeSide::Right,
            &PipelineParams::default(),
            Provenance::default(),
        )
        .unwrap();
        assert_eq!(a.plates.len(), 3);
        assert!(!a.notch.unwrap().fallback);
        let rep = &a.report;
        assert!(rep.rows.iter().all(|r| !r.empty), "{:?}", rep.rows);
        // Defect sits in the medial tibial plate only.
        let mtc = a.plates.iter().find(|p| p.plate == Plate::Mtc).unwrap();
        assert!((mtc.fcl.fcl_percent - 20.0).abs() <= 2.0, "{}", mtc.fcl.fcl_percent);
        for p in a.plates.iter().filter(|p| p.plate != Plate::Mtc) {
            assert!(p.fcl.fcl_percent <= 2.0, "{:?} {}", p.plate, p.fcl.fcl_percent);
        }
        // Region areas partition the pseudo-healthy surfaces.
        let pseudo: f64 = a.parcellation.parts.iter().map(|p| p.patch.area()).sum();
        assert!((rep.total_area() - pseudo).abs() <= 1e-3 * pseudo);
        // Every cartilage voxel gets a region of its own plate.
        for p in &a.plates {
            for i in p.cart.indices() {
                let r = Region::from_code(a.atlas.labels.data[i]).unwrap();
                assert_eq!(r.plate(), p.plate);
            }
        }
    }

    #[test]
    fn pipeline_writes_identical_reports() {
        let ph = knee(Some(0.1), KneeSide::Left);
        let dir = tempfile::tempdir().unwrap();
        ph.save(dir.path()).unwrap();
        let run = |out: &str| {
            let cfg = PipelineConfig {
                seg: Some(dir.path().join("labels.nii.gz")),
                template_seg: Some(dir.path().join("template.nii.gz")),
                out: dir.path().join(out),
                side: KneeSide::Left,
                ..Default::default()
            };
            run_pipeline(&cfg).unwrap()
        };
        let a = run("a");
        let b = run("b");
        let read = |o: &PipelineOutput, name: &str| std::fs::read(o.files.iter().find(|p| p.ends_with(name)).unwrap()).unwrap();
        assert_eq!(read(&a, "report.csv"), read(&b, "report.csv"));
        assert_eq!(read(&a, "report.json"), read(&b, "report.json"));
        for name in ["atlas.nii.gz", "regions_femur.ply", "regions_tibia.ply", "fcl_mtc.ply", "thickness_fc.ply"] {
            assert!(a.files.iter().any(|p| p.ends_with(name)), "{name}");
        }
        let rep = RegionalReport::read_csv(a.files.iter().find(|p| p.ends_with("report.csv")).unwrap()).unwrap();
        assert_eq!(rep.provenance.params_sha256, a.analysis.report.provenance.params_sha256);
    }
}
