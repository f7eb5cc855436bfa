use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kneemorph::fcl::MergeMode;
use kneemorph::metrics::{agreement, dsc, lncc_image, mse_image, RegionalReport, ThicknessDenominator};
use kneemorph::parcellation::{labels_to_volume, Plate, Region, SurfaceParcellation};
use kneemorph::phantom::{generate, PhantomKind, PhantomSpec};
use kneemorph::pipeline::{estimate_plate_fcl, parcellate_plates, run_pipeline, PipelineConfig, PipelineError};
use kneemorph::surface::{PlyFormat, PlyMesh};
use kneemorph::thickness::{map_thickness, thickness_3dnn, ThicknessParams};
use kneemorph::volume::{
    load_labels, load_scalar, load_volume, reorient_ras, save_labels, save_scalar, LoadedVolume,
};
use kneemorph::warp::{apply_field, integrate_svf, DeformationField, Interpolation, VelocityField};
use kneemorph::{Error, KneeSide, LabelSchema, LabelVolume};

#[derive(Parser)]
#[command(name = "kneemorph", version, about = "Knee cartilage thickness, loss and regional morphometry")]
struct Cli {
    /// More log output on stderr (repeatable). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full analysis of one subject.
    Run(Box<RunArgs>),
    /// Write a synthetic subject with its template and ground truth.
    Phantom(PhantomArgs),
    /// Thickness map of one cartilage plate.
    Thickness(ThicknessArgs),
    /// Full-thickness cartilage loss of one plate.
    Fcl(FclArgs),
    /// Region labels for every plate present in a segmentation.
    Parcellate(ParcellateArgs),
    /// Resample a volume through a velocity or deformation field.
    Warp(WarpArgs),
    /// Agreement, overlap and similarity measures.
    #[command(subcommand)]
    Metrics(MetricsCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeArg {
    Union,
    Intersection,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlateArg {
    Fc,
    Mtc,
    Ltc,
}

impl From<PlateArg> for Plate {
    fn from(p: PlateArg) -> Plate {
        match p {
            PlateArg::Fc => Plate::Fc,
            PlateArg::Mtc => Plate::Mtc,
            PlateArg::Ltc => Plate::Ltc,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Subject segmentation (NIfTI).
    #[arg(long)]
    seg: Option<PathBuf>,
    /// Subject MR image; checked against the segmentation grid and recorded in the provenance.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Template segmentation on the subject grid; warped by --svf/--dvf when given.
    #[arg(long)]
    template_seg: Option<PathBuf>,
    /// Stationary velocity field taking the template onto the subject.
    #[arg(long, conflicts_with = "dvf")]
    svf: Option<PathBuf>,
    /// Displacement field taking the template onto the subject.
    #[arg(long)]
    dvf: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Knee side (right or left).
    #[arg(long)]
    side: Option<KneeSide>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
    /// Neighbours for SVD normals.
    #[arg(long)]
    k: Option<usize>,
    /// Normal smoothing passes.
    #[arg(long)]
    smooth_iters: Option<usize>,
    /// Longest thickness ray before giving up.
    #[arg(long)]
    max_ray_mm: Option<f64>,
    /// Closing dilations, for both the inner surface and the FCL footprint.
    #[arg(long)]
    n_d: Option<usize>,
    /// Closing erosions, for both the inner surface and the FCL footprint.
    #[arg(long)]
    n_e: Option<usize>,
    /// Scaling-and-squaring steps.
    #[arg(long)]
    steps: Option<u32>,
    /// Warped template probability threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// How subject and warped template cartilage combine.
    #[arg(long)]
    merge: Option<MergeArg>,
    /// Polynomial order of the tibial outline fit.
    #[arg(long)]
    tibial_order: Option<usize>,
    /// Trigonometric order of the femoral outline fit.
    #[arg(long)]
    femoral_order: Option<usize>,
    /// Average thickness over covered vertices only instead of the whole
    /// subchondral area.
    #[arg(long)]
    covered_area: bool,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::from_json_file(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if self.seg.is_some() {
            c.seg = self.seg.clone();
        }
        if self.image.is_some() {
            c.image = self.image.clone();
        }
        if self.template_seg.is_some() {
            c.template_seg = self.template_seg.clone();
        }
        if self.svf.is_some() {
            c.svf = self.svf.clone();
            c.dvf = None;
        }
        if self.dvf.is_some() {
            c.dvf = self.dvf.clone();
            c.svf = None;
        }
        set!(self.out, c.out);
        set!(self.side, c.side);
        let p = &mut c.params;
        set!(self.k, p.thickness.k);
        set!(self.smooth_iters, p.thickness.smooth_iters);
        set!(self.max_ray_mm, p.thickness.max_ray_mm);
        set!(self.n_d, p.thickness.n_d);
        set!(self.n_d, p.fcl.n_d);
        set!(self.n_e, p.thickness.n_e);
        set!(self.n_e, p.fcl.n_e);
        set!(self.steps, p.warp.steps);
        set!(self.threshold, p.warp.threshold);
        set!(self.tibial_order, p.fcl.curvefit.tibial_order);
        set!(self.femoral_order, p.fcl.curvefit.femoral_order);
        if let Some(m) = self.merge {
            p.fcl.merge = match m {
                MergeArg::Union => MergeMode::Union,
                MergeArg::Intersection => MergeMode::Intersection,
            };
        }
        if self.covered_area {
            p.report.denominator = ThicknessDenominator::CoveredArea;
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Slab,
    CuboidDefect,
    Shell,
    TwoLobeFc,
    TibialDisc,
    Knee,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denuded share of the footprint, in (0, 1).
    #[arg(long)]
    defect: Option<f64>,
    /// Rotate the punched defect in-plane.
    #[arg(long)]
    rotated: bool,
    #[arg(long)]
    side: Option<KneeSide>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    spacing: Option<Vec<f64>>,
    #[arg(long)]
    thickness_mm: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ThicknessMethod {
    /// Rays along smoothed SVD normals.
    Normal,
    /// Nearest outer-surface vertex.
    Nearest,
}

#[derive(Args)]
struct ThicknessArgs {
    #[arg(long)]
    seg: PathBuf,
    #[arg(long, value_enum)]
    plate: PlateArg,
    #[arg(long, value_enum, default_value = "normal")]
    method: ThicknessMethod,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TemplateArgs {
    #[arg(long)]
    template_seg: Option<PathBuf>,
    #[arg(long, conflicts_with = "dvf", requires = "template_seg")]
    svf: Option<PathBuf>,
    #[arg(long, requires = "template_seg")]
    dvf: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    steps: u32,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct FclArgs {
    #[arg(long)]
    seg: PathBuf,
    #[arg(long, value_enum)]
    plate: PlateArg,
    #[command(flatten)]
    template: TemplateArgs,
    #[arg(long, value_enum, default_value = "union")]
    merge: MergeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParcellateArgs {
    #[arg(long)]
    seg: PathBuf,
    #[arg(long, default_value = "right")]
    side: KneeSide,
    #[command(flatten)]
    template: TemplateArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InterpArg {
    Nearest,
    Linear,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, conflicts_with = "dvf", required_unless_present = "dvf")]
    svf: Option<PathBuf>,
    #[arg(long)]
    dvf: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    steps: u32,
    /// Defaults to nearest for label volumes and linear otherwise.
    #[arg(long, value_enum)]
    interp: Option<InterpArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Pearson, RMSD, CV_RMSD and pHR between paired report CSVs, per region
    /// and pooled.
    Agreement {
        #[arg(long, num_args = 1.., required = true)]
        test: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        reference: Vec<PathBuf>,
        /// pHR tolerance in FCL percentage points.
        #[arg(long, default_value_t = 10.0)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dice overlap of one label (or all nonzero labels) in two volumes.
    Dsc {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        label: Option<u16>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean squared error and local normalized cross-correlation.
    Similarity {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        return p.exit_code() as u8;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Io { .. }) | Some(Error::Format(_)) => 2,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run(a) => run(*a),
        Command::Phantom(a) => phantom(a),
        Command::Thickness(a) => thickness(a),
        Command::Fcl(a) => fcl(a),
        Command::Parcellate(a) => parcellate(a),
        Command::Warp(a) => warp(a),
        Command::Metrics(m) => metrics(m),
    }
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let cfg = a.resolve()?;
    if a.dump_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    if let Some(n) = a.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("setting up the worker pool")?;
    }
    let out = run_pipeline(&cfg)?;
    for f in &out.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

fn create_dir(p: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_json(path: &Path, v: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn phantom(a: PhantomArgs) -> anyhow::Result<()> {
    let kind = match a.kind {
        KindArg::Slab => PhantomKind::Slab,
        KindArg::CuboidDefect => PhantomKind::CuboidDefect,
        KindArg::Shell => PhantomKind::Shell,
        KindArg::TwoLobeFc => PhantomKind::TwoLobeFc,
        KindArg::TibialDisc => PhantomKind::TibialDisc,
        KindArg::Knee => PhantomKind::Knee,
    };
    let mut spec = PhantomSpec::new(kind);
    if let Some(f) = a.defect {
        spec = spec.with_defect(f);
    }
    if let Some(d) = spec.defect.as_mut() {
        d.rotated |= a.rotated;
    }
    if let Some(s) = a.side {
        spec.side = s;
    }
    if let Some(d) = a.dims {
        spec.dims = [d[0], d[1], d[2]];
    }
    if let Some(s) = a.spacing {
        spec.spacing = [s[0], s[1], s[2]];
    }
    if let Some(t) = a.thickness_mm {
        spec.thickness_mm = t;
    }
    generate(&spec, a.seed)?.save(&a.out)?;
    Ok(())
}

fn load_subject(path: &Path) -> anyhow::Result<LabelVolume> {
    let v = load_labels(path, &LabelSchema::knee_default())?;
    Ok(LabelVolume::new(reorient_ras(&v.labels), v.schema)?)
}

fn warped_templates(
    t: &TemplateArgs,
    subject: &LabelVolume,
) -> anyhow::Result<BTreeMap<Plate, kneemorph::BinaryMask>> {
    let Some(path) = &t.template_seg else {
        return Ok(BTreeMap::new());
    };
    let template = load_subject(path)?;
    template
        .geometry()
        .ensure_same_grid(subject.geometry(), "template and subject segmentations")?;
    let field = match (&t.svf, &t.dvf) {
        (Some(p), _) => Some(integrate_svf(&VelocityField::load(p)?, t.steps)?),
        (_, Some(p)) => Some(DeformationField::load(p)?),
        _ => None,
    };
    Ok(kneemorph::pipeline::warp_template(
        &template,
        field.as_ref(),
        &LabelSchema::knee_default(),
        t.threshold,
    )?)
}

fn thickness(a: ThicknessArgs) -> anyhow::Result<()> {
    let labels = load_subject(&a.seg)?;
    let plate = Plate::from(a.plate);
    let cart = labels.mask(plate.cartilage_label());
    let bone = labels.mask(plate.bone_label());
    let mut params = ThicknessParams::default();
    if let Some(k) = a.k {
        params.k = k;
    }
    let r = map_thickness(&cart, &bone, &params)?;
    let map = match a.method {
        ThicknessMethod::Normal => r.thickness.clone(),
        ThicknessMethod::Nearest => thickness_3dnn(&r.surfaces.inner, &r.surfaces.outer)?,
    };
    create_dir(&a.out)?;
    let mesh = &r.surfaces.mesh;
    map.write_csv(a.out.join("thickness.csv"), mesh)?;
    let mut dense = vec![-1.0f32; mesh.n_vertices()];
    for (v, t) in map.vertices.iter().zip(&map.values) {
        if let Some(t) = t {
            dense[*v as usize] = *t as f32;
        }
    }
    PlyMesh::from_surface(mesh)
        .with_comment("thickness in mm, -1 where undefined")
        .with_float("thickness", &dense)
        .with_flag("inner", r.surfaces.inner.flags())
        .write(a.out.join("thickness.ply"), PlyFormat::default())?;
    let mut defined: Vec<f64> = map.values.iter().flatten().copied().collect();
    defined.sort_by(f64::total_cmp);
    let mean = defined.iter().sum::<f64>() / defined.len().max(1) as f64;
    let median = defined.get(defined.len() / 2).copied();
    write_json(
        &a.out.join("thickness.json"),
        &serde_json::json!({
            "plate": plate,
            "inner_vertices": map.vertices.len(),
            "defined": defined.len(),
            "mean_mm": mean,
            "median_mm": median,
        }),
    )
}

fn fcl(a: FclArgs) -> anyhow::Result<()> {
    let labels = load_subject(&a.seg)?;
    let plate = Plate::from(a.plate);
    let warped = warped_templates(&a.template, &labels)?;
    let params = kneemorph::fcl::FclParams {
        merge: match a.merge {
            MergeArg::Union => MergeMode::Union,
            MergeArg::Intersection => MergeMode::Intersection,
        },
        ..Default::default()
    };
    let results = estimate_plate_fcl(&labels, &warped, &params)?;
    let Some((_, _, r)) = results.into_iter().find(|(p, _, _)| *p == plate) else {
        bail!("no {} cartilage in {}", plate.name(), a.seg.display());
    };
    create_dir(&a.out)?;
    PlyMesh::from_surface(&r.bone_surface)
        .with_flag("footprint", r.footprint.flags())
        .with_flag("pseudo_healthy", r.pseudo_healthy_patch.flags())
        .with_flag("denuded", r.fcl_patch.flags())
        .write(a.out.join("fcl.ply"), PlyFormat::default())?;
    let pseudo_area: f64 = r.pseudo_faces().iter().map(|&f| r.bone_surface.face_area(f as usize)).sum();
    let lost_area: f64 = r.fcl_faces.iter().map(|&f| r.bone_surface.face_area(f as usize)).sum();
    write_json(
        &a.out.join("fcl.json"),
        &serde_json::json!({
            "plate": plate,
            "fcl_percent": r.fcl_percent,
            "pseudo_healthy_area_mm2": pseudo_area,
            "denuded_area_mm2": lost_area,
        }),
    )
}

fn parcellate(a: ParcellateArgs) -> anyhow::Result<()> {
    let labels = load_subject(&a.seg)?;
    let warped = warped_templates(&a.template, &labels)?;
    let results = estimate_plate_fcl(&labels, &warped, &Default::default())?;
    if results.is_empty() {
        bail!("no cartilage plates in {}", a.seg.display());
    }
    let pseudo = results.iter().map(|(p, _, r)| (*p, r.pseudo_healthy_patch.clone())).collect();
    let (parc, notch) = parcellate_plates(&pseudo, a.side)?;
    create_dir(&a.out)?;

    let mut atlas = kneemorph::Volume::filled(labels.geometry().clone(), 0u16);
    let mut csv = String::from("plate,region,vertex_area_mm2,plate_fraction\n");
    for part in &parc.parts {
        let cart = &results.iter().find(|(p, _, _)| *p == part.plate).expect("parcelled plates have results").1;
        let single = SurfaceParcellation {
            side: a.side,
            parts: vec![part.clone()],
        };
        let vol = labels_to_volume(&single, cart)?;
        for (dst, &c) in atlas.data.iter_mut().zip(&vol.labels.data) {
            if c != 0 {
                *dst = c;
            }
        }
        let areas = part.vertex_carried_areas();
        let total: f64 = areas.values().sum();
        for (r, area) in &areas {
            csv.push_str(&format!("{},{},{:.6},{:.6}\n", part.plate.name(), r, area, area / total));
        }

        let mut codes = vec![0i32; part.patch.parent().n_vertices()];
        for (v, r) in part.patch.members().into_iter().zip(&part.regions) {
            codes[v as usize] = r.code() as i32;
        }
        PlyMesh::from_surface(part.patch.parent())
            .with_int("region", &codes)
            .write(
                a.out.join(format!("regions_{}.ply", part.plate.name().to_lowercase())),
                PlyFormat::default(),
            )?;
    }
    std::fs::write(a.out.join("regions.csv"), csv).context("writing regions.csv")?;
    save_labels(a.out.join("atlas.nii.gz"), &LabelVolume::new(atlas, Region::schema())?)?;
    if let Some(n) = notch {
        write_json(&a.out.join("notch.json"), &serde_json::to_value(n)?)?;
    }
    Ok(())
}

fn warp(a: WarpArgs) -> anyhow::Result<()> {
    let field = match (&a.svf, &a.dvf) {
        (Some(p), _) => integrate_svf(&VelocityField::load(p)?, a.steps)?,
        (_, Some(p)) => DeformationField::load(p)?,
        _ => bail!("give --svf or --dvf"),
    };
    match load_volume(&a.input, &LabelSchema::knee_default())? {
        LoadedVolume::Labels(v) => {
            if matches!(a.interp, Some(InterpArg::Linear)) {
                bail!("label volumes can only be warped with nearest-neighbour interpolation");
            }
            save_labels(&a.out, &apply_field(&v, &field, Interpolation::Nearest)?)?;
        }
        LoadedVolume::Scalar(v) => {
            let interp = match a.interp {
                Some(InterpArg::Nearest) => Interpolation::Nearest,
                _ => Interpolation::Trilinear,
            };
            save_scalar(&a.out, &apply_field(&v, &field, interp)?)?;
        }
    }
    Ok(())
}

fn metrics(m: MetricsCommand) -> anyhow::Result<()> {
    match m {
        MetricsCommand::Agreement {
            test,
            reference,
            tolerance,
            out,
        } => {
            let read = |ps: &[PathBuf]| ps.iter().map(RegionalReport::read_csv).collect::<Result<Vec<_>, _>>();
            let table = agreement(&read(&test)?, &read(&reference)?, tolerance)?;
            let mut buf = Vec::new();
            table.write_csv_to(&mut buf)?;
            emit(out.as_deref(), &String::from_utf8(buf)?)
        }
        MetricsCommand::Dsc { a, b, label, out } => {
            let schema = LabelSchema::knee_default();
            let (va, vb) = (load_labels(&a, &schema)?, load_labels(&b, &schema)?);
            let (ma, mb) = match label {
                Some(l) => (va.mask(l), vb.mask(l)),
                None => (va.nonzero(), vb.nonzero()),
            };
            let v = serde_json::json!({ "label": label, "dsc": dsc(&ma, &mb)? });
            emit(out.as_deref(), &(serde_json::to_string_pretty(&v)? + "\n"))
        }
        MetricsCommand::Similarity { a, b, window, out } => {
            let (va, vb) = (load_scalar(&a)?, load_scalar(&b)?);
            let v = serde_json::json!({
                "mse": mse_image(&va, &vb)?,
                "lncc": lncc_image(&va, &vb, window)?,
                "window": window,
            });
            emit(out.as_deref(), &(serde_json::to_string_pretty(&v)? + "\n"))
        }
    }
}
