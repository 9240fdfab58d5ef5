//! The `crowdpose-kit` command line.
//!
//! Every subcommand writes its data to files (or standard output for
//! reports) and leaves a `manifest.json` run record next to its outputs.
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::annotations::{
    convert_dataset, parse_dataset, validate, Dataset, ImageRecord, InputFormat, KeypointMapping,
    PersonInstance, PoseSchema,
};
use crate::augment::{augment_images, AugmentConfig, AugmentMethod, CutoutInventory};
use crate::crowd_metrics::{dataset_histogram_with, CountingMode};
use crate::evaluator::{eval_by_crowding, OksConfig};
use crate::heatmaps::{bbox_to_crop, decode, encode, CropTransform, HeatmapPair, DEFAULT_CONF_THRESHOLD};
use crate::occloss::{grad_check, LossConfig, DEFAULT_FD_STEP, GRAD_CHECK_SHAPE};
use crate::raster::RasterImage;
use crate::synthgen::{generate_corpus, CorpusConfig, PoseTemplate, SceneConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const MANIFEST_NAME: &str = "manifest.json";
/// Pass mark for `losscheck`.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "crowdpose-kit", version, about = "Crowded-scene pose data tooling")]
pub struct Cli {
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the run manifest (default: next to the outputs).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert annotations between formats and keypoint schemas.
    Convert(ConvertArgs),
    /// Check a dataset for structural problems.
    Validate(ValidateArgs),
    /// Paste occluding cutouts onto people.
    Augment(AugmentArgs),
    /// CrowdIndex statistics of a dataset.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic crowd corpus.
    Gen(GenArgs),
    /// Encode targets or decode predictions.
    Heatmap(HeatmapArgs),
    /// Finite-difference check of the loss gradient.
    Losscheck(LosscheckArgs),
    /// OKS-based AP per crowding level.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FromFormat {
    Jta,
    Coco,
    Native,
    Auto,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ToSchema {
    Crowdpose,
    Native,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long, value_enum, default_value = "auto")]
    pub from: FromFormat,
    #[arg(long, value_enum, default_value = "crowdpose")]
    pub to: ToSchema,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// JSON list of source indices, one per target keypoint.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    pub from: FromFormat,
    /// Report file; printed to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long, default_value = "objects")]
    pub method: String,
    #[arg(long)]
    pub inventory: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Directory with `<image id>.pam` or `.ppm` files.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file overriding fields of the augmentation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub visible_only: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub scenes: usize,
    /// `uniform`, `easy`, or a JSON file of bin weights.
    #[arg(long, default_value = "uniform")]
    pub target: String,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// JSON scene config.
    #[arg(long)]
    pub scene_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.03)]
    pub tolerance: f64,
    /// Skip writing rasters and depth maps.
    #[arg(long)]
    pub no_images: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(subcommand)]
    pub action: HeatmapAction,
}

#[derive(Debug, Subcommand)]
pub enum HeatmapAction {
    /// Write one dual-branch target per person.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = crate::heatmaps::DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a directory of heatmaps back into a prediction dataset.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct LosscheckArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.5, 3.0])]
    pub alpha: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// JSON list of per-keypoint sigmas or a full OKS config.
    #[arg(long)]
    pub sigmas: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub label: String,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

type CmdResult<T> = Result<T, Failure>;

/// Files read and written by one run.
#[derive(Default)]
struct Io {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub seed: u64,
    /// sha256 over the argv (minus `--jobs`) and every input file.
    pub config_digest: String,
    pub duration_secs: f64,
    /// sha256 per output file.
    pub outputs: BTreeMap<String, String>,
}

/// Runs the command line and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    if cli.jobs == Some(0) {
        eprintln!("error: --jobs must be at least 1");
        return EXIT_USAGE;
    }
    let start = Instant::now();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_DOMAIN;
        }
    };
    let result = pool.install(|| run(&cli));
    let io = match result {
        Ok(io) => io,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            return EXIT_DOMAIN;
        }
    };
    match write_manifest(&cli, &args, &io, start.elapsed().as_secs_f64()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: writing manifest: {e:#}");
            EXIT_DOMAIN
        }
    }
}

fn run(cli: &Cli) -> CmdResult<Io> {
    match &cli.command {
        Command::Convert(a) => cmd_convert(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Augment(a) => cmd_augment(a, cli.seed),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gen(a) => cmd_gen(a, cli.seed),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Losscheck(a) => cmd_losscheck(a, cli.seed),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn format_of(from: FromFormat, bytes: &[u8], path: &Path) -> anyhow::Result<InputFormat> {
    Ok(match from {
        FromFormat::Jta => InputFormat::JtaLike,
        FromFormat::Coco => InputFormat::CocoLike,
        FromFormat::Native => InputFormat::Native,
        FromFormat::Auto => match InputFormat::sniff(bytes) {
            Some(f) => f,
            None => bail!("{}: cannot tell the annotation format; pass --from", path.display()),
        },
    })
}

fn load_dataset(path: &Path, from: FromFormat) -> anyhow::Result<Dataset> {
    let bytes = read(path)?;
    let format = format_of(from, &bytes, path)?;
    parse_dataset(&bytes, format).with_context(|| format!("parsing {}", path.display()))
}

fn file_sibling_io(inputs: Vec<PathBuf>, out: &Path) -> Io {
    Io {
        inputs,
        outputs: vec![out.to_path_buf()],
        manifest_dir: out.parent().map(Path::to_path_buf),
    }
}

fn cmd_convert(a: &ConvertArgs) -> CmdResult<Io> {
    let ds = load_dataset(&a.input, a.from)?;
    let out = match a.to {
        ToSchema::Native => ds,
        ToSchema::Crowdpose => {
            let target = PoseSchema::crowdpose();
            let mapping = match &a.mapping {
                Some(p) => KeypointMapping::from_json(&read(p)?)
                    .with_context(|| format!("mapping file {}", p.display()))?,
                None if ds.schema.keypoint_names == target.keypoint_names => {
                    KeypointMapping((0..target.count()).collect())
                }
                None if ds.schema.count() == 22 => KeypointMapping::jta_to_crowdpose(),
                None => KeypointMapping::by_name(&ds.schema, &target).map_err(anyhow::Error::from)?,
            };
            convert_dataset(&ds, target, &mapping).map_err(anyhow::Error::from)?
        }
    };
    write(&a.out, out.to_native_json().as_bytes())?;
    let mut inputs = vec![a.input.clone()];
    inputs.extend(a.mapping.clone());
    Ok(file_sibling_io(inputs, &a.out))
}

fn cmd_validate(a: &ValidateArgs) -> CmdResult<Io> {
    let ds = load_dataset(&a.input, a.from)?;
    let report = validate(&ds);
    let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    let io = match &a.out {
        Some(out) => {
            write(out, body.as_bytes())?;
            file_sibling_io(vec![a.input.clone()], out)
        }
        None => {
            print!("{body}");
            Io {
                inputs: vec![a.input.clone()],
                ..Default::default()
            }
        }
    };
    if !report.is_clean() {
        return Err(Failure::Domain(anyhow::anyhow!(
            "{} violations in {}",
            report.violations.len(),
            a.input.display()
        )));
    }
    Ok(io)
}

fn find_image(dir: &Path, id: &str) -> anyhow::Result<PathBuf> {
    if id.contains(['/', '\\']) || id.starts_with('.') {
        bail!("image id {id:?} is not a plain file name");
    }
    for ext in ["pam", "ppm"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("no raster for image {id:?} in {}", dir.display())
}

fn cmd_augment(a: &AugmentArgs, seed: u64) -> CmdResult<Io> {
    let method: AugmentMethod = a.method.parse().map_err(|e| Failure::Usage(format!("{e}")))?;
    let mut config = match &a.config {
        Some(p) => {
            let mut base = serde_json::to_value(AugmentConfig::default()).expect("config serializes");
            let over: serde_json::Value = serde_json::from_slice(&read(p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            if let (Some(b), Some(o)) = (base.as_object_mut(), over.as_object()) {
                for (k, v) in o {
                    b.insert(k.clone(), v.clone());
                }
            }
            serde_json::from_value::<AugmentConfig>(base)
                .with_context(|| format!("augmentation config {}", p.display()))?
        }
        None => AugmentConfig::default(),
    };
    config.method = method;
    config.seed = seed;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let inventory = CutoutInventory::load_dir(&a.inventory).map_err(anyhow::Error::from)?;
    let ds = load_dataset(&a.input, FromFormat::Auto)?;
    let paths: Vec<PathBuf> = ds
        .images
        .iter()
        .map(|im| find_image(&a.images, &im.id))
        .collect::<anyhow::Result<_>>()?;
    let images: Vec<RasterImage> = paths
        .par_iter()
        .map(|p| {
            RasterImage::decode_netpbm(&read(p)?).with_context(|| format!("decoding {}", p.display()))
        })
        .collect::<anyhow::Result<_>>()?;
    let results = augment_images(&images, &ds.images, &config, &inventory).map_err(anyhow::Error::from)?;

    let img_dir = a.out.join("images");
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    let written: Vec<PathBuf> = results
        .par_iter()
        .map(|r| {
            let p = img_dir.join(format!("{}.pam", r.record.id));
            write(&p, &r.image.to_pam_bytes())?;
            Ok(p)
        })
        .collect::<anyhow::Result<_>>()?;
    let mut out_ds = Dataset::new(ds.schema.clone());
    out_ds.meta = ds.meta.clone();
    out_ds.meta.insert("augmentation".into(), serde_json::to_value(config).expect("config serializes"));
    out_ds.images = results.iter().map(|r| r.record.clone()).collect();
    let ann = a.out.join("annotations.json");
    write(&ann, out_ds.to_native_json().as_bytes())?;
    let logs: Vec<_> = results.iter().map(|r| &r.log).collect();
    let log_path = a.out.join("augment_log.json");
    write(&log_path, (serde_json::to_string_pretty(&logs).expect("log serializes") + "\n").as_bytes())?;

    let mut inputs = vec![a.input.clone(), a.inventory.clone()];
    inputs.extend(paths);
    inputs.extend(a.config.clone());
    let mut outputs = written;
    outputs.push(ann);
    outputs.push(log_path);
    Ok(Io {
        inputs,
        outputs,
        manifest_dir: Some(a.out.clone()),
    })
}

fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult<Io> {
    if a.bins == 0 {
        return Err(Failure::Usage("--bins must be at least 1".into()));
    }
    let ds = load_dataset(&a.input, FromFormat::Auto)?;
    let mode = if a.visible_only {
        CountingMode::VisibleOnly
    } else {
        CountingMode::Labeled
    };
    let stats = dataset_histogram_with(&ds, a.bins, mode).map_err(anyhow::Error::from)?;
    let body = json!({
        "counting_mode": mode,
        "images": ds.images.len(),
        "frequencies": stats.histogram.frequencies(),
        "stats": stats,
    });
    write(&a.out, (serde_json::to_string_pretty(&body).expect("stats serialize") + "\n").as_bytes())?;
    Ok(file_sibling_io(vec![a.input.clone()], &a.out))
}

fn cmd_gen(a: &GenArgs, seed: u64) -> CmdResult<Io> {
    if a.bins == 0 {
        return Err(Failure::Usage("--bins must be at least 1".into()));
    }
    let mut inputs = Vec::new();
    let mut scene = match &a.scene_config {
        Some(p) => {
            inputs.push(p.clone());
            serde_json::from_slice::<SceneConfig>(&read(p)?)
                .with_context(|| format!("scene config {}", p.display()))?
        }
        None => SceneConfig::default(),
    };
    scene.seed = seed;
    let mut cfg = CorpusConfig::uniform(a.scenes, a.bins, scene);
    cfg.tolerance = a.tolerance;
    match a.target.as_str() {
        "uniform" => {}
        "easy" => {
            cfg.target_histogram = vec![0.0; a.bins];
            cfg.target_histogram[0] = 1.0;
        }
        file => {
            let p = PathBuf::from(file);
            if !p.exists() {
                return Err(Failure::Usage(format!(
                    "--target must be uniform, easy or an existing file, got {file:?}"
                )));
            }
            cfg.target_histogram = serde_json::from_slice(&read(&p)?)
                .with_context(|| format!("target histogram {}", p.display()))?;
            inputs.push(p);
        }
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let corpus = generate_corpus(&cfg, &PoseTemplate::builtin()).map_err(anyhow::Error::from)?;

    let mut outputs = Vec::new();
    if !a.no_images {
        let (img_dir, depth_dir) = (a.out.join("images"), a.out.join("depth"));
        for d in [&img_dir, &depth_dir] {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        let written: Vec<[PathBuf; 2]> = corpus
            .geometries
            .par_iter()
            .zip(corpus.dataset.images.par_iter())
            .map(|(g, im)| {
                let r = g.render();
                let ip = img_dir.join(format!("{}.pam", im.id));
                let dp = depth_dir.join(format!("{}.pam", im.id));
                write(&ip, &r.raster.to_pam_bytes())?;
                write(&dp, &r.surfaces.to_pam_bytes())?;
                Ok([ip, dp])
            })
            .collect::<anyhow::Result<_>>()?;
        outputs.extend(written.into_iter().flatten());
    }
    let ann = a.out.join("annotations.json");
    write(&ann, corpus.dataset.to_native_json().as_bytes())?;
    outputs.push(ann);
    Ok(Io {
        inputs,
        outputs,
        manifest_dir: Some(a.out.clone()),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct HeatmapEntry {
    file: String,
    image: usize,
    person: usize,
    bbox: crate::annotations::BBox,
    transform: CropTransform,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeatmapIndex {
    schema: PoseSchema,
    sigma: f64,
    images: Vec<ImageRecord>,
    entries: Vec<HeatmapEntry>,
}

fn cmd_heatmap(a: &HeatmapArgs) -> CmdResult<Io> {
    match &a.action {
        HeatmapAction::Encode { input, sigma, out } => {
            if !(*sigma > 0.0) {
                return Err(Failure::Usage("--sigma must be positive".into()));
            }
            let ds = load_dataset(input, FromFormat::Auto)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let jobs: Vec<(usize, usize)> = ds
                .images
                .iter()
                .enumerate()
                .flat_map(|(i, im)| (0..im.persons.len()).map(move |p| (i, p)))
                .collect();
            let entries: Vec<HeatmapEntry> = jobs
                .par_iter()
                .map(|&(i, p)| {
                    let person = &ds.images[i].persons[p];
                    let t = bbox_to_crop(&person.bbox);
                    let target = encode(&person.pose, &t, *sigma);
                    let file = format!("{i:05}_{p:03}.hm");
                    let mut buf = Vec::new();
                    target.pair.write_dump(&mut buf).map_err(anyhow::Error::from)?;
                    write(&out.join(&file), &buf)?;
                    Ok(HeatmapEntry {
                        file,
                        image: i,
                        person: p,
                        bbox: person.bbox,
                        transform: t,
                    })
                })
                .collect::<anyhow::Result<_>>()?;
            let index = HeatmapIndex {
                schema: ds.schema.clone(),
                sigma: *sigma,
                images: ds
                    .images
                    .iter()
                    .map(|im| ImageRecord {
                        persons: Vec::new(),
                        ..im.clone()
                    })
                    .collect(),
                entries,
            };
            let mut outputs: Vec<PathBuf> = index.entries.iter().map(|e| out.join(&e.file)).collect();
            let ip = out.join("index.json");
            write(&ip, (serde_json::to_string_pretty(&index).expect("index serializes") + "\n").as_bytes())?;
            outputs.push(ip);
            Ok(Io {
                inputs: vec![input.clone()],
                outputs,
                manifest_dir: Some(out.clone()),
            })
        }
        HeatmapAction::Decode { input, threshold, out } => {
            let ip = input.join("index.json");
            let index: HeatmapIndex = serde_json::from_slice(&read(&ip)?)
                .with_context(|| format!("parsing {}", ip.display()))?;
            let decoded: Vec<PersonInstance> = index
                .entries
                .par_iter()
                .map(|e| {
                    let path = input.join(&e.file);
                    let pair = HeatmapPair::read_dump(&read(&path)?[..])
                        .with_context(|| format!("reading {}", path.display()))?;
                    let d = decode(&pair, &e.transform, *threshold);
                    Ok(PersonInstance::new(e.bbox, d.to_pose()).with_score(d.mean_confidence()))
                })
                .collect::<anyhow::Result<_>>()?;
            let mut ds = Dataset::new(index.schema.clone());
            ds.images = index.images.clone();
            for (e, p) in index.entries.iter().zip(decoded) {
                let im = ds
                    .images
                    .get_mut(e.image)
                    .with_context(|| format!("entry {} points at missing image {}", e.file, e.image))?;
                im.persons.push(p);
            }
            write(out, ds.to_native_json().as_bytes())?;
            let mut inputs = vec![ip];
            inputs.extend(index.entries.iter().map(|e| input.join(&e.file)));
            Ok(file_sibling_io(inputs, out))
        }
    }
}

fn cmd_losscheck(a: &LosscheckArgs, seed: u64) -> CmdResult<Io> {
    if a.trials == 0 || !(a.step > 0.0) {
        return Err(Failure::Usage("--trials and --step must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for &alpha in &a.alpha {
        let cfg = LossConfig::new(GRAD_CHECK_SHAPE.0).with_alpha(alpha);
        let err = grad_check(&cfg, a.trials, a.step, seed).map_err(anyhow::Error::from)?;
        worst = worst.max(err);
        rows.push(json!({ "alpha": alpha, "max_relative_error": err }));
    }
    let pass = worst < GRAD_TOLERANCE;
    let body = serde_json::to_string_pretty(&json!({
        "trials": a.trials,
        "step": a.step,
        "tolerance": GRAD_TOLERANCE,
        "results": rows,
        "max_relative_error": worst,
        "pass": pass,
    }))
    .expect("report serializes")
        + "\n";
    let io = match &a.out {
        Some(out) => {
            write(out, body.as_bytes())?;
            file_sibling_io(vec![], out)
        }
        None => {
            print!("{body}");
            Io::default()
        }
    };
    eprintln!("losscheck: max relative error {worst:.3e} ({})", if pass { "pass" } else { "FAIL" });
    if !pass {
        return Err(Failure::Domain(anyhow::anyhow!(
            "gradient check failed: {worst:.3e} >= {GRAD_TOLERANCE:e}"
        )));
    }
    Ok(io)
}

fn cmd_eval(a: &EvalArgs) -> CmdResult<Io> {
    let gt = load_dataset(&a.gt, FromFormat::Auto)?;
    let pred = load_dataset(&a.pred, FromFormat::Auto)?;
    let cfg = match &a.sigmas {
        Some(p) => OksConfig::from_json(&read(p)?).with_context(|| format!("sigmas file {}", p.display()))?,
        None => OksConfig::uniform(gt.schema.count()),
    };
    let report = eval_by_crowding(&pred, &gt, &cfg).map_err(anyhow::Error::from)?;
    write(&a.out, (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes())?;
    let mut io = file_sibling_io(vec![a.gt.clone(), a.pred.clone()], &a.out);
    io.inputs.extend(a.sigmas.clone());
    if let Some(csv) = &a.csv {
        write(csv, report.to_csv(&a.label).as_bytes())?;
        io.outputs.push(csv.clone());
    }
    Ok(io)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Regular files under `path`, sorted; `path` itself if it is a file.
fn files_under(path: &Path) -> Vec<PathBuf> {
    if path.is_file() {
        return vec![path.to_path_buf()];
    }
    let mut out = Vec::new();
    if let Ok(rd) = fs::read_dir(path) {
        let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for e in entries {
            out.extend(files_under(&e));
        }
    }
    out
}

/// argv without the program name and without `--jobs`, which never affects outputs.
fn normalized_args(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args.iter().skip(1) {
        if skip {
            skip = false;
            continue;
        }
        if a == "--jobs" {
            skip = true;
            continue;
        }
        if a.starts_with("--jobs=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}

fn write_manifest(cli: &Cli, args: &[String], io: &Io, duration: f64) -> anyhow::Result<()> {
    let mut h = Sha256::new();
    for a in normalized_args(args) {
        h.update((a.len() as u64).to_le_bytes());
        h.update(a.as_bytes());
    }
    for input in &io.inputs {
        for f in files_under(input) {
            let bytes = read(&f)?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    let base = io.manifest_dir.clone();
    let mut outputs = BTreeMap::new();
    for o in &io.outputs {
        let key = match &base {
            Some(b) => o.strip_prefix(b).unwrap_or(o).to_string_lossy().into_owned(),
            None => o.to_string_lossy().into_owned(),
        };
        outputs.insert(key, sha256_hex(&read(o)?));
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: args.to_vec(),
        seed: cli.seed,
        config_digest: hex::encode(h.finalize()),
        duration_secs: duration,
        outputs,
    };
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let target = match (&cli.manifest, &base) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(dir)) => Some(dir.join(MANIFEST_NAME)),
        (None, None) => None,
    };
    match target {
        Some(p) => write(&p, body.as_bytes()),
        None => {
            eprint!("{body}");
            Ok(())
        }
    }
}

/// Reads a manifest written by a previous run.
pub fn read_manifest(path: &Path) -> anyhow::Result<RunManifest> {
    serde_json::from_slice(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}
