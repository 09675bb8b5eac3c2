//! Command-line front end. [`run`] parses arguments, dispatches a
//! subcommand and returns the process exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | data error (missing or malformed input, failed frame) |
//! | 2 | check failure (gradient check above tolerance) |
//! | 3 | usage error (bad flags, unknown target, bad step) |

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::awa::{self, AwaParams};
use crate::error::{Error, Result};
use crate::eval3d::{average_precision, ApOptions, Detection, GroundTruth, Interpolation};
use crate::gradcheck::{grad_check, GradCheckReport, GradTarget};
use crate::losses::{
    aca_agent, aca_group, focal_loss, l1_distance, masked_l1, smooth_l1, total_loss, AgentBatch, AgentEmbedding,
    GroupBatch, LossCoefficients, LossParts, LossReport, Reduction,
};
use crate::numeric::fmt_sig;
use crate::pointcloud::{load_point_cloud, load_scene, save_point_cloud, CloudFormat, SceneManifest};
use crate::toy::{descend, prepare_flows, synthetic_scene, toy_config, EncoderParams, FusionParams, PipelineConfig};
use crate::weather::{corrupt_scene, FogParams, RainParams, SnowParams, WeatherConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_CHECK: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const PARTIAL_MARKER: &str = ".partial";

#[derive(Debug, Parser)]
#[command(name = "v2x-dgw", version, about = "Adverse-weather LiDAR corruption, augmentation, alignment losses and 3D AP")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Condition {
    Clean,
    Fog,
    Rain,
    Snow,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt every scene manifest under a dataset directory.
    GenWeather {
        dataset_dir: PathBuf,
        out_dir: PathBuf,
        /// Condition with default parameters; ignored when --config is given.
        #[arg(long, value_enum)]
        condition: Option<Condition>,
    },
    /// Run weather augmentation on one cloud and report statistics.
    AwaPreview {
        cloud: PathBuf,
        /// Write reduced and augmented clouds here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate loss kernels on a JSON fixture.
    Losses { fixture: PathBuf },
    /// Finite-difference check of analytic gradients.
    Gradcheck {
        /// Targets to check (default: all).
        #[arg(long = "target")]
        targets: Vec<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5, allow_negative_numbers = true)]
        eps: f64,
    },
    /// Gradient descent on the toy encode-fuse pipeline.
    Toyrun {
        /// Scene manifest; a synthetic scene is used when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        agents: usize,
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Average precision of detections against ground truth.
    Eval {
        detections: PathBuf,
        ground_truth: PathBuf,
        #[arg(long = "iou", default_values_t = vec![0.5, 0.7])]
        iou_thresholds: Vec<f64>,
        /// Ignore boxes farther than this (metres, x-y plane).
        #[arg(long)]
        range: Option<f64>,
        /// Match on bird's-eye-view IoU.
        #[arg(long)]
        bev: bool,
        #[arg(long, default_value = "all_point")]
        interp: String,
    },
}

enum Failure {
    Data(Error),
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownTarget(_) | Error::InvalidStep(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out` and diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let c = &cli.common;
    if c.jobs == Some(0) {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::GenWeather {
            dataset_dir,
            out_dir,
            condition,
        } => {
            let cfg = match (&c.config, condition) {
                (Some(path), _) => read_json::<WeatherConfig>(path)?,
                (None, Some(cond)) => default_weather(*cond),
                (None, None) => return Err(Failure::Usage("gen-weather needs --condition or --config".into())),
            };
            cmd_gen_weather(dataset_dir, out_dir, &cfg, c.seed.unwrap_or(0), c.jobs, c.json, out)
        }
        Command::AwaPreview { cloud, out_dir } => {
            let params = match &c.config {
                Some(path) => read_json::<AwaParams>(path)?,
                None => AwaParams::default(),
            };
            cmd_awa_preview(cloud, &params, c.seed.unwrap_or(0), out_dir.as_deref(), c.json, out)
        }
        Command::Losses { fixture } => cmd_losses(fixture, c.json, out),
        Command::Gradcheck { targets, trials, eps } => {
            cmd_gradcheck(targets, *trials, *eps, c.seed.unwrap_or(0), c.jobs, c.json, out)
        }
        Command::Toyrun {
            scene,
            steps,
            lr,
            channels,
            agents,
            points,
        } => {
            let opts = ToyRun {
                scene: scene.as_deref(),
                steps: *steps,
                lr: *lr,
                channels: *channels,
                agents: *agents,
                points: *points,
            };
            cmd_toyrun(&opts, c.config.as_deref(), c.seed, c.json, out)
        }
        Command::Eval {
            detections,
            ground_truth,
            iou_thresholds,
            range,
            bev,
            interp,
        } => {
            let interpolation: Interpolation = interp.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            cmd_eval(detections, ground_truth, iou_thresholds, *range, *bev, interpolation, c.json, out)
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CmdResult {
    writeln!(out, "{text}").map_err(|e| Failure::Data(Error::io("<stdout>", e)))
}

fn emit_json(out: &mut dyn Write, v: &impl Serialize) -> CmdResult {
    emit(out, &serde_json::to_string_pretty(v).expect("serializable output"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::SchemaViolation(format!("{}: {e}", path.display())))
}

fn default_weather(c: Condition) -> WeatherConfig {
    match c {
        Condition::Clean => WeatherConfig::Clean,
        Condition::Fog => WeatherConfig::Fog(FogParams::default()),
        Condition::Rain => WeatherConfig::Rain(RainParams::default()),
        Condition::Snow => WeatherConfig::Snow(SnowParams::default()),
    }
}

/// SHA-256 of the config's canonical (field-ordered, compact) JSON.
pub fn config_hash(cfg: &WeatherConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))
}

fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AgentRecord {
    pub agent_id: String,
    /// Relative to the output directory.
    pub output: String,
    pub input_points: usize,
    pub output_points: usize,
    pub mean_intensity_before: Option<f64>,
    pub mean_intensity_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FrameRecord {
    pub manifest: String,
    pub frame_id: String,
    pub agents: Vec<AgentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct FrameFailure {
    pub manifest: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub condition: String,
    pub config_hash: String,
    pub seed: u64,
    pub frames: Vec<FrameRecord>,
    pub failures: Vec<FrameFailure>,
}

fn find_manifests(dataset_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !dataset_dir.is_dir() {
        return Err(Error::FileNotFound(dataset_dir.to_path_buf()));
    }
    let skip = fs::canonicalize(out_dir).ok();
    let mut found = Vec::new();
    let walker = WalkDir::new(dataset_dir)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| skip.as_ref().map_or(true, |s| fs::canonicalize(e.path()).ok().as_ref() != Some(s)));
    for entry in walker {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dataset_dir).to_path_buf();
            Error::Io {
                path,
                source: e.into(),
            }
        })?;
        let p = entry.path();
        if entry.file_type().is_file()
            && p.extension().is_some_and(|x| x == "json")
            && p.file_name().is_some_and(|n| n != RUN_MANIFEST)
        {
            found.push(p.strip_prefix(dataset_dir).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(found)
}

/// Cloud location inside the mirrored tree. Paths that would leave the
/// manifest's directory are flattened to their file name.
fn mirrored_cloud(cloud: &Path) -> PathBuf {
    let escapes = cloud
        .components()
        .any(|c| matches!(c, Component::ParentDir | Component::RootDir | Component::Prefix(_)));
    if escapes {
        PathBuf::from(cloud.file_name().unwrap_or(cloud.as_os_str()))
    } else {
        cloud.to_path_buf()
    }
}

fn process_frame(dataset_dir: &Path, out_dir: &Path, rel: &Path, cfg: &WeatherConfig, seed: u64) -> Result<FrameRecord> {
    let src_manifest = dataset_dir.join(rel);
    let src_base = src_manifest.parent().expect("manifest has a parent");
    let dst_manifest = out_dir.join(rel);
    let dst_base = dst_manifest.parent().expect("manifest has a parent").to_path_buf();
    let mut manifest = SceneManifest::read(&src_manifest)?;
    let scene = load_scene(&src_manifest)?;
    let corrupted = corrupt_scene(&scene, cfg, seed)?;

    let mut agents = Vec::with_capacity(manifest.agents.len());
    for ((entry, before), after) in manifest.agents.iter_mut().zip(&scene.agents).zip(&corrupted.agents) {
        let src_cloud = src_base.join(&entry.cloud);
        entry.cloud = mirrored_cloud(&entry.cloud);
        let dst_cloud = dst_base.join(&entry.cloud);
        if let Some(parent) = dst_cloud.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        if matches!(cfg, WeatherConfig::Clean) {
            fs::copy(&src_cloud, &dst_cloud).map_err(|e| Error::io(&src_cloud, e))?;
        } else {
            save_point_cloud(&after.cloud, &dst_cloud, CloudFormat::from_path(&src_cloud))?;
        }
        agents.push(AgentRecord {
            agent_id: entry.agent_id.clone(),
            output: slash_path(dst_cloud.strip_prefix(out_dir).expect("under out_dir")),
            input_points: before.cloud.len(),
            output_points: after.cloud.len(),
            mean_intensity_before: before.cloud.mean_intensity(),
            mean_intensity_after: after.cloud.mean_intensity(),
        });
    }
    manifest.write(&dst_manifest)?;
    Ok(FrameRecord {
        manifest: slash_path(rel),
        frame_id: scene.frame_id,
        agents,
    })
}

/// Corrupts every scene manifest under `dataset_dir` into a mirrored tree
/// under `out_dir`. Frame results are independent of scheduling.
pub fn gen_weather(
    dataset_dir: &Path,
    out_dir: &Path,
    cfg: &WeatherConfig,
    seed: u64,
    jobs: Option<usize>,
) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifests = find_manifests(dataset_dir, out_dir)?;
    log::info!("{} scene manifests under {}", manifests.len(), dataset_dir.display());
    let pool = thread_pool(jobs)?;
    let results: Vec<_> = pool.install(|| {
        manifests
            .par_iter()
            .map(|rel| process_frame(dataset_dir, out_dir, rel, cfg, seed))
            .collect()
    });
    let mut frames = Vec::new();
    let mut failures = Vec::new();
    for (rel, r) in manifests.iter().zip(results) {
        match r {
            Ok(f) => frames.push(f),
            Err(e) => {
                log::warn!("{}: {e}", rel.display());
                failures.push(FrameFailure {
                    manifest: slash_path(rel),
                    error: e.to_string(),
                });
            }
        }
    }
    let run = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        condition: cfg.name().to_string(),
        config_hash: config_hash(cfg),
        seed,
        frames,
        failures,
    };
    let path = out_dir.join(RUN_MANIFEST);
    let text = serde_json::to_string_pretty(&run).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let marker = out_dir.join(PARTIAL_MARKER);
    if run.failures.is_empty() {
        if marker.exists() {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        }
    } else {
        let listing: String = run.failures.iter().map(|f| format!("{}: {}\n", f.manifest, f.error)).collect();
        fs::write(&marker, listing).map_err(|e| Error::io(&marker, e))?;
    }
    Ok(run)
}

fn cmd_gen_weather(
    dataset_dir: &Path,
    out_dir: &Path,
    cfg: &WeatherConfig,
    seed: u64,
    jobs: Option<usize>,
    json: bool,
    out: &mut dyn Write,
) -> CmdResult {
    let run = gen_weather(dataset_dir, out_dir, cfg, seed, jobs)?;
    if json {
        emit_json(out, &run)?;
    } else {
        emit(
            out,
            &format!(
                "{}: {} frames written, {} failed (config {})",
                run.condition,
                run.frames.len(),
                run.failures.len(),
                &run.config_hash[..12]
            ),
        )?;
    }
    if run.failures.is_empty() {
        return Ok(());
    }
    for f in &run.failures {
        eprintln!("{}: {}", f.manifest, f.error);
    }
    Err(Failure::Data(Error::SchemaViolation(format!(
        "{} frame(s) failed; see {}",
        run.failures.len(),
        out_dir.join(PARTIAL_MARKER).display()
    ))))
}

fn cmd_awa_preview(
    cloud: &Path,
    params: &AwaParams,
    seed: u64,
    out_dir: Option<&Path>,
    json: bool,
    out: &mut dyn Write,
) -> CmdResult {
    let format = CloudFormat::from_path(cloud);
    let pc = load_point_cloud(cloud, format)?;
    let r = awa::awa(&pc, params, seed)?;
    let ratios = awa::extent_ratios(&r.reduced, &params.bounds);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ext = cloud.extension().and_then(|e| e.to_str()).unwrap_or("txt");
        save_point_cloud(&r.reduced, &dir.join(format!("reduced.{ext}")), format)?;
        save_point_cloud(&r.augmented, &dir.join(format!("augmented.{ext}")), format)?;
    }
    if json {
        return emit_json(
            out,
            &json!({
                "delta": r.thresholds,
                "source_points": pc.len(),
                "reduced_points": r.reduced.len(),
                "augmented_points": r.augmented.len(),
                "survivors": r.survivors,
                "injected": r.injected,
                "extent_ratios": ratios,
            }),
        );
    }
    let triple = |v: [f64; 3]| format!("[{:.6}, {:.6}, {:.6}]", v[0], v[1], v[2]);
    emit(out, &format!("delta         = {}", triple(r.thresholds)))?;
    emit(
        out,
        &format!(
            "points        = source {} / reduced {} / augmented {} (survivors {}, injected {})",
            pc.len(),
            r.reduced.len(),
            r.augmented.len(),
            r.survivors,
            r.injected
        ),
    )?;
    emit(out, &format!("extent ratios = {}", triple(ratios)))
}

/// One loss evaluation in a fixture file. Tensors are nested JSON arrays.
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossCase {
    LPat {
        source: Vec<Vec<Vec<f64>>>,
        augmented: Vec<Vec<Vec<f64>>>,
        mask: Vec<Vec<u8>>,
    },
    LFfa {
        source: Vec<Vec<Vec<f64>>>,
        augmented: Vec<Vec<Vec<f64>>>,
    },
    AcaAgent {
        ids: Vec<String>,
        source: Vec<Vec<f64>>,
        augmented: Vec<Vec<f64>>,
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default)]
        cross_terms: bool,
    },
    AcaGroup {
        source: Vec<Vec<f64>>,
        augmented: Vec<Vec<f64>>,
        #[serde(default = "default_tau")]
        tau: f64,
    },
    Focal {
        logits: Vec<f64>,
        targets: Vec<f64>,
        #[serde(default = "default_focal_alpha")]
        alpha: f64,
        #[serde(default = "default_focal_gamma")]
        gamma: f64,
        #[serde(default)]
        reduction: Reduction,
    },
    SmoothL1 {
        pred: Vec<f64>,
        target: Vec<f64>,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default)]
        reduction: Reduction,
    },
    Total {
        parts: LossParts,
        #[serde(default)]
        coefficients: LossCoefficients,
    },
}

fn default_tau() -> f64 {
    LossCoefficients::default().tau
}

fn default_focal_alpha() -> f64 {
    LossCoefficients::default().focal_alpha
}

fn default_focal_gamma() -> f64 {
    LossCoefficients::default().focal_gamma
}

fn default_beta() -> f64 {
    LossCoefficients::default().smooth_l1_beta
}

fn kernel_name(case: &LossCase) -> &'static str {
    match case {
        LossCase::LPat { .. } => "l_pat",
        LossCase::LFfa { .. } => "l_ffa",
        LossCase::AcaAgent { .. } => "aca_agent",
        LossCase::AcaGroup { .. } => "aca_group",
        LossCase::Focal { .. } => "focal",
        LossCase::SmoothL1 { .. } => "smooth_l1",
        LossCase::Total { .. } => "total",
    }
}

fn array3(v: &[Vec<Vec<f64>>], what: &str) -> Result<ndarray::Array3<f64>> {
    let c = v.len();
    let h = v.first().map_or(0, Vec::len);
    let w = v.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if v.iter().any(|p| p.len() != h || p.iter().any(|r| r.len() != w)) {
        return Err(Error::SchemaViolation(format!("{what} is ragged")));
    }
    let flat: Vec<f64> = v.iter().flatten().flatten().copied().collect();
    Ok(ndarray::Array3::from_shape_vec((c, h, w), flat).expect("checked shape"))
}

fn array2<T: Copy>(v: &[Vec<T>], what: &str) -> Result<ndarray::Array2<T>> {
    let cols = v.first().map_or(0, Vec::len);
    if v.iter().any(|r| r.len() != cols) {
        return Err(Error::SchemaViolation(format!("{what} is ragged")));
    }
    let flat: Vec<T> = v.iter().flatten().copied().collect();
    Ok(ndarray::Array2::from_shape_vec((v.len(), cols), flat).expect("checked shape"))
}

pub fn evaluate_case(case: &LossCase) -> Result<LossReport> {
    Ok(match case {
        LossCase::LPat { source, augmented, mask } => {
            let (v, gs, ga) = masked_l1(&array3(source, "source")?, &array3(augmented, "augmented")?, &array2(mask, "mask")?)?;
            LossReport::new(v)
                .with_grad("source", gs.into_dyn())
                .with_grad("augmented", ga.into_dyn())
        }
        LossCase::LFfa { source, augmented } => {
            let (s, a) = (array3(source, "source")?, array3(augmented, "augmented")?);
            let (v, gs, ga) = l1_distance(s.view().into_dyn(), a.view().into_dyn())?;
            LossReport::new(v).with_grad("source", gs).with_grad("augmented", ga)
        }
        LossCase::AcaAgent {
            ids,
            source,
            augmented,
            tau,
            cross_terms,
        } => {
            if ids.len() != source.len() || ids.len() != augmented.len() {
                return Err(Error::SchemaViolation("ids, source and augmented must have equal length".into()));
            }
            let entries = ids
                .iter()
                .zip(source)
                .zip(augmented)
                .map(|((id, s), a)| AgentEmbedding {
                    agent_id: id.clone(),
                    source: ndarray::Array1::from(s.clone()),
                    augmented: ndarray::Array1::from(a.clone()),
                })
                .collect();
            aca_agent(&AgentBatch { entries }, *tau, *cross_terms)?
        }
        LossCase::AcaGroup { source, augmented, tau } => {
            if source.len() != augmented.len() {
                return Err(Error::SchemaViolation("source and augmented must have equal length".into()));
            }
            let entries = source
                .iter()
                .zip(augmented)
                .map(|(s, a)| (ndarray::Array1::from(s.clone()), ndarray::Array1::from(a.clone())))
                .collect();
            aca_group(&GroupBatch { entries }, *tau)?
        }
        LossCase::Focal {
            logits,
            targets,
            alpha,
            gamma,
            reduction,
        } => {
            let (l, t) = (ndarray::arr1(logits), ndarray::arr1(targets));
            focal_loss(l.view().into_dyn(), t.view().into_dyn(), *alpha, *gamma, *reduction)?
        }
        LossCase::SmoothL1 {
            pred,
            target,
            beta,
            reduction,
        } => {
            let (p, t) = (ndarray::arr1(pred), ndarray::arr1(target));
            smooth_l1(p.view().into_dyn(), t.view().into_dyn(), *beta, *reduction)?
        }
        LossCase::Total { parts, coefficients } => {
            coefficients.validate()?;
            LossReport::new(total_loss(parts, coefficients)?)
        }
    })
}

/// A fixture file holds one case object or `{"cases": [...]}`; each case may
/// carry an optional `"name"`.
pub fn read_fixture(path: &Path) -> Result<Vec<(String, LossCase)>> {
    let root: Value = read_json(path)?;
    let cases = match root {
        Value::Object(mut map) if map.contains_key("cases") => match map.remove("cases") {
            Some(Value::Array(items)) => items,
            _ => return Err(Error::SchemaViolation(format!("{}: \"cases\" must be an array", path.display()))),
        },
        other => vec![other],
    };
    cases
        .into_iter()
        .enumerate()
        .map(|(i, mut v)| {
            let name = match v.as_object_mut().and_then(|m| m.remove("name")) {
                Some(Value::String(s)) => Some(s),
                Some(_) => return Err(Error::SchemaViolation(format!("case {i}: name must be a string"))),
                None => None,
            };
            let case: LossCase = serde_json::from_value(v)
                .map_err(|e| Error::SchemaViolation(format!("{} case {i}: {e}", path.display())))?;
            Ok((name.unwrap_or_else(|| kernel_name(&case).to_string()), case))
        })
        .collect()
}

fn cmd_losses(fixture: &Path, json: bool, out: &mut dyn Write) -> CmdResult {
    let cases = read_fixture(fixture)?;
    let mut rows = Vec::with_capacity(cases.len());
    for (name, case) in &cases {
        let r = evaluate_case(case)?;
        let grads: BTreeMap<&str, Value> = r
            .grads
            .iter()
            .map(|(k, g)| {
                let sum: f64 = crate::numeric::ksum(g.iter().copied());
                let abs: f64 = crate::numeric::ksum(g.iter().map(|v| v.abs()));
                (k.as_str(), json!({ "sum": sum, "abs_sum": abs }))
            })
            .collect();
        if !json {
            let label = if name == kernel_name(case) {
                name.clone()
            } else {
                format!("{name} [{}]", kernel_name(case))
            };
            emit(out, &format!("{label} = {}", fmt_sig(r.value, 15)))?;
            for (k, g) in &grads {
                emit(
                    out,
                    &format!(
                        "  d/d{k}: sum = {}, abs_sum = {}",
                        fmt_sig(g["sum"].as_f64().expect("number"), 15),
                        fmt_sig(g["abs_sum"].as_f64().expect("number"), 15)
                    ),
                )?;
            }
        }
        rows.push(json!({ "name": name, "kernel": kernel_name(case), "value": r.value, "gradients": grads }));
    }
    if json {
        emit_json(out, &rows)?;
    }
    Ok(())
}

fn cmd_gradcheck(
    targets: &[String],
    trials: usize,
    eps: f64,
    seed: u64,
    jobs: Option<usize>,
    json: bool,
    out: &mut dyn Write,
) -> CmdResult {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidStep(eps).into());
    }
    let targets: Vec<GradTarget> = if targets.is_empty() {
        GradTarget::ALL.to_vec()
    } else {
        targets.iter().map(|t| t.parse()).collect::<Result<_>>()?
    };
    let pool = thread_pool(jobs)?;
    let reports: Vec<GradCheckReport> = pool
        .install(|| targets.par_iter().map(|t| grad_check(*t, trials, eps, seed)).collect::<Result<_>>())?;
    if json {
        emit_json(out, &reports)?;
    } else if trials > 0 {
        emit(out, &format!("{:<10} {:>6} {:>12} {:>10}  status", "target", "trials", "max_rel_err", "tolerance"))?;
        for r in &reports {
            emit(
                out,
                &format!(
                    "{:<10} {:>6} {:>12.3e} {:>10.0e}  {}",
                    r.target.name(),
                    r.trials.len(),
                    r.max_rel_err(),
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                ),
            )?;
        }
    }
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            let w = r
                .trials
                .iter()
                .filter_map(|t| t.worst.as_ref().map(|w| (t.max_rel_err, w)))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            match w {
                Some((e, w)) => format!(
                    "{} ({e:.3e} at {}{:?}: analytic {}, numeric {})",
                    r.target, w.input, w.index, w.analytic, w.numeric
                ),
                None => r.target.to_string(),
            }
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join("; ")))
    }
}

struct ToyRun<'a> {
    scene: Option<&'a Path>,
    steps: usize,
    lr: f64,
    channels: usize,
    agents: usize,
    points: usize,
}

fn cmd_toyrun(opts: &ToyRun, config: Option<&Path>, seed: Option<u64>, json: bool, out: &mut dyn Write) -> CmdResult {
    if !(opts.lr > 0.0 && opts.lr.is_finite()) || opts.channels == 0 {
        return Err(Failure::Usage("--lr must be > 0 and --channels >= 1".into()));
    }
    let mut cfg = match config {
        Some(p) => read_json::<PipelineConfig>(p)?,
        None if opts.scene.is_some() => PipelineConfig::default(),
        None => toy_config(0),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let scene = match opts.scene {
        Some(p) => load_scene(p)?,
        None => synthetic_scene("toy", opts.agents, opts.points, cfg.seed),
    };
    let flows = prepare_flows(std::slice::from_ref(&scene), &cfg)?;
    let mut enc = EncoderParams::seeded(opts.channels, cfg.grid.channels, cfg.seed);
    let mut fus = FusionParams::default();
    let history = descend(&flows, &mut enc, &mut fus, &cfg.coeff, opts.steps, opts.lr)?;
    let decreasing = history.windows(2).all(|w| w[1] < w[0]);
    if json {
        return emit_json(
            out,
            &json!({
                "frame_id": scene.frame_id,
                "steps": opts.steps,
                "lr": opts.lr,
                "objective": history,
                "strictly_decreasing": decreasing,
                "query_scale": fus.query_scale,
            }),
        );
    }
    for (i, v) in history.iter().enumerate() {
        emit(out, &format!("step {i:>4}  objective {}", fmt_sig(*v, 10)))?;
    }
    emit(out, &format!("strictly decreasing: {decreasing}"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    detections: &Path,
    ground_truth: &Path,
    thresholds: &[f64],
    range: Option<f64>,
    bev: bool,
    interpolation: Interpolation,
    json: bool,
    out: &mut dyn Write,
) -> CmdResult {
    let dets: Vec<Detection> = read_json(detections)?;
    let gt_records: Vec<GroundTruth> = read_json(ground_truth)?;
    let mut gts: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for g in gt_records {
        gts.entry(g.frame_id).or_default().push(g.bbox);
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let opts = ApOptions {
            iou_threshold: t,
            bev,
            interpolation,
            max_range: range,
        };
        let r = average_precision(&dets, &gts, &opts).map_err(|e| match e {
            Error::InvalidParams(m) => Failure::Usage(m),
            other => Failure::Data(other),
        })?;
        if !json {
            emit(out, &format!("AP@{t:.2} = {:.4}", r.ap))?;
        }
        rows.push(json!({
            "iou_threshold": t,
            "ap": r.ap,
            "num_gt": r.num_gt,
            "num_detections": r.num_detections,
            "true_positives": r.true_positives,
            "false_positives": r.false_positives,
        }));
    }
    if json {
        emit_json(
            out,
            &json!({ "bev": bev, "interpolation": interpolation.name(), "range": range, "results": rows }),
        )?;
    }
    Ok(())
}

