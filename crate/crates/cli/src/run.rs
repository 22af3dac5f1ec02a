//! Subcommand implementations and run-configuration resolution.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::{info, warn};
use mocapfuse::pipeline::{self, PipelineConfig};
use mocapfuse::skeleton::InitRecord;
use mocapfuse::synth::{self, SceneSpec};
use mocapfuse::{eval, io::write_atomic, load_rig, DirPcmStore, FilterMode, PcmProvider, SkeletonModel};
use serde::Deserialize;
use serde_json::json;

use crate::args::{EvalArgs, FilterModeArg, InitArgs, InputArgs, Switch, SynthArgs, TrackArgs};

/// How a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Missing or invalid flags or configuration (exit 2).
    Usage(String),
    /// The command started but could not finish (exit 1).
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Failure {
        Failure::Runtime(e)
    }
}

impl From<pipeline::PipelineError> for Failure {
    fn from(e: pipeline::PipelineError) -> Failure {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Contents of a `--config` file. Relative paths are resolved against the
/// file's directory; flags given on the command line take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub calib: Option<PathBuf>,
    pub pcm_dir: Option<PathBuf>,
    pub skeleton: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log_level: Option<String>,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, Failure> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read --config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid --config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.calib, &mut cfg.pcm_dir, &mut cfg.skeleton, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Paths and settings after merging flags over the config file.
struct Resolved {
    calib: PathBuf,
    pcm_dir: PathBuf,
    skeleton: Option<PathBuf>,
    out: PathBuf,
    pipeline: PipelineConfig,
}

/// Reads the config file (if any) so its log level can be applied before
/// anything else runs.
pub fn preload_config(input: &InputArgs) -> Result<RunConfig, Failure> {
    match &input.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn existing(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    let path = path.ok_or_else(|| usage(format!("missing required flag {flag}")))?;
    if !path.exists() {
        return Err(usage(format!("{flag} {} does not exist", path.display())));
    }
    Ok(path)
}

fn resolve(input: &InputArgs, cfg: RunConfig) -> Result<Resolved, Failure> {
    let calib = existing(input.calib.clone().or(cfg.calib), "--calib")?;
    let pcm_dir = existing(input.pcm_dir.clone().or(cfg.pcm_dir), "--pcm-dir")?;
    let skeleton = match input.skeleton.clone().or(cfg.skeleton) {
        Some(p) => Some(existing(Some(p), "--skeleton")?),
        None => None,
    };
    let out = input.out.clone().or(cfg.out).ok_or_else(|| usage("missing required flag --out"))?;
    Ok(Resolved { calib, pcm_dir, skeleton, out, pipeline: cfg.pipeline })
}

fn write(path: &Path, body: &str) -> anyhow::Result<()> {
    write_atomic(path, body.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_template(path: Option<&Path>) -> anyhow::Result<(SkeletonModel, Option<InitRecord>)> {
    match path {
        Some(p) => Ok(SkeletonModel::load(p)?),
        None => Ok((SkeletonModel::human40(), None)),
    }
}

fn open_store(dir: &Path) -> anyhow::Result<DirPcmStore> {
    let store = DirPcmStore::new(dir);
    let range = store.frame_range();
    anyhow::ensure!(!range.is_empty(), "no heatmap frames found under {}", dir.display());
    info!("heatmap frames {}..{} under {}", range.start, range.end, dir.display());
    Ok(store)
}

pub fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read --spec {}: {e}", p.display())))?;
            SceneSpec::from_json(&text).map_err(|e| usage(format!("invalid --spec {}: {e}", p.display())))?
        }
        None => SceneSpec::default(),
    };
    if let Some(n) = args.frames {
        spec.frames = n;
    }
    if let Some(seed) = args.seed {
        spec.noise.seed = seed;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let out = args.out.clone().ok_or_else(|| usage("missing required flag --out"))?;
    let report = synth::generate(&spec, &out).context("generating dataset")?;
    info!("wrote {} heatmap files ({} rotated)", report.pcm_files, report.rotated_files);
    println!("{}", json!({ "pcm_files": report.pcm_files, "rotated_files": report.rotated_files, "frames": spec.frames }));
    Ok(())
}

pub fn init(args: &InitArgs, cfg: RunConfig) -> Result<(), Failure> {
    let r = resolve(&args.input, cfg)?;
    r.pipeline.validate().map_err(|e| usage(e.to_string()))?;
    let rig = load_rig(&r.calib).context("loading calibration")?;
    let store = open_store(&r.pcm_dir)?;
    let (template, _) = load_template(r.skeleton.as_deref())?;
    let init = pipeline::initialize(&store, &rig, &template, &r.pipeline.init, &r.pipeline.ik)?;
    info!("initialized at frame {} from {} agreeing frames", init.frame, init.agreement_frames.len());
    let record = InitRecord { frame: init.frame, pose: init.pose.as_slice().to_vec() };
    write(&r.out.join("skeleton.json"), &(init.model.to_json(Some(&record)) + "\n"))?;
    println!("{}", json!({ "frame": init.frame, "agreement_frames": init.agreement_frames, "links": init.model.link_lengths() }));
    Ok(())
}

pub fn track(args: &TrackArgs, cfg: RunConfig) -> Result<(), Failure> {
    let mut r = resolve(&args.input, cfg)?;
    let p = &mut r.pipeline;
    if let Some(s) = args.lattice_s {
        p.lattice.spacing_mm = s;
    }
    if let Some(k) = args.lattice_k {
        p.lattice.half_extent = k;
    }
    if let Some(c) = args.cutoff_hz {
        p.filter.cutoff_hz = c;
    }
    if let Some(sw) = args.rotation {
        p.lattice.rotation_enabled = sw == Switch::On;
    }
    if let Some(m) = args.filter_mode {
        p.filter.mode = match m {
            FilterModeArg::Causal => FilterMode::Causal,
            FilterModeArg::Offline => FilterMode::Offline,
        };
    }
    p.validate().map_err(|e| usage(e.to_string()))?;

    let rig = load_rig(&r.calib).context("loading calibration")?;
    let store = open_store(&r.pcm_dir)?;
    let (mut model, record) = load_template(r.skeleton.as_deref())?;
    let (frame, pose) = match record {
        Some(rec) => (rec.frame, mocapfuse::Pose::from_slice(&rec.pose)),
        None => {
            warn!("skeleton carries no initialization; initializing now");
            let init = pipeline::initialize(&store, &rig, &model, &r.pipeline.init, &r.pipeline.ik)?;
            model = init.model;
            (init.frame, init.pose)
        }
    };
    let end = store.frame_range().end;
    let seq = pipeline::track(&store, &rig, &model, (frame, &pose), end, &r.pipeline)?;
    seq.write_outputs(&r.out, &rig, &r.pipeline, &model)?;
    let no_evidence = seq.frames.iter().filter(|f| f.no_evidence).count();
    info!("tracked {} frames ({no_evidence} without evidence)", seq.frames.len());
    println!("{}", json!({ "frames": seq.frames.len(), "first_frame": frame, "no_evidence_frames": no_evidence }));
    Ok(())
}

/// Accepts either a CSV file or a directory containing `default_name`.
fn table_path(path: PathBuf, default_name: &str, flag: &str) -> Result<PathBuf, Failure> {
    let path = existing(Some(path), flag)?;
    let path = if path.is_dir() { path.join(default_name) } else { path };
    if !path.is_file() {
        return Err(usage(format!("{flag}: {} does not exist", path.display())));
    }
    Ok(path)
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let truth = table_path(args.truth.clone().ok_or_else(|| usage("missing required flag --truth"))?, "truth_positions.csv", "--truth")?;
    let pred = table_path(args.pred.clone().ok_or_else(|| usage("missing required flag --pred"))?, "positions.csv", "--pred")?;
    let out = args.out.clone().ok_or_else(|| usage("missing required flag --out"))?;

    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let gt = eval::read_positions_csv(&read(&truth)?, "truth").context("parsing ground truth")?;
    let pr = eval::read_positions_csv(&read(&pred)?, "stage2").context("parsing prediction")?;
    let frames_csv = pred.with_file_name("frames.csv");
    let info = if frames_csv.is_file() {
        eval::read_frames_csv(&read(&frames_csv)?).context("parsing frame table")?
    } else {
        warn!("no frames.csv next to {}; score columns will be zero", pred.display());
        Default::default()
    };
    let summary = eval::summarize(&pr, &gt).context("scoring")?;
    write(&out.join("summary.json"), &summary.to_json())?;
    write(&out.join("series.csv"), &eval::series_csv(&pr, &gt, &info).context("building series")?)?;
    let total = &summary.groups["total"];
    println!("{}", json!({ "frames": summary.frames, "mpjpe_total_mm": total.mpjpe_mm }));
    Ok(())
}
