use std::fs;
use std::path::{Path, PathBuf};

use flowinterp::flow::{dense_displacement, Mode, MotionModel};
use flowinterp::interpolate::{frame_file_name, interpolate_sequence, InferenceDirection, MergeKind};
use flowinterp::metrics::evaluate_frames;
use flowinterp::optimizer::{solve, SolveConfig, SCHEMA_VERSION};
use flowinterp::parallel::WorkerPool;
use flowinterp::phantom::{PhantomParams, PhantomSpec};
use flowinterp::volume::{denormalize_intensity, normalize_intensity, Volume};
use flowinterp::Error;
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{EvalArgs, InterpArgs, PhantomArgs, RegisterArgs};

const REPORT_FILE: &str = "solve_report.json";
const MANIFEST_FILE: &str = "manifest.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("missing {name} (flag or io section)")))
}

#[derive(Serialize)]
struct FrameEntry {
    t: f64,
    file: String,
}

#[derive(Serialize)]
struct PhantomManifest<'a> {
    schema_version: u32,
    n_intermediate: usize,
    spec: &'a PhantomSpec,
    frames: Vec<FrameEntry>,
}

pub fn phantom(args: PhantomArgs) -> Result<(), CliError> {
    let mut params = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<PhantomParams>(&text)
                .map_err(|e| CliError::Usage(format!("invalid phantom config: {e}")))?
        }
        None => PhantomParams::default(),
    };
    if let Some(d) = args.dims {
        params.dims = [d; 3];
    }
    if let Some(seed) = args.seed {
        params.seed = seed;
    }
    if let Some(profile) = args.profile {
        params.profile = profile.into();
    }
    let spec = PhantomSpec::generate(&params)?;
    create_dir(&args.out)?;
    let den = args.frames + 1;
    let mut frames = Vec::with_capacity(den + 1);
    for k in 0..=den {
        let t = k as f64 / den as f64;
        let file = frame_file_name(k, den);
        spec.render_frame(t)?.save(args.out.join(&file))?;
        frames.push(FrameEntry { t, file });
    }
    write_json(
        &args.out.join(MANIFEST_FILE),
        &PhantomManifest { schema_version: SCHEMA_VERSION, n_intermediate: args.frames, spec: &spec, frames },
    )?;
    info!("wrote {} frames to {}", den + 1, args.out.display());
    Ok(())
}

/// Normalized input pair plus the intensity range to map results back.
struct Inputs {
    i0: Volume,
    i1: Volume,
    range: (f64, f64),
}

fn load_pair(frame0: &Path, frame1: &Path) -> Result<Inputs, CliError> {
    let (v0, v1) = (Volume::load(frame0)?, Volume::load(frame1)?);
    if v0.dims() != v1.dims() {
        return Err(CliError::Usage(format!(
            "frame dimensions differ: {:?} vs {:?}",
            v0.dims(),
            v1.dims()
        )));
    }
    let (i0, i1, range) = normalize_intensity(&v0, &v1)?;
    Ok(Inputs { i0, i1, range })
}

/// Solves and writes the report; a divergence writes the partial report first.
fn run_solve(inputs: &Inputs, cfg: &SolveConfig, out: &Path) -> Result<MotionModel, CliError> {
    info!(
        "solving {} mode, T = {}, {} steps, {} worker(s)",
        cfg.model.mode(),
        cfg.model.ode_steps,
        cfg.steps,
        cfg.workers
    );
    match solve(&inputs.i0, &inputs.i1, cfg) {
        Ok((model, report)) => {
            write_json(&out.join(REPORT_FILE), &report)?;
            if report.diverged {
                warn!("final loss is above the initial loss");
            }
            Ok(model)
        }
        Err(Error::Diverged { step, message, report }) => {
            if let Some(r) = &report {
                write_json(&out.join(REPORT_FILE), r)?;
            }
            Err(Error::Diverged { step, message, report }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn export_dvfs(model: &MotionModel, dims: [usize; 3], out: &Path, pool: &WorkerPool) -> Result<Vec<String>, CliError> {
    let mut files = Vec::new();
    for (t0, t1, file) in [(0.0, 1.0, "dvf_0_to_1.raw"), (1.0, 0.0, "dvf_1_to_0.raw")] {
        dense_displacement(model, dims, t0, t1, pool)?.save(&out.join(file))?;
        files.push(file.to_string());
    }
    Ok(files)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    schema_version: u32,
    mode: Mode,
    ode_steps: usize,
    n_frames: usize,
    merge: MergeKind,
    direction: InferenceDirection,
    intensity_range: (f64, f64),
    frames: Vec<FrameEntry>,
    dvfs: Vec<String>,
    report: &'static str,
    config: &'a RunConfig,
}

fn merged_config(config: Option<&Path>, mode: Option<Mode>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load_or_default(config)?;
    if let Some(m) = mode {
        cfg.set_mode(m);
    }
    Ok(cfg)
}

pub fn interp(args: InterpArgs) -> Result<(), CliError> {
    let mut cfg = merged_config(args.config.as_deref(), args.mode)?;
    if let Some(kind) = args.merge {
        cfg.merge.kind = kind.into();
    }
    if args.one_way {
        cfg.merge.direction = InferenceDirection::OneWay;
    }
    if args.frames == 0 {
        return Err(CliError::Usage("--frames must be at least 1".into()));
    }
    let frame0 = required(args.frame0, &cfg.io.frame0, "--frame0")?;
    let frame1 = required(args.frame1, &cfg.io.frame1, "--frame1")?;
    let out = required(args.out, &cfg.io.out, "--out")?;
    let solve_cfg = cfg.solve_config(args.frames + 1, args.workers)?;
    let inputs = load_pair(&frame0, &frame1)?;
    create_dir(&out)?;

    let model = run_solve(&inputs, &solve_cfg, &out)?;
    let pool = WorkerPool::new(args.workers)?;
    let seq = interpolate_sequence(
        &model,
        &inputs.i0,
        &inputs.i1,
        args.frames,
        cfg.merge_strategy(),
        cfg.merge.direction,
        &pool,
    )?;
    let den = args.frames + 1;
    let mut frames = Vec::with_capacity(seq.len());
    for (k, (t, v)) in seq.iter().enumerate() {
        let file = frame_file_name(k + 1, den);
        denormalize_intensity(v, inputs.range)?.save(out.join(&file))?;
        frames.push(FrameEntry { t: *t, file });
    }
    let dvfs = if cfg.io.no_dvf {
        Vec::new()
    } else {
        export_dvfs(&model, inputs.i0.dims(), &out, &pool)?
    };
    write_json(
        &out.join(MANIFEST_FILE),
        &RunManifest {
            schema_version: SCHEMA_VERSION,
            mode: solve_cfg.model.mode(),
            ode_steps: solve_cfg.model.ode_steps,
            n_frames: args.frames,
            merge: cfg.merge.kind,
            direction: cfg.merge.direction,
            intensity_range: inputs.range,
            frames,
            dvfs,
            report: REPORT_FILE,
            config: &cfg,
        },
    )?;
    info!("wrote {} frames to {}", seq.len(), out.display());
    Ok(())
}

pub fn register(args: RegisterArgs) -> Result<(), CliError> {
    let cfg = merged_config(args.config.as_deref(), args.mode)?;
    let frame0 = required(args.frame0, &cfg.io.frame0, "--frame0")?;
    let frame1 = required(args.frame1, &cfg.io.frame1, "--frame1")?;
    let out = required(args.out_dvf, &cfg.io.out, "--out-dvf")?;
    let solve_cfg = cfg.solve_config(2, args.workers)?;
    let inputs = load_pair(&frame0, &frame1)?;
    create_dir(&out)?;
    let model = run_solve(&inputs, &solve_cfg, &out)?;
    let files = export_dvfs(&model, inputs.i0.dims(), &out, &WorkerPool::new(args.workers)?)?;
    info!("wrote {} to {}", files.join(", "), out.display());
    Ok(())
}

/// `t` encoded in a `frame_t{k}_{n}` file stem.
fn frame_time(name: &str) -> Option<f64> {
    let stem = name.strip_prefix("frame_t")?;
    let stem = stem.split('.').next()?;
    let (k, n) = stem.split_once('_')?;
    let (k, n): (usize, usize) = (k.parse().ok()?, n.parse().ok()?);
    (n > 0 && k <= n).then(|| k as f64 / n as f64)
}

fn volume_files(dir: &Path) -> Result<Vec<String>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("cannot list {}: {e}", dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".vol") || n.ends_with(".nii"))
        .collect();
    names.sort();
    Ok(names)
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let pred = volume_files(&args.pred_dir)?;
    let truth = volume_files(&args.truth_dir)?;
    let is_endpoint = |n: &String| matches!(frame_time(n), Some(t) if t == 0.0 || t == 1.0);
    let pred: Vec<String> = pred.into_iter().filter(|n| !is_endpoint(n)).collect();
    let truth: Vec<String> = truth.into_iter().filter(|n| !is_endpoint(n)).collect();
    if pred.is_empty() {
        return Err(CliError::Usage(format!("no frames in {}", args.pred_dir.display())));
    }
    if pred != truth {
        return Err(CliError::Usage(format!(
            "frame sets differ: {} predicted vs {} reference frames",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    let mut pairs = Vec::with_capacity(n);
    for (i, name) in pred.iter().enumerate() {
        let t = frame_time(name).unwrap_or((i + 1) as f64 / (n + 1) as f64);
        let p = Volume::load(args.pred_dir.join(name))?;
        let g = Volume::load(args.truth_dir.join(name))?;
        pairs.push((t, p, g));
    }
    let report = evaluate_frames(pairs.iter().map(|(t, p, g)| (*t, p, g)), args.peak)?;
    if let Some(dir) = args.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&args.report, &report)?;
    info!(
        "mean over {n} frames: psnr {:.2} dB, ssim {:.4}, nmse {:.3e}",
        report.mean.psnr, report.mean.ssim, report.mean.nmse
    );
    Ok(())
}
