//! Batch front end: `deblur`, `synthesize` and `evaluate`.
//!
//! Input frames are ordered lexicographically by file name. Every command
//! writes a `manifest.json` next to its outputs recording the resolved
//! parameters, the energy log and timings.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use flowdeblur::evalkit::{self, SceneSpec};
use flowdeblur::io;
use flowdeblur::pipeline::EnergyRecord;
use flowdeblur::{FlowField, Image, SolverParams};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";

#[derive(Parser, Debug)]
#[command(name = "flowdeblur", version, about = "Joint video deblurring and optical flow")]
pub struct Cli {
    /// Worker threads (0 = all cores)
    #[arg(long, global = true, env = "FLOWDEBLUR_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Restore sharp frames and estimate flows from a blurry sequence
    Deblur(DeblurArgs),
    /// Render a synthetic scene: sharp and blurry frames plus true flows
    Synthesize(SynthesizeArgs),
    /// Score restored frames and flows against ground truth
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DeblurArgs {
    /// Glob of input frames (PNG, PGM or PPM), sorted by file name
    #[arg(long = "in")]
    pub input: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Data weight; μ and ν follow it unless given
    #[arg(long, default_value_t = 250.0)]
    pub lambda: f64,
    /// Temporal weights μ_1,μ_2,... (one value applies to all)
    #[arg(long, value_delimiter = ',')]
    pub mu: Option<Vec<f64>>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub sigma_i: Option<f64>,
    #[arg(long)]
    pub n_neighbors: Option<usize>,
    /// Pyramid scale factor
    #[arg(long)]
    pub scale: Option<f64>,
    /// Pyramid levels (default: down to 8 px)
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub outer_iters: Option<usize>,
    #[arg(long)]
    pub pd_iters: Option<usize>,
    #[arg(long)]
    pub cg_iters: Option<usize>,
    /// Duty cycle in (0, 1], or `auto` to estimate it
    #[arg(long, default_value = "auto")]
    pub duty: String,
    /// Drop the temporal coherence term
    #[arg(long)]
    pub no_temporal: bool,
    #[arg(long)]
    pub filter_finest_only: bool,
    /// Also write color-coded flow images
    #[arg(long)]
    pub viz_flow: bool,
    /// Recorded in the manifest; the solver itself draws no random numbers
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append every energy record as a JSON line
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthesizeArgs {
    /// Scene JSON; the built-in demo scene when absent
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the scene's duty cycle
    #[arg(long)]
    pub tau: Option<f64>,
    /// Image extension of the written frames
    #[arg(long, default_value = "png")]
    pub format: String,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    /// Directory written by `deblur`
    #[arg(long)]
    pub result: PathBuf,
    /// Directory written by `synthesize`
    #[arg(long)]
    pub truth: PathBuf,
    /// Report path (default: <result>/report.json)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Solver(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Solver(_) => EXIT_SOLVER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DutySource {
    User,
    Estimated,
    Scene,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Glob or scene path the run read from.
    pub input: String,
    /// Resolved input files, in processing order.
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub params: Option<SolverParams>,
    pub scene: Option<SceneSpec>,
    pub duty: Option<f64>,
    pub duty_source: Option<DutySource>,
    pub seed: u64,
    pub threads: usize,
    pub energy_log: Vec<EnergyRecord>,
    /// Scalar results; PSNR of identical images is stored as `inf`.
    #[serde(with = "float_map")]
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, input: String, output_dir: &Path) -> Self {
        RunManifest {
            command: command.into(),
            input,
            inputs: Vec::new(),
            output_dir: output_dir.to_path_buf(),
            params: None,
            scene: None,
            duty: None,
            duty_source: None,
            seed: 0,
            threads: rayon::current_num_threads(),
            energy_log: Vec::new(),
            metrics: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        fs::write(dir.join(MANIFEST), self.to_json()).map_err(input_err)
    }
}

/// JSON has no infinities; they are written as the strings `inf` / `-inf`.
mod float_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn to_repr(v: f64) -> impl Serialize {
        if v.is_finite() {
            Repr::Num(v)
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else if v < 0.0 {
            Repr::Text("-inf".into())
        } else {
            Repr::Text("nan".into())
        }
    }

    pub fn from_text(s: &str) -> Option<f64> {
        match s {
            "inf" => Some(f64::INFINITY),
            "-inf" => Some(f64::NEG_INFINITY),
            "nan" => Some(f64::NAN),
            _ => None,
        }
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, &v)| (k, to_repr(v))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let raw = BTreeMap::<String, Repr>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, r)| match r {
                Repr::Num(v) => Ok((k, v)),
                Repr::Text(t) => from_text(&t)
                    .map(|v| (k, v))
                    .ok_or_else(|| serde::de::Error::custom(format!("bad number '{t}'"))),
            })
            .collect()
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.map(to_repr).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            match Option::<Repr>::deserialize(d)? {
                None => Ok(None),
                Some(Repr::Num(v)) => Ok(Some(v)),
                Some(Repr::Text(t)) => from_text(&t)
                    .map(Some)
                    .ok_or_else(|| serde::de::Error::custom(format!("bad number '{t}'"))),
            }
        }
    }
}

/// Files matching `pattern`, sorted by file name (full path breaks ties).
pub fn resolve_inputs(pattern: &str) -> CliResult<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| CliError::Input(format!("bad pattern '{pattern}': {e}")))?;
    let mut files = Vec::new();
    for p in paths {
        let p = p.map_err(input_err)?;
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()).then_with(|| a.cmp(b)));
    Ok(files)
}

fn read_frames(files: &[PathBuf]) -> CliResult<Vec<Image>> {
    let mut frames: Vec<Image> = Vec::with_capacity(files.len());
    for f in files {
        let img = io::read_image(f).map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?;
        if let Some(first) = frames.first() {
            if img.dims() != first.dims() || img.channels() != first.channels() {
                return Err(CliError::Input(format!(
                    "{}: size {}x{}x{} differs from {}x{}x{}",
                    f.display(),
                    img.width(),
                    img.height(),
                    img.channels(),
                    first.width(),
                    first.height(),
                    first.channels()
                )));
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

fn output_extension(files: &[PathBuf]) -> String {
    let ext = files[0]
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("png")
        .to_ascii_lowercase();
    match ext.as_str() {
        "pgm" | "ppm" | "pnm" => "pnm".into(),
        _ => "png".into(),
    }
}

pub fn frame_name(stem: &str, i: usize, ext: &str) -> String {
    format!("{stem}_{i:04}.{ext}")
}

/// Solver parameters from the command line, before the duty cycle is known.
pub fn params_from_args(args: &DeblurArgs) -> CliResult<SolverParams> {
    let mut p = SolverParams::with_lambda(args.lambda);
    if let Some(mu) = &args.mu {
        p.mu = mu.clone();
    }
    if let Some(n) = args.n_neighbors {
        p.n_neighbors = n;
    }
    if p.mu.len() == 1 && p.n_neighbors > 1 {
        p.mu = vec![p.mu[0]; p.n_neighbors];
    }
    if let Some(v) = args.nu {
        p.nu = v;
    }
    if let Some(v) = args.sigma_i {
        p.sigma_i = v;
    }
    if let Some(v) = args.scale {
        p.pyr_scale = v;
    }
    p.pyr_levels = args.levels.or(p.pyr_levels);
    if let Some(v) = args.outer_iters {
        p.outer_iters = v;
    }
    if let Some(v) = args.pd_iters {
        p.pd_iters = v;
    }
    if let Some(v) = args.cg_iters {
        p.cg_iters = v;
    }
    p.duty = match args.duty.as_str() {
        "auto" => None,
        s => Some(
            s.parse::<f64>()
                .map_err(|_| CliError::Input(format!("--duty expects a number or 'auto', got '{s}'")))?,
        ),
    };
    p.temporal_enabled = !args.no_temporal;
    p.filter_finest_only = args.filter_finest_only;
    p.validate().map_err(input_err)?;
    Ok(p)
}

fn write_flow(dir: &Path, stem: &str, i: usize, flow: &FlowField, viz: bool) -> CliResult<()> {
    io::write_flo(&dir.join(frame_name(stem, i, "flo")), flow).map_err(input_err)?;
    if viz {
        let img = evalkit::flow_to_color(flow, None);
        io::write_image(&dir.join(frame_name(stem, i, "png")), &img).map_err(input_err)?;
    }
    Ok(())
}

pub fn cmd_deblur(args: &DeblurArgs) -> CliResult<RunManifest> {
    let start = Instant::now();
    let files = resolve_inputs(&args.input)?;
    if files.is_empty() {
        return Err(CliError::Input(format!("no files match '{}'", args.input)));
    }
    if files.len() < 2 {
        return Err(CliError::Input(format!("need ≥ 2 frames, found {}", files.len())));
    }
    let params = params_from_args(args)?;
    let frames = read_frames(&files)?;
    fs::create_dir_all(&args.out).map_err(input_err)?;
    let mut manifest = RunManifest::new("deblur", args.input.clone(), &args.out);
    manifest.inputs = files.clone();
    manifest.seed = args.seed;
    manifest.timings.insert("read".into(), start.elapsed().as_secs_f64());

    let mut log = match &args.log {
        Some(path) => Some(fs::File::create(path).map_err(input_err)?),
        None => None,
    };
    let solve = Instant::now();
    let out = flowdeblur::run_with_progress(&frames, &params, |rec| {
        if let Some(f) = log.as_mut() {
            // a failing log write must not abort the solve
            let _ = writeln!(f, "{}", serde_json::to_string(rec).expect("record serializes"));
        }
    })
    .map_err(|e| CliError::Solver(e.to_string()))?;
    manifest.timings.insert("solve".into(), solve.elapsed().as_secs_f64());

    let write = Instant::now();
    let ext = output_extension(&files);
    let state = &out.state;
    for (i, l) in state.latent.iter().enumerate() {
        io::write_image(&args.out.join(frame_name("frame", i, &ext)), l).map_err(input_err)?;
    }
    for i in 0..state.len() {
        if i + 1 < state.len() {
            write_flow(&args.out, "flow_fwd", i, &state.fwd[i], args.viz_flow)?;
        }
        if i >= 1 {
            write_flow(&args.out, "flow_bwd", i, &state.bwd[i], args.viz_flow)?;
        }
    }
    manifest.timings.insert("write".into(), write.elapsed().as_secs_f64());

    let mut resolved = params.clone();
    resolved.duty = Some(out.duty);
    manifest.params = Some(resolved);
    manifest.duty = Some(out.duty);
    manifest.duty_source = Some(if out.duty_estimated {
        DutySource::Estimated
    } else {
        DutySource::User
    });
    manifest.metrics.insert("levels".into(), out.levels as f64);
    if let Some(last) = out.energy_log.last() {
        manifest.metrics.insert("final_energy".into(), last.total);
    }
    manifest.energy_log = out.energy_log;
    manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&args.out)?;
    Ok(manifest)
}

pub fn cmd_synthesize(args: &SynthesizeArgs) -> CliResult<RunManifest> {
    let start = Instant::now();
    let (mut spec, source) = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            (SceneSpec::from_json(&text).map_err(input_err)?, path.display().to_string())
        }
        None => (SceneSpec::demo(), "demo".to_string()),
    };
    if let Some(tau) = args.tau {
        spec.tau = tau;
        spec.validate().map_err(input_err)?;
    }
    let ext = match args.format.to_ascii_lowercase().as_str() {
        "png" => "png",
        "pgm" | "ppm" | "pnm" => "pnm",
        other => return Err(CliError::Input(format!("unsupported format '{other}'"))),
    };
    let scene = evalkit::render_scene(&spec).map_err(input_err)?;
    let blurry = evalkit::synthesize_blur(&scene, None).map_err(|e| CliError::Solver(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(input_err)?;
    for (i, (s, b)) in scene.sharp.iter().zip(&blurry).enumerate() {
        io::write_image(&args.out.join(frame_name("sharp", i, ext)), s).map_err(input_err)?;
        io::write_image(&args.out.join(frame_name("blurry", i, ext)), b).map_err(input_err)?;
        io::write_flo(&args.out.join(frame_name("gt_fwd", i, "flo")), &scene.gt_fwd[i]).map_err(input_err)?;
        io::write_flo(&args.out.join(frame_name("gt_bwd", i, "flo")), &scene.gt_bwd[i]).map_err(input_err)?;
    }
    let spec_json = serde_json::to_string_pretty(&spec).expect("scene serializes");
    fs::write(args.out.join("scene.json"), spec_json).map_err(input_err)?;

    let mut manifest = RunManifest::new("synthesize", source, &args.out);
    if let Some(p) = &args.spec {
        manifest.inputs.push(p.clone());
    }
    manifest.seed = spec.seed;
    manifest.duty = Some(spec.tau);
    manifest.duty_source = Some(DutySource::Scene);
    for (i, (s, b)) in scene.sharp.iter().zip(&blurry).enumerate() {
        let p = evalkit::psnr(b, s).map_err(input_err)?;
        manifest.metrics.insert(format!("blurry_psnr_{i:04}"), p);
    }
    manifest.scene = Some(spec);
    manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&args.out)?;
    Ok(manifest)
}

/// One evaluated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frame: usize,
    #[serde(with = "float_map::opt")]
    pub psnr: Option<f64>,
    pub epe_fwd: Option<f64>,
    pub epe_bwd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "float_map::opt")]
    pub mean_psnr: Option<f64>,
    pub mean_epe: Option<f64>,
    pub frames: usize,
    pub flows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<FrameRow>,
    pub summary: Summary,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{:>6} {:>10} {:>10} {:>10}\n", "frame", "psnr", "epe_fwd", "epe_bwd");
        for r in &self.rows {
            s += &format!(
                "{:>6} {:>10} {:>10} {:>10}\n",
                r.frame,
                cell(r.psnr),
                cell(r.epe_fwd),
                cell(r.epe_bwd)
            );
        }
        s += &format!(
            "{:>6} {:>10} {:>10}\n",
            "mean",
            cell(self.summary.mean_psnr),
            cell(self.summary.mean_epe)
        );
        s
    }
}

/// The single file in `dir` named `<stem>_<index>.<ext>` with an image or
/// flow extension.
fn find_indexed(dir: &Path, stem: &str, i: usize, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|e| dir.join(frame_name(stem, i, e)))
        .find(|p| p.is_file())
}

const IMAGE_EXTS: [&str; 4] = ["png", "pnm", "ppm", "pgm"];

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<EvalReport> {
    let mut rows = Vec::new();
    let mut psnrs = Vec::new();
    let mut epes = Vec::new();
    for i in 0.. {
        let Some(truth) = find_indexed(&args.truth, "sharp", i, &IMAGE_EXTS) else {
            break;
        };
        let Some(result) = find_indexed(&args.result, "frame", i, &IMAGE_EXTS) else {
            break;
        };
        let gt = io::read_image(&truth).map_err(|e| CliError::Input(format!("{}: {e}", truth.display())))?;
        let img = io::read_image(&result).map_err(|e| CliError::Input(format!("{}: {e}", result.display())))?;
        let psnr = evalkit::psnr(&img, &gt).map_err(|e| CliError::Input(format!("frame {i}: {e}")))?;
        psnrs.push(psnr);
        let mut row = FrameRow {
            frame: i,
            psnr: Some(psnr),
            epe_fwd: None,
            epe_bwd: None,
        };
        for (stem, gt_stem, slot) in [("flow_fwd", "gt_fwd", 0), ("flow_bwd", "gt_bwd", 1)] {
            let (Some(f), Some(g)) = (
                find_indexed(&args.result, stem, i, &["flo"]),
                find_indexed(&args.truth, gt_stem, i, &["flo"]),
            ) else {
                continue;
            };
            let flow = io::read_flo(&f).map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?;
            let gt = io::read_flo(&g).map_err(|e| CliError::Input(format!("{}: {e}", g.display())))?;
            let e = evalkit::epe(&flow, &gt, None).map_err(|e| CliError::Input(format!("{stem} {i}: {e}")))?;
            epes.push(e);
            if slot == 0 {
                row.epe_fwd = Some(e);
            } else {
                row.epe_bwd = Some(e);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!(
            "no frame pairs found (expected frame_NNNN in {} and sharp_NNNN in {})",
            args.result.display(),
            args.truth.display()
        )));
    }
    let report = EvalReport {
        summary: Summary {
            mean_psnr: mean(&psnrs),
            mean_epe: mean(&epes),
            frames: psnrs.len(),
            flows: epes.len(),
        },
        rows,
    };
    let path = args.report.clone().unwrap_or_else(|| args.result.join(REPORT));
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(report)
}

/// Configure the global thread pool. Must run before any parallel work.
pub fn init_threads(threads: Option<usize>) -> CliResult<()> {
    let Some(n) = threads else {
        return Ok(());
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("--threads: {e}")))
}

/// Run a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = init_threads(cli.threads).and_then(|()| match &cli.command {
        Command::Deblur(a) => cmd_deblur(a).map(|m| {
            println!(
                "restored {} frames into {} (duty {:.3})",
                m.inputs.len(),
                m.output_dir.display(),
                m.duty.unwrap_or(f64::NAN)
            );
        }),
        Command::Synthesize(a) => cmd_synthesize(a).map(|m| {
            println!("wrote scene to {}", m.output_dir.display());
        }),
        Command::Evaluate(a) => cmd_evaluate(a).map(|r| print!("{}", r.table())),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("flowdeblur: {e}");
            e.code()
        }
    }
}
