//! `mvfuse` command line: `annotate`, `evaluate` and `synth`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::io::{self, IoError, ScenePaths, Units};
use crate::metrics::{self, EvalParams, MetricError, TrackSet};
use crate::pose::CanonicalPose;
use crate::synth::{self, SceneSpec, SynthError};
use crate::tracker::run_all;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mvfuse",
    version,
    about = "Fuse multi-camera 2D box and keypoint annotations into 3D tracks",
    after_help = "Parameter precedence: command-line flags > --config file > built-in defaults.\n\
                  Set MVFUSE_LOG (error, warn, info, debug) to control log verbosity."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse 2D annotations into 3D tracks.
    Annotate(AnnotateArgs),
    /// Score predicted tracks against reference tracks.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnitArg {
    M,
    Mm,
}

impl From<UnitArg> for Units {
    fn from(u: UnitArg) -> Self {
        match u {
            UnitArg::M => Units::Meters,
            UnitArg::Mm => Units::Millimeters,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Calibration JSON.
    #[arg(long)]
    pub calib: PathBuf,
    /// Annotation JSON Lines.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Run configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output track JSON Lines.
    #[arg(long)]
    pub out: PathBuf,
    /// Skeleton definition JSON; enables keypoint tracking.
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    /// Unit of calibration translations.
    #[arg(long, value_enum, default_value = "m")]
    pub units: UnitArg,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Seconds per frame index.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub q_pos: Option<f64>,
    #[arg(long)]
    pub q_shape: Option<f64>,
    /// Box corner variance, px².
    #[arg(long)]
    pub r_bbox: Option<f64>,
    /// Keypoint variance, px².
    #[arg(long)]
    pub r_keypoint: Option<f64>,
    /// Built-in skeleton (coco17, panoptic15) when no --skeleton file is given.
    #[arg(long)]
    pub skeleton_name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted track JSON Lines (meters).
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference track JSON Lines.
    #[arg(long)]
    pub gt: PathBuf,
    /// Unit of the reference tracks.
    #[arg(long, value_enum, default_value = "m")]
    pub gt_units: UnitArg,
    /// Match gate for CLEAR MOT and IDF1, meters.
    #[arg(long, default_value_t = 1.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    pub ospa_cutoff: f64,
    #[arg(long, default_value_t = 1.0)]
    pub ospa_order: f64,
    /// Sliding OSPA⁽²⁾ window in frames (default: whole sequence).
    #[arg(long)]
    pub ospa_window: Option<usize>,
    /// Ignore z (ground-plane reference data).
    #[arg(long)]
    pub plane: bool,
    /// Sequence name used in the report.
    #[arg(long, default_value = "sequence")]
    pub name: String,
    /// Write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print the JSON report on stdout instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec JSON (default spec when omitted).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

/// Error carrying the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { ref source, .. } if source.kind() != std::io::ErrorKind::NotFound => {
                CliError::Runtime(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(io) => io.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Annotate(a) => annotate(&a, stderr),
        Command::Evaluate(a) => evaluate(&a, stdout, stderr),
        Command::Synth(a) => synth_cmd(&a, stderr),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn resolve_config(a: &AnnotateArgs) -> Result<RunConfig, CliError> {
    let mut config = match &a.config {
        Some(p) => io::load_config_unvalidated(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.dt {
        config.dt = v;
    }
    if let Some(v) = a.q_pos {
        config.q_pos = v;
    }
    if let Some(v) = a.q_shape {
        config.q_shape = v;
    }
    if let Some(v) = a.r_bbox {
        config.r_bbox = v;
    }
    if let Some(v) = a.r_keypoint {
        config.r_keypoint = v;
    }
    if let Some(v) = &a.skeleton_name {
        config.skeleton = Some(v.clone());
    }
    config.validate().map_err(|r| CliError::Usage(format!("invalid configuration: {r}")))?;
    Ok(config)
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Runtime(e.to_string()))
}

fn annotate(a: &AnnotateArgs, stderr: &mut dyn Write) -> Result<(), CliError> {
    let start = Instant::now();
    let config = resolve_config(a)?;
    let paths = ScenePaths {
        calibration: a.calib.clone(),
        annotations: a.annotations.clone(),
        gt_tracks: None,
        skeleton: a.skeleton.clone(),
    };
    let scene = io::load_scene(&paths, a.units.into())?;
    let skeleton = match (&scene.skeleton, &config.skeleton) {
        (Some(s), _) => Some(s.clone()),
        (None, Some(name)) => Some(CanonicalPose::builtin(name).map_err(|e| CliError::Usage(e.to_string()))?),
        (None, None) => None,
    };
    let pool = thread_pool(a.workers)?;
    let output = pool.install(|| run_all(&scene.annotations, &scene.cameras, &config, skeleton.as_ref()));
    for d in &output.diagnostics {
        log::debug!("{d}");
        let _ = writeln!(stderr, "warning: {d}");
    }
    for f in &output.failures {
        let _ = writeln!(stderr, "warning: {f}");
    }
    io::save_track_list(&output.tracks, &a.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let frames = scene.annotations.frames().count();
    let _ = writeln!(
        stderr,
        "annotated {} objects over {} frames in {:.3} s ({} failed, {} diagnostics)",
        output.tracks.len(),
        frames,
        start.elapsed().as_secs_f64(),
        output.failures.len(),
        output.diagnostics.len()
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let pred: TrackSet = io::load_tracks(&a.pred, Units::Meters)?;
    let gt: TrackSet = io::load_tracks(&a.gt, a.gt_units.into())?;
    let params = EvalParams {
        threshold: a.threshold,
        ospa_cutoff: a.ospa_cutoff,
        ospa_order: a.ospa_order,
        ospa_window: a.ospa_window,
        plane_only: a.plane,
        ..EvalParams::default()
    };
    let report = metrics::evaluate(&a.name, &pred, &gt, &params)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    if let Some(path) = &a.report {
        std::fs::write(path, &json).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    let body = if a.json { json } else { report.to_table() };
    stdout.write_all(body.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
    let _ = writeln!(stderr, "evaluated {} predicted vs {} reference samples", pred.len(), gt.len());
    Ok(())
}

fn synth_cmd(a: &SynthArgs, stderr: &mut dyn Write) -> Result<(), CliError> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", p.display(), e.line())))?
        }
        None => SceneSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    if a.out.exists() {
        let non_empty = std::fs::read_dir(&a.out)
            .map_err(|e| CliError::Usage(format!("{}: {e}", a.out.display())))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty (use --force to overwrite)",
                a.out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(&a.out).map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    }
    let scene = synth::generate(&spec)?;
    synth::write_scene(&scene, &a.out)?;
    let _ = writeln!(
        stderr,
        "wrote {} cameras, {} objects, {} annotation records to {}",
        scene.bundle.cameras.len(),
        scene.objects.len(),
        scene.bundle.annotations.len(),
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("mvfuse").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&["bogus"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["annotate"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn help_documents_precedence() {
        let (_, out, _) = run_args(&["--help"]);
        assert!(out.contains("flags > --config file > built-in defaults"));
    }
}
