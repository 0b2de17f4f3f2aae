//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{Config, ConfigError};
use crate::losses::{load_checkpoint, train, TrainError};
use crate::metrics::{evaluate, summarize, write_report, EvalError};
use crate::model::ModelError;
use crate::motionmodel::{write_trajectory_csv, TrajectorySample};
use crate::scenegen::{load_dataset, make_blur_dataset, make_scene, write_dataset, DataError, SceneOptions, DENSE_SAMPLES, EXTREME, MODERATE};
use crate::splatter::{write_png, SplatError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NAN: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "motionsplat", version, about = "Deblur Gaussian-splat scenes by learning the camera motion during exposure", after_help = Config::help_text())]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum RenderMode {
    Sharp,
    Blur,
    Trajectory,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic blurred dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        gaussians: usize,
        #[arg(long, default_value_t = 8)]
        cameras: usize,
        /// `moderate`, `extreme` or a maximum rotation in radians.
        #[arg(long, default_value = "moderate")]
        magnitude: String,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Dense renders averaged per blurred image (odd).
        #[arg(long, default_value_t = DENSE_SAMPLES)]
        dense: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset directory.
    #[command(after_help = Config::help_text())]
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Render from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long, value_enum, default_value = "sharp")]
        mode: RenderMode,
        /// PNG path for sharp/blur, directory for trajectory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a dataset's ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError { code: EXIT_DATA, msg: e.to_string() }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError { code: EXIT_CONFIG, msg: e.to_string() }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        data_err(e)
    }
}

impl From<SplatError> for CliError {
    fn from(e: SplatError) -> Self {
        data_err(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        data_err(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        data_err(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Config(_) => EXIT_CONFIG,
            TrainError::NonFinite { .. } => EXIT_NAN,
            _ => EXIT_DATA,
        };
        CliError { code, msg: e.to_string() }
    }
}

fn parse_magnitude(s: &str) -> Result<f64, ConfigError> {
    match s {
        "moderate" => Ok(MODERATE),
        "extreme" => Ok(EXTREME),
        v => match v.parse::<f64>() {
            Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
            _ => Err(ConfigError::BadValue { key: "magnitude".into(), value: v.into(), msg: "expected moderate, extreme or a non-negative number".into() }),
        },
    }
}

/// Config from an optional file plus `key=value` overrides, validated.
pub fn build_config(file: Option<&Path>, overrides: &[String]) -> Result<Config, ConfigError> {
    let mut cfg = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError::Io { path: p.display().to_string(), msg: e.to_string() })?;
            let mut c = Config::default();
            c.apply_text(&text)?;
            c
        }
        None => Config::default(),
    };
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.command {
        Command::Synth { seed, gaussians, cameras, magnitude, width, height, dense, out } => {
            let theta = parse_magnitude(&magnitude)?;
            if gaussians == 0 || cameras < 2 || width == 0 || height == 0 {
                return Err(ConfigError::Invalid("need gaussians >= 1, cameras >= 2 and a non-empty image".into()).into());
            }
            let scene = make_scene(seed, gaussians, cameras, &SceneOptions { width, height, ..SceneOptions::default() });
            let data = make_blur_dataset(&scene, dense, theta)?;
            write_dataset(&out, &data)?;
            println!("wrote {} cameras to {}", data.len(), out.display());
        }
        Command::Train { data, config, overrides, out, resume } => {
            let cfg = build_config(config.as_deref(), &overrides)?;
            let dataset = load_dataset(&data)?;
            let summary = train(&dataset, &cfg, &out, resume)?;
            let last = summary.rows.last().map_or(f64::NAN, |r| r.total);
            println!("trained {} iterations, final loss {last:.6}, reconstruction L1 {:.6}", cfg.total_iters, summary.final_l1);
            println!("checkpoint: {}", summary.checkpoint.display());
        }
        Command::Render { checkpoint, camera, mode, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cam = *ck.cameras.get(camera).ok_or_else(|| data_err(format!("camera {camera} out of range ({} cameras)", ck.cameras.len())))?;
            match mode {
                RenderMode::Sharp => write_png(&out, &ck.model.render_sharp(&cam)?)?,
                RenderMode::Blur => write_png(&out, &ck.model.render_blur(&cam, camera)?)?,
                RenderMode::Trajectory => {
                    fs::create_dir_all(&out).map_err(|e| data_err(format!("{}: {e}", out.display())))?;
                    let (frames, poses) = ck.model.render_trajectory(&cam, camera)?;
                    for (i, f) in frames.iter().enumerate() {
                        write_png(&out.join(format!("frame_{i:02}.png")), f)?;
                    }
                    let rows: Vec<TrajectorySample> =
                        poses.into_iter().zip(&ck.model.motion.grid.taus).map(|(pose, &tau)| TrajectorySample { image: camera, tau, pose }).collect();
                    let p = out.join("poses.csv");
                    write_trajectory_csv(&p, &rows).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
                }
            }
        }
        Command::Eval { checkpoint, data, report } => {
            let ck = load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            if dataset.len() != ck.cameras.len() {
                return Err(data_err(format!("checkpoint has {} cameras, dataset {}", ck.cameras.len(), dataset.len())));
            }
            let rows = evaluate(&ck.model, &dataset)?;
            if rows.iter().any(|r| r.trajectory.is_none()) {
                eprintln!("warning: no ground-truth trajectory for some images; trajectory columns left empty or omitted");
            }
            write_report(&report, &rows).map_err(|e| data_err(format!("{}: {e}", report.display())))?;
            let (blur_in, deblurred, ssim, rot) = summarize(&rows);
            println!("mean PSNR blurred {blur_in:.3} dB, deblurred {deblurred:.3} dB, SSIM {ssim:.4}");
            if let Some(r) = rot {
                println!("mean trajectory rotation error {r:.6} rad");
            }
        }
    }
    Ok(())
}

/// Parse `args`, run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
