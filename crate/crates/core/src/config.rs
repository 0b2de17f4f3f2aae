//! Run configuration: every tunable with its default, loaded from
//! `key = value` lines and overridable per key.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::motionmodel::{Estimator, MotionConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_poses: usize,
    pub latent_dim: usize,
    pub substeps: usize,
    pub estimator: Estimator,
    pub cmr: bool,
    pub use_lo: bool,
    pub share_derivative: bool,
    pub lambda_c: f64,
    pub lambda_o: f64,
    pub lambda_m: f64,
    pub warmup: usize,
    pub motion_start: usize,
    pub weightmask_start: usize,
    pub total_iters: usize,
    pub lr_means: f64,
    pub lr_means_final: f64,
    pub lr_scales: f64,
    pub lr_quats: f64,
    pub lr_opacity: f64,
    pub lr_colors: f64,
    pub lr_motion: f64,
    pub lr_weightnet: f64,
    pub grad_clip: f64,
    pub weightnet_channels: usize,
    pub checkpoint_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            width: 64,
            height: 64,
            n_poses: 9,
            latent_dim: 64,
            substeps: 4,
            estimator: Estimator::Ode,
            cmr: true,
            use_lo: true,
            share_derivative: true,
            lambda_c: 0.3,
            lambda_o: 1e-4,
            lambda_m: 1e-3,
            warmup: 200,
            motion_start: 400,
            weightmask_start: 800,
            total_iters: 3000,
            lr_means: 1.6e-4,
            lr_means_final: 1.6e-6,
            lr_scales: 5e-3,
            lr_quats: 1e-3,
            lr_opacity: 5e-2,
            lr_colors: 2.5e-3,
            lr_motion: 1e-3,
            lr_weightnet: 1e-3,
            grad_clip: 0.0,
            weightnet_channels: 32,
            checkpoint_every: 500,
        }
    }
}

/// `(key, description)` for every config key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for scene synthesis, initialization and image order"),
    ("width", "synthesized image width"),
    ("height", "synthesized image height"),
    ("n_poses", "poses N sampled along each exposure (odd)"),
    ("latent_dim", "motion latent size"),
    ("substeps", "RK4 steps per interval between sampled poses"),
    ("estimator", "trajectory estimator: ode | mlp | gru | linear | bspline | none"),
    ("cmr", "learn the near-identity refinement of each pose"),
    ("use_lo", "penalize non-orthogonal refinements"),
    ("share_derivative", "one derivative network for rigid and refinement latents"),
    ("lambda_c", "D-SSIM weight; L1 gets 1 - lambda_c"),
    ("lambda_o", "orthogonality penalty weight"),
    ("lambda_m", "mask mean penalty weight"),
    ("warmup", "iterations rendering only the anchor pose"),
    ("motion_start", "iteration from which motion parameters train"),
    ("weightmask_start", "iteration from which pixel weights and mask are used"),
    ("total_iters", "training iterations"),
    ("lr_means", "initial learning rate of Gaussian centers"),
    ("lr_means_final", "learning rate of Gaussian centers at the last iteration"),
    ("lr_scales", "learning rate of log-scales"),
    ("lr_quats", "learning rate of rotations"),
    ("lr_opacity", "learning rate of opacity logits"),
    ("lr_colors", "learning rate of colors"),
    ("lr_motion", "learning rate of the motion model"),
    ("lr_weightnet", "learning rate of the weight network"),
    ("grad_clip", "global gradient norm clip, 0 disables"),
    ("weightnet_channels", "hidden channels of the weight network"),
    ("checkpoint_every", "iterations between checkpoints, 0 keeps only the final one"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), msg: e.to_string() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), value: value.into(), msg: "expected true or false".into() }),
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "n_poses" => self.n_poses = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "substeps" => self.substeps = parse(key, v)?,
            "estimator" => self.estimator = parse(key, v)?,
            "cmr" => self.cmr = parse_bool(key, v)?,
            "use_lo" => self.use_lo = parse_bool(key, v)?,
            "share_derivative" => self.share_derivative = parse_bool(key, v)?,
            "lambda_c" => self.lambda_c = parse(key, v)?,
            "lambda_o" => self.lambda_o = parse(key, v)?,
            "lambda_m" => self.lambda_m = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "motion_start" => self.motion_start = parse(key, v)?,
            "weightmask_start" => self.weightmask_start = parse(key, v)?,
            "total_iters" => self.total_iters = parse(key, v)?,
            "lr_means" => self.lr_means = parse(key, v)?,
            "lr_means_final" => self.lr_means_final = parse(key, v)?,
            "lr_scales" => self.lr_scales = parse(key, v)?,
            "lr_quats" => self.lr_quats = parse(key, v)?,
            "lr_opacity" => self.lr_opacity = parse(key, v)?,
            "lr_colors" => self.lr_colors = parse(key, v)?,
            "lr_motion" => self.lr_motion = parse(key, v)?,
            "lr_weightnet" => self.lr_weightnet = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "weightnet_channels" => self.weightnet_channels = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "width" => self.width.to_string(),
            "height" => self.height.to_string(),
            "n_poses" => self.n_poses.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "substeps" => self.substeps.to_string(),
            "estimator" => self.estimator.to_string(),
            "cmr" => self.cmr.to_string(),
            "use_lo" => self.use_lo.to_string(),
            "share_derivative" => self.share_derivative.to_string(),
            "lambda_c" => self.lambda_c.to_string(),
            "lambda_o" => self.lambda_o.to_string(),
            "lambda_m" => self.lambda_m.to_string(),
            "warmup" => self.warmup.to_string(),
            "motion_start" => self.motion_start.to_string(),
            "weightmask_start" => self.weightmask_start.to_string(),
            "total_iters" => self.total_iters.to_string(),
            "lr_means" => self.lr_means.to_string(),
            "lr_means_final" => self.lr_means_final.to_string(),
            "lr_scales" => self.lr_scales.to_string(),
            "lr_quats" => self.lr_quats.to_string(),
            "lr_opacity" => self.lr_opacity.to_string(),
            "lr_colors" => self.lr_colors.to_string(),
            "lr_motion" => self.lr_motion.to_string(),
            "lr_weightnet" => self.lr_weightnet.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "weightnet_channels" => self.weightnet_channels.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: kv.to_string() })?;
        self.set(k, v)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        let mut c = Config::default();
        c.apply_text(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_poses < 3 || self.n_poses % 2 == 0 {
            return bad(format!("n_poses must be odd and >= 3, got {}", self.n_poses));
        }
        if self.latent_dim < 2 || self.latent_dim % 2 == 1 {
            return bad(format!("latent_dim must be even and >= 2, got {}", self.latent_dim));
        }
        if self.substeps == 0 || self.weightnet_channels == 0 || self.width == 0 || self.height == 0 {
            return bad("substeps, weightnet_channels, width and height must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_c) || self.lambda_o < 0.0 || self.lambda_m < 0.0 {
            return bad("lambda_c must lie in [0, 1] and the other weights be >= 0".into());
        }
        if !(self.warmup <= self.motion_start && self.motion_start <= self.weightmask_start && self.weightmask_start <= self.total_iters) {
            return bad(format!(
                "need warmup <= motion_start <= weightmask_start <= total_iters, got {} {} {} {}",
                self.warmup, self.motion_start, self.weightmask_start, self.total_iters
            ));
        }
        let lrs = [self.lr_means, self.lr_means_final, self.lr_scales, self.lr_quats, self.lr_opacity, self.lr_colors, self.lr_motion, self.lr_weightnet];
        if lrs.iter().any(|v| !v.is_finite() || *v < 0.0) || !self.grad_clip.is_finite() || self.grad_clip < 0.0 {
            return bad("learning rates and grad_clip must be finite and >= 0".into());
        }
        if self.lr_means > 0.0 && self.lr_means_final <= 0.0 {
            return bad("lr_means_final must be > 0 when lr_means is".into());
        }
        Ok(())
    }

    pub fn motion(&self) -> MotionConfig {
        MotionConfig {
            estimator: self.estimator,
            n_poses: self.n_poses,
            latent_dim: self.latent_dim,
            substeps: self.substeps,
            cmr: self.cmr,
            share_derivative: self.share_derivative,
        }
    }

    /// Key listing with defaults, for `--help`.
    pub fn help_text() -> String {
        let d = Config::default();
        let mut s = String::from("Config keys (file lines `key = value`, or --set key=value):\n");
        for (k, desc) in KEYS {
            let _ = writeln!(s, "  {k:<20} {:<10} {desc}", d.get(k).expect("listed key"));
        }
        s
    }
}
