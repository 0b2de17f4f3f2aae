//! Seeded synthetic scenes, ground-truth camera motion during exposure, and
//! blurred observations made by averaging dense renders along it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::Array;
use crate::liegroup::{compose, se3_exp, Mat3, Pose, ScrewAxis, Vec3};
use crate::motionmodel::{read_trajectory_csv, write_trajectory_csv, MotionError, TrajectorySample};
use crate::splatter::{read_cloud, read_png, render, write_cloud, write_png, Camera, GaussianCloud, Image, Intrinsics, SplatError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset files in {dir}: {}", names.join(", "))]
    Missing { dir: String, names: Vec<String> },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Shape of the rotation angle over the exposure; both are zero at `τ = 0.5`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// `θ(τ) = θ_max·(2τ − 1)`
    Linear,
    /// `θ(τ) = θ_max·sin(π(τ − 0.5))`
    Sinusoidal,
}

impl Profile {
    pub fn angle(self, theta_max: f64, tau: f64) -> f64 {
        match self {
            Profile::Linear => theta_max * (2.0 * tau - 1.0),
            Profile::Sinusoidal => theta_max * (std::f64::consts::PI * (tau - 0.5)).sin(),
        }
    }
}

/// Ground-truth motion of one camera: a fixed screw in the camera frame whose
/// angle follows `profile`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtMotion {
    pub axis: Vec3,
    pub v: Vec3,
    pub profile: Profile,
}

impl GtMotion {
    pub fn pose(&self, anchor: &Pose, theta_max: f64, tau: f64) -> Pose {
        let theta = self.profile.angle(theta_max, tau);
        let s = ScrewAxis::new(self.axis, self.v, theta).expect("unit axis by construction");
        compose(anchor, &se3_exp(&s))
    }
}

pub const MODERATE: f64 = 0.02;
pub const EXTREME: f64 = 0.15;
pub const DENSE_SAMPLES: usize = 33;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneOptions {
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub ring_radius: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions { width: 64, height: 64, focal_factor: 1.2, ring_radius: 2.5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
    pub motions: Vec<GtMotion>,
    /// Degraded copy of `cloud` used to initialize training.
    pub init_cloud: GaussianCloud,
}

fn unit(rng: &mut impl Rng) -> Vec3 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        if v.norm() > 1e-6 {
            return v.normalized();
        }
    }
}

/// Camera at `eye` looking at `target`, x right and y down.
pub fn look_at(eye: Vec3, target: Vec3) -> Pose {
    let z = (target - eye).normalized();
    let down = Vec3::new(0.0, 1.0, 0.0);
    let x = down.cross(&z).normalized();
    let y = z.cross(&x);
    let r = Mat3([[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]]);
    Pose::new(r, eye)
}

/// Deterministic scene from `seed`: Gaussians in the unit box around the
/// origin and `n_cameras` on a ring looking at the box center.
pub fn make_scene(seed: u64, n_gaussians: usize, n_cameras: usize, opts: &SceneOptions) -> SyntheticScene {
    assert!(n_gaussians >= 1 && n_cameras >= 2, "need at least one Gaussian and two cameras");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_gaussians;
    let mut means = Vec::with_capacity(3 * n);
    let mut log_scales = Vec::with_capacity(3 * n);
    let mut quats = Vec::with_capacity(4 * n);
    let mut opacity = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(3 * n);
    for _ in 0..n {
        means.extend([rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
        for _ in 0..3 {
            log_scales.push(rng.gen_range(0.02f64.ln()..0.07f64.ln()));
        }
        let q = unit4(&mut rng);
        quats.extend(q);
        opacity.push(rng.gen_range(0.5..3.0));
        colors.extend([rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0)]);
    }
    let cloud = GaussianCloud::new(
        Array::new(&[n, 3], means.clone()).expect("shape"),
        Array::new(&[n, 3], log_scales.clone()).expect("shape"),
        Array::new(&[n, 4], quats).expect("shape"),
        Array::new(&[n], opacity).expect("shape"),
        Array::new(&[n, 3], colors.clone()).expect("shape"),
        0,
    )
    .expect("finite by construction");

    let f = opts.focal_factor * opts.width as f64;
    let intr = Intrinsics { fx: f, fy: f, cx: (opts.width as f64 - 1.0) / 2.0, cy: (opts.height as f64 - 1.0) / 2.0, width: opts.width, height: opts.height };
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let cameras = (0..n_cameras)
        .map(|k| {
            let phi = phase + std::f64::consts::TAU * k as f64 / n_cameras as f64;
            let height = if k % 2 == 0 { -0.6 } else { -0.3 };
            let eye = Vec3::new(opts.ring_radius * phi.cos(), height, opts.ring_radius * phi.sin());
            Camera { intrinsics: intr, pose: look_at(eye, Vec3::ZERO) }
        })
        .collect();
    let motions = (0..n_cameras)
        .map(|_| GtMotion {
            axis: unit(&mut rng),
            v: unit(&mut rng),
            profile: if rng.gen_bool(0.5) { Profile::Linear } else { Profile::Sinusoidal },
        })
        .collect();

    // A rough stand-in for a structure-from-motion initialization: jittered
    // centers, isotropic scales, neutral opacity and noisy colors.
    let jitter = Normal::new(0.0, 0.01).expect("std");
    let color_noise = Normal::new(0.0, 0.05).expect("std");
    let init_means: Vec<f64> = means.iter().map(|m| m + jitter.sample(&mut rng)).collect();
    let init_scales: Vec<f64> = log_scales.chunks(3).flat_map(|s| [(s[0] + s[1] + s[2]) / 3.0; 3]).collect();
    let init_colors: Vec<f64> = colors.iter().map(|c| (c + color_noise.sample(&mut rng)).clamp(0.0, 1.0)).collect();
    let init_cloud = GaussianCloud::new(
        Array::new(&[n, 3], init_means).expect("shape"),
        Array::new(&[n, 3], init_scales).expect("shape"),
        Array::new(&[n, 4], [1.0, 0.0, 0.0, 0.0].repeat(n)).expect("shape"),
        Array::zeros(&[n]),
        Array::new(&[n, 3], init_colors).expect("shape"),
        0,
    )
    .expect("finite by construction");
    SyntheticScene { cloud, cameras, motions, init_cloud }
}

fn unit4(rng: &mut impl Rng) -> [f64; 4] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let q = [n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len > 1e-6 {
            return q.map(|v| v / len);
        }
    }
}

/// Observations and ground truth for every camera of a scene.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub blurred: Vec<Image>,
    /// Ground-truth sharp anchor renders; empty when unavailable.
    pub sharp: Vec<Image>,
    /// Dense ground-truth poses; empty when unavailable.
    pub trajectories: Vec<TrajectorySample>,
    pub init_cloud: GaussianCloud,
    pub scene_cloud: Option<GaussianCloud>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Ground-truth samples of one image, in time order.
    pub fn gt_trajectory(&self, image: usize) -> Vec<&TrajectorySample> {
        let mut v: Vec<&TrajectorySample> = self.trajectories.iter().filter(|s| s.image == image).collect();
        v.sort_by(|a, b| a.tau.total_cmp(&b.tau));
        v
    }
}

/// Uniform average of `frames`, accumulated as offsets from the middle frame
/// so that a static camera reproduces its sharp render exactly.
pub fn average(frames: &[Image]) -> Image {
    let mid = &frames[frames.len() / 2];
    let mut acc = vec![0.0; mid.data.len()];
    for f in frames {
        acc.iter_mut().zip(f.data.iter().zip(&mid.data)).for_each(|(a, (b, m))| *a += b - m);
    }
    let n = frames.len() as f64;
    Image { width: mid.width, height: mid.height, data: acc.iter().zip(&mid.data).map(|(a, m)| m + a / n).collect() }
}

/// Blur every camera by averaging `dense` renders along its ground-truth
/// motion scaled to `theta_max`.
pub fn make_blur_dataset(scene: &SyntheticScene, dense: usize, theta_max: f64) -> Result<Dataset, DataError> {
    if dense < 3 || dense % 2 == 0 {
        return Err(DataError::Invalid { path: "<memory>".into(), msg: format!("dense sample count must be odd and >= 3, got {dense}") });
    }
    let mut blurred = Vec::new();
    let mut sharp = Vec::new();
    let mut trajectories = Vec::new();
    for (k, (cam, motion)) in scene.cameras.iter().zip(&scene.motions).enumerate() {
        let mut frames = Vec::with_capacity(dense);
        for j in 0..dense {
            let tau = j as f64 / (dense - 1) as f64;
            let pose = motion.pose(&cam.pose, theta_max, tau);
            frames.push(render(&scene.cloud, &Camera { pose, ..*cam })?);
            trajectories.push(TrajectorySample { image: k, tau, pose });
        }
        sharp.push(frames[dense / 2].clone());
        blurred.push(average(&frames));
    }
    Ok(Dataset {
        cameras: scene.cameras.clone(),
        blurred,
        sharp,
        trajectories,
        init_cloud: scene.init_cloud.clone(),
        scene_cloud: Some(scene.cloud.clone()),
    })
}

pub const CAMERAS_HEADER: &str = "image_index,width,height,fx,fy,cx,cy,r00,r01,r02,r10,r11,r12,r20,r21,r22,t0,t1,t2";

pub fn blur_name(i: usize) -> String {
    format!("blur_{i:04}.png")
}

pub fn sharp_name(i: usize) -> String {
    format!("sharp_{i:04}.png")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn write_cameras_csv(path: &Path, cameras: &[Camera]) -> Result<(), DataError> {
    let mut body = format!("{CAMERAS_HEADER}\n");
    for (i, c) in cameras.iter().enumerate() {
        let k = &c.intrinsics;
        let mut f = vec![i.to_string(), k.width.to_string(), k.height.to_string(), k.fx.to_string(), k.fy.to_string(), k.cx.to_string(), k.cy.to_string()];
        f.extend(c.pose.rotation.to_row_major().iter().map(|v| v.to_string()));
        f.extend(c.pose.translation.0.iter().map(|v| v.to_string()));
        body.push_str(&f.join(","));
        body.push('\n');
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(body.as_bytes()).map_err(io_err(path))
}

pub fn read_cameras_csv(path: &Path) -> Result<Vec<Camera>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, msg: String| DataError::Invalid { path: path.display().to_string(), msg: format!("line {line}: {msg}") };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CAMERAS_HEADER) {
        return Err(bad(1, "unexpected header".into()));
    }
    let mut cams = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 19 {
            return Err(bad(i + 2, format!("expected 19 fields, got {}", f.len())));
        }
        let idx: usize = f[0].parse().map_err(|e| bad(i + 2, format!("{e}")))?;
        if idx != cams.len() {
            return Err(bad(i + 2, format!("expected image index {}, got {idx}", cams.len())));
        }
        let w: usize = f[1].parse().map_err(|e| bad(i + 2, format!("{e}")))?;
        let h: usize = f[2].parse().map_err(|e| bad(i + 2, format!("{e}")))?;
        let nums: Vec<f64> = f[3..].iter().map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| bad(i + 2, format!("{e}")))?;
        let intrinsics = Intrinsics { fx: nums[0], fy: nums[1], cx: nums[2], cy: nums[3], width: w, height: h };
        intrinsics.validate().map_err(|e| bad(i + 2, e.to_string()))?;
        let pose = Pose::new(Mat3::from_row_major(&nums[4..13]), Vec3::new(nums[13], nums[14], nums[15]));
        cams.push(Camera { intrinsics, pose });
    }
    Ok(cams)
}

/// Write a dataset directory: `scene.cloud`, `init.cloud`, `cameras.csv`,
/// `blur_####.png`, `sharp_####.png` and `traj_gt.csv`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if let Some(c) = &data.scene_cloud {
        write_cloud(&dir.join("scene.cloud"), c)?;
    }
    write_cloud(&dir.join("init.cloud"), &data.init_cloud)?;
    write_cameras_csv(&dir.join("cameras.csv"), &data.cameras)?;
    for (i, img) in data.blurred.iter().enumerate() {
        write_png(&dir.join(blur_name(i)), img)?;
    }
    for (i, img) in data.sharp.iter().enumerate() {
        write_png(&dir.join(sharp_name(i)), img)?;
    }
    if !data.trajectories.is_empty() {
        let path = dir.join("traj_gt.csv");
        write_trajectory_csv(&path, &data.trajectories).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Load a dataset directory. Cameras, the initial cloud and every blurred
/// image are required; ground truth is optional.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let need = |name: &str| -> PathBuf { dir.join(name) };
    let mut missing = Vec::new();
    for name in ["cameras.csv", "init.cloud"] {
        if !need(name).is_file() {
            missing.push(name.to_string());
        }
    }
    if !missing.is_empty() {
        return Err(DataError::Missing { dir: dir.display().to_string(), names: missing });
    }
    let cameras = read_cameras_csv(&need("cameras.csv"))?;
    let missing: Vec<String> = (0..cameras.len()).map(blur_name).filter(|n| !need(n).is_file()).collect();
    if !missing.is_empty() {
        return Err(DataError::Missing { dir: dir.display().to_string(), names: missing });
    }
    let mut blurred = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let img = read_png(&need(&blur_name(i)))?;
        if (img.width, img.height) != (cam.intrinsics.width, cam.intrinsics.height) {
            return Err(DataError::Invalid { path: need(&blur_name(i)).display().to_string(), msg: format!("size {}x{} does not match camera", img.width, img.height) });
        }
        blurred.push(img);
    }
    let sharp = if (0..cameras.len()).all(|i| need(&sharp_name(i)).is_file()) {
        (0..cameras.len()).map(|i| read_png(&need(&sharp_name(i)))).collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let trajectories = if need("traj_gt.csv").is_file() { read_trajectory_csv(&need("traj_gt.csv"))? } else { Vec::new() };
    let scene_cloud = if need("scene.cloud").is_file() { Some(read_cloud(&need("scene.cloud"))?) } else { None };
    Ok(Dataset { cameras, blurred, sharp, trajectories, init_cloud: read_cloud(&need("init.cloud"))?, scene_cloud })
}
