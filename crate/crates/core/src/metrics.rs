//! Image quality and trajectory accuracy.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, Var};
use crate::liegroup::{rotation_angle, Pose};
use crate::model::{Model, ModelError};
use crate::scenegen::Dataset;
use crate::splatter::Image;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("images differ in size: {0}x{1} vs {2}x{3}")]
    Size(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the {WINDOW}x{WINDOW} window")]
    TooSmall(usize, usize),
    #[error("trajectory lengths differ: {0} vs {1}")]
    Count(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Reported instead of +∞ for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const C1: f64 = K1 * K1;
pub const C2: f64 = K2 * K2;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn window_taps() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut t = [0.0; WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

fn same_size(a: &Image, b: &Image) -> Result<(), MetricError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricError::Size(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    same_size(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// PSNR in dB for unit dynamic range. Panics on size mismatch.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let m = mse(a, b).expect("psnr of differently sized images");
    if m == 0.0 {
        PSNR_IDENTICAL
    } else {
        -10.0 * m.log10()
    }
}

/// Mean local SSIM as a graph node. `a`, `b` are `(H, W, 3)`; windows that
/// would overhang the border are dropped.
pub fn ssim_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var, MetricError> {
    let shape = g.shape(a).to_vec();
    if shape.len() != 3 || g.shape(b) != shape.as_slice() {
        return Err(MetricError::Autodiff(AutodiffError::ShapeMismatch { op: "ssim", lhs: shape, rhs: g.shape(b).to_vec() }));
    }
    let (h, w) = (shape[0], shape[1]);
    if h < WINDOW || w < WINDOW {
        return Err(MetricError::TooSmall(w, h));
    }
    let taps = window_taps();
    let kernel: Vec<f64> = taps.iter().flat_map(|r| taps.iter().map(move |c| r * c)).collect();
    let k = g.constant(Array::new(&[1, 1, WINDOW, WINDOW], kernel)?);
    let half = WINDOW / 2;
    let blur = |g: &mut Graph, x: Var| -> Result<Var, AutodiffError> {
        let chw = g.permute(x, &[2, 0, 1])?;
        let x4 = g.reshape(chw, &[shape[2], 1, h, w])?;
        let y = g.conv2d(x4, k, None)?;
        let y = g.slice(y, 2, half, h - half)?;
        g.slice(y, 3, half, w - half)
    };
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let mu_a = blur(g, a)?;
    let mu_b = blur(g, b)?;
    let e_aa = blur(g, aa)?;
    let e_bb = blur(g, bb)?;
    let e_ab = blur(g, ab)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let l_num = g.scale(mu_ab, 2.0);
    let l_num = g.offset(l_num, C1);
    let c_num = g.scale(cov, 2.0);
    let c_num = g.offset(c_num, C2);
    let num = g.mul(l_num, c_num)?;
    let l_den = g.add(mu_aa, mu_bb)?;
    let l_den = g.offset(l_den, C1);
    let c_den = g.add(var_a, var_b)?;
    let c_den = g.offset(c_den, C2);
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// Mean local SSIM over all channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    same_size(a, b)?;
    let mut g = Graph::new();
    let av = g.constant(a.to_array());
    let bv = g.constant(b.to_array());
    let s = ssim_graph(&mut g, av, bv)?;
    Ok(g.value(s).item())
}

/// Per-sample errors between two time-aligned trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryError {
    /// Geodesic angle of `R_pred R_gtᵀ`, radians.
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
}

impl TrajectoryError {
    pub fn rotation_mean(&self) -> f64 {
        mean(&self.rotation)
    }

    pub fn rotation_max(&self) -> f64 {
        self.rotation.iter().copied().fold(0.0, f64::max)
    }

    pub fn translation_mean(&self) -> f64 {
        mean(&self.translation)
    }

    pub fn translation_max(&self) -> f64 {
        self.translation.iter().copied().fold(0.0, f64::max)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn trajectory_error(pred: &[Pose], gt: &[Pose]) -> Result<TrajectoryError, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Count(pred.len(), gt.len()));
    }
    let rotation = pred.iter().zip(gt).map(|(p, q)| rotation_angle(&(p.rotation * q.rotation.transpose()))).collect();
    let translation = pred.iter().zip(gt).map(|(p, q)| (p.translation - q.translation).norm()).collect();
    Ok(TrajectoryError { rotation, translation })
}

/// Error against `gt` or against `gt` played backwards, whichever has the
/// smaller mean rotation error. A blurred image cannot tell the direction of
/// travel apart.
pub fn trajectory_error_unsigned(pred: &[Pose], gt: &[Pose]) -> Result<TrajectoryError, MetricError> {
    let fwd = trajectory_error(pred, gt)?;
    let rev: Vec<Pose> = gt.iter().rev().copied().collect();
    let bwd = trajectory_error(pred, &rev)?;
    Ok(if bwd.rotation_mean() < fwd.rotation_mean() { bwd } else { fwd })
}

/// One row of the evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub image_index: usize,
    pub psnr_blurin: f64,
    pub psnr_deblurred: f64,
    pub ssim_deblurred: f64,
    /// `None` when no ground-truth trajectory is available.
    pub trajectory: Option<(f64, f64)>,
}

pub const REPORT_HEADER: &str = "image_index,psnr_blurin,psnr_deblurred,ssim_deblurred,traj_rot_mean,traj_trans_mean";

/// Trajectory columns are left out entirely when no row has them.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> std::io::Result<()> {
    let with_traj = rows.iter().any(|r| r.trajectory.is_some());
    let mut w = BufWriter::new(File::create(path)?);
    if with_traj {
        writeln!(w, "{REPORT_HEADER}")?;
    } else {
        writeln!(w, "image_index,psnr_blurin,psnr_deblurred,ssim_deblurred")?;
    }
    for r in rows {
        write!(w, "{},{},{},{}", r.image_index, r.psnr_blurin, r.psnr_deblurred, r.ssim_deblurred)?;
        if with_traj {
            match r.trajectory {
                Some((rot, trans)) => write!(w, ",{rot},{trans}")?,
                None => write!(w, ",,")?,
            }
        }
        writeln!(w)?;
    }
    w.flush()
}

/// Score `model` on every image of `data`: its render at the calibrated pose
/// against the sharp ground truth, and its trajectory against the dense
/// ground-truth poses (nearest time sample) when those exist.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Vec<ReportRow>, EvalError> {
    if data.sharp.len() != data.len() {
        return Err(EvalError::MissingSharp);
    }
    let mut rows = Vec::with_capacity(data.len());
    for (i, cam) in data.cameras.iter().enumerate() {
        let out = model.render_sharp(cam)?;
        let gt = &data.sharp[i];
        let dense = data.gt_trajectory(i);
        let trajectory = if dense.is_empty() {
            None
        } else {
            let pred = model.motion.poses(&model.store, &cam.pose, i).map_err(ModelError::from)?;
            let matched: Vec<Pose> = model
                .motion
                .grid
                .taus
                .iter()
                .map(|&t| dense.iter().min_by(|a, b| (a.tau - t).abs().total_cmp(&(b.tau - t).abs())).expect("non-empty").pose)
                .collect();
            let e = trajectory_error_unsigned(&pred, &matched)?;
            Some((e.rotation_mean(), e.translation_mean()))
        };
        rows.push(ReportRow {
            image_index: i,
            psnr_blurin: psnr(&data.blurred[i], gt),
            psnr_deblurred: psnr(&out, gt),
            ssim_deblurred: ssim(&out, gt)?,
            trajectory,
        });
    }
    Ok(rows)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has no ground-truth sharp images")]
    MissingSharp,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Suite means: (psnr_blurin, psnr_deblurred, ssim_deblurred, traj_rot_mean).
pub fn summarize(rows: &[ReportRow]) -> (f64, f64, f64, Option<f64>) {
    let col = |f: &dyn Fn(&ReportRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    let rot: Vec<f64> = rows.iter().filter_map(|r| r.trajectory.map(|t| t.0)).collect();
    (col(&|r| r.psnr_blurin), col(&|r| r.psnr_deblurred), col(&|r| r.ssim_deblurred), (!rot.is_empty()).then(|| mean(&rot)))
}
