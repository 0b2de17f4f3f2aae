//! The training objective, Adam, the phase schedule and the training loop.

use crate::autodiff::{Array, AutodiffError, Graph, ParamGroup, ParamStore, Var};
use crate::config::Config;
use crate::metrics::{ssim_graph, MetricError};
use crate::model::Phase;

mod train;

pub use train::{
    checkpoint_dirs, latest_checkpoint, load_checkpoint, objective, read_loss_csv, train, write_checkpoint, Checkpoint, LossRow, TrainError, TrainSummary,
    Trainer, LOSS_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// D-SSIM share; L1 gets `1 − color`.
    pub color: f64,
    pub orthogonality: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { color: 0.3, orthogonality: 1e-4, mask: 1e-3 }
    }
}

impl LossWeights {
    pub fn from_config(c: &Config) -> Self {
        LossWeights { color: c.lambda_c, orthogonality: if c.use_lo { c.lambda_o } else { 0.0 }, mask: c.lambda_m }
    }
}

/// Iteration gates of the three phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub warmup: usize,
    pub motion_start: usize,
    pub weightmask_start: usize,
    pub total_iters: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { warmup: 200, motion_start: 400, weightmask_start: 800, total_iters: 3000 }
    }
}

impl Schedule {
    pub fn from_config(c: &Config) -> Self {
        Schedule { warmup: c.warmup, motion_start: c.motion_start, weightmask_start: c.weightmask_start, total_iters: c.total_iters }
    }

    pub fn phase(&self, it: usize) -> Phase {
        if it < self.warmup {
            Phase::Sharp
        } else if it < self.weightmask_start {
            Phase::Mean
        } else {
            Phase::Full
        }
    }

    /// Whether `group` is updated at iteration `it`.
    pub fn trains(&self, group: ParamGroup, it: usize) -> bool {
        match group {
            ParamGroup::Motion => it >= self.motion_start && it >= self.warmup,
            ParamGroup::WeightNet => it >= self.weightmask_start,
            _ => true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub means: f64,
    pub means_final: f64,
    pub scales: f64,
    pub rotations: f64,
    pub opacity: f64,
    pub colors: f64,
    pub motion: f64,
    pub weightnet: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates::from_config(&Config::default())
    }
}

impl LearningRates {
    pub fn from_config(c: &Config) -> Self {
        LearningRates {
            means: c.lr_means,
            means_final: c.lr_means_final,
            scales: c.lr_scales,
            rotations: c.lr_quats,
            opacity: c.lr_opacity,
            colors: c.lr_colors,
            motion: c.lr_motion,
            weightnet: c.lr_weightnet,
        }
    }

    /// Rate of `group` at `it`; centers decay exponentially to `means_final`
    /// at `total`.
    pub fn rate(&self, group: ParamGroup, it: usize, total: usize) -> f64 {
        match group {
            ParamGroup::Means => {
                if self.means == 0.0 || total == 0 {
                    return self.means;
                }
                let t = (it as f64 / total as f64).clamp(0.0, 1.0);
                self.means * (self.means_final / self.means).powf(t)
            }
            ParamGroup::Scales => self.scales,
            ParamGroup::Rotations => self.rotations,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Colors => self.colors,
            ParamGroup::Motion => self.motion,
            ParamGroup::WeightNet => self.weightnet,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip over the updated parameters.
    pub clip: Option<f64>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: None }
    }
}

impl Adam {
    /// One update of every parameter whose group has a rate; frozen groups
    /// (`None`) keep their values and moments. Clears all gradients.
    pub fn step(&self, store: &mut ParamStore, rate: impl Fn(ParamGroup) -> Option<f64>) {
        let mut scale = 1.0;
        if let Some(c) = self.clip {
            let sq: f64 = store.iter().filter(|(_, p)| rate(p.group).is_some()).map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum();
            let norm = sq.sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        for (_, p) in store.iter_mut() {
            let Some(lr) = rate(p.group) else { continue };
            p.step += 1;
            let bc1 = 1.0 - self.beta1.powi(p.step as i32);
            let bc2 = 1.0 - self.beta2.powi(p.step as i32);
            let grads = p.grad.data();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grads[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }
}

/// Mean absolute difference.
pub fn l1(g: &mut Graph, a: Var, b: Var) -> Result<Var, AutodiffError> {
    if g.shape(a) != g.shape(b) {
        return Err(AutodiffError::ShapeMismatch { op: "l1", lhs: g.shape(a).to_vec(), rhs: g.shape(b).to_vec() });
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// `(1 − SSIM) / 2` with the metric's window and constants.
pub fn dssim(g: &mut Graph, a: Var, b: Var) -> Result<Var, MetricError> {
    let s = ssim_graph(g, a, b)?;
    let n = g.neg(s);
    let n = g.offset(n, 1.0);
    Ok(g.scale(n, 0.5))
}

/// Mean over poses of `‖RᵀR − I‖_F` for refinements `(N, 3, 3)`.
pub fn loss_orthogonality(g: &mut Graph, rotations: Var) -> Result<Var, AutodiffError> {
    let rt = g.transpose(rotations)?;
    let p = g.matmul(rt, rotations)?;
    let mut eye = Array::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[4 * i] = 1.0;
    }
    let eye = g.constant(eye);
    let d = g.sub(p, eye)?;
    let sq = g.square(d);
    let s = g.sum_axis(sq, 2, false)?;
    let s = g.sum_axis(s, 1, false)?;
    // The floor keeps the square root differentiable at exact rotations.
    let s = g.max_scalar(s, 1e-30);
    let r = g.sqrt(s);
    Ok(g.mean(r))
}

pub fn loss_mask(g: &mut Graph, mask: Var) -> Var {
    g.mean(mask)
}

/// Loss components of one image as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l1: Var,
    pub dssim: Var,
    pub orthogonality: Option<Var>,
    pub mask: Option<Var>,
    pub total: Var,
}

/// `(1 − λc)·L1 + λc·D-SSIM + λo·Lo + λM·LM`; absent terms count as zero.
pub fn total_loss(g: &mut Graph, l1: Var, dssim: Var, orthogonality: Option<Var>, mask: Option<Var>, w: &LossWeights) -> Result<LossTerms, AutodiffError> {
    let a = g.scale(l1, 1.0 - w.color);
    let b = g.scale(dssim, w.color);
    let mut total = g.add(a, b)?;
    if let Some(o) = orthogonality {
        let o = g.scale(o, w.orthogonality);
        total = g.add(total, o)?;
    }
    if let Some(m) = mask {
        let m = g.scale(m, w.mask);
        total = g.add(total, m)?;
    }
    Ok(LossTerms { l1, dssim, orthogonality, mask, total })
}

/// Scalar value of an optional term, zero when absent.
pub fn term_value(g: &Graph, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).item())
}
