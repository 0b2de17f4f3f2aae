//! Per-image continuous camera trajectories.
//!
//! The default estimator embeds the image index, encodes it into rigid and
//! refinement latents, integrates both through the exposure with RK4 and
//! decodes every sample into a screw motion and a near-identity correction.
//! Each pose is `T_anchor · exp(screw) · correction`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, ParamGroup, ParamStore, Var};
use crate::liegroup::{Mat3, Pose, Vec3};
use crate::neuralode::{integrate, sample_times, step_size, Derivative, DerivativeNet, OdeError, TimeGrid};
use crate::nn::{normal, Dense, Init};

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("image index {index} out of range for {count} images")]
    ImageIndex { index: usize, count: usize },
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {msg}")]
    Csv { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Ode,
    Mlp,
    Gru,
    Linear,
    Bspline,
    /// Every sample sits at the anchor pose.
    None,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [Estimator::Ode, Estimator::Mlp, Estimator::Gru, Estimator::Linear, Estimator::Bspline, Estimator::None];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ode => "ode",
            Estimator::Mlp => "mlp",
            Estimator::Gru => "gru",
            Estimator::Linear => "linear",
            Estimator::Bspline => "bspline",
            Estimator::None => "none",
        }
    }

    /// Whether the estimator has a learned latent that the refinement head
    /// can decode.
    pub fn supports_cmr(self) -> bool {
        matches!(self, Estimator::Ode | Estimator::Mlp | Estimator::Gru)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown estimator `{s}` (expected one of ode, mlp, gru, linear, bspline, none)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionConfig {
    pub estimator: Estimator,
    pub n_poses: usize,
    pub latent_dim: usize,
    pub substeps: usize,
    pub cmr: bool,
    pub share_derivative: bool,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig { estimator: Estimator::Ode, n_poses: 9, latent_dim: 64, substeps: 4, cmr: true, share_derivative: true }
    }
}

const EMBED: &str = "motion.embed";
const LINEAR_START: &str = "motion.linear.start";
const LINEAR_END: &str = "motion.linear.end";
const SPLINE: &str = "motion.spline";
const CMR_INIT: f64 = 1e-5;

/// Poses of one image on a graph: rotations `(N, 3, 3)` and translations
/// `(N, 3)`, camera-to-world.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryVars {
    pub rotations: Var,
    pub translations: Var,
    /// `A + I` of every refinement offset, `(N, 3, 3)`, when the refinement
    /// head is active.
    pub cmr_rotations: Option<Var>,
}

impl TrajectoryVars {
    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.rotations)[0]
    }

    /// Sample `i` as a `(3, 3)` rotation and `(3)` translation.
    pub fn pose(&self, g: &mut Graph, i: usize) -> Result<(Var, Var), AutodiffError> {
        let r = g.slice(self.rotations, 0, i, i + 1)?;
        let r = g.reshape(r, &[3, 3])?;
        let t = g.slice(self.translations, 0, i, i + 1)?;
        let t = g.reshape(t, &[3])?;
        Ok((r, t))
    }

    pub fn poses(&self, g: &Graph) -> Vec<Pose> {
        let (r, t) = (g.value(self.rotations).data(), g.value(self.translations).data());
        (0..r.len() / 9).map(|i| Pose::new(Mat3::from_row_major(&r[9 * i..9 * i + 9]), Vec3::new(t[3 * i], t[3 * i + 1], t[3 * i + 2]))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MotionModel {
    pub cfg: MotionConfig,
    pub n_images: usize,
    pub grid: TimeGrid,
}

struct Layers {
    enc_r: Dense,
    enc_c: Dense,
    dec_r: Dense,
    omega: Dense,
    theta: Dense,
    v: Dense,
    dec_c: Dense,
    cmr_rot: Dense,
    cmr_trans: Dense,
    mlp1: Dense,
    mlp2: Dense,
    gru_fwd: Gru,
    gru_bwd: Gru,
    ode_f: DerivativeNet,
    ode_g: DerivativeNet,
}

fn eye(n: usize) -> Array {
    let mut a = Array::zeros(&[n, n]);
    for i in 0..n {
        a.data_mut()[i * n + i] = 1.0;
    }
    a
}

/// `(R, t)` of `exp` of unit-axis screws: `ω̂ (N, 3)`, `θ (N, 1)`, `v (N, 3)`.
pub fn screw_exp_graph(g: &mut Graph, omega_hat: Var, theta: Var, v: Var) -> Result<(Var, Var), AutodiffError> {
    let n = g.shape(omega_hat)[0];
    let k = g.skew(omega_hat)?;
    let k2 = g.matmul(k, k)?;
    let th = g.reshape(theta, &[n, 1, 1])?;
    let s = g.sin(th);
    let c = g.cos(th);
    let nc = g.neg(c);
    let one_minus_cos = g.offset(nc, 1.0);
    let th_minus_sin = g.sub(th, s)?;
    let i3 = g.constant(eye(3));
    let a = g.mul(s, k)?;
    let b = g.mul(one_minus_cos, k2)?;
    let r = g.add(i3, a)?;
    let r = g.add(r, b)?;
    let gi = g.mul(th, i3)?;
    let gk = g.mul(one_minus_cos, k)?;
    let gk2 = g.mul(th_minus_sin, k2)?;
    let gm = g.add(gi, gk)?;
    let gm = g.add(gm, gk2)?;
    let vc = g.reshape(v, &[n, 3, 1])?;
    let t = g.matmul(gm, vc)?;
    let t = g.reshape(t, &[n, 3])?;
    Ok((r, t))
}

/// `(R, t)` of `exp` of general twists `(w, v)`, each `(N, 3)`, smooth through
/// `w = 0`.
pub fn twist_exp_graph(g: &mut Graph, w: Var, v: Var) -> Result<(Var, Var), AutodiffError> {
    let n = g.shape(w)[0];
    let sq = g.square(w);
    let x = g.sum_axis(sq, 1, true)?;
    let x = g.reshape(x, &[n, 1, 1])?;
    let a = g.unary(crate::autodiff::Unary::SincA, x);
    let b = g.unary(crate::autodiff::Unary::SincB, x);
    let c = g.unary(crate::autodiff::Unary::SincC, x);
    let k = g.skew(w)?;
    let k2 = g.matmul(k, k)?;
    let i3 = g.constant(eye(3));
    let ak = g.mul(a, k)?;
    let bk2 = g.mul(b, k2)?;
    let r = g.add(i3, ak)?;
    let r = g.add(r, bk2)?;
    let bk = g.mul(b, k)?;
    let ck2 = g.mul(c, k2)?;
    let vm = g.add(i3, bk)?;
    let vm = g.add(vm, ck2)?;
    let vc = g.reshape(v, &[n, 3, 1])?;
    let t = g.matmul(vm, vc)?;
    let t = g.reshape(t, &[n, 3])?;
    Ok((r, t))
}

/// Gated recurrent cell with a scalar input.
#[derive(Clone, Debug)]
struct Gru {
    input: Dense,
    hidden: Dense,
    dim: usize,
}

impl Gru {
    fn new(name: &str, dim: usize) -> Self {
        Gru { input: Dense::new(&format!("{name}.input"), 1, 3 * dim), hidden: Dense::new(&format!("{name}.hidden"), dim, 3 * dim), dim }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        // Both maps use the hidden size for the init bound, as recurrent cells usually do.
        let bound = 1.0 / (self.dim as f64).sqrt();
        for d in [&self.input, &self.hidden] {
            store.insert(&format!("{}.w", d.name), crate::neuralode::uniform(rng, &[d.fan_in, d.fan_out], bound), ParamGroup::Motion);
            store.insert(&format!("{}.b", d.name), crate::neuralode::uniform(rng, &[d.fan_out], bound), ParamGroup::Motion);
        }
    }

    fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var, AutodiffError> {
        let d = self.dim;
        let xi = self.input.apply(g, store, x)?;
        let hh = self.hidden.apply(g, store, h)?;
        let (xr, xz, xn) = (g.slice(xi, 1, 0, d)?, g.slice(xi, 1, d, 2 * d)?, g.slice(xi, 1, 2 * d, 3 * d)?);
        let (hr, hz, hn) = (g.slice(hh, 1, 0, d)?, g.slice(hh, 1, d, 2 * d)?, g.slice(hh, 1, 2 * d, 3 * d)?);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let nn = g.add(xn, rn)?;
        let nn = g.tanh(nn);
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h, nn)?;
        let zd = g.mul(z, diff)?;
        g.add(nn, zd)
    }
}

impl MotionModel {
    pub fn new(cfg: MotionConfig, n_images: usize) -> Result<Self, MotionError> {
        let grid = sample_times(cfg.n_poses)?;
        Ok(MotionModel { cfg, n_images, grid })
    }

    fn cmr_active(&self) -> bool {
        self.cfg.cmr && self.cfg.estimator.supports_cmr()
    }

    fn layers(&self) -> Layers {
        let d = self.cfg.latent_dim;
        let streams = if self.cmr_active() { 2 } else { 1 };
        Layers {
            enc_r: Dense::new("motion.enc_r", d, d),
            enc_c: Dense::new("motion.enc_c", d, d),
            dec_r: Dense::new("motion.dec_r.hidden", d, d),
            omega: Dense::new("motion.dec_r.omega", d, 3),
            theta: Dense::new("motion.dec_r.theta", d, 1),
            v: Dense::new("motion.dec_r.v", d, 3),
            dec_c: Dense::new("motion.dec_c.hidden", d, d),
            cmr_rot: Dense::new("motion.dec_c.rot", d, 9),
            cmr_trans: Dense::new("motion.dec_c.trans", d, 3),
            mlp1: Dense::new("motion.mlp.l1", d, d),
            mlp2: Dense::new("motion.mlp.l2", d, self.cfg.n_poses * d * streams),
            gru_fwd: Gru::new("motion.gru_fwd", d),
            gru_bwd: Gru::new("motion.gru_bwd", d),
            ode_f: DerivativeNet::new("motion.ode_f", d),
            ode_g: DerivativeNet::new("motion.ode_g", d),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.cfg.latent_dim;
        let l = self.layers();
        let m = ParamGroup::Motion;
        match self.cfg.estimator {
            Estimator::None => return,
            Estimator::Linear => {
                store.insert(LINEAR_START, Array::zeros(&[self.n_images, 6]), m);
                store.insert(LINEAR_END, Array::zeros(&[self.n_images, 6]), m);
                return;
            }
            Estimator::Bspline => {
                store.insert(SPLINE, Array::zeros(&[self.n_images, 24]), m);
                return;
            }
            _ => {}
        }
        store.insert(EMBED, normal(rng, &[self.n_images, d], 0.01), m);
        match self.cfg.estimator {
            Estimator::Ode | Estimator::Gru => {
                l.enc_r.init(store, rng, Init::FanIn, m);
                if self.cmr_active() {
                    l.enc_c.init(store, rng, Init::FanIn, m);
                }
                if self.cfg.estimator == Estimator::Ode {
                    l.ode_f.init(store, rng);
                    if self.cmr_active() && !self.cfg.share_derivative {
                        l.ode_g.init(store, rng);
                    }
                } else {
                    l.gru_fwd.init(store, rng);
                    l.gru_bwd.init(store, rng);
                }
            }
            _ => {
                l.mlp1.init(store, rng, Init::FanIn, m);
                l.mlp2.init(store, rng, Init::FanIn, m);
            }
        }
        l.dec_r.init(store, rng, Init::FanIn, m);
        l.omega.init(store, rng, Init::FanIn, m);
        l.theta.init(store, rng, Init::Zero, m);
        l.v.init(store, rng, Init::FanIn, m);
        if self.cmr_active() {
            l.dec_c.init(store, rng, Init::FanIn, m);
            l.cmr_rot.init(store, rng, Init::Uniform(CMR_INIT), m);
            l.cmr_trans.init(store, rng, Init::Uniform(CMR_INIT), m);
        }
    }

    fn check_index(&self, image: usize) -> Result<(), MotionError> {
        if image >= self.n_images {
            return Err(MotionError::ImageIndex { index: image, count: self.n_images });
        }
        Ok(())
    }

    /// The learned embedding row of `image`, `(1, latent_dim)`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, image: usize) -> Result<Var, MotionError> {
        self.check_index(image)?;
        let e = g.param(store, EMBED)?;
        Ok(g.slice(e, 0, image, image + 1)?)
    }

    /// Split a `(N·streams, d)` stack of per-time states (time-major) back
    /// into one `(N, d)` block per stream.
    fn unstack(&self, g: &mut Graph, states: &[Var], streams: usize) -> Result<Vec<Var>, AutodiffError> {
        let (n, d) = (self.cfg.n_poses, self.cfg.latent_dim);
        let st = g.concat(states, 0)?;
        let st = g.reshape(st, &[n, streams, d])?;
        (0..streams)
            .map(|s| {
                let part = g.slice(st, 1, s, s + 1)?;
                g.reshape(part, &[n, d])
            })
            .collect()
    }

    fn ode_latents(&self, g: &mut Graph, store: &ParamStore, l: &Layers, start: Var) -> Result<Vec<Var>, MotionError> {
        let h = step_size(self.cfg.n_poses, self.cfg.substeps);
        let tau_m = self.grid.anchor_tau();
        let f = l.ode_f.bind(g, store)?;
        if !self.cmr_active() {
            let outs = integrate(g, start, tau_m, &self.grid.taus, h, &f)?;
            return Ok(self.unstack(g, &outs, 1)?);
        }
        if self.cfg.share_derivative {
            let outs = integrate(g, start, tau_m, &self.grid.taus, h, &f)?;
            return Ok(self.unstack(g, &outs, 2)?);
        }
        let (zr, zc) = (g.slice(start, 0, 0, 1)?, g.slice(start, 0, 1, 2)?);
        let gnet = l.ode_g.bind(g, store)?;
        let outs_r = integrate(g, zr, tau_m, &self.grid.taus, h, &f)?;
        let outs_c = integrate(g, zc, tau_m, &self.grid.taus, h, &gnet as &dyn Derivative)?;
        let r = self.unstack(g, &outs_r, 1)?;
        let c = self.unstack(g, &outs_c, 1)?;
        Ok(vec![r[0], c[0]])
    }

    fn gru_latents(&self, g: &mut Graph, store: &ParamStore, l: &Layers, start: Var) -> Result<Vec<Var>, MotionError> {
        let streams = g.shape(start)[0];
        let (n, m) = (self.cfg.n_poses, self.grid.anchor);
        let mut states = vec![start; n];
        for (range, cell) in [((m + 1..n).collect::<Vec<_>>(), &l.gru_fwd), ((0..m).rev().collect(), &l.gru_bwd)] {
            let mut h = start;
            for k in range {
                let x = g.constant(Array::full(&[streams, 1], self.grid.taus[k] - self.grid.anchor_tau()));
                h = cell.step(g, store, x, h)?;
                states[k] = h;
            }
        }
        Ok(self.unstack(g, &states, streams)?)
    }

    fn latents(&self, g: &mut Graph, store: &ParamStore, l: &Layers, image: usize) -> Result<Vec<Var>, MotionError> {
        let e = self.embed(g, store, image)?;
        let streams = if self.cmr_active() { 2 } else { 1 };
        if self.cfg.estimator == Estimator::Mlp {
            let h = l.mlp1.apply_relu(g, store, e)?;
            let out = l.mlp2.apply(g, store, h)?;
            let (n, d) = (self.cfg.n_poses, self.cfg.latent_dim);
            let out = g.reshape(out, &[n, streams, d])?;
            return (0..streams)
                .map(|s| {
                    let part = g.slice(out, 1, s, s + 1)?;
                    Ok(g.reshape(part, &[n, d])?)
                })
                .collect();
        }
        let zr = l.enc_r.apply_relu(g, store, e)?;
        let start = if self.cmr_active() {
            let zc = l.enc_c.apply_relu(g, store, e)?;
            g.concat(&[zr, zc], 0)?
        } else {
            zr
        };
        match self.cfg.estimator {
            Estimator::Gru => self.gru_latents(g, store, l, start),
            _ => self.ode_latents(g, store, l, start),
        }
    }

    /// Decoded screw `(ω̂, θ, v)` for a `(N, d)` block of rigid latents.
    pub fn decode_rigid(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<(Var, Var, Var), AutodiffError> {
        let l = self.layers();
        let h = l.dec_r.apply_relu(g, store, z)?;
        let omega = l.omega.apply(g, store, h)?;
        let theta = l.theta.apply(g, store, h)?;
        let v = l.v.apply(g, store, h)?;
        let sq = g.square(omega);
        let n2 = g.sum_axis(sq, 1, true)?;
        let n2 = g.max_scalar(n2, 1e-16);
        let norm = g.sqrt(n2);
        let omega_hat = g.div(omega, norm)?;
        Ok((omega_hat, theta, v))
    }

    /// Refinement offsets `(A + I (N, 3, 3), t (N, 3))` for a `(N, d)` block.
    pub fn decode_cmr(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<(Var, Var), AutodiffError> {
        let l = self.layers();
        let n = g.shape(z)[0];
        let h = l.dec_c.apply_relu(g, store, z)?;
        let a = l.cmr_rot.apply(g, store, h)?;
        let a = g.reshape(a, &[n, 3, 3])?;
        let i3 = g.constant(eye(3));
        let r = g.add(a, i3)?;
        let t = l.cmr_trans.apply(g, store, h)?;
        Ok((r, t))
    }

    /// Offsets relative to the anchor, `(R (N, 3, 3), t (N, 3))`, plus the
    /// refinement rotations.
    fn offsets(&self, g: &mut Graph, store: &ParamStore, image: usize) -> Result<(Var, Var, Option<Var>), MotionError> {
        self.check_index(image)?;
        let n = self.cfg.n_poses;
        match self.cfg.estimator {
            Estimator::None => {
                let mut r = Array::zeros(&[n, 3, 3]);
                for i in 0..n {
                    for k in 0..3 {
                        r.data_mut()[9 * i + 4 * k] = 1.0;
                    }
                }
                return Ok((g.constant(r), g.constant(Array::zeros(&[n, 3])), None));
            }
            Estimator::Linear | Estimator::Bspline => {
                let basis = self.blend_basis();
                let controls = if self.cfg.estimator == Estimator::Linear {
                    let s = g.param(store, LINEAR_START)?;
                    let e = g.param(store, LINEAR_END)?;
                    let s = g.slice(s, 0, image, image + 1)?;
                    let e = g.slice(e, 0, image, image + 1)?;
                    g.concat(&[s, e], 0)?
                } else {
                    let c = g.param(store, SPLINE)?;
                    let c = g.slice(c, 0, image, image + 1)?;
                    g.reshape(c, &[4, 6])?
                };
                let b = g.constant(basis);
                let xi = g.matmul(b, controls)?;
                let (w, v) = (g.slice(xi, 1, 0, 3)?, g.slice(xi, 1, 3, 6)?);
                let (r, t) = twist_exp_graph(g, w, v)?;
                return Ok((r, t, None));
            }
            _ => {}
        }
        let l = self.layers();
        let lat = self.latents(g, store, &l, image)?;
        let (omega_hat, theta, v) = self.decode_rigid(g, store, lat[0])?;
        let (rr, tr) = screw_exp_graph(g, omega_hat, theta, v)?;
        if lat.len() == 1 {
            return Ok((rr, tr, None));
        }
        let (rc, tc) = self.decode_cmr(g, store, lat[1])?;
        let r = g.matmul(rr, rc)?;
        let tc3 = g.reshape(tc, &[n, 3, 1])?;
        let rt = g.matmul(rr, tc3)?;
        let rt = g.reshape(rt, &[n, 3])?;
        let t = g.add(rt, tr)?;
        Ok((r, t, Some(rc)))
    }

    /// Interpolation weights `(N, controls)` for the linear and spline estimators.
    fn blend_basis(&self) -> Array {
        let taus = &self.grid.taus;
        let n = taus.len();
        if self.cfg.estimator == Estimator::Linear {
            let data = taus.iter().flat_map(|&t| [1.0 - t, t]).collect();
            return Array::new(&[n, 2], data).expect("basis shape");
        }
        let data = taus
            .iter()
            .flat_map(|&u| {
                let (u2, u3) = (u * u, u * u * u);
                [(1.0 - u).powi(3) / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0, (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0]
            })
            .collect();
        Array::new(&[n, 4], data).expect("basis shape")
    }

    /// All `N` poses of `image` given its calibrated anchor pose.
    pub fn trajectory(&self, g: &mut Graph, store: &ParamStore, anchor: &Pose, image: usize) -> Result<TrajectoryVars, MotionError> {
        let (r_off, t_off, cmr) = self.offsets(g, store, image)?;
        let ra = g.constant(Array::new(&[3, 3], anchor.rotation.to_row_major().to_vec())?);
        let ta = g.constant(Array::new(&[3], anchor.translation.0.to_vec())?);
        let rotations = g.matmul(ra, r_off)?;
        let rat = g.transpose(ra)?;
        let t = g.matmul(t_off, rat)?;
        let translations = g.add(t, ta)?;
        Ok(TrajectoryVars { rotations, translations, cmr_rotations: cmr })
    }

    /// Plain evaluation of [`MotionModel::trajectory`].
    pub fn poses(&self, store: &ParamStore, anchor: &Pose, image: usize) -> Result<Vec<Pose>, MotionError> {
        let mut g = Graph::new();
        let tr = self.trajectory(&mut g, store, anchor, image)?;
        Ok(tr.poses(&g))
    }
}

/// One row of a trajectory CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub image: usize,
    pub tau: f64,
    pub pose: Pose,
}

pub const TRAJECTORY_HEADER: &str = "image_index,tau,r00,r01,r02,r10,r11,r12,r20,r21,r22,t0,t1,t2";

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectorySample]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for s in rows {
        let mut fields = vec![s.image.to_string(), s.tau.to_string()];
        fields.extend(s.pose.rotation.to_row_major().iter().map(|v| v.to_string()));
        fields.extend(s.pose.translation.0.iter().map(|v| v.to_string()));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectorySample>, MotionError> {
    let err = |msg: String| MotionError::Csv { path: path.display().to_string(), msg };
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if i == 0 {
            if line.trim() != TRAJECTORY_HEADER {
                return Err(err(format!("unexpected header `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(err(format!("line {}: expected 14 fields, got {}", i + 1, f.len())));
        }
        let image = f[0].parse().map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        let nums: Vec<f64> = f[1..].iter().map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        rows.push(TrajectorySample {
            image,
            tau: nums[0],
            pose: Pose::new(Mat3::from_row_major(&nums[1..10]), Vec3::new(nums[10], nums[11], nums[12])),
        });
    }
    Ok(rows)
}
