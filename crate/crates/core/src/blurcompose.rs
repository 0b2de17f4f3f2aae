//! Turning the sharp renders along a trajectory into one blurry prediction:
//! per-pixel convex weights over the frames and a mask blending the blur
//! with the sharp anchor frame.

use rand::Rng;

use crate::autodiff::{Array, AutodiffError, Graph, ParamGroup, ParamStore, Var};
use crate::neuralode::uniform_fan_in;

const CONV1: &str = "weightnet.conv1";
const CONV2: &str = "weightnet.conv2";
const WEIGHT_HEAD: &str = "weightnet.weights";
const MASK_HEAD: &str = "weightnet.mask";

/// Frame-wise CNN with a weight head (softmax over frames) and a mask head
/// (mean over frames, then sigmoid).
#[derive(Clone, Debug)]
pub struct WeightNet {
    pub channels: usize,
}

impl Default for WeightNet {
    fn default() -> Self {
        WeightNet { channels: 32 }
    }
}

fn conv_init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cout: usize, cin: usize, k: usize, zero_bias: bool) {
    let fan_in = cin * k * k;
    store.insert(&format!("{name}.w"), uniform_fan_in(rng, &[cout, cin, k, k], fan_in), ParamGroup::WeightNet);
    let b = if zero_bias { Array::zeros(&[cout]) } else { uniform_fan_in(rng, &[cout], fan_in) };
    store.insert(&format!("{name}.b"), b, ParamGroup::WeightNet);
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var, AutodiffError> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.conv2d(x, w, Some(b))
}

/// Validate a `(N, H, W, 3)` frame stack.
fn frame_dims(g: &Graph, frames: Var) -> Result<(usize, usize, usize), AutodiffError> {
    match *g.shape(frames) {
        [n, h, w, 3] if n >= 2 => Ok((n, h, w)),
        ref s => Err(AutodiffError::Invalid { op: "blurcompose", msg: format!("expected (N >= 2, H, W, 3) frames, got {s:?}") }),
    }
}

impl WeightNet {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.channels;
        conv_init(store, rng, CONV1, c, 3, 5, false);
        conv_init(store, rng, CONV2, c, c, 3, false);
        conv_init(store, rng, WEIGHT_HEAD, 3, c, 1, false);
        conv_init(store, rng, MASK_HEAD, 3, c, 1, true);
    }

    /// Per-frame weights `P (N, H, W, 3)` and mask `M (H, W, 3)` for a stack
    /// of frames `(N, H, W, 3)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<(Var, Var), AutodiffError> {
        let (_, h, w) = frame_dims(g, frames)?;
        let x = g.permute(frames, &[0, 3, 1, 2])?;
        let f = conv(g, store, CONV1, x)?;
        let f = g.relu(f);
        let f = conv(g, store, CONV2, f)?;
        let f = g.relu(f);
        let logits = conv(g, store, WEIGHT_HEAD, f)?;
        let p = g.softmax(logits, 0)?;
        let p = g.permute(p, &[0, 2, 3, 1])?;
        let pooled = g.mean_axis(f, 0, true)?;
        let m = conv(g, store, MASK_HEAD, pooled)?;
        let m = g.sigmoid(m);
        let m = g.permute(m, &[0, 2, 3, 1])?;
        let m = g.reshape(m, &[h, w, 3])?;
        Ok((p, m))
    }

    pub fn pixel_weights(&self, g: &mut Graph, store: &ParamStore, frames: Var) -> Result<Var, AutodiffError> {
        Ok(self.forward(g, store, frames)?.0)
    }
}

/// `Σᵢ Pᵢ Iᵢ`, written as `I₀ + Σᵢ Pᵢ (Iᵢ − I₀)` so that identical frames and
/// one-hot weights reproduce a frame exactly.
pub fn compose_blur(g: &mut Graph, frames: Var, weights: Var) -> Result<Var, AutodiffError> {
    let (n, h, w) = frame_dims(g, frames)?;
    if g.shape(weights) != g.shape(frames) {
        return Err(AutodiffError::ShapeMismatch { op: "compose_blur", lhs: g.shape(frames).to_vec(), rhs: g.shape(weights).to_vec() });
    }
    let first = g.slice(frames, 0, 0, 1)?;
    let rest = g.slice(frames, 0, 1, n)?;
    let diff = g.sub(rest, first)?;
    let pr = g.slice(weights, 0, 1, n)?;
    let wd = g.mul(pr, diff)?;
    let s = g.sum_axis(wd, 0, false)?;
    let first = g.reshape(first, &[h, w, 3])?;
    g.add(first, s)
}

/// `(1 − M)·sharp + M·blur`.
pub fn blend_output(g: &mut Graph, sharp: Var, blur: Var, mask: Var) -> Result<Var, AutodiffError> {
    let nm = g.neg(mask);
    let keep = g.offset(nm, 1.0);
    let a = g.mul(keep, sharp)?;
    let b = g.mul(mask, blur)?;
    g.add(a, b)
}

/// Uniform average of the frames.
pub fn mean_frames(g: &mut Graph, frames: Var) -> Result<Var, AutodiffError> {
    frame_dims(g, frames)?;
    g.mean_axis(frames, 0, false)
}

/// Stack `(H, W, 3)` renders into `(N, H, W, 3)`.
pub fn stack_frames(g: &mut Graph, frames: &[Var]) -> Result<Var, AutodiffError> {
    let parts = frames
        .iter()
        .map(|&f| {
            let mut s = vec![1];
            s.extend_from_slice(g.shape(f));
            g.reshape(f, &s)
        })
        .collect::<Result<Vec<_>, _>>()?;
    g.concat(&parts, 0)
}
