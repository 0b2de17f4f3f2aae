//! The trainable bundle (cloud, motion model, weight network) and its
//! forward pass, shared by training, rendering and evaluation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, Param, ParamGroup, ParamStore, Var};
use crate::blurcompose::{blend_output, compose_blur, mean_frames, stack_frames, WeightNet};
use crate::liegroup::Pose;
use crate::motionmodel::{MotionConfig, MotionError, MotionModel, TrajectoryVars};
use crate::splatter::{render_graph, Camera, CloudVars, GaussianCloud, Image, PoseVars, SplatError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error("{path}: {msg}")]
    Archive { path: String, msg: String },
}

/// Which prediction stands in for the blurry observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    /// Render at the calibrated anchor pose.
    Sharp,
    /// Uniform mean of the trajectory renders.
    Mean,
    /// Learned pixel weights and mask.
    Full,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub motion: MotionModel,
    pub weightnet: WeightNet,
    pub sh_degree: u8,
    pub store: ParamStore,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Predicted observation `(H, W, 3)`.
    pub output: Var,
    pub trajectory: Option<TrajectoryVars>,
    pub frames: Vec<Var>,
    pub weights: Option<Var>,
    pub mask: Option<Var>,
}

impl Model {
    pub fn new(cloud: &GaussianCloud, motion: MotionConfig, n_images: usize, weightnet: WeightNet, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let motion = MotionModel::new(motion, n_images)?;
        let mut store = ParamStore::new();
        cloud.insert_into(&mut store);
        motion.init(&mut store, rng);
        weightnet.init(&mut store, rng);
        Ok(Model { motion, weightnet, sh_degree: cloud.sh_degree, store })
    }

    pub fn cloud(&self) -> Result<GaussianCloud, ModelError> {
        Ok(GaussianCloud::from_store(&self.store, self.sh_degree)?)
    }

    /// Prediction for image `image` whose calibrated camera is `cam`.
    pub fn forward(&self, g: &mut Graph, cam: &Camera, image: usize, phase: Phase) -> Result<Forward, ModelError> {
        let store = &self.store;
        let cloud = CloudVars::params(g, store, self.sh_degree)?;
        if phase == Phase::Sharp {
            let pose = PoseVars::constant(g, &cam.pose);
            let output = render_graph(g, &cloud, &cam.intrinsics, pose)?;
            return Ok(Forward { output, trajectory: None, frames: vec![], weights: None, mask: None });
        }
        let traj = self.motion.trajectory(g, store, &cam.pose, image)?;
        let mut frames = Vec::with_capacity(traj.len(g));
        for i in 0..traj.len(g) {
            let (rotation, translation) = traj.pose(g, i)?;
            frames.push(render_graph(g, &cloud, &cam.intrinsics, PoseVars { rotation, translation })?);
        }
        let stack = stack_frames(g, &frames)?;
        if phase == Phase::Mean {
            let output = mean_frames(g, stack)?;
            return Ok(Forward { output, trajectory: Some(traj), frames, weights: None, mask: None });
        }
        let (p, m) = self.weightnet.forward(g, store, stack)?;
        let blur = compose_blur(g, stack, p)?;
        let sharp = frames[self.motion.grid.anchor];
        let output = blend_output(g, sharp, blur, m)?;
        Ok(Forward { output, trajectory: Some(traj), frames, weights: Some(p), mask: Some(m) })
    }

    pub fn render_sharp(&self, cam: &Camera) -> Result<Image, ModelError> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, cam, 0, Phase::Sharp)?;
        Ok(Image::from_array(g.value(f.output))?)
    }

    pub fn render_blur(&self, cam: &Camera, image: usize) -> Result<Image, ModelError> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, cam, image, Phase::Full)?;
        Ok(Image::from_array(g.value(f.output))?)
    }

    /// The `N` trajectory renders and their poses.
    pub fn render_trajectory(&self, cam: &Camera, image: usize) -> Result<(Vec<Image>, Vec<Pose>), ModelError> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, cam, image, Phase::Mean)?;
        let imgs = f.frames.iter().map(|v| Image::from_array(g.value(*v))).collect::<Result<Vec<_>, _>>()?;
        let poses = f.trajectory.map(|t| t.poses(&g)).unwrap_or_default();
        Ok((imgs, poses))
    }
}

const MAGIC: &[u8; 8] = b"MSPARAMS";

fn group_code(g: ParamGroup) -> u8 {
    ParamGroup::ALL.iter().position(|x| *x == g).expect("group listed") as u8
}

/// Write every parameter with its Adam state: for each entry the name, group,
/// shape, step count, then value, first and second moments as little-endian
/// doubles. `iteration` is stored in the header.
pub fn write_params(path: &Path, store: &ParamStore, iteration: u64) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&iteration.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[group_code(p.group)])?;
        w.write_all(&(p.value.ndim() as u64).to_le_bytes())?;
        for d in p.value.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&p.step.to_le_bytes())?;
        for arr in [&p.value, &p.m, &p.v] {
            for v in arr.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()
}

pub fn read_params(path: &Path) -> Result<(ParamStore, u64), ModelError> {
    let err = |msg: String| ModelError::Archive { path: path.display().to_string(), msg };
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut r = BufReader::new(file);
    let u64_at = |r: &mut BufReader<File>| -> Result<u64, ModelError> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| err(format!("truncated: {e}")))?;
        Ok(u64::from_le_bytes(b))
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| err(format!("truncated: {e}")))?;
    if &magic != MAGIC {
        return Err(err("not a parameter archive".into()));
    }
    let iteration = u64_at(&mut r)?;
    let count = u64_at(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u64_at(&mut r)? as usize;
        if len > 4096 {
            return Err(err(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| err(format!("truncated: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| err(e.to_string()))?;
        let mut gb = [0u8; 1];
        r.read_exact(&mut gb).map_err(|e| err(format!("truncated: {e}")))?;
        let group = *ParamGroup::ALL.get(gb[0] as usize).ok_or_else(|| err(format!("bad group code {}", gb[0])))?;
        let ndim = u64_at(&mut r)? as usize;
        if ndim > 8 {
            return Err(err(format!("implausible rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| u64_at(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let step = u64_at(&mut r)?;
        let n: usize = shape.iter().product();
        let mut arrays = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(|e| err(format!("truncated: {e}")))?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push(Array::new(&shape, data)?);
        }
        let v = arrays.pop().expect("three arrays");
        let m = arrays.pop().expect("three arrays");
        let value = arrays.pop().expect("three arrays");
        let mut p = Param::new(value, group);
        p.m = m;
        p.v = v;
        p.step = step;
        store.insert_param(&name, p);
    }
    Ok((store, iteration))
}
