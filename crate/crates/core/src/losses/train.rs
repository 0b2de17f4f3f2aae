use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{dssim, l1, loss_mask, loss_orthogonality, term_value, total_loss, Adam, LearningRates, LossTerms, LossWeights, Schedule};
use crate::autodiff::{AutodiffError, Graph, ParamGroup};
use crate::blurcompose::WeightNet;
use crate::config::{Config, ConfigError};
use crate::metrics::MetricError;
use crate::model::{read_params, write_params, Model, ModelError, Phase};
use crate::motionmodel::{write_trajectory_csv, MotionModel, TrajectorySample};
use crate::scenegen::{read_cameras_csv, write_cameras_csv, DataError, Dataset};
use crate::splatter::{read_cloud, write_cloud, Camera, SplatError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("non-finite loss or parameters at iteration {iteration}: first bad group `{group}`")]
    NonFinite { iteration: usize, group: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

pub const LOSS_HEADER: &str = "iter,L1,DSSIM,Lo,Lmask,total";

/// Loss components of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub l1: f64,
    pub dssim: f64,
    pub lo: f64,
    pub lmask: f64,
    pub total: f64,
}

impl LossRow {
    fn csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.iter, self.l1, self.dssim, self.lo, self.lmask, self.total)
    }
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>, TrainError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let bad = |msg: String| TrainError::Checkpoint { path: path.display().to_string(), msg };
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(bad("unexpected loss log header".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |k: usize| f.get(k).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad(format!("line {}: bad field {k}", i + 2)));
            Ok(LossRow {
                iter: f[0].parse().map_err(|_| bad(format!("line {}: bad iteration", i + 2)))?,
                l1: num(1)?,
                dssim: num(2)?,
                lo: num(3)?,
                lmask: num(4)?,
                total: num(5)?,
            })
        })
        .collect()
}

/// One model being fitted to a dataset.
pub struct Trainer<'a> {
    pub model: Model,
    pub data: &'a Dataset,
    pub cfg: Config,
    pub iteration: usize,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub rates: LearningRates,
    pub adam: Adam,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, cfg: &Config) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.is_empty() || data.blurred.len() != data.len() {
            return Err(DataError::Invalid { path: "<dataset>".into(), msg: format!("{} cameras but {} blurred images", data.len(), data.blurred.len()) }.into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(&data.init_cloud, cfg.motion(), data.len(), WeightNet { channels: cfg.weightnet_channels }, &mut rng)?;
        Ok(Trainer {
            model,
            data,
            cfg: cfg.clone(),
            iteration: 0,
            schedule: Schedule::from_config(cfg),
            weights: LossWeights::from_config(cfg),
            rates: LearningRates::from_config(cfg),
            adam: Adam { clip: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip), ..Adam::default() },
        })
    }

    /// Image visited at iteration `it`: every epoch is a fresh seeded
    /// permutation of the dataset.
    pub fn image_at(&self, it: usize) -> usize {
        let n = self.data.len();
        let epoch = (it / n) as u64;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order[it % n]
    }

    /// Loss of `image` in `phase`, built on `g`.
    pub fn objective(&self, g: &mut Graph, image: usize, phase: Phase) -> Result<LossTerms, TrainError> {
        objective(g, &self.model, self.data, image, phase, &self.weights, self.cfg.use_lo)
    }

    /// Forward and backward pass of iteration `it`. Gradients of groups the
    /// schedule holds frozen are zeroed.
    pub fn gradients(&mut self, it: usize) -> Result<LossRow, TrainError> {
        self.model.store.zero_grads();
        let image = self.image_at(it);
        let mut g = Graph::new();
        let terms = self.objective(&mut g, image, self.schedule.phase(it))?;
        g.backward(terms.total, &mut self.model.store)?;
        for (_, p) in self.model.store.iter_mut() {
            if !self.schedule.trains(p.group, it) {
                p.grad.fill(0.0);
            }
        }
        Ok(LossRow {
            iter: it,
            l1: g.value(terms.l1).item(),
            dssim: g.value(terms.dssim).item(),
            lo: term_value(&g, terms.orthogonality),
            lmask: term_value(&g, terms.mask),
            total: g.value(terms.total).item(),
        })
    }

    /// One optimizer iteration.
    pub fn step(&mut self) -> Result<LossRow, TrainError> {
        let it = self.iteration;
        let row = self.gradients(it)?;
        if !row.total.is_finite() || self.model.store.first_non_finite_group().is_some() {
            let group = self.model.store.first_non_finite_group().map_or("loss".to_string(), |g| g.name().to_string());
            return Err(TrainError::NonFinite { iteration: it, group });
        }
        let (sched, rates, total) = (self.schedule, self.rates, self.schedule.total_iters);
        self.adam.step(&mut self.model.store, |grp: ParamGroup| sched.trains(grp, it).then(|| rates.rate(grp, it, total)));
        if let Some(group) = self.model.store.first_non_finite_group() {
            return Err(TrainError::NonFinite { iteration: it, group: group.name().to_string() });
        }
        self.iteration += 1;
        Ok(row)
    }

    /// Mean L1 between the full prediction and each blurred image.
    pub fn reconstruction_l1(&self) -> Result<f64, TrainError> {
        let mut s = 0.0;
        for i in 0..self.data.len() {
            let mut g = Graph::new();
            let f = self.model.forward(&mut g, &self.data.cameras[i], i, Phase::Full)?;
            let target = g.constant(self.data.blurred[i].to_array());
            let l = l1(&mut g, f.output, target)?;
            s += g.value(l).item();
        }
        Ok(s / self.data.len() as f64)
    }

    /// Predicted poses of every image, with their exposure times.
    pub fn trajectories(&self) -> Result<Vec<TrajectorySample>, TrainError> {
        let mut rows = Vec::new();
        for (i, cam) in self.data.cameras.iter().enumerate() {
            let poses = self.model.motion.poses(&self.model.store, &cam.pose, i).map_err(ModelError::from)?;
            rows.extend(poses.into_iter().zip(&self.model.motion.grid.taus).map(|(pose, &tau)| TrajectorySample { image: i, tau, pose }));
        }
        Ok(rows)
    }
}

/// Loss of `model` on image `image` of `data`; the orthogonality term is only
/// built when `use_lo` is set and the model has refinements.
pub fn objective(g: &mut Graph, model: &Model, data: &Dataset, image: usize, phase: Phase, weights: &LossWeights, use_lo: bool) -> Result<LossTerms, TrainError> {
    let f = model.forward(g, &data.cameras[image], image, phase)?;
    let target = g.constant(data.blurred[image].to_array());
    let l = l1(g, f.output, target)?;
    let d = dssim(g, f.output, target)?;
    let lo = match f.trajectory.and_then(|t| t.cmr_rotations) {
        Some(r) if use_lo => Some(loss_orthogonality(g, r)?),
        _ => None,
    };
    let lm = f.mask.map(|m| loss_mask(g, m));
    Ok(total_loss(g, l, d, lo, lm, weights)?)
}

/// A saved model with what is needed to render from it.
pub struct Checkpoint {
    pub model: Model,
    pub config: Config,
    pub cameras: Vec<Camera>,
    pub iteration: usize,
}

pub fn write_checkpoint(dir: &Path, model: &Model, cfg: &Config, cameras: &[Camera], iteration: usize) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_cloud(&dir.join("cloud.cloud"), &model.cloud()?)?;
    let p = dir.join("params.bin");
    write_params(&p, &model.store, iteration as u64).map_err(io(&p))?;
    write_cameras_csv(&dir.join("cameras.csv"), cameras)?;
    let c = dir.join("config.txt");
    fs::write(&c, cfg.to_text()).map_err(io(&c))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    let bad = |msg: String| TrainError::Checkpoint { path: dir.display().to_string(), msg };
    if !dir.is_dir() {
        return Err(bad("not a directory".into()));
    }
    let config = Config::load(&dir.join("config.txt"))?;
    let cameras = read_cameras_csv(&dir.join("cameras.csv"))?;
    let cloud = read_cloud(&dir.join("cloud.cloud"))?;
    let (store, iteration) = read_params(&dir.join("params.bin"))?;
    let motion = MotionModel::new(config.motion(), cameras.len()).map_err(ModelError::from)?;
    let model = Model { motion, weightnet: WeightNet { channels: config.weightnet_channels }, sh_degree: cloud.sh_degree, store };
    // Rebuild a fresh model of the same shape and insist the archive matches it.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fresh = Model::new(&cloud, config.motion(), cameras.len(), model.weightnet.clone(), &mut rng)?;
    for (name, p) in fresh.store.iter() {
        let q = model.store.get(name).map_err(|_| bad(format!("parameter `{name}` missing")))?;
        if q.value.shape() != p.value.shape() {
            return Err(bad(format!("parameter `{name}` has shape {:?}, expected {:?}", q.value.shape(), p.value.shape())));
        }
    }
    if fresh.store.len() != model.store.len() {
        return Err(bad(format!("{} parameters, expected {}", model.store.len(), fresh.store.len())));
    }
    Ok(Checkpoint { model, config, cameras, iteration: iteration as usize })
}

/// Checkpoint directories under `out`, by iteration.
pub fn checkpoint_dirs(out: &Path) -> Vec<(usize, PathBuf)> {
    let mut v: Vec<(usize, PathBuf)> = fs::read_dir(out.join("checkpoints"))
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let it = name.strip_prefix("iter_")?.parse().ok()?;
            e.path().join("params.bin").is_file().then(|| (it, e.path()))
        })
        .collect();
    v.sort();
    v
}

pub fn latest_checkpoint(out: &Path) -> Option<(usize, PathBuf)> {
    checkpoint_dirs(out).pop()
}

fn checkpoint_path(out: &Path, it: usize) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{it:06}"))
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<LossRow>,
    pub final_l1: f64,
    pub checkpoint: PathBuf,
}

/// Run the schedule on `data`, writing `loss.csv`, `trajectory.csv` and
/// checkpoints under `out`. With `resume`, continue from the latest
/// checkpoint there.
pub fn train(data: &Dataset, cfg: &Config, out: &Path, resume: bool) -> Result<TrainSummary, TrainError> {
    fs::create_dir_all(out).map_err(io(out))?;
    let mut trainer = Trainer::new(data, cfg)?;
    let loss_path = out.join("loss.csv");
    let mut rows = Vec::new();
    if resume {
        if let Some((it, dir)) = latest_checkpoint(out) {
            let ck = load_checkpoint(&dir)?;
            trainer.model.store = ck.model.store;
            trainer.iteration = it;
            if loss_path.is_file() {
                rows = read_loss_csv(&loss_path)?;
                rows.retain(|r| r.iter < it);
            }
            if rows.len() != it {
                return Err(TrainError::Checkpoint { path: loss_path.display().to_string(), msg: format!("has {} rows before iteration {it}", rows.len()) });
            }
            log::info!("resuming from {} at iteration {it}", dir.display());
        }
    }
    let mut log = BufWriter::new(File::create(&loss_path).map_err(io(&loss_path))?);
    writeln!(log, "{LOSS_HEADER}").map_err(io(&loss_path))?;
    for r in &rows {
        writeln!(log, "{}", r.csv()).map_err(io(&loss_path))?;
    }
    let total = cfg.total_iters;
    while trainer.iteration < total {
        let row = trainer.step()?;
        writeln!(log, "{}", row.csv()).map_err(io(&loss_path))?;
        rows.push(row);
        if row.iter % 100 == 0 {
            log::info!("iter {} L1 {:.5} DSSIM {:.5} total {:.5}", row.iter, row.l1, row.dssim, row.total);
        }
        let it = trainer.iteration;
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < total {
            log.flush().map_err(io(&loss_path))?;
            write_checkpoint(&checkpoint_path(out, it), &trainer.model, cfg, &data.cameras, it)?;
        }
    }
    log.flush().map_err(io(&loss_path))?;
    let last = checkpoint_path(out, total);
    write_checkpoint(&last, &trainer.model, cfg, &data.cameras, total)?;
    let tp = out.join("trajectory.csv");
    write_trajectory_csv(&tp, &trainer.trajectories()?).map_err(io(&tp))?;
    let final_l1 = trainer.reconstruction_l1()?;
    Ok(TrainSummary { rows, final_l1, checkpoint: last })
}
