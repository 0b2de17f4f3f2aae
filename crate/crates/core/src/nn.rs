//! Small layer helpers shared by the motion and weight networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Array, AutodiffError, Graph, ParamGroup, ParamStore, Var};
use crate::neuralode::{uniform, uniform_fan_in};

/// Fully connected layer `x W + b` with `W: (fan_in, fan_out)`.
#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

pub(crate) enum Init {
    FanIn,
    Zero,
    /// Weights `U(−b, b)`, zero bias.
    Uniform(f64),
}

impl Dense {
    pub fn new(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Dense { name: name.to_string(), fan_in, fan_out }
    }

    fn w(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, init: Init, group: ParamGroup) {
        let (ws, bs) = ([self.fan_in, self.fan_out], [self.fan_out]);
        let (w, b) = match init {
            Init::FanIn => (uniform_fan_in(rng, &ws, self.fan_in), uniform_fan_in(rng, &bs, self.fan_in)),
            Init::Zero => (Array::zeros(&ws), Array::zeros(&bs)),
            Init::Uniform(bound) => (uniform(rng, &ws, bound), Array::zeros(&bs)),
        };
        store.insert(&self.w(), w, group);
        store.insert(&self.b(), b, group);
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, AutodiffError> {
        let w = g.param(store, &self.w())?;
        let b = g.param(store, &self.b())?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn apply_relu(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, AutodiffError> {
        let y = self.apply(g, store, x)?;
        Ok(g.relu(y))
    }
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Array {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Array::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape product matches")
}
