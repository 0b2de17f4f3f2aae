//! Central finite-difference gradient checks.
//!
//! The numeric side only re-runs forward passes, so it never touches the
//! backward code it is checking. Errors are reported per input (or per
//! parameter) as `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, floor)`
//! over the checked coordinates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, AutodiffError, Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many coordinates per input, sampled without
    /// replacement. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, max_coords: None, floor: 1e-8, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    pub rel_error: f64,
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&InputCheck> {
        self.inputs.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn coords(len: usize, cfg: &GradCheck, salt: u64) -> Vec<usize> {
    match cfg.max_coords {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn relative(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, f64, f64) {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    (diff / na.max(nn).max(floor), na, nn)
}

/// Check `f` with respect to freshly created leaf variables holding `inputs`.
pub fn check_inputs<E: From<AutodiffError>>(
    inputs: &[Array],
    cfg: &GradCheck,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var, E>,
) -> Result<GradCheckReport, E> {
    let eval = |vals: &[Array]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|a| g.variable(a.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.variable(a.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward_all(loss)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Array> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Array::zeros(inputs[i].shape());
        let analytic_full = grads.get(*var).unwrap_or(&zeros);
        let idx = coords(inputs[i].len(), cfg, i as u64);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * cfg.step));
            analytic.push(analytic_full.data()[j]);
        }
        let (rel_error, analytic_norm, numeric_norm) = relative(&analytic, &numeric, cfg.floor);
        report.inputs.push(InputCheck { name: format!("input{i}"), rel_error, coords: idx.len(), analytic_norm, numeric_norm });
    }
    Ok(report)
}

/// Check `f` with respect to the named parameters of `store`.
pub fn check_params<E: From<AutodiffError>>(
    store: &ParamStore,
    names: &[&str],
    cfg: &GradCheck,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
) -> Result<GradCheckReport, E> {
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss, &mut analytic_store)?;
    }
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (i, name) in names.iter().enumerate() {
        let len = store.value(name)?.len();
        let idx = coords(len, cfg, i as u64 + 1);
        let analytic_full = analytic_store.grad(name)?.clone();
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = work.value(name)?.data()[j];
            let eval = |v: f64, work: &mut ParamStore| -> Result<f64, E> {
                work.value_mut(name)?.data_mut()[j] = v;
                let mut g = Graph::new();
                let loss = f(&mut g, work)?;
                Ok(g.value(loss).item())
            };
            let up = eval(orig + cfg.step, &mut work)?;
            let down = eval(orig - cfg.step, &mut work)?;
            work.value_mut(name)?.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * cfg.step));
            analytic.push(analytic_full.data()[j]);
        }
        let (rel_error, analytic_norm, numeric_norm) = relative(&analytic, &numeric, cfg.floor);
        report.inputs.push(InputCheck { name: name.to_string(), rel_error, coords: idx.len(), analytic_norm, numeric_norm });
    }
    Ok(report)
}
