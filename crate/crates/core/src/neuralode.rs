//! Fixed-step RK4 integration of latent states, differentiated by unrolling
//! the solver on the tape.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, ParamGroup, ParamStore, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("need at least 2 time samples, got {0}")]
    TooFewSamples(usize),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Uniform exposure-time samples with the calibrated pose at `anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub taus: Vec<f64>,
    pub anchor: usize,
}

impl TimeGrid {
    pub fn anchor_tau(&self) -> f64 {
        self.taus[self.anchor]
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }
}

/// `τ_i = i/(N−1)`; the anchor is index `⌊N/2⌋`.
pub fn sample_times(n: usize) -> Result<TimeGrid, OdeError> {
    if n < 2 {
        return Err(OdeError::TooFewSamples(n));
    }
    let taus = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    Ok(TimeGrid { taus, anchor: n / 2 })
}

/// Solver step for `n` samples with `substeps` RK4 steps between neighbours.
pub fn step_size(n: usize, substeps: usize) -> f64 {
    1.0 / ((n.max(2) - 1) * substeps.max(1)) as f64
}

/// Right-hand side `dz/dτ = f(z, τ)` evaluated on a graph.
pub trait Derivative {
    fn eval(&self, g: &mut Graph, z: Var, tau: f64) -> Result<Var, AutodiffError>;
}

/// Two parallel single-layer maps with relu: one produces the rotation half
/// of `dz/dτ`, the other the translation half. Both read the full latent.
#[derive(Clone, Debug)]
pub struct DerivativeNet {
    pub prefix: String,
    pub dim: usize,
}

impl DerivativeNet {
    pub fn new(prefix: &str, dim: usize) -> Self {
        DerivativeNet { prefix: prefix.to_string(), dim }
    }

    fn names(&self) -> [String; 4] {
        let p = &self.prefix;
        [format!("{p}.rot.w"), format!("{p}.rot.b"), format!("{p}.trans.w"), format!("{p}.trans.b")]
    }

    fn halves(&self) -> (usize, usize) {
        let r = self.dim / 2;
        (r, self.dim - r)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (r, t) = self.halves();
        let [rw, rb, tw, tb] = self.names();
        store.insert(&rw, uniform_fan_in(rng, &[self.dim, r], self.dim), ParamGroup::Motion);
        store.insert(&rb, uniform_fan_in(rng, &[r], self.dim), ParamGroup::Motion);
        store.insert(&tw, uniform_fan_in(rng, &[self.dim, t], self.dim), ParamGroup::Motion);
        store.insert(&tb, uniform_fan_in(rng, &[t], self.dim), ParamGroup::Motion);
    }

    /// Put the parameters on `g` once so every RK stage shares them.
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundDerivative, AutodiffError> {
        let [rw, rb, tw, tb] = self.names();
        Ok(BoundDerivative {
            rot_w: g.param(store, &rw)?,
            rot_b: g.param(store, &rb)?,
            trans_w: g.param(store, &tw)?,
            trans_b: g.param(store, &tb)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDerivative {
    rot_w: Var,
    rot_b: Var,
    trans_w: Var,
    trans_b: Var,
}

impl Derivative for BoundDerivative {
    fn eval(&self, g: &mut Graph, z: Var, _tau: f64) -> Result<Var, AutodiffError> {
        let r = g.matmul(z, self.rot_w)?;
        let r = g.add(r, self.rot_b)?;
        let r = g.relu(r);
        let t = g.matmul(z, self.trans_w)?;
        let t = g.add(t, self.trans_b)?;
        let t = g.relu(t);
        g.concat(&[r, t], 1)
    }
}

/// PyTorch-style `U(−1/√fan_in, 1/√fan_in)`.
pub(crate) fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Array {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, bound)
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 }).collect();
    Array::new(shape, data).expect("shape product matches")
}

/// One classical RK4 step; negative `h` integrates backward in time.
pub fn rk4_step(g: &mut Graph, z: Var, tau: f64, h: f64, f: &dyn Derivative) -> Result<Var, AutodiffError> {
    let k1 = f.eval(g, z, tau)?;
    let s = g.scale(k1, h / 2.0);
    let z2 = g.add(z, s)?;
    let k2 = f.eval(g, z2, tau + h / 2.0)?;
    let s = g.scale(k2, h / 2.0);
    let z3 = g.add(z, s)?;
    let k3 = f.eval(g, z3, tau + h / 2.0)?;
    let s = g.scale(k3, h);
    let z4 = g.add(z, s)?;
    let k4 = f.eval(g, z4, tau + h)?;
    let k23 = g.add(k2, k3)?;
    let k23 = g.scale(k23, 2.0);
    let acc = g.add(k1, k23)?;
    let acc = g.add(acc, k4)?;
    let acc = g.scale(acc, h / 6.0);
    g.add(z, acc)
}

/// States at each of `targets`, integrating outward from `(tau_anchor, z_anchor)`
/// with fixed step `step`.
///
/// Targets that sit on the step lattice `tau_anchor ± k·step` are reached by
/// whole steps along a single chain per direction, so two calls whose grids
/// share a target and a step size produce bit-identical states there. Targets
/// off the lattice finish with one shorter step. The anchor target returns
/// `z_anchor` itself.
pub fn integrate(
    g: &mut Graph,
    z_anchor: Var,
    tau_anchor: f64,
    targets: &[f64],
    step: f64,
    f: &dyn Derivative,
) -> Result<Vec<Var>, OdeError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(OdeError::BadStep(step));
    }
    for &t in targets {
        if !(0.0..=1.0).contains(&t) {
            return Err(OdeError::TimeOutOfRange(t));
        }
    }
    let mut out: Vec<Option<Var>> = vec![None; targets.len()];
    for dir in [1.0f64, -1.0] {
        let mut order: Vec<(usize, f64)> = targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| (t - tau_anchor) * dir > 0.0)
            .map(|(i, &t)| (i, (t - tau_anchor).abs()))
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut z = z_anchor;
        let mut k = 0usize;
        for (i, dist) in order {
            let steps = dist / step;
            let whole = (steps + 1e-9).floor() as usize;
            while k < whole {
                let tau = tau_anchor + dir * k as f64 * step;
                z = rk4_step(g, z, tau, dir * step, f)?;
                k += 1;
            }
            let rest = dist - whole as f64 * step;
            out[i] = Some(if rest.abs() <= 1e-9 * step {
                z
            } else {
                rk4_step(g, z, tau_anchor + dir * whole as f64 * step, dir * rest, f)?
            });
        }
    }
    Ok(out.into_iter().map(|v| v.unwrap_or(z_anchor)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_params, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Linear(Array);

    impl Derivative for Linear {
        fn eval(&self, g: &mut Graph, z: Var, _tau: f64) -> Result<Var, AutodiffError> {
            // Rows of z are states, so dz/dτ = z Aᵀ.
            let a = g.constant(self.0.clone());
            let at = g.transpose(a)?;
            g.matmul(z, at)
        }
    }

    struct Zero;

    impl Derivative for Zero {
        fn eval(&self, g: &mut Graph, z: Var, _tau: f64) -> Result<Var, AutodiffError> {
            Ok(g.scale(z, 0.0))
        }
    }

    fn scalar_identity() -> Linear {
        Linear(Array::new(&[1, 1], vec![1.0]).unwrap())
    }

    /// Σ Aⁿtⁿ/n! applied to z, for a small dense A.
    fn expm_apply(a: &Array, t: f64, z: &[f64]) -> Vec<f64> {
        let n = z.len();
        let mut term = z.to_vec();
        let mut acc = z.to_vec();
        for k in 1..80 {
            let mut next = vec![0.0; n];
            for r in 0..n {
                for c in 0..n {
                    next[r] += a.data()[r * n + c] * term[c];
                }
            }
            term = next.iter().map(|v| v * t / k as f64).collect();
            acc.iter_mut().zip(&term).for_each(|(x, y)| *x += y);
        }
        acc
    }

    fn run_linear(a: &Linear, z0: &[f64], tau_anchor: f64, targets: &[f64], step: f64) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let z = g.constant(Array::new(&[1, z0.len()], z0.to_vec()).unwrap());
        let outs = integrate(&mut g, z, tau_anchor, targets, step, a).unwrap();
        outs.iter().map(|v| g.value(*v).data().to_vec()).collect()
    }

    #[test]
    fn sample_times_grid() {
        let g = sample_times(9).unwrap();
        assert_eq!(g.taus, vec![0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0]);
        assert_eq!(g.anchor, 4);
        assert_eq!(g.anchor_tau(), 0.5);
        let g = sample_times(2).unwrap();
        assert_eq!((g.taus.clone(), g.anchor), (vec![0.0, 1.0], 1));
        let g = sample_times(3).unwrap();
        assert_eq!((g.taus.clone(), g.anchor), (vec![0.0, 0.5, 1.0], 1));
        assert_eq!(sample_times(1), Err(OdeError::TooFewSamples(1)));
    }

    #[test]
    fn rk4_single_step_closed_form() {
        let mut g = Graph::new();
        let z = g.constant(Array::new(&[1, 1], vec![1.0]).unwrap());
        let z1 = rk4_step(&mut g, z, 0.0, 1.0, &scalar_identity()).unwrap();
        let want = 1.0 + 1.0 + 0.5 + 1.0 / 6.0 + 1.0 / 24.0;
        assert!((g.value(z1).item() - want).abs() < 1e-15);
        let z2 = rk4_step(&mut g, z, 0.0, 0.3, &Zero).unwrap();
        assert_eq!(g.value(z2).item(), 1.0);
    }

    fn exp_error(h: f64) -> f64 {
        let out = run_linear(&scalar_identity(), &[1.0], 0.0, &[1.0], h);
        (out[0][0] - std::f64::consts::E).abs()
    }

    #[test]
    fn rk4_accuracy_and_order() {
        assert!(exp_error(0.25) < 1e-4);
        let order = (exp_error(0.1) / exp_error(0.05)).log2();
        assert!(order >= 3.8, "observed order {order}");
    }

    #[test]
    fn anchor_target_is_identity() {
        let mut g = Graph::new();
        let z = g.constant(Array::new(&[1, 3], vec![0.1, -0.2, 0.3]).unwrap());
        let outs = integrate(&mut g, z, 0.5, &[0.0, 0.5, 1.0], 0.125, &scalar_like(3)).unwrap();
        assert_eq!(outs[1], z);
    }

    fn scalar_like(n: usize) -> Linear {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 0.5;
        }
        Linear(Array::new(&[n, n], a).unwrap())
    }

    fn random_system(seed: u64, n: usize) -> (Linear, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&mut rng, &[n, n], 1.0);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (Linear(a), z)
    }

    #[test]
    fn matches_matrix_exponential() {
        let (a, z0) = random_system(4, 4);
        let grid = sample_times(9).unwrap();
        let h = step_size(9, 8);
        let outs = run_linear(&a, &z0, 0.5, &grid.taus, h);
        for (tau, got) in grid.taus.iter().zip(&outs) {
            let want = expm_apply(&a.0, tau - 0.5, &z0);
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-6, "tau {tau}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn forward_then_backward_recovers_anchor() {
        let (a, z0) = random_system(5, 4);
        let h = step_size(9, 4);
        for &target in &[0.0, 0.25, 0.875, 1.0] {
            let mut g = Graph::new();
            let z = g.constant(Array::new(&[1, 4], z0.clone()).unwrap());
            let there = integrate(&mut g, z, 0.5, &[target], h, &a).unwrap()[0];
            let back = integrate(&mut g, there, target, &[0.5], h, &a).unwrap()[0];
            for (x, y) in g.value(back).data().iter().zip(&z0) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn refined_grid_reproduces_coarse_states_bit_exactly() {
        let (a, z0) = random_system(6, 4);
        let coarse = sample_times(9).unwrap();
        let fine = sample_times(17).unwrap();
        let h = step_size(9, 4);
        assert_eq!(h, step_size(17, 2));
        let c = run_linear(&a, &z0, 0.5, &coarse.taus, h);
        let f = run_linear(&a, &z0, 0.5, &fine.taus, h);
        for (i, tau) in coarse.taus.iter().enumerate() {
            let j = fine.taus.iter().position(|t| t == tau).unwrap();
            let same = c[i].iter().zip(&f[j]).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "tau {tau}");
        }
    }

    #[test]
    fn off_lattice_targets_take_a_partial_step() {
        let (a, z0) = random_system(8, 3);
        let outs = run_linear(&a, &z0, 0.5, &[0.3, 0.71], 0.1);
        for (tau, got) in [0.3, 0.71].iter().zip(&outs) {
            let want = expm_apply(&a.0, tau - 0.5, &z0);
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut g = Graph::new();
        let z = g.constant(Array::zeros(&[1, 2]));
        assert!(matches!(integrate(&mut g, z, 0.5, &[1.5], 0.1, &Zero), Err(OdeError::TimeOutOfRange(_))));
        assert!(matches!(integrate(&mut g, z, 0.5, &[1.0], 0.0, &Zero), Err(OdeError::BadStep(_))));
    }

    #[test]
    fn gradients_through_solver_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DerivativeNet::new("f", 8);
        let mut store = ParamStore::new();
        net.init(&mut store, &mut rng);
        let z0 = uniform(&mut rng, &[2, 8], 1.0);
        let grid = sample_times(5).unwrap();
        let h = step_size(5, 4);
        let names: Vec<String> = store.names().map(String::from).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = check_params(&store, &names, &GradCheck::default(), |g, s| -> Result<Var, OdeError> {
            let f = net.bind(g, s)?;
            let z = g.constant(z0.clone());
            let outs = integrate(g, z, grid.anchor_tau(), &grid.taus, h, &f)?;
            let st = g.concat(&outs, 0)?;
            let sn = g.sin(st);
            Ok(g.sum(sn))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }
}
