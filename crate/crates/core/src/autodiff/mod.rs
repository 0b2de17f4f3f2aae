//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is rebuilt for every evaluation: each op computes its value
//! eagerly and records itself, and [`Graph::backward`] walks the tape in
//! reverse, summing gradients that reach a node along several paths.

mod array;
pub mod gradcheck;
mod graph;
mod params;

use thiserror::Error;

pub use array::Array;
pub use graph::{CustomOp, Gradients, Graph, Unary, Var};
pub use params::{Param, ParamGroup, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_inputs, GradCheck};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
        let n = shape.iter().product();
        Array::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let x = g.constant(Array::from_vec(vec![-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);

        let z = g.constant(Array::zeros(&[3]));
        let s = g.softmax(z, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let img = g.constant(Array::new(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let k = g.constant(Array::new(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let y = g.conv2d(img, k, None).unwrap();
        assert_eq!(g.value(y).data(), &[2., 4., 6., 8., 10., 12.]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.variable(Array::from_vec(vec![1.0, 2.0]));
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward_all(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let x = g.variable(Array::from_vec(vec![-1.0, 2.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward_all(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);

        let mut g = Graph::new();
        let t = g.variable(Array::scalar(0.0));
        let s = g.sin(t);
        let grads = g.backward_all(s).unwrap();
        assert_eq!(grads.get(t).unwrap().item(), 1.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Array::zeros(&[2]));
        assert!(matches!(g.backward_all(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[4]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
        let m = g.constant(Array::zeros(&[3, 5]));
        assert!(g.matmul(a, a).is_err());
        assert!(g.matmul(a, m).is_ok());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // y = x·x + x with x used three times.
        let mut g = Graph::new();
        let x = g.variable(Array::scalar(3.0));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let grads = g.backward_all(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn params_receive_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Array::from_vec(vec![1.0, -2.0]), ParamGroup::Motion);
        let mut g = Graph::new();
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        let p = g.mul(w1, w2).unwrap();
        let loss = g.sum(p);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_array(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let w = rand_array(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// `Σ y ⊙ W` with a fixed, non-uniform `W` so every output coordinate is in play.
    fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var, AutodiffError> {
        let shape = g.shape(y).to_vec();
        let n = shape.iter().product();
        let w = Array::new(&shape, (0..n).map(|i| (i as f64 * 0.7 + 0.3).sin()).collect())?;
        let wv = g.constant(w);
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    }

    fn check(name: &str, inputs: Vec<Array>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>) {
        let report = check_inputs(&inputs, &GradCheck::default(), f).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{name}: {report:?}");
    }

    /// Ten randomized trials per op, central differences with step 1e-5.
    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let a = rand_array(&mut rng, &[3, 4], -1.0, 1.0);
            let b = rand_array(&mut rng, &[3, 4], 0.5, 1.5);
            let row = rand_array(&mut rng, &[4], -1.0, 1.0);

            check("add", vec![a.clone(), row.clone()], |g, v| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y)
            });
            check("sub", vec![a.clone(), b.clone()], |g, v| {
                let y = g.sub(v[0], v[1])?;
                weighted_sum(g, y)
            });
            check("mul", vec![a.clone(), row.clone()], |g, v| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y)
            });
            check("div", vec![a.clone(), b.clone()], |g, v| {
                let y = g.div(v[0], v[1])?;
                weighted_sum(g, y)
            });
            for kind in [
                Unary::Neg,
                Unary::Scale(1.7),
                Unary::Offset(0.3),
                Unary::Relu,
                Unary::Sigmoid,
                Unary::Tanh,
                Unary::Exp,
                Unary::Sin,
                Unary::Cos,
                Unary::Square,
                Unary::Abs,
                Unary::MaxScalar(0.1),
            ] {
                check(&format!("{kind:?}"), vec![a.clone()], |g, v| {
                    let y = g.unary(kind, v[0]);
                    weighted_sum(g, y)
                });
            }
            for kind in [Unary::Sqrt, Unary::Ln, Unary::SincA, Unary::SincB, Unary::SincC] {
                check(&format!("{kind:?}"), vec![b.clone()], |g, v| {
                    let y = g.unary(kind, v[0]);
                    weighted_sum(g, y)
                });
            }
            let small = rand_array(&mut rng, &[3, 4], 0.0, 0.009);
            for kind in [Unary::SincA, Unary::SincB, Unary::SincC] {
                check(&format!("{kind:?} series"), vec![small.clone()], |g, v| {
                    let y = g.unary(kind, v[0]);
                    weighted_sum(g, y)
                });
            }
            check("softmax", vec![a.clone()], |g, v| {
                let y = g.softmax(v[0], 0)?;
                weighted_sum(g, y)
            });
            check("softmax last", vec![a.clone()], |g, v| {
                let y = g.softmax(v[0], 1)?;
                weighted_sum(g, y)
            });
            check("mean/sum_axis", vec![a.clone()], |g, v| {
                let s = g.sum_axis(v[0], 0, false)?;
                let sq = g.square(s);
                let m = g.mean_axis(v[0], 1, true)?;
                let e = g.exp(m);
                let a = g.sum(sq);
                let b = g.mean(e);
                g.add(a, b)
            });

            let m1 = rand_array(&mut rng, &[2, 3, 4], -1.0, 1.0);
            let m2 = rand_array(&mut rng, &[4, 5], -1.0, 1.0);
            let m3 = rand_array(&mut rng, &[2, 4, 5], -1.0, 1.0);
            for (lhs, rhs) in [(a.clone(), m2.clone()), (m1.clone(), m2.clone()), (m1.clone(), m3.clone()), (a.clone(), m3.clone())] {
                check("matmul", vec![lhs, rhs], |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    let s = g.sin(y);
                    Ok(g.sum(s))
                });
            }

            let img = rand_array(&mut rng, &[2, 2, 5, 6], -1.0, 1.0);
            let ker = rand_array(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
            let bias = rand_array(&mut rng, &[3], -1.0, 1.0);
            check("conv2d", vec![img.clone(), ker, bias], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]))?;
                let s = g.sin(y);
                Ok(g.sum(s))
            });
            let ker5 = rand_array(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
            check("conv2d 5x5", vec![img, ker5], |g, v| {
                let y = g.conv2d(v[0], v[1], None)?;
                let s = g.square(y);
                Ok(g.sum(s))
            });

            check("concat/slice/reshape/permute", vec![m1.clone(), a.clone()], |g, v| {
                let r = g.reshape(v[1], &[1, 3, 4])?;
                let c = g.concat(&[v[0], r], 0)?;
                let s = g.slice(c, 1, 1, 3)?;
                let p = g.permute(s, &[2, 0, 1])?;
                let t = g.transpose(p)?;
                let q = g.cos(t);
                Ok(g.sum(q))
            });
            check("broadcast_to", vec![row.clone()], |g, v| {
                let b = g.broadcast_to(v[0], &[3, 4])?;
                let s = g.sin(b);
                let t = g.mul(s, b)?;
                Ok(g.sum(t))
            });
            let vecs = rand_array(&mut rng, &[4, 3], -1.0, 1.0);
            check("skew", vec![vecs], |g, v| {
                let k = g.skew(v[0])?;
                let k2 = g.matmul(k, k)?;
                let s = g.sin(k2);
                let t = g.add(s, k)?;
                let u = g.exp(t);
                Ok(g.sum(u))
            });
        }
    }
}
