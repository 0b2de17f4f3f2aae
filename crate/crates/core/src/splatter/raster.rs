//! Depth-sorted alpha compositing of projected 2D Gaussians, with a
//! hand-written backward pass.

use rayon::prelude::*;

use crate::autodiff::{Array, AutodiffError, CustomOp, Graph, Var};

/// Added to every projected covariance, in pixels².
pub const DILATION: f64 = 0.3;
/// Per-pixel accumulation stops once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Gaussians closer than this are culled.
pub const NEAR: f64 = 0.01;
/// Support radius in standard deviations. The falloff is shifted down so it
/// reaches zero on the ellipse at this Mahalanobis distance, which keeps the
/// rendered image continuous in every input.
pub const CUTOFF_SIGMAS: f64 = 3.0;

/// Image-plane layout shared by the forward and backward passes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewport {
    pub width: usize,
    pub height: usize,
    pub cx: f64,
    pub cy: f64,
}

/// Everything the backward pass needs besides the input arrays: the conic of
/// each dilated covariance and, per pixel, the contributing Gaussians in
/// front-to-back order.
#[derive(Debug)]
struct Plan {
    view: Viewport,
    conics: Vec<[f64; 3]>,
    lists: Vec<Vec<u32>>,
}

/// Inverse of `[[a, b], [b, c]]` as `(A, B, C)` plus its bounding radius.
fn conic(a: f64, b: f64, c: f64) -> Option<([f64; 3], f64)> {
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lmax = mid + (mid * mid - det).max(0.0).sqrt();
    Some(([c / det, -b / det, a / det], CUTOFF_SIGMAS * lmax.sqrt()))
}

impl Plan {
    fn build(view: Viewport, offsets: &[f64], cov: &[f64], depth: &[f64]) -> Plan {
        let g = depth.len();
        let mut order: Vec<usize> = (0..g).filter(|&i| depth[i] > NEAR).collect();
        order.sort_by(|&i, &j| depth[i].total_cmp(&depth[j]));
        let mut conics = vec![[0.0; 3]; g];
        let mut lists = vec![Vec::new(); view.width * view.height];
        for &i in &order {
            let (a, b, c) = (cov[3 * i] + DILATION, cov[3 * i + 1], cov[3 * i + 2] + DILATION);
            let Some((q, r)) = conic(a, b, c) else { continue };
            conics[i] = q;
            let (u, v) = (offsets[2 * i], offsets[2 * i + 1]);
            if !(u.is_finite() && v.is_finite()) {
                continue;
            }
            let x0 = (view.cx + u - r).floor().max(0.0) as usize;
            let y0 = (view.cy + v - r).floor().max(0.0) as usize;
            let x1 = ((view.cx + u + r).ceil() + 1.0).clamp(0.0, view.width as f64) as usize;
            let y1 = ((view.cy + v + r).ceil() + 1.0).clamp(0.0, view.height as f64) as usize;
            for py in y0..y1 {
                let dy = (py as f64 - view.cy) - v;
                if dy.abs() > r {
                    continue;
                }
                for px in x0..x1 {
                    let dx = (px as f64 - view.cx) - u;
                    if dx.abs() <= r {
                        lists[py * view.width + px].push(i as u32);
                    }
                }
            }
        }
        Plan { view, conics, lists }
    }

    fn delta(&self, px: usize, py: usize, offsets: &[f64], i: usize) -> (f64, f64) {
        ((px as f64 - self.view.cx) - offsets[2 * i], (py as f64 - self.view.cy) - offsets[2 * i + 1])
    }

    fn falloff(&self, i: usize, dx: f64, dy: f64) -> f64 {
        self.falloff_grad(i, dx, dy).0
    }

    /// Falloff and its derivative with respect to the exponent
    /// `−½·(dx, dy)ᵀ Σ⁻¹ (dx, dy)`.
    fn falloff_grad(&self, i: usize, dx: f64, dy: f64) -> (f64, f64) {
        let [a, b, c] = self.conics[i];
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if q >= CUTOFF_SIGMAS * CUTOFF_SIGMAS {
            return (0.0, 0.0);
        }
        let floor = (-0.5 * CUTOFF_SIGMAS * CUTOFF_SIGMAS).exp();
        let e = (-0.5 * q).exp();
        ((e - floor) / (1.0 - floor), e / (1.0 - floor))
    }
}

/// Per-pixel outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct Composite {
    /// `(H, W, 3)` colors.
    pub image: Array,
    /// Transmittance left after the last blended Gaussian, `(H, W)`.
    pub transmittance: Array,
    /// Sum of blending weights `αᵢ′∏ⱼ<ᵢ(1−αⱼ′)`, `(H, W)`.
    pub weight_sum: Array,
}

fn composite(plan: &Plan, offsets: &[f64], opacity: &[f64], colors: &[f64]) -> Composite {
    let Viewport { width, height, .. } = plan.view;
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..height)
        .into_par_iter()
        .map(|py| {
            let mut img = vec![0.0; width * 3];
            let mut trans = vec![1.0; width];
            let mut wsum = vec![0.0; width];
            for px in 0..width {
                let mut t = 1.0;
                let mut acc = [0.0; 3];
                let mut w_acc = 0.0;
                for &gi in &plan.lists[py * width + px] {
                    let i = gi as usize;
                    let (dx, dy) = plan.delta(px, py, offsets, i);
                    let alpha = opacity[i] * plan.falloff(i, dx, dy);
                    let w = alpha * t;
                    for ch in 0..3 {
                        acc[ch] += colors[3 * i + ch] * w;
                    }
                    w_acc += w;
                    t *= 1.0 - alpha;
                    if t < MIN_TRANSMITTANCE {
                        break;
                    }
                }
                img[px * 3..px * 3 + 3].copy_from_slice(&acc);
                trans[px] = t;
                wsum[px] = w_acc;
            }
            (img, trans, wsum)
        })
        .collect();
    let mut image = Vec::with_capacity(width * height * 3);
    let mut transmittance = Vec::with_capacity(width * height);
    let mut weight_sum = Vec::with_capacity(width * height);
    for (img, t, w) in rows {
        image.extend(img);
        transmittance.extend(t);
        weight_sum.extend(w);
    }
    Composite {
        image: Array::from_parts(vec![height, width, 3], image),
        transmittance: Array::from_parts(vec![height, width], transmittance),
        weight_sum: Array::from_parts(vec![height, width], weight_sum),
    }
}

/// Composite without recording anything on a tape.
///
/// `offsets` are projected means relative to the principal point `(G, 2)`,
/// `cov` the undilated 2D covariances as `(a, b, c)` rows `(G, 3)`,
/// `opacity` in `[0, 1]` `(G)`, `colors` `(G, 3)` and `depth` `(G)`.
pub fn composite_plain(view: Viewport, offsets: &Array, cov: &Array, opacity: &Array, colors: &Array, depth: &[f64]) -> Result<Composite, AutodiffError> {
    check_shapes(offsets, cov, opacity, colors, depth)?;
    let plan = Plan::build(view, offsets.data(), cov.data(), depth);
    Ok(composite(&plan, offsets.data(), opacity.data(), colors.data()))
}

fn check_shapes(offsets: &Array, cov: &Array, opacity: &Array, colors: &Array, depth: &[f64]) -> Result<(), AutodiffError> {
    let g = depth.len();
    for (arr, want) in [(offsets, vec![g, 2]), (cov, vec![g, 3]), (opacity, vec![g]), (colors, vec![g, 3])] {
        if arr.shape() != want.as_slice() {
            return Err(AutodiffError::ShapeMismatch { op: "rasterize", lhs: arr.shape().to_vec(), rhs: want });
        }
    }
    Ok(())
}

/// Differentiable compositing; returns an `(H, W, 3)` image node. `depth` only
/// orders and culls, so it receives no gradient.
pub fn rasterize(g: &mut Graph, view: Viewport, offsets: Var, cov: Var, opacity: Var, colors: Var, depth: &[f64]) -> Result<Var, AutodiffError> {
    let (ov, cv, av, kv) = (g.value(offsets), g.value(cov), g.value(opacity), g.value(colors));
    check_shapes(ov, cv, av, kv, depth)?;
    let plan = Plan::build(view, ov.data(), cv.data(), depth);
    let out = composite(&plan, ov.data(), av.data(), kv.data());
    Ok(g.custom(Box::new(RasterOp { plan }), &[offsets, cov, opacity, colors], out.image))
}

#[derive(Debug)]
struct RasterOp {
    plan: Plan,
}

/// Gradient slots per Gaussian: offset (2), cov (3), opacity (1), color (3).
const SLOTS: usize = 9;

impl CustomOp for RasterOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Option<Array>> {
        let (offsets, cov, opacity, colors) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let plan = &self.plan;
        let Viewport { width, height, .. } = plan.view;
        let n = opacity.len();
        let gout = grad.data();
        let rows: Vec<Vec<f64>> = (0..height)
            .into_par_iter()
            .map(|py| {
                let mut acc = vec![0.0; n * SLOTS];
                let mut ts = Vec::new();
                let mut alphas = Vec::new();
                for px in 0..width {
                    let list = &plan.lists[py * width + px];
                    let gp = &gout[(py * width + px) * 3..(py * width + px) * 3 + 3];
                    if list.is_empty() || gp.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    ts.clear();
                    alphas.clear();
                    let mut t = 1.0;
                    for &gi in list {
                        let i = gi as usize;
                        let (dx, dy) = plan.delta(px, py, offsets, i);
                        let alpha = opacity[i] * plan.falloff(i, dx, dy);
                        ts.push(t);
                        alphas.push(alpha);
                        t *= 1.0 - alpha;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    // Color of everything behind entry k, as seen through k.
                    let mut behind = [0.0; 3];
                    for k in (0..ts.len()).rev() {
                        let i = list[k] as usize;
                        let (alpha, t) = (alphas[k], ts[k]);
                        let col = &colors[3 * i..3 * i + 3];
                        let mut g_alpha = 0.0;
                        for ch in 0..3 {
                            acc[i * SLOTS + 6 + ch] += gp[ch] * alpha * t;
                            g_alpha += gp[ch] * t * (col[ch] - behind[ch]);
                        }
                        for ch in 0..3 {
                            behind[ch] = col[ch] * alpha + (1.0 - alpha) * behind[ch];
                        }
                        let (dx, dy) = plan.delta(px, py, offsets, i);
                        let (fall, dfall) = plan.falloff_grad(i, dx, dy);
                        acc[i * SLOTS + 5] += g_alpha * fall;
                        let g_pow = g_alpha * opacity[i] * dfall;
                        let [qa, qb, qc] = plan.conics[i];
                        acc[i * SLOTS] += g_pow * (qa * dx + qb * dy);
                        acc[i * SLOTS + 1] += g_pow * (qb * dx + qc * dy);
                        let (ga, gb, gc) = (-0.5 * dx * dx * g_pow, -dx * dy * g_pow, -0.5 * dy * dy * g_pow);
                        let (a, b, c) = (cov[3 * i] + DILATION, cov[3 * i + 1], cov[3 * i + 2] + DILATION);
                        let det = a * c - b * b;
                        let d2 = det * det;
                        acc[i * SLOTS + 2] += (ga * -c * c + gb * b * c + gc * -b * b) / d2;
                        acc[i * SLOTS + 3] += (ga * 2.0 * b * c - gb * (a * c + b * b) + gc * 2.0 * a * b) / d2;
                        acc[i * SLOTS + 4] += (ga * -b * b + gb * a * b + gc * -a * a) / d2;
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; n * SLOTS];
        for row in rows {
            total.iter_mut().zip(row).for_each(|(t, r)| *t += r);
        }
        let pick = |range: std::ops::Range<usize>, shape: Vec<usize>| {
            let data = (0..n).flat_map(|i| range.clone().map(move |s| (i, s))).map(|(i, s)| total[i * SLOTS + s]).collect();
            Some(Array::from_parts(shape, data))
        };
        vec![pick(0..2, vec![n, 2]), pick(2..5, vec![n, 3]), pick(5..6, vec![n]), pick(6..9, vec![n, 3])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_inputs, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const VIEW: Viewport = Viewport { width: 12, height: 10, cx: 5.5, cy: 4.0 };

    fn arr(shape: &[usize], data: Vec<f64>) -> Array {
        Array::new(shape, data).unwrap()
    }

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize) -> (Array, Array, Array, Array, Vec<f64>) {
        let mut off = Vec::new();
        let mut cov = Vec::new();
        for _ in 0..n {
            off.extend([rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)]);
            let (a, c) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0));
            cov.extend([a, rng.gen_range(-0.5..0.5), c]);
        }
        let op = (0..n).map(|_| rng.gen_range(0.2..0.9)).collect();
        let col = (0..3 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let depth = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
        (arr(&[n, 2], off), arr(&[n, 3], cov), arr(&[n], op), arr(&[n, 3], col), depth)
    }

    #[test]
    fn empty_input_renders_black() {
        let z2 = Array::zeros(&[0, 2]);
        let z3 = Array::zeros(&[0, 3]);
        let out = composite_plain(VIEW, &z2, &z3, &Array::zeros(&[0]), &z3, &[]).unwrap();
        assert!(out.image.data().iter().all(|v| *v == 0.0));
        assert!(out.transmittance.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn two_layer_blend_at_shared_center() {
        // Tiny covariances make the falloff exactly 1 at the center pixel.
        let view = Viewport { width: 3, height: 3, cx: 1.0, cy: 1.0 };
        let off = Array::zeros(&[2, 2]);
        let cov = arr(&[2, 3], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let op = arr(&[2], vec![1.0, 0.5]);
        let col = arr(&[2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        // The red Gaussian (index 1) sits in front.
        let out = composite_plain(view, &off, &cov, &op, &col, &[2.0, 1.0]).unwrap();
        let px = &out.image.data()[(3 + 1) * 3..(3 + 1) * 3 + 3];
        assert_eq!(px, &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn single_gaussian_matches_formula() {
        let off = arr(&[1, 2], vec![0.3, -0.2]);
        let cov = arr(&[1, 3], vec![2.0, 0.4, 1.5]);
        let out = composite_plain(VIEW, &off, &cov, &arr(&[1], vec![0.8]), &arr(&[1, 3], vec![1.0, 1.0, 1.0]), &[1.0]).unwrap();
        let (a, b, c) = (2.3, 0.4, 1.8);
        let det = a * c - b * b;
        for (px, py) in [(5usize, 4usize), (6, 4), (4, 5)] {
            let (dx, dy) = (px as f64 - 5.5 - 0.3, py as f64 - 4.0 + 0.2);
            let power = -0.5 * (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
            let floor = (-4.5f64).exp();
            let want = 0.8 * (power.exp() - floor) / (1.0 - floor);
            let got = out.image.data()[(py * VIEW.width + px) * 3];
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn transmittance_telescopes_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (off, cov, op, col, depth) = random_inputs(&mut rng, 40);
        let out = composite_plain(VIEW, &off, &cov, &op, &col, &depth).unwrap();
        for (w, t) in out.weight_sum.data().iter().zip(out.transmittance.data()) {
            assert!((w + t - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn input_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 15;
        let (off, cov, op, col, depth) = random_inputs(&mut rng, n);
        let base = composite_plain(VIEW, &off, &cov, &op, &col, &depth).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let take = |a: &Array, w: usize| {
            let d = perm.iter().flat_map(|&i| a.data()[i * w..(i + 1) * w].to_vec()).collect::<Vec<_>>();
            let mut shape = a.shape().to_vec();
            shape[0] = n;
            arr(&shape, d)
        };
        let depth_p: Vec<f64> = perm.iter().map(|&i| depth[i]).collect();
        let other = composite_plain(VIEW, &take(&off, 2), &take(&cov, 3), &take(&op, 1), &take(&col, 3), &depth_p).unwrap();
        assert_eq!(base.image.data(), other.image.data());
    }

    #[test]
    fn near_gaussians_are_culled() {
        let off = Array::zeros(&[1, 2]);
        let cov = arr(&[1, 3], vec![1.0, 0.0, 1.0]);
        let out = composite_plain(VIEW, &off, &cov, &arr(&[1], vec![0.9]), &arr(&[1, 3], vec![1.0; 3]), &[0.01]).unwrap();
        assert!(out.image.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            // Large footprints keep the cutoff box beyond the image for
            // every pixel, so the function is smooth.
            let n = 4;
            let (off, _, op, col, depth) = random_inputs(&mut rng, n);
            let cov = arr(&[n, 3], (0..n).flat_map(|_| [rng.gen_range(30.0..40.0), rng.gen_range(-3.0..3.0), rng.gen_range(30.0..40.0)]).collect());
            let report = check_inputs(&[off, cov, op, col], &GradCheck::default(), |g, v| {
                let img = rasterize(g, VIEW, v[0], v[1], v[2], v[3], &depth)?;
                let s = g.sin(img);
                Ok::<_, AutodiffError>(g.sum(s))
            })
            .unwrap();
            assert!(report.max_rel_error() < 1e-5, "trial {trial}: {report:?}");
        }
    }
}
