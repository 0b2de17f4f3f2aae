use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{check_inputs, check_params, GradCheck};
use crate::liegroup::{so3_exp, Mat3, Pose, Vec3};

fn intr(w: usize, h: usize, f: f64) -> Intrinsics {
    Intrinsics { fx: f, fy: f, cx: (w / 2) as f64, cy: (h / 2) as f64, width: w, height: h }
}

fn cam_at(intr: Intrinsics, pose: Pose) -> Camera {
    Camera { intrinsics: intr, pose }
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]
}

/// Cyclic Jacobi eigenvalues of a symmetric 3×3.
fn eigenvalues(m: &Mat3) -> [f64; 3] {
    let mut a = *m;
    for _ in 0..100 {
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[(p, q)].abs() < 1e-300 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut r = Mat3::IDENTITY;
            r[(p, p)] = c;
            r[(q, q)] = c;
            r[(p, q)] = s;
            r[(q, p)] = -s;
            a = r.transpose() * a * r;
        }
    }
    [a[(0, 0)], a[(1, 1)], a[(2, 2)]]
}

#[test]
fn covariance_examples() {
    let id = [1.0, 0.0, 0.0, 0.0];
    assert!(covariance(Vec3::new(1.0, 1.0, 1.0), id).max_abs_diff(&Mat3::IDENTITY) < 1e-15);
    assert!(covariance(Vec3::new(2.0, 1.0, 1.0), id).max_abs_diff(&Mat3::from_diag([4.0, 1.0, 1.0])) < 1e-15);
}

#[test]
fn covariance_is_symmetric_psd_with_squared_scales_as_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let s = Vec3::new(rng.gen_range(0.01..3.0), rng.gen_range(0.01..3.0), rng.gen_range(0.01..3.0));
        let sigma = covariance(s, random_quat(&mut rng));
        assert!(sigma.max_abs_diff(&sigma.transpose()) < 1e-12);
        let mut ev = eigenvalues(&sigma);
        ev.sort_by(f64::total_cmp);
        let mut want = [s[0] * s[0], s[1] * s[1], s[2] * s[2]];
        want.sort_by(f64::total_cmp);
        for (e, w) in ev.iter().zip(&want) {
            assert!(*e >= -1e-12);
            assert!((e - w).abs() < 1e-9 * w.max(1.0));
        }
    }
}

#[test]
fn projection_on_axis() {
    let cam = cam_at(intr(64, 64, 100.0), Pose::IDENTITY);
    let p = project(Vec3::new(0.0, 0.0, 1.0), &Mat3::IDENTITY, &cam).unwrap();
    assert_eq!(p.mean2d, [32.0, 32.0]);
    assert_eq!(p.depth, 1.0);
    let (sigma, z) = (0.05, 2.5);
    let p = project(Vec3::new(0.0, 0.0, z), &Mat3::IDENTITY.scale(sigma * sigma), &cam).unwrap();
    let want = (sigma * 100.0 / z).powi(2);
    assert!((p.cov2d[0] - want).abs() < 1e-12 && p.cov2d[1].abs() < 1e-15 && (p.cov2d[2] - want).abs() < 1e-12);
    assert!(project(Vec3::new(0.0, 0.0, 0.005), &Mat3::IDENTITY, &cam).is_none());
    assert!(project(Vec3::new(0.0, 0.0, -1.0), &Mat3::IDENTITY, &cam).is_none());
}

fn random_pose(rng: &mut ChaCha8Rng, angle: f64) -> Pose {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalized();
    let r = so3_exp(&axis, rng.gen_range(-angle..angle)).unwrap();
    Pose::new(r, Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)))
}

#[test]
fn projected_covariance_matches_numerical_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let cam = cam_at(intr(64, 48, rng.gen_range(50.0..150.0)), random_pose(&mut rng, 0.3));
        let local = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(1.0..4.0));
        let mu = cam.pose.transform_point(&local);
        let s = Vec3::new(rng.gen_range(0.01..0.2), rng.gen_range(0.01..0.2), rng.gen_range(0.01..0.2));
        let sigma = covariance(s, random_quat(&mut rng));
        let p = project(mu, &sigma, &cam).unwrap();
        // Pixel position as a function of the world point, differentiated numerically.
        let pix = |x: Vec3| project(x, &Mat3::IDENTITY, &cam).unwrap().mean2d;
        let h = 1e-6;
        let mut jac = [[0.0; 3]; 2];
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = h;
            let (a, b) = (pix(mu + Vec3(e)), pix(mu - Vec3(e)));
            for r in 0..2 {
                jac[r][k] = (a[r] - b[r]) / (2.0 * h);
            }
        }
        let mut s2 = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                for k in 0..3 {
                    for l in 0..3 {
                        s2[r][c] += jac[r][k] * sigma[(k, l)] * jac[c][l];
                    }
                }
            }
        }
        let got = p.cov2d;
        for (g, w) in got.iter().zip([s2[0][0], s2[0][1], s2[1][1]]) {
            assert!((g - w).abs() < 1e-6 * w.abs().max(1.0), "{got:?} vs {s2:?}");
        }
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, sh_degree: u8, spread: f64, scale: (f64, f64)) -> GaussianCloud {
    let mut means = Vec::new();
    for _ in 0..n {
        means.extend([rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(2.5..4.0)]);
    }
    let ls = (0..3 * n).map(|_| rng.gen_range(scale.0..scale.1)).collect();
    let q = (0..n).flat_map(|_| random_quat(rng)).collect();
    let o = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let cw = color_width(sh_degree);
    let c = (0..cw * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    GaussianCloud::new(
        Array::new(&[n, 3], means).unwrap(),
        Array::new(&[n, 3], ls).unwrap(),
        Array::new(&[n, 4], q).unwrap(),
        Array::new(&[n], o).unwrap(),
        Array::new(&[n, cw], c).unwrap(),
        sh_degree,
    )
    .unwrap()
}

#[test]
fn graph_projection_agrees_with_plain_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&mut rng, 20, 0, 0.8, (-3.0, -1.5));
    let cam = cam_at(intr(40, 30, 60.0), random_pose(&mut rng, 0.2));
    let mut g = Graph::new();
    let vars = cloud.constants(&mut g);
    let pose = PoseVars::constant(&mut g, &cam.pose);
    let proj = project_graph(&mut g, &vars, &cam.intrinsics, pose).unwrap();
    for i in 0..cloud.len() {
        let d = &cloud.means.data()[3 * i..3 * i + 3];
        let ls = &cloud.log_scales.data()[3 * i..3 * i + 3];
        let q = &cloud.quats.data()[4 * i..4 * i + 4];
        let sigma = covariance(Vec3::new(ls[0].exp(), ls[1].exp(), ls[2].exp()), [q[0], q[1], q[2], q[3]]);
        let p = project(Vec3::new(d[0], d[1], d[2]), &sigma, &cam).unwrap();
        let off = &g.value(proj.offsets).data()[2 * i..2 * i + 2];
        assert!((off[0] + cam.intrinsics.cx - p.mean2d[0]).abs() < 1e-10);
        assert!((off[1] + cam.intrinsics.cy - p.mean2d[1]).abs() < 1e-10);
        let cov = &g.value(proj.cov2d).data()[3 * i..3 * i + 3];
        for (a, b) in cov.iter().zip(p.cov2d) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
        assert!((proj.depth[i] - p.depth).abs() < 1e-12);
    }
}

#[test]
fn empty_cloud_renders_black() {
    let img = render(&GaussianCloud::empty(0), &cam_at(intr(8, 6, 10.0), Pose::IDENTITY)).unwrap();
    assert_eq!((img.width, img.height), (8, 6));
    assert!(img.data.iter().all(|v| *v == 0.0));
}

#[test]
fn single_on_axis_gaussian_center_pixel() {
    let logit = 0.7;
    let cloud = GaussianCloud::new(
        Array::new(&[1, 3], vec![0.0, 0.0, 2.0]).unwrap(),
        Array::new(&[1, 3], vec![-2.0; 3]).unwrap(),
        Array::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
        Array::new(&[1], vec![logit]).unwrap(),
        Array::new(&[1, 3], vec![1.0; 3]).unwrap(),
        0,
    )
    .unwrap();
    let img = render(&cloud, &cam_at(intr(16, 16, 20.0), Pose::IDENTITY)).unwrap();
    let want = 1.0 / (1.0 + (-logit as f64).exp());
    for v in img.pixel(8, 8) {
        assert!((v - want).abs() < 1e-15);
    }
}

#[test]
fn principal_point_shift_translates_image_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = random_cloud(&mut rng, 30, 0, 0.6, (-3.0, -2.0));
    let base = intr(32, 24, 30.0);
    let a = render(&cloud, &cam_at(base, Pose::IDENTITY)).unwrap();
    for (kx, ky) in [(3i64, 0i64), (0, 2), (-4, 5)] {
        let shifted = Intrinsics { cx: base.cx + kx as f64, cy: base.cy + ky as f64, ..base };
        let b = render(&cloud, &cam_at(shifted, Pose::IDENTITY)).unwrap();
        for y in 0..24i64 {
            for x in 0..32i64 {
                let (sx, sy) = (x + kx, y + ky);
                if (0..32).contains(&sx) && (0..24).contains(&sy) {
                    assert_eq!(a.pixel(x as usize, y as usize), b.pixel(sx as usize, sy as usize));
                }
            }
        }
    }
}

#[test]
fn render_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cloud = random_cloud(&mut rng, 50, 1, 1.0, (-3.0, -1.5));
    let cam = cam_at(intr(24, 20, 25.0), random_pose(&mut rng, 0.2));
    assert_eq!(render(&cloud, &cam).unwrap(), render(&cloud, &cam).unwrap());
}

fn smooth_setup(seed: u64, sh_degree: u8) -> (GaussianCloud, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Footprints wider than the image keep every pixel inside every cutoff box.
    let cloud = random_cloud(&mut rng, 6, sh_degree, 0.3, (-0.2, 0.1));
    (cloud, cam_at(intr(12, 10, 15.0), random_pose(&mut rng, 0.1)))
}

fn image_loss(g: &mut Graph, img: Var) -> Result<Var, AutodiffError> {
    let shape = g.shape(img).to_vec();
    let n: usize = shape.iter().product();
    let w = g.constant(Array::new(&shape, (0..n).map(|i| ((i * 7 % 13) as f64 / 13.0) - 0.4).collect())?);
    let p = g.mul(img, w)?;
    Ok(g.sum(p))
}

#[test]
fn render_gradients_wrt_cloud_match_finite_differences() {
    for (seed, degree) in [(6, 0u8), (7, 1)] {
        let (cloud, cam) = smooth_setup(seed, degree);
        let mut store = ParamStore::new();
        cloud.insert_into(&mut store);
        let names = [MEANS, LOG_SCALES, QUATS, OPACITY, COLORS];
        let report = check_params(&store, &names, &GradCheck::default(), |g, s| {
            let vars = CloudVars::params(g, s, degree)?;
            let pose = PoseVars::constant(g, &cam.pose);
            let img = render_graph(g, &vars, &cam.intrinsics, pose)?;
            image_loss(g, img)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-3, "degree {degree}: {report:?}");
    }
}

#[test]
fn render_gradients_wrt_pose_match_finite_differences() {
    let (cloud, cam) = smooth_setup(8, 0);
    let r = Array::new(&[3, 3], cam.pose.rotation.to_row_major().to_vec()).unwrap();
    let t = Array::new(&[3], cam.pose.translation.0.to_vec()).unwrap();
    let report = check_inputs(&[r, t], &GradCheck::default(), |g, v| {
        let vars = cloud.constants(g);
        let img = render_graph(g, &vars, &cam.intrinsics, PoseVars { rotation: v[0], translation: v[1] })?;
        image_loss(g, img)
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-3, "{report:?}");
}

#[test]
fn cloud_file_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for degree in [0u8, 1] {
        let cloud = random_cloud(&mut rng, 17, degree, 1.0, (-3.0, 0.0));
        let path = dir.path().join(format!("c{degree}.cloud"));
        write_cloud(&path, &cloud).unwrap();
        assert_eq!(read_cloud(&path).unwrap(), cloud);
    }
    let path = dir.path().join("bad.cloud");
    std::fs::write(&path, "gaussians 2 sh_degree 0\n0 0 0 0 0 0 1 0 0 0 0 1 1 1\n").unwrap();
    let err = read_cloud(&path).unwrap_err().to_string();
    assert!(err.contains("found 1"), "{err}");
}

#[test]
fn png_round_trip_quantizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let img = Image::new(3, 2, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
    write_png(&path, &img).unwrap();
    let back = read_png(&path).unwrap();
    assert_eq!((back.width, back.height), (3, 2));
    for (a, b) in img.data.iter().zip(&back.data) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}
