//! SO(3)/SE(3) exponential maps in closed form.
//!
//! Rotations are built with Rodrigues' formula and the translation part of a
//! screw motion with the matrix `G(θ) = Iθ + (1 − cos θ)[ω̂] + (θ − sin θ)[ω̂]²`,
//! which is the integral of the rotation exponential over `[0, θ]`. All math is
//! in `f64`.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use thiserror::Error;

/// Tolerance on the unit-norm precondition of a rotation axis.
pub const UNIT_AXIS_TOL: f64 = 1e-9;

/// Below this angle the trigonometric coefficients use their Taylor series.
const SMALL_ANGLE: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LieError {
    #[error("rotation axis must be unit length, got norm {0}")]
    NonUnitAxis(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3(pub [f64; 3]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat4(pub [[f64; 4]; 4]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    pub fn dot(&self, o: &Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    pub fn cross(&self, o: &Vec3) -> Vec3 {
        let [a, b, c] = self.0;
        let [x, y, z] = o.0;
        Vec3([b * z - c * y, c * x - a * z, a * y - b * x])
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Vec3 {
        Vec3(self.0.map(|v| v * s))
    }

    pub fn normalized(&self) -> Vec3 {
        self.scale(1.0 / self.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self.scale(-1.0)
    }
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);

    pub fn from_diag(d: [f64; 3]) -> Self {
        let mut m = Mat3::ZERO;
        for i in 0..3 {
            m.0[i][i] = d[i];
        }
        m
    }

    /// Row-major flattening.
    pub fn from_row_major(v: &[f64]) -> Self {
        let mut m = Mat3::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                m.0[r][c] = v[r * 3 + c];
            }
        }
        m
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.0[r][c];
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat3 {
        let mut m = Mat3::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                m.0[r][c] = self.0[c][r];
            }
        }
        m
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        Mat3(self.0.map(|row| row.map(|v| v * s)))
    }

    pub fn mul_vec(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        Vec3([
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, o: &Mat3) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(o.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Mat3 {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.0[r][c]
    }
}

impl IndexMut<(usize, usize)> for Mat3 {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.0[r][c]
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut m = self;
        for r in 0..3 {
            for c in 0..3 {
                m.0[r][c] += o.0[r][c];
            }
        }
        m
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, o: Mat3) -> Mat3 {
        self + o.scale(-1.0)
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut m = Mat3::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                m.0[r][c] = (0..3).map(|k| self.0[r][k] * o.0[k][c]).sum();
            }
        }
        m
    }
}

impl Mat4 {
    pub const IDENTITY: Mat4 = Mat4([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);
    pub const ZERO: Mat4 = Mat4([[0.0; 4]; 4]);

    pub fn scale(&self, s: f64) -> Mat4 {
        Mat4(self.0.map(|row| row.map(|v| v * s)))
    }

    pub fn max_abs_diff(&self, o: &Mat4) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(o.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Add for Mat4 {
    type Output = Mat4;
    fn add(self, o: Mat4) -> Mat4 {
        let mut m = self;
        for r in 0..4 {
            for c in 0..4 {
                m.0[r][c] += o.0[r][c];
            }
        }
        m
    }
}

impl Mul for Mat4 {
    type Output = Mat4;
    fn mul(self, o: Mat4) -> Mat4 {
        let mut m = Mat4::ZERO;
        for r in 0..4 {
            for c in 0..4 {
                m.0[r][c] = (0..4).map(|k| self.0[r][k] * o.0[k][c]).sum();
            }
        }
        m
    }
}

/// Unit screw axis plus the rotation angle about it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScrewAxis {
    pub omega_hat: Vec3,
    pub v: Vec3,
    pub theta: f64,
}

impl ScrewAxis {
    pub fn new(omega_hat: Vec3, v: Vec3, theta: f64) -> Result<Self, LieError> {
        check_unit(&omega_hat)?;
        Ok(ScrewAxis { omega_hat, v, theta })
    }

    /// The 4×4 twist matrix `[S]θ`.
    pub fn twist_matrix(&self) -> Mat4 {
        let k = skew(&self.omega_hat);
        let mut m = Mat4::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                m.0[r][c] = k.0[r][c] * self.theta;
            }
            m.0[r][3] = self.v.0[r] * self.theta;
        }
        m
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: Mat3::IDENTITY, translation: Vec3::ZERO };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -rt.mul_vec(&self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn to_matrix(&self) -> Mat4 {
        let mut m = Mat4::IDENTITY;
        for r in 0..3 {
            for c in 0..3 {
                m.0[r][c] = self.rotation.0[r][c];
            }
            m.0[r][3] = self.translation.0[r];
        }
        m
    }

    pub fn from_matrix(m: &Mat4) -> Pose {
        let mut rot = Mat3::ZERO;
        let mut t = Vec3::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                rot.0[r][c] = m.0[r][c];
            }
            t.0[r] = m.0[r][3];
        }
        Pose { rotation: rot, translation: t }
    }

    pub fn max_abs_diff(&self, o: &Pose) -> f64 {
        self.to_matrix().max_abs_diff(&o.to_matrix())
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.is_finite()
    }
}

fn check_unit(axis: &Vec3) -> Result<(), LieError> {
    let n = axis.norm();
    if (n - 1.0).abs() > UNIT_AXIS_TOL || !n.is_finite() {
        return Err(LieError::NonUnitAxis(n));
    }
    Ok(())
}

/// `[v]` such that `[v] w = v × w`.
pub fn skew(v: &Vec3) -> Mat3 {
    let [x, y, z] = v.0;
    Mat3([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
}

/// `(sin θ, 1 − cos θ, θ − sin θ)` with series evaluation near zero.
fn trig_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        let t3 = t2 * theta;
        (
            theta - t3 / 6.0 + t3 * t2 / 120.0,
            t2 / 2.0 - t2 * t2 / 24.0 + t3 * t3 / 720.0,
            t3 / 6.0 - t3 * t2 / 120.0 + t3 * t2 * t2 / 5040.0,
        )
    } else {
        let s = theta.sin();
        (s, 1.0 - theta.cos(), theta - s)
    }
}

/// Rodrigues' formula `I + sin θ [ω̂] + (1 − cos θ)[ω̂]²`.
pub fn so3_exp(omega_hat: &Vec3, theta: f64) -> Result<Mat3, LieError> {
    check_unit(omega_hat)?;
    let k = skew(omega_hat);
    let (s, c, _) = trig_coeffs(theta);
    Ok(Mat3::IDENTITY + k.scale(s) + (k * k).scale(c))
}

/// `G(θ) = Iθ + (1 − cos θ)[ω̂] + (θ − sin θ)[ω̂]²`.
pub fn se3_g(omega_hat: &Vec3, theta: f64) -> Mat3 {
    let k = skew(omega_hat);
    let (_, c, d) = trig_coeffs(theta);
    Mat3::IDENTITY.scale(theta) + k.scale(c) + (k * k).scale(d)
}

/// `e^{[S]θ}` as a pose: `R = so3_exp(ω̂, θ)`, `t = G(θ) v`.
pub fn se3_exp(s: &ScrewAxis) -> Pose {
    let k = skew(&s.omega_hat);
    let k2 = k * k;
    let (sn, c, d) = trig_coeffs(s.theta);
    let rotation = Mat3::IDENTITY + k.scale(sn) + k2.scale(c);
    let g = Mat3::IDENTITY.scale(s.theta) + k.scale(c) + k2.scale(d);
    Pose { rotation, translation: g.mul_vec(&s.v) }
}

/// Homogeneous product `a · b`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: a.rotation * b.rotation,
        translation: a.rotation.mul_vec(&b.translation) + a.translation,
    }
}

/// Truncated power series `Σ_{n<terms} mⁿ/n!`. Test oracle only.
pub fn matrix_exp_oracle(m: &Mat4, terms: usize) -> Mat4 {
    let mut acc = Mat4::IDENTITY;
    let mut term = Mat4::IDENTITY;
    for n in 1..terms.max(1) {
        term = (term * *m).scale(1.0 / n as f64);
        acc = acc + term;
    }
    acc
}

/// Frobenius norm of `RᵀR − I`.
pub fn orthogonality_residual(r: &Mat3) -> f64 {
    (r.transpose() * *r - Mat3::IDENTITY).frobenius_norm()
}

/// Geodesic angle of a rotation matrix, in `[0, π]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let m = &r.0;
    let tr = m[0][0] + m[1][1] + m[2][2];
    let s = Vec3::new(m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]).norm();
    (0.5 * s).atan2(0.5 * (tr - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v.normalized();
            }
        }
    }

    fn embed3(m: &Mat3) -> Mat4 {
        let mut out = Mat4::ZERO;
        for r in 0..3 {
            for c in 0..3 {
                out.0[r][c] = m.0[r][c];
            }
        }
        out
    }

    #[test]
    fn skew_expansion() {
        let s = skew(&Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(s.0, [[0.0, -3.0, 2.0], [3.0, 0.0, -1.0], [-2.0, 1.0, 0.0]]);
        assert_eq!(skew(&Vec3::ZERO), Mat3::ZERO);
    }

    #[test]
    fn skew_cubed_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let k = skew(&v);
            let lhs = k * k * k + k.scale(v.dot(&v));
            assert!(lhs.frobenius_norm() < 1e-12, "{lhs:?}");
            let w = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            assert!((k.mul_vec(&w) - v.cross(&w)).norm() < 1e-14);
        }
    }

    #[test]
    fn so3_exp_cases() {
        let z = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(so3_exp(&z, 0.0).unwrap(), Mat3::IDENTITY);
        let q = so3_exp(&z, FRAC_PI_2).unwrap();
        let want = Mat3([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(q.max_abs_diff(&want) < 1e-15);
        assert!(matches!(so3_exp(&Vec3::new(0.0, 0.0, 2.0), 1.0), Err(LieError::NonUnitAxis(_))));
    }

    #[test]
    fn so3_exp_matches_taylor_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let w = random_unit(&mut rng);
            let th = rng.gen_range(-PI..PI);
            let r = so3_exp(&w, th).unwrap();
            let oracle = matrix_exp_oracle(&embed3(&skew(&w).scale(th)), 60);
            let r4 = embed3(&r);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r4.0[i][j] - oracle.0[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn g_closed_forms() {
        let z = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(se3_g(&z, 0.0), Mat3::ZERO);
        let g = se3_g(&z, PI);
        let want = Mat3([[0.0, -2.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, PI]]);
        assert!(g.max_abs_diff(&want) < 1e-14, "{g:?}");
    }

    #[test]
    fn small_angle_series_is_continuous() {
        let w = Vec3::new(0.0, 0.6, 0.8);
        for &th in &[9.99e-8, 1.0e-7, 1.01e-7] {
            let r = so3_exp(&w, th).unwrap();
            let k = skew(&w);
            let direct = Mat3::IDENTITY + k.scale(th.sin()) + (k * k).scale(1.0 - th.cos());
            assert!(r.max_abs_diff(&direct) < 1e-15);
            assert!(orthogonality_residual(&r) < 1e-15);
        }
        let g = se3_g(&w, 1e-9);
        assert!(g.max_abs_diff(&Mat3::IDENTITY.scale(1e-9)) < 1e-17);
    }

    #[test]
    fn se3_exp_quarter_turn() {
        let s = ScrewAxis::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), FRAC_PI_2).unwrap();
        let p = se3_exp(&s);
        // With [ω̂]² = diag(−1,−1,0): G(θ)e₀ = (θ − (θ − sin θ), 1 − cos θ, 0) = (1, 1, 0).
        let want_t = Vec3::new(FRAC_PI_2 - (FRAC_PI_2 - 1.0), 1.0, 0.0);
        assert!((p.translation - want_t).norm() < 1e-15, "{:?}", p.translation);
        let oracle = matrix_exp_oracle(&s.twist_matrix(), 60);
        assert!(p.to_matrix().max_abs_diff(&oracle) < 1e-10);
        let zero = ScrewAxis::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(4.0, -2.0, 1.0), 0.0).unwrap();
        assert_eq!(se3_exp(&zero), Pose::IDENTITY);
    }

    #[test]
    fn compose_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rand_pose = |rng: &mut ChaCha8Rng| {
            let s = ScrewAxis::new(
                random_unit(rng),
                Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
                rng.gen_range(-PI..PI),
            )
            .unwrap();
            se3_exp(&s)
        };
        for _ in 0..50 {
            let (a, b, c) = (rand_pose(&mut rng), rand_pose(&mut rng), rand_pose(&mut rng));
            assert_eq!(compose(&a, &Pose::IDENTITY), a);
            assert!(compose(&a, &a.inverse()).max_abs_diff(&Pose::IDENTITY) < 1e-10);
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            assert!(l.max_abs_diff(&r) < 1e-10);
        }
    }

    #[test]
    fn oracle_basics() {
        assert_eq!(matrix_exp_oracle(&Mat4::ZERO, 60), Mat4::IDENTITY);
        let e = matrix_exp_oracle(&Mat4::IDENTITY, 60);
        for i in 0..4 {
            assert!((e.0[i][i] - std::f64::consts::E).abs() < 1e-12);
        }
        let mut n = Mat4::ZERO;
        n.0[0][2] = 3.0;
        n.0[1][3] = -1.5;
        let want = Mat4::IDENTITY + n;
        assert_eq!(matrix_exp_oracle(&n, 60), want);
    }

    #[test]
    fn orthogonality_residual_cases() {
        assert_eq!(orthogonality_residual(&Mat3::IDENTITY), 0.0);
        let r = orthogonality_residual(&Mat3::IDENTITY.scale(2.0));
        assert!((r - 3.0 * 3f64.sqrt()).abs() < 1e-14);
        let rot = so3_exp(&Vec3::new(0.6, 0.0, 0.8), 2.1).unwrap();
        assert!(orthogonality_residual(&rot) < 1e-9);
    }
}
