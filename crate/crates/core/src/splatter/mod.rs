//! CPU differentiable Gaussian splatting: covariance assembly, perspective
//! projection and front-to-back compositing.

mod io;
pub mod raster;

use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, ParamGroup, ParamStore, Var};
use crate::liegroup::{Mat3, Pose, Vec3};

pub use io::{read_cloud, read_png, write_cloud, write_png};
pub use raster::{Composite, Viewport};

#[derive(Debug, Error)]
pub enum SplatError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Png { path: String, msg: String },
    #[error("invalid cloud: {0}")]
    Cloud(String),
}

pub const MEANS: &str = "cloud.means";
pub const LOG_SCALES: &str = "cloud.log_scales";
pub const QUATS: &str = "cloud.quats";
pub const OPACITY: &str = "cloud.opacity";
pub const COLORS: &str = "cloud.colors";

/// Scene Gaussians. Scales are stored as logs, opacities as logits and
/// rotations as unnormalized `(w, x, y, z)` quaternions.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub means: Array,
    pub log_scales: Array,
    pub quats: Array,
    pub opacity_logits: Array,
    /// `(G, 3)` base RGB, or `(G, 12)` with three linear view-direction terms
    /// per channel appended when `sh_degree == 1`.
    pub colors: Array,
    pub sh_degree: u8,
}

pub(crate) fn color_width(sh_degree: u8) -> usize {
    if sh_degree == 0 {
        3
    } else {
        12
    }
}

impl GaussianCloud {
    pub fn new(means: Array, log_scales: Array, quats: Array, opacity_logits: Array, colors: Array, sh_degree: u8) -> Result<Self, SplatError> {
        let c = GaussianCloud { means, log_scales, quats, opacity_logits, colors, sh_degree };
        c.validate()?;
        Ok(c)
    }

    pub fn empty(sh_degree: u8) -> Self {
        GaussianCloud {
            means: Array::zeros(&[0, 3]),
            log_scales: Array::zeros(&[0, 3]),
            quats: Array::zeros(&[0, 4]),
            opacity_logits: Array::zeros(&[0]),
            colors: Array::zeros(&[0, color_width(sh_degree)]),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<(), SplatError> {
        if self.sh_degree > 1 {
            return Err(SplatError::Cloud(format!("sh degree {} not supported", self.sh_degree)));
        }
        let g = self.len();
        let want = [
            ("means", &self.means, vec![g, 3]),
            ("log_scales", &self.log_scales, vec![g, 3]),
            ("quats", &self.quats, vec![g, 4]),
            ("opacity", &self.opacity_logits, vec![g]),
            ("colors", &self.colors, vec![g, color_width(self.sh_degree)]),
        ];
        for (name, arr, shape) in want {
            if arr.shape() != shape.as_slice() {
                return Err(SplatError::Cloud(format!("{name} has shape {:?}, expected {shape:?}", arr.shape())));
            }
            if !arr.all_finite() {
                return Err(SplatError::Cloud(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        store.insert(MEANS, self.means.clone(), ParamGroup::Means);
        store.insert(LOG_SCALES, self.log_scales.clone(), ParamGroup::Scales);
        store.insert(QUATS, self.quats.clone(), ParamGroup::Rotations);
        store.insert(OPACITY, self.opacity_logits.clone(), ParamGroup::Opacity);
        store.insert(COLORS, self.colors.clone(), ParamGroup::Colors);
    }

    pub fn from_store(store: &ParamStore, sh_degree: u8) -> Result<Self, SplatError> {
        GaussianCloud::new(
            store.value(MEANS)?.clone(),
            store.value(LOG_SCALES)?.clone(),
            store.value(QUATS)?.clone(),
            store.value(OPACITY)?.clone(),
            store.value(COLORS)?.clone(),
            sh_degree,
        )
    }

    /// Put the cloud on `g` as constants.
    pub fn constants(&self, g: &mut Graph) -> CloudVars {
        CloudVars {
            means: g.constant(self.means.clone()),
            log_scales: g.constant(self.log_scales.clone()),
            quats: g.constant(self.quats.clone()),
            opacity_logits: g.constant(self.opacity_logits.clone()),
            colors: g.constant(self.colors.clone()),
            sh_degree: self.sh_degree,
        }
    }
}

/// A cloud placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct CloudVars {
    pub means: Var,
    pub log_scales: Var,
    pub quats: Var,
    pub opacity_logits: Var,
    pub colors: Var,
    pub sh_degree: u8,
}

impl CloudVars {
    pub fn params(g: &mut Graph, store: &ParamStore, sh_degree: u8) -> Result<Self, AutodiffError> {
        Ok(CloudVars {
            means: g.param(store, MEANS)?,
            log_scales: g.param(store, LOG_SCALES)?,
            quats: g.param(store, QUATS)?,
            opacity_logits: g.param(store, OPACITY)?,
            colors: g.param(store, COLORS)?,
            sh_degree,
        })
    }
}

/// Pinhole intrinsics; pixel centers sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), SplatError> {
        let ok = self.fx > 0.0 && self.fy > 0.0 && self.width > 0 && self.height > 0 && self.cx.is_finite() && self.cy.is_finite();
        if ok && self.fx.is_finite() && self.fy.is_finite() {
            Ok(())
        } else {
            Err(SplatError::Cloud(format!("bad intrinsics {self:?}")))
        }
    }

    pub fn viewport(&self) -> Viewport {
        Viewport { width: self.width, height: self.height, cx: self.cx, cy: self.cy }
    }
}

/// Camera with a camera-to-world pose: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn world_to_camera(&self) -> Pose {
        self.pose.inverse()
    }
}

/// `R S Sᵀ Rᵀ` for scales `s` (not logs) and a quaternion `(w, x, y, z)`.
pub fn covariance(s: Vec3, q: [f64; 4]) -> Mat3 {
    let r = quat_to_rotation(q);
    let mut m = r;
    for row in 0..3 {
        for col in 0..3 {
            m[(row, col)] *= s[col];
        }
    }
    m * m.transpose()
}

pub fn quat_to_rotation(q: [f64; 4]) -> Mat3 {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    Mat3([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

/// A Gaussian projected into pixel space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// `(a, b, c)` of `[[a, b], [b, c]]`, before dilation.
    pub cov2d: [f64; 3],
    pub depth: f64,
}

/// Project one Gaussian; `None` when it sits at or behind the near plane.
pub fn project(mu: Vec3, sigma: &Mat3, cam: &Camera) -> Option<Projection> {
    let w2c = cam.world_to_camera();
    let p = w2c.transform_point(&mu);
    if p[2] <= raster::NEAR {
        return None;
    }
    let Intrinsics { fx, fy, cx, cy, .. } = cam.intrinsics;
    let (x, y, z) = (p[0], p[1], p[2]);
    let j = [[fx / z, 0.0, -fx * x / (z * z)], [0.0, fy / z, -fy * y / (z * z)]];
    let w = w2c.rotation;
    let sc = w * *sigma * w.transpose();
    let mut s2 = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            for k in 0..3 {
                for l in 0..3 {
                    s2[r][c] += j[r][k] * sc[(k, l)] * j[c][l];
                }
            }
        }
    }
    Some(Projection { mean2d: [cx + fx * x / z, cy + fy * y / z], cov2d: [s2[0][0], s2[0][1], s2[1][1]], depth: z })
}

/// Camera pose on a graph: camera-to-world rotation `(3, 3)` and camera
/// center `(3)`.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    pub rotation: Var,
    pub translation: Var,
}

impl PoseVars {
    pub fn constant(g: &mut Graph, pose: &Pose) -> Self {
        PoseVars {
            rotation: g.constant(Array::from_parts(vec![3, 3], pose.rotation.to_row_major().to_vec())),
            translation: g.constant(Array::from_parts(vec![3], pose.translation.0.to_vec())),
        }
    }
}

/// Per-Gaussian screen-space quantities on the graph.
struct Projected {
    offsets: Var,
    cov2d: Var,
    depth: Vec<f64>,
}

fn col(g: &mut Graph, a: Var, i: usize) -> Result<Var, AutodiffError> {
    g.slice(a, 1, i, i + 1)
}

fn rotation_matrices(g: &mut Graph, quats: Var) -> Result<Var, AutodiffError> {
    let n = g.shape(quats)[0];
    let sq = g.square(quats);
    let norm2 = g.sum_axis(sq, 1, true)?;
    let norm = g.sqrt(norm2);
    let q = g.div(quats, norm)?;
    let [w, x, y, z] = [col(g, q, 0)?, col(g, q, 1)?, col(g, q, 2)?, col(g, q, 3)?];
    let mut prod = |a: Var, b: Var| -> Result<Var, AutodiffError> {
        let p = g.mul(a, b)?;
        Ok(g.scale(p, 2.0))
    };
    let (xx, yy, zz) = (prod(x, x)?, prod(y, y)?, prod(z, z)?);
    let (xy, xz, yz) = (prod(x, y)?, prod(x, z)?, prod(y, z)?);
    let (wx, wy, wz) = (prod(w, x)?, prod(w, y)?, prod(w, z)?);
    let one_minus = |g: &mut Graph, a: Var, b: Var| -> Result<Var, AutodiffError> {
        let s = g.add(a, b)?;
        let n = g.neg(s);
        Ok(g.offset(n, 1.0))
    };
    let entries = [
        one_minus(g, yy, zz)?,
        g.sub(xy, wz)?,
        g.add(xz, wy)?,
        g.add(xy, wz)?,
        one_minus(g, xx, zz)?,
        g.sub(yz, wx)?,
        g.sub(xz, wy)?,
        g.add(yz, wx)?,
        one_minus(g, xx, yy)?,
    ];
    let flat = g.concat(&entries, 1)?;
    g.reshape(flat, &[n, 3, 3])
}

/// World-space covariances `(G, 3, 3)` from log-scales and quaternions.
pub fn covariances(g: &mut Graph, log_scales: Var, quats: Var) -> Result<Var, AutodiffError> {
    let n = g.shape(quats)[0];
    let r = rotation_matrices(g, quats)?;
    let s = g.exp(log_scales);
    let s = g.reshape(s, &[n, 1, 3])?;
    let m = g.mul(r, s)?;
    let mt = g.transpose(m)?;
    g.matmul(m, mt)
}

fn project_graph(g: &mut Graph, cloud: &CloudVars, intr: &Intrinsics, pose: PoseVars) -> Result<Projected, AutodiffError> {
    let n = g.shape(cloud.means)[0];
    let sigma = covariances(g, cloud.log_scales, cloud.quats)?;
    // Row-vector form of Rᵀ(μ − t).
    let rel = g.sub(cloud.means, pose.translation)?;
    let cam = g.matmul(rel, pose.rotation)?;
    let rt = g.transpose(pose.rotation)?;
    let sc = g.matmul(rt, sigma)?;
    let sc = g.matmul(sc, pose.rotation)?;
    let (x, y, z) = (col(g, cam, 0)?, col(g, cam, 1)?, col(g, cam, 2)?);
    let depth = g.value(z).data().to_vec();
    let zs = g.max_scalar(z, raster::NEAR);
    let one = g.scalar(1.0);
    let inv_z = g.div(one, zs)?;
    let xz = g.mul(x, inv_z)?;
    let yz = g.mul(y, inv_z)?;
    let u = g.scale(xz, intr.fx);
    let v = g.scale(yz, intr.fy);
    let j00 = g.scale(inv_z, intr.fx);
    let j11 = g.scale(inv_z, intr.fy);
    let uz = g.mul(u, inv_z)?;
    let j02 = g.neg(uz);
    let vz = g.mul(v, inv_z)?;
    let j12 = g.neg(vz);
    let zero = g.constant(Array::zeros(&[n, 1]));
    let jflat = g.concat(&[j00, zero, j02, zero, j11, j12], 1)?;
    let j = g.reshape(jflat, &[n, 2, 3])?;
    let jt = g.transpose(j)?;
    let js = g.matmul(j, sc)?;
    let s2 = g.matmul(js, jt)?;
    let s2 = g.reshape(s2, &[n, 4])?;
    let (a, b, c) = (col(g, s2, 0)?, col(g, s2, 1)?, col(g, s2, 3)?);
    let cov2d = g.concat(&[a, b, c], 1)?;
    let offsets = g.concat(&[u, v], 1)?;
    Ok(Projected { offsets, cov2d, depth })
}

fn view_colors(g: &mut Graph, cloud: &CloudVars, pose: PoseVars) -> Result<Var, AutodiffError> {
    if cloud.sh_degree == 0 {
        return Ok(cloud.colors);
    }
    let n = g.shape(cloud.means)[0];
    let base = g.slice(cloud.colors, 1, 0, 3)?;
    let coef = g.slice(cloud.colors, 1, 3, 12)?;
    let coef = g.reshape(coef, &[n, 3, 3])?;
    let dir = g.sub(cloud.means, pose.translation)?;
    let sq = g.square(dir);
    let len2 = g.sum_axis(sq, 1, true)?;
    let len2 = g.max_scalar(len2, 1e-12);
    let len = g.sqrt(len2);
    let dir = g.div(dir, len)?;
    let dir = g.reshape(dir, &[n, 1, 3])?;
    let extra = g.matmul(dir, coef)?;
    let extra = g.reshape(extra, &[n, 3])?;
    g.add(base, extra)
}

/// Differentiable render of `cloud` seen from `pose`, as an `(H, W, 3)` node.
pub fn render_graph(g: &mut Graph, cloud: &CloudVars, intr: &Intrinsics, pose: PoseVars) -> Result<Var, AutodiffError> {
    let proj = project_graph(g, cloud, intr, pose)?;
    let opacity = g.sigmoid(cloud.opacity_logits);
    let colors = view_colors(g, cloud, pose)?;
    raster::rasterize(g, intr.viewport(), proj.offsets, proj.cov2d, opacity, colors, &proj.depth)
}

/// An `(H, W, 3)` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, SplatError> {
        if data.len() != width * height * 3 {
            return Err(SplatError::Cloud(format!("image data length {} does not match {width}x{height}x3", data.len())));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Image { width, height, data: vec![v; width * height * 3] }
    }

    pub fn from_array(a: &Array) -> Result<Self, SplatError> {
        match a.shape() {
            &[h, w, 3] => Image::new(w, h, a.data().to_vec()),
            s => Err(SplatError::Cloud(format!("expected (H, W, 3) image, got {s:?}"))),
        }
    }

    pub fn to_array(&self) -> Array {
        Array::from_parts(vec![self.height, self.width, 3], self.data.clone())
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Plain forward render.
pub fn render(cloud: &GaussianCloud, cam: &Camera) -> Result<Image, SplatError> {
    cam.intrinsics.validate()?;
    let mut g = Graph::new();
    let vars = cloud.constants(&mut g);
    let pose = PoseVars::constant(&mut g, &cam.pose);
    let img = render_graph(&mut g, &vars, &cam.intrinsics, pose)?;
    Image::from_array(g.value(img))
}

#[cfg(test)]
mod tests;
