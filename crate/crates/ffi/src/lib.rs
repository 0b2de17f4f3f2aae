//! C ABI over the motionsplat engine.
//!
//! Every function returns an [`MsStatus`]; on failure the message is kept per
//! thread and can be read with [`ms_last_error_message`]. Panics are caught at
//! the boundary and reported as [`MsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use motionsplat::config::Config;
use motionsplat::liegroup::{se3_exp, ScrewAxis, Vec3};
use motionsplat::losses::{load_checkpoint, train, Checkpoint, TrainError};
use motionsplat::scenegen::{load_dataset, make_blur_dataset, make_scene, write_dataset, Dataset, SceneOptions, DENSE_SAMPLES};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    InvalidArgument = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// What to render from a model.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsRenderMode {
    /// The calibrated camera pose.
    Sharp = 0,
    /// The predicted blurry observation.
    Blur = 1,
}

/// A loaded dataset directory.
pub struct MsDataset {
    inner: Dataset,
}

/// A trained model loaded from a checkpoint directory.
pub struct MsModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(MsStatus, String);

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let s = match e {
            TrainError::Config(_) => MsStatus::Config,
            TrainError::NonFinite { .. } => MsStatus::Numeric,
            _ => MsStatus::Data,
        };
        Failure(s, e.to_string())
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure(MsStatus::Data, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MsStatus::Ok
        }
        Ok(Err(Failure(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(payload) => {
            let msg = payload.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| payload.downcast_ref::<String>().cloned()).unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            MsStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(MsStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Failure(MsStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(MsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ms_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ms_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Write a synthetic blurred dataset to `out_dir`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn ms_synth(seed: u64, gaussians: usize, cameras: usize, theta_max: f64, width: usize, height: usize, out_dir: *const c_char) -> MsStatus {
    guard(|| {
        let out = path_arg(out_dir, "out_dir")?;
        if gaussians == 0 || cameras < 2 || width == 0 || height == 0 || !(theta_max >= 0.0 && theta_max.is_finite()) {
            return Err(Failure(MsStatus::InvalidArgument, "need gaussians >= 1, cameras >= 2, a non-empty image and theta_max >= 0".into()));
        }
        let scene = make_scene(seed, gaussians, cameras, &SceneOptions { width, height, ..SceneOptions::default() });
        let d = make_blur_dataset(&scene, DENSE_SAMPLES, theta_max).map_err(data)?;
        write_dataset(&out, &d).map_err(data)
    })
}

/// Load a dataset directory into `*out`. Free with [`ms_dataset_free`].
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_dataset_load(dir: *const c_char, out: *mut *mut MsDataset) -> MsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let d = load_dataset(&path_arg(dir, "dir")?).map_err(data)?;
        *out = Box::into_raw(Box::new(MsDataset { inner: d }));
        Ok(())
    })
}

/// # Safety
/// `d` is null or came from [`ms_dataset_load`] and was not freed.
#[no_mangle]
pub unsafe extern "C" fn ms_dataset_free(d: *mut MsDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Number of cameras in the dataset.
///
/// # Safety
/// `d` came from [`ms_dataset_load`]; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn ms_dataset_len(d: *const MsDataset, out: *mut usize) -> MsStatus {
    guard(|| {
        non_null(d, "dataset")?;
        non_null(out, "out")?;
        *out = (*d).inner.len();
        Ok(())
    })
}

/// Train on `d`, writing logs and checkpoints under `out_dir`. `config` holds
/// `key = value` lines and may be null for the defaults.
///
/// # Safety
/// `d` came from [`ms_dataset_load`]; strings are NUL-terminated or null
/// where allowed.
#[no_mangle]
pub unsafe extern "C" fn ms_train(d: *const MsDataset, config: *const c_char, out_dir: *const c_char, resume: bool) -> MsStatus {
    guard(|| {
        non_null(d, "dataset")?;
        let out = path_arg(out_dir, "out_dir")?;
        let mut cfg = Config::default();
        if !config.is_null() {
            let text = CStr::from_ptr(config).to_str().map_err(|_| Failure(MsStatus::InvalidArgument, "config is not UTF-8".into()))?;
            cfg.apply_text(text).map_err(|e| Failure(MsStatus::Config, e.to_string()))?;
        }
        cfg.validate().map_err(|e| Failure(MsStatus::Config, e.to_string()))?;
        train(&(*d).inner, &cfg, &out, resume)?;
        Ok(())
    })
}

/// Load a checkpoint directory into `*out`. Free with [`ms_model_free`].
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_model_load(dir: *const c_char, out: *mut *mut MsModel) -> MsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let ck = load_checkpoint(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(MsModel { inner: ck }));
        Ok(())
    })
}

/// # Safety
/// `m` is null or came from [`ms_model_load`] and was not freed.
#[no_mangle]
pub unsafe extern "C" fn ms_model_free(m: *mut MsModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Camera count, image size and poses per trajectory of a model.
///
/// # Safety
/// `m` came from [`ms_model_load`]; every out pointer is valid.
#[no_mangle]
pub unsafe extern "C" fn ms_model_info(m: *const MsModel, cameras: *mut usize, width: *mut usize, height: *mut usize, n_poses: *mut usize) -> MsStatus {
    guard(|| {
        non_null(m, "model")?;
        for (p, w) in [(cameras, "cameras"), (width, "width"), (height, "height"), (n_poses, "n_poses")] {
            non_null(p, w)?;
        }
        let ck = &(*m).inner;
        let intr = ck.cameras.first().map(|c| c.intrinsics);
        *cameras = ck.cameras.len();
        *width = intr.map_or(0, |i| i.width);
        *height = intr.map_or(0, |i| i.height);
        *n_poses = ck.model.motion.cfg.n_poses;
        Ok(())
    })
}

/// Render camera `camera` into `buf`, row-major `height × width × 3` doubles.
///
/// # Safety
/// `m` came from [`ms_model_load`]; `buf` holds `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ms_model_render(m: *const MsModel, camera: usize, mode: MsRenderMode, buf: *mut f64, len: usize) -> MsStatus {
    guard(|| {
        non_null(m, "model")?;
        non_null(buf, "buf")?;
        let ck = &(*m).inner;
        let cam = ck.cameras.get(camera).ok_or_else(|| Failure(MsStatus::InvalidArgument, format!("camera {camera} out of range")))?;
        let img = match mode {
            MsRenderMode::Sharp => ck.model.render_sharp(cam),
            MsRenderMode::Blur => ck.model.render_blur(cam, camera),
        }
        .map_err(data)?;
        if len < img.data.len() {
            return Err(Failure(MsStatus::BufferTooSmall, format!("need {} doubles, got {len}", img.data.len())));
        }
        ptr::copy_nonoverlapping(img.data.as_ptr(), buf, img.data.len());
        Ok(())
    })
}

/// Predicted camera-to-world poses of image `camera`: for each of the
/// `n_poses` samples a row-major 3×4 `[R | t]`, 12 doubles.
///
/// # Safety
/// `m` came from [`ms_model_load`]; `buf` holds `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ms_model_trajectory(m: *const MsModel, camera: usize, buf: *mut f64, len: usize) -> MsStatus {
    guard(|| {
        non_null(m, "model")?;
        non_null(buf, "buf")?;
        let ck = &(*m).inner;
        let cam = ck.cameras.get(camera).ok_or_else(|| Failure(MsStatus::InvalidArgument, format!("camera {camera} out of range")))?;
        let poses = ck.model.motion.poses(&ck.model.store, &cam.pose, camera).map_err(data)?;
        if len < poses.len() * 12 {
            return Err(Failure(MsStatus::BufferTooSmall, format!("need {} doubles, got {len}", poses.len() * 12)));
        }
        let out = std::slice::from_raw_parts_mut(buf, poses.len() * 12);
        for (k, p) in poses.iter().enumerate() {
            for r in 0..3 {
                for c in 0..3 {
                    out[12 * k + 4 * r + c] = p.rotation.0[r][c];
                }
                out[12 * k + 4 * r + 3] = p.translation.0[r];
            }
        }
        Ok(())
    })
}

/// `exp` of the screw `(axis, v)` scaled by `theta`, as a row-major 4×4
/// matrix. `axis` must be a unit vector.
///
/// # Safety
/// `axis` and `v` point to 3 doubles, `out` to 16 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ms_se3_exp(axis: *const f64, v: *const f64, theta: f64, out: *mut f64) -> MsStatus {
    guard(|| {
        non_null(axis, "axis")?;
        non_null(v, "v")?;
        non_null(out, "out")?;
        let a = std::slice::from_raw_parts(axis, 3);
        let b = std::slice::from_raw_parts(v, 3);
        let s = ScrewAxis::new(Vec3::new(a[0], a[1], a[2]), Vec3::new(b[0], b[1], b[2]), theta).map_err(|e| Failure(MsStatus::InvalidArgument, e.to_string()))?;
        let m = se3_exp(&s).to_matrix();
        let o = std::slice::from_raw_parts_mut(out, 16);
        for r in 0..4 {
            for c in 0..4 {
                o[4 * r + c] = m.0[r][c];
            }
        }
        Ok(())
    })
}
