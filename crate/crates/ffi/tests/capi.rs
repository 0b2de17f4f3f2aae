use std::ffi::{CStr, CString};
use std::ptr;

use motionsplat::liegroup::{se3_exp, ScrewAxis, Vec3};
use motionsplat_ffi::*;

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ms_last_error_message()) }.to_string_lossy().into_owned()
}

const TINY: &str = "n_poses = 5\nlatent_dim = 8\nsubsteps = 2\nweightnet_channels = 4\nwarmup = 1\nmotion_start = 2\nweightmask_start = 3\ntotal_iters = 4\ncheckpoint_every = 2\n";

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ms_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn se3_exp_matches_library() {
    let axis = [0.0, 0.6, 0.8];
    let v = [0.3, -0.1, 0.2];
    let mut out = [0.0; 16];
    let st = unsafe { ms_se3_exp(axis.as_ptr(), v.as_ptr(), 0.7, out.as_mut_ptr()) };
    assert_eq!(st, MsStatus::Ok);
    let m = se3_exp(&ScrewAxis::new(Vec3::new(0.0, 0.6, 0.8), Vec3::new(0.3, -0.1, 0.2), 0.7).unwrap()).to_matrix();
    for r in 0..4 {
        for c in 0..4 {
            assert_eq!(out[4 * r + c], m.0[r][c]);
        }
    }
    assert_eq!(&out[12..], &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn bad_arguments_report_status_and_message() {
    let mut out = [0.0; 16];
    let v = [0.0; 3];
    let st = unsafe { ms_se3_exp(ptr::null(), v.as_ptr(), 0.1, out.as_mut_ptr()) };
    assert_eq!(st, MsStatus::NullPointer);
    assert!(last_error().contains("axis"), "{}", last_error());

    let not_unit = [1.0, 1.0, 0.0];
    let st = unsafe { ms_se3_exp(not_unit.as_ptr(), v.as_ptr(), 0.1, out.as_mut_ptr()) };
    assert_eq!(st, MsStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    let unit = [1.0, 0.0, 0.0];
    assert_eq!(unsafe { ms_se3_exp(unit.as_ptr(), v.as_ptr(), 0.1, out.as_mut_ptr()) }, MsStatus::Ok);
    assert_eq!(last_error(), "");
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut d = ptr::null_mut();
    let st = unsafe { ms_dataset_load(cstr(&dir.path().join("nope")).as_ptr(), &mut d) };
    assert_eq!(st, MsStatus::Data);
    assert!(d.is_null());
    assert!(!last_error().is_empty());
    unsafe { ms_dataset_free(ptr::null_mut()) };
    unsafe { ms_model_free(ptr::null_mut()) };
}

#[test]
fn synth_train_render_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(unsafe { ms_synth(3, 30, 2, 0.05, 16, 16, cstr(&data).as_ptr()) }, MsStatus::Ok, "{}", last_error());

    let mut d = ptr::null_mut();
    assert_eq!(unsafe { ms_dataset_load(cstr(&data).as_ptr(), &mut d) }, MsStatus::Ok, "{}", last_error());
    let mut n = 0;
    assert_eq!(unsafe { ms_dataset_len(d, &mut n) }, MsStatus::Ok);
    assert_eq!(n, 2);

    let bad = CString::new("no_such_key = 1").unwrap();
    assert_eq!(unsafe { ms_train(d, bad.as_ptr(), cstr(&run).as_ptr(), false) }, MsStatus::Config);
    assert!(last_error().contains("no_such_key"), "{}", last_error());

    let cfg = CString::new(TINY).unwrap();
    assert_eq!(unsafe { ms_train(d, cfg.as_ptr(), cstr(&run).as_ptr(), false) }, MsStatus::Ok, "{}", last_error());
    unsafe { ms_dataset_free(d) };

    let ck = run.join("checkpoints").join("iter_000004");
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ms_model_load(cstr(&ck).as_ptr(), &mut m) }, MsStatus::Ok, "{}", last_error());
    let (mut cams, mut w, mut h, mut np) = (0, 0, 0, 0);
    assert_eq!(unsafe { ms_model_info(m, &mut cams, &mut w, &mut h, &mut np) }, MsStatus::Ok);
    assert_eq!((cams, w, h, np), (2, 16, 16, 5));

    let mut img = vec![-1.0; w * h * 3];
    assert_eq!(unsafe { ms_model_render(m, 1, MsRenderMode::Sharp, img.as_mut_ptr(), img.len()) }, MsStatus::Ok);
    assert!(img.iter().all(|v| v.is_finite() && *v >= 0.0));
    let mut blur = vec![-1.0; w * h * 3];
    assert_eq!(unsafe { ms_model_render(m, 1, MsRenderMode::Blur, blur.as_mut_ptr(), blur.len()) }, MsStatus::Ok);
    assert!(blur.iter().all(|v| v.is_finite()));
    assert_eq!(unsafe { ms_model_render(m, 1, MsRenderMode::Sharp, img.as_mut_ptr(), 10) }, MsStatus::BufferTooSmall);
    assert_eq!(unsafe { ms_model_render(m, 2, MsRenderMode::Sharp, img.as_mut_ptr(), img.len()) }, MsStatus::InvalidArgument);

    let mut poses = vec![0.0; np * 12];
    assert_eq!(unsafe { ms_model_trajectory(m, 0, poses.as_mut_ptr(), poses.len()) }, MsStatus::Ok);
    for k in 0..np {
        let p = &poses[12 * k..12 * k + 12];
        // Rows of the rotation block stay close to unit length.
        for r in 0..3 {
            let n: f64 = (0..3).map(|c| p[4 * r + c] * p[4 * r + c]).sum();
            assert!((n - 1.0).abs() < 0.1, "{n}");
        }
    }
    assert_eq!(unsafe { ms_model_trajectory(m, 0, poses.as_mut_ptr(), 11) }, MsStatus::BufferTooSmall);
    unsafe { ms_model_free(m) };
}

#[test]
fn header_is_generated() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/motionsplat.h")).unwrap();
    for sym in ["ms_last_error_message", "ms_synth", "ms_train", "ms_model_render", "MS_STATUS_PANIC", "typedef struct MsModel MsModel"] {
        assert!(h.contains(sym), "{sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"motionsplat.h\"\nint main(void) { return ms_version() == 0; }\n").unwrap();
    let st = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"].into_iter().find(|c| std::process::Command::new(c).arg("--version").output().is_ok()).ok_or(())
}
