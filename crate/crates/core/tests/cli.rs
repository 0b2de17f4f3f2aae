use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use motionsplat::config::{Config, KEYS};
use motionsplat::splatter::read_png;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_motionsplat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(out: &Path, seed: &str, magnitude: &str) {
    ok(&["synth", "--seed", seed, "--gaussians", "30", "--cameras", "2", "--width", "16", "--height", "16", "--dense", "5", "--magnitude", magnitude, "--out", p(out)]);
}

const TINY: &[&str] = &[
    "--set", "n_poses=5", "--set", "latent_dim=8", "--set", "substeps=2", "--set", "weightnet_channels=4", "--set", "warmup=1", "--set", "motion_start=2", "--set",
    "weightmask_start=3", "--set", "checkpoint_every=2",
];

fn train(data: &Path, out: &Path, iters: usize, extra: &[&str]) -> Output {
    let total = format!("total_iters={iters}");
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--set", &total];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap()).map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())).collect();
    v.sort();
    v
}

#[test]
fn synth_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    synth(&t.path().join("a"), "4", "extreme");
    synth(&t.path().join("b"), "4", "extreme");
    synth(&t.path().join("c"), "5", "extreme");
    let a = dir_bytes(&t.path().join("a"));
    assert_eq!(a, dir_bytes(&t.path().join("b")));
    assert_ne!(a, dir_bytes(&t.path().join("c")));
    assert!(a.iter().any(|(n, _)| n == "traj_gt.csv"));
}

#[test]
fn zero_magnitude_blur_equals_sharp() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "1", "0");
    for i in 0..2 {
        let b = read_png(&t.path().join(format!("blur_{i:04}.png"))).unwrap();
        let s = read_png(&t.path().join(format!("sharp_{i:04}.png"))).unwrap();
        assert_eq!(b.data, s.data);
    }
}

#[test]
fn help_lists_every_config_key_with_default() {
    let out = ok(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let d = Config::default();
    for (k, _) in KEYS {
        let line = text.lines().find(|l| l.split_whitespace().next() == Some(k)).unwrap_or_else(|| panic!("{k} missing"));
        assert!(line.contains(&d.get(k).unwrap()), "{line}");
    }
    let train_help = String::from_utf8(ok(&["train", "--help"]).stdout).unwrap();
    assert!(train_help.contains("lambda_o"));
}

#[test]
fn config_errors_exit_with_2() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "1", "moderate");
    let out = run(&["train", "--data", p(t.path()), "--out", p(&t.path().join("r")), "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    let out = run(&["train", "--data", p(t.path()), "--out", p(&t.path().join("r")), "--set", "n_poses=4"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = t.path().join("bad.cfg");
    fs::write(&cfg, "lambda_c = lots\n").unwrap();
    let out = run(&["train", "--data", p(t.path()), "--out", p(&t.path().join("r")), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["synth", "--magnitude", "huge", "--out", p(&t.path().join("x"))]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", p(&t.path().join("missing")), "--out", p(&t.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["render", "--checkpoint", p(&t.path().join("missing")), "--out", p(&t.path().join("x.png"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_and_overrides_combine() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "2", "extreme");
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\ntotal_iters = 9\nestimator = linear\n").unwrap();
    let run_dir = t.path().join("run");
    let out = train(&data, &run_dir, 3, &["--config", p(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let written = fs::read_to_string(run_dir.join("checkpoints/iter_000003/config.txt")).unwrap();
    assert!(written.contains("estimator = linear"), "{written}");
    assert!(written.contains("total_iters = 3"), "{written}");
}

#[test]
fn train_render_eval_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "3", "extreme");
    let run_dir = t.path().join("run");
    let out = train(&data, &run_dir, 4, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let loss = fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);
    assert!(run_dir.join("trajectory.csv").exists());
    let ck = run_dir.join("checkpoints/iter_000004");

    let sharp = t.path().join("sharp.png");
    ok(&["render", "--checkpoint", p(&ck), "--camera", "1", "--mode", "sharp", "--out", p(&sharp)]);
    let img = read_png(&sharp).unwrap();
    assert_eq!((img.width, img.height), (16, 16));
    let blur = t.path().join("blur.png");
    ok(&["render", "--checkpoint", p(&ck), "--camera", "1", "--mode", "blur", "--out", p(&blur)]);
    let frames = t.path().join("frames");
    ok(&["render", "--checkpoint", p(&ck), "--camera", "0", "--mode", "trajectory", "--out", p(&frames)]);
    let pngs = fs::read_dir(&frames).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 5);
    assert_eq!(fs::read_to_string(frames.join("poses.csv")).unwrap().lines().count(), 6);
    assert_eq!(run(&["render", "--checkpoint", p(&ck), "--camera", "2", "--out", p(&sharp)]).status.code(), Some(3));

    let report = t.path().join("report.csv");
    let out = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--report", p(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("image_index,psnr_blurin,psnr_deblurred,ssim_deblurred,traj_rot_mean"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean PSNR"));

    // Same inputs, same report.
    let again = t.path().join("again.csv");
    ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--report", p(&again)]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn untrained_blur_render_matches_sharp() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "6", "moderate");
    let run_dir = t.path().join("run");
    let out = train(&data, &run_dir, 0, &["--set", "warmup=0", "--set", "motion_start=0", "--set", "weightmask_start=0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ck = run_dir.join("checkpoints/iter_000000");
    let (a, b) = (t.path().join("a.png"), t.path().join("b.png"));
    ok(&["render", "--checkpoint", p(&ck), "--mode", "sharp", "--out", p(&a)]);
    ok(&["render", "--checkpoint", p(&ck), "--mode", "blur", "--out", p(&b)]);
    let (a, b) = (read_png(&a).unwrap(), read_png(&b).unwrap());
    // 8-bit PNGs: allow one quantization step.
    assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= 1.0 / 255.0 + 1e-12));
}

#[test]
fn resume_continues_the_same_log() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "8", "extreme");
    let full = t.path().join("full");
    assert!(train(&data, &full, 4, &[]).status.success());
    let part = t.path().join("part");
    fs::create_dir_all(part.join("checkpoints")).unwrap();
    fs::copy(full.join("loss.csv"), part.join("loss.csv")).unwrap();
    let src = full.join("checkpoints/iter_000002");
    let dst = part.join("checkpoints/iter_000002");
    fs::create_dir_all(&dst).unwrap();
    for e in fs::read_dir(&src).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), dst.join(e.file_name())).unwrap();
    }
    let out = train(&data, &part, 4, &["--resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(full.join("loss.csv")).unwrap(), fs::read(part.join("loss.csv")).unwrap());
}
