//! Drives the installed binary through a complete small experiment and
//! checks the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn cinerst_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cinerst"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch cinerst")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cinerst_in(dir, args);
    assert!(
        out.status.success(),
        "{:?} failed with {:?}: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_pipeline_runs_from_phantom_to_png() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    ok(
        d,
        &[
            "phantom", "--frames", "4", "--height", "16", "--width", "16", "--seed", "3", "--out",
            "truth.dmt4",
        ],
    );
    let mask_line = ok(
        d,
        &[
            "mask", "--t", "4", "--h", "16", "--w", "16", "--r", "4", "--seed", "3", "--out",
            "mask.dmt4",
        ],
    );
    assert!(mask_line.contains("sampled rows"), "got: {mask_line}");
    ok(
        d,
        &[
            "undersample",
            "--image",
            "truth.dmt4",
            "--mask",
            "mask.dmt4",
            "--out-kspace",
            "k.dmt4",
            "--out-zerofilled",
            "zf.dmt4",
        ],
    );

    std::fs::create_dir(d.join("data")).unwrap();
    std::fs::copy(d.join("truth.dmt4"), d.join("data/truth.dmt4")).unwrap();
    ok(
        d,
        &[
            "train", "--stage", "sadxnet", "--data-dir", "data", "--out-checkpoint", "ck1",
            "--steps", "2", "--seed", "1",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--stage",
            "rst",
            "--variant",
            "micro",
            "--data-dir",
            "data",
            "--out-checkpoint",
            "ck2",
            "--steps",
            "1",
            "--seed",
            "1",
            "--sadxnet-checkpoint",
            "ck1",
        ],
    );
    for name in ["ck1", "ck2"] {
        for artifact in ["manifest.json", "arch.json", "loss.csv", "train_config.json"] {
            assert!(d.join(name).join(artifact).exists(), "{name}/{artifact} missing");
        }
    }

    ok(
        d,
        &[
            "reconstruct",
            "--input",
            "zf.dmt4",
            "--sadxnet-checkpoint",
            "ck1",
            "--rst-checkpoint",
            "ck2",
            "--out",
            "recon.dmt4",
        ],
    );
    let json = ok(d, &["eval", "--pred", "recon.dmt4", "--truth", "truth.dmt4"]);
    let report: serde_json::Value = serde_json::from_str(&json).expect("eval emits JSON");
    assert!(report["rmse"].as_f64().unwrap().is_finite());
    assert_eq!(report["per_frame"].as_array().unwrap().len(), 4);

    ok(
        d,
        &[
            "export-png", "--input", "recon.dmt4", "--frame", "1", "--out", "frame1.png",
        ],
    );
    let png = std::fs::read(d.join("frame1.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

#[test]
fn identical_seeds_give_identical_masks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.dmt4", "b.dmt4"] {
        ok(
            d,
            &[
                "mask", "--t", "6", "--h", "64", "--w", "64", "--r", "6", "--seed", "9", "--out",
                name,
            ],
        );
    }
    assert_eq!(
        std::fs::read(d.join("a.dmt4")).unwrap(),
        std::fs::read(d.join("b.dmt4")).unwrap()
    );
}

#[test]
fn gradcheck_single_op_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--op", "relu"]);
    assert!(out.contains("pass"), "got: {out}");
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let unknown_flag = cinerst_in(d, &["mask", "--no-such-flag"]);
    assert_eq!(unknown_flag.status.code(), Some(2));

    let bad_stage = cinerst_in(
        d,
        &[
            "train", "--stage", "warp", "--data-dir", ".", "--out-checkpoint", "ck",
        ],
    );
    assert_eq!(bad_stage.status.code(), Some(2));

    let infeasible = cinerst_in(
        d,
        &[
            "mask", "--t", "2", "--h", "16", "--w", "16", "--r", "64", "--out", "m.dmt4",
        ],
    );
    assert_eq!(infeasible.status.code(), Some(2));
    assert!(!infeasible.status.success());
}

#[test]
fn missing_input_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = cinerst_in(
        dir.path(),
        &["eval", "--pred", "nope.dmt4", "--truth", "nope.dmt4"],
    );
    assert_eq!(out.status.code(), Some(1));
}
