#[path = "../../core/tests/support/toy.rs"]
mod toy;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use xray_core::ood::OodMetricKind;

fn xray(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xray"))
        .args(args)
        .env_remove("XRAY_BUNDLE")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn toy_bundle_file(dir: &Path, threshold: f64) -> std::path::PathBuf {
    let path = dir.join("toy.zip");
    toy::toy_bundle(3, OodMetricKind::ReconL2, threshold)
        .save(&path)
        .unwrap();
    path
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = xray(&[
            "gen-data",
            "--seed",
            "9",
            "--n",
            "30",
            "--classes",
            "3",
            "--size",
            "32",
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let v: Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    assert_eq!(v["samples"].as_array().unwrap().len(), 30);
    assert_eq!(v["class_names"].as_array().unwrap().len(), 3);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&xray(&["gen-data", "--bogus"])), 2);
    assert_eq!(code(&xray(&["no-such-command"])), 2);
    assert_eq!(code(&xray(&["verify"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.json");
    // invalid prevalence is a validation error, not a crash
    assert_eq!(
        code(&xray(&[
            "gen-data",
            "--prevalence",
            "1.5",
            "--out",
            p(&out)
        ])),
        2
    );
}

#[test]
fn missing_bundle_is_runtime_failure() {
    assert_eq!(
        code(&xray(&["verify", "--bundle", "/nonexistent/bundle.zip"])),
        1
    );
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = toy_bundle_file(dir.path(), 0.0);
    let o = xray(&["verify", "--bundle", p(&good)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["max_abs_diff"].as_f64().unwrap() <= 1e-5);

    let fixtures = dir.path().join("fixtures");
    assert_eq!(
        code(&xray(&[
            "verify",
            "--bundle",
            p(&good),
            "--export",
            p(&fixtures)
        ])),
        0
    );
    assert_eq!(
        code(&xray(&[
            "verify",
            "--bundle",
            p(&good),
            "--images",
            p(&fixtures)
        ])),
        0
    );

    let mut bad = toy::toy_bundle(3, OodMetricKind::ReconL2, 0.0);
    let last = bad.weights.len() - 1;
    bad.weights[last] += 5.0;
    let bad_path = dir.path().join("bad.zip");
    bad.save(&bad_path).unwrap();
    assert_eq!(code(&xray(&["verify", "--bundle", p(&bad_path)])), 1);
    assert_eq!(
        code(&xray(&[
            "verify",
            "--bundle",
            p(&bad_path),
            "--images",
            p(&fixtures)
        ])),
        1
    );
}

#[test]
fn bundle_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let good = toy_bundle_file(dir.path(), 0.0);
    let o = Command::new(env!("CARGO_BIN_EXE_xray"))
        .args(["verify"])
        .env("XRAY_BUNDLE", &good)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn predict_and_explain_files() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = toy_bundle_file(dir.path(), 0.0);
    let image = dir.path().join("x.png");
    std::fs::write(
        &image,
        xray_core::models::gen_phantom(4, &[true, false, false], 40)
            .image
            .to_png(),
    )
    .unwrap();

    let o = xray(&["predict", "--bundle", p(&bundle), "--image", p(&image)]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["admitted"], false);
    assert!(v.get("predictions").is_none());

    let o = xray(&[
        "predict",
        "--bundle",
        p(&bundle),
        "--image",
        p(&image),
        "--no-gate",
    ]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["predictions"].as_array().unwrap().len(), 3);

    let raw = dir.path().join("map.f32");
    let o = xray(&[
        "explain",
        "--bundle",
        p(&bundle),
        "--image",
        p(&image),
        "--no-gate",
        "--method",
        "cam",
        "--class",
        "0",
        "--format",
        "raw",
        "--out",
        p(&raw),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(&raw).unwrap().len(),
        4 * toy::INPUT_SIZE * toy::INPUT_SIZE
    );
    let sidecar: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("map.f32.json")).unwrap()).unwrap();
    assert_eq!(sidecar["width"], toy::INPUT_SIZE);

    // gated explain of a rejected image is a validation failure
    let png = dir.path().join("map.png");
    assert_eq!(
        code(&xray(&[
            "explain",
            "--bundle",
            p(&bundle),
            "--image",
            p(&image),
            "--out",
            p(&png)
        ])),
        2
    );
    assert_eq!(
        code(&xray(&[
            "explain",
            "--bundle",
            p(&bundle),
            "--image",
            p(&image),
            "--no-gate",
            "--out",
            p(&png)
        ])),
        0
    );
    assert_eq!(&std::fs::read(&png).unwrap()[1..4], b"PNG");
}

#[test]
fn eval_reports_per_class_bootstrap() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = toy_bundle_file(dir.path(), 0.0);
    let ds = dir.path().join("ds.json");
    assert_eq!(
        code(&xray(&[
            "gen-data",
            "--seed",
            "2",
            "--n",
            "60",
            "--classes",
            "3",
            "--size",
            "32",
            "--out",
            p(&ds)
        ])),
        0
    );
    let out = dir.path().join("eval.json");
    let o = xray(&[
        "eval",
        "--bundle",
        p(&bundle),
        "--dataset",
        p(&ds),
        "--splits",
        "4",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["split"], "test");
    let classes = v["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 3);
    for c in classes {
        if let Some(auc) = c["auc"].as_f64() {
            assert!((0.0..=1.0).contains(&auc));
            assert_eq!(c["bootstrap"]["n_splits"], 4);
            assert!(c["bootstrap"]["std"].as_f64().unwrap() >= 0.0);
        }
    }

    // class count mismatch between bundle and dataset
    let ds2 = dir.path().join("ds2.json");
    xray(&[
        "gen-data",
        "--n",
        "30",
        "--classes",
        "2",
        "--size",
        "32",
        "--out",
        p(&ds2),
    ]);
    assert_eq!(
        code(&xray(&[
            "eval",
            "--bundle",
            p(&bundle),
            "--dataset",
            p(&ds2)
        ])),
        2
    );
}
