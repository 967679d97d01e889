#[path = "support/toy.rs"]
mod toy;

use toy::*;
use xray_core::bundle::{
    ModelBundle, FORMAT_VERSION, MANIFEST_FILE, VERIFY_TOLERANCE, WEIGHTS_FILE,
};
use xray_core::ood::OodMetricKind;
use xray_core::Error;

fn bundle() -> ModelBundle {
    toy_bundle(7, OodMetricKind::Ssim, 0.5)
}

#[test]
fn zip_round_trip_preserves_predictions() {
    let b = bundle();
    let bytes = b.to_bytes().unwrap();
    let loaded = ModelBundle::from_bytes(&bytes).unwrap();
    assert_eq!(loaded, b);
    let report = loaded.verify().unwrap().unwrap();
    assert_eq!(report.samples, 3);
    assert!(report.max_abs_diff <= VERIFY_TOLERANCE, "{report:?}");
    assert!(loaded.gate().unwrap().is_some());
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.xrb");
    let b = dir.path().join("b.xrb");
    bundle().save(&a).unwrap();
    ModelBundle::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(bundle().to_bytes().unwrap(), std::fs::read(&a).unwrap());
}

#[test]
fn directory_form_loads() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle();
    b.save_dir(dir.path()).unwrap();
    assert!(dir.path().join(MANIFEST_FILE).exists() && dir.path().join(WEIGHTS_FILE).exists());
    assert_eq!(ModelBundle::load(dir.path()).unwrap(), b);
}

#[test]
fn manifest_keys_are_sorted() {
    let json: serde_json::Value = serde_json::from_slice(&bundle().manifest_json()).unwrap();
    let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(json["format_version"], FORMAT_VERSION);
}

fn with_manifest(edit: impl Fn(&mut serde_json::Value)) -> Result<ModelBundle, Error> {
    let b = bundle();
    let mut m: serde_json::Value = serde_json::from_slice(&b.manifest_json()).unwrap();
    edit(&mut m);
    ModelBundle::from_parts(&serde_json::to_vec(&m).unwrap(), &b.weights_bin())
}

#[test]
fn rejects_bad_manifests() {
    let r = with_manifest(|m| m["format_version"] = 2.into());
    assert!(matches!(
        r,
        Err(Error::VersionMismatch {
            found: 2,
            expected: 1
        })
    ));
    let r = with_manifest(|m| m["class_names"] = 5.into());
    assert!(matches!(r, Err(Error::CorruptManifest(_))));
    let r = with_manifest(|m| m["operating_points"][0] = 1.5.into());
    assert!(matches!(r, Err(Error::InvalidOperatingPoint(_))));
    let r = with_manifest(|m| m["classifier"]["layers"][0]["kind"] = "fancy_attention".into());
    assert!(matches!(r, Err(Error::UnsupportedLayer(_))), "{r:?}");
    let b = bundle();
    assert!(ModelBundle::from_parts(b"{not json", &b.weights_bin()).is_err());
}

#[test]
fn rejects_weight_count_mismatch() {
    let b = bundle();
    let mut w = b.weights_bin();
    w.truncate(w.len() - 4);
    assert!(matches!(
        ModelBundle::from_parts(&b.manifest_json(), &w),
        Err(Error::WeightCountMismatch { .. })
    ));
    let mut w = b.weights_bin();
    w.pop();
    assert!(ModelBundle::from_parts(&b.manifest_json(), &w).is_err());
}

#[test]
fn corrupted_weights_fail_verification() {
    let b = bundle();
    let mut w = b.weights_bin();
    for byte in w.iter_mut().take(4000).step_by(4) {
        *byte ^= 0x5a;
    }
    for chunk in w[..4000].chunks_mut(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        chunk.copy_from_slice(&(v * 3.0 + 0.5).to_le_bytes());
    }
    let corrupt = ModelBundle::from_parts(&b.manifest_json(), &w).unwrap();
    let report = corrupt.verify().unwrap().unwrap();
    assert!(!report.within(VERIFY_TOLERANCE), "{report:?}");
}

#[test]
fn exported_fixture_files_verify() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle();
    b.export_fixtures(dir.path()).unwrap();
    let report = b.verify_fixture_dir(dir.path()).unwrap();
    assert!(report.within(VERIFY_TOLERANCE), "{report:?}");
    let other = toy_bundle(8, OodMetricKind::Ssim, 0.5);
    assert!(!other
        .verify_fixture_dir(dir.path())
        .unwrap()
        .within(VERIFY_TOLERANCE));
}
