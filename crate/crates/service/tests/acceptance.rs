//! One PASS/FAIL line per acceptance criterion, written straight to stderr so
//! it shows without `--nocapture`.

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;
#[path = "../../core/tests/support/toy.rs"]
mod toy;

use std::io::Write;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::Rng;
use serde_json::Value;
use tower::ServiceExt;

use oracles::*;
use xray_core::bundle::{ModelBundle, VERIFY_TOLERANCE};
use xray_core::eval::{
    auc_of, bootstrap_auc, calibrate, optimal_operating_point, retention_curve, roc_curve,
    separation_auc, BootstrapConfig,
};
use xray_core::explain::cam;
use xray_core::models::{
    gen_ood, gen_phantom, latent_mean, train_autoencoder, AutoencoderConfig, AutoencoderTraining,
    OodFamily,
};
use xray_core::ood::{
    calibrate_threshold, ssim, LatentReference, OodGate, OodMetricKind, SsimParams,
};
use xray_core::preprocess::{Image, PreprocessSpec};
use xray_core::tensor::Model;
use xray_service::api::router;
use xray_service::service::{Service, MIB};

fn report(criterion: &str, ok: bool, detail: &str) {
    let line = format!("{} {criterion}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    assert!(ok, "{line}");
}

fn random_instance(rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let p = rng.random_range(0.05..0.95);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

fn random_image(w: usize, h: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Image {
    Image::new(
        w,
        h,
        1,
        (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn gradient_oracle() {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut rng = rng(1);
    let mut worst = (0.0f64, "");
    let mut ok = true;
    for kind in LAYER_KINDS {
        let mut total = GradCheck::default();
        for _ in 0..20 {
            let (spec, weights, inputs) = random_graph(kind, &mut rng);
            let model = Model::new(&spec, weights).unwrap();
            total.merge(check_input_gradients(&model, &inputs, 24, &mut rng));
        }
        ok &= total.max_rel_err <= TOL && total.skipped * 4 < total.checked;
        if total.max_rel_err >= worst.0 {
            worst = (total.max_rel_err, kind);
        }
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(60);
    report(
        "gradient oracle",
        ok,
        &format!(
            "{} layer kinds x 20 graphs, worst rel err {:.2e} ({}) <= 1e-4, {:.1}s < 60s",
            LAYER_KINDS.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn auc_oracle() {
    let worked = auc_of(&[0.8, 0.6, 0.6, 0.2], &[true, false, true, false]).unwrap();
    let mut rng = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (s, l) = random_instance(&mut rng);
        worst = worst.max((auc_of(&s, &l).unwrap() - pairwise_auc(&s, &l)).abs());
    }
    report(
        "AUC oracle",
        worst <= 1e-12 && (worked - 0.875).abs() <= 1e-12,
        &format!(
            "worked example {worked}, max |trapezoid - pairwise| {worst:.1e} over 100 instances"
        ),
    );
}

#[test]
fn calibration_map() {
    let mut failures = Vec::new();
    for i in 1..=99 {
        let opt = i as f64 / 100.0;
        let f = |x: f64| calibrate(x, opt).unwrap();
        if f(0.0) != 0.0 || f(1.0) != 1.0 || (f(opt) - 0.5).abs() > 1e-15 {
            failures.push(format!("endpoints at opt {opt}"));
        }
        if (f(opt - 1e-12) - 0.5).abs() > 1e-9 || (f(opt + 1e-12) - 0.5).abs() > 1e-9 {
            failures.push(format!("discontinuity at opt {opt}"));
        }
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=1000 {
            let x = k as f64 / 1000.0;
            let y = f(x);
            if y < prev {
                failures.push(format!("not monotone at opt {opt} x {x}"));
            }
            if i == 50 && (y - x).abs() > 1e-15 {
                failures.push(format!("not identity at x {x}"));
            }
            prev = y;
        }
    }
    report(
        "calibration map",
        failures.is_empty(),
        &format!(
            "99 opt x 1001 x grid, {} violations {:?}",
            failures.len(),
            failures.first()
        ),
    );
}

#[test]
fn operating_point() {
    let mut rng = rng(4);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (s, l) = random_instance(&mut rng);
        let op = optimal_operating_point(&roc_curve(&s, &l).unwrap());
        let (opt, j) = youden_scan(&s, &l);
        if op.opt != opt || (op.j_statistic - j).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    report(
        "operating point",
        mismatches == 0,
        &format!("{mismatches}/100 instances differ from the exhaustive TPR-FPR scan"),
    );
}

#[test]
fn ssim_properties() {
    let p = SsimParams::default();
    let mut rng = rng(5);
    let mut identity = true;
    for _ in 0..10 {
        let x = random_image(rng.random_range(5..40), rng.random_range(5..40), &mut rng);
        identity &= ssim(&x, &x, &p).unwrap() == 1.0;
    }
    // (K1 L)^2 with K1 = 0.01, L = 1
    let c1 = 1e-4;
    let closed = ssim(
        &Image::filled(32, 32, 0.0).unwrap(),
        &Image::filled(32, 32, 1.0).unwrap(),
        &p,
    )
    .unwrap();
    let closed_err = (closed - c1 / (1.0 + c1)).abs();
    let mut symmetric = true;
    let mut oracle_err = 0.0f64;
    for _ in 0..50 {
        let (w, h) = (rng.random_range(6..30), rng.random_range(6..30));
        let a = random_image(w, h, &mut rng);
        let b = random_image(w, h, &mut rng);
        let ab = ssim(&a, &b, &p).unwrap();
        symmetric &= ab == ssim(&b, &a, &p).unwrap();
        oracle_err = oracle_err.max((ab - naive_ssim(a.data(), b.data(), w, h)).abs());
    }
    report(
        "SSIM",
        identity && closed_err <= 1e-9 && symmetric && oracle_err < 1e-9,
        &format!(
            "ssim(x,x)=1 exact: {identity}, |closed form err| {closed_err:.1e}, symmetric on 50 pairs: {symmetric}, max |direct - fast| {oracle_err:.1e}"
        ),
    );
}

#[test]
fn cam_identity() {
    let mut rng = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (model, x) = random_cam_model(&mut rng);
        let k = model.graph().shape(model.graph().logits_id())[0];
        for c in 0..k {
            let m = cam(&model, &x, c).unwrap();
            let mean = m.map.values.iter().sum::<f64>() / m.map.values.len() as f64;
            worst = worst.max((mean + m.bias - m.logit).abs());
        }
    }
    report(
        "CAM identity",
        worst <= 1e-9,
        &format!("max |mean(M)+b-y| {worst:.1e} over 20 models"),
    );
}

#[test]
fn serialization() {
    let bundle = toy::toy_bundle(8, OodMetricKind::ReconL2, 0.5);
    let loaded = ModelBundle::from_bytes(&bundle.to_bytes().unwrap()).unwrap();
    let good = loaded.verify().unwrap().unwrap();
    // stored references vs the unquantized f64 model
    let f64_model = toy::toy_classifier(8);
    let f32_model = loaded.classifier().unwrap();
    let mut drift = 0.0f64;
    for f in toy::fixtures() {
        let img = f.image(48).unwrap();
        let a = f64_model.probabilities(&img).unwrap();
        let b = f32_model.probabilities(&img).unwrap();
        drift = a
            .iter()
            .zip(&b)
            .fold(drift, |m, (x, y)| m.max((x - y).abs()));
    }
    let mut corrupted = loaded.clone();
    for w in corrupted.weights.iter_mut().rev().take(8) {
        *w += 1.0;
    }
    let bad = corrupted.verify().unwrap().unwrap();
    report(
        "serialization",
        good.samples == 3 && good.within(VERIFY_TOLERANCE) && drift <= VERIFY_TOLERANCE && !bad.within(VERIFY_TOLERANCE),
        &format!(
            "{} fixtures after float32 round trip: max diff {:.1e} <= 1e-5 (f64 vs float32 weights {drift:.1e}); corrupted weights: {:.1e}",
            good.samples, good.max_abs_diff, bad.max_abs_diff
        ),
    );
}

const GATE_SIZE: usize = 64;

struct TrainedGate {
    gate: OodGate,
    train_time: Duration,
    held_out: Vec<Image>,
    noise: Vec<Image>,
}

fn phantoms(seed: u64, n: usize) -> Vec<Image> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let labels: Vec<bool> = (0..4).map(|_| r.random_bool(0.5)).collect();
            gen_phantom(r.random(), &labels, GATE_SIZE).image
        })
        .collect()
}

/// L2 autoencoder on 500 phantoms, thresholded at the 95th percentile of a
/// separate calibration set.
fn trained_gate() -> &'static TrainedGate {
    static GATE: OnceLock<TrainedGate> = OnceLock::new();
    GATE.get_or_init(|| {
        let train = phantoms(100, 500);
        let calib = phantoms(101, 100);
        let cfg = AutoencoderTraining {
            model: AutoencoderConfig {
                input_size: GATE_SIZE,
                ..AutoencoderConfig::default()
            },
            epochs: 10,
            seed: 7,
            ..AutoencoderTraining::default()
        };
        let start = Instant::now();
        let t = train_autoencoder(&train, &calib, &cfg).unwrap();
        let train_time = start.elapsed();
        let reference = LatentReference::Empirical(latent_mean(&t.encoder, &train).unwrap());
        let mut gate = OodGate {
            encoder: t.encoder,
            decoder: t.decoder,
            preprocess: PreprocessSpec::new(GATE_SIZE, 0.0, 1.0).unwrap(),
            metric: OodMetricKind::ReconL2,
            threshold: 0.0,
            reference,
        };
        let scores: Vec<f64> = calib
            .iter()
            .map(|img| gate.evaluate(img).unwrap().0.scores.recon_l2)
            .collect();
        gate.threshold = calibrate_threshold(&scores, OodMetricKind::ReconL2, 95.0).unwrap();
        TrainedGate {
            gate,
            train_time,
            held_out: phantoms(102, 100),
            noise: (0..100)
                .map(|i| gen_ood(9000 + i, OodFamily::Noise, GATE_SIZE))
                .collect(),
        }
    })
}

#[test]
fn desk_scale_ood_gate() {
    let g = trained_gate();
    let score = |imgs: &[Image], kind: OodMetricKind| -> Vec<f64> {
        imgs.iter()
            .map(|img| g.gate.evaluate(img).unwrap().0.scores.get(kind))
            .collect()
    };
    let l2 = separation_auc(
        &score(&g.held_out, OodMetricKind::ReconL2),
        &score(&g.noise, OodMetricKind::ReconL2),
        OodMetricKind::ReconL2,
    )
    .unwrap();
    let s = separation_auc(
        &score(&g.held_out, OodMetricKind::Ssim),
        &score(&g.noise, OodMetricKind::Ssim),
        OodMetricKind::Ssim,
    )
    .unwrap();
    report(
        "desk-scale OOD gate",
        l2 >= 0.95 && s >= 0.90 && g.train_time <= Duration::from_secs(300),
        &format!(
            "500 phantoms trained in {:.1}s <= 300s; separation AUC vs uniform noise: recon_l2 {l2:.4} >= 0.95, ssim {s:.4} >= 0.90",
            g.train_time.as_secs_f64()
        ),
    );
}

#[test]
fn retention_property() {
    let (ood, task, labels) = flipped_label_instance(100, 40);
    let curve = retention_curve(&ood, &task, &labels, OodMetricKind::ReconL2, 10).unwrap();
    let fractions_ok = curve
        .windows(2)
        .all(|w| w[1].retained_fraction <= w[0].retained_fraction);
    let mut run = 0;
    let mut best = 0;
    for w in curve.windows(2) {
        run = if w[1].auc_on_retained > w[0].auc_on_retained {
            run + 1
        } else {
            0
        };
        best = best.max(run);
    }
    let aucs: Vec<String> = curve
        .iter()
        .map(|p| format!("{:.3}", p.auc_on_retained))
        .collect();
    report(
        "retention property",
        fractions_ok && best >= 3,
        &format!(
            "{best} consecutive strict AUC increases (>= 3), retained fraction non-increasing: {fractions_ok}; AUCs [{}]",
            aucs.join(", ")
        ),
    );
}

#[test]
fn bootstrap_protocol() {
    let mut rng = rng(10);
    let (s, l) = random_instance(&mut rng);
    let cfg = BootstrapConfig {
        seed: 3,
        ..BootstrapConfig::default()
    };
    let a = bootstrap_auc(&s, &l, &cfg).unwrap();
    let b = bootstrap_auc(&s, &l, &cfg).unwrap();
    let perfect: Vec<f64> = l.iter().map(|&x| if x { 0.9 } else { 0.1 }).collect();
    let tied = vec![0.5; l.len()];
    let p = bootstrap_auc(&perfect, &l, &cfg).unwrap();
    let t = bootstrap_auc(&tied, &l, &cfg).unwrap();
    report(
        "bootstrap protocol",
        a == b && a.n_splits == 10 && a.split_fraction == 0.5 && p.std == 0.0 && t.std == 0.0,
        &format!(
            "{} splits of {}, deterministic: {}, std on separable {} and all-tied {}",
            a.n_splits,
            a.split_fraction,
            a == b,
            p.std,
            t.std
        ),
    );
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn post_png(uri: &str, png: Vec<u8>) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "image/png")
        .body(Body::from(png))
        .unwrap()
}

#[tokio::test]
async fn service_contract() {
    let g = trained_gate();
    let mut bundle = ModelBundle::new(&toy::toy_classifier(12)).with_ood(&g.gate);
    bundle
        .attach_verification(toy::fixtures(), GATE_SIZE)
        .unwrap();
    let app = router(Arc::new(Service::new(&bundle, true).unwrap()), 16 * MIB);

    let (hs, health) = call(&app, Request::get("/health").body(Body::empty()).unwrap()).await;
    let health_ok = hs == StatusCode::OK
        && health["class_names"] == serde_json::json!(bundle.class_names)
        && health["input_size"] == bundle.preprocess.target_size
        && health["format_version"] == 1
        && health["ood_gate"] == true;

    let (ns, noise) = call(&app, post_png("/predict", g.noise[0].to_png())).await;
    let rejected_ok = ns == StatusCode::OK
        && noise["admitted"] == false
        && noise["ood"]["admitted"] == false
        && noise.get("predictions").is_none();

    let inlier = g
        .held_out
        .iter()
        .find(|img| g.gate.evaluate(img).unwrap().1.admitted)
        .expect("an admitted phantom");
    let (ps, phantom) = call(&app, post_png("/predict", inlier.to_png())).await;
    let admitted_ok = ps == StatusCode::OK
        && phantom["admitted"] == true
        && phantom["predictions"]
            .as_array()
            .is_some_and(|p| p.len() == toy::NUM_CLASSES);

    report(
        "service contract",
        health_ok && rejected_ok && admitted_ok,
        &format!(
            "/health matches bundle: {health_ok}; noise rejected without probabilities: {rejected_ok}; phantom admitted with {} predictions: {admitted_ok}; no web client involved",
            toy::NUM_CLASSES
        ),
    );
}
