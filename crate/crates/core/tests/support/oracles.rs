//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls the code under test except to run
//! forward passes.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xray_core::tensor::{GraphSpec, InputSpec, LayerKind, LayerSpec, Model, Tensor};

pub const FD_EPS: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central difference of `f` along coordinate `i`, or `None` when the two
/// one-sided differences disagree (a kink of relu/maxpool lies within eps).
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> Option<f64> {
    let mut xp = x.to_vec();
    xp[i] += eps;
    let mut xm = x.to_vec();
    xm[i] -= eps;
    let (fp, f0, fm) = (f(&xp), f(x), f(&xm));
    let forward = (fp - f0) / eps;
    let backward = (f0 - fm) / eps;
    if (forward - backward).abs() > 1e-3 * forward.abs().max(backward.abs()).max(1.0) {
        return None;
    }
    Some((fp - fm) / (2.0 * eps))
}

/// Projects the primary output on a fixed random direction.
pub struct Projection {
    pub direction: Vec<f64>,
}

impl Projection {
    pub fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            direction: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    pub fn value(&self, model: &Model, inputs: &[Tensor]) -> f64 {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let acts = model.forward(&refs).unwrap();
        let out = acts.by_id(model.graph().primary_output());
        out.data()
            .iter()
            .zip(&self.direction)
            .map(|(a, b)| a * b)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Compares analytic input gradients of a random projection of the primary
/// output against central differences on up to `coords` coordinates per input.
pub fn check_input_gradients(
    model: &Model,
    inputs: &[Tensor],
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let out_id = model.graph().primary_output();
    let out_len: usize = model.graph().shape(out_id).iter().product();
    let proj = Projection::new(out_len, rng);
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let acts = model.forward(&refs).unwrap();
    let seed = Tensor::new(model.graph().shape(out_id).to_vec(), proj.direction.clone()).unwrap();
    let grads = model.backward(&acts, vec![(out_id, seed)], false);
    let mut report = GradCheck::default();
    for (k, input) in inputs.iter().enumerate() {
        let f = |x: &[f64]| {
            let mut ins = inputs.to_vec();
            ins[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            proj.value(model, &ins)
        };
        let n = input.len();
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            (0..coords).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            match central_difference(&f, input.data(), i, FD_EPS) {
                Some(fd) => {
                    report.max_rel_err = report
                        .max_rel_err
                        .max(rel_err(grads.inputs[k].data()[i], fd));
                    report.checked += 1;
                }
                None => report.skipped += 1,
            }
        }
    }
    report
}

/// Indices of parameters outside batch-norm running statistics.
pub fn trainable_indices(spec: &GraphSpec) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for layer in &spec.layers {
        for slot in layer.kind.param_slots() {
            if !slot.name.starts_with("running_") {
                out.extend(offset..offset + slot.len());
            }
            offset += slot.len();
        }
    }
    out
}

/// Same comparison for trainable parameter gradients.
pub fn check_param_gradients(
    model: &Model,
    inputs: &[Tensor],
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let out_id = model.graph().primary_output();
    let out_len: usize = model.graph().shape(out_id).iter().product();
    let proj = Projection::new(out_len, rng);
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let acts = model.forward(&refs).unwrap();
    let seed = Tensor::new(model.graph().shape(out_id).to_vec(), proj.direction.clone()).unwrap();
    let grads = model
        .backward(&acts, vec![(out_id, seed)], true)
        .params
        .unwrap();
    let f = |w: &[f64]| {
        let m = Model::new(model.spec(), w.to_vec()).unwrap();
        proj.value(&m, inputs)
    };
    let mut report = GradCheck::default();
    let trainable = trainable_indices(model.spec());
    for _ in 0..coords.min(trainable.len()) {
        let i = trainable[rng.random_range(0..trainable.len())];
        match central_difference(&f, model.weights(), i, FD_EPS) {
            Some(fd) => {
                report.max_rel_err = report.max_rel_err.max(rel_err(grads[i], fd));
                report.checked += 1;
            }
            None => report.skipped += 1,
        }
    }
    report
}

pub const LAYER_KINDS: [&str; 11] = [
    "conv2d",
    "dense",
    "batchnorm",
    "relu",
    "sigmoid",
    "tanh",
    "avgpool",
    "maxpool",
    "global_avg_pool",
    "concat",
    "upsample_nearest",
];

fn conv(
    name: &str,
    input: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
            bias,
        },
        &[input],
    )
}

/// A small random graph exercising `kind`: input -> 3x3 conv -> layer.
/// Returns the graph, random weights and a random input.
pub fn random_graph(kind: &str, rng: &mut ChaCha8Rng) -> (GraphSpec, Vec<f64>, Vec<Tensor>) {
    let c = rng.random_range(1..=2);
    let h = rng.random_range(4..=7);
    let w = rng.random_range(4..=7);
    let c2 = rng.random_range(1..=3);
    let mut layers = vec![conv("pre", "x", c, c2, 3, 1, 1, true)];
    let test = match kind {
        "conv2d" => {
            let k = rng.random_range(1..=3);
            conv(
                "test",
                "pre",
                c2,
                rng.random_range(1..=3),
                k,
                rng.random_range(1..=2),
                rng.random_range(0..=1),
                rng.random_bool(0.5),
            )
        }
        "dense" => {
            let out = rng.random_range(2..=6);
            let out_shape = if rng.random_bool(0.5) && out % 2 == 0 {
                Some(vec![2, out / 2])
            } else {
                None
            };
            LayerSpec::new(
                "test",
                LayerKind::Dense {
                    in_features: c2 * h * w,
                    out_features: out,
                    out_shape,
                },
                &["pre"],
            )
        }
        "batchnorm" => LayerSpec::new(
            "test",
            LayerKind::Batchnorm {
                channels: c2,
                eps: 1e-5,
            },
            &["pre"],
        ),
        "relu" => LayerSpec::new("test", LayerKind::Relu, &["pre"]),
        "sigmoid" => LayerSpec::new("test", LayerKind::Sigmoid, &["pre"]),
        "tanh" => LayerSpec::new("test", LayerKind::Tanh, &["pre"]),
        "avgpool" | "maxpool" => {
            let k = rng.random_range(2..=3);
            let s = rng.random_range(1..=2);
            let kind = if kind == "avgpool" {
                LayerKind::Avgpool {
                    kernel: k,
                    stride: s,
                }
            } else {
                LayerKind::Maxpool {
                    kernel: k,
                    stride: s,
                }
            };
            LayerSpec::new("test", kind, &["pre"])
        }
        "global_avg_pool" => LayerSpec::new("test", LayerKind::GlobalAvgPool, &["pre"]),
        "concat" => {
            layers.push(LayerSpec::new("side", LayerKind::Tanh, &["x"]));
            LayerSpec::new("test", LayerKind::Concat, &["pre", "side", "pre"])
        }
        "upsample_nearest" => LayerSpec::new(
            "test",
            LayerKind::UpsampleNearest {
                factor: rng.random_range(2..=3),
            },
            &["pre"],
        ),
        other => panic!("unknown kind {other}"),
    };
    layers.push(test);
    let spec = GraphSpec {
        inputs: vec![InputSpec {
            name: "x".into(),
            shape: vec![c, h, w],
        }],
        layers,
        outputs: vec!["test".into()],
        logits: None,
    };
    let weights = random_weights(&spec, rng);
    let input = Tensor::new(
        vec![c, h, w],
        (0..c * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    (spec, weights, vec![input])
}

/// Uniform weights with strictly positive batch-norm variances.
pub fn random_weights(spec: &GraphSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w = Vec::new();
    for layer in &spec.layers {
        for slot in layer.kind.param_slots() {
            for _ in 0..slot.len() {
                w.push(match slot.name {
                    "running_var" => rng.random_range(0.5..2.0),
                    "gamma" => rng.random_range(0.5..1.5),
                    _ => rng.random_range(-0.8..0.8),
                });
            }
        }
    }
    w
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probability that a random positive outscores a random negative, ties 1/2.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                total += 1.0;
            } else if scores[i] == scores[j] {
                total += 0.5;
            }
        }
    }
    total / pairs as f64
}

/// Every candidate threshold: midpoints of sorted unique scores and the two
/// sentinels, with (fpr, tpr, tp, fp) counted by direct comparison.
pub fn exhaustive_thresholds(
    scores: &[f64],
    labels: &[bool],
) -> Vec<(f64, f64, f64, usize, usize)> {
    let mut uniq = scores.to_vec();
    uniq.sort_by(|a, b| b.total_cmp(a));
    uniq.dedup();
    let mut thresholds = vec![f64::INFINITY];
    thresholds.extend(uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(f64::NEG_INFINITY);
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    thresholds
        .into_iter()
        .map(|t| {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **l && **s >= t)
                .count();
            let fp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| !**l && **s >= t)
                .count();
            (t, fp as f64 / n as f64, tp as f64 / p as f64, tp, fp)
        })
        .collect()
}

/// Exhaustive Youden scan over interior thresholds with the tie-break
/// lower fpr, then larger threshold. Returns (opt, J).
pub fn youden_scan(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let all = exhaustive_thresholds(scores, labels);
    let interior = &all[1..all.len() - 1];
    if interior.is_empty() {
        return (scores[0].clamp(1e-6, 1.0 - 1e-6), 0.0);
    }
    let mut best = interior[0];
    for &cand in &interior[1..] {
        let (jb, jc) = (best.2 - best.1, cand.2 - cand.1);
        let eps = 1e-15;
        if jc > jb + eps
            || ((jc - jb).abs() <= eps
                && (cand.4 < best.4 || (cand.4 == best.4 && cand.0 > best.0)))
        {
            best = cand;
        }
    }
    (best.0.clamp(1e-6, 1.0 - 1e-6), best.2 - best.1)
}

/// SSIM by direct 2-D windowed sums (no separable filtering).
pub fn naive_ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let win = 11.min(w).min(h);
    let win = if win % 2 == 0 { win - 1 } else { win };
    let sigma = 1.5;
    let c = (win as f64 - 1.0) / 2.0;
    let mut g = vec![0.0; win * win];
    for y in 0..win {
        for x in 0..win {
            g[y * win + x] =
                (-((x as f64 - c).powi(2) + (y as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - win {
        for ox in 0..=w - win {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..win {
                for x in 0..win {
                    let k = g[y * win + x];
                    let (va, vb) = (a[(oy + y) * w + ox + x], b[(oy + y) * w + ox + x]);
                    mx += k * va;
                    my += k * vb;
                    sxx += k * va * va;
                    syy += k * vb * vb;
                    sxy += k * va * vb;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Labels alternate; the `flipped` samples with the largest OOD score carry
/// task scores anti-correlated with their labels. OOD scores grow with the
/// index (larger = more outlying).
pub fn flipped_label_instance(n: usize, flipped: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let ood: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let task = (0..n)
        .map(|i| {
            let good = if labels[i] { 0.9 } else { 0.1 };
            let jitter = 0.001 * (i % 7) as f64;
            if i >= n - flipped {
                1.0 - good + jitter
            } else {
                good + jitter
            }
        })
        .collect();
    (ood, task, labels)
}

/// conv -> relu -> conv -> gap -> dense logits, random sizes.
pub fn random_cam_model(rng: &mut rand_chacha::ChaCha8Rng) -> (Model, Tensor) {
    let (s, f, k) = (
        rng.random_range(4..10),
        rng.random_range(1..5),
        rng.random_range(1..5),
    );
    let spec = GraphSpec {
        inputs: vec![InputSpec {
            name: "image".into(),
            shape: vec![1, s, s],
        }],
        layers: vec![
            LayerSpec::new(
                "c1",
                LayerKind::Conv2d {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: true,
                },
                &["image"],
            ),
            LayerSpec::new("r1", LayerKind::Relu, &["c1"]),
            LayerSpec::new(
                "features",
                LayerKind::Conv2d {
                    in_channels: 3,
                    out_channels: f,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    bias: true,
                },
                &["r1"],
            ),
            LayerSpec::new("gap", LayerKind::GlobalAvgPool, &["features"]),
            LayerSpec::new(
                "logits",
                LayerKind::Dense {
                    in_features: f,
                    out_features: k,
                    out_shape: None,
                },
                &["gap"],
            ),
            LayerSpec::new("probs", LayerKind::Sigmoid, &["logits"]),
        ],
        outputs: vec!["probs".into()],
        logits: Some("logits".into()),
    };
    let w = random_weights(&spec, rng);
    let x = Tensor::new(
        vec![1, s, s],
        (0..s * s).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    (Model::new(&spec, w).unwrap(), x)
}
