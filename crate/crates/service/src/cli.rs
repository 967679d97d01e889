//! Command-line interface. Exit status is 0 on success, 2 for invalid input
//! and 1 for runtime failures.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use xray_core::bundle::{Fixture, ModelBundle, VERIFY_TOLERANCE};
use xray_core::classifier::Classifier;
use xray_core::eval::{
    auc_of, augmentation_matrix, bootstrap_auc, retention_curve, separation_auc, AucEstimate,
    BootstrapConfig, LabeledSet, MultiLabelScorer, RetentionPoint,
};
use xray_core::explain::Method;
use xray_core::models::{
    augment, gen_dataset, gen_ood, latent_mean, train_adversarial, train_autoencoder,
    train_classifier, write_history_jsonl, AdamConfig, AdversarialTraining, AugmentationPolicy,
    AutoencoderConfig, AutoencoderTraining, ClassifierConfig, ClassifierTraining, DatasetConfig,
    DatasetManifest, EpochRecord, OodFamily,
};
use xray_core::ood::{calibrate_threshold, LatentReference, OodGate, OodMetricKind};
use xray_core::preprocess::{scale_and_crop, to_grayscale, Image, PreprocessSpec};

use crate::service::{Service, ServiceError, DEFAULT_MAX_UPLOAD, MIB};

type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Parser)]
#[command(
    name = "xray",
    version,
    about = "Local chest X-ray second-opinion toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset manifest.
    GenData(GenDataArgs),
    /// Train the multi-label classifier and write a bundle.
    TrainClf(TrainClfArgs),
    /// Train an L2 autoencoder gate and attach it to a bundle.
    TrainAe(TrainGateArgs),
    /// Train an adversarially learned autoencoder gate and attach it to a bundle.
    TrainAli(TrainGateArgs),
    /// Bootstrap per-class AUC on a dataset split.
    Eval(EvalArgs),
    /// Separation AUC of every gate metric against synthetic outliers.
    OodEval(OodEvalArgs),
    /// Task AUC on the images retained at tightening gate cutoffs.
    Retention(RetentionArgs),
    /// Train one classifier per augmentation level and cross-evaluate.
    AugMatrix(AugMatrixArgs),
    /// Gate and classify one image.
    Predict(PredictArgs),
    /// Saliency or CAM for one image.
    Explain(ExplainArgs),
    /// Check a bundle against its fixtures or an exported fixture directory.
    Verify(VerifyArgs),
    /// Run the local HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BundleArg {
    #[arg(long, env = "XRAY_BUNDLE")]
    pub bundle: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub prevalence: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainClfArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub input_size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 0 (none) to 3 (45 degrees, 15% shift, 15% scale).
    #[arg(long, default_value_t = 0)]
    pub augment_level: usize,
    /// Write per-epoch history as JSON lines.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    LatentL2,
    ReconL1,
    ReconL2,
    Ssim,
}

impl From<Metric> for OodMetricKind {
    fn from(m: Metric) -> Self {
        match m {
            Metric::LatentL2 => OodMetricKind::LatentL2,
            Metric::ReconL1 => OodMetricKind::ReconL1,
            Metric::ReconL2 => OodMetricKind::ReconL2,
            Metric::Ssim => OodMetricKind::Ssim,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainGateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub input_size: usize,
    #[arg(long, default_value_t = 128)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Defaults to 2e-3 for the autoencoder and 2e-4 for the adversarial model.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gate metric; recon-l2 for the autoencoder and ssim for the adversarial model when omitted.
    #[arg(long, value_enum)]
    pub metric: Option<Metric>,
    /// Percentile of validation scores admitted by the threshold.
    #[arg(long, default_value_t = 95.0)]
    pub percentile: f64,
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub stratify: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OodEvalArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Outliers generated per family.
    #[arg(long, default_value_t = 50)]
    pub n_ood: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetentionArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[arg(long, default_value_t = 10)]
    pub cutoffs: usize,
    /// Defaults to the bundle's gate metric.
    #[arg(long, value_enum)]
    pub metric: Option<Metric>,
    /// Random augmentation applied to the evaluated images.
    #[arg(long, default_value_t = 0)]
    pub augment_level: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugMatrixArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    pub levels: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub input_size: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub image: PathBuf,
    /// Classify even when the gate would reject.
    #[arg(long)]
    pub no_gate: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MapFormat {
    /// Red heat layer with alpha.
    Png,
    /// Heat layer blended over the input.
    Composite,
    Json,
    /// float32 little-endian values plus a JSON sidecar.
    Raw,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub image: PathBuf,
    /// Class name, index, or `all`.
    #[arg(long, default_value = "all")]
    pub class: String,
    #[arg(long, default_value = "saliency")]
    pub method: String,
    #[arg(long, value_enum, default_value_t = MapFormat::Png)]
    pub format: MapFormat,
    #[arg(long)]
    pub no_gate: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    /// Directory of fixture PNGs with a reference.json.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Write the bundle's fixtures and reference predictions here instead.
    #[arg(long, conflicts_with = "images")]
    pub export: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long, default_value = "127.0.0.1:8000")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD / MIB)]
    pub max_upload_mib: usize,
    /// Serve predictions for every image, in-distribution or not.
    #[arg(long)]
    pub no_gate: bool,
}

pub fn exit_code(e: &ServiceError) -> ExitCode {
    ExitCode::from(if e.is_validation() { 2 } else { 1 })
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainClf(a) => train_clf(a),
        Command::TrainAe(a) => train_gate(a, false),
        Command::TrainAli(a) => train_gate(a, true),
        Command::Eval(a) => eval(a),
        Command::OodEval(a) => ood_eval(a),
        Command::Retention(a) => retention(a),
        Command::AugMatrix(a) => aug_matrix(a),
        Command::Predict(a) => predict(a),
        Command::Explain(a) => explain(a),
        Command::Verify(a) => verify(a),
        Command::Serve(a) => serve(a),
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn write_history(history: &[EpochRecord], path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        write_history_jsonl(history, std::fs::File::create(path)?)?;
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_slice(&std::fs::read(path)?)?;
    m.validate()?;
    Ok(m)
}

fn check_classes(clf: &Classifier, m: &DatasetManifest) -> Result<()> {
    if clf.class_names().len() != m.class_names.len() {
        return Err(xray_core::Error::InvalidConfig(format!(
            "bundle has {} classes but the dataset has {}",
            clf.class_names().len(),
            m.class_names.len()
        ))
        .into());
    }
    Ok(())
}

fn split_indices(m: &DatasetManifest, split: SplitName) -> &[usize] {
    match split {
        SplitName::Train => &m.split.train,
        SplitName::Val => &m.split.val,
        SplitName::Test => &m.split.test,
    }
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let cfg = DatasetConfig {
        n_samples: a.n,
        num_classes: a.classes,
        image_size: a.size,
        prevalence: a.prevalence,
        seed: a.seed,
    };
    write_json(&gen_dataset(&cfg)?, Some(&a.out))?;
    Ok(ExitCode::SUCCESS)
}

/// First three test samples, used as the bundle's self-check fixtures.
fn fixtures_from(m: &DatasetManifest) -> Vec<Fixture> {
    m.split
        .test
        .iter()
        .chain(&m.split.val)
        .take(3)
        .map(|&i| Fixture {
            seed: m.samples[i].seed,
            labels: m.samples[i].labels.clone(),
        })
        .collect()
}

fn classifier_training(
    input_size: usize,
    num_classes: usize,
    epochs: usize,
    seed: u64,
    augmentation: AugmentationPolicy,
) -> ClassifierTraining {
    ClassifierTraining {
        model: ClassifierConfig {
            input_size,
            num_classes,
            ..ClassifierConfig::default()
        },
        epochs,
        seed,
        augmentation,
        ..ClassifierTraining::default()
    }
}

fn train_clf(a: TrainClfArgs) -> Result<ExitCode> {
    let m = load_dataset(&a.dataset)?;
    let mut cfg = classifier_training(
        a.input_size,
        m.class_names.len(),
        a.epochs,
        a.seed,
        AugmentationPolicy::level(a.augment_level)?,
    );
    cfg.batch_size = a.batch_size;
    cfg.adam = AdamConfig {
        lr: a.lr,
        beta2: a.beta2,
        ..AdamConfig::default()
    };
    let trained = train_classifier(
        &m.images(&m.split.train),
        &m.labels(&m.split.train),
        &m.images(&m.split.val),
        &m.labels(&m.split.val),
        &cfg,
    )?;
    write_history(&trained.history, a.history.as_deref())?;
    let clf = Classifier::new(
        trained.model,
        trained.preprocess,
        m.class_names.clone(),
        trained.operating_points,
    )?;
    let mut bundle = ModelBundle::new(&clf);
    bundle.attach_verification(fixtures_from(&m), m.image_size)?;
    bundle.save(&a.out)?;
    if let Some(last) = trained.history.last() {
        eprintln!(
            "trained {} epochs, loss {:.4}, val metric {:?}",
            trained.history.len(),
            last.loss,
            last.val_metric
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn gate_inputs(images: &[Image], spec: &PreprocessSpec) -> Vec<Image> {
    images
        .iter()
        .map(|img| scale_and_crop(&to_grayscale(img), spec))
        .collect()
}

fn train_gate(a: TrainGateArgs, adversarial: bool) -> Result<ExitCode> {
    let m = load_dataset(&a.dataset)?;
    let bundle = ModelBundle::load(&a.bundle.bundle)?;
    let spec = PreprocessSpec::new(a.input_size, 0.0, 1.0)?;
    let model = AutoencoderConfig {
        input_size: a.input_size,
        latent_dim: a.latent_dim,
        ..AutoencoderConfig::default()
    };
    let train = gate_inputs(&m.images(&m.split.train), &spec);
    let val = gate_inputs(&m.images(&m.split.val), &spec);
    let (encoder, decoder, history, reference) = if adversarial {
        let defaults = AdversarialTraining::default();
        let cfg = AdversarialTraining {
            model,
            epochs: a.epochs,
            batch_size: a.batch_size,
            seed: a.seed,
            adam: AdamConfig {
                lr: a.lr.unwrap_or(defaults.adam.lr),
                beta2: a.beta2,
                ..defaults.adam
            },
            ..defaults
        };
        let t = train_adversarial(&train, &cfg)?;
        (t.encoder, t.decoder, t.history, LatentReference::Prior)
    } else {
        let defaults = AutoencoderTraining::default();
        let cfg = AutoencoderTraining {
            model,
            epochs: a.epochs,
            batch_size: a.batch_size,
            seed: a.seed,
            adam: AdamConfig {
                lr: a.lr.unwrap_or(defaults.adam.lr),
                beta2: a.beta2,
                ..defaults.adam
            },
        };
        let t = train_autoencoder(&train, &val, &cfg)?;
        let mean = latent_mean(&t.encoder, &train)?;
        (
            t.encoder,
            t.decoder,
            t.history,
            LatentReference::Empirical(mean),
        )
    };
    write_history(&history, a.history.as_deref())?;
    let default_metric = if adversarial {
        Metric::Ssim
    } else {
        Metric::ReconL2
    };
    let metric: OodMetricKind = a.metric.unwrap_or(default_metric).into();
    let gate = OodGate {
        encoder,
        decoder,
        preprocess: spec,
        metric,
        threshold: 0.0,
        reference,
    };
    // calibrate on the f32 weights actually stored
    let mut out = bundle.with_ood(&gate);
    let stored = require_gate(&out)?;
    let scores: Vec<f64> = gate_scores(&stored, &val)?
        .iter()
        .map(|s| s.get(metric))
        .collect();
    let threshold = calibrate_threshold(&scores, metric, a.percentile)?;
    if let Some(ood) = out.ood.as_mut() {
        ood.threshold = threshold;
    }
    out.save(&a.out)?;
    eprintln!("gate metric {} threshold {threshold:.6}", metric.as_str());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct ClassEval {
    name: String,
    positives: usize,
    auc: Option<f64>,
    bootstrap: Option<AucEstimate>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    split: String,
    samples: usize,
    n_splits: usize,
    split_fraction: f64,
    classes: Vec<ClassEval>,
    mean_auc: Option<f64>,
}

fn class_probabilities(clf: &Classifier, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    Ok(images
        .iter()
        .map(|img| clf.probabilities(img))
        .collect::<xray_core::Result<_>>()?)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let bundle = ModelBundle::load(&a.bundle.bundle)?;
    let clf = bundle.classifier()?;
    let m = load_dataset(&a.dataset)?;
    check_classes(&clf, &m)?;
    let idx = split_indices(&m, a.split);
    let probs = class_probabilities(&clf, &m.images(idx))?;
    let labels = m.labels(idx);
    let cfg = BootstrapConfig {
        n_splits: a.splits,
        split_fraction: a.fraction,
        seed: a.seed,
        stratify: a.stratify,
    };
    let mut classes = Vec::new();
    for (c, name) in clf.class_names().iter().enumerate() {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let l: Vec<bool> = labels.iter().map(|l| l[c]).collect();
        let (auc, bootstrap) = match auc_of(&s, &l) {
            Ok(v) => (Some(v), Some(bootstrap_auc(&s, &l, &cfg)?)),
            Err(xray_core::Error::DegenerateLabels) => (None, None),
            Err(e) => return Err(e.into()),
        };
        classes.push(ClassEval {
            name: name.clone(),
            positives: l.iter().filter(|&&x| x).count(),
            auc,
            bootstrap,
        });
    }
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.auc).collect();
    let report = EvalReport {
        split: format!("{:?}", a.split).to_lowercase(),
        samples: idx.len(),
        n_splits: a.splits,
        split_fraction: a.fraction,
        mean_auc: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        classes,
    };
    write_json(&report, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn require_gate(bundle: &ModelBundle) -> Result<OodGate> {
    bundle.gate()?.ok_or(ServiceError::NoGate)
}

fn gate_scores(gate: &OodGate, images: &[Image]) -> Result<Vec<xray_core::ood::OodScores>> {
    images
        .iter()
        .map(|img| Ok(gate.evaluate(img)?.0.scores))
        .collect()
}

#[derive(Debug, Serialize)]
struct FamilyReport {
    separation_auc: BTreeMap<&'static str, f64>,
    rejected_fraction: f64,
}

#[derive(Debug, Serialize)]
struct OodEvalReport {
    gate_metric: OodMetricKind,
    threshold: f64,
    in_distribution: usize,
    in_distribution_admitted_fraction: f64,
    outliers_per_family: usize,
    families: BTreeMap<&'static str, FamilyReport>,
}

fn ood_eval(a: OodEvalArgs) -> Result<ExitCode> {
    let bundle = ModelBundle::load(&a.bundle.bundle)?;
    let gate = require_gate(&bundle)?;
    let m = load_dataset(&a.dataset)?;
    let ins = gate_scores(&gate, &m.images(&m.split.test))?;
    let admitted = |scores: &[xray_core::ood::OodScores]| {
        let n = scores
            .iter()
            .filter(|s| {
                xray_core::ood::decide(s.get(gate.metric), gate.threshold, gate.metric).admitted
            })
            .count();
        n as f64 / scores.len().max(1) as f64
    };
    let mut families = BTreeMap::new();
    for family in [
        OodFamily::Noise,
        OodFamily::Stripes,
        OodFamily::Inverted,
        OodFamily::Blank,
    ] {
        let images: Vec<Image> = (0..a.n_ood as u64)
            .map(|i| {
                gen_ood(
                    a.seed.wrapping_mul(1_000_003).wrapping_add(i),
                    family,
                    m.image_size,
                )
            })
            .collect();
        let outs = gate_scores(&gate, &images)?;
        let mut separation = BTreeMap::new();
        for kind in OodMetricKind::ALL {
            let i: Vec<f64> = ins.iter().map(|s| s.get(kind)).collect();
            let o: Vec<f64> = outs.iter().map(|s| s.get(kind)).collect();
            separation.insert(kind.as_str(), separation_auc(&i, &o, kind)?);
        }
        families.insert(
            family.as_str(),
            FamilyReport {
                separation_auc: separation,
                rejected_fraction: 1.0 - admitted(&outs),
            },
        );
    }
    let report = OodEvalReport {
        gate_metric: gate.metric,
        threshold: gate.threshold,
        in_distribution: ins.len(),
        in_distribution_admitted_fraction: admitted(&ins),
        outliers_per_family: a.n_ood,
        families,
    };
    write_json(&report, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct RetentionReport {
    metric: OodMetricKind,
    samples: usize,
    classes: BTreeMap<String, Vec<RetentionPoint>>,
}

fn retention(a: RetentionArgs) -> Result<ExitCode> {
    let bundle = ModelBundle::load(&a.bundle.bundle)?;
    let gate = require_gate(&bundle)?;
    let clf = bundle.classifier()?;
    let m = load_dataset(&a.dataset)?;
    check_classes(&clf, &m)?;
    let idx = split_indices(&m, a.split);
    let policy = AugmentationPolicy::level(a.augment_level)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let images: Vec<Image> = m
        .images(idx)
        .iter()
        .map(|img| augment(img, &policy, &mut rng))
        .collect();
    let labels = m.labels(idx);
    let metric: OodMetricKind = a.metric.map_or(gate.metric, Into::into);
    let ood: Vec<f64> = gate_scores(&gate, &images)?
        .iter()
        .map(|s| s.get(metric))
        .collect();
    let probs = class_probabilities(&clf, &images)?;
    let mut classes = BTreeMap::new();
    for (c, name) in clf.class_names().iter().enumerate() {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let l: Vec<bool> = labels.iter().map(|l| l[c]).collect();
        classes.insert(
            name.clone(),
            retention_curve(&ood, &s, &l, metric, a.cutoffs)?,
        );
    }
    write_json(
        &RetentionReport {
            metric,
            samples: images.len(),
            classes,
        },
        a.out.as_deref(),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn aug_matrix(a: AugMatrixArgs) -> Result<ExitCode> {
    let m = load_dataset(&a.dataset)?;
    if a.levels.is_empty() {
        return Err(ServiceError::BadRequest(
            "need at least one augmentation level".into(),
        ));
    }
    let policies = a
        .levels
        .iter()
        .map(|&l| AugmentationPolicy::level(l))
        .collect::<xray_core::Result<Vec<_>>>()?;
    let k = m.class_names.len();
    let (train_x, train_y) = (m.images(&m.split.train), m.labels(&m.split.train));
    let (val_x, val_y) = (m.images(&m.split.val), m.labels(&m.split.val));
    let mut models = Vec::new();
    for (&level, policy) in a.levels.iter().zip(&policies) {
        let cfg = classifier_training(a.input_size, k, a.epochs, a.seed, *policy);
        let t = train_classifier(&train_x, &train_y, &val_x, &val_y, &cfg)?;
        eprintln!("level {level}: trained");
        models.push((
            level.to_string(),
            Classifier::new(
                t.model,
                t.preprocess,
                m.class_names.clone(),
                t.operating_points,
            )?,
        ));
    }
    let test_x = m.images(&m.split.test);
    let test_sets: Vec<LabeledSet> = a
        .levels
        .iter()
        .zip(&policies)
        .map(|(&level, policy)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(a.seed ^ (level as u64 + 1).wrapping_mul(0x9e37_79b9));
            LabeledSet {
                level: level.to_string(),
                images: test_x
                    .iter()
                    .map(|img| augment(img, policy, &mut rng))
                    .collect(),
                labels: m.labels(&m.split.test),
            }
        })
        .collect();
    let scorers: Vec<(String, &dyn MultiLabelScorer)> = models
        .iter()
        .map(|(l, c)| (l.clone(), c as &dyn MultiLabelScorer))
        .collect();
    write_json(
        &augmentation_matrix(&scorers, &test_sets)?,
        a.out.as_deref(),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    let svc = Service::load(&a.bundle.bundle, !a.no_gate)?;
    let response = svc.predict(&std::fs::read(&a.image)?)?;
    write_json(&response, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn explain(a: ExplainArgs) -> Result<ExitCode> {
    let svc = Service::load(&a.bundle.bundle, !a.no_gate)?;
    let method: Method = a.method.parse()?;
    let class = svc.class_selector(&a.class)?;
    let ex = svc.explain(&std::fs::read(&a.image)?, class, method)?;
    match a.format {
        MapFormat::Png => std::fs::write(&a.out, ex.overlay.heat_png())?,
        MapFormat::Composite => std::fs::write(&a.out, ex.overlay.composite_png())?,
        MapFormat::Json => write_json(&ex.map, Some(&a.out))?,
        MapFormat::Raw => {
            std::fs::write(&a.out, ex.map.to_f32_le())?;
            let mut sidecar = a.out.clone().into_os_string();
            sidecar.push(".json");
            write_json(&ex.sidecar(), Some(Path::new(&sidecar)))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let bundle = ModelBundle::load(&a.bundle.bundle)?;
    if let Some(dir) = &a.export {
        bundle.export_fixtures(dir)?;
        return Ok(ExitCode::SUCCESS);
    }
    let report = match &a.images {
        Some(dir) => bundle.verify_fixture_dir(dir)?,
        None => bundle.verify()?.ok_or_else(|| {
            ServiceError::BadRequest("bundle carries no fixtures; pass --images".into())
        })?,
    };
    write_json(&report, None)?;
    if report.within(VERIFY_TOLERANCE) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "max difference {:e} exceeds {VERIFY_TOLERANCE:e}",
            report.max_abs_diff
        );
        Ok(ExitCode::from(1))
    }
}

fn serve(a: ServeArgs) -> Result<ExitCode> {
    if a.max_upload_mib < 1 {
        return Err(ServiceError::BadRequest(
            "--max-upload-mib must be at least 1".into(),
        ));
    }
    let svc = Arc::new(Service::load(&a.bundle.bundle, !a.no_gate)?);
    let app = crate::api::router(svc.clone(), a.max_upload_mib * MIB);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.bind).await?;
        eprintln!(
            "serving {} classes on http://{} (gate {})",
            svc.classifier().class_names().len(),
            listener.local_addr()?,
            if svc.gate_active() { "on" } else { "off" }
        );
        axum::serve(listener, app).await
    })?;
    Ok(ExitCode::SUCCESS)
}
