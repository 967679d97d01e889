//! Minibatch trainers: multi-label classifier (binary cross-entropy),
//! autoencoder (pixel L2) and adversarially learned inference.
//!
//! Per-sample gradients are computed in parallel and summed in sample order,
//! so a run is reproducible from its seed regardless of thread count.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::{
    build_classifier, build_decoder, build_discriminator, build_encoder, init_weights,
    trainable_mask, AutoencoderConfig, ClassifierConfig, DiscriminatorConfig,
};
use super::augment::{augment, AugmentationPolicy};
use super::optim::{Adam, AdamConfig, PlateauScheduler};
use crate::error::{Error, Result};
use crate::eval::{auc_of, optimal_operating_point, roc_curve};
use crate::preprocess::{self, Image, PreprocessSpec};
use crate::stats;
use crate::tensor::{Activations, LayerKind, Model, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped_generator_steps: Option<usize>,
}

impl EpochRecord {
    fn new(epoch: usize, loss: f64, val_metric: Option<f64>, lr: f64) -> Self {
        Self {
            epoch,
            loss,
            val_metric,
            lr,
            d_loss: None,
            d_accuracy: None,
            skipped_generator_steps: None,
        }
    }
}

pub fn write_history_jsonl<W: Write>(history: &[EpochRecord], mut out: W) -> Result<()> {
    for rec in history {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - target * z + (-z.abs()).exp().ln_1p()
}

fn check_loss(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

/// Sums per-item gradients and losses in item order.
fn reduce<T>(
    parts: Vec<Result<(Vec<f64>, f64, T)>>,
    n_params: usize,
) -> Result<(Vec<f64>, f64, Vec<T>)> {
    let mut grads = vec![0.0; n_params];
    let mut loss = 0.0;
    let mut extras = Vec::with_capacity(parts.len());
    for part in parts {
        let (g, l, extra) = part?;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
        loss += l;
        extras.push(extra);
    }
    Ok((grads, loss, extras))
}

fn scale(grads: &mut [f64], by: f64) {
    for g in grads {
        *g *= by;
    }
}

/// Per-channel (sum, sum of squares, count) of every batch-norm input.
type Moments = Vec<Vec<(f64, f64, usize)>>;

fn bn_moments(model: &Model, acts: &Activations) -> Moments {
    let graph = model.graph();
    let mut out = Vec::new();
    for layer in &model.spec().layers {
        if let LayerKind::Batchnorm { channels, .. } = layer.kind {
            let src = graph.node_id(&layer.inputs[0]).expect("compiled wiring");
            let x = acts.by_id(src);
            let per = x.len() / channels;
            out.push(
                x.data()
                    .chunks(per)
                    .map(|ch| (ch.iter().sum(), ch.iter().map(|v| v * v).sum(), per))
                    .collect(),
            );
        }
    }
    out
}

fn apply_bn_moments(model: &mut Model, batch: &[Moments], momentum: f64) {
    let spec = model.spec().clone();
    let mut bn = 0;
    for (l, layer) in spec.layers.iter().enumerate() {
        let LayerKind::Batchnorm { channels, .. } = layer.kind else {
            continue;
        };
        let range = model.graph().param_range(l);
        let params = &mut model.weights_mut()[range];
        for c in 0..channels {
            let (mut s, mut ss, mut n) = (0.0, 0.0, 0);
            for m in batch {
                s += m[bn][c].0;
                ss += m[bn][c].1;
                n += m[bn][c].2;
            }
            let mean = s / n as f64;
            let var = (ss / n as f64 - mean * mean).max(0.0);
            let (rm, rv) = (2 * channels + c, 3 * channels + c);
            params[rm] = (1.0 - momentum) * params[rm] + momentum * mean;
            params[rv] = (1.0 - momentum) * params[rv] + momentum * var;
        }
        bn += 1;
    }
}

fn bn_layer_count(model: &Model) -> usize {
    model
        .spec()
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Batchnorm { .. }))
        .count()
}

/// Sets running statistics from the data, one pass per batch-norm layer so
/// that later layers see already-normalized inputs.
fn init_bn_stats(model: &mut Model, inputs: &[Tensor]) -> Result<()> {
    for _ in 0..bn_layer_count(model) {
        let moments = inputs
            .par_iter()
            .map(|x| Ok(bn_moments(model, &model.forward(&[x])?)))
            .collect::<Result<Vec<_>>>()?;
        apply_bn_moments(model, &moments, 1.0);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub model: ClassifierConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    pub bn_momentum: f64,
    pub lr_decay: f64,
    pub patience: usize,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            model: ClassifierConfig::default(),
            adam: AdamConfig::default(),
            epochs: 10,
            batch_size: 16,
            seed: 0,
            augmentation: AugmentationPolicy::NONE,
            bn_momentum: 0.1,
            lr_decay: 0.1,
            patience: 2,
        }
    }
}

impl ClassifierTraining {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        self.augmentation.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum)
            || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
        {
            return Err(Error::InvalidConfig(
                "bn_momentum and lr_decay must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: Model,
    pub preprocess: PreprocessSpec,
    /// Youden-optimal probability threshold per class on the validation set
    /// (0.5 where the validation labels are all one class).
    pub operating_points: Vec<f64>,
    pub history: Vec<EpochRecord>,
}

/// Mean and standard deviation of pixel intensities after resizing.
pub fn intensity_stats(images: &[Image], target_size: usize) -> Result<PreprocessSpec> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("no training images".into()));
    }
    let spec = PreprocessSpec::new(target_size, 0.0, 1.0)?;
    let pixels: Vec<f64> = images
        .iter()
        .flat_map(|img| {
            preprocess::scale_and_crop(&preprocess::to_grayscale(img), &spec).into_data()
        })
        .collect();
    let mean = stats::mean(&pixels);
    let std = stats::sample_std(&pixels);
    PreprocessSpec::new(target_size, mean, if std > 1e-6 { std } else { 1.0 })
}

fn check_labels(images: &[Image], labels: &[Vec<bool>], num_classes: usize) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images vs {} label rows",
            images.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|l| l.len() != num_classes) {
        return Err(Error::ShapeMismatch(format!(
            "label rows must have {num_classes} entries"
        )));
    }
    Ok(())
}

fn sigmoid_probs(model: &Model, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    inputs
        .par_iter()
        .map(|x| Ok(model.predict(x)?.into_data()))
        .collect()
}

/// Mean over classes of the validation AUC, or minus the mean BCE when no
/// class has both labels present.
fn validation_metric(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> f64 {
    let num_classes = labels[0].len();
    let aucs: Vec<f64> = (0..num_classes)
        .filter_map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let l: Vec<bool> = labels.iter().map(|l| l[c]).collect();
            auc_of(&s, &l).ok()
        })
        .collect();
    if !aucs.is_empty() {
        return stats::mean(&aucs);
    }
    let eps = 1e-12;
    let loss: f64 = probs
        .iter()
        .zip(labels)
        .flat_map(|(p, l)| p.iter().zip(l))
        .map(|(&p, &t)| {
            if t {
                -(p.max(eps)).ln()
            } else {
                -((1.0 - p).max(eps)).ln()
            }
        })
        .sum();
    -loss / (probs.len() * num_classes) as f64
}

pub fn operating_points(probs: &[Vec<f64>], labels: &[Vec<bool>], num_classes: usize) -> Vec<f64> {
    (0..num_classes)
        .map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let l: Vec<bool> = labels.iter().map(|l| l[c]).collect();
            roc_curve(&s, &l)
                .map(|curve| optimal_operating_point(&curve).opt)
                .unwrap_or(0.5)
        })
        .collect()
}

pub fn train_classifier(
    train_images: &[Image],
    train_labels: &[Vec<bool>],
    val_images: &[Image],
    val_labels: &[Vec<bool>],
    cfg: &ClassifierTraining,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    let k = cfg.model.num_classes;
    check_labels(train_images, train_labels, k)?;
    check_labels(val_images, val_labels, k)?;
    let spec = build_classifier(&cfg.model)?;
    let mut model = Model::new(&spec, init_weights(&spec, cfg.seed))?;
    let prep = intensity_stats(train_images, cfg.model.input_size)?;
    let logits_id = model.graph().logits_id();
    let mut adam = Adam::new(cfg.adam, trainable_mask(&spec));
    let mut scheduler = PlateauScheduler::new(cfg.lr_decay, cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11);

    let plain: Vec<Tensor> = train_images
        .iter()
        .map(|img| preprocess::preprocess(img, &prep))
        .collect::<Result<_>>()?;
    let warmup: Vec<Tensor> = plain.iter().take(cfg.batch_size.max(32)).cloned().collect();
    init_bn_stats(&mut model, &warmup)?;
    let val_inputs: Vec<Tensor> = val_images
        .iter()
        .map(|img| preprocess::preprocess(img, &prep))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..train_images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.random())).collect();
            let parts: Vec<_> = jobs
                .par_iter()
                .map(|&(i, aug_seed)| {
                    let x = if cfg.augmentation.is_identity() {
                        plain[i].clone()
                    } else {
                        let mut r = ChaCha8Rng::seed_from_u64(aug_seed);
                        preprocess::preprocess(
                            &augment(&train_images[i], &cfg.augmentation, &mut r),
                            &prep,
                        )?
                    };
                    let acts = model.forward(&[&x])?;
                    let z = acts.by_id(logits_id).data();
                    let mut loss = 0.0;
                    let mut seed = Vec::with_capacity(k);
                    for (&zc, &t) in z.iter().zip(&train_labels[i]) {
                        let t = f64::from(u8::from(t));
                        loss += bce_with_logit(zc, t) / k as f64;
                        seed.push((crate::tensor::sigmoid(zc) - t) / k as f64);
                    }
                    let g = model.backward(&acts, vec![(logits_id, Tensor::vector(seed))], true);
                    Ok((
                        g.params.expect("requested"),
                        loss,
                        bn_moments(&model, &acts),
                    ))
                })
                .collect();
            let (mut grads, loss, moments) = reduce(parts, model.weights().len())?;
            let n = batch.len() as f64;
            scale(&mut grads, 1.0 / n);
            check_loss(epoch, loss)?;
            epoch_loss += loss;
            adam.step(model.weights_mut(), &grads);
            apply_bn_moments(&mut model, &moments, cfg.bn_momentum);
        }
        let loss = epoch_loss / train_images.len() as f64;
        check_loss(epoch, loss)?;
        let val_metric = if val_inputs.is_empty() {
            None
        } else {
            Some(validation_metric(
                &sigmoid_probs(&model, &val_inputs)?,
                val_labels,
            ))
        };
        history.push(EpochRecord::new(epoch, loss, val_metric, adam.config.lr));
        adam.config.lr = scheduler.observe(val_metric.unwrap_or(-loss), adam.config.lr);
    }
    let operating_points = if val_inputs.is_empty() {
        vec![0.5; k]
    } else {
        operating_points(&sigmoid_probs(&model, &val_inputs)?, val_labels, k)
    };
    Ok(TrainedClassifier {
        model,
        preprocess: prep,
        operating_points,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTraining {
    pub model: AutoencoderConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        Self {
            model: AutoencoderConfig::default(),
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAutoencoder {
    pub encoder: Model,
    pub decoder: Model,
    pub history: Vec<EpochRecord>,
}

fn autoencoder_inputs(images: &[Image], size: usize) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|img| {
            if img.width() != size || img.height() != size || img.channels() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "autoencoder training images must be {size}x{size} grayscale"
                )));
            }
            Ok(img.to_tensor())
        })
        .collect()
}

fn new_autoencoder(cfg: &AutoencoderConfig, seed: u64) -> Result<(Model, Model)> {
    let enc = build_encoder(cfg)?;
    let dec = build_decoder(cfg)?;
    Ok((
        Model::new(&enc, init_weights(&enc, seed))?,
        Model::new(&dec, init_weights(&dec, seed ^ 0xdec))?,
    ))
}

/// Mean squared reconstruction error per pixel.
pub fn reconstruction_mse(encoder: &Model, decoder: &Model, inputs: &[Tensor]) -> Result<f64> {
    let errs = inputs
        .par_iter()
        .map(|x| {
            let r = decoder.predict(&encoder.predict(x)?)?;
            Ok(r.data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / x.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(stats::mean(&errs))
}

/// Trains encoder and decoder jointly on pixel L2. Images must already be at
/// the autoencoder input size with intensities in `[0, 1]`.
pub fn train_autoencoder(
    train: &[Image],
    val: &[Image],
    cfg: &AutoencoderTraining,
) -> Result<TrainedAutoencoder> {
    cfg.model.validate()?;
    cfg.adam.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || train.is_empty() {
        return Err(Error::InvalidConfig(
            "need epochs, batch_size and training images".into(),
        ));
    }
    let inputs = autoencoder_inputs(train, cfg.model.input_size)?;
    let val_inputs = autoencoder_inputs(val, cfg.model.input_size)?;
    let (mut encoder, mut decoder) = new_autoencoder(&cfg.model, cfg.seed)?;
    let n_enc = encoder.weights().len();
    let mut params: Vec<f64> = encoder
        .weights()
        .iter()
        .chain(decoder.weights())
        .copied()
        .collect();
    let mut adam = Adam::new(cfg.adam, vec![true; params.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xae);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (enc_out, dec_out) = (
        encoder.graph().primary_output(),
        decoder.graph().primary_output(),
    );
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let x = &inputs[i];
                    let ea = encoder.forward(&[x])?;
                    let latent = ea.by_id(enc_out);
                    let da = decoder.forward(&[latent])?;
                    let r = da.by_id(dec_out);
                    let npix = x.len() as f64;
                    let mut loss = 0.0;
                    let seed: Vec<f64> = r
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(a, b)| {
                            loss += (a - b) * (a - b) / npix;
                            2.0 * (a - b) / npix
                        })
                        .collect();
                    let seed = Tensor::new(r.shape().to_vec(), seed)?;
                    let mut gd = decoder.backward(&da, vec![(dec_out, seed)], true);
                    let gl = gd.inputs.swap_remove(0);
                    let ge = encoder.backward(&ea, vec![(enc_out, gl)], true);
                    let mut g = ge.params.expect("requested");
                    g.extend(gd.params.expect("requested"));
                    Ok((g, loss, ()))
                })
                .collect();
            let (mut grads, loss, _) = reduce(parts, params.len())?;
            scale(&mut grads, 1.0 / batch.len() as f64);
            check_loss(epoch, loss)?;
            epoch_loss += loss;
            adam.step(&mut params, &grads);
            encoder.weights_mut().copy_from_slice(&params[..n_enc]);
            decoder.weights_mut().copy_from_slice(&params[n_enc..]);
        }
        let loss = epoch_loss / inputs.len() as f64;
        check_loss(epoch, loss)?;
        let val_metric = if val_inputs.is_empty() {
            None
        } else {
            Some(-reconstruction_mse(&encoder, &decoder, &val_inputs)?)
        };
        history.push(EpochRecord::new(epoch, loss, val_metric, adam.config.lr));
    }
    Ok(TrainedAutoencoder {
        encoder,
        decoder,
        history,
    })
}

/// Uniform target ranges replacing hard 1/0 labels for the discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSmoothing {
    pub real: (f64, f64),
    pub fake: (f64, f64),
}

impl Default for LabelSmoothing {
    fn default() -> Self {
        Self {
            real: (0.7, 1.1),
            fake: (-0.1, 0.3),
        }
    }
}

impl LabelSmoothing {
    pub fn sample_real<R: Rng>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.real.0..=self.real.1)
    }

    pub fn sample_fake<R: Rng>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.fake.0..=self.fake.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialTraining {
    pub model: AutoencoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smoothing: LabelSmoothing,
    /// Skip the encoder/generator update while the discriminator's batch
    /// accuracy is below this.
    pub halt_below_accuracy: f64,
}

impl Default for AdversarialTraining {
    fn default() -> Self {
        Self {
            model: AutoencoderConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            adam: AdamConfig {
                lr: 2e-4,
                beta1: 0.5,
                ..AdamConfig::default()
            },
            epochs: 10,
            batch_size: 16,
            seed: 0,
            smoothing: LabelSmoothing::default(),
            halt_below_accuracy: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAdversarial {
    pub encoder: Model,
    pub decoder: Model,
    pub discriminator: Model,
    pub history: Vec<EpochRecord>,
}

/// The encoder/generator update is skipped while the discriminator is losing.
pub fn generator_step_allowed(discriminator_accuracy: f64, halt_below: f64) -> bool {
    discriminator_accuracy >= halt_below
}

struct PairPass {
    enc: Activations,
    dec: Activations,
    real: Activations,
    fake: Activations,
}

/// Encoder/decoder/discriminator passes for one image and one prior draw.
fn pair_pass(e: &Model, g: &Model, d: &Model, x: &Tensor, z: &Tensor) -> Result<PairPass> {
    let enc = e.forward(&[x])?;
    let dec = g.forward(&[z])?;
    let z_hat = enc.by_id(e.graph().primary_output());
    let x_fake = dec.by_id(g.graph().primary_output());
    let real = d.forward(&[x, z_hat])?;
    let fake = d.forward(&[x_fake, z])?;
    Ok(PairPass {
        enc,
        dec,
        real,
        fake,
    })
}

/// Adversarially learned inference: the discriminator separates
/// (x, E(x)) from (G(z), z) with z drawn from the standard normal prior,
/// while encoder and generator are trained to fool it.
pub fn train_adversarial(train: &[Image], cfg: &AdversarialTraining) -> Result<TrainedAdversarial> {
    cfg.model.validate()?;
    cfg.adam.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || train.is_empty() {
        return Err(Error::InvalidConfig(
            "need epochs, batch_size and training images".into(),
        ));
    }
    let inputs = autoencoder_inputs(train, cfg.model.input_size)?;
    let (mut e, mut g) = new_autoencoder(&cfg.model, cfg.seed)?;
    let dspec = build_discriminator(&cfg.model, &cfg.discriminator)?;
    let mut d = Model::new(&dspec, init_weights(&dspec, cfg.seed ^ 0xd15c))?;
    let n_enc = e.weights().len();
    let mut eg: Vec<f64> = e.weights().iter().chain(g.weights()).copied().collect();
    let mut adam_eg = Adam::new(cfg.adam, vec![true; eg.len()]);
    let mut adam_d = Adam::new(cfg.adam, vec![true; d.weights().len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11);
    let latent_dim = cfg.model.latent_dim;
    let (e_out, g_out, d_logit) = (
        e.graph().primary_output(),
        g.graph().primary_output(),
        d.graph().logits_id(),
    );
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut d_total, mut g_total, mut correct, mut seen, mut skipped) =
            (0.0, 0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, Tensor, f64, f64)> = batch
                .iter()
                .map(|&i| {
                    let z: Vec<f64> = (0..latent_dim)
                        .map(|_| rng.sample(StandardNormal))
                        .collect();
                    (
                        i,
                        Tensor::vector(z),
                        cfg.smoothing.sample_real(&mut rng),
                        cfg.smoothing.sample_fake(&mut rng),
                    )
                })
                .collect();

            // Discriminator step.
            let parts: Vec<_> = jobs
                .par_iter()
                .map(|(i, z, t_real, t_fake)| {
                    let p = pair_pass(&e, &g, &d, &inputs[*i], z)?;
                    let (lr, lf) = (
                        p.real.by_id(d_logit).data()[0],
                        p.fake.by_id(d_logit).data()[0],
                    );
                    let loss = bce_with_logit(lr, *t_real) + bce_with_logit(lf, *t_fake);
                    let sig = crate::tensor::sigmoid;
                    let gr = d.backward(
                        &p.real,
                        vec![(d_logit, Tensor::vector(vec![sig(lr) - t_real]))],
                        true,
                    );
                    let gf = d.backward(
                        &p.fake,
                        vec![(d_logit, Tensor::vector(vec![sig(lf) - t_fake]))],
                        true,
                    );
                    let mut grads = gr.params.expect("requested");
                    for (a, b) in grads.iter_mut().zip(gf.params.expect("requested")) {
                        *a += b;
                    }
                    let right = usize::from(lr > 0.0) + usize::from(lf < 0.0);
                    Ok((grads, loss, right))
                })
                .collect();
            let (mut grads, d_loss, rights) = reduce(parts, d.weights().len())?;
            scale(&mut grads, 1.0 / batch.len() as f64);
            check_loss(epoch, d_loss)?;
            adam_d.step(d.weights_mut(), &grads);
            let batch_correct: usize = rights.iter().sum();
            let accuracy = batch_correct as f64 / (2 * batch.len()) as f64;
            d_total += d_loss;
            correct += batch_correct;
            seen += 2 * batch.len();

            if !generator_step_allowed(accuracy, cfg.halt_below_accuracy) {
                skipped += 1;
                continue;
            }
            // Encoder/generator step against the updated discriminator, with
            // flipped hard labels.
            let parts: Vec<_> = jobs
                .par_iter()
                .map(|(i, z, _, _)| {
                    let p = pair_pass(&e, &g, &d, &inputs[*i], z)?;
                    let (lr, lf) = (
                        p.real.by_id(d_logit).data()[0],
                        p.fake.by_id(d_logit).data()[0],
                    );
                    let loss = bce_with_logit(lr, 0.0) + bce_with_logit(lf, 1.0);
                    let sig = crate::tensor::sigmoid;
                    let gr = d.backward(
                        &p.real,
                        vec![(d_logit, Tensor::vector(vec![sig(lr)]))],
                        false,
                    );
                    let gf = d.backward(
                        &p.fake,
                        vec![(d_logit, Tensor::vector(vec![sig(lf) - 1.0]))],
                        false,
                    );
                    let grad_latent = gr.inputs[1].clone();
                    let grad_image = gf.inputs[0].clone();
                    let ge = e.backward(&p.enc, vec![(e_out, grad_latent)], true);
                    let gg = g.backward(&p.dec, vec![(g_out, grad_image)], true);
                    let mut grads = ge.params.expect("requested");
                    grads.extend(gg.params.expect("requested"));
                    Ok((grads, loss, ()))
                })
                .collect();
            let (mut grads, g_loss, _) = reduce(parts, eg.len())?;
            scale(&mut grads, 1.0 / batch.len() as f64);
            check_loss(epoch, g_loss)?;
            g_total += g_loss;
            adam_eg.step(&mut eg, &grads);
            e.weights_mut().copy_from_slice(&eg[..n_enc]);
            g.weights_mut().copy_from_slice(&eg[n_enc..]);
        }
        let n = inputs.len() as f64;
        let mut rec = EpochRecord::new(epoch, g_total / n, None, adam_eg.config.lr);
        rec.d_loss = Some(d_total / n);
        rec.d_accuracy = Some(correct as f64 / seen as f64);
        rec.skipped_generator_steps = Some(skipped);
        history.push(rec);
    }
    Ok(TrainedAdversarial {
        encoder: e,
        decoder: g,
        discriminator: d,
        history,
    })
}

/// Mean latent code of the encoder over `images` (the empirical reference).
pub fn latent_mean(encoder: &Model, images: &[Image]) -> Result<Vec<f64>> {
    let codes = images
        .par_iter()
        .map(|img| Ok(encoder.predict(&img.to_tensor())?.into_data()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let dim = codes.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for c in &codes {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v / codes.len() as f64;
        }
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::dataset::{gen_dataset, DatasetConfig};

    #[test]
    fn bce_matches_direct_formula() {
        for (z, t) in [(0.3, 1.0), (-2.0, 0.0), (1.5, 0.25), (10.0, 1.0)] {
            let p = 1.0 / (1.0 + f64::exp(-z));
            let direct: f64 = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!((bce_with_logit(z, t) - direct).abs() < 1e-9, "{z} {t}");
        }
    }

    #[test]
    fn smoothing_ranges() {
        let s = LabelSmoothing::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let r = s.sample_real(&mut rng);
            let f = s.sample_fake(&mut rng);
            assert!((0.7..=1.1).contains(&r) && (-0.1..=0.3).contains(&f));
        }
    }

    #[test]
    fn classifier_training_is_reproducible_and_learns() {
        let m = gen_dataset(&DatasetConfig {
            n_samples: 48,
            num_classes: 2,
            image_size: 16,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let tr = m.images(&m.split.train);
        let tl = m.labels(&m.split.train);
        let cfg = ClassifierTraining {
            model: ClassifierConfig {
                input_size: 16,
                num_classes: 2,
                block_layers: vec![1],
                ..Default::default()
            },
            epochs: 3,
            batch_size: 8,
            adam: AdamConfig {
                lr: 5e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = train_classifier(&tr, &tl, &[], &[], &cfg).unwrap();
        let b = train_classifier(&tr, &tl, &[], &[], &cfg).unwrap();
        assert_eq!(a.model.weights(), b.model.weights());
        assert!(a.history.last().unwrap().loss < a.history[0].loss);
        assert_eq!(a.operating_points, vec![0.5, 0.5]);
    }

    #[test]
    fn autoencoder_loss_decreases() {
        let imgs: Vec<Image> = (0..16)
            .map(|s| crate::models::synthetic::gen_phantom(s, &[false], 16).image)
            .collect();
        let cfg = AutoencoderTraining {
            model: AutoencoderConfig {
                input_size: 16,
                latent_dim: 64,
                channels: vec![4, 4],
            },
            epochs: 4,
            batch_size: 4,
            ..Default::default()
        };
        let t = train_autoencoder(&imgs, &imgs[..4], &cfg).unwrap();
        assert!(t.history.last().unwrap().loss < t.history[0].loss);
        assert!(t.history[0].val_metric.is_some());
    }

    #[test]
    fn halt_rule() {
        assert!(!generator_step_allowed(0.1, 0.3));
        assert!(generator_step_allowed(0.3, 0.3));
    }

    #[test]
    fn divergence_is_reported() {
        assert!(matches!(
            check_loss(3, f64::NAN),
            Err(Error::Divergence { epoch: 3, .. })
        ));
    }
}
