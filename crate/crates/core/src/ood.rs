//! Out-of-distribution gate: autoencoder reconstruction, latent distance,
//! L1/L2/SSIM reconstruction scores, threshold calibration and the
//! admit/reject decision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{self, Image, PreprocessSpec};
use crate::stats;
use crate::tensor::{Model, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMetricKind {
    LatentL2,
    ReconL1,
    ReconL2,
    Ssim,
}

impl OodMetricKind {
    pub const ALL: [OodMetricKind; 4] = [
        OodMetricKind::LatentL2,
        OodMetricKind::ReconL1,
        OodMetricKind::ReconL2,
        OodMetricKind::Ssim,
    ];

    /// SSIM is a similarity; every other kind is a distance.
    pub fn higher_is_in(self) -> bool {
        matches!(self, OodMetricKind::Ssim)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OodMetricKind::LatentL2 => "latent_l2",
            OodMetricKind::ReconL1 => "recon_l1",
            OodMetricKind::ReconL2 => "recon_l2",
            OodMetricKind::Ssim => "ssim",
        }
    }
}

impl std::str::FromStr for OodMetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown OOD metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodScores {
    pub latent_l2: f64,
    pub recon_l1: f64,
    pub recon_l2: f64,
    pub ssim: f64,
}

impl OodScores {
    pub fn get(&self, kind: OodMetricKind) -> f64 {
        match kind {
            OodMetricKind::LatentL2 => self.latent_l2,
            OodMetricKind::ReconL1 => self.recon_l1,
            OodMetricKind::ReconL2 => self.recon_l2,
            OodMetricKind::Ssim => self.ssim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub reconstruction: Image,
    /// `|x - x_hat|` per pixel, row-major, same shape as the input.
    pub error_map: Vec<f64>,
    pub latent: Vec<f64>,
    pub scores: OodScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodVerdict {
    pub admitted: bool,
    pub metric: OodMetricKind,
    pub score: f64,
    pub threshold: f64,
}

/// Reference point for the latent-distance score.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "mean")]
pub enum LatentReference {
    /// Distance from the prior mean (the origin).
    #[default]
    Prior,
    /// Distance from an empirical training-set mean.
    Empirical(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering; the window shrinks (to an odd size)
/// for images smaller than it.
fn filter_valid(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| kernel[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| kernel[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Local SSIM and contrast-structure maps.
pub fn ssim_maps(a: &Image, b: &Image, params: &SsimParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != 1 || b.channels() != 1
    {
        return Err(Error::ShapeMismatch(format!(
            "ssim needs equal grayscale images, got {}x{}x{} and {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let (w, h) = (a.width(), a.height());
    let mut size = params.window.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let kernel = gaussian_kernel(size.max(1), params.sigma);
    let (x, y) = (a.data(), b.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let (mu_x, _, _) = filter_valid(x, w, h, &kernel);
    let (mu_y, _, _) = filter_valid(y, w, h, &kernel);
    let (e_xx, _, _) = filter_valid(&xx, w, h, &kernel);
    let (e_yy, _, _) = filter_valid(&yy, w, h, &kernel);
    let (e_xy, _, _) = filter_valid(&xy, w, h, &kernel);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut ssim = Vec::with_capacity(mu_x.len());
    let mut cs = Vec::with_capacity(mu_x.len());
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        let contrast = (2.0 * sxy + c2) / (sxx + syy + c2);
        let luminance = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        cs.push(contrast);
        ssim.push(luminance * contrast);
    }
    Ok((ssim, cs))
}

/// Mean local SSIM (Gaussian window, valid region).
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    let (map, _) = ssim_maps(a, b, params)?;
    Ok(stats::mean(&map))
}

/// Mean contrast-structure term, the shift-invariant part of SSIM.
pub fn contrast_structure(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    let (_, cs) = ssim_maps(a, b, params)?;
    Ok(stats::mean(&cs))
}

pub fn latent_distance(latent: &[f64], reference: &LatentReference) -> f64 {
    match reference {
        LatentReference::Prior => latent.iter().map(|v| v * v).sum::<f64>().sqrt(),
        LatentReference::Empirical(mean) => latent
            .iter()
            .zip(mean)
            .map(|(v, m)| (v - m) * (v - m))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Scores for a given input, reconstruction and latent code. L1/L2 are
/// per-pixel means.
pub fn reconstruction_scores(
    input: &Image,
    reconstruction: &Image,
    latent: &[f64],
    reference: &LatentReference,
) -> Result<(Vec<f64>, OodScores)> {
    let ssim_value = ssim(input, reconstruction, &SsimParams::default())?;
    let error_map: Vec<f64> = input
        .data()
        .iter()
        .zip(reconstruction.data())
        .map(|(x, y)| (x - y).abs())
        .collect();
    let n = error_map.len() as f64;
    let scores = OodScores {
        latent_l2: latent_distance(latent, reference),
        recon_l1: error_map.iter().sum::<f64>() / n,
        recon_l2: error_map.iter().map(|e| e * e).sum::<f64>() / n,
        ssim: ssim_value,
    };
    Ok((error_map, scores))
}

pub fn encode(encoder: &Model, input: &Image) -> Result<Vec<f64>> {
    Ok(encoder.predict(&input.to_tensor())?.into_data())
}

pub fn score_latent_distance(
    encoder: &Model,
    input: &Image,
    reference: &LatentReference,
) -> Result<f64> {
    Ok(latent_distance(&encode(encoder, input)?, reference))
}

/// Runs the autoencoder on an image already at its input size.
pub fn reconstruct(
    encoder: &Model,
    decoder: &Model,
    input: &Image,
    reference: &LatentReference,
) -> Result<ReconstructionResult> {
    let expected = encoder.graph().input_shape();
    if expected != [1, input.height(), input.width()] {
        return Err(Error::ShapeMismatch(format!(
            "autoencoder expects {expected:?}, image is {}x{}",
            input.width(),
            input.height()
        )));
    }
    let latent = encode(encoder, input)?;
    let decoded = decoder.predict(&Tensor::new(
        decoder.graph().input_shape().to_vec(),
        latent.clone(),
    )?)?;
    if decoded.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "decoder output {:?} does not match encoder input {expected:?}",
            decoded.shape()
        )));
    }
    let reconstruction = Image::gray_clamped(input.width(), input.height(), decoded.into_data())?;
    let (error_map, scores) = reconstruction_scores(input, &reconstruction, &latent, reference)?;
    Ok(ReconstructionResult {
        reconstruction,
        error_map,
        latent,
        scores,
    })
}

/// Percentile (0-100] of in-distribution scores, taken on the admitting side:
/// the upper percentile for distances, the lower one for SSIM.
pub fn calibrate_threshold(scores: &[f64], kind: OodMetricKind, percentile: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidConfig(format!(
            "percentile {percentile} outside (0, 100]"
        )));
    }
    let level = if kind.higher_is_in() {
        (100.0 - percentile) / 100.0
    } else {
        percentile / 100.0
    };
    Ok(stats::quantile(scores, level))
}

/// Admits when the score lies on the in-distribution side of the threshold;
/// a tie admits.
pub fn decide(score: f64, threshold: f64, kind: OodMetricKind) -> OodVerdict {
    let admitted = if kind.higher_is_in() {
        score >= threshold
    } else {
        score <= threshold
    };
    OodVerdict {
        admitted,
        metric: kind,
        score,
        threshold,
    }
}

/// A ready-to-use gate: autoencoder, its input geometry, the metric and the
/// calibrated threshold.
#[derive(Debug, Clone)]
pub struct OodGate {
    pub encoder: Model,
    pub decoder: Model,
    pub preprocess: PreprocessSpec,
    pub metric: OodMetricKind,
    pub threshold: f64,
    pub reference: LatentReference,
}

impl OodGate {
    /// Resizes to the autoencoder input (intensities kept in `[0, 1]`).
    pub fn prepare(&self, image: &Image) -> Image {
        let gray = preprocess::to_grayscale(image);
        preprocess::scale_and_crop(&gray, &self.preprocess)
    }

    pub fn evaluate(&self, image: &Image) -> Result<(ReconstructionResult, OodVerdict)> {
        let input = self.prepare(image);
        let result = reconstruct(&self.encoder, &self.decoder, &input, &self.reference)?;
        let verdict = decide(result.scores.get(self.metric), self.threshold, self.metric);
        Ok((result, verdict))
    }
}
