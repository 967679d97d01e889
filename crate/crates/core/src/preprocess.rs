//! Image ingestion: decoding, grayscale conversion, aspect-preserving
//! scale-and-crop, normalization, and cross-pipeline prediction comparison.

use std::io::Cursor;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major image with intensities in `[0, 1]`, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "empty image {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!(
                "{channels} channels; expected 1 or 3"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Grayscale image, clamping values into `[0, 1]`.
    pub fn gray_clamped(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(width, height, 1, data)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, 1, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Grayscale image as a `[1, H, W]` tensor of raw intensities.
    pub fn to_tensor(&self) -> Tensor {
        let gray = to_grayscale(self);
        Tensor::from_parts(vec![1, gray.height, gray.width], gray.data)
    }

    /// Encodes as an 8-bit PNG (gray or RGB).
    pub fn to_png(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let img = if self.channels == 1 {
            DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("sized buffer"))
        } else {
            DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized buffer"))
        };
        encode_png(&img)
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn encode_png(img: &DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_size: usize,
    pub mean: f64,
    pub std: f64,
    pub grayscale: bool,
}

impl PreprocessSpec {
    pub fn new(target_size: usize, mean: f64, std: f64) -> Result<Self> {
        let spec = Self {
            target_size,
            mean,
            std,
            grayscale: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size < 8 {
            return Err(Error::InvalidConfig(format!(
                "target_size {} < 8",
                self.target_size
            )));
        }
        if !(self.std > 0.0) || !self.mean.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "invalid mean/std {}/{}",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

/// Resampling kernel used by [`scale_and_crop_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let format = if bytes.starts_with(b"\x89PNG") {
        ImageFormat::Png
    } else if bytes.starts_with(b"P5") {
        ImageFormat::Pnm
    } else if bytes.len() < 8 {
        return Err(Error::MalformedImage(format!(
            "{} bytes is too short for an image",
            bytes.len()
        )));
    } else {
        return Err(Error::UnsupportedFormat(
            "expected PNG or binary PGM (P5)".into(),
        ));
    };
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::MalformedImage(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(_) => (3, img.to_rgb8().into_raw()),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "pixel layout {:?}; only 8-bit gray or RGB is accepted",
                other.color()
            )))
        }
    };
    Image::new(
        w,
        h,
        channels,
        raw.into_iter().map(|v| f64::from(v) / 255.0).collect(),
    )
}

/// BT.601 luminance; single-channel input is returned unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    Image {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

pub fn scale_and_crop(img: &Image, spec: &PreprocessSpec) -> Image {
    scale_and_crop_with(img, spec.target_size, Interpolation::Bilinear)
}

/// Scales the shorter side to `target`, then center-crops the longer side
/// (leading offset `floor(excess / 2)`). Sampling uses half-pixel centers.
pub fn scale_and_crop_with(img: &Image, target: usize, interp: Interpolation) -> Image {
    if img.width == target && img.height == target {
        return img.clone();
    }
    let short = img.width.min(img.height) as f64;
    let scale = target as f64 / short;
    let scaled_w = ((img.width as f64 * scale).round() as usize).max(target);
    let scaled_h = ((img.height as f64 * scale).round() as usize).max(target);
    let (off_x, off_y) = ((scaled_w - target) / 2, (scaled_h - target) / 2);
    let sx = img.width as f64 / scaled_w as f64;
    let sy = img.height as f64 / scaled_h as f64;
    let c = img.channels;
    let mut data = Vec::with_capacity(target * target * c);
    for oy in 0..target {
        let src_y = ((oy + off_y) as f64 + 0.5) * sy - 0.5;
        for ox in 0..target {
            let src_x = ((ox + off_x) as f64 + 0.5) * sx - 0.5;
            for ch in 0..c {
                data.push(match interp {
                    Interpolation::Bilinear => bilinear(img, src_x, src_y, ch),
                    Interpolation::Nearest => nearest(img, src_x, src_y, ch),
                });
            }
        }
    }
    Image {
        width: target,
        height: target,
        channels: c,
        data,
    }
}

fn bilinear(img: &Image, x: f64, y: f64, c: usize) -> f64 {
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let (x, y) = (clamp(x, img.width), clamp(y, img.height));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
    let bottom = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn nearest(img: &Image, x: f64, y: f64, c: usize) -> f64 {
    let xi = (x + 0.5).floor().clamp(0.0, (img.width - 1) as f64) as usize;
    let yi = (y + 0.5).floor().clamp(0.0, (img.height - 1) as f64) as usize;
    img.get(xi, yi, c)
}

/// `(intensity - mean) / std` as a `[1, S, S]` tensor.
pub fn normalize(img: &Image, spec: &PreprocessSpec) -> Result<Tensor> {
    if img.channels != 1 || img.width != spec.target_size || img.height != spec.target_size {
        return Err(Error::ShapeMismatch(format!(
            "normalize expects a {0}x{0} grayscale image, got {1}x{2}x{3}",
            spec.target_size, img.width, img.height, img.channels
        )));
    }
    let data = img
        .data
        .iter()
        .map(|v| (v - spec.mean) / spec.std)
        .collect();
    Ok(Tensor::from_parts(
        vec![1, spec.target_size, spec.target_size],
        data,
    ))
}

/// Full pipeline: grayscale, scale-and-crop, normalize.
pub fn preprocess(img: &Image, spec: &PreprocessSpec) -> Result<Tensor> {
    preprocess_with(img, spec, Interpolation::Bilinear)
}

pub fn preprocess_with(
    img: &Image,
    spec: &PreprocessSpec,
    interp: Interpolation,
) -> Result<Tensor> {
    let gray = if spec.grayscale || img.channels == 1 {
        to_grayscale(img)
    } else {
        img.clone()
    };
    let sized = scale_and_crop_with(&gray, spec.target_size, interp);
    normalize(&sized, spec)
}

pub const DIFF_HISTOGRAM_BUCKETS: usize = 25;
pub const DIFF_HISTOGRAM_RANGE: f64 = 0.25;

/// Summary of element-wise absolute prediction differences between two pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    /// Mean absolute difference for each class.
    pub per_class_differences: Vec<f64>,
    pub mean_abs_diff: f64,
    pub max_abs_diff: f64,
    /// Counts over `[0, 0.25]` in 25 equal buckets; larger values land in the last bucket.
    pub histogram: Vec<usize>,
    pub samples: usize,
    pub classes: usize,
}

impl DiffReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_abs_diff <= tolerance
    }
}

pub fn compare_pipelines(preds_a: &[Vec<f64>], preds_b: &[Vec<f64>]) -> Result<DiffReport> {
    if preds_a.len() != preds_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} samples",
            preds_a.len(),
            preds_b.len()
        )));
    }
    let classes = preds_a.first().map_or(0, Vec::len);
    let mut per_class = vec![0.0; classes];
    let mut histogram = vec![0; DIFF_HISTOGRAM_BUCKETS];
    let (mut total, mut max) = (0.0, 0.0f64);
    for (a, b) in preds_a.iter().zip(preds_b) {
        if a.len() != classes || b.len() != classes {
            return Err(Error::ShapeMismatch(format!(
                "class counts {} and {} (expected {classes})",
                a.len(),
                b.len()
            )));
        }
        for (c, (x, y)) in a.iter().zip(b).enumerate() {
            let d = (x - y).abs();
            per_class[c] += d;
            total += d;
            max = max.max(d);
            let width = DIFF_HISTOGRAM_RANGE / DIFF_HISTOGRAM_BUCKETS as f64;
            let bucket = ((d / width).floor() as usize).min(DIFF_HISTOGRAM_BUCKETS - 1);
            histogram[bucket] += 1;
        }
    }
    let n = preds_a.len();
    let count = (n * classes).max(1) as f64;
    for v in &mut per_class {
        *v /= n.max(1) as f64;
    }
    Ok(DiffReport {
        per_class_differences: per_class,
        mean_abs_diff: total / count,
        max_abs_diff: max,
        histogram,
        samples: n,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
        let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn decodes_pgm_by_dividing_by_255() {
        let img = decode_image(&pgm(2, 2, &[0, 255, 128, 64])).unwrap();
        let expected = [0.0, 1.0, 0.50196, 0.25098];
        for (v, e) in img.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-5, "{v} vs {e}");
        }
    }

    #[test]
    fn decodes_png_white_pixel() {
        let png = Image::filled(1, 1, 1.0).unwrap().to_png();
        let img = decode_image(&png).unwrap();
        assert_eq!(img.data(), &[1.0]);
    }

    #[test]
    fn truncated_png_is_malformed() {
        let png = Image::filled(4, 4, 0.5).unwrap().to_png();
        assert!(matches!(
            decode_image(&png[..20]),
            Err(Error::MalformedImage(_))
        ));
        assert!(matches!(
            decode_image(&png[..6]),
            Err(Error::MalformedImage(_))
        ));
        assert!(matches!(
            decode_image(b"GIF89a-not-supported"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn rgb_png_round_trips_and_converts_to_luminance() {
        let img = Image::new(1, 2, 3, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let decoded = decode_image(&img.to_png()).unwrap();
        assert_eq!(decoded.channels(), 3);
        let gray = to_grayscale(&decoded);
        assert!((gray.data()[0] - 0.299).abs() < 1e-12);
        assert!((gray.data()[1] - 1.0).abs() < 1e-12);
        let g1 = Image::filled(3, 2, 0.3).unwrap();
        assert_eq!(to_grayscale(&g1), g1);
    }

    #[test]
    fn scale_and_crop_geometry_100x80() {
        // Column index encoded in the intensity: after scaling by 0.8 and a
        // crop offset of 8, output column x samples source x' = (x + 8.5)/0.8 - 0.5.
        let (w, h) = (100, 80);
        let data: Vec<f64> = (0..h)
            .flat_map(|_| (0..w).map(|x| x as f64 / 99.0))
            .collect();
        let img = Image::new(w, h, 1, data).unwrap();
        let out = scale_and_crop(&img, &PreprocessSpec::new(64, 0.0, 1.0).unwrap());
        assert_eq!((out.width(), out.height()), (64, 64));
        for x in 0..64 {
            let src = (x as f64 + 8.0 + 0.5) / 0.8 - 0.5;
            assert!((out.get(x, 10, 0) - src / 99.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_and_crop_identity_and_constant() {
        let spec = PreprocessSpec::new(64, 0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..64 * 64).map(|i| (i % 7) as f64 / 7.0).collect();
        let img = Image::new(64, 64, 1, data).unwrap();
        assert_eq!(scale_and_crop(&img, &spec), img);
        let c = Image::filled(37, 91, 0.42).unwrap();
        let out = scale_and_crop(&c, &spec);
        assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn normalize_examples() {
        let img = Image::filled(8, 8, 1.0).unwrap();
        let t = normalize(&img, &PreprocessSpec::new(8, 0.5, 0.5).unwrap()).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
        assert_eq!(t.shape(), &[1, 8, 8]);
        let t = normalize(
            &Image::filled(8, 8, 0.5).unwrap(),
            &PreprocessSpec::new(8, 0.5, 0.2).unwrap(),
        )
        .unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert!(normalize(&img, &PreprocessSpec::new(16, 0.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(PreprocessSpec::new(4, 0.0, 1.0).is_err());
        assert!(PreprocessSpec::new(8, 0.0, 0.0).is_err());
    }

    #[test]
    fn compare_pipelines_examples() {
        let a = vec![vec![0.1, 0.5], vec![0.9, 0.3]];
        let r = compare_pipelines(&a, &a).unwrap();
        assert_eq!((r.mean_abs_diff, r.max_abs_diff), (0.0, 0.0));
        assert_eq!(r.histogram[0], 4);
        let b: Vec<Vec<f64>> = a
            .iter()
            .map(|p| p.iter().map(|v| v + 0.03).collect())
            .collect();
        let r = compare_pipelines(&a, &b).unwrap();
        assert!((r.mean_abs_diff - 0.03).abs() < 1e-12);
        assert_eq!(r.histogram.iter().sum::<usize>(), 4);
        assert!(compare_pipelines(&a, &b[..1]).is_err());
        assert!(compare_pipelines(&a, &[vec![0.1], vec![0.2]]).is_err());
    }
}
