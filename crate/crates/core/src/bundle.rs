//! Self-describing model bundle: a zip container (or a directory) holding a
//! canonical `manifest.json` and a little-endian `float32` `weights.bin`.
//!
//! Weights are stored in the order classifier, encoder, decoder, each in
//! layer declaration order and parameter-slot order within a layer.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::models::synthetic::gen_phantom;
use crate::ood::{LatentReference, OodGate, OodMetricKind};
use crate::preprocess::{compare_pipelines, decode_image, DiffReport, Image, PreprocessSpec};
use crate::tensor::{GraphSpec, Model};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const WEIGHTS_DTYPE: &str = "float32_le";
/// Largest per-class probability difference a bundle's self-check tolerates.
pub const VERIFY_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct OodBundle {
    pub metric: OodMetricKind,
    pub threshold: f64,
    pub preprocess: PreprocessSpec,
    pub latent_reference: LatentReference,
    pub encoder: GraphSpec,
    pub encoder_weights: Vec<f64>,
    pub decoder: GraphSpec,
    pub decoder_weights: Vec<f64>,
}

/// One synthetic fixture image: a phantom regenerated from its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub seed: u64,
    pub labels: Vec<bool>,
}

impl Fixture {
    /// The phantom after an 8-bit PNG round trip, i.e. exactly what an
    /// exported fixture file decodes to.
    pub fn image(&self, size: usize) -> Result<Image> {
        decode_image(&gen_phantom(self.seed, &self.labels, size).image.to_png())
    }
}

pub const FIXTURE_REFERENCE_FILE: &str = "reference.json";

/// Reference predictions stored next to exported fixture PNGs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureReference {
    pub files: Vec<String>,
    pub predictions: Vec<Vec<f64>>,
}

/// Fixtures with the probabilities the training run produced for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSet {
    pub image_size: usize,
    pub fixtures: Vec<Fixture>,
    pub predictions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub graph: GraphSpec,
    pub weights: Vec<f64>,
    pub preprocess: PreprocessSpec,
    pub class_names: Vec<String>,
    pub operating_points: Vec<f64>,
    pub ood: Option<OodBundle>,
    pub verification: Option<VerificationSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightSegment {
    name: String,
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightsInfo {
    file: String,
    dtype: String,
    segments: Vec<WeightSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OodManifest {
    metric: OodMetricKind,
    threshold: f64,
    preprocess: PreprocessSpec,
    latent_reference: LatentReference,
    encoder: GraphSpec,
    decoder: GraphSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    class_names: Vec<String>,
    operating_points: Vec<f64>,
    preprocess: PreprocessSpec,
    classifier: GraphSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ood: Option<OodManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    verification: Option<VerificationSet>,
    weights: WeightsInfo,
}

/// Rounds every weight to the nearest `float32`, as storage does.
pub fn quantize_f32(weights: &mut [f64]) {
    for w in weights {
        *w = f64::from(*w as f32);
    }
}

impl ModelBundle {
    /// Builds a bundle; weights are rounded to their stored precision so the
    /// in-memory bundle predicts exactly what a reloaded one does.
    pub fn new(classifier: &Classifier) -> Self {
        let mut weights = classifier.model().weights().to_vec();
        quantize_f32(&mut weights);
        Self {
            graph: classifier.model().spec().clone(),
            weights,
            preprocess: classifier.preprocess_spec().clone(),
            class_names: classifier.class_names().to_vec(),
            operating_points: classifier.operating_points().to_vec(),
            ood: None,
            verification: None,
        }
    }

    pub fn with_ood(mut self, gate: &OodGate) -> Self {
        let mut enc = gate.encoder.weights().to_vec();
        let mut dec = gate.decoder.weights().to_vec();
        quantize_f32(&mut enc);
        quantize_f32(&mut dec);
        self.ood = Some(OodBundle {
            metric: gate.metric,
            threshold: gate.threshold,
            preprocess: gate.preprocess.clone(),
            latent_reference: gate.reference.clone(),
            encoder: gate.encoder.spec().clone(),
            encoder_weights: enc,
            decoder: gate.decoder.spec().clone(),
            decoder_weights: dec,
        });
        self
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn classifier(&self) -> Result<Classifier> {
        Classifier::new(
            Model::new(&self.graph, self.weights.clone())?,
            self.preprocess.clone(),
            self.class_names.clone(),
            self.operating_points.clone(),
        )
    }

    pub fn gate(&self) -> Result<Option<OodGate>> {
        let Some(ood) = &self.ood else {
            return Ok(None);
        };
        ood.preprocess.validate()?;
        if !ood.threshold.is_finite() {
            return Err(Error::CorruptManifest(format!(
                "OOD threshold {} is not finite",
                ood.threshold
            )));
        }
        let encoder = Model::new(&ood.encoder, ood.encoder_weights.clone())?;
        let decoder = Model::new(&ood.decoder, ood.decoder_weights.clone())?;
        let s = ood.preprocess.target_size;
        let (eg, dg) = (encoder.graph(), decoder.graph());
        if eg.input_shape() != [1, s, s]
            || dg.input_shape() != eg.shape(eg.primary_output())
            || dg.shape(dg.primary_output()) != eg.input_shape()
        {
            return Err(Error::ShapeMismatch(
                "encoder and decoder shapes do not chain".into(),
            ));
        }
        if let LatentReference::Empirical(mean) = &ood.latent_reference {
            if [mean.len()] != dg.input_shape() {
                return Err(Error::ShapeMismatch(
                    "latent reference length differs from latent size".into(),
                ));
            }
        }
        Ok(Some(OodGate {
            encoder,
            decoder,
            preprocess: ood.preprocess.clone(),
            metric: ood.metric,
            threshold: ood.threshold,
            reference: ood.latent_reference.clone(),
        }))
    }

    /// Checks every cross-field invariant by building the runtime objects.
    pub fn validate(&self) -> Result<()> {
        let clf = self.classifier()?;
        self.gate()?;
        if let Some(v) = &self.verification {
            let k = clf.class_names().len();
            if v.fixtures.len() != v.predictions.len() || v.predictions.iter().any(|p| p.len() != k)
            {
                return Err(Error::CorruptManifest(
                    "verification predictions do not match fixtures".into(),
                ));
            }
        }
        Ok(())
    }

    /// Records the current classifier's predictions on phantom fixtures.
    pub fn attach_verification(&mut self, fixtures: Vec<Fixture>, image_size: usize) -> Result<()> {
        let clf = self.classifier()?;
        let predictions = fixtures
            .iter()
            .map(|f| clf.probabilities(&f.image(image_size)?))
            .collect::<Result<Vec<_>>>()?;
        self.verification = Some(VerificationSet {
            image_size,
            fixtures,
            predictions,
        });
        Ok(())
    }

    fn manifest(&self) -> Manifest {
        let mut segments = vec![WeightSegment {
            name: "classifier".into(),
            count: self.weights.len(),
        }];
        if let Some(ood) = &self.ood {
            segments.push(WeightSegment {
                name: "encoder".into(),
                count: ood.encoder_weights.len(),
            });
            segments.push(WeightSegment {
                name: "decoder".into(),
                count: ood.decoder_weights.len(),
            });
        }
        Manifest {
            format_version: FORMAT_VERSION,
            class_names: self.class_names.clone(),
            operating_points: self.operating_points.clone(),
            preprocess: self.preprocess.clone(),
            classifier: self.graph.clone(),
            ood: self.ood.as_ref().map(|o| OodManifest {
                metric: o.metric,
                threshold: o.threshold,
                preprocess: o.preprocess.clone(),
                latent_reference: o.latent_reference.clone(),
                encoder: o.encoder.clone(),
                decoder: o.decoder.clone(),
            }),
            verification: self.verification.clone(),
            weights: WeightsInfo {
                file: WEIGHTS_FILE.into(),
                dtype: WEIGHTS_DTYPE.into(),
                segments,
            },
        }
    }

    /// Manifest JSON with keys sorted at every level.
    pub fn manifest_json(&self) -> Vec<u8> {
        let value = serde_json::to_value(self.manifest()).expect("manifest is plain data");
        let mut out = serde_json::to_vec_pretty(&value).expect("manifest is plain data");
        out.push(b'\n');
        out
    }

    pub fn weights_bin(&self) -> Vec<u8> {
        let ood = self
            .ood
            .iter()
            .flat_map(|o| o.encoder_weights.iter().chain(&o.decoder_weights));
        self.weights
            .iter()
            .chain(ood)
            .flat_map(|&w| (w as f32).to_le_bytes())
            .collect()
    }

    /// Serializes to zip bytes. Entries are stored uncompressed with a fixed
    /// timestamp, so equal bundles give equal bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(DateTime::default())
            .unix_permissions(0o644);
        let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
        for (name, bytes) in [
            (MANIFEST_FILE, self.manifest_json()),
            (WEIGHTS_FILE, self.weights_bin()),
        ] {
            zip.start_file(name, opts).map_err(zip_write_error)?;
            zip.write_all(&bytes)?;
        }
        Ok(zip.finish().map_err(zip_write_error)?.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut archive = ZipArchive::new(Cursor::new(bytes))
            .map_err(|e| Error::CorruptManifest(format!("not a bundle archive: {e}")))?;
        let mut read = |name: &str| -> Result<Vec<u8>> {
            let mut entry = archive
                .by_name(name)
                .map_err(|_| Error::CorruptManifest(format!("bundle has no `{name}`")))?;
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf)?;
            Ok(buf)
        };
        let manifest = read(MANIFEST_FILE)?;
        let weights = read(WEIGHTS_FILE)?;
        Self::from_parts(&manifest, &weights)
    }

    /// Writes the two-file directory form.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), self.manifest_json())?;
        std::fs::write(dir.join(WEIGHTS_FILE), self.weights_bin())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    /// Loads either a zip bundle file or a directory bundle.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let manifest = std::fs::read(path.join(MANIFEST_FILE))?;
            let weights = std::fs::read(path.join(WEIGHTS_FILE))?;
            Self::from_parts(&manifest, &weights)
        } else {
            Self::from_bytes(&std::fs::read(path)?)
        }
    }

    pub fn from_parts(manifest: &[u8], weights: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(manifest)
            .map_err(|e| Error::CorruptManifest(format!("manifest is not JSON: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| {
                Error::CorruptManifest("manifest has no integer format_version".into())
            })?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::VersionMismatch {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let m: Manifest = serde_json::from_value(value)
            .map_err(|e| Error::CorruptManifest(format!("manifest: {e}")))?;
        if m.weights.dtype != WEIGHTS_DTYPE {
            return Err(Error::CorruptManifest(format!(
                "unsupported weight dtype `{}`",
                m.weights.dtype
            )));
        }
        if !weights.len().is_multiple_of(4) {
            return Err(Error::CorruptManifest(format!(
                "weights file length {} is not a multiple of 4",
                weights.len()
            )));
        }
        m.classifier.compile()?;
        if let Some(ood) = &m.ood {
            ood.encoder.compile()?;
            ood.decoder.compile()?;
        }
        let mut expected = vec![("classifier", m.classifier.param_count())];
        if let Some(ood) = &m.ood {
            expected.push(("encoder", ood.encoder.param_count()));
            expected.push(("decoder", ood.decoder.param_count()));
        }
        let declared: Vec<(&str, usize)> = m
            .weights
            .segments
            .iter()
            .map(|s| (s.name.as_str(), s.count))
            .collect();
        let total_expected: usize = expected.iter().map(|e| e.1).sum();
        let total_declared: usize = declared.iter().map(|e| e.1).sum();
        if declared != expected {
            return Err(Error::WeightCountMismatch {
                expected: total_expected,
                got: total_declared,
            });
        }
        let values: Vec<f64> = weights
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        if values.len() != total_expected {
            return Err(Error::WeightCountMismatch {
                expected: total_expected,
                got: values.len(),
            });
        }
        let (clf, rest) = values.split_at(expected[0].1);
        let ood = m.ood.map(|o| {
            let (enc, dec) = rest.split_at(o.encoder.param_count());
            OodBundle {
                metric: o.metric,
                threshold: o.threshold,
                preprocess: o.preprocess,
                latent_reference: o.latent_reference,
                encoder: o.encoder,
                encoder_weights: enc.to_vec(),
                decoder: o.decoder,
                decoder_weights: dec.to_vec(),
            }
        });
        let bundle = ModelBundle {
            graph: m.classifier,
            weights: clf.to_vec(),
            preprocess: m.preprocess,
            class_names: m.class_names,
            operating_points: m.operating_points,
            ood,
            verification: m.verification,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Re-runs the verification fixtures and compares with the stored
    /// predictions. `None` when the bundle carries no fixtures.
    pub fn verify(&self) -> Result<Option<DiffReport>> {
        let Some(v) = &self.verification else {
            return Ok(None);
        };
        let clf = self.classifier()?;
        let actual = v
            .fixtures
            .iter()
            .map(|f| clf.probabilities(&f.image(v.image_size)?))
            .collect::<Result<Vec<_>>>()?;
        compare_pipelines(&v.predictions, &actual).map(Some)
    }

    /// Writes the verification fixtures as PNG files plus a reference file.
    pub fn export_fixtures(&self, dir: &Path) -> Result<()> {
        let v = self.verification.as_ref().ok_or_else(|| {
            Error::InvalidConfig("bundle carries no verification fixtures".into())
        })?;
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (i, f) in v.fixtures.iter().enumerate() {
            let name = format!("fixture_{i}.png");
            std::fs::write(
                dir.join(&name),
                gen_phantom(f.seed, &f.labels, v.image_size).image.to_png(),
            )?;
            files.push(name);
        }
        let reference = FixtureReference {
            files,
            predictions: v.predictions.clone(),
        };
        std::fs::write(
            dir.join(FIXTURE_REFERENCE_FILE),
            serde_json::to_vec_pretty(&reference)?,
        )?;
        Ok(())
    }

    /// Compares predictions on exported fixture files with their reference.
    pub fn verify_fixture_dir(&self, dir: &Path) -> Result<DiffReport> {
        let reference: FixtureReference =
            serde_json::from_slice(&std::fs::read(dir.join(FIXTURE_REFERENCE_FILE))?)?;
        let clf = self.classifier()?;
        let actual = reference
            .files
            .iter()
            .map(|name| clf.probabilities(&decode_image(&std::fs::read(dir.join(name))?)?))
            .collect::<Result<Vec<_>>>()?;
        compare_pipelines(&reference.predictions, &actual)
    }
}

fn zip_write_error(e: zip::result::ZipError) -> Error {
    match e {
        zip::result::ZipError::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    }
}
