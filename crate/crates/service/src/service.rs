//! The loaded bundle and the request-level operations shared by the HTTP API
//! and the command line.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use xray_core::bundle::{ModelBundle, FORMAT_VERSION, VERIFY_TOLERANCE};
use xray_core::classifier::{ClassPrediction, Classifier};
use xray_core::explain::{cam, render_overlay, saliency, Map2d, MapSidecar, Method, Overlay};
use xray_core::ood::{OodGate, OodMetricKind, OodScores, OodVerdict, ReconstructionResult};
use xray_core::preprocess::{
    decode_image, scale_and_crop, to_grayscale, DiffReport, Image, PreprocessSpec,
};
use xray_core::tensor::OutputSelector;

pub const MIB: usize = 1 << 20;
pub const DEFAULT_MAX_UPLOAD: usize = 16 * MIB;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] xray_core::Error),
    #[error(
        "bundle self-check failed: max difference {max_abs_diff:e} exceeds {VERIFY_TOLERANCE:e}"
    )]
    VerificationFailed { max_abs_diff: f64 },
    #[error("bundle has no OOD gate")]
    NoGate,
    #[error("image rejected by the OOD gate ({} {:.4} vs threshold {:.4})", .0.metric.as_str(), .0.score, .0.threshold)]
    Rejected(Box<OodSummary>),
    #[error("{0}")]
    BadRequest(String),
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Core(e.into())
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::Core(e.into())
    }
}

impl ServiceError {
    /// Stable machine-readable error name.
    pub fn kind(&self) -> &'static str {
        use xray_core::Error as E;
        match self {
            ServiceError::Core(e) => match e {
                E::MalformedImage(_) => "malformed_image",
                E::UnsupportedFormat(_) => "unsupported_format",
                E::BadClassIndex { .. } => "bad_class_index",
                E::IncompatibleHead(_) => "incompatible_head",
                E::InvalidConfig(_) => "invalid_config",
                E::VersionMismatch { .. } => "version_mismatch",
                E::CorruptManifest(_) => "corrupt_manifest",
                E::WeightCountMismatch { .. } => "weight_count_mismatch",
                E::UnsupportedLayer(_) => "unsupported_layer",
                E::DegenerateLabels => "degenerate_labels",
                E::Io(_) => "io",
                E::Json(_) => "json",
                _ => "internal",
            },
            ServiceError::VerificationFailed { .. } => "verification_failed",
            ServiceError::NoGate => "no_gate",
            ServiceError::Rejected(_) => "rejected_by_gate",
            ServiceError::BadRequest(_) => "bad_request",
        }
    }

    /// Caller mistakes (exit status 2) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        match self {
            ServiceError::Core(e) => e.is_validation(),
            ServiceError::VerificationFailed { .. } => false,
            ServiceError::NoGate | ServiceError::Rejected(_) | ServiceError::BadRequest(_) => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSummary {
    pub admitted: bool,
    pub metric: OodMetricKind,
    pub score: f64,
    pub threshold: f64,
    /// Base64 PNG of the reconstruction error over the gate input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_map_png: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub admitted: bool,
    /// `None` when the gate is off or the bundle has none.
    pub ood: Option<OodSummary>,
    /// Absent for rejected images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<ClassPrediction>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodResponse {
    pub verdict: OodVerdict,
    pub scores: OodScores,
    pub width: usize,
    pub height: usize,
    pub error_map_png: String,
    pub reconstruction_png: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub input_size: usize,
    pub ood_gate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateInfo {
    pub metric: OodMetricKind,
    pub threshold: f64,
    pub input_size: usize,
    pub latent_dim: usize,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub format_version: u32,
    pub class_names: Vec<String>,
    pub operating_points: Vec<f64>,
    pub input_size: usize,
    pub preprocess: PreprocessSpec,
    pub parameters: usize,
    pub ood: Option<GateInfo>,
    pub verification: Option<DiffReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSelector {
    One(usize),
    All,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub method: Method,
    /// Class name, or `all`.
    pub class: String,
    pub map: Map2d,
    pub overlay: Overlay,
}

impl Explanation {
    pub fn sidecar(&self) -> MapSidecar {
        MapSidecar::new(&self.map, self.method, &self.class)
    }
}

/// An immutable loaded bundle ready to serve requests.
#[derive(Debug)]
pub struct Service {
    classifier: Classifier,
    gate: Option<OodGate>,
    gate_enabled: bool,
    verification: Option<DiffReport>,
}

impl Service {
    /// Builds the runtime objects and runs the bundle's self-check.
    pub fn new(bundle: &ModelBundle, gate_enabled: bool) -> Result<Self> {
        let verification = bundle.verify()?;
        if let Some(report) = &verification {
            if !report.within(VERIFY_TOLERANCE) {
                return Err(ServiceError::VerificationFailed {
                    max_abs_diff: report.max_abs_diff,
                });
            }
        }
        Ok(Self {
            classifier: bundle.classifier()?,
            gate: bundle.gate()?,
            gate_enabled,
            verification,
        })
    }

    pub fn load(path: &std::path::Path, gate_enabled: bool) -> Result<Self> {
        Self::new(&ModelBundle::load(path)?, gate_enabled)
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn gate(&self) -> Option<&OodGate> {
        self.gate.as_ref()
    }

    pub fn gate_active(&self) -> bool {
        self.gate_enabled && self.gate.is_some()
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse {
            status: "ok".into(),
            format_version: FORMAT_VERSION,
            class_names: self.classifier.class_names().to_vec(),
            input_size: self.classifier.preprocess_spec().target_size,
            ood_gate: self.gate_active(),
        }
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            format_version: FORMAT_VERSION,
            class_names: self.classifier.class_names().to_vec(),
            operating_points: self.classifier.operating_points().to_vec(),
            input_size: self.classifier.preprocess_spec().target_size,
            preprocess: self.classifier.preprocess_spec().clone(),
            parameters: self.classifier.model().weights().len(),
            ood: self.gate.as_ref().map(|g| GateInfo {
                metric: g.metric,
                threshold: g.threshold,
                input_size: g.preprocess.target_size,
                latent_dim: g
                    .encoder
                    .graph()
                    .shape(g.encoder.graph().primary_output())
                    .iter()
                    .product(),
                enabled: self.gate_enabled,
            }),
            verification: self.verification.clone(),
        }
    }

    pub fn class_selector(&self, s: &str) -> Result<ClassSelector> {
        if s == "all" {
            Ok(ClassSelector::All)
        } else {
            Ok(ClassSelector::One(self.classifier.class_index(s)?))
        }
    }

    fn run_gate(
        &self,
        gate: &OodGate,
        image: &Image,
    ) -> Result<(Image, ReconstructionResult, OodVerdict)> {
        let input = gate.prepare(image);
        let (result, verdict) = gate.evaluate(image)?;
        Ok((input, result, verdict))
    }

    fn error_map_png(input: &Image, result: &ReconstructionResult) -> Result<String> {
        let map = Map2d::new(input.width(), input.height(), result.error_map.clone())?;
        Ok(BASE64.encode(render_overlay(&map, input)?.composite_png()))
    }

    /// Rejects the image when the gate is active and says no.
    fn admit(&self, image: &Image) -> Result<Option<OodSummary>> {
        let Some(gate) = self.gate.as_ref().filter(|_| self.gate_enabled) else {
            return Ok(None);
        };
        let (input, result, verdict) = self.run_gate(gate, image)?;
        let mut summary = OodSummary {
            admitted: verdict.admitted,
            metric: verdict.metric,
            score: verdict.score,
            threshold: verdict.threshold,
            error_map_png: None,
        };
        if !verdict.admitted {
            summary.error_map_png = Some(Self::error_map_png(&input, &result)?);
            return Err(ServiceError::Rejected(Box::new(summary)));
        }
        Ok(Some(summary))
    }

    pub fn predict_image(&self, image: &Image) -> Result<PredictResponse> {
        match self.admit(image) {
            Ok(ood) => Ok(PredictResponse {
                admitted: true,
                ood,
                predictions: Some(self.classifier.predict(image)?),
            }),
            Err(ServiceError::Rejected(summary)) => Ok(PredictResponse {
                admitted: false,
                ood: Some(*summary),
                predictions: None,
            }),
            Err(e) => Err(e),
        }
    }

    pub fn predict(&self, bytes: &[u8]) -> Result<PredictResponse> {
        self.predict_image(&decode_image(bytes)?)
    }

    /// Full gate report; runs even when gating is switched off.
    pub fn ood(&self, bytes: &[u8]) -> Result<OodResponse> {
        let gate = self.gate.as_ref().ok_or(ServiceError::NoGate)?;
        let (input, result, verdict) = self.run_gate(gate, &decode_image(bytes)?)?;
        Ok(OodResponse {
            verdict,
            scores: result.scores,
            width: input.width(),
            height: input.height(),
            error_map_png: Self::error_map_png(&input, &result)?,
            reconstruction_png: BASE64.encode(result.reconstruction.to_png()),
        })
    }

    /// Saliency or CAM at the classifier's input resolution, rendered over
    /// the scaled and cropped input.
    pub fn explain(
        &self,
        bytes: &[u8],
        class: ClassSelector,
        method: Method,
    ) -> Result<Explanation> {
        let image = decode_image(bytes)?;
        self.admit(&image)?;
        let spec = self.classifier.preprocess_spec();
        let base = scale_and_crop(&to_grayscale(&image), spec);
        let input = self.classifier.prepare(&image)?;
        let s = spec.target_size;
        let (map, class_name) = match (method, class) {
            (Method::Saliency, ClassSelector::All) => (
                saliency(self.classifier.model(), &input, OutputSelector::All)?,
                "all".to_string(),
            ),
            (Method::Saliency, ClassSelector::One(c)) => (
                saliency(self.classifier.model(), &input, OutputSelector::Index(c))?,
                self.classifier.class_names()[c].clone(),
            ),
            (Method::Cam, ClassSelector::All) => {
                return Err(ServiceError::BadRequest("cam needs a single class".into()));
            }
            (Method::Cam, ClassSelector::One(c)) => {
                let m = cam(self.classifier.model(), &input, c)?.upsample(s, s);
                (
                    m.upsampled.expect("just upsampled"),
                    self.classifier.class_names()[c].clone(),
                )
            }
        };
        let overlay = render_overlay(&map, &base)?;
        Ok(Explanation {
            method,
            class: class_name,
            map,
            overlay,
        })
    }
}
