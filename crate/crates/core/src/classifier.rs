use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{calibrate, MultiLabelScorer};
use crate::preprocess::{self, Image, PreprocessSpec};
use crate::tensor::{Model, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub name: String,
    pub raw_probability: f64,
    pub calibrated_probability: f64,
    pub operating_point: f64,
    /// `calibrated_probability >= 0.5`, i.e. the raw probability reaches the
    /// operating point.
    pub positive: bool,
}

/// A multi-label classifier with its input geometry and per-class
/// operating points.
#[derive(Debug, Clone)]
pub struct Classifier {
    model: Model,
    preprocess: PreprocessSpec,
    class_names: Vec<String>,
    operating_points: Vec<f64>,
}

impl Classifier {
    pub fn new(
        model: Model,
        preprocess: PreprocessSpec,
        class_names: Vec<String>,
        operating_points: Vec<f64>,
    ) -> Result<Self> {
        preprocess.validate()?;
        let k = class_names.len();
        if k == 0 {
            return Err(Error::InvalidConfig(
                "classifier needs at least one class".into(),
            ));
        }
        let graph = model.graph();
        let s = preprocess.target_size;
        if graph.input_shape() != [1, s, s] {
            return Err(Error::ShapeMismatch(format!(
                "graph input {:?} does not match preprocessing size {s}",
                graph.input_shape()
            )));
        }
        for (what, id) in [
            ("output", graph.primary_output()),
            ("logits", graph.logits_id()),
        ] {
            if graph.shape(id) != [k] {
                return Err(Error::ShapeMismatch(format!(
                    "{what} shape {:?} does not match {k} classes",
                    graph.shape(id)
                )));
            }
        }
        if operating_points.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "{} operating points for {k} classes",
                operating_points.len()
            )));
        }
        if let Some(&bad) = operating_points.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::InvalidOperatingPoint(bad));
        }
        Ok(Self {
            model,
            preprocess,
            class_names,
            operating_points,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn preprocess_spec(&self) -> &PreprocessSpec {
        &self.preprocess
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn operating_points(&self) -> &[f64] {
        &self.operating_points
    }

    pub fn class_index(&self, name_or_index: &str) -> Result<usize> {
        let k = self.class_names.len();
        if let Some(i) = self.class_names.iter().position(|n| n == name_or_index) {
            return Ok(i);
        }
        match name_or_index.parse::<usize>() {
            Ok(i) if i < k => Ok(i),
            Ok(index) => Err(Error::BadClassIndex {
                index,
                num_classes: k,
            }),
            Err(_) => Err(Error::InvalidConfig(format!(
                "unknown class `{name_or_index}`"
            ))),
        }
    }

    pub fn prepare(&self, image: &Image) -> Result<Tensor> {
        preprocess::preprocess(image, &self.preprocess)
    }

    pub fn probabilities_of(&self, input: &Tensor) -> Result<Vec<f64>> {
        Ok(self.model.predict(input)?.into_data())
    }

    pub fn probabilities(&self, image: &Image) -> Result<Vec<f64>> {
        self.probabilities_of(&self.prepare(image)?)
    }

    pub fn predict(&self, image: &Image) -> Result<Vec<ClassPrediction>> {
        let probs = self.probabilities(image)?;
        probs
            .into_iter()
            .zip(&self.class_names)
            .zip(&self.operating_points)
            .map(|((p, name), &opt)| {
                let calibrated = calibrate(p, opt)?;
                Ok(ClassPrediction {
                    name: name.clone(),
                    raw_probability: p,
                    calibrated_probability: calibrated,
                    operating_point: opt,
                    positive: calibrated >= 0.5,
                })
            })
            .collect()
    }
}

impl MultiLabelScorer for Classifier {
    fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn scores(&self, image: &Image) -> Result<Vec<f64>> {
        self.probabilities(image)
    }
}
