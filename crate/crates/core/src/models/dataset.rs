//! Synthetic datasets described by a JSON manifest of per-sample seeds and
//! labels. Images are regenerated from the seeds on demand.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::{self, gen_phantom, SyntheticSample, PHANTOM_GENERATOR};
use crate::error::{Error, Result};
use crate::preprocess::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub seed: u64,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<SampleEntry>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    /// Probability that any one class is present.
    pub prevalence: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            num_classes: 4,
            image_size: 64,
            prevalence: 0.5,
            seed: 0,
        }
    }
}

/// 70/10/20 shuffled partition of `0..n`.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b11_7000));
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = ((n as f64 * 0.1).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split {
        train: idx,
        val,
        test,
    }
}

pub fn gen_dataset(cfg: &DatasetConfig) -> Result<DatasetManifest> {
    if cfg.n_samples == 0 || cfg.num_classes == 0 || cfg.image_size < 8 {
        return Err(Error::InvalidConfig(format!(
            "invalid dataset config {cfg:?}"
        )));
    }
    if !(0.0..=1.0).contains(&cfg.prevalence) {
        return Err(Error::InvalidConfig(format!(
            "prevalence {} outside [0, 1]",
            cfg.prevalence
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = (0..cfg.n_samples)
        .map(|_| SampleEntry {
            seed: rng.random(),
            labels: (0..cfg.num_classes)
                .map(|_| rng.random_bool(cfg.prevalence))
                .collect(),
        })
        .collect();
    Ok(DatasetManifest {
        generator: PHANTOM_GENERATOR.into(),
        image_size: cfg.image_size,
        class_names: synthetic::class_names(cfg.num_classes),
        samples,
        split: split_indices(cfg.n_samples, cfg.seed),
    })
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.generator != PHANTOM_GENERATOR {
            return Err(Error::InvalidConfig(format!(
                "unknown generator `{}`",
                self.generator
            )));
        }
        let n = self.samples.len();
        if self
            .samples
            .iter()
            .any(|s| s.labels.len() != self.num_classes())
        {
            return Err(Error::InvalidConfig(
                "label vector length differs from class count".into(),
            ));
        }
        let mut seen = vec![false; n];
        for &i in self
            .split
            .train
            .iter()
            .chain(&self.split.val)
            .chain(&self.split.test)
        {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidConfig(format!(
                    "split index {i} out of range or repeated"
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, index: usize) -> SyntheticSample {
        let s = &self.samples[index];
        gen_phantom(s.seed, &s.labels, self.image_size)
    }

    pub fn images(&self, indices: &[usize]) -> Vec<Image> {
        indices.iter().map(|&i| self.sample(i).image).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<Vec<bool>> {
        indices
            .iter()
            .map(|&i| self.samples[i].labels.clone())
            .collect()
    }
}
