//! Graph builders for the classifier, the autoencoder halves and the
//! adversarial discriminator, plus weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GraphSpec, InputSpec, LayerKind, LayerSpec};

pub const LATENT_DIMS: [usize; 4] = [64, 128, 256, 512];
const BN_EPS: f64 = 1e-5;

/// Densely connected classifier: stem convolution, dense blocks joined by
/// transitions, global average pooling, a linear head and sigmoid outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub growth_rate: usize,
    /// Layers per dense block; a transition (1x1 conv + 2x2 average pool)
    /// sits between consecutive blocks.
    pub block_layers: Vec<usize>,
    pub compression: f64,
    /// 2x2 max pool after the stem.
    pub stem_pool: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            num_classes: 4,
            stem_channels: 8,
            growth_rate: 4,
            block_layers: vec![2, 2],
            compression: 0.5,
            stem_pool: false,
        }
    }
}

impl ClassifierConfig {
    fn downsampling(&self) -> usize {
        let pools = self.block_layers.len().saturating_sub(1) + usize::from(self.stem_pool);
        1 << pools
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.input_size < 8 {
            return bad(format!("input_size {} below 8", self.input_size));
        }
        if self.stem_channels == 0 || self.growth_rate == 0 {
            return bad("stem_channels and growth_rate must be positive".into());
        }
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return bad("every dense block needs at least one layer".into());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} outside (0, 1]", self.compression));
        }
        if !self.input_size.is_multiple_of(self.downsampling()) {
            return bad(format!(
                "input_size {} not divisible by total downsampling {}",
                self.input_size,
                self.downsampling()
            ));
        }
        Ok(())
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, inputs: &[&str]) -> String {
        self.layers.push(LayerSpec::new(name.clone(), kind, inputs));
        name
    }

    fn conv(
        &mut self,
        name: String,
        input: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> String {
        self.push(
            name,
            LayerKind::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                padding,
                bias: true,
            },
            &[input],
        )
    }

    fn dense(
        &mut self,
        name: String,
        input: &str,
        fin: usize,
        fout: usize,
        out_shape: Option<Vec<usize>>,
    ) -> String {
        self.push(
            name,
            LayerKind::Dense {
                in_features: fin,
                out_features: fout,
                out_shape,
            },
            &[input],
        )
    }

    fn bn_relu(&mut self, prefix: &str, input: &str, channels: usize) -> String {
        let bn = self.push(
            format!("{prefix}_bn"),
            LayerKind::Batchnorm {
                channels,
                eps: BN_EPS,
            },
            &[input],
        );
        self.push(format!("{prefix}_relu"), LayerKind::Relu, &[&bn])
    }
}

/// Node holding the last feature maps before global pooling.
pub const FEATURES_NODE: &str = "features";
pub const LOGITS_NODE: &str = "logits";

pub fn build_classifier(cfg: &ClassifierConfig) -> Result<GraphSpec> {
    cfg.validate()?;
    let mut b = Builder { layers: Vec::new() };
    let mut x = b.conv("stem".into(), "image", 1, cfg.stem_channels, 3, 1, 1);
    if cfg.stem_pool {
        x = b.push(
            "stem_pool".into(),
            LayerKind::Maxpool {
                kernel: 2,
                stride: 2,
            },
            &[&x],
        );
    }
    let mut channels = cfg.stem_channels;
    for (bi, &n_layers) in cfg.block_layers.iter().enumerate() {
        for li in 0..n_layers {
            let prefix = format!("block{bi}_layer{li}");
            let h = b.bn_relu(&prefix, &x, channels);
            let new = b.conv(
                format!("{prefix}_conv"),
                &h,
                channels,
                cfg.growth_rate,
                3,
                1,
                1,
            );
            x = b.push(format!("{prefix}_cat"), LayerKind::Concat, &[&x, &new]);
            channels += cfg.growth_rate;
        }
        if bi + 1 < cfg.block_layers.len() {
            let prefix = format!("trans{bi}");
            let h = b.bn_relu(&prefix, &x, channels);
            let out = ((channels as f64 * cfg.compression).floor() as usize).max(1);
            let c = b.conv(format!("{prefix}_conv"), &h, channels, out, 1, 1, 0);
            x = b.push(
                format!("{prefix}_pool"),
                LayerKind::Avgpool {
                    kernel: 2,
                    stride: 2,
                },
                &[&c],
            );
            channels = out;
        }
    }
    let bn = b.push(
        "final_bn".into(),
        LayerKind::Batchnorm {
            channels,
            eps: BN_EPS,
        },
        &[&x],
    );
    let f = b.push(FEATURES_NODE.into(), LayerKind::Relu, &[&bn]);
    let gap = b.push("gap".into(), LayerKind::GlobalAvgPool, &[&f]);
    let logits = b.dense(LOGITS_NODE.into(), &gap, channels, cfg.num_classes, None);
    b.push("probs".into(), LayerKind::Sigmoid, &[&logits]);
    Ok(GraphSpec {
        inputs: vec![InputSpec {
            name: "image".into(),
            shape: vec![1, cfg.input_size, cfg.input_size],
        }],
        layers: b.layers,
        outputs: vec!["probs".into()],
        logits: Some(LOGITS_NODE.into()),
    })
}

/// Convolutional autoencoder: stride-2 4x4 convolutions down to a dense
/// latent code, mirrored by nearest upsampling and 3x3 convolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub input_size: usize,
    pub latent_dim: usize,
    /// Channels after each downsampling stage.
    pub channels: Vec<usize>,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            latent_dim: 128,
            channels: vec![8, 16, 16],
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !LATENT_DIMS.contains(&self.latent_dim) {
            return bad(format!(
                "latent_dim {} not one of {LATENT_DIMS:?}",
                self.latent_dim
            ));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("autoencoder needs at least one non-empty stage".into());
        }
        if self.input_size < 8 || !self.input_size.is_multiple_of(1 << self.channels.len()) {
            return bad(format!(
                "input_size {} must be >= 8 and divisible by {}",
                self.input_size,
                1 << self.channels.len()
            ));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize) {
        (
            *self.channels.last().unwrap(),
            self.input_size >> self.channels.len(),
        )
    }
}

pub fn build_encoder(cfg: &AutoencoderConfig) -> Result<GraphSpec> {
    cfg.validate()?;
    let mut b = Builder { layers: Vec::new() };
    let mut x = "image".to_string();
    let mut cin = 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let conv = b.conv(format!("enc{i}_conv"), &x, cin, c, 4, 2, 1);
        x = b.push(format!("enc{i}_relu"), LayerKind::Relu, &[&conv]);
        cin = c;
    }
    let (c, s) = cfg.bottleneck();
    b.dense("latent".into(), &x, c * s * s, cfg.latent_dim, None);
    Ok(GraphSpec {
        inputs: vec![InputSpec {
            name: "image".into(),
            shape: vec![1, cfg.input_size, cfg.input_size],
        }],
        layers: b.layers,
        outputs: vec!["latent".into()],
        logits: None,
    })
}

pub fn build_decoder(cfg: &AutoencoderConfig) -> Result<GraphSpec> {
    cfg.validate()?;
    let mut b = Builder { layers: Vec::new() };
    let (c, s) = cfg.bottleneck();
    let stem = b.dense(
        "dec_stem".into(),
        "latent",
        cfg.latent_dim,
        c * s * s,
        Some(vec![c, s, s]),
    );
    let mut x = b.push("dec_stem_relu".into(), LayerKind::Relu, &[&stem]);
    let mut cin = c;
    let n = cfg.channels.len();
    for i in (0..n).rev() {
        let cout = if i == 0 { 1 } else { cfg.channels[i - 1] };
        let up = b.push(
            format!("dec{i}_up"),
            LayerKind::UpsampleNearest { factor: 2 },
            &[&x],
        );
        let conv = b.conv(format!("dec{i}_conv"), &up, cin, cout, 3, 1, 1);
        x = if i == 0 {
            b.push("reconstruction".into(), LayerKind::Sigmoid, &[&conv])
        } else {
            b.push(format!("dec{i}_relu"), LayerKind::Relu, &[&conv])
        };
        cin = cout;
    }
    Ok(GraphSpec {
        inputs: vec![InputSpec {
            name: "latent".into(),
            shape: vec![cfg.latent_dim],
        }],
        layers: b.layers,
        outputs: vec!["reconstruction".into()],
        logits: None,
    })
}

pub fn build_autoencoder(cfg: &AutoencoderConfig) -> Result<(GraphSpec, GraphSpec)> {
    Ok((build_encoder(cfg)?, build_decoder(cfg)?))
}

/// Joint discriminator over (image, latent) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16],
            hidden: 64,
        }
    }
}

pub fn build_discriminator(ae: &AutoencoderConfig, cfg: &DiscriminatorConfig) -> Result<GraphSpec> {
    ae.validate()?;
    if cfg.channels.is_empty() || cfg.channels.contains(&0) || cfg.hidden == 0 {
        return Err(Error::InvalidConfig(
            "discriminator needs non-empty stages and hidden width".into(),
        ));
    }
    if !ae.input_size.is_multiple_of(1 << cfg.channels.len()) {
        return Err(Error::InvalidConfig(
            "discriminator downsampling does not divide input size".into(),
        ));
    }
    let mut b = Builder { layers: Vec::new() };
    let mut x = "image".to_string();
    let mut cin = 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let conv = b.conv(format!("dx{i}_conv"), &x, cin, c, 4, 2, 1);
        x = b.push(format!("dx{i}_relu"), LayerKind::Relu, &[&conv]);
        cin = c;
    }
    let s = ae.input_size >> cfg.channels.len();
    let h = cfg.hidden;
    let fx = b.dense("dx_fc".into(), &x, cin * s * s, h, None);
    let fx = b.push("dx_fc_relu".into(), LayerKind::Relu, &[&fx]);
    let fz = b.dense("dz_fc".into(), "latent", ae.latent_dim, h, None);
    let fz = b.push("dz_fc_relu".into(), LayerKind::Relu, &[&fz]);
    let joint = b.push("joint".into(), LayerKind::Concat, &[&fx, &fz]);
    let j = b.dense("joint_fc".into(), &joint, 2 * h, h, None);
    let j = b.push("joint_fc_relu".into(), LayerKind::Relu, &[&j]);
    let logit = b.dense("logit".into(), &j, h, 1, None);
    b.push("prob".into(), LayerKind::Sigmoid, &[&logit]);
    Ok(GraphSpec {
        inputs: vec![
            InputSpec {
                name: "image".into(),
                shape: vec![1, ae.input_size, ae.input_size],
            },
            InputSpec {
                name: "latent".into(),
                shape: vec![ae.latent_dim],
            },
        ],
        layers: b.layers,
        outputs: vec!["prob".into()],
        logits: Some("logit".into()),
    })
}

/// He-normal weights, zero biases, identity batch-norm.
pub fn init_weights(graph: &GraphSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(graph.param_count());
    for layer in &graph.layers {
        for slot in layer.kind.param_slots() {
            match (slot.name, &layer.kind) {
                ("weight", _) => {
                    let fan_in: usize = slot.shape[1..].iter().product();
                    let normal =
                        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    weights.extend((0..slot.len()).map(|_| normal.sample(&mut rng)));
                }
                ("gamma" | "running_var", LayerKind::Batchnorm { .. }) => {
                    weights.extend(std::iter::repeat_n(1.0, slot.len()))
                }
                _ => weights.extend(std::iter::repeat_n(0.0, slot.len())),
            }
        }
    }
    weights
}

/// Mask over the flat weight vector: false for batch-norm running statistics.
pub fn trainable_mask(graph: &GraphSpec) -> Vec<bool> {
    let mut mask = Vec::with_capacity(graph.param_count());
    for layer in &graph.layers {
        for slot in layer.kind.param_slots() {
            let trainable = !matches!(slot.name, "running_mean" | "running_var");
            mask.extend(std::iter::repeat_n(trainable, slot.len()));
        }
    }
    mask
}
