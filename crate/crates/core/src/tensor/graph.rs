use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_true() -> bool {
    true
}

/// Layer kinds understood by the engine. Every kind has a forward pass and an
/// adjoint; manifests naming anything else deserialize to `Unsupported`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        /// Symmetric zero padding on every spatial border.
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Fully connected layer over the flattened input. `out_shape` optionally
    /// reshapes the output vector (decoder stems).
    Dense {
        in_features: usize,
        out_features: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        out_shape: Option<Vec<usize>>,
    },
    /// Inference-mode batch normalization over dimension 0.
    Batchnorm {
        channels: usize,
        eps: f64,
    },
    Relu,
    Sigmoid,
    Tanh,
    Avgpool {
        kernel: usize,
        stride: usize,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Concatenation along dimension 0 (channels).
    Concat,
    UpsampleNearest {
        factor: usize,
    },
    #[serde(other)]
    Unsupported,
}

/// A named parameter tensor owned by a layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    fn new(name: &'static str, shape: Vec<usize>) -> Self {
        Self { name, shape }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LayerKind {
    /// Parameter slots in serialization order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut slots = vec![ParamSlot::new(
                    "weight",
                    vec![out_channels, in_channels, kernel, kernel],
                )];
                if bias {
                    slots.push(ParamSlot::new("bias", vec![out_channels]));
                }
                slots
            }
            LayerKind::Dense {
                in_features,
                out_features,
                ..
            } => vec![
                ParamSlot::new("weight", vec![out_features, in_features]),
                ParamSlot::new("bias", vec![out_features]),
            ],
            LayerKind::Batchnorm { channels, .. } => vec![
                ParamSlot::new("gamma", vec![channels]),
                ParamSlot::new("beta", vec![channels]),
                ParamSlot::new("running_mean", vec![channels]),
                ParamSlot::new("running_var", vec![channels]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_slots().iter().map(ParamSlot::len).sum()
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Batchnorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Tanh => "tanh",
            LayerKind::Avgpool { .. } => "avgpool",
            LayerKind::Maxpool { .. } => "maxpool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Concat => "concat",
            LayerKind::UpsampleNearest { .. } => "upsample_nearest",
            LayerKind::Unsupported => "unsupported",
        }
    }

    /// Output shape for the given input shapes, validating hyperparameters.
    fn output_shape(&self, layer: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let bad = |msg: String| Error::InvalidGraph(format!("layer `{layer}`: {msg}"));
        let single = || -> Result<&[usize]> {
            match inputs {
                [one] => Ok(*one),
                _ => Err(bad(format!("expects 1 input, got {}", inputs.len()))),
            }
        };
        let spatial = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(bad(format!("expects a [C, H, W] input, got {s:?}"))),
            }
        };
        match self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (c, h, w) = spatial(single()?)?;
                if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                    return Err(bad(
                        "kernel, stride and out_channels must be positive".into()
                    ));
                }
                if c != *in_channels {
                    return Err(bad(format!("in_channels {in_channels} but input has {c}")));
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(bad(format!(
                        "kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerKind::Dense {
                in_features,
                out_features,
                out_shape,
            } => {
                let n: usize = single()?.iter().product();
                if n != *in_features {
                    return Err(bad(format!("in_features {in_features} but input has {n}")));
                }
                if *out_features == 0 {
                    return Err(bad("out_features must be positive".into()));
                }
                match out_shape {
                    Some(s) if s.iter().product::<usize>() != *out_features || s.contains(&0) => {
                        Err(bad(format!(
                            "out_shape {s:?} does not hold {out_features} values"
                        )))
                    }
                    Some(s) => Ok(s.clone()),
                    None => Ok(vec![*out_features]),
                }
            }
            LayerKind::Batchnorm { channels, eps } => {
                let s = single()?;
                if s[0] != *channels {
                    return Err(bad(format!("channels {channels} but input has {}", s[0])));
                }
                if !(*eps > 0.0) {
                    return Err(bad("eps must be positive".into()));
                }
                Ok(s.to_vec())
            }
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Tanh => Ok(single()?.to_vec()),
            LayerKind::Avgpool { kernel, stride } | LayerKind::Maxpool { kernel, stride } => {
                let (c, h, w) = spatial(single()?)?;
                if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                    return Err(bad(format!(
                        "pool kernel {kernel}/stride {stride} on {h}x{w}"
                    )));
                }
                Ok(vec![
                    c,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = spatial(single()?)?;
                Ok(vec![c])
            }
            LayerKind::Concat => {
                let first = inputs
                    .first()
                    .ok_or_else(|| bad("concat needs inputs".into()))?;
                let mut channels = 0;
                for s in inputs {
                    if s.len() != first.len() || s[1..] != first[1..] {
                        return Err(bad(format!(
                            "concat inputs must agree except in dim 0: {first:?} vs {s:?}"
                        )));
                    }
                    channels += s[0];
                }
                let mut out = first.to_vec();
                out[0] = channels;
                Ok(out)
            }
            LayerKind::UpsampleNearest { factor } => {
                let (c, h, w) = spatial(single()?)?;
                if *factor == 0 {
                    return Err(bad("factor must be positive".into()));
                }
                Ok(vec![c, h * factor, w * factor])
            }
            LayerKind::Unsupported => Err(Error::UnsupportedLayer(layer.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Layer DAG. The first declared input is the image input; further inputs
/// (e.g. a discriminator's latent code) are auxiliary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub inputs: Vec<InputSpec>,
    pub layers: Vec<LayerSpec>,
    pub outputs: Vec<String>,
    /// Pre-activation node that explanations differentiate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<String>,
}

impl GraphSpec {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kind.param_count()).sum()
    }

    pub fn compile(&self) -> Result<CompiledGraph> {
        CompiledGraph::new(self.clone())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// A validated graph with resolved wiring, inferred shapes and parameter offsets.
///
/// Node ids: graph inputs first, then one node per layer in declaration order.
#[derive(Debug, Clone)]
pub struct CompiledGraph {
    spec: GraphSpec,
    shapes: Vec<Vec<usize>>,
    wiring: Vec<Vec<usize>>,
    param_offsets: Vec<usize>,
    param_count: usize,
    index: HashMap<String, usize>,
    outputs: Vec<usize>,
    logits: usize,
}

impl CompiledGraph {
    fn new(spec: GraphSpec) -> Result<Self> {
        if spec.inputs.is_empty() {
            return Err(Error::InvalidGraph("graph declares no inputs".into()));
        }
        let mut index = HashMap::new();
        let mut shapes = Vec::new();
        for input in &spec.inputs {
            if input.shape.is_empty() || input.shape.contains(&0) {
                return Err(Error::InvalidGraph(format!(
                    "input `{}` has empty shape",
                    input.name
                )));
            }
            if index.insert(input.name.clone(), shapes.len()).is_some() {
                return Err(Error::InvalidGraph(format!(
                    "duplicate node `{}`",
                    input.name
                )));
            }
            shapes.push(input.shape.clone());
        }
        let mut wiring = Vec::with_capacity(spec.layers.len());
        let mut param_offsets = Vec::with_capacity(spec.layers.len());
        let mut offset = 0;
        for layer in &spec.layers {
            // Inputs must already be defined, which also rules out cycles.
            let ids = layer
                .inputs
                .iter()
                .map(|name| {
                    index.get(name).copied().ok_or_else(|| {
                        Error::InvalidGraph(format!(
                            "layer `{}` reads `{name}` before it is defined",
                            layer.name
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let in_shapes: Vec<&[usize]> = ids.iter().map(|&i| shapes[i].as_slice()).collect();
            let out = layer.kind.output_shape(&layer.name, &in_shapes)?;
            if index.insert(layer.name.clone(), shapes.len()).is_some() {
                return Err(Error::InvalidGraph(format!(
                    "duplicate node `{}`",
                    layer.name
                )));
            }
            shapes.push(out);
            wiring.push(ids);
            param_offsets.push(offset);
            offset += layer.kind.param_count();
        }
        let lookup = |name: &String| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidGraph(format!("unknown output `{name}`")))
        };
        let outputs = spec
            .outputs
            .iter()
            .map(lookup)
            .collect::<Result<Vec<_>>>()?;
        let primary = *outputs
            .first()
            .ok_or_else(|| Error::InvalidGraph("graph declares no outputs".into()))?;
        let logits = match &spec.logits {
            Some(name) => lookup(name)?,
            None => primary,
        };
        Ok(Self {
            spec,
            shapes,
            wiring,
            param_offsets,
            param_count: offset,
            index,
            outputs,
            logits,
        })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn num_inputs(&self) -> usize {
        self.spec.inputs.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.shapes.len()
    }

    pub fn node_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn node_name(&self, id: usize) -> &str {
        let n = self.num_inputs();
        if id < n {
            &self.spec.inputs[id].name
        } else {
            &self.spec.layers[id - n].name
        }
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.shapes[id]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_ids(&self) -> &[usize] {
        &self.outputs
    }

    pub fn primary_output(&self) -> usize {
        self.outputs[0]
    }

    pub fn logits_id(&self) -> usize {
        self.logits
    }

    pub(crate) fn layer_wiring(&self, layer: usize) -> &[usize] {
        &self.wiring[layer]
    }

    /// Range of the flat weight vector owned by `layer`.
    pub fn param_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.param_offsets[layer];
        start..start + self.spec.layers[layer].kind.param_count()
    }

    /// Layer index producing node `id`, if it is not a graph input.
    pub fn layer_of(&self, id: usize) -> Option<usize> {
        id.checked_sub(self.num_inputs())
    }
}
