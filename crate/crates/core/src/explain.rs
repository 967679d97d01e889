//! Gradient saliency, class activation maps and heatmap rendering.

use image::{DynamicImage, RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{encode_png, to_u8, Image};
use crate::stats;
use crate::tensor::{LayerKind, Model, OutputSelector, Tensor};

/// Below this normalized value a heatmap pixel is fully transparent.
pub const ALPHA_FLOOR: f64 = 0.05;
/// Percentile (as a level) of the map used as full intensity.
pub const DISPLAY_LEVEL: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Saliency,
    Cam,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(Method::Saliency),
            "cam" => Ok(Method::Cam),
            other => Err(Error::InvalidConfig(format!(
                "unknown explanation method `{other}`"
            ))),
        }
    }
}

/// Row-major scalar map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map2d {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Map2d {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_f32_le(&self) -> Vec<u8> {
        self.values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }
}

/// JSON sidecar describing a raw `float32` map export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub width: usize,
    pub height: usize,
    pub dtype: String,
    pub method: Method,
    pub class: String,
}

impl MapSidecar {
    pub fn new(map: &Map2d, method: Method, class: &str) -> Self {
        Self {
            width: map.width,
            height: map.height,
            dtype: "float32_le".into(),
            method,
            class: class.into(),
        }
    }
}

/// Positive part of the gradient of the selected logit (or of the sum of all
/// logits) with respect to the input image, maximized over input channels.
pub fn saliency(model: &Model, input: &Tensor, selector: OutputSelector) -> Result<Map2d> {
    let grad = model.grad_input(input, selector)?;
    let shape = grad.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "saliency needs a [C, H, W] input, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let g = grad.data();
    let values = (0..h * w)
        .map(|i| (0..c).map(|ch| g[ch * h * w + i]).fold(0.0, f64::max))
        .collect();
    Map2d::new(w, h, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cam {
    /// At the resolution of the last feature maps.
    pub map: Map2d,
    pub class: usize,
    pub bias: f64,
    pub logit: f64,
    /// Input-resolution version, once upsampled.
    pub upsampled: Option<Map2d>,
}

impl Cam {
    pub fn upsample(mut self, width: usize, height: usize) -> Self {
        self.upsampled = Some(upsample_bilinear(&self.map, width, height));
        self
    }
}

/// Class activation map `M_c = sum_k w_ck f_k` for a head of the form
/// features -> global average pool -> linear logits. Other heads fail with
/// `IncompatibleHead`.
pub fn cam(model: &Model, input: &Tensor, class: usize) -> Result<Cam> {
    let graph = model.graph();
    let spec = model.spec();
    let logits_id = graph.logits_id();
    let head_layer = graph
        .layer_of(logits_id)
        .ok_or_else(|| Error::IncompatibleHead("logits node is a graph input".into()))?;
    let head = &spec.layers[head_layer];
    let LayerKind::Dense {
        in_features,
        out_features,
        out_shape: None,
    } = head.kind
    else {
        return Err(Error::IncompatibleHead(format!(
            "logits layer `{}` is not a plain dense layer",
            head.name
        )));
    };
    if class >= out_features {
        return Err(Error::BadClassIndex {
            index: class,
            num_classes: out_features,
        });
    }
    let gap_id = graph.node_id(&head.inputs[0]).expect("compiled wiring");
    let gap_layer = graph
        .layer_of(gap_id)
        .map(|l| &spec.layers[l])
        .filter(|l| l.kind == LayerKind::GlobalAvgPool)
        .ok_or_else(|| {
            Error::IncompatibleHead(format!(
                "`{}` is not fed by global average pooling",
                head.name
            ))
        })?;
    let feat_id = graph
        .node_id(&gap_layer.inputs[0])
        .expect("compiled wiring");
    let fshape = graph.shape(feat_id);
    if fshape.len() != 3 || fshape[0] != in_features {
        return Err(Error::IncompatibleHead(format!(
            "feature maps {fshape:?} are not [C, H, W]"
        )));
    }
    let acts = model.forward(&[input])?;
    let f = acts.by_id(feat_id).data();
    let (k, h, w) = (fshape[0], fshape[1], fshape[2]);
    let params = &model.weights()[graph.param_range(head_layer)];
    let weights = &params[class * k..(class + 1) * k];
    let bias = params[out_features * in_features + class];
    let mut values = vec![0.0; h * w];
    for (ch, &wk) in weights.iter().enumerate() {
        for (v, &fv) in values.iter_mut().zip(&f[ch * h * w..(ch + 1) * h * w]) {
            *v += wk * fv;
        }
    }
    Ok(Cam {
        map: Map2d::new(w, h, values)?,
        class,
        bias,
        logit: acts.by_id(logits_id).data()[class],
        upsampled: None,
    })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(map: &Map2d, width: usize, height: usize) -> Map2d {
    let sx = map.width as f64 / width as f64;
    let sy = map.height as f64 / height as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let mut values = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, sy, map.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, sx, map.width);
            let top = map.get(x0, y0) * (1.0 - fx) + map.get(x1, y0) * fx;
            let bottom = map.get(x0, y1) * (1.0 - fx) + map.get(x1, y1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Map2d {
        width,
        height,
        values,
    }
}

/// Scales the positive part of `values` into `[0, 1]` by its 99th
/// percentile, or by its maximum when that percentile is zero.
pub fn display_normalize(values: &[f64]) -> Vec<f64> {
    let pos: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let mut scale = stats::quantile(&pos, DISPLAY_LEVEL);
    if scale <= 0.0 {
        scale = pos.iter().copied().fold(0.0, f64::max);
    }
    if scale <= 0.0 {
        return vec![0.0; pos.len()];
    }
    pos.iter().map(|v| (v / scale).min(1.0)).collect()
}

/// A red heat layer over a grayscale base image.
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    pub intensity: Vec<f64>,
    pub alpha: Vec<f64>,
    base: Vec<f64>,
}

/// Renders `map` over `base`, which must have the same size.
pub fn render_overlay(map: &Map2d, base: &Image) -> Result<Overlay> {
    let gray = crate::preprocess::to_grayscale(base);
    let (w, h) = (gray.width(), gray.height());
    if map.width != w || map.height != h {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} map over a {w}x{h} image",
            map.width, map.height
        )));
    }
    let intensity = display_normalize(&map.values);
    let alpha = intensity
        .iter()
        .map(|&v| if v < ALPHA_FLOOR { 0.0 } else { v })
        .collect();
    Ok(Overlay {
        width: w,
        height: h,
        intensity,
        alpha,
        base: gray.into_data(),
    })
}

impl Overlay {
    /// Heat layer alone: pure red with per-pixel alpha.
    pub fn heat_png(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self
            .alpha
            .iter()
            .flat_map(|&a| [255, 0, 0, to_u8(a)])
            .collect();
        let img = RgbaImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("sized buffer");
        encode_png(&DynamicImage::ImageRgba8(img))
    }

    /// Heat layer alpha-blended over the base image.
    pub fn composite(&self) -> Vec<[f64; 3]> {
        self.base
            .iter()
            .zip(&self.alpha)
            .map(|(&g, &a)| [(1.0 - a) * g + a, (1.0 - a) * g, (1.0 - a) * g])
            .collect()
    }

    pub fn composite_png(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self
            .composite()
            .iter()
            .flat_map(|px| px.map(to_u8))
            .collect();
        let img =
            RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("sized buffer");
        encode_png(&DynamicImage::ImageRgb8(img))
    }
}
