//! Grad-CAM, LIME and occlusion-sensitivity explanations with overlay
//! rendering.
//!
//! LIME and occlusion only need class probabilities, so they accept any
//! [`Classifier`]; Grad-CAM needs layer gradients and takes a
//! [`ModelHandle`].

mod gradcam;
mod lime;
mod occlusion;
mod render;

use serde::{Deserialize, Serialize};

pub use self::gradcam::{cam_from_weights, grad_cam, grad_cam_detailed, GradCam};
pub use self::lime::{
    lime_explain, superpixel_segment, GridSegmenter, LimeBaseline, LimeConfig, LimeExplanation, MaskSampling, Segmentation,
    Segmenter,
};
pub use self::occlusion::{occlusion_positions, occlusion_sensitivity, OcclusionConfig};
pub use self::render::{
    draw_segment_boundaries, encode_png, jet, map_to_rgb, render_overlay, three_panel, to_rgb_image, DEFAULT_OVERLAY_ALPHA,
};

use crate::data::OctImage;
use crate::models::ModelHandle;
use crate::{Error, Result, IMAGE_LEN};

/// Anything that maps images to class probabilities.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// Probabilities for `n` interleaved 224×224×3 images.
    fn probabilities(&self, pixels: &[f32], n: usize) -> Result<Vec<Vec<f64>>>;
}

impl Classifier for ModelHandle {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn probabilities(&self, pixels: &[f32], n: usize) -> Result<Vec<Vec<f64>>> {
        self.forward_pixels(pixels, n)
    }
}

/// Adapts a per-image closure into a [`Classifier`].
pub struct FnClassifier<F> {
    classes: usize,
    f: F,
}

impl<F> FnClassifier<F>
where
    F: Fn(&[f32]) -> Vec<f64> + Sync,
{
    pub fn new(classes: usize, f: F) -> Self {
        FnClassifier { classes, f }
    }
}

impl<F> Classifier for FnClassifier<F>
where
    F: Fn(&[f32]) -> Vec<f64> + Sync,
{
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn probabilities(&self, pixels: &[f32], n: usize) -> Result<Vec<Vec<f64>>> {
        if pixels.len() != n * IMAGE_LEN {
            return Err(Error::ShapeMismatch(format!("{} floats for {n} images", pixels.len())));
        }
        Ok(pixels.chunks_exact(IMAGE_LEN).map(|img| (self.f)(img)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    GradCam,
    Lime,
    Occlusion,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradCam => "gradcam",
            Method::Lime => "lime",
            Method::Occlusion => "occlusion",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "gradcam" => Ok(Method::GradCam),
            "lime" => Ok(Method::Lime),
            "occlusion" => Ok(Method::Occlusion),
            _ => Err(Error::InvalidXaiConfig(format!("unknown method {s:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major `height × width` importance map in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub method: Method,
    pub target_class: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    /// Min-max normalises `raw`; a constant input becomes all zeros.
    pub fn normalized(method: Method, target_class: usize, height: usize, width: usize, raw: &[f64]) -> SaliencyMap {
        SaliencyMap {
            method,
            target_class,
            height,
            width,
            values: min_max_normalize(raw),
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12) || !range.is_finite() {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Which explainer to run and with what settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ExplainRequest {
    GradCam {
        #[serde(default)]
        layer: Option<String>,
    },
    Lime(LimeConfig),
    Occlusion(OcclusionConfig),
}

impl ExplainRequest {
    pub fn method(&self) -> Method {
        match self {
            ExplainRequest::GradCam { .. } => Method::GradCam,
            ExplainRequest::Lime(_) => Method::Lime,
            ExplainRequest::Occlusion(_) => Method::Occlusion,
        }
    }

    /// Default settings for `method`, overridden by the fields present in
    /// `params` (a JSON object; unknown fields are rejected).
    pub fn from_params(method: Method, params: Option<&serde_json::Value>) -> Result<ExplainRequest> {
        let mut obj = match params {
            None | Some(serde_json::Value::Null) => serde_json::Map::new(),
            Some(serde_json::Value::Object(m)) => m.clone(),
            Some(other) => return Err(Error::InvalidXaiConfig(format!("params must be a JSON object, got {other}"))),
        };
        obj.insert("method".into(), serde_json::Value::String(method.as_str().into()));
        let req: ExplainRequest =
            serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| Error::InvalidXaiConfig(e.to_string()))?;
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExplainRequest::GradCam { .. } => Ok(()),
            ExplainRequest::Lime(c) => c.validate(),
            ExplainRequest::Occlusion(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationResult {
    pub map: SaliencyMap,
    /// 224×224×3 overlay in `[0, 1]`.
    #[serde(skip)]
    pub overlay: Vec<f32>,
    pub params: serde_json::Value,
    pub class_probability: f64,
    /// Present for LIME only.
    pub segment_weights: Option<Vec<f64>>,
    #[serde(skip)]
    pub segmentation: Option<Segmentation>,
}

impl ExplanationResult {
    /// Original | map (or LIME boundaries) | overlay, 672×224.
    pub fn figure(&self, image: &OctImage) -> image::RgbImage {
        let middle = match (&self.segmentation, &self.segment_weights) {
            (Some(seg), Some(w)) => draw_segment_boundaries(image, seg, &top_positive(w, 5)),
            _ => map_to_rgb(&self.map),
        };
        three_panel(image.pixels(), &middle, &self.overlay)
    }
}

/// Indices of the `k` largest strictly positive weights.
pub fn top_positive(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    idx.truncate(k);
    idx
}

/// Runs one explainer for `class` (default: the predicted class).
pub fn explain(model: &ModelHandle, image: &OctImage, request: &ExplainRequest, class: Option<usize>) -> Result<ExplanationResult> {
    request.validate()?;
    let probs = model.predict(image)?;
    let class = match class {
        Some(c) if c >= probs.len() => {
            return Err(Error::IndexOutOfRange {
                index: c,
                classes: probs.len(),
            })
        }
        Some(c) => c,
        None => crate::data::argmax_f64(&probs),
    };
    let (map, weights, segmentation) = match request {
        ExplainRequest::GradCam { layer } => (grad_cam(model, image, class, layer.as_deref())?, None, None),
        ExplainRequest::Lime(cfg) => {
            let e = lime_explain(model, image, class, cfg)?;
            (e.map, Some(e.weights), Some(e.segmentation))
        }
        ExplainRequest::Occlusion(cfg) => (occlusion_sensitivity(model, image, class, cfg)?, None, None),
    };
    let mut params = serde_json::to_value(request)?;
    if let (ExplainRequest::GradCam { layer: None }, Some(obj)) = (request, params.as_object_mut()) {
        obj.insert("layer".into(), model.default_cam_layer().into());
    }
    Ok(ExplanationResult {
        overlay: render_overlay(image, &map, DEFAULT_OVERLAY_ALPHA)?,
        map,
        params,
        class_probability: probs[class],
        segment_weights: weights,
        segmentation,
    })
}

fn check_class(class: usize, classes: usize) -> Result<()> {
    if class >= classes {
        return Err(Error::IndexOutOfRange { index: class, classes });
    }
    Ok(())
}
