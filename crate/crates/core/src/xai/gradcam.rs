use super::{check_class, Method, SaliencyMap};
use crate::data::{resize_bilinear, OctImage};
use crate::models::{ActivationTap, GradTarget, ModelHandle};
use crate::{Error, Result, IMAGE_SIZE};

/// Intermediate Grad-CAM quantities, kept for inspection and testing.
#[derive(Debug, Clone)]
pub struct GradCam {
    pub layer: String,
    pub activation: ActivationTap,
    /// `∂ score / ∂ A`, same layout as the activation.
    pub gradient: Vec<f64>,
    /// One weight per channel: the spatial mean of its gradient.
    pub weights: Vec<f64>,
    /// `relu(Σ_k α_k A_k)` at the layer's resolution.
    pub raw: Vec<f64>,
    pub map: SaliencyMap,
}

/// `max(0, Σ_k weights[k] · A_k)` over the tap's spatial grid.
pub fn cam_from_weights(activation: &ActivationTap, weights: &[f64]) -> Vec<f64> {
    let hw = activation.height * activation.width;
    let mut raw = vec![0.0; hw];
    for (k, &a) in weights.iter().enumerate() {
        for (r, &v) in raw.iter_mut().zip(activation.channel(k)) {
            *r += a * v;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    raw
}

pub fn grad_cam_detailed(model: &ModelHandle, image: &OctImage, class: usize, layer: Option<&str>) -> Result<GradCam> {
    check_class(class, model.config().num_classes)?;
    let layer = match layer {
        Some(l) => l.to_string(),
        None => model
            .default_cam_layer()
            .ok_or_else(|| Error::UnknownLayer("<no spatial layer before global pooling>".into()))?,
    };
    let [_, h, w] = model.layer_shape(&layer)?;
    if h < 2 || w < 2 {
        return Err(Error::NonSpatialLayer {
            layer,
            height: h,
            width: w,
        });
    }
    let (activation, gradient) = model.activation_gradient(image.pixels(), &layer, GradTarget::Logit(class))?;
    let hw = (h * w) as f64;
    let weights: Vec<f64> = gradient.chunks_exact(h * w).map(|g| g.iter().sum::<f64>() / hw).collect();
    let raw = cam_from_weights(&activation, &weights);
    let up = resize_bilinear(&raw, h, w, 1, IMAGE_SIZE, IMAGE_SIZE);
    let map = SaliencyMap::normalized(Method::GradCam, class, IMAGE_SIZE, IMAGE_SIZE, &up);
    Ok(GradCam {
        layer,
        activation,
        gradient,
        weights,
        raw,
        map,
    })
}

/// Grad-CAM for `class` at `layer` (default: the deepest spatial layer).
pub fn grad_cam(model: &ModelHandle, image: &OctImage, class: usize, layer: Option<&str>) -> Result<SaliencyMap> {
    Ok(grad_cam_detailed(model, image, class, layer)?.map)
}
