//! Model zoo: configuration, the [`ModelHandle`] wrapper around a
//! [`Network`], and the checkpoint container.

mod checkpoint;
mod zoo;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_digest, load_checkpoint, save_checkpoint};

use crate::data::OctImage;
use crate::nn::ops::softmax_row;
use crate::nn::{Keep, Mode, Network, NodeId, Tensor};
use crate::{ClassLabel, Error, Result, CHANNELS, IMAGE_SIZE, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    XceptionStyle,
    #[serde(rename = "inceptionv3_style")]
    InceptionV3Style,
    TinyCnn,
    /// Hand-assembled network; cannot be rebuilt from a config alone.
    Custom,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::XceptionStyle => "xception_style",
            Architecture::InceptionV3Style => "inceptionv3_style",
            Architecture::TinyCnn => "tiny_cnn",
            Architecture::Custom => "custom",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xception_style" | "xception" => Ok(Architecture::XceptionStyle),
            "inceptionv3_style" | "inceptionv3" => Ok(Architecture::InceptionV3Style),
            "tiny_cnn" | "tiny" => Ok(Architecture::TinyCnn),
            other => Err(Error::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_classes() -> usize {
    NUM_CLASSES
}

fn default_input() -> [usize; 3] {
    [IMAGE_SIZE, IMAGE_SIZE, CHANNELS]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Scales every layer's channel count (minimum 8 channels).
    #[serde(default = "one")]
    pub width_multiplier: f64,
    /// Scales the number of repeated blocks (Xception middle flow, Inception
    /// module stacks); at least one of each is kept.
    #[serde(default = "one")]
    pub depth_multiplier: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// `[height, width, channels]`
    #[serde(default = "default_input")]
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub rng_seed: u64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> ModelConfig {
        ModelConfig {
            architecture,
            width_multiplier: 1.0,
            depth_multiplier: 1.0,
            num_classes: NUM_CLASSES,
            input_shape: default_input(),
            rng_seed: 0,
        }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width_multiplier = width;
        self
    }

    pub fn with_depth(mut self, depth: f64) -> Self {
        self.depth_multiplier = depth;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return bad(format!("width_multiplier {} not in (0, 1]", self.width_multiplier));
        }
        if !(self.depth_multiplier > 0.0 && self.depth_multiplier <= 1.0) {
            return bad(format!("depth_multiplier {} not in (0, 1]", self.depth_multiplier));
        }
        if !(2..=NUM_CLASSES).contains(&self.num_classes) {
            return bad(format!("num_classes {} not in 2..={NUM_CLASSES}", self.num_classes));
        }
        if self.input_shape[2] != CHANNELS || self.input_shape[0] == 0 || self.input_shape[1] == 0 {
            return bad(format!("input_shape {:?} must be [h, w, 3]", self.input_shape));
        }
        Ok(())
    }

    /// Canonical labels for the model's output columns.
    pub fn class_order(&self) -> Vec<ClassLabel> {
        ClassLabel::ALL[..self.num_classes].to_vec()
    }
}

/// A feature map captured during a forward pass, stored channel-major
/// (`channels × height × width`).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTap {
    pub layer_name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ActivationTap {
    fn from_sample(layer_name: &str, t: &Tensor, sample: usize) -> ActivationTap {
        ActivationTap {
            layer_name: layer_name.to_string(),
            channels: t.channels(),
            height: t.height(),
            width: t.width(),
            values: t.sample(sample).to_vec(),
        }
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> f64 {
        self.values[(k * self.height + y) * self.width + x]
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.values[k * plane..(k + 1) * plane]
    }
}

/// Which scalar a gradient query differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    /// Pre-softmax score of a class.
    Logit(usize),
    /// Log of the softmax probability of a class.
    LogProbability(usize),
}

/// A network together with its config and output class order.
///
/// Immutable use (`forward*`, gradient queries) is thread-safe; training
/// goes through [`ModelHandle::network_mut`].
#[derive(Debug, Clone)]
pub struct ModelHandle {
    config: ModelConfig,
    class_order: Vec<ClassLabel>,
    network: Network,
}

pub fn build_model(config: &ModelConfig) -> Result<ModelHandle> {
    config.validate()?;
    if config.architecture == Architecture::Custom {
        return Err(Error::InvalidConfig(
            "custom architectures are assembled with GraphBuilder, not built from a config".into(),
        ));
    }
    let network = zoo::build(config)?;
    ModelHandle::from_network(config.clone(), network)
}

impl ModelHandle {
    /// Wraps an already assembled network. The network's input and output
    /// shapes must agree with `config`.
    pub fn from_network(config: ModelConfig, network: Network) -> Result<ModelHandle> {
        config.validate()?;
        let [h, w, c] = config.input_shape;
        if network.input_shape() != [c, h, w] {
            return Err(Error::ConfigMismatch(format!(
                "network input {:?} does not match config input {:?}",
                network.input_shape(),
                config.input_shape
            )));
        }
        if network.output_len() != config.num_classes {
            return Err(Error::ConfigMismatch(format!(
                "network emits {} scores for {} classes",
                network.output_len(),
                config.num_classes
            )));
        }
        Ok(ModelHandle {
            class_order: config.class_order(),
            config,
            network,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn name(&self) -> &'static str {
        self.config.architecture.as_str()
    }

    pub fn class_order(&self) -> &[ClassLabel] {
        &self.class_order
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.network.layer_names()
    }

    pub fn parameter_count(&self) -> usize {
        self.network.parameter_count()
    }

    /// Default Grad-CAM layer: the deepest feature map before global pooling.
    pub fn default_cam_layer(&self) -> Option<String> {
        self.network
            .last_spatial_layer()
            .map(|id| self.network.nodes()[id].name.clone())
    }

    fn layer_id(&self, name: &str) -> Result<NodeId> {
        self.network
            .node_id(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Converts `n` interleaved `H×W×3` images into the network layout.
    pub fn input_tensor(&self, pixels: &[f32], n: usize) -> Result<Tensor> {
        let [h, w, c] = self.config.input_shape;
        if n == 0 || pixels.len() != n * h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "expected {n} images of {h}x{w}x{c} ({} floats), got {} floats",
                n * h * w * c,
                pixels.len()
            )));
        }
        Ok(Tensor::from_nhwc(pixels, n, h, w, c))
    }

    fn images_tensor(&self, images: &[OctImage]) -> Result<Tensor> {
        let mut pixels = Vec::with_capacity(images.len() * crate::IMAGE_LEN);
        for img in images {
            pixels.extend_from_slice(img.pixels());
        }
        self.input_tensor(&pixels, images.len())
    }

    /// Raw pre-softmax scores, one row per image.
    pub fn logits_pixels(&self, pixels: &[f32], n: usize) -> Result<Vec<Vec<f64>>> {
        let x = self.input_tensor(pixels, n)?;
        let pass = self.network.forward(&x, Mode::Inference, Keep::Only(vec![]), None)?;
        Ok(rows(pass.output()))
    }

    /// Class probabilities for `n` interleaved `H×W×3` images.
    pub fn forward_pixels(&self, pixels: &[f32], n: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits_pixels(pixels, n)?.iter().map(|r| softmax_row(r)).collect())
    }

    pub fn forward(&self, images: &[OctImage]) -> Result<Vec<Vec<f64>>> {
        let x = self.images_tensor(images)?;
        let pass = self.network.forward(&x, Mode::Inference, Keep::Only(vec![]), None)?;
        Ok(rows(pass.output()).iter().map(|r| softmax_row(r)).collect())
    }

    pub fn predict(&self, image: &OctImage) -> Result<Vec<f64>> {
        Ok(self.forward(std::slice::from_ref(image))?.remove(0))
    }

    /// Probabilities plus the activations of the named layers.
    pub fn forward_with_activations(&self, image: &OctImage, tap_layers: &[&str]) -> Result<(Vec<f64>, Vec<ActivationTap>)> {
        let ids = tap_layers.iter().map(|n| self.layer_id(n)).collect::<Result<Vec<_>>>()?;
        let x = self.images_tensor(std::slice::from_ref(image))?;
        let pass = self.network.forward(&x, Mode::Inference, Keep::Only(ids.clone()), None)?;
        let taps = ids
            .iter()
            .zip(tap_layers)
            .map(|(&id, name)| ActivationTap::from_sample(name, pass.node_output(id).expect("tap retained"), 0))
            .collect();
        Ok((softmax_row(&rows(pass.output())[0]), taps))
    }

    /// Activation of `layer` for one image and the gradient of `target` with
    /// respect to it (same layout as the activation).
    pub fn activation_gradient(&self, pixels: &[f32], layer: &str, target: GradTarget) -> Result<(ActivationTap, Vec<f64>)> {
        let id = self.layer_id(layer)?;
        let x = self.input_tensor(pixels, 1)?;
        let pass = self.network.forward(&x, Mode::Inference, Keep::All, None)?;
        let logits = pass.output().data().to_vec();
        let mut seed = vec![0.0; logits.len()];
        match target {
            GradTarget::Logit(c) => {
                check_class(c, logits.len())?;
                seed[c] = 1.0;
            }
            GradTarget::LogProbability(c) => {
                check_class(c, logits.len())?;
                let p = softmax_row(&logits);
                for (j, s) in seed.iter_mut().enumerate() {
                    *s = if j == c { 1.0 } else { 0.0 } - p[j];
                }
            }
        }
        let seed = Tensor::from_vec(pass.output().shape(), seed);
        let mut grads = self.network.backward(&pass, seed, &[id], false)?;
        let tap = ActivationTap::from_sample(layer, pass.node_output(id).expect("kept"), 0);
        let g = grads
            .nodes
            .remove(&id)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; tap.values.len()]);
        Ok((tap, g))
    }

    /// Logits for one image with `layer`'s activation replaced by `values`.
    pub fn logits_with_activation(&self, pixels: &[f32], layer: &str, values: &[f64]) -> Result<Vec<f64>> {
        let id = self.layer_id(layer)?;
        let x = self.input_tensor(pixels, 1)?;
        let [c, h, w] = self.network.shape_of(id);
        if values.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "activation for {layer:?} needs {} values, got {}",
                c * h * w,
                values.len()
            )));
        }
        let replacement = Tensor::from_vec([1, c, h, w], values.to_vec());
        let pass = self
            .network
            .forward(&x, Mode::Inference, Keep::Only(vec![]), Some((id, &replacement)))?;
        Ok(pass.output().data().to_vec())
    }

    /// `[channels, height, width]` of a layer's output.
    pub fn layer_shape(&self, layer: &str) -> Result<[usize; 3]> {
        Ok(self.network.shape_of(self.layer_id(layer)?))
    }
}

fn check_class(c: usize, n: usize) -> Result<()> {
    if c >= n {
        return Err(Error::IndexOutOfRange { index: c, classes: n });
    }
    Ok(())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|b| t.sample(b).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_pixels(n: usize, len: usize, seed: u64) -> Vec<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n * len).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn tiny_build_is_deterministic() {
        let cfg = ModelConfig::new(Architecture::TinyCnn).with_seed(3);
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(a.network().params(), b.network().params());
        let c = build_model(&cfg.clone().with_seed(4)).unwrap();
        assert_ne!(a.network().params(), c.network().params());
    }

    #[test]
    fn width_multiplier_shrinks_xception() {
        let full = build_model(&ModelConfig::new(Architecture::XceptionStyle)).unwrap();
        let quarter = build_model(&ModelConfig::new(Architecture::XceptionStyle).with_width(0.25)).unwrap();
        assert!(quarter.parameter_count() < full.parameter_count());
        // canonical plan at width 1.0 is in the published ballpark (~20.8M + head)
        let n = full.parameter_count();
        assert!((20_000_000..21_500_000).contains(&n), "{n}");
    }

    #[test]
    fn inception_canonical_plan_size() {
        let full = build_model(&ModelConfig::new(Architecture::InceptionV3Style)).unwrap();
        let n = full.parameter_count();
        // ~21.8M conv parameters plus the 8-way head
        assert!((21_000_000..22_500_000).contains(&n), "{n}");
        assert_eq!(full.default_cam_layer().as_deref(), Some("mixed_7c"));
        assert_eq!(full.layer_shape("mixed_7c").unwrap(), [2048, 5, 5]);
    }

    #[test]
    fn xception_feature_map_is_7x7() {
        let m = build_model(&ModelConfig::new(Architecture::XceptionStyle).with_width(0.25)).unwrap();
        let layer = m.default_cam_layer().unwrap();
        assert_eq!(layer, "block14_sepconv2_act");
        assert_eq!(m.layer_shape(&layer).unwrap(), [512, 7, 7]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            ModelConfig::new(Architecture::TinyCnn).with_width(0.0),
            ModelConfig::new(Architecture::TinyCnn).with_width(1.5),
            ModelConfig {
                num_classes: 1,
                ..ModelConfig::new(Architecture::TinyCnn)
            },
            ModelConfig::new(Architecture::Custom),
        ] {
            assert!(matches!(build_model(&cfg), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn forward_rows_are_probabilities_and_batch_independent() {
        let m = build_model(&ModelConfig::new(Architecture::TinyCnn).with_seed(1)).unwrap();
        let one = random_pixels(1, crate::IMAGE_LEN, 9);
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let out = m.forward_pixels(&two, 2).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], out[1]);
        let s: f64 = out[0].iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(out[0].iter().all(|&p| p >= 0.0));
        assert_eq!(m.forward_pixels(&one, 1).unwrap()[0], out[0]);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let m = build_model(&ModelConfig::new(Architecture::TinyCnn)).unwrap();
        let px = vec![0.5f32; 100 * 100 * 3];
        assert!(matches!(m.forward_pixels(&px, 1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn taps_do_not_perturb_predictions() {
        let m = build_model(&ModelConfig::new(Architecture::TinyCnn).with_seed(2)).unwrap();
        let img = OctImage::new(random_pixels(1, crate::IMAGE_LEN, 4), "mem", (224, 224)).unwrap();
        let plain = m.predict(&img).unwrap();
        let (probs, taps) = m.forward_with_activations(&img, &["conv3_relu", "conv1"]).unwrap();
        for (a, b) in plain.iter().zip(&probs) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert_eq!(taps[0].channels, 32);
        assert_eq!((taps[0].height, taps[0].width), (28, 28));
        assert_eq!(taps[1].layer_name, "conv1");
        let (p2, none) = m.forward_with_activations(&img, &[]).unwrap();
        assert_eq!(p2, probs);
        assert!(none.is_empty());
        assert!(matches!(
            m.forward_with_activations(&img, &["nonexistent"]),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn reduced_xception_and_inception_run_forward() {
        for arch in [Architecture::XceptionStyle, Architecture::InceptionV3Style] {
            let cfg = ModelConfig::new(arch).with_width(0.05).with_depth(0.1);
            let m = build_model(&cfg).unwrap();
            let px = random_pixels(1, crate::IMAGE_LEN, 5);
            let p = m.forward_pixels(&px, 1).unwrap();
            assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
