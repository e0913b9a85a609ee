use serde::{Deserialize, Serialize};

use super::{check_class, Classifier, Method, SaliencyMap};
use crate::data::OctImage;
use crate::{Error, Result, CHANNELS, IMAGE_LEN, IMAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub baseline_value: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig {
            patch_size: 32,
            stride: 16,
            baseline_value: 0.5,
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.stride && self.stride <= self.patch_size && self.patch_size <= IMAGE_SIZE) {
            return Err(Error::InvalidXaiConfig(format!(
                "need 1 <= stride ({}) <= patch_size ({}) <= {IMAGE_SIZE}",
                self.stride, self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.baseline_value) {
            return Err(Error::InvalidXaiConfig(format!(
                "baseline_value {} outside [0, 1]",
                self.baseline_value
            )));
        }
        Ok(())
    }
}

/// Top-left corners `(y, x)` of every patch, row by row.
pub fn occlusion_positions(cfg: &OcclusionConfig) -> Vec<(usize, usize)> {
    let starts: Vec<usize> = (0..=IMAGE_SIZE - cfg.patch_size).step_by(cfg.stride).collect();
    starts.iter().flat_map(|&y| starts.iter().map(move |&x| (y, x))).collect()
}

fn occlude(out: &mut [f32], image: &[f32], y0: usize, x0: usize, cfg: &OcclusionConfig) {
    out.copy_from_slice(image);
    let v = cfg.baseline_value as f32;
    for y in y0..y0 + cfg.patch_size {
        let row = (y * IMAGE_SIZE + x0) * CHANNELS;
        out[row..row + cfg.patch_size * CHANNELS].fill(v);
    }
}

const EVAL_BATCH: usize = 16;

/// Probability drop of `class` when each patch is greyed out, averaged over
/// overlapping patches, floored at zero and normalised.
pub fn occlusion_sensitivity<C: Classifier + ?Sized>(
    model: &C,
    image: &OctImage,
    class: usize,
    cfg: &OcclusionConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    check_class(class, model.num_classes())?;
    let base = model.probabilities(image.pixels(), 1)?[0][class];
    let positions = occlusion_positions(cfg);
    let mut sum = vec![0.0f64; IMAGE_SIZE * IMAGE_SIZE];
    let mut count = vec![0u32; IMAGE_SIZE * IMAGE_SIZE];
    let mut buf = Vec::new();
    for chunk in positions.chunks(EVAL_BATCH) {
        buf.resize(chunk.len() * IMAGE_LEN, 0.0);
        for (&(y, x), out) in chunk.iter().zip(buf.chunks_exact_mut(IMAGE_LEN)) {
            occlude(out, image.pixels(), y, x, cfg);
        }
        let probs = model.probabilities(&buf, chunk.len())?;
        for (&(y0, x0), p) in chunk.iter().zip(probs) {
            let drop = base - p[class];
            for y in y0..y0 + cfg.patch_size {
                for x in x0..x0 + cfg.patch_size {
                    sum[y * IMAGE_SIZE + x] += drop;
                    count[y * IMAGE_SIZE + x] += 1;
                }
            }
        }
    }
    let raw: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64).max(0.0) })
        .collect();
    Ok(SaliencyMap::normalized(Method::Occlusion, class, IMAGE_SIZE, IMAGE_SIZE, &raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xai::FnClassifier;

    #[test]
    fn default_grid_has_169_positions() {
        let p = occlusion_positions(&OcclusionConfig::default());
        assert_eq!(p.len(), 169);
        assert_eq!(p[0], (0, 0));
        assert_eq!(*p.last().unwrap(), (192, 192));
    }

    #[test]
    fn constant_model_gives_zero_map() {
        let model = FnClassifier::new(3, |_| vec![0.2, 0.3, 0.5]);
        let img = OctImage::new(vec![0.9; IMAGE_LEN], "c", (224, 224)).unwrap();
        let m = occlusion_sensitivity(&model, &img, 1, &OcclusionConfig::default()).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn region_model_peaks_on_its_cell() {
        // probability = mean of the 32x32 block at rows 64..96, cols 128..160
        let model = FnClassifier::new(2, |px: &[f32]| {
            let mut s = 0.0;
            for y in 64..96 {
                for x in 128..160 {
                    s += px[(y * 224 + x) * 3] as f64;
                }
            }
            let p = s / 1024.0;
            vec![p, 1.0 - p]
        });
        let img = OctImage::new(vec![1.0; IMAGE_LEN], "white", (224, 224)).unwrap();
        let cfg = OcclusionConfig {
            patch_size: 32,
            stride: 32,
            baseline_value: 0.0,
        };
        let m = occlusion_sensitivity(&model, &img, 0, &cfg).unwrap();
        for y in 0..224 {
            for x in 0..224 {
                let inside = (64..96).contains(&y) && (128..160).contains(&x);
                assert_eq!(m.get(y, x), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            OcclusionConfig { stride: 0, ..OcclusionConfig::default() },
            OcclusionConfig { stride: 40, ..OcclusionConfig::default() },
            OcclusionConfig { patch_size: 300, stride: 16, ..OcclusionConfig::default() },
            OcclusionConfig { baseline_value: 2.0, ..OcclusionConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
