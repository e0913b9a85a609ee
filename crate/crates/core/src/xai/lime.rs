use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_class, Classifier, Method, SaliencyMap};
use crate::data::OctImage;
use crate::{Error, Result, CHANNELS, IMAGE_LEN, IMAGE_SIZE};

/// Segment id per pixel, row-major, ids contiguous in `0..count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub labels: Vec<u32>,
}

impl Segmentation {
    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

pub trait Segmenter {
    fn segment(&self, image: &OctImage, num_superpixels: usize) -> Result<Segmentation>;
}

/// Tiles the image into a `√n × √n` grid of (near-)equal cells.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridSegmenter;

impl Segmenter for GridSegmenter {
    fn segment(&self, _image: &OctImage, n: usize) -> Result<Segmentation> {
        let side = (n as f64).sqrt().round() as usize;
        if n == 0 || side * side != n || side > IMAGE_SIZE {
            return Err(Error::InvalidSegmentCount(n));
        }
        let mut labels = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
        for y in 0..IMAGE_SIZE {
            let row = y * side / IMAGE_SIZE;
            for x in 0..IMAGE_SIZE {
                labels.push((row * side + x * side / IMAGE_SIZE) as u32);
            }
        }
        Ok(Segmentation {
            height: IMAGE_SIZE,
            width: IMAGE_SIZE,
            count: n,
            labels,
        })
    }
}

pub fn superpixel_segment(image: &OctImage, num_superpixels: usize) -> Result<Segmentation> {
    GridSegmenter.segment(image, num_superpixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimeBaseline {
    /// Hidden segments take their own mean colour.
    MeanColor,
    /// Hidden segments take `gray_level` in every channel.
    Gray,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSampling {
    /// The all-on mask followed by `num_samples − 1` Bernoulli masks.
    Random,
    /// Every one of the `2^n` masks; `num_samples` is ignored.
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimeConfig {
    pub num_superpixels: usize,
    pub num_samples: usize,
    pub kernel_width: f64,
    pub ridge_penalty: f64,
    pub baseline: LimeBaseline,
    pub gray_level: f64,
    pub keep_probability: f64,
    pub sampling: MaskSampling,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            num_superpixels: 49,
            num_samples: 1000,
            kernel_width: 0.25,
            ridge_penalty: 1.0,
            baseline: LimeBaseline::MeanColor,
            gray_level: 0.5,
            keep_probability: 0.5,
            sampling: MaskSampling::Random,
            seed: 0,
        }
    }
}

const MAX_EXHAUSTIVE_SEGMENTS: usize = 16;

impl LimeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidXaiConfig(m));
        if self.num_superpixels == 0 {
            return Err(Error::InvalidSegmentCount(0));
        }
        match self.sampling {
            MaskSampling::Random if self.num_samples < self.num_superpixels => {
                return bad(format!(
                    "num_samples ({}) must be at least num_superpixels ({})",
                    self.num_samples, self.num_superpixels
                ))
            }
            MaskSampling::Exhaustive if self.num_superpixels > MAX_EXHAUSTIVE_SEGMENTS => {
                return bad(format!("exhaustive sampling supports at most {MAX_EXHAUSTIVE_SEGMENTS} segments"))
            }
            _ => {}
        }
        if !(self.kernel_width > 0.0 && self.kernel_width.is_finite()) {
            return bad(format!("kernel_width must be positive, got {}", self.kernel_width));
        }
        if !(self.ridge_penalty >= 0.0 && self.ridge_penalty.is_finite()) {
            return bad(format!("ridge_penalty must be >= 0, got {}", self.ridge_penalty));
        }
        if !(0.0..=1.0).contains(&self.keep_probability) || !(0.0..=1.0).contains(&self.gray_level) {
            return bad("keep_probability and gray_level must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LimeExplanation {
    /// One weight per segment; may be negative.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub map: SaliencyMap,
    pub segmentation: Segmentation,
    pub masks: Vec<Vec<bool>>,
    /// Class probability of each perturbed image.
    pub responses: Vec<f64>,
    /// Proximity weight of each sample.
    pub kernel_weights: Vec<f64>,
    pub class_probability: f64,
}

fn sample_masks(cfg: &LimeConfig) -> Vec<Vec<bool>> {
    let n = cfg.num_superpixels;
    match cfg.sampling {
        MaskSampling::Exhaustive => (0..1usize << n).map(|bits| (0..n).map(|j| bits >> j & 1 == 1).collect()).collect(),
        MaskSampling::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut masks = vec![vec![true; n]];
            for _ in 1..cfg.num_samples {
                masks.push((0..n).map(|_| rng.random_bool(cfg.keep_probability)).collect());
            }
            masks
        }
    }
}

/// Per-segment replacement colours.
fn baseline_colors(image: &OctImage, seg: &Segmentation, cfg: &LimeConfig) -> Vec<[f32; CHANNELS]> {
    match cfg.baseline {
        LimeBaseline::Gray => vec![[cfg.gray_level as f32; CHANNELS]; seg.count],
        LimeBaseline::MeanColor => {
            let mut sums = vec![[0.0f64; CHANNELS]; seg.count];
            let sizes = seg.sizes();
            for (p, &l) in image.pixels().chunks_exact(CHANNELS).zip(&seg.labels) {
                for c in 0..CHANNELS {
                    sums[l as usize][c] += p[c] as f64;
                }
            }
            sums.iter()
                .zip(&sizes)
                .map(|(s, &n)| {
                    let n = n.max(1) as f64;
                    [(s[0] / n) as f32, (s[1] / n) as f32, (s[2] / n) as f32]
                })
                .collect()
        }
    }
}

/// Writes the image with every segment whose mask bit is off replaced by
/// its baseline colour.
pub(crate) fn perturb_into(out: &mut [f32], image: &[f32], seg: &Segmentation, mask: &[bool], colors: &[[f32; CHANNELS]]) {
    for ((o, p), &l) in out.chunks_exact_mut(CHANNELS).zip(image.chunks_exact(CHANNELS)).zip(&seg.labels) {
        let l = l as usize;
        if mask[l] {
            o.copy_from_slice(p);
        } else {
            o.copy_from_slice(&colors[l]);
        }
    }
}

/// Weighted ridge with an unpenalised intercept:
/// `argmin Σ_s π_s (y_s − z_s·w − b)² + λ‖w‖²`.
pub(crate) fn weighted_ridge(z: &[Vec<f64>], y: &[f64], pi: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let n = z[0].len();
    let sw: f64 = pi.iter().sum();
    let mut zbar = vec![0.0; n];
    let mut ybar = 0.0;
    for ((zs, &ys), &p) in z.iter().zip(y).zip(pi) {
        for j in 0..n {
            zbar[j] += p * zs[j];
        }
        ybar += p * ys;
    }
    zbar.iter_mut().for_each(|v| *v /= sw);
    ybar /= sw;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut zc = vec![0.0; n];
    for ((zs, &ys), &p) in z.iter().zip(y).zip(pi) {
        for j in 0..n {
            zc[j] = zs[j] - zbar[j];
        }
        let yc = ys - ybar;
        for i in 0..n {
            rhs[i] += p * zc[i] * yc;
            for j in 0..=i {
                a[(i, j)] += p * zc[i] * zc[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
        a[(i, i)] += lambda;
    }
    let w = match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(n)),
    };
    let w: Vec<f64> = w.iter().copied().collect();
    let b = ybar - zbar.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    (w, b)
}

const EVAL_BATCH: usize = 16;

pub fn lime_explain<C: Classifier + ?Sized>(model: &C, image: &OctImage, class: usize, cfg: &LimeConfig) -> Result<LimeExplanation> {
    cfg.validate()?;
    check_class(class, model.num_classes())?;
    let seg = superpixel_segment(image, cfg.num_superpixels)?;
    let masks = sample_masks(cfg);
    if masks.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::DegenerateSampling(format!(
            "all {} sampled masks are identical",
            masks.len()
        )));
    }
    let colors = baseline_colors(image, &seg, cfg);
    let mut responses = Vec::with_capacity(masks.len());
    let mut buf = Vec::new();
    for chunk in masks.chunks(EVAL_BATCH) {
        buf.resize(chunk.len() * IMAGE_LEN, 0.0);
        for (mask, out) in chunk.iter().zip(buf.chunks_exact_mut(IMAGE_LEN)) {
            perturb_into(out, image.pixels(), &seg, mask, &colors);
        }
        for p in model.probabilities(&buf, chunk.len())? {
            responses.push(p[class]);
        }
    }
    let n = cfg.num_superpixels as f64;
    let kw2 = cfg.kernel_width * cfg.kernel_width;
    let kernel_weights: Vec<f64> = masks
        .iter()
        .map(|m| {
            let off = 1.0 - m.iter().filter(|&&b| b).count() as f64 / n;
            (-(off * off) / kw2).exp()
        })
        .collect();
    let z: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let (weights, intercept) = weighted_ridge(&z, &responses, &kernel_weights, cfg.ridge_penalty);
    let raw: Vec<f64> = seg.labels.iter().map(|&l| weights[l as usize].max(0.0)).collect();
    let map = SaliencyMap::normalized(Method::Lime, class, IMAGE_SIZE, IMAGE_SIZE, &raw);
    let class_probability = model.probabilities(image.pixels(), 1)?[0][class];
    Ok(LimeExplanation {
        weights,
        intercept,
        map,
        segmentation: seg,
        masks,
        responses,
        kernel_weights,
        class_probability,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xai::FnClassifier;

    fn image(v: f32) -> OctImage {
        OctImage::new(vec![v; IMAGE_LEN], "const", (224, 224)).unwrap()
    }

    #[test]
    fn grid_of_49_has_32px_cells() {
        let seg = superpixel_segment(&image(0.5), 49).unwrap();
        assert!(seg.sizes().iter().all(|&s| s == 32 * 32));
        assert_eq!(seg.label(0, 0), 0);
        assert_eq!(seg.label(31, 32), 1);
        assert_eq!(seg.label(32, 0), 7);
        assert_eq!(seg.label(223, 223), 48);
    }

    #[test]
    fn single_segment_and_bad_counts() {
        let seg = superpixel_segment(&image(0.5), 1).unwrap();
        assert!(seg.labels.iter().all(|&l| l == 0));
        for n in [0, 2, 48, 50] {
            assert!(matches!(superpixel_segment(&image(0.5), n), Err(Error::InvalidSegmentCount(_))));
        }
    }

    #[test]
    fn non_square_grid_is_total() {
        let seg = superpixel_segment(&image(0.5), 9).unwrap();
        let sizes = seg.sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 224 * 224);
        assert!(sizes.iter().all(|&s| s > 0));
    }

    #[test]
    fn constant_model_gets_zero_weights() {
        let model = FnClassifier::new(8, |_| vec![0.125; 8]);
        let cfg = LimeConfig {
            num_samples: 200,
            ..LimeConfig::default()
        };
        let e = lime_explain(&model, &image(0.3), 2, &cfg).unwrap();
        assert!(e.weights.iter().all(|w| w.abs() < 1e-6));
        assert!((e.intercept - 0.125).abs() < 1e-9);
        assert!(e.map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_sampling_is_reported() {
        let model = FnClassifier::new(2, |_| vec![0.5, 0.5]);
        let cfg = LimeConfig {
            num_superpixels: 4,
            num_samples: 5,
            keep_probability: 1.0,
            ..LimeConfig::default()
        };
        assert!(matches!(lime_explain(&model, &image(0.3), 0, &cfg), Err(Error::DegenerateSampling(_))));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let model = FnClassifier::new(2, |px: &[f32]| {
            let m = px.iter().take(3000).map(|&v| v as f64).sum::<f64>() / 3000.0;
            vec![m, 1.0 - m]
        });
        let img = OctImage::new((0..IMAGE_LEN).map(|i| (i % 97) as f32 / 97.0).collect(), "ramp", (224, 224)).unwrap();
        let cfg = LimeConfig {
            num_superpixels: 16,
            num_samples: 64,
            ..LimeConfig::default()
        };
        let a = lime_explain(&model, &img, 0, &cfg).unwrap();
        let b = lime_explain(&model, &img, 0, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.masks[0], vec![true; 16]);
    }

    #[test]
    fn config_validation() {
        let bad = [
            LimeConfig { num_samples: 10, ..LimeConfig::default() },
            LimeConfig { kernel_width: 0.0, ..LimeConfig::default() },
            LimeConfig { ridge_penalty: -1.0, ..LimeConfig::default() },
            LimeConfig { sampling: MaskSampling::Exhaustive, ..LimeConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidXaiConfig(_))), "{cfg:?}");
        }
    }
}
