//! CutMix and MixUp over whole batches, with exact soft-label bookkeeping.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::{Error, Result, CHANNELS, IMAGE_SIZE, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixParams {
    pub alpha_mixup: f64,
    pub alpha_cutmix: f64,
    pub apply_probability: f64,
    pub rng_seed: u64,
}

impl Default for MixParams {
    fn default() -> Self {
        MixParams {
            alpha_mixup: 0.2,
            alpha_cutmix: 1.0,
            apply_probability: 0.5,
            rng_seed: 0,
        }
    }
}

impl MixParams {
    pub fn validate(&self) -> Result<()> {
        for a in [self.alpha_mixup, self.alpha_cutmix] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidAlpha(a));
            }
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::InvalidMixParams(format!(
                "apply_probability {} outside [0, 1]",
                self.apply_probability
            )));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutMixBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CutMixBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMethod {
    None,
    MixUp,
    CutMix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixProvenance {
    pub partner: usize,
    /// Weight of the example's own label.
    pub lambda: f64,
    pub method: MixMethod,
    pub cut_box: Option<CutMixBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub batch: Batch,
    pub provenance: Vec<MixProvenance>,
}

impl MixedBatch {
    pub fn unchanged(batch: &Batch) -> MixedBatch {
        let provenance = (0..batch.len())
            .map(|i| MixProvenance {
                partner: i,
                lambda: 1.0,
                method: MixMethod::None,
                cut_box: None,
            })
            .collect();
        MixedBatch {
            batch: batch.clone(),
            provenance,
        }
    }
}

/// One draw from Beta(α, α).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let beta = Beta::new(alpha, alpha).map_err(|_| Error::InvalidAlpha(alpha))?;
    Ok(beta.sample(rng))
}

pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

fn check_perm(batch: &Batch, perm: &[usize]) -> Result<()> {
    if perm.len() != batch.len() || perm.iter().any(|&p| p >= batch.len()) {
        return Err(Error::ShapeMismatch(format!(
            "partner list of length {} for batch of {}",
            perm.len(),
            batch.len()
        )));
    }
    Ok(())
}

fn mix_labels(batch: &Batch, perm: &[usize], lambdas: &[f64]) -> Vec<f32> {
    let mut labels = Vec::with_capacity(batch.labels.len());
    for (i, (&j, &lam)) in perm.iter().zip(lambdas).enumerate() {
        let own = batch.label(i);
        let other = batch.label(j);
        for c in 0..NUM_CLASSES {
            labels.push((lam * own[c] as f64 + (1.0 - lam) * other[c] as f64) as f32);
        }
    }
    labels
}

/// MixUp with an explicit partner list and coefficient.
pub fn mixup_with(batch: &Batch, perm: &[usize], lambda: f64) -> Result<MixedBatch> {
    check_perm(batch, perm)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidMixParams(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut images = Vec::with_capacity(batch.images.len());
    for (i, &j) in perm.iter().enumerate() {
        for (&a, &b) in batch.image(i).iter().zip(batch.image(j)) {
            let v = (lambda * a as f64 + (1.0 - lambda) * b as f64) as f32;
            images.push(v.clamp(a.min(b), a.max(b)));
        }
    }
    let lambdas = vec![lambda; batch.len()];
    let labels = mix_labels(batch, perm, &lambdas);
    let provenance = perm
        .iter()
        .map(|&j| MixProvenance {
            partner: j,
            lambda,
            method: MixMethod::MixUp,
            cut_box: None,
        })
        .collect();
    Ok(MixedBatch {
        batch: Batch { images, labels },
        provenance,
    })
}

/// Box of side `round(dim·√(1−λ))` centred on `(cx, cy)`, clipped to the image.
pub fn cutmix_box_at(height: usize, width: usize, lambda_raw: f64, cx: usize, cy: usize) -> CutMixBox {
    let frac = (1.0 - lambda_raw.clamp(0.0, 1.0)).sqrt();
    let cut_w = (width as f64 * frac).round() as i64;
    let cut_h = (height as f64 * frac).round() as i64;
    let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
    let x0 = cx as i64 - cut_w / 2;
    let y0 = cy as i64 - cut_h / 2;
    CutMixBox {
        x0: clip(x0, width),
        y0: clip(y0, height),
        x1: clip(x0 + cut_w, width),
        y1: clip(y0 + cut_h, height),
    }
}

pub fn cutmix_box<R: Rng + ?Sized>(height: usize, width: usize, lambda_raw: f64, rng: &mut R) -> CutMixBox {
    let cx = rng.random_range(0..width);
    let cy = rng.random_range(0..height);
    cutmix_box_at(height, width, lambda_raw, cx, cy)
}

/// CutMix with an explicit partner list and box. The label weight is
/// computed from the clipped box, so it always matches the pasted area.
pub fn cutmix_with(batch: &Batch, perm: &[usize], cut: CutMixBox) -> Result<MixedBatch> {
    check_perm(batch, perm)?;
    if cut.x0 > cut.x1 || cut.y0 > cut.y1 || cut.x1 > IMAGE_SIZE || cut.y1 > IMAGE_SIZE {
        return Err(Error::InvalidMixParams(format!("box {cut:?} outside the image")));
    }
    let total = IMAGE_SIZE * IMAGE_SIZE;
    let lambda = (total - cut.area()) as f64 / total as f64;
    let mut images = batch.images.clone();
    let row = IMAGE_SIZE * CHANNELS;
    for (i, &j) in perm.iter().enumerate() {
        let src = batch.image(j);
        let dst = &mut images[i * total * CHANNELS..(i + 1) * total * CHANNELS];
        for y in cut.y0..cut.y1 {
            let span = y * row + cut.x0 * CHANNELS..y * row + cut.x1 * CHANNELS;
            dst[span.clone()].copy_from_slice(&src[span]);
        }
    }
    let lambdas = vec![lambda; batch.len()];
    let labels = mix_labels(batch, perm, &lambdas);
    let provenance = perm
        .iter()
        .map(|&j| MixProvenance {
            partner: j,
            lambda,
            method: MixMethod::CutMix,
            cut_box: Some(cut),
        })
        .collect();
    Ok(MixedBatch {
        batch: Batch { images, labels },
        provenance,
    })
}

fn gate<R: Rng + ?Sized>(params: &MixParams, rng: &mut R) -> Result<bool> {
    params.validate()?;
    Ok(rng.random::<f64>() < params.apply_probability)
}

pub fn mixup_batch<R: Rng + ?Sized>(batch: &Batch, params: &MixParams, rng: &mut R) -> Result<MixedBatch> {
    if !gate(params, rng)? {
        return Ok(MixedBatch::unchanged(batch));
    }
    let perm = random_permutation(batch.len(), rng);
    let lambda = sample_lambda(params.alpha_mixup, rng)?;
    mixup_with(batch, &perm, lambda)
}

pub fn cutmix_batch<R: Rng + ?Sized>(batch: &Batch, params: &MixParams, rng: &mut R) -> Result<MixedBatch> {
    if !gate(params, rng)? {
        return Ok(MixedBatch::unchanged(batch));
    }
    let perm = random_permutation(batch.len(), rng);
    let lambda = sample_lambda(params.alpha_cutmix, rng)?;
    let cut = cutmix_box(IMAGE_SIZE, IMAGE_SIZE, lambda, rng);
    cutmix_with(batch, &perm, cut)
}

/// Training-time policy: with probability `apply_probability` apply exactly
/// one of CutMix or MixUp (chosen uniformly), otherwise pass through.
pub fn augment_batch<R: Rng + ?Sized>(batch: &Batch, params: &MixParams, rng: &mut R) -> Result<MixedBatch> {
    if !gate(params, rng)? {
        return Ok(MixedBatch::unchanged(batch));
    }
    let perm = random_permutation(batch.len(), rng);
    if rng.random_bool(0.5) {
        let lambda = sample_lambda(params.alpha_cutmix, rng)?;
        let cut = cutmix_box(IMAGE_SIZE, IMAGE_SIZE, lambda, rng);
        cutmix_with(batch, &perm, cut)
    } else {
        let lambda = sample_lambda(params.alpha_mixup, rng)?;
        mixup_with(batch, &perm, lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ClassLabel, IMAGE_LEN};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_batch(values: &[f32], classes: &[ClassLabel]) -> Batch {
        let mut images = Vec::new();
        for &v in values {
            images.extend(std::iter::repeat_n(v, IMAGE_LEN));
        }
        let labels = classes.iter().flat_map(|c| c.one_hot()).collect();
        Batch::new(images, labels).unwrap()
    }

    #[test]
    fn uniform_beta_has_mean_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mean: f64 = (0..10_000).map(|_| sample_lambda(1.0, &mut rng).unwrap()).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn lambda_is_deterministic_and_validated() {
        let draw = || sample_lambda(0.2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(draw(), draw());
        assert!(matches!(sample_lambda(-1.0, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::InvalidAlpha(_))));
        assert!(matches!(sample_lambda(0.0, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::InvalidAlpha(_))));
    }

    #[test]
    fn mixup_lambda_one_is_identity() {
        let b = constant_batch(&[0.1, 0.9], &[ClassLabel::Amd, ClassLabel::Mh]);
        let m = mixup_with(&b, &[1, 0], 1.0).unwrap();
        assert_eq!(m.batch, b);
    }

    #[test]
    fn mixup_of_two_constants_at_half() {
        let b = constant_batch(&[0.2, 0.8], &[ClassLabel::Cnv, ClassLabel::Dme]);
        let m = mixup_with(&b, &[1, 0], 0.5).unwrap();
        assert!(m.batch.images.iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert_eq!(m.batch.label(0)[1], 0.5);
        assert_eq!(m.batch.label(0)[3], 0.5);
    }

    #[test]
    fn mixup_label_arithmetic() {
        let b = constant_batch(&[0.0, 1.0], &[ClassLabel::Csr, ClassLabel::Normal]);
        let m = mixup_with(&b, &[1, 0], 0.7).unwrap();
        let row = m.batch.label(0);
        assert!((row[2] - 0.7).abs() < 1e-7 && (row[7] - 0.3).abs() < 1e-7);
        assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 2);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn box_geometry() {
        assert_eq!(cutmix_box_at(224, 224, 1.0, 50, 70).area(), 0);
        assert_eq!(
            cutmix_box_at(224, 224, 0.0, 112, 112),
            CutMixBox { x0: 0, y0: 0, x1: 224, y1: 224 }
        );
        let b = cutmix_box_at(224, 224, 0.75, 112, 112);
        assert_eq!((b.x1 - b.x0, b.y1 - b.y0), (112, 112));
        assert_eq!(b.area() as f64 / 50176.0, 0.25);
        // corner centre is clipped
        let c = cutmix_box_at(224, 224, 0.75, 0, 223);
        assert_eq!(c, CutMixBox { x0: 0, y0: 167, x1: 56, y1: 224 });
    }

    #[test]
    fn cutmix_pastes_exactly_the_box() {
        let b = constant_batch(&[0.25, 0.75], &[ClassLabel::Dr, ClassLabel::Drusen]);
        let cut = cutmix_box_at(224, 224, 0.75, 112, 112);
        let m = cutmix_with(&b, &[1, 0], cut).unwrap();
        assert_eq!(m.provenance[0].lambda, 1.0 - 12544.0 / 50176.0);
        let img = m.batch.image(0);
        let mut pasted = 0;
        for y in 0..224 {
            for x in 0..224 {
                let v = img[(y * 224 + x) * 3];
                if cut.contains(y, x) {
                    assert_eq!(v, 0.75);
                    pasted += 1;
                } else {
                    assert_eq!(v, 0.25);
                }
            }
        }
        assert_eq!(pasted, 12544);
        assert_eq!(m.batch.label(0)[4], 0.75);
        assert_eq!(m.batch.label(0)[5], 0.25);
    }

    #[test]
    fn cutmix_extreme_boxes() {
        let b = constant_batch(&[0.25, 0.75], &[ClassLabel::Dr, ClassLabel::Drusen]);
        let empty = cutmix_with(&b, &[1, 0], cutmix_box_at(224, 224, 1.0, 3, 3)).unwrap();
        assert_eq!(empty.batch, b);
        assert_eq!(empty.provenance[0].lambda, 1.0);
        let full = cutmix_with(&b, &[1, 0], cutmix_box_at(224, 224, 0.0, 112, 112)).unwrap();
        assert_eq!(full.batch.image(0), b.image(1));
        assert_eq!(full.batch.label(0), &ClassLabel::Drusen.one_hot());
    }

    #[test]
    fn zero_probability_passes_through() {
        let b = constant_batch(&[0.1, 0.2, 0.3], &[ClassLabel::Amd, ClassLabel::Cnv, ClassLabel::Mh]);
        let p = MixParams {
            apply_probability: 0.0,
            ..MixParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(mixup_batch(&b, &p, &mut rng).unwrap().batch, b);
            assert_eq!(cutmix_batch(&b, &p, &mut rng).unwrap().batch, b);
            assert_eq!(augment_batch(&b, &p, &mut rng).unwrap().batch, b);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let b = constant_batch(&[0.1], &[ClassLabel::Amd]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = MixParams {
            apply_probability: 1.5,
            ..MixParams::default()
        };
        assert!(matches!(augment_batch(&b, &bad, &mut rng), Err(Error::InvalidMixParams(_))));
        let bad = MixParams {
            alpha_mixup: 0.0,
            ..MixParams::default()
        };
        assert!(matches!(mixup_batch(&b, &bad, &mut rng), Err(Error::InvalidAlpha(_))));
    }
}
