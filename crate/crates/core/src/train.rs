//! Optimisation loop: cross-entropy, Adam, early stopping and history.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, MixParams};
use crate::data::{argmax_f64 as argmax, batch_iterator, Batch, DatasetManifest, Split};
use crate::models::ModelHandle;
use crate::nn::ops::softmax_row;
use crate::nn::{Keep, Mode, Param, Tensor};
use crate::{Error, Result};

/// Probabilities are clipped to `[CLIP_EPSILON, 1 - CLIP_EPSILON]` before the log.
pub const CLIP_EPSILON: f64 = 1e-7;

/// Mean over rows of `-Σ_c t_c · ln(clip(p_c))`.
pub fn categorical_crossentropy(probs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows vs {} target rows",
            probs.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in probs.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::ShapeMismatch(format!("row widths {} vs {}", p.len(), t.len())));
        }
        total -= p
            .iter()
            .zip(t)
            .map(|(&p, &t)| t * p.clamp(CLIP_EPSILON, 1.0 - CLIP_EPSILON).ln())
            .sum::<f64>();
    }
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Batch order.
    pub data: u64,
    /// Parameter initialisation.
    pub model: u64,
    /// CutMix/MixUp draws.
    pub augment: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub augment: bool,
    pub adam: AdamConfig,
    pub mix_params: MixParams,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-4,
            max_epochs: 50,
            patience: 10,
            min_delta: 1e-4,
            augment: true,
            adam: AdamConfig::default(),
            mix_params: MixParams::default(),
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTrainConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be >= 0");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        self.mix_params.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a history CSV. `best_epoch` is recomputed as the minimum
    /// validation loss (first on ties).
    pub fn read_csv(path: impl AsRef<Path>) -> Result<TrainHistory> {
        let mut r = csv::Reader::from_path(path)?;
        let records: Vec<EpochRecord> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        if records.is_empty() {
            return Err(Error::ParseError("history file has no epochs".into()));
        }
        let mut best = &records[0];
        for rec in &records {
            if rec.val_loss < best.val_loss {
                best = rec;
            }
        }
        Ok(TrainHistory {
            best_epoch: best.epoch,
            stopped_early: false,
            records,
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, learning_rate: f64) -> Adam {
        Adam {
            config,
            learning_rate,
            step: 0,
            m: vec![],
            v: vec![],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Option<Vec<f64>>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let update = self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + epsilon);
                p.data[j] = (p.data[j] as f64 - update) as f32;
            }
        }
    }
}

/// Label rows restricted to the model's classes. Mass on any other class is
/// an error.
fn targets_for(batch: &Batch, classes: usize) -> Result<Vec<Vec<f64>>> {
    (0..batch.len())
        .map(|i| {
            let row = batch.label(i);
            if row[classes..].iter().any(|&v| v != 0.0) {
                return Err(Error::ShapeMismatch(format!(
                    "label row {i} has mass outside the model's {classes} classes"
                )));
            }
            Ok(row[..classes].iter().map(|&v| v as f64).collect())
        })
        .collect()
}

/// Optimiser state and augmentation generator for one training run.
pub struct Trainer {
    config: TrainConfig,
    optimizer: Adam,
    augment_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        Ok(Trainer {
            optimizer: Adam::new(config.adam, config.learning_rate),
            augment_rng: ChaCha8Rng::seed_from_u64(config.seeds.augment),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One gradient step on `batch` as given (no augmentation). Returns the
    /// batch loss and the number of correct argmax predictions.
    pub fn step(&mut self, model: &mut ModelHandle, batch: &Batch) -> Result<(f64, usize)> {
        let n = batch.len();
        let k = model.config().num_classes;
        let targets = targets_for(batch, k)?;
        let x = model.input_tensor(&batch.images, n)?;
        let net = model.network();
        let pass = net.forward(&x, Mode::Train, Keep::All, None)?;
        let logits = pass.output();
        let probs: Vec<Vec<f64>> = (0..n).map(|i| softmax_row(logits.sample(i))).collect();
        let loss = categorical_crossentropy(&probs, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                detail: format!("loss = {loss}"),
            });
        }
        let correct = probs.iter().zip(&targets).filter(|(p, t)| argmax(p) == argmax(t)).count();
        let mut seed = Vec::with_capacity(n * k);
        for (p, t) in probs.iter().zip(&targets) {
            seed.extend(p.iter().zip(t).map(|(p, t)| (p - t) / n as f64));
        }
        let grads = net.backward(&pass, Tensor::from_vec(logits.shape(), seed), &[], true)?;
        let net = model.network_mut();
        net.commit_batch_stats(&pass);
        self.optimizer.step(net.params_mut(), &grads.params);
        Ok((loss, correct))
    }

    /// One pass over `batches`, augmenting each when enabled. Returns mean
    /// loss and accuracy over examples.
    pub fn train_epoch<I>(&mut self, model: &mut ModelHandle, batches: I, epoch: usize) -> Result<(f64, f64)>
    where
        I: IntoIterator<Item = Result<Batch>>,
    {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in batches.into_iter().enumerate() {
            let batch = batch?;
            let batch = if self.config.augment {
                augment_batch(&batch, &self.config.mix_params, &mut self.augment_rng)?.batch
            } else {
                batch
            };
            let (loss, ok) = self.step(model, &batch).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    detail,
                },
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
            correct += ok;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::EmptySplit("train".into()));
        }
        Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
    }
}

/// Inference-mode results over a set of examples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub truths: Vec<usize>,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

pub fn evaluate_batches<I>(model: &ModelHandle, batches: I) -> Result<Evaluation>
where
    I: IntoIterator<Item = Result<Batch>>,
{
    let k = model.config().num_classes;
    let mut out = Evaluation::default();
    let mut loss_sum = 0.0;
    for batch in batches {
        let batch = batch?;
        let targets = targets_for(&batch, k)?;
        let probs = model.forward_pixels(&batch.images, batch.len())?;
        loss_sum += categorical_crossentropy(&probs, &targets)? * batch.len() as f64;
        out.truths.extend(targets.iter().map(|t| argmax(t)));
        out.predictions.extend(probs.iter().map(|p| argmax(p)));
        out.probabilities.extend(probs);
    }
    let n = out.truths.len();
    if n == 0 {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    out.loss = loss_sum / n as f64;
    out.accuracy = out.truths.iter().zip(&out.predictions).filter(|(a, b)| a == b).count() as f64 / n as f64;
    Ok(out)
}

pub fn evaluate_split(model: &ModelHandle, manifest: &DatasetManifest, split: Split, batch_size: usize) -> Result<Evaluation> {
    evaluate_batches(model, batch_iterator(manifest, split, batch_size, None, 0)?)
}

/// Early-stopping driver. `epoch_fn(epoch, model)` trains and validates one
/// epoch (1-based) and returns its record. Parameters from the best epoch
/// are restored before returning.
pub fn fit_loop<F>(model: &mut ModelHandle, config: &TrainConfig, mut epoch_fn: F) -> Result<TrainHistory>
where
    F: FnMut(usize, &mut ModelHandle) -> Result<EpochRecord>,
{
    config.validate()?;
    let mut history = TrainHistory::default();
    let mut best_loss = f64::INFINITY;
    let mut best_params: Option<Vec<Param>> = None;
    let mut wait = 0;
    for epoch in 1..=config.max_epochs {
        let record = epoch_fn(epoch, model)?;
        log::info!(
            "epoch {epoch}: train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4} ({:.1}s)",
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc,
            record.wall_time_s
        );
        history.records.push(record);
        if record.val_loss < best_loss - config.min_delta {
            best_loss = record.val_loss;
            history.best_epoch = epoch;
            best_params = Some(model.network().params().to_vec());
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some(params) = best_params {
        model.network_mut().params_mut().clone_from_slice(&params);
    }
    Ok(history)
}

/// Trains on the manifest's train split and early-stops on its val split.
pub fn fit(mut model: ModelHandle, manifest: &DatasetManifest, config: &TrainConfig) -> Result<(ModelHandle, TrainHistory)> {
    for split in [Split::Train, Split::Val] {
        if manifest.split_len(split) == 0 {
            return Err(Error::EmptySplit(split.to_string()));
        }
    }
    let mut trainer = Trainer::new(config.clone())?;
    let history = fit_loop(&mut model, config, |epoch, model| {
        let started = Instant::now();
        let batches = batch_iterator(manifest, Split::Train, config.batch_size, Some(config.seeds.data), epoch as u64)?;
        let (train_loss, train_acc) = trainer.train_epoch(model, batches, epoch)?;
        let val = evaluate_split(model, manifest, Split::Val, config.batch_size)?;
        Ok(EpochRecord {
            epoch,
            train_loss,
            train_acc,
            val_loss: val.loss,
            val_acc: val.accuracy,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    })?;
    Ok((model, history))
}

/// Loss of a single uniform prediction, `ln(classes)`.
pub fn uniform_loss(classes: usize) -> f64 {
    (classes as f64).ln()
}

#[doc(hidden)]
pub fn one_hot_rows(indices: &[usize], classes: usize) -> Vec<Vec<f64>> {
    indices
        .iter()
        .map(|&i| (0..classes).map(|c| if c == i { 1.0 } else { 0.0 }).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Architecture, ModelConfig};
    use crate::{ClassLabel, IMAGE_LEN};

    fn record(epoch: usize, val_loss: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 1.0,
            train_acc: 0.5,
            val_loss,
            val_acc: 0.5,
            wall_time_s: 0.0,
        }
    }

    fn tiny(classes: usize) -> ModelHandle {
        let mut cfg = ModelConfig::new(Architecture::TinyCnn).with_seed(1);
        cfg.num_classes = classes;
        build_model(&cfg).unwrap()
    }

    #[test]
    fn uniform_prediction_costs_ln8() {
        let probs = vec![vec![0.125; 8]; 3];
        let loss = categorical_crossentropy(&probs, &one_hot_rows(&[0, 4, 7], 8)).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_costs_the_clip_floor() {
        let t = one_hot_rows(&[2], 8);
        let loss = categorical_crossentropy(&t, &t).unwrap();
        assert!(loss >= 0.0 && loss <= -(1.0 - CLIP_EPSILON).ln() + 1e-12);
    }

    #[test]
    fn soft_target_hand_value() {
        let loss = categorical_crossentropy(&[vec![0.6, 0.4]], &[vec![0.7, 0.3]]).unwrap();
        let expected = -(0.7 * 0.6f64.ln() + 0.3 * 0.4f64.ln());
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.63243).abs() < 1e-4);
    }

    #[test]
    fn loss_shape_errors() {
        assert!(matches!(categorical_crossentropy(&[vec![1.0]], &[]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(
            categorical_crossentropy(&[vec![1.0, 0.0]], &[vec![1.0]]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn monotone_worsening_stops_after_patience_plus_one() {
        let mut model = tiny(8);
        let cfg = TrainConfig::default();
        let h = fit_loop(&mut model, &cfg, |e, _| Ok(record(e, 1.0 + e as f64))).unwrap();
        assert_eq!(h.records.len(), 11);
        assert_eq!(h.best_epoch, 1);
        assert!(h.stopped_early);
    }

    #[test]
    fn single_epoch_run() {
        let mut model = tiny(8);
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let h = fit_loop(&mut model, &cfg, |e, _| Ok(record(e, 1.0))).unwrap();
        assert_eq!(h.records.len(), 1);
        assert!(!h.stopped_early);
    }

    #[test]
    fn improvements_below_min_delta_do_not_count() {
        let mut model = tiny(8);
        let cfg = TrainConfig {
            patience: 3,
            ..TrainConfig::default()
        };
        let h = fit_loop(&mut model, &cfg, |e, _| Ok(record(e, 1.0 - 1e-5 * e as f64))).unwrap();
        assert_eq!(h.records.len(), 4);
        assert_eq!(h.best_epoch, 1);
    }

    #[test]
    fn best_parameters_are_restored() {
        let mut model = tiny(8);
        let cfg = TrainConfig {
            patience: 2,
            ..TrainConfig::default()
        };
        let losses = [3.0, 1.0, 2.0, 2.5];
        let mut snapshot = None;
        fit_loop(&mut model, &cfg, |e, m| {
            m.network_mut().params_mut()[0].data[0] = e as f32;
            if e == 2 {
                snapshot = Some(m.network().params().to_vec());
            }
            Ok(record(e, losses[e - 1]))
        })
        .unwrap();
        assert_eq!(model.network().params(), snapshot.unwrap().as_slice());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut model = tiny(8);
        let before = model.network().params().to_vec();
        let batch = Batch::from_images(
            &[crate::data::OctImage::new(vec![0.3; IMAGE_LEN], "flat", (224, 224)).unwrap()],
            &[ClassLabel::Dme],
        )
        .unwrap();
        let mut trainer = Trainer::new(TrainConfig {
            learning_rate: 0.0,
            augment: false,
            ..TrainConfig::default()
        })
        .unwrap();
        trainer.train_epoch(&mut model, [Ok(batch.clone()), Ok(batch)], 1).unwrap();
        assert_eq!(model.network().params(), before.as_slice());
    }

    #[test]
    fn poisoned_input_is_non_finite_loss() {
        let mut model = tiny(8);
        let mut images = vec![0.5; IMAGE_LEN];
        images[17] = f32::NAN;
        let batch = Batch {
            images,
            labels: ClassLabel::Amd.one_hot().to_vec(),
        };
        let mut trainer = Trainer::new(TrainConfig {
            augment: false,
            ..TrainConfig::default()
        })
        .unwrap();
        match trainer.train_epoch(&mut model, [Ok(batch)], 3) {
            Err(Error::NonFiniteLoss { epoch: 3, batch: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(Trainer::new(cfg), Err(Error::InvalidTrainConfig(_))));
        }
    }

    #[test]
    fn history_csv_round_trip() {
        let h = TrainHistory {
            records: vec![record(1, 0.9), record(2, 0.4), record(3, 0.6)],
            best_epoch: 2,
            stopped_early: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        h.write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,wall_time_s\n"));
        assert_eq!(TrainHistory::read_csv(&path).unwrap(), h);
    }
}
