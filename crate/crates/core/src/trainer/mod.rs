//! Mini-batch training and per-epoch evaluation.

pub mod config;
pub mod optim;
pub mod pipeline;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrnaError, Result};
use crate::eval::{kendall_tau, MetricsReport};
use crate::geometry::{generate_anchor_grid, AnchorGrid};
use crate::net::image::ImageTensor;
use crate::net::model::ModelState;
use crate::scalar::Scalar;
use config::{Method, TrainConfig};
use optim::{clip_by_module, Sgd};
use pipeline::{
    baseline_forward_backward, baseline_infer, drna_forward_backward, drna_infer, region_confidences, LossBreakdown,
    LossWeights, PipelineSettings,
};

/// A labelled image. `id` seeds the image's random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub image: ImageTensor<T>,
    pub label: usize,
    pub id: u64,
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d1_049b_b133_111b);
    z ^ (z >> 31)
}

/// Random stream for one image in one epoch; independent of batch order.
pub fn sample_rng(seed: u64, epoch: usize, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(epoch as u64)) ^ id))
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed.wrapping_add(0x5eed)) ^ splitmix(epoch as u64))
}

/// One epoch's line in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ranking: f64,
    pub loss_scrutinizer: f64,
    pub loss_teacher: f64,
    pub loss_augmentation: f64,
    pub loss_total: f64,
    pub top1: f64,
    pub top5: f64,
}

/// Optimizer state plus the fixed pieces of the pipeline.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub settings: PipelineSettings,
    pub weights: LossWeights,
    pub anchors: AnchorGrid,
    pub optimizer: Sgd<T>,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &ModelState<T>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let s = config.input_size;
        Ok(Trainer {
            config: config.clone(),
            settings: PipelineSettings::from(config),
            weights: LossWeights::from_config(config),
            anchors: generate_anchor_grid((s, s), &config.pyramid())?,
            optimizer: Sgd::new(model, config.momentum, config.weight_decay),
            step: 0,
        })
    }

    /// Loss and gradient of one image under the configured method.
    fn image_pass(
        &self,
        model: &ModelState<T>,
        sample: &Sample<T>,
        epoch: usize,
        grads: &mut ModelState<T>,
    ) -> Result<LossBreakdown> {
        match self.config.method {
            Method::Drna => {
                let mut rng = sample_rng(self.config.seed, epoch, sample.id);
                let (loss, _) = drna_forward_backward(
                    model,
                    &self.anchors,
                    &sample.image,
                    sample.label,
                    &self.settings,
                    &self.weights,
                    None,
                    &mut rng,
                    Some(grads),
                )?;
                Ok(loss)
            }
            Method::Baseline => baseline_forward_backward(model, &sample.image, sample.label, Some(grads)),
        }
    }

    /// One SGD update on the batch mean of the loss. Returns the mean loss
    /// terms; a non-finite term aborts before the update.
    pub fn train_step(&mut self, model: &mut ModelState<T>, batch: &[&Sample<T>], epoch: usize) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(DrnaError::Domain("empty batch".into()));
        }
        let mut grads = model.zeros_like();
        let mut sum = LossBreakdown::default();
        for sample in batch {
            let loss = self.image_pass(model, sample, epoch, &mut grads).map_err(|e| match e {
                DrnaError::NonFinite { term, .. } => DrnaError::NonFinite { term, step: self.step },
                other => other,
            })?;
            sum.add(&loss);
        }
        let inv = 1.0 / batch.len() as f64;
        let mean = sum.scaled(inv);
        if let Some(term) = mean.non_finite_term() {
            return Err(DrnaError::NonFinite { term, step: self.step });
        }
        for (_, g) in grads.params_mut() {
            g.scale(T::of(inv));
        }
        if !grads.is_finite() {
            return Err(DrnaError::NonFinite {
                term: "gradient",
                step: self.step,
            });
        }
        clip_by_module(&mut grads, self.config.grad_clip_norm);
        self.optimizer.step(model, &grads, self.config.lr_at(epoch));
        self.step += 1;
        Ok(mean)
    }

    /// Class probabilities in evaluation mode.
    pub fn predict(&self, model: &ModelState<T>, image: &ImageTensor<T>) -> Result<Vec<f64>> {
        let probs = match self.config.method {
            Method::Drna => drna_infer(model, &self.anchors, image, &self.settings)?.probs,
            Method::Baseline => baseline_infer(model, image)?,
        };
        Ok(probs.iter().map(|p| p.as_f64()).collect())
    }

    pub fn evaluate(&self, model: &ModelState<T>, samples: &[Sample<T>], class_names: &[String]) -> Result<MetricsReport> {
        let preds = samples
            .iter()
            .map(|s| self.predict(model, &s.image))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        MetricsReport::build(self.config.method.name(), &preds, &labels, class_names, &self.config.echo())
    }

    /// Mean Kendall-τ between navigator informativeness and true-class
    /// confidence over each image's top-M proposals. Images with fewer than
    /// two proposals are skipped; `None` if none remain.
    pub fn ranking_consistency(&self, model: &ModelState<T>, samples: &[Sample<T>]) -> Result<Option<f64>> {
        let mut taus = Vec::new();
        for s in samples {
            let inf = drna_infer(model, &self.anchors, &s.image, &self.settings)?;
            let conf = region_confidences(model, &s.image, &inf.proposals, s.label)?;
            let informativeness: Vec<f64> = inf.proposals.iter().map(|r| r.informativeness).collect();
            if let Some(t) = kendall_tau(&informativeness, &conf) {
                taus.push(t);
            }
        }
        Ok(match taus.len() {
            0 => None,
            n => Some(taus.iter().sum::<f64>() / n as f64),
        })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ModelState<T>,
    /// Epoch and parameters of the best test Top-1 (earliest on ties).
    pub best: Option<(usize, ModelState<T>)>,
    pub records: Vec<EpochRecord>,
    pub reports: Vec<MetricsReport>,
}

/// Called after every epoch with the record, the test report, the current
/// model and whether it is the best so far.
pub type EpochHook<'a, T> = dyn FnMut(&EpochRecord, &MetricsReport, &ModelState<T>, bool) -> Result<()> + 'a;

/// Runs `config.epochs` epochs of shuffled mini-batch SGD, evaluating on
/// `test` after each.
pub fn train<T: Scalar>(
    model: ModelState<T>,
    train_set: &[Sample<T>],
    test_set: &[Sample<T>],
    class_names: &[String],
    config: &TrainConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(DrnaError::config("training and test splits must both be non-empty"));
    }
    let mut model = model;
    let mut trainer = Trainer::new(&model, config)?;
    let mut records = Vec::new();
    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut best: Option<(usize, ModelState<T>)> = None;
    let mut best_top1 = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng(config.seed, epoch));
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mean = trainer.train_step(&mut model, &batch, epoch)?;
            sum.add(&mean.scaled(batch.len() as f64));
        }
        let loss = sum.scaled(1.0 / train_set.len() as f64);
        let report = trainer.evaluate(&model, test_set, class_names)?;
        let record = EpochRecord {
            epoch,
            lr: config.lr_at(epoch),
            loss_ranking: loss.ranking,
            loss_scrutinizer: loss.scrutinizer,
            loss_teacher: loss.teacher,
            loss_augmentation: loss.augmentation,
            loss_total: loss.total(&trainer.weights),
            top1: report.top1,
            top5: report.top5,
        };
        info!(
            "epoch {epoch}: loss {:.4} top1 {:.4} top5 {:.4}",
            record.loss_total, record.top1, record.top5
        );
        let is_best = report.top1 > best_top1;
        if is_best {
            best_top1 = report.top1;
            best = Some((epoch, model.clone()));
        }
        hook(&record, &report, &model, is_best)?;
        records.push(record);
        reports.push(report);
    }
    Ok(TrainOutcome {
        model,
        best,
        records,
        reports,
    })
}
