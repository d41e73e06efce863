//! Per-image forward and backward passes through the four sub-networks.
//!
//! Training order for one image: backbone on the full image, navigator scores,
//! top-M proposals by NMS, backbone on every proposal, ranking and teacher
//! losses, top-K by confidence, region maps to crop boxes (plus a random
//! drop), backbone on the augmented crops, augmentation loss, fusion and the
//! scrutinizer loss. Discrete choices (proposals, selection, boxes, drops) are
//! recorded in a [`StepPlan`] and can be replayed so the loss becomes a smooth
//! function of the parameters for gradient checking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentor::{apply_drop, channel_mean, crop_mask, drop_mask, normalize_map, AugmentationMap, RegionMask};
use crate::error::{DrnaError, Result};
use crate::geometry::{AnchorGrid, BoxRegion, ScoredRegion};
use crate::navigator::propose_from_boxes;
use crate::net::image::{crop_and_resize, ImageTensor};
use crate::net::model::{check_class, BackbonePass, ModelState};
use crate::scalar::{neg_log_clamped, softmax, Scalar};
use crate::teacher::{confidence_order, ranking_loss_with_grad};
use crate::trainer::config::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineSettings {
    pub top_m: usize,
    pub top_k: usize,
    pub theta_crop: f64,
    pub theta_drop: f64,
    pub nms_iou_threshold: f64,
    pub drop_probability: f64,
}

impl From<&TrainConfig> for PipelineSettings {
    fn from(c: &TrainConfig) -> Self {
        PipelineSettings {
            top_m: c.top_m,
            top_k: c.top_k,
            theta_crop: c.theta_crop,
            theta_drop: c.theta_drop,
            nms_iou_threshold: c.nms_iou_threshold,
            drop_probability: c.drop_probability,
        }
    }
}

/// Coefficients of the four loss terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ranking: f64,
    pub scrutinizer: f64,
    pub teacher: f64,
    pub augmentation: f64,
}

impl LossWeights {
    pub fn from_config(c: &TrainConfig) -> Self {
        LossWeights {
            ranking: 1.0,
            scrutinizer: c.alpha,
            teacher: c.beta,
            augmentation: c.gamma,
        }
    }

    pub fn only(term: LossTerm) -> Self {
        let mut w = LossWeights {
            ranking: 0.0,
            scrutinizer: 0.0,
            teacher: 0.0,
            augmentation: 0.0,
        };
        match term {
            LossTerm::Ranking => w.ranking = 1.0,
            LossTerm::Scrutinizer => w.scrutinizer = 1.0,
            LossTerm::Teacher => w.teacher = 1.0,
            LossTerm::Augmentation => w.augmentation = 1.0,
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Ranking,
    Scrutinizer,
    Teacher,
    Augmentation,
}

/// The four loss terms of one image or the batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ranking: f64,
    pub scrutinizer: f64,
    pub teacher: f64,
    pub augmentation: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(
            w.ranking * self.ranking,
            self.scrutinizer,
            self.teacher,
            self.augmentation,
            w.scrutinizer,
            w.teacher,
            w.augmentation,
        )
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.ranking += other.ranking;
        self.scrutinizer += other.scrutinizer;
        self.teacher += other.teacher;
        self.augmentation += other.augmentation;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            ranking: self.ranking * s,
            scrutinizer: self.scrutinizer * s,
            teacher: self.teacher * s,
            augmentation: self.augmentation * s,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("ranking loss", self.ranking),
            ("scrutinizer loss", self.scrutinizer),
            ("teacher loss", self.teacher),
            ("augmentation loss", self.augmentation),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `Loss_I + α·Loss_s + β·Loss_c + γ·Loss_a`
pub fn total_loss<T: Scalar>(loss_i: T, loss_s: T, loss_c: T, loss_a: T, alpha: T, beta: T, gamma: T) -> T {
    loss_i + alpha * loss_s + beta * loss_c + gamma * loss_a
}

/// Discrete decisions of one training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    /// Top-M proposals with teacher confidence filled in.
    pub proposals: Vec<ScoredRegion>,
    /// Positions into `proposals`, descending confidence.
    pub selected: Vec<usize>,
    /// Crop box for each selected region, image coordinates.
    pub crops: Vec<BoxRegion>,
    /// Drop applied to each selected region's crop, if any.
    pub drops: Vec<Option<(AugmentationMap, RegionMask)>>,
}

/// Evaluation-mode output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub probs: Vec<T>,
    /// Top-M proposals, descending informativeness.
    pub proposals: Vec<ScoredRegion>,
    /// Crop boxes of the regions fed to the scrutinizer, in fusion order.
    pub crops: Vec<BoxRegion>,
}

/// Gradient of `weight · (−log p[label])` w.r.t. the logits that produced `probs`.
fn nll_logit_grad<T: Scalar>(probs: &[T], label: usize, weight: f64) -> Option<Vec<T>> {
    if weight == 0.0 {
        return None;
    }
    let py = probs[label];
    let (_, dp) = neg_log_clamped(py);
    if dp == T::zero() {
        return None;
    }
    let scale = T::of(weight) * dp * py;
    Some(
        probs
            .iter()
            .enumerate()
            .map(|(j, &pj)| {
                let delta = if j == label { T::one() } else { T::zero() };
                scale * (delta - pj)
            })
            .collect(),
    )
}

fn add_into<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

/// Rejects a pass whose pooled feature overflowed.
fn checked<T: Scalar>(pass: BackbonePass<T>) -> Result<BackbonePass<T>> {
    if pass.global.iter().all(|v| v.is_finite()) {
        Ok(pass)
    } else {
        Err(DrnaError::NonFinite { term: "features", step: 0 })
    }
}

fn region_map<T: Scalar>(pass: &BackbonePass<T>, source: BoxRegion) -> Result<AugmentationMap> {
    let fm = pass.final_map();
    normalize_map(&channel_mean(fm), fm.shape()[1], fm.shape()[2], source)
}

/// One DRNA training pass on a single image.
///
/// With `plan` set, the recorded discrete decisions are reused instead of
/// recomputed, and `rng` is left untouched. With `grads` set, the gradient of
/// the weighted loss is accumulated into it.
#[allow(clippy::too_many_arguments)]
pub fn drna_forward_backward<T: Scalar, R: Rng>(
    model: &ModelState<T>,
    anchors: &AnchorGrid,
    image: &ImageTensor<T>,
    label: usize,
    settings: &PipelineSettings,
    weights: &LossWeights,
    plan: Option<&StepPlan>,
    rng: &mut R,
    grads: Option<&mut ModelState<T>>,
) -> Result<(LossBreakdown, StepPlan)> {
    check_class(model, label)?;
    let size = (model.arch.input_size, model.arch.input_size);
    let full = checked(model.backbone_forward(image)?)?;
    let pyramid = model.pyramid(&full);
    let (scores, nav_cache) = model.navigator.forward(&pyramid.levels)?;
    let mut proposals = match plan {
        Some(p) => p
            .proposals
            .iter()
            .map(|r| ScoredRegion {
                informativeness: scores[r.index].as_f64(),
                ..*r
            })
            .collect(),
        None => propose_from_boxes(&scores, &anchors.boxes, settings.top_m, settings.nms_iou_threshold)?,
    };
    if proposals.is_empty() {
        return Err(DrnaError::Domain("navigator produced no proposals".into()));
    }

    let region_passes = proposals
        .iter()
        .map(|r| checked(model.backbone_forward(&crop_and_resize(image, &r.region, size))?))
        .collect::<Result<Vec<_>>>()?;
    let region_probs: Vec<Vec<T>> = region_passes.iter().map(|p| softmax(&model.classify(&p.global))).collect();
    let conf: Vec<T> = region_probs.iter().map(|p| p[label]).collect();
    let full_probs = softmax(&model.classify(&full.global));
    let conf_x = full_probs[label];
    for (r, c) in proposals.iter_mut().zip(&conf) {
        r.confidence = Some(c.as_f64());
    }

    let informativeness: Vec<T> = proposals.iter().map(|r| scores[r.index]).collect();
    let (loss_i, d_inf) = ranking_loss_with_grad(&informativeness, &conf);
    let nll_x = neg_log_clamped(conf_x).0;
    let loss_c: T = conf.iter().map(|&c| neg_log_clamped(c).0).sum::<T>() + nll_x;

    let selected: Vec<usize> = match plan {
        Some(p) => p.selected.clone(),
        None => confidence_order(&conf).into_iter().take(settings.top_k).collect(),
    };
    let mut crops = Vec::with_capacity(selected.len());
    let mut drops = Vec::with_capacity(selected.len());
    let mut aug_passes = Vec::with_capacity(selected.len());
    for (j, &m) in selected.iter().enumerate() {
        let (crop, drop) = match plan {
            Some(p) => (p.crops[j], p.drops[j].clone()),
            None => {
                let map = region_map(&region_passes[m], proposals[m].region)?;
                let (_, crop) = crop_mask(&map, settings.theta_crop);
                let roll: f64 = rng.gen();
                let drop = (roll < settings.drop_probability).then(|| {
                    let mask = drop_mask(&map, settings.theta_drop);
                    (map, mask)
                });
                (crop, drop)
            }
        };
        let mut aug = crop_and_resize(image, &crop, size);
        if let Some((map, mask)) = &drop {
            apply_drop(&mut aug, &crop, map, mask);
        }
        aug_passes.push(checked(model.backbone_forward(&aug)?)?);
        crops.push(crop);
        drops.push(drop);
    }
    let aug_probs: Vec<Vec<T>> = aug_passes.iter().map(|p| softmax(&model.classify(&p.global))).collect();
    let loss_a: T = aug_probs.iter().map(|p| neg_log_clamped(p[label]).0).sum::<T>() + nll_x;

    // Fusion slots index `aug_passes`; `None` stands for the full image.
    let k = model.arch.top_k;
    let slots: Vec<Option<usize>> = if aug_passes.is_empty() {
        vec![None; k]
    } else {
        (0..k).map(|i| Some(i.min(aug_passes.len() - 1))).collect()
    };
    let mut features: Vec<&[T]> = vec![&full.global];
    for s in &slots {
        features.push(match s {
            Some(i) => &aug_passes[*i].global,
            None => &full.global,
        });
    }
    let (fused_logits, fusion_cache) = model.fuse(&features);
    let fused_probs = softmax(&fused_logits);
    let loss_s = neg_log_clamped(fused_probs[label]).0;

    let breakdown = LossBreakdown {
        ranking: loss_i.as_f64(),
        scrutinizer: loss_s.as_f64(),
        teacher: loss_c.as_f64(),
        augmentation: loss_a.as_f64(),
    };
    let plan_out = StepPlan {
        proposals: proposals.clone(),
        selected: selected.clone(),
        crops,
        drops,
    };

    let Some(g) = grads else {
        return Ok((breakdown, plan_out));
    };

    if weights.ranking != 0.0 && d_inf.iter().any(|&d| d != T::zero()) {
        let mut dscores = vec![T::zero(); scores.len()];
        let w = T::of(weights.ranking);
        for (r, &d) in proposals.iter().zip(&d_inf) {
            dscores[r.index] = dscores[r.index] + w * d;
        }
        model.navigator.backward(&dscores, &nav_cache, &mut g.navigator);
    }

    let f = full.global.len();
    let mut d_full = vec![T::zero(); f];
    if let Some(dz) = nll_logit_grad(&full_probs, label, weights.teacher + weights.augmentation) {
        add_into(&mut d_full, &model.classifier.backward(&full.global, &dz, &mut g.classifier));
    }
    for (pass, probs) in region_passes.iter().zip(&region_probs) {
        if let Some(dz) = nll_logit_grad(probs, label, weights.teacher) {
            let dg = model.classifier.backward(&pass.global, &dz, &mut g.classifier);
            model.backbone_backward(pass, &dg, g);
        }
    }
    let mut d_aug = vec![vec![T::zero(); f]; aug_passes.len()];
    if let Some(dz) = nll_logit_grad(&fused_probs, label, weights.scrutinizer) {
        let dconcat = model.fuse_backward(&fusion_cache, &dz, g);
        add_into(&mut d_full, &dconcat[..f]);
        for (i, s) in slots.iter().enumerate() {
            let chunk = &dconcat[(i + 1) * f..(i + 2) * f];
            match s {
                Some(a) => add_into(&mut d_aug[*a], chunk),
                None => add_into(&mut d_full, chunk),
            }
        }
    }
    for ((pass, probs), dg) in aug_passes.iter().zip(&aug_probs).zip(d_aug.iter_mut()) {
        if let Some(dz) = nll_logit_grad(probs, label, weights.augmentation) {
            add_into(dg, &model.classifier.backward(&pass.global, &dz, &mut g.classifier));
        }
        model.backbone_backward(pass, dg, g);
    }
    model.backbone_backward(&full, &d_full, g);
    Ok((breakdown, plan_out))
}

/// Evaluation pass: top-K by informativeness, crop only, no drop.
pub fn drna_infer<T: Scalar>(
    model: &ModelState<T>,
    anchors: &AnchorGrid,
    image: &ImageTensor<T>,
    settings: &PipelineSettings,
) -> Result<Inference<T>> {
    let size = (model.arch.input_size, model.arch.input_size);
    let full = model.backbone_forward(image)?;
    let pyramid = model.pyramid(&full);
    let (scores, _) = model.navigator.forward(&pyramid.levels)?;
    let proposals = propose_from_boxes(&scores, &anchors.boxes, settings.top_m, settings.nms_iou_threshold)?;
    let mut crops = Vec::new();
    let mut aug_globals = Vec::new();
    for r in proposals.iter().take(settings.top_k) {
        let pass = model.backbone_forward(&crop_and_resize(image, &r.region, size))?;
        let map = region_map(&pass, r.region)?;
        let (_, crop) = crop_mask(&map, settings.theta_crop);
        aug_globals.push(model.backbone_forward(&crop_and_resize(image, &crop, size))?.global);
        crops.push(crop);
    }
    let k = model.arch.top_k;
    let mut features: Vec<&[T]> = vec![&full.global];
    for i in 0..k {
        features.push(match aug_globals.len() {
            0 => &full.global,
            n => &aug_globals[i.min(n - 1)],
        });
    }
    let (logits, _) = model.fuse(&features);
    Ok(Inference {
        probs: softmax(&logits),
        proposals,
        crops,
    })
}

/// Plain backbone + shared classifier cross-entropy, reported as the
/// scrutinizer term.
pub fn baseline_forward_backward<T: Scalar>(
    model: &ModelState<T>,
    image: &ImageTensor<T>,
    label: usize,
    grads: Option<&mut ModelState<T>>,
) -> Result<LossBreakdown> {
    check_class(model, label)?;
    let pass = checked(model.backbone_forward(image)?)?;
    let probs = softmax(&model.classify(&pass.global));
    let loss = neg_log_clamped(probs[label]).0;
    if let Some(g) = grads {
        if let Some(dz) = nll_logit_grad(&probs, label, 1.0) {
            let dg = model.classifier.backward(&pass.global, &dz, &mut g.classifier);
            model.backbone_backward(&pass, &dg, g);
        }
    }
    Ok(LossBreakdown {
        scrutinizer: loss.as_f64(),
        ..Default::default()
    })
}

pub fn baseline_infer<T: Scalar>(model: &ModelState<T>, image: &ImageTensor<T>) -> Result<Vec<T>> {
    let pass = model.backbone_forward(image)?;
    Ok(softmax(&model.classify(&pass.global)))
}

/// Teacher confidence of the true class for each region.
pub fn region_confidences<T: Scalar>(
    model: &ModelState<T>,
    image: &ImageTensor<T>,
    regions: &[ScoredRegion],
    label: usize,
) -> Result<Vec<f64>> {
    check_class(model, label)?;
    let size = (model.arch.input_size, model.arch.input_size);
    regions
        .iter()
        .map(|r| {
            let pass = model.backbone_forward(&crop_and_resize(image, &r.region, size))?;
            Ok(softmax(&model.classify(&pass.global))[label].as_f64())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0f64, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0), 0.0);
        assert_eq!(total_loss(1.0f64, 2.0, 3.0, 4.0, 1.0, 1.0, 1.0), 10.0);
        let b = LossBreakdown {
            ranking: 1.0,
            scrutinizer: 2.0,
            teacher: 3.0,
            augmentation: 4.0,
        };
        assert_eq!(b.total(&LossWeights::from_config(&TrainConfig::default())), 10.0);
        assert_eq!(b.total(&LossWeights::only(LossTerm::Teacher)), 3.0);
        assert_eq!(b.total(&LossWeights::only(LossTerm::Ranking)), 1.0);
    }

    #[test]
    fn nll_grad_is_softmax_minus_onehot() {
        let p = vec![0.2f64, 0.5, 0.3];
        let g = nll_logit_grad(&p, 1, 1.0).unwrap();
        let want = [0.2, -0.5, 0.3];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(nll_logit_grad(&p, 1, 0.0).is_none());
    }

    #[test]
    fn non_finite_term_named() {
        let b = LossBreakdown {
            teacher: f64::NAN,
            ..Default::default()
        };
        assert_eq!(b.non_finite_term(), Some("teacher loss"));
        assert_eq!(LossBreakdown::default().non_finite_term(), None);
    }
}
