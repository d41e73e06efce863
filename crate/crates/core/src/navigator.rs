//! Anchor informativeness scoring and top-M region proposal.
//!
//! A small top-down feature pyramid (1×1 lateral convolutions merged with the
//! upsampled coarser level) feeds per-level scoring heads: a 3×3 convolution
//! with leaky ReLU followed by a 1×1 convolution emitting one score per anchor slot.
//! The navigator reads backbone features as constants; only its own
//! parameters receive gradient.

use rand::Rng;

use crate::error::{DrnaError, Result};
use crate::geometry::{nms, AnchorGrid, BoxRegion, ScoredRegion};
use crate::net::layers::{leaky_relu_backward, leaky_relu_inplace, upsample2, upsample2_backward, Conv2d, ConvCache};
use crate::net::model::{FeaturePyramid, ModelState, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NavigatorHead<T> {
    pub laterals: Vec<Conv2d<T>>,
    pub hidden: Vec<Conv2d<T>>,
    pub scorers: Vec<Conv2d<T>>,
}

/// Per-anchor scores, aligned 1:1 with [`crate::geometry::generate_anchor_grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct InformativenessField<T> {
    pub scores: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct NavigatorCache<T> {
    lateral: Vec<ConvCache<T>>,
    hidden: Vec<ConvCache<T>>,
    hidden_out: Vec<Tensor<T>>,
    scorer: Vec<ConvCache<T>>,
    score_shapes: Vec<[usize; 3]>,
}

impl<T: Scalar> NavigatorHead<T> {
    pub fn new<R: Rng>(level_channels: &[usize], width: usize, anchors_per_cell: &[usize], rng: &mut R) -> Self {
        let laterals = level_channels.iter().map(|&c| Conv2d::new(c, width, 1, 1, 0, rng)).collect();
        let hidden = level_channels.iter().map(|_| Conv2d::new(width, width, 3, 1, 1, rng)).collect();
        let scorers = anchors_per_cell.iter().map(|&a| Conv2d::new(width, a, 1, 1, 0, rng)).collect();
        NavigatorHead {
            laterals,
            hidden,
            scorers,
        }
    }

    pub fn zeros_like(&self) -> Self {
        NavigatorHead {
            laterals: self.laterals.iter().map(Conv2d::zeros_like).collect(),
            hidden: self.hidden.iter().map(Conv2d::zeros_like).collect(),
            scorers: self.scorers.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> NavigatorHead<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            stride: c.stride,
            pad: c.pad,
        };
        NavigatorHead {
            laterals: self.laterals.iter().map(conv).collect(),
            hidden: self.hidden.iter().map(conv).collect(),
            scorers: self.scorers.iter().map(conv).collect(),
        }
    }

    fn groups(&self) -> [(&'static str, &Vec<Conv2d<T>>); 3] {
        [("lateral", &self.laterals), ("hidden", &self.hidden), ("score", &self.scorers)]
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, convs) in self.groups() {
            for (i, c) in convs.iter().enumerate() {
                out.push((format!("navigator.{name}.{i}.weight"), &c.weight));
                out.push((format!("navigator.{name}.{i}.bias"), &c.bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, convs) in [
            ("lateral", &mut self.laterals),
            ("hidden", &mut self.hidden),
            ("score", &mut self.scorers),
        ] {
            for (i, c) in convs.iter_mut().enumerate() {
                out.push((format!("navigator.{name}.{i}.weight"), &mut c.weight));
                out.push((format!("navigator.{name}.{i}.bias"), &mut c.bias));
            }
        }
        out
    }

    /// Scores in anchor order: level-major, row-major, then anchor slot.
    pub fn forward(&self, levels: &[Tensor<T>]) -> Result<(Vec<T>, NavigatorCache<T>)> {
        let n = self.laterals.len();
        if levels.len() != n {
            return Err(DrnaError::config(format!(
                "navigator expects {n} pyramid levels, got {}",
                levels.len()
            )));
        }
        for (l, t) in levels.iter().enumerate() {
            if t.shape()[0] != self.laterals[l].in_channels() {
                return Err(DrnaError::config(format!(
                    "pyramid level {l} has {} channels, navigator expects {}",
                    t.shape()[0],
                    self.laterals[l].in_channels()
                )));
            }
            if l + 1 < n && (t.shape()[1] != 2 * levels[l + 1].shape()[1] || t.shape()[2] != 2 * levels[l + 1].shape()[2]) {
                return Err(DrnaError::config(format!(
                    "pyramid level {l} is not twice the size of level {}",
                    l + 1
                )));
            }
        }
        let mut lateral = Vec::with_capacity(n);
        let mut merged: Vec<Tensor<T>> = Vec::with_capacity(n);
        for (conv, x) in self.laterals.iter().zip(levels) {
            let (y, c) = conv.forward(x);
            lateral.push(c);
            merged.push(y);
        }
        for l in (0..n - 1).rev() {
            let up = upsample2(&merged[l + 1]);
            merged[l].add_assign(&up);
        }
        let mut hidden = Vec::with_capacity(n);
        let mut hidden_out = Vec::with_capacity(n);
        let mut scorer = Vec::with_capacity(n);
        let mut score_shapes = Vec::with_capacity(n);
        let mut scores = Vec::new();
        for l in 0..n {
            let (mut h, hc) = self.hidden[l].forward(&merged[l]);
            leaky_relu_inplace(h.data_mut(), T::of(LEAKY_SLOPE));
            let (s, sc) = self.scorers[l].forward(&h);
            let [a, rows, cols] = [s.shape()[0], s.shape()[1], s.shape()[2]];
            for cell in 0..rows * cols {
                for slot in 0..a {
                    scores.push(s.data()[slot * rows * cols + cell]);
                }
            }
            hidden.push(hc);
            hidden_out.push(h);
            scorer.push(sc);
            score_shapes.push([a, rows, cols]);
        }
        Ok((
            scores,
            NavigatorCache {
                lateral,
                hidden,
                hidden_out,
                scorer,
                score_shapes,
            },
        ))
    }

    pub fn backward(&self, dscores: &[T], cache: &NavigatorCache<T>, grads: &mut NavigatorHead<T>) {
        let n = self.laterals.len();
        let mut offset = 0;
        let mut dmerged: Vec<Tensor<T>> = Vec::with_capacity(n);
        for l in 0..n {
            let [a, rows, cols] = cache.score_shapes[l];
            let mut ds = Tensor::zeros(&[a, rows, cols]);
            for cell in 0..rows * cols {
                for slot in 0..a {
                    ds.data_mut()[slot * rows * cols + cell] = dscores[offset + cell * a + slot];
                }
            }
            offset += a * rows * cols;
            let mut dh = self.scorers[l]
                .backward(&ds, &cache.scorer[l], &mut grads.scorers[l], true)
                .expect("input grad requested");
            leaky_relu_backward(cache.hidden_out[l].data(), dh.data_mut(), T::of(LEAKY_SLOPE));
            let dm = self.hidden[l]
                .backward(&dh, &cache.hidden[l], &mut grads.hidden[l], true)
                .expect("input grad requested");
            dmerged.push(dm);
        }
        // merged[l] = lateral[l] + up(merged[l + 1]): push gradient coarse-ward.
        for l in 1..n {
            let down = upsample2_backward(&dmerged[l - 1]);
            dmerged[l].add_assign(&down);
        }
        for l in 0..n {
            self.laterals[l].backward(&dmerged[l], &cache.lateral[l], &mut grads.laterals[l], false);
        }
    }
}

/// Informativeness of every anchor from the feature pyramid.
pub fn score_anchors<T: Scalar>(model: &ModelState<T>, pyramid: &FeaturePyramid<T>) -> Result<InformativenessField<T>> {
    let (scores, _) = model.navigator.forward(&pyramid.levels)?;
    Ok(InformativenessField { scores })
}

/// Top-M regions after NMS, descending informativeness. Returns fewer than
/// `m` when fewer survive suppression.
pub fn propose_top_m<T: Scalar>(
    scores: &InformativenessField<T>,
    anchors: &AnchorGrid,
    m: usize,
    iou_threshold: f64,
) -> Result<Vec<ScoredRegion>> {
    propose_from_boxes(&scores.scores, &anchors.boxes, m, iou_threshold)
}

pub(crate) fn propose_from_boxes<T: Scalar>(
    scores: &[T],
    boxes: &[BoxRegion],
    m: usize,
    iou_threshold: f64,
) -> Result<Vec<ScoredRegion>> {
    if scores.len() != boxes.len() {
        return Err(DrnaError::config(format!(
            "{} scores for {} anchors",
            scores.len(),
            boxes.len()
        )));
    }
    let regions: Vec<ScoredRegion> = boxes
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (b, s))| ScoredRegion::new(*b, s.as_f64(), i))
        .collect();
    nms(&regions, iou_threshold, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{default_pyramid, generate_anchor_grid};
    use crate::net::model::{extract_features, ArchConfig};
    use crate::ImageTensor;

    fn arch() -> ArchConfig {
        ArchConfig {
            input_size: 64,
            backbone_widths: vec![4, 6, 8, 10],
            navigator_width: 5,
            pyramid: default_pyramid(),
            num_classes: 3,
            top_k: 2,
        }
    }

    #[test]
    fn score_count_matches_anchor_count() {
        let model = ModelState::<f32>::new(arch(), 0).unwrap();
        let pyr = extract_features(&model, &ImageTensor::zeros(64, 64)).unwrap();
        let field = score_anchors(&model, &pyr).unwrap();
        let grid = generate_anchor_grid((64, 64), &model.arch.pyramid).unwrap();
        assert_eq!(field.scores.len(), grid.len());
    }

    #[test]
    fn zero_features_zero_head_give_bias() {
        let mut model = ModelState::<f64>::new(arch(), 0).unwrap();
        for (_, t) in model.navigator.params_mut() {
            t.fill(0.0);
        }
        for s in model.navigator.scorers.iter_mut() {
            s.bias.fill(0.75);
        }
        let pyr = extract_features(&model, &ImageTensor::zeros(64, 64)).unwrap();
        let field = score_anchors(&model, &pyr).unwrap();
        assert!(field.scores.iter().all(|&s| s == 0.75));
    }

    #[test]
    fn scores_follow_anchor_slots() {
        // Slot-specific biases must land on anchors with that aspect_index.
        let mut model = ModelState::<f64>::new(arch(), 0).unwrap();
        for (_, t) in model.navigator.params_mut() {
            t.fill(0.0);
        }
        for (l, s) in model.navigator.scorers.iter_mut().enumerate() {
            for (a, b) in s.bias.data_mut().iter_mut().enumerate() {
                *b = (10 * l + a) as f64;
            }
        }
        let pyr = extract_features(&model, &ImageTensor::zeros(64, 64)).unwrap();
        let field = score_anchors(&model, &pyr).unwrap();
        let grid = generate_anchor_grid((64, 64), &model.arch.pyramid).unwrap();
        for (b, s) in grid.boxes.iter().zip(&field.scores) {
            assert_eq!(*s, (10 * b.scale_index + b.aspect_index) as f64);
        }
        // Permuting anchors together with their scores keeps the pairing.
        let mut pairs: Vec<(BoxRegion, f64)> = grid.boxes.iter().copied().zip(field.scores.iter().copied()).collect();
        pairs.reverse();
        assert!(pairs.iter().all(|(b, s)| *s == (10 * b.scale_index + b.aspect_index) as f64));
    }

    #[test]
    fn equal_scores_pick_first_indices() {
        let grid = generate_anchor_grid((64, 64), &default_pyramid()).unwrap();
        let field = InformativenessField {
            scores: vec![0.0f64; grid.len()],
        };
        let top = propose_top_m(&field, &grid, 4, 0.25).unwrap();
        assert_eq!(top.len(), 4);
        assert_eq!(top[0].index, 0);
        for w in top.windows(2) {
            assert!(w[0].index < w[1].index);
        }
    }

    #[test]
    fn level_mismatch_is_config_error() {
        let model = ModelState::<f32>::new(arch(), 0).unwrap();
        let pyr = extract_features(&model, &ImageTensor::zeros(64, 64)).unwrap();
        assert!(model.navigator.forward(&pyr.levels[..2]).is_err());
    }
}
