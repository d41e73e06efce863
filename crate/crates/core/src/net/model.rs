//! Model parameters, the convolutional backbone and the shared heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrnaError, Result};
use crate::geometry::PyramidLevel;
use crate::navigator::NavigatorHead;
use crate::net::image::ImageTensor;
use crate::net::layers::{
    global_avg_pool, leaky_relu_backward, leaky_relu_inplace, max_pool2, Conv2d, ConvCache,
    Linear,
};
use crate::scalar::{softmax, Scalar, PROB_EPS};
use crate::tensor::Tensor;

/// Subtracted from every pixel before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;

/// Negative slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Architecture hyperparameters; everything that determines parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    pub backbone_widths: Vec<usize>,
    pub navigator_width: usize,
    pub pyramid: Vec<PyramidLevel>,
    pub num_classes: usize,
    /// Number of augmented regions fused by the scrutinizer.
    pub top_k: usize,
}

/// Where a pyramid level's feature map comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LevelSource {
    /// Output of backbone block `n` (stride `2^(n+1)`).
    Block(usize),
    /// The last block max-pooled `n` times.
    Pooled(usize),
}

impl ArchConfig {
    pub fn feature_dim(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.backbone_widths.len();
        if blocks == 0 || self.backbone_widths.contains(&0) {
            return Err(DrnaError::config("backbone_widths must be non-empty and positive"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << blocks) {
            return Err(DrnaError::config(format!(
                "input_size {} must be divisible by 2^{blocks}",
                self.input_size
            )));
        }
        if self.num_classes == 0 {
            return Err(DrnaError::config("num_classes must be at least 1"));
        }
        if self.top_k == 0 || self.navigator_width == 0 {
            return Err(DrnaError::config("top_k and navigator_width must be positive"));
        }
        if self.pyramid.is_empty() {
            return Err(DrnaError::config("empty pyramid specification"));
        }
        for (i, level) in self.pyramid.iter().enumerate() {
            if !level.stride.is_power_of_two() || level.stride < 2 || !self.input_size.is_multiple_of(level.stride) {
                return Err(DrnaError::config(format!(
                    "pyramid level {i}: stride {} must be a power of two >= 2 dividing input_size",
                    level.stride
                )));
            }
            if i > 0 && level.stride != 2 * self.pyramid[i - 1].stride {
                return Err(DrnaError::config(
                    "pyramid strides must double from one level to the next",
                ));
            }
        }
        Ok(())
    }

    pub fn level_sources(&self) -> Vec<LevelSource> {
        let blocks = self.backbone_widths.len();
        self.pyramid
            .iter()
            .map(|l| {
                let log2 = l.stride.trailing_zeros() as usize;
                if log2 <= blocks {
                    LevelSource::Block(log2 - 1)
                } else {
                    LevelSource::Pooled(log2 - blocks)
                }
            })
            .collect()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.level_sources()
            .iter()
            .map(|s| match s {
                LevelSource::Block(b) => self.backbone_widths[*b],
                LevelSource::Pooled(_) => self.feature_dim(),
            })
            .collect()
    }
}

/// All learnable parameters. Also used, zero-initialised, as the gradient
/// accumulator for itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub arch: ArchConfig,
    pub backbone: Vec<Conv2d<T>>,
    pub navigator: NavigatorHead<T>,
    pub classifier: Linear<T>,
    pub fusion_hidden: Linear<T>,
    pub fusion_out: Linear<T>,
    pub seed: u64,
}

/// Per-level feature maps (fine to coarse) plus the pooled global feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
    pub global: Vec<T>,
}

/// Everything one backbone forward pass needs to run backward.
#[derive(Clone, Debug)]
pub struct BackbonePass<T> {
    caches: Vec<ConvCache<T>>,
    outputs: Vec<Tensor<T>>,
    pub global: Vec<T>,
}

impl<T: Scalar> BackbonePass<T> {
    /// Activation of the last backbone block, `[F, h, w]`.
    pub fn final_map(&self) -> &Tensor<T> {
        self.outputs.last().expect("backbone has at least one block")
    }
}

/// Saved activations of the fusion head.
#[derive(Clone, Debug)]
pub struct FusionCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(arch.backbone_widths.len());
        let mut in_ch = ImageTensor::<T>::CHANNELS;
        for &w in &arch.backbone_widths {
            backbone.push(Conv2d::new(in_ch, w, 3, 2, 1, &mut rng));
            in_ch = w;
        }
        let per_cell: Vec<usize> = arch.pyramid.iter().map(|l| l.anchors_per_cell()).collect();
        let navigator = NavigatorHead::new(&arch.level_channels(), arch.navigator_width, &per_cell, &mut rng);
        let f = arch.feature_dim();
        // Output layers start at zero, so every class begins at probability 1/N.
        let classifier = Linear::new(f, arch.num_classes, &mut rng).zeros_like();
        let fusion_hidden = Linear::new((arch.top_k + 1) * f, 2 * f, &mut rng);
        let fusion_out = Linear::new(2 * f, arch.num_classes, &mut rng).zeros_like();
        Ok(ModelState {
            arch,
            backbone,
            navigator,
            classifier,
            fusion_hidden,
            fusion_out,
            seed,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelState {
            arch: self.arch.clone(),
            backbone: self.backbone.iter().map(Conv2d::zeros_like).collect(),
            navigator: self.navigator.zeros_like(),
            classifier: self.classifier.zeros_like(),
            fusion_hidden: self.fusion_hidden.zeros_like(),
            fusion_out: self.fusion_out.zeros_like(),
            seed: self.seed,
        }
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &c.weight));
            out.push((format!("backbone.{i}.bias"), &c.bias));
        }
        out.extend(self.navigator.params());
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out.push(("fusion.hidden.weight".into(), &self.fusion_hidden.weight));
        out.push(("fusion.hidden.bias".into(), &self.fusion_hidden.bias));
        out.push(("fusion.out.weight".into(), &self.fusion_out.weight));
        out.push(("fusion.out.bias".into(), &self.fusion_out.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), &mut c.weight));
            out.push((format!("backbone.{i}.bias"), &mut c.bias));
        }
        out.extend(self.navigator.params_mut());
        out.push(("classifier.weight".into(), &mut self.classifier.weight));
        out.push(("classifier.bias".into(), &mut self.classifier.bias));
        out.push(("fusion.hidden.weight".into(), &mut self.fusion_hidden.weight));
        out.push(("fusion.hidden.bias".into(), &mut self.fusion_hidden.bias));
        out.push(("fusion.out.weight".into(), &mut self.fusion_out.weight));
        out.push(("fusion.out.bias".into(), &mut self.fusion_out.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            stride: c.stride,
            pad: c.pad,
        };
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        ModelState {
            arch: self.arch.clone(),
            backbone: self.backbone.iter().map(conv).collect(),
            navigator: self.navigator.cast(),
            classifier: lin(&self.classifier),
            fusion_hidden: lin(&self.fusion_hidden),
            fusion_out: lin(&self.fusion_out),
            seed: self.seed,
        }
    }

    pub fn backbone_forward(&self, image: &ImageTensor<T>) -> Result<BackbonePass<T>> {
        let s = self.arch.input_size;
        if image.height() != s || image.width() != s {
            return Err(DrnaError::Shape {
                expected: format!("3x{s}x{s}"),
                got: format!("3x{}x{}", image.height(), image.width()),
            });
        }
        let mut centered = image.tensor().clone();
        let mean = T::of(INPUT_MEAN);
        centered.data_mut().iter_mut().for_each(|v| *v = *v - mean);
        let mut caches = Vec::with_capacity(self.backbone.len());
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let input = outputs.last().unwrap_or(&centered);
            let (mut y, cache) = conv.forward(input);
            leaky_relu_inplace(y.data_mut(), T::of(LEAKY_SLOPE));
            caches.push(cache);
            outputs.push(y);
        }
        let global = global_avg_pool(outputs.last().expect("non-empty backbone"));
        Ok(BackbonePass {
            caches,
            outputs,
            global,
        })
    }

    /// Backpropagates a gradient on the global feature through the backbone.
    pub fn backbone_backward(&self, pass: &BackbonePass<T>, dglobal: &[T], grads: &mut ModelState<T>) {
        let last = pass.final_map();
        let hw = last.numel() / last.shape()[0];
        let inv = T::of(1.0 / hw as f64);
        let mut d = Tensor::zeros(last.shape());
        for (chunk, &g) in d.data_mut().chunks_mut(hw).zip(dglobal) {
            chunk.iter_mut().for_each(|v| *v = g * inv);
        }
        for b in (0..self.backbone.len()).rev() {
            leaky_relu_backward(pass.outputs[b].data(), d.data_mut(), T::of(LEAKY_SLOPE));
            let next = self.backbone[b].backward(&d, &pass.caches[b], &mut grads.backbone[b], b > 0);
            match next {
                Some(nd) => d = nd,
                None => break,
            }
        }
    }

    pub fn pyramid(&self, pass: &BackbonePass<T>) -> FeaturePyramid<T> {
        let levels = self
            .arch
            .level_sources()
            .into_iter()
            .map(|src| match src {
                LevelSource::Block(b) => pass.outputs[b].clone(),
                LevelSource::Pooled(n) => {
                    let mut t = pass.final_map().clone();
                    for _ in 0..n {
                        t = max_pool2(&t);
                    }
                    t
                }
            })
            .collect();
        FeaturePyramid {
            levels,
            global: pass.global.clone(),
        }
    }

    pub fn classify(&self, global: &[T]) -> Vec<T> {
        self.classifier.forward(global)
    }

    pub fn fuse(&self, features: &[&[T]]) -> (Vec<T>, FusionCache<T>) {
        let input: Vec<T> = features.iter().flat_map(|f| f.iter().copied()).collect();
        let mut hidden = self.fusion_hidden.forward(&input);
        leaky_relu_inplace(&mut hidden, T::of(LEAKY_SLOPE));
        let logits = self.fusion_out.forward(&hidden);
        (logits, FusionCache { input, hidden })
    }

    /// Returns the gradient on the concatenated fusion input.
    pub fn fuse_backward(&self, cache: &FusionCache<T>, dlogits: &[T], grads: &mut ModelState<T>) -> Vec<T> {
        let mut dh = self.fusion_out.backward(&cache.hidden, dlogits, &mut grads.fusion_out);
        leaky_relu_backward(&cache.hidden, &mut dh, T::of(LEAKY_SLOPE));
        self.fusion_hidden.backward(&cache.input, &dh, &mut grads.fusion_hidden)
    }
}

/// Runs the backbone and assembles the feature pyramid.
pub fn extract_features<T: Scalar>(model: &ModelState<T>, image: &ImageTensor<T>) -> Result<FeaturePyramid<T>> {
    let pass = model.backbone_forward(image)?;
    Ok(model.pyramid(&pass))
}

pub fn check_class<T>(model: &ModelState<T>, class: usize) -> Result<()> {
    if class >= model.arch.num_classes {
        return Err(DrnaError::Domain(format!(
            "class id {class} out of range for {} classes",
            model.arch.num_classes
        )));
    }
    Ok(())
}

/// Clamps a probability into `[eps, 1 - eps]`.
pub fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(PROB_EPS);
    p.max(lo).min(T::one() - lo)
}

/// Class probabilities of the shared classifier on an image (the image is
/// expected at the model's input size; resize regions first).
pub fn class_probabilities<T: Scalar>(model: &ModelState<T>, image: &ImageTensor<T>) -> Result<Vec<T>> {
    let pass = model.backbone_forward(image)?;
    Ok(softmax(&model.classify(&pass.global)))
}

/// Probability of `true_class` under the shared classifier, kept strictly
/// inside `(0, 1)`.
pub fn confidence<T: Scalar>(model: &ModelState<T>, image: &ImageTensor<T>, true_class: usize) -> Result<T> {
    check_class(model, true_class)?;
    Ok(clamp_prob(class_probabilities(model, image)?[true_class]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::default_pyramid;

    pub(crate) fn small_arch() -> ArchConfig {
        ArchConfig {
            input_size: 64,
            backbone_widths: vec![4, 6, 8, 10],
            navigator_width: 5,
            pyramid: default_pyramid(),
            num_classes: 5,
            top_k: 2,
        }
    }

    fn noise_image(seed: u64) -> ImageTensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_chw(64, 64, (0..3 * 64 * 64).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let model = ModelState::<f64>::new(small_arch(), 1).unwrap();
        let pyr = extract_features(&model, &noise_image(0)).unwrap();
        let sizes: Vec<(usize, usize)> = pyr.levels.iter().map(|t| (t.shape()[1], t.shape()[2])).collect();
        assert_eq!(sizes, vec![(8, 8), (4, 4), (2, 2)]);
        assert_eq!(pyr.global.len(), 10);
    }

    #[test]
    fn zero_image_is_finite_and_deterministic() {
        let model = ModelState::<f32>::new(small_arch(), 1).unwrap();
        let img = ImageTensor::zeros(64, 64);
        let a = extract_features(&model, &img).unwrap();
        let b = extract_features(&model, &img).unwrap();
        assert!(a.levels.iter().all(|t| t.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_size_is_shape_error() {
        let model = ModelState::<f32>::new(small_arch(), 1).unwrap();
        let err = extract_features(&model, &ImageTensor::zeros(32, 64)).unwrap_err();
        assert!(matches!(err, DrnaError::Shape { .. }));
    }

    #[test]
    fn uniform_logits_give_one_over_n() {
        let mut model = ModelState::<f64>::new(small_arch(), 1).unwrap();
        model.classifier.weight.fill(0.0);
        let c = confidence(&model, &noise_image(4), 3).unwrap();
        assert!((c - 0.2).abs() < 1e-12);
        assert!(confidence(&model, &noise_image(4), 5).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = ModelState::<f64>::new(small_arch(), 9).unwrap();
        for s in 0..5 {
            let p = class_probabilities(&model, &noise_image(s)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn param_count_is_function_of_config() {
        let a = ModelState::<f32>::new(small_arch(), 1).unwrap();
        let b = ModelState::<f32>::new(small_arch(), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_pyramid() {
        let mut arch = small_arch();
        arch.pyramid[1].stride = 32;
        assert!(ModelState::<f32>::new(arch, 0).is_err());
    }
}
