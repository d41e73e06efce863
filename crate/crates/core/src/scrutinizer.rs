//! Scrutinizer: fuses the full-image feature with the K augmented region
//! features into the final class distribution.

use log::warn;

use crate::error::{DrnaError, Result};
use crate::net::image::ImageTensor;
use crate::net::model::{check_class, ModelState};
use crate::scalar::{neg_log_clamped, softmax, Scalar};

/// Pads `regions` to exactly `k` entries by repeating the last one; with no
/// regions at all, `fallback` is repeated.
pub fn pad_regions<X: Clone>(mut regions: Vec<X>, k: usize, fallback: &X) -> Vec<X> {
    if regions.is_empty() {
        warn!("no regions survived selection; fusing the full image {k} times");
        return vec![fallback.clone(); k];
    }
    let last = regions.last().cloned().expect("non-empty");
    regions.resize(k, last);
    regions
}

/// Class probabilities `P = F(X, R_1*, ..., R_K*)`. Regions are expected in
/// descending confidence order.
pub fn fuse_and_classify<T: Scalar>(model: &ModelState<T>, image: &ImageTensor<T>, regions: &[ImageTensor<T>]) -> Result<Vec<T>> {
    let k = model.arch.top_k;
    if regions.len() > k {
        return Err(DrnaError::Domain(format!("{} regions given, fusion head takes {k}", regions.len())));
    }
    let regions = pad_regions(regions.to_vec(), k, image);
    let full = model.backbone_forward(image)?;
    let mut features = vec![full.global];
    for r in &regions {
        features.push(model.backbone_forward(r)?.global);
    }
    let refs: Vec<&[T]> = features.iter().map(|f| f.as_slice()).collect();
    let (logits, _) = model.fuse(&refs);
    Ok(softmax(&logits))
}

/// Cross-entropy `-log p[true_class]` with the probability clamp.
pub fn scrutinizer_loss<T: Scalar>(prediction: &[T], true_class: usize) -> Result<T> {
    let p = prediction.get(true_class).ok_or_else(|| {
        DrnaError::Domain(format!("class id {true_class} out of range for {} classes", prediction.len()))
    })?;
    Ok(neg_log_clamped(*p).0)
}

/// Checks the class id against the model before computing the loss.
pub fn scrutinizer_loss_for<T: Scalar>(model: &ModelState<T>, prediction: &[T], true_class: usize) -> Result<T> {
    check_class(model, true_class)?;
    scrutinizer_loss(prediction, true_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::default_pyramid;
    use crate::net::model::ArchConfig;

    fn model() -> ModelState<f64> {
        ModelState::new(
            ArchConfig {
                input_size: 64,
                backbone_widths: vec![4, 6, 8, 10],
                navigator_width: 4,
                pyramid: default_pyramid(),
                num_classes: 4,
                top_k: 2,
            },
            11,
        )
        .unwrap()
    }

    fn img(v: f64) -> ImageTensor<f64> {
        let data = (0..3 * 64 * 64).map(|i| ((i as f64 * 0.013 + v).sin() + 1.0) / 2.0).collect();
        ImageTensor::from_chw(64, 64, data).unwrap()
    }

    #[test]
    fn fusion_input_has_k_plus_one_features() {
        let m = model();
        assert_eq!(m.fusion_hidden.inputs(), 3 * m.arch.feature_dim());
    }

    #[test]
    fn prediction_is_distribution() {
        let m = model();
        let p = fuse_and_classify(&m, &img(0.0), &[img(1.0), img(2.0)]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // Copies of the full image as regions: the ablation baseline path.
        let q = fuse_and_classify(&m, &img(0.0), &[]).unwrap();
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let r = fuse_and_classify(&m, &img(0.0), &[img(0.0), img(0.0)]).unwrap();
        assert_eq!(q, r);
        // A single region is repeated.
        let s = fuse_and_classify(&m, &img(0.0), &[img(1.0)]).unwrap();
        let t = fuse_and_classify(&m, &img(0.0), &[img(1.0), img(1.0)]).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn relabelling_classes_permutes_output() {
        let m = model();
        let mut swapped = m.clone();
        // Swap output rows 0 and 3 of the fusion head.
        let n = swapped.fusion_out.inputs();
        let w = swapped.fusion_out.weight.data_mut();
        for j in 0..n {
            w.swap(j, 3 * n + j);
        }
        swapped.fusion_out.bias.data_mut().swap(0, 3);
        let p = fuse_and_classify(&m, &img(0.3), &[img(1.0), img(2.0)]).unwrap();
        let q = fuse_and_classify(&swapped, &img(0.3), &[img(1.0), img(2.0)]).unwrap();
        assert_eq!(p[0], q[3]);
        assert_eq!(p[3], q[0]);
        assert_eq!(p[1], q[1]);
    }

    #[test]
    fn loss_examples() {
        assert!(scrutinizer_loss(&[0.0f64, 1.0, 0.0], 1).unwrap() < 1e-6);
        let n = 7;
        let uniform = vec![1.0 / n as f64; n];
        assert!((scrutinizer_loss(&uniform, 2).unwrap() - (n as f64).ln()).abs() < 1e-12);
        assert!((scrutinizer_loss(&[0.25f64, 0.75], 0).unwrap() - 1.3863).abs() < 1e-4);
        assert!(scrutinizer_loss(&[0.5f64, 0.5], 2).is_err());
    }
}
