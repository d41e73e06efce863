//! Region-oriented augmentation: min-max normalised region maps, crop and drop
//! masks, and the augmentation cross-entropy.
//!
//! Maps live on the spatial grid of the last backbone block computed over a
//! selected region, so every cell corresponds to a rectangle of that region in
//! image coordinates. Masks and boxes are constants for backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{DrnaError, Result};
use crate::geometry::BoxRegion;
use crate::net::image::ImageTensor;
use crate::net::model::{check_class, confidence, ModelState};
use crate::scalar::{neg_log_clamped, Scalar};
use crate::tensor::Tensor;

/// Spread below which a map counts as constant.
pub const FLAT_MAP_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, each in `[0, 1]`.
    pub values: Vec<f64>,
    pub source: BoxRegion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Crop,
    Drop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<u8>,
    pub kind: MaskKind,
    pub threshold: f64,
}

impl RegionMask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.cols + c] == 1
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

impl AugmentationMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Image-space rectangle covered by cells `rows × cols` (inclusive ranges).
    pub fn cells_to_box(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> BoxRegion {
        let cw = self.source.width() / self.cols as f64;
        let ch = self.source.height() / self.rows as f64;
        BoxRegion {
            x1: self.source.x1 + c0 as f64 * cw,
            y1: self.source.y1 + r0 as f64 * ch,
            x2: self.source.x1 + (c1 + 1) as f64 * cw,
            y2: self.source.y1 + (r1 + 1) as f64 * ch,
            ..self.source
        }
    }
}

/// Channel mean of a `[c, h, w]` activation, the raw map of a region.
pub fn channel_mean<T: Scalar>(activation: &Tensor<T>) -> Vec<f64> {
    let c = activation.shape()[0];
    let hw = activation.numel() / c;
    let mut out = vec![0.0; hw];
    for chunk in activation.data().chunks(hw) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v.as_f64();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    out
}

/// `(x - min) / (max - min)`; a flat input maps to all zeros.
pub fn normalize_map(raw: &[f64], rows: usize, cols: usize, source: BoxRegion) -> Result<AugmentationMap> {
    if raw.is_empty() || raw.len() != rows * cols {
        return Err(DrnaError::Domain(format!(
            "raw map of {} values does not fill {rows}x{cols}",
            raw.len()
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(DrnaError::Domain("raw map contains non-finite values".into()));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let values = if span < FLAT_MAP_EPS {
        vec![0.0; raw.len()]
    } else {
        raw.iter().map(|v| ((v - min) / span).clamp(0.0, 1.0)).collect()
    };
    Ok(AugmentationMap {
        rows,
        cols,
        values,
        source,
    })
}

fn threshold_mask(map: &AugmentationMap, threshold: f64, kind: MaskKind) -> RegionMask {
    RegionMask {
        rows: map.rows,
        cols: map.cols,
        values: map.values.iter().map(|&v| u8::from(v > threshold)).collect(),
        kind,
        threshold,
    }
}

/// Crop mask and the image-space box covering its positive cells.
///
/// With no positive cell the box falls back to the 3×3 cells around the
/// map's first maximum (clipped to the grid).
pub fn crop_mask(map: &AugmentationMap, theta_c: f64) -> (RegionMask, BoxRegion) {
    let mask = threshold_mask(map, theta_c, MaskKind::Crop);
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..map.rows {
        for c in 0..map.cols {
            if mask.get(r, c) {
                bounds = Some(match bounds {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    let (r0, r1, c0, c1) = bounds.unwrap_or_else(|| {
        let mut best = 0;
        for (i, &v) in map.values.iter().enumerate() {
            if v > map.values[best] {
                best = i;
            }
        }
        let (r, c) = (best / map.cols, best % map.cols);
        (
            r.saturating_sub(1),
            (r + 1).min(map.rows - 1),
            c.saturating_sub(1),
            (c + 1).min(map.cols - 1),
        )
    });
    let b = map.cells_to_box(r0, r1, c0, c1);
    (mask, b)
}

pub fn drop_mask(map: &AugmentationMap, theta_d: f64) -> RegionMask {
    threshold_mask(map, theta_d, MaskKind::Drop)
}

/// Zeroes the pixels of `image` (which depicts `shown` in source image
/// coordinates) whose centers fall in a dropped cell of `map`.
pub fn apply_drop<T: Scalar>(image: &mut ImageTensor<T>, shown: &BoxRegion, map: &AugmentationMap, mask: &RegionMask) {
    let (h, w) = (image.height(), image.width());
    let cw = map.source.width() / map.cols as f64;
    let ch = map.source.height() / map.rows as f64;
    let cell = |v: f64, origin: f64, size: f64, n: usize| -> Option<usize> {
        let k = ((v - origin) / size).floor();
        (k >= 0.0 && (k as usize) < n).then_some(k as usize)
    };
    let cols: Vec<Option<usize>> = (0..w)
        .map(|j| cell(shown.x1 + (j as f64 + 0.5) * shown.width() / w as f64, map.source.x1, cw, map.cols))
        .collect();
    for i in 0..h {
        let y = shown.y1 + (i as f64 + 0.5) * shown.height() / h as f64;
        let Some(r) = cell(y, map.source.y1, ch, map.rows) else { continue };
        for (j, c) in cols.iter().enumerate() {
            if matches!(c, Some(c) if mask.get(r, *c)) {
                let data = image.data_mut();
                for k in 0..3 {
                    data[(k * h + i) * w + j] = T::zero();
                }
            }
        }
    }
}

/// `-Σ log E(R_k*) - log E(X)` from already computed probabilities.
pub fn augmentation_loss_from_probs<T: Scalar>(region_probs: &[T], full_prob: T) -> T {
    region_probs
        .iter()
        .chain(std::iter::once(&full_prob))
        .map(|&p| neg_log_clamped(p).0)
        .sum()
}

/// Augmentation cross-entropy with `E` the shared classifier's ground-truth
/// probability on each augmented region image and on the full image.
pub fn augmentation_loss<T: Scalar>(
    model: &ModelState<T>,
    augmented_regions: &[ImageTensor<T>],
    full_image: &ImageTensor<T>,
    true_class: usize,
) -> Result<T> {
    check_class(model, true_class)?;
    if augmented_regions.is_empty() || augmented_regions.len() > model.arch.top_k {
        return Err(DrnaError::Domain(format!(
            "expected 1..={} augmented regions, got {}",
            model.arch.top_k,
            augmented_regions.len()
        )));
    }
    let probs = augmented_regions
        .iter()
        .map(|r| confidence(model, r, true_class))
        .collect::<Result<Vec<T>>>()?;
    Ok(augmentation_loss_from_probs(&probs, confidence(model, full_image, true_class)?))
}
