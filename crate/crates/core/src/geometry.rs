//! Anchor pyramids, box arithmetic, IoU and greedy non-maximum suppression.
//!
//! Coordinates are continuous pixel positions in the image frame, so boxes stay
//! in `f64` regardless of the scalar type the network runs in.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{DrnaError, Result};

/// Axis-aligned rectangle `[x1, x2) × [y1, y2)`.
///
/// `scale_index` is the pyramid level an anchor came from and `aspect_index`
/// the (scale, ratio) slot within that level. Derived boxes inherit both.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub scale_index: usize,
    pub aspect_index: usize,
}

impl BoxRegion {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoxRegion {
            x1,
            y1,
            x2,
            y2,
            scale_index: 0,
            aspect_index: 0,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(DrnaError::Domain(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )))
        }
    }

    pub fn with_indices(mut self, scale_index: usize, aspect_index: usize) -> Self {
        self.scale_index = scale_index;
        self.aspect_index = aspect_index;
        self
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clips to `[0, width] × [0, height]`.
    pub fn clipped(&self, width: f64, height: f64) -> BoxRegion {
        BoxRegion {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            ..*self
        }
    }

    pub fn full(width: f64, height: f64) -> BoxRegion {
        BoxRegion {
            x1: 0.0,
            y1: 0.0,
            x2: width,
            y2: height,
            scale_index: 0,
            aspect_index: 0,
        }
    }
}

/// A candidate region with its navigator informativeness and, once the
/// teacher has seen it, its ground-truth confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRegion {
    pub region: BoxRegion,
    pub informativeness: f64,
    pub confidence: Option<f64>,
    /// Position of the region in the list it was selected from (the anchor
    /// index for navigator proposals).
    pub index: usize,
}

impl ScoredRegion {
    pub fn new(region: BoxRegion, informativeness: f64, index: usize) -> Self {
        ScoredRegion {
            region,
            informativeness,
            confidence: None,
            index,
        }
    }
}

/// One level of the anchor pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub stride: usize,
    pub base_size: f64,
    pub scales: Vec<f64>,
    /// Width over height.
    pub ratios: Vec<f64>,
}

impl PyramidLevel {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Default three-level pyramid for 64×64 inputs.
pub fn default_pyramid() -> Vec<PyramidLevel> {
    [(8, 16.0), (16, 32.0), (32, 48.0)]
        .into_iter()
        .map(|(stride, base_size)| PyramidLevel {
            stride,
            base_size,
            scales: vec![1.0, 1.26],
            ratios: vec![0.5, 1.0, 2.0],
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    pub rows: usize,
    pub cols: usize,
    pub anchors_per_cell: usize,
    /// Index of this level's first anchor in the flat list.
    pub offset: usize,
}

impl LevelLayout {
    pub fn count(&self) -> usize {
        self.rows * self.cols * self.anchors_per_cell
    }
}

/// Flat anchor list plus the per-level layout needed to align scores with it.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub boxes: Vec<BoxRegion>,
    pub levels: Vec<LevelLayout>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Tiles every pyramid level with its anchors.
///
/// Ordering is level-major, then row-major over grid cells, then scale, then
/// ratio. Boxes crossing the border are clipped, never dropped.
pub fn generate_anchor_grid(image_size: (usize, usize), pyramid: &[PyramidLevel]) -> Result<AnchorGrid> {
    let (height, width) = image_size;
    if pyramid.is_empty() {
        return Err(DrnaError::config("empty pyramid specification"));
    }
    if height == 0 || width == 0 {
        return Err(DrnaError::config("image size must be positive"));
    }
    let mut boxes = Vec::new();
    let mut levels = Vec::with_capacity(pyramid.len());
    for (li, level) in pyramid.iter().enumerate() {
        if level.stride == 0 || height % level.stride != 0 || width % level.stride != 0 {
            return Err(DrnaError::config(format!(
                "pyramid level {li}: stride {} does not divide {height}x{width}",
                level.stride
            )));
        }
        if level.scales.is_empty() || level.ratios.is_empty() {
            return Err(DrnaError::config(format!(
                "pyramid level {li}: scales and ratios must be non-empty"
            )));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !positive(&level.base_size)
            || !level.scales.iter().all(positive)
            || !level.ratios.iter().all(positive)
        {
            return Err(DrnaError::config(format!(
                "pyramid level {li}: sizes, scales and ratios must be positive"
            )));
        }
        let rows = height / level.stride;
        let cols = width / level.stride;
        levels.push(LevelLayout {
            rows,
            cols,
            anchors_per_cell: level.anchors_per_cell(),
            offset: boxes.len(),
        });
        let stride = level.stride as f64;
        for row in 0..rows {
            for col in 0..cols {
                let cx = (col as f64 + 0.5) * stride;
                let cy = (row as f64 + 0.5) * stride;
                for (si, &scale) in level.scales.iter().enumerate() {
                    for (ri, &ratio) in level.ratios.iter().enumerate() {
                        let side = level.base_size * scale;
                        let half_w = 0.5 * side * ratio.sqrt();
                        let half_h = 0.5 * side / ratio.sqrt();
                        let b = BoxRegion {
                            x1: cx - half_w,
                            y1: cy - half_h,
                            x2: cx + half_w,
                            y2: cy + half_h,
                            scale_index: li,
                            aspect_index: si * level.ratios.len() + ri,
                        };
                        boxes.push(b.clipped(width as f64, height as f64));
                    }
                }
            }
        }
    }
    Ok(AnchorGrid { boxes, levels })
}

/// Intersection over union.
pub fn iou(a: &BoxRegion, b: &BoxRegion) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(1.0)
}

/// Descending informativeness, lower input index first on ties.
pub(crate) fn by_informativeness(regions: &[ScoredRegion]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by(|&i, &j| {
        regions[j]
            .informativeness
            .partial_cmp(&regions[i].informativeness)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression keeping at most `keep` regions.
///
/// A region is suppressed when its IoU with an already kept region exceeds
/// `iou_threshold`. The result is ordered by descending informativeness.
pub fn nms(regions: &[ScoredRegion], iou_threshold: f64, keep: usize) -> Result<Vec<ScoredRegion>> {
    if keep == 0 {
        return Err(DrnaError::config("nms keep count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(DrnaError::config(format!(
            "nms IoU threshold {iou_threshold} outside [0, 1]"
        )));
    }
    let mut kept: Vec<ScoredRegion> = Vec::with_capacity(keep);
    for i in by_informativeness(regions) {
        let candidate = &regions[i];
        if kept
            .iter()
            .all(|k| iou(&k.region, &candidate.region) <= iou_threshold)
        {
            kept.push(*candidate);
            if kept.len() == keep {
                break;
            }
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxRegion {
        BoxRegion::new(x1, y1, x2, y2).unwrap()
    }

    /// Repeatedly take the best survivor, then strike everything overlapping it.
    fn brute_force_nms(regions: &[ScoredRegion], thr: f64, keep: usize) -> Vec<usize> {
        let mut alive: Vec<bool> = vec![true; regions.len()];
        let mut out = Vec::new();
        while out.len() < keep {
            let mut best: Option<usize> = None;
            for i in 0..regions.len() {
                if !alive[i] {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) if regions[i].informativeness > regions[b].informativeness => Some(i),
                    b => b,
                };
            }
            let Some(b) = best else { break };
            out.push(b);
            alive[b] = false;
            for j in 0..regions.len() {
                if alive[j] && iou(&regions[b].region, &regions[j].region) > thr {
                    alive[j] = false;
                }
            }
        }
        out
    }

    #[test]
    fn single_level_grid() {
        let level = PyramidLevel {
            stride: 32,
            base_size: 32.0,
            scales: vec![1.0],
            ratios: vec![1.0],
        };
        let grid = generate_anchor_grid((64, 64), &[level]).unwrap();
        let centers: Vec<(f64, f64)> = grid
            .boxes
            .iter()
            .map(|b| ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0))
            .collect();
        assert_eq!(centers, vec![(16.0, 16.0), (48.0, 16.0), (16.0, 48.0), (48.0, 48.0)]);
        assert!(grid.boxes.iter().all(|b| b.width() == 32.0 && b.height() == 32.0));
    }

    #[test]
    fn default_grid_count() {
        // 8x8 + 4x4 + 2x2 cells, six anchors per cell.
        let grid = generate_anchor_grid((64, 64), &default_pyramid()).unwrap();
        assert_eq!(grid.len(), (64 + 16 + 4) * 6);
        assert_eq!(grid.levels[1].offset, 64 * 6);
        assert_eq!(grid.levels[2].offset, 80 * 6);
    }

    #[test]
    fn border_anchors_are_clipped_and_valid() {
        let grid = generate_anchor_grid((64, 64), &default_pyramid()).unwrap();
        for b in &grid.boxes {
            assert!(b.is_valid());
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
        }
        // Top-left 48x48*1.26 anchor on the coarsest level must have been clipped.
        assert_eq!(grid.boxes[grid.levels[2].offset + 4].x1, 0.0);
    }

    #[test]
    fn grid_errors() {
        assert!(generate_anchor_grid((64, 64), &[]).is_err());
        let mut lvl = default_pyramid().remove(0);
        lvl.stride = 24;
        assert!(generate_anchor_grid((64, 64), &[lvl]).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn nms_disjoint_keeps_all_sorted() {
        let regions: Vec<ScoredRegion> = [0.1, 0.7, 0.4, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let x = i as f64 * 10.0;
                ScoredRegion::new(bx(x, 0.0, x + 5.0, 5.0), s, i)
            })
            .collect();
        let kept = nms(&regions, 0.5, 4).unwrap();
        let scores: Vec<f64> = kept.iter().map(|r| r.informativeness).collect();
        assert_eq!(scores, vec![0.9, 0.7, 0.4, 0.1]);
    }

    #[test]
    fn nms_identical_boxes() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        let regions = vec![ScoredRegion::new(b, 0.8, 0), ScoredRegion::new(b, 0.9, 1)];
        let kept = nms(&regions, 0.5, 4).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].informativeness, 0.9);
    }

    #[test]
    fn nms_edge_cases() {
        assert!(nms(&[], 0.5, 4).unwrap().is_empty());
        assert!(nms(&[], 0.5, 0).is_err());
        assert!(nms(&[], 1.5, 1).is_err());
    }

    fn arb_regions(max: usize) -> impl Strategy<Value = Vec<ScoredRegion>> {
        prop::collection::vec(
            (0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0, 0u8..8),
            0..max,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (x, y, w, h, s))| {
                    // Coarse scores so ties actually happen.
                    ScoredRegion::new(bx(x, y, x + w, y + h), s as f64 / 8.0, i)
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn nms_matches_brute_force(regions in arb_regions(40), thr in 0.0f64..1.0, keep in 1usize..10) {
            let fast: Vec<usize> = nms(&regions, thr, keep).unwrap().iter().map(|r| r.index).collect();
            prop_assert_eq!(fast, brute_force_nms(&regions, thr, keep));
        }

        #[test]
        fn nms_invariants(regions in arb_regions(40), thr in 0.0f64..1.0, keep in 1usize..10) {
            let kept = nms(&regions, thr, keep).unwrap();
            prop_assert!(kept.len() <= keep);
            for w in kept.windows(2) {
                prop_assert!(w[0].informativeness >= w[1].informativeness);
            }
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(iou(&kept[i].region, &kept[j].region) <= thr);
                }
            }
        }

        #[test]
        fn iou_symmetric(a in arb_regions(2), b in arb_regions(2)) {
            if let (Some(a), Some(b)) = (a.first(), b.first()) {
                prop_assert_eq!(iou(&a.region, &b.region), iou(&b.region, &a.region));
                prop_assert_eq!(iou(&a.region, &a.region), 1.0);
                let v = iou(&a.region, &b.region);
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
