//! Region overlays: navigator proposals and scrutinizer crop boxes drawn
//! over the input image.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{DrnaError, Result};
use crate::geometry::{AnchorGrid, BoxRegion};
use crate::net::image::ImageTensor;
use crate::net::model::ModelState;
use crate::scalar::Scalar;
use crate::trainer::pipeline::{drna_infer, PipelineSettings};

pub const NAVIGATOR_COLOR: [u8; 3] = [255, 40, 40];
pub const CROP_COLOR: [u8; 3] = [40, 255, 40];
pub const NAVIGATOR_STROKE: u32 = 1;
pub const CROP_STROKE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxKind {
    Navigator,
    Crop,
}

impl BoxKind {
    pub fn name(&self) -> &'static str {
        match self {
            BoxKind::Navigator => "navigator",
            BoxKind::Crop => "crop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayBox {
    pub kind: BoxKind,
    pub rank: usize,
    pub region: BoxRegion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub name: String,
    pub path: PathBuf,
    pub boxes: Vec<OverlayBox>,
}

/// Pixel rectangle `(x0, y0, x1, y1)`, inclusive, of a box drawn on an image
/// upscaled by `scale` to `w`×`h`.
pub fn pixel_rect(b: &BoxRegion, scale: u32, w: u32, h: u32) -> (u32, u32, u32, u32) {
    let s = scale as f64;
    let px = |v: f64, lim: u32| ((v * s).round() as i64).clamp(0, lim as i64 - 1) as u32;
    let x0 = px(b.x1, w);
    let y0 = px(b.y1, h);
    let x1 = px(b.x2, w).saturating_sub(1).max(x0);
    let y1 = px(b.y2, h).saturating_sub(1).max(y0);
    (x0, y0, x1, y1)
}

fn draw_rect(img: &mut RgbImage, rect: (u32, u32, u32, u32), stroke: u32, color: [u8; 3]) {
    let (x0, y0, x1, y1) = rect;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let inner = x >= x0 + stroke && x + stroke <= x1 && y >= y0 + stroke && y + stroke <= y1;
            if !inner {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

/// Draws the boxes onto a copy of `image` upscaled by `scale`.
pub fn draw_overlay<T: Scalar>(image: &ImageTensor<T>, boxes: &[OverlayBox], scale: u32) -> RgbImage {
    let (h, w) = (image.height() as u32, image.width() as u32);
    let base = RgbImage::from_raw(w, h, image.to_rgb8()).expect("buffer matches dimensions");
    let mut img = image::imageops::resize(&base, w * scale, h * scale, FilterType::Nearest);
    let (iw, ih) = img.dimensions();
    for kind in [BoxKind::Navigator, BoxKind::Crop] {
        for b in boxes.iter().filter(|b| b.kind == kind) {
            let (stroke, color) = match kind {
                BoxKind::Navigator => (NAVIGATOR_STROKE, NAVIGATOR_COLOR),
                BoxKind::Crop => (CROP_STROKE, CROP_COLOR),
            };
            draw_rect(&mut img, pixel_rect(&b.region, scale, iw, ih), stroke, color);
        }
    }
    img
}

/// Runs the evaluation pipeline on each image and writes `<name>.png` plus a
/// `boxes.tsv` listing every drawn box in input-pixel coordinates.
pub fn render_region_overlays<T: Scalar>(
    model: &ModelState<T>,
    anchors: &AnchorGrid,
    settings: &PipelineSettings,
    images: &[(String, ImageTensor<T>)],
    out_dir: &Path,
    scale: u32,
) -> Result<Vec<Overlay>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(out_dir).map_err(|e| DrnaError::io(out_dir, e))?;
    let mut tsv = String::from("image\tkind\trank\tx1\ty1\tx2\ty2\n");
    let mut out = Vec::with_capacity(images.len());
    for (name, image) in images {
        let inf = drna_infer(model, anchors, image, settings)?;
        let mut boxes: Vec<OverlayBox> = inf
            .proposals
            .iter()
            .enumerate()
            .map(|(rank, r)| OverlayBox {
                kind: BoxKind::Navigator,
                rank,
                region: r.region,
            })
            .collect();
        boxes.extend(inf.crops.iter().enumerate().map(|(rank, c)| OverlayBox {
            kind: BoxKind::Crop,
            rank,
            region: *c,
        }));
        for b in &boxes {
            let r = &b.region;
            let _ = writeln!(tsv, "{name}\t{}\t{}\t{}\t{}\t{}\t{}", b.kind.name(), b.rank, r.x1, r.y1, r.x2, r.y2);
        }
        let path = out_dir.join(format!("{name}.png"));
        draw_overlay(image, &boxes, scale)
            .save(&path)
            .map_err(|source| DrnaError::Image {
                path: path.clone(),
                source,
            })?;
        out.push(Overlay {
            name: name.clone(),
            path,
            boxes,
        });
    }
    let tsv_path = out_dir.join("boxes.tsv");
    fs::write(&tsv_path, tsv).map_err(|e| DrnaError::io(&tsv_path, e))?;
    Ok(out)
}
