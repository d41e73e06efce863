//! Network input images and bilinear region resampling.

use crate::error::{DrnaError, Result};
use crate::geometry::BoxRegion;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel-major `[3, height, width]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T>(Tensor<T>);

impl<T: Scalar> ImageTensor<T> {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor(Tensor::zeros(&[Self::CHANNELS, height, width]))
    }

    /// Validates shape, finiteness and range.
    pub fn from_chw(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(DrnaError::Shape {
                expected: format!("3x{height}x{width}"),
                got: format!("{} values", data.len()),
            });
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one())) {
            return Err(DrnaError::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageTensor(Tensor::from_vec(&[Self::CHANNELS, height, width], data)))
    }

    /// Builds from interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Self {
        let mut data = vec![T::zero(); 3 * height * width];
        let inv = T::of(1.0 / 255.0);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * height * width + i] = T::of(px[c] as f64) * inv;
            }
        }
        ImageTensor(Tensor::from_vec(&[3, height, width], data))
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let d = self.0.data();
        let mut out = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            for c in 0..3 {
                let v = d[c * h * w + i].as_f64().clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.0.data_mut()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn cast<U: Scalar>(&self) -> ImageTensor<U> {
        ImageTensor(self.0.cast())
    }
}

/// Bilinear resample of `region` to `out_size = (h, w)`.
///
/// Output pixel centers map to `y = y1 + (i + 0.5) * box_h / out_h - 0.5` in the
/// source (half-pixel convention), clamped to the valid sample range. A box
/// equal to the image at the same size is therefore the identity.
pub fn crop_and_resize<T: Scalar>(image: &ImageTensor<T>, region: &BoxRegion, out_size: (usize, usize)) -> ImageTensor<T> {
    let (h, w) = (image.height(), image.width());
    let (oh, ow) = out_size;
    let sy = region.height() / oh as f64;
    let sx = region.width() / ow as f64;
    let taps = |start: f64, scale: f64, n: usize, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|i| {
                let p = (start + (i as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(limit - 1);
                (lo, hi, p - lo as f64)
            })
            .collect()
    };
    let ys = taps(region.y1, sy, oh, h);
    let xs = taps(region.x1, sx, ow, w);
    let src = image.0.data();
    let mut out = vec![T::zero(); 3 * oh * ow];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::of(fy);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::of(fx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                let v = top + (bottom - top) * fy;
                out[(c * oh + i) * ow + j] = v.max(T::zero()).min(T::one());
            }
        }
    }
    ImageTensor(Tensor::from_vec(&[3, oh, ow], out))
}
