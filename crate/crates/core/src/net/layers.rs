//! Convolution and fully-connected layers with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

/// Activations saved by [`Conv2d::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 3],
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let data = (0..out_ch * fan_in).map(|_| T::of(normal.sample(rng))).collect();
        Conv2d {
            weight: Tensor::from_vec(&[out_ch, in_ch, kernel, kernel], data),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Tensor::zeros_like(&self.weight),
            bias: Tensor::zeros_like(&self.bias),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let k = self.kernel();
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return x.data().to_vec();
        }
        let (ho, wo) = self.output_size(h, w);
        let mut cols = vec![T::zero(); c * k * k * ho * wo];
        let xd = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xd[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], in_shape: [usize; 3]) -> Tensor<T> {
        let [c, h, w] = in_shape;
        let k = self.kernel();
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return Tensor::from_vec(&in_shape, dcols.to_vec());
        }
        let (ho, wo) = self.output_size(h, w);
        let mut dx = Tensor::zeros(&in_shape);
        let dxd = dx.data_mut();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                let d = &mut dxd[base + ix as usize];
                                *d = *d + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// `x` is `[in, h, w]`.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let in_shape = [x.shape()[0], x.shape()[1], x.shape()[2]];
        debug_assert_eq!(in_shape[0], self.in_channels());
        let (ho, wo) = self.output_size(in_shape[1], in_shape[2]);
        let cols = self.im2col(x);
        let out_ch = self.out_channels();
        let ckk = self.weight.numel() / out_ch;
        let mut out = vec![T::zero(); out_ch * ho * wo];
        for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.data()[o]);
        }
        gemm_nn(self.weight.data(), &cols, &mut out, out_ch, ckk, ho * wo);
        (Tensor::from_vec(&[out_ch, ho, wo], out), ConvCache { cols, in_shape })
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when `need_input_grad` is set.
    pub fn backward(
        &self,
        dout: &Tensor<T>,
        cache: &ConvCache<T>,
        grad: &mut Conv2d<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let out_ch = self.out_channels();
        let p = dout.numel() / out_ch;
        let ckk = self.weight.numel() / out_ch;
        gemm_nt(dout.data(), &cache.cols, grad.weight.data_mut(), out_ch, p, ckk);
        for (o, chunk) in dout.data().chunks(p).enumerate() {
            let db = &mut grad.bias.data_mut()[o];
            *db = *db + chunk.iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); ckk * p];
        gemm_tn(self.weight.data(), dout.data(), &mut dcols, ckk, out_ch, p);
        Some(self.col2im(&dcols, cache.in_shape))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("valid std");
        let data = (0..inputs * outputs).map(|_| T::of(normal.sample(rng))).collect();
        Linear {
            weight: Tensor::from_vec(&[outputs, inputs], data),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Tensor::zeros_like(&self.weight),
            bias: Tensor::zeros_like(&self.bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut y = self.bias.data().to_vec();
        gemm_nn(self.weight.data(), x, &mut y, self.outputs(), self.inputs(), 1);
        y
    }

    pub fn backward(&self, x: &[T], dy: &[T], grad: &mut Linear<T>) -> Vec<T> {
        let (o, i) = (self.outputs(), self.inputs());
        gemm_nn(dy, x, grad.weight.data_mut(), o, 1, i);
        for (b, &d) in grad.bias.data_mut().iter_mut().zip(dy) {
            *b = *b + d;
        }
        let mut dx = vec![T::zero(); i];
        gemm_tn(self.weight.data(), dy, &mut dx, i, o, 1);
        dx
    }
}

pub fn leaky_relu_inplace<T: Scalar>(x: &mut [T], slope: T) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = *v * slope
        }
    });
}

/// Backward of [`leaky_relu_inplace`] given its output.
pub fn leaky_relu_backward<T: Scalar>(activated: &[T], grad: &mut [T], slope: T) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a < T::zero() {
            *g = *g * slope;
        }
    }
}

/// 2×2 max pooling with stride 2 over `[c, h, w]`.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let at = |dy: usize, dx: usize| xd[(ci * h + 2 * oy + dy) * w + 2 * ox + dx];
                od[(ci * ho + oy) * wo + ox] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling of `[c, h, w]`.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let xd = x.data();
    let od = out.data_mut();
    for ci in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                od[(ci * 2 * h + y) * 2 * w + xx] = xd[(ci * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub fn upsample2_backward<T: Scalar>(d: &Tensor<T>) -> Tensor<T> {
    let [c, h2, w2] = [d.shape()[0], d.shape()[1], d.shape()[2]];
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[c, h, w]);
    let dd = d.data();
    let od = out.data_mut();
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                let o = &mut od[(ci * h + y / 2) * w + x / 2];
                *o = *o + dd[(ci * h2 + y) * w2 + x];
            }
        }
    }
    out
}

/// Global average pooling of `[c, h, w]` into a length-`c` vector.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let c = x.shape()[0];
    let hw = x.numel() / c;
    let inv = T::of(1.0 / hw as f64);
    x.data().chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * inv).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution used as the reference.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let k = conv.weight.shape()[2];
        let o = conv.out_channels();
        let (ho, wo) = conv.output_size(h, w);
        let mut out = Tensor::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = conv.bias.data()[oc];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += conv.weight.data()[((oc * c + ci) * k + ky) * k + kx]
                                        * x.data()[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 2, 1), (3, 1, 1), (1, 1, 0)] {
            let conv = Conv2d::<f64>::new(3, 5, k, s, p, &mut rng);
            let x = Tensor::from_vec(&[3, 6, 6], (0..108).map(|i| (i as f64 * 0.37).sin()).collect());
            let (y, _) = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
        let x = Tensor::from_vec(&[2, 5, 5], (0..50).map(|i| (i as f64 * 0.71).cos()).collect());
        // Loss = sum(y * r) for a fixed random r.
        let (y, cache) = conv.forward(&x);
        let r: Vec<f64> = (0..y.numel()).map(|i| (i as f64 * 1.3).sin()).collect();
        let dout = Tensor::from_vec(y.shape(), r.clone());
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&dout, &cache, &mut grad, true).unwrap();
        let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            c.forward(x).0.data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((num - dx.data()[i]).abs() < 1e-8);
        }
        for i in 0..conv.weight.numel() {
            let mut cp = conv.clone();
            cp.weight.data_mut()[i] += h;
            let mut cm = conv.clone();
            cm.weight.data_mut()[i] -= h;
            let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((num - grad.weight.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn upsample_adjoint() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let y = upsample2(&x);
        assert_eq!(y.data()[..4], [1.0, 1.0, 2.0, 2.0]);
        let d = Tensor::filled(&[1, 4, 4], 1.0f64);
        assert_eq!(upsample2_backward(&d).data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn pooling() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 5.0, 3.0, 4.0]);
        assert_eq!(max_pool2(&x).data(), &[5.0]);
        assert_eq!(global_avg_pool(&x), vec![3.25]);
    }
}
