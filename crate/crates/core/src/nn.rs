//! Planar feature maps and the convolution building blocks of the kernel
//! predictor, each with an explicit reverse pass.

use crate::activation::{gelu, gelu_grad};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::param::{Parameters, Tensor};
use crate::rng::Rng;
use crate::scalar::{matmul, Scalar};

/// Channel-major `C × H × W` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Feature<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Interleaved image → planar feature.
    pub fn from_image(img: &Image<T>) -> Self {
        let (h, w, c) = img.dims();
        let mut data = vec![T::zero(); c * h * w];
        for (p, px) in img.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + p] = v;
            }
        }
        Self { channels: c, height: h, width: w, data }
    }

    pub fn to_image(&self) -> Image<T> {
        let n = self.height * self.width;
        Image::from_fn(self.height, self.width, self.channels, |r, c, ch| self.data[ch * n + r * self.width + c])
    }

    pub fn gelu(&self) -> Self {
        Self { data: self.data.iter().map(|&v| gelu(v)).collect(), ..self.header() }
    }

    /// `d_out ⊙ gelu'(pre)`, with `self` the pre-activation.
    pub fn gelu_backward(&self, d_out: &Self) -> Self {
        Self {
            data: self.data.iter().zip(&d_out.data).map(|(&x, &g)| g * gelu_grad(x)).collect(),
            ..self.header()
        }
    }

    fn header(&self) -> Self {
        Self { channels: self.channels, height: self.height, width: self.width, data: Vec::new() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Nearest-neighbor ×2 upsampling.
pub fn upsample2<T: Scalar>(x: &Feature<T>) -> Feature<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Feature::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                dst[r * w + col] = src[(r / 2) * x.width + col / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub fn upsample2_backward<T: Scalar>(d_out: &Feature<T>) -> Feature<T> {
    let (h, w) = (d_out.height / 2, d_out.width / 2);
    let mut out = Feature::zeros(d_out.channels, h, w);
    for c in 0..d_out.channels {
        let src = d_out.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for r in 0..d_out.height {
            for col in 0..d_out.width {
                dst[(r / 2) * w + col / 2] += src[r * d_out.width + col];
            }
        }
    }
    out
}

pub fn concat<T: Scalar>(a: &Feature<T>, b: &Feature<T>) -> Feature<T> {
    assert_eq!((a.height, a.width), (b.height, b.width), "concat dims");
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Feature { channels: a.channels + b.channels, height: a.height, width: a.width, data }
}

pub fn split<T: Scalar>(x: &Feature<T>, at: usize) -> (Feature<T>, Feature<T>) {
    let n = x.height * x.width;
    (
        Feature { channels: at, height: x.height, width: x.width, data: x.data[..at * n].to_vec() },
        Feature { channels: x.channels - at, height: x.height, width: x.width, data: x.data[at * n..].to_vec() },
    )
}

/// 2-D convolution (cross-correlation) with zero padding `ksize / 2`.
///
/// `weight` is `[c_out, c_in · k · k]`, rows ordered `(c_in, ky, kx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub ksize: usize,
    pub stride: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Weights uniform in `±sqrt(1 / fan_in)`, zero bias.
    pub fn new(c_in: usize, c_out: usize, ksize: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = c_in * ksize * ksize;
        Self {
            weight: Tensor::uniform(&[c_out, fan_in], (1.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
            ksize,
            stride,
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, ksize: usize, stride: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in * ksize * ksize]),
            bias: Tensor::zeros(&[c_out]),
            ksize,
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(&self.weight.shape),
            bias: Tensor::zeros(&self.bias.shape),
            ksize: self.ksize,
            stride: self.stride,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape[1] / (self.ksize * self.ksize)
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.ksize / 2;
        ((h + 2 * pad - self.ksize) / self.stride + 1, (w + 2 * pad - self.ksize) / self.stride + 1)
    }

    /// Output columns `ox` whose source column `ox·stride + kx − pad` is in range.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let pad = self.ksize / 2;
        let s = self.stride;
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        // ox·s + kx − pad ≤ w − 1
        let hi = if w + pad > kx { ((w + pad - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Column matrix `[c_in·k·k, ho·wo]`.
    fn im2col(&self, x: &Feature<T>) -> (Vec<T>, usize, usize) {
        let (ho, wo) = self.out_dims(x.height, x.width);
        let k = self.ksize;
        let pad = k / 2;
        let s = self.stride;
        let n = ho * wo;
        let mut cols = vec![T::zero(); x.channels * k * k * n];
        for c in 0..x.channels {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    let (lo, hi) = self.valid_cols(kx, x.width, wo);
                    for oy in 0..ho {
                        let iy = oy * s + ky;
                        if iy < pad || iy - pad >= x.height {
                            continue;
                        }
                        let src = &plane[(iy - pad) * x.width..][..x.width];
                        let dst = &mut row[oy * wo + lo..oy * wo + hi];
                        let ix0 = lo * s + kx - pad;
                        if s == 1 {
                            dst.copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d = src[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im(&self, cols: &[T], c_in: usize, h: usize, w: usize, ho: usize, wo: usize) -> Feature<T> {
        let k = self.ksize;
        let pad = k / 2;
        let s = self.stride;
        let n = ho * wo;
        let mut dx = Feature::zeros(c_in, h, w);
        for c in 0..c_in {
            let plane = &mut dx.data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    for oy in 0..ho {
                        let iy = oy * s + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let dst = &mut plane[(iy - pad) * w..][..w];
                        let src = &row[oy * wo + lo..oy * wo + hi];
                        let ix0 = lo * s + kx - pad;
                        if s == 1 {
                            for (d, &v) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in src.iter().enumerate() {
                                dst[ix0 + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Feature<T>) -> Result<Feature<T>> {
        if x.channels != self.c_in() {
            return Err(Error::ChannelCount { expected: self.c_in(), actual: x.channels });
        }
        let c_out = self.c_out();
        let fan_in = self.weight.shape[1];
        let (ho, wo) = self.out_dims(x.height, x.width);
        let n = ho * wo;
        let mut out = vec![T::zero(); c_out * n];
        for (co, plane) in out.chunks_exact_mut(n).enumerate() {
            plane.iter_mut().for_each(|v| *v = self.bias.data[co]);
        }
        if self.ksize == 1 && self.stride == 1 {
            matmul(false, false, c_out, fan_in, n, &self.weight.data, &x.data, T::one(), &mut out);
        } else {
            let (cols, _, _) = self.im2col(x);
            matmul(false, false, c_out, fan_in, n, &self.weight.data, &cols, T::one(), &mut out);
        }
        Ok(Feature { channels: c_out, height: ho, width: wo, data: out })
    }

    /// Accumulates parameter gradients into `grad`; returns `∂L/∂x` when asked.
    pub fn backward(&self, x: &Feature<T>, d_out: &Feature<T>, grad: &mut Self, want_input: bool) -> Option<Feature<T>> {
        let c_out = self.c_out();
        let fan_in = self.weight.shape[1];
        let n = d_out.height * d_out.width;
        for (co, plane) in d_out.data.chunks_exact(n).enumerate() {
            grad.bias.data[co] += plane.iter().copied().fold(T::zero(), |a, b| a + b);
        }
        let direct = self.ksize == 1 && self.stride == 1;
        let cols_owned;
        let cols: &[T] = if direct {
            &x.data
        } else {
            cols_owned = self.im2col(x).0;
            &cols_owned
        };
        matmul(false, true, c_out, n, fan_in, &d_out.data, cols, T::one(), &mut grad.weight.data);
        if !want_input {
            return None;
        }
        let mut d_cols = vec![T::zero(); fan_in * n];
        matmul(true, false, fan_in, c_out, n, &self.weight.data, &d_out.data, T::zero(), &mut d_cols);
        if direct {
            Some(Feature { channels: x.channels, height: x.height, width: x.width, data: d_cols })
        } else {
            Some(self.col2im(&d_cols, x.channels, x.height, x.width, d_out.height, d_out.width))
        }
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}
