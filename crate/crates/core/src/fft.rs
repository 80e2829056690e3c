//! Radix-2 2-D FFT on image channels.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Complex spectrum of each channel, stored as planar `[channel][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        let n = height * width * channels;
        Self { height, width, channels, re: vec![T::zero(); n], im: vec![T::zero(); n] }
    }

    pub fn index(&self, ch: usize, row: usize, col: usize) -> usize {
        (ch * self.height + row) * self.width + col
    }

    pub fn bins(&self) -> usize {
        self.re.len()
    }
}

fn check_pow2(n: usize) -> Result<()> {
    if n.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::NotPowerOfTwo(n))
    }
}

/// In-place iterative decimation-in-time transform of one strided line.
/// `sign = -1` forward, `+1` inverse (unnormalized).
fn fft_line<T: Scalar>(re: &mut [T], im: &mut [T], sign: f64) {
    let n = re.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * std::f64::consts::PI / len as f64;
        for k in 0..half {
            let (s, c) = (step * k as f64).sin_cos();
            let (wr, wi) = (T::lit(c), T::lit(s));
            for start in (0..n).step_by(len) {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

fn transform<T: Scalar>(s: &mut Spectrum<T>, sign: f64) {
    let (h, w) = (s.height, s.width);
    let mut lr = vec![T::zero(); h.max(w)];
    let mut li = vec![T::zero(); h.max(w)];
    for ch in 0..s.channels {
        let base = ch * h * w;
        for r in 0..h {
            let o = base + r * w;
            fft_line(&mut s.re[o..o + w], &mut s.im[o..o + w], sign);
        }
        for c in 0..w {
            for r in 0..h {
                lr[r] = s.re[base + r * w + c];
                li[r] = s.im[base + r * w + c];
            }
            fft_line(&mut lr[..h], &mut li[..h], sign);
            for r in 0..h {
                s.re[base + r * w + c] = lr[r];
                s.im[base + r * w + c] = li[r];
            }
        }
    }
}

/// Unnormalized forward transform of every channel.
pub fn fft2<T: Scalar>(img: &Image<T>) -> Result<Spectrum<T>> {
    let (h, w, c) = img.dims();
    check_pow2(h)?;
    check_pow2(w)?;
    let mut s = Spectrum::zeros(h, w, c);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let i = s.index(ch, r, col);
                s.re[i] = img.at(r, col, ch);
            }
        }
    }
    transform(&mut s, -1.0);
    Ok(s)
}

/// Inverse transform normalized by `1 / (H·W)`, returned as a complex spectrum.
pub fn ifft2_complex<T: Scalar>(spec: &Spectrum<T>) -> Result<Spectrum<T>> {
    check_pow2(spec.height)?;
    check_pow2(spec.width)?;
    let mut s = spec.clone();
    transform(&mut s, 1.0);
    let norm = T::one() / T::lit((spec.height * spec.width) as f64);
    s.re.iter_mut().chain(s.im.iter_mut()).for_each(|v| *v *= norm);
    Ok(s)
}

/// Real part of [`ifft2_complex`] as an image.
pub fn ifft2<T: Scalar>(spec: &Spectrum<T>) -> Result<Image<T>> {
    let s = ifft2_complex(spec)?;
    Ok(Image::from_fn(s.height, s.width, s.channels, |r, c, ch| s.re[s.index(ch, r, c)]))
}
