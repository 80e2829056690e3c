//! PSNR and SSIM.

use crate::error::{Error, Result};
use crate::image::{rgb_to_y, Image};
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    Rgb,
    /// Luma only.
    Y,
}

impl ChannelMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Self::Rgb),
            "y" => Ok(Self::Y),
            other => Err(Error::InvalidParameter(format!("unknown channel mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rgb => "rgb",
            Self::Y => "y",
        }
    }

    /// Converts to the compared representation.
    pub fn project<T: Scalar>(self, img: &Image<T>) -> Result<Image<T>> {
        match self {
            Self::Rgb => Ok(img.clone()),
            Self::Y if img.channels() == 1 => Ok(img.clone()),
            Self::Y => rgb_to_y(img),
        }
    }
}

pub fn mse<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<f64> {
    x.ensure_same_shape(y, "mse operands")?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(s / x.len() as f64)
}

/// `10 log10(peak² / MSE)`; identical images give `+inf`.
pub fn psnr<T: Scalar>(x: &Image<T>, y: &Image<T>, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Formats a PSNR value, spelling out the identical-image case.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of a plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = g.iter().enumerate().map(|(k, &gk)| gk * plane[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = g.iter().enumerate().map(|(k, &gk)| gk * rows[(r + k) * wo + c]).sum();
        }
    }
    out
}

/// Mean SSIM over valid window positions, averaged over channels.
pub fn ssim<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<f64> {
    x.ensure_same_shape(y, "ssim operands")?;
    let (h, w, c) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let px: Vec<f64> = (0..h * w).map(|i| x.data()[i * c + ch].as_f64()).collect();
        let py: Vec<f64> = (0..h * w).map(|i| y.data()[i * c + ch].as_f64()).collect();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter_valid(&px, h, w, &g);
        let my = filter_valid(&py, h, w, &g);
        let mxx = filter_valid(&sq(&px, &px), h, w, &g);
        let myy = filter_valid(&sq(&py, &py), h, w, &g);
        let mxy = filter_valid(&sq(&px, &py), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}
