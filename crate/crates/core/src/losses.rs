//! Training objective: Charbonnier content, Laplacian edge, and frequency
//! terms, each with its gradient.

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, Spectrum};
use crate::image::Image;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the frequency term.
    pub freq: f64,
    /// Weight of the edge term.
    pub edge: f64,
    /// Charbonnier constant.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { freq: 0.1, edge: 0.05, eps: 1e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.freq, self.edge, self.eps].iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Mean of `sqrt((x − y)² + ε²)` and its gradient w.r.t. `x`.
pub fn charbonnier<T: Scalar>(x: &Image<T>, y: &Image<T>, eps: f64) -> Result<(f64, Image<T>)> {
    x.ensure_same_shape(y, "charbonnier operands")?;
    let n = x.len() as f64;
    let e2 = eps * eps;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let d = (a - b).as_f64();
        let r = (d * d + e2).sqrt();
        total += r;
        grad.push(T::lit(d / r / n));
    }
    Ok((total / n, Image::new(x.height(), x.width(), x.channels(), grad)?))
}

/// 4-neighbor Laplacian with replicate padding, per channel.
pub fn laplacian<T: Scalar>(x: &Image<T>) -> Image<T> {
    let (h, w, _) = x.dims();
    let four = T::lit(4.0);
    Image::from_fn(h, w, x.channels(), |r, c, ch| {
        let (r, c) = (r as isize, c as isize);
        x.at_clamped(r - 1, c, ch) + x.at_clamped(r + 1, c, ch) + x.at_clamped(r, c - 1, ch) + x.at_clamped(r, c + 1, ch)
            - four * x.at(r as usize, c as usize, ch)
    })
}

/// Adjoint of [`laplacian`]: `⟨L x, y⟩ = ⟨x, Lᵀ y⟩`.
pub fn laplacian_adjoint<T: Scalar>(y: &Image<T>) -> Image<T> {
    let (h, w, ch_n) = y.dims();
    let mut out = Image::zeros(h, w, ch_n);
    let four = T::lit(4.0);
    for r in 0..h {
        for c in 0..w {
            let neighbors = [
                (r.saturating_sub(1), c),
                ((r + 1).min(h - 1), c),
                (r, c.saturating_sub(1)),
                (r, (c + 1).min(w - 1)),
            ];
            for ch in 0..ch_n {
                let g = y.at(r, c, ch);
                for &(nr, nc) in &neighbors {
                    let i = out.index(nr, nc, ch);
                    out.data_mut()[i] += g;
                }
                let i = out.index(r, c, ch);
                out.data_mut()[i] -= four * g;
            }
        }
    }
    out
}

/// Charbonnier distance between Laplacians.
pub fn edge_loss<T: Scalar>(x: &Image<T>, y: &Image<T>, eps: f64) -> Result<(f64, Image<T>)> {
    x.ensure_same_shape(y, "edge loss operands")?;
    let (loss, g) = charbonnier(&laplacian(x), &laplacian(y), eps)?;
    Ok((loss, laplacian_adjoint(&g)))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over bins and channels of `|Re(X − Y)| + |Im(X − Y)|`.
pub fn freq_loss<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<(f64, Image<T>)> {
    x.ensure_same_shape(y, "frequency loss operands")?;
    let d = x.zip_map(y, |a, b| a - b)?;
    let spec = fft2(&d)?;
    let n = spec.bins() as f64;
    let loss = spec.re.iter().chain(&spec.im).map(|v| v.as_f64().abs()).sum::<f64>() / n;
    // ∂/∂x = (1/N) Re(F* s) = (HW/N) Re(ifft2(s)) with s the sign pairs
    let mut s = Spectrum::zeros(spec.height, spec.width, spec.channels);
    for i in 0..spec.bins() {
        s.re[i] = T::lit(sign(spec.re[i].as_f64()));
        s.im[i] = T::lit(sign(spec.im[i].as_f64()));
    }
    let scale = T::lit((spec.height * spec.width) as f64 / n);
    Ok((loss, ifft2(&s)?.map(|v| v * scale)))
}

/// Per-term sums over all supervised outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub content: f64,
    pub edge: f64,
    pub freq: f64,
    pub total: f64,
    /// `∂total/∂output` for each output, in order.
    pub grads: Vec<Image<T>>,
}

/// `Σ_i L_c + w.edge·L_e + w.freq·L_f` over the given outputs.
pub fn total_loss<T: Scalar>(outputs: &[&Image<T>], target: &Image<T>, w: &LossWeights) -> Result<LossBreakdown<T>> {
    if outputs.is_empty() {
        return Err(Error::InvalidParameter("no outputs to supervise".into()));
    }
    let mut out = LossBreakdown { content: 0.0, edge: 0.0, freq: 0.0, total: 0.0, grads: Vec::new() };
    for x in outputs {
        let (lc, gc) = charbonnier(x, target, w.eps)?;
        let (le, ge) = edge_loss(x, target, w.eps)?;
        let (lf, gf) = freq_loss(x, target)?;
        out.content += lc;
        out.edge += le;
        out.freq += lf;
        let (we, wf) = (T::lit(w.edge), T::lit(w.freq));
        let g = Image::from_fn(x.height(), x.width(), x.channels(), |r, c, ch| {
            gc.at(r, c, ch) + we * ge.at(r, c, ch) + wf * gf.at(r, c, ch)
        });
        out.grads.push(g);
    }
    out.total = out.content + w.edge * out.edge + w.freq * out.freq;
    Ok(out)
}
