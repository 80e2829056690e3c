//! Per-pixel inverse-operator filtering.
//!
//! Each pixel owns a 3×3 base kernel. A dilation scale `s` spreads its taps to
//! offsets `s·δ`; the multi-scale output blends the per-scale results with
//! per-pixel simplex weights. The fast path gathers the `9·S` samples once and
//! never materializes the dense `(2s+1)²` kernels; the naive path does, and
//! serves as its reference.
//!
//! Out-of-range reads use clamp-to-edge (replicate) addressing everywhere.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

pub const TAPS: usize = 9;
pub const CENTER_TAP: usize = 4;

/// Tap offsets `(d_row, d_col)` in storage order.
pub const TAP_OFFSETS: [(isize, isize); TAPS] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Tolerance on `Σ_s α = 1` accepted by the filtering entry points.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;

/// Nine weights per pixel, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField<T> {
    height: usize,
    width: usize,
    weights: Vec<T>,
}

impl<T: Scalar> KernelField<T> {
    pub fn new(height: usize, width: usize, weights: Vec<T>) -> Result<Self> {
        if weights.len() != height * width * TAPS {
            return Err(Error::ShapeMismatch(format!(
                "kernel field {height}x{width} needs {} weights, got {}",
                height * width * TAPS,
                weights.len()
            )));
        }
        Ok(Self { height, width, weights })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, weights: vec![value; height * width * TAPS] }
    }

    /// Center tap 1, others 0.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut k = Self::filled(height, width, T::zero());
        for p in k.weights.chunks_exact_mut(TAPS) {
            p[CENTER_TAP] = T::one();
        }
        k
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut weights = Vec::with_capacity(height * width * TAPS);
        for r in 0..height {
            for c in 0..width {
                for t in 0..TAPS {
                    weights.push(f(r, c, t));
                }
            }
        }
        Self { height, width, weights }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn weights(&self) -> &[T] {
        &self.weights
    }
    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }
    pub fn into_weights(self) -> Vec<T> {
        self.weights
    }

    #[inline]
    pub fn taps(&self, row: usize, col: usize) -> &[T] {
        let o = (row * self.width + col) * TAPS;
        &self.weights[o..o + TAPS]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, tap: usize) -> T {
        self.weights[(row * self.width + col) * TAPS + tap]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { height: self.height, width: self.width, weights: self.weights.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_dims(other.height, other.width)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            weights: self.weights.iter().zip(&other.weights).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::ShapeMismatch(format!(
                "kernel field {}x{} vs {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff_with(&self, other: &Self) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.weights.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("kernel field".into()))
        }
    }

    /// Nine-channel image view for tensor I/O.
    pub fn to_image(&self) -> Image<T> {
        Image::new(self.height, self.width, TAPS, self.weights.clone()).expect("kernel dims")
    }

    pub fn from_image(img: &Image<T>) -> Result<Self> {
        if img.channels() != TAPS {
            return Err(Error::ChannelCount { expected: TAPS, actual: img.channels() });
        }
        Self::new(img.height(), img.width(), img.data().to_vec())
    }
}

/// Strictly increasing positive dilation scales.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSet(Vec<usize>);

impl ScaleSet {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidParameter("empty scale set".into()));
        }
        if scales[0] == 0 || scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(format!(
                "scales must be positive and strictly increasing: {scales:?}"
            )));
        }
        Ok(Self(scales))
    }

    pub fn single(scale: usize) -> Result<Self> {
        Self::new(vec![scale])
    }

    /// Parses `"1,2,4"`.
    pub fn parse(s: &str) -> Result<Self> {
        let v = s
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| Error::InvalidParameter(format!("bad scale '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(v)
    }

    pub fn scales(&self) -> &[usize] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn max_scale(&self) -> usize {
        *self.0.last().expect("nonempty")
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self(vec![1, 2, 4])
    }
}

impl std::fmt::Display for ScaleSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Per-pixel blend weights over `S` scales, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionField<T> {
    height: usize,
    width: usize,
    scales: usize,
    weights: Vec<T>,
}

impl<T: Scalar> FusionField<T> {
    /// Validates the simplex constraint to `SIMPLEX_TOLERANCE`.
    pub fn new(height: usize, width: usize, scales: usize, weights: Vec<T>) -> Result<Self> {
        let f = Self::new_unchecked(height, width, scales, weights)?;
        f.check_simplex(SIMPLEX_TOLERANCE)?;
        Ok(f)
    }

    pub(crate) fn new_unchecked(height: usize, width: usize, scales: usize, weights: Vec<T>) -> Result<Self> {
        if scales == 0 || weights.len() != height * width * scales {
            return Err(Error::ShapeMismatch(format!(
                "fusion field {height}x{width}x{scales} with {} weights",
                weights.len()
            )));
        }
        Ok(Self { height, width, scales, weights })
    }

    pub fn uniform(height: usize, width: usize, scales: usize) -> Self {
        let w = T::one() / T::lit(scales as f64);
        Self { height, width, scales, weights: vec![w; height * width * scales] }
    }

    /// All weight on scale index `k`.
    pub fn one_hot(height: usize, width: usize, scales: usize, k: usize) -> Self {
        let mut weights = vec![T::zero(); height * width * scales];
        for p in weights.chunks_exact_mut(scales) {
            p[k] = T::one();
        }
        Self { height, width, scales, weights }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn scales(&self) -> usize {
        self.scales
    }
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[T] {
        let o = (row * self.width + col) * self.scales;
        &self.weights[o..o + self.scales]
    }

    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        for (i, p) in self.weights.chunks_exact(self.scales).enumerate() {
            let sum: f64 = p.iter().map(|v| v.as_f64()).sum();
            let neg = p.iter().any(|v| v.as_f64() < -tol || !v.is_finite());
            if neg || (sum - 1.0).abs() > tol {
                return Err(Error::SimplexViolation { row: i / self.width, col: i % self.width, sum });
            }
        }
        Ok(())
    }

    pub fn to_image(&self) -> Image<T> {
        Image::new(self.height, self.width, self.scales, self.weights.clone()).expect("fusion dims")
    }
}

/// Nonnegative per-pixel reconstruction-difficulty score.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap<T> {
    height: usize,
    width: usize,
    scores: Vec<T>,
}

impl<T: Scalar> UncertaintyMap<T> {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn scores(&self) -> &[T] {
        &self.scores
    }
    pub fn at(&self, row: usize, col: usize) -> T {
        self.scores[row * self.width + col]
    }
    pub fn to_image(&self) -> Image<T> {
        Image::new(self.height, self.width, 1, self.scores.clone()).expect("um dims")
    }
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, scores: vec![T::zero(); height * width] }
    }
}

/// Gathered image values `I(p + s·δ_i)` for every pixel, scale and tap.
///
/// Per pixel the layout is scale-major, then tap, then channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    scales: ScaleSet,
    data: Vec<T>,
}

impl<T: Scalar> SampledTensor<T> {
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn scale_set(&self) -> &ScaleSet {
        &self.scales
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    fn pixel_stride(&self) -> usize {
        self.scales.len() * TAPS * self.channels
    }

    /// Sample for pixel `(row, col)`, tap index `tap`, scale index `scale_idx`.
    #[inline]
    pub fn entry(&self, row: usize, col: usize, tap: usize, scale_idx: usize, ch: usize) -> T {
        let p = row * self.width + col;
        self.data[p * self.pixel_stride() + (scale_idx * TAPS + tap) * self.channels + ch]
    }
}

#[inline]
fn clamp_coord(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Source pixel for tap `tap` at scale `s` from `(row, col)`, replicate-padded.
#[inline]
pub fn tap_source(row: usize, col: usize, tap: usize, s: usize, height: usize, width: usize) -> (usize, usize) {
    let (dr, dc) = TAP_OFFSETS[tap];
    let s = s as isize;
    (clamp_coord(row as isize + s * dr, height), clamp_coord(col as isize + s * dc, width))
}

fn check_kernel_image<T: Scalar>(img: &Image<T>, k: &KernelField<T>) -> Result<()> {
    img.ensure_min_size()?;
    k.ensure_dims(img.height(), img.width())
}

/// `Ĵ(p) = Σ_δ K_p(δ) · I(p + s·δ)` per channel.
pub fn apply_single_scale<T: Scalar>(img: &Image<T>, k: &KernelField<T>, s: usize) -> Result<Image<T>> {
    check_kernel_image(img, k)?;
    if s == 0 {
        return Err(Error::InvalidParameter("scale must be positive".into()));
    }
    let (h, w, c) = img.dims();
    let mut out = vec![T::zero(); h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(r, row)| {
        for col in 0..w {
            let taps = k.taps(r, col);
            for ch in 0..c {
                let mut acc = T::zero();
                for (t, &kw) in taps.iter().enumerate() {
                    let (sr, sc) = tap_source(r, col, t, s, h, w);
                    acc += kw * img.at(sr, sc, ch);
                }
                row[col * c + ch] = acc;
            }
        }
    });
    Image::new(h, w, c, out)
}

/// Dense `(2s+1)²` per-pixel kernels: base taps placed at `s·δ`, zeros
/// elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct DilatedKernels<T> {
    pub height: usize,
    pub width: usize,
    pub side: usize,
    pub weights: Vec<T>,
}

impl<T: Scalar> DilatedKernels<T> {
    pub fn kernel(&self, row: usize, col: usize) -> &[T] {
        let n = self.side * self.side;
        let o = (row * self.width + col) * n;
        &self.weights[o..o + n]
    }
}

/// Writes one dilated kernel (row-major, side `2s+1`) into `buf`.
pub fn dilate_taps<T: Scalar>(taps: &[T], s: usize, buf: &mut [T]) {
    let side = 2 * s + 1;
    debug_assert_eq!(buf.len(), side * side);
    buf.iter_mut().for_each(|v| *v = T::zero());
    for (t, &(dr, dc)) in TAP_OFFSETS.iter().enumerate() {
        let rr = (s as isize + dr * s as isize) as usize;
        let cc = (s as isize + dc * s as isize) as usize;
        buf[rr * side + cc] = taps[t];
    }
}

pub fn materialize_dilated<T: Scalar>(k: &KernelField<T>, s: usize) -> Result<DilatedKernels<T>> {
    if s == 0 {
        return Err(Error::InvalidParameter("scale must be positive".into()));
    }
    let side = 2 * s + 1;
    let n = side * side;
    let mut weights = vec![T::zero(); k.height * k.width * n];
    for (p, chunk) in weights.chunks_exact_mut(n).enumerate() {
        dilate_taps(&k.weights[p * TAPS..(p + 1) * TAPS], s, chunk);
    }
    Ok(DilatedKernels { height: k.height, width: k.width, side, weights })
}

/// Full dense correlation of `img` with per-pixel kernels of odd `side`.
pub fn correlate_dense<T: Scalar>(img: &Image<T>, kernel_at: impl Fn(usize, usize) -> Vec<T> + Sync, side: usize) -> Image<T> {
    let (h, w, c) = img.dims();
    let half = (side / 2) as isize;
    let mut out = vec![T::zero(); h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(r, row)| {
        for col in 0..w {
            let kern = kernel_at(r, col);
            for ch in 0..c {
                let mut acc = T::zero();
                for (i, &kw) in kern.iter().enumerate() {
                    let dr = (i / side) as isize - half;
                    let dc = (i % side) as isize - half;
                    acc += kw * img.at_clamped(r as isize + dr, col as isize + dc, ch);
                }
                row[col * c + ch] = acc;
            }
        }
    });
    Image::new(h, w, c, out).expect("dense dims")
}

/// Gathers all `9·S` samples per pixel in a single pass over offsets.
pub fn gather_samples<T: Scalar>(img: &Image<T>, scales: &ScaleSet) -> Result<SampledTensor<T>> {
    img.ensure_min_size()?;
    let (h, w, c) = img.dims();
    let ns = scales.len();
    let stride = ns * TAPS * c;
    let mut data = vec![T::zero(); h * w * stride];
    let src = img.data();
    data.par_chunks_mut(w * stride).enumerate().for_each(|(r, row)| {
        for col in 0..w {
            let px = &mut row[col * stride..(col + 1) * stride];
            for (si, &s) in scales.scales().iter().enumerate() {
                for t in 0..TAPS {
                    let (sr, sc) = tap_source(r, col, t, s, h, w);
                    let o = (sr * w + sc) * c;
                    let d = (si * TAPS + t) * c;
                    px[d..d + c].copy_from_slice(&src[o..o + c]);
                }
            }
        }
    });
    Ok(SampledTensor { height: h, width: w, channels: c, scales: scales.clone(), data })
}

fn check_fast_inputs<T: Scalar>(samples: &SampledTensor<T>, k: &KernelField<T>, alpha: &FusionField<T>) -> Result<()> {
    k.ensure_dims(samples.height, samples.width)?;
    if alpha.height != samples.height || alpha.width != samples.width || alpha.scales != samples.scales.len() {
        return Err(Error::ShapeMismatch(format!(
            "fusion {}x{}x{} vs samples {}x{}x{}",
            alpha.height,
            alpha.width,
            alpha.scales,
            samples.height,
            samples.width,
            samples.scales.len()
        )));
    }
    alpha.check_simplex(SIMPLEX_TOLERANCE)
}

/// Default number of output rows per parallel tile.
pub const DEFAULT_TILE_ROWS: usize = 16;

/// `Ĵ_p = Σ_s α_p^(s) Σ_i K_p(δ_i) · samples(p, i, s)`.
pub fn apply_multiscale_fast<T: Scalar>(
    samples: &SampledTensor<T>,
    k: &KernelField<T>,
    alpha: &FusionField<T>,
) -> Result<Image<T>> {
    apply_multiscale_fast_tiled(samples, k, alpha, DEFAULT_TILE_ROWS)
}

/// [`apply_multiscale_fast`] with an explicit row-tile height. Output does
/// not depend on `tile_rows`.
pub fn apply_multiscale_fast_tiled<T: Scalar>(
    samples: &SampledTensor<T>,
    k: &KernelField<T>,
    alpha: &FusionField<T>,
    tile_rows: usize,
) -> Result<Image<T>> {
    check_fast_inputs(samples, k, alpha)?;
    let (h, w, c) = (samples.height, samples.width, samples.channels);
    let ns = samples.scales.len();
    let stride = samples.pixel_stride();
    let mut out = vec![T::zero(); h * w * c];
    let tile = tile_rows.max(1) * w * c;
    out.par_chunks_mut(tile).enumerate().for_each(|(ti, chunk)| {
        let first = ti * tile / c;
        for (local, px_out) in chunk.chunks_exact_mut(c).enumerate() {
            let p = first + local;
            let taps = &k.weights[p * TAPS..(p + 1) * TAPS];
            let a = &alpha.weights[p * ns..(p + 1) * ns];
            let smp = &samples.data[p * stride..(p + 1) * stride];
            for (ch, o) in px_out.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (si, &aw) in a.iter().enumerate() {
                    let base = si * TAPS * c + ch;
                    let mut inner = T::zero();
                    for (t, &kw) in taps.iter().enumerate() {
                        inner += kw * smp[base + t * c];
                    }
                    acc += aw * inner;
                }
                *o = acc;
            }
        }
    });
    Image::new(h, w, c, out)
}

/// Reference semantics: `Σ_s α^(s) ⊙ correlate(I, materialize_dilated(K, s))`.
/// Dense kernels are built per pixel on the fly.
pub fn apply_multiscale_naive<T: Scalar>(
    img: &Image<T>,
    k: &KernelField<T>,
    scales: &ScaleSet,
    alpha: &FusionField<T>,
) -> Result<Image<T>> {
    check_kernel_image(img, k)?;
    if alpha.height != img.height() || alpha.width != img.width() || alpha.scales != scales.len() {
        return Err(Error::ShapeMismatch("fusion field does not match image/scales".into()));
    }
    alpha.check_simplex(SIMPLEX_TOLERANCE)?;
    let (h, w, c) = img.dims();
    let mut out = Image::zeros(h, w, c);
    for (si, &s) in scales.scales().iter().enumerate() {
        let side = 2 * s + 1;
        let per_scale = correlate_dense(
            img,
            |r, col| {
                let mut buf = vec![T::zero(); side * side];
                dilate_taps(k.taps(r, col), s, &mut buf);
                buf
            },
            side,
        );
        for r in 0..h {
            for col in 0..w {
                let a = alpha.at(r, col)[si];
                for ch in 0..c {
                    let i = out.index(r, col, ch);
                    out.data_mut()[i] += a * per_scale.data()[i];
                }
            }
        }
    }
    Ok(out)
}

/// `UM(p) = (1/9) Σ_i |K_p(δ_i)|`.
pub fn uncertainty_map<T: Scalar>(k: &KernelField<T>) -> UncertaintyMap<T> {
    let ninth = T::one() / T::lit(TAPS as f64);
    let scores = k
        .weights
        .chunks_exact(TAPS)
        .map(|p| p.iter().fold(T::zero(), |a, v| a + v.abs()) * ninth)
        .collect();
    UncertaintyMap { height: k.height, width: k.width, scores }
}

/// Per-pixel softmax over the channels of `logits` (one channel per scale).
pub fn softmax_fusion<T: Scalar>(logits: &Image<T>) -> Result<FusionField<T>> {
    logits.ensure_finite("fusion logits")?;
    let s = logits.channels();
    let mut weights = Vec::with_capacity(logits.len());
    for z in logits.data().chunks_exact(s) {
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
        let sum = e.iter().copied().fold(T::zero(), |a, b| a + b);
        weights.extend(e.iter().map(|&v| v / sum));
    }
    FusionField::new_unchecked(logits.height(), logits.width(), s, weights)
}

/// Gradients of the fast multi-scale filter.
pub struct MultiscaleGrads<T> {
    pub d_kernels: KernelField<T>,
    /// Per-pixel gradient w.r.t. the fusion weights, pixel-major.
    pub d_alpha: Vec<T>,
    /// Gradient w.r.t. the filtered image, present when requested.
    pub d_image: Option<Image<T>>,
}

/// Reverse pass of [`apply_multiscale_fast`] given `d_out = ∂L/∂Ĵ`.
pub fn multiscale_backward<T: Scalar>(
    samples: &SampledTensor<T>,
    k: &KernelField<T>,
    alpha: &FusionField<T>,
    d_out: &Image<T>,
    want_image_grad: bool,
) -> Result<MultiscaleGrads<T>> {
    let (h, w, c) = (samples.height, samples.width, samples.channels);
    if d_out.dims() != (h, w, c) {
        return Err(Error::ShapeMismatch("upstream gradient vs samples".into()));
    }
    k.ensure_dims(h, w)?;
    let ns = samples.scales.len();
    let stride = samples.pixel_stride();
    let mut dk = vec![T::zero(); h * w * TAPS];
    let mut da = vec![T::zero(); h * w * ns];
    dk.par_chunks_mut(TAPS).zip(da.par_chunks_mut(ns)).enumerate().for_each(|(p, (dkp, dap))| {
        let taps = &k.weights[p * TAPS..(p + 1) * TAPS];
        let a = &alpha.weights[p * ns..(p + 1) * ns];
        let smp = &samples.data[p * stride..(p + 1) * stride];
        let g = &d_out.data()[p * c..(p + 1) * c];
        for si in 0..ns {
            let mut dalpha = T::zero();
            for (ch, &gv) in g.iter().enumerate() {
                let base = si * TAPS * c + ch;
                let mut inner = T::zero();
                for (t, &kw) in taps.iter().enumerate() {
                    let sv = smp[base + t * c];
                    inner += kw * sv;
                    dkp[t] += a[si] * gv * sv;
                }
                dalpha += gv * inner;
            }
            dap[si] = dalpha;
        }
    });
    let d_image = if want_image_grad {
        let mut di = Image::zeros(h, w, c);
        for r in 0..h {
            for col in 0..w {
                let p = r * w + col;
                let taps = &k.weights[p * TAPS..(p + 1) * TAPS];
                let a = &alpha.weights[p * ns..(p + 1) * ns];
                let g = &d_out.data()[p * c..(p + 1) * c];
                for (si, &s) in samples.scales.scales().iter().enumerate() {
                    for (t, &kw) in taps.iter().enumerate() {
                        let coef = a[si] * kw;
                        let (sr, sc) = tap_source(r, col, t, s, h, w);
                        let o = (sr * w + sc) * c;
                        for (ch, &gv) in g.iter().enumerate() {
                            di.data_mut()[o + ch] += coef * gv;
                        }
                    }
                }
            }
        }
        Some(di)
    } else {
        None
    };
    Ok(MultiscaleGrads { d_kernels: KernelField::new(h, w, dk)?, d_alpha: da, d_image })
}

/// Adds `∂L/∂K` from `∂L/∂UM` into `d_kernels` (subgradient `sign(0) = 0`).
pub fn uncertainty_backward<T: Scalar>(k: &KernelField<T>, d_um: &[T], d_kernels: &mut KernelField<T>) {
    let ninth = T::one() / T::lit(TAPS as f64);
    for ((taps, dk), &g) in k.weights.chunks_exact(TAPS).zip(d_kernels.weights.chunks_exact_mut(TAPS)).zip(d_um) {
        for (kw, d) in taps.iter().zip(dk.iter_mut()) {
            let sign = if *kw > T::zero() {
                T::one()
            } else if *kw < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            *d += g * ninth * sign;
        }
    }
}

/// Softmax pullback: `dz = α ⊙ (dα − ⟨α, dα⟩)` per pixel.
pub fn softmax_backward<T: Scalar>(alpha: &FusionField<T>, d_alpha: &[T]) -> Image<T> {
    let s = alpha.scales;
    let mut dz = Vec::with_capacity(alpha.weights.len());
    for (a, g) in alpha.weights.chunks_exact(s).zip(d_alpha.chunks_exact(s)) {
        let dot = a.iter().zip(g).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        dz.extend(a.iter().zip(g).map(|(&x, &y)| x * (y - dot)));
    }
    Image::new(alpha.height, alpha.width, s, dz).expect("softmax grad dims")
}
