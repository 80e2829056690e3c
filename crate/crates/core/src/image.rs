//! Image container and pixel-level operations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// BT.601 full-range luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// `height × width × channels` raster stored row-major by `(row, col, channel)`.
///
/// Nominal range is `[0, 1]`; intermediates may leave it.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidImage(format!(
                "empty dimensions {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty image");
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data).expect("from_fn dims")
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }
    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[self.index(row, col, ch)]
    }
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: T) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    /// Read with clamp-to-edge addressing for signed coordinates.
    #[inline]
    pub fn at_clamped(&self, row: isize, col: isize, ch: usize) -> T {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.at(r, c, ch)
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn ensure_same_shape<U>(&self, other: &Image<U>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Rejects NaN and infinite samples.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Kernel neighborhoods need at least a 3×3 raster.
    pub fn ensure_min_size(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::InvalidImage(format!(
                "{}x{} is smaller than the 3x3 minimum",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone_header() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Image {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> Self {
        Image { height: self.height, width: self.width, channels: self.channels, data: Vec::new() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    /// Copies a single channel into a one-channel image.
    pub fn channel(&self, ch: usize) -> Result<Self> {
        if ch >= self.channels {
            return Err(Error::ChannelCount { expected: ch + 1, actual: self.channels });
        }
        Ok(Image {
            data: self.data.iter().skip(ch).step_by(self.channels).copied().collect(),
            channels: 1,
            ..self.clone_header()
        })
    }
}

/// Luma `Y = 0.299 R + 0.587 G + 0.114 B`.
pub fn rgb_to_y<T: Scalar>(img: &Image<T>) -> Result<Image<T>> {
    if img.channels != 3 {
        return Err(Error::ChannelCount { expected: 3, actual: img.channels });
    }
    let [wr, wg, wb] = LUMA_WEIGHTS.map(T::lit);
    let data = img.data.chunks_exact(3).map(|p| wr * p[0] + wg * p[1] + wb * p[2]).collect();
    Ok(Image { height: img.height, width: img.width, channels: 1, data })
}

/// Square sub-raster with top-left corner `(top, left)`.
pub fn crop_patch<T: Scalar>(img: &Image<T>, top: usize, left: usize, size: usize) -> Result<Image<T>> {
    crop_rect(img, top, left, size, size)
}

pub fn crop_rect<T: Scalar>(
    img: &Image<T>,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Image<T>> {
    if height == 0 || width == 0 || top + height > img.height || left + width > img.width {
        return Err(Error::OutOfBounds(format!(
            "{height}x{width} at ({top}, {left}) in {}x{}",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(height * width * c);
    for r in top..top + height {
        let start = img.index(r, left, 0);
        data.extend_from_slice(&img.data[start..start + width * c]);
    }
    Ok(Image { height, width, channels: c, data })
}

/// Mirrors columns.
pub fn flip_h<T: Scalar>(img: &Image<T>) -> Image<T> {
    let c = img.channels;
    let mut out = img.clone();
    for r in 0..img.height {
        for col in 0..img.width {
            let src = img.index(r, img.width - 1 - col, 0);
            let dst = img.index(r, col, 0);
            out.data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
        }
    }
    out
}

/// Mirrors rows.
pub fn flip_v<T: Scalar>(img: &Image<T>) -> Image<T> {
    let row_len = img.width * img.channels;
    let mut out = img.clone();
    for r in 0..img.height {
        let src = (img.height - 1 - r) * row_len;
        out.data[r * row_len..(r + 1) * row_len].copy_from_slice(&img.data[src..src + row_len]);
    }
    out
}

/// Channel-wise concatenation, `a`'s channels first.
pub fn concat_channels<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<Image<T>> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "concat {}x{} with {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let c = a.channels + b.channels;
    let mut data = Vec::with_capacity(a.height * a.width * c);
    for (pa, pb) in a.data.chunks_exact(a.channels).zip(b.data.chunks_exact(b.channels)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Ok(Image { height: a.height, width: a.width, channels: c, data })
}

/// Inverse of [`concat_channels`]: the first `at` channels and the rest.
pub fn split_channels<T: Scalar>(img: &Image<T>, at: usize) -> Result<(Image<T>, Image<T>)> {
    if at == 0 || at >= img.channels {
        return Err(Error::ChannelCount { expected: at + 1, actual: img.channels });
    }
    let rest = img.channels - at;
    let n = img.height * img.width;
    let mut a = Vec::with_capacity(n * at);
    let mut b = Vec::with_capacity(n * rest);
    for p in img.data.chunks_exact(img.channels) {
        a.extend_from_slice(&p[..at]);
        b.extend_from_slice(&p[at..]);
    }
    Ok((
        Image { height: img.height, width: img.width, channels: at, data: a },
        Image { height: img.height, width: img.width, channels: rest, data: b },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Image<f32> {
        let mut rng = Rng::new(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.uniform() as f32)
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Image::<f32>::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(Image::<f32>::new(0, 2, 3, vec![]).is_err());
    }

    #[test]
    fn luma_of_white_and_red() {
        let white = Image::<f64>::filled(3, 3, 3, 1.0);
        let y = rgb_to_y(&white).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let red = Image::<f64>::from_fn(3, 3, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 });
        assert!(rgb_to_y(&red).unwrap().data().iter().all(|&v| (v - 0.299).abs() < 1e-12));
    }

    #[test]
    fn luma_matches_scalar_recomputation() {
        let img = random(7, 5, 3, 3);
        let y = rgb_to_y(&img).unwrap();
        for r in 0..7 {
            for c in 0..5 {
                let want = 0.299 * img.at(r, c, 0) as f64
                    + 0.587 * img.at(r, c, 1) as f64
                    + 0.114 * img.at(r, c, 2) as f64;
                assert!((y.at(r, c, 0) as f64 - want).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn luma_rejects_gray() {
        assert!(matches!(
            rgb_to_y(&Image::<f32>::zeros(3, 3, 1)),
            Err(Error::ChannelCount { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn luma_is_linear() {
        let a = random(4, 4, 3, 1).cast::<f64>();
        let b = random(4, 4, 3, 2).cast::<f64>();
        let (al, be) = (0.7, -1.3);
        let mix = a.zip_map(&b, |x, y| al * x + be * y).unwrap();
        let lhs = rgb_to_y(&mix).unwrap();
        let ya = rgb_to_y(&a).unwrap();
        let yb = rgb_to_y(&b).unwrap();
        let rhs = ya.zip_map(&yb, |x, y| al * x + be * y).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn full_crop_is_identity_and_interior_crop_indexes() {
        let img = Image::<f32>::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f32);
        assert_eq!(crop_patch(&img, 0, 0, 4).unwrap(), img);
        let inner = crop_patch(&img, 1, 1, 2).unwrap();
        assert_eq!(inner.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(matches!(crop_patch(&img, 3, 0, 2), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn concat_then_split() {
        let a = random(3, 4, 3, 5);
        let b = random(3, 4, 1, 6);
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.channels(), 4);
        assert_eq!(ab.at(2, 1, 3), b.at(2, 1, 0));
        let (a2, b2) = split_channels(&ab, 3).unwrap();
        assert_eq!((a2, b2), (a, b));
        let tall = random(4, 4, 1, 7);
        assert!(matches!(concat_channels(&random(3, 4, 3, 5), &tall), Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn crops_compose(seed in any::<u64>(), a in 0usize..4, b in 0usize..4, c in 0usize..3, d in 0usize..3, t in 1usize..4) {
            let img = random(12, 12, 2, seed);
            let s = t + 3;
            let outer = crop_patch(&img, a, b, s).unwrap();
            let lhs = crop_patch(&outer, c, d, t).unwrap();
            prop_assert_eq!(lhs, crop_patch(&img, a + c, b + d, t).unwrap());
        }

        #[test]
        fn flips_are_commuting_involutions(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
            let img = random(h, w, 3, seed);
            prop_assert_eq!(&flip_h(&flip_h(&img)), &img);
            prop_assert_eq!(&flip_v(&flip_v(&img)), &img);
            prop_assert_eq!(flip_h(&flip_v(&img)), flip_v(&flip_h(&img)));
            let mut before: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
            let mut after: Vec<u32> = flip_h(&img).data().iter().map(|v| v.to_bits()).collect();
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
        }
    }
}
