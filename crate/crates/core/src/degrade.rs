//! Physically modeled degradations and their per-pixel affine form.
//!
//! Every generator here can be written as `I = g ⊙ J + b` with known `g` and
//! `b`, which makes the clean image exactly recoverable wherever the gain is
//! bounded away from zero. That inverse is the verification oracle for the
//! learned operators.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Gains below this are treated as information-destroying.
pub const DEFAULT_GAIN_FLOOR: f64 = 1e-3;
pub const DEFAULT_T_MIN: f64 = 0.05;

/// The three degradation families, with stable task ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationKind {
    Rain,
    Snow,
    Haze,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 3] = [Self::Rain, Self::Snow, Self::Haze];

    pub fn task_id(self) -> usize {
        match self {
            Self::Rain => 0,
            Self::Snow => 1,
            Self::Haze => 2,
        }
    }

    pub fn from_task_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::UnknownTask(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rain => "rain",
            Self::Snow => "snow",
            Self::Haze => "haze",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rain" | "0" => Ok(Self::Rain),
            "snow" | "1" => Ok(Self::Snow),
            "haze" | "2" => Ok(Self::Haze),
            _ => Err(Error::InvalidParameter(format!("unknown degradation '{s}'"))),
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn check_range(name: &str, r: (f64, f64), lo: f64, hi: f64) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite()) || r.0 > r.1 || r.0 < lo || r.1 > hi {
        return Err(Error::InvalidParameter(format!("{name} range {r:?} outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// A single anti-aliased streak segment in pixel coordinates (pixel centers
/// sit on integer coordinates).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Streak {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
    pub width: f64,
    pub intensity: f64,
}

impl Streak {
    /// Pixel coverage in `[0, 1]`: a box profile of the given width around
    /// the segment with a one-pixel linear falloff.
    pub fn coverage(&self, row: f64, col: f64) -> f64 {
        let (vy, vx) = (self.y1 - self.y0, self.x1 - self.x0);
        let len2 = vy * vy + vx * vx;
        let t = if len2 > 0.0 {
            (((row - self.y0) * vy + (col - self.x0) * vx) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (py, px) = (self.y0 + t * vy, self.x0 + t * vx);
        let dist = ((row - py).powi(2) + (col - px).powi(2)).sqrt();
        (self.width / 2.0 + 0.5 - dist).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    pub num_streaks: usize,
    pub length_range: (f64, f64),
    /// Radians from vertical.
    pub angle_range: (f64, f64),
    pub width_range: (f64, f64),
    pub intensity_range: (f64, f64),
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            num_streaks: 40,
            length_range: (6.0, 18.0),
            angle_range: (-0.35, 0.35),
            width_range: (1.0, 1.5),
            intensity_range: (0.15, 0.45),
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        check_range("length", self.length_range, 0.0, f64::MAX)?;
        check_range("angle", self.angle_range, -std::f64::consts::PI, std::f64::consts::PI)?;
        check_range("width", self.width_range, 0.0, f64::MAX)?;
        check_range("intensity", self.intensity_range, 0.0, 1.0)
    }

    /// Draws the streak set for a `height × width` frame from the seed.
    pub fn sample_streaks(&self, height: usize, width: usize) -> Vec<Streak> {
        let mut rng = Rng::new(self.seed);
        (0..self.num_streaks)
            .map(|_| {
                let cy = rng.range(0.0, height as f64);
                let cx = rng.range(0.0, width as f64);
                let len = rng.range(self.length_range.0, self.length_range.1);
                let ang = rng.range(self.angle_range.0, self.angle_range.1);
                let w = rng.range(self.width_range.0, self.width_range.1);
                let a = rng.range(self.intensity_range.0, self.intensity_range.1);
                let (dy, dx) = (ang.cos() * len / 2.0, ang.sin() * len / 2.0);
                Streak { y0: cy - dy, x0: cx - dx, y1: cy + dy, x1: cx + dx, width: w, intensity: a }
            })
            .collect()
    }

    pub fn to_kv(&self) -> String {
        format!(
            "model=additive streaks={} length={}..{} angle={}..{} width={}..{} intensity={}..{} seed={}",
            self.num_streaks,
            self.length_range.0,
            self.length_range.1,
            self.angle_range.0,
            self.angle_range.1,
            self.width_range.0,
            self.width_range.1,
            self.intensity_range.0,
            self.intensity_range.1,
            self.seed
        )
    }
}

/// Sum of streak layers `R = Σ_k R_k`, replicated over `channels`.
pub fn rasterize_streaks<T: Scalar>(
    height: usize,
    width: usize,
    channels: usize,
    streaks: &[Streak],
) -> Image<T> {
    let mut acc = vec![0.0f64; height * width];
    for s in streaks {
        let pad = s.width / 2.0 + 1.0;
        let rlo = (s.y0.min(s.y1) - pad).floor().max(0.0) as usize;
        let rhi = ((s.y0.max(s.y1) + pad).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        let clo = (s.x0.min(s.x1) - pad).floor().max(0.0) as usize;
        let chi = ((s.x0.max(s.x1) + pad).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        if rlo > rhi || clo > chi {
            continue;
        }
        for r in rlo..=rhi {
            for c in clo..=chi {
                let cov = s.coverage(r as f64, c as f64);
                if cov > 0.0 {
                    acc[r * width + c] += s.intensity * cov;
                }
            }
        }
    }
    Image::from_fn(height, width, channels, |r, c, _| T::lit(acc[r * width + c]))
}

/// Additive rain `I = J + R`. Returns `(I, R)`.
pub fn apply_rain<T: Scalar>(clean: &Image<T>, p: &RainParams) -> Result<(Image<T>, Image<T>)> {
    p.validate()?;
    let streaks = p.sample_streaks(clean.height(), clean.width());
    apply_streaks(clean, &streaks)
}

pub fn apply_streaks<T: Scalar>(clean: &Image<T>, streaks: &[Streak]) -> Result<(Image<T>, Image<T>)> {
    let (h, w, c) = clean.dims();
    let rain = rasterize_streaks::<T>(h, w, c, streaks);
    let degraded = clean.zip_map(&rain, |j, r| j + r)?;
    degraded.ensure_finite("rain output")?;
    Ok((degraded, rain))
}

/// Rain as pure attenuation: `I = g ⊙ J` with
/// `g = base_gain · (1 − min(R, max_occlusion))`, `R` the streak layer.
///
/// A gain-only variant of the rain task (no bias term), useful as a training
/// target the inverse kernel can represent exactly.
pub fn apply_rain_attenuation<T: Scalar>(
    clean: &Image<T>,
    p: &RainParams,
    base_gain: f64,
    max_occlusion: f64,
) -> Result<(Image<T>, Image<T>)> {
    p.validate()?;
    if !(base_gain > 0.0 && base_gain <= 1.0) || !(0.0..1.0).contains(&max_occlusion) {
        return Err(Error::InvalidParameter(format!(
            "attenuation base_gain={base_gain} max_occlusion={max_occlusion}"
        )));
    }
    let (h, w, c) = clean.dims();
    let streaks = p.sample_streaks(h, w);
    let rain = rasterize_streaks::<T>(h, w, c, &streaks);
    let (bg, occ) = (T::lit(base_gain), T::lit(max_occlusion));
    let gain = rain.map(|r| bg * (T::one() - r.min(occ)));
    let degraded = gain.zip_map(clean, |g, j| g * j)?;
    Ok((degraded, gain))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnowParams {
    /// Target fraction of pixels covered by particles.
    pub density: f64,
    pub particle_radius_range: (f64, f64),
    pub particle_intensity_range: (f64, f64),
    /// Box-blur radius applied to the mask and particle layer.
    pub mask_softness: usize,
    pub seed: u64,
}

impl Default for SnowParams {
    fn default() -> Self {
        Self {
            density: 0.08,
            particle_radius_range: (1.0, 2.5),
            particle_intensity_range: (0.8, 1.0),
            mask_softness: 1,
            seed: 0,
        }
    }
}

impl SnowParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::InvalidParameter(format!("snow density {}", self.density)));
        }
        check_range("particle radius", self.particle_radius_range, 1.0, f64::MAX)?;
        check_range("particle intensity", self.particle_intensity_range, 0.0, 1.0)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "density={} radius={}..{} intensity={}..{} softness={} seed={}",
            self.density,
            self.particle_radius_range.0,
            self.particle_radius_range.1,
            self.particle_intensity_range.0,
            self.particle_intensity_range.1,
            self.mask_softness,
            self.seed
        )
    }
}

fn box_blur(field: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return field.to_vec();
    }
    let r = radius as isize;
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut out = vec![0.0; field.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, height as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, width as isize - 1) as usize;
                    s += field[yy * width + xx];
                }
            }
            out[y as usize * width + x as usize] = s / norm;
        }
    }
    out
}

/// Occlusion snow `I = M ⊙ S + (1 − M) ⊙ J`. Returns `(I, M, S)`.
pub fn apply_snow<T: Scalar>(
    clean: &Image<T>,
    p: &SnowParams,
) -> Result<(Image<T>, Image<T>, Image<T>)> {
    p.validate()?;
    let (h, w, c) = clean.dims();
    let mut rng = Rng::new(p.seed);
    let mean_r = 0.5 * (p.particle_radius_range.0 + p.particle_radius_range.1);
    let count = if p.density > 0.0 {
        ((p.density * (h * w) as f64) / (std::f64::consts::PI * mean_r * mean_r)).round().max(1.0) as usize
    } else {
        0
    };

    let mut mask = vec![0.0f64; h * w];
    let mut weighted = vec![0.0f64; h * w];
    let mut weight = vec![0.0f64; h * w];
    let mut intensity_sum = 0.0;
    for _ in 0..count {
        let cy = rng.range(0.0, h as f64);
        let cx = rng.range(0.0, w as f64);
        let rad = rng.range(p.particle_radius_range.0, p.particle_radius_range.1);
        let s = rng.range(p.particle_intensity_range.0, p.particle_intensity_range.1);
        intensity_sum += s;
        let rlo = (cy - rad - 1.0).floor().max(0.0) as usize;
        let rhi = ((cy + rad + 1.0).ceil() as usize).min(h - 1);
        let clo = (cx - rad - 1.0).floor().max(0.0) as usize;
        let chi = ((cx + rad + 1.0).ceil() as usize).min(w - 1);
        for r in rlo..=rhi {
            for col in clo..=chi {
                let d = ((r as f64 - cy).powi(2) + (col as f64 - cx).powi(2)).sqrt();
                let cov = (rad + 0.5 - d).clamp(0.0, 1.0);
                if cov > 0.0 {
                    let i = r * w + col;
                    mask[i] = mask[i].max(cov);
                    weighted[i] += cov * s;
                    weight[i] += cov;
                }
            }
        }
    }
    let fill = if count > 0 { intensity_sum / count as f64 } else { p.particle_intensity_range.1 };
    let particles: Vec<f64> = weighted
        .iter()
        .zip(&weight)
        .map(|(&ws, &wt)| if wt > 0.0 { ws / wt } else { fill })
        .collect();
    let mask = box_blur(&mask, h, w, p.mask_softness);
    let particles = box_blur(&particles, h, w, p.mask_softness);

    let m_img = Image::from_fn(h, w, c, |r, col, _| T::lit(mask[r * w + col].clamp(0.0, 1.0)));
    let s_img = Image::from_fn(h, w, c, |r, col, _| T::lit(particles[r * w + col].clamp(0.0, 1.0)));
    let degraded = compose_snow(clean, &m_img, &s_img)?;
    Ok((degraded, m_img, s_img))
}

/// Elementwise `M ⊙ S + (1 − M) ⊙ J`.
pub fn compose_snow<T: Scalar>(clean: &Image<T>, mask: &Image<T>, snow: &Image<T>) -> Result<Image<T>> {
    clean.ensure_same_shape(mask, "snow mask")?;
    clean.ensure_same_shape(snow, "snow layer")?;
    let data = clean
        .data()
        .iter()
        .zip(mask.data())
        .zip(snow.data())
        .map(|((&j, &m), &s)| m * s + (T::one() - m) * j)
        .collect();
    Image::new(clean.height(), clean.width(), clean.channels(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Transmission<T> {
    /// Explicit `t(x)`, one channel.
    Map(Image<T>),
    /// `t = exp(−β · d(x))` from a one-channel depth map.
    Depth { beta: f64, depth: Image<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams<T> {
    /// Per-channel airlight; a single value is broadcast.
    pub atmospheric_light: Vec<f64>,
    pub transmission: Transmission<T>,
    pub t_min: f64,
}

impl<T: Scalar> HazeParams<T> {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.atmospheric_light.is_empty()
            || (self.atmospheric_light.len() != 1 && self.atmospheric_light.len() != channels)
        {
            return Err(Error::InvalidParameter(format!(
                "airlight has {} entries for {channels} channels",
                self.atmospheric_light.len()
            )));
        }
        if self.atmospheric_light.iter().any(|a| !(a.is_finite() && *a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidParameter("airlight outside (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.t_min) {
            return Err(Error::InvalidParameter(format!("t_min {}", self.t_min)));
        }
        if let Transmission::Depth { beta, .. } = self.transmission {
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(Error::InvalidParameter(format!("beta {beta}")));
            }
        }
        Ok(())
    }

    pub fn airlight(&self, ch: usize) -> f64 {
        if self.atmospheric_light.len() == 1 {
            self.atmospheric_light[0]
        } else {
            self.atmospheric_light[ch]
        }
    }

    /// Clamped one-channel transmission for a `height × width` frame.
    pub fn transmission_map(&self, height: usize, width: usize) -> Result<Image<T>> {
        let raw = match &self.transmission {
            Transmission::Map(t) => t.clone(),
            Transmission::Depth { beta, depth } => {
                let b = T::lit(*beta);
                depth.map(|d| (-(b * d)).exp())
            }
        };
        if raw.height() != height || raw.width() != width || raw.channels() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "transmission {}x{}x{} for {height}x{width} frame",
                raw.height(),
                raw.width(),
                raw.channels()
            )));
        }
        let lo = T::lit(self.t_min);
        Ok(raw.map(|t| t.max(lo).min(T::one())))
    }

    pub fn to_kv(&self) -> String {
        let src = match &self.transmission {
            Transmission::Map(_) => "map".to_string(),
            Transmission::Depth { beta, .. } => format!("depth beta={beta}"),
        };
        let a: Vec<String> = self.atmospheric_light.iter().map(|v| v.to_string()).collect();
        format!("transmission={src} airlight={} t_min={}", a.join(","), self.t_min)
    }
}

/// Atmospheric scattering `I = J·t + A·(1 − t)`. Returns `(I, t)`.
pub fn apply_haze<T: Scalar>(clean: &Image<T>, p: &HazeParams<T>) -> Result<(Image<T>, Image<T>)> {
    let (h, w, c) = clean.dims();
    p.validate(c)?;
    let t = p.transmission_map(h, w)?;
    let airlight: Vec<T> = (0..c).map(|ch| T::lit(p.airlight(ch))).collect();
    let degraded = Image::from_fn(h, w, c, |r, col, ch| {
        let tv = t.at(r, col, 0);
        clean.at(r, col, ch) * tv + airlight[ch] * (T::one() - tv)
    });
    Ok((degraded, t))
}

/// Ground-truth maps emitted by a generator.
#[derive(Clone, Debug)]
pub enum DegradationMaps<T> {
    Rain { streaks: Image<T> },
    /// Gain-only rain: the multiplicative field itself.
    RainGain { gain: Image<T> },
    Snow { mask: Image<T>, particles: Image<T> },
    Haze { transmission: Image<T>, airlight: Vec<f64> },
}

/// `I = gain ⊙ J + bias`, fields shaped like the image.
#[derive(Clone, Debug, PartialEq)]
pub struct PerPixelAffine<T> {
    pub gain: Image<T>,
    pub bias: Image<T>,
}

impl<T: Scalar> PerPixelAffine<T> {
    pub fn new(gain: Image<T>, bias: Image<T>) -> Result<Self> {
        gain.ensure_same_shape(&bias, "affine gain/bias")?;
        gain.ensure_finite("affine gain")?;
        Ok(Self { gain, bias })
    }

    pub fn min_abs_gain(&self) -> f64 {
        self.gain.data().iter().map(|g| g.as_f64().abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn is_invertible(&self, floor: f64) -> bool {
        self.min_abs_gain() >= floor
    }

    /// Forward model `g ⊙ J + b`.
    pub fn apply(&self, clean: &Image<T>) -> Result<Image<T>> {
        self.gain.ensure_same_shape(clean, "affine apply")?;
        let data = self
            .gain
            .data()
            .iter()
            .zip(self.bias.data())
            .zip(clean.data())
            .map(|((&g, &b), &j)| b + g * j)
            .collect();
        Image::new(clean.height(), clean.width(), clean.channels(), data)
    }
}

/// Unified affine form of a generator's output.
pub fn to_affine<T: Scalar>(
    kind: DegradationKind,
    maps: &DegradationMaps<T>,
    channels: usize,
) -> Result<PerPixelAffine<T>> {
    let broadcast = |m: &Image<T>| -> Result<Image<T>> {
        match m.channels() {
            c if c == channels => Ok(m.clone()),
            1 => Ok(Image::from_fn(m.height(), m.width(), channels, |r, c, _| m.at(r, c, 0))),
            c => Err(Error::ShapeMismatch(format!("{c}-channel map for {channels}-channel image"))),
        }
    };
    match (kind, maps) {
        (DegradationKind::Rain, DegradationMaps::Rain { streaks }) => {
            let bias = broadcast(streaks)?;
            let gain = bias.map(|_| T::one());
            PerPixelAffine::new(gain, bias)
        }
        (DegradationKind::Rain, DegradationMaps::RainGain { gain }) => {
            let gain = broadcast(gain)?;
            let bias = gain.map(|_| T::zero());
            PerPixelAffine::new(gain, bias)
        }
        (DegradationKind::Snow, DegradationMaps::Snow { mask, particles }) => {
            let m = broadcast(mask)?;
            let s = broadcast(particles)?;
            m.ensure_same_shape(&s, "snow maps")?;
            let gain = m.map(|v| T::one() - v);
            let bias = m.zip_map(&s, |mv, sv| mv * sv)?;
            PerPixelAffine::new(gain, bias)
        }
        (DegradationKind::Haze, DegradationMaps::Haze { transmission, airlight }) => {
            let t = broadcast(transmission)?;
            if airlight.len() != 1 && airlight.len() != channels {
                return Err(Error::ShapeMismatch(format!(
                    "{} airlight values for {channels} channels",
                    airlight.len()
                )));
            }
            let a = |ch: usize| T::lit(if airlight.len() == 1 { airlight[0] } else { airlight[ch] });
            let bias = Image::from_fn(t.height(), t.width(), channels, |r, c, ch| {
                a(ch) * (T::one() - t.at(r, c, ch))
            });
            PerPixelAffine::new(t, bias)
        }
        (k, _) => Err(Error::ShapeMismatch(format!("maps do not belong to a {k} degradation"))),
    }
}

/// Known-operator inverse `Ĵ = (I − b) / g`. Refuses when any gain is below
/// `floor`.
pub fn oracle_inverse<T: Scalar>(a: &PerPixelAffine<T>, degraded: &Image<T>, floor: f64) -> Result<Image<T>> {
    let min_gain = a.min_abs_gain();
    if min_gain < floor {
        return Err(Error::NearSingularGain { min_gain, floor });
    }
    oracle_inverse_masked(a, degraded, floor).map(|(img, _)| img)
}

/// Inverse restricted to pixels with `|g| ≥ floor`; other samples are passed
/// through from `degraded` and flagged `false` in the returned mask.
pub fn oracle_inverse_masked<T: Scalar>(
    a: &PerPixelAffine<T>,
    degraded: &Image<T>,
    floor: f64,
) -> Result<(Image<T>, Vec<bool>)> {
    a.gain.ensure_same_shape(degraded, "oracle inverse")?;
    let mut valid = Vec::with_capacity(degraded.len());
    let data = a
        .gain
        .data()
        .iter()
        .zip(a.bias.data())
        .zip(degraded.data())
        .map(|((&g, &b), &i)| {
            let ok = g.as_f64().abs() >= floor;
            valid.push(ok);
            if ok {
                (i - b) / g
            } else {
                i
            }
        })
        .collect();
    Ok((Image::new(degraded.height(), degraded.width(), degraded.channels(), data)?, valid))
}
