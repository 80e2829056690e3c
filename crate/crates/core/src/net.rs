//! Two-level U-Net that predicts a base kernel field and fusion logits.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernel::{KernelField, CENTER_TAP, TAPS};
use crate::nn::{concat, split, upsample2, upsample2_backward, Conv2d, Feature};
use crate::param::{prefixed, Parameters, Tensor};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Spatial dims are padded up to a multiple of this (two stride-2 levels).
pub const SPATIAL_MULTIPLE: usize = 4;

pub const DEFAULT_BASE_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Stem width; the two encoder levels use 2× and 4× this.
    pub base_width: usize,
    pub num_scales: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T> {
    pub stem: Conv2d<T>,
    pub down1a: Conv2d<T>,
    pub down1b: Conv2d<T>,
    pub down2a: Conv2d<T>,
    pub down2b: Conv2d<T>,
    pub bottleneck: Conv2d<T>,
    pub up1: Conv2d<T>,
    pub up2: Conv2d<T>,
    pub kernel_head: Conv2d<T>,
    pub fusion_head: Conv2d<T>,
}

impl<T: Scalar> NetParams<T> {
    /// Random body, zero heads.
    pub fn new(cfg: NetConfig, rng: &mut Rng) -> Result<Self> {
        Self::validate(cfg)?;
        let w = cfg.base_width;
        Ok(Self {
            stem: Conv2d::new(cfg.in_channels, w, 3, 1, rng),
            down1a: Conv2d::new(w, 2 * w, 3, 2, rng),
            down1b: Conv2d::new(2 * w, 2 * w, 3, 1, rng),
            down2a: Conv2d::new(2 * w, 4 * w, 3, 2, rng),
            down2b: Conv2d::new(4 * w, 4 * w, 3, 1, rng),
            bottleneck: Conv2d::new(4 * w, 4 * w, 3, 1, rng),
            up1: Conv2d::new(6 * w, 2 * w, 3, 1, rng),
            up2: Conv2d::new(3 * w, w, 3, 1, rng),
            kernel_head: Conv2d::zeros(w, TAPS, 1, 1),
            fusion_head: Conv2d::zeros(w, cfg.num_scales, 1, 1),
        })
    }

    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        Self::validate(cfg)?;
        let w = cfg.base_width;
        Ok(Self {
            stem: Conv2d::zeros(cfg.in_channels, w, 3, 1),
            down1a: Conv2d::zeros(w, 2 * w, 3, 2),
            down1b: Conv2d::zeros(2 * w, 2 * w, 3, 1),
            down2a: Conv2d::zeros(2 * w, 4 * w, 3, 2),
            down2b: Conv2d::zeros(4 * w, 4 * w, 3, 1),
            bottleneck: Conv2d::zeros(4 * w, 4 * w, 3, 1),
            up1: Conv2d::zeros(6 * w, 2 * w, 3, 1),
            up2: Conv2d::zeros(3 * w, w, 3, 1),
            kernel_head: Conv2d::zeros(w, TAPS, 1, 1),
            fusion_head: Conv2d::zeros(w, cfg.num_scales, 1, 1),
        })
    }

    fn validate(cfg: NetConfig) -> Result<()> {
        if cfg.in_channels == 0 || cfg.base_width == 0 || cfg.num_scales == 0 {
            return Err(Error::InvalidParameter(format!("degenerate net config {cfg:?}")));
        }
        Ok(())
    }

    pub fn config(&self) -> NetConfig {
        NetConfig {
            in_channels: self.stem.c_in(),
            base_width: self.stem.c_out(),
            num_scales: self.fusion_head.c_out(),
        }
    }

    fn convs(&self) -> [(&'static str, &Conv2d<T>); 10] {
        [
            ("stem", &self.stem),
            ("down1a", &self.down1a),
            ("down1b", &self.down1b),
            ("down2a", &self.down2a),
            ("down2b", &self.down2b),
            ("bottleneck", &self.bottleneck),
            ("up1", &self.up1),
            ("up2", &self.up2),
            ("kernel_head", &self.kernel_head),
            ("fusion_head", &self.fusion_head),
        ]
    }

    fn convs_mut(&mut self) -> [(&'static str, &mut Conv2d<T>); 10] {
        [
            ("stem", &mut self.stem),
            ("down1a", &mut self.down1a),
            ("down1b", &mut self.down1b),
            ("down2a", &mut self.down2a),
            ("down2b", &mut self.down2b),
            ("bottleneck", &mut self.bottleneck),
            ("up1", &mut self.up1),
            ("up2", &mut self.up2),
            ("kernel_head", &mut self.kernel_head),
            ("fusion_head", &mut self.fusion_head),
        ]
    }
}

impl<T: Scalar> Parameters<T> for NetParams<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.convs().into_iter().flat_map(|(n, c)| prefixed(n, c.tensors())).collect()
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.convs_mut().into_iter().flat_map(|(n, c)| prefixed(n, c.tensors_mut())).collect()
    }
}

/// Activations kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct NetCache<T> {
    height: usize,
    width: usize,
    x0: Feature<T>,
    z_stem: Feature<T>,
    a_stem: Feature<T>,
    z1a: Feature<T>,
    a1a: Feature<T>,
    z1b: Feature<T>,
    a1b: Feature<T>,
    z2a: Feature<T>,
    a2a: Feature<T>,
    z2b: Feature<T>,
    a2b: Feature<T>,
    zb: Feature<T>,
    u1: Feature<T>,
    zu1: Feature<T>,
    u2: Feature<T>,
    zu2: Feature<T>,
    au2: Feature<T>,
}

/// Replicate-pads bottom and right edges up to a multiple of `m`.
pub fn pad_to_multiple<T: Scalar>(img: &Image<T>, m: usize) -> Image<T> {
    let (h, w, c) = img.dims();
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (hp, wp) == (h, w) {
        return img.clone();
    }
    Image::from_fn(hp, wp, c, |r, col, ch| img.at(r.min(h - 1), col.min(w - 1), ch))
}

fn finite(f: &Feature<impl Scalar>, what: &str) -> Result<()> {
    if f.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// `(raw kernels, fusion logits)`; raw kernels carry the identity center tap.
pub fn net_forward<T: Scalar>(x: &Image<T>, p: &NetParams<T>) -> Result<(KernelField<T>, Image<T>, NetCache<T>)> {
    let (h, w, c) = x.dims();
    if c != p.stem.c_in() {
        return Err(Error::ChannelCount { expected: p.stem.c_in(), actual: c });
    }
    x.ensure_min_size()?;
    let x0 = Feature::from_image(&pad_to_multiple(x, SPATIAL_MULTIPLE));
    let z_stem = p.stem.forward(&x0)?;
    let a_stem = z_stem.gelu();
    let z1a = p.down1a.forward(&a_stem)?;
    let a1a = z1a.gelu();
    let z1b = p.down1b.forward(&a1a)?;
    let a1b = z1b.gelu();
    let z2a = p.down2a.forward(&a1b)?;
    let a2a = z2a.gelu();
    let z2b = p.down2b.forward(&a2a)?;
    let a2b = z2b.gelu();
    let zb = p.bottleneck.forward(&a2b)?;
    let u1 = concat(&upsample2(&zb.gelu()), &a1b);
    let zu1 = p.up1.forward(&u1)?;
    let u2 = concat(&upsample2(&zu1.gelu()), &a_stem);
    let zu2 = p.up2.forward(&u2)?;
    let au2 = zu2.gelu();
    finite(&au2, "decoder activation")?;
    let kh = p.kernel_head.forward(&au2)?;
    let fh = p.fusion_head.forward(&au2)?;

    let wp = x0.width;
    let n = x0.height * wp;
    let kernels = KernelField::from_fn(h, w, |r, col, t| {
        let v = kh.data[t * n + r * wp + col];
        if t == CENTER_TAP {
            v + T::one()
        } else {
            v
        }
    });
    let s = fh.channels;
    let logits = Image::from_fn(h, w, s, |r, col, ch| fh.data[ch * n + r * wp + col]);
    kernels.ensure_finite()?;
    logits.ensure_finite("fusion logits")?;
    let cache = NetCache {
        height: h,
        width: w,
        x0,
        z_stem,
        a_stem,
        z1a,
        a1a,
        z1b,
        a1b,
        z2a,
        a2a,
        z2b,
        a2b,
        zb,
        u1,
        zu1,
        u2,
        zu2,
        au2,
    };
    Ok((kernels, logits, cache))
}

/// Reverse pass. Accumulates into `grads`; returns `∂L/∂x` on request.
pub fn net_backward<T: Scalar>(
    cache: &NetCache<T>,
    p: &NetParams<T>,
    d_kernels: &KernelField<T>,
    d_logits: &Image<T>,
    grads: &mut NetParams<T>,
    want_input: bool,
) -> Result<Option<Image<T>>> {
    let (h, w) = (cache.height, cache.width);
    d_kernels.ensure_dims(h, w)?;
    if d_logits.dims() != (h, w, p.fusion_head.c_out()) {
        return Err(Error::ShapeMismatch("fusion logit gradient".into()));
    }
    let (hp, wp) = (cache.x0.height, cache.x0.width);
    let n = hp * wp;
    let mut d_kh = Feature::zeros(TAPS, hp, wp);
    let mut d_fh = Feature::zeros(d_logits.channels(), hp, wp);
    for r in 0..h {
        for col in 0..w {
            for (t, &g) in d_kernels.taps(r, col).iter().enumerate() {
                d_kh.data[t * n + r * wp + col] = g;
            }
            for ch in 0..d_logits.channels() {
                d_fh.data[ch * n + r * wp + col] = d_logits.at(r, col, ch);
            }
        }
    }
    let mut d_au2 = p.kernel_head.backward(&cache.au2, &d_kh, &mut grads.kernel_head, true).expect("input grad");
    d_au2.add_assign(&p.fusion_head.backward(&cache.au2, &d_fh, &mut grads.fusion_head, true).expect("input grad"));

    let d_zu2 = cache.zu2.gelu_backward(&d_au2);
    let d_u2 = p.up2.backward(&cache.u2, &d_zu2, &mut grads.up2, true).expect("input grad");
    let (d_up2, mut d_a_stem) = split(&d_u2, cache.zu1.channels);
    let d_zu1 = cache.zu1.gelu_backward(&upsample2_backward(&d_up2));
    let d_u1 = p.up1.backward(&cache.u1, &d_zu1, &mut grads.up1, true).expect("input grad");
    let (d_up1, mut d_a1b) = split(&d_u1, cache.zb.channels);
    let d_zb = cache.zb.gelu_backward(&upsample2_backward(&d_up1));
    let d_a2b = p.bottleneck.backward(&cache.a2b, &d_zb, &mut grads.bottleneck, true).expect("input grad");
    let d_z2b = cache.z2b.gelu_backward(&d_a2b);
    let d_a2a = p.down2b.backward(&cache.a2a, &d_z2b, &mut grads.down2b, true).expect("input grad");
    let d_z2a = cache.z2a.gelu_backward(&d_a2a);
    d_a1b.add_assign(&p.down2a.backward(&cache.a1b, &d_z2a, &mut grads.down2a, true).expect("input grad"));
    let d_z1b = cache.z1b.gelu_backward(&d_a1b);
    let d_a1a = p.down1b.backward(&cache.a1a, &d_z1b, &mut grads.down1b, true).expect("input grad");
    let d_z1a = cache.z1a.gelu_backward(&d_a1a);
    d_a_stem.add_assign(&p.down1a.backward(&cache.a_stem, &d_z1a, &mut grads.down1a, true).expect("input grad"));
    let d_z_stem = cache.z_stem.gelu_backward(&d_a_stem);
    let d_x0 = p.stem.backward(&cache.x0, &d_z_stem, &mut grads.stem, want_input);

    Ok(d_x0.map(|d| {
        // fold replicate padding back onto the edge pixels
        let c = d.channels;
        let mut out = Image::zeros(h, w, c);
        for ch in 0..c {
            let plane = d.plane(ch);
            for r in 0..hp {
                for col in 0..wp {
                    let i = out.index(r.min(h - 1), col.min(w - 1), ch);
                    out.data_mut()[i] += plane[r * wp + col];
                }
            }
        }
        out
    }))
}
