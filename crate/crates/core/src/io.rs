//! Image file I/O: 8-bit PNG and the raw float tensor format.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensor_io::{is_raw_tensor, RawTensor};

/// Loads an 8-bit gray/RGB PNG (samples mapped to `v / 255`) or a raw tensor.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image<f32>> {
    let path = path.as_ref();
    if is_raw_tensor(path) {
        return tensor_to_image(&RawTensor::read(path)?);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!("{:?} bit depth", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedFormat(format!("color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let data = buf[..h * w * channels].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(h, w, channels, data)
}

/// 8-bit quantization: clamp to `[0, 1]`, then round half up.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let x = v.as_f64();
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (x * 255.0 + 0.5).floor() as u8
}

/// Writes a 1- or 3-channel image as 8-bit PNG.
pub fn save_image<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::UnsupportedFormat(format!("{c}-channel PNG"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}

pub fn image_to_tensor<T: Scalar>(img: &Image<T>) -> RawTensor {
    RawTensor {
        height: img.height(),
        width: img.width(),
        channels: img.channels(),
        data: img.data().iter().map(|v| v.as_f64() as f32).collect(),
    }
}

pub fn tensor_to_image(t: &RawTensor) -> Result<Image<f32>> {
    Image::new(t.height, t.width, t.channels, t.data.clone())
}

pub fn save_tensor<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    image_to_tensor(img).write(path)
}
