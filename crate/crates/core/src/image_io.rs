//! 8-bit PNG encoding of `[C,H,W]` tensors in `[0,1]`.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[0,1] → 0..=255` rounding half up; out-of-range values saturate.
pub fn to_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn from_u8(b: u8) -> f64 {
    b as f64 / 255.0
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Image(e.to_string())
}

/// Encodes a `[1,H,W]` (gray) or `[3,H,W]` (RGB) tensor.
pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() != 3 {
        return Err(Error::Image(format!(
            "expected [C,H,W], got {:?}",
            t.shape()
        )));
    }
    let (c, h, w) = t.chw();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(Error::Image(format!(
                "{c} channels cannot be stored as PNG"
            )))
        }
    };
    let n = h * w;
    let d = t.data();
    let pixels: Vec<u8> = (0..n * c).map(|i| to_u8(d[(i % c) * n + i / c])).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&pixels).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(out)
}

/// Raw 8-bit samples, interleaved, plus `(channels, height, width)`. Alpha is
/// dropped, palettes are expanded and 16-bit samples are reduced to 8 bits.
pub fn decode_png_raw(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_c, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Image("unexpanded palette image".into())),
    };
    if info.bit_depth != png::BitDepth::Eight || buf.len() != w * h * src_c {
        return Err(Error::Image("unsupported PNG sample layout".into()));
    }
    let samples = if src_c == keep {
        buf
    } else {
        buf.chunks(src_c)
            .flat_map(|px| px[..keep].to_vec())
            .collect()
    };
    Ok((samples, keep, h, w))
}

/// Decodes to `[C,H,W]` with `C ∈ {1,3}`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let (samples, c, h, w) = decode_png_raw(bytes)?;
    let n = h * w;
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        from_u8(samples[(i % n) * c + i / n])
    }))
}

/// Decodes and converts to the requested channel count: RGB is reduced to
/// luminance for 1 channel, gray is replicated for 3.
pub fn decode_png_channels(bytes: &[u8], channels: usize) -> Result<Tensor> {
    let t = decode_png(bytes)?;
    let (c, h, w) = t.chw();
    match (c, channels) {
        (a, b) if a == b => Ok(t),
        (3, 1) => Ok(crate::model::luma(&t)),
        (1, 3) => Tensor::new(&[3, h, w], t.data().repeat(3)),
        _ => Err(Error::Image(format!(
            "cannot convert {c} channels to {channels}"
        ))),
    }
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    decode_png(&std::fs::read(path)?)
}

pub fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_png(t)?)?;
    Ok(())
}

/// Single-channel PNG holding raw class ids.
pub fn encode_labels(labels: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if labels.len() != h * w {
        return Err(Error::Image(format!("{} labels for {h}x{w}", labels.len())));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(labels).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let (samples, c, h, w) = decode_png_raw(bytes)?;
    if c != 1 {
        return Err(Error::Image("label maps must be single-channel".into()));
    }
    Ok((samples, h, w))
}
