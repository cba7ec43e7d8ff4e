//! Image file I/O.
//!
//! Two on-disk representations are supported:
//!
//! * a lossless float format (`.deqf`): a 16-byte header (magic `DEQF`,
//!   little-endian `u32` height, width, channels) followed by the pixel
//!   buffer as little-endian `f64`, row-major `(h, w, c)`;
//! * 8-bit display formats (PNG, PGM) quantized from the `[0, 1]` range.
//!
//! Loading a display format normalizes to `[0, 1]`. Loading an RGB file with
//! one channel requested applies the BT.601 luminance weights.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

const FLOAT_MAGIC: &[u8; 4] = b"DEQF";

/// File extension of the lossless float format.
pub const FLOAT_EXT: &str = "deqf";

/// Writes the lossless float format.
pub fn save_float_image(x: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = x.shape();
    let mut bytes = Vec::with_capacity(16 + x.len() * 8);
    bytes.extend_from_slice(FLOAT_MAGIC);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(c as u32).to_le_bytes());
    for v in x.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads the lossless float format.
pub fn load_float_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
    if bytes.len() < 16 || &bytes[0..4] != FLOAT_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "{} is not a DEQF float image",
            path.display()
        )));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(4), dim(8), dim(12));
    let n = h * w * c;
    if bytes.len() != 16 + 8 * n {
        return Err(Error::UnsupportedFormat(format!(
            "{}: payload length {} does not match {}x{}x{}",
            path.display(),
            bytes.len() - 16,
            h,
            w,
            c
        )));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Image::from_vec(h, w, c, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit display image (the extension picks PNG or PGM).
/// Values are clamped to `[0, 1]` and quantized.
pub fn save_display_image(x: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = x.shape();
    let encode = |buf: Vec<u8>, color: image::ExtendedColorType| -> Result<()> {
        image::save_buffer(path, &buf, w as u32, h as u32, color)
            .map_err(|e| Error::Codec(e.to_string()))
    };
    match c {
        1 => {
            let buf: Vec<u8> = x.as_slice().iter().map(|&v| quantize(v)).collect();
            encode(buf, image::ExtendedColorType::L8)
        }
        3 => {
            let buf: Vec<u8> = x.as_slice().iter().map(|&v| quantize(v)).collect();
            encode(buf, image::ExtendedColorType::Rgb8)
        }
        _ => Err(Error::UnsupportedFormat(format!(
            "cannot export {c}-channel image to a display format"
        ))),
    }
}

/// Loads an 8-bit display image, normalized to `[0, 1]`.
///
/// With `channels = 1` an RGB source is reduced to luminance
/// (BT.601 weights); with `channels = 3` a grayscale source is replicated.
pub fn load_display_image(path: impl AsRef<Path>, channels: usize) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(_) => Error::MissingFile(path.display().to_string()),
        other => Error::Codec(other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (h, w) = (h as usize, w as usize);
    match channels {
        1 => {
            let mut data = Vec::with_capacity(h * w);
            for p in rgb.pixels() {
                let [r, g, b] = p.0;
                let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                data.push(y / 255.0);
            }
            Image::from_vec(h, w, 1, data)
        }
        3 => {
            let mut data = Vec::with_capacity(h * w * 3);
            for p in rgb.pixels() {
                for v in p.0 {
                    data.push(v as f64 / 255.0);
                }
            }
            Image::from_vec(h, w, 3, data)
        }
        other => Err(Error::UnsupportedFormat(format!(
            "requested channel count {other} is not supported"
        ))),
    }
}

/// Dispatches on extension: `.deqf` loads losslessly, display formats are
/// normalized to `[0, 1]` with the requested channel count.
pub fn load_image(path: impl AsRef<Path>, channels: usize) -> Result<Image> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(FLOAT_EXT) => load_float_image(path),
        Some("png") | Some("pgm") => load_display_image(path, channels),
        other => Err(Error::UnsupportedFormat(format!(
            "unknown image extension {other:?} for {}",
            path.display()
        ))),
    }
}

/// Dispatches on extension like [`load_image`].
pub fn save_image(x: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(FLOAT_EXT) => save_float_image(x, path),
        Some("png") | Some("pgm") => save_display_image(x, path),
        other => Err(Error::UnsupportedFormat(format!(
            "unknown image extension {other:?} for {}",
            path.display()
        ))),
    }
}
