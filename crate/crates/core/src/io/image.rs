//! 8-bit PNG images as `[-1, 1]` tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a loaded image was cut from its file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropInfo {
    pub source_height: usize,
    pub source_width: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedImage<T> {
    pub tensor: Tensor<T>,
    pub crop: CropInfo,
}

/// `0 -> -1`, `255 -> 1`.
pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], clamping and rounding ties to even.
pub fn unit_to_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v };
    round_byte((v.clamp(-1.0, 1.0) + 1.0) * 127.5)
}

fn round_byte(x: f64) -> u8 {
    x.round_ties_even().clamp(0.0, 255.0) as u8
}

/// Largest multiple of `m` not above `n`, and the centred offset.
pub fn center_crop_span(n: usize, m: usize) -> (usize, usize) {
    let keep = n / m * m;
    ((n - keep) / 2, keep)
}

/// Decodes an 8-bit PNG into `(channels, height, width, bytes)`. Palette and
/// low bit depth images are expanded; alpha is dropped.
fn decode_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!("unsupported bit depth {:?}; only 8-bit images are read", info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.line_size;
    let (src_c, keep_c) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(img_err(format!("unsupported color type {other:?}"))),
    };
    let mut out = vec![0u8; keep_c * h * w];
    for y in 0..h {
        let row = &buf[y * stride..][..w * src_c];
        for x in 0..w {
            for c in 0..keep_c {
                out[(c * h + y) * w + x] = row[x * src_c + c];
            }
        }
    }
    Ok((keep_c, h, w, out))
}

/// Loads an RGB image (grey images are replicated to three channels) mapped
/// to `[-1, 1]` and centre-cropped so both sides are multiples of `multiple`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>, multiple: usize) -> Result<LoadedImage<T>> {
    let path = path.as_ref();
    let (c, h, w, bytes) = decode_png(path)?;
    let m = multiple.max(1);
    let (top, ch) = center_crop_span(h, m);
    let (left, cw) = center_crop_span(w, m);
    if ch == 0 || cw == 0 {
        return Err(Error::Divisibility {
            what: format!("image {} size {h}x{w}", path.display()),
            size: h.min(w),
            multiple: m,
        });
    }
    let tensor = Tensor::from_fn(3, ch, cw, |ci, y, x| {
        let src = if c == 1 { 0 } else { ci };
        T::of(byte_to_unit(bytes[(src * h + y + top) * w + x + left]))
    });
    Ok(LoadedImage {
        tensor,
        crop: CropInfo {
            source_height: h,
            source_width: w,
            top,
            left,
            height: ch,
            width: cw,
        },
    })
}

/// Loads a single-channel mask: bytes of 128 and above become 1 (generate),
/// the rest 0 (keep). Colour files use their first channel.
pub fn load_mask<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let (_, h, w, bytes) = decode_png(path.as_ref())?;
    Ok(Tensor::from_fn(1, h, w, |_, y, x| if bytes[y * w + x] >= 128 { T::one() } else { T::zero() }))
}

/// Writes a 1- or 3-channel tensor in `[-1, 1]` as an 8-bit PNG.
pub fn save_image<T: Scalar>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = tensor.shape();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::shape("image save", "1 or 3 channels", c.to_string())),
    };
    let mut data = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                data[(y * w + x) * c + ci] = unit_to_byte(tensor.at(ci, y, x).as_f64());
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(&data).map_err(img_err)?;
    writer.finish().map_err(img_err)
}
