//! Raster file IO.
//!
//! Images go through standard lossless formats (PNG, PGM/PPM), chosen by file
//! extension. Depth maps use a small binary `.dpt` layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DPT1"
//! 4       4     width (u32)
//! 8       4     height (u32)
//! 12      4     sample bits (u32, 32 or 64)
//! 16      8     scale to meters (f64)
//! 24      ...   width*height IEEE floats, row-major
//! ```

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::{DepthMap, Image};
use crate::error::{Error, Result};
use crate::scalar::Real;

const DEPTH_MAGIC: &[u8; 4] = b"DPT1";
const DEPTH_HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_sample(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    Ok(())
}

/// Loads an 8- or 16-bit grayscale or RGB raster into `[0, 1]` samples.
/// Alpha channels are dropped.
pub fn load_image<T: Real>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    require_file(path)?;
    let dynamic = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let scale8 = |v: u8| T::lit(v as f64 / 255.0);
    let scale16 = |v: u16| T::lit(v as f64 / 65535.0);
    let (channels, data): (usize, Vec<T>) = match dynamic {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(scale8).collect()),
        DynamicImage::ImageLumaA8(_) => {
            (1, dynamic.to_luma8().into_raw().into_iter().map(scale8).collect())
        }
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(scale8).collect()),
        DynamicImage::ImageRgba8(_) => {
            (3, dynamic.to_rgb8().into_raw().into_iter().map(scale8).collect())
        }
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(scale16).collect()),
        DynamicImage::ImageLumaA16(_) => {
            (1, dynamic.to_luma16().into_raw().into_iter().map(scale16).collect())
        }
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(scale16).collect()),
        DynamicImage::ImageRgba16(_) => {
            (3, dynamic.to_rgb16().into_raw().into_iter().map(scale16).collect())
        }
        other => {
            return Err(Error::format(
                path,
                format!("unsupported sample format {:?}", other.color()),
            ))
        }
    };
    Image::new(h, w, channels, data)
}

fn quantize_sample<T: Real>(v: T, depth: BitDepth) -> f64 {
    let v = v.to_f64_lossy().clamp(0.0, 1.0);
    (v * depth.max_sample()).round()
}

/// Values as they will read back after a save at `depth`.
pub fn quantize<T: Real>(img: &Image<T>, depth: BitDepth) -> Image<T> {
    img.map(|v| T::lit(quantize_sample(v, depth) / depth.max_sample()))
        .expect("quantized samples are finite")
}

fn write_error(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

/// Writes an 8-bit raster: samples are clamped to `[0, 1]` and stored as
/// `round(v * 255)`.
pub fn save_image<T: Real>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    save_with_depth(img, path.as_ref(), BitDepth::Eight)
}

/// Writes a 16-bit raster (`round(v * 65535)`).
pub fn save_image_16<T: Real>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    save_with_depth(img, path.as_ref(), BitDepth::Sixteen)
}

fn save_with_depth<T: Real>(img: &Image<T>, path: &Path, depth: BitDepth) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let result = match (depth, img.channels()) {
        (BitDepth::Eight, 1) => {
            let raw = img.data().iter().map(|&v| quantize_sample(v, depth) as u8).collect();
            ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w, h, raw)
                .expect("buffer length checked by Image")
                .save(path)
        }
        (BitDepth::Eight, _) => {
            let raw = img.data().iter().map(|&v| quantize_sample(v, depth) as u8).collect();
            ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w, h, raw)
                .expect("buffer length checked by Image")
                .save(path)
        }
        (BitDepth::Sixteen, 1) => {
            let raw = img.data().iter().map(|&v| quantize_sample(v, depth) as u16).collect();
            ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, raw)
                .expect("buffer length checked by Image")
                .save(path)
        }
        (BitDepth::Sixteen, _) => {
            let raw = img.data().iter().map(|&v| quantize_sample(v, depth) as u16).collect();
            ImageBuffer::<Rgb<u16>, Vec<u16>>::from_raw(w, h, raw)
                .expect("buffer length checked by Image")
                .save(path)
        }
    };
    result.map_err(|e| write_error(path, e))
}

/// Reads a `.dpt` depth raster. Samples are multiplied by the header scale.
pub fn load_depth<T: Real>(path: impl AsRef<Path>) -> Result<DepthMap<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < DEPTH_HEADER_LEN || &bytes[..4] != DEPTH_MAGIC {
        return Err(Error::format(path, "not a DPT1 depth file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (width, height, bits) = (u32_at(4), u32_at(8), u32_at(12));
    let scale = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if bits != 32 && bits != 64 {
        return Err(Error::format(path, format!("unsupported sample width {bits}")));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::format(path, format!("invalid scale {scale}")));
    }
    let n = width * height;
    let payload = &bytes[DEPTH_HEADER_LEN..];
    if payload.len() != n * bits / 8 {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", n * bits / 8, payload.len()),
        ));
    }
    let raw: Vec<f64> = if bits == 32 {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let data = raw
        .into_iter()
        .map(|v| if scale == 1.0 { v } else { v * scale })
        .map(T::lit)
        .collect();
    DepthMap::new(height, width, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a `.dpt` depth raster at the map's native precision with scale 1.
pub fn save_depth<T: Real>(map: &DepthMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(DEPTH_HEADER_LEN + map.data().len() * 8);
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(map.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&T::BITS.to_le_bytes());
    bytes.extend_from_slice(&1.0f64.to_le_bytes());
    for &v in map.data() {
        if T::BITS == 32 {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        } else {
            bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
