//! Linear-light RGB rasters, binary masks, and their on-disk encodings.
//!
//! * Rasters: binary PPM (`P6`, 8-bit sRGB-encoded) for viewing, plus a
//!   lossless float sidecar: the 8 bytes `MRRASTF1`, width and height as
//!   little-endian `u32`, then three planes (R, G, B) of row-major
//!   little-endian `f32`.
//! * Masks: binary PGM (`P5`, 8-bit), 0 = background, 255 = object.
//! * BMP (24-bit, uncompressed) is written for browser display.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};

pub const MIN_DIM: usize = 8;
const SIDECAR_MAGIC: &[u8; 8] = b"MRRASTF1";

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    /// Interleaved RGB, row-major.
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < MIN_DIM || height < MIN_DIM {
            return Err(Error::Shape(format!("raster {width}x{height} is below {MIN_DIM}x{MIN_DIM}")));
        }
        Ok(Raster { width, height, data: vec![0.0; width * height * 3] })
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        let mut r = Raster::new(width, height)?;
        if data.len() != r.data.len() {
            return Err(Error::Shape(format!(
                "raster {width}x{height} needs {} values, got {}",
                r.data.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Shape("raster values must be finite and non-negative".into()));
        }
        r.data = data;
        Ok(r)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| linear_to_srgb8(*v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Raster::from_data(width, height, bytes.iter().map(|b| srgb8_to_linear(*b)).collect())
    }

    /// Round through 8-bit sRGB, as if written to and read from a PPM.
    pub fn quantized(&self) -> Raster {
        let bytes = self.to_rgb8();
        Raster::from_rgb8(self.width, self.height, &bytes).expect("same dimensions")
    }

    pub fn encode_ppm(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(&self.to_rgb8(), self.width as u32, self.height as u32, ExtendedColorType::Rgb8)?;
        Ok(out)
    }

    pub fn encode_bmp(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        image::codecs::bmp::BmpEncoder::new(&mut out).write_image(
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            ExtendedColorType::Rgb8,
        )?;
        Ok(out.into_inner())
    }

    /// Decode an 8-bit PPM or BMP upload into linear light.
    pub fn decode_image(bytes: &[u8]) -> Result<Self> {
        let format = image::guess_format(bytes)?;
        if !matches!(format, ImageFormat::Pnm | ImageFormat::Bmp) {
            return Err(Error::Shape(format!("unsupported image format {format:?}; expected PPM or BMP")));
        }
        let img = image::load_from_memory_with_format(bytes, format)?.to_rgb8();
        Raster::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    pub fn encode_sidecar(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(16 + n * 12);
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for c in 0..3 {
            for p in 0..n {
                out.extend_from_slice(&self.data[p * 3 + c].to_le_bytes());
            }
        }
        out
    }

    pub fn decode_sidecar(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != SIDECAR_MAGIC {
            return Err("not a float raster sidecar (bad magic)".into());
        }
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let n = w * h;
        if bytes.len() != 16 + n * 12 {
            return Err(format!("sidecar for {w}x{h} has wrong length {}", bytes.len()));
        }
        let plane = |c: usize, p: usize| {
            let o = 16 + (c * n + p) * 4;
            f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap())
        };
        let mut data = vec![0.0f32; n * 3];
        for p in 0..n {
            for c in 0..3 {
                data[p * 3 + c] = plane(c, p);
            }
        }
        Raster::from_data(w, h, data).map_err(|e| e.to_string())
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_sidecar()).map_err(|e| Error::io(path, e))
    }

    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::decode_sidecar(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_image(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::decode_image(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn mean_abs_diff(&self, other: &Raster) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>()
            / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn bits(&self) -> &[bool] {
        &self.data
    }

    pub fn encode_pgm(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&bytes, self.width as u32, self.height as u32, ExtendedColorType::L8)?;
        Ok(out)
    }

    /// Decode any 8-bit grayscale or color image; pixels above mid-gray are set.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Mask { width: w, height: h, data: img.as_raw().iter().map(|v| *v > 127).collect() })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_pgm()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Mask::decode(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn linear_to_srgb8(v: f32) -> u8 {
    (linear_to_srgb(f64::from(v)) * 255.0).round() as u8
}

pub fn srgb8_to_linear(b: u8) -> f32 {
    let s = f64::from(b) / 255.0;
    let v = if s <= 0.040_45 { s / 12.92 } else { ((s + 0.055) / 1.055).powf(2.4) };
    v as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Raster {
        let data = (0..w * h * 3).map(|i| (i % 97) as f32 / 50.0).collect();
        Raster::from_data(w, h, data).unwrap()
    }

    #[test]
    fn sidecar_is_bit_exact() {
        let r = gradient(9, 12);
        let back = Raster::decode_sidecar(&r.encode_sidecar()).unwrap();
        assert_eq!(back, r);
        assert!(Raster::decode_sidecar(&r.encode_sidecar()[..40]).is_err());
    }

    #[test]
    fn ppm_header_and_size() {
        let r = gradient(8, 10);
        let ppm = r.encode_ppm().unwrap();
        assert!(ppm.starts_with(b"P6"));
        assert!(ppm.ends_with(&r.to_rgb8()));
        let back = Raster::decode_image(&ppm).unwrap();
        assert_eq!(back.to_rgb8(), r.to_rgb8());
    }

    #[test]
    fn bmp_round_trips_8bit() {
        let r = gradient(16, 8);
        let back = Raster::decode_image(&r.encode_bmp().unwrap()).unwrap();
        assert_eq!(back.to_rgb8(), r.to_rgb8());
    }

    #[test]
    fn mask_pgm_round_trip() {
        let m = Mask::from_fn(10, 9, |x, y| (x + y) % 3 == 0);
        let pgm = m.encode_pgm().unwrap();
        assert!(pgm.starts_with(b"P5"));
        assert_eq!(Mask::decode(&pgm).unwrap(), m);
    }

    #[test]
    fn srgb_8bit_codes_round_trip() {
        for b in 0..=255u8 {
            assert_eq!(linear_to_srgb8(srgb8_to_linear(b)), b);
        }
    }

    #[test]
    fn tiny_rasters_rejected() {
        assert!(Raster::new(7, 8).is_err());
        assert!(Raster::from_data(8, 8, vec![-1.0; 192]).is_err());
    }
}
