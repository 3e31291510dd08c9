//! 8-bit raster images and their file formats.
//!
//! Binary PGM (`P5`) and PPM (`P6`) are read and written by hand so tests
//! and fixtures need nothing beyond this module; PNG goes through `image`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::data(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::data(format!(
                "{width}×{height}×{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        RasterImage::new(width, height, channels, vec![value; width * height * channels])
            .expect("channel count is checked by callers")
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        RasterImage::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Grayscale copy using integer-rounded 601 luma: `(299R + 587G + 114B + 500) / 1000`.
    pub fn to_gray(&self) -> RasterImage {
        if self.is_gray() {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// RGB copy; gray values are replicated.
    pub fn to_rgb(&self) -> RasterImage {
        if !self.is_gray() {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Encodes as binary PGM (gray) or PPM (RGB).
    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.is_gray() { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Decodes binary PGM/PPM with maxval 255.
    pub fn decode_pnm(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m.to_string());
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
        }
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(&format!("unsupported magic {other:?}; only P5 and P6 are read"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header number {s:?}")));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad(&format!("maxval {maxval} is not supported")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = w * h * channels;
        if bytes.len() < pos + need {
            return Err(bad("raster data is truncated"));
        }
        RasterImage::new(w, h, channels, bytes[pos..pos + need].to_vec())
    }

    /// Loads PNG, PGM or PPM, chosen by file content.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
            return RasterImage::decode_pnm(&bytes, path);
        }
        let img = image::load_from_memory(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let color = img.color();
        if color.has_color() {
            let rgb = img.into_rgb8();
            let (w, h) = rgb.dimensions();
            RasterImage::new(w as usize, h as usize, 3, rgb.into_raw())
        } else {
            let g = img.into_luma8();
            let (w, h) = g.dimensions();
            RasterImage::new(w as usize, h as usize, 1, g.into_raw())
        }
    }

    /// Saves as PNG when the extension is `png`, otherwise as PGM/PPM.
    pub fn save(&self, path: &Path) -> Result<()> {
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            let color = if self.is_gray() {
                image::ExtendedColorType::L8
            } else {
                image::ExtendedColorType::Rgb8
            };
            image::save_buffer(path, &self.data, self.width as u32, self.height as u32, color)
                .map_err(|e| Error::format(path, e.to_string()))
        } else {
            fs::write(path, self.encode_pnm()).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}
