//! Sauvola adaptive thresholding with integral images.

use super::RasterImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SauvolaParams {
    /// Odd side length of the square window.
    pub window: usize,
    pub k: f64,
    /// Dynamic range of the standard deviation.
    pub r: f64,
}

impl Default for SauvolaParams {
    fn default() -> Self {
        SauvolaParams {
            window: 31,
            k: 0.2,
            r: 128.0,
        }
    }
}

impl SauvolaParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::config(format!(
                "Sauvola window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if !(self.r > 0.0) || !self.k.is_finite() {
            return Err(Error::config(format!(
                "Sauvola needs R > 0 and finite k, got R={} k={}",
                self.r, self.k
            )));
        }
        Ok(())
    }
}

/// Threshold decision shared by every implementation.
///
/// `sum` and `sum_sq` are the exact integer moments of the `n` window pixels.
/// The variance is formed in integers before the single division, so no
/// cancellation occurs.
pub fn is_foreground(pixel: u8, sum: u64, sum_sq: u64, n: u64, p: &SauvolaParams) -> bool {
    let nf = n as f64;
    let mean = sum as f64 / nf;
    let spread = (n as u128 * sum_sq as u128 - sum as u128 * sum as u128) as f64;
    let std = (spread / (nf * nf)).sqrt();
    let threshold = mean * (1.0 + p.k * (std / p.r - 1.0));
    (pixel as f64) < threshold
}

/// Binarizes `img` (converted to luma first if it is RGB): foreground pixels
/// become 0 and background 255.
///
/// Window statistics near the border use replicated edge pixels, so every
/// window holds exactly `window²` samples.
pub fn sauvola_binarize(img: &RasterImage, p: &SauvolaParams) -> Result<RasterImage> {
    p.validate()?;
    let gray = img.to_gray();
    let (w, h) = (gray.width(), gray.height());
    if w == 0 || h == 0 {
        return Ok(gray);
    }
    let r = p.window / 2;
    let (pw, ph) = (w + 2 * r, h + 2 * r);
    let src = gray.data();
    // Integral images over the edge-replicated image with one zero row and column.
    let stride = pw + 1;
    let mut sum = vec![0u64; stride * (ph + 1)];
    let mut sum_sq = vec![0u64; stride * (ph + 1)];
    for py in 0..ph {
        let sy = py.saturating_sub(r).min(h - 1);
        let mut row = 0u64;
        let mut row_sq = 0u64;
        for px in 0..pw {
            let sx = px.saturating_sub(r).min(w - 1);
            let v = src[sy * w + sx] as u64;
            row += v;
            row_sq += v * v;
            let i = (py + 1) * stride + px + 1;
            sum[i] = sum[i - stride] + row;
            sum_sq[i] = sum_sq[i - stride] + row_sq;
        }
    }
    let n = (p.window * p.window) as u64;
    let box_sum = |t: &[u64], x0: usize, y0: usize| {
        let (x1, y1) = (x0 + p.window, y0 + p.window);
        t[y1 * stride + x1] + t[y0 * stride + x0] - t[y0 * stride + x1] - t[y1 * stride + x0]
    };
    let mut out = vec![255u8; w * h];
    for y in 0..h {
        for x in 0..w {
            // Window centred on (x, y) spans padded columns x..x+window.
            let s = box_sum(&sum, x, y);
            let s2 = box_sum(&sum_sq, x, y);
            if is_foreground(src[y * w + x], s, s2, n, p) {
                out[y * w + x] = 0;
            }
        }
    }
    RasterImage::gray(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_background() {
        let img = RasterImage::filled(20, 10, 1, 128);
        let out = sauvola_binarize(&img, &SauvolaParams::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 255));
    }

    #[test]
    fn even_or_tiny_window_is_a_config_error() {
        let img = RasterImage::filled(4, 4, 1, 0);
        for window in [0, 1, 2, 30] {
            let p = SauvolaParams {
                window,
                ..SauvolaParams::default()
            };
            assert!(sauvola_binarize(&img, &p).unwrap_err().is_config(), "{window}");
        }
    }

    #[test]
    fn rgb_input_is_converted() {
        let mut img = RasterImage::filled(16, 16, 3, 230);
        for y in 6..10 {
            for x in 2..14 {
                for c in 0..3 {
                    img.set(x, y, c, 20);
                }
            }
        }
        let out = sauvola_binarize(&img, &SauvolaParams { window: 7, ..Default::default() }).unwrap();
        assert!(out.is_gray());
        assert_eq!(out.get(8, 8, 0), 0);
        assert_eq!(out.get(8, 1, 0), 255);
        assert!(out.data().iter().all(|&v| v == 0 || v == 255));
    }
}
