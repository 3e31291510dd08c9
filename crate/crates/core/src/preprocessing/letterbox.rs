//! Aspect-preserving resize onto a fixed canvas.

use super::RasterImage;
use crate::error::{Error, Result};

/// Placement of the resized content inside the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
}

/// Computes the content size and offsets for a `h×w` image on a
/// `target_h×target_w` canvas, scaling by `min(target_h/h, target_w/w)`.
pub fn letterbox_placement(h: usize, w: usize, target_h: usize, target_w: usize) -> Result<Placement> {
    if h == 0 || w == 0 {
        return Err(Error::data(format!("cannot resize a zero-area image ({h}×{w})")));
    }
    if target_h == 0 || target_w == 0 {
        return Err(Error::config(format!("zero-area resize target {target_h}×{target_w}")));
    }
    let scale = (target_h as f64 / h as f64).min(target_w as f64 / w as f64);
    let height = ((h as f64 * scale).round() as usize).clamp(1, target_h);
    let width = ((w as f64 * scale).round() as usize).clamp(1, target_w);
    Ok(Placement {
        height,
        width,
        top: (target_h - height) / 2,
        left: (target_w - width) / 2,
    })
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize_bilinear(img: &RasterImage, height: usize, width: usize) -> Result<RasterImage> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if h == 0 || w == 0 {
        return Err(Error::data(format!("cannot resize a zero-area image ({h}×{w})")));
    }
    if height == h && width == w {
        return Ok(img.clone());
    }
    let taps = |dst: usize, src_len: usize, dst_len: usize| {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| taps(x, w, width)).collect();
    let src = img.data();
    let mut out = vec![0u8; height * width * c];
    for y in 0..height {
        let (y0, y1, fy) = taps(y, h, height);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[(y * width + x) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RasterImage::new(width, height, c, out)
}

/// Resizes `img` to fit `target_h×target_w` without distortion, centres it
/// and fills the remainder with `pad_value`.
pub fn resize_letterbox(img: &RasterImage, target_h: usize, target_w: usize, pad_value: u8) -> Result<RasterImage> {
    let place = letterbox_placement(img.height(), img.width(), target_h, target_w)?;
    let content = resize_bilinear(img, place.height, place.width)?;
    let c = img.channels();
    let mut canvas = RasterImage::filled(target_w, target_h, c, pad_value);
    let row_bytes = place.width * c;
    for y in 0..place.height {
        let dst = ((place.top + y) * target_w + place.left) * c;
        canvas.data_mut()[dst..dst + row_bytes]
            .copy_from_slice(&content.data()[y * row_bytes..(y + 1) * row_bytes]);
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_line_onto_tall_canvas() {
        let p = letterbox_placement(300, 1200, 512, 128).unwrap();
        assert_eq!(
            p,
            Placement {
                height: 32,
                width: 128,
                top: 240,
                left: 0
            }
        );
    }

    #[test]
    fn square_to_square_has_no_padding() {
        let img = RasterImage::filled(40, 40, 1, 0);
        let out = resize_letterbox(&img, 64, 64, 255).unwrap();
        assert!(out.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn padding_uses_the_pad_value() {
        let img = RasterImage::filled(1200, 300, 1, 0);
        let out = resize_letterbox(&img, 512, 128, 255).unwrap();
        for y in 0..512 {
            let expected = if (240..272).contains(&y) { 0 } else { 255 };
            assert!((0..128).all(|x| out.get(x, y, 0) == expected), "row {y}");
        }
    }

    #[test]
    fn aspect_ratio_is_kept_within_a_pixel() {
        for (h, w) in [(37, 211), (500, 90), (64, 64), (3, 1000), (999, 7)] {
            for (th, tw) in [(512, 128), (128, 512), (64, 64)] {
                let p = letterbox_placement(h, w, th, tw).unwrap();
                let ideal_w = p.height as f64 * w as f64 / h as f64;
                let ideal_h = p.width as f64 * h as f64 / w as f64;
                assert!(
                    (ideal_w - p.width as f64).abs() <= 1.0 || (ideal_h - p.height as f64).abs() <= 1.0,
                    "{h}×{w} → {p:?}"
                );
                assert!(p.height == th || p.width == tw);
            }
        }
    }

    #[test]
    fn zero_area_input_is_a_data_error() {
        let img = RasterImage::gray(0, 0, vec![]).unwrap();
        assert!(matches!(resize_letterbox(&img, 64, 64, 255), Err(Error::Data(_))));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let img = RasterImage::gray(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 3).unwrap(), img);
        let flat = RasterImage::filled(7, 5, 3, 77);
        assert!(resize_bilinear(&flat, 13, 2).unwrap().data().iter().all(|&v| v == 77));
    }
}
