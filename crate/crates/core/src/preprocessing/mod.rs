//! Image loading, Sauvola binarization, letterboxing and tensor conversion.

mod letterbox;
mod raster;
mod sauvola;

pub use letterbox::{letterbox_placement, resize_bilinear, resize_letterbox, Placement};
pub use raster::{luma, RasterImage};
pub use sauvola::{is_foreground, sauvola_binarize, SauvolaParams};

use crate::config::KvDocument;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Per-channel `(v − mean) / std` applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Converts an image already at model resolution into a `3×H×W` tensor in
/// `[0, 1]`, replicating gray images across the three channels.
pub fn to_model_tensor<T: Scalar>(
    img: &RasterImage,
    height: usize,
    width: usize,
    norm: Option<&Normalization>,
) -> Result<Tensor<T>> {
    if img.height() != height || img.width() != width {
        return Err(Error::ResolutionMismatch {
            expected: format!("{height}×{width}"),
            actual: format!("{}×{}", img.height(), img.width()),
        });
    }
    let plane = height * width;
    let mut data = vec![T::zero(); 3 * plane];
    let c = img.channels();
    for ch in 0..3 {
        let src_ch = if c == 1 { 0 } else { ch };
        let (mean, std) = norm.map_or((0.0, 1.0), |n| (n.mean[ch], n.std[ch]));
        for (i, v) in data[ch * plane..(ch + 1) * plane].iter_mut().enumerate() {
            let x = img.data()[i * c + src_ch] as f64 / 255.0;
            *v = T::from_f64_lossy((x - mean) / std);
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// Steps that turn a raw fragment image into network input.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub height: usize,
    pub width: usize,
    pub binarize: Option<SauvolaParams>,
    pub pad_value: u8,
    pub normalization: Option<Normalization>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            height: 512,
            width: 128,
            binarize: None,
            pad_value: 255,
            normalization: None,
        }
    }
}

const KEYS: &[&str] = &[
    "height",
    "width",
    "binarize",
    "sauvola_window",
    "sauvola_k",
    "sauvola_r",
    "pad_value",
    "mean",
    "std",
];

impl PreprocessConfig {
    /// Binarize (optional), then letterbox.
    pub fn prepare(&self, img: &RasterImage) -> Result<RasterImage> {
        let img = match &self.binarize {
            Some(p) => sauvola_binarize(img, p)?,
            None => img.clone(),
        };
        resize_letterbox(&img, self.height, self.width, self.pad_value)
    }

    pub fn to_tensor<T: Scalar>(&self, img: &RasterImage) -> Result<Tensor<T>> {
        let ready = self.prepare(img)?;
        to_model_tensor(&ready, self.height, self.width, self.normalization.as_ref())
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.set("height", self.height);
        doc.set("width", self.width);
        let p = self.binarize.unwrap_or_default();
        doc.set("binarize", if self.binarize.is_some() { "sauvola" } else { "none" });
        doc.set("sauvola_window", p.window);
        doc.set("sauvola_k", p.k);
        doc.set("sauvola_r", p.r);
        doc.set("pad_value", self.pad_value);
        if let Some(n) = &self.normalization {
            doc.set("mean", crate::config::format_list(&n.mean));
            doc.set("std", crate::config::format_list(&n.std));
        }
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        doc.reject_unknown(KEYS)?;
        let mut cfg = PreprocessConfig::default();
        doc.read_into("height", &mut cfg.height)?;
        doc.read_into("width", &mut cfg.width)?;
        doc.read_into("pad_value", &mut cfg.pad_value)?;
        let mut p = SauvolaParams::default();
        doc.read_into("sauvola_window", &mut p.window)?;
        doc.read_into("sauvola_k", &mut p.k)?;
        doc.read_into("sauvola_r", &mut p.r)?;
        cfg.binarize = match doc.get("binarize").unwrap_or("none") {
            "none" => None,
            "sauvola" => {
                p.validate()?;
                Some(p)
            }
            other => {
                return Err(Error::config(format!(
                    "unknown binarization method {other:?} (expected sauvola or none)"
                )))
            }
        };
        cfg.normalization = match (doc.get("mean"), doc.get("std")) {
            (None, None) => None,
            (Some(m), Some(s)) => {
                let to3 = |raw: &str, key: &str| -> Result<[f64; 3]> {
                    let v: Vec<f64> = crate::config::parse_list(raw, key)?;
                    v.try_into()
                        .map_err(|_| Error::config(format!("{key} needs exactly three values")))
                };
                let n = Normalization {
                    mean: to3(m, "mean")?,
                    std: to3(s, "std")?,
                };
                if n.std.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::config("normalization std must be positive"));
                }
                Some(n)
            }
            _ => return Err(Error::config("mean and std must be given together")),
        };
        if cfg.height == 0 || cfg.width == 0 {
            return Err(Error::config("preprocessing target must have positive size"));
        }
        Ok(cfg)
    }
}
