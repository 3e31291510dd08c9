//! Deterministic synthetic handwriting fragments.
//!
//! Every writer gets a private alphabet of polyline glyphs together with a
//! stroke width, slant, glyph size, spacing and ink colour. Every page gets
//! a paper tint, a smooth texture and a text drawn from its writer's
//! alphabet. Fragments are line crops of that text at jittered positions
//! with small per-instance stroke wobble.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{write_manifest, FragmentRecord};
use crate::error::{Error, Result};
use crate::preprocessing::RasterImage;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub num_writers: usize,
    pub pages_per_writer: usize,
    pub fragments_per_page: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_writers: 8,
            pages_per_writer: 3,
            fragments_per_page: 4,
            height: 32,
            width: 128,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_writers == 0 || self.pages_per_writer == 0 || self.fragments_per_page == 0 {
            return Err(Error::config("synthetic corpus counts must all be at least 1"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::config(format!(
                "synthetic fragments must be at least 16×16, got {}×{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFragment {
    pub record: FragmentRecord,
    pub image: RasterImage,
}

/// Image file format used by [`write_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    /// Binary PPM.
    Pnm,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Pnm => "ppm",
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

type Stroke = Vec<(f64, f64)>;

struct WriterStyle {
    glyphs: Vec<Vec<Stroke>>,
    thickness: f64,
    slant: f64,
    x_height: f64,
    glyph_width: f64,
    spacing: f64,
    ink: [f64; 3],
    wobble: f64,
    baseline: f64,
}

struct PageStyle {
    tint: [f64; 3],
    texture: f64,
    texture_seed: u64,
    text: Vec<usize>,
}

const GLYPHS_PER_WRITER: usize = 8;
const PAGE_TEXT_LEN: usize = 96;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn writer_style(cfg: &SynthConfig, w: usize) -> WriterStyle {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[1, w as u64]));
    let glyphs = (0..GLYPHS_PER_WRITER)
        .map(|_| {
            (0..rng.random_range(1..=2))
                .map(|_| {
                    (0..rng.random_range(3..=4))
                        .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let h = cfg.height as f64;
    // Hues are spread evenly over the writers, then jittered.
    let hue = (w as f64 + rng.random_range(0.0..0.15)) / cfg.num_writers as f64;
    WriterStyle {
        glyphs,
        thickness: rng.random_range(0.9..2.6) * h / 32.0,
        slant: rng.random_range(-0.5..0.5),
        x_height: rng.random_range(0.28..0.45) * h,
        glyph_width: rng.random_range(0.16..0.32) * h,
        spacing: rng.random_range(0.03..0.12) * h,
        ink: hsv_to_rgb(hue, rng.random_range(0.7..1.0), rng.random_range(0.3..0.55)).map(|c| c * 255.0),
        wobble: rng.random_range(0.01..0.05),
        baseline: rng.random_range(0.6..0.78),
    }
}

fn page_style(cfg: &SynthConfig, w: usize, p: usize) -> PageStyle {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[2, w as u64, p as u64]));
    let base: f64 = rng.random_range(226.0..238.0);
    PageStyle {
        tint: [0, 1, 2].map(|_| base + rng.random_range(-3.0..3.0)),
        texture: rng.random_range(2.0..6.0),
        texture_seed: rng.random(),
        text: (0..PAGE_TEXT_LEN).map(|_| rng.random_range(0..GLYPHS_PER_WRITER)).collect(),
    }
}

/// Smooth lattice noise in `[-1, 1]` on a grid of `cell` pixels.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix, gy - iy);
    let corner = |dx: f64, dy: f64| {
        let h = derive(seed, &[(ix + dx) as i64 as u64, (iy + dy) as i64 as u64]);
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let top = corner(0.0, 0.0) * (1.0 - sx) + corner(1.0, 0.0) * sx;
    let bottom = corner(0.0, 1.0) * (1.0 - sx) + corner(1.0, 1.0) * sx;
    top * (1.0 - sy) + bottom * sy
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn render_fragment(cfg: &SynthConfig, style: &WriterStyle, page: &PageStyle, w: usize, p: usize, f: usize) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[3, w as u64, p as u64, f as u64]));
    let (width, height) = (cfg.width, cfg.height);
    let advance = style.glyph_width + style.spacing;
    let visible = (width as f64 / advance).ceil() as usize + 2;
    let start = rng.random_range(0..PAGE_TEXT_LEN.saturating_sub(visible).max(1));
    let offset_x = rng.random_range(-0.6..0.2) * advance;
    let baseline = height as f64 * (style.baseline + rng.random_range(-0.03..0.03));
    // Position of this crop on the page, so the texture is shared per page.
    let (page_x, page_y) = (start as f64 * advance - offset_x, f as f64 * height as f64 * 1.5);

    let mut alpha = vec![0.0f64; width * height];
    let half = style.thickness / 2.0;
    for (slot, &g) in page.text[start..].iter().take(visible).enumerate() {
        let pen = offset_x + slot as f64 * advance;
        for stroke in &style.glyphs[g] {
            let pts: Vec<(f64, f64)> = stroke
                .iter()
                .map(|&(u, v)| {
                    let u = u + rng.random_range(-style.wobble..style.wobble);
                    let v = v + rng.random_range(-style.wobble..style.wobble);
                    let y = baseline - v * style.x_height;
                    (pen + u * style.glyph_width + style.slant * (baseline - y), y)
                })
                .collect();
            for seg in pts.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let x0 = (a.0.min(b.0) - half - 1.0).floor().max(0.0) as usize;
                let x1 = ((a.0.max(b.0) + half + 1.0).ceil().max(0.0) as usize).min(width);
                let y0 = (a.1.min(b.1) - half - 1.0).floor().max(0.0) as usize;
                let y1 = ((a.1.max(b.1) + half + 1.0).ceil().max(0.0) as usize).min(height);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b);
                        let cover = (half + 0.5 - d).clamp(0.0, 1.0);
                        let slot = &mut alpha[y * width + x];
                        *slot = slot.max(cover);
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let n = value_noise(page.texture_seed, page_x + x as f64, page_y + y as f64, 9.0);
            let a = alpha[y * width + x];
            for c in 0..3 {
                let paper = page.tint[c] + page.texture * n;
                let v = paper * (1.0 - a) + style.ink[c] * a + rng.random_range(-3.0..3.0);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage::new(width, height, 3, data).expect("buffer sized from dimensions")
}

pub fn writer_name(w: usize) -> String {
    format!("writer{w:02}")
}

pub fn page_name(w: usize, p: usize) -> String {
    format!("w{w:02}_p{p:02}")
}

/// Generates `num_writers × pages_per_writer × fragments_per_page` fragments
/// ordered by writer, page and fragment. Record paths are
/// `images/<fragment_id>.png`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Vec<SyntheticFragment>> {
    cfg.validate()?;
    let writers: Vec<WriterStyle> = (0..cfg.num_writers).map(|w| writer_style(cfg, w)).collect();
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.num_writers)
        .flat_map(|w| (0..cfg.pages_per_writer).flat_map(move |p| (0..cfg.fragments_per_page).map(move |f| (w, p, f))))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(w, p, f)| {
            let page = page_style(cfg, w, p);
            let id = format!("{}_f{f:02}", page_name(w, p));
            SyntheticFragment {
                image: render_fragment(cfg, &writers[w], &page, w, p, f),
                record: FragmentRecord {
                    path: PathBuf::from(format!("images/{id}.png")),
                    fragment_id: id,
                    writer_id: writer_name(w),
                    page_id: page_name(w, p),
                },
            }
        })
        .collect())
}

/// Writes images under `dir/images/` and a manifest at `dir/manifest.tsv`,
/// returning the manifest path.
pub fn write_corpus(dir: &Path, fragments: &[SyntheticFragment], format: ImageFormat) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records: Vec<FragmentRecord> = fragments
        .par_iter()
        .map(|frag| {
            let rel = PathBuf::from(format!("images/{}.{}", frag.record.fragment_id, format.extension()));
            frag.image.save(&dir.join(&rel))?;
            Ok(FragmentRecord {
                path: rel,
                ..frag.record.clone()
            })
        })
        .collect::<Result<_>>()?;
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
