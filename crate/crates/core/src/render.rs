//! Watermark rasterization and compositing.
//!
//! A page gets one word, rendered once at a fitted size, then stamped on a
//! `n x n` grid with a shared angle, transparency, font and color. Ground
//! truth is the unrotated tight extent of the word ink at each anchor plus
//! the page angle.

use std::path::{Path, PathBuf};

use ab_glyph::{point, Font, FontArc, GlyphId, PxScale, ScaleFont};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{box_to_polygon, RotatedBox};
use crate::sampling::{PageParams, Rng, MAX_TRANSPARENCY, MIN_TRANSPARENCY};

/// Box coordinates are snapped to multiples of this so that `x1 - x0` is the
/// same float for every box stamped with the same bitmap.
const COORD_QUANTUM: f64 = 1.0 / (1u64 << 30) as f64;

fn snap(v: f64) -> f64 {
    (v / COORD_QUANTUM).round() * COORD_QUANTUM
}

/// 8-bit RGB page, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct PageImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for PageImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PageImage({}x{})", self.width, self.height)
    }
}

impl PageImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter(format!("empty page {width}x{height}")));
        }
        if pixels.len() != 3 * width as usize * height as usize {
            return Err(Error::Parameter(format!(
                "pixel buffer of {} bytes does not match {width}x{height} RGB",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.iter().copied().cycle().take(3 * n).collect())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn from_rgb(img: image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length is an invariant")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        Self::from_rgb(img.into_rgb8())
    }

    /// PNG bytes; identical pages always encode to identical bytes.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: PathBuf::from("<memory>"), source })?;
        Ok(out.into_inner())
    }
}

/// A loaded outline font.
#[derive(Clone)]
pub struct FontEntry {
    /// File name the font was loaded from.
    pub name: String,
    /// SHA-256 of the font file, hex encoded.
    pub digest: String,
    pub font: FontArc,
}

impl std::fmt::Debug for FontEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FontEntry").field("name", &self.name).field("digest", &self.digest).finish()
    }
}

impl FontEntry {
    pub fn from_bytes(name: impl Into<String>, data: Vec<u8>) -> Result<Self> {
        let name = name.into();
        let digest = hex::encode(Sha256::digest(&data));
        let font = FontArc::try_from_vec(data).map_err(|e| Error::Font(format!("{name}: {e}")))?;
        Ok(Self { name, digest, font })
    }
}

/// Fonts indexed by `font_id`, in sorted file-name order.
#[derive(Debug, Clone, Default)]
pub struct FontCatalog {
    fonts: Vec<FontEntry>,
}

impl FontCatalog {
    pub fn new(fonts: Vec<FontEntry>) -> Self {
        Self { fonts }
    }

    /// Every `.ttf`/`.otf` file directly inside `dir`, sorted by file name.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if path.is_file() && matches!(ext.as_deref(), Some("ttf") | Some("otf")) {
                paths.push(path);
            }
        }
        paths.sort();
        let mut fonts = Vec::with_capacity(paths.len());
        for p in paths {
            let data = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            fonts.push(FontEntry::from_bytes(name, data)?);
        }
        if fonts.is_empty() {
            return Err(Error::Config(format!("no .ttf/.otf fonts in {}", dir.display())));
        }
        Ok(Self { fonts })
    }

    pub fn len(&self) -> usize {
        self.fonts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fonts.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&FontEntry> {
        self.fonts
            .get(id)
            .ok_or_else(|| Error::Parameter(format!("font id {id} outside catalog of {}", self.fonts.len())))
    }

    pub fn entries(&self) -> &[FontEntry] {
        &self.fonts
    }
}

/// Anti-aliased word coverage cropped to its tight ink extent.
#[derive(Debug, Clone, PartialEq)]
pub struct WordBitmap {
    pub width: u32,
    pub height: u32,
    /// Row-major coverage in `[0, 1]`.
    pub coverage: Vec<f32>,
}

impl WordBitmap {
    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.coverage[(y * self.width + x) as usize]
    }

    pub fn total_coverage(&self) -> f64 {
        self.coverage.iter().map(|&c| c as f64).sum()
    }

    /// Bilinear sample with pixel centers at `i + 0.5`; zero outside.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let get = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                0.0
            } else {
                self.at(xi as u32, yi as u32) as f64
            }
        };
        let top = get(x0, y0) * (1.0 - tx) + get(x0 + 1.0, y0) * tx;
        let bottom = get(x0, y0 + 1.0) * (1.0 - tx) + get(x0 + 1.0, y0 + 1.0) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn glyph_ids(entry: &FontEntry, word: &str) -> Result<Vec<GlyphId>> {
    word.chars()
        .map(|ch| {
            let id = entry.font.glyph_id(ch);
            if id.0 == 0 {
                Err(Error::MissingGlyph { font: entry.name.clone(), ch })
            } else {
                Ok(id)
            }
        })
        .collect()
}

fn layout(entry: &FontEntry, ids: &[GlyphId], size: f64) -> Vec<ab_glyph::OutlinedGlyph> {
    let scale = PxScale::from(size as f32);
    let scaled = entry.font.as_scaled(scale);
    let mut caret = 0.0f32;
    let mut prev: Option<GlyphId> = None;
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if let Some(p) = prev {
            caret += scaled.kern(p, id);
        }
        let glyph = id.with_scale_and_position(scale, point(caret, scaled.ascent()));
        caret += scaled.h_advance(id);
        prev = Some(id);
        if let Some(outlined) = entry.font.outline_glyph(glyph) {
            out.push(outlined);
        }
    }
    out
}

/// Pixel bounds `(min_x, min_y, max_x, max_y)` of the laid-out outlines.
fn layout_bounds(glyphs: &[ab_glyph::OutlinedGlyph]) -> Option<(f32, f32, f32, f32)> {
    glyphs.iter().map(|g| g.px_bounds()).fold(None, |acc, r| {
        Some(match acc {
            None => (r.min.x, r.min.y, r.max.x, r.max.y),
            Some((a, b, c, d)) => (a.min(r.min.x), b.min(r.min.y), c.max(r.max.x), d.max(r.max.y)),
        })
    })
}

/// Outline extent `(width, height)` in pixels at `size` pixels per em.
pub fn measure_word(entry: &FontEntry, word: &str, size: f64) -> Result<(f64, f64)> {
    let ids = glyph_ids(entry, word)?;
    Ok(layout_bounds(&layout(entry, &ids, size))
        .map(|(x0, y0, x1, y1)| ((x1 - x0) as f64, (y1 - y0) as f64))
        .unwrap_or((0.0, 0.0)))
}

/// Rasterize `word` at `size` pixels per em into a tightly cropped coverage map.
pub fn rasterize_word(entry: &FontEntry, word: &str, size: f64) -> Result<WordBitmap> {
    if !(size > 0.0 && size.is_finite()) {
        return Err(Error::Parameter(format!("point size must be positive, got {size}")));
    }
    let ids = glyph_ids(entry, word)?;
    let glyphs = layout(entry, &ids, size);
    let Some((bx0, by0, bx1, by1)) = layout_bounds(&glyphs) else {
        return Err(Error::Font(format!("{:?} has no ink in {}", word, entry.name)));
    };
    let cw = (bx1 - bx0).ceil() as usize + 1;
    let ch = (by1 - by0).ceil() as usize + 1;
    let mut canvas = vec![0f32; cw * ch];
    for g in &glyphs {
        let b = g.px_bounds();
        let ox = (b.min.x - bx0).round() as usize;
        let oy = (b.min.y - by0).round() as usize;
        g.draw(|x, y, c| {
            let (px, py) = (ox + x as usize, oy + y as usize);
            if px < cw && py < ch {
                let cell = &mut canvas[py * cw + px];
                *cell = (*cell + c).min(1.0);
            }
        });
    }
    // crop to nonzero coverage
    let inked = |x: usize, y: usize| canvas[y * cw + x] > 0.0;
    let rows: Vec<usize> = (0..ch).filter(|&y| (0..cw).any(|x| inked(x, y))).collect();
    let cols: Vec<usize> = (0..cw).filter(|&x| (0..ch).any(|y| inked(x, y))).collect();
    let (Some(&r0), Some(&r1), Some(&c0), Some(&c1)) = (rows.first(), rows.last(), cols.first(), cols.last())
    else {
        return Err(Error::Font(format!("{:?} has no ink in {}", word, entry.name)));
    };
    let (w, h) = (c1 - c0 + 1, r1 - r0 + 1);
    let mut coverage = Vec::with_capacity(w * h);
    for y in r0..=r1 {
        coverage.extend_from_slice(&canvas[y * cw + c0..y * cw + c1 + 1]);
    }
    Ok(WordBitmap { width: w as u32, height: h as u32, coverage })
}

/// Knobs for font sizing and color.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    pub color: [u8; 3],
    /// Fraction of a grid cell the word may span.
    pub fill_factor: f64,
    pub min_point_size: f64,
    pub max_point_size: f64,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self { color: [0, 0, 0], fill_factor: 0.8, min_point_size: 8.0, max_point_size: 200.0 }
    }
}

impl RenderStyle {
    pub fn validate(&self) -> Result<()> {
        if !(self.fill_factor > 0.0 && self.fill_factor <= 1.0) {
            return Err(Error::Config(format!("fill_factor {} outside (0, 1]", self.fill_factor)));
        }
        if !(self.min_point_size > 0.0 && self.min_point_size <= self.max_point_size) {
            return Err(Error::Config(format!(
                "point size range [{}, {}] is invalid",
                self.min_point_size, self.max_point_size
            )));
        }
        Ok(())
    }
}

/// Fitted font size; `clamped` when the ideal size fell outside the allowed range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub point_size: f64,
    pub clamped: bool,
}

/// Largest size in `[min, max]` whose word extent stays within
/// `fill_factor` of one grid cell in both directions.
pub fn fit_point_size(
    entry: &FontEntry,
    word: &str,
    grid_dim: u32,
    page_width: u32,
    page_height: u32,
    style: &RenderStyle,
) -> Result<FitResult> {
    if grid_dim == 0 {
        return Err(Error::Parameter("grid_dim must be at least 1".into()));
    }
    style.validate()?;
    let target_w = style.fill_factor * page_width as f64 / grid_dim as f64;
    let target_h = style.fill_factor * page_height as f64 / grid_dim as f64;
    let fits = |size: f64| -> Result<bool> {
        let (w, h) = measure_word(entry, word, size)?;
        Ok(w <= target_w && h <= target_h)
    };
    let (lo_bound, hi_bound) = (style.min_point_size, style.max_point_size);
    if !fits(lo_bound)? {
        return Ok(FitResult { point_size: lo_bound, clamped: true });
    }
    if fits(hi_bound)? {
        return Ok(FitResult { point_size: hi_bound, clamped: true });
    }
    let (mut lo, mut hi) = (lo_bound, hi_bound);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(FitResult { point_size: lo, clamped: false })
}

/// Stamp `bitmap` rotated by `angle` and centered at `anchor` (pixels).
///
/// Blending is `out = (1 - t c) bg + t c color` per channel for coverage `c`.
/// Returns the unrotated extent normalized by the page size, clamped to
/// `[0, 1]`.
pub fn insert_watermark(
    page: &mut PageImage,
    bitmap: &WordBitmap,
    angle: f64,
    anchor: (f64, f64),
    transparency: f64,
    color: [u8; 3],
) -> Result<RotatedBox> {
    if !(MIN_TRANSPARENCY..=MAX_TRANSPARENCY).contains(&transparency) {
        return Err(Error::Parameter(format!("transparency {transparency} outside [0.1, 0.6]")));
    }
    let (w, h) = (page.width as f64, page.height as f64);
    let (ax, ay) = anchor;
    if !(ax >= 0.0 && ax < w && ay >= 0.0 && ay < h) {
        return Err(Error::Placement(format!("anchor ({ax}, {ay}) outside {w}x{h} page")));
    }
    let (bw, bh) = (bitmap.width as f64, bitmap.height as f64);
    let x0 = snap((ax - 0.5 * bw) / w);
    let y0 = snap((ay - 0.5 * bh) / h);
    let exact = RotatedBox::new(x0, y0, x0 + snap(bw / w), y0 + snap(bh / h), angle);

    let poly = box_to_polygon(&exact, w, h);
    let min_x = poly.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).floor() - 1.0;
    let max_x = poly.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
    let min_y = poly.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).floor() - 1.0;
    let max_y = poly.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
    let (px0, px1) = (min_x.max(0.0) as u32, max_x.min(w - 1.0).max(0.0) as u32);
    let (py0, py1) = (min_y.max(0.0) as u32, max_y.min(h - 1.0).max(0.0) as u32);

    // exact box center, so the ink sits where the annotation says
    let (cx, cy) = ((exact.x0 + exact.x1) * 0.5 * w, (exact.y0 + exact.y1) * 0.5 * h);
    let (s, c) = angle.sin_cos();
    for py in py0..=py1 {
        for px in px0..=px1 {
            let ox = px as f64 + 0.5 - cx;
            let oy = py as f64 + 0.5 - cy;
            // inverse of the rotation in `box_to_polygon`
            let dx = c * ox - s * oy;
            let dy = s * ox + c * oy;
            let cov = bitmap.sample(0.5 * bw + dx, 0.5 * bh + dy);
            if cov <= 0.0 {
                continue;
            }
            let a = transparency * cov;
            let bg = page.pixel(px, py);
            let mut out = [0u8; 3];
            for ch in 0..3 {
                let v = (1.0 - a) * bg[ch] as f64 + a * color[ch] as f64;
                out[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
            page.set_pixel(px, py, out);
        }
    }
    Ok(RotatedBox::new(
        exact.x0.clamp(0.0, 1.0),
        exact.y0.clamp(0.0, 1.0),
        exact.x1.clamp(0.0, 1.0),
        exact.y1.clamp(0.0, 1.0),
        angle,
    ))
}

/// Ground truth for one rendered page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageAnnotation {
    pub image_id: String,
    /// `None` for pages deliberately left without a watermark.
    pub params: Option<PageParams>,
    /// Font file name for `params.font_id`.
    pub font: Option<String>,
    pub point_size: Option<f64>,
    /// The word could not be fitted within the point size range.
    pub fit_clamped: bool,
    pub word: String,
    pub boxes: Vec<RotatedBox>,
}

impl PageAnnotation {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            params: None,
            font: None,
            point_size: None,
            fit_clamped: false,
            word: String::new(),
            boxes: Vec::new(),
        }
    }
}

/// Grid offset bound along one axis, in normalized units: at most a quarter
/// cell either way, and never enough to push a box off the page.
fn offset_bound(n: u32, extent: f64) -> f64 {
    let cell = 1.0 / n as f64;
    (0.25 * cell).min((0.5 * (cell - extent)).max(0.0))
}

/// Anchor center along one axis for grid index `j` in `1..=n`.
fn grid_center(j: u32, n: u32, offset: f64, extent: f64) -> f64 {
    let c = (j as f64 - 0.5) / n as f64 + offset;
    if extent >= 1.0 {
        0.5
    } else {
        c.clamp(0.5 * extent, 1.0 - 0.5 * extent)
    }
}

/// Render one watermarked page.
///
/// With `params == None` the page is returned untouched with no boxes.
/// The only randomness consumed here is the page-level grid offset.
pub fn wrender_page(
    doc: &PageImage,
    image_id: &str,
    params: Option<&PageParams>,
    fonts: &FontCatalog,
    style: &RenderStyle,
    rng: &mut Rng,
) -> Result<(PageImage, PageAnnotation)> {
    let mut page = doc.clone();
    let Some(params) = params else {
        return Ok((page, PageAnnotation::empty(image_id)));
    };
    params.validate()?;
    let entry = fonts.get(params.font_id)?;
    let n = params.grid_dim;
    let fit = fit_point_size(entry, &params.word, n, doc.width, doc.height, style)?;
    let bitmap = rasterize_word(entry, &params.word, fit.point_size)?;

    let (w, h) = (doc.width as f64, doc.height as f64);
    let (ew, eh) = (bitmap.width as f64 / w, bitmap.height as f64 / h);
    let (sx, sy) = (offset_bound(n, ew), offset_bound(n, eh));
    let dx = rng.uniform(-sx, sx);
    let dy = rng.uniform(-sy, sy);

    let mut boxes = Vec::with_capacity((n * n) as usize);
    for j in 1..=n {
        let cx = grid_center(j, n, dx, ew);
        for k in 1..=n {
            let cy = grid_center(k, n, dy, eh);
            let anchor = (cx * w, cy * h);
            boxes.push(insert_watermark(
                &mut page,
                &bitmap,
                params.angle,
                anchor,
                params.transparency,
                style.color,
            )?);
        }
    }
    Ok((
        page,
        PageAnnotation {
            image_id: image_id.to_string(),
            params: Some(params.clone()),
            font: Some(entry.name.clone()),
            point_size: Some(fit.point_size),
            fit_clamped: fit.clamped,
            word: params.word.clone(),
            boxes,
        },
    ))
}
