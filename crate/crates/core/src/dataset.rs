//! Dataset assembly: clean pages in, watermarked pages plus a manifest out.
//!
//! Each page is keyed by its position in image-id order, and all of its
//! randomness comes from a generator derived from `(seed, index)` (or
//! `(seed, epoch, index)` for per-epoch regeneration). Output is therefore
//! independent of scheduling and of the order pages are supplied in.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{box_to_polygon, covered_area, point_in_polygon, polygon_area, Point, RotatedBox};
use crate::metrics::mean_std;
use crate::render::{wrender_page, FontCatalog, PageAnnotation, PageImage, RenderStyle};
use crate::sampling::{parse_word_list, sample_page_params, GridWeights, Rng};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Pixels with luminance below this count as document ink.
pub const INK_LUMINANCE_THRESHOLD: f64 = 250.0;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A clean document page.
#[derive(Debug, Clone)]
pub struct SourcePage {
    pub image_id: String,
    pub path: Option<PathBuf>,
    pub image: PageImage,
}

/// All `.png` files in `dir`, sorted by name; the image id is the file stem.
pub fn load_pages(dir: &Path) -> Result<Vec<SourcePage>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let image_id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let image = PageImage::load(&p)?;
            let path = std::fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?;
            Ok(SourcePage { image_id, path: Some(path), image })
        })
        .collect()
}

/// Fonts and words a split draws from.
#[derive(Debug, Clone)]
pub struct Catalogs {
    pub fonts: FontCatalog,
    pub words: Vec<String>,
}

impl Catalogs {
    pub fn load(font_dir: &Path, word_files: &[PathBuf]) -> Result<Self> {
        let fonts = FontCatalog::load_dir(font_dir)?;
        let mut words = Vec::new();
        for f in word_files {
            let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            words.extend(parse_word_list(&text));
        }
        if words.is_empty() {
            return Err(Error::Config("word lists contain no usable words".into()));
        }
        Ok(Self { fonts, words })
    }

    /// Error if the two catalogs share a font (by content) or a word.
    pub fn check_disjoint(&self, other: &Catalogs) -> Result<()> {
        let theirs: BTreeSet<&str> = other.fonts.entries().iter().map(|f| f.digest.as_str()).collect();
        let shared_fonts: Vec<&str> = self
            .fonts
            .entries()
            .iter()
            .filter(|f| theirs.contains(f.digest.as_str()))
            .map(|f| f.name.as_str())
            .collect();
        if !shared_fonts.is_empty() {
            return Err(Error::Config(format!("fonts shared across splits: {}", shared_fonts.join(", "))));
        }
        let their_words: BTreeSet<&str> = other.words.iter().map(String::as_str).collect();
        let shared: BTreeSet<&str> = self.words.iter().map(String::as_str).filter(|w| their_words.contains(w)).collect();
        if !shared.is_empty() {
            let list: Vec<&str> = shared.into_iter().collect();
            return Err(Error::Config(format!("words shared across splits: {}", list.join(", "))));
        }
        Ok(())
    }
}

/// Knobs recorded in every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub grid_weights: GridWeights,
    pub style: RenderStyle,
    /// Fraction of pages left without any watermark.
    pub no_watermark_fraction: f64,
    /// Rescale pages so the longest edge lies in `[800, 1024]` before rendering.
    pub downscale: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_weights: GridWeights::default(),
            style: RenderStyle::default(),
            no_watermark_fraction: 0.0,
            downscale: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.style.validate()?;
        GridWeights::new(self.grid_weights.as_slice().to_vec())?;
        if !(0.0..=1.0).contains(&self.no_watermark_fraction) {
            return Err(Error::Config(format!(
                "no_watermark_fraction {} outside [0, 1]",
                self.no_watermark_fraction
            )));
        }
        Ok(())
    }
}

/// Stratified, deterministic choice of no-watermark pages: exactly
/// `floor(n * fraction)` of the first `n` indices are selected, evenly spread.
pub fn is_blank_page(index: usize, fraction: f64) -> bool {
    let eps = 1e-9;
    let before = (index as f64 * fraction + eps).floor();
    let after = ((index + 1) as f64 * fraction + eps).floor();
    after > before
}

fn page_rng(seed: u64, epoch: Option<u64>, index: usize) -> Rng {
    match epoch {
        None => Rng::derive(seed, &[index as u64]),
        Some(e) => Rng::derive(seed, &[e, index as u64]),
    }
}

/// Render the page at `index` (its position in image-id order).
pub fn render_indexed_page(
    page: &SourcePage,
    index: usize,
    epoch: Option<u64>,
    catalogs: &Catalogs,
    config: &GeneratorConfig,
) -> Result<(PageImage, PageAnnotation)> {
    let doc = if config.downscale { downscale_page(&page.image, 800, 1024).0 } else { page.image.clone() };
    let mut rng = page_rng(config.seed, epoch, index);
    let params = if is_blank_page(index, config.no_watermark_fraction) {
        None
    } else {
        Some(sample_page_params(&mut rng, catalogs.fonts.len(), &catalogs.words, &config.grid_weights)?)
    };
    wrender_page(&doc, &page.image_id, params.as_ref(), &catalogs.fonts, &config.style, &mut rng)
}

/// Index of every page in image-id order; duplicate ids are rejected.
fn page_indices(pages: &[SourcePage]) -> Result<Vec<usize>> {
    let mut ids: Vec<(&str, usize)> = pages.iter().enumerate().map(|(i, p)| (p.image_id.as_str(), i)).collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!("duplicate image id {:?}", w[0].0)));
    }
    let mut index = vec![0; pages.len()];
    for (rank, (_, pos)) in ids.into_iter().enumerate() {
        index[pos] = rank;
    }
    Ok(index)
}

/// Stream one epoch of freshly rendered pages, in the order supplied.
///
/// Per-page output depends only on `(seed, epoch, image id rank)`.
pub fn dynamic_epoch<'a>(
    pages: &'a [SourcePage],
    epoch: u64,
    catalogs: &'a Catalogs,
    config: &'a GeneratorConfig,
) -> Result<impl Iterator<Item = Result<(PageImage, PageAnnotation)>> + 'a> {
    config.validate()?;
    let index = page_indices(pages)?;
    Ok(pages
        .iter()
        .zip(index)
        .map(move |(page, i)| render_indexed_page(page, i, Some(epoch), catalogs, config)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FontRecord {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
    /// Clean source page, when it came from disk.
    pub source: Option<String>,
    pub source_sha256: Option<String>,
    pub annotation: PageAnnotation,
}

impl ManifestRecord {
    pub fn image_id(&self) -> &str {
        &self.annotation.image_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub split: String,
    pub epoch: Option<u64>,
    pub config: GeneratorConfig,
    pub fonts: Vec<FontRecord>,
    /// How boxes at page borders are handled.
    pub border_policy: String,
    pub records: Vec<ManifestRecord>,
}

pub const BORDER_POLICY: &str = "grid anchors are kept on-page so every box lies inside the page; \
     boxes are clamped to [0,1] only when a word cannot fit at the minimum point size";

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported manifest schema {}",
                path.display(),
                m.schema_version
            )));
        }
        if let Some(w) = m.records.windows(2).find(|w| w[0].image_id() >= w[1].image_id()) {
            return Err(Error::Data(format!(
                "{}: records must be sorted by unique image id ({:?} then {:?})",
                path.display(),
                w[0].image_id(),
                w[1].image_id()
            )));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Check that every image exists under `base` and matches its digest.
    pub fn verify(&self, base: &Path) -> Result<()> {
        for r in &self.records {
            let p = base.join(&r.image);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != r.sha256 {
                return Err(Error::Data(format!("{} does not match its recorded digest", p.display())));
            }
        }
        Ok(())
    }

    pub fn record(&self, image_id: &str) -> Option<&ManifestRecord> {
        self.records
            .binary_search_by(|r| r.image_id().cmp(image_id))
            .ok()
            .map(|i| &self.records[i])
    }
}

/// A page that failed to render; the rest of the split is still written.
#[derive(Debug, Clone, PartialEq)]
pub struct PageFailure {
    pub image_id: String,
    pub message: String,
}

#[derive(Debug)]
pub struct SplitOutput {
    pub manifest: Manifest,
    pub failures: Vec<PageFailure>,
}

/// Render every page and write `images/<id>.png` plus `manifest.json` to `out_dir`.
pub fn generate_split(
    split: &str,
    pages: &[SourcePage],
    catalogs: &Catalogs,
    config: &GeneratorConfig,
    epoch: Option<u64>,
    out_dir: &Path,
) -> Result<SplitOutput> {
    config.validate()?;
    let index = page_indices(pages)?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let rendered: Vec<Result<ManifestRecord>> = pages
        .par_iter()
        .zip(index.par_iter())
        .map(|(page, &i)| {
            let (img, annotation) = render_indexed_page(page, i, epoch, catalogs, config)?;
            let png = img.encode_png()?;
            let rel = format!("images/{}.png", page.image_id);
            let path = out_dir.join(&rel);
            std::fs::write(&path, &png).map_err(|e| Error::io(&path, e))?;
            let source_sha256 = match &page.path {
                Some(p) => Some(sha256_hex(&std::fs::read(p).map_err(|e| Error::io(p, e))?)),
                None => None,
            };
            Ok(ManifestRecord {
                image: rel,
                sha256: sha256_hex(&png),
                width: img.width(),
                height: img.height(),
                source: page.path.as_ref().map(|p| p.display().to_string()),
                source_sha256,
                annotation,
            })
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (page, r) in pages.iter().zip(rendered) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) if e.is_io() => return Err(e),
            Err(e) => failures.push(PageFailure { image_id: page.image_id.clone(), message: e.to_string() }),
        }
    }
    records.sort_by(|a, b| a.image_id().cmp(b.image_id()));
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        split: split.to_string(),
        epoch,
        config: config.clone(),
        fonts: catalogs
            .fonts
            .entries()
            .iter()
            .map(|f| FontRecord { name: f.name.clone(), sha256: f.digest.clone() })
            .collect(),
        border_policy: BORDER_POLICY.to_string(),
        records,
    };
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(SplitOutput { manifest, failures })
}

/// Table-style summary of watermark density and overlap with document content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub pages: usize,
    pub total_watermarks: usize,
    pub count_mean: f64,
    pub count_std: f64,
    pub count_median: f64,
    /// Percent of each watermark box covered by document content.
    pub overlap_mean: f64,
    pub overlap_std: f64,
    pub overlap_median: f64,
    /// `"text_boxes"`, `"ink"`, or `"none"` when there are no watermarks.
    pub overlap_source: String,
}

/// Lower median, so the result is always one of the values.
fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Document text boxes per image id.
pub type TextBoxes = BTreeMap<String, Vec<RotatedBox>>;

pub fn read_text_boxes(path: &Path) -> Result<TextBoxes> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let boxes: TextBoxes = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    for b in boxes.values().flatten() {
        b.validate()?;
    }
    Ok(boxes)
}

fn luminance(p: [u8; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Percent of pixel centers inside `poly` whose luminance is below the ink threshold.
pub fn ink_overlap_percent(page: &PageImage, poly: &[Point]) -> f64 {
    let (w, h) = (page.width() as f64, page.height() as f64);
    let x0 = poly.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let x1 = poly.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).ceil().min(w) as u32;
    let y0 = poly.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).floor().max(0.0) as u32;
    let y1 = poly.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).ceil().min(h) as u32;
    let (mut inside, mut inked) = (0usize, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            if point_in_polygon(poly, Point::new(x as f64 + 0.5, y as f64 + 0.5)) {
                inside += 1;
                if luminance(page.pixel(x, y)) < INK_LUMINANCE_THRESHOLD {
                    inked += 1;
                }
            }
        }
    }
    if inside == 0 {
        0.0
    } else {
        100.0 * inked as f64 / inside as f64
    }
}

/// Percent of `wm` covered by the union of `text` boxes, on a `w x h` page.
pub fn text_overlap_percent(wm: &RotatedBox, text: &[RotatedBox], w: f64, h: f64) -> f64 {
    let poly = box_to_polygon(wm, w, h);
    let area = polygon_area(&poly);
    if area <= 0.0 {
        return 0.0;
    }
    let covers: Vec<Vec<Point>> = text.iter().map(|t| box_to_polygon(t, w, h).to_vec()).collect();
    (100.0 * covered_area(&poly, &covers) / area).clamp(0.0, 100.0)
}

/// Per-box overlap percentages for one record.
fn record_overlaps(record: &ManifestRecord, base: &Path, text_boxes: Option<&TextBoxes>) -> Result<Vec<f64>> {
    let boxes = &record.annotation.boxes;
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(tb) = text_boxes {
        let text = tb.get(record.image_id()).map(Vec::as_slice).unwrap_or(&[]);
        let (w, h) = (record.width as f64, record.height as f64);
        return Ok(boxes.iter().map(|b| text_overlap_percent(b, text, w, h)).collect());
    }
    let Some(src) = &record.source else {
        return Err(Error::Data(format!("{}: no clean page recorded for ink overlap", record.image_id())));
    };
    let path = base.join(src);
    if !path.is_file() {
        return Err(Error::Data(format!("{}: clean page {} is missing", record.image_id(), path.display())));
    }
    let clean = PageImage::load(&path)?;
    // boxes are normalized, so the clean page's own size applies
    let (w, h) = (clean.width() as f64, clean.height() as f64);
    Ok(boxes.iter().map(|b| ink_overlap_percent(&clean, &box_to_polygon(b, w, h))).collect())
}

/// Watermark count and overlap statistics for a manifest rooted at `base`.
pub fn compute_stats(manifest: &Manifest, base: &Path, text_boxes: Option<&TextBoxes>) -> Result<SplitStats> {
    let counts: Vec<f64> = manifest.records.iter().map(|r| r.annotation.boxes.len() as f64).collect();
    let per_record: Vec<Result<Vec<f64>>> =
        manifest.records.par_iter().map(|r| record_overlaps(r, base, text_boxes)).collect();
    let mut overlaps = Vec::new();
    for r in per_record {
        overlaps.extend(r?);
    }
    if manifest.records.is_empty() {
        log::warn!("split {:?} has no pages; statistics are all zero", manifest.split);
    }
    let (count_mean, count_std) = mean_std(&counts);
    let (overlap_mean, overlap_std) = mean_std(&overlaps);
    let overlap_source = if overlaps.is_empty() {
        "none"
    } else if text_boxes.is_some() {
        "text_boxes"
    } else {
        "ink"
    };
    Ok(SplitStats {
        pages: counts.len(),
        total_watermarks: counts.iter().sum::<f64>() as usize,
        count_mean,
        count_std,
        count_median: lower_median(&counts),
        overlap_mean,
        overlap_std,
        overlap_median: lower_median(&overlaps),
        overlap_source: overlap_source.into(),
    })
}

/// Scale `image` so its longest edge lies in `[min_edge, max_edge]`.
///
/// Returns the image and the scale factor applied (1 when already in range).
/// Normalized boxes need no adjustment.
pub fn downscale_page(image: &PageImage, min_edge: u32, max_edge: u32) -> (PageImage, f64) {
    let (w, h) = (image.width(), image.height());
    let longest = w.max(h);
    let scale = if longest > max_edge {
        max_edge as f64 / longest as f64
    } else if longest < min_edge {
        min_edge as f64 / longest as f64
    } else {
        return (image.clone(), 1.0);
    };
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    let resized = image::imageops::resize(&image.to_rgb(), nw, nh, image::imageops::FilterType::Triangle);
    (PageImage::from_rgb(resized).expect("resize keeps a valid buffer"), scale)
}
