#![allow(dead_code)]

use std::path::{Path, PathBuf};

use wmark_core::dataset::{Catalogs, GeneratorConfig, SourcePage};
use wmark_core::render::PageImage;
use wmark_core::sampling::Rng;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn catalogs() -> Catalogs {
    Catalogs::load(&fixtures().join("fonts"), &[fixtures().join("words.txt")]).unwrap()
}

pub fn alt_catalogs() -> Catalogs {
    Catalogs::load(&fixtures().join("fonts_alt"), &[fixtures().join("words_alt.txt")]).unwrap()
}

/// A white page with a few dark "text lines" at random positions.
pub fn synthetic_page(width: u32, height: u32, seed: u64) -> PageImage {
    let mut page = PageImage::filled(width, height, [255, 255, 255]).unwrap();
    let mut rng = Rng::new(seed);
    for _ in 0..12 {
        let x0 = rng.below(width as u64 / 2) as u32;
        let y0 = rng.below(height as u64 - 8) as u32;
        let len = 20 + rng.below(width as u64 / 2) as u32;
        for y in y0..y0 + 6 {
            for x in x0..(x0 + len).min(width) {
                let shade = rng.below(60) as u8;
                page.set_pixel(x, y, [shade, shade, shade]);
            }
        }
    }
    page
}

pub fn synthetic_pages(n: usize, width: u32, height: u32) -> Vec<SourcePage> {
    (0..n)
        .map(|i| SourcePage {
            image_id: format!("page-{i:04}"),
            path: None,
            image: synthetic_page(width, height, 1000 + i as u64),
        })
        .collect()
}

/// Writes synthetic pages as PNGs and returns their directory.
pub fn write_pages(dir: &Path, n: usize, width: u32, height: u32) -> PathBuf {
    let pages = dir.join("pages");
    std::fs::create_dir_all(&pages).unwrap();
    for p in synthetic_pages(n, width, height) {
        std::fs::write(pages.join(format!("{}.png", p.image_id)), p.image.encode_png().unwrap()).unwrap();
    }
    pages
}

pub fn config(seed: u64) -> GeneratorConfig {
    GeneratorConfig { seed, ..Default::default() }
}
