use std::path::{Path, PathBuf};

use serde::Deserialize;
use wmark_core::dataset::GeneratorConfig;
use wmark_core::render::RenderStyle;
use wmark_core::sampling::GridWeights;

use crate::Failure;

/// `generate` configuration file. Relative paths resolve against the file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    #[serde(default = "default_split")]
    pub split: String,
    pub pages: PathBuf,
    pub fonts: PathBuf,
    pub words: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub grid_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub no_watermark_fraction: f64,
    #[serde(default)]
    pub downscale: bool,
    #[serde(default)]
    pub style: RenderStyle,
    /// Another split's catalogs that must not share fonts or words with this one.
    pub disjoint_from: Option<CatalogPaths>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogPaths {
    pub fonts: PathBuf,
    pub words: Vec<PathBuf>,
}

fn default_split() -> String {
    "train".into()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl GenerateConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: GenerateConfig =
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.pages = resolve(base, &cfg.pages);
        cfg.fonts = resolve(base, &cfg.fonts);
        cfg.words = cfg.words.iter().map(|w| resolve(base, w)).collect();
        cfg.out = cfg.out.as_deref().map(|o| resolve(base, o));
        if let Some(d) = &mut cfg.disjoint_from {
            d.fonts = resolve(base, &d.fonts);
            d.words = d.words.iter().map(|w| resolve(base, w)).collect();
        }
        Ok(cfg)
    }

    pub fn generator(&self) -> Result<GeneratorConfig, Failure> {
        let grid_weights = match &self.grid_weights {
            Some(w) => GridWeights::new(w.clone())?,
            None => GridWeights::default(),
        };
        let cfg = GeneratorConfig {
            seed: self.seed,
            grid_weights,
            style: self.style,
            no_watermark_fraction: self.no_watermark_fraction,
            downscale: self.downscale,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
