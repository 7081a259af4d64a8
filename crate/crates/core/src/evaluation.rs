//! Scoring prediction files against a generated split.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::metrics::{char_accuracy, evaluate, majority_vote, mean_std, DetectionPrediction, EvalReport, PageDetections};

pub const PREDICTIONS_SCHEMA_VERSION: u32 = 1;

/// Model output for one page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PagePredictions {
    pub image_id: String,
    /// Page-level recognized word, if the model emits one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub predictions: Vec<DetectionPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub schema_version: u32,
    pub pages: Vec<PagePredictions>,
}

impl PredictionFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PredictionFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if file.schema_version != PREDICTIONS_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported prediction schema {}",
                path.display(),
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Pages keyed by id; unknown or repeated ids are data errors.
    fn index<'a>(&'a self, manifest: &Manifest) -> Result<BTreeMap<&'a str, &'a PagePredictions>> {
        let orphans: Vec<String> = self
            .pages
            .iter()
            .filter(|p| manifest.record(&p.image_id).is_none())
            .map(|p| p.image_id.clone())
            .collect();
        if !orphans.is_empty() {
            return Err(Error::UnknownImages(orphans));
        }
        let mut map = BTreeMap::new();
        for p in &self.pages {
            if map.insert(p.image_id.as_str(), p).is_some() {
                return Err(Error::Data(format!("image {:?} appears twice in predictions", p.image_id)));
            }
        }
        Ok(map)
    }
}

/// Detection metrics over every page of `manifest`; pages without
/// predictions count as empty.
pub fn evaluate_detection(manifest: &Manifest, preds: &PredictionFile) -> Result<EvalReport> {
    let index = preds.index(manifest)?;
    let mut pages = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let predictions = match index.get(r.image_id()) {
            Some(p) => p.predictions.clone(),
            None => {
                log::warn!("no predictions for {}", r.image_id());
                Vec::new()
            }
        };
        for p in &predictions {
            p.bbox.validate()?;
            if !p.score.is_finite() {
                return Err(Error::Data(format!("{}: non-finite score", r.image_id())));
            }
        }
        pages.push(PageDetections {
            width: r.width as f64,
            height: r.height as f64,
            predictions,
            truths: r.annotation.boxes.clone(),
        });
    }
    Ok(evaluate(&pages))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRecognition {
    pub image_id: String,
    pub truth: String,
    pub predicted: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub mean: f64,
    pub std: f64,
    pub pages: Vec<PageRecognition>,
}

/// Character accuracy per watermarked page.
///
/// With `vote`, the page prediction is the majority of per-box texts;
/// otherwise it is the page-level `text`, falling back to the vote when
/// that is absent. Pages with no prediction score as the empty string.
pub fn evaluate_recognition(manifest: &Manifest, preds: &PredictionFile, vote: bool) -> Result<RecognitionReport> {
    let index = preds.index(manifest)?;
    let mut pages = Vec::new();
    for r in &manifest.records {
        let truth = &r.annotation.word;
        if r.annotation.params.is_none() || truth.is_empty() {
            continue;
        }
        let page = index.get(r.image_id());
        let box_texts: Vec<&str> = page
            .map(|p| p.predictions.iter().filter_map(|d| d.text.as_deref()).collect())
            .unwrap_or_default();
        let predicted = match (page.and_then(|p| p.text.clone()), vote) {
            (Some(t), false) => t,
            _ if !box_texts.is_empty() => majority_vote(&box_texts)?,
            (Some(t), true) => t,
            (None, _) => {
                log::warn!("{}: no text prediction; scored against an empty string", r.image_id());
                String::new()
            }
        };
        let accuracy = char_accuracy(&predicted, truth)?;
        pages.push(PageRecognition { image_id: r.image_id().to_string(), truth: truth.clone(), predicted, accuracy });
    }
    let (mean, std) = mean_std(&pages.iter().map(|p| p.accuracy).collect::<Vec<_>>());
    Ok(RecognitionReport { mean, std, pages })
}
