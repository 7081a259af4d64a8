//! Detection and recognition metrics for watermark spotting.
//!
//! Detection uses COCO conventions on rotated boxes: greedy score-ordered
//! one-to-one matching, 101-point interpolated AP, and averages over IoU
//! thresholds 0.50:0.05:0.95. Recognition uses character accuracy under a
//! minimal edit alignment, with optional majority voting over per-box texts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::kernels::variance_loss;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPrediction {
    #[serde(flatten)]
    pub bbox: RotatedBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl DetectionPrediction {
    pub fn new(bbox: RotatedBox, score: f64) -> Self {
        Self { bbox, score, text: None }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }
}

/// Predictions and ground truth for one page.
#[derive(Debug, Clone, PartialEq)]
pub struct PageDetections {
    pub width: f64,
    pub height: f64,
    pub predictions: Vec<DetectionPrediction>,
    pub truths: Vec<RotatedBox>,
}

/// Result of matching one page at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Prediction indices in descending score order (ties keep input order).
    pub order: Vec<usize>,
    /// For each prediction (input index), the matched truth index.
    pub pred_to_truth: Vec<Option<usize>>,
    pub truth_matched: Vec<bool>,
}

fn score_order(preds: &[DetectionPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy matching: each prediction, best score first, takes the unmatched
/// truth with the highest IoU, provided it reaches `threshold`.
pub fn match_detections(
    preds: &[DetectionPrediction],
    truths: &[RotatedBox],
    threshold: f64,
    width: f64,
    height: f64,
) -> Matching {
    let order = score_order(preds);
    let mut pred_to_truth = vec![None; preds.len()];
    let mut truth_matched = vec![false; truths.len()];
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if truth_matched[t] {
                continue;
            }
            let iou = rotated_iou(&preds[p].bbox, truth, width, height);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((t, iou));
            }
        }
        if let Some((t, _)) = best {
            truth_matched[t] = true;
            pred_to_truth[p] = Some(t);
        }
    }
    Matching { order, pred_to_truth, truth_matched }
}

/// AP and recall at one threshold over a set of pages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub ap: f64,
    pub recall: f64,
    /// Interpolated precision at recall 0.00, 0.01, ..., 1.00.
    pub precision_curve: Vec<f64>,
}

fn evaluate_threshold(pages: &[PageDetections], threshold: f64) -> ThresholdResult {
    let total_truths: usize = pages.iter().map(|p| p.truths.len()).sum();
    // (score, is_tp) in page order then per-page score order, so the global
    // stable sort breaks ties deterministically
    let mut dets: Vec<(f64, bool)> = Vec::new();
    for page in pages {
        let m = match_detections(&page.predictions, &page.truths, threshold, page.width, page.height);
        for &p in &m.order {
            dets.push((page.predictions[p].score, m.pred_to_truth[p].is_some()));
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));

    if total_truths == 0 {
        return ThresholdResult {
            iou_threshold: threshold,
            ap: 0.0,
            recall: 0.0,
            precision_curve: vec![0.0; RECALL_POINTS],
        };
    }
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &dets {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / total_truths as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope: non-increasing from the right
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let curve: Vec<f64> = (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            // first point reaching recall r; tiny slack absorbs k/100 rounding
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect();
    ThresholdResult {
        iou_threshold: threshold,
        ap: curve.iter().sum::<f64>() / RECALL_POINTS as f64,
        recall: recall.last().copied().unwrap_or(0.0),
        precision_curve: curve,
    }
}

/// 101-point interpolated AP at one IoU threshold.
pub fn average_precision(pages: &[PageDetections], threshold: f64) -> f64 {
    let has_truth = pages.iter().any(|p| !p.truths.is_empty());
    let has_preds = pages.iter().any(|p| !p.predictions.is_empty());
    if !has_truth && !has_preds {
        return 1.0;
    }
    evaluate_threshold(pages, threshold).ap
}

/// Detection summary. Stored on a 0-1 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub mar: f64,
    pub ar50: f64,
    pub ar75: f64,
    /// No ground truth and no predictions anywhere; every metric is 1.
    pub vacuous: bool,
    pub per_threshold: Vec<ThresholdResult>,
}

pub fn evaluate(pages: &[PageDetections]) -> EvalReport {
    let has_truth = pages.iter().any(|p| !p.truths.is_empty());
    let has_preds = pages.iter().any(|p| !p.predictions.is_empty());
    let thresholds = iou_thresholds();
    if !has_truth && !has_preds {
        return EvalReport {
            map: 1.0,
            ap50: 1.0,
            ap75: 1.0,
            mar: 1.0,
            ar50: 1.0,
            ar75: 1.0,
            vacuous: true,
            per_threshold: thresholds
                .iter()
                .map(|&t| ThresholdResult {
                    iou_threshold: t,
                    ap: 1.0,
                    recall: 1.0,
                    precision_curve: vec![1.0; RECALL_POINTS],
                })
                .collect(),
        };
    }
    let per: Vec<ThresholdResult> = thresholds.iter().map(|&t| evaluate_threshold(pages, t)).collect();
    let mean = |f: fn(&ThresholdResult) -> f64| per.iter().map(f).sum::<f64>() / per.len() as f64;
    EvalReport {
        map: mean(|r| r.ap),
        ap50: per[0].ap,
        ap75: per[5].ap,
        mar: mean(|r| r.recall),
        ar50: per[0].recall,
        ar75: per[5].recall,
        vacuous: false,
        per_threshold: per,
    }
}

/// Levenshtein alignment counts between a prediction and a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimal edit alignment of `pred` against `truth`.
///
/// Deletions are reference characters missing from the prediction;
/// insertions are extra predicted characters.
pub fn edit_counts(pred: &str, truth: &str) -> EditCounts {
    let p: Vec<char> = pred.chars().collect();
    let t: Vec<char> = truth.chars().collect();
    let (n, m) = (t.len(), p.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(t[i - 1] != p[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    // backtrace, preferring diagonal moves
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(t[i - 1] != p[j - 1]) {
            if t[i - 1] != p[j - 1] {
                counts.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// `1 - (S + D + I) / |truth|`, clamped below at 0.
pub fn char_accuracy(pred: &str, truth: &str) -> Result<f64> {
    let total = truth.chars().count();
    if total == 0 {
        return Err(Error::Parameter("character accuracy needs a nonempty reference".into()));
    }
    let edits = edit_counts(pred, truth).total();
    Ok((1.0 - edits as f64 / total as f64).max(0.0))
}

/// Most frequent string; ties go to the lexicographically smallest.
pub fn majority_vote<S: AsRef<str>>(texts: &[S]) -> Result<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in texts {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    // BTreeMap iterates in ascending order; keep the first maximum
    let mut best: Option<(&str, usize)> = None;
    for (text, count) in counts {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((text, count));
        }
    }
    best.map(|(t, _)| t.to_string())
        .ok_or_else(|| Error::Parameter("majority vote over an empty list".into()))
}

/// Predictions on the watermarked page that overlap no prediction on the
/// clean page at IoU >= `threshold`.
pub fn prediction_set_difference(
    post: &[DetectionPrediction],
    pre: &[DetectionPrediction],
    threshold: f64,
    width: f64,
    height: f64,
) -> Vec<DetectionPrediction> {
    post.iter()
        .filter(|p| !pre.iter().any(|q| rotated_iou(&p.bbox, &q.bbox, width, height) >= threshold))
        .cloned()
        .collect()
}

/// Per-page consistency of predicted boxes: the variance regularizer
/// evaluated on predictions.
pub fn variance_consistency_score(preds: &[DetectionPrediction]) -> Result<f64> {
    let boxes: Vec<RotatedBox> = preds.iter().map(|p| p.bbox).collect();
    variance_loss(&boxes)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> RotatedBox {
        RotatedBox::new(x0, y0, x1, y1, 0.0)
    }

    fn page(preds: Vec<DetectionPrediction>, truths: Vec<RotatedBox>) -> PageDetections {
        PageDetections { width: 100.0, height: 100.0, predictions: preds, truths }
    }

    #[test]
    fn thresholds_grid() {
        let t = iou_thresholds();
        assert!((t[0] - 0.5).abs() < 1e-15 && (t[5] - 0.75).abs() < 1e-15 && (t[9] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let truths = vec![bx(0.1, 0.1, 0.3, 0.2), bx(0.5, 0.5, 0.7, 0.6)];
        let preds = truths.iter().map(|b| DetectionPrediction::new(*b, 1.0)).collect();
        let r = evaluate(&[page(preds, truths.clone())]);
        for v in [r.map, r.ap50, r.ap75, r.mar, r.ar50, r.ar75] {
            assert_eq!(v, 1.0);
        }
        let r = evaluate(&[page(vec![], truths)]);
        for v in [r.map, r.ap50, r.ap75, r.mar, r.ar50, r.ar75] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn vacuous_and_truthless() {
        let r = evaluate(&[page(vec![], vec![])]);
        assert!(r.vacuous && r.map == 1.0);
        let r = evaluate(&[page(vec![DetectionPrediction::new(bx(0.1, 0.1, 0.2, 0.2), 0.5)], vec![])]);
        assert!(!r.vacuous && r.map == 0.0 && r.mar == 0.0);
    }

    #[test]
    fn duplicate_prediction_is_false_positive() {
        let truth = bx(0.1, 0.1, 0.5, 0.5);
        let preds = vec![
            DetectionPrediction::new(bx(0.1, 0.1, 0.5, 0.48), 0.6),
            DetectionPrediction::new(truth, 0.9),
        ];
        let m = match_detections(&preds, &[truth], 0.5, 100.0, 100.0);
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.pred_to_truth, vec![None, Some(0)]);
    }

    #[test]
    fn match_prefers_highest_iou() {
        let truths = [bx(0.0, 0.0, 0.4, 0.4), bx(0.05, 0.0, 0.45, 0.4)];
        let pred = [DetectionPrediction::new(bx(0.05, 0.0, 0.45, 0.4), 1.0)];
        let m = match_detections(&pred, &truths, 0.5, 100.0, 100.0);
        assert_eq!(m.pred_to_truth, vec![Some(1)]);
    }

    #[test]
    fn score_ties_keep_input_order() {
        let truth = bx(0.1, 0.1, 0.5, 0.5);
        let preds = vec![DetectionPrediction::new(truth, 0.7), DetectionPrediction::new(truth, 0.7)];
        let m = match_detections(&preds, &[truth], 0.5, 100.0, 100.0);
        assert_eq!(m.pred_to_truth, vec![Some(0), None]);
    }

    #[test]
    fn character_accuracy_cases() {
        assert!((char_accuracy("significane", "significance").unwrap() - 11.0 / 12.0).abs() < 1e-12);
        assert_eq!(char_accuracy("draft", "draft").unwrap(), 1.0);
        assert_eq!(char_accuracy("", "draft").unwrap(), 0.0);
        assert_eq!(char_accuracy("draftdraftdraft", "draft").unwrap(), 0.0);
        assert!(char_accuracy("x", "").is_err());
        let c = edit_counts("significane", "significance");
        assert_eq!(c, EditCounts { substitutions: 0, deletions: 1, insertions: 0 });
        let c = edit_counts("drafts", "graft");
        assert_eq!((c.substitutions, c.insertions, c.deletions), (1, 1, 0));
    }

    #[test]
    fn voting() {
        assert_eq!(majority_vote(&["draft", "draft", "confidential"]).unwrap(), "draft");
        assert_eq!(majority_vote(&["b", "a"]).unwrap(), "a");
        assert_eq!(majority_vote(&["x"]).unwrap(), "x");
        assert!(majority_vote::<&str>(&[]).is_err());
    }

    #[test]
    fn set_difference() {
        let a = DetectionPrediction::new(bx(0.1, 0.1, 0.3, 0.3), 0.9);
        let b = DetectionPrediction::new(bx(0.6, 0.6, 0.8, 0.7), 0.8);
        let pre = vec![DetectionPrediction::new(bx(0.11, 0.1, 0.31, 0.3), 0.5)];
        assert_eq!(prediction_set_difference(&[a.clone(), b.clone()], &pre, 0.5, 100.0, 100.0), vec![b.clone()]);
        assert!(prediction_set_difference(&pre, &pre, 0.5, 100.0, 100.0).is_empty());
        assert_eq!(prediction_set_difference(std::slice::from_ref(&a), &[], 0.5, 100.0, 100.0), vec![a]);
    }

    #[test]
    fn consistency_score() {
        let one = [DetectionPrediction::new(bx(0.1, 0.1, 0.3, 0.2), 1.0)];
        assert_eq!(variance_consistency_score(&one).unwrap(), 0.0);
        let two = [
            DetectionPrediction::new(bx(0.0, 0.0, 0.1, 0.1), 1.0),
            DetectionPrediction::new(bx(0.0, 0.0, 0.3, 0.1), 1.0),
        ];
        assert!((variance_consistency_score(&two).unwrap() - 0.01).abs() < 1e-15);
    }

    fn arb_page() -> impl Strategy<Value = PageDetections> {
        let b = (0.0..0.8f64, 0.0..0.8f64, 0.05..0.2f64, 0.05..0.2f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h));
        (
            proptest::collection::vec(b.clone(), 0..6),
            proptest::collection::vec((b, 0.0..1.0f64), 0..8),
        )
            .prop_map(|(truths, preds)| {
                page(preds.into_iter().map(|(b, s)| DetectionPrediction::new(b, s)).collect(), truths)
            })
    }

    proptest! {
        #[test]
        fn false_positive_never_raises_ap(p in arb_page(), score in 0.0..1.0f64) {
            let mut with_fp = p.clone();
            // far outside every truth
            with_fp.predictions.push(DetectionPrediction::new(bx(2.0, 2.0, 2.1, 2.1), score));
            for t in [0.5, 0.75] {
                prop_assert!(average_precision(&[with_fp.clone()], t) <= average_precision(std::slice::from_ref(&p), t) + 1e-12);
            }
        }

        #[test]
        fn correct_detection_never_lowers_recall(p in arb_page()) {
            let base = evaluate(std::slice::from_ref(&p));
            let mut more = p.clone();
            // clear of every generated box
            let extra = bx(1.5, 1.5, 1.6, 1.6);
            more.truths.push(extra);
            more.predictions.push(DetectionPrediction::new(extra, 0.5));
            let r = evaluate(&[more]);
            if !base.vacuous {
                prop_assert!(r.ar50 >= base.ar50 - 1e-12);
                prop_assert!(r.mar >= base.mar - 1e-12);
            }
        }

        #[test]
        fn metrics_in_unit_interval(p in arb_page()) {
            let r = evaluate(&[p]);
            for v in [r.map, r.ap50, r.ap75, r.mar, r.ar50, r.ar75] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn vote_is_an_input(texts in proptest::collection::vec("[a-c]{0,3}", 1..10)) {
            let v = majority_vote(&texts).unwrap();
            prop_assert!(texts.contains(&v));
        }

        #[test]
        fn accuracy_bounds(a in "[a-z]{0,12}", b in "[a-z]{1,12}") {
            let acc = char_accuracy(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert_eq!(acc == 1.0, a == b);
            prop_assert_eq!(char_accuracy(&b, &b).unwrap(), 1.0);
        }
    }
}
