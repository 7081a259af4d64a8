use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::decode::CharVocab;
use crate::error::{Error, Result};
use crate::geometry::RotatedBox;

/// Per-page variance regularizer.
///
/// Sum of the population variances of box widths, heights and angles:
/// `[Σ(w_i - w̄)² + Σ(h_i - h̄)² + Σ(α_i - ᾱ)²] / N`. A single box gives 0.
pub fn variance_loss(boxes: &[RotatedBox]) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::Parameter("variance loss needs at least one box".into()));
    }
    let n = boxes.len() as f64;
    let (mw, mh, ma) = means(boxes);
    let ss: f64 = boxes
        .iter()
        .map(|b| (b.width() - mw).powi(2) + (b.height() - mh).powi(2) + (b.angle - ma).powi(2))
        .sum();
    Ok(ss / n)
}

/// Means shifted by the first element, so constant inputs reproduce their
/// value exactly and give exactly zero deviations.
fn means(boxes: &[RotatedBox]) -> (f64, f64, f64) {
    let n = boxes.len() as f64;
    let first = &boxes[0];
    let (w0, h0, a0) = (first.width(), first.height(), first.angle);
    let (sw, sh, sa) = boxes.iter().fold((0.0, 0.0, 0.0), |(w, h, a), b| {
        (w + (b.width() - w0), h + (b.height() - h0), a + (b.angle - a0))
    });
    (w0 + sw / n, h0 + sh / n, a0 + sa / n)
}

/// Gradient of [`variance_loss`] with respect to one box's `(x0, y0, x1, y1, angle)`.
pub type BoxGrad = [f64; 5];

/// Analytic gradient of [`variance_loss`].
///
/// The mean terms cancel: `∂L/∂w_i = 2 (w_i - w̄) / N`, and
/// `∂w/∂x0 = -1`, `∂w/∂x1 = 1` (heights likewise).
pub fn variance_loss_grad(boxes: &[RotatedBox]) -> Result<Vec<BoxGrad>> {
    if boxes.is_empty() {
        return Err(Error::Parameter("variance loss needs at least one box".into()));
    }
    let n = boxes.len() as f64;
    let (mw, mh, ma) = means(boxes);
    Ok(boxes
        .iter()
        .map(|b| {
            let gw = 2.0 * (b.width() - mw) / n;
            let gh = 2.0 * (b.height() - mh) / n;
            let ga = 2.0 * (b.angle - ma) / n;
            [-gw, -gh, gw, gh, ga]
        })
        .collect())
}

/// The five training loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_obj_cls: f64,
    pub l_obj_box: f64,
    pub l_rpn: f64,
    pub l_var: f64,
    pub l_txt: f64,
}

/// Per-term multipliers; all ones reproduces the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub obj_cls: f64,
    pub obj_box: f64,
    pub rpn: f64,
    pub var: f64,
    pub txt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { obj_cls: 1.0, obj_box: 1.0, rpn: 1.0, var: 1.0, txt: 1.0 }
    }
}

/// Weighted loss terms and their total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_obj_cls: f64,
    pub l_obj_box: f64,
    pub l_rpn: f64,
    pub l_var: f64,
    pub l_txt: f64,
    pub total: f64,
}

pub fn total_loss(terms: LossTerms, weights: LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("l_obj_cls", terms.l_obj_cls, weights.obj_cls),
        ("l_obj_box", terms.l_obj_box, weights.obj_box),
        ("l_rpn", terms.l_rpn, weights.rpn),
        ("l_var", terms.l_var, weights.var),
        ("l_txt", terms.l_txt, weights.txt),
    ];
    for (name, v, w) in named {
        if !v.is_finite() || !w.is_finite() {
            return Err(Error::Numeric(format!("{name} is not finite ({v} with weight {w})")));
        }
    }
    let [c, b, r, v, t] = named.map(|(_, v, w)| v * w);
    Ok(LossBreakdown {
        l_obj_cls: c,
        l_obj_box: b,
        l_rpn: r,
        l_var: v,
        l_txt: t,
        total: c + b + r + v + t,
    })
}

fn target_tokens(target: &str, rows: usize) -> Result<Vec<usize>> {
    let mut tokens = CharVocab::encode(target)?;
    tokens.push(CharVocab::EOW);
    if tokens.len() != rows {
        return Err(Error::Shape(format!(
            "target {target:?} needs {} steps (including [EOW]), got {rows}",
            tokens.len()
        )));
    }
    Ok(tokens)
}

/// Mean negative log-likelihood of `target` followed by `[EOW]` under the
/// per-step distributions `probs` (`(len + 1) x 28`).
pub fn sequence_cross_entropy(probs: ArrayView2<f64>, target: &str) -> Result<f64> {
    if probs.ncols() != CharVocab::SIZE {
        return Err(Error::Shape(format!("expected {} columns, got {}", CharVocab::SIZE, probs.ncols())));
    }
    let tokens = target_tokens(target, probs.nrows())?;
    let mut nll = 0.0;
    for (step, &tok) in tokens.iter().enumerate() {
        let p = probs[[step, tok]];
        if !(p > 0.0) {
            return Err(Error::Numeric(format!(
                "zero probability for target token {tok} at step {step}; loss is +inf"
            )));
        }
        nll -= p.ln();
    }
    Ok(nll / tokens.len() as f64)
}

/// Cross-entropy from unnormalized logits, with its gradient `(softmax - onehot) / L`.
pub fn sequence_cross_entropy_logits(logits: ArrayView2<f64>, target: &str) -> Result<(f64, Array2<f64>)> {
    if logits.ncols() != CharVocab::SIZE {
        return Err(Error::Shape(format!("expected {} columns, got {}", CharVocab::SIZE, logits.ncols())));
    }
    let tokens = target_tokens(target, logits.nrows())?;
    let steps = tokens.len() as f64;
    let mut grad = super::softmax_rows(logits);
    let mut loss = 0.0;
    for (step, (mut row, &tok)) in grad.axis_iter_mut(Axis(0)).zip(&tokens).enumerate() {
        let lrow = logits.row(step);
        let max = lrow.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + lrow.mapv(|v| (v - max).exp()).sum().ln();
        loss += lse - lrow[tok];
        row[tok] -= 1.0;
        row.mapv_inplace(|g| g / steps);
    }
    Ok((loss / steps, grad))
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::sampling::Rng;

    fn boxes_with_widths(ws: &[f64]) -> Vec<RotatedBox> {
        ws.iter().map(|&w| RotatedBox::new(0.1, 0.1, 0.1 + w, 0.2, 0.3)).collect()
    }

    #[test]
    fn single_and_identical_boxes_give_zero() {
        assert_eq!(variance_loss(&boxes_with_widths(&[0.4])).unwrap(), 0.0);
        assert_eq!(variance_loss(&boxes_with_widths(&[0.2; 9])).unwrap(), 0.0);
        assert!(variance_loss(&[]).is_err());
        let g = variance_loss_grad(&boxes_with_widths(&[0.2; 4])).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn two_widths_analytic() {
        let b = boxes_with_widths(&[0.1, 0.3]);
        assert!((variance_loss(&b).unwrap() - 0.01).abs() < 1e-15);
        let g = variance_loss_grad(&b).unwrap();
        assert!((g[0][2] + 0.1).abs() < 1e-15);
        assert!((g[0][0] - 0.1).abs() < 1e-15);
        assert!((g[1][2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn translation_and_permutation_invariance() {
        let mut rng = Rng::new(8);
        let boxes: Vec<RotatedBox> = (0..7)
            .map(|_| {
                let x = rng.next_f64();
                let y = rng.next_f64();
                RotatedBox::new(x, y, x + rng.next_f64(), y + rng.next_f64(), rng.uniform(-1.0, 1.0))
            })
            .collect();
        let base = variance_loss(&boxes).unwrap();
        let shifted: Vec<RotatedBox> = boxes
            .iter()
            .map(|b| RotatedBox::new(b.x0 + 0.5, b.y0 - 0.25, b.x1 + 0.5, b.y1 - 0.25, b.angle))
            .collect();
        assert!((variance_loss(&shifted).unwrap() - base).abs() < 1e-12);
        let mut rev = boxes.clone();
        rev.reverse();
        assert!((variance_loss(&rev).unwrap() - base).abs() < 1e-15);
    }

    #[test]
    fn total_loss_sums() {
        let w = LossWeights::default();
        assert_eq!(total_loss(LossTerms::default(), w).unwrap().total, 0.0);
        let ones = LossTerms { l_obj_cls: 1.0, l_obj_box: 1.0, l_rpn: 1.0, l_var: 1.0, l_txt: 1.0 };
        assert_eq!(total_loss(ones, w).unwrap().total, 5.0);
        let var_only = LossTerms { l_var: 0.01, ..Default::default() };
        assert_eq!(total_loss(var_only, w).unwrap().total, 0.01);
        let bad = LossTerms { l_txt: f64::NAN, ..Default::default() };
        assert!(matches!(total_loss(bad, w), Err(Error::Numeric(_))));
        let weighted = total_loss(ones, LossWeights { var: 2.0, ..w }).unwrap();
        assert_eq!(weighted.l_var, 2.0);
        assert_eq!(weighted.total, 6.0);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let tokens = CharVocab::encode("abc").unwrap();
        let mut onehot = Array2::zeros((4, CharVocab::SIZE));
        for (i, &t) in tokens.iter().chain([CharVocab::EOW].iter()).enumerate() {
            onehot[[i, t]] = 1.0;
        }
        assert_eq!(sequence_cross_entropy(onehot.view(), "abc").unwrap(), 0.0);
        let uniform = Array2::from_elem((4, CharVocab::SIZE), 1.0 / 28.0);
        let ce = sequence_cross_entropy(uniform.view(), "abc").unwrap();
        assert!((ce - 28f64.ln()).abs() < 1e-12);
        let mut zero = uniform.clone();
        zero[[1, tokens[1]]] = 0.0;
        assert!(matches!(sequence_cross_entropy(zero.view(), "abc"), Err(Error::Numeric(_))));
        assert!(matches!(sequence_cross_entropy(uniform.view(), "ab"), Err(Error::Shape(_))));
    }

    #[test]
    fn logits_route_matches_probability_route() {
        let mut rng = Rng::new(21);
        let logits = Array2::from_shape_fn((6, CharVocab::SIZE), |_| rng.uniform(-3.0, 3.0));
        let (loss, _) = sequence_cross_entropy_logits(logits.view(), "draft").unwrap();
        let probs = super::super::softmax_rows(logits.view());
        let direct = sequence_cross_entropy(probs.view(), "draft").unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }
}
