//! Built-in numerical self-checks, each against an independent reference.

use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::Serialize;

use crate::geometry::{rasterized_iou_oracle, rotated_iou, RotatedBox};
use crate::kernels::{
    attention_weights, sequence_cross_entropy_logits, variance_loss, variance_loss_grad, AttentionConfig, CharVocab,
    LocalGlobalEncoder,
};
use crate::sampling::{beta_sample, sample_page_params, sample_transparency, GridWeights, Rng};

/// Signature of the rotated IoU under test.
pub type IouFn = fn(&RotatedBox, &RotatedBox, f64, f64) -> f64;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

#[derive(Debug, Clone, Copy)]
pub struct SelfCheckOptions {
    pub seed: u64,
    pub iou: IouFn,
    pub iou_pairs: usize,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self { seed: 20240611, iou: rotated_iou, iou_pairs: 1000 }
    }
}

type Outcome = std::result::Result<String, String>;
type Suite = Box<dyn Fn() -> Outcome>;

/// Run every suite; a suite that panics is reported as failed.
pub fn run_selfcheck(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    let opts = *opts;
    let suites: [(&'static str, Suite); 7] = [
        ("beta_transparency_ks", Box::new(move || beta_ks(opts.seed))),
        ("seeded_determinism", Box::new(move || determinism(opts.seed))),
        ("variance_loss_gradient", Box::new(move || variance_gradient(opts.seed))),
        ("cross_entropy_gradient", Box::new(move || cross_entropy_gradient(opts.seed))),
        ("rotated_iou", Box::new(move || iou_vs_oracle(opts.seed, opts.iou, opts.iou_pairs))),
        ("attention_invariants", Box::new(move || attention_invariants(opts.seed))),
        ("beta_ratio_sampler", Box::new(move || beta_moments(opts.seed))),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
                .unwrap_or_else(|_| Err("suite panicked".into()));
            let millis = start.elapsed().as_millis();
            match outcome {
                Ok(detail) => CheckResult { name, passed: true, detail, millis },
                Err(detail) => CheckResult { name, passed: false, detail, millis },
            }
        })
        .collect()
}

/// Two-sided KS statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Transparency is `0.1 + 0.5 B` with `B ~ Beta(1, 1.5)`, so its CDF is
/// `1 - (1 - (t - 0.1) / 0.5)^1.5`.
pub fn transparency_cdf(t: f64) -> f64 {
    let u = ((t - 0.1) / 0.5).clamp(0.0, 1.0);
    1.0 - (1.0 - u).powf(1.5)
}

fn beta_ks(seed: u64) -> Outcome {
    let mut rng = Rng::derive(seed, &[1]);
    let n = 10_000;
    let mut xs: Vec<f64> = (0..n).map(|_| sample_transparency(&mut rng)).collect();
    if let Some(bad) = xs.iter().find(|t| !(0.1..=0.6).contains(*t)) {
        return Err(format!("transparency {bad} outside [0.1, 0.6]"));
    }
    let d = ks_statistic(&mut xs, transparency_cdf);
    // 1% critical value
    let crit = 1.63 / (n as f64).sqrt();
    if d < crit {
        Ok(format!("D = {d:.5} < {crit:.5} over {n} draws"))
    } else {
        Err(format!("D = {d:.5} exceeds {crit:.5}"))
    }
}

fn beta_moments(seed: u64) -> Outcome {
    let mut rng = Rng::derive(seed, &[7]);
    let cases = [(0.5, 0.5), (2.0, 5.0), (1.0, 1.0), (3.0, 1.5)];
    let n = 20_000;
    for (a, b) in cases {
        let xs: Vec<f64> = (0..n).map(|_| beta_sample(a, b, &mut rng)).collect::<crate::Result<_>>().map_err(|e| e.to_string())?;
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let want_mean = a / (a + b);
        let want_var = a * b / ((a + b).powi(2) * (a + b + 1.0));
        let se = (want_var / n as f64).sqrt();
        if (mean - want_mean).abs() > 5.0 * se || (var - want_var).abs() > 0.05 * want_var + 1e-4 {
            return Err(format!("Beta({a}, {b}): mean {mean:.4} var {var:.5}, expected {want_mean:.4} / {want_var:.5}"));
        }
    }
    Ok(format!("mean and variance within tolerance for {} shapes", cases.len()))
}

fn determinism(seed: u64) -> Outcome {
    let words: Vec<String> = ["draft", "copy", "void"].iter().map(|s| s.to_string()).collect();
    let grid = GridWeights::default();
    let draw = |page: u64| {
        let mut rng = Rng::derive(seed, &[page]);
        sample_page_params(&mut rng, 3, &words, &grid).map_err(|e| e.to_string())
    };
    for page in 0..50 {
        if draw(page)? != draw(page)? {
            return Err(format!("page {page} parameters differ between runs"));
        }
    }
    let a: Vec<u64> = (0..8).map(|_| Rng::derive(seed, &[0]).next_u64()).collect();
    if a.windows(2).any(|w| w[0] != w[1]) {
        return Err("derived stream is not reproducible".into());
    }
    if Rng::derive(seed, &[0]).next_u64() == Rng::derive(seed, &[1]).next_u64() {
        return Err("distinct page keys share a stream".into());
    }
    Ok("50 pages reproduce; page streams are distinct".into())
}

fn random_boxes(rng: &mut Rng, n: usize) -> Vec<RotatedBox> {
    (0..n)
        .map(|_| {
            let x = rng.uniform(0.0, 0.5);
            let y = rng.uniform(0.0, 0.5);
            RotatedBox::new(x, y, x + rng.uniform(0.05, 0.4), y + rng.uniform(0.02, 0.2), rng.uniform(-1.5, 1.5))
        })
        .collect()
}

fn variance_gradient(seed: u64) -> Outcome {
    let mut rng = Rng::derive(seed, &[3]);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let boxes = random_boxes(&mut rng, 2 + trial % 9);
        let grad = variance_loss_grad(&boxes).map_err(|e| e.to_string())?;
        for i in 0..boxes.len() {
            for c in 0..5 {
                let bump = |d: f64| {
                    let mut b = boxes.clone();
                    let v = &mut b[i];
                    match c {
                        0 => v.x0 += d,
                        1 => v.y0 += d,
                        2 => v.x1 += d,
                        3 => v.y1 += d,
                        _ => v.angle += d,
                    }
                    variance_loss(&b).expect("nonempty")
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let err = (fd - grad[i][c]).abs() / fd.abs().max(grad[i][c].abs()).max(1e-3);
                worst = worst.max(err);
            }
        }
    }
    if worst < 1e-5 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} exceeds 1e-5"))
    }
}

fn cross_entropy_gradient(seed: u64) -> Outcome {
    let mut rng = Rng::derive(seed, &[4]);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for word in ["a", "draft", "confidential"] {
        let rows = word.len() + 1;
        let logits = Array2::from_shape_fn((rows, CharVocab::SIZE), |_| rng.uniform(-2.0, 2.0));
        let (_, grad) = sequence_cross_entropy_logits(logits.view(), word).map_err(|e| e.to_string())?;
        for r in 0..rows {
            for c in 0..CharVocab::SIZE {
                let eval = |d: f64| {
                    let mut l = logits.clone();
                    l[[r, c]] += d;
                    sequence_cross_entropy_logits(l.view(), word).expect("valid").0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max((fd - grad[[r, c]]).abs());
            }
        }
    }
    if worst < 1e-7 {
        Ok(format!("max absolute error {worst:.2e}"))
    } else {
        Err(format!("max absolute error {worst:.2e} exceeds 1e-7"))
    }
}

/// Tolerance between a candidate IoU and the 400x400 raster estimate.
pub const IOU_ORACLE_TOLERANCE: f64 = 0.01;

fn iou_vs_oracle(seed: u64, iou: IouFn, pairs: usize) -> Outcome {
    let mut rng = Rng::derive(seed, &[5]);
    let (w, h) = (640.0, 480.0);
    let mut worst: (f64, usize) = (0.0, 0);
    for i in 0..pairs {
        let a = random_boxes(&mut rng, 1)[0];
        // half the pairs are perturbed copies, so most overlap
        let b = if i % 2 == 0 {
            let (dx, dy) = (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05));
            let grow = rng.uniform(0.7, 1.3);
            RotatedBox::new(
                a.x0 + dx,
                a.y0 + dy,
                a.x0 + dx + a.width() * grow,
                a.y1 + dy,
                a.angle + rng.uniform(-0.5, 0.5),
            )
        } else {
            random_boxes(&mut rng, 1)[0]
        };
        let got = iou(&a, &b, w, h);
        let want = rasterized_iou_oracle(&a, &b, w, h, 400);
        let err = (got - want).abs();
        if err.is_nan() || err > worst.0 {
            worst = (err, i);
        }
    }
    if worst.0 <= IOU_ORACLE_TOLERANCE {
        Ok(format!("{pairs} pairs, max deviation {:.2e}", worst.0))
    } else {
        Err(format!("max deviation {:.4} at pair {} exceeds {IOU_ORACLE_TOLERANCE}", worst.0, worst.1))
    }
}

fn attention_invariants(seed: u64) -> Outcome {
    let mut rng = Rng::derive(seed, &[6]);
    let cfg = AttentionConfig { d_h: 4, d_w: 3, d_rpn: 8, d_local: 6, d_global: 10, d_fused: 5, heads: 2 };
    let enc = LocalGlobalEncoder::random(cfg, &mut rng).map_err(|e| e.to_string())?;
    let n = 5;
    let roi = Array2::from_shape_fn((n, cfg.d_global), |_| rng.uniform(-1.0, 1.0));

    let q = enc.global_q.forward(roi.view()).map_err(|e| e.to_string())?;
    let k = enc.global_k.forward(roi.view()).map_err(|e| e.to_string())?;
    for a in attention_weights(q.view(), k.view(), cfg.heads).map_err(|e| e.to_string())? {
        if a.rows().into_iter().any(|r| (r.sum() - 1.0).abs() > 1e-12 || r.iter().any(|&p| p < 0.0)) {
            return Err("attention rows are not distributions".into());
        }
    }

    let out = enc.global_attend(roi.view()).map_err(|e| e.to_string())?;
    let perm = [3, 0, 4, 1, 2];
    let shuffled = Array2::from_shape_fn(roi.dim(), |(i, j)| roi[[perm[i], j]]);
    let out_p = enc.global_attend(shuffled.view()).map_err(|e| e.to_string())?;
    for (i, &p) in perm.iter().enumerate() {
        let diff = (&out_p.row(i) - &out.row(p)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        if diff > 1e-12 {
            return Err(format!("global attention is not permutation-equivariant ({diff:.2e})"));
        }
    }

    let descs: Vec<Array3<f64>> = (0..n)
        .map(|_| Array3::from_shape_fn((cfg.d_h, cfg.d_w, cfg.d_rpn), |_| rng.uniform(-1.0, 1.0)))
        .collect();
    let views: Vec<_> = descs.iter().map(|d| d.view()).collect();
    let fused = enc.encode(&views, roi.view()).map_err(|e| e.to_string())?;
    if fused.dim() != (n, cfg.d_fused) || fused.iter().any(|v| !v.is_finite()) {
        return Err(format!("fused output has shape {:?}", fused.dim()));
    }
    let local = enc.local_embed(descs[0].view()).map_err(|e| e.to_string())?;
    if local.dim() != (cfg.d_h, cfg.d_local) {
        return Err(format!("local embedding has shape {:?}", local.dim()));
    }
    Ok("softmax rows normalized, permutation-equivariant, shapes consistent".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let results = run_selfcheck(&SelfCheckOptions { iou_pairs: 200, ..Default::default() });
        assert!(results.len() >= 5);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    fn axis_aligned_iou(a: &RotatedBox, b: &RotatedBox, w: f64, h: f64) -> f64 {
        let a0 = RotatedBox { angle: 0.0, ..*a };
        let b0 = RotatedBox { angle: 0.0, ..*b };
        rotated_iou(&a0, &b0, w, h)
    }

    #[test]
    fn broken_iou_is_caught() {
        let opts = SelfCheckOptions { iou: axis_aligned_iou, iou_pairs: 200, ..Default::default() };
        let results = run_selfcheck(&opts);
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert_eq!(failed, ["rotated_iou"]);
    }

    #[test]
    fn ks_statistic_small_case() {
        let mut xs = vec![0.5];
        assert!((ks_statistic(&mut xs, |x| x) - 0.5).abs() < 1e-15);
    }
}
