//! Deterministic sampling of per-page watermark parameters.
//!
//! Every random draw in the crate goes through [`Rng`], a SplitMix64 stream.
//! Page-level generators are derived from a master seed and a list of keys
//! (page index, epoch, ...) with [`Rng::derive`], so pages can be produced in
//! any order, or in parallel, and still come out identical.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest word the recognizer can emit; longer words are rejected at ingestion.
pub const MAX_WORD_LEN: usize = 15;
/// Largest grid dimension; `12 * 12 = 144` watermarks per page.
pub const MAX_GRID_DIM: u32 = 12;
pub const MIN_TRANSPARENCY: f64 = 0.1;
pub const MAX_TRANSPARENCY: f64 = 0.6;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64 pseudo-random generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Child generator keyed by `master` and an ordered list of keys.
    ///
    /// Pure function of its inputs; `derive(s, &[a, b])` and
    /// `derive(s, &[b, a])` give unrelated streams.
    pub fn derive(master: u64, keys: &[u64]) -> Self {
        let mut h = mix64(master ^ GOLDEN_GAMMA);
        for &k in keys {
            h = mix64(h ^ mix64(k.wrapping_add(GOLDEN_GAMMA)));
        }
        Self::new(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn next_open01(&mut self) -> f64 {
        loop {
            let u = self.next_f64();
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` without modulo bias. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Standard normal draw (Marsaglia polar method).
    pub fn standard_normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Gamma(shape, 1) draw (Marsaglia-Tsang, with the `U^(1/a)` boost for `a < 1`).
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::Parameter(format!("gamma shape must be positive, got {shape}")));
        }
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0)?;
            return Ok(g * self.next_open01().powf(1.0 / shape));
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_open01();
            if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return Ok(d * v);
            }
        }
    }
}

/// Beta(alpha, beta) draw as `X / (X + Y)` with `X ~ Gamma(alpha)`, `Y ~ Gamma(beta)`.
pub fn beta_sample(alpha: f64, beta: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Parameter(format!(
            "beta shapes must be positive, got ({alpha}, {beta})"
        )));
    }
    loop {
        let x = rng.gamma(alpha)?;
        let y = rng.gamma(beta)?;
        let s = x + y;
        if s > 0.0 {
            let b = x / s;
            // keep the open support even when one gamma underflows
            if b > 0.0 && b < 1.0 {
                return Ok(b);
            }
        }
    }
}

/// Watermark visibility: `0.1 + 0.5 * Beta(1, 1.5)`, skewed towards faint.
pub fn sample_transparency(rng: &mut Rng) -> f64 {
    let b = beta_sample(1.0, 1.5, rng).expect("constant shapes are valid");
    MIN_TRANSPARENCY + (MAX_TRANSPARENCY - MIN_TRANSPARENCY) * b
}

/// Relative weights for grid dimensions `1..=12`.
///
/// Uniform by default. Splits with a different watermark density supply
/// their own weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridWeights(Vec<f64>);

impl Default for GridWeights {
    fn default() -> Self {
        Self(vec![1.0; MAX_GRID_DIM as usize])
    }
}

impl GridWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() != MAX_GRID_DIM as usize {
            return Err(Error::Config(format!(
                "grid weights need {MAX_GRID_DIM} entries, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("grid weights must be finite and non-negative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("grid weights must not all be zero".into()));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn is_uniform(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }

    /// Grid dimension in `1..=12`.
    pub fn sample(&self, rng: &mut Rng) -> u32 {
        if self.is_uniform() {
            return rng.below(MAX_GRID_DIM as u64) as u32 + 1;
        }
        let total: f64 = self.0.iter().sum();
        let mut target = rng.next_f64() * total;
        let mut last_nonzero = 0;
        for (i, &w) in self.0.iter().enumerate() {
            if w > 0.0 {
                last_nonzero = i;
                if target < w {
                    return i as u32 + 1;
                }
                target -= w;
            }
        }
        last_nonzero as u32 + 1
    }
}

/// The configuration shared by every watermark on one page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageParams {
    /// Radians in `(-pi/2, pi/2)`, measured counter-clockwise from the horizontal.
    pub angle: f64,
    /// Watermarks are laid out on a `grid_dim x grid_dim` grid.
    pub grid_dim: u32,
    pub transparency: f64,
    pub font_id: usize,
    pub word: String,
}

impl PageParams {
    pub fn watermark_count(&self) -> u32 {
        self.grid_dim * self.grid_dim
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.angle.abs() < FRAC_PI_2) {
            return Err(Error::Parameter(format!("angle {} outside (-pi/2, pi/2)", self.angle)));
        }
        if !(1..=MAX_GRID_DIM).contains(&self.grid_dim) {
            return Err(Error::Parameter(format!("grid_dim {} outside 1..=12", self.grid_dim)));
        }
        if !(MIN_TRANSPARENCY..=MAX_TRANSPARENCY).contains(&self.transparency) {
            return Err(Error::Parameter(format!(
                "transparency {} outside [0.1, 0.6]",
                self.transparency
            )));
        }
        if normalize_word(&self.word).as_deref() != Some(self.word.as_str()) {
            return Err(Error::Parameter(format!("invalid watermark word {:?}", self.word)));
        }
        Ok(())
    }
}

/// Angle uniform on the open interval `(-pi/2, pi/2)`.
pub fn sample_angle(rng: &mut Rng) -> f64 {
    loop {
        let a = rng.uniform(-FRAC_PI_2, FRAC_PI_2);
        if a > -FRAC_PI_2 {
            return a;
        }
    }
}

/// Draw one page configuration. `font_count` is the size of the font catalog.
pub fn sample_page_params(
    rng: &mut Rng,
    font_count: usize,
    words: &[String],
    grid: &GridWeights,
) -> Result<PageParams> {
    if font_count == 0 {
        return Err(Error::Config("font catalog is empty".into()));
    }
    if words.is_empty() {
        return Err(Error::Config("word list is empty".into()));
    }
    let angle = sample_angle(rng);
    let grid_dim = grid.sample(rng);
    let transparency = sample_transparency(rng);
    let font_id = rng.below(font_count as u64) as usize;
    let word = words[rng.below(words.len() as u64) as usize].clone();
    Ok(PageParams { angle, grid_dim, transparency, font_id, word })
}

/// Lowercase `raw`; `None` if the result is empty, longer than 15 characters,
/// or contains anything outside `a..=z`.
pub fn normalize_word(raw: &str) -> Option<String> {
    let w = raw.trim().to_lowercase();
    if w.is_empty() || w.chars().count() > MAX_WORD_LEN {
        return None;
    }
    w.chars().all(|c| c.is_ascii_lowercase()).then_some(w)
}

/// Parse a one-word-per-line list, keeping the valid words in file order.
pub fn parse_word_list(text: &str) -> Vec<String> {
    text.lines().filter_map(normalize_word).collect()
}
