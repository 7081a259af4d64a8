use ndarray::{concatenate, s, Array1, Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::Rng;

/// Dimensions of the local/global recognition encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Height of the per-proposal descriptor (sequence length of local attention).
    pub d_h: usize,
    pub d_w: usize,
    /// Channels of the per-proposal descriptor.
    pub d_rpn: usize,
    pub d_local: usize,
    pub d_global: usize,
    /// Width of the fused per-proposal representation.
    pub d_fused: usize,
    pub heads: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { d_h: 7, d_w: 7, d_rpn: 256, d_local: 224, d_global: 256, d_fused: 256, heads: 1 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_h, self.d_w, self.d_rpn, self.d_local, self.d_global, self.d_fused, self.heads];
        if dims.contains(&0) {
            return Err(Error::Config(format!("attention dimensions must be positive: {self:?}")));
        }
        if !self.d_local.is_multiple_of(self.d_w) {
            return Err(Error::Config(format!(
                "d_local {} is not divisible by d_w {}",
                self.d_local, self.d_w
            )));
        }
        if !self.d_local.is_multiple_of(self.heads) || !self.d_global.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_local {} and d_global {}",
                self.heads, self.d_local, self.d_global
            )));
        }
        Ok(())
    }

    /// Channels produced by the per-position projection before width flattening.
    pub fn local_channels(&self) -> usize {
        self.d_local / self.d_w
    }

    /// Width of `[flattened local; global]` before the fusion projection.
    pub fn fused_input(&self) -> usize {
        self.d_h * self.d_local + self.d_global
    }
}

/// Affine map `x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `inputs x outputs`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::Shape(format!(
                "weight has {} outputs but bias has {}",
                weight.ncols(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((inputs, outputs)), bias: Array1::zeros(outputs) }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn random(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || rng.uniform(-limit, limit));
        Self { weight, bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.inputs() {
            return Err(Error::Shape(format!(
                "linear map expects {} features, got {}",
                self.inputs(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }
}

/// Numerically stable softmax of each row.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_qkv(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>, heads: usize) -> Result<()> {
    if heads == 0 {
        return Err(Error::Shape("heads must be positive".into()));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::Shape(format!("query width {} != key width {}", q.ncols(), k.ncols())));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::Shape(format!("{} keys but {} values", k.nrows(), v.nrows())));
    }
    if !q.ncols().is_multiple_of(heads) || !v.ncols().is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "{heads} heads do not divide key width {} and value width {}",
            q.ncols(),
            v.ncols()
        )));
    }
    Ok(())
}

/// Per-head attention matrices `softmax(Q_h K_hᵀ / sqrt(d_k / heads))`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, heads: usize) -> Result<Vec<Array2<f64>>> {
    check_qkv(q, k, k, heads)?;
    let dk = q.ncols() / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    Ok((0..heads)
        .map(|h| {
            let cols = s![.., h * dk..(h + 1) * dk];
            let logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(logits.view())
        })
        .collect())
}

/// Multi-head scaled dot-product attention; heads are concatenated along columns.
pub fn scaled_dot_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
) -> Result<Array2<f64>> {
    check_qkv(q, k, v, heads)?;
    let dv = v.ncols() / heads;
    let weights = attention_weights(q, k, heads)?;
    let parts: Vec<Array2<f64>> = weights
        .iter()
        .enumerate()
        .map(|(h, a)| a.dot(&v.slice(s![.., h * dv..(h + 1) * dv])))
        .collect();
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Pointwise projection of a `d_h x d_w x d_rpn` descriptor followed by width
/// flattening, giving a `d_h x d_local` sequence.
fn project_descriptor(desc: ArrayView3<f64>, proj: &Linear, cfg: &AttentionConfig) -> Result<Array2<f64>> {
    let rows = desc
        .to_shape((cfg.d_h * cfg.d_w, cfg.d_rpn))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let projected = proj.forward(rows.view())?;
    projected
        .into_shape_with_order((cfg.d_h, cfg.d_w * proj.outputs()))
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Local embedding of one proposal: self-attention along the descriptor height.
pub fn local_embed(
    desc: ArrayView3<f64>,
    q: &Linear,
    k: &Linear,
    v: &Linear,
    cfg: &AttentionConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let expect = (cfg.d_h, cfg.d_w, cfg.d_rpn);
    if desc.dim() != expect {
        return Err(Error::Shape(format!("descriptor shape {:?}, expected {expect:?}", desc.dim())));
    }
    for p in [q, k, v] {
        if p.inputs() != cfg.d_rpn || p.outputs() != cfg.local_channels() {
            return Err(Error::Shape(format!(
                "local projection must map {} -> {}, got {} -> {}",
                cfg.d_rpn,
                cfg.local_channels(),
                p.inputs(),
                p.outputs()
            )));
        }
    }
    let qs = project_descriptor(desc, q, cfg)?;
    let ks = project_descriptor(desc, k, cfg)?;
    let vs = project_descriptor(desc, v, cfg)?;
    scaled_dot_attention(qs.view(), ks.view(), vs.view(), cfg.heads)
}

/// Global embedding: self-attention across all proposal descriptors of a page.
///
/// An empty proposal list yields a `0 x d_global` result and a warning.
pub fn global_attend(
    roi: ArrayView2<f64>,
    q: &Linear,
    k: &Linear,
    v: &Linear,
    cfg: &AttentionConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if roi.ncols() != cfg.d_global {
        return Err(Error::Shape(format!("roi width {}, expected {}", roi.ncols(), cfg.d_global)));
    }
    if roi.nrows() == 0 {
        log::warn!("global attention over an empty proposal list");
        return Ok(Array2::zeros((0, cfg.d_global)));
    }
    let qs = q.forward(roi)?;
    let ks = k.forward(roi)?;
    let vs = v.forward(roi)?;
    scaled_dot_attention(qs.view(), ks.view(), vs.view(), cfg.heads)
}

/// Concatenate each flattened local embedding with its global row and project.
pub fn fuse(
    locals: &[Array2<f64>],
    global: ArrayView2<f64>,
    proj: &Linear,
    cfg: &AttentionConfig,
) -> Result<Array2<f64>> {
    if locals.len() != global.nrows() {
        return Err(Error::Shape(format!(
            "{} local embeddings but {} global rows",
            locals.len(),
            global.nrows()
        )));
    }
    if proj.inputs() != cfg.fused_input() {
        return Err(Error::Shape(format!(
            "fusion projection expects {} inputs, config gives {}",
            proj.inputs(),
            cfg.fused_input()
        )));
    }
    let mut joined = Array2::zeros((locals.len(), cfg.fused_input()));
    for (i, (local, g)) in locals.iter().zip(global.axis_iter(Axis(0))).enumerate() {
        if local.dim() != (cfg.d_h, cfg.d_local) {
            return Err(Error::Shape(format!(
                "local embedding {i} has shape {:?}, expected {:?}",
                local.dim(),
                (cfg.d_h, cfg.d_local)
            )));
        }
        let mut row = joined.row_mut(i);
        // row-major flatten of height x features
        for (dst, src) in row.slice_mut(s![..cfg.d_h * cfg.d_local]).iter_mut().zip(local.iter()) {
            *dst = *src;
        }
        row.slice_mut(s![cfg.d_h * cfg.d_local..]).assign(&g);
    }
    proj.forward(joined.view())
}

/// Projection weights for the whole local/global encoder.
///
/// One set of local projections is shared by all proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGlobalEncoder {
    pub config: AttentionConfig,
    pub local_q: Linear,
    pub local_k: Linear,
    pub local_v: Linear,
    pub global_q: Linear,
    pub global_k: Linear,
    pub global_v: Linear,
    pub fusion: Linear,
}

impl LocalGlobalEncoder {
    pub fn random(config: AttentionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (r, c, g) = (config.d_rpn, config.local_channels(), config.d_global);
        Ok(Self {
            config,
            local_q: Linear::random(r, c, rng),
            local_k: Linear::random(r, c, rng),
            local_v: Linear::random(r, c, rng),
            global_q: Linear::random(g, g, rng),
            global_k: Linear::random(g, g, rng),
            global_v: Linear::random(g, g, rng),
            fusion: Linear::random(config.fused_input(), config.d_fused, rng),
        })
    }

    pub fn local_embed(&self, desc: ArrayView3<f64>) -> Result<Array2<f64>> {
        local_embed(desc, &self.local_q, &self.local_k, &self.local_v, &self.config)
    }

    pub fn global_attend(&self, roi: ArrayView2<f64>) -> Result<Array2<f64>> {
        global_attend(roi, &self.global_q, &self.global_k, &self.global_v, &self.config)
    }

    /// Fused `N x d_fused` representation for `N` proposals.
    pub fn encode(&self, descs: &[ArrayView3<f64>], roi: ArrayView2<f64>) -> Result<Array2<f64>> {
        let locals = descs.iter().map(|d| self.local_embed(*d)).collect::<Result<Vec<_>>>()?;
        let global = self.global_attend(roi)?;
        fuse(&locals, global.view(), &self.fusion, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{Array2, Array3};

    use super::*;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut rng = Rng::new(1);
        let x = random_matrix(5, 9, &mut rng) * 40.0;
        let p = softmax_rows(x.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_keys_average_values() {
        let mut rng = Rng::new(2);
        let q = random_matrix(4, 6, &mut rng);
        let k = Array2::from_shape_fn((4, 6), |(_, j)| j as f64 * 0.1);
        let v = random_matrix(4, 3, &mut rng);
        let out = scaled_dot_attention(q.view(), k.view(), v.view(), 1).unwrap();
        let mean = v.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn singleton_returns_value() {
        let mut rng = Rng::new(3);
        let q = random_matrix(1, 4, &mut rng);
        let v = random_matrix(1, 8, &mut rng);
        let out = scaled_dot_attention(q.view(), q.view(), v.view(), 2).unwrap();
        assert!((out - &v).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn multi_head_matches_per_head_single() {
        let mut rng = Rng::new(4);
        let q = random_matrix(5, 8, &mut rng);
        let k = random_matrix(5, 8, &mut rng);
        let v = random_matrix(5, 6, &mut rng);
        let mh = scaled_dot_attention(q.view(), k.view(), v.view(), 2).unwrap();
        for h in 0..2 {
            let single = scaled_dot_attention(
                q.slice(s![.., h * 4..(h + 1) * 4]),
                k.slice(s![.., h * 4..(h + 1) * 4]),
                v.slice(s![.., h * 3..(h + 1) * 3]),
                1,
            )
            .unwrap();
            let diff = &mh.slice(s![.., h * 3..(h + 1) * 3]) - &single;
            assert!(diff.iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn shape_errors() {
        let a = Array2::<f64>::zeros((3, 4));
        let b = Array2::<f64>::zeros((2, 4));
        let c = Array2::<f64>::zeros((3, 5));
        assert!(matches!(scaled_dot_attention(a.view(), c.view(), a.view(), 1), Err(Error::Shape(_))));
        assert!(matches!(scaled_dot_attention(a.view(), a.view(), b.view(), 1), Err(Error::Shape(_))));
        assert!(matches!(scaled_dot_attention(a.view(), a.view(), c.view(), 2), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        AttentionConfig::default().validate().unwrap();
        assert_eq!(AttentionConfig::default().local_channels(), 32);
        assert_eq!(AttentionConfig::default().fused_input(), 7 * 224 + 256);
        let bad = AttentionConfig { d_local: 225, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad_heads = AttentionConfig { heads: 3, ..Default::default() };
        assert!(bad_heads.validate().is_err());
    }

    #[test]
    fn zero_descriptor_gives_zero_embedding() {
        let cfg = AttentionConfig::default();
        let mut rng = Rng::new(5);
        let enc = LocalGlobalEncoder::random(cfg, &mut rng).unwrap();
        let out = enc.local_embed(Array3::zeros((7, 7, 256)).view()).unwrap();
        assert_eq!(out.dim(), (7, 224));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_global_sequence() {
        let cfg = AttentionConfig { d_global: 8, ..Default::default() };
        let p = Linear::zeros(8, 8);
        let out = global_attend(Array2::zeros((0, 8)).view(), &p, &p, &p, &cfg).unwrap();
        assert_eq!(out.dim(), (0, 8));
    }

    #[test]
    fn fuse_length_mismatch() {
        let cfg = AttentionConfig { d_h: 2, d_w: 2, d_rpn: 4, d_local: 4, d_global: 3, d_fused: 5, heads: 1 };
        let proj = Linear::zeros(cfg.fused_input(), 5);
        let locals = vec![Array2::zeros((2, 4))];
        let global = Array2::zeros((2, 3));
        assert!(matches!(fuse(&locals, global.view(), &proj, &cfg), Err(Error::Shape(_))));
    }
}
