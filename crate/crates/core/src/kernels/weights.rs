use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, IxDyn};
use serde::{Deserialize, Serialize};

use super::attention::{AttentionConfig, Linear, LocalGlobalEncoder};
use super::RealArray;
use crate::error::{Error, Result};

pub const WEIGHTS_FORMAT: &str = "wmark-weights";
pub const WEIGHTS_VERSION: u32 = 1;

/// Flat row-major tensor as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_array(a: &RealArray) -> Self {
        Self { shape: a.shape().to_vec(), data: a.iter().copied().collect() }
    }

    pub fn to_array(&self) -> Result<RealArray> {
        RealArray::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|_| Error::Shape(format!("{} values do not fill shape {:?}", self.data.len(), self.shape)))
    }
}

/// JSON weight file for [`LocalGlobalEncoder`].
///
/// Tensor names are `<layer>.weight` (`inputs x outputs`) and `<layer>.bias`
/// for layers `local_q`, `local_k`, `local_v`, `global_q`, `global_k`,
/// `global_v` and `fusion`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub format: String,
    pub version: u32,
    pub config: AttentionConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

const LAYERS: [&str; 7] = ["local_q", "local_k", "local_v", "global_q", "global_k", "global_v", "fusion"];

impl LocalGlobalEncoder {
    fn layers(&self) -> [&Linear; 7] {
        [
            &self.local_q,
            &self.local_k,
            &self.local_v,
            &self.global_q,
            &self.global_k,
            &self.global_v,
            &self.fusion,
        ]
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let mut tensors = BTreeMap::new();
        for (name, layer) in LAYERS.iter().zip(self.layers()) {
            tensors.insert(format!("{name}.weight"), Tensor::from_array(&layer.weight.clone().into_dyn()));
            tensors.insert(format!("{name}.bias"), Tensor::from_array(&layer.bias.clone().into_dyn()));
        }
        WeightFile {
            format: WEIGHTS_FORMAT.into(),
            version: WEIGHTS_VERSION,
            config: self.config,
            tensors,
        }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if file.format != WEIGHTS_FORMAT || file.version != WEIGHTS_VERSION {
            return Err(Error::Config(format!(
                "unsupported weight file {} v{}",
                file.format, file.version
            )));
        }
        let cfg = file.config;
        cfg.validate()?;
        let expected = [
            (cfg.d_rpn, cfg.local_channels()),
            (cfg.d_rpn, cfg.local_channels()),
            (cfg.d_rpn, cfg.local_channels()),
            (cfg.d_global, cfg.d_global),
            (cfg.d_global, cfg.d_global),
            (cfg.d_global, cfg.d_global),
            (cfg.fused_input(), cfg.d_fused),
        ];
        let mut layers = Vec::with_capacity(LAYERS.len());
        for (name, dims) in LAYERS.iter().zip(expected) {
            let get = |suffix: &str| {
                file.tensors
                    .get(&format!("{name}.{suffix}"))
                    .ok_or_else(|| Error::Config(format!("weight file lacks {name}.{suffix}")))?
                    .to_array()
            };
            let weight: Array2<f64> = get("weight")?
                .into_dimensionality()
                .map_err(|e| Error::Shape(format!("{name}.weight: {e}")))?;
            let bias: Array1<f64> = get("bias")?
                .into_dimensionality()
                .map_err(|e| Error::Shape(format!("{name}.bias: {e}")))?;
            if weight.dim() != dims {
                return Err(Error::Shape(format!("{name}.weight is {:?}, expected {dims:?}", weight.dim())));
            }
            layers.push(Linear::new(weight, bias)?);
        }
        let mut it = layers.into_iter();
        let mut next = || it.next().expect("seven layers");
        Ok(Self {
            config: cfg,
            local_q: next(),
            local_k: next(),
            local_v: next(),
            global_q: next(),
            global_k: next(),
            global_v: next(),
            fusion: next(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.to_weight_file()).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: WeightFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        Self::from_weight_file(&file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::Rng;

    fn small() -> AttentionConfig {
        AttentionConfig { d_h: 3, d_w: 2, d_rpn: 5, d_local: 4, d_global: 6, d_fused: 3, heads: 1 }
    }

    #[test]
    fn weight_file_round_trip() {
        let enc = LocalGlobalEncoder::random(small(), &mut Rng::new(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        enc.save(&path).unwrap();
        assert_eq!(LocalGlobalEncoder::load(&path).unwrap(), enc);
    }

    #[test]
    fn rejects_wrong_shapes_and_missing_tensors() {
        let enc = LocalGlobalEncoder::random(small(), &mut Rng::new(3)).unwrap();
        let mut file = enc.to_weight_file();
        file.tensors.get_mut("fusion.weight").unwrap().shape = vec![3, 28 + 6];
        assert!(LocalGlobalEncoder::from_weight_file(&file).is_err());
        let mut file = enc.to_weight_file();
        file.tensors.remove("global_v.bias");
        assert!(matches!(LocalGlobalEncoder::from_weight_file(&file), Err(Error::Config(_))));
        let mut file = enc.to_weight_file();
        file.tensors.get_mut("local_q.bias").unwrap().data.push(1.0);
        assert!(LocalGlobalEncoder::from_weight_file(&file).is_err());
    }
}
