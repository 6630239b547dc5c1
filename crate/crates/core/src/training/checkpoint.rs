//! Checkpoint archive: one JSON document holding the model config, both
//! registries, the head layout and every named parameter array. Array data
//! is base64 of little-endian `f64`, so values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::datamodel::Registries;
use crate::dynamic_head::{HeadSpec, HEAD_SPEC};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OmniSeg};
use crate::nn::ParamSet;

pub const CHECKPOINT_FORMAT: &str = "omniseg-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub epoch: usize,
    pub val_mean_dsc: f64,
    pub model: ModelConfig,
    pub registries: Registries,
    pub head: HeadSpec,
    pub params: Vec<StoredArray>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(name: &str, text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "`{name}` holds {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn from_model(model: &OmniSeg, epoch: usize, val_mean_dsc: f64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            epoch,
            val_mean_dsc,
            model: model.config().clone(),
            registries: model.registries().clone(),
            head: HEAD_SPEC,
            params: model
                .params()
                .iter()
                .map(|p| StoredArray {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: encode(&p.data),
                })
                .collect(),
        }
    }

    pub fn to_param_set(&self) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for a in &self.params {
            let n = a.shape.iter().product();
            set.add(a.name.clone(), a.shape.clone(), decode(&a.name, &a.data, n)?);
        }
        Ok(set)
    }

    /// Rebuilds the network from the stored config and loads the weights.
    pub fn to_model(&self) -> Result<OmniSeg> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", self.format)));
        }
        if self.head != HEAD_SPEC {
            return Err(Error::Checkpoint(format!(
                "head layout {:?} differs from {:?}",
                self.head, HEAD_SPEC
            )));
        }
        let mut model = OmniSeg::new(self.model.clone(), self.registries.clone(), 0)?;
        let stored = self.to_param_set()?;
        model.params_mut().load_from(&stored)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn tiny_model(seed: u64) -> OmniSeg {
        let config = ModelConfig {
            backbone: BackboneConfig {
                base_channels: 8,
                levels: 2,
                groupnorm_groups: 4,
                ..BackboneConfig::default()
            },
            input_size: 16,
        };
        OmniSeg::new(config, Registries::default(), seed).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_with_inspectable_names() {
        let model = tiny_model(3);
        let ck = Checkpoint::from_model(&model, 4, 0.75);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for name in ["controller.weight", "controller.bias", "encoder.0.res1.conv.weight", "fusion.conv.weight", "decoder.1.up.conv.weight"] {
            assert!(text.contains(name), "{name}");
        }
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_model().unwrap();
        assert_eq!(restored.params(), model.params());
        let ctl = restored.params().by_name("controller.weight").unwrap();
        assert_eq!(ctl.shape, vec![162, 267]);
    }

    #[test]
    fn corrupted_arrays_are_rejected() {
        let mut ck = Checkpoint::from_model(&tiny_model(1), 0, 0.0);
        ck.params[0].data = encode(&[1.0]);
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
    }
}
