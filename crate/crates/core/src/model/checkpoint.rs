use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GatingNetwork, GcnExpert, ModelConfig, MoeLayer, MoeModel};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            values: m.data().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, self.values.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingConfig {
    pub n_experts: usize,
    pub top_k: usize,
}

/// Single JSON document holding every parameter tensor plus free-form
/// training metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub gating: GatingConfig,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &MoeModel) -> Self {
        Self {
            model: model.config.clone(),
            gating: GatingConfig {
                n_experts: model.config.n_experts,
                top_k: model.config.top_k,
            },
            params: model.named_params(),
            metadata: serde_json::Value::Null,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<Matrix> {
        self.params
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::contract(format!("checkpoint has no tensor {name}")))?
            .to_matrix()
    }

    pub fn model(&self) -> Result<MoeModel> {
        let c = &self.model;
        c.validate()?;
        if self.gating.n_experts != c.n_experts || self.gating.top_k != c.top_k {
            return Err(Error::contract("gating config disagrees with model config"));
        }
        let layers = (0..c.n_layers)
            .map(|l| {
                let experts = (0..c.n_experts)
                    .map(|k| {
                        Ok(GcnExpert {
                            w1: self.tensor(&format!("layer{l}.expert{k}.w1"))?,
                            w2: self.tensor(&format!("layer{l}.expert{k}.w2"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gate = GatingNetwork {
                    w1: self.tensor(&format!("layer{l}.gate.w1"))?,
                    w2: self.tensor(&format!("layer{l}.gate.w2"))?,
                    top_k: c.top_k,
                };
                Ok(MoeLayer { experts, gate })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MoeModel {
            config: c.clone(),
            layers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            file: path.display().to_string(),
            line: e.line(),
            detail: e.to_string(),
        })
    }
}

impl MoeModel {
    pub fn named_params(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, e) in layer.experts.iter().enumerate() {
                out.push(NamedTensor::new(format!("layer{l}.expert{k}.w1"), &e.w1));
                out.push(NamedTensor::new(format!("layer{l}.expert{k}.w2"), &e.w2));
            }
            out.push(NamedTensor::new(format!("layer{l}.gate.w1"), &layer.gate.w1));
            out.push(NamedTensor::new(format!("layer{l}.gate.w2"), &layer.gate.w2));
        }
        out
    }
}
