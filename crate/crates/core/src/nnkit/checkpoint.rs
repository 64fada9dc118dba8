//! JSON model checkpoints.
//!
//! ```json
//! { "format": "dpdfd-mlp", "version": 1, "input_dim": 8, "output_dim": 3,
//!   "layers": [ { "in": 8, "out": 64, "activation": "relu",
//!                 "weights": [...], "bias": [...] }, ... ] }
//! ```
//!
//! Weights are stored row-major `[out × in]`. Floats are written with
//! shortest round-trip formatting, so `load(save(m)) == m` bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Layer, MlpModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "dpdfd-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    input_dim: usize,
    output_dim: usize,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerDoc {
    #[serde(rename = "in")]
    in_dim: usize,
    #[serde(rename = "out")]
    out_dim: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

pub fn to_json(model: &MlpModel) -> String {
    let doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        input_dim: model.input_dim(),
        output_dim: model.output_dim(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerDoc {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: l.activation,
                weights: l.weight.data().to_vec(),
                bias: l.bias.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("checkpoint serialization is infallible")
}

pub fn from_json(text: &str) -> Result<MlpModel> {
    let doc: CheckpointDoc = serde_json::from_str(text)?;
    if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            doc.format, doc.version
        )));
    }
    let layers = doc
        .layers
        .into_iter()
        .map(|l| {
            Layer::new(
                Tensor::matrix(l.out_dim, l.in_dim, l.weights)?,
                Tensor::vector(l.bias)?,
                l.activation,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let model = MlpModel::new(layers)?;
    if model.input_dim() != doc.input_dim || model.output_dim() != doc.output_dim {
        return Err(Error::Format("declared dims disagree with the layer list".into()));
    }
    Ok(model)
}

pub fn save(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<MlpModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
