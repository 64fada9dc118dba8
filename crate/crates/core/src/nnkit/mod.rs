//! Small dense MLP kernel with hand-derived gradients.

pub mod checkpoint;
mod loss;
mod mlp;

pub use loss::{one_hot, softmax_cross_entropy, softmax_rows};
pub use mlp::{
    backward, backward_with_features, forward, sgd_step, Activation, ForwardTrace, Gradients,
    Layer, LayerGrad, MlpModel, ModelSpec,
};

use crate::tensor::{argmax, Tensor};

/// Row-wise argmax predictions.
pub fn predict(model: &MlpModel, inputs: &Tensor) -> crate::Result<Vec<usize>> {
    let trace = model.forward(inputs)?;
    Ok(trace.logits().iter_rows().map(argmax).collect())
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(model: &MlpModel, inputs: &Tensor, labels: &[usize]) -> crate::Result<f64> {
    let pred = predict(model, inputs)?;
    if pred.len() != labels.len() {
        return Err(crate::Error::dim("label count does not match inputs"));
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}
