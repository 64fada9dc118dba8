use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation and the activation output.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully-connected layer computing `act(x · Wᵀ + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::dim("layer weight must be a matrix"));
        }
        if bias.shape() != [weight.rows()] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {} output units",
                bias.shape(),
                weight.rows()
            )));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Architecture description used to initialize a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Layer widths including input and output, e.g. `[8, 64, 64, 3]`.
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl ModelSpec {
    pub fn teacher(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            dims: vec![input_dim, 64, 64, classes],
            hidden: Activation::Relu,
            output: Activation::Identity,
        }
    }

    pub fn student(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            dims: vec![input_dim, 32, classes],
            hidden: Activation::Relu,
            output: Activation::Identity,
        }
    }

    /// Generator with a tanh head so samples land in `[-1, 1]`.
    pub fn generator(noise_dim: usize, data_dim: usize) -> Self {
        ModelSpec {
            dims: vec![noise_dim, 64, 64, data_dim],
            hidden: Activation::Relu,
            output: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::invalid(format!(
                "model dims {:?} need at least two positive widths",
                self.dims
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

impl MlpModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(format!(
                    "layer {k} emits {} units but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(MlpModel { layers })
    }

    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let n = spec.dims.len() - 1;
        let layers = spec
            .dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                let activation = if k + 1 == n { spec.output } else { spec.hidden };
                Layer {
                    weight: Tensor::from_parts(vec![fan_out, fan_in], data),
                    bias: Tensor::zeros(vec![fan_out]),
                    activation,
                }
            })
            .collect();
        MlpModel::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Width of the representation fed into the last layer.
    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].in_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ForwardTrace> {
        forward(self, batch)
    }

    /// Applies `p ← p − lr·grad` in place.
    pub fn apply_gradients(&mut self, grads: &[LayerGrad], lr: f64) -> Result<()> {
        check_grad_shapes(self, grads)?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and non-negative")));
        }
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (p, d) in layer.weight.data_mut().iter_mut().zip(g.weight.data()) {
                *p -= lr * d;
            }
            for (p, d) in layer.bias.data_mut().iter_mut().zip(g.bias.data()) {
                *p -= lr * d;
            }
        }
        if !self.is_finite() {
            return Err(Error::Numerical("parameters diverged to a non-finite value".into()));
        }
        Ok(())
    }
}

/// Per-layer values recorded during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
}

impl ForwardTrace {
    /// Output of the final layer, `[batch × output_dim]`.
    pub fn logits(&self) -> &Tensor {
        &self.post[self.post.len() - 1]
    }

    /// Representation entering the final layer (the backbone output).
    pub fn features(&self) -> &Tensor {
        if self.post.len() >= 2 {
            &self.post[self.post.len() - 2]
        } else {
            &self.input
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

pub fn forward(model: &MlpModel, batch: &Tensor) -> Result<ForwardTrace> {
    if batch.shape().len() != 2 || batch.cols() != model.input_dim() {
        return Err(Error::dim(format!(
            "batch shape {:?} does not fit input width {}",
            batch.shape(),
            model.input_dim()
        )));
    }
    if !batch.is_finite() {
        return Err(Error::invalid("forward input contains NaN or infinity"));
    }
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut post: Vec<Tensor> = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let x = post.last().unwrap_or(batch);
        let mut z = x.matmul_transposed(&layer.weight);
        let b = layer.bias.data();
        for r in 0..z.rows() {
            for (v, bv) in z.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
        let a = Tensor::from_parts(
            z.shape().to_vec(),
            z.data().iter().map(|&v| layer.activation.apply(v)).collect(),
        );
        pre.push(z);
        post.push(a);
    }
    let trace = ForwardTrace {
        input: batch.clone(),
        pre,
        post,
    };
    trace.logits().ensure_finite("forward output")?;
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Tensor,
}

/// Exact gradients of `⟨logit_grad, logits⟩` with respect to every parameter
/// and to the input batch.
pub fn backward(model: &MlpModel, trace: &ForwardTrace, logit_grad: &Tensor) -> Result<Gradients> {
    backward_with_features(model, trace, logit_grad, None)
}

/// Like [`backward`], with an extra upstream gradient injected at the
/// backbone features (the input of the final layer).
pub fn backward_with_features(
    model: &MlpModel,
    trace: &ForwardTrace,
    logit_grad: &Tensor,
    feature_grad: Option<&Tensor>,
) -> Result<Gradients> {
    let n = model.layers.len();
    if trace.pre.len() != n || trace.post.len() != n {
        return Err(Error::invalid(format!(
            "trace has {} layers, model has {n}",
            trace.pre.len()
        )));
    }
    for (k, (layer, z)) in model.layers.iter().zip(&trace.pre).enumerate() {
        if z.cols() != layer.out_dim() {
            return Err(Error::invalid(format!("trace layer {k} does not match the model")));
        }
    }
    if trace.input.cols() != model.input_dim() {
        return Err(Error::invalid("trace input does not match the model"));
    }
    logit_grad.ensure_shape(trace.logits().shape(), "logit gradient")?;
    if let Some(f) = feature_grad {
        f.ensure_shape(trace.features().shape(), "feature gradient")?;
    }

    let mut layers = Vec::with_capacity(n);
    let mut upstream = logit_grad.clone();
    for k in (0..n).rev() {
        let layer = &model.layers[k];
        let (z, a) = (&trace.pre[k], &trace.post[k]);
        let dz: Vec<f64> = upstream
            .data()
            .iter()
            .zip(z.data().iter().zip(a.data()))
            .map(|(&g, (&zv, &av))| g * layer.activation.derivative(zv, av))
            .collect();
        let dz = Tensor::from_parts(z.shape().to_vec(), dz);
        let x = if k == 0 { &trace.input } else { &trace.post[k - 1] };
        let weight = dz.transposed_matmul(x);
        let mut bias = vec![0.0; layer.out_dim()];
        for r in dz.iter_rows() {
            for (b, v) in bias.iter_mut().zip(r) {
                *b += v;
            }
        }
        upstream = dz.matmul(&layer.weight);
        if k + 1 == n {
            if let Some(f) = feature_grad {
                for (u, v) in upstream.data_mut().iter_mut().zip(f.data()) {
                    *u += v;
                }
            }
        }
        layers.push(LayerGrad {
            weight,
            bias: Tensor::from_parts(vec![layer.out_dim()], bias),
        });
    }
    layers.reverse();
    Ok(Gradients {
        layers,
        input: upstream,
    })
}

fn check_grad_shapes(model: &MlpModel, grads: &[LayerGrad]) -> Result<()> {
    if grads.len() != model.layers.len() {
        return Err(Error::invalid(format!(
            "{} gradient layers for a {}-layer model",
            grads.len(),
            model.layers.len()
        )));
    }
    for (k, (l, g)) in model.layers.iter().zip(grads).enumerate() {
        if g.weight.shape() != l.weight.shape() || g.bias.shape() != l.bias.shape() {
            return Err(Error::invalid(format!("gradient for layer {k} has the wrong shape")));
        }
    }
    Ok(())
}

/// Returns a copy of `model` with every parameter moved by `−lr·grad`.
pub fn sgd_step(model: &MlpModel, grads: &[LayerGrad], lr: f64) -> Result<MlpModel> {
    let mut next = model.clone();
    next.apply_gradients(grads, lr)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(w: Vec<f64>, rows: usize, cols: usize, b: Vec<f64>, act: Activation) -> MlpModel {
        let layer = Layer::new(
            Tensor::matrix(rows, cols, w).unwrap(),
            Tensor::vector(b).unwrap(),
            act,
        )
        .unwrap();
        MlpModel::new(vec![layer]).unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let m = single(vec![1., 0., 0., 1.], 2, 2, vec![0., 0.], Activation::Identity);
        let x = Tensor::matrix(1, 2, vec![3., 4.]).unwrap();
        assert_eq!(m.forward(&x).unwrap().logits().data(), &[3., 4.]);
    }

    #[test]
    fn relu_clamps_negative_preactivation() {
        let m = single(vec![2.], 1, 1, vec![1.], Activation::Relu);
        let t = m.forward(&Tensor::matrix(1, 1, vec![-5.]).unwrap()).unwrap();
        assert_eq!(t.pre[0].data(), &[-9.]);
        assert_eq!(t.logits().data(), &[0.]);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = single(vec![1., 0., 0., 1.], 2, 2, vec![0., 0.], Activation::Identity);
        let x = Tensor::matrix(1, 3, vec![1., 2., 3.]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::Dimension(_))));
        let mut y = Tensor::matrix(1, 2, vec![1., 2.]).unwrap();
        y.data_mut()[0] = f64::INFINITY;
        assert!(matches!(m.forward(&y), Err(Error::Validation(_))));
    }

    #[test]
    fn linear_layer_gradients() {
        let m = single(vec![1., 2., 3., 4.], 2, 2, vec![0.5, -0.5], Activation::Identity);
        let x = Tensor::matrix(1, 2, vec![3., -1.]).unwrap();
        let t = m.forward(&x).unwrap();
        let g = Tensor::matrix(1, 2, vec![0.2, -0.7]).unwrap();
        let grads = backward(&m, &t, &g).unwrap();
        // dW = gᵀ x, dx = g W
        assert_eq!(grads.layers[0].weight.data(), &[0.2 * 3., -0.2, -0.7 * 3., -0.7 * -1.]);
        assert_eq!(grads.layers[0].bias.data(), &[0.2, -0.7]);
        assert_eq!(grads.input.data(), &[0.2 * 1. + -0.7 * 3., 0.2 * 2. + -0.7 * 4.]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = MlpModel::init(&ModelSpec::teacher(5, 3), &mut rng).unwrap();
        let x = Tensor::matrix(2, 5, (0..10).map(|v| v as f64 * 0.1).collect()).unwrap();
        let t = m.forward(&x).unwrap();
        let grads = backward(&m, &t, &Tensor::zeros(vec![2, 3])).unwrap();
        assert!(grads.layers.iter().all(|g| g.weight.data().iter().all(|&v| v == 0.0)));
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = MlpModel::init(&ModelSpec::teacher(4, 3), &mut rng).unwrap();
        let b = MlpModel::init(&ModelSpec::student(4, 3), &mut rng).unwrap();
        let x = Tensor::matrix(1, 4, vec![0.1; 4]).unwrap();
        let t = a.forward(&x).unwrap();
        assert!(matches!(
            backward(&b, &t, &Tensor::zeros(vec![1, 3])),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            backward(&a, &t, &Tensor::zeros(vec![1, 2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sgd_arithmetic() {
        let m = single(vec![1.0], 1, 1, vec![0.0], Activation::Identity);
        let g = vec![LayerGrad {
            weight: Tensor::matrix(1, 1, vec![0.5]).unwrap(),
            bias: Tensor::vector(vec![0.0]).unwrap(),
        }];
        let stepped = sgd_step(&m, &g, 0.1).unwrap();
        assert!((stepped.layers()[0].weight.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(sgd_step(&m, &g, 0.0).unwrap(), m);
        assert!(matches!(sgd_step(&m, &g, -1.0), Err(Error::Validation(_))));
        assert!(matches!(sgd_step(&m, &[], 0.1), Err(Error::Validation(_))));
    }

    #[test]
    fn init_respects_glorot_limit_and_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = MlpModel::init(&ModelSpec::generator(16, 8), &mut rng).unwrap();
        assert_eq!((m.input_dim(), m.output_dim(), m.feature_dim()), (16, 8, 64));
        for l in m.layers() {
            let lim = (6.0 / (l.in_dim() + l.out_dim()) as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= lim));
        }
        assert_eq!(m.layers()[2].activation, Activation::Tanh);
        assert!(MlpModel::new(vec![m.layers()[0].clone(), m.layers()[0].clone()]).is_err());
    }
}
