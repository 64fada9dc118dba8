//! Randomized central finite-difference checks (h = 1e-5, rel. 1e-4).

use dpdfd::distill::{distillation_loss, generator_loss, student_loss, DistillLossConfig, FeatureTermSign, GeneratorLossWeights};
use dpdfd::nnkit::{self, softmax_cross_entropy, Activation, Layer, MlpModel};
use dpdfd::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL: f64 = 1e-4;
/// Below this magnitude both sides are treated as zero; central differences
/// carry roundoff of order 1e-11 at these scales.
const FLOOR: f64 = 1e-8;

#[derive(Default)]
pub struct Tally {
    pub checked: usize,
    pub failed: Vec<String>,
}

impl Tally {
    fn check(&mut self, what: &str, analytic: f64, numeric: f64) {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        if scale > FLOOR && (analytic - numeric).abs() > REL * scale {
            self.failed.push(format!("{what}: analytic {analytic:e} vs numeric {numeric:e}"));
        }
    }

    pub fn assert_clean(&self, name: &str) {
        assert!(self.checked > 0);
        assert!(
            self.failed.is_empty(),
            "{name}: {}/{} entries failed, first: {}",
            self.failed.len(),
            self.checked,
            self.failed[0]
        );
    }
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn random_model(rng: &mut ChaCha8Rng) -> MlpModel {
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(1..=5)];
    for _ in 0..depth {
        dims.push(rng.random_range(1..=6));
    }
    let layers = dims
        .windows(2)
        .map(|w| {
            let act = match rng.random_range(0..3) {
                0 => Activation::Relu,
                1 => Activation::Tanh,
                _ => Activation::Identity,
            };
            let weight = random_matrix(rng, w[1], w[0], 1.0);
            let bias = Tensor::new(vec![w[1]], (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
            Layer::new(weight, bias, act).unwrap()
        })
        .collect();
    MlpModel::new(layers).unwrap()
}

fn with_param(model: &MlpModel, layer: usize, bias: bool, idx: usize, v: f64) -> MlpModel {
    let mut layers = model.layers().to_vec();
    let t = if bias { &mut layers[layer].bias } else { &mut layers[layer].weight };
    t.data_mut()[idx] = v;
    MlpModel::new(layers).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn perturbed(t: &Tensor, idx: usize, v: f64) -> Tensor {
    let mut out = t.clone();
    out.data_mut()[idx] = v;
    out
}

fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.0f64..3.0).exp()).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn backward(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng);
        let b = rng.random_range(1..=4);
        let x = random_matrix(&mut rng, b, model.input_dim(), 1.5);
        let w = random_matrix(&mut rng, b, model.output_dim(), 1.0);
        let objective = |m: &MlpModel, x: &Tensor| dot(&w, m.forward(x).unwrap().logits());
        let grads = nnkit::backward(&model, &model.forward(&x).unwrap(), &w).unwrap();

        for (k, layer) in model.layers().iter().enumerate() {
            for (bias, params, g) in [
                (false, &layer.weight, &grads.layers[k].weight),
                (true, &layer.bias, &grads.layers[k].bias),
            ] {
                for (i, &p) in params.data().iter().enumerate() {
                    let num = central(|v| objective(&with_param(&model, k, bias, i, v), &x), p);
                    tally.check(&format!("seed {seed} layer {k} bias={bias} [{i}]"), g.data()[i], num);
                }
            }
        }
        for (i, &xv) in x.data().iter().enumerate() {
            let num = central(|v| objective(&model, &perturbed(&x, i, v)), xv);
            tally.check(&format!("seed {seed} input [{i}]"), grads.input.data()[i], num);
        }
    }
    tally
}

pub fn backward_with_features(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let model = random_model(&mut rng);
        let b = rng.random_range(1..=4);
        let x = random_matrix(&mut rng, b, model.input_dim(), 1.5);
        let w = random_matrix(&mut rng, b, model.output_dim(), 1.0);
        let v = random_matrix(&mut rng, b, model.feature_dim(), 1.0);
        let objective = |x: &Tensor| {
            let t = model.forward(x).unwrap();
            dot(&w, t.logits()) + dot(&v, t.features())
        };
        let grads = nnkit::backward_with_features(&model, &model.forward(&x).unwrap(), &w, Some(&v)).unwrap();
        for (i, &xv) in x.data().iter().enumerate() {
            let num = central(|e| objective(&perturbed(&x, i, e)), xv);
            tally.check(&format!("seed {seed} input [{i}]"), grads.input.data()[i], num);
        }
    }
    tally
}

pub fn cross_entropy(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (b, k) = (rng.random_range(1..=5), rng.random_range(2..=6));
        let z = random_matrix(&mut rng, b, k, 4.0);
        let t = random_probs(&mut rng, b, k);
        let (_, g) = softmax_cross_entropy(&z, &t).unwrap();
        for (i, &zv) in z.data().iter().enumerate() {
            let num = central(|e| softmax_cross_entropy(&perturbed(&z, i, e), &t).unwrap().0, zv);
            tally.check(&format!("seed {seed} [{i}]"), g.data()[i], num);
        }
    }
    tally
}

pub fn distillation(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (b, k) = (rng.random_range(1..=5), rng.random_range(2..=6));
        let teacher = random_matrix(&mut rng, b, k, 5.0);
        let s = random_matrix(&mut rng, b, k, 5.0);
        let cfg = DistillLossConfig {
            kd_weight: rng.random_range(0.0..2.0),
            temperature: rng.random_range(0.5..6.0),
        };
        // Rows are per-example gradients, so compare against B·(mean loss).
        let (_, g) = distillation_loss(&teacher, &s, &cfg).unwrap();
        for (i, &sv) in s.data().iter().enumerate() {
            let num = central(|e| b as f64 * distillation_loss(&teacher, &perturbed(&s, i, e), &cfg).unwrap().0, sv);
            tally.check(&format!("seed {seed} [{i}]"), g.data()[i], num);
        }
    }
    tally
}

pub fn student(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (b, k) = (rng.random_range(1..=5), rng.random_range(2..=6));
        let s = random_matrix(&mut rng, b, k, 4.0);
        let y = random_matrix(&mut rng, b, k, 4.0);
        let (_, g) = student_loss(&s, &y).unwrap();
        for (i, &sv) in s.data().iter().enumerate() {
            let num = central(|e| student_loss(&perturbed(&s, i, e), &y).unwrap().0, sv);
            tally.check(&format!("seed {seed} [{i}]"), g.data()[i], num);
        }
    }
    tally
}

pub fn generator(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let (b, k, f) = (rng.random_range(1..=5), rng.random_range(2..=6), rng.random_range(1..=6));
        let s = random_matrix(&mut rng, b, k, 4.0);
        let feats = random_matrix(&mut rng, b, f, 2.0);
        let w = GeneratorLossWeights {
            ce: rng.random_range(0.0..1.5),
            alpha: rng.random_range(0.0..1.5),
            beta: rng.random_range(0.0..1.5),
            feature_sign: if rng.random_bool(0.5) {
                FeatureTermSign::Reward
            } else {
                FeatureTermSign::Penalize
            },
        };
        let lg = generator_loss(&s, &feats, &w).unwrap();
        for (i, &sv) in s.data().iter().enumerate() {
            let num = central(|e| generator_loss(&perturbed(&s, i, e), &feats, &w).unwrap().loss, sv);
            tally.check(&format!("seed {seed} logit [{i}]"), lg.logit_grad.data()[i], num);
        }
        for (i, &fv) in feats.data().iter().enumerate() {
            let num = central(|e| generator_loss(&s, &perturbed(&feats, i, e), &w).unwrap().loss, fv);
            tally.check(&format!("seed {seed} feature [{i}]"), lg.feature_grad.data()[i], num);
        }
    }
    tally
}

/// `L_S + L_G` through a student, differentiated with respect to its input,
/// as in the generator update.
pub fn generator_chain(seeds: u64) -> Tally {
    let mut tally = Tally::default();
    let w = GeneratorLossWeights {
        ce: 0.3,
        alpha: 1.0,
        beta: 0.2,
        feature_sign: FeatureTermSign::Reward,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let model = random_model(&mut rng);
        if model.output_dim() < 2 || model.layers().len() < 2 {
            continue;
        }
        let b = rng.random_range(1..=4);
        let x = random_matrix(&mut rng, b, model.input_dim(), 1.5);
        let y = random_matrix(&mut rng, b, model.output_dim(), 2.0);
        let objective = |x: &Tensor| {
            let t = model.forward(x).unwrap();
            student_loss(t.logits(), &y).unwrap().0 + generator_loss(t.logits(), t.features(), &w).unwrap().loss
        };
        let t = model.forward(&x).unwrap();
        let (_, mut lg_logits) = student_loss(t.logits(), &y).unwrap();
        let lg = generator_loss(t.logits(), t.features(), &w).unwrap();
        for (a, v) in lg_logits.data_mut().iter_mut().zip(lg.logit_grad.data()) {
            *a += v;
        }
        let grads = nnkit::backward_with_features(&model, &t, &lg_logits, Some(&lg.feature_grad)).unwrap();
        for (i, &xv) in x.data().iter().enumerate() {
            let num = central(|e| objective(&perturbed(&x, i, e)), xv);
            tally.check(&format!("seed {seed} input [{i}]"), grads.input.data()[i], num);
        }
    }
    tally
}
