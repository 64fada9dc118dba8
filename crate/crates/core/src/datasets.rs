//! Desk-scale data: Gaussian blobs, a CSV loader for small pixel grids, and
//! non-private teacher pretraining.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::{self, one_hot, softmax_cross_entropy, MlpModel, ModelSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::dim("dataset inputs must be an [N × d] matrix"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("a dataset needs at least two classes"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {y} outside 0..{classes}")));
        }
        if inputs.data().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::invalid("dataset inputs must lie in [-1, 1]"));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Accuracy of always predicting the most frequent class.
    pub fn majority_baseline(&self) -> f64 {
        let max = self.class_counts().into_iter().max().unwrap_or(0);
        max as f64 / self.len().max(1) as f64
    }

    pub fn subset(&self, idx: &[usize]) -> Result<LabeledDataset> {
        if idx.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        Ok(LabeledDataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        })
    }

    /// Deterministically partitions into `parts` disjoint, class-stratified shards.
    pub fn shards(&self, parts: usize, seed: u64) -> Result<Vec<LabeledDataset>> {
        if parts == 0 || parts > self.len() {
            return Err(Error::invalid(format!("cannot cut {} rows into {parts} shards", self.len())));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut buckets = vec![Vec::new(); parts];
        let mut next = 0;
        for class in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            for i in idx {
                buckets[next % parts].push(i);
                next += 1;
            }
        }
        buckets.iter().map(|b| self.subset(b)).collect()
    }

    pub fn accuracy_of(&self, model: &MlpModel) -> Result<f64> {
        nnkit::accuracy(model, &self.inputs, &self.labels)
    }
}

/// Parameters for [`make_blobs`]; also serialized as the dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    #[serde(rename = "k")]
    pub classes: usize,
    pub per_class: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 3,
            per_class: 500,
            dim: 8,
            spread: 0.5,
            seed: 7,
        }
    }
}

/// Manifest written next to generated data: `{k, d, N, seed, spread}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub k: usize,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    pub spread: f64,
}

impl From<&BlobSpec> for DatasetManifest {
    fn from(s: &BlobSpec) -> Self {
        DatasetManifest {
            k: s.classes,
            d: s.dim,
            n: s.classes * s.per_class,
            seed: s.seed,
            spread: s.spread,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// `k` Gaussian clusters around centers drawn uniformly from `[-1, 1]^d`.
///
/// Points are `center + spread·N(0, I)`; the whole set is then divided by
/// `max(1, max |x|)` so every coordinate lies in `[-1, 1]`. The split is 80/20
/// and stratified by class.
pub fn make_blobs(spec: &BlobSpec) -> Result<DataSplit> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::invalid("blobs need k >= 2 and d >= 2"));
    }
    if spec.per_class < 2 {
        return Err(Error::invalid("blobs need at least two points per class for a split"));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::invalid(format!("spread {} must be finite and >= 0", spec.spread)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let mut points = Vec::with_capacity(spec.classes * spec.per_class);
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let p: Vec<f64> = c
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + spec.spread * z
                })
                .collect();
            points.push((class, p));
        }
    }
    let max_abs = points
        .iter()
        .flat_map(|(_, p)| p.iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    for (_, p) in points.iter_mut() {
        p.iter_mut().for_each(|v| *v /= max_abs);
    }

    let n_test = (spec.per_class as f64 * 0.2).round().max(1.0) as usize;
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for class in 0..spec.classes {
        let mut members: Vec<usize> = (class * spec.per_class..(class + 1) * spec.per_class).collect();
        members.shuffle(&mut rng);
        for (j, i) in members.into_iter().enumerate() {
            let dst = if j < n_test { &mut test } else { &mut train };
            dst.0.push(points[i].1.clone());
            dst.1.push(class);
        }
    }
    Ok(DataSplit {
        train: LabeledDataset::new(Tensor::from_rows(&train.0)?, train.1, spec.classes, Split::Train)?,
        test: LabeledDataset::new(Tensor::from_rows(&test.0)?, test.1, spec.classes, Split::Test)?,
    })
}

/// Reads `label,p1,…,pd` rows.
///
/// When every pixel already lies in `[-1, 1]` values are kept as written;
/// otherwise the file's global range is mapped linearly onto `[-1, 1]`.
/// `classes` bounds the labels; when `None` it is `max label + 1`.
pub fn load_grid_csv(path: impl AsRef<Path>, classes: Option<usize>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label_field = fields.next().unwrap_or_default();
        let label: usize = label_field
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad label `{label_field}`")))?;
        let pixels = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("line {lineno}: bad pixel `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if pixels.is_empty() {
            return Err(Error::Format(format!("line {lineno}: row has no pixels")));
        }
        if let Some(first) = rows.first() {
            if first.len() != pixels.len() {
                return Err(Error::Format(format!(
                    "line {lineno}: {} pixels, expected {}",
                    pixels.len(),
                    first.len()
                )));
            }
        }
        if let Some(k) = classes {
            if label >= k {
                return Err(Error::Format(format!("line {lineno}: label {label} outside 0..{k}")));
            }
        }
        labels.push(label);
        rows.push(pixels);
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{}: empty dataset", path.display())));
    }
    let (lo, hi) = rows
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo < -1.0 || hi > 1.0 {
        let span = hi - lo;
        for v in rows.iter_mut().flatten() {
            *v = 2.0 * (*v - lo) / span - 1.0;
        }
    }
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1)).max(2);
    LabeledDataset::new(Tensor::from_rows(&rows)?, labels, k, Split::Train)
}

/// Writes a dataset in the format read by [`load_grid_csv`].
pub fn save_grid_csv(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (y, row) in data.labels.iter().zip(data.inputs.iter_rows()) {
        out.push_str(&y.to_string());
        for v in row {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Class-stratified split with `test_fraction` of each class held out.
pub fn stratified_split(data: &LabeledDataset, test_fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid("test fraction must lie in (0, 1)"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..data.classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    let mut train = data.subset(&train)?;
    let mut test = data.subset(&test)?;
    train.split = Split::Train;
    test.split = Split::Test;
    Ok(DataSplit { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            lr: 0.1,
            batch: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: MlpModel,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Plain minibatch SGD on cross entropy. No privacy accounting: the result
/// is the sensitive model by construction.
pub fn pretrain_teacher(
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    spec: &ModelSpec,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("cannot pretrain on an empty dataset"));
    }
    if spec.dims.first() != Some(&train.dim()) || spec.dims.last() != Some(&train.classes) {
        return Err(Error::dim(format!(
            "model dims {:?} do not fit {}-d inputs with {} classes",
            spec.dims,
            train.dim(),
            train.classes
        )));
    }
    if !(cfg.lr > 0.0) || cfg.batch == 0 {
        return Err(Error::invalid("pretraining needs lr > 0 and batch > 0"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::init(spec, &mut rng)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut final_loss = None;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let x = train.inputs.select_rows(&batch);
        let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        let trace = model.forward(&x)?;
        let (loss, grad) = softmax_cross_entropy(trace.logits(), &one_hot(&y, train.classes)?)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss diverged at step {step}")));
        }
        let grads = nnkit::backward(&model, &trace, &grad)?;
        model.apply_gradients(&grads.layers, cfg.lr)?;
        final_loss = Some(loss);
    }
    Ok(PretrainOutcome {
        train_accuracy: train.accuracy_of(&model)?,
        test_accuracy: test.map(|t| t.accuracy_of(&model)).transpose()?,
        model,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let spec = BlobSpec {
            per_class: 50,
            ..BlobSpec::default()
        };
        let a = make_blobs(&spec).unwrap();
        let b = make_blobs(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 120);
        assert_eq!(a.test.len(), 30);
        assert_eq!(a.test.class_counts(), vec![10, 10, 10]);
        assert!(a.train.inputs().data().iter().all(|v| v.abs() <= 1.0));
        let c = make_blobs(&BlobSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_spread_collapses_onto_centers() {
        let s = make_blobs(&BlobSpec {
            spread: 0.0,
            per_class: 10,
            ..BlobSpec::default()
        })
        .unwrap();
        for class in 0..3 {
            let rows: Vec<&[f64]> = s
                .train
                .inputs()
                .iter_rows()
                .zip(s.train.labels())
                .filter(|(_, &y)| y == class)
                .map(|(r, _)| r)
                .collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn rejects_degenerate_blob_params() {
        let base = BlobSpec::default();
        assert!(make_blobs(&BlobSpec { classes: 1, ..base }).is_err());
        assert!(make_blobs(&BlobSpec { dim: 1, ..base }).is_err());
        assert!(make_blobs(&BlobSpec { spread: -1.0, ..base }).is_err());
    }

    #[test]
    fn shards_are_disjoint_and_cover() {
        let s = make_blobs(&BlobSpec {
            per_class: 40,
            ..BlobSpec::default()
        })
        .unwrap();
        let parts = s.train.shards(4, 1).unwrap();
        assert_eq!(parts.iter().map(LabeledDataset::len).sum::<usize>(), s.train.len());
        assert!(parts.iter().all(|p| p.class_counts().iter().all(|&c| c >= 7)));
    }

    #[test]
    fn majority_baseline() {
        let x = Tensor::matrix(3, 2, vec![0.0; 6]).unwrap();
        let d = LabeledDataset::new(x, vec![0, 1, 1], 2, Split::Test).unwrap();
        assert!((d.majority_baseline() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pretrain_zero_steps_returns_init() {
        let s = make_blobs(&BlobSpec {
            per_class: 10,
            ..BlobSpec::default()
        })
        .unwrap();
        let spec = ModelSpec::teacher(8, 3);
        let cfg = PretrainConfig {
            steps: 0,
            seed: 5,
            ..PretrainConfig::default()
        };
        let out = pretrain_teacher(&s.train, None, &spec, &cfg).unwrap();
        let init = MlpModel::init(&spec, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        assert_eq!(out.model, init);
        assert!(out.final_loss.is_none());
    }
}
