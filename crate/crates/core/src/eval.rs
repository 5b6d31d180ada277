//! Weighted kNN and linear-probe evaluation of a frozen encoder.

use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::data::{LabeledDataset, Normalizer};
use crate::model::{Checkpoint, EncoderState, NamedTensor};
use crate::optim::{Adam, AdamConfig, ScheduleConfig};
use crate::seed;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 200;
pub const DEFAULT_KNN_TEMPERATURE: f64 = 0.1;
const ENCODE_CHUNK: usize = 256;
const LINEAR_STREAM: u64 = 0x11ea;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub num_evaluated: usize,
}

impl EvalResult {
    fn from_predictions(pred: &[usize], labels: &[usize], num_classes: usize) -> Self {
        let mut hit = vec![0usize; num_classes];
        let mut total = vec![0usize; num_classes];
        for (&p, &l) in pred.iter().zip(labels) {
            total[l] += 1;
            hit[l] += (p == l) as usize;
        }
        let correct: usize = hit.iter().sum();
        EvalResult {
            top1_accuracy: if pred.is_empty() { 0.0 } else { correct as f64 / pred.len() as f64 },
            per_class_accuracy: hit
                .iter()
                .zip(&total)
                .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
                .collect(),
            num_evaluated: pred.len(),
        }
    }
}

/// Encodes images in chunks under the deterministic eval transform.
/// Returns (penultimate, embedding) rows for every image.
pub fn encode_images(
    state: &EncoderState,
    normalizer: &Normalizer,
    images: &[Image],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut pen = Vec::new();
    let mut emb = Vec::new();
    for chunk in images.chunks(ENCODE_CHUNK) {
        let batch = normalizer.to_tensor::<f32, _>(chunk)?;
        let (p, e) = state.encode(&batch)?;
        pen.extend_from_slice(p.data());
        emb.extend_from_slice(e.data());
    }
    let n = images.len();
    let p_dim = state.config().feature_dim();
    let e_dim = state.config().embed_dim;
    Ok((Tensor::new([n, p_dim], pen)?, Tensor::new([n, e_dim], emb)?))
}

/// Unit-norm training-set embeddings with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    features: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    temperature: f64,
}

impl FeatureBank {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, num_classes: usize, temperature: f64) -> Result<Self> {
        let (m, _) = features.dims2()?;
        if m != labels.len() {
            return Err(Error::Dimension(format!("{m} features but {} labels", labels.len())));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::Parameter("bank label out of range".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::Parameter(format!("kNN temperature must be > 0, got {temperature}")));
        }
        for r in 0..m {
            let norm = features.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Parameter(format!("bank row {r} has norm {norm}")));
            }
        }
        Ok(FeatureBank {
            features,
            labels,
            num_classes,
            temperature,
        })
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Stores the bank as `features` and `labels` tensors.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let labels = self.labels.iter().map(|&l| l as f32).collect();
        Checkpoint {
            encoder: None,
            tensors: vec![
                NamedTensor {
                    name: "features".into(),
                    tensor: self.features.clone(),
                },
                NamedTensor {
                    name: "labels".into(),
                    tensor: Tensor::new([self.labels.len()], labels).expect("sized"),
                },
            ],
            metadata: serde_json::json!({
                "num_classes": self.num_classes,
                "temperature": self.temperature,
            }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let missing = |what: &str| Error::State(format!("bank checkpoint has no {what}"));
        let features = ck.tensor("features").ok_or_else(|| missing("features"))?.clone();
        let labels = ck
            .tensor("labels")
            .ok_or_else(|| missing("labels"))?
            .data()
            .iter()
            .map(|&l| l as usize)
            .collect();
        let num_classes = ck.metadata["num_classes"].as_u64().ok_or_else(|| missing("num_classes"))? as usize;
        let temperature = ck.metadata["temperature"].as_f64().ok_or_else(|| missing("temperature"))?;
        FeatureBank::new(features, labels, num_classes, temperature)
    }
}

pub fn build_feature_bank(
    state: &EncoderState,
    normalizer: &Normalizer,
    train: &LabeledDataset,
    temperature: f64,
) -> Result<FeatureBank> {
    let (_, emb) = encode_images(state, normalizer, train.images())?;
    FeatureBank::new(emb, train.labels().to_vec(), train.num_classes(), temperature)
}

/// Class of `query` by exp(s/τ)-weighted vote over its `k` most similar bank rows.
///
/// Similarity ties are broken by bank order, score ties by the smallest class.
pub fn knn_predict(bank: &FeatureBank, query: &[f32], k: usize) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::State("empty feature bank".into()));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::Parameter(format!("k must be in [1, {}], got {k}", bank.len())));
    }
    let (_, d) = bank.features.dims2()?;
    if query.len() != d {
        return Err(Error::Dimension(format!("query has {} dims, bank {d}", query.len())));
    }
    let mut sims: Vec<(f64, usize)> = (0..bank.len())
        .map(|i| {
            let s: f64 = bank.features.row(i).iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum();
            (s, i)
        })
        .collect();
    let by_sim = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < sims.len() {
        sims.select_nth_unstable_by(k - 1, by_sim);
        sims.truncate(k);
    }
    let mut scores = vec![0.0f64; bank.num_classes];
    for &(s, i) in &sims {
        scores[bank.labels[i]] += (s / bank.temperature).exp();
    }
    Ok(argmax_first(&scores))
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// kNN top-1 on `test` against a bank built from `train`; `k` is capped at the bank size.
pub fn knn_evaluate(
    state: &EncoderState,
    normalizer: &Normalizer,
    train: &LabeledDataset,
    test: &LabeledDataset,
    k: usize,
    temperature: f64,
) -> Result<EvalResult> {
    let bank = build_feature_bank(state, normalizer, train, temperature)?;
    let (_, q) = encode_images(state, normalizer, test.images())?;
    let k = k.min(bank.len());
    let pred = (0..test.len())
        .map(|i| knn_predict(&bank, q.row(i), k))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_predictions(&pred, test.labels(), test.num_classes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearEvalConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        LinearEvalConfig {
            adam: AdamConfig::default(),
            epochs: 50,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Trains a softmax-regression layer on fixed features and returns the trained
/// weights (`d×k`) and bias.
pub fn train_linear_classifier(
    features: &Tensor<f32>,
    labels: &[usize],
    num_classes: usize,
    cfg: &LinearEvalConfig,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    cfg.adam.validate()?;
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("linear eval needs epochs ≥ 1 and batch_size ≥ 1".into()));
    }
    let (m, d) = features.dims2()?;
    if m == 0 || m != labels.len() {
        return Err(Error::Dimension(format!("{m} features for {} labels", labels.len())));
    }
    let mut w = Tensor::<f32>::zeros([d, num_classes]);
    let mut b = Tensor::<f32>::zeros([num_classes]);
    let mut adam = Adam::new(cfg.adam.clone(), &[&w, &b]);
    let schedule = ScheduleConfig::cosine(cfg.epochs, cfg.batch_size);
    let steps_per_epoch = m.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..m).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut seed::rng(cfg.seed, &[LINEAR_STREAM, epoch as u64]));
        for (s, idx) in order.chunks(cfg.batch_size).enumerate() {
            let t = epoch as f64 + s as f64 / steps_per_epoch as f64;
            let lr = schedule.lr(t, cfg.adam.lr)?;
            let mut x = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                x.extend_from_slice(features.row(i));
            }
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new([idx.len(), d], x)?);
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            let logits = tape.affine(xv, wv, bv)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            let mut g = tape.backward(loss)?;
            let gw = g.take(wv).expect("weight grad");
            let gb = g.take(bv).expect("bias grad");
            adam.step(&mut [&mut w, &mut b], &[&gw, &gb], lr)?;
        }
    }
    Ok((w, b))
}

/// Predicted classes of `features` under a linear classifier.
pub fn linear_predict(features: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<usize>> {
    let logits = features.matmul(w)?;
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let scores: Vec<f64> = row.iter().zip(b.data()).map(|(&a, &c)| (a + c) as f64).collect();
            argmax_first(&scores)
        })
        .collect())
}

/// Linear probe on penultimate features of a frozen encoder.
pub fn linear_evaluate(
    state: &EncoderState,
    normalizer: &Normalizer,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &LinearEvalConfig,
) -> Result<EvalResult> {
    let (train_f, _) = encode_images(state, normalizer, train.images())?;
    let (test_f, _) = encode_images(state, normalizer, test.images())?;
    linear_evaluate_features(&train_f, train.labels(), &test_f, test.labels(), train.num_classes(), cfg)
}

pub fn linear_evaluate_features(
    train_features: &Tensor<f32>,
    train_labels: &[usize],
    test_features: &Tensor<f32>,
    test_labels: &[usize],
    num_classes: usize,
    cfg: &LinearEvalConfig,
) -> Result<EvalResult> {
    let (w, b) = train_linear_classifier(train_features, train_labels, num_classes, cfg)?;
    let pred = linear_predict(test_features, &w, &b)?;
    Ok(EvalResult::from_predictions(&pred, test_labels, num_classes))
}
