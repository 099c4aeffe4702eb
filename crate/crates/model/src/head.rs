//! Sentiment classifier head trained over frozen encoder features.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{linear, AdamW, Linear, Module, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use simile_core::lm::MaskedLm;
use simile_core::sentiment::{sentence_features, split_of, ReviewExample, Split};
use simile_core::SentimentError;

use crate::error::{ModelError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            learning_rates: vec![2e-5, 3e-5, 4e-5],
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Features and 0/1 labels for one split.
#[derive(Clone, Debug)]
pub struct LabelledFeatures {
    pub features: Array2<f32>,
    pub labels: Vec<u32>,
}

impl LabelledFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrResult {
    pub learning_rate: f64,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub encoder: String,
    pub selected: LrResult,
    pub sweep: Vec<LrResult>,
    pub encoder_checksum: Option<u64>,
}

struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    fn new(input: usize, vb: VarBuilder) -> Result<Mlp> {
        Ok(Mlp {
            first: linear(input, input, vb.pp("first"))?,
            second: linear(input, 2, vb.pp("second"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.second.forward(&self.first.forward(x)?.relu()?)
    }
}

/// Uniform in +-1/sqrt(fan_in) for weights and biases.
fn init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let fan_in = *var.dims().last().unwrap_or(&1);
        let fan_in = if name.ends_with("bias") {
            // bias shares the fan-in of its weight
            data[&name.replace("bias", "weight")].dims()[1]
        } else {
            fan_in
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values: Vec<f32> = (0..var.elem_count()).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        var.set(&Tensor::from_vec(values, var.shape(), &Device::Cpu)?)?;
    }
    Ok(())
}

fn to_tensor(a: &Array2<f32>) -> Result<Tensor> {
    let (r, c) = a.dim();
    let v: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, (r, c), &Device::Cpu)?)
}

fn accuracy(mlp: &Mlp, x: &Tensor, labels: &[u32]) -> Result<f64> {
    let pred = mlp.forward(x)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Trains one head at `lr` and returns the test accuracy at the epoch with
/// the best dev accuracy (latest on ties).
pub fn train_at(
    train: &LabelledFeatures,
    dev: &LabelledFeatures,
    test: &LabelledFeatures,
    lr: f64,
    config: &HeadConfig,
) -> Result<LrResult> {
    for (name, s) in [("train", train), ("dev", dev), ("test", test)] {
        if s.is_empty() {
            return Err(SentimentError::EmptySplit(name).into());
        }
    }
    let d = train.features.ncols();
    let varmap = VarMap::new();
    let mlp = Mlp::new(d, VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu))?;
    init(&varmap, config.seed)?;
    let mut opt = AdamW::new(
        varmap.all_vars(),
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let x = to_tensor(&train.features)?;
    let (xd, xt) = (to_tensor(&dev.features)?, to_tensor(&test.features)?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<u32> = (0..train.len() as u32).collect();
    let mut best = LrResult {
        learning_rate: lr,
        best_epoch: 0,
        dev_accuracy: -1.0,
        test_accuracy: 0.0,
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let idx = Tensor::from_slice(chunk, chunk.len(), &Device::Cpu)?;
            let labels: Vec<u32> = chunk.iter().map(|&i| train.labels[i as usize]).collect();
            let logits = mlp.forward(&x.index_select(&idx, 0)?)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &Tensor::new(labels.as_slice(), &Device::Cpu)?)?;
            opt.backward_step(&loss)?;
        }
        let dev_acc = accuracy(&mlp, &xd, &dev.labels)?;
        if dev_acc >= best.dev_accuracy {
            best = LrResult {
                learning_rate: lr,
                best_epoch: epoch,
                dev_accuracy: dev_acc,
                test_accuracy: accuracy(&mlp, &xt, &test.labels)?,
            };
        }
    }
    Ok(best)
}

/// Sweeps the learning rates and keeps the one with the best dev accuracy.
pub fn train_head(
    train: &LabelledFeatures,
    dev: &LabelledFeatures,
    test: &LabelledFeatures,
    config: &HeadConfig,
) -> Result<(LrResult, Vec<LrResult>)> {
    if config.learning_rates.is_empty() {
        return Err(ModelError::Config("no learning rates to sweep".into()));
    }
    let sweep: Vec<LrResult> = config
        .learning_rates
        .iter()
        .map(|&lr| train_at(train, dev, test, lr, config))
        .collect::<Result<_>>()?;
    let selected = sweep
        .iter()
        .fold(None::<&LrResult>, |acc, r| match acc {
            Some(a) if a.dev_accuracy >= r.dev_accuracy => Some(a),
            _ => Some(r),
        })
        .cloned()
        .expect("sweep is non-empty");
    Ok((selected, sweep))
}

pub fn features_for(model: &dyn MaskedLm, examples: &[&ReviewExample]) -> Result<LabelledFeatures> {
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    Ok(LabelledFeatures {
        features: sentence_features(model, &texts)?,
        labels: examples.iter().map(|e| e.label.index() as u32).collect(),
    })
}

/// Extracts features with the encoder held fixed, trains the head, and
/// fails if the encoder parameters changed in between.
pub fn probe_sentiment(model: &dyn MaskedLm, examples: &[ReviewExample], config: &HeadConfig) -> Result<HeadReport> {
    let before = model.parameter_checksum();
    let train = features_for(model, &split_of(examples, Split::Train))?;
    let dev = features_for(model, &split_of(examples, Split::Dev))?;
    let test = features_for(model, &split_of(examples, Split::Test))?;
    let (selected, sweep) = train_head(&train, &dev, &test, config)?;
    let after = model.parameter_checksum();
    if let (Some(b), Some(a)) = (before, after) {
        if a != b {
            return Err(SentimentError::EncoderNotFrozen { before: b, after: a }.into());
        }
    }
    Ok(HeadReport {
        encoder: model.name().to_string(),
        selected,
        sweep,
        encoder_checksum: before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(rng: &mut ChaCha8Rng) -> f32 {
        (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).sum::<f32>() / 2.0
    }

    fn toy(n: usize, d: usize, seed: u64, shuffle_labels: bool) -> LabelledFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let mut f = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                f[[i, j]] = 0.3 * noise(&mut rng);
            }
            f[[i, 0]] += if labels[i] == 1 { 10.0 } else { -10.0 };
        }
        if shuffle_labels {
            labels.shuffle(&mut rng);
        }
        LabelledFeatures { features: f, labels }
    }

    #[test]
    fn separable_features_reach_full_accuracy() {
        let cfg = HeadConfig::default();
        let (sel, sweep) = train_head(&toy(200, 8, 1, false), &toy(60, 8, 2, false), &toy(60, 8, 3, false), &cfg).unwrap();
        assert_eq!(sweep.len(), 3);
        assert_eq!(sel.test_accuracy, 1.0);
    }

    #[test]
    fn shuffled_labels_stay_near_chance() {
        let cfg = HeadConfig {
            epochs: 30,
            ..HeadConfig::default()
        };
        // labels carry no signal about any feature
        let mut accs = Vec::new();
        for seed in 0..5 {
            let train = toy(400, 8, 10 + seed, true);
            let test = toy(400, 8, 20 + seed, true);
            let dev = toy(100, 8, 30 + seed, true);
            accs.push(train_at(&train, &dev, &test, 4e-5, &cfg).unwrap().test_accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.05, "{accs:?}");
    }

    #[test]
    fn best_lr_is_first_on_ties() {
        let cfg = HeadConfig {
            epochs: 5,
            learning_rates: vec![3e-5, 3e-5],
            ..HeadConfig::default()
        };
        let data = toy(64, 4, 0, false);
        let (sel, sweep) = train_head(&data, &data, &data, &cfg).unwrap();
        assert_eq!(sel, sweep[0]);
    }

    #[test]
    fn empty_split_rejected() {
        let empty = LabelledFeatures {
            features: Array2::zeros((0, 4)),
            labels: vec![],
        };
        let data = toy(10, 4, 0, false);
        assert!(train_at(&data, &empty, &data, 2e-5, &HeadConfig::default()).is_err());
    }
}
