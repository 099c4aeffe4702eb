//! Fine-tuning loop for the masked-property and joint objectives.

use std::fs;
use std::path::Path;

use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarBuilder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use simile_core::SimileRecord;

use crate::error::{ModelError, Result};
use crate::ke::{joint_loss, prepare_example, scalar, Example, KeParams, KeVariant};
use crate::runtime::{reinitialise, Transformer};

pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub max_len: usize,
    pub seed: u64,
    pub ke_variant: KeVariant,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 5.0,
            batch_size: 16,
            learning_rate: 1e-5,
            epochs: 10,
            max_len: 128,
            seed: 0,
            ke_variant: KeVariant::Transe,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    /// The masked-property baseline: same loop, no KE term.
    pub fn mlm() -> TrainConfig {
        TrainConfig {
            ke_variant: KeVariant::None,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.ke_variant != KeVariant::None && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail("alpha must be positive when a KE variant is used");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.max_len < 3 {
            return fail("max_len must leave room for the special tokens");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub mlm_loss: f64,
    pub ke_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Records that could not be used, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| ModelError::io(path, e))
    }
}

/// Trains `model` in place on the annotated records.
///
/// Each epoch shuffles with a generator seeded from `config.seed`, so runs
/// with the same seed see identical batches whatever the objective. When
/// `out_dir` is given the model is saved there after every epoch and the
/// step log is written next to it. A non-finite loss restores the weights
/// from the end of the previous epoch, saves them, and fails.
pub fn finetune(
    model: &Transformer,
    records: &[SimileRecord],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainingLog> {
    config.validate()?;
    let mut log = TrainingLog::default();
    let limit = config.max_len.min(simile_core::lm::MaskedLm::max_len(model));
    let mut examples: Vec<Example> = Vec::with_capacity(records.len());
    for r in records {
        match prepare_example(model, r) {
            Ok(e) if e.ids.len() <= limit => examples.push(e),
            Ok(e) => log
                .skipped
                .push((r.id(), format!("{} subtokens exceed max_len {limit}", e.ids.len()))),
            Err(ModelError::Record { record, message }) => log.skipped.push((record, message)),
            Err(e) => return Err(e),
        }
    }
    if examples.is_empty() {
        return Err(ModelError::Config("no usable training records".into()));
    }

    let params = if config.ke_variant == KeVariant::None {
        KeParams::plain(KeVariant::None)
    } else {
        let ke_map = candle_nn::VarMap::new();
        let p = KeParams::new(
            config.ke_variant,
            model.config().hidden_size,
            VarBuilder::from_varmap(&ke_map, model.dtype(), model.device()).pp("ke"),
        )?;
        reinitialise(&ke_map, config.seed)?;
        let mut data = model.varmap().data().lock().unwrap();
        for (k, v) in ke_map.data().lock().unwrap().iter() {
            data.insert(k.clone(), v.clone());
        }
        p
    };
    let mut opt = AdamW::new(
        model.varmap().all_vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut good = model.snapshot()?;
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let parts = joint_loss(model, &batch, config.alpha, &params)?;
            let total = scalar(&parts.total)?;
            if !total.is_finite() {
                model.restore(&good)?;
                if let Some(dir) = out_dir {
                    save_run(model, &log, dir)?;
                }
                return Err(ModelError::Diverged { epoch, step });
            }
            opt.backward_step(&parts.total)?;
            log.steps.push(StepLog {
                epoch,
                step,
                mlm_loss: scalar(&parts.mlm)?,
                ke_loss: parts.ke.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
                total,
            });
            sum += total;
            batches += 1;
            step += 1;
        }
        log.epoch_loss.push(sum / batches as f64);
        good = model.snapshot()?;
        if let Some(dir) = out_dir {
            save_run(model, &log, dir)?;
        }
    }
    Ok(log)
}

fn save_run(model: &Transformer, log: &TrainingLog, dir: &Path) -> Result<()> {
    model.save(dir)?;
    log.write_csv(&dir.join(LOG_FILE))?;
    if !log.skipped.is_empty() {
        let text = serde_json::to_string_pretty(&log.skipped).expect("pairs serialize");
        fs::write(dir.join("skipped.json"), text).map_err(|e| ModelError::io(dir, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { alpha: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { alpha: 0.0, ..TrainConfig::mlm() }.validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn config_reads_partial_toml_style_json() {
        let c: TrainConfig = serde_json::from_str(r#"{"alpha": 3, "ke_variant": "transh"}"#).unwrap();
        assert_eq!(c.alpha, 3.0);
        assert_eq!(c.ke_variant, KeVariant::Transh);
        assert_eq!(c.epochs, 10);
    }

    #[test]
    fn ke_params_excluded_from_checksum_and_checkpoint() {
        let m = crate::runtime::tests::tiny(DType::F32, 1);
        let before = simile_core::lm::MaskedLm::parameter_checksum(&m);
        let recs = crate::ke::tests::toy_records();
        let cfg = TrainConfig {
            ke_variant: KeVariant::Transd,
            learning_rate: 0.0 + 1e-12,
            epochs: 1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        finetune(&m, &recs, &cfg, Some(&out)).unwrap();
        assert!(m.varmap().data().lock().unwrap().contains_key("ke.w_r.weight"));
        assert!(out.join(LOG_FILE).exists());
        let back = Transformer::load(&out).unwrap();
        assert_eq!(
            simile_core::lm::MaskedLm::parameter_checksum(&back),
            simile_core::lm::MaskedLm::parameter_checksum(&m)
        );
        assert!(before.is_some());
    }
}
