//! Experiment configuration, read from a TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use simile_core::mining::PatternMode;
use simile_model::{KeVariant, TrainConfig};

use crate::error::Precondition;
use crate::store::require_path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Ours,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mine,
    Distractors,
    Confirm,
    Build,
    Finetune,
    Eval,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Mine,
        Stage::Distractors,
        Stage::Confirm,
        Stage::Build,
        Stage::Finetune,
        Stage::Eval,
        Stage::Analyze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Mine => "mine",
            Stage::Distractors => "distractors",
            Stage::Confirm => "confirm",
            Stage::Build => "build",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }
}

/// Probe sets and training records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    /// Released General Corpus probe file.
    pub general_corpus: Option<PathBuf>,
    /// Released Quizzes probe file.
    pub quizzes: Option<PathBuf>,
    /// Annotated supervision records (JSON lines of simile records).
    pub supervision: Option<PathBuf>,
}

/// Inputs to mining and distractor construction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourcePaths {
    /// Raw text, one sentence per line.
    pub corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub parses: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub relations: Option<PathBuf>,
    pub antonyms: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub cooccurrence: Option<PathBuf>,
    /// Recorded annotator judgments for the confirm stage.
    pub judgments: Option<PathBuf>,
}

impl ResourcePaths {
    pub(crate) fn entries(&self) -> Vec<(&'static str, &Option<PathBuf>)> {
        vec![
            ("resources.corpus", &self.corpus),
            ("resources.lexicon", &self.lexicon),
            ("resources.parses", &self.parses),
            ("resources.synonyms", &self.synonyms),
            ("resources.relations", &self.relations),
            ("resources.antonyms", &self.antonyms),
            ("resources.generations", &self.generations),
            ("resources.cooccurrence", &self.cooccurrence),
            ("resources.judgments", &self.judgments),
        ]
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_objective() -> Objective {
    Objective::Ours
}
fn default_variant() -> KeVariant {
    KeVariant::Transe
}
fn default_alpha() -> f64 {
    5.0
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    10
}
fn default_max_len() -> usize {
    128
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}
fn default_workers() -> usize {
    1
}
fn default_annotators() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model_name: String,
    #[serde(default)]
    pub datasets: DatasetPaths,
    #[serde(default)]
    pub resources: ResourcePaths,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default = "default_variant")]
    pub ke_variant: KeVariant,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Stages to run; empty runs every stage whose inputs are configured.
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub pattern: PatternMode,
    /// Seed for option order when building probes.
    #[serde(default)]
    pub probe_seed: u64,
    #[serde(default = "default_annotators")]
    pub annotators: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn new(name: &str, model_name: &str) -> ExperimentConfig {
        toml::from_str(&format!("name = {name:?}\nmodel_name = {model_name:?}\n")).expect("defaults parse")
    }

    /// Parses the file; relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        require_path("config", path)?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Precondition::new("config", e.to_string()))?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.datasets.general_corpus);
        fix(&mut self.datasets.quizzes);
        fix(&mut self.datasets.supervision);
        let r = &mut self.resources;
        for p in [
            &mut r.corpus,
            &mut r.lexicon,
            &mut r.parses,
            &mut r.synonyms,
            &mut r.relations,
            &mut r.antonyms,
            &mut r.generations,
            &mut r.cooccurrence,
            &mut r.judgments,
        ] {
            fix(p);
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        let model = PathBuf::from(&self.model_name);
        if model.is_relative() && base.join(&model).is_dir() {
            self.model_name = base.join(model).to_string_lossy().into_owned();
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Precondition> {
        if self.name.trim().is_empty() || self.name.contains(['/', '\\']) {
            return Err(Precondition::new("name", "must be a non-empty plain name"));
        }
        if self.seeds.is_empty() {
            return Err(Precondition::new("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Precondition::new("seeds", "seeds must be distinct"));
        }
        if self.annotators < 3 {
            return Err(Precondition::new("annotators", "at least three annotators are required"));
        }
        let d = &self.datasets;
        for (key, p) in [
            ("datasets.general_corpus", &d.general_corpus),
            ("datasets.quizzes", &d.quizzes),
            ("datasets.supervision", &d.supervision),
        ]
        .into_iter()
        .chain(self.resources.entries())
        {
            if let Some(p) = p {
                require_path(key, p)?;
            }
        }
        for seed in &self.seeds {
            self.train_config(*seed)
                .validate()
                .map_err(|e| Precondition::new("training", e.to_string()))?;
        }
        Ok(())
    }

    pub fn wants(&self, stage: Stage) -> bool {
        self.stages.is_empty() || self.stages.contains(&stage)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            max_len: self.max_len,
            seed,
            ke_variant: match self.objective {
                Objective::Mlm => KeVariant::None,
                Objective::Ours => self.ke_variant,
            },
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = ExperimentConfig::new("ours", "bert-base-uncased");
        assert_eq!(c.seeds, vec![0, 1, 2]);
        assert_eq!(c.objective, Objective::Ours);
        assert_eq!(c.learning_rate, 1e-5);
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn mlm_objective_disables_ke() {
        let mut c = ExperimentConfig::new("mlm", "m");
        c.objective = Objective::Mlm;
        assert_eq!(c.train_config(2).ke_variant, KeVariant::None);
        assert_eq!(c.train_config(2).seed, 2);
    }

    #[test]
    fn invalid_inputs_name_the_key() {
        let mut c = ExperimentConfig::new("x", "m");
        c.seeds.clear();
        assert_eq!(c.validate().unwrap_err().key, "seeds");
        let mut c = ExperimentConfig::new("x", "m");
        c.datasets.quizzes = Some("/no/such/quizzes.json".into());
        assert_eq!(c.validate().unwrap_err().key, "datasets.quizzes");
        let mut c = ExperimentConfig::new("x", "m");
        c.alpha = 0.0;
        assert_eq!(c.validate().unwrap_err().key, "training");
        assert!(toml::from_str::<ExperimentConfig>("name = 'a'\nmodel_name = 'b'\nbogus = 1\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("q.jsonl"), "").unwrap();
        let p = dir.path().join("exp.toml");
        std::fs::write(&p, "name = 'a'\nmodel_name = 'b'\n[datasets]\nquizzes = 'q.jsonl'\n").unwrap();
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.datasets.quizzes.unwrap(), dir.path().join("q.jsonl"));
        assert_eq!(c.output_dir, dir.path().join("runs"));
    }
}
