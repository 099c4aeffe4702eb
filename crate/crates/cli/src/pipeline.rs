//! Staged runs with content-hash caching.
//!
//! Each stage writes into its own directory under the run directory. The
//! directory carries a `.key` file holding the hash of everything the stage
//! read (input file contents, parameters, code version); a later run with
//! the same key skips the stage and reuses the files untouched. Stages are
//! built in a hidden sibling and renamed into place, so an interrupted run
//! leaves the completed stages valid and resumes from the failed one.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use simile_core::distractor::{Confirmation, PendingProbe, ProbeItem, TranscriptEntry};
use simile_core::eval::{ExperimentReport, Outcome, Setting};
use simile_core::SimileRecord;
use simile_model::{finetune, KeVariant, Transformer};

use crate::config::{ExperimentConfig, Stage};
use crate::error::Precondition;
use crate::models::{load_model, resolve_model};
use crate::stages::{self, KbInput, MineInput};
use crate::store::{hash_path, read_json, read_jsonl, sha256_hex, write_atomic, write_json, write_jsonl};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const KEY_FILE: &str = ".key";

pub fn version_string() -> String {
    match option_env!("SIMILE_BUILD_REV") {
        Some(rev) => format!("simile-cli {VERSION} ({rev})"),
        None => format!("simile-cli {VERSION}"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRun {
    pub stage: String,
    pub key: String,
    pub cache_hit: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub stages: Vec<StageRun>,
}

impl RunSummary {
    pub fn all_cached(&self) -> bool {
        self.stages.iter().all(|s| s.cache_hit)
    }
}

/// Key over the stage name, code version, hashed inputs and parameters.
fn stage_key(stage: &str, inputs: &BTreeMap<String, String>, params: &Value) -> String {
    let doc = json!({ "stage": stage, "version": VERSION, "inputs": inputs, "params": params });
    sha256_hex(doc.to_string().as_bytes())
}

/// Runs `build` into `run_dir/name` unless that directory already holds the
/// output for `key`.
fn cached(
    run_dir: &Path,
    name: &str,
    key: String,
    summary: &mut RunSummary,
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<PathBuf> {
    let dir = run_dir.join(name);
    let hit = fs::read_to_string(dir.join(KEY_FILE)).is_ok_and(|k| k.trim() == key);
    if !hit {
        let tmp = run_dir.join(format!(".{}.partial", name.replace('/', "_")));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        build(&tmp).with_context(|| format!("stage {name} failed"))?;
        fs::create_dir_all(&tmp)?;
        fs::write(tmp.join(KEY_FILE), &key)?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&tmp, &dir)?;
    }
    summary.stages.push(StageRun {
        stage: name.to_string(),
        key,
        cache_hit: hit,
    });
    Ok(dir)
}

fn hashes(entries: &[(&str, Option<&Path>)]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, p) in entries {
        if let Some(p) = p {
            out.insert(k.to_string(), hash_path(p)?);
        }
    }
    Ok(out)
}

struct BaseModel {
    dir: PathBuf,
    hash: String,
}

fn base_model(cfg: &ExperimentConfig, slot: &mut Option<BaseModel>) -> Result<(PathBuf, String)> {
    if slot.is_none() {
        let dir = resolve_model(&cfg.model_name)?;
        let hash = hash_path(&dir)?;
        *slot = Some(BaseModel { dir, hash });
    }
    let b = slot.as_ref().unwrap();
    Ok((b.dir.clone(), b.hash.clone()))
}

fn finetuned_setting(cfg: &ExperimentConfig) -> Setting {
    match cfg.train_config(0).ke_variant {
        KeVariant::None => Setting::MlmFinetuned,
        _ => Setting::KeFinetuned,
    }
}

fn report_name(dataset: &str, setting: Setting) -> String {
    format!("{dataset}__{}.json", setting.to_string().replace(['(', ')'], "_"))
}

/// Executes the configured stages in order:
/// mine → distractors → confirm → build → finetune → eval → analyze.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let run_dir = cfg.output_dir.join(&cfg.name);
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let config_text = cfg.to_toml();
    write_atomic(&run_dir.join("config.toml"), config_text.as_bytes())?;
    write_json(
        &run_dir.join("run.json"),
        &json!({
            "version": version_string(),
            "seeds": cfg.seeds,
            "config_sha256": sha256_hex(config_text.as_bytes()),
        }),
    )?;
    let mut summary = RunSummary {
        run_dir: run_dir.clone(),
        ..RunSummary::default()
    };
    let mut base: Option<BaseModel> = None;
    let res = &cfg.resources;

    // mine
    let mut records_path: Option<PathBuf> = None;
    if cfg.wants(Stage::Mine) {
        if let Some(corpus) = &res.corpus {
            let inputs = hashes(&[
                ("corpus", Some(corpus)),
                ("lexicon", res.lexicon.as_deref()),
                ("parses", res.parses.as_deref()),
                ("synonyms", res.synonyms.as_deref()),
            ])?;
            let key = stage_key("mine", &inputs, &json!({ "pattern": cfg.pattern }));
            let dir = cached(&run_dir, "mine", key, &mut summary, |out| {
                let (records, s) = stages::mine(&MineInput {
                    corpus: corpus.clone(),
                    lexicon: res.lexicon.clone(),
                    parses: res.parses.clone(),
                    synonyms: res.synonyms.clone(),
                    mode: cfg.pattern,
                    source: None,
                    fallback: false,
                })?;
                write_jsonl(&out.join("records.jsonl"), &records)?;
                write_json(&out.join("summary.json"), &s)
            })?;
            records_path = Some(dir.join("records.jsonl"));
        }
    }
    let supervision = cfg.datasets.supervision.clone().or_else(|| records_path.clone());

    // distractors → confirm → build
    let kb = KbInput {
        relations: res.relations.clone(),
        antonyms: res.antonyms.clone(),
        generations: res.generations.clone(),
        cooccurrence: res.cooccurrence.clone(),
    };
    let has_kb = kb.relations.is_some() || kb.antonyms.is_some() || kb.generations.is_some() || kb.cooccurrence.is_some();
    let mut pending_path = None;
    if cfg.wants(Stage::Distractors) && has_kb {
        if let Some(rp) = &records_path {
            let (model_dir, model_hash) = base_model(cfg, &mut base)?;
            let mut inputs = hashes(&[
                ("records", Some(rp)),
                ("relations", kb.relations.as_deref()),
                ("antonyms", kb.antonyms.as_deref()),
                ("generations", kb.generations.as_deref()),
                ("cooccurrence", kb.cooccurrence.as_deref()),
            ])?;
            inputs.insert("model".into(), model_hash);
            let key = stage_key("distractors", &inputs, &json!({ "probe_seed": cfg.probe_seed }));
            let dir = cached(&run_dir, "distractors", key, &mut summary, |out| {
                let records: Vec<SimileRecord> = read_jsonl("records", rp)?;
                let knowledge = stages::load_knowledge(&kb)?;
                let model = Transformer::load(&model_dir)?;
                let (pending, failures) = stages::build_pending(&records, &knowledge, &model, cfg.probe_seed);
                write_jsonl(&out.join("pending.jsonl"), &pending)?;
                write_json(&out.join("failures.json"), &failures)
            })?;
            pending_path = Some(dir.join("pending.jsonl"));
        }
    }
    let mut built_path = None;
    if cfg.wants(Stage::Confirm) {
        if let Some(pp) = &pending_path {
            let judgments = res.judgments.as_ref().ok_or_else(|| {
                Precondition::new(
                    "resources.judgments",
                    "the confirm stage replays recorded judgments; collect them with `probe confirm`",
                )
            })?;
            let inputs = hashes(&[("pending", Some(pp)), ("judgments", Some(judgments))])?;
            let key = stage_key("confirm", &inputs, &json!({ "annotators": cfg.annotators }));
            let dir = cached(&run_dir, "confirm", key, &mut summary, |out| {
                let pending: Vec<PendingProbe> = read_jsonl("pending", pp)?;
                let mut session = stages::ReplaySession::load(judgments, cfg.annotators)?;
                let report = stages::confirm(pending, &mut session)?;
                write_jsonl(&out.join("outcomes.jsonl"), &report.outcomes)?;
                write_jsonl(&out.join("transcript.jsonl"), &report.transcript)
            })?;
            if cfg.wants(Stage::Build) {
                let inputs = hashes(&[("confirm", Some(&dir))])?;
                let key = stage_key("build", &inputs, &Value::Null);
                let bdir = cached(&run_dir, "build", key, &mut summary, |out| {
                    let outcomes: Vec<Confirmation> = read_jsonl("outcomes", &dir.join("outcomes.jsonl"))?;
                    let transcript: Vec<TranscriptEntry> = read_jsonl("transcript", &dir.join("transcript.jsonl"))?;
                    let (items, s) = stages::build_dataset(&outcomes, &transcript);
                    write_jsonl(&out.join("probes.jsonl"), &items)?;
                    write_json(&out.join("summary.json"), &s)
                })?;
                built_path = Some(bdir.join("probes.jsonl"));
            }
        }
    }

    // finetune: one checkpoint per seed under runs/<name>/<seed>/
    let mut checkpoints: Vec<(u64, PathBuf)> = Vec::new();
    if cfg.wants(Stage::Finetune) {
        if let Some(sp) = &supervision {
            let (model_dir, model_hash) = base_model(cfg, &mut base)?;
            for &seed in &cfg.seeds {
                let tc = cfg.train_config(seed);
                let mut inputs = hashes(&[("supervision", Some(sp))])?;
                inputs.insert("model".into(), model_hash.clone());
                let key = stage_key("finetune", &inputs, &serde_json::to_value(&tc)?);
                let dir = cached(&run_dir, &seed.to_string(), key, &mut summary, |out| {
                    let records: Vec<SimileRecord> = read_jsonl("datasets.supervision", sp)?;
                    let model = Transformer::load(&model_dir)?;
                    finetune(&model, &records, &tc, Some(out))?;
                    write_json(&out.join("train_config.json"), &tc)
                })?;
                checkpoints.push((seed, dir));
            }
        }
    }

    // eval
    let mut datasets: Vec<(&str, PathBuf)> = Vec::new();
    if let Some(p) = &cfg.datasets.general_corpus {
        datasets.push(("general_corpus", p.clone()));
    }
    if let Some(p) = &cfg.datasets.quizzes {
        datasets.push(("quizzes", p.clone()));
    }
    if let Some(p) = &built_path {
        datasets.push(("built", p.clone()));
    }
    let mut eval_dir = None;
    if cfg.wants(Stage::Eval) && !datasets.is_empty() {
        let (model_dir, model_hash) = base_model(cfg, &mut base)?;
        let mut inputs = BTreeMap::new();
        for (name, p) in &datasets {
            inputs.insert(format!("dataset:{name}"), hash_path(p)?);
        }
        inputs.insert("model".into(), model_hash);
        for (seed, dir) in &checkpoints {
            inputs.insert(format!("checkpoint:{seed}"), hash_path(dir)?);
        }
        let key = stage_key("eval", &inputs, &json!({ "seeds": cfg.seeds }));
        let setting = finetuned_setting(cfg);
        let dir = cached(&run_dir, "eval", key, &mut summary, |out| {
            let base_model = load_model(&model_dir.to_string_lossy())?.named(&cfg.model_name);
            let tuned: Vec<(u64, Transformer)> = checkpoints
                .iter()
                .map(|(s, d)| Ok((*s, Transformer::load(d)?.named(&format!("{}-{}", cfg.name, s)))))
                .collect::<Result<_>>()?;
            let mut reports = Vec::new();
            for (name, path) in &datasets {
                let items = stages::load_items(&format!("datasets.{name}"), path)?;
                let zs = stages::eval_model(&base_model, name, &items, Setting::ZeroShot, &cfg.seeds, cfg.workers)?;
                write_json(&out.join(report_name(name, Setting::ZeroShot)), &zs)?;
                reports.push(zs);
                if !tuned.is_empty() {
                    let mut merged: Option<ExperimentReport> = None;
                    for (seed, m) in &tuned {
                        let r = stages::eval_model(m, name, &items, setting, &[*seed], cfg.workers)?;
                        merged = Some(match merged {
                            Some(prev) => prev.merge(r),
                            None => r,
                        });
                    }
                    let mut r = merged.expect("at least one checkpoint");
                    r.model_name = cfg.name.clone();
                    write_json(&out.join(report_name(name, setting)), &r)?;
                    reports.push(r);
                }
            }
            write_atomic(&out.join("results.csv"), stages::results_csv(&reports)?.as_bytes())
        })?;
        fs::copy(dir.join("results.csv"), run_dir.join("results.csv"))?;
        eval_dir = Some(dir);
    }

    // analyze
    if cfg.wants(Stage::Analyze) {
        if let Some(sp) = &supervision {
            let (model_dir, model_hash) = base_model(cfg, &mut base)?;
            let mut inputs = hashes(&[("supervision", Some(sp)), ("eval", eval_dir.as_deref())])?;
            inputs.insert("model".into(), model_hash);
            for (seed, dir) in &checkpoints {
                inputs.insert(format!("checkpoint:{seed}"), hash_path(dir)?);
            }
            let key = stage_key("analyze", &inputs, &Value::Null);
            cached(&run_dir, "analyze", key, &mut summary, |out| {
                let records: Vec<SimileRecord> = read_jsonl("datasets.supervision", sp)?;
                let mut outcomes: BTreeMap<String, Vec<Outcome>> = BTreeMap::new();
                if let Some(ed) = &eval_dir {
                    let mut files: Vec<PathBuf> = fs::read_dir(ed)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x == "json"))
                        .collect();
                    files.sort();
                    for f in files {
                        let r: ExperimentReport = read_json("eval", &f)?;
                        outcomes.entry(r.model_name.clone()).or_default().extend(r.outcomes);
                    }
                }
                let base_model = Transformer::load(&model_dir)?.named(&cfg.model_name);
                let mut all = vec![stages::analyze(
                    &base_model,
                    &records,
                    outcomes.get(&cfg.model_name).map(Vec::as_slice),
                )?];
                for (seed, dir) in &checkpoints {
                    let m = Transformer::load(dir)?.named(&format!("{}-{}", cfg.name, seed));
                    let mut a = stages::analyze(&m, &records, None)?;
                    if let Some(o) = outcomes.get(&cfg.name) {
                        let mine: Vec<Outcome> = o.iter().filter(|x| x.seed == *seed).cloned().collect();
                        a.categories = Some(simile_core::analysis::category_breakdown(&mine));
                    }
                    all.push(a);
                }
                write_json(&out.join("analysis.json"), &all)
            })?;
        }
    }

    Ok(summary)
}

/// Items of a built or imported set, for callers that only need items.
pub fn read_items(path: &Path) -> Result<Vec<ProbeItem>> {
    stages::load_items("dataset", path)
}
