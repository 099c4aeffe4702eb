use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use candle_core::DType;
use simile_cli::config::{ExperimentConfig, Stage};
use simile_cli::pipeline::run_pipeline;
use simile_cli::store::read_jsonl;
use simile_core::distractor::PendingProbe;
use simile_model::tokenizer::WordPiece;
use simile_model::{ModelConfig, Tokenizer, Transformer};

const TOPICS: &[&str] = &["man", "boy", "girl", "dog", "car"];
const PAIRS: &[(&str, &str)] = &[("slow", "snail"), ("fast", "deer"), ("busy", "bee"), ("quiet", "mouse"), ("cold", "ice")];
const EXTRA_ADJ: &[&str] = &["hot", "loud", "lazy", "warm", "dull"];

fn vocab() -> Vec<&'static str> {
    let mut v = vec!["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "is", "as", "a", "the", "."];
    v.extend(TOPICS);
    v.extend(EXTRA_ADJ);
    for (p, veh) in PAIRS {
        v.push(p);
        v.push(veh);
    }
    v.sort();
    v.dedup();
    v
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let words = vocab();
        let tok = Tokenizer::WordPiece(WordPiece::from_tokens(&words).unwrap());
        let model = Transformer::random(ModelConfig::tiny(words.len(), 16, 2, 2), tok, DType::F32, 7).unwrap();
        model.save(&root.join("model")).unwrap();

        let mut corpus = String::new();
        for (i, t) in TOPICS.iter().enumerate() {
            for (j, (p, v)) in PAIRS.iter().enumerate() {
                if (i + j) % 2 == 0 {
                    corpus.push_str(&format!("the {t} is as {p} as a {v} .\n"));
                }
            }
        }
        corpus.push_str("this line has no simile .\n");
        fs::write(root.join("corpus.txt"), corpus).unwrap();

        let mut lex = String::from("is\tVERB\nas\tADP\na\tDET\nthe\tDET\n.\tPUNCT\nline\tNOUN\nhas\tVERB\nno\tDET\nsimile\tNOUN\nthis\tDET\n");
        for t in TOPICS {
            lex.push_str(&format!("{t}\tNOUN\n"));
        }
        for (p, v) in PAIRS {
            lex.push_str(&format!("{p}\tADJ\n{v}\tNOUN\n"));
        }
        fs::write(root.join("lexicon.tsv"), lex).unwrap();

        let mut cooc = String::new();
        for (_, v) in PAIRS {
            for a in EXTRA_ADJ.iter().chain(PAIRS.iter().map(|(p, _)| p)) {
                cooc.push_str(&format!("{v}\t{a}\t3\n"));
            }
        }
        fs::write(root.join("cooc.tsv"), cooc).unwrap();
        Fixture { _dir: dir, root }
    }

    fn config(&self, stages: &[Stage]) -> ExperimentConfig {
        let mut c = ExperimentConfig::new("toy", &self.root.join("model").to_string_lossy());
        c.resources.corpus = Some(self.root.join("corpus.txt"));
        c.resources.lexicon = Some(self.root.join("lexicon.tsv"));
        c.resources.cooccurrence = Some(self.root.join("cooc.tsv"));
        c.seeds = vec![0, 1];
        c.epochs = 1;
        c.batch_size = 4;
        c.learning_rate = 1e-3;
        c.output_dir = self.root.join("runs");
        c.stages = stages.to_vec();
        c
    }

    /// Every annotator accepts every distractor and reserve candidate.
    fn write_judgments(&self, pending: &Path) -> PathBuf {
        let pending: Vec<PendingProbe> = read_jsonl("pending", pending).unwrap();
        let mut out = String::new();
        for p in &pending {
            let gold = &p.item.options[p.item.answer_index];
            let words = p.item.options.iter().filter(|o| *o != gold).cloned().chain(p.reserve.iter().map(|c| c.word.clone()));
            for w in words {
                for a in 0..3 {
                    out.push_str(&format!("{}\t{w}\t{a}\ty\n", p.item.record_id));
                }
            }
        }
        let path = self.root.join("judgments.tsv");
        fs::write(&path, out).unwrap();
        path
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_run_caches_and_reproduces() {
    let fx = Fixture::new();
    let first = run_pipeline(&fx.config(&[Stage::Mine, Stage::Distractors])).unwrap();
    assert!(!first.all_cached());
    let run = first.run_dir.clone();
    let pending = run.join("distractors/pending.jsonl");
    let items: Vec<PendingProbe> = read_jsonl("pending", &pending).unwrap();
    assert!(!items.is_empty());
    let judgments = fx.write_judgments(&pending);

    let mut cfg = fx.config(&[]);
    cfg.resources.judgments = Some(judgments);
    let full = run_pipeline(&cfg).unwrap();
    let hit: BTreeMap<&str, bool> = full.stages.iter().map(|s| (s.stage.as_str(), s.cache_hit)).collect();
    assert!(hit["mine"] && hit["distractors"]);
    assert!(!hit["confirm"] && !hit["build"] && !hit["0"] && !hit["1"] && !hit["eval"] && !hit["analyze"]);
    for seed in ["0", "1"] {
        assert!(run.join(seed).join("model.safetensors").exists() || run.join(seed).join("config.json").exists());
        assert!(run.join(seed).join("train_log.csv").exists());
    }
    let results = fs::read_to_string(run.join("results.csv")).unwrap();
    assert!(results.contains("zero_shot"));
    assert!(results.contains("ke_finetuned"));
    assert!(run.join("analyze/analysis.json").exists());

    let before = snapshot(&run);
    let again = run_pipeline(&cfg).unwrap();
    assert!(again.all_cached(), "{:?}", again.stages);
    let after = snapshot(&run);
    let differing: Vec<_> = after.keys().filter(|k| before.get(*k) != after.get(*k)).collect();
    assert!(differing.is_empty() && after.len() == before.len(), "changed on rerun: {differing:?}");

    cfg.epochs = 2;
    let changed = run_pipeline(&cfg).unwrap();
    let hit: BTreeMap<&str, bool> = changed.stages.iter().map(|s| (s.stage.as_str(), s.cache_hit)).collect();
    assert!(hit["mine"] && hit["build"]);
    assert!(!hit["0"] && !hit["eval"]);
}

#[test]
fn eval_only_config_reports_zero_shot() {
    let fx = Fixture::new();
    let first = run_pipeline(&fx.config(&[Stage::Mine, Stage::Distractors])).unwrap();
    let pending: Vec<PendingProbe> = read_jsonl("pending", &first.run_dir.join("distractors/pending.jsonl")).unwrap();
    let items: Vec<_> = pending.into_iter().map(|p| p.item).collect();
    let quizzes = fx.root.join("quizzes.jsonl");
    simile_cli::store::write_jsonl(&quizzes, &items).unwrap();

    let mut cfg = ExperimentConfig::new("zs", &fx.root.join("model").to_string_lossy());
    cfg.datasets.quizzes = Some(quizzes);
    cfg.output_dir = fx.root.join("runs");
    cfg.stages = vec![Stage::Eval];
    let s = run_pipeline(&cfg).unwrap();
    assert_eq!(s.stages.len(), 1);
    let report: simile_core::eval::ExperimentReport =
        simile_cli::store::read_json("report", &s.run_dir.join("eval/quizzes__zero_shot.json")).unwrap();
    assert_eq!(report.outcomes.len() + report.skipped * 3, items.len() * 3);
    // a zero-shot model does not depend on the seed
    let accs: Vec<f64> = report.per_seed.values().copied().collect();
    assert!(accs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn confirm_without_judgments_is_a_precondition() {
    let fx = Fixture::new();
    let err = run_pipeline(&fx.config(&[Stage::Mine, Stage::Distractors, Stage::Confirm])).unwrap_err();
    assert_eq!(simile_cli::exit_code(&err), simile_cli::EXIT_PRECONDITION);
    assert!(err.to_string().contains("resources.judgments"), "{err}");
    // the completed stages stay cached for the next attempt
    let s = run_pipeline(&fx.config(&[Stage::Mine, Stage::Distractors])).unwrap();
    assert!(s.all_cached());
}

#[test]
fn binary_exits_2_naming_the_bad_key() {
    let fx = Fixture::new();
    let cfg_path = fx.root.join("bad.toml");
    let mut cfg = fx.config(&[Stage::Eval]);
    cfg.datasets.general_corpus = Some(fx.root.join("missing/general_corpus.json"));
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_probe"))
        .args(["run", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("datasets.general_corpus"), "{stderr}");

    let out = Command::new(env!("CARGO_BIN_EXE_probe"))
        .args(["eval", "--dataset"])
        .arg(fx.root.join("nope.jsonl"))
        .args(["--baseline", "random", "--out"])
        .arg(fx.root.join("r.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn binary_random_baseline_writes_a_report() {
    let fx = Fixture::new();
    let first = run_pipeline(&fx.config(&[Stage::Mine, Stage::Distractors])).unwrap();
    let pending: Vec<PendingProbe> = read_jsonl("pending", &first.run_dir.join("distractors/pending.jsonl")).unwrap();
    let items: Vec<_> = pending.into_iter().map(|p| p.item).collect();
    let ds = fx.root.join("quizzes.jsonl");
    simile_cli::store::write_jsonl(&ds, &items).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_probe"))
        .args(["eval", "--baseline", "random", "--seeds", "0,1", "--dataset"])
        .arg(&ds)
        .arg("--out")
        .arg(fx.root.join("r.json"))
        .arg("--results")
        .arg(fx.root.join("results.csv"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(fx.root.join("results.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
}
