use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use simile_cli::config::{ExperimentConfig, Objective};
use simile_cli::error::{exit_code, Precondition};
use simile_cli::models::load_model;
use simile_cli::pipeline::{run_pipeline, version_string};
use simile_cli::stages::{self, KbInput, MineInput, ReplaySession};
use simile_cli::store::{read_jsonl, write_json, write_jsonl};
use simile_cli::import::{expected_count, import_released_dataset};
use simile_core::analysis::pca_coords;
use simile_core::distractor::{Confirmation, PendingProbe, PromptSession, TranscriptEntry};
use simile_core::eval::{
    baseline_report, conscore_baseline, emb_baseline, evaluate_seeded, human_quiz, Component, PromptQuiz, RandomScorer,
    Setting,
};
use simile_core::lm::TextEmbeddings;
use simile_core::mining::PatternMode;
use simile_core::sentiment::prepare_reviews;
use simile_core::SimileRecord;
use simile_model::head::{probe_sentiment, HeadConfig};
use simile_model::{finetune, KeVariant};

#[derive(Parser)]
#[command(name = "probe", version, about = "Probe and fine-tune language models on simile properties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pattern {
    Strict,
    Loose,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    ZeroShot,
    MlmFinetuned,
    KeFinetuned,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Random,
    Emb,
    Conscore,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Mlm,
    Ours,
}

#[derive(Subcommand)]
enum Command {
    /// Extract simile records from raw sentences.
    Mine {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Dependency parses in CoNLL-U; without them a heuristic parser is used.
        #[arg(long)]
        parses: Option<PathBuf>,
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "strict")]
        pattern: Pattern,
        /// Guess tags for words missing from the lexicon.
        #[arg(long)]
        fallback: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate and rank distractors, producing unconfirmed probe items.
    Distractors {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        relations: Option<PathBuf>,
        #[arg(long)]
        antonyms: Option<PathBuf>,
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long)]
        cooccurrence: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect annotator judgments on distractors, interactively or by replay.
    Confirm {
        #[arg(long)]
        pending: PathBuf,
        #[arg(long, default_value_t = 3)]
        annotators: usize,
        /// Recorded judgments to replay instead of prompting.
        #[arg(long)]
        judgments: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Assemble confirmed items into a probe dataset.
    Build {
        #[arg(long)]
        confirm_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a model on annotated records.
    Finetune {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "ours")]
        objective: ObjectiveArg,
        #[arg(long, default_value = "transe")]
        ke_variant: String,
        #[arg(long, default_value_t = 5.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
    },
    /// Score a probe dataset with a model or a baseline.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, required_unless_present = "baseline")]
        model: Option<String>,
        #[arg(long, value_enum, conflicts_with = "model")]
        baseline: Option<Baseline>,
        /// Word vectors in text format, for the emb and conscore baselines.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "zero-shot")]
        setting: SettingArg,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
        /// Append rows to this CSV as well.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Mask one component at a time and compare with the unablated run.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, value_delimiter = ',', default_value = "topic,vehicle,event,comparator,random")]
        components: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a sentiment head on frozen sentence features.
    Sentiment {
        /// Reviews as CSV (text,rating) or JSON lines.
        #[arg(long)]
        reviews: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Component distances, category accuracy and PCA coordinates.
    Analyze {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        model: String,
        /// Evaluation reports whose outcomes feed the category breakdown.
        #[arg(long)]
        reports: Vec<PathBuf>,
        /// Words to project onto two principal components.
        #[arg(long, value_delimiter = ',')]
        pca: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Administer a probe dataset to human annotators.
    Quiz {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 3)]
        annotators: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a released probe file into native JSON lines.
    Import {
        #[arg(long)]
        input: PathBuf,
        /// Expected item count; guessed from the file name when omitted.
        #[arg(long)]
        expected: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured stages with caching.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the version used in cache keys.
    Version,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(p) = e.chain().find_map(|c| c.downcast_ref::<Precondition>()) {
                eprintln!("error: invalid input '{}': {}", p.key, p.message);
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Mine {
            corpus,
            lexicon,
            parses,
            synonyms,
            pattern,
            fallback,
            out,
        } => {
            let mode = match pattern {
                Pattern::Strict => PatternMode::Strict,
                Pattern::Loose => PatternMode::Loose,
            };
            let (records, summary) = stages::mine(&MineInput {
                corpus,
                lexicon,
                parses,
                synonyms,
                mode,
                source: None,
                fallback,
            })?;
            write_jsonl(&out, &records)?;
            eprintln!(
                "{} similes extracted, {} kept, {} flagged, {} lines untaggable",
                summary.extracted, summary.kept, summary.flagged, summary.untaggable_lines
            );
            write_json(&out.with_extension("summary.json"), &summary)
        }
        Command::Distractors {
            records,
            model,
            relations,
            antonyms,
            generations,
            cooccurrence,
            seed,
            out,
        } => {
            let records: Vec<SimileRecord> = read_jsonl("records", &records)?;
            let kb = stages::load_knowledge(&KbInput {
                relations,
                antonyms,
                generations,
                cooccurrence,
            })?;
            let model = load_model(&model)?;
            let (pending, failures) = stages::build_pending(&records, &kb, &model, seed);
            eprintln!("{} items, {} records without enough distractors", pending.len(), failures.len());
            write_jsonl(&out, &pending)?;
            write_json(&out.with_extension("failures.json"), &failures)
        }
        Command::Confirm {
            pending,
            annotators,
            judgments,
            out_dir,
        } => {
            let pending: Vec<PendingProbe> = read_jsonl("pending", &pending)?;
            let report = match judgments {
                Some(j) => stages::confirm(pending, &mut ReplaySession::load(&j, annotators)?)?,
                None => {
                    let stdin = io::stdin();
                    let mut session = PromptSession::new(stdin.lock(), io::stderr(), annotators);
                    stages::confirm(pending, &mut session)?
                }
            };
            std::fs::create_dir_all(&out_dir)?;
            write_jsonl(&out_dir.join("outcomes.jsonl"), &report.outcomes)?;
            write_jsonl(&out_dir.join("transcript.jsonl"), &report.transcript)
        }
        Command::Build { confirm_dir, out } => {
            let outcomes: Vec<Confirmation> = read_jsonl("confirm_dir", &confirm_dir.join("outcomes.jsonl"))?;
            let transcript: Vec<TranscriptEntry> = read_jsonl("confirm_dir", &confirm_dir.join("transcript.jsonl"))?;
            let (items, summary) = stages::build_dataset(&outcomes, &transcript);
            match summary.kappa {
                Some(k) => eprintln!("{} items, {} excluded, kappa {k:.3}", summary.items, summary.excluded.len()),
                None => eprintln!("{} items, {} excluded", summary.items, summary.excluded.len()),
            }
            write_jsonl(&out, &items)?;
            write_json(&out.with_extension("summary.json"), &summary)
        }
        Command::Finetune {
            records,
            model,
            out_dir,
            objective,
            ke_variant,
            alpha,
            seed,
            learning_rate,
            epochs,
            batch_size,
            max_len,
        } => {
            let variant = KeVariant::parse(&ke_variant)
                .ok_or_else(|| Precondition::new("ke_variant", format!("unknown variant '{ke_variant}'")))?;
            let mut cfg = ExperimentConfig::new("finetune", &model);
            cfg.objective = match objective {
                ObjectiveArg::Mlm => Objective::Mlm,
                ObjectiveArg::Ours => Objective::Ours,
            };
            cfg.ke_variant = variant;
            cfg.alpha = alpha;
            cfg.learning_rate = learning_rate;
            cfg.epochs = epochs;
            cfg.batch_size = batch_size;
            cfg.max_len = max_len;
            let tc = cfg.train_config(seed);
            tc.validate().map_err(|e| Precondition::new("training", e.to_string()))?;
            let records: Vec<SimileRecord> = read_jsonl("records", &records)?;
            let model = load_model(&model)?;
            let log = finetune(&model, &records, &tc, Some(&out_dir))?;
            if !log.skipped.is_empty() {
                eprintln!("{} records skipped (see skipped.json)", log.skipped.len());
            }
            if let Some(last) = log.epoch_loss.last() {
                eprintln!("final epoch loss {last:.4}");
            }
            Ok(())
        }
        Command::Eval {
            dataset,
            model,
            baseline,
            embeddings,
            setting,
            seeds,
            workers,
            out,
            results,
        } => {
            let name = dataset_name(&dataset);
            let items = stages::load_items("dataset", &dataset)?;
            let report = match (baseline, model) {
                (Some(Baseline::Random), _) => {
                    evaluate_seeded(&name, &items, Setting::Baseline, &seeds, workers, |seed| Ok(RandomScorer { seed }))?
                }
                (Some(b), _) => {
                    let path = embeddings
                        .ok_or_else(|| Precondition::new("embeddings", "the emb and conscore baselines need word vectors"))?;
                    let table = TextEmbeddings::load(simile_cli::store::open("embeddings", &path)?)?;
                    match b {
                        Baseline::Emb => baseline_report("emb", &name, &items, |it| emb_baseline(it, &table)),
                        _ => baseline_report("conscore", &name, &items, |it| conscore_baseline(it, &table)),
                    }
                }
                (None, Some(m)) => {
                    let model = load_model(&m)?;
                    let setting = match setting {
                        SettingArg::ZeroShot => Setting::ZeroShot,
                        SettingArg::MlmFinetuned => Setting::MlmFinetuned,
                        SettingArg::KeFinetuned => Setting::KeFinetuned,
                    };
                    stages::eval_model(&model, &name, &items, setting, &seeds, workers)?
                }
                (None, None) => bail!("either --model or --baseline is required"),
            };
            eprintln!("{} {}: {:.2}% over {} items", report.model_name, report.setting, report.mean_accuracy * 100.0, items.len());
            if report.skipped > 0 {
                eprintln!("{} items skipped as unscorable", report.skipped);
            }
            write_json(&out, &report)?;
            if let Some(csv) = results {
                stages::append_results(&csv, &report)?;
            }
            Ok(())
        }
        Command::Ablate {
            dataset,
            model,
            components,
            seeds,
            workers,
            out,
        } => {
            let components: Vec<Component> = components
                .iter()
                .map(|c| Component::parse(c).ok_or_else(|| Precondition::new("components", format!("unknown component '{c}'"))))
                .collect::<Result<_, _>>()?;
            let items = stages::load_items("dataset", &dataset)?;
            let model = load_model(&model)?;
            let rows = stages::ablation_study(&model, &dataset_name(&dataset), &items, &components, &seeds, workers)?;
            for r in &rows {
                eprintln!(
                    "{:<10} {:6.2}% (change {:+.2}, {} items lacking the component)",
                    r.component.as_str(),
                    r.report.mean_accuracy * 100.0,
                    r.drop * 100.0,
                    r.missing
                );
            }
            write_json(&out, &rows)
        }
        Command::Sentiment {
            reviews,
            model,
            seed,
            epochs,
            out,
        } => {
            let raw = stages::read_reviews(&reviews)?;
            let examples = prepare_reviews(&raw, seed)?;
            let model = load_model(&model)?;
            let cfg = HeadConfig {
                epochs,
                seed,
                ..HeadConfig::default()
            };
            let report = probe_sentiment(&model, &examples, &cfg)?;
            eprintln!(
                "lr {} epoch {}: dev {:.2}% test {:.2}%",
                report.selected.learning_rate,
                report.selected.best_epoch,
                report.selected.dev_accuracy * 100.0,
                report.selected.test_accuracy * 100.0
            );
            write_json(&out, &report)
        }
        Command::Analyze {
            records,
            model,
            reports,
            pca,
            out,
        } => {
            let records: Vec<SimileRecord> = read_jsonl("records", &records)?;
            let model = load_model(&model)?;
            let mut outcomes = Vec::new();
            for r in &reports {
                let rep: simile_core::eval::ExperimentReport = simile_cli::store::read_json("reports", r)?;
                outcomes.extend(rep.outcomes);
            }
            let analysis = stages::analyze(&model, &records, (!reports.is_empty()).then_some(outcomes.as_slice()))?;
            let pca = if pca.is_empty() { None } else { Some(pca_coords(&pca, &model)?) };
            write_json(&out, &serde_json::json!({ "analysis": analysis, "pca": pca }))
        }
        Command::Quiz {
            dataset,
            annotators,
            seed,
            transcript,
            out,
        } => {
            let items = stages::load_items("dataset", &dataset)?;
            let stdin = io::stdin();
            let mut session = PromptQuiz::new(stdin.lock(), io::stderr());
            let mut entries = Vec::new();
            let result = human_quiz(&dataset_name(&dataset), &items, annotators, seed, &mut session, &mut entries);
            write_jsonl(&transcript, &entries)?;
            let report = result?;
            eprintln!("human accuracy {:.2}%", report.mean_accuracy * 100.0);
            write_json(&out, &report)
        }
        Command::Import { input, expected, out } => {
            let expected = expected.or_else(|| expected_count(&input));
            let (items, report) = import_released_dataset(&input, expected)?;
            eprintln!("{report}");
            write_jsonl(&out, &items)?;
            if report.count_matches() {
                Ok(())
            } else {
                Err(Precondition::new("input", format!("item count mismatch: {report}")).into())
            }
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run_pipeline(&cfg)?;
            for s in &summary.stages {
                eprintln!("{:<12} {}", s.stage, if s.cache_hit { "cached" } else { "done" });
            }
            eprintln!("outputs in {}", summary.run_dir.display());
            Ok(())
        }
        Command::Version => {
            println!("{}", version_string());
            Ok(())
        }
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}
