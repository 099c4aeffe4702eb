//! The pipeline steps, shared by the subcommands and `run`.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use simile_core::analysis::{category_breakdown, component_distances, CategoryBreakdown, DistanceSummary};
use simile_core::distractor::{
    build_probe, confirm_distractors, fleiss_kappa, generate_candidates, retain_single_token, select_distractors,
    AnnotationSession, Confirmation, ConfirmationReport, Judgment, LmFeatures, PendingProbe, ProbeItem, TranscriptEntry,
};
use simile_core::eval::{ablate, evaluate_seeded, Component, ExperimentReport, LmScorer, Outcome, Setting};
use simile_core::kb::{CooccurrenceIndex, GenerationCache, RelationStore};
use simile_core::lm::MaskedLm;
use simile_core::mining::{
    annotate_components, dataset_stats, extract_similes, normalize_property, ConlluParser, DatasetStats, DropReason,
    HeuristicParser, LexiconTagger, PatternMode, SynonymTable,
};
use simile_core::{SessionError, SimileRecord, Source};

use crate::error::Precondition;
use crate::store::{open, require_path};

// ---- mine -------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct MineInput {
    pub corpus: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub parses: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    pub mode: PatternMode,
    pub source: Option<Source>,
    /// Tag unknown words by suffix instead of skipping the line.
    pub fallback: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MineSummary {
    pub extracted: usize,
    pub kept: usize,
    pub flagged: usize,
    pub untaggable_lines: usize,
    pub dropped: Vec<DropReason>,
    pub stats: DatasetStats,
}

pub fn mine(input: &MineInput) -> Result<(Vec<SimileRecord>, MineSummary)> {
    let mut tagger = LexiconTagger::new().with_fallback(input.fallback);
    if let Some(p) = &input.lexicon {
        tagger = tagger.load_tsv(open("lexicon", p)?)?;
    }
    let source = input.source.unwrap_or(match input.mode {
        PatternMode::Strict => Source::GeneralCorpus,
        PatternMode::Loose => Source::Supervision,
    });
    let lines: Vec<String> = open("corpus", &input.corpus)?.lines().collect::<std::io::Result<_>>()?;
    let ex = extract_similes(&lines, &tagger, input.mode, source);
    let parses = match &input.parses {
        Some(p) => Some(ConlluParser::load(open("parses", p)?)?),
        None => None,
    };
    let heuristic = HeuristicParser::new(tagger.clone());
    let synonyms = match &input.synonyms {
        Some(p) => SynonymTable::load_tsv(open("synonyms", p)?)?,
        None => SynonymTable::new(),
    };
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    let mut flagged = 0;
    for r in &ex.records {
        let a = match &parses {
            Some(p) => {
                let a = annotate_components(r, p);
                if a.flagged {
                    annotate_components(r, &heuristic)
                } else {
                    a
                }
            }
            None => annotate_components(r, &heuristic),
        };
        flagged += a.flagged as usize;
        match normalize_property(&a.record, &synonyms) {
            Ok(rec) => records.push(rec),
            Err(d) => dropped.push(d),
        }
    }
    let summary = MineSummary {
        extracted: ex.records.len(),
        kept: records.len(),
        flagged,
        untaggable_lines: ex.untaggable,
        dropped,
        stats: dataset_stats(&records),
    };
    Ok((records, summary))
}

// ---- distractors ------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct KbInput {
    pub relations: Option<PathBuf>,
    pub antonyms: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub cooccurrence: Option<PathBuf>,
}

pub struct Knowledge {
    pub relations: RelationStore,
    pub generations: GenerationCache,
    pub cooccurrence: CooccurrenceIndex,
}

pub fn load_knowledge(input: &KbInput) -> Result<Knowledge> {
    if input.relations.is_none() && input.antonyms.is_none() && input.generations.is_none() && input.cooccurrence.is_none() {
        return Err(Precondition::new("relations", "no knowledge source given").into());
    }
    let mut relations = RelationStore::new();
    if let Some(p) = &input.relations {
        relations = relations.load(open("relations", p)?)?;
    }
    if let Some(p) = &input.antonyms {
        relations = relations.load_antonym_pairs(open("antonyms", p)?)?;
    }
    let generations = match &input.generations {
        Some(p) => GenerationCache::load(open("generations", p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => GenerationCache::default(),
    };
    let cooccurrence = match &input.cooccurrence {
        Some(p) if p.extension().is_some_and(|e| e == "conllu") => {
            let mut idx = CooccurrenceIndex::new();
            idx.accumulate_conllu(open("cooccurrence", p)?)?;
            idx
        }
        Some(p) => CooccurrenceIndex::load_tsv(open("cooccurrence", p)?)?,
        None => CooccurrenceIndex::new(),
    };
    Ok(Knowledge {
        relations,
        generations,
        cooccurrence,
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Failure {
    pub record_id: String,
    pub reason: String,
}

/// Per-record option seed: the run seed mixed with the record id.
pub fn item_seed(seed: u64, record_id: &str) -> u64 {
    let id = u64::from_str_radix(record_id.get(..16).unwrap_or(record_id), 16).unwrap_or(0);
    seed ^ id
}

/// Candidate generation, single-token filtering, ranking and probe
/// construction for each record. Records that cannot yield an item are
/// listed with the reason.
pub fn build_pending(
    records: &[SimileRecord],
    kb: &Knowledge,
    model: &dyn MaskedLm,
    seed: u64,
) -> (Vec<PendingProbe>, Vec<Failure>) {
    let encoder = LmFeatures { model };
    let mut pending = Vec::new();
    let mut failures = Vec::new();
    for r in records {
        let attempt = || -> Result<PendingProbe, String> {
            let cands = generate_candidates(r, &kb.relations, &kb.generations, &kb.cooccurrence);
            let cands = retain_single_token(cands, model);
            let sel = select_distractors(r, &cands, &encoder).map_err(|e| e.to_string())?;
            let item = build_probe(r, &sel.chosen, item_seed(seed, &r.id())).map_err(|e| e.to_string())?;
            Ok(PendingProbe {
                item,
                reserve: sel.reserve,
            })
        };
        match attempt() {
            Ok(p) => pending.push(p),
            Err(reason) => failures.push(Failure {
                record_id: r.id(),
                reason,
            }),
        }
    }
    (pending, failures)
}

// ---- confirm ----------------------------------------------------------

/// Replays recorded judgments: TSV rows `record_id  distractor  annotator  y|n|u`
/// or transcript JSON lines.
pub struct ReplaySession {
    annotators: usize,
    judgments: HashMap<(String, String, usize), Judgment>,
}

impl ReplaySession {
    pub fn new(annotators: usize) -> Self {
        ReplaySession {
            annotators,
            judgments: HashMap::new(),
        }
    }

    pub fn insert(&mut self, record_id: &str, distractor: &str, annotator: usize, judgment: Judgment) {
        self.judgments
            .insert((record_id.to_string(), distractor.to_lowercase(), annotator), judgment);
    }

    pub fn load(path: &Path, annotators: usize) -> Result<Self> {
        let mut s = ReplaySession::new(annotators);
        for (i, line) in open("judgments", path)?.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if t.starts_with('{') {
                let e: TranscriptEntry = serde_json::from_str(t).with_context(|| format!("{}:{}", path.display(), i + 1))?;
                s.insert(&e.record_id, &e.distractor, e.annotator, e.judgment);
                continue;
            }
            let cols: Vec<&str> = t.split('\t').collect();
            let parsed = (cols.len() == 4)
                .then(|| Some((cols[2].trim().parse::<usize>().ok()?, Judgment::parse(cols[3])?)))
                .flatten();
            let Some((annotator, judgment)) = parsed else {
                bail!("{}:{}: expected record_id, distractor, annotator, y/n/u", path.display(), i + 1);
            };
            s.insert(cols[0].trim(), cols[1].trim(), annotator, judgment);
        }
        Ok(s)
    }
}

impl AnnotationSession for ReplaySession {
    fn annotators(&self) -> usize {
        self.annotators
    }

    fn judge(&mut self, annotator: usize, item: &ProbeItem, distractor: &str) -> Result<Judgment, SessionError> {
        self.judgments
            .get(&(item.record_id.clone(), distractor.to_lowercase(), annotator))
            .copied()
            .ok_or_else(|| SessionError::MissingJudgment {
                record: item.record_id.clone(),
                distractor: distractor.to_string(),
                annotator,
            })
    }
}

pub fn confirm(pending: Vec<PendingProbe>, session: &mut dyn AnnotationSession) -> Result<ConfirmationReport> {
    Ok(confirm_distractors(pending, session)?)
}

// ---- build ------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BuildSummary {
    pub items: usize,
    pub excluded: Vec<Failure>,
    /// Agreement over distractors judged by every annotator.
    pub kappa: Option<f64>,
    pub origins: BTreeMap<String, usize>,
}

pub fn build_dataset(outcomes: &[Confirmation], transcript: &[TranscriptEntry]) -> (Vec<ProbeItem>, BuildSummary) {
    let mut items = Vec::new();
    let mut summary = BuildSummary::default();
    for o in outcomes {
        match o {
            Confirmation::Accepted { item } => {
                for origin in &item.origins {
                    let key = serde_json::to_value(origin).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                    *summary.origins.entry(key).or_default() += 1;
                }
                items.push(item.clone());
            }
            Confirmation::Excluded { record_id, reason } => summary.excluded.push(Failure {
                record_id: record_id.clone(),
                reason: reason.clone(),
            }),
        }
    }
    summary.items = items.len();
    summary.kappa = transcript_kappa(transcript);
    (items, summary)
}

/// Fleiss' kappa over the (record, distractor) pairs that every annotator judged.
pub fn transcript_kappa(transcript: &[TranscriptEntry]) -> Option<f64> {
    let annotators = transcript.iter().map(|e| e.annotator + 1).max()?;
    let mut by_pair: BTreeMap<(&str, &str), BTreeMap<usize, Judgment>> = BTreeMap::new();
    for e in transcript {
        by_pair
            .entry((&e.record_id, &e.distractor))
            .or_default()
            .insert(e.annotator, e.judgment);
    }
    let complete: Vec<&BTreeMap<usize, Judgment>> = by_pair.values().filter(|m| m.len() == annotators).collect();
    if complete.is_empty() || annotators < 2 {
        return None;
    }
    let rows: Vec<Vec<Judgment>> = (0..annotators).map(|a| complete.iter().map(|m| m[&a]).collect()).collect();
    fleiss_kappa(&rows).ok()
}

// ---- eval -------------------------------------------------------------

/// Scores the items with the model under every seed. A zero-shot model is
/// the same for all seeds, so its per-seed accuracies coincide.
pub fn eval_model(
    model: &dyn MaskedLm,
    dataset: &str,
    items: &[ProbeItem],
    setting: Setting,
    seeds: &[u64],
    workers: usize,
) -> Result<ExperimentReport> {
    Ok(evaluate_seeded(dataset, items, setting, seeds, workers, |_| Ok(LmScorer { model }))?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub component: Component,
    pub report: ExperimentReport,
    /// Items lacking the component, left out of this row.
    pub missing: usize,
    /// Accuracy change against the unablated run on the same items.
    pub drop: f64,
}

/// Evaluates each component ablation next to the unablated run restricted
/// to the same items.
pub fn ablation_study(
    model: &dyn MaskedLm,
    dataset: &str,
    items: &[ProbeItem],
    components: &[Component],
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for &c in components {
        let mut kept_ids = Vec::new();
        let mut missing = 0;
        for it in items {
            match ablate(it, c, 0) {
                Ok(_) => kept_ids.push(it),
                Err(simile_core::ProbeError::MissingComponent(_)) => missing += 1,
                Err(e) => return Err(e.into()),
            }
        }
        if kept_ids.is_empty() {
            bail!("no item carries a {} span", c.as_str());
        }
        let kept: Vec<ProbeItem> = kept_ids.into_iter().cloned().collect();
        let base = eval_model(model, dataset, &kept, Setting::ZeroShot, seeds, workers)?;
        let mut outcomes = Vec::new();
        let mut skipped = 0;
        for &seed in seeds {
            let ablated: Vec<ProbeItem> = kept
                .iter()
                .map(|it| ablate(it, c, item_seed(seed, &it.record_id)))
                .collect::<Result<_, _>>()?;
            let r = eval_model(model, dataset, &ablated, Setting::Ablated(c), &[seed], workers)?;
            outcomes.extend(r.outcomes);
            skipped += r.skipped;
        }
        let report = ExperimentReport::from_outcomes(model.name(), Setting::Ablated(c), outcomes, skipped);
        out.push(AblationResult {
            component: c,
            drop: report.mean_accuracy - base.mean_accuracy,
            report,
            missing,
        });
    }
    Ok(out)
}

/// Appends the report rows to a flat CSV, writing the header for a new file.
pub fn append_results(path: &Path, report: &ExperimentReport) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in report.rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn results_csv(reports: &[ExperimentReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        for row in r.rows() {
            w.serialize(row)?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?)
}

// ---- analyze ----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Analysis {
    pub model: String,
    pub distances: DistanceSummary,
    pub categories: Option<CategoryBreakdown>,
}

pub fn analyze(model: &dyn MaskedLm, records: &[SimileRecord], outcomes: Option<&[Outcome]>) -> Result<Analysis> {
    Ok(Analysis {
        model: model.name().to_string(),
        distances: component_distances(records, model)?,
        categories: outcomes.map(category_breakdown),
    })
}

/// Loads probe items from a native JSON-lines file or a released file.
pub fn load_items(key: &str, path: &Path) -> Result<Vec<ProbeItem>> {
    require_path(key, path)?;
    let (items, report) = crate::import::import_released_dataset(path, None)?;
    if !report.rejected.is_empty() {
        eprintln!("warning: {report}");
    }
    if items.is_empty() {
        return Err(Precondition::new(key, format!("{} holds no usable items", path.display())).into());
    }
    Ok(items)
}

/// Reviews from CSV with `text` and `rating` columns, or JSON lines.
pub fn read_reviews(path: &Path) -> Result<Vec<simile_core::sentiment::RawReview>> {
    require_path("reviews", path)?;
    if path.extension().is_some_and(|e| e == "csv") {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let rows: Result<Vec<_>, _> = r.deserialize().collect();
        return rows.with_context(|| format!("parsing {}", path.display()));
    }
    crate::store::read_jsonl("reviews", path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use simile_core::distractor::Origin;

    fn entry(r: &str, d: &str, a: usize, j: Judgment) -> TranscriptEntry {
        TranscriptEntry {
            record_id: r.into(),
            distractor: d.into(),
            annotator: a,
            judgment: j,
        }
    }

    #[test]
    fn kappa_uses_only_complete_pairs() {
        use Judgment::*;
        let mut t = Vec::new();
        for (d, js) in [("a", [TrueNegative; 3]), ("b", [NotTrueNegative; 3])] {
            for (i, j) in js.iter().enumerate() {
                t.push(entry("r", d, i, *j));
            }
        }
        // perfect agreement on two categories
        assert!((transcript_kappa(&t).unwrap() - 1.0).abs() < 1e-12);
        t.push(entry("r", "c", 0, Uncertain));
        assert!((transcript_kappa(&t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(transcript_kappa(&[]), None);
    }

    #[test]
    fn replay_session_reads_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.tsv");
        std::fs::write(&p, "# header\nabc\tIdle\t0\ty\nabc\tidle\t1\tn\n").unwrap();
        let mut s = ReplaySession::load(&p, 3).unwrap();
        let item = ProbeItem {
            masked_tokens: vec!["[MASK]".into()],
            options: vec!["busy".into(), "idle".into(), "x".into(), "y".into()],
            answer_index: 0,
            origins: vec![Origin::Unknown; 3],
            record_id: "abc".into(),
            spans: None,
            category: None,
        };
        assert_eq!(s.judge(0, &item, "idle").unwrap(), Judgment::TrueNegative);
        assert_eq!(s.judge(1, &item, "IDLE").unwrap(), Judgment::NotTrueNegative);
        assert!(s.judge(2, &item, "idle").is_err());
        std::fs::write(&p, "abc\tidle\tzero\ty\n").unwrap();
        assert!(ReplaySession::load(&p, 3).is_err());
    }

    #[test]
    fn item_seed_mixes_id() {
        assert_ne!(item_seed(0, "00000000000000ff"), item_seed(0, "00000000000000fe"));
        assert_eq!(item_seed(5, "zz"), 5);
    }
}
