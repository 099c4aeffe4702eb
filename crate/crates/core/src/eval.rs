//! Multiple-choice scoring, accuracy reports, embedding baselines,
//! component ablation and the human quiz.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distractor::ProbeItem;
use crate::error::{LmError, ProbeError, SessionError};
use crate::lm::{cosine_distance, log_softmax, mask_logprobs, EmbeddingTable, MaskedLm, MASK, UNK};
use crate::record::{Category, Span};

/// Index of the highest score; the lowest index wins ties.
pub fn choose(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Per-option scores for a probe item; higher is better.
pub trait OptionScorer: Sync {
    fn name(&self) -> &str;
    fn score(&self, item: &ProbeItem) -> Result<Vec<f64>, ProbeError>;
}

impl<T: OptionScorer + ?Sized> OptionScorer for &T {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn score(&self, item: &ProbeItem) -> Result<Vec<f64>, ProbeError> {
        (**self).score(item)
    }
}

/// Log-probability of each option at the mask position.
///
/// Options that split into several subtokens are scored with that many
/// mask tokens in place and the mean per-subtoken log-probability.
pub fn score_options(item: &ProbeItem, model: &dyn MaskedLm) -> Result<(usize, Vec<f64>), ProbeError> {
    let unk = model.unk_id();
    let mut shared: Option<Vec<f64>> = None;
    let mut scores = Vec::with_capacity(item.options.len());
    for option in &item.options {
        let pieces = model.word_pieces(option);
        if pieces.is_empty() || pieces.iter().any(|&p| Some(p) == unk) {
            return Err(LmError::UnscorableOption(option.clone()).into());
        }
        let score = if pieces.len() == 1 {
            if shared.is_none() {
                shared = Some(mask_logprobs(model, &item.masked_tokens)?);
            }
            shared.as_ref().unwrap()[pieces[0] as usize]
        } else {
            multi_token_score(item, model, &pieces)?
        };
        scores.push(score);
    }
    Ok((choose(&scores), scores))
}

fn multi_token_score(item: &ProbeItem, model: &dyn MaskedLm, pieces: &[u32]) -> Result<f64, ProbeError> {
    let enc = model.align(&item.masked_tokens, pieces.len())?;
    if enc.len() > model.max_len() {
        return Err(LmError::TooLong {
            len: enc.len(),
            max: model.max_len(),
        }
        .into());
    }
    let logits = model.mask_logits(&enc)?;
    if logits.nrows() != pieces.len() {
        return Err(LmError::MaskCount(logits.nrows()).into());
    }
    let total: f64 = pieces
        .iter()
        .enumerate()
        .map(|(row, &p)| log_softmax(logits.row(row))[p as usize])
        .sum();
    Ok(total / pieces.len() as f64)
}

/// Scores options with a masked LM.
pub struct LmScorer<'a> {
    pub model: &'a dyn MaskedLm,
}

impl OptionScorer for LmScorer<'_> {
    fn name(&self) -> &str {
        self.model.name()
    }
    fn score(&self, item: &ProbeItem) -> Result<Vec<f64>, ProbeError> {
        Ok(score_options(item, self.model)?.1)
    }
}

/// Uniform random scores, reproducible per (seed, item).
pub struct RandomScorer {
    pub seed: u64,
}

impl OptionScorer for RandomScorer {
    fn name(&self) -> &str {
        "random"
    }
    fn score(&self, item: &ProbeItem) -> Result<Vec<f64>, ProbeError> {
        let id = u64::from_str_radix(&item.record_id, 16).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ id.rotate_left(17));
        Ok((0..item.options.len()).map(|_| rng.gen::<f64>()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Topic,
    Vehicle,
    Event,
    Comparator,
    Random,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Topic,
        Component::Vehicle,
        Component::Event,
        Component::Comparator,
        Component::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Topic => "topic",
            Component::Vehicle => "vehicle",
            Component::Event => "event",
            Component::Comparator => "comparator",
            Component::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Component> {
        Component::ALL.into_iter().find(|c| c.as_str() == s.trim().to_lowercase())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    ZeroShot,
    MlmFinetuned,
    KeFinetuned,
    Ablated(Component),
    Baseline,
    Human,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::ZeroShot => f.write_str("zero_shot"),
            Setting::MlmFinetuned => f.write_str("mlm_finetuned"),
            Setting::KeFinetuned => f.write_str("ke_finetuned"),
            Setting::Ablated(c) => write!(f, "ablated({})", c.as_str()),
            Setting::Baseline => f.write_str("baseline"),
            Setting::Human => f.write_str("human"),
        }
    }
}

/// One scored item under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub dataset: String,
    pub record_id: String,
    pub category: Option<Category>,
    pub seed: u64,
    pub chosen: usize,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model_name: String,
    pub setting: Setting,
    pub per_dataset_accuracy: BTreeMap<String, f64>,
    pub per_category_accuracy: BTreeMap<String, f64>,
    pub per_seed: BTreeMap<u64, f64>,
    pub mean_accuracy: f64,
    /// Items that could not be scored and were left out.
    #[serde(default)]
    pub skipped: usize,
    pub outcomes: Vec<Outcome>,
}

/// One line of the flat results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub setting: String,
    pub dataset: String,
    pub category: String,
    pub seed: u64,
    pub accuracy: f64,
}

fn accuracy<'a>(outcomes: impl Iterator<Item = &'a Outcome>) -> Option<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for o in outcomes {
        total += 1;
        right += o.correct as usize;
    }
    (total > 0).then(|| right as f64 / total as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl ExperimentReport {
    /// Aggregates outcomes. Dataset and category accuracies are averaged
    /// over seeds; `mean_accuracy` is the mean of the per-seed values.
    pub fn from_outcomes(model_name: &str, setting: Setting, outcomes: Vec<Outcome>, skipped: usize) -> Self {
        let seeds: Vec<u64> = {
            let mut s: Vec<u64> = outcomes.iter().map(|o| o.seed).collect();
            s.sort_unstable();
            s.dedup();
            s
        };
        let per_seed: BTreeMap<u64, f64> = seeds
            .iter()
            .filter_map(|&s| accuracy(outcomes.iter().filter(|o| o.seed == s)).map(|a| (s, a)))
            .collect();
        let seed_mean = |pred: &dyn Fn(&Outcome) -> bool| {
            mean(seeds.iter().filter_map(|&s| accuracy(outcomes.iter().filter(|o| o.seed == s && pred(o)))))
        };
        let mut datasets: Vec<&str> = outcomes.iter().map(|o| o.dataset.as_str()).collect();
        datasets.sort_unstable();
        datasets.dedup();
        let per_dataset_accuracy = datasets
            .iter()
            .map(|d| (d.to_string(), seed_mean(&|o| o.dataset == *d)))
            .collect();
        let mut per_category_accuracy = BTreeMap::new();
        for c in Category::ALL {
            if outcomes.iter().any(|o| o.category == Some(c)) {
                per_category_accuracy.insert(c.as_str().to_string(), seed_mean(&|o| o.category == Some(c)));
            }
        }
        let mean_accuracy = mean(per_seed.values().copied());
        ExperimentReport {
            model_name: model_name.to_string(),
            setting,
            per_dataset_accuracy,
            per_category_accuracy,
            per_seed,
            mean_accuracy,
            skipped,
            outcomes,
        }
    }

    /// Flat rows: one per (dataset, category or `all`, seed).
    pub fn rows(&self) -> Vec<AccuracyRow> {
        let mut keys: BTreeSet<(String, u64, Option<Category>)> = BTreeSet::new();
        for o in &self.outcomes {
            keys.insert((o.dataset.clone(), o.seed, None));
            if o.category.is_some() {
                keys.insert((o.dataset.clone(), o.seed, o.category));
            }
        }
        keys.into_iter()
            .filter_map(|(d, s, c)| {
                let acc = accuracy(
                    self.outcomes
                        .iter()
                        .filter(|o| o.dataset == d && o.seed == s && (c.is_none() || o.category == c)),
                )?;
                Some(AccuracyRow {
                    model: self.model_name.clone(),
                    setting: self.setting.to_string(),
                    dataset: d,
                    category: c.map_or("all", |c| c.as_str()).to_string(),
                    seed: s,
                    accuracy: acc,
                })
            })
            .collect()
    }

    /// Combines reports for the same model and setting.
    pub fn merge(self, other: ExperimentReport) -> ExperimentReport {
        let mut outcomes = self.outcomes;
        outcomes.extend(other.outcomes);
        ExperimentReport::from_outcomes(&self.model_name, self.setting, outcomes, self.skipped + other.skipped)
    }
}

/// Scores every item with `scorer`, splitting the items over `workers`
/// threads. Results come back in item order.
pub fn predict(items: &[ProbeItem], scorer: &dyn OptionScorer, workers: usize) -> Vec<Result<usize, ProbeError>> {
    let run = |chunk: &[ProbeItem]| -> Vec<Result<usize, ProbeError>> {
        chunk.iter().map(|it| scorer.score(it).map(|s| choose(&s))).collect()
    };
    let workers = workers.max(1);
    if workers == 1 || items.len() < 2 {
        return run(items);
    }
    let size = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items.chunks(size).map(|c| scope.spawn(move || run(c))).collect();
        handles.into_iter().flat_map(|h| h.join().expect("scoring worker panicked")).collect()
    })
}

/// Evaluates one dataset with a model that is fixed across seeds.
pub fn evaluate(
    dataset: &str,
    items: &[ProbeItem],
    scorer: &dyn OptionScorer,
    setting: Setting,
    seeds: &[u64],
) -> Result<ExperimentReport, ProbeError> {
    evaluate_seeded(dataset, items, setting, seeds, 1, |_| Ok(scorer))
}

/// Evaluates one dataset with a per-seed model, e.g. checkpoints trained
/// with different seeds. Items that fail to score are counted as skipped
/// when they fail for an unscorable option; other errors abort.
pub fn evaluate_seeded<'s, S, F>(
    dataset: &str,
    items: &[ProbeItem],
    setting: Setting,
    seeds: &[u64],
    workers: usize,
    mut scorer_for: F,
) -> Result<ExperimentReport, ProbeError>
where
    S: OptionScorer + 's,
    F: FnMut(u64) -> Result<S, ProbeError>,
{
    if items.is_empty() {
        return Err(ProbeError::InvalidItem("no items to evaluate".into()));
    }
    let mut outcomes = Vec::new();
    let mut skipped = 0;
    let mut name = String::new();
    for &seed in seeds {
        let scorer = scorer_for(seed)?;
        name = scorer.name().to_string();
        for (item, pred) in items.iter().zip(predict(items, &scorer, workers)) {
            match pred {
                Ok(chosen) => outcomes.push(Outcome {
                    dataset: dataset.to_string(),
                    record_id: item.record_id.clone(),
                    category: item.category,
                    seed,
                    chosen,
                    correct: chosen == item.answer_index,
                }),
                Err(ProbeError::Lm(LmError::UnscorableOption(_))) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(ExperimentReport::from_outcomes(&name, setting, outcomes, skipped))
}

fn phrase_vector(words: &[String], span: Span, table: &dyn EmbeddingTable) -> Option<Vec<f32>> {
    if span.is_empty() {
        return None;
    }
    let toks = &words[span.range()];
    table
        .vector(&toks.join(" "))
        .or_else(|| table.vector(&toks.join("_")))
        .or_else(|| table.vector(toks.last().unwrap()))
}

fn require(item: &ProbeItem) -> Result<&crate::record::Spans, ProbeError> {
    item.spans
        .as_ref()
        .ok_or_else(|| ProbeError::InvalidItem("item carries no component spans".into()))
}

fn option_vectors(item: &ProbeItem, table: &dyn EmbeddingTable) -> Result<Vec<Vec<f32>>, ProbeError> {
    item.options
        .iter()
        .map(|o| {
            table.vector(o).ok_or_else(|| {
                ProbeError::Lm(LmError::UnknownWord {
                    word: o.clone(),
                    tried: "table".into(),
                })
            })
        })
        .collect()
}

fn unresolved(span: Span, item: &ProbeItem, what: &'static str) -> ProbeError {
    if span.is_empty() {
        ProbeError::MissingComponent(what)
    } else {
        ProbeError::Lm(LmError::UnknownWord {
            word: item.masked_tokens[span.range()].join(" "),
            tried: "table".into(),
        })
    }
}

/// Picks the option closest (cosine) to vehicle + event.
pub fn emb_baseline(item: &ProbeItem, table: &dyn EmbeddingTable) -> Result<usize, ProbeError> {
    let spans = require(item)?;
    let mut composite = phrase_vector(&item.masked_tokens, spans.vehicle, table)
        .ok_or_else(|| unresolved(spans.vehicle, item, "vehicle"))?;
    if let Some(ev) = phrase_vector(&item.masked_tokens, spans.event, table) {
        composite.iter_mut().zip(ev).for_each(|(c, e)| *c += e);
    }
    let scores: Vec<f64> = option_vectors(item, table)?
        .iter()
        .map(|o| -cosine_distance(o, &composite))
        .collect();
    Ok(choose(&scores))
}

/// Score favouring options near both topic and vehicle and equally so:
/// `-(d(o,t) + d(o,v) + |d(o,t) - d(o,v)|)` with cosine distance.
pub fn conscore(option: &[f32], topic: &[f32], vehicle: &[f32]) -> f64 {
    let dt = cosine_distance(option, topic);
    let dv = cosine_distance(option, vehicle);
    -(dt + dv + (dt - dv).abs())
}

pub fn conscore_baseline(item: &ProbeItem, table: &dyn EmbeddingTable) -> Result<usize, ProbeError> {
    let spans = require(item)?;
    let t = phrase_vector(&item.masked_tokens, spans.topic, table).ok_or_else(|| unresolved(spans.topic, item, "topic"))?;
    let v = phrase_vector(&item.masked_tokens, spans.vehicle, table)
        .ok_or_else(|| unresolved(spans.vehicle, item, "vehicle"))?;
    let scores: Vec<f64> = option_vectors(item, table)?.iter().map(|o| conscore(o, &t, &v)).collect();
    Ok(choose(&scores))
}

/// Runs a table baseline over a dataset; unresolvable items are skipped.
pub fn baseline_report(
    name: &str,
    dataset: &str,
    items: &[ProbeItem],
    baseline: impl Fn(&ProbeItem) -> Result<usize, ProbeError>,
) -> ExperimentReport {
    let mut outcomes = Vec::new();
    let mut skipped = 0;
    for item in items {
        match baseline(item) {
            Ok(chosen) => outcomes.push(Outcome {
                dataset: dataset.to_string(),
                record_id: item.record_id.clone(),
                category: item.category,
                seed: 0,
                chosen,
                correct: chosen == item.answer_index,
            }),
            Err(_) => skipped += 1,
        }
    }
    ExperimentReport::from_outcomes(name, Setting::Baseline, outcomes, skipped)
}

/// Copula agreeing with the topic head.
pub fn copula_for(topic_head: &str) -> &'static str {
    let w = topic_head.to_lowercase();
    match w.as_str() {
        "i" => "am",
        "we" | "they" | "you" | "these" | "those" | "people" | "children" | "men" | "women" => "are",
        _ if w.len() > 3
            && w.ends_with('s')
            && !w.ends_with("ss")
            && !w.ends_with("us")
            && !w.ends_with("is")
            && w.chars().next().is_some_and(|c| c.is_lowercase()) =>
        {
            "are"
        }
        _ => "is",
    }
}

fn is_punct(tok: &str) -> bool {
    tok.chars().all(|c| c.is_ascii_punctuation())
}

/// Hides one component. Topic, vehicle and comparator tokens become the
/// unknown sentinel one for one; the event becomes a single copula; random
/// hides one seeded non-component word.
pub fn ablate(item: &ProbeItem, component: Component, seed: u64) -> Result<ProbeItem, ProbeError> {
    let spans = require(item)?.clone();
    let mut out = item.clone();
    let mut hide = |span: Span, what: &'static str| -> Result<(), ProbeError> {
        if span.is_empty() {
            return Err(ProbeError::MissingComponent(what));
        }
        for t in &mut out.masked_tokens[span.range()] {
            *t = UNK.to_string();
        }
        Ok(())
    };
    match component {
        Component::Topic => hide(spans.topic, "topic")?,
        Component::Vehicle => hide(spans.vehicle, "vehicle")?,
        Component::Comparator => {
            if spans.comparator.is_empty() {
                return Err(ProbeError::MissingComponent("comparator"));
            }
            for s in &spans.comparator {
                hide(*s, "comparator")?;
            }
        }
        Component::Event => {
            let ev = spans.event;
            if ev.is_empty() {
                return Err(ProbeError::MissingComponent("event"));
            }
            let head = if spans.topic.is_empty() {
                ""
            } else {
                item.masked_tokens[spans.topic.end - 1].as_str()
            };
            out.masked_tokens
                .splice(ev.range(), std::iter::once(copula_for(head).to_string()));
            out.spans = Some(spans.shifted(ev.start, ev.len(), 1));
        }
        Component::Random => {
            let eligible: Vec<usize> = (0..item.masked_tokens.len())
                .filter(|&i| {
                    let t = &item.masked_tokens[i];
                    !spans.covers(i) && t != MASK && !is_punct(t)
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let &i = eligible.choose(&mut rng).ok_or(ProbeError::NoEligibleToken)?;
            out.masked_tokens[i] = UNK.to_string();
        }
    }
    Ok(out)
}

/// Asks one annotator at a time for an option index.
pub trait QuizSession {
    fn answer(&mut self, annotator: usize, item: &ProbeItem) -> Result<usize, SessionError>;
    /// Called when the votes have no single most frequent option.
    fn adjudicate(&mut self, item: &ProbeItem, votes: &[usize]) -> Result<usize, SessionError>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizEntry {
    pub record_id: String,
    pub votes: Vec<usize>,
    pub decision: usize,
    pub adjudicated: bool,
}

/// Line-oriented quiz: shows the sentence and options, reads a letter.
pub struct PromptQuiz<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> PromptQuiz<R, W> {
    pub fn new(input: R, output: W) -> Self {
        PromptQuiz { input, output }
    }

    fn ask(&mut self, header: &str, item: &ProbeItem) -> Result<usize, SessionError> {
        loop {
            writeln!(self.output, "{header}")?;
            writeln!(self.output, "{}", item.sentence())?;
            for (i, o) in item.options.iter().enumerate() {
                writeln!(self.output, "  {}. {}", (b'A' + i as u8) as char, o)?;
            }
            write!(self.output, "> ")?;
            self.output.flush()?;
            let mut line = String::new();
            if self.input.read_line(&mut line)? == 0 || line.trim() == "q" {
                return Err(SessionError::Aborted { answered: 0 });
            }
            let t = line.trim().to_ascii_uppercase();
            if let [c] = t.as_bytes() {
                let i = c.wrapping_sub(b'A') as usize;
                if i < item.options.len() {
                    return Ok(i);
                }
            }
        }
    }
}

impl<R: BufRead, W: Write> QuizSession for PromptQuiz<R, W> {
    fn answer(&mut self, annotator: usize, item: &ProbeItem) -> Result<usize, SessionError> {
        self.ask(&format!("[annotator {}]", annotator + 1), item)
    }

    fn adjudicate(&mut self, item: &ProbeItem, votes: &[usize]) -> Result<usize, SessionError> {
        let letters: Vec<String> = votes.iter().map(|&v| ((b'A' + v as u8) as char).to_string()).collect();
        self.ask(&format!("[adjudication] votes were {}", letters.join(", ")), item)
    }
}

/// Majority vote, or `None` when the top count is shared.
pub fn majority(votes: &[usize]) -> Option<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let mut winners = counts.iter().filter(|(_, &c)| c == top).map(|(&v, _)| v);
    let w = winners.next()?;
    winners.next().is_none().then_some(w)
}

/// Presents the items in seeded random order to each annotator and scores
/// the majority vote. Decisions are appended to `transcript` as they are
/// made, so an aborted session keeps everything answered so far.
pub fn human_quiz(
    dataset: &str,
    items: &[ProbeItem],
    annotators: usize,
    seed: u64,
    session: &mut dyn QuizSession,
    transcript: &mut Vec<QuizEntry>,
) -> Result<ExperimentReport, SessionError> {
    if annotators < 3 {
        return Err(SessionError::TooFewAnnotators {
            need: 3,
            got: annotators,
        });
    }
    let mut order: Vec<&ProbeItem> = items.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut outcomes = Vec::new();
    for item in order {
        let mut votes = Vec::with_capacity(annotators);
        for a in 0..annotators {
            let v = session.answer(a, item).map_err(|e| aborted(e, transcript.len()))?;
            votes.push(v);
        }
        let (decision, adjudicated) = match majority(&votes) {
            Some(d) => (d, false),
            None => (
                session.adjudicate(item, &votes).map_err(|e| aborted(e, transcript.len()))?,
                true,
            ),
        };
        transcript.push(QuizEntry {
            record_id: item.record_id.clone(),
            votes,
            decision,
            adjudicated,
        });
        outcomes.push(Outcome {
            dataset: dataset.to_string(),
            record_id: item.record_id.clone(),
            category: item.category,
            seed,
            chosen: decision,
            correct: decision == item.answer_index,
        });
    }
    Ok(ExperimentReport::from_outcomes("human", Setting::Human, outcomes, 0))
}

fn aborted(e: SessionError, answered: usize) -> SessionError {
    match e {
        SessionError::Aborted { .. } => SessionError::Aborted { answered },
        other => other,
    }
}
