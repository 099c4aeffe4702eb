//! Distractor generation, similarity-based selection, human confirmation
//! and probe assembly.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LmError, ProbeError, SessionError};
use crate::kb::{rank_cooccurrence, CooccurrenceIndex, KnowledgeBase, PropertyGenerator};
use crate::lm::{cosine, encode, pool_span, sentence_embedding, MaskedLm, MASK};
use crate::record::{Category, SimileRecord, Span, Spans};

/// Where a distractor candidate came from, in decreasing merge priority.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    PropertyAntonym,
    TopicProperty,
    VehicleProperty,
    EventProperty,
    CorpusCooccurrence,
    /// Imported items whose provenance was not published.
    Unknown,
}

impl Origin {
    fn priority(self) -> u8 {
        match self {
            Origin::PropertyAntonym => 0,
            Origin::TopicProperty | Origin::VehicleProperty | Origin::EventProperty => 1,
            Origin::CorpusCooccurrence => 2,
            Origin::Unknown => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanLabel {
    #[default]
    Unreviewed,
    TrueNegative,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractorCandidate {
    pub word: String,
    pub origin: Origin,
    pub frequency: Option<u64>,
    pub similarity: Option<f64>,
    #[serde(default)]
    pub human_label: HumanLabel,
}

impl DistractorCandidate {
    pub fn new(word: &str, origin: Origin) -> Self {
        DistractorCandidate {
            word: word.to_string(),
            origin,
            frequency: None,
            similarity: None,
            human_label: HumanLabel::Unreviewed,
        }
    }

    pub fn cooccurring(word: &str, frequency: u64) -> Self {
        DistractorCandidate {
            frequency: Some(frequency),
            ..Self::new(word, Origin::CorpusCooccurrence)
        }
    }

    pub fn validate(&self, gold: &str) -> Result<(), ProbeError> {
        if self.word.eq_ignore_ascii_case(gold) || self.word.to_lowercase() == gold.to_lowercase() {
            return Err(ProbeError::GoldAsDistractor(self.word.clone()));
        }
        if self.origin == Origin::CorpusCooccurrence && !self.frequency.is_some_and(|f| f > 1) {
            return Err(ProbeError::LowFrequency {
                word: self.word.clone(),
                frequency: self.frequency,
            });
        }
        Ok(())
    }
}

fn usable_word(w: &str) -> bool {
    !w.is_empty() && w.chars().all(|c| c.is_alphabetic())
}

fn lookup_keys(record: &SimileRecord, span: Span) -> Vec<String> {
    if span.is_empty() {
        return Vec::new();
    }
    let phrase = record.span_text(span).to_lowercase();
    let head = record.tokens[span.end - 1].to_lowercase();
    if head == phrase {
        vec![phrase]
    } else {
        vec![phrase, head]
    }
}

/// Union of antonyms of the gold property, HasProperty values of the other
/// components, and their top co-occurring modifiers. Duplicates keep the
/// highest-priority origin; order is first appearance.
pub fn generate_candidates(
    record: &SimileRecord,
    kb: &dyn KnowledgeBase,
    commonsense: &dyn PropertyGenerator,
    corpus: &CooccurrenceIndex,
) -> Vec<DistractorCandidate> {
    let gold = record.property().to_lowercase();
    let mut out: Vec<DistractorCandidate> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut offer = |c: DistractorCandidate| {
        let key = c.word.to_lowercase();
        if key == gold || !usable_word(&key) || c.validate(&gold).is_err() {
            return;
        }
        match seen.get(&key) {
            Some(&i) => {
                let existing = &mut out[i];
                if c.origin.priority() < existing.origin.priority() {
                    existing.origin = c.origin;
                }
                if existing.frequency.is_none() {
                    existing.frequency = c.frequency;
                }
            }
            None => {
                seen.insert(key.clone(), out.len());
                out.push(DistractorCandidate { word: key, ..c });
            }
        }
    };

    for a in kb.antonyms(&gold) {
        offer(DistractorCandidate::new(&a, Origin::PropertyAntonym));
    }
    let components = [
        (record.spans.topic, Origin::TopicProperty),
        (record.spans.vehicle, Origin::VehicleProperty),
        (record.spans.event, Origin::EventProperty),
    ];
    for (span, origin) in components {
        for key in lookup_keys(record, span) {
            for p in kb.has_property(&key).into_iter().chain(commonsense.properties(&key)) {
                offer(DistractorCandidate::new(&p, origin));
            }
        }
    }
    for (span, _) in components {
        if let Some(head) = lookup_keys(record, span).pop() {
            for (w, f) in rank_cooccurrence(&head, corpus) {
                offer(DistractorCandidate::cooccurring(&w, f));
            }
        }
    }
    out
}

/// Drops candidates that are not one subtoken for the evaluation model.
pub fn retain_single_token(candidates: Vec<DistractorCandidate>, model: &dyn MaskedLm) -> Vec<DistractorCandidate> {
    candidates
        .into_iter()
        .filter(|c| model.is_single_token(&c.word))
        .collect()
}

/// Features used for distractor selection.
pub trait SentenceEncoder {
    /// Sentence embedding and the embedding of the word at `word_index`.
    fn features(&self, tokens: &[String], word_index: usize) -> Result<(Vec<f32>, Vec<f32>), LmError>;
}

/// Sequence-start hidden state plus the mean of the word's subtoken states.
pub struct LmFeatures<'a> {
    pub model: &'a dyn MaskedLm,
}

impl SentenceEncoder for LmFeatures<'_> {
    fn features(&self, tokens: &[String], word_index: usize) -> Result<(Vec<f32>, Vec<f32>), LmError> {
        let (enc, hidden) = encode(self.model, tokens)?;
        let word = pool_span(&enc, &hidden, Span::single(word_index))?;
        Ok((sentence_embedding(&hidden), word))
    }
}

fn substitute(record: &SimileRecord, word: &str) -> Vec<String> {
    let span = record.spans.property;
    let mut tokens = record.tokens.clone();
    tokens.splice(span.range(), std::iter::once(word.to_string()));
    tokens
}

fn concat((a, b): (Vec<f32>, Vec<f32>)) -> Vec<f32> {
    let mut v = a;
    v.extend(b);
    v
}

/// Scores every candidate by cosine similarity between the concatenated
/// features of the original and the substituted sentence; descending,
/// stable on ties.
pub fn rank_candidates(
    record: &SimileRecord,
    candidates: &[DistractorCandidate],
    encoder: &dyn SentenceEncoder,
) -> Result<Vec<DistractorCandidate>, ProbeError> {
    let at = record.spans.property.start;
    let original = concat(encoder.features(&substitute(record, &record.property()), at)?);
    let mut scored = candidates
        .iter()
        .map(|c| {
            let f = concat(encoder.features(&substitute(record, &c.word), at)?);
            Ok(DistractorCandidate {
                similarity: Some(cosine(&original, &f)),
                ..c.clone()
            })
        })
        .collect::<Result<Vec<_>, ProbeError>>()?;
    scored.sort_by(|a, b| b.similarity.partial_cmp(&a.similarity).unwrap_or(std::cmp::Ordering::Equal));
    Ok(scored)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub chosen: Vec<DistractorCandidate>,
    /// Remaining candidates in rank order, used as replacements.
    pub reserve: Vec<DistractorCandidate>,
}

/// The three most similar candidates.
pub fn select_distractors(
    record: &SimileRecord,
    candidates: &[DistractorCandidate],
    encoder: &dyn SentenceEncoder,
) -> Result<Selection, ProbeError> {
    if candidates.len() < 3 {
        return Err(ProbeError::TooFewCandidates(candidates.len()));
    }
    let gold = record.property();
    for c in candidates {
        c.validate(&gold)?;
    }
    let mut ranked = rank_candidates(record, candidates, encoder)?;
    let reserve = ranked.split_off(3);
    Ok(Selection { chosen: ranked, reserve })
}

/// A masked simile with four options, exactly one correct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeItem {
    pub masked_tokens: Vec<String>,
    pub options: Vec<String>,
    pub answer_index: usize,
    /// Origins of the three distractors, in option order.
    pub origins: Vec<Origin>,
    pub record_id: String,
    /// Component spans over `masked_tokens`; the property span is the mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Spans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

impl ProbeItem {
    pub fn gold(&self) -> &str {
        &self.options[self.answer_index]
    }

    pub fn mask_index(&self) -> Option<usize> {
        self.masked_tokens.iter().position(|t| t == MASK)
    }

    pub fn sentence(&self) -> String {
        self.masked_tokens.join(" ")
    }

    pub fn distractors(&self) -> impl Iterator<Item = (usize, &str)> {
        self.options
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.answer_index)
            .map(|(i, o)| (i, o.as_str()))
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        let masks = self.masked_tokens.iter().filter(|t| *t == MASK).count();
        if masks != 1 {
            return Err(ProbeError::InvalidItem(format!("{masks} mask sentinels")));
        }
        if self.options.len() != 4 {
            return Err(ProbeError::InvalidItem(format!("{} options", self.options.len())));
        }
        if self.answer_index >= 4 {
            return Err(ProbeError::InvalidItem(format!("answer index {}", self.answer_index)));
        }
        let distinct: HashSet<String> = self.options.iter().map(|o| o.to_lowercase()).collect();
        if distinct.len() != 4 {
            return Err(ProbeError::DuplicateOptions);
        }
        if self.origins.len() != 3 {
            return Err(ProbeError::InvalidItem(format!("{} origins", self.origins.len())));
        }
        if let Some(spans) = &self.spans {
            let m = self.mask_index().unwrap();
            if spans.property != Span::single(m) {
                return Err(ProbeError::InvalidItem("property span is not the mask".into()));
            }
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Option order for a seed. Every run of 24 consecutive seeds
/// (`24k..24k+24`) yields all 24 orderings, each block at a different rotation.
pub fn option_permutation(seed: u64) -> [usize; 4] {
    let offset = splitmix64(seed / 24) % 24;
    let mut code = ((seed % 24 + offset) % 24) as usize;
    let mut pool = vec![0, 1, 2, 3];
    let mut perm = [0; 4];
    for (i, slot) in perm.iter_mut().enumerate() {
        let f = [6, 2, 1, 1][i];
        *slot = pool.remove(code / f);
        code %= f;
    }
    perm
}

/// Masks the property and shuffles gold + three distractors by `seed`.
pub fn build_probe(
    record: &SimileRecord,
    distractors: &[DistractorCandidate],
    seed: u64,
) -> Result<ProbeItem, ProbeError> {
    let span = record.spans.property;
    if span.len() != 1 {
        return Err(ProbeError::MultiTokenProperty(span.len()));
    }
    if distractors.len() != 3 {
        return Err(ProbeError::TooFewCandidates(distractors.len()));
    }
    let gold = record.property();
    for d in distractors {
        d.validate(&gold)?;
    }
    let mut masked = record.tokens.clone();
    masked[span.start] = MASK.to_string();
    let base: Vec<(String, Option<Origin>)> = std::iter::once((gold, None))
        .chain(distractors.iter().map(|d| (d.word.clone(), Some(d.origin))))
        .collect();
    let perm = option_permutation(seed);
    let options: Vec<String> = perm.iter().map(|&i| base[i].0.clone()).collect();
    let answer_index = perm.iter().position(|&i| i == 0).unwrap();
    let origins = perm.iter().filter_map(|&i| base[i].1).collect();
    let item = ProbeItem {
        masked_tokens: masked,
        options,
        answer_index,
        origins,
        record_id: record.id(),
        spans: Some(record.spans.clone()),
        category: record.category,
    };
    item.validate()?;
    Ok(item)
}

/// One annotator's verdict on a distractor: `y`, `n` or `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    TrueNegative,
    NotTrueNegative,
    Uncertain,
}

impl Judgment {
    pub fn parse(s: &str) -> Option<Judgment> {
        match s.trim().to_ascii_lowercase().as_str() {
            "y" | "yes" => Some(Judgment::TrueNegative),
            "n" | "no" => Some(Judgment::NotTrueNegative),
            "u" | "?" => Some(Judgment::Uncertain),
            _ => None,
        }
    }
}

pub trait AnnotationSession {
    fn annotators(&self) -> usize;
    fn judge(&mut self, annotator: usize, item: &ProbeItem, distractor: &str) -> Result<Judgment, SessionError>;
}

/// Line-oriented prompt session: shows the item and reads `y/n/u`.
pub struct PromptSession<R, W> {
    input: R,
    output: W,
    annotators: usize,
}

impl<R: BufRead, W: Write> PromptSession<R, W> {
    pub fn new(input: R, output: W, annotators: usize) -> Self {
        PromptSession {
            input,
            output,
            annotators,
        }
    }
}

impl<R: BufRead, W: Write> AnnotationSession for PromptSession<R, W> {
    fn annotators(&self) -> usize {
        self.annotators
    }

    fn judge(&mut self, annotator: usize, item: &ProbeItem, distractor: &str) -> Result<Judgment, SessionError> {
        loop {
            writeln!(self.output, "{}", item.sentence())?;
            writeln!(self.output, "  answer: {}", item.gold())?;
            write!(
                self.output,
                "[annotator {}] is '{}' wrong in this sentence? [y/n/u] ",
                annotator + 1,
                distractor
            )?;
            self.output.flush()?;
            let mut line = String::new();
            if self.input.read_line(&mut line)? == 0 {
                return Err(SessionError::Aborted { answered: 0 });
            }
            if line.trim() == "q" {
                return Err(SessionError::Aborted { answered: 0 });
            }
            if let Some(j) = Judgment::parse(&line) {
                return Ok(j);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub record_id: String,
    pub distractor: String,
    pub annotator: usize,
    pub judgment: Judgment,
}

/// A built probe awaiting confirmation, with its ranked replacement pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingProbe {
    pub item: ProbeItem,
    pub reserve: Vec<DistractorCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Confirmation {
    Accepted { item: ProbeItem },
    Excluded { record_id: String, reason: String },
}

#[derive(Clone, Debug, Default)]
pub struct ConfirmationReport {
    pub outcomes: Vec<Confirmation>,
    pub transcript: Vec<TranscriptEntry>,
}

impl ConfirmationReport {
    pub fn accepted(&self) -> impl Iterator<Item = &ProbeItem> {
        self.outcomes.iter().filter_map(|o| match o {
            Confirmation::Accepted { item } => Some(item),
            _ => None,
        })
    }
}

/// Number of annotators not answering `y` that triggers a replacement.
pub const REPLACE_THRESHOLD: usize = 2;

/// Collects judgments for every distractor; a distractor with at least
/// [`REPLACE_THRESHOLD`] non-`y` votes is swapped for the next reserve
/// candidate, which is judged in turn. Items whose reserve runs out are
/// excluded.
pub fn confirm_distractors(
    pending: Vec<PendingProbe>,
    session: &mut dyn AnnotationSession,
) -> Result<ConfirmationReport, SessionError> {
    let mut report = ConfirmationReport::default();
    for PendingProbe { mut item, reserve } in pending {
        let mut reserve = reserve.into_iter();
        let slots: Vec<usize> = item.distractors().map(|(i, _)| i).collect();
        let mut excluded = None;
        'slots: for slot in slots {
            loop {
                let word = item.options[slot].clone();
                let mut rejections = 0;
                for a in 0..session.annotators() {
                    let j = session.judge(a, &item, &word).map_err(|e| match e {
                        SessionError::Aborted { .. } => SessionError::Aborted {
                            answered: report.transcript.len(),
                        },
                        other => other,
                    })?;
                    report.transcript.push(TranscriptEntry {
                        record_id: item.record_id.clone(),
                        distractor: word.clone(),
                        annotator: a,
                        judgment: j,
                    });
                    if j != Judgment::TrueNegative {
                        rejections += 1;
                    }
                }
                if rejections < REPLACE_THRESHOLD {
                    break;
                }
                let taken: HashSet<String> = item.options.iter().map(|o| o.to_lowercase()).collect();
                match reserve.by_ref().find(|c| !taken.contains(&c.word.to_lowercase())) {
                    Some(next) => {
                        item.options[slot] = next.word.clone();
                        let k = item.distractors().position(|(i, _)| i == slot).unwrap();
                        item.origins[k] = next.origin;
                    }
                    None => {
                        excluded = Some(format!("replacement pool exhausted at '{word}'"));
                        break 'slots;
                    }
                }
            }
        }
        report.outcomes.push(match excluded {
            Some(reason) => Confirmation::Excluded {
                record_id: item.record_id.clone(),
                reason,
            },
            None => Confirmation::Accepted { item },
        });
    }
    Ok(report)
}

/// Fleiss' kappa over an annotator × item label matrix.
pub fn fleiss_kappa<L: Eq + Hash + Clone>(labels: &[Vec<L>]) -> Result<f64, ProbeError> {
    let raters = labels.len();
    if raters < 2 {
        return Err(ProbeError::Kappa(format!("need at least 2 raters, got {raters}")));
    }
    let items = labels[0].len();
    if items < 2 {
        return Err(ProbeError::Kappa(format!("need at least 2 items, got {items}")));
    }
    if labels.iter().any(|row| row.len() != items) {
        return Err(ProbeError::Kappa("every item needs the same number of ratings".into()));
    }
    let mut totals: HashMap<L, f64> = HashMap::new();
    let n = raters as f64;
    let mut p_bar = 0.0;
    for i in 0..items {
        let mut counts: HashMap<&L, f64> = HashMap::new();
        for row in labels {
            *counts.entry(&row[i]).or_default() += 1.0;
        }
        let sq: f64 = counts.values().map(|c| c * c).sum();
        p_bar += (sq - n) / (n * (n - 1.0));
        for (l, c) in counts {
            *totals.entry(l.clone()).or_default() += c;
        }
    }
    p_bar /= items as f64;
    let total = n * items as f64;
    let p_e: f64 = totals.values().map(|c| (c / total).powi(2)).sum();
    if (1.0 - p_e).abs() < f64::EPSILON {
        // a single category everywhere: agreement is perfect
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}
