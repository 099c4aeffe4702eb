//! Closed simile extraction, component annotation, property normalization
//! and corpus statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::record::{position_of, tokenize_line, Position, SimileRecord, Source, Span, Spans};

/// Universal part-of-speech tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
}

impl Pos {
    /// Accepts UPOS tags and the common Penn Treebank tags.
    pub fn parse(tag: &str) -> Option<Pos> {
        let t = tag.trim().to_ascii_uppercase();
        let pos = match t.as_str() {
            "ADJ" | "JJ" | "JJR" | "JJS" => Pos::Adj,
            "ADP" | "IN" => Pos::Adp,
            "ADV" | "RB" | "RBR" | "RBS" | "WRB" => Pos::Adv,
            "AUX" | "MD" => Pos::Aux,
            "CCONJ" | "CC" => Pos::Cconj,
            "DET" | "DT" | "PDT" | "WDT" => Pos::Det,
            "INTJ" | "UH" => Pos::Intj,
            "NOUN" | "NN" | "NNS" => Pos::Noun,
            "NUM" | "CD" => Pos::Num,
            "PART" | "RP" | "TO" | "POS" => Pos::Part,
            "PRON" | "PRP" | "PRP$" | "WP" | "WP$" | "EX" => Pos::Pron,
            "PROPN" | "NNP" | "NNPS" => Pos::Propn,
            "PUNCT" | "." | "," | ":" | "``" | "''" | "-LRB-" | "-RRB-" => Pos::Punct,
            "SCONJ" => Pos::Sconj,
            "SYM" | "$" | "#" => Pos::Sym,
            "VERB" | "VB" | "VBD" | "VBG" | "VBN" | "VBP" | "VBZ" => Pos::Verb,
            "X" | "FW" | "LS" => Pos::X,
            _ => return None,
        };
        Some(pos)
    }

    fn is_nominal(self) -> bool {
        matches!(self, Pos::Noun | Pos::Propn)
    }
}

pub trait PosTagger {
    /// One tag per token, or `None` when the line cannot be tagged.
    fn tag(&self, tokens: &[String]) -> Option<Vec<Pos>>;
}

const CLOSED_CLASS: &[(&str, Pos)] = &[
    ("a", Pos::Det),
    ("an", Pos::Det),
    ("the", Pos::Det),
    ("this", Pos::Det),
    ("that", Pos::Det),
    ("these", Pos::Det),
    ("those", Pos::Det),
    ("my", Pos::Pron),
    ("your", Pos::Pron),
    ("his", Pos::Pron),
    ("her", Pos::Pron),
    ("its", Pos::Pron),
    ("our", Pos::Pron),
    ("their", Pos::Pron),
    ("i", Pos::Pron),
    ("you", Pos::Pron),
    ("he", Pos::Pron),
    ("she", Pos::Pron),
    ("it", Pos::Pron),
    ("we", Pos::Pron),
    ("they", Pos::Pron),
    ("me", Pos::Pron),
    ("him", Pos::Pron),
    ("us", Pos::Pron),
    ("them", Pos::Pron),
    ("is", Pos::Aux),
    ("are", Pos::Aux),
    ("was", Pos::Aux),
    ("were", Pos::Aux),
    ("am", Pos::Aux),
    ("be", Pos::Aux),
    ("been", Pos::Aux),
    ("being", Pos::Aux),
    ("has", Pos::Aux),
    ("have", Pos::Aux),
    ("had", Pos::Aux),
    ("will", Pos::Aux),
    ("would", Pos::Aux),
    ("can", Pos::Aux),
    ("could", Pos::Aux),
    ("should", Pos::Aux),
    ("must", Pos::Aux),
    ("may", Pos::Aux),
    ("might", Pos::Aux),
    ("do", Pos::Aux),
    ("does", Pos::Aux),
    ("did", Pos::Aux),
    ("as", Pos::Adp),
    ("like", Pos::Adp),
    ("of", Pos::Adp),
    ("in", Pos::Adp),
    ("on", Pos::Adp),
    ("at", Pos::Adp),
    ("to", Pos::Adp),
    ("for", Pos::Adp),
    ("with", Pos::Adp),
    ("from", Pos::Adp),
    ("by", Pos::Adp),
    ("after", Pos::Adp),
    ("before", Pos::Adp),
    ("around", Pos::Adv),
    ("well", Pos::Adv),
    ("so", Pos::Adv),
    ("very", Pos::Adv),
    ("much", Pos::Adv),
    ("not", Pos::Part),
    ("and", Pos::Cconj),
    ("or", Pos::Cconj),
    ("but", Pos::Cconj),
    ("if", Pos::Sconj),
    ("because", Pos::Sconj),
    ("when", Pos::Sconj),
];

/// Word-list tagger. Open-class words come from a lexicon file; unknown
/// words make the line untaggable unless suffix fallback is enabled.
#[derive(Clone, Debug)]
pub struct LexiconTagger {
    lexicon: HashMap<String, Pos>,
    fallback: bool,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        let lexicon = CLOSED_CLASS
            .iter()
            .map(|(w, p)| (w.to_string(), *p))
            .collect();
        LexiconTagger {
            lexicon,
            fallback: false,
        }
    }
}

impl LexiconTagger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(mut self, fallback: bool) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn insert(&mut self, word: &str, pos: Pos) {
        self.lexicon.insert(word.to_lowercase(), pos);
    }

    pub fn with_words(mut self, words: &[(&str, Pos)]) -> Self {
        for (w, p) in words {
            self.insert(w, *p);
        }
        self
    }

    /// Reads `word<TAB>tag` lines; malformed lines are ignored.
    pub fn load_tsv<R: BufRead>(mut self, reader: R) -> std::io::Result<Self> {
        for line in reader.lines() {
            let line = line?;
            let mut parts = line.split('\t');
            if let (Some(w), Some(t)) = (parts.next(), parts.next()) {
                if let Some(pos) = Pos::parse(t) {
                    self.insert(w, pos);
                }
            }
        }
        Ok(self)
    }

    fn guess(word: &str) -> Pos {
        let lower = word.to_lowercase();
        if word.chars().all(|c| c.is_ascii_punctuation()) {
            return Pos::Punct;
        }
        if word.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',') {
            return Pos::Num;
        }
        if word.chars().next().is_some_and(char::is_uppercase) {
            return Pos::Propn;
        }
        const ADJ_SUFFIXES: &[&str] = &[
            "ous", "ful", "ive", "able", "ible", "less", "ish", "ic", "al", "y",
        ];
        if lower.ends_with("ly") {
            Pos::Adv
        } else if lower.ends_with("ing") || lower.ends_with("ed") {
            Pos::Verb
        } else if ADJ_SUFFIXES.iter().any(|s| lower.ends_with(s)) {
            Pos::Adj
        } else {
            Pos::Noun
        }
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Option<Vec<Pos>> {
        tokens
            .iter()
            .map(|t| {
                if let Some(p) = self.lexicon.get(&t.to_lowercase()) {
                    return Some(*p);
                }
                if t.chars().all(|c| c.is_ascii_punctuation()) {
                    return Some(Pos::Punct);
                }
                self.fallback.then(|| Self::guess(t))
            })
            .collect()
    }
}

/// Which surface pattern the extractor matches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternMode {
    /// `as ADJ as (a|an|the) ... NOUN`
    #[default]
    Strict,
    /// `NOUN ... as ADJ as ... NOUN`, used for supervision mining.
    Loose,
}

/// Tokens allowed between the determiner (or second `as`) and the vehicle noun.
pub const MAX_INTERVENING: usize = 3;

#[derive(Clone, Debug, Default)]
pub struct Extraction {
    pub records: Vec<SimileRecord>,
    pub untaggable: usize,
}

fn is_as(tok: &str) -> bool {
    tok.eq_ignore_ascii_case("as")
}

fn is_article(tok: &str) -> bool {
    matches!(tok.to_ascii_lowercase().as_str(), "a" | "an" | "the")
}

/// Finds the vehicle head starting the search at `from`: the first nominal
/// within the allowed window, extended over a following compound run.
fn find_vehicle(tokens: &[String], tags: &[Pos], from: usize) -> Option<usize> {
    let limit = (from + MAX_INTERVENING + 1).min(tokens.len());
    let mut j = from;
    while j < limit {
        if tags[j] == Pos::Punct || is_as(&tokens[j]) {
            return None;
        }
        if tags[j].is_nominal() {
            let mut k = j;
            while k + 1 < tokens.len() && tags[k + 1].is_nominal() {
                k += 1;
            }
            return Some(k);
        }
        j += 1;
    }
    None
}

fn match_at(tokens: &[String], tags: &[Pos], i: usize, mode: PatternMode) -> Option<(usize, usize)> {
    if i + 3 >= tokens.len() {
        return None;
    }
    if !is_as(&tokens[i]) || tags[i + 1] != Pos::Adj || !is_as(&tokens[i + 2]) {
        return None;
    }
    let vehicle = match mode {
        PatternMode::Strict => {
            if !is_article(&tokens[i + 3]) {
                return None;
            }
            find_vehicle(tokens, tags, i + 4)?
        }
        PatternMode::Loose => {
            let has_subject = tags[..i]
                .iter()
                .any(|t| matches!(t, Pos::Noun | Pos::Propn | Pos::Pron));
            if !has_subject {
                return None;
            }
            let start = if tags[i + 3] == Pos::Det { i + 4 } else { i + 3 };
            find_vehicle(tokens, tags, start)?
        }
    };
    Some((i + 1, vehicle))
}

/// Pattern-matches closed similes in already tokenized and tagged text.
pub fn match_similes(
    tokens: &[String],
    tags: &[Pos],
    mode: PatternMode,
    source: Source,
) -> Vec<SimileRecord> {
    debug_assert_eq!(tokens.len(), tags.len());
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Some((prop, vehicle)) = match_at(tokens, tags, i, mode) {
            let spans = Spans {
                topic: Span::EMPTY,
                property: Span::single(prop),
                vehicle: Span::single(vehicle),
                event: Span::EMPTY,
                comparator: vec![Span::single(i), Span::single(i + 2)],
            };
            if let Ok(r) = SimileRecord::new(tokens.to_vec(), spans, source) {
                out.push(r);
            }
            i = vehicle + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Extracts one record per pattern hit. Lines the tagger cannot handle are
/// skipped and counted.
pub fn extract_similes<I, S>(
    lines: I,
    tagger: &dyn PosTagger,
    mode: PatternMode,
    source: Source,
) -> Extraction
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut ex = Extraction::default();
    for line in lines {
        let tokens = tokenize_line(line.as_ref());
        if tokens.is_empty() {
            continue;
        }
        match tagger.tag(&tokens) {
            Some(tags) if tags.len() == tokens.len() => {
                ex.records.extend(match_similes(&tokens, &tags, mode, source));
            }
            _ => ex.untaggable += 1,
        }
    }
    ex
}

/// One token of a dependency parse (UD conventions).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedToken {
    pub upos: Pos,
    pub head: Option<usize>,
    pub deprel: String,
}

pub trait DependencyParser {
    fn parse(&self, tokens: &[String]) -> Option<Vec<ParsedToken>>;
}

/// Parses looked up from a CoNLL-U file keyed by their token sequence.
#[derive(Clone, Debug, Default)]
pub struct ConlluParser {
    parses: HashMap<Vec<String>, Vec<ParsedToken>>,
}

impl ConlluParser {
    pub fn load<R: BufRead>(reader: R) -> std::io::Result<Self> {
        let mut parses = HashMap::new();
        let mut forms = Vec::new();
        let mut toks = Vec::new();
        let mut flush = |forms: &mut Vec<String>, toks: &mut Vec<ParsedToken>| {
            if !forms.is_empty() {
                parses.insert(std::mem::take(forms), std::mem::take(toks));
            }
        };
        for line in reader.lines() {
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                flush(&mut forms, &mut toks);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            // skip multiword ranges and empty nodes
            if cols.len() < 8 || cols[0].contains('-') || cols[0].contains('.') {
                continue;
            }
            let head: usize = cols[6].parse().unwrap_or(0);
            forms.push(cols[1].to_string());
            toks.push(ParsedToken {
                upos: Pos::parse(cols[3]).unwrap_or(Pos::X),
                head: head.checked_sub(1),
                deprel: cols[7].to_string(),
            });
        }
        flush(&mut forms, &mut toks);
        Ok(ConlluParser { parses })
    }

    pub fn len(&self) -> usize {
        self.parses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parses.is_empty()
    }
}

impl DependencyParser for ConlluParser {
    fn parse(&self, tokens: &[String]) -> Option<Vec<ParsedToken>> {
        self.parses.get(tokens).cloned()
    }
}

const COPULAS: &[&str] = &["is", "are", "was", "were", "am", "be", "been", "being", "'s", "'re", "'m"];

fn is_copula(word: &str) -> bool {
    COPULAS.contains(&word.to_lowercase().as_str())
}

/// Shallow rule-based parser: attaches each `as ADJ as` property to the
/// nearest predicate on its left and that predicate to the nearest nominal
/// before it, within the clause.
pub struct HeuristicParser<T: PosTagger> {
    tagger: T,
}

impl<T: PosTagger> HeuristicParser<T> {
    pub fn new(tagger: T) -> Self {
        HeuristicParser { tagger }
    }
}

fn clause_break(tok: &str, pos: Pos) -> bool {
    pos == Pos::Punct && matches!(tok, "." | "!" | "?" | ";" | ":")
}

impl<T: PosTagger> DependencyParser for HeuristicParser<T> {
    fn parse(&self, tokens: &[String]) -> Option<Vec<ParsedToken>> {
        let tags = self.tagger.tag(tokens)?;
        let mut out: Vec<ParsedToken> = tags
            .iter()
            .map(|&upos| ParsedToken {
                upos,
                head: None,
                deprel: "dep".into(),
            })
            .collect();
        let n = tokens.len();
        for a in 1..n.saturating_sub(1) {
            if !(tags[a] == Pos::Adj && is_as(&tokens[a - 1]) && is_as(&tokens[a + 1])) {
                continue;
            }
            // nearest predicate to the left of the first comparator
            let mut pred = None;
            for j in (0..a - 1).rev() {
                if clause_break(&tokens[j], tags[j]) {
                    break;
                }
                if matches!(tags[j], Pos::Verb | Pos::Aux) {
                    pred = Some(j);
                    break;
                }
            }
            let Some(p) = pred else { continue };
            let (governor, event_start) = if is_copula(&tokens[p]) && tags[p] == Pos::Aux {
                out[p].head = Some(a);
                out[p].deprel = "cop".into();
                (a, p)
            } else {
                out[a].head = Some(p);
                out[a].deprel = "advmod".into();
                let mut s = p;
                while s > 0 && tags[s - 1] == Pos::Aux {
                    out[s - 1].head = Some(p);
                    out[s - 1].deprel = "aux".into();
                    s -= 1;
                }
                (p, s)
            };
            for j in (0..event_start).rev() {
                if clause_break(&tokens[j], tags[j]) {
                    break;
                }
                if matches!(tags[j], Pos::Noun | Pos::Propn | Pos::Pron) {
                    out[j].head = Some(governor);
                    out[j].deprel = "nsubj".into();
                    break;
                }
            }
        }
        Some(out)
    }
}

/// Result of component annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotated {
    pub record: SimileRecord,
    /// True when no subject was found and the record needs human review.
    pub flagged: bool,
}

fn children<'a>(parse: &'a [ParsedToken], head: usize) -> impl Iterator<Item = usize> + 'a {
    parse
        .iter()
        .enumerate()
        .filter(move |(_, t)| t.head == Some(head))
        .map(|(i, _)| i)
}

fn deprel_base(rel: &str) -> &str {
    rel.split(':').next().unwrap_or(rel)
}

/// Fills topic and event spans from a dependency parse. Input is not mutated.
pub fn annotate_components(record: &SimileRecord, parser: &dyn DependencyParser) -> Annotated {
    if record.is_annotated() {
        return Annotated {
            record: record.clone(),
            flagged: record.needs_review,
        };
    }
    let mut out = record.clone();
    let parse = parser
        .parse(&record.tokens)
        .filter(|p| p.len() == record.tokens.len());
    let (mut topic, mut event) = (record.spans.topic, record.spans.event);
    if let Some(parse) = parse {
        let prop = record.spans.property.start;
        let cop = children(&parse, prop).find(|&c| deprel_base(&parse[c].deprel) == "cop");
        let governor = if let Some(c) = cop {
            if event.is_empty() {
                event = Span::single(c);
            }
            Some(prop)
        } else {
            // climb to the governing verb
            let mut h = parse[prop].head;
            let mut steps = 0;
            while let Some(x) = h {
                if matches!(parse[x].upos, Pos::Verb | Pos::Aux) || steps > parse.len() {
                    break;
                }
                h = parse[x].head;
                steps += 1;
            }
            if let Some(v) = h.filter(|&v| matches!(parse[v].upos, Pos::Verb | Pos::Aux)) {
                if event.is_empty() {
                    let mut start = v;
                    while start > 0
                        && parse[start - 1].head == Some(v)
                        && deprel_base(&parse[start - 1].deprel) == "aux"
                    {
                        start -= 1;
                    }
                    event = Span::new(start, v + 1);
                }
                Some(v)
            } else {
                None
            }
        };
        if topic.is_empty() {
            // subject of the governor, or of an ancestor (xcomp / conj chains)
            let mut g = governor;
            let mut steps = 0;
            while let Some(x) = g {
                if let Some(s) = children(&parse, x).find(|&c| deprel_base(&parse[c].deprel) == "nsubj") {
                    topic = Span::single(s);
                    break;
                }
                g = parse[x].head;
                steps += 1;
                if steps > parse.len() {
                    break;
                }
            }
        }
    }
    let others = [record.spans.property, record.spans.vehicle];
    let collides = |s: &Span| {
        others.iter().chain(record.spans.comparator.iter()).any(|o| o.overlaps(s))
    };
    if collides(&event) {
        event = record.spans.event;
    }
    if collides(&topic) || topic.overlaps(&event) {
        topic = record.spans.topic;
    }
    out.spans.topic = topic;
    out.spans.event = event;
    let flagged = topic.is_empty();
    out.needs_review = flagged;
    debug_assert!(out.validate().is_ok());
    Annotated { record: out, flagged }
}

pub trait SynonymLookup {
    fn synonyms(&self, phrase: &str) -> Vec<String>;
}

/// Phrase → synonyms table, keyed case-insensitively with `_` and spaces unified.
#[derive(Clone, Debug, Default)]
pub struct SynonymTable {
    map: HashMap<String, Vec<String>>,
}

fn phrase_key(s: &str) -> String {
    s.to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl SynonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, phrase: &str, synonyms: &[&str]) {
        self.map
            .entry(phrase_key(phrase))
            .or_default()
            .extend(synonyms.iter().map(|s| s.to_string()));
    }

    /// Reads `phrase<TAB>syn1,syn2,...` lines.
    pub fn load_tsv<R: BufRead>(reader: R) -> std::io::Result<Self> {
        let mut t = SynonymTable::new();
        for line in reader.lines() {
            let line = line?;
            if let Some((phrase, syns)) = line.split_once('\t') {
                let syns: Vec<&str> = syns.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                t.insert(phrase, &syns);
            }
        }
        Ok(t)
    }
}

impl SynonymLookup for SynonymTable {
    fn synonyms(&self, phrase: &str) -> Vec<String> {
        self.map.get(&phrase_key(phrase)).cloned().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropReason {
    pub code: &'static str,
    pub property: String,
}

pub const NO_SINGLE_TOKEN_SYNONYM: &str = "no_single_token_synonym";

fn is_single_word(s: &str) -> bool {
    !s.is_empty() && !s.contains(['_', ' ', '-']) && s.chars().all(char::is_alphabetic)
}

/// Replaces a multi-token property by its first single-token synonym.
pub fn normalize_property(
    record: &SimileRecord,
    synonyms: &dyn SynonymLookup,
) -> Result<SimileRecord, DropReason> {
    let span = record.spans.property;
    if span.len() <= 1 {
        return Ok(record.clone());
    }
    let phrase = record.property();
    let Some(syn) = synonyms
        .synonyms(&phrase)
        .into_iter()
        .find(|s| is_single_word(s))
    else {
        return Err(DropReason {
            code: NO_SINGLE_TOKEN_SYNONYM,
            property: phrase,
        });
    };
    let mut out = record.clone();
    out.tokens.splice(span.range(), std::iter::once(syn));
    out.spans = record.spans.shifted(span.start, span.len(), 1);
    out.position = position_of(out.tokens.len(), &out.spans.comparator)
        .expect("comparator survives normalization");
    debug_assert!(out.validate().is_ok());
    Ok(out)
}

pub fn classify_position(record: &SimileRecord) -> Position {
    position_of(record.tokens.len(), &record.spans.comparator).unwrap_or(Position::Start)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sentences: usize,
    pub unique_topic: usize,
    pub unique_property: usize,
    pub unique_vehicle: usize,
    pub unique_event: usize,
    pub unique_topic_vehicle: usize,
    pub unique_topic_property_vehicle: usize,
    pub min_length: usize,
    pub avg_length: f64,
    pub max_length: usize,
    /// Fraction of records at each position.
    pub positions: BTreeMap<Position, f64>,
}

pub fn dataset_stats(records: &[SimileRecord]) -> DatasetStats {
    let norm = |r: &SimileRecord, s: Span| r.span_text(s).to_lowercase();
    let uniq = |f: &dyn Fn(&SimileRecord) -> String| {
        records
            .iter()
            .map(f)
            .filter(|s| !s.is_empty())
            .collect::<HashSet<_>>()
            .len()
    };
    let unique_topic = uniq(&|r| norm(r, r.spans.topic));
    let unique_property = uniq(&|r| norm(r, r.spans.property));
    let unique_vehicle = uniq(&|r| norm(r, r.spans.vehicle));
    let unique_event = uniq(&|r| norm(r, r.spans.event));
    let tv: HashSet<(String, String)> = records
        .iter()
        .map(|r| (norm(r, r.spans.topic), norm(r, r.spans.vehicle)))
        .collect();
    let tpv: HashSet<(String, String, String)> = records
        .iter()
        .map(|r| {
            (
                norm(r, r.spans.topic),
                norm(r, r.spans.property),
                norm(r, r.spans.vehicle),
            )
        })
        .collect();
    let lens: Vec<usize> = records.iter().map(|r| r.tokens.len()).collect();
    let n = records.len();
    let mut positions: BTreeMap<Position, f64> = [Position::Start, Position::Middle, Position::End]
        .into_iter()
        .map(|p| (p, 0.0))
        .collect();
    if n > 0 {
        for r in records {
            *positions.get_mut(&classify_position(r)).unwrap() += 1.0;
        }
        for v in positions.values_mut() {
            *v /= n as f64;
        }
    }
    DatasetStats {
        sentences: n,
        unique_topic,
        unique_property,
        unique_vehicle,
        unique_event,
        unique_topic_vehicle: tv.len(),
        unique_topic_property_vehicle: tpv.len(),
        min_length: lens.iter().copied().min().unwrap_or(0),
        avg_length: if n == 0 { 0.0 } else { lens.iter().sum::<usize>() as f64 / n as f64 },
        max_length: lens.iter().copied().max().unwrap_or(0),
        positions,
    }
}
