//! Lexical and commonsense resources consumed by distractor generation.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::Deserialize;

use crate::mining::Pos;

/// Relation lookups over a lexical / commonsense knowledge base.
pub trait KnowledgeBase {
    fn antonyms(&self, word: &str) -> Vec<String>;
    fn has_property(&self, word: &str) -> Vec<String>;
}

/// Properties produced by a generative commonsense model for a concept.
pub trait PropertyGenerator {
    fn properties(&self, concept: &str) -> Vec<String>;
}

impl<T: KnowledgeBase + ?Sized> KnowledgeBase for &T {
    fn antonyms(&self, word: &str) -> Vec<String> {
        (**self).antonyms(word)
    }
    fn has_property(&self, word: &str) -> Vec<String> {
        (**self).has_property(word)
    }
}

/// In-memory relation store, loadable from ConceptNet assertion dumps or a
/// plain `relation<TAB>head<TAB>tail` file.
#[derive(Clone, Debug, Default)]
pub struct RelationStore {
    antonyms: HashMap<String, Vec<String>>,
    has_property: HashMap<String, Vec<String>>,
}

fn concept_word(uri: &str) -> Option<String> {
    // /c/en/busy or /c/en/busy/a or /c/en/ice_cream/n
    let rest = uri.strip_prefix("/c/en/")?;
    let word = rest.split('/').next()?;
    Some(word.replace('_', " ").to_lowercase())
}

fn push_unique(map: &mut HashMap<String, Vec<String>>, key: String, value: String) {
    let e = map.entry(key).or_default();
    if !e.contains(&value) {
        e.push(value);
    }
}

impl RelationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_antonym(&mut self, a: &str, b: &str) {
        let (a, b) = (a.to_lowercase(), b.to_lowercase());
        push_unique(&mut self.antonyms, a.clone(), b.clone());
        push_unique(&mut self.antonyms, b, a);
    }

    pub fn add_property(&mut self, concept: &str, property: &str) {
        push_unique(&mut self.has_property, concept.to_lowercase(), property.to_lowercase());
    }

    fn add(&mut self, relation: &str, head: &str, tail: &str) {
        match relation.trim_start_matches("/r/").to_ascii_lowercase().as_str() {
            "antonym" => self.add_antonym(head, tail),
            "hasproperty" => self.add_property(head, tail),
            _ => {}
        }
    }

    /// Reads ConceptNet 5 assertion CSV rows (`uri  relation  start  end  json`)
    /// and simple three-column rows. Only English Antonym / HasProperty are kept.
    pub fn load<R: BufRead>(mut self, reader: R) -> std::io::Result<Self> {
        for line in reader.lines() {
            let line = line?;
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.len() {
                3 => self.add(cols[0], cols[1], cols[2]),
                n if n >= 4 && cols[1].starts_with("/r/") => {
                    if let (Some(h), Some(t)) = (concept_word(cols[2]), concept_word(cols[3])) {
                        self.add(cols[1], &h, &t);
                    }
                }
                _ => {}
            }
        }
        Ok(self)
    }

    /// Reads WordNet-style antonym pairs, one `word<TAB>antonym` per line.
    pub fn load_antonym_pairs<R: BufRead>(mut self, reader: R) -> std::io::Result<Self> {
        for line in reader.lines() {
            let line = line?;
            if let Some((a, b)) = line.split_once('\t') {
                self.add_antonym(a.trim(), b.trim());
            }
        }
        Ok(self)
    }
}

impl KnowledgeBase for RelationStore {
    fn antonyms(&self, word: &str) -> Vec<String> {
        self.antonyms.get(&word.to_lowercase()).cloned().unwrap_or_default()
    }

    fn has_property(&self, word: &str) -> Vec<String> {
        self.has_property.get(&word.to_lowercase()).cloned().unwrap_or_default()
    }
}

/// Cached generations from a commonsense model, one JSON object per line:
/// `{"head": "bee", "relation": "HasProperty", "tails": ["busy", "yellow"]}`.
#[derive(Clone, Debug, Default)]
pub struct GenerationCache {
    properties: HashMap<String, Vec<String>>,
}

#[derive(Deserialize)]
struct GenerationLine {
    head: String,
    #[serde(default = "has_property_rel")]
    relation: String,
    tails: Vec<String>,
}

fn has_property_rel() -> String {
    "HasProperty".into()
}

impl GenerationCache {
    pub fn load<R: BufRead>(reader: R) -> Result<Self, serde_json::Error> {
        let mut properties: HashMap<String, Vec<String>> = HashMap::new();
        for line in reader.lines() {
            let line = line.map_err(serde_json::Error::io)?;
            if line.trim().is_empty() {
                continue;
            }
            let g: GenerationLine = serde_json::from_str(&line)?;
            if g.relation.eq_ignore_ascii_case("hasproperty") {
                let e = properties.entry(g.head.to_lowercase()).or_default();
                for t in g.tails {
                    let t = t.trim().to_lowercase();
                    if !t.is_empty() && !e.contains(&t) {
                        e.push(t);
                    }
                }
            }
        }
        Ok(GenerationCache { properties })
    }

    pub fn insert(&mut self, concept: &str, tails: &[&str]) {
        self.properties
            .entry(concept.to_lowercase())
            .or_default()
            .extend(tails.iter().map(|s| s.to_lowercase()));
    }
}

impl PropertyGenerator for GenerationCache {
    fn properties(&self, concept: &str) -> Vec<String> {
        self.properties.get(&concept.to_lowercase()).cloned().unwrap_or_default()
    }
}

/// Adjective / adverb modifier counts per component word.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CooccurrenceIndex {
    counts: HashMap<String, BTreeMap<String, u64>>,
}

/// Rank cap for co-occurrence candidates.
pub const COOCCURRENCE_TOP_K: usize = 10;

impl CooccurrenceIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, component: &str, modifier: &str, count: u64) {
        *self
            .counts
            .entry(component.to_lowercase())
            .or_default()
            .entry(modifier.to_lowercase())
            .or_default() += count;
    }

    pub fn modifiers(&self, component: &str) -> Option<&BTreeMap<String, u64>> {
        self.counts.get(&component.to_lowercase())
    }

    /// Reads `component<TAB>modifier<TAB>count` rows.
    pub fn load_tsv<R: BufRead>(reader: R) -> std::io::Result<Self> {
        let mut idx = CooccurrenceIndex::new();
        for line in reader.lines() {
            let line = line?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() == 3 {
                if let Ok(c) = cols[2].trim().parse() {
                    idx.add(cols[0], cols[1], c);
                }
            }
        }
        Ok(idx)
    }

    /// Counts `amod` / `advmod` adjective and adverb dependents in a parsed
    /// CoNLL-U corpus, keyed by the lemma of their head.
    pub fn accumulate_conllu<R: BufRead>(&mut self, reader: R) -> std::io::Result<()> {
        let mut sent: Vec<Vec<String>> = Vec::new();
        let flush = |sent: &mut Vec<Vec<String>>, idx: &mut CooccurrenceIndex| {
            for cols in sent.iter() {
                let rel = cols[7].split(':').next().unwrap_or("");
                let pos = Pos::parse(&cols[3]);
                if !matches!(rel, "amod" | "advmod") || !matches!(pos, Some(Pos::Adj | Pos::Adv)) {
                    continue;
                }
                let Ok(head) = cols[6].parse::<usize>() else { continue };
                if head == 0 {
                    continue;
                }
                if let Some(h) = sent.iter().find(|c| c[0] == head.to_string()) {
                    let lemma = if h[2] == "_" { &h[1] } else { &h[2] };
                    idx.add(lemma, &cols[1], 1);
                }
            }
            sent.clear();
        };
        for line in reader.lines() {
            let line = line?;
            let line = line.trim_end();
            if line.is_empty() {
                flush(&mut sent, self);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let cols: Vec<String> = line.split('\t').map(String::from).collect();
            if cols.len() >= 8 && !cols[0].contains(['-', '.']) {
                sent.push(cols);
            }
        }
        flush(&mut sent, self);
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut keys: Vec<&String> = self.counts.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            for (m, c) in &self.counts[k] {
                out.push_str(&format!("{k}\t{m}\t{c}\n"));
            }
        }
        out
    }
}

/// Top modifiers of `component` by frequency: count > 1, descending,
/// ties lexicographic, at most ten.
pub fn rank_cooccurrence(component: &str, index: &CooccurrenceIndex) -> Vec<(String, u64)> {
    let Some(mods) = index.modifiers(component) else {
        return Vec::new();
    };
    let mut ranked: Vec<(String, u64)> = mods
        .iter()
        .filter(|(_, &c)| c > 1)
        .map(|(m, &c)| (m.clone(), c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(COOCCURRENCE_TOP_K);
    ranked
}
