//! Reading published probe sets into [`ProbeItem`]s.
//!
//! Accepts a JSON array or JSON lines. Rows already in the native item
//! layout are taken as they are; other rows are mapped through a set of
//! common field names (sentence / options / answer / topic / vehicle ...).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use simile_core::distractor::{Origin, ProbeItem};
use simile_core::lm::MASK;
use simile_core::record::tokenize_line;
use simile_core::{Category, Span, Spans};

use crate::store::{require_path, sha256_hex};

pub const GENERAL_CORPUS_SIZE: usize = 775;
pub const QUIZZES_SIZE: usize = 858;

const SENTENCE_KEYS: &[&str] = &["masked_sentence", "sentence", "text", "simile", "question", "context", "query"];
const OPTION_KEYS: &[&str] = &["options", "choices", "candidates", "option"];
const ANSWER_KEYS: &[&str] = &["answer_index", "answer_idx", "label", "answer", "gold", "property", "target"];
const TOPIC_KEYS: &[&str] = &["topic", "tenor"];
const VEHICLE_KEYS: &[&str] = &["vehicle"];
const EVENT_KEYS: &[&str] = &["event", "predicate"];
const CATEGORY_KEYS: &[&str] = &["category", "type", "property_type"];
const ID_KEYS: &[&str] = &["id", "record_id", "idx", "uid"];
const MASK_MARKERS: &[&str] = &["[MASK]", "[mask]", "<mask>", "[BLANK]", "<blank>"];

/// Expected item count for a released file, from its name.
pub fn expected_count(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_string_lossy().to_lowercase();
    if stem.contains("quiz") {
        Some(QUIZZES_SIZE)
    } else if stem.contains("general") || stem.starts_with("gc") || stem.contains("_gc") {
        Some(GENERAL_CORPUS_SIZE)
    } else {
        None
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rejected {
    /// 1-based row number in the file.
    pub row: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportReport {
    pub path: PathBuf,
    pub expected: Option<usize>,
    pub rows: usize,
    pub imported: usize,
    pub rejected: Vec<Rejected>,
    pub duplicate_ids: Vec<String>,
}

impl ImportReport {
    pub fn count_matches(&self) -> bool {
        self.expected.is_none_or(|e| e == self.imported)
    }
}

impl fmt::Display for ImportReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} rows, {} imported", self.path.display(), self.rows, self.imported)?;
        if let Some(e) = self.expected {
            if e != self.imported {
                let d = self.imported as i64 - e as i64;
                write!(f, ", expected {e} ({d:+})")?;
            }
        }
        for r in &self.rejected {
            write!(f, "\n  row {}: {}", r.row, r.reason)?;
        }
        if !self.duplicate_ids.is_empty() {
            write!(f, "\n  duplicate ids: {}", self.duplicate_ids.join(", "))?;
        }
        Ok(())
    }
}

fn rows(text: &str) -> Result<Vec<Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    if trimmed.starts_with('{') {
        // a single object holding the list under some key, or JSON lines
        if let Ok(Value::Object(m)) = serde_json::from_str::<Value>(trimmed) {
            if let Some(list) = m.values().find_map(|v| v.as_array()) {
                if list.iter().all(Value::is_object) && !list.is_empty() {
                    return Ok(list.clone());
                }
            }
            return Ok(vec![Value::Object(m)]);
        }
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("line {}", i + 1)))
        .collect()
}

fn field<'a>(m: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| {
        m.get(*k)
            .or_else(|| m.iter().find(|(name, _)| name.eq_ignore_ascii_case(k)).map(|(_, v)| v))
            .filter(|v| !v.is_null())
    })
}

fn text_field(m: &Map<String, Value>, keys: &[&str]) -> Option<String> {
    match field(m, keys)? {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Array(a) => {
            let parts: Vec<&str> = a.iter().filter_map(Value::as_str).collect();
            (!parts.is_empty()).then(|| parts.join(" "))
        }
        _ => None,
    }
}

fn options_of(m: &Map<String, Value>) -> Result<Vec<String>, String> {
    match field(m, OPTION_KEYS) {
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.trim().to_string()),
                Value::Object(o) => text_field(o, &["text", "option", "word", "value"]).ok_or("option object without text".to_string()),
                other => Err(format!("option {other} is not a string")),
            })
            .collect(),
        Some(Value::Object(o)) => {
            // {"A": "busy", "B": ...}
            let mut keys: Vec<&String> = o.keys().collect();
            keys.sort();
            keys.into_iter()
                .map(|k| o[k].as_str().map(|s| s.trim().to_string()).ok_or(format!("option {k} is not a string")))
                .collect()
        }
        Some(Value::String(s)) => Ok(s.split(['|', ',', ';']).map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()),
        _ => Err("no options field".into()),
    }
}

fn answer_of(m: &Map<String, Value>, options: &[String]) -> Result<usize, String> {
    let v = field(m, ANSWER_KEYS).ok_or("no answer field")?;
    let find = |s: &str| options.iter().position(|o| o.eq_ignore_ascii_case(s.trim()));
    match v {
        Value::Number(n) => {
            let i = n.as_u64().ok_or(format!("answer {n} is not an index"))? as usize;
            if i < options.len() {
                Ok(i)
            } else {
                Err(format!("answer index {i} out of range"))
            }
        }
        Value::String(s) => {
            if let Some(i) = find(s) {
                return Ok(i);
            }
            let t = s.trim().to_ascii_uppercase();
            if t.len() == 1 {
                let i = t.as_bytes()[0].wrapping_sub(b'A') as usize;
                if i < options.len() {
                    return Ok(i);
                }
            }
            if let Ok(i) = t.parse::<usize>() {
                if i < options.len() {
                    return Ok(i);
                }
            }
            Err(format!("answer '{s}' matches no option"))
        }
        other => Err(format!("answer {other} not understood")),
    }
}

fn normalize_markers(sentence: &str) -> String {
    let mut s = sentence.to_string();
    for m in MASK_MARKERS {
        s = s.replace(m, &format!(" {MASK} "));
    }
    s.split_whitespace()
        .map(|w| {
            let core = w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '_');
            if !core.is_empty() && core.chars().all(|c| c == '_') {
                w.replacen(core, &format!(" {MASK} "), 1)
            } else {
                w.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn masked_tokens(sentence: &str, gold: &str) -> Result<Vec<String>, String> {
    let tokens = tokenize_line(&normalize_markers(sentence));
    match tokens.iter().filter(|t| *t == MASK).count() {
        1 => return Ok(tokens),
        0 => {}
        n => return Err(format!("{n} mask markers")),
    }
    // unmasked sentence: hide the gold word between the comparators
    let mut tokens = tokenize_line(sentence);
    let hits: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i].eq_ignore_ascii_case(gold)).collect();
    let pick = hits
        .iter()
        .copied()
        .find(|&i| i > 0 && i + 1 < tokens.len() && tokens[i - 1].eq_ignore_ascii_case("as") && tokens[i + 1].eq_ignore_ascii_case("as"))
        .or_else(|| hits.first().copied())
        .ok_or("sentence has no mask and does not contain the answer")?;
    tokens[pick] = MASK.to_string();
    Ok(tokens)
}

fn locate(tokens: &[String], phrase: &str, mask: usize, after: bool) -> Span {
    let words = tokenize_line(phrase);
    if words.is_empty() || words.len() > tokens.len() {
        return Span::EMPTY;
    }
    let hits: Vec<usize> = (0..=tokens.len() - words.len())
        .filter(|&s| !(s..s + words.len()).contains(&mask))
        .filter(|&s| words.iter().enumerate().all(|(k, w)| tokens[s + k].eq_ignore_ascii_case(w)))
        .collect();
    let preferred = if after {
        hits.iter().copied().find(|&s| s > mask)
    } else {
        hits.iter().rev().copied().find(|&s| s < mask)
    };
    preferred
        .or_else(|| hits.first().copied())
        .map(|s| Span::new(s, s + words.len()))
        .unwrap_or(Span::EMPTY)
}

fn comparators(tokens: &[String], mask: usize) -> Vec<Span> {
    let is = |i: usize, w: &str| tokens.get(i).is_some_and(|t| t.eq_ignore_ascii_case(w));
    let mut out = Vec::new();
    if mask > 0 && is(mask - 1, "as") {
        out.push(Span::single(mask - 1));
    }
    if is(mask + 1, "as") {
        out.push(Span::single(mask + 1));
    } else if let Some(i) = (mask + 1..tokens.len()).find(|&i| is(i, "like") || is(i, "as")) {
        out.push(Span::single(i));
    }
    out
}

fn convert(m: &Map<String, Value>) -> Result<ProbeItem, String> {
    if m.contains_key("masked_tokens") {
        return serde_json::from_value(Value::Object(m.clone())).map_err(|e| e.to_string());
    }
    let options = options_of(m)?;
    let answer_index = answer_of(m, &options)?;
    let sentence = text_field(m, SENTENCE_KEYS).ok_or("no sentence field")?;
    let tokens = masked_tokens(&sentence, &options[answer_index])?;
    let mask = tokens.iter().position(|t| t == MASK).expect("one mask");
    let find = |keys: &[&str], after: bool| text_field(m, keys).map(|p| locate(&tokens, &p, mask, after)).unwrap_or(Span::EMPTY);
    let spans = Spans {
        topic: find(TOPIC_KEYS, false),
        property: Span::single(mask),
        vehicle: find(VEHICLE_KEYS, true),
        event: find(EVENT_KEYS, false),
        comparator: comparators(&tokens, mask),
    };
    let record_id = match field(m, ID_KEYS) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => sha256_hex(sentence.as_bytes())[..16].to_string(),
    };
    Ok(ProbeItem {
        masked_tokens: tokens,
        options,
        answer_index,
        origins: vec![Origin::Unknown; 3],
        record_id,
        spans: Some(spans),
        category: text_field(m, CATEGORY_KEYS).and_then(|c| Category::parse(&c)),
    })
}

/// Reads a released probe file. Rows that cannot be mapped are reported,
/// not fatal; the count is checked against `expected` (or the size implied
/// by the file name) and any difference is described in the report.
pub fn import_released_dataset(path: &Path, expected: Option<usize>) -> Result<(Vec<ProbeItem>, ImportReport)> {
    require_path("path", path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let values = rows(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut report = ImportReport {
        path: path.to_path_buf(),
        expected: expected.or_else(|| expected_count(path)),
        rows: values.len(),
        ..ImportReport::default()
    };
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, v) in values.iter().enumerate() {
        let result = match v {
            Value::Object(m) => convert(m),
            _ => Err("row is not an object".into()),
        }
        .and_then(|it| it.validate().map(|_| it).map_err(|e| e.to_string()));
        match result {
            Ok(item) => {
                if !seen.insert(item.record_id.clone()) {
                    report.duplicate_ids.push(item.record_id.clone());
                }
                items.push(item);
            }
            Err(reason) => report.rejected.push(Rejected { row: i + 1, reason }),
        }
    }
    report.imported = items.len();
    Ok((items, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn maps_common_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "sample.jsonl",
            concat!(
                r#"{"sentence": "The toddler was as [MASK] as a bee.", "options": ["idle", "busy", "yellow", "messy"], "answer": "busy", "topic": "toddler", "vehicle": "bee", "event": "was", "category": "qualities"}"#,
                "\n",
                r#"{"masked_sentence": "He runs as _ as a deer", "choices": {"A": "slow", "B": "fast", "C": "old", "D": "quick"}, "label": 1}"#,
                "\n"
            ),
        );
        let (items, report) = import_released_dataset(&p, None).unwrap();
        assert_eq!(report.imported, 2, "{report}");
        let a = &items[0];
        assert_eq!(a.gold(), "busy");
        assert_eq!(a.sentence(), "The toddler was as [MASK] as a bee .");
        let s = a.spans.as_ref().unwrap();
        assert_eq!(s.topic, Span::single(1));
        assert_eq!(s.vehicle, Span::single(7));
        assert_eq!(s.event, Span::single(2));
        assert_eq!(s.comparator, vec![Span::single(3), Span::single(5)]);
        assert_eq!(a.category, Some(Category::Qualities));
        assert_eq!(items[1].gold(), "fast");
        assert_eq!(items[1].masked_tokens[3], MASK);
    }

    #[test]
    fn truncated_file_reports_the_shortfall() {
        let dir = tempfile::tempdir().unwrap();
        let row = |i: usize| {
            format!(r#"{{"id": {i}, "sentence": "it was as [MASK] as ice {i}", "options": ["cold", "warm", "hot", "dry"], "answer": 0}}"#)
        };
        let body: Vec<String> = (0..10).map(row).collect();
        let p = write(dir.path(), "quizzes.jsonl", &body.join("\n"));
        let (items, report) = import_released_dataset(&p, None).unwrap();
        assert_eq!(items.len(), 10);
        assert_eq!(report.expected, Some(QUIZZES_SIZE));
        assert!(!report.count_matches());
        assert!(report.to_string().contains("expected 858 (-848)"));
    }

    #[test]
    fn bad_rows_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "x.json",
            r#"[{"sentence": "as [MASK] as a rock", "options": ["hard", "hard", "soft", "wet"], "answer": 0},
               {"sentence": "no mask here", "options": ["a", "b", "c", "d"], "answer": 9},
               {"sentence": "as [MASK] as a rock", "options": ["hard", "firm", "soft", "wet"], "answer": "hard"}]"#,
        );
        let (items, report) = import_released_dataset(&p, Some(3)).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(report.rejected.iter().map(|r| r.row).collect::<Vec<_>>(), vec![1, 2]);
        assert!(!report.count_matches());
    }

    #[test]
    fn native_items_pass_through() {
        let item = ProbeItem {
            masked_tokens: "he is as [MASK] as a snail".split(' ').map(String::from).collect(),
            options: vec!["fast".into(), "slow".into(), "old".into(), "quick".into()],
            answer_index: 1,
            origins: vec![Origin::PropertyAntonym, Origin::Unknown, Origin::Unknown],
            record_id: "abc".into(),
            spans: None,
            category: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "general_corpus.jsonl", &serde_json::to_string(&item).unwrap());
        let (items, report) = import_released_dataset(&p, None).unwrap();
        assert_eq!(items, vec![item]);
        assert_eq!(report.expected, Some(GENERAL_CORPUS_SIZE));
    }

    #[test]
    fn expected_counts_from_names() {
        assert_eq!(expected_count(Path::new("data/Quizzes.json")), Some(858));
        assert_eq!(expected_count(Path::new("general_corpus.jsonl")), Some(775));
        assert_eq!(expected_count(Path::new("mine.jsonl")), None);
    }
}
