//! Closed simile records and their component spans.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::RecordError;

/// Half-open token range `[start, end)`. Serialized as a two-element array.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const EMPTY: Span = Span { start: 0, end: 0 };

    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn single(index: usize) -> Self {
        Span::new(index, index + 1)
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        !self.is_empty() && !other.is_empty() && self.start < other.end && other.start < self.end
    }

    /// Adjusts this span for an edit that replaced `[at, at + removed)` with `inserted` tokens.
    pub(crate) fn shifted(self, at: usize, removed: usize, inserted: usize) -> Span {
        let old_end = at + removed;
        let map = |i: usize| {
            if i >= old_end {
                i + inserted - removed
            } else if i > at {
                at + inserted
            } else {
                i
            }
        };
        if self.is_empty() {
            let p = map(self.start);
            return Span::new(p, p);
        }
        Span::new(map(self.start), map(self.end))
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    GeneralCorpus,
    Quizzes,
    Supervision,
    User,
}

/// Property categories used for per-category breakdowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Qualities,
    Condition,
    Sense,
    Measurement,
    Color,
    Time,
    Emotion,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Qualities,
        Category::Condition,
        Category::Sense,
        Category::Measurement,
        Category::Color,
        Category::Time,
        Category::Emotion,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Qualities => "qualities",
            Category::Condition => "condition",
            Category::Sense => "sense",
            Category::Measurement => "measurement",
            Category::Color => "color",
            Category::Time => "time",
            Category::Emotion => "emotion",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        let s = s.trim().to_ascii_lowercase();
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s || (s == "colour" && *c == Category::Color))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which third of the sentence the simile sits in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Start,
    Middle,
    End,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub topic: Span,
    pub property: Span,
    pub vehicle: Span,
    pub event: Span,
    pub comparator: Vec<Span>,
}

impl Spans {
    pub(crate) fn shifted(&self, at: usize, removed: usize, inserted: usize) -> Spans {
        Spans {
            topic: self.topic.shifted(at, removed, inserted),
            property: self.property.shifted(at, removed, inserted),
            vehicle: self.vehicle.shifted(at, removed, inserted),
            event: self.event.shifted(at, removed, inserted),
            comparator: self
                .comparator
                .iter()
                .map(|s| s.shifted(at, removed, inserted))
                .collect(),
        }
    }

    fn named(&self) -> Vec<(&'static str, Span)> {
        let mut v = vec![
            ("topic", self.topic),
            ("property", self.property),
            ("vehicle", self.vehicle),
            ("event", self.event),
        ];
        v.extend(self.comparator.iter().map(|s| ("comparator", *s)));
        v
    }

    /// True when `index` falls in any component span.
    pub fn covers(&self, index: usize) -> bool {
        self.named().iter().any(|(_, s)| s.contains(index))
    }
}

/// One closed simile with token-level component annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimileRecord {
    pub tokens: Vec<String>,
    pub spans: Spans,
    pub source: Source,
    pub category: Option<Category>,
    pub position: Position,
    /// Set when automatic component annotation could not find a subject.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub needs_review: bool,
}

impl SimileRecord {
    /// Builds a record and derives its position from the spans.
    pub fn new(tokens: Vec<String>, spans: Spans, source: Source) -> Result<Self, RecordError> {
        let position = position_of(tokens.len(), &spans.comparator)?;
        let record = SimileRecord {
            tokens,
            spans,
            source,
            category: None,
            position,
            needs_review: false,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn with_category(mut self, category: Option<Category>) -> Self {
        self.category = category;
        self
    }

    pub fn span_text(&self, span: Span) -> String {
        self.tokens[span.range()].join(" ")
    }

    pub fn topic(&self) -> String {
        self.span_text(self.spans.topic)
    }

    pub fn property(&self) -> String {
        self.span_text(self.spans.property)
    }

    pub fn vehicle(&self) -> String {
        self.span_text(self.spans.vehicle)
    }

    pub fn event(&self) -> String {
        self.span_text(self.spans.event)
    }

    pub fn sentence(&self) -> String {
        self.tokens.join(" ")
    }

    /// Stable identifier derived from the token sequence.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn is_annotated(&self) -> bool {
        !self.spans.topic.is_empty() && !self.spans.event.is_empty()
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let n = self.tokens.len();
        let spans = &self.spans;
        if spans.property.is_empty() {
            return Err(RecordError::EmptyProperty);
        }
        if spans.comparator.is_empty() || spans.comparator.iter().any(Span::is_empty) {
            return Err(RecordError::MissingComparator);
        }
        let named = spans.named();
        for (name, s) in &named {
            if s.end > n || s.start > s.end {
                return Err(RecordError::OutOfBounds {
                    component: name,
                    start: s.start,
                    end: s.end,
                    len: n,
                });
            }
        }
        for (i, (a_name, a)) in named.iter().enumerate() {
            for (b_name, b) in &named[i + 1..] {
                if a.overlaps(b) {
                    return Err(RecordError::Overlap(a_name, b_name));
                }
            }
        }
        let expected = position_of(n, &spans.comparator)?;
        if expected != self.position {
            return Err(RecordError::PositionMismatch);
        }
        Ok(())
    }
}

pub(crate) fn position_of(len: usize, comparators: &[Span]) -> Result<Position, RecordError> {
    let anchor = comparators
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.start)
        .min()
        .ok_or(RecordError::MissingComparator)?;
    Ok(third_of(len, anchor))
}

/// Thirds rule: remainder tokens go to the earlier thirds.
pub(crate) fn third_of(len: usize, index: usize) -> Position {
    let base = len / 3;
    let rem = len % 3;
    let first = base + usize::from(rem > 0);
    let second = base + usize::from(rem > 1);
    if index < first {
        Position::Start
    } else if index < first + second {
        Position::Middle
    } else {
        Position::End
    }
}

/// Splits a raw line into surface tokens: whitespace, then leading and
/// trailing punctuation peeled into their own tokens.
pub fn tokenize_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in line.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let is_punct = |c: &char| c.is_ascii_punctuation() && *c != '\'' && *c != '-';
        let lead = chars.iter().take_while(|c| is_punct(c)).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| is_punct(c)).count();
        // keep bracketed sentinels such as [MASK] whole
        if chunk.starts_with('[') && chunk.ends_with(']') && chars.len() > 2 {
            out.push(chunk.to_string());
            continue;
        }
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}
