//! Boundary to masked language model runtimes.
//!
//! Surface sentences are sequences of words in which the sentinels [`MASK`]
//! and [`UNK`] stand for the model's own mask and unknown tokens. A runtime
//! aligns words to subtokens, runs its encoder, and exposes last-layer
//! hidden states and masked-position logits. Everything else here is pure
//! arithmetic on those outputs.

use std::collections::HashMap;
use std::io::BufRead;
use std::ops::Range;

use ndarray::{Array2, ArrayView1};

use crate::error::LmError;
use crate::record::Span;

/// Surface placeholder for the model's mask token.
pub const MASK: &str = "[MASK]";
/// Surface placeholder for the model's unknown token.
pub const UNK: &str = "[UNK]";

/// Default maximum sequence length in subtokens.
pub const DEFAULT_MAX_LEN: usize = 128;

/// Subtoken ids plus the mapping back to surface words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedEncoding {
    pub subtoken_ids: Vec<u32>,
    /// One contiguous subtoken range per surface word.
    pub word_to_subtoken: Vec<Range<usize>>,
    pub mask_positions: Vec<usize>,
    pub hidden_dim: usize,
}

impl AlignedEncoding {
    pub fn len(&self) -> usize {
        self.subtoken_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtoken_ids.is_empty()
    }

    /// Subtoken range covered by a word span.
    pub fn span_range(&self, span: Span) -> Range<usize> {
        if span.is_empty() || span.end > self.word_to_subtoken.len() {
            return 0..0;
        }
        self.word_to_subtoken[span.start].start..self.word_to_subtoken[span.end - 1].end
    }

    /// Ranges are ordered, contiguous and non-overlapping.
    pub fn is_well_formed(&self) -> bool {
        let ranges = &self.word_to_subtoken;
        ranges.iter().all(|r| r.start < r.end && r.end <= self.len())
            && ranges.windows(2).all(|w| w[0].end == w[1].start)
            && self
                .mask_positions
                .iter()
                .all(|&p| ranges.iter().any(|r| r.contains(&p)))
    }
}

/// A masked language model runtime.
pub trait MaskedLm: Send + Sync {
    fn name(&self) -> &str;
    fn hidden_dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize {
        DEFAULT_MAX_LEN
    }
    /// Aligns words to subtokens. Each [`MASK`] word expands to `mask_width`
    /// mask subtokens; [`UNK`] maps to the unknown token.
    fn align(&self, words: &[String], mask_width: usize) -> Result<AlignedEncoding, LmError>;
    /// Last-layer hidden states, one row per subtoken including specials.
    fn hidden_states(&self, enc: &AlignedEncoding) -> Result<Array2<f32>, LmError>;
    /// Vocabulary logits, one row per entry of `enc.mask_positions`.
    fn mask_logits(&self, enc: &AlignedEncoding) -> Result<Array2<f32>, LmError>;
    /// Subtoken ids of `word` when it appears inside a sentence.
    fn word_pieces(&self, word: &str) -> Vec<u32>;
    fn unk_id(&self) -> Option<u32>;
    /// Row of the input embedding matrix.
    fn input_embedding(&self, id: u32) -> Result<Vec<f32>, LmError>;

    /// Hash of all encoder parameters, when the runtime can compute one.
    fn parameter_checksum(&self) -> Option<u64> {
        None
    }

    /// Whether `word` is a single known subtoken.
    fn is_single_token(&self, word: &str) -> bool {
        let pieces = self.word_pieces(word);
        pieces.len() == 1 && Some(pieces[0]) != self.unk_id()
    }
}

pub fn count_masks(words: &[String]) -> usize {
    words.iter().filter(|w| *w == MASK).count()
}

/// Aligns and runs the encoder, rejecting over-length input.
pub fn encode(model: &dyn MaskedLm, words: &[String]) -> Result<(AlignedEncoding, Array2<f32>), LmError> {
    let enc = model.align(words, 1)?;
    if enc.len() > model.max_len() {
        return Err(LmError::TooLong {
            len: enc.len(),
            max: model.max_len(),
        });
    }
    let hidden = model.hidden_states(&enc)?;
    Ok((enc, hidden))
}

pub fn log_softmax(logits: ArrayView1<'_, f32>) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x as f64 - lse).collect()
}

/// Log-probabilities over the vocabulary at the single mask position.
pub fn mask_logprobs(model: &dyn MaskedLm, words: &[String]) -> Result<Vec<f64>, LmError> {
    let masks = count_masks(words);
    if masks != 1 {
        return Err(LmError::MaskCount(masks));
    }
    let enc = model.align(words, 1)?;
    if enc.len() > model.max_len() {
        return Err(LmError::TooLong {
            len: enc.len(),
            max: model.max_len(),
        });
    }
    let logits = model.mask_logits(&enc)?;
    Ok(log_softmax(logits.row(0)))
}

/// Mean of the hidden vectors of the span's subtokens.
pub fn pool_span(enc: &AlignedEncoding, hidden: &Array2<f32>, span: Span) -> Result<Vec<f32>, LmError> {
    let r = enc.span_range(span);
    if r.is_empty() {
        return Err(LmError::EmptySpan {
            start: span.start,
            end: span.end,
        });
    }
    pool_rows(hidden, r)
}

pub fn pool_rows(hidden: &Array2<f32>, rows: Range<usize>) -> Result<Vec<f32>, LmError> {
    if rows.is_empty() || rows.end > hidden.nrows() {
        return Err(LmError::EmptySpan {
            start: rows.start,
            end: rows.end,
        });
    }
    let n = rows.len() as f32;
    let mut acc = vec![0f32; hidden.ncols()];
    for i in rows {
        for (a, &h) in acc.iter_mut().zip(hidden.row(i)) {
            *a += h;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Hidden state of the sequence-start special token.
pub fn sentence_embedding(hidden: &Array2<f32>) -> Vec<f32> {
    hidden.row(0).to_vec()
}

pub trait EmbeddingTable {
    fn vector(&self, word: &str) -> Option<Vec<f32>>;
    fn dim(&self) -> usize;
}

/// Word vectors in the word2vec / GloVe text format. An optional
/// `<count> <dim>` header line is skipped.
#[derive(Clone, Debug, Default)]
pub struct TextEmbeddings {
    vectors: HashMap<String, Vec<f32>>,
    dim: usize,
}

impl TextEmbeddings {
    pub fn from_pairs<I: IntoIterator<Item = (String, Vec<f32>)>>(pairs: I) -> Self {
        let vectors: HashMap<String, Vec<f32>> = pairs.into_iter().collect();
        let dim = vectors.values().next().map_or(0, Vec::len);
        TextEmbeddings { vectors, dim }
    }

    pub fn load<R: BufRead>(reader: R) -> std::io::Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Result<Vec<f32>, _> = parts.map(str::parse).collect();
            let Ok(values) = values else { continue };
            if i == 0 && values.len() == 1 {
                continue;
            }
            if dim == 0 {
                dim = values.len();
            }
            if values.len() == dim {
                vectors.insert(word.to_string(), values);
            }
        }
        Ok(TextEmbeddings { vectors, dim })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingTable for TextEmbeddings {
    fn vector(&self, word: &str) -> Option<Vec<f32>> {
        self.vectors
            .get(word)
            .or_else(|| self.vectors.get(&word.to_lowercase()))
            .cloned()
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Static vector for `word`: the table first, then the model's input
/// embedding of the word's first subtoken.
pub fn static_embedding(
    word: &str,
    table: &dyn EmbeddingTable,
    model: Option<&dyn MaskedLm>,
) -> Result<Vec<f32>, LmError> {
    if let Some(v) = table.vector(word) {
        return Ok(v);
    }
    let mut tried = vec!["table"];
    if let Some(m) = model {
        tried.push("model input embedding");
        if let Some(&id) = m.word_pieces(word).first() {
            if Some(id) != m.unk_id() {
                return m.input_embedding(id);
            }
        }
    }
    Err(LmError::UnknownWord {
        word: word.to_string(),
        tried: tried.join(", "),
    })
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - cosine(a, b)
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
