//! Deterministic in-memory masked LM for tests and dry runs.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::LmError;
use crate::lm::{AlignedEncoding, MaskedLm, DEFAULT_MAX_LEN, MASK, UNK};

const CLS: u32 = 0;
const SEP: u32 = 1;
const MASK_ID: u32 = 2;
const UNK_ID: u32 = 3;

type LogitsFn = Arc<dyn Fn(&StubLm, &AlignedEncoding, usize) -> Vec<f32> + Send + Sync>;

#[derive(Clone)]
enum Head {
    Tied,
    Fixed(Vec<f32>),
    Custom(LogitsFn),
}

/// Whole-word vocabulary, seeded random embeddings, and a hidden state that
/// mixes each token with the sentence mean.
#[derive(Clone)]
pub struct StubLm {
    name: String,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    splits: HashMap<String, Vec<String>>,
    embeddings: Array2<f32>,
    max_len: usize,
    head: Head,
}

impl StubLm {
    pub fn new(dim: usize, words: &[&str]) -> Self {
        Self::with_seed(dim, words, 0)
    }

    pub fn with_seed(dim: usize, words: &[&str], seed: u64) -> Self {
        let mut vocab: Vec<String> = ["[CLS]", "[SEP]", MASK, UNK].iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.to_lowercase();
            if !vocab.contains(&w) {
                vocab.push(w);
            }
        }
        let mut s = StubLm {
            name: "stub".into(),
            vocab: Vec::new(),
            index: HashMap::new(),
            splits: HashMap::new(),
            embeddings: Array2::zeros((0, dim)),
            max_len: DEFAULT_MAX_LEN,
            head: Head::Tied,
        };
        s.set_vocab(vocab, seed);
        s
    }

    fn set_vocab(&mut self, vocab: Vec<String>, seed: u64) {
        let dim = self.embeddings.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.embeddings = Array2::from_shape_fn((vocab.len(), dim), |_| rng.gen_range(-1.0f32..1.0));
        self.index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        self.vocab = vocab;
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    /// Splits `word` into the given pieces, adding them to the vocabulary.
    pub fn with_split(mut self, word: &str, pieces: &[&str]) -> Self {
        let mut vocab = self.vocab.clone();
        for p in pieces {
            if !vocab.iter().any(|v| v == p) {
                vocab.push(p.to_string());
            }
        }
        let old = self.embeddings.clone();
        self.set_vocab(vocab, 0);
        self.embeddings
            .slice_mut(ndarray::s![..old.nrows(), ..])
            .assign(&old);
        self.splits
            .insert(word.to_lowercase(), pieces.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    /// Same logits at every mask position, one per vocabulary entry.
    pub fn with_fixed_logits(mut self, logits: Vec<f32>) -> Self {
        assert_eq!(logits.len(), self.vocab.len());
        self.head = Head::Fixed(logits);
        self
    }

    /// Fixed logits for the listed words; every other entry gets `floor`.
    pub fn with_word_logits(self, entries: &[(&str, f32)], floor: f32) -> Self {
        let mut logits = vec![floor; self.vocab.len()];
        for (w, l) in entries {
            let id = self.index[&w.to_lowercase()];
            logits[id as usize] = *l;
        }
        self.with_fixed_logits(logits)
    }

    /// Logits computed from the aligned input and the mask position.
    pub fn with_logits_fn<F>(mut self, f: F) -> Self
    where
        F: Fn(&StubLm, &AlignedEncoding, usize) -> Vec<f32> + Send + Sync + 'static,
    {
        self.head = Head::Custom(Arc::new(f));
        self
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }
}

impl MaskedLm for StubLm {
    fn name(&self) -> &str {
        &self.name
    }

    fn hidden_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn align(&self, words: &[String], mask_width: usize) -> Result<AlignedEncoding, LmError> {
        let mut ids = vec![CLS];
        let mut ranges = Vec::with_capacity(words.len());
        let mut masks = Vec::new();
        for w in words {
            let start = ids.len();
            if w == MASK {
                for _ in 0..mask_width.max(1) {
                    masks.push(ids.len());
                    ids.push(MASK_ID);
                }
            } else if w == UNK {
                ids.push(UNK_ID);
            } else {
                ids.extend(self.word_pieces(w));
            }
            ranges.push(start..ids.len());
        }
        ids.push(SEP);
        Ok(AlignedEncoding {
            subtoken_ids: ids,
            word_to_subtoken: ranges,
            mask_positions: masks,
            hidden_dim: self.hidden_dim(),
        })
    }

    fn hidden_states(&self, enc: &AlignedEncoding) -> Result<Array2<f32>, LmError> {
        let dim = self.hidden_dim();
        let n = enc.len();
        let mut mean = vec![0f32; dim];
        for &id in &enc.subtoken_ids {
            for (m, &e) in mean.iter_mut().zip(self.embeddings.row(id as usize)) {
                *m += e / n as f32;
            }
        }
        Ok(Array2::from_shape_fn((n, dim), |(i, j)| {
            self.embeddings[[enc.subtoken_ids[i] as usize, j]] + 0.5 * mean[j]
        }))
    }

    fn mask_logits(&self, enc: &AlignedEncoding) -> Result<Array2<f32>, LmError> {
        let v = self.vocab_size();
        let mut out = Array2::zeros((enc.mask_positions.len(), v));
        let hidden = match self.head {
            Head::Tied => Some(self.hidden_states(enc)?),
            _ => None,
        };
        for (row, &pos) in enc.mask_positions.iter().enumerate() {
            let logits: Vec<f32> = match &self.head {
                Head::Fixed(l) => l.clone(),
                Head::Custom(f) => f(self, enc, pos),
                Head::Tied => {
                    let h = hidden.as_ref().unwrap().row(pos).to_owned();
                    self.embeddings.dot(&h).to_vec()
                }
            };
            out.row_mut(row).assign(&ndarray::Array1::from(logits));
        }
        Ok(out)
    }

    fn word_pieces(&self, word: &str) -> Vec<u32> {
        let lower = word.to_lowercase();
        if let Some(pieces) = self.splits.get(&lower) {
            return pieces.iter().map(|p| self.index[p]).collect();
        }
        vec![self.index.get(&lower).copied().unwrap_or(UNK_ID)]
    }

    fn parameter_checksum(&self) -> Option<u64> {
        self.embeddings.as_slice().map(|e| crate::sentiment::checksum([e]))
    }

    fn unk_id(&self) -> Option<u32> {
        Some(UNK_ID)
    }

    fn input_embedding(&self, id: u32) -> Result<Vec<f32>, LmError> {
        if id as usize >= self.vocab_size() {
            return Err(LmError::Runtime(format!("id {id} out of range")));
        }
        Ok(self.embeddings.row(id as usize).to_vec())
    }
}
