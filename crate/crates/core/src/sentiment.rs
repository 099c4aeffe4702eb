//! Review data for the frozen-encoder sentiment check.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LmError, SentimentError};
use crate::lm::{sentence_embedding, MaskedLm};
use crate::record::tokenize_line;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    /// 1-2 stars are negative, 4-5 positive, 3 has no label.
    pub fn from_rating(rating: u8) -> Result<Option<Label>, SentimentError> {
        match rating {
            1 | 2 => Ok(Some(Label::Negative)),
            3 => Ok(None),
            4 | 5 => Ok(Some(Label::Positive)),
            r => Err(SentimentError::BadRating(r)),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewExample {
    pub text: String,
    pub rating: u8,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawReview {
    pub text: String,
    pub rating: u8,
}

/// Drops 3-star reviews, downsamples the larger class to a 1:1 balance and
/// splits each class 6:2:2 into train, dev and test.
pub fn prepare_reviews(raw: &[RawReview], seed: u64) -> Result<Vec<ReviewExample>, SentimentError> {
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for r in raw {
        match Label::from_rating(r.rating)? {
            Some(Label::Negative) => neg.push(r),
            Some(Label::Positive) => pos.push(r),
            None => {}
        }
    }
    if neg.is_empty() {
        return Err(SentimentError::EmptyClass("negative"));
    }
    if pos.is_empty() {
        return Err(SentimentError::EmptyClass("positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    neg.shuffle(&mut rng);
    pos.shuffle(&mut rng);
    let n = neg.len().min(pos.len());
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_dev = (n as f64 * 0.2).round() as usize;
    let mut out = Vec::with_capacity(2 * n);
    for (label, class) in [(Label::Negative, &neg), (Label::Positive, &pos)] {
        for (i, r) in class[..n].iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            out.push(ReviewExample {
                text: r.text.clone(),
                rating: r.rating,
                label,
                split,
            });
        }
    }
    Ok(out)
}

pub fn split_of(examples: &[ReviewExample], split: Split) -> Vec<&ReviewExample> {
    examples.iter().filter(|e| e.split == split).collect()
}

/// Sequence-start hidden states of each text, one row per text. Texts
/// longer than the model limit are cut word by word from the end.
pub fn sentence_features(model: &dyn MaskedLm, texts: &[&str]) -> Result<Array2<f32>, LmError> {
    let d = model.hidden_dim();
    let mut out = Array2::zeros((texts.len(), d));
    for (i, text) in texts.iter().enumerate() {
        let mut words = tokenize_line(text);
        let enc = loop {
            let enc = model.align(&words, 1)?;
            if enc.len() <= model.max_len() || words.is_empty() {
                break enc;
            }
            let over = enc.len() - model.max_len();
            words.truncate(words.len().saturating_sub(over.max(1)));
        };
        let hidden = model.hidden_states(&enc)?;
        out.row_mut(i).assign(&ndarray::Array1::from(sentence_embedding(&hidden)));
    }
    Ok(out)
}

/// Order-sensitive hash of a sequence of float buffers.
pub fn checksum<'a>(buffers: impl IntoIterator<Item = &'a [f32]>) -> u64 {
    let mut h = DefaultHasher::new();
    for b in buffers {
        b.len().hash(&mut h);
        for x in b {
            x.to_bits().hash(&mut h);
        }
    }
    h.finish()
}
