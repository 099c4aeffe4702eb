//! WordPiece and byte-level BPE subword tokenizers over pre-split words.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{ModelError, Result};

/// Maps one surface word to subtoken ids.
#[derive(Clone, Debug)]
pub enum Tokenizer {
    WordPiece(WordPiece),
    Bpe(ByteBpe),
}

/// Ids of the special tokens a runtime needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
    pub unk: u32,
    pub pad: u32,
}

impl Tokenizer {
    /// Loads `vocab.txt` (WordPiece) or `vocab.json` + `merges.txt` (BPE).
    pub fn from_dir(dir: &Path) -> Result<Tokenizer> {
        let txt = dir.join("vocab.txt");
        if txt.exists() {
            let lower = read_lowercase_flag(dir).unwrap_or(true);
            return Ok(Tokenizer::WordPiece(WordPiece::load(&txt)?.lowercase(lower)));
        }
        Ok(Tokenizer::Bpe(ByteBpe::load(&dir.join("vocab.json"), &dir.join("merges.txt"))?))
    }

    pub fn specials(&self) -> Specials {
        match self {
            Tokenizer::WordPiece(t) => t.specials,
            Tokenizer::Bpe(t) => t.specials,
        }
    }

    /// Subtokens of `word`; `first` marks the sentence-initial word, which
    /// BPE vocabularies encode without a leading space.
    pub fn word_pieces(&self, word: &str, first: bool) -> Vec<u32> {
        match self {
            Tokenizer::WordPiece(t) => t.encode_word(word),
            Tokenizer::Bpe(t) => t.encode_word(word, first),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::WordPiece(t) => t.vocab.len(),
            Tokenizer::Bpe(t) => t.vocab.len(),
        }
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        match self {
            Tokenizer::WordPiece(t) => t.inverse.get(id as usize).map(String::as_str),
            Tokenizer::Bpe(t) => t.inverse.get(&id).map(String::as_str),
        }
    }

    /// Writes the vocabulary files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Tokenizer::WordPiece(t) => {
                let path = dir.join("vocab.txt");
                fs::write(&path, t.inverse.join("\n") + "\n").map_err(|e| ModelError::io(path, e))
            }
            Tokenizer::Bpe(t) => {
                let path = dir.join("vocab.json");
                let json = serde_json::to_string(&t.vocab).expect("string map serializes");
                fs::write(&path, json).map_err(|e| ModelError::io(&path, e))?;
                let path = dir.join("merges.txt");
                let mut pairs: Vec<(&(String, String), &usize)> = t.ranks.iter().collect();
                pairs.sort_by_key(|(_, &r)| r);
                let mut text = String::from("#version: 0.2\n");
                for ((a, b), _) in pairs {
                    text.push_str(&format!("{a} {b}\n"));
                }
                fs::write(&path, text).map_err(|e| ModelError::io(path, e))
            }
        }
    }
}

fn read_lowercase_flag(dir: &Path) -> Option<bool> {
    let text = fs::read_to_string(dir.join("tokenizer_config.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("do_lower_case")?.as_bool()
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Greedy longest-match-first WordPiece with `##` continuations.
#[derive(Clone, Debug)]
pub struct WordPiece {
    vocab: HashMap<String, u32>,
    inverse: Vec<String>,
    lowercase: bool,
    specials: Specials,
}

impl WordPiece {
    const MAX_CHARS: usize = 100;

    pub fn from_tokens(tokens: &[&str]) -> Result<WordPiece> {
        let inverse: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        let vocab: HashMap<String, u32> = inverse.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let get = |name: &str| {
            vocab.get(name).copied().ok_or_else(|| ModelError::Format {
                path: "vocab.txt".into(),
                message: format!("missing special token {name}"),
            })
        };
        let specials = Specials {
            cls: get("[CLS]")?,
            sep: get("[SEP]")?,
            mask: get("[MASK]")?,
            unk: get("[UNK]")?,
            pad: get("[PAD]")?,
        };
        Ok(WordPiece {
            vocab,
            inverse,
            lowercase: true,
            specials,
        })
    }

    pub fn load(path: &Path) -> Result<WordPiece> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::io(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        WordPiece::from_tokens(&tokens).map_err(|e| match e {
            ModelError::Format { message, .. } => ModelError::Format {
                path: path.into(),
                message,
            },
            other => other,
        })
    }

    pub fn lowercase(mut self, on: bool) -> Self {
        self.lowercase = on;
        self
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        let word = if self.lowercase { word.to_lowercase() } else { word.to_string() };
        // punctuation characters become words of their own
        let mut parts: Vec<String> = Vec::new();
        let mut cur = String::new();
        for c in word.chars() {
            if is_punctuation(c) {
                if !cur.is_empty() {
                    parts.push(std::mem::take(&mut cur));
                }
                parts.push(c.to_string());
            } else if !c.is_whitespace() {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            parts.push(cur);
        }
        parts.iter().flat_map(|p| self.wordpiece(p)).collect()
    }

    fn wordpiece(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > Self::MAX_CHARS {
            return vec![self.specials.unk];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(&id) = self.vocab.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => out.push(id),
                None => return vec![self.specials.unk],
            }
            start = end;
        }
        out
    }
}

/// GPT-2 style byte-level BPE, as used by RoBERTa.
#[derive(Clone, Debug)]
pub struct ByteBpe {
    vocab: HashMap<String, u32>,
    inverse: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
    byte_map: [char; 256],
    specials: Specials,
}

/// The reversible byte to printable-character table of byte-level BPE.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if printable {
            b as char
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

impl ByteBpe {
    pub fn new(vocab: HashMap<String, u32>, merges: &[(String, String)]) -> Result<ByteBpe> {
        let get = |names: &[&str]| {
            names
                .iter()
                .find_map(|n| vocab.get(*n).copied())
                .ok_or_else(|| ModelError::Format {
                    path: "vocab.json".into(),
                    message: format!("missing special token {}", names[0]),
                })
        };
        let specials = Specials {
            cls: get(&["<s>"])?,
            sep: get(&["</s>"])?,
            mask: get(&["<mask>"])?,
            unk: get(&["<unk>"])?,
            pad: get(&["<pad>"])?,
        };
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        let inverse = vocab.iter().map(|(k, &v)| (v, k.clone())).collect();
        Ok(ByteBpe {
            vocab,
            inverse,
            ranks,
            byte_map: bytes_to_unicode(),
            specials,
        })
    }

    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<ByteBpe> {
        let text = fs::read_to_string(vocab_path).map_err(|e| ModelError::io(vocab_path, e))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&text).map_err(|e| ModelError::Format {
            path: vocab_path.into(),
            message: e.to_string(),
        })?;
        let text = fs::read_to_string(merges_path).map_err(|e| ModelError::io(merges_path, e))?;
        let merges: Vec<(String, String)> = text
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .filter_map(|l| {
                let mut it = l.split(' ');
                Some((it.next()?.to_string(), it.next()?.to_string()))
            })
            .collect();
        ByteBpe::new(vocab, &merges)
    }

    /// Splits a word the way the GPT-2 pre-tokenizer would: contractions,
    /// letter runs, digit runs and other-character runs.
    fn pretokenize(word: &str) -> Vec<String> {
        const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
        let mut out = Vec::new();
        let mut rest = word;
        while let Some(c) = rest.chars().next() {
            if let Some(k) = CONTRACTIONS.iter().find(|k| rest.starts_with(**k)) {
                out.push(k.to_string());
                rest = &rest[k.len()..];
                continue;
            }
            let class = |c: char| {
                if c.is_alphabetic() {
                    0
                } else if c.is_numeric() {
                    1
                } else {
                    2
                }
            };
            let k = class(c);
            let end = rest
                .char_indices()
                .find(|&(i, ch)| i > 0 && (class(ch) != k || (k == 2 && ch == '\'' && CONTRACTIONS.iter().any(|p| rest[i..].starts_with(p)))))
                .map_or(rest.len(), |(i, _)| i);
            out.push(rest[..end].to_string());
            rest = &rest[end..];
        }
        out
    }

    fn bpe(&self, symbol: &str) -> Vec<String> {
        let mut parts: Vec<String> = symbol.chars().map(|c| c.to_string()).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", parts[i], parts[i + 1]);
            parts.splice(i..i + 2, std::iter::once(merged));
        }
        parts
    }

    fn encode_word(&self, word: &str, first: bool) -> Vec<u32> {
        let mut out = Vec::new();
        for (k, piece) in Self::pretokenize(word).into_iter().enumerate() {
            let mut bytes = Vec::new();
            if k == 0 && !first {
                bytes.push(b' ');
            }
            bytes.extend(piece.as_bytes());
            let mapped: String = bytes.iter().map(|&b| self.byte_map[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                out.push(self.vocab.get(&sym).copied().unwrap_or(self.specials.unk));
            }
        }
        out
    }
}
