//! Lowercased whitespace tokenisation and the token/id mapping.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

const RESERVED: [&str; 4] = [CLS, SEP, PAD, UNK];

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    token: String,
    id: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocabulary {
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Builds a vocabulary from raw texts: frequency descending, ties lexicographic.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::reserved_only();
        for (tok, _) in ranked {
            vocab.push(tok);
        }
        vocab
    }

    fn push(&mut self, tok: String) {
        let id = self.tokens.len() as u32;
        self.ids.insert(tok.clone(), id);
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Hex SHA-256 over the ordered token list; checkpoints and snapshots pin it.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, token) in self.tokens.iter().enumerate() {
            let rec = VocabRecord {
                token: token.clone(),
                id: id as u32,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VocabRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        records.sort_by_key(|r| r.id);
        for (expected, rec) in records.iter().enumerate() {
            if rec.id as usize != expected {
                return Err(Error::Integrity(format!(
                    "vocabulary ids are not dense: expected {expected}, found {}",
                    rec.id
                )));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if records.get(i).map(|x| x.token.as_str()) != Some(*r) {
                return Err(Error::Integrity(format!("reserved token {r} must have id {i}")));
            }
        }
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for rec in records {
            if vocab.ids.contains_key(&rec.token) {
                return Err(Error::Integrity(format!("token {:?} listed twice", rec.token)));
            }
            vocab.push(rec.token);
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocabulary::from_texts(["a b a", "c b"]);
        // a:2 b:2 c:1
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("c"), 6);
        assert_eq!(v.token(PAD_ID), Some(PAD));
    }

    #[test]
    fn single_corpus_order() {
        let v = Vocabulary::from_texts(["a b a"]);
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("b"));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn unknown_maps_to_unk_and_lowercases() {
        let v = Vocabulary::from_texts(["Hello World"]);
        assert_eq!(v.encode("HELLO there"), vec![v.id("hello"), UNK_ID]);
    }

    #[test]
    fn empty_input_gives_reserved_only() {
        let v = Vocabulary::from_texts(std::iter::empty());
        assert_eq!(v, Vocabulary::reserved_only());
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn deterministic_and_roundtrips() {
        let texts = ["x y z y", "z z q"];
        let a = Vocabulary::from_texts(texts);
        let b = Vocabulary::from_texts(texts);
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.jsonl");
        a.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), a);
    }
}
