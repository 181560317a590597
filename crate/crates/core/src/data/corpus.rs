use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kb::{read_jsonl, KnowledgeBase};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Gold or predicted mention in 0-based inclusive token coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity_id: String,
}

/// One corpus line as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocRecord {
    pub id: String,
    pub text: String,
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub passage_id: String,
    pub doc_id: String,
    pub tokens: Vec<u32>,
    pub gold_mentions: Vec<Mention>,
}

impl Passage {
    /// Distinct gold entity ids in first-mention order.
    pub fn gold_entities(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.gold_mentions
            .iter()
            .filter(|m| seen.insert(m.entity_id.as_str()))
            .map(|m| m.entity_id.as_str())
            .collect()
    }
}

/// A mention lost because it crosses a window boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedMention {
    pub doc_id: String,
    pub mention: Mention,
}

pub fn passage_id(doc_id: &str, window: usize) -> String {
    format!("{doc_id}#{window}")
}

/// Cuts a document into consecutive windows of at most `t_t` tokens and
/// rebases each mention into the window that contains it.
pub fn split_document(
    doc_id: &str,
    tokens: &[u32],
    mentions: &[Mention],
    t_t: usize,
) -> Result<(Vec<Passage>, Vec<DroppedMention>)> {
    if t_t == 0 {
        return Err(Error::Config("passage length must be positive".into()));
    }
    for m in mentions {
        if m.start > m.end {
            return Err(Error::Validation(format!(
                "document {doc_id}: mention start {} after end {}",
                m.start, m.end
            )));
        }
        if m.end >= tokens.len() {
            return Err(Error::Validation(format!(
                "document {doc_id}: mention [{}, {}] outside {} tokens",
                m.start,
                m.end,
                tokens.len()
            )));
        }
    }
    let mut passages: Vec<Passage> = tokens
        .chunks(t_t)
        .enumerate()
        .map(|(w, chunk)| Passage {
            passage_id: passage_id(doc_id, w),
            doc_id: doc_id.to_string(),
            tokens: chunk.to_vec(),
            gold_mentions: Vec::new(),
        })
        .collect();
    let mut dropped = Vec::new();
    let mut seen = BTreeSet::new();
    for m in mentions {
        if !seen.insert(m.clone()) {
            log::warn!("document {doc_id}: duplicate mention {m:?} ignored");
            continue;
        }
        let w = m.start / t_t;
        if m.end / t_t != w {
            log::warn!(
                "document {doc_id}: mention [{}, {}] -> {} straddles a window boundary, dropped",
                m.start,
                m.end,
                m.entity_id
            );
            dropped.push(DroppedMention {
                doc_id: doc_id.to_string(),
                mention: m.clone(),
            });
            continue;
        }
        passages[w].gold_mentions.push(Mention {
            start: m.start - w * t_t,
            end: m.end - w * t_t,
            entity_id: m.entity_id.clone(),
        });
    }
    for p in &mut passages {
        p.gold_mentions.sort();
    }
    Ok((passages, dropped))
}

/// Reads a JSON-lines corpus and splits every document into passages.
///
/// With a knowledge base supplied, mentions of unknown entities are rejected.
pub fn load_corpus(
    path: &Path,
    vocab: &Vocabulary,
    t_t: usize,
    kb: Option<&KnowledgeBase>,
) -> Result<Vec<Passage>> {
    let records: Vec<DocRecord> = read_jsonl(path)?;
    let mut out = Vec::new();
    for rec in &records {
        if let Some(kb) = kb {
            if let Some(m) = rec.mentions.iter().find(|m| !kb.contains(&m.entity_id)) {
                return Err(Error::Integrity(format!(
                    "document {}: mention refers to unknown entity {:?}",
                    rec.id, m.entity_id
                )));
            }
        }
        let tokens = vocab.encode(&rec.text);
        if tokens.is_empty() {
            log::warn!("document {} has no tokens, skipped", rec.id);
            continue;
        }
        let (passages, _dropped) = split_document(&rec.id, &tokens, &rec.mentions, t_t)?;
        out.extend(passages);
    }
    Ok(out)
}
