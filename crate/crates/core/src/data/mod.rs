//! Knowledge bases, corpora, vocabulary and synthetic data.

pub mod corpus;
pub mod kb;
pub mod synth;
pub mod vocab;

use std::path::Path;

pub use corpus::{load_corpus, split_document, DocRecord, DroppedMention, Mention, Passage};
pub use kb::{load_kb, Entity, KbRecord, KnowledgeBase};
pub use synth::{generate_synthetic, write_synthetic, SyntheticData, SyntheticPaths, SyntheticSpec};
pub use vocab::{tokenize, Vocabulary};

use crate::error::Result;

/// Vocabulary over the titles and descriptions of a knowledge base plus corpus texts.
pub fn build_vocab<P: AsRef<Path>>(kb_path: &Path, corpus_paths: &[P]) -> Result<Vocabulary> {
    let kb: Vec<KbRecord> = kb::read_jsonl(kb_path)?;
    let mut texts: Vec<String> = Vec::new();
    for r in kb {
        texts.push(r.title);
        texts.push(r.text);
    }
    for p in corpus_paths {
        let docs: Vec<DocRecord> = kb::read_jsonl(p.as_ref())?;
        texts.extend(docs.into_iter().map(|d| d.text));
    }
    Ok(Vocabulary::from_texts(texts.iter().map(String::as_str)))
}
