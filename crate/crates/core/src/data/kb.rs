use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};

/// One knowledge-base line as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbRecord {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub entity_id: String,
    pub title: String,
    /// Description ids, exactly `T_e` long with padding only as a suffix.
    pub desc_tokens: Vec<u32>,
}

/// Entities in file order with an id lookup; row `i` is the entity's dense index.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    rows: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(entities: Vec<Entity>) -> Result<Self> {
        let mut rows = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if rows.insert(e.entity_id.clone(), i).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate entity id {:?}",
                    e.entity_id
                )));
            }
        }
        Ok(KnowledgeBase { entities, rows })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn get(&self, row: usize) -> &Entity {
        &self.entities[row]
    }

    pub fn row(&self, entity_id: &str) -> Option<usize> {
        self.rows.get(entity_id).copied()
    }

    pub fn contains(&self, entity_id: &str) -> bool {
        self.rows.contains_key(entity_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.entities.iter().map(|e| e.entity_id.clone()).collect()
    }
}

pub(crate) fn pad_to(mut ids: Vec<u32>, len: usize) -> Vec<u32> {
    ids.truncate(len);
    ids.resize(len, PAD_ID);
    ids
}

pub fn entity_from_record(rec: &KbRecord, vocab: &Vocabulary, t_e: usize) -> Entity {
    Entity {
        entity_id: rec.id.clone(),
        title: rec.title.clone(),
        desc_tokens: pad_to(vocab.encode(&rec.text), t_e),
    }
}

pub(crate) fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a JSON-lines knowledge base, one entity per line, order preserved.
pub fn load_kb(path: &Path, vocab: &Vocabulary, t_e: usize) -> Result<Vec<Entity>> {
    if t_e == 0 {
        return Err(Error::Config("description length must be positive".into()));
    }
    let records: Vec<KbRecord> = read_jsonl(path)?;
    let entities: Vec<Entity> = records
        .iter()
        .map(|rec| {
            if rec.text.split_whitespace().next().is_none() {
                log::warn!("entity {} has an empty description", rec.id);
            }
            entity_from_record(rec, vocab, t_e)
        })
        .collect();
    // Validates id uniqueness.
    KnowledgeBase::new(entities.clone())?;
    Ok(entities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn pads_short_descriptions() {
        let f = write(&[r#"{"id":"E1","title":"KwaZulu-Natal","text":"province of South Africa"}"#]);
        let vocab = Vocabulary::from_texts(["province of south africa"]);
        let kb = load_kb(f.path(), &vocab, 8).unwrap();
        assert_eq!(kb.len(), 1);
        let d = &kb[0].desc_tokens;
        assert_eq!(d.len(), 8);
        assert!(d[..4].iter().all(|&t| t != PAD_ID));
        assert!(d[4..].iter().all(|&t| t == PAD_ID));
    }

    #[test]
    fn truncates_long_descriptions() {
        let text = (0..200).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let line = serde_json::to_string(&KbRecord {
            id: "E".into(),
            title: "t".into(),
            text: text.clone(),
        })
        .unwrap();
        let f = write(&[&line]);
        let vocab = Vocabulary::from_texts([text.as_str()]);
        let kb = load_kb(f.path(), &vocab, 128).unwrap();
        assert_eq!(kb[0].desc_tokens.len(), 128);
        assert!(kb[0].desc_tokens.iter().all(|&t| t != PAD_ID));
    }

    #[test]
    fn empty_text_is_all_padding() {
        let f = write(&[r#"{"id":"E1","title":"x","text":""}"#]);
        let kb = load_kb(f.path(), &Vocabulary::default(), 4).unwrap();
        assert_eq!(kb[0].desc_tokens, vec![PAD_ID; 4]);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write(&[
            r#"{"id":"E1","title":"x","text":"a"}"#,
            r#"{"id":"E2","title":"x"}"#,
        ]);
        match load_kb(f.path(), &Vocabulary::default(), 4) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write(&[
            r#"{"id":"E1","title":"x","text":"a"}"#,
            r#"{"id":"E1","title":"y","text":"b"}"#,
        ]);
        assert!(matches!(
            load_kb(f.path(), &Vocabulary::default(), 4),
            Err(Error::Integrity(_))
        ));
    }
}
