//! Deterministic synthetic knowledge bases and corpora with known gold mentions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{DocRecord, Mention};
use super::kb::KbRecord;
use crate::error::{Error, Result};

const FILLER_WORDS: usize = 60;
const KINDS: [&str; 6] = ["river", "mount", "club", "city", "party", "saint"];
const MAX_PASSAGE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_entities: usize,
    pub n_passages: usize,
    /// Extra held-out passages over the same knowledge base.
    #[serde(default)]
    pub n_dev_passages: usize,
    pub t_t: usize,
    pub t_e: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticData {
    pub kb: Vec<KbRecord>,
    pub train: Vec<DocRecord>,
    pub dev: Vec<DocRecord>,
}

#[derive(Debug, Clone)]
pub struct SyntheticPaths {
    pub kb: PathBuf,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
}

struct SynthEntity {
    surface: Vec<String>,
    context: Vec<String>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    let mut problems = Vec::new();
    if spec.n_entities < 2 {
        problems.push("n_entities must be at least 2".to_string());
    }
    if spec.n_passages == 0 {
        problems.push("n_passages must be positive".to_string());
    }
    if spec.t_t < 4 {
        problems.push(format!("t_t = {} leaves no room for a mention and context", spec.t_t));
    }
    if spec.t_e < 2 {
        problems.push(format!("t_e = {} cannot hold a surface form", spec.t_e));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let entities: Vec<SynthEntity> = (0..spec.n_entities)
        .map(|i| {
            let name = format!("name{i}");
            let surface = if rng.gen_bool(1.0 / 3.0) {
                vec![KINDS[rng.gen_range(0..KINDS.len())].to_string(), name]
            } else {
                vec![name]
            };
            let context = (0..3).map(|c| format!("ctx{i}{}", (b'a' + c) as char)).collect();
            SynthEntity { surface, context }
        })
        .collect();

    let kb = entities
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut words = e.surface.clone();
            words.extend(e.context.iter().cloned());
            words.push("is".into());
            words.push(format!("kind{}", i % 7));
            KbRecord {
                id: entity_id(i),
                title: format!("Entity {i}"),
                text: words.join(" "),
            }
        })
        .collect();

    let train = (0..spec.n_passages)
        .map(|j| passage(&mut rng, &entities, spec.t_t, format!("train{j:04}")))
        .collect();
    let dev = (0..spec.n_dev_passages)
        .map(|j| passage(&mut rng, &entities, spec.t_t, format!("dev{j:04}")))
        .collect();
    Ok(SyntheticData { kb, train, dev })
}

pub fn entity_id(i: usize) -> String {
    format!("Q{i:04}")
}

fn passage(rng: &mut ChaCha8Rng, entities: &[SynthEntity], t_t: usize, id: String) -> DocRecord {
    let hi = t_t.min(MAX_PASSAGE_LEN);
    let lo = (hi / 2).max(4).min(hi);
    let len = rng.gen_range(lo..=hi);

    // Each item is a mention phrase, optionally followed by one of its context words.
    let mut wanted = rng.gen_range(1..=3usize);
    let picks: Vec<usize> = loop {
        let chosen: Vec<usize> = rand::seq::index::sample(rng, entities.len(), wanted.min(entities.len())).into_vec();
        let tokens: usize = chosen.iter().map(|&e| entities[e].surface.len() + 1).sum();
        // every item needs a separating filler slot
        if tokens + chosen.len() <= len + 1 || wanted == 1 {
            break chosen;
        }
        wanted -= 1;
    };
    let items: Vec<(usize, Vec<String>)> = picks
        .iter()
        .map(|&e| {
            let ent = &entities[e];
            let mut words = ent.surface.clone();
            if rng.gen_bool(0.5) {
                words.push(ent.context.choose(rng).expect("context").clone());
            }
            (e, words)
        })
        .collect();
    let item_tokens: usize = items.iter().map(|(_, w)| w.len()).sum();
    let fillers = len.saturating_sub(item_tokens).max(items.len().saturating_sub(1));
    let mut gaps: Vec<usize> = rand::seq::index::sample(rng, fillers + 1, items.len()).into_vec();
    gaps.sort_unstable();

    let mut words: Vec<String> = Vec::with_capacity(len);
    let mut mentions = Vec::new();
    let mut next_item = 0;
    for slot in 0..=fillers {
        while next_item < items.len() && gaps[next_item] == slot {
            let (e, phrase) = &items[next_item];
            let start = words.len();
            let surface_len = entities[*e].surface.len();
            mentions.push(Mention {
                start,
                end: start + surface_len - 1,
                entity_id: entity_id(*e),
            });
            words.extend(phrase.iter().cloned());
            next_item += 1;
        }
        if slot < fillers {
            words.push(format!("w{}", rng.gen_range(0..FILLER_WORDS)));
        }
    }
    words.truncate(t_t);
    mentions.retain(|m| m.end < words.len());
    mentions.sort();
    DocRecord {
        id,
        text: words.join(" "),
        mentions,
    }
}

fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Writes `kb.jsonl`, `train.jsonl` and, when requested, `dev.jsonl` into `dir`.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticPaths> {
    let data = generate_synthetic(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let kb = dir.join("kb.jsonl");
    let train = dir.join("train.jsonl");
    write_jsonl(&kb, &data.kb)?;
    write_jsonl(&train, &data.train)?;
    let dev = if data.dev.is_empty() {
        None
    } else {
        let p = dir.join("dev.jsonl");
        write_jsonl(&p, &data.dev)?;
        Some(p)
    };
    Ok(SyntheticPaths { kb, train, dev })
}
