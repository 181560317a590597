//! Dense entity retrieval: exact inner-product index, CLS and span queries,
//! candidate union, negative sampling and the contrastive retriever loss.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::KnowledgeBase;
use crate::encoder::{encode_batch, trim_padding, EncoderParams};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{dot, log_sum_exp, Matrix};
use crate::Scalar;

const SNAPSHOT_MAGIC: &[u8; 4] = b"RRIX";
const SNAPSHOT_VERSION: u32 = 1;
const ENCODE_CHUNK: usize = 64;

/// Exact dense index over entity CLS vectors, rows in knowledge-base order.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityIndex<T> {
    ids: Vec<String>,
    embeddings: Matrix<T>,
    generation: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub row: usize,
    pub entity_id: String,
    pub q: T,
}

/// At most `K` distinct candidates, scores non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<T> {
    pub passage_id: String,
    pub generation: u64,
    pub candidates: Vec<Candidate<T>>,
}

impl<T: Scalar> CandidateSet<T> {
    pub fn empty(passage_id: &str, generation: u64) -> Self {
        CandidateSet {
            passage_id: passage_id.to_string(),
            generation,
            candidates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn rows(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.row).collect()
    }

    pub fn entity_ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.entity_id.as_str()).collect()
    }
}

/// Reader-predicted token positions per passage, fed back into span queries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCache {
    entries: BTreeMap<String, BTreeSet<usize>>,
}

impl SpanCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, passage_id: &str, positions: BTreeSet<usize>) {
        self.entries.insert(passage_id.to_string(), positions);
    }

    pub fn get(&self, passage_id: &str) -> Option<&BTreeSet<usize>> {
        self.entries.get(passage_id)
    }

    /// Positions for a passage; unseen passages have none.
    pub fn positions(&self, passage_id: &str) -> Vec<usize> {
        self.entries
            .get(passage_id)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn contains(&self, passage_id: &str) -> bool {
        self.entries.contains_key(passage_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<usize>)> {
        self.entries.iter()
    }
}

impl<T: Scalar> EntityIndex<T> {
    pub fn from_parts(ids: Vec<String>, embeddings: Matrix<T>, generation: u64) -> Result<Self> {
        if ids.len() != embeddings.rows() {
            return Err(Error::Integrity(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                embeddings.rows()
            )));
        }
        if !embeddings.is_finite() {
            return Err(Error::Numeric("entity embeddings are not finite".into()));
        }
        Ok(EntityIndex {
            ids,
            embeddings,
            generation,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn embedding(&self, row: usize) -> &[T] {
        self.embeddings.row(row)
    }

    /// Re-encodes every entity with the current parameters and bumps the generation.
    pub fn refresh(
        &mut self,
        store: &ParamStore<T>,
        entity_encoder: &EncoderParams,
        kb: &KnowledgeBase,
    ) -> Result<()> {
        let fresh = encode_kb_at(store, entity_encoder, kb, self.generation + 1)?;
        *self = fresh;
        Ok(())
    }

    fn check_query(&self, query: &[T]) -> Result<()> {
        if query.len() != self.dim() {
            return Err(Error::Input(format!(
                "query of dimension {} against index of dimension {}",
                query.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Inner product of `query` with every entity row.
    pub fn scores(&self, query: &[T]) -> Result<Vec<T>> {
        self.check_query(query)?;
        Ok((0..self.len())
            .map(|r| dot(self.embeddings.row(r), query))
            .collect())
    }

    /// Retriever score `Q` for every entity row.
    pub fn q_scores(&self, r_cls: &[T], r_span: Option<&[T]>) -> Result<Vec<T>> {
        let query = combined_query(r_cls, r_span)?;
        self.scores(&query)
    }

    fn candidate_set(&self, passage_id: &str, ranked: Vec<(usize, T)>) -> CandidateSet<T> {
        CandidateSet {
            passage_id: passage_id.to_string(),
            generation: self.generation,
            candidates: ranked
                .into_iter()
                .map(|(row, q)| Candidate {
                    row,
                    entity_id: self.ids[row].clone(),
                    q,
                })
                .collect(),
        }
    }
}

/// Encodes every entity description with the entity encoder (generation 1).
pub fn encode_kb<T: Scalar>(
    store: &ParamStore<T>,
    entity_encoder: &EncoderParams,
    kb: &KnowledgeBase,
) -> Result<EntityIndex<T>> {
    encode_kb_at(store, entity_encoder, kb, 1)
}

fn encode_kb_at<T: Scalar>(
    store: &ParamStore<T>,
    entity_encoder: &EncoderParams,
    kb: &KnowledgeBase,
    generation: u64,
) -> Result<EntityIndex<T>> {
    if kb.is_empty() {
        return Err(Error::Input("cannot index an empty knowledge base".into()));
    }
    let descs: Vec<&[u32]> = kb
        .entities()
        .iter()
        .map(|e| description_tokens(&e.desc_tokens))
        .collect();
    let chunks: Vec<Vec<Vec<T>>> = descs
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            encode_batch(store, entity_encoder, chunk).map(|outs| outs.into_iter().map(|o| o.cls_vec).collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<T>> = chunks.into_iter().flatten().collect();
    EntityIndex::from_parts(kb.ids(), Matrix::from_rows(&rows), generation)
}

/// Description ids as fed to the encoders: trailing padding dropped, at least one token kept.
pub fn description_tokens(desc: &[u32]) -> &[u32] {
    let trimmed = trim_padding(desc);
    if trimmed.is_empty() {
        &desc[..desc.len().min(1)]
    } else {
        trimmed
    }
}

fn rank_cmp<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> std::cmp::Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// The `k` best `(row, score)` pairs, score descending, ties by ascending row.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Vec<(usize, T)> {
    let mut all: Vec<(usize, T)> = scores.iter().copied().enumerate().collect();
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, rank_cmp);
        all.truncate(k);
    }
    all.sort_by(rank_cmp);
    all
}

fn check_k<T: Scalar>(index: &EntityIndex<T>, k: usize) -> Result<()> {
    if k == 0 || k > index.len() {
        return Err(Error::Config(format!(
            "K = {k} must lie in 1..={} (knowledge base size)",
            index.len()
        )));
    }
    Ok(())
}

/// Top-`k` entities by CLS inner product.
pub fn retrieve_cls<T: Scalar>(
    index: &EntityIndex<T>,
    passage_id: &str,
    r_cls: &[T],
    k: usize,
) -> Result<CandidateSet<T>> {
    check_k(index, k)?;
    let scores = index.scores(r_cls)?;
    Ok(index.candidate_set(passage_id, top_k(&scores, k)))
}

/// Top-`k` entities by span-representation inner product; empty without a span.
pub fn retrieve_span<T: Scalar>(
    index: &EntityIndex<T>,
    passage_id: &str,
    r_span: Option<&[T]>,
    k: usize,
) -> Result<CandidateSet<T>> {
    check_k(index, k)?;
    match r_span {
        None => Ok(CandidateSet::empty(passage_id, index.generation)),
        Some(q) => {
            let scores = index.scores(q)?;
            Ok(index.candidate_set(passage_id, top_k(&scores, k)))
        }
    }
}

/// Mean of the selected token rows, `None` for an empty selection.
pub fn span_representation<T: Scalar>(
    token_vecs: &Matrix<T>,
    positions: &[usize],
) -> Result<Option<Vec<T>>> {
    if let Some(&p) = positions.iter().find(|&&p| p >= token_vecs.rows()) {
        return Err(Error::Input(format!(
            "span position {p} outside {} tokens",
            token_vecs.rows()
        )));
    }
    if positions.is_empty() {
        return Ok(None);
    }
    let inv = T::one() / T::of(positions.len() as f64);
    let mut out = vec![T::zero(); token_vecs.cols()];
    for &p in positions {
        for (o, &v) in out.iter_mut().zip(token_vecs.row(p)) {
            *o += v * inv;
        }
    }
    Ok(Some(out))
}

fn combined_query<T: Scalar>(r_cls: &[T], r_span: Option<&[T]>) -> Result<Vec<T>> {
    match r_span {
        None => Ok(r_cls.to_vec()),
        Some(s) if s.len() == r_cls.len() => Ok(r_cls.iter().zip(s).map(|(&a, &b)| a + b).collect()),
        Some(s) => Err(Error::Input(format!(
            "span query of dimension {} against CLS query of dimension {}",
            s.len(),
            r_cls.len()
        ))),
    }
}

/// `Q = r_cls · r_e + r_span · r_e`, the span term vanishing when absent.
pub fn q_score<T: Scalar>(r_cls: &[T], r_span: Option<&[T]>, r_entity: &[T]) -> Result<T> {
    if r_cls.len() != r_entity.len() {
        return Err(Error::Input(format!(
            "query of dimension {} against entity of dimension {}",
            r_cls.len(),
            r_entity.len()
        )));
    }
    let mut q = dot(r_cls, r_entity);
    if let Some(s) = r_span {
        if s.len() != r_entity.len() {
            return Err(Error::Input(format!(
                "span query of dimension {} against entity of dimension {}",
                s.len(),
                r_entity.len()
            )));
        }
        q += dot(s, r_entity);
    }
    Ok(q)
}

/// Union of both candidate lists, re-ranked by `Q`, truncated to `k`.
pub fn merge_candidates<T: Scalar>(
    e_cls: &CandidateSet<T>,
    e_span: &CandidateSet<T>,
    index: &EntityIndex<T>,
    r_cls: &[T],
    r_span: Option<&[T]>,
    k: usize,
) -> Result<CandidateSet<T>> {
    for set in [e_cls, e_span] {
        if set.generation != index.generation && !set.is_empty() {
            return Err(Error::Stale {
                expected: index.generation,
                found: set.generation,
            });
        }
    }
    let rows: BTreeSet<usize> = e_cls
        .candidates
        .iter()
        .chain(&e_span.candidates)
        .map(|c| c.row)
        .collect();
    let mut scored = Vec::with_capacity(rows.len());
    for row in rows {
        scored.push((row, q_score(r_cls, r_span, index.embedding(row))?));
    }
    scored.sort_by(rank_cmp);
    scored.truncate(k);
    Ok(index.candidate_set(&e_cls.passage_id, scored))
}

/// Non-gold entity rows: the `n_hard` highest-`Q` ones plus `n_rand` uniform others.
pub fn sample_negatives<R: Rng>(
    q_scores: &[impl Scalar],
    gold: &BTreeSet<usize>,
    n_hard: usize,
    n_rand: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let available = q_scores.len() - gold.iter().filter(|&&g| g < q_scores.len()).count();
    if n_hard + n_rand > available {
        return Err(Error::Config(format!(
            "{} negatives requested but only {available} non-gold entities exist",
            n_hard + n_rand
        )));
    }
    let mut non_gold: Vec<(usize, _)> = q_scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(r, _)| !gold.contains(r))
        .collect();
    non_gold.sort_by(rank_cmp);
    let mut out: Vec<usize> = non_gold.iter().take(n_hard).map(|(r, _)| *r).collect();
    let rest: Vec<usize> = non_gold[n_hard..].iter().map(|(r, _)| *r).collect();
    out.extend(sample(rng, rest.len(), n_rand).into_iter().map(|i| rest[i]));
    Ok(out)
}

/// Contrastive loss `-Σ_g log(e^{Q_g} / (e^{Q_g} + Σ_n e^{Q_n}))` on graph nodes.
///
/// `q_gold` and `q_neg` are column vectors. Returns `None` without gold scores.
pub fn nce_loss<T: Scalar>(g: &mut Graph<'_, T>, q_gold: Var, q_neg: Option<Var>) -> Option<Var> {
    let n_gold = g.shape(q_gold).0;
    if n_gold == 0 {
        return None;
    }
    let mut terms = Vec::with_capacity(n_gold);
    for i in 0..n_gold {
        let gi = g.gather(q_gold, vec![i]);
        let scores = match q_neg {
            Some(neg) => g.concat(vec![gi, neg]),
            None => gi,
        };
        let ls = g.log_softmax(scores, None);
        terms.push(g.pick(ls, 0));
    }
    let total = g.sum_scalars(&terms)?;
    Some(g.scale(total, -T::one()))
}

/// Scalar evaluation of the contrastive loss via log-sum-exp.
pub fn nce_loss_value<T: Scalar>(q_gold: &[T], q_neg: &[T]) -> Option<T> {
    if q_gold.is_empty() {
        return None;
    }
    let total = q_gold
        .iter()
        .map(|&qg| {
            let denom = log_sum_exp(std::iter::once(qg).chain(q_neg.iter().copied()).collect::<Vec<_>>());
            denom - qg
        })
        .sum();
    Some(total)
}

/// One line of a candidate export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub passage_id: String,
    pub candidates: Vec<ScoredEntity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntity {
    pub entity_id: String,
    pub q: f64,
}

impl<T: Scalar> From<&CandidateSet<T>> for CandidateRecord {
    fn from(set: &CandidateSet<T>) -> Self {
        CandidateRecord {
            passage_id: set.passage_id.clone(),
            candidates: set
                .candidates
                .iter()
                .map(|c| ScoredEntity {
                    entity_id: c.entity_id.clone(),
                    q: c.q.as_f64(),
                })
                .collect(),
        }
    }
}

pub fn write_candidates<T: Scalar>(path: &Path, sets: &[CandidateSet<T>]) -> Result<()> {
    let mut buf = Vec::new();
    for s in sets {
        serde_json::to_writer(&mut buf, &CandidateRecord::from(s))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateRecord>> {
    crate::data::kb::read_jsonl(path)
}

impl<T: Scalar> EntityIndex<T> {
    /// Binary snapshot: header, row-major payload, id table.
    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w, vocab_hash).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W, vocab_hash: &str) -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.dim() as u64)?;
        w.write_u64::<LittleEndian>(self.generation)?;
        w.write_u8(T::BYTES)?;
        let hash = vocab_hash.as_bytes();
        w.write_u32::<LittleEndian>(hash.len() as u32)?;
        w.write_all(hash)?;
        for &v in self.embeddings.data() {
            match T::BYTES {
                4 => w.write_f32::<LittleEndian>(v.as_f64() as f32)?,
                _ => w.write_f64::<LittleEndian>(v.as_f64())?,
            }
        }
        for id in &self.ids {
            w.write_u32::<LittleEndian>(id.len() as u32)?;
            w.write_all(id.as_bytes())?;
        }
        Ok(())
    }

    /// Loads a snapshot, rejecting one built against another vocabulary.
    pub fn load(path: &Path, vocab_hash: &str) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Integrity(format!("{} is not an index snapshot", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Integrity(format!("unsupported snapshot version {version}")));
        }
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let d = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let generation = r.read_u64::<LittleEndian>().map_err(io)?;
        let width = r.read_u8().map_err(io)?;
        let hash_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut hash = vec![0u8; hash_len];
        r.read_exact(&mut hash).map_err(io)?;
        if hash != vocab_hash.as_bytes() {
            return Err(Error::Integrity(
                "index snapshot was built with a different vocabulary".into(),
            ));
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            let v = match width {
                4 => r.read_f32::<LittleEndian>().map_err(io)? as f64,
                8 => r.read_f64::<LittleEndian>().map_err(io)?,
                other => return Err(Error::Integrity(format!("unknown element width {other}"))),
            };
            data.push(T::of(v));
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(io)?;
            ids.push(
                String::from_utf8(buf).map_err(|e| Error::Integrity(format!("entity id is not UTF-8: {e}")))?,
            );
        }
        EntityIndex::from_parts(ids, Matrix::from_vec(n, d, data), generation)
    }
}
