//! Retrieval and reading without gradients: candidate generation,
//! warm-up seeding and two-pass prediction.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::config::TrainMode;
use super::model::Model;
use crate::autograd::Graph;
use crate::data::{KnowledgeBase, Passage};
use crate::encoder::encode;
use crate::error::Result;
use crate::eval::{gold_entities, gold_triples, micro_prf, predicted_triples, recall_at_k, EvalReport};
use crate::reader::{
    decode, reader_forward, span_positions, PredictionRecord, ReaderConfig, ReaderPrediction, SpanScores,
};
use crate::retriever::{
    description_tokens, merge_candidates, retrieve_cls, retrieve_span, span_representation, CandidateSet,
    EntityIndex, SpanCache,
};
use crate::Scalar;

/// CLS retrieval, span retrieval when a span query exists, union re-ranked by `Q`.
pub fn retrieve_candidates<T: Scalar>(
    index: &EntityIndex<T>,
    passage_id: &str,
    r_cls: &[T],
    r_span: Option<&[T]>,
    k: usize,
) -> Result<CandidateSet<T>> {
    let e_cls = retrieve_cls(index, passage_id, r_cls, k)?;
    let e_span = retrieve_span(index, passage_id, r_span, k)?;
    merge_candidates(&e_cls, &e_span, index, r_cls, r_span, k)
}

/// Start/end and rank distributions of `rows` read against one passage.
pub fn read_candidates<T: Scalar>(
    model: &Model<T>,
    kb: &KnowledgeBase,
    passage: &Passage,
    rows: &[usize],
    config: &ReaderConfig,
) -> Result<(Vec<SpanScores<T>>, Vec<T>)> {
    let enc = model.reader_encoder();
    let seqs = rows
        .iter()
        .map(|&r| enc.joint_tokens(&passage.tokens, description_tokens(&kb.get(r).desc_tokens)))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new(&model.store);
    let packed = enc.forward(&mut g, &seqs)?;
    let rg = reader_forward(&mut g, &model.heads, &packed, passage.tokens.len(), config)?;
    Ok((rg.span_scores(&g), rg.rank_probs(&g)))
}

pub fn decode_rows<T: Scalar>(
    kb: &KnowledgeBase,
    rows: &[usize],
    spans: &[SpanScores<T>],
    rank: &[T],
    config: &ReaderConfig,
) -> Result<Vec<ReaderPrediction<T>>> {
    let ids: Vec<&str> = rows.iter().map(|&r| kb.get(r).entity_id.as_str()).collect();
    decode(&ids, spans, rank, config.thr, config.max_span_len)
}

/// Candidate rows for every passage; span queries come from `cache` when given.
pub fn candidate_rows<T: Scalar>(
    model: &Model<T>,
    index: &EntityIndex<T>,
    passages: &[Passage],
    cache: Option<&SpanCache>,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    passages
        .par_iter()
        .map(|p| {
            let out = encode(&model.store, &model.sentence_encoder, &p.tokens)?;
            let positions = cache.map(|c| c.positions(&p.passage_id)).unwrap_or_default();
            let r_span = span_representation(&out.token_vecs, &positions)?;
            let set = retrieve_candidates(index, &p.passage_id, &out.cls_vec, r_span.as_deref(), k)?;
            Ok(set.rows())
        })
        .collect()
}

/// Predicted token positions per passage from CLS-only retrieval and a reader pass.
pub fn seed_span_cache<T: Scalar>(
    model: &Model<T>,
    index: &EntityIndex<T>,
    kb: &KnowledgeBase,
    passages: &[Passage],
    k: usize,
    config: &ReaderConfig,
) -> Result<SpanCache> {
    let positions: Vec<BTreeSet<usize>> = passages
        .par_iter()
        .map(|p| {
            let out = encode(&model.store, &model.sentence_encoder, &p.tokens)?;
            let set = retrieve_candidates(index, &p.passage_id, &out.cls_vec, None, k)?;
            let rows = set.rows();
            let (spans, rank) = read_candidates(model, kb, p, &rows, config)?;
            Ok(span_positions(&decode_rows(kb, &rows, &spans, &rank, config)?))
        })
        .collect::<Result<_>>()?;
    let mut cache = SpanCache::new();
    for (p, pos) in passages.iter().zip(positions) {
        cache.set(&p.passage_id, pos);
    }
    Ok(cache)
}

#[derive(Debug, Clone)]
pub struct PassageOutput<T> {
    pub first_pass: Option<CandidateSet<T>>,
    pub candidates: CandidateSet<T>,
    pub predictions: Vec<ReaderPrediction<T>>,
}

#[derive(Debug, Clone)]
pub struct PredictOutput<T> {
    pub passages: Vec<PassageOutput<T>>,
}

impl<T: Scalar> PredictOutput<T> {
    pub fn records(&self) -> Vec<PredictionRecord> {
        self.passages
            .iter()
            .map(|p| PredictionRecord::new(&p.candidates.passage_id, &p.predictions))
            .collect()
    }

    pub fn candidate_sets(&self) -> Vec<CandidateSet<T>> {
        self.passages.iter().map(|p| p.candidates.clone()).collect()
    }

    pub fn candidate_map(&self) -> BTreeMap<String, Vec<String>> {
        self.passages
            .iter()
            .map(|p| {
                (
                    p.candidates.passage_id.clone(),
                    p.candidates.entity_ids().into_iter().map(str::to_string).collect(),
                )
            })
            .collect()
    }
}

/// Inference for a trained model.
///
/// Span-feedback modes read twice: CLS-only retrieval seeds span queries for a
/// second CLS + span retrieval. Other modes stop after the first pass.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    index: &EntityIndex<T>,
    kb: &KnowledgeBase,
    passages: &[Passage],
    mode: TrainMode,
    k: usize,
    config: &ReaderConfig,
) -> Result<PredictOutput<T>> {
    let two_pass = mode.span_feedback();
    let passages = passages
        .par_iter()
        .map(|p| {
            let out = encode(&model.store, &model.sentence_encoder, &p.tokens)?;
            let first = retrieve_candidates(index, &p.passage_id, &out.cls_vec, None, k)?;
            let rows = first.rows();
            let (spans, rank) = read_candidates(model, kb, p, &rows, config)?;
            let preds = decode_rows(kb, &rows, &spans, &rank, config)?;
            if !two_pass {
                return Ok(PassageOutput {
                    first_pass: None,
                    candidates: first,
                    predictions: preds,
                });
            }
            let positions: Vec<usize> = span_positions(&preds).into_iter().collect();
            let r_span = span_representation(&out.token_vecs, &positions)?;
            let second = retrieve_candidates(index, &p.passage_id, &out.cls_vec, r_span.as_deref(), k)?;
            let rows = second.rows();
            let (spans, rank) = read_candidates(model, kb, p, &rows, config)?;
            let preds = decode_rows(kb, &rows, &spans, &rank, config)?;
            Ok(PassageOutput {
                first_pass: Some(first),
                candidates: second,
                predictions: preds,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictOutput { passages })
}

/// InKB micro scores and Recall@K of a prediction run.
pub fn score<T: Scalar>(
    output: &PredictOutput<T>,
    passages: &[Passage],
    kb: &KnowledgeBase,
    ks: &[usize],
    mode: TrainMode,
    seed: u64,
) -> EvalReport {
    let prf = micro_prf(&gold_triples(passages), &predicted_triples(&output.records()), Some(kb));
    let recall = recall_at_k(&gold_entities(passages, Some(kb)), &output.candidate_map(), ks);
    EvalReport::new(mode.label(), seed, prf, recall)
}
