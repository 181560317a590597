//! One training batch: discrete choices first, then a single graph for the
//! joint objective.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::infer::{decode_rows, retrieve_candidates};
use super::model::Model;
use crate::autograd::{Graph, Var};
use crate::data::{KnowledgeBase, Passage};
use crate::encoder::{encode_batch, PackedHidden};
use crate::error::{Error, Result};
use crate::reader::{reader_forward, renormalize, span_positions, ReaderConfig, ReaderGraph, ReaderTarget};
use crate::retriever::{description_tokens, nce_loss, sample_negatives, span_representation, EntityIndex, SpanCache};
use crate::Scalar;

/// Discrete inputs of one passage's losses, fixed before the graph is built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassagePlan {
    /// Cached token positions pooled into the span query; empty means CLS only.
    pub span_positions: Vec<usize>,
    pub gold_rows: Vec<usize>,
    pub negatives: Vec<usize>,
    pub reader_rows: Vec<usize>,
    /// `false` for gold candidates injected for supervision.
    pub genuine: Vec<bool>,
}

/// How a batch chooses its candidates and which losses it trains.
#[derive(Debug, Clone, Copy)]
pub struct BatchSpec {
    pub retriever_loss: bool,
    pub reader_loss: bool,
    pub span_query: bool,
    pub live_candidates: bool,
    pub k: usize,
    pub n_hard: usize,
    pub n_rand: usize,
    pub in_batch_negatives: bool,
    pub inject_gold: bool,
}

pub fn gold_rows(kb: &KnowledgeBase, passage: &Passage) -> Vec<usize> {
    let rows: BTreeSet<usize> = passage
        .gold_mentions
        .iter()
        .filter_map(|m| kb.row(&m.entity_id))
        .collect();
    rows.into_iter().collect()
}

/// Candidate rows with absent golds appended in place of the lowest-ranked ones.
pub fn inject_gold(candidates: &[usize], gold: &[usize], k: usize) -> (Vec<usize>, Vec<bool>) {
    let missing: Vec<usize> = gold.iter().copied().filter(|g| !candidates.contains(g)).take(k).collect();
    let keep = candidates.len().min(k).saturating_sub(missing.len());
    let mut rows = candidates[..keep].to_vec();
    let mut genuine = vec![true; keep];
    rows.extend(&missing);
    genuine.extend(std::iter::repeat(false).take(missing.len()));
    (rows, genuine)
}

/// Chooses span queries, negatives and reader candidates for a batch.
#[allow(clippy::too_many_arguments)]
pub fn plan_batch<T: Scalar, R: Rng>(
    model: &Model<T>,
    index: &EntityIndex<T>,
    kb: &KnowledgeBase,
    passages: &[&Passage],
    cache: &SpanCache,
    frozen: Option<&[Vec<usize>]>,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<PassagePlan>> {
    let need_query = spec.retriever_loss || (spec.reader_loss && spec.live_candidates);
    let encoded = if need_query {
        let toks: Vec<&[u32]> = passages.iter().map(|p| p.tokens.as_slice()).collect();
        Some(encode_batch(&model.store, &model.sentence_encoder, &toks)?)
    } else {
        None
    };
    let golds: Vec<Vec<usize>> = passages.iter().map(|p| gold_rows(kb, p)).collect();
    let mut plans = Vec::with_capacity(passages.len());
    for (b, p) in passages.iter().enumerate() {
        let span_positions = if spec.span_query {
            cache.positions(&p.passage_id)
        } else {
            Vec::new()
        };
        let mut plan = PassagePlan {
            span_positions,
            gold_rows: golds[b].clone(),
            negatives: Vec::new(),
            reader_rows: Vec::new(),
            genuine: Vec::new(),
        };
        let query = match &encoded {
            Some(outs) => {
                let out = &outs[b];
                let r_span = span_representation(&out.token_vecs, &plan.span_positions)?;
                Some((out.cls_vec.clone(), r_span))
            }
            None => None,
        };
        if spec.retriever_loss && !plan.gold_rows.is_empty() {
            let (r_cls, r_span) = query.as_ref().expect("query encoded");
            let q = index.q_scores(r_cls, r_span.as_deref())?;
            let gold: BTreeSet<usize> = plan.gold_rows.iter().copied().collect();
            plan.negatives = sample_negatives(&q, &gold, spec.n_hard, spec.n_rand, rng)?;
            if spec.in_batch_negatives {
                let taken: BTreeSet<usize> = plan.negatives.iter().copied().collect();
                let extra: BTreeSet<usize> = golds
                    .iter()
                    .enumerate()
                    .filter(|(o, _)| *o != b)
                    .flat_map(|(_, g)| g.iter().copied())
                    .filter(|r| !gold.contains(r) && !taken.contains(r))
                    .collect();
                plan.negatives.extend(extra);
            }
        }
        if spec.reader_loss {
            let candidates = if spec.live_candidates {
                let (r_cls, r_span) = query.as_ref().expect("query encoded");
                retrieve_candidates(index, &p.passage_id, r_cls, r_span.as_deref(), spec.k)?.rows()
            } else {
                let frozen = frozen.ok_or_else(|| Error::Input("reader phase without frozen candidates".into()))?;
                frozen[b].clone()
            };
            let (rows, genuine) = if spec.inject_gold {
                inject_gold(&candidates, &plan.gold_rows, spec.k)
            } else {
                let n = candidates.len();
                (candidates, vec![true; n])
            };
            plan.reader_rows = rows;
            plan.genuine = genuine;
        }
        plans.push(plan);
    }
    Ok(plans)
}

/// Loss nodes of a batch. `retriever` and `reader` are batch means.
#[derive(Debug)]
pub struct BatchLosses {
    pub total: Option<Var>,
    pub retriever: Option<Var>,
    pub reader: Option<Var>,
    pub readers: Vec<Option<ReaderGraph>>,
}

fn mean<T: Scalar>(g: &mut Graph<'_, T>, terms: &[Var]) -> Option<Var> {
    let s = g.sum_scalars(terms)?;
    Some(g.scale(s, T::one() / T::of(terms.len() as f64)))
}

/// Records `L = mean L_retr + mean L_read` for a planned batch.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    kb: &KnowledgeBase,
    passages: &[&Passage],
    plans: &[PassagePlan],
    spec: &BatchSpec,
    reader: &ReaderConfig,
) -> Result<BatchLosses> {
    let mut retr_terms = Vec::new();
    if spec.retriever_loss && plans.iter().any(|p| !p.gold_rows.is_empty()) {
        let toks: Vec<&[u32]> = passages.iter().map(|p| p.tokens.as_slice()).collect();
        let sent = model.sentence_encoder.forward(g, &toks)?;
        let union: BTreeSet<usize> = plans
            .iter()
            .flat_map(|p| p.gold_rows.iter().chain(&p.negatives).copied())
            .collect();
        let union: Vec<usize> = union.into_iter().collect();
        let slot: BTreeMap<usize, usize> = union.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let descs: Vec<&[u32]> = union.iter().map(|&r| description_tokens(&kb.get(r).desc_tokens)).collect();
        let ent = model.entity_encoder.forward(g, &descs)?;
        let ent_cls = g.gather(ent.hidden, ent.cls_rows());
        for (b, plan) in plans.iter().enumerate() {
            if plan.gold_rows.is_empty() {
                continue;
            }
            let mut q = g.row(sent.hidden, sent.cls_row(b));
            if !plan.span_positions.is_empty() {
                let rows = plan.span_positions.iter().map(|&i| sent.token_row(b, i)).collect();
                let span = g.mean_rows(sent.hidden, rows);
                q = g.add(q, span);
            }
            let idx: Vec<usize> = plan.gold_rows.iter().chain(&plan.negatives).map(|r| slot[r]).collect();
            let e = g.gather(ent_cls, idx);
            let scores = g.matmul_nt(e, q);
            let n_gold = plan.gold_rows.len();
            let q_gold = g.gather(scores, (0..n_gold).collect());
            let q_neg = if plan.negatives.is_empty() {
                None
            } else {
                Some(g.gather(scores, (n_gold..n_gold + plan.negatives.len()).collect()))
            };
            if let Some(l) = nce_loss(g, q_gold, q_neg) {
                retr_terms.push(l);
            }
        }
    }

    let mut read_terms = Vec::new();
    let mut readers = vec![None; plans.len()];
    if spec.reader_loss {
        let enc = model.reader_encoder();
        let mut seqs = Vec::new();
        let mut ranges = Vec::with_capacity(plans.len());
        for (p, plan) in passages.iter().zip(plans) {
            let start = seqs.len();
            for &r in &plan.reader_rows {
                seqs.push(enc.joint_tokens(&p.tokens, description_tokens(&kb.get(r).desc_tokens))?);
            }
            ranges.push(start..seqs.len());
        }
        if !seqs.is_empty() {
            let packed = enc.forward(g, &seqs)?;
            for (b, (p, plan)) in passages.iter().zip(plans).enumerate() {
                let range = ranges[b].clone();
                if range.is_empty() {
                    continue;
                }
                let view = PackedHidden {
                    hidden: packed.hidden,
                    offsets: packed.offsets[range.clone()].to_vec(),
                    lens: packed.lens[range].to_vec(),
                };
                let rg = reader_forward(g, &model.heads, &view, p.tokens.len(), reader)?;
                let targets: Vec<ReaderTarget> = plan
                    .reader_rows
                    .iter()
                    .map(|&r| ReaderTarget::for_candidate(&kb.get(r).entity_id, p))
                    .collect();
                if let Some(l) = rg.loss(g, &targets, reader.null_span)? {
                    read_terms.push(l);
                }
                readers[b] = Some(rg);
            }
        }
    }

    let retriever = mean(g, &retr_terms);
    let reader_mean = mean(g, &read_terms);
    let total = match (retriever, reader_mean) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (a, b) => a.or(b),
    };
    Ok(BatchLosses {
        total,
        retriever,
        reader: reader_mean,
        readers,
    })
}

/// Span positions decoded from the genuinely retrieved candidates of each passage.
pub fn feedback_positions<T: Scalar>(
    g: &Graph<'_, T>,
    kb: &KnowledgeBase,
    plans: &[PassagePlan],
    losses: &BatchLosses,
    reader: &ReaderConfig,
) -> Result<Vec<Option<BTreeSet<usize>>>> {
    plans
        .iter()
        .zip(&losses.readers)
        .map(|(plan, rg)| {
            let Some(rg) = rg else { return Ok(None) };
            let spans = rg.span_scores(g);
            let rank = renormalize(&rg.rank_probs(g), &plan.genuine);
            let keep: Vec<usize> = (0..plan.reader_rows.len()).filter(|&j| plan.genuine[j]).collect();
            let rows: Vec<usize> = keep.iter().map(|&j| plan.reader_rows[j]).collect();
            let spans: Vec<_> = keep.iter().map(|&j| spans[j].clone()).collect();
            let rank: Vec<T> = keep.iter().map(|&j| rank[j]).collect();
            let preds = decode_rows(kb, &rows, &spans, &rank, reader)?;
            Ok(Some(span_positions(&preds)))
        })
        .collect()
}
