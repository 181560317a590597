//! Span reader over joint passage ⊕ entity encodings.
//!
//! Span distributions are indexed in paper coordinates: slot 0 is the CLS
//! position and sentence token `i` (0-based) sits at slot `i + 1`. With
//! [`NullSpan::Off`] slot 0 carries no probability mass.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Passage;
use crate::encoder::{EncoderOutput, PackedHidden};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{dot, log_sum_exp, Matrix};
use crate::Scalar;

/// Treatment of the CLS slot in the start/end distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullSpan {
    /// CLS joins the support; non-gold candidates are supervised towards (0, 0).
    Cls,
    /// Support is the sentence alone; non-gold candidates get no span term.
    Off,
}

/// Row whose rank-head logit scores a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPosition {
    FirstToken,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReaderConfig {
    pub null_span: NullSpan,
    pub rank_position: RankPosition,
    pub thr: f64,
    pub max_span_len: usize,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        ReaderConfig {
            null_span: NullSpan::Cls,
            rank_position: RankPosition::FirstToken,
            thr: 0.03,
            max_span_len: 10,
        }
    }
}

/// Start, end and rank projections, each `d × 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderHeads {
    pub start: ParamId,
    pub end: ParamId,
    pub rank: ParamId,
}

impl ReaderHeads {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        ReaderHeads {
            start: store.add_uniform(format!("{prefix}.w1"), ParamGroup::Reader, dim, 1, scale, rng),
            end: store.add_uniform(format!("{prefix}.w2"), ParamGroup::Reader, dim, 1, scale, rng),
            rank: store.add_uniform(format!("{prefix}.w3"), ParamGroup::Reader, dim, 1, scale, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.start, self.end, self.rank]
    }
}

/// Start and end distributions of one candidate, length `sentence_len + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanScores<T> {
    pub p1: Vec<T>,
    pub p2: Vec<T>,
}

impl<T: Scalar> SpanScores<T> {
    pub fn sentence_len(&self) -> usize {
        self.p1.len() - 1
    }
}

/// Gold supervision for one candidate. Spans are 0-based sentence offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReaderTarget {
    pub entity_id: String,
    pub spans: Vec<(usize, usize)>,
    pub is_gold: bool,
}

impl ReaderTarget {
    pub fn for_candidate(entity_id: &str, passage: &Passage) -> Self {
        let spans: Vec<(usize, usize)> = passage
            .gold_mentions
            .iter()
            .filter(|m| m.entity_id == entity_id)
            .map(|m| (m.start, m.end))
            .collect();
        ReaderTarget {
            entity_id: entity_id.to_string(),
            is_gold: !spans.is_empty(),
            spans,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderPrediction<T> {
    pub entity_id: String,
    pub start: usize,
    pub end: usize,
    pub p_span: T,
    pub p_rank: T,
    pub score: T,
}

fn softmax<T: Scalar>(logits: &[T], active: impl Fn(usize) -> bool) -> Vec<T> {
    let lse = log_sum_exp(
        logits
            .iter()
            .enumerate()
            .filter(|(i, _)| active(*i))
            .map(|(_, &v)| v)
            .collect::<Vec<_>>(),
    );
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if active(i) { (v - lse).exp() } else { T::zero() })
        .collect()
}

fn sentence_len(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().take_while(|&&m| m).count();
    if n == 0 {
        return Err(Error::Input("sentence mask selects no positions".into()));
    }
    if mask[n..].iter().any(|&m| m) {
        return Err(Error::Input("sentence mask must be a prefix".into()));
    }
    Ok(n)
}

/// Start/end distributions from a finished joint encoding.
pub fn span_distributions<T: Scalar>(
    joint: &EncoderOutput<T>,
    sentence_mask: &[bool],
    w1: &[T],
    w2: &[T],
    null_span: NullSpan,
) -> Result<SpanScores<T>> {
    let n = sentence_len(sentence_mask)?;
    if n > joint.token_vecs.rows() {
        return Err(Error::Input("sentence mask longer than the encoding".into()));
    }
    let logits = |w: &[T]| -> Vec<T> {
        std::iter::once(dot(&joint.cls_vec, w))
            .chain((0..n).map(|i| dot(joint.token_vecs.row(i), w)))
            .collect()
    };
    let active = |i: usize| i > 0 || null_span == NullSpan::Cls;
    Ok(SpanScores {
        p1: softmax(&logits(w1), active),
        p2: softmax(&logits(w2), active),
    })
}

/// `p1(x) · p2(y)` in paper coordinates.
pub fn span_probability<T: Scalar>(scores: &SpanScores<T>, x: usize, y: usize) -> T {
    scores.p1[x] * scores.p2[y]
}

/// Softmax over candidates of the rank-head logit.
pub fn rank_distribution<T: Scalar>(
    joints: &[&EncoderOutput<T>],
    w3: &[T],
    position: RankPosition,
) -> Result<Vec<T>> {
    if joints.is_empty() {
        return Err(Error::Input("rank distribution over no candidates".into()));
    }
    let logits: Vec<T> = joints
        .iter()
        .map(|j| match position {
            RankPosition::FirstToken => dot(j.token_vecs.row(0), w3),
            RankPosition::Cls => dot(&j.cls_vec, w3),
        })
        .collect();
    Ok(softmax(&logits, |_| true))
}

/// Rank distribution restricted to `keep`, renormalised.
pub fn renormalize<T: Scalar>(p: &[T], keep: &[bool]) -> Vec<T> {
    let total: T = p.iter().zip(keep).filter(|(_, &k)| k).map(|(&v, _)| v).sum();
    p.iter()
        .zip(keep)
        .map(|(&v, &k)| if k && total > T::zero() { v / total } else { T::zero() })
        .collect()
}

/// Every `(entity, x, y)` with `x ≤ y`, `y - x < max_span_len`, `x ≥ 1` and score `> thr`.
pub fn decode<T: Scalar>(
    entity_ids: &[&str],
    spans: &[SpanScores<T>],
    p_rank: &[T],
    thr: f64,
    max_span_len: usize,
) -> Result<Vec<ReaderPrediction<T>>> {
    if !(0.0..1.0).contains(&thr) {
        return Err(Error::Config(format!("threshold {thr} must lie in [0, 1)")));
    }
    if entity_ids.len() != spans.len() || spans.len() != p_rank.len() {
        return Err(Error::Input("decode inputs are not aligned".into()));
    }
    let thr_t = T::of(thr);
    let mut out = Vec::new();
    for ((&id, s), &pr) in entity_ids.iter().zip(spans).zip(p_rank) {
        let n = s.sentence_len();
        let best_end = s.p2[1..].iter().fold(T::zero(), |m, &v| m.max(v));
        for x in 1..=n {
            if s.p1[x] * best_end * pr <= thr_t {
                continue;
            }
            for y in x..=n.min(x + max_span_len - 1) {
                let p_span = s.p1[x] * s.p2[y];
                let score = p_span * pr;
                if score > thr_t {
                    out.push(ReaderPrediction {
                        entity_id: id.to_string(),
                        start: x - 1,
                        end: y - 1,
                        p_span,
                        p_rank: pr,
                        score,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.entity_id.cmp(&b.entity_id))
            .then_with(|| (a.start, a.end).cmp(&(b.start, b.end)))
    });
    Ok(out)
}

/// Union of the token positions covered by `predictions`.
pub fn span_positions<T>(predictions: &[ReaderPrediction<T>]) -> BTreeSet<usize> {
    predictions.iter().flat_map(|p| p.start..=p.end).collect()
}

fn check_targets(n_candidates: usize, targets: &[ReaderTarget], sentence_len: usize) -> Result<()> {
    if targets.len() != n_candidates {
        return Err(Error::Input(format!(
            "{} reader targets for {n_candidates} candidates",
            targets.len()
        )));
    }
    for t in targets {
        if let Some(&(s, e)) = t.spans.iter().find(|(s, e)| s > e || *e >= sentence_len) {
            return Err(Error::Input(format!(
                "gold span ({s}, {e}) for {} outside a {sentence_len}-token sentence",
                t.entity_id
            )));
        }
    }
    Ok(())
}

/// Scalar reader loss from finished distributions.
pub fn reader_loss_value<T: Scalar>(
    spans: &[SpanScores<T>],
    p_rank: &[T],
    targets: &[ReaderTarget],
    null_span: NullSpan,
) -> Result<T> {
    let n = spans.first().map_or(0, |s| s.sentence_len());
    check_targets(spans.len(), targets, n)?;
    let mut loss = T::zero();
    for ((s, t), &pr) in spans.iter().zip(targets).zip(p_rank) {
        if t.is_gold {
            loss -= pr.ln();
            for &(a, b) in &t.spans {
                loss -= span_probability(s, a + 1, b + 1).ln();
            }
        } else if null_span == NullSpan::Cls {
            loss -= span_probability(s, 0, 0).ln();
        }
    }
    Ok(loss)
}

/// Reader quantities for one passage recorded on a graph.
#[derive(Debug, Clone)]
pub struct ReaderGraph {
    /// Per candidate, `(n + 1) × 1` log start probabilities.
    pub log_p1: Vec<Var>,
    pub log_p2: Vec<Var>,
    /// `K × 1` log rank probabilities.
    pub log_rank: Var,
    pub sentence_len: usize,
}

/// Heads over packed joint encodings; candidate `j` is sequence `j` of `packed`.
pub fn reader_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    heads: &ReaderHeads,
    packed: &PackedHidden,
    sentence_len: usize,
    config: &ReaderConfig,
) -> Result<ReaderGraph> {
    let k = packed.offsets.len();
    if k == 0 || sentence_len == 0 {
        return Err(Error::Input("reader needs candidates and a non-empty sentence".into()));
    }
    let mut rows = Vec::with_capacity(k * (sentence_len + 1));
    for j in 0..k {
        rows.push(packed.cls_row(j));
        rows.extend((0..sentence_len).map(|i| packed.token_row(j, i)));
    }
    let sel = g.gather(packed.hidden, rows);
    let w1 = g.param(heads.start);
    let w2 = g.param(heads.end);
    let l1 = g.matmul(sel, w1);
    let l2 = g.matmul(sel, w2);
    let width = sentence_len + 1;
    let mask: Option<Vec<bool>> = match config.null_span {
        NullSpan::Cls => None,
        NullSpan::Off => Some((0..width).map(|i| i > 0).collect()),
    };
    let mut log_p1 = Vec::with_capacity(k);
    let mut log_p2 = Vec::with_capacity(k);
    for j in 0..k {
        let idx: Vec<usize> = (j * width..(j + 1) * width).collect();
        let a = g.gather(l1, idx.clone());
        let b = g.gather(l2, idx);
        log_p1.push(g.log_softmax(a, mask.clone()));
        log_p2.push(g.log_softmax(b, mask.clone()));
    }
    let rank_rows: Vec<usize> = (0..k)
        .map(|j| match config.rank_position {
            RankPosition::FirstToken => packed.token_row(j, 0),
            RankPosition::Cls => packed.cls_row(j),
        })
        .collect();
    let r = g.gather(packed.hidden, rank_rows);
    let w3 = g.param(heads.rank);
    let l3 = g.matmul(r, w3);
    let log_rank = g.log_softmax(l3, None);
    Ok(ReaderGraph {
        log_p1,
        log_p2,
        log_rank,
        sentence_len,
    })
}

impl ReaderGraph {
    pub fn span_scores<T: Scalar>(&self, g: &Graph<'_, T>) -> Vec<SpanScores<T>> {
        let exp = |v: Var| g.value(v).data().iter().map(|x| x.exp()).collect();
        self.log_p1
            .iter()
            .zip(&self.log_p2)
            .map(|(&a, &b)| SpanScores { p1: exp(a), p2: exp(b) })
            .collect()
    }

    pub fn rank_probs<T: Scalar>(&self, g: &Graph<'_, T>) -> Vec<T> {
        g.value(self.log_rank).data().iter().map(|x| x.exp()).collect()
    }

    /// Reader loss on the graph; `None` when no term applies.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        targets: &[ReaderTarget],
        null_span: NullSpan,
    ) -> Result<Option<Var>> {
        check_targets(self.log_p1.len(), targets, self.sentence_len)?;
        let mut terms = Vec::new();
        for (j, t) in targets.iter().enumerate() {
            if t.is_gold {
                terms.push(g.pick(self.log_rank, j));
                for &(a, b) in &t.spans {
                    terms.push(g.pick(self.log_p1[j], a + 1));
                    terms.push(g.pick(self.log_p2[j], b + 1));
                }
            } else if null_span == NullSpan::Cls {
                terms.push(g.pick(self.log_p1[j], 0));
                terms.push(g.pick(self.log_p2[j], 0));
            }
        }
        Ok(g.sum_scalars(&terms).map(|s| g.scale(s, -T::one())))
    }
}

/// One line of a prediction export, 0-based token coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub passage_id: String,
    pub predictions: Vec<PredictedSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedSpan {
    pub entity_id: String,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl PredictionRecord {
    pub fn new<T: Scalar>(passage_id: &str, preds: &[ReaderPrediction<T>]) -> Self {
        PredictionRecord {
            passage_id: passage_id.to_string(),
            predictions: preds
                .iter()
                .map(|p| PredictedSpan {
                    entity_id: p.entity_id.clone(),
                    start: p.start,
                    end: p.end,
                    score: p.score.as_f64(),
                })
                .collect(),
        }
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    crate::data::kb::read_jsonl(path)
}

/// Column vector values of a head.
pub fn head_values<T: Scalar>(store: &ParamStore<T>, id: ParamId) -> &[T] {
    store.value(id).data()
}

/// Shorthand used by tests: a matrix from per-row closures.
#[doc(hidden)]
pub fn joint_from_rows<T: Scalar>(cls: Vec<T>, rows: &[Vec<T>]) -> EncoderOutput<T> {
    EncoderOutput {
        cls_vec: cls,
        token_vecs: Matrix::from_rows(rows),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mention;
    use crate::encoder::{EncoderConfig, EncoderParams};
    use crate::params::GradientTape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize, null: NullSpan) -> SpanScores<f64> {
        let joint = joint_from_rows(vec![0.0; 2], &vec![vec![0.3, -1.0]; n + 3]);
        let mask: Vec<bool> = (0..n + 3).map(|i| i < n).collect();
        span_distributions(&joint, &mask, &[0.0, 0.0], &[0.0, 0.0], null).unwrap()
    }

    #[test]
    fn zero_heads_give_uniform_sentence_support() {
        let s = uniform(4, NullSpan::Off);
        assert_eq!(s.p1[0], 0.0);
        for x in 1..=4 {
            assert!((s.p1[x] - 0.25).abs() < 1e-15);
        }
        let total: f64 = (0..=4).flat_map(|x| (0..=4).map(move |y| (x, y))).map(|(x, y)| span_probability(&s, x, y)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((span_probability(&s, 3, 1) - 1.0 / 16.0).abs() < 1e-15);
        let c = uniform(4, NullSpan::Cls);
        assert!((c.p1[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn masking_ignores_description_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = [true, true, true, false, false, false, false];
        let a = span_distributions(&joint_from_rows(vec![0.1, 0.2, 0.3], &rows), &mask, &w, &w, NullSpan::Off).unwrap();
        let mut perturbed = rows.clone();
        perturbed[5] = vec![50.0, -50.0, 9.0];
        let b = span_distributions(&joint_from_rows(vec![0.1, 0.2, 0.3], &perturbed), &mask, &w, &w, NullSpan::Off).unwrap();
        assert_eq!(a, b);
        assert!(span_distributions(&joint_from_rows(vec![0.0; 3], &rows), &[false; 7], &w, &w, NullSpan::Off).is_err());
    }

    #[test]
    fn rank_distribution_cases() {
        let j = joint_from_rows(vec![1.0, 0.0], &[vec![0.5, 2.0]]);
        assert_eq!(rank_distribution(&[&j], &[1.0, 1.0], RankPosition::FirstToken).unwrap(), vec![1.0]);
        let p = rank_distribution(&[&j, &j, &j], &[1.0, -3.0], RankPosition::FirstToken).unwrap();
        assert!(p.iter().all(|&v: &f64| (v - 1.0 / 3.0).abs() < 1e-15));
        let k = joint_from_rows(vec![0.0, 1.0], &[vec![0.5, 2.0]]);
        let by_cls = rank_distribution(&[&j, &k], &[2.0, 0.0], RankPosition::Cls).unwrap();
        assert!(by_cls[0] > by_cls[1]);
        let by_tok: Vec<f64> = rank_distribution(&[&j, &k], &[2.0, 0.0], RankPosition::FirstToken).unwrap();
        assert!((by_tok[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn decode_single_survivor_and_threshold() {
        // slots (3,4) are 0-based tokens (2,3)
        let s = SpanScores {
            p1: vec![0.0, 0.01, 0.01, 0.96, 0.01, 0.01, 0.0],
            p2: vec![0.0, 0.01, 0.01, 0.01, 0.95, 0.02, 0.0],
        };
        let p = decode(&["E"], &[s.clone()], &[1.0], 0.5, 10).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].start, p[0].end), (2, 3));
        assert_eq!(p[0].score, p[0].p_span * p[0].p_rank);
        assert!(decode(&["E"], &[s], &[1.0], 0.99, 10).unwrap().is_empty());
        assert!(decode::<f64>(&["E"], &[uniform(2, NullSpan::Off)], &[1.0], 1.0, 10).is_err());
    }

    #[test]
    fn decode_respects_order_length_and_null() {
        let s = uniform(4, NullSpan::Cls);
        let p = decode(&["E"], &[s], &[1.0], 0.0, 2).unwrap();
        assert!(p.iter().all(|q| q.start <= q.end && q.end - q.start < 2));
        assert_eq!(p.len(), 4 + 3);
        let positions = span_positions(&p);
        assert_eq!(positions, (0..4).collect());
    }

    #[test]
    fn reader_loss_closed_forms() {
        let spans = vec![uniform(4, NullSpan::Off), uniform(4, NullSpan::Off)];
        let targets = vec![
            ReaderTarget { entity_id: "A".into(), spans: vec![(0, 1)], is_gold: true },
            ReaderTarget { entity_id: "B".into(), spans: vec![], is_gold: false },
        ];
        let l = reader_loss_value(&spans, &[0.5, 0.5], &targets, NullSpan::Off).unwrap();
        assert!((l - (16f64.ln() + 2f64.ln())).abs() < 1e-12);
        assert!((l - 3.4657).abs() < 1e-4);

        let cls = vec![uniform(4, NullSpan::Cls), uniform(4, NullSpan::Cls)];
        let l = reader_loss_value(&cls, &[0.5, 0.5], &targets, NullSpan::Cls).unwrap();
        assert!((l - (2.0 * 25f64.ln() + 2f64.ln())).abs() < 1e-12);

        let none = vec![
            ReaderTarget { entity_id: "A".into(), spans: vec![], is_gold: false },
            ReaderTarget { entity_id: "B".into(), spans: vec![], is_gold: false },
        ];
        let l = reader_loss_value(&cls, &[0.5, 0.5], &none, NullSpan::Cls).unwrap();
        assert!((l - 2.0 * 25f64.ln()).abs() < 1e-12);
        assert!(reader_loss_value(&cls, &[0.5, 0.5], &none[..1], NullSpan::Cls).is_err());
    }

    #[test]
    fn graph_route_matches_value_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let cfg = EncoderConfig { vocab_size: 20, dim: 8, layers: 1, heads: 2, ffn_dim: 16, max_len: 16 };
        let enc = EncoderParams::new(&mut store, "s", ParamGroup::Reader, cfg, &mut rng).unwrap();
        let heads = ReaderHeads::new(&mut store, "reader", 8, &mut rng);
        let sentence = [5u32, 6, 7, 8];
        let descs: [&[u32]; 3] = [&[9, 10], &[11, 12, 13], &[14]];
        let passage = Passage {
            passage_id: "d#0".into(),
            doc_id: "d".into(),
            tokens: sentence.to_vec(),
            gold_mentions: vec![Mention { start: 1, end: 2, entity_id: "B".into() }],
        };
        for null in [NullSpan::Cls, NullSpan::Off] {
            for pos in [RankPosition::FirstToken, RankPosition::Cls] {
                let rc = ReaderConfig { null_span: null, rank_position: pos, ..ReaderConfig::default() };
                let mut g = Graph::new(&store);
                let seqs: Vec<Vec<u32>> = descs.iter().map(|d| enc.joint_tokens(&sentence, d).unwrap()).collect();
                let packed = enc.forward(&mut g, &seqs).unwrap();
                let rg = reader_forward(&mut g, &heads, &packed, 4, &rc).unwrap();
                let targets: Vec<ReaderTarget> = ["A", "B", "C"].iter().map(|e| ReaderTarget::for_candidate(e, &passage)).collect();
                let loss = rg.loss(&mut g, &targets, null).unwrap().unwrap();

                let joints: Vec<_> = descs
                    .iter()
                    .map(|d| crate::encoder::encode_joint(&store, &enc, &sentence, d).unwrap())
                    .collect();
                let w = |id| head_values(&store, id);
                let value_spans: Vec<_> = joints
                    .iter()
                    .map(|j| span_distributions(&j.output, &j.sentence_mask, w(heads.start), w(heads.end), null).unwrap())
                    .collect();
                let outs: Vec<_> = joints.iter().map(|j| &j.output).collect();
                let value_rank = rank_distribution(&outs, w(heads.rank), pos).unwrap();
                let graph_spans = rg.span_scores(&g);
                for (a, b) in graph_spans.iter().zip(&value_spans) {
                    for (x, y) in a.p1.iter().chain(&a.p2).zip(b.p1.iter().chain(&b.p2)) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
                for (x, y) in rg.rank_probs(&g).iter().zip(&value_rank) {
                    assert!((x - y).abs() < 1e-12);
                }
                let lv = reader_loss_value(&value_spans, &value_rank, &targets, null).unwrap();
                assert!((g.value(loss).item() - lv).abs() < 1e-10);
                let mut tape = GradientTape::new(&store);
                g.backward(loss, &mut tape).unwrap();
                assert!(tape.is_reached(heads.rank) && tape.is_reached(enc.token_embedding()));
            }
        }
    }
}
