//! InKB micro precision/recall/F1, retriever Recall@K and ablation tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{KnowledgeBase, Passage};
use crate::reader::PredictionRecord;

/// An exact `(passage, start, end, entity)` match unit, 0-based inclusive span.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub passage_id: String,
    pub start: usize,
    pub end: usize,
    pub entity_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_correct: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Exact-match micro scores. Gold triples outside `kb` are dropped; duplicates collapse.
pub fn micro_prf(gold: &[Triple], pred: &[Triple], kb: Option<&KnowledgeBase>) -> Prf {
    let gold: BTreeSet<&Triple> = gold
        .iter()
        .filter(|t| kb.map_or(true, |kb| kb.contains(&t.entity_id)))
        .collect();
    let pred: BTreeSet<&Triple> = pred.iter().collect();
    let n_correct = pred.iter().filter(|t| gold.contains(*t)).count();
    let precision = ratio(n_correct, pred.len());
    let recall = ratio(n_correct, gold.len());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
        n_gold: gold.len(),
        n_pred: pred.len(),
        n_correct,
    }
}

/// Fraction of per-passage unique gold entities found in each passage's top `k` candidates.
///
/// Passages without a candidate list count as misses.
pub fn recall_at_k(
    gold: &BTreeMap<String, BTreeSet<String>>,
    candidates: &BTreeMap<String, Vec<String>>,
    ks: &[usize],
) -> Vec<(usize, f64)> {
    let total: usize = gold.values().map(BTreeSet::len).sum();
    ks.iter()
        .map(|&k| {
            let hits: usize = gold
                .iter()
                .map(|(pid, ents)| {
                    candidates.get(pid).map_or(0, |c| {
                        let top: BTreeSet<&String> = c.iter().take(k).collect();
                        ents.iter().filter(|e| top.contains(e)).count()
                    })
                })
                .sum();
            (k, ratio(hits, total))
        })
        .collect()
}

pub fn gold_triples(passages: &[Passage]) -> Vec<Triple> {
    passages
        .iter()
        .flat_map(|p| {
            p.gold_mentions.iter().map(move |m| Triple {
                passage_id: p.passage_id.clone(),
                start: m.start,
                end: m.end,
                entity_id: m.entity_id.clone(),
            })
        })
        .collect()
}

pub fn predicted_triples(records: &[PredictionRecord]) -> Vec<Triple> {
    records
        .iter()
        .flat_map(|r| {
            r.predictions.iter().map(move |p| Triple {
                passage_id: r.passage_id.clone(),
                start: p.start,
                end: p.end,
                entity_id: p.entity_id.clone(),
            })
        })
        .collect()
}

/// Unique gold entities per passage, restricted to `kb` when given.
pub fn gold_entities(passages: &[Passage], kb: Option<&KnowledgeBase>) -> BTreeMap<String, BTreeSet<String>> {
    passages
        .iter()
        .map(|p| {
            let ents = p
                .gold_entities()
                .into_iter()
                .filter(|e| kb.map_or(true, |kb| kb.contains(e)))
                .map(str::to_string)
                .collect();
            (p.passage_id.clone(), ents)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_correct: usize,
    pub recall_at_k: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn new(mode: &str, seed: u64, prf: Prf, recall_at_k: Vec<(usize, f64)>) -> Self {
        EvalReport {
            mode: mode.to_string(),
            seed,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            n_gold: prf.n_gold,
            n_pred: prf.n_pred,
            n_correct: prf.n_correct,
            recall_at_k,
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall_at_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Summary {
            median,
            min: v.first().copied().unwrap_or(0.0),
            max: v.last().copied().unwrap_or(0.0),
        }
    }

    pub fn spread(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub recall_at_k: Vec<(usize, Summary)>,
    pub f1: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Per-mode medians and ranges, modes in order of first appearance.
pub fn ablation_report(runs: &[EvalReport]) -> AblationReport {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.mode.as_str()) {
            order.push(&r.mode);
        }
    }
    let rows = order
        .into_iter()
        .map(|mode| {
            let group: Vec<&EvalReport> = runs.iter().filter(|r| r.mode == mode).collect();
            let ks: BTreeSet<usize> = group.iter().flat_map(|r| r.recall_at_k.iter().map(|(k, _)| *k)).collect();
            let recall_at_k = ks
                .into_iter()
                .map(|k| {
                    let vals: Vec<f64> = group.iter().filter_map(|r| r.recall_at(k)).collect();
                    (k, Summary::of(&vals))
                })
                .collect();
            let f1s: Vec<f64> = group.iter().map(|r| r.f1).collect();
            AblationRow {
                mode: mode.to_string(),
                seeds: group.iter().map(|r| r.seed).collect(),
                recall_at_k,
                f1: Summary::of(&f1s),
            }
        })
        .collect();
    AblationReport { rows }
}

impl AblationReport {
    pub fn row(&self, mode: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Aligned plain-text table: one row per mode, Recall@K columns then F1.
    pub fn to_text(&self) -> String {
        let ks: BTreeSet<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.recall_at_k.iter().map(|(k, _)| *k))
            .collect();
        let mut header = vec!["mode".to_string(), "runs".to_string()];
        header.extend(ks.iter().map(|k| format!("Recall@{k}")));
        header.push("F1".to_string());
        let mut table = vec![header];
        for r in &self.rows {
            let cell = |s: &Summary| format!("{:.4} ±{:.4}", s.median, s.spread() / 2.0);
            let mut line = vec![r.mode.clone(), r.seeds.len().to_string()];
            for k in &ks {
                line.push(
                    r.recall_at_k
                        .iter()
                        .find(|(kk, _)| kk == k)
                        .map_or_else(|| "-".to_string(), |(_, s)| cell(s)),
                );
            }
            line.push(cell(&r.f1));
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}
