//! One PASS/FAIL line per acceptance criterion.
//!
//! `ACCEPTANCE_ONLY=1,5` runs a subset; criterion 8 reuses the evaluation runs
//! of 6 and 7 when they are selected.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use rrlink_cli::{cmd_ablate, cmd_synth, cmd_train, AblateArgs, ConfigArgs, SynthArgs, TrainArgs};
use rrlink_core::autograd::{Graph, Var};
use rrlink_core::data::vocab::PAD_ID;
use rrlink_core::data::{build_vocab, load_corpus, load_kb, Entity, KnowledgeBase, Mention, Passage};
use rrlink_core::encoder::PackedHidden;
use rrlink_core::eval::{micro_prf, recall_at_k, EvalReport, Triple};
use rrlink_core::params::{GradientTape, ParamGroup, ParamStore};
use rrlink_core::reader::{
    decode, reader_forward, reader_loss_value, NullSpan, ReaderConfig, ReaderTarget, SpanScores,
};
use rrlink_core::retriever::{description_tokens, nce_loss, nce_loss_value, retrieve_cls, EntityIndex};
use rrlink_core::tensor::Matrix;
use rrlink_core::trainer::step::{joint_loss, BatchSpec, PassagePlan};
use rrlink_core::trainer::{EpochRecord, Model, ModelConfig, TrainConfig, TrainData, TrainMode, Trainer};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const VOCAB: usize = 24;

fn tiny_model(rng: &mut StdRng, dim: usize, layers: usize, max_len: usize) -> Model<f64> {
    let cfg = ModelConfig {
        dim,
        layers,
        heads: 2,
        ffn_dim: 2 * dim,
        max_len,
    };
    Model::new(&cfg, VOCAB, false, rng.gen()).unwrap()
}

fn random_tokens(rng: &mut StdRng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(4..VOCAB as u32)).collect()
}

fn random_kb(rng: &mut StdRng, n: usize, t_e: usize) -> KnowledgeBase {
    let entities = (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=t_e);
            let mut desc = random_tokens(rng, len);
            desc.resize(t_e, PAD_ID);
            Entity {
                entity_id: format!("E{i:03}"),
                title: format!("e{i}"),
                desc_tokens: desc,
            }
        })
        .collect();
    KnowledgeBase::new(entities).unwrap()
}

fn random_passage(rng: &mut StdRng, id: &str, t_t: usize, kb: &KnowledgeBase, n_mentions: usize) -> Passage {
    let tokens = random_tokens(rng, t_t);
    let mut gold_mentions = Vec::new();
    while gold_mentions.len() < n_mentions {
        let start = rng.gen_range(0..t_t);
        let end = rng.gen_range(start..t_t.min(start + 3));
        let entity_id = kb.get(rng.gen_range(0..kb.len())).entity_id.clone();
        let m = Mention { start, end, entity_id };
        if !gold_mentions.contains(&m) {
            gold_mentions.push(m);
        }
    }
    Passage {
        passage_id: id.to_string(),
        doc_id: id.to_string(),
        tokens,
        gold_mentions,
    }
}

/// Reader graph over `rows` with every sequence of one forward pass.
fn reader_graph<'s>(
    g: &mut Graph<'s, f64>,
    model: &Model<f64>,
    kb: &KnowledgeBase,
    p: &Passage,
    rows: &[usize],
    cfg: &ReaderConfig,
) -> rrlink_core::reader::ReaderGraph {
    let enc = model.reader_encoder();
    let seqs: Vec<Vec<u32>> = rows
        .iter()
        .map(|&r| enc.joint_tokens(&p.tokens, description_tokens(&kb.get(r).desc_tokens)).unwrap())
        .collect();
    let packed: PackedHidden = enc.forward(g, &seqs).unwrap();
    reader_forward(g, &model.heads, &packed, p.tokens.len(), cfg).unwrap()
}

fn criterion_1() -> Check {
    let mut rng = StdRng::seed_from_u64(1);
    let mut worst = 0f64;
    for draw in 0..100 {
        let dim = [4, 8, 16][draw % 3];
        let layers = 1 + draw % 2;
        let t_t = rng.gen_range(1..=10);
        let t_e = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=5);
        let kb = random_kb(&mut rng, k + 2, t_e);
        let model = tiny_model(&mut rng, dim, layers, t_t + t_e + 2);
        let p = random_passage(&mut rng, "p", t_t, &kb, 1);
        let rows: Vec<usize> = (0..k).collect();
        let null_span = if draw % 2 == 0 { NullSpan::Cls } else { NullSpan::Off };
        let cfg = ReaderConfig {
            null_span,
            ..ReaderConfig::default()
        };
        let mut g = Graph::new(&model.store);
        let rg = reader_graph(&mut g, &model, &kb, &p, &rows, &cfg);
        let spans = rg.span_scores(&g);
        let rank = rg.rank_probs(&g);
        let mut dev = (rank.iter().sum::<f64>() - 1.0).abs();
        for s in &spans {
            let s1: f64 = s.p1.iter().sum();
            let s2: f64 = s.p2.iter().sum();
            let mut sp = 0.0;
            for x in 0..s.p1.len() {
                for y in 0..s.p2.len() {
                    sp += s.p1[x] * s.p2[y];
                }
            }
            dev = dev.max((s1 - 1.0).abs()).max((s2 - 1.0).abs()).max((sp - 1.0).abs());
            if null_span == NullSpan::Off && (s.p1[0] != 0.0 || s.p2[0] != 0.0) {
                return Err(format!("draw {draw}: null slot has mass with the null span off"));
            }
        }
        worst = worst.max(dev);
    }
    ensure(worst < 1e-6, format!("max |sum - 1| = {worst:.2e} over 100 draws"))
}

/// Central differences on a sample of coordinates of every parameter.
fn fd_check(
    store: &mut ParamStore<f64>,
    per_tensor: usize,
    rng: &mut StdRng,
    loss: &dyn Fn(&ParamStore<f64>, Option<&mut GradientTape<f64>>) -> f64,
) -> (f64, usize) {
    const EPS: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;
    let mut tape = GradientTape::new(store);
    loss(store, Some(&mut tape));
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0f64;
    let mut n = 0;
    for id in ids {
        let len = store.value(id).len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for c in coords {
            let analytic = tape.get(id).map_or(0.0, |m| m.data()[c]);
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + EPS;
            let up = loss(store, None);
            store.value_mut(id).data_mut()[c] = orig - EPS;
            let down = loss(store, None);
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
            n += 1;
        }
    }
    (worst, n)
}

fn finish(g: Graph<'_, f64>, l: Var, tape: Option<&mut GradientTape<f64>>) -> f64 {
    if let Some(t) = tape {
        g.backward(l, t).unwrap();
    }
    g.value(l).item()
}

fn criterion_2() -> Check {
    let (d, k, t_t, t_e) = (8, 3, 6, 4);
    let mut rng = StdRng::seed_from_u64(2);
    let mut worst = [0f64; 3];
    let mut counts = [0usize; 3];
    for draw in 0..20 {
        // NCE over a query and entity table held as parameters.
        let mut store = ParamStore::<f64>::new();
        let q = store.add_uniform("q", ParamGroup::Retriever, 1, d, 1.0, &mut rng);
        let n_gold = 1 + draw % 2;
        let e = store.add_uniform("e", ParamGroup::Retriever, n_gold + k, d, 1.0, &mut rng);
        let nce = move |s: &ParamStore<f64>, tape: Option<&mut GradientTape<f64>>| {
            let mut g = Graph::new(s);
            let (qv, ev) = (g.param(q), g.param(e));
            let scores = g.matmul_nt(ev, qv);
            let gold = g.gather(scores, (0..n_gold).collect());
            let neg = g.gather(scores, (n_gold..n_gold + k).collect());
            let l = nce_loss(&mut g, gold, Some(neg)).unwrap();
            finish(g, l, tape)
        };
        let (w, n) = fd_check(&mut store, usize::MAX, &mut rng, &nce);
        worst[0] = worst[0].max(w);
        counts[0] += n;

        // Reader loss over K candidates through the shared encoder.
        let kb = random_kb(&mut rng, 6, t_e);
        let model = tiny_model(&mut rng, d, 1, t_t + t_e + 2);
        let p = random_passage(&mut rng, "p", t_t, &kb, 2);
        let gold_row = kb.row(&p.gold_mentions[0].entity_id).unwrap();
        let mut rows: Vec<usize> = vec![gold_row];
        rows.extend((0..kb.len()).filter(|&r| r != gold_row).take(k - 1));
        let cfg = ReaderConfig::default();
        let targets: Vec<ReaderTarget> =
            rows.iter().map(|&r| ReaderTarget::for_candidate(&kb.get(r).entity_id, &p)).collect();
        {
            let m = &model;
            let read = |s: &ParamStore<f64>, tape: Option<&mut GradientTape<f64>>| {
                let mut g = Graph::new(s);
                let rg = reader_graph(&mut g, m, &kb, &p, &rows, &cfg);
                let l = rg.loss(&mut g, &targets, cfg.null_span).unwrap().unwrap();
                finish(g, l, tape)
            };
            let mut store = model.store.clone();
            let (w, n) = fd_check(&mut store, 2, &mut rng, &read);
            worst[1] = worst[1].max(w);
            counts[1] += n;
        }

        // Joint objective with fixed span queries, negatives and candidates.
        let passages: Vec<Passage> = (0..2)
            .map(|i| random_passage(&mut rng, &format!("p{i}"), t_t, &kb, 1 + i))
            .collect();
        let plans: Vec<PassagePlan> = passages
            .iter()
            .map(|p| {
                let gold: BTreeSet<usize> = p.gold_mentions.iter().map(|m| kb.row(&m.entity_id).unwrap()).collect();
                let others: Vec<usize> = (0..kb.len()).filter(|r| !gold.contains(r)).collect();
                let mut reader_rows: Vec<usize> = gold.iter().copied().collect();
                reader_rows.extend(others.iter().copied().take(k - reader_rows.len().min(k)));
                reader_rows.truncate(k);
                PassagePlan {
                    span_positions: vec![0, 2],
                    gold_rows: gold.iter().copied().collect(),
                    negatives: others[..3].to_vec(),
                    genuine: vec![true; reader_rows.len()],
                    reader_rows,
                }
            })
            .collect();
        let spec = BatchSpec {
            retriever_loss: true,
            reader_loss: true,
            span_query: true,
            live_candidates: false,
            k,
            n_hard: 0,
            n_rand: 0,
            in_batch_negatives: false,
            inject_gold: false,
        };
        let refs: Vec<&Passage> = passages.iter().collect();
        let store = &mut model.store.clone();
        let m = &model;
        let joint = |s: &ParamStore<f64>, tape: Option<&mut GradientTape<f64>>| {
            let mut g = Graph::new(s);
            let shadow = Model { store: s.clone(), ..m.clone() };
            let losses = joint_loss(&mut g, &shadow, &kb, &refs, &plans, &spec, &cfg).unwrap();
            finish(g, losses.total.unwrap(), tape)
        };
        let (w, n) = fd_check(store, 2, &mut rng, &joint);
        worst[2] = worst[2].max(w);
        counts[2] += n;
    }
    let detail = format!(
        "max relative error nce {:.2e} ({} coords), reader {:.2e} ({}), joint {:.2e} ({}); eps 1e-4, floor 1e-6",
        worst[0], counts[0], worst[1], counts[1], worst[2], counts[2]
    );
    ensure(worst.iter().all(|&w| w < 1e-4), detail)
}

fn criterion_3() -> Check {
    let mut rng = StdRng::seed_from_u64(3);
    let (n, d) = (1000, 16);
    // Quarter-integer values keep inner products exact, so ties are real ties.
    let q4 = |rng: &mut StdRng| rng.gen_range(-2i32..=2) as f64 * 0.25;
    let data: Vec<f64> = (0..n * d).map(|_| q4(&mut rng)).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("E{i:04}")).collect();
    let index = EntityIndex::from_parts(ids.clone(), Matrix::from_vec(n, d, data.clone()), 1).unwrap();
    let mut mismatches = 0;
    let mut ties = 0;
    for qi in 0..100 {
        let query: Vec<f64> = (0..d).map(|_| q4(&mut rng)).collect();
        let mut naive: Vec<(f64, usize)> = (0..n)
            .map(|r| ((0..d).map(|c| data[r * d + c] * query[c]).sum(), r))
            .collect();
        naive.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for k in [1, 10, 100] {
            let got = retrieve_cls(&index, &format!("q{qi}"), &query, k).unwrap();
            let want: Vec<&str> = naive[..k].iter().map(|&(_, r)| ids[r].as_str()).collect();
            if got.entity_ids() != want || got.rows() != naive[..k].iter().map(|x| x.1).collect::<Vec<_>>() {
                mismatches += 1;
            }
            if naive[k - 1].0 == naive[k].0 {
                ties += 1;
            }
        }
    }
    ensure(
        mismatches == 0,
        format!("{mismatches} mismatches over 300 queries; {ties} had a tie across the cut-off"),
    )
}

fn criterion_4() -> Check {
    let mut rng = StdRng::seed_from_u64(4);
    let kb = random_kb(&mut rng, 6, 2);
    let mut mismatches = 0;
    for _ in 0..200 {
        let triple = |rng: &mut StdRng| Triple {
            passage_id: format!("p{}", rng.gen_range(0..3)),
            start: rng.gen_range(0..3),
            end: rng.gen_range(0..3),
            entity_id: format!("E{:03}", rng.gen_range(0..8)),
        };
        let gold: Vec<Triple> = (0..rng.gen_range(0..12)).map(|_| triple(&mut rng)).collect();
        let pred: Vec<Triple> = (0..rng.gen_range(0..12)).map(|_| triple(&mut rng)).collect();

        let mut g: Vec<&Triple> = Vec::new();
        for t in &gold {
            if kb.contains(&t.entity_id) && !g.contains(&t) {
                g.push(t);
            }
        }
        let mut p: Vec<&Triple> = Vec::new();
        for t in &pred {
            if !p.contains(&t) {
                p.push(t);
            }
        }
        let tp = p.iter().filter(|t| g.contains(t)).count();
        let prec = if p.is_empty() { 0.0 } else { tp as f64 / p.len() as f64 };
        let rec = if g.is_empty() { 0.0 } else { tp as f64 / g.len() as f64 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        let got = micro_prf(&gold, &pred, Some(&kb));
        if (got.precision, got.recall, got.f1, got.n_correct) != (prec, rec, f1, tp) {
            mismatches += 1;
        }

        let mut golds: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut cands: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for pid in 0..4 {
            let ents: BTreeSet<String> = (0..rng.gen_range(0..4)).map(|_| format!("E{:03}", rng.gen_range(0..8))).collect();
            golds.insert(format!("p{pid}"), ents);
            if rng.gen_bool(0.8) {
                let mut list: Vec<String> = (0..8).map(|e| format!("E{e:03}")).collect();
                for i in (1..list.len()).rev() {
                    list.swap(i, rng.gen_range(0..=i));
                }
                list.truncate(rng.gen_range(0..=8));
                cands.insert(format!("p{pid}"), list);
            }
        }
        let ks = [1, 2, 5, 10];
        let total: usize = golds.values().map(|s| s.len()).sum();
        let got = recall_at_k(&golds, &cands, &ks);
        for (i, &k) in ks.iter().enumerate() {
            let mut hits = 0;
            for (pid, ents) in &golds {
                for e in ents {
                    if let Some(list) = cands.get(pid) {
                        if list.iter().take(k).any(|c| c == e) {
                            hits += 1;
                        }
                    }
                }
            }
            let want = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
            if got[i] != (k, want) {
                mismatches += 1;
            }
        }
    }
    ensure(mismatches == 0, format!("{mismatches} mismatches over 200 randomized sets"))
}

fn criterion_5() -> Check {
    let mut worst = 0f64;
    for negs in 1..=8 {
        let l: f64 = nce_loss_value(&[0.7], &vec![0.7; negs]).unwrap();
        worst = worst.max((l - (1.0 + negs as f64).ln()).abs());
    }
    let ln4: f64 = nce_loss_value(&[-1.5], &[-1.5; 3]).unwrap();
    worst = worst.max((ln4 - 4f64.ln()).abs());

    // A zero-head reader scores every position and candidate alike.
    let mut rng = StdRng::seed_from_u64(5);
    let (t_t, k) = (6, 3);
    let kb = random_kb(&mut rng, k, 3);
    let mut model = tiny_model(&mut rng, 8, 1, t_t + 5);
    for id in model.heads.param_ids() {
        model.store.value_mut(id).fill(0.0);
    }
    let p = random_passage(&mut rng, "p", t_t, &kb, 1);
    let gold_row = kb.row(&p.gold_mentions[0].entity_id).unwrap();
    let rows: Vec<usize> = (0..k).collect();
    let cfg = ReaderConfig {
        null_span: NullSpan::Off,
        ..ReaderConfig::default()
    };
    let targets: Vec<ReaderTarget> = rows
        .iter()
        .map(|&r| ReaderTarget {
            entity_id: kb.get(r).entity_id.clone(),
            spans: if r == gold_row { vec![(1, 2)] } else { Vec::new() },
            is_gold: r == gold_row,
        })
        .collect();
    let want = -(1.0 / (t_t * t_t) as f64).ln() - (1.0 / k as f64).ln();
    let mut g = Graph::new(&model.store);
    let rg = reader_graph(&mut g, &model, &kb, &p, &rows, &cfg);
    let l = rg.loss(&mut g, &targets, cfg.null_span).unwrap().unwrap();
    let graph_loss = g.value(l).item();
    let uniform = SpanScores {
        p1: std::iter::once(0.0).chain(std::iter::repeat(1.0 / t_t as f64).take(t_t)).collect(),
        p2: std::iter::once(0.0).chain(std::iter::repeat(1.0 / t_t as f64).take(t_t)).collect(),
    };
    let value_loss = reader_loss_value(&vec![uniform; k], &vec![1.0 / k as f64; k], &targets, NullSpan::Off).unwrap();
    let reader_dev = (graph_loss - want).abs().max((value_loss - want).abs());
    ensure(
        worst < 1e-9 && reader_dev < 1e-9,
        format!("NCE max deviation {worst:.1e}; reader {graph_loss:.12} vs {want:.12} (deviation {reader_dev:.1e})"),
    )
}

fn monotone(r: &EvalReport) -> bool {
    let vals: Vec<f64> = [1, 5, 10, 50].iter().filter_map(|&k| r.recall_at(k)).collect();
    vals.windows(2).all(|w| w[0] <= w[1])
}

fn criterion_6(reports: &mut Vec<EvalReport>) -> Check {
    let dir = tempfile::tempdir().unwrap();
    cmd_synth(&SynthArgs {
        seed: 7,
        entities: 50,
        passages: 64,
        dev_passages: 0,
        t_t: 32,
        t_e: 16,
        out_dir: dir.path().to_path_buf(),
    })
    .map_err(|e| e.to_string())?;
    let base = dir.path();
    let vocab = build_vocab(&base.join("kb.jsonl"), &[base.join("train.jsonl")]).unwrap();
    let kb = KnowledgeBase::new(load_kb(&base.join("kb.jsonl"), &vocab, 16).unwrap()).unwrap();
    let train = load_corpus(&base.join("train.jsonl"), &vocab, 32, Some(&kb)).unwrap();
    let t_e = kb.entities().iter().map(|e| description_tokens(&e.desc_tokens).len()).max().unwrap();
    let t_t = train.iter().map(|p| p.tokens.len()).max().unwrap();
    let model = ModelConfig {
        dim: 64,
        layers: 2,
        heads: 4,
        ffn_dim: 128,
        max_len: t_t + t_e + 2,
    };
    let config = TrainConfig {
        mode: TrainMode::E2eBidirectional,
        warmup_epochs: 1,
        main_epochs: 200,
        k: 16,
        retriever_lr: 1e-3,
        reader_lr: 1e-3,
        eval_ks: vec![1, 5, 10, 16, 50],
        ..TrainConfig::default()
    };
    let data = TrainData {
        kb: &kb,
        train: &train,
        dev: &[],
    };
    let mut trainer = Trainer::<f32>::new(&model, vocab.len(), &vocab.hash(), config, data, None).unwrap();
    let mut last = None;
    let mut seen = Vec::new();
    trainer
        .run_until(|t, r: &EpochRecord| {
            if r.phase != "main" || r.phase_epoch % 5 != 0 {
                return Ok(false);
            }
            let (rep, _) = t.evaluate(&train)?;
            eprintln!("  overfit epoch {}: train F1 {:.4}, Recall@16 {:?}", r.epoch, rep.f1, rep.recall_at(16));
            let done = rep.f1 >= 0.99 && rep.recall_at(16) == Some(1.0);
            last = Some((r.phase_epoch, rep.clone()));
            seen.push(rep);
            Ok(done)
        })
        .map_err(|e| e.to_string())?;
    let (epochs, rep) = last.ok_or("no evaluation ran")?;
    reports.extend(seen);
    reports.extend(trainer.state.history.iter().filter_map(|r| r.dev.clone()));
    ensure(
        rep.f1 >= 0.99 && rep.recall_at(16) == Some(1.0),
        format!(
            "after warmup + {epochs} main epochs: train F1 {:.4}, Recall@16 {:.4}",
            rep.f1,
            rep.recall_at(16).unwrap_or(0.0)
        ),
    )
}

fn ablation_set() -> Vec<(String, serde_json::Value)> {
    [
        ("model.dim", "32"),
        ("model.layers", "2"),
        ("model.heads", "2"),
        ("model.ffn_dim", "64"),
        ("train.k", "8"),
        ("train.warmup_epochs", "6"),
        ("train.main_epochs", "30"),
        ("train.batch_size", "8"),
        ("train.retriever_lr", "1e-3"),
        ("train.reader_lr", "1e-3"),
        ("train.n_hard", "4"),
        ("train.n_rand", "8"),
        ("train.eval_ks", "[1,5,8,10,50]"),
        ("train.eval_every", "0"),
        ("train.keep_checkpoints", "1"),
        ("precision", "\"f32\""),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), serde_json::from_str(v).unwrap()))
    .collect()
}

fn criterion_7(reports: &mut Vec<EvalReport>) -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cmd_synth(&SynthArgs {
        seed: 11,
        entities: 40,
        passages: 320,
        dev_passages: 60,
        t_t: 32,
        t_e: 16,
        out_dir: dir.path().join("data"),
    })
    .map_err(|e| e.to_string())?;
    let report = cmd_ablate(&AblateArgs {
        config: ConfigArgs {
            config: Some(cfg),
            set: ablation_set(),
            ..ConfigArgs::default()
        },
        seeds: vec![1, 2, 3, 4, 5],
        modes: Vec::new(),
        out_dir: dir.path().join("ablate"),
    })
    .map_err(|e| e.to_string())?;
    eprint!("{}", report.to_text());
    let runs: Vec<EvalReport> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ablate/runs.json")).unwrap()).unwrap();
    reports.extend(runs);
    let f1 = |m: TrainMode| report.row(m.label()).unwrap().f1.median;
    let recall = |m: TrainMode| {
        let row = report.row(m.label()).unwrap();
        row.recall_at_k.iter().find(|(k, _)| *k == 8).unwrap().1.median
    };
    let (bi, fwd, rev, pipe) = (
        f1(TrainMode::E2eBidirectional),
        f1(TrainMode::E2eRetrToRead),
        f1(TrainMode::E2eReadToRetr),
        f1(TrainMode::Pipeline),
    );
    let ok = bi >= fwd && bi >= rev && fwd >= pipe - 0.02 && rev >= pipe - 0.02
        && recall(TrainMode::E2eBidirectional) >= recall(TrainMode::Pipeline);
    ensure(
        ok,
        format!(
            "median dev F1 bi {bi:.4}, fwd {fwd:.4}, rev {rev:.4}, pipeline {pipe:.4}; median Recall@8 bi {:.4}, pipeline {:.4}",
            recall(TrainMode::E2eBidirectional),
            recall(TrainMode::Pipeline)
        ),
    )
}

fn criterion_8(reports: &[EvalReport]) -> Check {
    let mut rng = StdRng::seed_from_u64(8);
    let mut extra = Vec::new();
    for _ in 0..50 {
        let mut golds = BTreeMap::new();
        let mut cands = BTreeMap::new();
        for p in 0..5 {
            let ents: BTreeSet<String> = (0..3).map(|_| format!("E{}", rng.gen_range(0..60))).collect();
            let list: Vec<String> = (0..rng.gen_range(0..60)).map(|_| format!("E{}", rng.gen_range(0..60))).collect();
            golds.insert(format!("p{p}"), ents);
            cands.insert(format!("p{p}"), list);
        }
        let r = recall_at_k(&golds, &cands, &[1, 5, 10, 50]);
        extra.push(EvalReport::new("random", 0, micro_prf(&[], &[], None), r));
    }
    let bad = reports.iter().chain(&extra).filter(|r| !monotone(r)).count();
    ensure(
        bad == 0,
        format!(
            "{bad} non-monotone of {} training evaluations and {} randomized lists",
            reports.len(),
            extra.len()
        ),
    )
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cmd_synth(&SynthArgs {
        seed: 7,
        entities: 16,
        passages: 12,
        dev_passages: 4,
        t_t: 16,
        t_e: 8,
        out_dir: dir.path().join("data"),
    })
    .map_err(|e| e.to_string())?;
    let mut set = ablation_set();
    set.retain(|(k, _)| k != "train.main_epochs" && k != "train.keep_checkpoints" && k != "precision");
    set.push(("train.main_epochs".into(), 3.into()));
    set.push(("train.keep_checkpoints".into(), 0.into()));
    set.push(("train.k".into(), 4.into()));
    set.push(("train.n_rand".into(), 4.into()));
    let args = |out: &Path, mode: TrainMode, resume: bool| TrainArgs {
        mode: Some(mode),
        config: ConfigArgs {
            config: Some(cfg.clone()),
            set: set.clone(),
            ..ConfigArgs::default()
        },
        resume,
        out_dir: out.to_path_buf(),
    };
    let mut checked = 0;
    for mode in TrainMode::ALL {
        let a = dir.path().join(format!("{mode}-a"));
        let b = dir.path().join(format!("{mode}-b"));
        cmd_train(&args(&a, mode, false)).map_err(|e| e.to_string())?;
        cmd_train(&args(&b, mode, false)).map_err(|e| e.to_string())?;
        let read = |p: &Path| fs::read(p).unwrap();
        if read(&a.join("metrics.jsonl")) != read(&b.join("metrics.jsonl")) {
            return Err(format!("{mode}: rerun changed metrics.jsonl"));
        }
        let mut ckpts: Vec<_> = fs::read_dir(b.join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        ckpts.sort_by_key(|p| {
            let s = p.file_stem().unwrap().to_string_lossy().to_string();
            s.trim_start_matches("epoch-").parse::<usize>().unwrap()
        });
        let last = ckpts.last().unwrap().file_name().unwrap().to_owned();
        // Resume from the middle of the run.
        for p in &ckpts[ckpts.len() / 2..] {
            fs::remove_file(p).unwrap();
        }
        fs::remove_file(b.join("metrics.jsonl")).unwrap();
        cmd_train(&args(&b, mode, true)).map_err(|e| e.to_string())?;
        for f in [Path::new("metrics.jsonl").to_path_buf(), Path::new("checkpoints").join(&last)] {
            if read(&a.join(&f)) != read(&b.join(&f)) {
                return Err(format!("{mode}: resumed run differs in {}", f.display()));
            }
        }
        checked += 1;
    }
    Ok(format!(
        "{checked} modes: reruns byte-identical; resume from mid-run matches metrics.jsonl and final parameters"
    ))
}

fn criterion_10() -> Check {
    let mut rng = StdRng::seed_from_u64(10);
    let thrs = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09];
    let normal = |rng: &mut StdRng, n: usize| -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    };
    let mut violations = 0;
    let mut total = 0;
    for draw in 0..200 {
        let n = rng.gen_range(1..8);
        let k = rng.gen_range(1..5);
        let ids: Vec<String> = (0..k).map(|i| format!("E{i}")).collect();
        let idr: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut spans: Vec<SpanScores<f64>> = (0..k)
            .map(|_| SpanScores {
                p1: normal(&mut rng, n + 1),
                p2: normal(&mut rng, n + 1),
            })
            .collect();
        let mut rank = normal(&mut rng, k);
        if draw == 0 {
            // A score exactly at the threshold must be rejected.
            spans[0].p1 = vec![0.0; n + 1];
            spans[0].p1[1] = 0.5;
            spans[0].p1[0] = 0.5;
            spans[0].p2 = spans[0].p1.clone();
            rank = vec![0.0; k];
            rank[0] = 0.03 * 4.0;
            let at = decode(&idr, &spans, &rank, 0.03, 10).unwrap();
            if !at.is_empty() {
                return Err("a score equal to thr = 0.03 was kept".into());
            }
            let below = decode(&idr, &spans, &rank, 0.0299, 10).unwrap();
            if below.len() != 1 {
                return Err("a score just above the threshold was dropped".into());
            }
        }
        let sets: Vec<BTreeSet<(String, usize, usize)>> = thrs
            .iter()
            .map(|&t| {
                let preds = decode(&idr, &spans, &rank, t, 10).unwrap();
                for p in &preds {
                    if !(p.score > t) {
                        violations += 1;
                    }
                }
                total += preds.len();
                preds.into_iter().map(|p| (p.entity_id, p.start, p.end)).collect()
            })
            .collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                if !sets[j].is_subset(&sets[i]) {
                    violations += 1;
                }
            }
        }
    }
    ensure(
        violations == 0,
        format!("{violations} violations; {total} predictions over 200 draws and 9 thresholds"),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let on = |n: usize| only.as_ref().map_or(true, |s| s.contains(&n));
    let names = [
        "",
        "normalization suite",
        "gradient suite",
        "retrieval oracle",
        "metric oracle",
        "closed-form loss values",
        "synthetic overfit",
        "ablation direction",
        "Recall@K monotonicity",
        "determinism and resume",
        "threshold semantics",
    ];
    let mut reports = Vec::new();
    let mut results: BTreeMap<usize, (Check, f64)> = BTreeMap::new();
    for n in [1, 2, 3, 4, 5, 6, 7, 8, 9, 10] {
        if !on(n) {
            continue;
        }
        eprintln!("running criterion {n}: {}", names[n]);
        let t0 = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(&mut reports),
            7 => criterion_7(&mut reports),
            8 => criterion_8(&reports),
            9 => criterion_9(),
            _ => criterion_10(),
        }))
        .unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "{} [{n}] {}: {} ({secs:.1} s)",
            if r.is_ok() { "PASS" } else { "FAIL" },
            names[n],
            r.as_ref().unwrap_or_else(|e| e)
        );
        results.insert(n, (r, secs));
    }
    let failed = results.values().filter(|(r, _)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
