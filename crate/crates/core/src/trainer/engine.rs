use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig, TrainMode};
use super::infer::{candidate_rows, predict, score, seed_span_cache, PredictOutput};
use super::model::Model;
use super::step::{feedback_positions, joint_loss, plan_batch, BatchSpec};
use crate::autograd::Graph;
use crate::data::{KnowledgeBase, Passage};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::optim::{Adam, AdamConfig, AdamState, ScheduleConfig};
use crate::params::{GradientTape, ParamId, TensorRecord};
use crate::reader::write_predictions;
use crate::retriever::{write_candidates, CandidateSet, EntityIndex, SpanCache};
use crate::tensor::Matrix;
use crate::Scalar;

/// A contiguous block of epochs sharing one optimizer and one loss recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmupRetriever,
    WarmupReader,
    Main,
    PipelineRetriever,
    PipelineReader,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::WarmupRetriever => "warmup_retriever",
            Phase::WarmupReader => "warmup_reader",
            Phase::Main => "main",
            Phase::PipelineRetriever => "pipeline_retriever",
            Phase::PipelineReader => "pipeline_reader",
        }
    }

    /// Phases whose epochs are evaluated on the dev split.
    pub fn scored(self) -> bool {
        matches!(self, Phase::Main | Phase::PipelineReader)
    }
}

/// Ordered phases and their epoch counts.
pub fn plan(config: &TrainConfig) -> Vec<(Phase, usize)> {
    let (w, m) = (config.warmup_epochs, config.main_epochs);
    if config.mode.is_pipeline() {
        vec![(Phase::PipelineRetriever, w + m), (Phase::PipelineReader, w + m)]
    } else {
        vec![(Phase::WarmupRetriever, w), (Phase::WarmupReader, w), (Phase::Main, m)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub phase_epoch: usize,
    pub steps: usize,
    pub batches: usize,
    pub skipped: usize,
    pub loss_retr: Option<f64>,
    pub loss_read: Option<f64>,
    pub loss: Option<f64>,
    pub index_generation: u64,
    pub dev: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Index into the phase plan of the phase to run next.
    pub phase: usize,
    /// Completed epochs of that phase.
    pub phase_epoch: usize,
    /// Completed epochs overall.
    pub epoch: usize,
    pub step: usize,
    pub span_cache: SpanCache,
    /// Reader candidates held fixed for the current phase or epoch.
    pub frozen: Option<Vec<Vec<usize>>>,
    pub history: Vec<EpochRecord>,
    pub skipped_batches: usize,
    pub total_batches: usize,
}

impl TrainState {
    fn new() -> Self {
        TrainState {
            phase: 0,
            phase_epoch: 0,
            epoch: 0,
            step: 0,
            span_cache: SpanCache::new(),
            frozen: None,
            history: Vec::new(),
            skipped_batches: 0,
            total_batches: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocab_hash: String,
    pub precision: u8,
    pub model: ModelConfig,
    pub vocab_size: usize,
    pub train: TrainConfig,
    pub state: TrainState,
    pub optimizer: Option<AdamState>,
    pub index: TensorRecord,
    pub index_generation: u64,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Rebuilds the model, rejecting a checkpoint made against another vocabulary.
    pub fn model<T: Scalar>(&self, vocab_hash: &str) -> Result<Model<T>> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::Integrity(
                "checkpoint was trained with a different vocabulary".into(),
            ));
        }
        let mut model = Model::new(&self.model, self.vocab_size, self.train.mode.is_pipeline(), self.train.seed)?;
        model.store.import(&self.tensors)?;
        Ok(model)
    }

    pub fn index<T: Scalar>(&self, kb: &KnowledgeBase) -> Result<EntityIndex<T>> {
        let r = &self.index;
        let m = Matrix::from_vec(r.rows, r.cols, r.data.iter().map(|&x| T::of(x)).collect());
        EntityIndex::from_parts(kb.ids(), m, self.index_generation)
    }
}

/// Output layout of a training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "predictions", "candidates"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch-{epoch}.json"))
    }

    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        let dir = self.root.join("checkpoints");
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in fs::read_dir(&dir).ok()?.flatten() {
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(n) = name.strip_prefix("epoch-").and_then(|s| s.strip_suffix(".json")) {
                if let Ok(n) = n.parse::<usize>() {
                    if best.as_ref().map_or(true, |(b, _)| n > *b) {
                        best = Some((n, entry.path()));
                    }
                }
            }
        }
        best.map(|(_, p)| p)
    }
}

pub struct TrainData<'a> {
    pub kb: &'a KnowledgeBase,
    pub train: &'a [Passage],
    pub dev: &'a [Passage],
}

pub struct Trainer<'a, T: Scalar> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub state: TrainState,
    data: TrainData<'a>,
    index: EntityIndex<T>,
    optimizer: Option<Adam<T>>,
    run_dir: Option<RunDir>,
    vocab_hash: String,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn check_lengths(model: &ModelConfig, kb: &KnowledgeBase, passages: &[&[Passage]]) -> Result<()> {
    let t_e = kb
        .entities()
        .iter()
        .map(|e| crate::retriever::description_tokens(&e.desc_tokens).len())
        .max()
        .unwrap_or(0);
    let t_t = passages.iter().flat_map(|s| s.iter()).map(|p| p.tokens.len()).max().unwrap_or(0);
    if t_t + t_e + 2 > model.max_len {
        return Err(Error::Config(format!(
            "model.max_len = {} cannot hold CLS + {t_t} sentence tokens + SEP + {t_e} description tokens",
            model.max_len
        )));
    }
    Ok(())
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        model_config: &ModelConfig,
        vocab_size: usize,
        vocab_hash: &str,
        config: TrainConfig,
        data: TrainData<'a>,
        run_dir: Option<RunDir>,
    ) -> Result<Self> {
        config.validate(Some(data.kb.len()))?;
        check_lengths(model_config, data.kb, &[data.train, data.dev])?;
        if data.train.is_empty() {
            return Err(Error::Input("no training passages".into()));
        }
        let model = Model::new(model_config, vocab_size, config.mode.is_pipeline(), config.seed)?;
        let index = model.encode_index(data.kb)?;
        Ok(Trainer {
            model,
            config,
            state: TrainState::new(),
            data,
            index,
            optimizer: None,
            run_dir,
            vocab_hash: vocab_hash.to_string(),
        })
    }

    /// Continues from a checkpoint; the continuation matches an uninterrupted run.
    pub fn resume(checkpoint: Checkpoint, vocab_hash: &str, data: TrainData<'a>, run_dir: Option<RunDir>) -> Result<Self> {
        let model = checkpoint.model::<T>(vocab_hash)?;
        check_lengths(&checkpoint.model, data.kb, &[data.train, data.dev])?;
        let index = checkpoint.index(data.kb)?;
        let mut trainer = Trainer {
            model,
            config: checkpoint.train.clone(),
            state: checkpoint.state.clone(),
            data,
            index,
            optimizer: None,
            run_dir,
            vocab_hash: vocab_hash.to_string(),
        };
        if let Some(opt_state) = &checkpoint.optimizer {
            let phase = plan(&trainer.config)[trainer.state.phase].0;
            let mut opt = trainer.phase_optimizer(phase);
            opt.import(&trainer.model.store, opt_state)?;
            trainer.optimizer = Some(opt);
        }
        Ok(trainer)
    }

    pub fn index(&self) -> &EntityIndex<T> {
        &self.index
    }

    pub fn data(&self) -> &TrainData<'a> {
        &self.data
    }

    pub fn is_finished(&self) -> bool {
        self.state.phase >= plan(&self.config).len()
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.config.batch_size)
    }

    fn phase_params(&self, phase: Phase) -> Vec<ParamId> {
        match phase {
            Phase::WarmupRetriever | Phase::PipelineRetriever => self.model.retriever_params(),
            Phase::WarmupReader | Phase::PipelineReader => self.model.reader_params(),
            Phase::Main => self.model.all_params(),
        }
    }

    fn phase_optimizer(&self, phase: Phase) -> Adam<T> {
        let epochs = plan(&self.config)[self.state.phase].1;
        let total = epochs * self.batches_per_epoch();
        let warmup = (self.config.lr_warmup_fraction * total as f64).ceil() as usize;
        let adam = AdamConfig {
            retriever_lr: self.config.retriever_lr,
            reader_lr: self.config.reader_lr,
            clip_norm: self.config.clip_norm,
            ..AdamConfig::default()
        };
        Adam::new(
            &self.model.store,
            self.phase_params(phase),
            adam,
            ScheduleConfig {
                warmup_steps: warmup,
                total_steps: total,
            },
        )
    }

    fn batch_spec(&self, phase: Phase) -> BatchSpec {
        let mode = self.config.mode;
        let (retr, read) = match phase {
            Phase::WarmupRetriever | Phase::PipelineRetriever => (true, false),
            Phase::WarmupReader | Phase::PipelineReader => (false, true),
            Phase::Main => (true, true),
        };
        BatchSpec {
            retriever_loss: retr,
            reader_loss: read,
            span_query: phase == Phase::Main && mode.span_feedback(),
            live_candidates: phase == Phase::Main && mode.live_candidates(),
            k: self.config.k,
            n_hard: self.config.n_hard,
            n_rand: self.config.n_rand,
            in_batch_negatives: self.config.in_batch_negatives,
            inject_gold: self.config.inject_gold,
        }
    }

    fn refresh_index(&mut self) -> Result<()> {
        self.index.refresh(&self.model.store, &self.model.entity_encoder, self.data.kb)
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(|_, _| Ok(false))
    }

    /// Runs epochs until the plan ends or `stop` returns `true` after an epoch.
    pub fn run_until<F>(&mut self, mut stop: F) -> Result<()>
    where
        F: FnMut(&Self, &EpochRecord) -> Result<bool>,
    {
        let phases = plan(&self.config);
        while self.state.phase < phases.len() {
            let record = self.run_epoch(&phases)?;
            if stop(self, &record)? {
                break;
            }
        }
        if self.is_finished() {
            self.finish()?;
        }
        Ok(())
    }

    fn run_epoch(&mut self, phases: &[(Phase, usize)]) -> Result<EpochRecord> {
        let (phase, n_epochs) = phases[self.state.phase];
        if self.optimizer.is_none() {
            self.optimizer = Some(self.phase_optimizer(phase));
        }
        let first_of_phase = self.state.phase_epoch == 0;
        if self.state.phase_epoch % self.config.refresh_every == 0 {
            self.refresh_index()?;
        }
        let mut rng = epoch_rng(self.config.seed, self.state.epoch);
        let spec = self.batch_spec(phase);
        match phase {
            Phase::WarmupReader if first_of_phase => {
                self.state.frozen = Some(candidate_rows(&self.model, &self.index, self.data.train, None, self.config.k)?);
            }
            Phase::PipelineReader => {
                self.state.frozen = Some(candidate_rows(&self.model, &self.index, self.data.train, None, self.config.k)?);
            }
            Phase::Main if !self.config.mode.live_candidates() => {
                let cache = self.config.mode.span_feedback().then_some(&self.state.span_cache);
                self.state.frozen = Some(candidate_rows(&self.model, &self.index, self.data.train, cache, self.config.k)?);
            }
            _ => {}
        }
        if let (Some(dir), Some(frozen)) = (&self.run_dir, &self.state.frozen) {
            let sets: Vec<CandidateSet<T>> = self
                .data
                .train
                .iter()
                .zip(frozen)
                .map(|(p, rows)| candidate_export(&self.index, &p.passage_id, rows))
                .collect();
            let path = dir
                .root
                .join("candidates")
                .join(format!("{}-epoch-{}.jsonl", phase.label(), self.state.phase_epoch + 1));
            write_candidates(&path, &sets)?;
        }

        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_retr, mut n_retr, mut sum_read, mut n_read, mut sum_total, mut n_total) =
            (0.0, 0usize, 0.0, 0usize, 0.0, 0usize);
        let mut skipped = 0;
        let batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        for batch in &batches {
            let outcome = self.train_batch(batch, &spec, &mut rng)?;
            self.state.total_batches += 1;
            match outcome {
                None => {
                    skipped += 1;
                    self.state.skipped_batches += 1;
                }
                Some((retr, read, total)) => {
                    if let Some(v) = retr {
                        sum_retr += v;
                        n_retr += 1;
                    }
                    if let Some(v) = read {
                        sum_read += v;
                        n_read += 1;
                    }
                    if let Some(v) = total {
                        sum_total += v;
                        n_total += 1;
                    }
                }
            }
        }
        let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);

        self.state.phase_epoch += 1;
        self.state.epoch += 1;
        let phase_done = self.state.phase_epoch == n_epochs;
        if phase_done && phase == Phase::WarmupReader && self.config.mode.span_feedback() {
            self.refresh_index()?;
            self.state.span_cache = seed_span_cache(
                &self.model,
                &self.index,
                self.data.kb,
                self.data.train,
                self.config.k,
                &self.config.reader,
            )?;
        }
        let evaluate = phase.scored()
            && !self.data.dev.is_empty()
            && (phase_done || (self.config.eval_every > 0 && self.state.phase_epoch % self.config.eval_every == 0));
        let dev = if evaluate { Some(self.evaluate(self.data.dev)?.0) } else { None };
        let record = EpochRecord {
            epoch: self.state.epoch,
            phase: phase.label().to_string(),
            phase_epoch: self.state.phase_epoch,
            steps: self.state.step,
            batches: batches.len(),
            skipped,
            loss_retr: avg(sum_retr, n_retr),
            loss_read: avg(sum_read, n_read),
            loss: avg(sum_total, n_total),
            index_generation: self.index.generation(),
            dev,
        };
        log::info!(
            "epoch {} ({} {}/{}): loss {:?} retr {:?} read {:?}",
            record.epoch,
            record.phase,
            record.phase_epoch,
            n_epochs,
            record.loss,
            record.loss_retr,
            record.loss_read
        );
        self.state.history.push(record.clone());
        if phase_done {
            self.state.phase += 1;
            self.state.phase_epoch = 0;
            self.state.frozen = None;
            self.optimizer = None;
        }
        self.persist()?;
        Ok(record)
    }

    /// One optimizer step; `None` when the batch was skipped for non-finite values.
    fn train_batch(
        &mut self,
        batch: &[usize],
        spec: &BatchSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<(Option<f64>, Option<f64>, Option<f64>)>> {
        let passages: Vec<&Passage> = batch.iter().map(|&i| &self.data.train[i]).collect();
        let frozen: Option<Vec<Vec<usize>>> = self
            .state
            .frozen
            .as_ref()
            .map(|f| batch.iter().map(|&i| f[i].clone()).collect());
        let plans = plan_batch(
            &self.model,
            &self.index,
            self.data.kb,
            &passages,
            &self.state.span_cache,
            frozen.as_deref(),
            spec,
            rng,
        )?;
        let mut tape = GradientTape::new(&self.model.store);
        let (values, feedback) = {
            let mut g = Graph::new(&self.model.store);
            let losses = joint_loss(&mut g, &self.model, self.data.kb, &passages, &plans, spec, &self.config.reader)?;
            let Some(total) = losses.total else {
                return Ok(Some((None, None, None)));
            };
            let val = |v: Option<crate::autograd::Var>| v.map(|v| g.value(v).item().as_f64());
            let values = (val(losses.retriever), val(losses.reader), val(Some(total)));
            match g.backward(total, &mut tape) {
                Ok(()) => {}
                Err(Error::Numeric(msg)) => {
                    log::warn!("skipping batch: {msg}");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            }
            let feedback = if spec.span_query {
                Some(feedback_positions(&g, self.data.kb, &plans, &losses, &self.config.reader)?)
            } else {
                None
            };
            (values, feedback)
        };
        let opt = self.optimizer.as_mut().expect("optimizer for the running phase");
        match opt.step(&mut self.model.store, &tape) {
            Ok(_) => {}
            Err(Error::Numeric(msg)) => {
                log::warn!("skipping batch: {msg}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
        self.state.step += 1;
        if let Some(feedback) = feedback {
            for (p, pos) in passages.iter().zip(feedback) {
                if let Some(pos) = pos {
                    self.state.span_cache.set(&p.passage_id, pos);
                }
            }
        }
        Ok(Some(values))
    }

    /// Fresh index, mode-appropriate prediction and scores.
    pub fn evaluate(&self, passages: &[Passage]) -> Result<(EvalReport, PredictOutput<T>)> {
        let index = self.model.encode_index(self.data.kb)?;
        let out = predict(
            &self.model,
            &index,
            self.data.kb,
            passages,
            self.config.mode,
            self.config.k,
            &self.config.reader,
        )?;
        let report = score(&out, passages, self.data.kb, &self.config.eval_ks, self.config.mode, self.config.seed);
        Ok((report, out))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let emb = self.index.embeddings();
        Checkpoint {
            vocab_hash: self.vocab_hash.clone(),
            precision: T::BYTES,
            model: self.model.config.clone(),
            vocab_size: self.model.vocab_size,
            train: self.config.clone(),
            state: self.state.clone(),
            optimizer: self.optimizer.as_ref().map(|o| o.export(&self.model.store)),
            index: TensorRecord {
                rows: emb.rows(),
                cols: emb.cols(),
                data: emb.data().iter().map(|x| x.as_f64()).collect(),
            },
            index_generation: self.index.generation(),
            tensors: self.model.store.export(),
        }
    }

    fn persist(&self) -> Result<()> {
        let Some(dir) = &self.run_dir else { return Ok(()) };
        let mut buf = Vec::new();
        for r in &self.state.history {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let metrics = dir.metrics();
        fs::write(&metrics, buf).map_err(|e| Error::io(&metrics, e))?;
        self.checkpoint().save(&dir.checkpoint(self.state.epoch))?;
        let keep = self.config.keep_checkpoints;
        if keep > 0 && self.state.epoch > keep {
            let old = dir.checkpoint(self.state.epoch - keep);
            if old.exists() {
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let total = self.state.total_batches;
        if total > 0 {
            let frac = self.state.skipped_batches as f64 / total as f64;
            if frac > self.config.max_skip_fraction {
                return Err(Error::Numeric(format!(
                    "{} of {total} batches skipped for non-finite values",
                    self.state.skipped_batches
                )));
            }
        }
        if let Some(dir) = &self.run_dir {
            if !self.data.dev.is_empty() {
                let (_, out) = self.evaluate(self.data.dev)?;
                write_predictions(&dir.root.join("predictions").join("dev.jsonl"), &out.records())?;
            }
        }
        Ok(())
    }
}

fn candidate_export<T: Scalar>(index: &EntityIndex<T>, passage_id: &str, rows: &[usize]) -> CandidateSet<T> {
    CandidateSet {
        passage_id: passage_id.to_string(),
        generation: index.generation(),
        candidates: rows
            .iter()
            .map(|&r| crate::retriever::Candidate {
                row: r,
                entity_id: index.ids()[r].clone(),
                q: T::zero(),
            })
            .collect(),
    }
}

/// Loads the newest checkpoint of a run directory.
pub fn latest_checkpoint(dir: &RunDir) -> Result<Checkpoint> {
    let path = dir
        .latest_checkpoint()
        .ok_or_else(|| Error::Input(format!("no checkpoint under {}", dir.root.display())))?;
    Checkpoint::load(&path)
}

pub fn mode_of(checkpoint: &Checkpoint) -> TrainMode {
    checkpoint.train.mode
}
