//! Commands behind the `rrlink` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rrlink_core::data::{
    build_vocab, load_corpus, load_kb, write_synthetic, KnowledgeBase, Passage, SyntheticSpec, Vocabulary,
};
use rrlink_core::eval::{
    ablation_report, gold_entities, gold_triples, micro_prf, predicted_triples, recall_at_k, AblationReport,
    EvalReport,
};
use rrlink_core::reader::{read_predictions, write_predictions};
use rrlink_core::retriever::{read_candidates, write_candidates};
use rrlink_core::trainer::{latest_checkpoint, predict, score, Checkpoint, Model, RunDir, TrainData, TrainMode, Trainer};
use rrlink_core::{Error, ErrorKind, Result, Scalar};

pub use config::{Overrides, Precision, Profile, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "rrlink", version, about = "Train and run a joint dense retriever and span reader for entity linking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic knowledge base, corpora and a matching config.json.
    Synth(SynthArgs),
    /// Build the vocabulary and an entity index snapshot.
    Build(BuildArgs),
    /// Train one mode into a run directory.
    Train(TrainArgs),
    /// Predict spans and candidates with a trained run.
    Predict(PredictArgs),
    /// Score predictions against a gold corpus.
    Eval(EvalArgs),
    /// Train every mode over a list of seeds and tabulate dev scores.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub entities: usize,
    #[arg(long, default_value_t = 64)]
    pub passages: usize,
    /// Held-out passages written to dev.jsonl.
    #[arg(long, default_value_t = 0)]
    pub dev_passages: usize,
    /// Passage length limit.
    #[arg(long, default_value_t = 32)]
    pub t_t: usize,
    /// Description length.
    #[arg(long, default_value_t = 16)]
    pub t_e: usize,
    /// Directory for the generated files.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Options shared by every command that reads a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; flags override it, it overrides built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed [default: 0, or the RRLINK_SEED environment variable].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Built-in defaults: desk (K = 32) or paper (K = 120); both use thr = 0.03, T_t = 32, T_e = 128 [default: desk].
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Floating-point width of parameters and activations [default: f64].
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    pub threads: Option<usize>,
    /// Any configuration value as dotted.key=json, e.g. train.k=16. Repeatable.
    #[arg(long = "set", value_parser = config::parse_set)]
    pub set: Vec<(String, serde_json::Value)>,
}

impl ConfigArgs {
    fn load(&self, mode: Option<TrainMode>) -> Result<RunConfig> {
        let flags = Overrides {
            profile: self.profile,
            precision: self.precision,
            threads: self.threads,
            seed: self.seed,
            mode: mode.map(|m| m.label().to_string()),
            extra: self.set.clone(),
        };
        config::load(self.config.as_deref(), &flags)
    }
}

#[derive(Debug, Clone, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Encode with the parameters of this checkpoint instead of a fresh model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for vocab.jsonl and index.bin.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training mode: pipeline, e2e-fwd, e2e-rev or e2e-bi [default: e2e-bi].
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from the newest checkpoint in --out-dir when there is one.
    #[arg(long)]
    pub resume: bool,
    /// Run directory: config.json, vocab.jsonl, metrics.jsonl, checkpoints/, candidates/, predictions/.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Corpus to predict [default: the run's dev corpus].
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Worker threads [default: all cores].
    #[arg(long)]
    pub threads: Option<usize>,
    /// Directory for predictions.jsonl, candidates.jsonl and report.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// Gold corpus (JSON lines of documents with mentions).
    #[arg(long)]
    pub gold: PathBuf,
    /// Predictions written by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Candidate lists written by `predict`, for Recall@K.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Passage length limit used when the predictions were made.
    #[arg(long, default_value_t = 32)]
    pub t_t: usize,
    /// Cut-offs for Recall@K, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,50,100")]
    pub ks: Vec<usize>,
    /// Also write report.json here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    /// Modes, comma separated [default: all four].
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<TrainMode>,
    /// Directory holding one run directory per mode and seed plus the tables.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

/// The error as one line: `error[kind]: message`.
pub fn error_line(e: &Error) -> String {
    let kind = match e.kind() {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    };
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error[{kind}]: {msg}")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(drop),
        Command::Build(a) => cmd_build(&a).map(drop),
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Predict(a) => cmd_predict(&a).map(drop),
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            println!("{}", serde_json::to_string(&r)?);
            Ok(())
        }
        Command::Ablate(a) => {
            let r = cmd_ablate(&a)?;
            print!("{}", r.to_text());
            Ok(())
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}

/// Writes `kb.jsonl`, `train.jsonl`, optionally `dev.jsonl`, and a `config.json` naming them.
pub fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    let spec = SyntheticSpec {
        seed: a.seed,
        n_entities: a.entities,
        n_passages: a.passages,
        n_dev_passages: a.dev_passages,
        t_t: a.t_t,
        t_e: a.t_e,
    };
    let paths = write_synthetic(&spec, &a.out_dir)?;
    let mut data = serde_json::json!({
        "kb": "kb.jsonl",
        "train": "train.jsonl",
        "t_t": a.t_t,
        "t_e": a.t_e,
    });
    if paths.dev.is_some() {
        data["dev"] = "dev.jsonl".into();
    }
    let max_len = a.t_t + a.t_e + 2;
    let config = serde_json::json!({ "data": data, "model": { "max_len": max_len } });
    let path = a.out_dir.join("config.json");
    write_json(&path, &config)?;
    Ok(path)
}

struct Workspace {
    vocab: Vocabulary,
    kb: KnowledgeBase,
    train: Vec<Passage>,
    dev: Vec<Passage>,
}

fn load_workspace(c: &RunConfig, vocab: Option<Vocabulary>) -> Result<Workspace> {
    let kb_path = c.kb_path()?;
    let train_path = c.train_path()?;
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let mut corpora = vec![train_path];
            corpora.extend(c.data.dev.as_deref());
            build_vocab(kb_path, &corpora)?
        }
    };
    let kb = KnowledgeBase::new(load_kb(kb_path, &vocab, c.data.t_e)?)?;
    let train = load_corpus(train_path, &vocab, c.data.t_t, Some(&kb))?;
    let dev = match &c.data.dev {
        Some(p) => load_corpus(p, &vocab, c.data.t_t, Some(&kb))?,
        None => Vec::new(),
    };
    Ok(Workspace { vocab, kb, train, dev })
}

/// Writes `vocab.jsonl` and `index.bin` under the output directory.
pub fn cmd_build(a: &BuildArgs) -> Result<PathBuf> {
    let c = a.config.load(None)?;
    with_threads(c.threads, || {
        let ws = load_workspace(&c, None)?;
        mkdir(&a.out_dir)?;
        ws.vocab.save(&a.out_dir.join("vocab.jsonl"))?;
        let path = a.out_dir.join("index.bin");
        let checkpoint = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
        match c.precision {
            Precision::F32 => build_index::<f32>(&c, &ws, checkpoint.as_ref(), &path)?,
            Precision::F64 => build_index::<f64>(&c, &ws, checkpoint.as_ref(), &path)?,
        }
        Ok(path)
    })
}

fn build_index<T: Scalar>(c: &RunConfig, ws: &Workspace, ckpt: Option<&Checkpoint>, path: &Path) -> Result<()> {
    let hash = ws.vocab.hash();
    let model: Model<T> = match ckpt {
        Some(ck) => ck.model(&hash)?,
        None => Model::new(&c.model, ws.vocab.len(), c.train.mode.is_pipeline(), c.train.seed)?,
    };
    model.encode_index(&ws.kb)?.save(path, &hash)
}

/// A finished or resumed training run and its final dev report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub report: Option<EvalReport>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutcome> {
    let c = a.config.load(a.mode)?;
    with_threads(c.threads, || train_run(&c, &a.out_dir, a.resume))
}

fn train_run(c: &RunConfig, out: &Path, resume: bool) -> Result<TrainOutcome> {
    let dir = RunDir::create(out)?;
    let vocab_path = out.join("vocab.jsonl");
    let existing = resume && dir.latest_checkpoint().is_some();
    let vocab = if existing { Some(Vocabulary::load(&vocab_path)?) } else { None };
    let ws = load_workspace(c, vocab)?;
    c.train.validate(Some(ws.kb.len()))?;
    write_json(&out.join("config.json"), c)?;
    ws.vocab.save(&vocab_path)?;
    let report = match c.precision {
        Precision::F32 => train_typed::<f32>(c, &ws, dir, existing)?,
        Precision::F64 => train_typed::<f64>(c, &ws, dir, existing)?,
    };
    if let Some(r) = &report {
        write_json(&out.join("report.json"), r)?;
    }
    Ok(TrainOutcome {
        run_dir: out.to_path_buf(),
        report,
    })
}

fn train_typed<T: Scalar>(c: &RunConfig, ws: &Workspace, dir: RunDir, resume: bool) -> Result<Option<EvalReport>> {
    let data = TrainData {
        kb: &ws.kb,
        train: &ws.train,
        dev: &ws.dev,
    };
    let hash = ws.vocab.hash();
    let mut trainer: Trainer<'_, T> = if resume {
        let ckpt = latest_checkpoint(&dir)?;
        if ckpt.train != c.train || ckpt.model != c.model {
            return Err(Error::Config("--resume with a configuration that differs from the checkpoint".into()));
        }
        if ckpt.precision != T::BYTES {
            return Err(Error::Config("--resume with a different precision".into()));
        }
        Trainer::resume(ckpt, &hash, data, Some(dir))?
    } else {
        Trainer::new(&c.model, ws.vocab.len(), &hash, c.train.clone(), data, Some(dir))?
    };
    trainer.run()?;
    Ok(trainer.state.history.iter().rev().find_map(|r| r.dev.clone()))
}

/// Writes `predictions.jsonl` and `candidates.jsonl` for a corpus.
pub fn cmd_predict(a: &PredictArgs) -> Result<PathBuf> {
    with_threads(a.threads, || {
        let text = fs::read_to_string(a.run_dir.join("config.json")).map_err(|e| Error::io(a.run_dir.join("config.json"), e))?;
        let c: RunConfig = serde_json::from_str(&text)?;
        let vocab = Vocabulary::load(&a.run_dir.join("vocab.jsonl"))?;
        let kb = KnowledgeBase::new(load_kb(c.kb_path()?, &vocab, c.data.t_e)?)?;
        let input = match &a.input {
            Some(p) => p.clone(),
            None => c
                .data
                .dev
                .clone()
                .ok_or_else(|| Error::Config("no --input and the run has no dev corpus".into()))?,
        };
        let passages = load_corpus(&input, &vocab, c.data.t_t, Some(&kb))?;
        let ckpt = latest_checkpoint(&RunDir::create(&a.run_dir)?)?;
        mkdir(&a.out_dir)?;
        match ckpt.precision {
            4 => predict_typed::<f32>(&ckpt, &vocab, &kb, &passages, &a.out_dir)?,
            _ => predict_typed::<f64>(&ckpt, &vocab, &kb, &passages, &a.out_dir)?,
        }
        Ok(a.out_dir.join("predictions.jsonl"))
    })
}

fn predict_typed<T: Scalar>(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    kb: &KnowledgeBase,
    passages: &[Passage],
    out: &Path,
) -> Result<()> {
    let model: Model<T> = ckpt.model(&vocab.hash())?;
    let index = model.encode_index(kb)?;
    let cfg = &ckpt.train;
    let output = predict(&model, &index, kb, passages, cfg.mode, cfg.k, &cfg.reader)?;
    write_predictions(&out.join("predictions.jsonl"), &output.records())?;
    write_candidates(&out.join("candidates.jsonl"), &output.candidate_sets())?;
    let report = score(&output, passages, kb, &cfg.eval_ks, cfg.mode, cfg.seed);
    write_json(&out.join("report.json"), &report)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let vocab = build_vocab(&a.kb, &[&a.gold])?;
    let kb = KnowledgeBase::new(load_kb(&a.kb, &vocab, 1)?)?;
    let gold = load_corpus(&a.gold, &vocab, a.t_t, Some(&kb))?;
    let preds = read_predictions(&a.predictions)?;
    let prf = micro_prf(&gold_triples(&gold), &predicted_triples(&preds), Some(&kb));
    let recall = match &a.candidates {
        Some(p) => {
            let lists: BTreeMap<String, Vec<String>> = read_candidates(p)?
                .into_iter()
                .map(|r| (r.passage_id, r.candidates.into_iter().map(|c| c.entity_id).collect()))
                .collect();
            recall_at_k(&gold_entities(&gold, Some(&kb)), &lists, &a.ks)
        }
        None => Vec::new(),
    };
    let report = EvalReport::new("eval", 0, prf, recall);
    if let Some(dir) = &a.out_dir {
        mkdir(dir)?;
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

/// Trains every mode for every seed under `<out>/<mode>/seed-<s>` and tabulates dev reports.
pub fn cmd_ablate(a: &AblateArgs) -> Result<AblationReport> {
    let modes: Vec<TrainMode> = if a.modes.is_empty() { TrainMode::ALL.to_vec() } else { a.modes.clone() };
    if a.seeds.is_empty() {
        return Err(Error::Config("--seeds is empty".into()));
    }
    let base = a.config.load(None)?;
    if base.data.dev.is_none() {
        return Err(Error::Config("ablation needs data.dev".into()));
    }
    let mut reports = Vec::new();
    for &mode in &modes {
        for &seed in &a.seeds {
            let mut c = base.clone();
            c.train.mode = mode;
            c.train.seed = seed;
            let out = a.out_dir.join(mode.label()).join(format!("seed-{seed}"));
            log::info!("ablation: {mode} seed {seed}");
            let outcome = with_threads(c.threads, || train_run(&c, &out, false))?;
            let report = outcome
                .report
                .ok_or_else(|| Error::Numeric(format!("{mode} seed {seed} produced no dev report")))?;
            reports.push(report);
        }
    }
    let table = ablation_report(&reports);
    mkdir(&a.out_dir)?;
    write_json(&a.out_dir.join("runs.json"), &reports)?;
    write_json(&a.out_dir.join("ablation.json"), &table)?;
    fs::write(a.out_dir.join("ablation.txt"), table.to_text()).map_err(|e| Error::io(&a.out_dir, e))?;
    Ok(table)
}
