//! End-to-end driver: datasets, vocabulary, training with per-epoch target
//! shuffling, best-epoch selection, prediction and evaluation.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{train_step_checkpointed, PlanKind};
use crate::codec::{self, FailureKind, Format, ParseFailure, ParseOutcome, Record, Shape};
use crate::dataset::{self, Example};
use crate::error::{Error, Result};
use crate::eval::{entity_f1, Averaging, MetricReport};
use crate::fusion::{chunk_document, ChunkBatch};
use crate::model::{search, DecoderScorer, Dropout, EncodedMemory, Model, ModelConfig, SearchMode};
use crate::optim::{Adam, AdamConfig};
use crate::persist;
use crate::preprocess::Toggles;
use crate::synth::{self, Split};
use crate::tokenizer::{build_vocab, coverage_minimum, detokenize, inject_structural_tokens, tokenize, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Dates,
    Names,
    Numbers,
    Longdoc,
    CustomJsonl,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Dates,
        Task::Names,
        Task::Numbers,
        Task::Longdoc,
        Task::CustomJsonl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Dates => "dates",
            Task::Names => "names",
            Task::Numbers => "numbers",
            Task::Longdoc => "longdoc",
            Task::CustomJsonl => "custom-jsonl",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task `{s}` (dates|names|numbers|longdoc|custom-jsonl)")))
    }
}

/// Everything a run needs. Serialized next to the model so prediction
/// reproduces the training pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub dropout: f32,
    pub chunk_size: usize,
    pub max_chunks: usize,
    pub max_target_len: usize,
    /// Target vocabulary size; anything at or below the base set keeps the
    /// vocabulary character-level.
    pub vocab_size: usize,
    pub digit_split: bool,
    pub beam: usize,
    pub epochs: usize,
    pub lr: f32,
    /// Decay the learning rate linearly to zero over the run.
    pub lr_decay: bool,
    pub clip_norm: Option<f32>,
    pub seed: u64,
    pub lowercase: bool,
    pub strip_commas: bool,
    pub shuffle_epochs: bool,
    pub slot_prefix: bool,
    /// `None` generates the single value as plain text.
    pub format: Option<Format>,
    pub shape: Shape,
    pub checkpoint: PlanKind,
    pub trace_memory: bool,
    /// Generated dataset sizes when no paths are given.
    pub n_train: usize,
    pub n_dev: usize,
    pub longdoc_len: usize,
    pub longdoc_fields: Vec<String>,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub model_path: PathBuf,
    pub report_dir: Option<PathBuf>,
    /// Slot names for the prefix when no gold record is at hand.
    pub slots: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Dates,
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            dropout: 0.0,
            chunk_size: 64,
            max_chunks: 1,
            max_target_len: 128,
            vocab_size: 0,
            digit_split: false,
            beam: 1,
            epochs: 10,
            lr: 6.25e-5,
            lr_decay: false,
            clip_norm: None,
            seed: 0,
            lowercase: false,
            strip_commas: false,
            shuffle_epochs: true,
            slot_prefix: false,
            format: None,
            shape: Shape::Dict,
            checkpoint: PlanKind::None,
            trace_memory: false,
            n_train: 2500,
            n_dev: 500,
            longdoc_len: 512,
            longdoc_fields: vec!["party".into(), "amount".into(), "due_date".into()],
            train_path: None,
            dev_path: None,
            model_path: PathBuf::from("model.d2d"),
            report_dir: None,
            slots: Vec::new(),
        }
    }
}

pub const SEED_ENV: &str = "D2D_SEED";

/// Order-sensitive mix of several integers into one seed.
pub fn seed_hash(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        let mut x = h ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = x ^ (x >> 31);
    }
    h
}

/// `model.d2d` -> `model.<ext>`.
pub fn sidecar(model_path: &Path, ext: &str) -> PathBuf {
    model_path.with_extension(ext)
}

impl RunConfig {
    pub fn toggles(&self) -> Toggles {
        Toggles {
            lowercase: self.lowercase,
            strip_commas: self.strip_commas,
            slot_prefix: self.slot_prefix,
        }
    }

    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            vocab_size,
            chunk_size: self.chunk_size,
            max_chunks: self.max_chunks,
            max_target_len: self.max_target_len,
            dropout: self.dropout,
        }
    }

    /// Parameter checks that need no files.
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.max_target_len < 2 {
            return Err(Error::Config("max_target_len must be at least 2".into()));
        }
        self.model_config(coverage_minimum()).validate()
    }

    /// Checks before training: parameters plus every referenced path.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.task == Task::CustomJsonl && self.train_path.is_none() {
            return Err(Error::Config("custom-jsonl needs a training file".into()));
        }
        for p in [&self.train_path, &self.dev_path].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("dataset `{}` does not exist", p.display())));
            }
        }
        let parent = self.model_path.parent().filter(|p| !p.as_os_str().is_empty());
        if let Some(dir) = parent {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "model directory `{}` does not exist",
                    dir.display()
                )));
            }
        }
        if let Some(dir) = &self.report_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "report directory `{}` does not exist",
                    dir.display()
                )));
            }
        }
        Ok(())
    }

    /// Generated examples for the synthetic tasks.
    pub fn generate(&self, n: usize, split: Split) -> Result<Vec<Example>> {
        let seed = synth::split_seed(self.seed, split);
        Ok(match self.task {
            Task::Dates => synth::gen_dates(n, seed)?.iter().map(synth::Pair::to_example).collect(),
            Task::Names => synth::gen_names(n, self.seed, split)?
                .iter()
                .map(synth::Pair::to_example)
                .collect(),
            Task::Numbers => synth::gen_numbers(n, seed)?
                .iter()
                .map(synth::Pair::to_example)
                .collect(),
            Task::Longdoc => self
                .generate_longdoc(n, split)?
                .iter()
                .map(synth::LongDoc::to_example)
                .collect(),
            Task::CustomJsonl => return Err(Error::Config("custom-jsonl data must come from files".into())),
        })
    }

    /// Long documents with their planted-value annotations.
    pub fn generate_longdoc(&self, n: usize, split: Split) -> Result<Vec<synth::LongDoc>> {
        let fields: Vec<&str> = self.longdoc_fields.iter().map(String::as_str).collect();
        synth::gen_longdoc(n, synth::split_seed(self.seed, split), self.longdoc_len, &fields)
    }

    fn dataset(&self, path: &Option<PathBuf>, n: usize, split: Split) -> Result<Vec<Example>> {
        let mut out = match path {
            Some(p) => dataset::load(p, self.shape)?,
            None => self.generate(n, split)?,
        };
        for e in &mut out {
            if e.record.shape() != self.shape {
                e.record = e.record.clone().with_shape(self.shape)?;
            }
        }
        Ok(out)
    }

    pub fn load_datasets(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        let train = self.dataset(&self.train_path, self.n_train, Split::Train)?;
        let dev = match (&self.dev_path, self.task) {
            (None, Task::CustomJsonl) => Vec::new(),
            _ => self.dataset(&self.dev_path, self.n_dev, Split::Eval)?,
        };
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        Ok((train, dev))
    }
}

/// Shared preprocessing between training and prediction.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: RunConfig,
    pub vocab: Vocab,
}

impl Pipeline {
    /// Learn the vocabulary from the transformed training sources and
    /// targets, then reserve the output format's structural symbols.
    pub fn fit(config: &RunConfig, train: &[Example]) -> Result<Self> {
        let toggles = config.toggles();
        let mut corpus = Vec::with_capacity(2 * train.len());
        for e in train {
            corpus.push(toggles.source(&e.input, &e.record.keys())?);
            corpus.push(target_text(config, &toggles.target(&e.record)?)?);
        }
        let size = config.vocab_size.max(coverage_minimum());
        let mut vocab = build_vocab(corpus.iter().map(String::as_str), size, config.digit_split)?;
        if let Some(f) = config.format {
            vocab = inject_structural_tokens(&vocab, f.structural_symbols())?;
        }
        Ok(Pipeline {
            config: config.clone(),
            vocab,
        })
    }

    pub fn source_batch(&self, input: &str, slots: &[&str]) -> Result<ChunkBatch> {
        let text = self.config.toggles().source(input, slots)?;
        let ids = tokenize(&text, &self.vocab).ids;
        chunk_document(&ids, self.config.chunk_size, self.config.max_chunks)
    }

    /// Gold record as the model is trained to emit it.
    pub fn gold(&self, record: &Record) -> Result<Record> {
        self.config.toggles().target(record)
    }

    pub fn target_ids(&self, record: &Record) -> Result<Vec<u32>> {
        Ok(tokenize(&target_text(&self.config, record)?, &self.vocab).ids)
    }

    /// Turn generated text back into a record.
    pub fn decode(&self, text: &str, key: &str) -> ParseOutcome {
        match self.config.format {
            Some(f) => codec::parse(text, f, self.config.shape),
            None => {
                if let Some(c) = text.chars().find(|&c| c == '\u{FFFD}' || c.is_control()) {
                    return Err(ParseFailure {
                        kind: FailureKind::TokenizerArtifact,
                        message: format!("unexpected character {c:?}"),
                    });
                }
                Ok(Record::strings(self.config.shape, [(key, text)]).expect("single pair"))
            }
        }
    }
}

/// Target sequence text: the serialized record, or the bare value when no
/// format is configured.
pub fn target_text(config: &RunConfig, record: &Record) -> Result<String> {
    match config.format {
        Some(f) => codec::serialize(record, f),
        None => match record.pairs() {
            [(_, v)] => Ok(v.as_str().to_string()),
            _ => Err(Error::Serialize(format!(
                "plain-text targets need exactly one pair, record has {}",
                record.len()
            ))),
        },
    }
}

/// The pair order the model sees for training example `idx` in `epoch`.
pub fn epoch_record(config: &RunConfig, gold: &Record, epoch: usize, idx: usize) -> Record {
    if config.shuffle_epochs {
        codec::shuffle_pairs(gold, seed_hash(&[config.seed, epoch as u64, idx as u64]))
    } else {
        gold.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_exact: f64,
    pub dev_f1: f64,
    pub dev_parse_failures: usize,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} loss={:.6} dev_exact={:.4} dev_f1={:.4} dev_parse_failures={}",
            self.epoch, self.mean_loss, self.dev_exact, self.dev_f1, self.dev_parse_failures
        )
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub pipeline: Pipeline,
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    /// Every step's loss, in order.
    pub step_losses: Vec<f32>,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        let mut s: String = self.log.iter().map(|l| l.line() + "\n").collect();
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        s
    }

    pub fn predictor(&self) -> Predictor<'_> {
        Predictor {
            model: &self.model,
            pipeline: &self.pipeline,
        }
    }
}

struct Prepared {
    batch: ChunkBatch,
    gold: Record,
}

fn prepare(p: &Pipeline, examples: &[Example]) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let at = |err: Error| Error::Dataset {
                line: i + 1,
                msg: err.to_string(),
            };
            let gold = p.gold(&e.record).map_err(at)?;
            let batch = p.source_batch(&e.input, &e.record.keys()).map_err(at)?;
            let n = p.target_ids(&gold).map_err(at)?.len();
            if n + 1 > p.config.max_target_len {
                return Err(at(Error::Invalid(format!(
                    "target needs {} decoder positions, max_target_len is {}",
                    n + 1,
                    p.config.max_target_len
                ))));
            }
            Ok(Prepared { batch, gold })
        })
        .collect()
}

/// Train on in-memory data. `progress` sees every finished epoch.
pub fn train_examples(
    config: &RunConfig,
    train: &[Example],
    dev: &[Example],
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let pipeline = Pipeline::fit(config, train)?;
    let model_config = config.model_config(pipeline.vocab.len());
    let mut model = Model::new(model_config, seed_hash(&[config.seed, 1]))?;
    let train_set = prepare(&pipeline, train)?;
    let dev_set = prepare(&pipeline, dev)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            clip_norm: config.clip_norm,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut trace_file = match (&config.report_dir, config.trace_memory) {
        (Some(dir), true) => Some(std::io::BufWriter::new(std::fs::File::create(
            dir.join("memory_trace.txt"),
        )?)),
        _ => None,
    };
    let mut log = Vec::new();
    let mut best: Option<((f64, f64), usize, crate::tensor::ParamStore)> = None;
    let mut step_losses = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed_hash(&[
                config.seed,
                epoch as u64,
            ])));
        }
        let mut total = 0.0f64;
        for &idx in &order {
            let ex = &train_set[idx];
            let record = epoch_record(config, &ex.gold, epoch, idx);
            let target = pipeline.target_ids(&record)?;
            let plan = config.checkpoint.plan(&model.config, ex.batch.m);
            let drop = (config.dropout > 0.0).then(|| Dropout {
                p: config.dropout,
                seed: seed_hash(&[config.seed, epoch as u64, idx as u64, 0xD2]),
            });
            let out = train_step_checkpointed(&model, &ex.batch, &target, &plan, drop)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    example: idx + 1,
                    loss: out.loss,
                });
            }
            if config.lr_decay {
                let total_steps = (config.epochs * train_set.len()) as f32;
                adam.config.lr = config.lr * (1.0 - step as f32 / total_steps);
            }
            step += 1;
            if let Some(f) = trace_file.as_mut() {
                writeln!(
                    f,
                    "step={step}\nepoch={epoch}\nexample={}\n{}",
                    idx + 1,
                    out.trace.to_kv_text()
                )?;
            }
            total += f64::from(out.loss);
            step_losses.push(out.loss);
            adam.update(&mut model.params, &out.grads)?;
        }
        let (dev_exact, dev_f1, dev_parse_failures) = if dev_set.is_empty() {
            (0.0, 0.0, 0)
        } else {
            let p = Predictor {
                model: &model,
                pipeline: &pipeline,
            };
            let ev = evaluate_prepared(&p, &dev_set)?;
            (ev.exact_match, ev.report.micro.f1, ev.report.parse_failures)
        };
        let entry = EpochLog {
            epoch,
            mean_loss: total / train_set.len() as f64,
            dev_exact,
            dev_f1,
            dev_parse_failures,
        };
        progress(&entry);
        // without a dev set the latest epoch wins
        let score = (dev_exact, dev_f1);
        if dev_set.is_empty() || best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.params.clone()));
        }
        log.push(entry);
    }
    if let Some(f) = trace_file.as_mut() {
        f.flush()?;
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    let model = Model::from_params(model.config.clone(), params)?;
    Ok(TrainOutcome {
        model,
        pipeline,
        log,
        best_epoch,
        step_losses,
    })
}

/// Train from a configuration and write the model, its vocabulary, the run
/// configuration and the metric log next to `model_path`.
pub fn train(config: &RunConfig, progress: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate_for_training()?;
    let (train_set, dev_set) = config.load_datasets()?;
    let out = train_examples(config, &train_set, &dev_set, progress)?;
    save_run(&out, &config.model_path)?;
    if let Some(dir) = &config.report_dir {
        std::fs::write(dir.join("metrics.log"), out.log_text())?;
    }
    Ok(out)
}

pub fn save_run(out: &TrainOutcome, model_path: &Path) -> Result<()> {
    persist::save_model(&out.model, model_path)?;
    std::fs::write(sidecar(model_path, "vocab"), out.pipeline.vocab.to_text())?;
    std::fs::write(
        sidecar(model_path, "run.json"),
        serde_json::to_string_pretty(&out.pipeline.config)? + "\n",
    )?;
    std::fs::write(sidecar(model_path, "metrics.log"), out.log_text())?;
    Ok(())
}

/// A trained model with the pipeline it was trained under.
pub struct LoadedRun {
    pub model: Model,
    pub pipeline: Pipeline,
}

impl LoadedRun {
    pub fn load(model_path: &Path) -> Result<Self> {
        let run_path = sidecar(model_path, "run.json");
        let config: RunConfig = serde_json::from_str(
            &std::fs::read_to_string(&run_path)
                .map_err(|e| Error::Config(format!("cannot read run configuration `{}`: {e}", run_path.display())))?,
        )?;
        let vocab = Vocab::from_text(&std::fs::read_to_string(sidecar(model_path, "vocab"))?)?;
        let bytes = std::fs::read(model_path)?;
        let model = persist::from_bytes_with(&bytes, config.model_config(vocab.len()))?;
        Ok(LoadedRun {
            model,
            pipeline: Pipeline { config, vocab },
        })
    }

    pub fn predictor(&self) -> Predictor<'_> {
        Predictor {
            model: &self.model,
            pipeline: &self.pipeline,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Parsed record, empty when parsing failed.
    pub record: Record,
    pub raw: String,
    pub failure: Option<ParseFailure>,
    /// The source was longer than `chunk_size * max_chunks` tokens.
    pub input_truncated: bool,
    /// Generation stopped at `max_target_len` without `eos`.
    pub output_truncated: bool,
    pub log_prob: f32,
}

impl Prediction {
    pub fn outcome(&self) -> ParseOutcome {
        match &self.failure {
            Some(f) => Err(f.clone()),
            None => Ok(self.record.clone()),
        }
    }
}

pub struct Predictor<'a> {
    pub model: &'a Model,
    pub pipeline: &'a Pipeline,
}

impl Predictor<'_> {
    fn run(&self, batch: &ChunkBatch, key: &str) -> Result<Prediction> {
        let memory = EncodedMemory::encode(self.model, batch)?;
        let scorer = DecoderScorer::new(self.model, &memory)?;
        let cfg = &self.pipeline.config;
        let gen = search(&scorer, SearchMode::from_beam(cfg.beam), cfg.max_target_len)?;
        let raw = detokenize(gen.content(), &self.pipeline.vocab);
        let (record, failure) = match self.pipeline.decode(&raw, key) {
            Ok(r) => (r, None),
            Err(f) => (Record::empty(cfg.shape), Some(f)),
        };
        Ok(Prediction {
            record,
            raw,
            failure,
            input_truncated: batch.truncated,
            output_truncated: gen.truncated,
            log_prob: gen.log_prob,
        })
    }

    /// `slots` feeds the slot prefix; without it the configured slot list
    /// is used.
    pub fn predict(&self, input: &str, slots: Option<&[&str]>) -> Result<Prediction> {
        let cfg = &self.pipeline.config;
        let owned: Vec<&str> = cfg.slots.iter().map(String::as_str).collect();
        let slots = slots.unwrap_or(&owned);
        let batch = self.pipeline.source_batch(input, slots)?;
        self.run(&batch, slots.first().copied().unwrap_or("value"))
    }
}

pub struct Evaluation {
    pub report: MetricReport,
    pub exact_match: f64,
    pub predictions: Vec<Prediction>,
}

impl Evaluation {
    pub fn to_kv_text(&self) -> String {
        format!("exact_match={:.6}\n{}", self.exact_match, self.report.to_kv_text())
    }
}

fn evaluate_prepared(p: &Predictor, set: &[Prepared]) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(set.len());
    for ex in set {
        let key = ex.gold.pairs().first().map_or("value", |(k, _)| k.as_str());
        predictions.push(p.run(&ex.batch, key)?);
    }
    let golds: Vec<Record> = set.iter().map(|e| e.gold.clone()).collect();
    let outcomes: Vec<ParseOutcome> = predictions.iter().map(Prediction::outcome).collect();
    let report = entity_f1(&outcomes, &golds, false, Averaging::Micro)?;
    let exact = predictions
        .iter()
        .zip(&golds)
        .filter(|(p, g)| p.failure.is_none() && p.record.canonical_eq(g))
        .count();
    Ok(Evaluation {
        report,
        exact_match: if set.is_empty() {
            0.0
        } else {
            exact as f64 / set.len() as f64
        },
        predictions,
    })
}

/// Predict every example and score against its (transformed) gold record.
pub fn evaluate(p: &Predictor, examples: &[Example]) -> Result<Evaluation> {
    evaluate_prepared(p, &prepare(p.pipeline, examples)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            chunk_size: 16,
            max_target_len: 16,
            epochs: 1,
            n_train: 4,
            n_dev: 2,
            lr: 1e-3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn seed_hash_is_order_sensitive() {
        assert_ne!(seed_hash(&[1, 2]), seed_hash(&[2, 1]));
        assert_eq!(seed_hash(&[1, 2, 3]), seed_hash(&[1, 2, 3]));
    }

    #[test]
    fn config_checks() {
        assert!(small().validate().is_ok());
        assert!(RunConfig { beam: 0, ..small() }.validate().is_err());
        assert!(RunConfig { epochs: 0, ..small() }.validate().is_err());
        let missing = RunConfig {
            train_path: Some("/nonexistent/train.jsonl".into()),
            ..small()
        };
        assert!(missing.validate_for_training().is_err());
        let json = serde_json::to_string(&small()).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, small());
        let partial: RunConfig = serde_json::from_str("{\"task\": \"numbers\", \"format\": \"json\"}").unwrap();
        assert_eq!(partial.task, Task::Numbers);
        assert_eq!(partial.format, Some(Format::Json));
    }

    #[test]
    fn raw_targets_need_one_pair() {
        let cfg = small();
        let one = Record::strings(Shape::Dict, [("value", "x")]).unwrap();
        assert_eq!(target_text(&cfg, &one).unwrap(), "x");
        let two = Record::strings(Shape::Dict, [("a", "x"), ("b", "y")]).unwrap();
        assert!(target_text(&cfg, &two).is_err());
        let cfg = RunConfig {
            format: Some(Format::PyLiteral),
            ..small()
        };
        assert_eq!(target_text(&cfg, &two).unwrap(), "{'a': 'x', 'b': 'y'}");
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let cfg = small();
        let (train, dev) = cfg.load_datasets().unwrap();
        let a = train_examples(&cfg, &train, &dev, |_| {}).unwrap();
        let b = train_examples(&cfg, &train, &dev, |_| {}).unwrap();
        assert_eq!(a.log_text(), b.log_text());
        assert_eq!(
            persist::to_bytes(&a.model).unwrap(),
            persist::to_bytes(&b.model).unwrap()
        );
        assert_eq!(a.step_losses.len(), 4);
    }
}
