use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use doc2dict::checkpoint::{block_sizes, peak_activation_model, train_step_checkpointed, PlanKind};
use doc2dict::codec::{Format, Shape};
use doc2dict::dataset::{self, Example};
use doc2dict::eval::{AlignmentAudit, Span};
use doc2dict::fusion::{attention_cost, chunk_document};
use doc2dict::model::Model;
use doc2dict::runner::{self, evaluate, LoadedRun, Prediction, RunConfig, Task};
use doc2dict::synth::Split;
use doc2dict::tokenizer::coverage_minimum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "doc2dict", version, about = "Generate structured records from documents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSONL
    GenData(GenDataArgs),
    /// Train a model and save it with its vocabulary and run configuration
    Train(TrainArgs),
    /// Extract a record from one document
    Predict(PredictArgs),
    /// Score a trained model on a JSONL dataset
    Eval(EvalArgs),
    /// Fuzzy-align record values back to their documents
    Align(AlignArgs),
    /// Attention cost and activation memory for a configuration
    Cost(CostArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

/// Every field of the run configuration; unset flags keep the value from
/// `--config` (or the built-in default).
#[derive(Args, Default)]
struct RunArgs {
    /// JSON run configuration to start from
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_enc_layers: Option<usize>,
    #[arg(long)]
    n_dec_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    dropout: Option<f32>,
    /// Tokens per chunk
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Most chunks per document; longer inputs are truncated
    #[arg(long)]
    max_chunks: Option<usize>,
    #[arg(long)]
    max_target_len: Option<usize>,
    /// Vocabulary size; at or below the character set keeps it character-level
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    digit_split: Option<bool>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    lr_decay: Option<bool>,
    /// Global gradient-norm clip; 0 disables
    #[arg(long)]
    clip_norm: Option<f32>,
    /// Overridden by D2D_SEED unless given here
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    lowercase: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    strip_commas: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    shuffle_epochs: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    slot_prefix: Option<bool>,
    /// raw|json|xml|yaml|pyliteral
    #[arg(long)]
    format: Option<String>,
    /// dict|tuples
    #[arg(long)]
    shape: Option<Shape>,
    /// none|per-block|two-level
    #[arg(long)]
    checkpoint: Option<PlanKind>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    trace_memory: Option<bool>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_dev: Option<usize>,
    /// Long-document length in characters
    #[arg(long)]
    longdoc_len: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    longdoc_fields: Option<Vec<String>>,
    #[arg(long)]
    train_path: Option<PathBuf>,
    #[arg(long)]
    dev_path: Option<PathBuf>,
    #[arg(long)]
    model_path: Option<PathBuf>,
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Slot names for the prefix at prediction time
    #[arg(long, value_delimiter = ',')]
    slots: Option<Vec<String>>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => {
                serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let mut c = base.with_env_overrides()?;
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$f = v.clone();
                }
            )*};
        }
        set!(
            task,
            d_model,
            n_heads,
            n_enc_layers,
            n_dec_layers,
            d_ff,
            dropout,
            chunk_size,
            max_chunks,
            max_target_len,
            vocab_size,
            digit_split,
            beam,
            epochs,
            lr,
            lr_decay,
            seed,
            lowercase,
            strip_commas,
            shuffle_epochs,
            slot_prefix,
            shape,
            checkpoint,
            trace_memory,
            n_train,
            n_dev,
            longdoc_len,
            longdoc_fields,
            model_path,
            slots
        );
        if let Some(v) = self.clip_norm {
            c.clip_norm = (v > 0.0).then_some(v);
        }
        if let Some(f) = &self.format {
            c.format = match f.as_str() {
                "raw" => None,
                other => Some(other.parse::<Format>()?),
            };
        }
        for (dst, src) in [(&mut c.train_path, &self.train_path), (&mut c.dev_path, &self.dev_path)] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if self.report_dir.is_some() {
            c.report_dir.clone_from(&self.report_dir);
        }
        Ok(c)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of examples
    #[arg(long, short)]
    n: usize,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Output JSONL path
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Suppress per-epoch progress on stderr
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, short)]
    model: PathBuf,
    /// Document text; read from --input-file or stdin when absent
    #[arg(long, short, conflicts_with = "input_file")]
    input: Option<String>,
    #[arg(long)]
    input_file: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Slot names for the prefix, when the model was trained with one
    #[arg(long, value_delimiter = ',')]
    slots: Option<Vec<String>>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, short)]
    model: PathBuf,
    /// JSONL dataset
    #[arg(long, short)]
    data: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    /// Write report.txt, table.txt and predictions.jsonl here
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    /// JSONL dataset, optionally with gold `spans`
    #[arg(long, short)]
    data: PathBuf,
    #[arg(long, default_value = "dict")]
    shape: Shape,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Chunk count; defaults to --max-chunks
    #[arg(long)]
    m: Option<usize>,
    /// Decoder positions; defaults to --max-target-len
    #[arg(long)]
    target_len: Option<usize>,
    /// Also run one training step on random tokens and report the meter
    #[arg(long)]
    measure: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Align(a) => align(a),
        Command::Cost(a) => cost(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let config = a.run.resolve()?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
    };
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    );
    if config.task == Task::Longdoc {
        for doc in config.generate_longdoc(a.n, split)? {
            writeln!(
                out,
                "{}",
                dataset::annotated_to_json(&doc.to_example(), &doc.gold_spans())?
            )?;
        }
    } else {
        dataset::write_jsonl(&mut out, &config.generate(a.n, split)?)?;
    }
    out.flush()?;
    eprintln!("wrote {} {} examples to {}", a.n, config.task.name(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config = a.run.resolve()?;
    let quiet = a.quiet;
    let out = runner::train(&config, |e| {
        if !quiet {
            eprintln!("{}", e.line());
        }
    })?;
    println!("best_epoch={}", out.best_epoch);
    println!("model={}", config.model_path.display());
    println!("vocab={}", runner::sidecar(&config.model_path, "vocab").display());
    println!(
        "metrics={}",
        runner::sidecar(&config.model_path, "metrics.log").display()
    );
    Ok(())
}

fn load(model: &Path, beam: Option<usize>) -> Result<LoadedRun> {
    let mut run = LoadedRun::load(model)?;
    if let Some(b) = beam {
        if b == 0 {
            bail!("beam must be at least 1");
        }
        run.pipeline.config.beam = b;
    }
    Ok(run)
}

fn prediction_json(p: &Prediction) -> Result<serde_json::Value> {
    Ok(json!({
        "record": dataset::record_to_json(&p.record)?,
        "raw": p.raw,
        "failure": p.failure.as_ref().map(|f| json!({ "kind": f.kind.name(), "message": f.message })),
        "input_truncated": p.input_truncated,
        "output_truncated": p.output_truncated,
        "log_prob": p.log_prob,
    }))
}

fn predict(a: PredictArgs) -> Result<()> {
    let run = load(&a.model, a.beam)?;
    let input = match (&a.input, &a.input_file) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (None, None) => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let slots: Option<Vec<&str>> = a.slots.as_ref().map(|s| s.iter().map(String::as_str).collect());
    let p = run.predictor().predict(&input, slots.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&prediction_json(&p)?)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = load(&a.model, a.beam)?;
    let examples = dataset::load(&a.data, run.pipeline.config.shape)?;
    let ev = evaluate(&run.predictor(), &examples)?;
    let table = ev.report.to_table();
    let kv = ev.to_kv_text();
    print!("{table}\n{kv}");
    if let Some(dir) = &a.report_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), &kv)?;
        std::fs::write(dir.join("table.txt"), &table)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("predictions.jsonl"))?);
        for (p, e) in ev.predictions.iter().zip(&examples) {
            let mut v = prediction_json(p)?;
            v["gold"] = dataset::record_to_json(&e.record)?;
            writeln!(f, "{}", serde_json::to_string(&v)?)?;
        }
        f.flush()?;
    }
    Ok(())
}

fn align(a: AlignArgs) -> Result<()> {
    let mut audit = AlignmentAudit::default();
    for (Example { input, record }, spans) in dataset::load_annotated(&a.data, a.shape)? {
        let chars: Vec<char> = input.chars().collect();
        let gold: Option<Vec<(String, Span)>> = spans.map(|spans| {
            spans
                .into_iter()
                .map(|s| {
                    let text = chars[s.start..s.end].iter().collect();
                    (
                        s.key,
                        Span {
                            start: s.start,
                            end: s.end,
                            matched_text: text,
                        },
                    )
                })
                .collect()
        });
        audit.add(&input, &record, gold.as_deref());
    }
    print!("{}\n{}", audit.to_table(), audit.to_kv_text());
    Ok(())
}

fn cost(a: CostArgs) -> Result<()> {
    let config = a.run.resolve()?;
    config.validate()?;
    let m = a.m.unwrap_or(config.max_chunks);
    let t = a.target_len.unwrap_or(config.max_target_len);
    if m == 0 || t == 0 {
        bail!("chunk count and target length must be at least 1");
    }
    let mut model_config = config.model_config(coverage_minimum());
    model_config.max_chunks = model_config.max_chunks.max(m);
    model_config.max_target_len = model_config.max_target_len.max(t);
    print!("{}", attention_cost(&model_config, m)?.to_kv_text());
    let b = block_sizes(&model_config, m, t);
    println!("target_len={t}");
    println!("encoder_block_activations={}", b.encoder_block);
    println!("decoder_block_activations={}", b.decoder_block);
    println!("chunk_stack_activations={}", b.chunk_stack);
    println!("peak_two_level={}", peak_activation_model(&model_config, m, t));
    if a.measure {
        let model = Model::new(model_config.clone(), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = model_config.vocab_size as u32;
        let doc: Vec<u32> = (0..m * config.chunk_size).map(|_| rng.gen_range(3..vocab)).collect();
        let target: Vec<u32> = (0..t - 1).map(|_| rng.gen_range(3..vocab)).collect();
        let batch = chunk_document(&doc, config.chunk_size, m)?;
        let plan = config.checkpoint.plan(&model_config, batch.m);
        let step = train_step_checkpointed(&model, &batch, &target, &plan, None)?;
        print!(
            "measured.loss={}\n{}",
            step.loss,
            step.trace
                .to_kv_text()
                .lines()
                .map(|l| format!("measured.{l}\n"))
                .collect::<String>()
        );
    }
    Ok(())
}
