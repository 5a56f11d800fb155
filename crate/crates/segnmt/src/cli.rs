//! Command-line interface.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use segnmt_core::corpus::{ParallelCorpus, Vocabulary};
use segnmt_core::decode::{beam_search, max_len_for};
use segnmt_core::fuzzy::RetrievedSet;
use segnmt_core::index::InvertedIndex;
use segnmt_core::nmt::Model;
use segnmt_core::seg::FusionMode;
use segnmt_core::TokenId;
use serde::Serialize;

use crate::checkpoint::{self, Sidecar};
use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::evaluate::{self, EvalOptions, EvalReport};
use crate::index_file;
use crate::preprocess::{self, PreprocessOptions};
use crate::retrieval::{write_jsonl, RetrievalRecord, Retriever, Selection};
use crate::text::{self, DataDir};
use crate::trainer::{self, with_pool};

#[derive(Debug, Parser)]
#[command(name = "segnmt", version, about = "Retrieval-guided neural machine translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn BPE, build vocabularies and write train/dev/test splits.
    Preprocess(PreprocessArgs),
    /// Index the training sources.
    BuildIndex(BuildIndexArgs),
    /// Retrieve translation pairs for a split or a text file.
    Retrieve(RetrieveArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Translate a text file.
    Translate(TranslateArgs),
    /// Score a split and write the report.
    Evaluate(EvaluateArgs),
    /// Regenerate the TSV tables from a report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Preprocessed data directory [default: $SEGNMT_DATA_DIR].
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl DataArg {
    fn dir(&self) -> Result<DataDir> {
        Ok(DataDir::new(config::data_dir(self.data.as_deref())?))
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Source-side text, one sentence per line.
    #[arg(long)]
    pub src: PathBuf,
    /// Target-side text, line-aligned with --src.
    #[arg(long)]
    pub tgt: PathBuf,
    /// Output directory [default: $SEGNMT_DATA_DIR].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of BPE merges; 0 keeps characters.
    #[arg(long, default_value_t = 1000)]
    pub bpe_merges: usize,
    #[arg(long, default_value_t = 100)]
    pub dev_n: usize,
    #[arg(long, default_value_t = 100)]
    pub test_n: usize,
    /// Longest training side kept, in subwords.
    #[arg(long, default_value_t = 80)]
    pub max_len: usize,
    /// Vocabulary size cap per side, reserved symbols included.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Index file [default: <data>/index.bin].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    /// Index file [default: <data>/index.bin].
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// BM25 candidate pool size.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Pairs kept after fuzzy re-ranking; 0 disables retrieval.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Greedy coverage selection instead of top-K.
    #[arg(long)]
    pub adaptive: bool,
}

impl RetrievalArgs {
    fn selection(&self) -> Selection {
        if self.adaptive {
            Selection::Adaptive
        } else {
            Selection::TopK(self.k)
        }
    }
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Query split (train, dev or test).
    #[arg(long, conflicts_with = "input")]
    pub split: Option<String>,
    /// Query text file, one raw sentence per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Drop exact source copies, and for the train split the pair itself.
    #[arg(long)]
    pub exclude_self: bool,
    /// Output JSON-lines file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Output directory for the checkpoint, log and augmentation caches.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k_train: Option<usize>,
    #[arg(long)]
    pub pool_n: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// deep or shallow.
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient norm limit; 0 disables clipping.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Train without retrieved pairs.
    #[arg(long)]
    pub baseline: bool,
    /// Training augmentation cache [default: <out>/aug.train.jsonl].
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw source sentences, one per line.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Output file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step JSON-lines dump of slot weights, gate and copied slot.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Baseline checkpoint for the comparison columns [default: the model without memory].
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Comma-separated K values to sweep, e.g. 0,1,2,4,8,16.
    #[arg(long, value_delimiter = ',')]
    pub k_sweep: Vec<usize>,
    /// Also decode with greedy coverage selection in the sweep.
    #[arg(long = "sweep-adaptive")]
    pub sweep_adaptive: bool,
    #[arg(long, default_value_t = 0.1)]
    pub bin_width: f64,
    /// Output directory for report.json and the TSV tables.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report.json written by `evaluate`.
    #[arg(long)]
    pub eval: PathBuf,
    /// Output directory [default: the report's directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::BuildIndex(a) => cmd_build_index(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    config::require(&a.src)?;
    config::require(&a.tgt)?;
    let out = DataDir::new(config::data_dir(a.out.as_deref())?);
    let opts = PreprocessOptions {
        bpe_merges: a.bpe_merges,
        dev_n: a.dev_n,
        test_n: a.test_n,
        max_len: a.max_len,
        vocab_size: a.vocab_size,
        seed: a.seed,
    };
    let p = preprocess::run(&a.src, &a.tgt, &out, &opts)?;
    eprintln!(
        "train {} dev {} test {} | vocab src {} tgt {} | {} merges",
        p.train.len(),
        p.dev.len(),
        p.test.len(),
        p.src_vocab.len(),
        p.tgt_vocab.len(),
        p.bpe.len()
    );
    Ok(())
}

fn cmd_build_index(a: BuildIndexArgs) -> Result<()> {
    let data = a.data.dir()?;
    let train = data.corpus("train")?;
    let index = InvertedIndex::build(train.sources())?;
    let path = a.out.unwrap_or_else(|| data.index());
    index_file::save(&path, &index, &text::vocab_hash(&train.src_vocab, &train.tgt_vocab))?;
    eprintln!("indexed {} documents into {}", index.doc_count(), path.display());
    Ok(())
}

/// Training corpus and its checked index.
fn load_memory(data: &DataDir, index: Option<&Path>) -> Result<(ParallelCorpus, InvertedIndex)> {
    let train = data.corpus("train")?;
    let path = index.map_or_else(|| data.index(), Path::to_path_buf);
    let hash = text::vocab_hash(&train.src_vocab, &train.tgt_vocab);
    let index = index_file::load(&path, &hash, train.len())?;
    Ok((train, index))
}

/// Raw lines segmented with the stored BPE model and encoded.
fn encode_input(data: &DataDir, path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    let bpe = text::read_bpe(&data.bpe())?;
    Ok(text::read_lines(path)?
        .iter()
        .map(|l| vocab.encode(&bpe.segment_line(l)).ids)
        .collect())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn io_err(path: Option<&Path>) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.unwrap_or(Path::new("<stdout>")), e)
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let data = a.data.dir()?;
    if let Some(p) = &a.input {
        config::require(p)?;
    }
    let (train, index) = load_memory(&data, a.retrieval.index.as_deref())?;
    let (queries, self_ids): (Vec<Vec<TokenId>>, bool) = match (&a.split, &a.input) {
        (Some(s), None) => {
            let c = if s == "train" { train.clone() } else { data.corpus(s)? };
            (c.sources().map(<[TokenId]>::to_vec).collect(), s == "train")
        }
        (None, Some(p)) => (encode_input(&data, p, &train.src_vocab)?, false),
        _ => return Err(Error::Usage("give exactly one of --split or --input".into())),
    };
    let retriever = Retriever::new(&index, &train, a.retrieval.n);
    let selection = a.retrieval.selection();
    let sets: Vec<RetrievedSet> = with_pool(a.jobs, || {
        use rayon::prelude::*;
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let self_id = (a.exclude_self && self_ids).then_some(i);
                retriever.retrieve(q, selection, self_id, a.exclude_self)
            })
            .collect()
    })?;
    let records = sets
        .iter()
        .enumerate()
        .map(|(i, s)| RetrievalRecord::new(i, s, &train.src_vocab, &train.tgt_vocab))
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(output(a.out.as_deref())?, &records).map_err(io_err(a.out.as_deref()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        k_train: a.k_train,
        candidate_pool_n: a.pool_n,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        patience: a.patience,
        hidden_size: a.hidden,
        embed_dim: a.embed_dim,
        fusion_mode: a.fusion,
        seed: a.seed,
        clip_norm: a.clip,
        baseline: a.baseline.then_some(true),
        jobs: a.jobs,
        data_dir: a.data.data.clone(),
        out_dir: a.out.clone(),
        cache: a.cache.clone(),
    };
    let run = file.merge(flags);
    let cfg = run.train_config();
    cfg.validate()?;
    let data = DataDir::new(config::data_dir(run.data_dir.as_deref())?);
    let out = run
        .out_dir
        .clone()
        .ok_or_else(|| Error::Usage("no output directory (--out or out_dir)".into()))?;
    config::require(&data.root)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let dev = data.corpus("dev")?;
    let (train_ex, dev_ex, train) = if cfg.baseline {
        let train = data.corpus("train")?;
        (trainer::plain_examples(&train), trainer::plain_examples(&dev), train)
    } else {
        let (train, index) = load_memory(&data, None)?;
        let retriever = Retriever::new(&index, &train, cfg.candidate_pool_n);
        let cache = run.cache.clone().unwrap_or_else(|| out.join("aug.train.jsonl"));
        let (t, d) = with_pool(run.jobs(), || -> Result<_> {
            let t = trainer::augment_cached(&cache, &train, &retriever, cfg.k_train, true)?;
            let d = trainer::augment_cached(&out.join("aug.dev.jsonl"), &dev, &retriever, cfg.k_train, false)?;
            Ok((t, d))
        })??;
        (t, d, train)
    };
    let model_cfg = cfg.model_config(&train);
    let log_path = out.join("train_log.tsv");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let outcome = with_pool(run.jobs(), || {
        trainer::train_loop(&cfg, model_cfg, &train_ex, &dev_ex, Some(&mut log))
    })??;
    let sidecar = Sidecar {
        model: model_cfg,
        train: cfg,
        vocab_hash: text::vocab_hash(&train.src_vocab, &train.tgt_vocab),
    };
    checkpoint::save(&out.join("model.ckpt"), &outcome.model, &sidecar)?;
    eprintln!(
        "best dev NLL {:.4} at epoch {} ({} epochs run)",
        outcome.best_dev_nll,
        outcome.best_epoch,
        outcome.history.len()
    );
    Ok(())
}

/// Loads a checkpoint and checks it against the data directory.
fn load_checked(path: &Path, data: &DataDir) -> Result<(Model, Sidecar)> {
    config::require(path)?;
    let (model, side) = checkpoint::load(path)?;
    let (sv, tv) = data.vocabularies()?;
    if side.vocab_hash != text::vocab_hash(&sv, &tv) {
        return Err(Error::Mismatch(format!("{} was trained with a different vocabulary", path.display())));
    }
    Ok((model, side))
}

#[derive(Serialize)]
struct TraceLine<'a> {
    sentence: usize,
    step: usize,
    token: &'a str,
    zeta: Option<f64>,
    q: &'a [f64],
    copied_from: Option<usize>,
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let data = a.data.dir()?;
    config::require(&a.input)?;
    let (model, side) = load_checked(&a.checkpoint, &data)?;
    let fusion = side.train.fusion_mode;
    let (train, index) = load_memory(&data, a.retrieval.index.as_deref())?;
    let sources = encode_input(&data, &a.input, &train.src_vocab)?;
    let retriever = Retriever::new(&index, &train, a.retrieval.n);
    let selection = a.retrieval.selection();
    let beam = a.beam;
    let outputs = with_pool(a.jobs, || {
        use rayon::prelude::*;
        sources
            .par_iter()
            .map(|src| -> Result<_> {
                if src.is_empty() {
                    return Ok(None);
                }
                let set = retriever.retrieve(src, selection, None, false);
                Ok(Some(beam_search(&model, fusion, src, &set.memory_pairs(), beam, max_len_for(src.len()))?))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut out = output(a.out.as_deref())?;
    let err = io_err(a.out.as_deref());
    for t in &outputs {
        let line = match t {
            Some(t) => train.tgt_vocab.decode(&t.tokens)?,
            None => String::new(),
        };
        writeln!(out, "{line}").map_err(&err)?;
    }
    out.flush().map_err(&err)?;
    if let Some(path) = &a.trace {
        let mut lines = Vec::new();
        for (i, t) in outputs.iter().enumerate() {
            for (s, st) in t.iter().flat_map(|t| t.trace.iter()).enumerate() {
                lines.push(serde_json::to_string(&TraceLine {
                    sentence: i,
                    step: s,
                    token: train.tgt_vocab.token(st.token)?,
                    zeta: st.zeta,
                    q: &st.q,
                    copied_from: st.copied_from,
                }).expect("trace serializes"));
            }
        }
        text::write_lines(path, &lines)?;
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let data = a.data.dir()?;
    let (model, side) = load_checked(&a.checkpoint, &data)?;
    let baseline = match &a.baseline {
        Some(p) => Some(load_checked(p, &data)?.0),
        None => None,
    };
    let corpus = data.corpus(&a.split)?;
    let (train, index) = load_memory(&data, a.retrieval.index.as_deref())?;
    let retriever = Retriever::new(&index, &train, a.retrieval.n);
    let opts = EvalOptions {
        selection: a.retrieval.selection(),
        beam: a.beam,
        k_sweep: a.k_sweep.clone(),
        adaptive: a.sweep_adaptive,
        bin_width: a.bin_width,
    };
    let config = serde_json::json!({
        "checkpoint": a.checkpoint,
        "baseline": a.baseline,
        "split": a.split,
        "k": a.retrieval.k,
        "adaptive": a.retrieval.adaptive,
        "n": a.retrieval.n,
        "beam": a.beam,
        "k_sweep": a.k_sweep,
        "sweep_adaptive": a.sweep_adaptive,
        "bin_width": a.bin_width,
        "train": side.train,
    });
    let report = with_pool(a.jobs, || {
        evaluate::evaluate(&model, side.train.fusion_mode, baseline.as_ref(), &corpus, &retriever, &opts, config)
    })??;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let path = a.out.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    evaluate::write_tsvs(&a.out, &report)?;
    eprintln!("BLEU {:.2} (comparison {:.2})", report.bleu, report.baseline_bleu);
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    config::require(&a.eval)?;
    let text = fs::read_to_string(&a.eval).map_err(|e| Error::io(&a.eval, e))?;
    let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::format(&a.eval, e.to_string()))?;
    let dir = a
        .out
        .unwrap_or_else(|| a.eval.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    evaluate::write_tsvs(&dir, &report)
}
