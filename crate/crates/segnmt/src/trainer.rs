//! Dataset augmentation, the epoch loop and early stopping.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use segnmt_core::corpus::ParallelCorpus;
use segnmt_core::nmt::{Model, ModelConfig};
use segnmt_core::seg::FusionMode;
use segnmt_core::train::{apply_gradients, example_gradients, AugmentedExample};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{write_jsonl, Retriever, Selection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Retrieved pairs per training example.
    pub k_train: usize,
    pub candidate_pool_n: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub hidden_size: usize,
    pub embed_dim: usize,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    /// Global gradient-norm limit.
    pub clip_norm: Option<f64>,
    /// Train without retrieved pairs.
    pub baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_train: 2,
            candidate_pool_n: 100,
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 20,
            patience: 5,
            hidden_size: 64,
            embed_dim: 64,
            fusion_mode: FusionMode::Shallow,
            seed: 1,
            clip_norm: Some(5.0),
            baseline: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(m.to_owned()));
        if self.k_train == 0 {
            return bad("k_train must be at least 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.hidden_size == 0 || self.embed_dim == 0 {
            return bad("hidden_size and embed_dim must be positive");
        }
        if self.candidate_pool_n == 0 {
            return bad("candidate_pool_n must be at least 1");
        }
        Ok(())
    }

    pub fn model_config(&self, corpus: &ParallelCorpus) -> ModelConfig {
        ModelConfig {
            src_vocab: corpus.src_vocab.len(),
            tgt_vocab: corpus.tgt_vocab.len(),
            embed_dim: self.embed_dim,
            hidden: self.hidden_size,
        }
    }
}

/// Runs `f` on a pool of `jobs` worker threads.
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Pairs every example of `corpus` with its retrieved pairs.
///
/// For the training corpus (`training = true`) the example's own pair and
/// exact source copies are excluded. Runs on the current rayon pool.
pub fn augment(corpus: &ParallelCorpus, retriever: &Retriever, k: usize, training: bool) -> Vec<AugmentedExample> {
    (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let src = corpus.source(i);
            let retrieved = retriever.retrieve(src, Selection::TopK(k), training.then_some(i), training);
            AugmentedExample {
                doc_id: i,
                source: src.to_vec(),
                target: corpus.target(i).to_vec(),
                retrieved,
            }
        })
        .collect()
}

pub fn plain_examples(corpus: &ParallelCorpus) -> Vec<AugmentedExample> {
    (0..corpus.len())
        .map(|i| AugmentedExample::plain(i, corpus.source(i).to_vec(), corpus.target(i).to_vec()))
        .collect()
}

pub fn write_cache(path: &Path, examples: &[AugmentedExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(BufWriter::new(file), examples).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<AugmentedExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Loads `cache` when it matches `corpus`, otherwise augments and writes it.
pub fn augment_cached(
    cache: &Path,
    corpus: &ParallelCorpus,
    retriever: &Retriever,
    k: usize,
    training: bool,
) -> Result<Vec<AugmentedExample>> {
    if cache.exists() {
        let examples = read_cache(cache)?;
        let fits = examples.len() == corpus.len()
            && examples.iter().enumerate().all(|(i, e)| {
                e.doc_id == i && e.source == corpus.source(i) && e.target == corpus.target(i) && e.retrieved.len() <= k
            });
        if fits {
            return Ok(examples);
        }
    }
    let examples = augment(corpus, retriever, k, training);
    write_cache(cache, &examples)?;
    Ok(examples)
}

/// Mean per-sentence NLL, computed on the current rayon pool.
pub fn dev_nll(model: &Model, fusion: FusionMode, examples: &[AugmentedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Usage("empty development set".into()));
    }
    let losses = examples
        .par_iter()
        .map(|ex| example_loss(model, fusion, ex))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / examples.len() as f64)
}

fn example_loss(model: &Model, fusion: FusionMode, ex: &AugmentedExample) -> Result<f64> {
    let mut t = segnmt_core::tape::Tape::new(&model.store);
    let pairs = ex.retrieved.memory_pairs();
    let loss = segnmt_core::train::example_nll(&mut t, model, fusion, &ex.source, &ex.target, &pairs)?;
    let v = t.scalar(loss);
    if !v.is_finite() {
        return Err(segnmt_core::Error::NonFiniteLoss { index: ex.doc_id }.into());
    }
    Ok(v)
}

/// One update on `batch`, gradients computed on the current rayon pool and
/// summed in batch order. A non-finite loss names the example's `doc_id`.
pub fn parallel_step(model: &mut Model, fusion: FusionMode, batch: &[AugmentedExample], lr: f64, clip: Option<f64>) -> Result<f64> {
    let results = batch
        .par_iter()
        .map(|ex| example_gradients(model, fusion, ex, ex.doc_id))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mean = results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
    let grads: Vec<_> = results.into_iter().map(|r| r.1).collect();
    apply_gradients(model, &grads, lr, clip)?;
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Updates taken so far.
    pub step: usize,
    pub train_nll: f64,
    pub dev_nll: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest development NLL.
    pub model: Model,
    pub best_epoch: usize,
    pub best_dev_nll: f64,
    pub history: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch\tstep\ttrain_nll\tdev_nll\twall_time";

/// Trains from a fresh model until `max_epochs` or `patience` epochs without
/// a development improvement. Examples are reshuffled every epoch from a
/// generator seeded by `config.seed`. One TSV row per epoch goes to `log`.
pub fn train_loop(
    config: &TrainConfig,
    model_config: ModelConfig,
    train: &[AugmentedExample],
    dev: &[AugmentedExample],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let mut model = Model::new(model_config, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let fusion = config.fusion_mode;
    let start = Instant::now();
    let mut best = (model.clone(), 0, dev_nll(&model, fusion, dev)?);
    let mut history = Vec::new();
    let mut step = 0;
    let mut stale = 0;
    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(Path::new("<log>"), e))?;
    }
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<AugmentedExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let mean = parallel_step(&mut model, fusion, &batch, config.learning_rate, config.clip_norm)?;
            total += mean * batch.len() as f64;
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            step,
            train_nll: total / train.len() as f64,
            dev_nll: dev_nll(&model, fusion, dev)?,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}\t{}\t{:.6}\t{:.6}\t{:.3}", rec.epoch, rec.step, rec.train_nll, rec.dev_nll, rec.wall_time)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(Path::new("<log>"), e))?;
        }
        if rec.dev_nll < best.2 {
            best = (model.clone(), epoch, rec.dev_nll);
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(rec);
        if stale >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        best_epoch: best.1,
        best_dev_nll: best.2,
        history,
    })
}
