//! The shared SGD training loop: epoch shuffling, batch assembly, plateau
//! learning-rate decay, best-checkpoint tracking, and per-iteration
//! probability traces for watched (context, word) pairs.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Split, TokenCorpus, WORDS_PER_SENTENCE};
use crate::error::{Error, Result};
use crate::eval::{mean_ce, ModelSource};
use crate::nncore::{forward, sgd_step, step_targets, Forward, ModelParams, NodeId, SgdState};

/// A probability to record after every SGD iteration: the model probability
/// of `word` after the first `position` tokens of a fixed corpus sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchedPair {
    pub split: Split,
    pub sentence: usize,
    /// 1..=10; the context is the sentence prefix of this many tokens.
    pub position: usize,
    pub word: u32,
}

impl WatchedPair {
    /// Stable identifier used in trace files: sentence index * 10 + position - 1.
    pub fn context_id(&self) -> usize {
        self.sentence * WORDS_PER_SENTENCE + (self.position - 1)
    }

    pub fn context<'c>(&self, corpus: &'c TokenCorpus) -> &'c [u32] {
        &corpus.split(self.split)[self.sentence][..self.position]
    }
}

/// Training schedule for one phase.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub plateau_decay: f64,
    /// Relative validation improvement below which an epoch counts as a
    /// plateau. Zero means any strict improvement keeps the learning rate.
    pub plateau_min_rel_improve: f64,
    pub max_epochs: usize,
    pub stop_lr: f64,
    /// Keep the learning rate fixed for the whole run (the oscillation
    /// study); plateau decay and the stop-lr rule are disabled.
    pub fixed_lr: bool,
}

impl TrainConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn fixed(mut self) -> Self {
        self.fixed_lr = true;
        self
    }
}

/// What the loop minimizes. The frozen companions are borrowed immutably for
/// the whole run, so they cannot change.
pub enum Objective<'a> {
    /// Plain next-word cross-entropy.
    CrossEntropy,
    /// Discriminator loss against a frozen language model.
    Disc { q0: &'a ModelParams },
    /// Fine-tuning loss; the discriminator may be replaced by the constant
    /// r = 1/2 for the no-discriminator ablation.
    Finetune { q0: &'a ModelParams, disc: Option<&'a ModelParams> },
}

impl Objective<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::CrossEntropy => "ce",
            Objective::Disc { .. } => "disc",
            Objective::Finetune { disc: Some(_), .. } => "finetune",
            Objective::Finetune { disc: None, .. } => "finetune-nodisc",
        }
    }
}

/// `(q0(w*|c), r(w*|c))` for the ten positions of one sentence.
type PositionConstants = [(f64, f64); WORDS_PER_SENTENCE];

/// The fine-tuning constants are frozen, so they are computed once per split
/// instead of re-running the q0 and discriminator forwards on every batch.
fn finetune_constants(
    q0: &ModelParams,
    disc: Option<&ModelParams>,
    sentences: &[Sentence],
) -> Result<Vec<PositionConstants>> {
    let chunks: Vec<Vec<PositionConstants>> = sentences
        .par_chunks(VAL_CHUNK)
        .map(|group| -> Result<Vec<PositionConstants>> {
            let q0_fwd = forward(q0, group)?;
            let disc_fwd = disc.map(|d| forward(d, group)).transpose()?;
            let mut rows = vec![[(0.0, 0.5); WORDS_PER_SENTENCE]; group.len()];
            for t in 0..WORDS_PER_SENTENCE {
                let q0_probs = q0_fwd.log_probs(t);
                let r_probs = disc_fwd.as_ref().map(|f| f.disc_probs(t, true));
                for (b, sentence) in group.iter().enumerate() {
                    let w = sentence[t + 1] as usize - 1;
                    let q0_t = q0_probs[[b, w]].exp();
                    let r_t = r_probs.as_ref().map_or(0.5, |r| r[[b, w]]);
                    rows[b][t] = (q0_t, r_t);
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// A phase objective with its frozen constants materialized.
enum Prepared<'a> {
    Ce,
    Disc { q0: &'a ModelParams },
    Finetune { train: Vec<PositionConstants>, valid: Vec<PositionConstants> },
}

impl<'a> Prepared<'a> {
    fn build(objective: &'a Objective<'a>, corpus: &TokenCorpus) -> Result<Self> {
        Ok(match objective {
            Objective::CrossEntropy => Prepared::Ce,
            Objective::Disc { q0 } => Prepared::Disc { q0 },
            Objective::Finetune { q0, disc } => Prepared::Finetune {
                train: finetune_constants(q0, *disc, &corpus.train)?,
                valid: finetune_constants(q0, *disc, &corpus.valid)?,
            },
        })
    }
}

/// Everything a worker needs for one sub-batch.
enum BatchKind<'a> {
    Ce,
    Disc { q0: &'a ModelParams },
    Finetune { consts: &'a [PositionConstants] },
}

/// Attach the loss nodes for one sub-batch; returns the nodes and the
/// phase-specific term sums.
fn attach_batch(
    kind: &BatchKind<'_>,
    fwd: &mut Forward,
    batch: &[Sentence],
) -> Result<(Vec<NodeId>, (f64, f64))> {
    let steps = WORDS_PER_SENTENCE;
    match kind {
        BatchKind::Ce => Ok((fwd.attach_nll(batch)?, (0.0, 0.0))),
        BatchKind::Disc { q0 } => {
            let q0_fwd = forward(q0, batch)?;
            let q0_rows: Vec<Array2<f64>> =
                (0..steps).map(|t| q0_fwd.log_probs(t).mapv(f64::exp)).collect();
            let nodes = fwd.attach_disc(batch, q0_rows)?;
            let mut dq = 0.0;
            let mut dp = 0.0;
            for &n in &nodes {
                let (a, b) = fwd.tape.disc_terms(n);
                dq += a;
                dp += b;
            }
            Ok((nodes, (dq, dp)))
        }
        BatchKind::Finetune { consts } => {
            debug_assert_eq!(consts.len(), batch.len());
            let q0_t: Vec<Vec<f64>> = (0..steps)
                .map(|t| consts.iter().map(|c| c[t].0).collect())
                .collect();
            let r_t: Vec<Vec<f64>> = (0..steps)
                .map(|t| consts.iter().map(|c| c[t].1).collect())
                .collect();
            let nodes = fwd.attach_finetune(batch, &q0_t, &r_t)?;
            let mut nll = 0.0;
            let mut tlt = 0.0;
            for &n in &nodes {
                let (a, b) = fwd.tape.finetune_terms(n);
                nll += a;
                tlt += b;
            }
            Ok((nodes, (nll, tlt)))
        }
    }
}

/// Mean loss and gradients over one batch. The batch is split across the
/// rayon workers and the partial gradients are combined in fixed chunk
/// order, so results are deterministic for a fixed thread configuration.
fn batch_loss_and_grads(
    prepared: &Prepared<'_>,
    params: &ModelParams,
    batch: &[Sentence],
    batch_consts: &[PositionConstants],
    objective_name: &str,
) -> Result<(f64, ModelParams, (f64, f64))> {
    let positions = (batch.len() * WORDS_PER_SENTENCE) as f64;
    let seed = 1.0 / positions;
    let workers = rayon::current_num_threads().max(1);
    let chunk = batch.len().div_ceil(workers);
    let parts: Vec<(f64, ModelParams, (f64, f64))> = batch
        .par_chunks(chunk)
        .enumerate()
        .map(|(part_idx, sub)| -> Result<(f64, ModelParams, (f64, f64))> {
            let kind = match prepared {
                Prepared::Ce => BatchKind::Ce,
                Prepared::Disc { q0 } => BatchKind::Disc { q0 },
                Prepared::Finetune { .. } => {
                    let start = part_idx * chunk;
                    BatchKind::Finetune { consts: &batch_consts[start..start + sub.len()] }
                }
            };
            let mut fwd = forward(params, sub)?;
            let (nodes, terms) = attach_batch(&kind, &mut fwd, sub)?;
            let loss_sum: f64 = nodes.iter().map(|&n| fwd.tape.sum(n)).sum();
            let grads = fwd.backward(params, &nodes, seed);
            Ok((loss_sum, grads, terms))
        })
        .collect::<Result<_>>()?;
    let mut parts = parts.into_iter();
    let (mut loss_sum, mut grads, mut terms) = parts.next().expect("at least one batch chunk");
    for (l, g, t) in parts {
        loss_sum += l;
        grads.add_scaled(&g, 1.0);
        terms.0 += t.0;
        terms.1 += t.1;
    }
    let loss = loss_sum / positions;
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: format!("{objective_name} batch loss") });
    }
    Ok((loss, grads, (terms.0 / positions, terms.1 / positions)))
}

/// Evaluation chunk for validation passes and constant precomputation.
const VAL_CHUNK: usize = 256;

fn validation_loss(
    prepared: &Prepared<'_>,
    params: &ModelParams,
    sentences: &[Sentence],
) -> Result<f64> {
    match prepared {
        Prepared::Ce => mean_ce(&ModelSource::new(params), sentences),
        _ => {
            let sums: Vec<f64> = sentences
                .par_chunks(VAL_CHUNK)
                .enumerate()
                .map(|(chunk_idx, group)| -> Result<f64> {
                    let kind = match prepared {
                        Prepared::Ce => BatchKind::Ce,
                        Prepared::Disc { q0 } => BatchKind::Disc { q0 },
                        Prepared::Finetune { valid, .. } => {
                            let start = chunk_idx * VAL_CHUNK;
                            BatchKind::Finetune { consts: &valid[start..start + group.len()] }
                        }
                    };
                    let mut fwd = forward(params, group)?;
                    let (nodes, _terms) = attach_batch(&kind, &mut fwd, group)?;
                    Ok(nodes.iter().map(|&n| fwd.tape.sum(n)).sum())
                })
                .collect::<Result<_>>()?;
            let total: f64 = sums.iter().sum();
            Ok(total / (sentences.len() * WORDS_PER_SENTENCE) as f64)
        }
    }
}

/// Mean loss of the objective over a sentence set, without gradients.
pub fn evaluate_objective(
    objective: &Objective<'_>,
    params: &ModelParams,
    sentences: &[Sentence],
) -> Result<f64> {
    let prepared = match objective {
        Objective::CrossEntropy => Prepared::Ce,
        Objective::Disc { q0 } => Prepared::Disc { q0 },
        Objective::Finetune { q0, disc } => {
            let consts = finetune_constants(q0, *disc, sentences)?;
            return validation_with_consts(params, sentences, consts);
        }
    };
    validation_loss(&prepared, params, sentences)
}

fn validation_with_consts(
    params: &ModelParams,
    sentences: &[Sentence],
    consts: Vec<PositionConstants>,
) -> Result<f64> {
    let prepared = Prepared::Finetune { train: Vec::new(), valid: consts };
    validation_loss(&prepared, params, sentences)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for the pre-training
    /// validation row.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// `exp(val_loss)`; equals validation perplexity for cross-entropy
    /// phases.
    pub val_exp: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub context_id: usize,
    pub word_id: u32,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub objective: String,
    pub epochs: Vec<EpochRow>,
    pub traces: Vec<TraceRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub completed_epochs: usize,
    pub iterations: usize,
}

impl RunRecord {
    pub fn write_run_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "epoch,train_loss,val_loss,val_ppl,lr").map_err(|e| Error::io(path, e))?;
        for row in &self.epochs {
            let train = row.train_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(f, "{},{},{},{},{}", row.epoch, train, row.val_loss, row.val_exp, row.lr)
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn write_trace_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "iteration,context_id,word_id,probability").map_err(|e| Error::io(path, e))?;
        for row in &self.traces {
            writeln!(
                f,
                "{},{},{},{}",
                row.iteration, row.context_id, row.word_id, row.probability
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn epoch_shuffle_seed(run_seed: u64, epoch: usize) -> u64 {
    run_seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15)
}

/// Run one training phase. Returns the parameters of the best-validation
/// epoch and the full run record. Deterministic given the seed and thread
/// configuration.
pub fn train_phase(
    init: ModelParams,
    objective: &Objective<'_>,
    corpus: &TokenCorpus,
    config: &TrainConfig,
    run_seed: u64,
    watched: &[WatchedPair],
) -> Result<(ModelParams, RunRecord)> {
    let mut params = init;
    let prepared = Prepared::build(objective, corpus)?;
    let mut sgd = SgdState::new(
        config.lr,
        config.clip,
        config.plateau_decay,
        config.plateau_min_rel_improve,
        config.stop_lr,
    );
    let mut record = RunRecord {
        objective: objective.name().to_string(),
        epochs: Vec::new(),
        traces: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        completed_epochs: 0,
        iterations: 0,
    };

    let trace = |params: &ModelParams, iteration: usize, out: &mut Vec<TraceRow>| -> Result<()> {
        for pair in watched {
            let prob =
                crate::nncore::prefix_word_prob(params, pair.context(corpus), pair.word)?;
            out.push(TraceRow {
                iteration,
                context_id: pair.context_id(),
                word_id: pair.word,
                probability: prob,
            });
        }
        Ok(())
    };

    // pre-training validation row: epoch 0, also the initial best
    let initial_val = validation_loss(&prepared, &params, &corpus.valid)?;
    record.epochs.push(EpochRow {
        epoch: 0,
        train_loss: None,
        val_loss: initial_val,
        val_exp: initial_val.exp(),
        lr: sgd.lr,
    });
    let mut best_params = params.clone();
    let mut best_val = initial_val;
    record.best_val_loss = initial_val;
    if !config.fixed_lr {
        sgd.observe_validation(initial_val);
    }
    trace(&params, 0, &mut record.traces)?;

    let n_train = corpus.train.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut batch_buf: Vec<Sentence> = Vec::with_capacity(config.batch_size);
    let mut const_buf: Vec<PositionConstants> = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_shuffle_seed(run_seed, epoch));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_positions = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch_buf.clear();
            batch_buf.extend(chunk.iter().map(|&i| corpus.train[i]));
            const_buf.clear();
            if let Prepared::Finetune { train, .. } = &prepared {
                const_buf.extend(chunk.iter().map(|&i| train[i]));
            }
            let (loss, grads, _terms) =
                batch_loss_and_grads(&prepared, &params, &batch_buf, &const_buf, objective.name())?;
            sgd_step(&mut params, &grads, &sgd)?;
            record.iterations += 1;
            epoch_loss += loss * (batch_buf.len() * WORDS_PER_SENTENCE) as f64;
            epoch_positions += batch_buf.len() * WORDS_PER_SENTENCE;
            trace(&params, record.iterations, &mut record.traces)?;
        }

        let val_loss = validation_loss(&prepared, &params, &corpus.valid)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { context: format!("epoch {epoch} validation") });
        }
        record.epochs.push(EpochRow {
            epoch,
            train_loss: Some(epoch_loss / epoch_positions as f64),
            val_loss,
            val_exp: val_loss.exp(),
            lr: sgd.lr,
        });
        record.completed_epochs = epoch;
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            record.best_epoch = epoch;
            record.best_val_loss = val_loss;
        }
        if !config.fixed_lr {
            let _ = sgd.observe_validation(val_loss);
            if sgd.should_stop() {
                break;
            }
        }
    }
    Ok((best_params, record))
}
