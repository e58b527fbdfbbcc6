//! Evaluation against the exact synthetic oracle: overall and per-class
//! perplexities, the rare/frequent imbalance ratio, and the statistics of
//! `log q - log p` at observed words.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, WordClassPartition, WorldModel, WORDS_PER_SENTENCE};
use crate::error::{Error, Result};
use crate::nncore::{batch_target_log_probs, forward, ModelParams};
use crate::objectives::PROB_FLOOR;

/// Anything that can score the ten target words of a sentence.
pub trait ProbSource {
    fn target_log_probs(&self, sentences: &[Sentence]) -> Result<Vec<[f64; WORDS_PER_SENTENCE]>>;
}

/// The exact distribution of the trigram world.
pub struct OracleSource<'a>(pub &'a WorldModel);

impl ProbSource for OracleSource<'_> {
    fn target_log_probs(&self, sentences: &[Sentence]) -> Result<Vec<[f64; WORDS_PER_SENTENCE]>> {
        Ok(sentences.iter().map(|s| self.0.sentence_log_probs(s)).collect())
    }
}

/// A trained model; evaluation runs in fixed-size chunks.
pub struct ModelSource<'a> {
    pub params: &'a ModelParams,
    pub chunk: usize,
}

impl<'a> ModelSource<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        ModelSource { params, chunk: 256 }
    }
}

impl ProbSource for ModelSource<'_> {
    fn target_log_probs(&self, sentences: &[Sentence]) -> Result<Vec<[f64; WORDS_PER_SENTENCE]>> {
        batch_target_log_probs(self.params, sentences, self.chunk)
    }
}

/// Uniform baseline over V words; perplexity is exactly V.
pub struct UniformSource(pub usize);

impl ProbSource for UniformSource {
    fn target_log_probs(&self, sentences: &[Sentence]) -> Result<Vec<[f64; WORDS_PER_SENTENCE]>> {
        let lp = (1.0 / self.0 as f64).max(PROB_FLOOR).ln();
        Ok(sentences.iter().map(|_| [lp; WORDS_PER_SENTENCE]).collect())
    }
}

/// Which target positions count toward a perplexity.
#[derive(Clone, Copy)]
pub enum WordFilter<'a> {
    All,
    Frequent(&'a WordClassPartition),
    Rare(&'a WordClassPartition),
    ExceptWord(u32),
}

impl WordFilter<'_> {
    fn keep(&self, word: u32) -> bool {
        match self {
            WordFilter::All => true,
            WordFilter::Frequent(p) => p.is_frequent(word),
            WordFilter::Rare(p) => p.is_rare(word),
            WordFilter::ExceptWord(w) => word != *w,
        }
    }
}

/// `exp` of the mean negative log-probability over the positions whose
/// target word passes the filter. All ten word positions of every sentence
/// are targets; the start token never is. The reduction runs in corpus order.
pub fn perplexity(
    source: &dyn ProbSource,
    sentences: &[Sentence],
    filter: WordFilter<'_>,
) -> Result<f64> {
    let lps = source.target_log_probs(sentences)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (sentence, lp) in sentences.iter().zip(lps.iter()) {
        for t in 0..WORDS_PER_SENTENCE {
            if filter.keep(sentence[t + 1]) {
                total -= lp[t];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Invalid("perplexity filter matched no positions".into()));
    }
    Ok((total / count as f64).exp())
}

/// Perplexity over positions whose target differs from `excluded`.
pub fn except_word_perplexity(
    source: &dyn ProbSource,
    sentences: &[Sentence],
    excluded: u32,
) -> Result<f64> {
    perplexity(source, sentences, WordFilter::ExceptWord(excluded))
}

/// One row of the fine-tuning results table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub test_ppl: f64,
    pub freq_ppl: f64,
    pub rare_ppl: f64,
    /// rare_ppl / freq_ppl, exactly.
    pub ratio: f64,
    /// Mean of `log q(w*|c) - log p(w*|c)` over all test positions.
    pub mean_log_diff: f64,
    /// Population (1/N) standard deviation of the same quantity.
    pub std_log_diff: f64,
    pub tokens_total: usize,
    pub tokens_freq: usize,
    pub tokens_rare: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "test_ppl,freq_ppl,rare_ppl,ratio,mean_log_diff,std_log_diff,tokens_total,tokens_freq,tokens_rare";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.test_ppl,
            self.freq_ppl,
            self.rare_ppl,
            self.ratio,
            self.mean_log_diff,
            self.std_log_diff,
            self.tokens_total,
            self.tokens_freq,
            self.tokens_rare
        )
    }
}

/// Full Table-1-style report of a probability source against the exact
/// oracle. Passing the oracle itself as the source yields `log q - log p`
/// identically zero.
pub fn imbalance_report(
    source: &dyn ProbSource,
    world: &WorldModel,
    sentences: &[Sentence],
    partition: &WordClassPartition,
) -> Result<EvalReport> {
    let q_lps = source.target_log_probs(sentences)?;
    let p_lps = OracleSource(world).target_log_probs(sentences)?;
    let mut nll_all = 0.0f64;
    let mut nll_freq = 0.0f64;
    let mut nll_rare = 0.0f64;
    let mut n_freq = 0usize;
    let mut n_rare = 0usize;
    let mut diff_sum = 0.0f64;
    let mut diff_sq_sum = 0.0f64;
    for ((sentence, q), p) in sentences.iter().zip(q_lps.iter()).zip(p_lps.iter()) {
        for t in 0..WORDS_PER_SENTENCE {
            let word = sentence[t + 1];
            nll_all -= q[t];
            if partition.is_frequent(word) {
                nll_freq -= q[t];
                n_freq += 1;
            } else {
                nll_rare -= q[t];
                n_rare += 1;
            }
            let diff = q[t] - p[t];
            diff_sum += diff;
            diff_sq_sum += diff * diff;
        }
    }
    let n_total = n_freq + n_rare;
    if n_freq == 0 || n_rare == 0 {
        return Err(Error::Invalid("a word class has no test positions".into()));
    }
    let freq_ppl = (nll_freq / n_freq as f64).exp();
    let rare_ppl = (nll_rare / n_rare as f64).exp();
    let mean = diff_sum / n_total as f64;
    let var = (diff_sq_sum / n_total as f64 - mean * mean).max(0.0);
    Ok(EvalReport {
        test_ppl: (nll_all / n_total as f64).exp(),
        freq_ppl,
        rare_ppl,
        ratio: rare_ppl / freq_ppl,
        mean_log_diff: mean,
        std_log_diff: var.sqrt(),
        tokens_total: n_total,
        tokens_freq: n_freq,
        tokens_rare: n_rare,
    })
}

/// Validation-set means of the two discriminator loss terms, separately.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiscReport {
    /// Mean of `-sum_w q0(w|c) log r(w|c)`.
    pub dq_mean: f64,
    /// Mean of `-log(1 - r(w*|c))`.
    pub dp_mean: f64,
    pub total_mean: f64,
}

pub fn disc_report(
    disc: &ModelParams,
    q0: &ModelParams,
    sentences: &[Sentence],
    chunk: usize,
) -> Result<DiscReport> {
    let mut dq_total = 0.0f64;
    let mut dp_total = 0.0f64;
    let mut positions = 0usize;
    for group in sentences.chunks(chunk.max(1)) {
        let q0_fwd = forward(q0, group)?;
        let q0_rows: Vec<_> = (0..WORDS_PER_SENTENCE)
            .map(|t| q0_fwd.log_probs(t).mapv(f64::exp))
            .collect();
        let mut fwd = forward(disc, group)?;
        let nodes = fwd.attach_disc(group, q0_rows)?;
        for &node in &nodes {
            let (dq, dp) = fwd.tape.disc_terms(node);
            dq_total += dq;
            dp_total += dp;
        }
        positions += group.len() * WORDS_PER_SENTENCE;
    }
    let n = positions as f64;
    Ok(DiscReport {
        dq_mean: dq_total / n,
        dp_mean: dp_total / n,
        total_mean: (dq_total + dp_total) / n,
    })
}

/// Mean cross-entropy (mean NLL) of a source over a split; `exp` of this is
/// the perplexity by construction.
pub fn mean_ce(source: &dyn ProbSource, sentences: &[Sentence]) -> Result<f64> {
    let lps = source.target_log_probs(sentences)?;
    let mut total = 0.0f64;
    for lp in &lps {
        for v in lp {
            total -= v;
        }
    }
    Ok(total / (lps.len() * WORDS_PER_SENTENCE) as f64)
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), report)?;
    Ok(())
}

pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{}", EvalReport::CSV_HEADER).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{}", report.csv_row()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Model probability of `word` after each of the given context prefixes;
/// used for watched-pair traces and the perturbation narrative.
pub fn watched_probabilities(
    params: &ModelParams,
    contexts: &[(Vec<u32>, u32)],
) -> Result<Vec<f64>> {
    contexts
        .iter()
        .map(|(ctx, word)| crate::nncore::prefix_word_prob(params, ctx, *word))
        .collect()
}
