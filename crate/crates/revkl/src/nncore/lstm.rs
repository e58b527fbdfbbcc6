//! Sequence forward passes for the 2-layer LSTM over fixed-length sentences.
//!
//! A [`Forward`] holds the recorded tape plus the logits node of every
//! predicted position. The language model reads the logits through a softmax;
//! the discriminator reads the same logits through an elementwise sigmoid —
//! the trunk is identical.

use ndarray::Array2;

use super::params::ModelParams;
use super::tape::{ln_floor, NodeId, Tape};
use crate::corpus::{Sentence, SENTENCE_TOKENS, WORDS_PER_SENTENCE};
use crate::error::Result;

pub struct Forward {
    pub tape: Tape,
    /// Logits node for each predicted position t = 1..=10; entry `t - 1`
    /// predicts token `t` from tokens `0..t`.
    pub step_logits: Vec<NodeId>,
}

/// Run the trunk on a batch of sentences. Hidden and cell states start at
/// zero for every sentence; positions 0..=9 are inputs, 1..=10 are targets.
pub fn forward(params: &ModelParams, sentences: &[Sentence]) -> Result<Forward> {
    let mut tape = Tape::new();
    let layers = params.dims.layers;
    let mut h_prev: Vec<Option<NodeId>> = vec![None; layers];
    let mut c_prev: Vec<Option<NodeId>> = vec![None; layers];
    let mut step_logits = Vec::with_capacity(WORDS_PER_SENTENCE);
    for t in 0..WORDS_PER_SENTENCE {
        let ids: Vec<u32> = sentences.iter().map(|s| s[t]).collect();
        let mut x = tape.embed(params, ids)?;
        for layer in 0..layers {
            let preact = tape.gate_affine(params, x, h_prev[layer], layer);
            let cell = tape.lstm_cell(params, preact, c_prev[layer]);
            h_prev[layer] = Some(cell);
            c_prev[layer] = Some(cell);
            x = cell;
        }
        step_logits.push(tape.output_affine(params, x));
    }
    Ok(Forward { tape, step_logits })
}

/// Targets of step `t` (0-based): token `t + 1` of each sentence.
pub fn step_targets(sentences: &[Sentence], t: usize) -> Vec<u32> {
    sentences.iter().map(|s| s[t + 1]).collect()
}

impl Forward {
    pub fn steps(&self) -> usize {
        self.step_logits.len()
    }

    /// Language-model view: per-position log-probabilities (log-softmax).
    pub fn log_probs(&self, step: usize) -> Array2<f64> {
        self.tape.log_softmax(self.step_logits[step])
    }

    /// Discriminator view: per-position per-word sigmoid probabilities.
    pub fn disc_probs(&self, step: usize, clamp: bool) -> Array2<f64> {
        self.tape.sigmoid_rows(self.step_logits[step], clamp)
    }

    /// Attach per-position NLL loss nodes for every step.
    pub fn attach_nll(&mut self, sentences: &[Sentence]) -> Result<Vec<NodeId>> {
        (0..self.steps())
            .map(|t| self.tape.nll_loss(self.step_logits[t], step_targets(sentences, t)))
            .collect()
    }

    /// Attach discriminator loss nodes; `q0_rows[t]` is the frozen model's
    /// probability rows for step `t`.
    pub fn attach_disc(
        &mut self,
        sentences: &[Sentence],
        q0_rows: Vec<Array2<f64>>,
    ) -> Result<Vec<NodeId>> {
        q0_rows
            .into_iter()
            .enumerate()
            .map(|(t, q0)| self.tape.disc_loss(self.step_logits[t], step_targets(sentences, t), q0))
            .collect()
    }

    /// Attach fine-tuning loss nodes; the constants are the frozen model and
    /// discriminator probabilities at each step's target word.
    pub fn attach_finetune(
        &mut self,
        sentences: &[Sentence],
        q0_targets: &[Vec<f64>],
        r_targets: &[Vec<f64>],
    ) -> Result<Vec<NodeId>> {
        (0..self.steps())
            .map(|t| {
                self.tape.finetune_loss(
                    self.step_logits[t],
                    step_targets(sentences, t),
                    &q0_targets[t],
                    &r_targets[t],
                )
            })
            .collect()
    }

    pub fn attach_target_prob(&mut self, sentences: &[Sentence]) -> Result<Vec<NodeId>> {
        (0..self.steps())
            .map(|t| self.tape.target_prob(self.step_logits[t], step_targets(sentences, t)))
            .collect()
    }

    /// Mean of the given loss nodes over all their rows.
    pub fn mean_loss(&self, nodes: &[NodeId]) -> f64 {
        let total: f64 = nodes.iter().map(|&n| self.tape.sum(n)).sum();
        let rows: usize = nodes.iter().map(|&n| self.tape.value(n).nrows()).sum();
        total / rows as f64
    }

    /// Backward from the given loss nodes, seeding each with `seed`
    /// (use `1 / N` for a mean over N positions).
    pub fn backward(&self, params: &ModelParams, nodes: &[NodeId], seed: f64) -> ModelParams {
        let seeds: Vec<(NodeId, f64)> = nodes.iter().map(|&n| (n, seed)).collect();
        self.tape.backward(params, &seeds)
    }
}

/// Log-probability of every target word of every sentence, floored at 1e-12.
/// Runs in fixed-size chunks evaluated in parallel; chunk boundaries do not
/// depend on the worker count, so results are deterministic. The workhorse
/// behind perplexity evaluation.
pub fn batch_target_log_probs(
    params: &ModelParams,
    sentences: &[Sentence],
    chunk: usize,
) -> Result<Vec<[f64; WORDS_PER_SENTENCE]>> {
    use rayon::prelude::*;
    let floor = ln_floor();
    let chunks: Vec<Vec<[f64; WORDS_PER_SENTENCE]>> = sentences
        .par_chunks(chunk.max(1))
        .map(|group| -> Result<Vec<[f64; WORDS_PER_SENTENCE]>> {
            let fwd = forward(params, group)?;
            let mut rows = vec![[0.0f64; WORDS_PER_SENTENCE]; group.len()];
            for t in 0..WORDS_PER_SENTENCE {
                let lp = fwd.log_probs(t);
                for (b, sentence) in group.iter().enumerate() {
                    let target = sentence[t + 1] as usize - 1;
                    rows[b][t] = lp[[b, target]].max(floor);
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Model probability of one word after a given context prefix (the context
/// includes the start token). Used for the watched-pair traces.
pub fn prefix_word_prob(params: &ModelParams, context: &[u32], word: u32) -> Result<f64> {
    assert!(
        !context.is_empty() && context.len() < SENTENCE_TOKENS,
        "context must be a proper sentence prefix"
    );
    // pad to a full sentence; positions past the prefix do not affect the
    // prediction at the prefix boundary
    let mut sentence: Sentence = [0; SENTENCE_TOKENS];
    sentence[..context.len()].copy_from_slice(context);
    for slot in sentence.iter_mut().skip(context.len()) {
        *slot = 1;
    }
    let fwd = forward(params, &[sentence])?;
    let lp = fwd.log_probs(context.len() - 1);
    Ok(lp[[0, word as usize - 1]].exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::params::{HeadKind, ModelDims};
    use approx::assert_abs_diff_eq;

    fn tiny_batch(v: u32, n: usize) -> Vec<Sentence> {
        // deterministic fake sentences, ids cycle through 1..=v
        (0..n)
            .map(|s| {
                let mut sent = [0u32; SENTENCE_TOKENS];
                for (t, slot) in sent.iter_mut().enumerate().skip(1) {
                    *slot = ((s * 7 + t * 3) as u32 % v) + 1;
                }
                sent
            })
            .collect()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let params = ModelParams::init_lm(ModelDims::new(20, 8), 4);
        let batch = tiny_batch(20, 3);
        let fwd = forward(&params, &batch).unwrap();
        for t in 0..WORDS_PER_SENTENCE {
            let lp = fwd.log_probs(t);
            for row in lp.rows() {
                let sum: f64 = row.iter().map(|v| v.exp()).sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_params_give_uniform_predictions() {
        let dims = ModelDims::new(25, 8);
        let zero = ModelParams::zeros_like(&ModelParams::init_lm(dims, 0));
        let batch = tiny_batch(25, 2);
        let mut fwd = forward(&zero, &batch).unwrap();
        let lp = fwd.log_probs(0);
        for row in lp.rows() {
            for &v in row {
                assert_abs_diff_eq!(v, -(25f64.ln()), epsilon = 1e-12);
            }
        }
        let losses = fwd.attach_nll(&batch).unwrap();
        let mean = fwd.mean_loss(&losses);
        assert_abs_diff_eq!(mean, 25f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn lm_and_disc_share_logits() {
        let dims = ModelDims::new(15, 8);
        let mut params = ModelParams::init_lm(dims, 8);
        params.head = HeadKind::Sigmoid; // head kind is metadata only
        let batch = tiny_batch(15, 2);
        let fwd = forward(&params, &batch).unwrap();
        let lp = fwd.log_probs(3);
        let r = fwd.disc_probs(3, false);
        // both views must be consistent with one shared logits matrix
        let logits = fwd.tape.value(fwd.step_logits[3]);
        for b in 0..2 {
            for w in 0..15 {
                let z = logits[[b, w]];
                assert_abs_diff_eq!(r[[b, w]], 1.0 / (1.0 + (-z).exp()), epsilon = 1e-12);
            }
            let lse: f64 = (0..15).map(|w| logits[[b, w]].exp()).sum();
            for w in 0..15 {
                assert_abs_diff_eq!(lp[[b, w]], logits[[b, w]] - lse.ln(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_logits_give_half_disc_probs() {
        let dims = ModelDims::new(12, 8);
        let disc = ModelParams::init_discriminator(dims, 3);
        let batch = tiny_batch(12, 2);
        let fwd = forward(&disc, &batch).unwrap();
        let r = fwd.disc_probs(0, true);
        for &v in r.iter() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let params = ModelParams::init_lm(ModelDims::new(10, 4), 1);
        let mut sent = [1u32; SENTENCE_TOKENS];
        sent[0] = 0;
        sent[5] = 11; // out of range
        assert!(forward(&params, &[sent]).is_err());
    }

    #[test]
    fn prefix_prob_matches_full_forward() {
        let params = ModelParams::init_lm(ModelDims::new(10, 6), 2);
        let batch = tiny_batch(10, 1);
        let fwd = forward(&params, &batch).unwrap();
        let lp = fwd.log_probs(4);
        let p = prefix_word_prob(&params, &batch[0][..5], batch[0][5]).unwrap();
        assert_abs_diff_eq!(p, lp[[0, batch[0][5] as usize - 1]].exp(), epsilon = 1e-12);
    }
}
