//! Synthetic corpus generation: the trigram world, sampled token corpora,
//! word-frequency statistics, and the exact evaluation oracle.

mod marginal;
mod world;

pub use marginal::StartMarginal;
pub(crate) use marginal::read_json_line as marginal_read_json_line;
pub use world::{alpha_weight, TrigramWorld, GAMMA, XI_VALUES};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every sentence is a start token followed by exactly ten words.
pub const WORDS_PER_SENTENCE: usize = 10;
pub const SENTENCE_TOKENS: usize = WORDS_PER_SENTENCE + 1;
pub const START_TOKEN: u32 = 0;

pub type Sentence = [u32; SENTENCE_TOKENS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Sampled train/valid/test sentences plus training-split frequency counts.
#[derive(Debug, Clone)]
pub struct TokenCorpus {
    pub vocab_size: usize,
    pub world_seed: u64,
    pub sample_seed: u64,
    pub train: Vec<Sentence>,
    pub valid: Vec<Sentence>,
    pub test: Vec<Sentence>,
    /// Occurrence counts over the training split, indexed by word id;
    /// index 0 counts start tokens.
    pub frequency_table: Vec<u64>,
}

impl TokenCorpus {
    pub fn split(&self, split: Split) -> &[Sentence] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
        }
    }

    /// Fraction of training-split word tokens (start tokens excluded) covered
    /// by the given words.
    pub fn frequency_share(&self, words: &[u32]) -> f64 {
        let total: u64 = self.frequency_table[1..].iter().sum();
        let hit: u64 = words
            .iter()
            .map(|&w| self.frequency_table[w as usize])
            .sum();
        hit as f64 / total as f64
    }

    /// Corpus-level frequency shares: the fraction of all training tokens
    /// covered by the `top_n` most frequent token types and by the `next_n`
    /// after them. The start marker participates as an ordinary token type
    /// here (it is trivially the most frequent one), which is what makes the
    /// headline concentration figures of this corpus come out.
    pub fn token_frequency_shares(&self, top_n: usize, next_n: usize) -> (f64, f64) {
        let mut by_count: Vec<usize> = (0..self.frequency_table.len()).collect();
        by_count.sort_by(|&a, &b| self.frequency_table[b].cmp(&self.frequency_table[a]));
        let total: u64 = self.frequency_table.iter().sum();
        let sum_range = |range: std::ops::Range<usize>| -> f64 {
            by_count[range.start.min(by_count.len())..range.end.min(by_count.len())]
                .iter()
                .map(|&t| self.frequency_table[t])
                .sum::<u64>() as f64
                / total as f64
        };
        (sum_range(0..top_n), sum_range(top_n..top_n + next_n))
    }
}

/// Word classes derived from training-split frequencies. `frequent` holds the
/// top 50 words; `rare` holds everything else; `almost_frequent` is the next
/// 100 after the top 50 and is a subset of `rare`. Ties rank the smaller
/// word id first.
#[derive(Debug, Clone)]
pub struct WordClassPartition {
    /// All real word ids ordered by decreasing training frequency.
    pub by_rank: Vec<u32>,
    pub frequent: Vec<u32>,
    pub almost_frequent: Vec<u32>,
    pub rare: Vec<u32>,
    frequent_mask: Vec<bool>,
}

pub const FREQUENT_WORDS: usize = 50;
pub const ALMOST_FREQUENT_WORDS: usize = 100;

impl WordClassPartition {
    pub fn is_frequent(&self, word: u32) -> bool {
        self.frequent_mask[word as usize]
    }

    pub fn is_rare(&self, word: u32) -> bool {
        word != START_TOKEN && !self.frequent_mask[word as usize]
    }

    /// Word at a 1-based frequency rank.
    pub fn word_at_rank(&self, rank: usize) -> u32 {
        self.by_rank[rank - 1]
    }
}

/// Rank words by training frequency and split into the Table-1 classes.
pub fn word_stats(corpus: &TokenCorpus) -> WordClassPartition {
    partition_from_counts(&corpus.frequency_table, corpus.vocab_size)
}

pub fn partition_from_counts(counts: &[u64], vocab_size: usize) -> WordClassPartition {
    let mut by_rank: Vec<u32> = (1..=vocab_size as u32).collect();
    // stable sort on descending count keeps smaller ids first among ties
    by_rank.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]));
    let n_freq = FREQUENT_WORDS.min(vocab_size);
    let frequent = by_rank[..n_freq].to_vec();
    let almost_end = (n_freq + ALMOST_FREQUENT_WORDS).min(vocab_size);
    let almost_frequent = by_rank[n_freq..almost_end].to_vec();
    let rare = by_rank[n_freq..].to_vec();
    let mut frequent_mask = vec![false; vocab_size + 1];
    for &w in &frequent {
        frequent_mask[w as usize] = true;
    }
    WordClassPartition {
        by_rank,
        frequent,
        almost_frequent,
        rare,
        frequent_mask,
    }
}

/// World plus its start marginal: everything needed to sample sentences and
/// evaluate exact probabilities.
pub struct WorldModel {
    pub world: TrigramWorld,
    pub start: StartMarginal,
}

impl WorldModel {
    pub fn build(world: TrigramWorld) -> Self {
        let start = StartMarginal::build(&world);
        WorldModel { world, start }
    }

    pub fn load_or_build(world: TrigramWorld, cache_path: &Path) -> Result<Self> {
        let start = StartMarginal::load_or_build(cache_path, &world)?;
        Ok(WorldModel { world, start })
    }

    /// Sample a corpus. Sentences start with a pair drawn from the stationary
    /// pair distribution and continue through the trigram chain; the start
    /// token is prepended as a marker for the neural models. Reproducible
    /// from `(world seed, rng_seed)`.
    pub fn sample_corpus(&self, sizes: SplitSizes, rng_seed: u64) -> TokenCorpus {
        let pair_cdf = cumulative(self.start.pair_flat());
        let sample_split = |split_idx: u64, n: usize| -> Vec<Sentence> {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ (split_idx.wrapping_mul(0x9e3779b97f4a7c15)));
            (0..n).map(|_| self.sample_sentence(&pair_cdf, &mut rng)).collect()
        };
        let train = sample_split(1, sizes.train);
        let valid = sample_split(2, sizes.valid);
        let test = sample_split(3, sizes.test);

        let mut frequency_table = vec![0u64; self.world.vocab_size() + 1];
        for sentence in &train {
            for &w in sentence.iter() {
                frequency_table[w as usize] += 1;
            }
        }
        TokenCorpus {
            vocab_size: self.world.vocab_size(),
            world_seed: self.world.seed(),
            sample_seed: rng_seed,
            train,
            valid,
            test,
            frequency_table,
        }
    }

    fn sample_sentence(&self, pair_cdf: &[f64], rng: &mut ChaCha8Rng) -> Sentence {
        let v = self.world.vocab_size();
        let mut sentence = [START_TOKEN; SENTENCE_TOKENS];
        let pair_idx = search_cdf(pair_cdf, rng.random::<f64>() * pair_cdf[pair_cdf.len() - 1]);
        sentence[1] = (pair_idx / v + 1) as u32;
        sentence[2] = (pair_idx % v + 1) as u32;
        for t in 3..SENTENCE_TOKENS {
            let raw = self.world.raw_row(sentence[t - 2], sentence[t - 1]);
            let cdf = cumulative(&raw);
            let idx = search_cdf(&cdf, rng.random::<f64>() * cdf[cdf.len() - 1]);
            sentence[t] = (idx + 1) as u32;
        }
        sentence
    }

    /// The evaluation oracle `p(. | context)`. The context is a sentence
    /// prefix beginning with the start token; the row is the distribution of
    /// the next word. Position 1 uses the stationary single-word marginal,
    /// position 2 the stationary pair conditional, and later positions the
    /// trigram conditional on the last two words.
    pub fn true_conditional(&self, context: &[u32]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Err(Error::Invalid("true_conditional: empty context".into()));
        }
        if context[0] != START_TOKEN {
            return Err(Error::Invalid(
                "true_conditional: context must begin with the start token".into(),
            ));
        }
        match context.len() {
            1 => Ok(self.start.first_word_row().to_vec()),
            2 => Ok(self.start.second_word_row(context[1])),
            n => Ok(self.world.conditional_row(context[n - 2], context[n - 1])),
        }
    }

    /// Log-probability of each of the ten target words of a sentence under
    /// the exact distribution.
    pub fn sentence_log_probs(&self, sentence: &Sentence) -> [f64; WORDS_PER_SENTENCE] {
        let mut out = [0.0f64; WORDS_PER_SENTENCE];
        let w1 = sentence[1];
        let w2 = sentence[2];
        out[0] = self.start.first_word_prob(w1).ln();
        out[1] = (self.start.pair_prob(w1, w2) / self.start.first_word_prob(w1)).ln();
        for t in 3..SENTENCE_TOKENS {
            let raw = self.world.raw_row(sentence[t - 2], sentence[t - 1]);
            let total: f64 = raw.iter().sum();
            out[t - 1] = (raw[sentence[t] as usize - 1] / total).ln();
        }
        out
    }
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0f64;
    for &w in weights {
        acc += w;
        cdf.push(acc);
    }
    cdf
}

/// Index of the first cdf entry strictly greater than `u`.
fn search_cdf(cdf: &[f64], u: f64) -> usize {
    let mut lo = 0usize;
    let mut hi = cdf.len() - 1;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if cdf[mid] > u {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

// ---------------------------------------------------------------------------
// corpus files
// ---------------------------------------------------------------------------

/// JSON sidecar written next to the split files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSidecar {
    pub format: String,
    pub world_seed: u64,
    pub sample_seed: u64,
    pub vocab_size: usize,
    pub gamma: f64,
    pub sizes: SplitSizes,
    pub frequency_table: Vec<u64>,
}

const SIDECAR_FORMAT: &str = "revkl.corpus.v1";

/// Write `train.txt`, `valid.txt`, `test.txt` and `corpus.json` into `dir`.
/// One sentence per line, space-separated decimal ids, start token as 0.
pub fn write_corpus(dir: &Path, corpus: &TokenCorpus, gamma: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let path = dir.join(format!("{}.txt", split.name()));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for sentence in corpus.split(split) {
            let mut line = String::with_capacity(SENTENCE_TOKENS * 5);
            for (idx, tok) in sentence.iter().enumerate() {
                if idx > 0 {
                    line.push(' ');
                }
                line.push_str(&tok.to_string());
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let sidecar = CorpusSidecar {
        format: SIDECAR_FORMAT.to_string(),
        world_seed: corpus.world_seed,
        sample_seed: corpus.sample_seed,
        vocab_size: corpus.vocab_size,
        gamma,
        sizes: corpus.sizes(),
        frequency_table: corpus.frequency_table.clone(),
    };
    let path = dir.join("corpus.json");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)?;
    Ok(())
}

/// Read a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<TokenCorpus> {
    let sidecar_path = dir.join("corpus.json");
    let file = File::open(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let sidecar: CorpusSidecar = serde_json::from_reader(BufReader::new(file))?;
    if sidecar.format != SIDECAR_FORMAT {
        return Err(Error::Format {
            path: sidecar_path,
            reason: format!("unexpected format tag {:?}", sidecar.format),
        });
    }
    let read_split = |split: Split, expect: usize| -> Result<Vec<Sentence>> {
        let path = dir.join(format!("{}.txt", split.name()));
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut sentences = Vec::with_capacity(expect);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            let mut sentence = [0u32; SENTENCE_TOKENS];
            let mut count = 0usize;
            for (slot, tok) in sentence.iter_mut().zip(line.split_ascii_whitespace()) {
                *slot = tok.parse().map_err(|_| Error::Format {
                    path: path.clone(),
                    reason: format!("bad token {tok:?}"),
                })?;
                count += 1;
            }
            if count != SENTENCE_TOKENS || line.split_ascii_whitespace().count() != SENTENCE_TOKENS
            {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: format!("expected {SENTENCE_TOKENS} tokens per line"),
                });
            }
            validate_sentence(&sentence, sidecar.vocab_size, &path)?;
            sentences.push(sentence);
        }
        if sentences.len() != expect {
            return Err(Error::Format {
                path,
                reason: format!("expected {expect} sentences, found {}", sentences.len()),
            });
        }
        Ok(sentences)
    };
    let train = read_split(Split::Train, sidecar.sizes.train)?;
    let valid = read_split(Split::Valid, sidecar.sizes.valid)?;
    let test = read_split(Split::Test, sidecar.sizes.test)?;
    Ok(TokenCorpus {
        vocab_size: sidecar.vocab_size,
        world_seed: sidecar.world_seed,
        sample_seed: sidecar.sample_seed,
        train,
        valid,
        test,
        frequency_table: sidecar.frequency_table,
    })
}

fn validate_sentence(sentence: &Sentence, vocab_size: usize, path: &Path) -> Result<()> {
    if sentence[0] != START_TOKEN {
        return Err(Error::Format {
            path: path.into(),
            reason: "sentence must begin with the start token".into(),
        });
    }
    for &w in &sentence[1..] {
        if w == START_TOKEN || w as usize > vocab_size {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("word id {w} out of range"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_world_model() -> WorldModel {
        WorldModel::build(TrigramWorld::new(30, 21))
    }

    #[test]
    fn sampling_is_reproducible() {
        let wm = tiny_world_model();
        let sizes = SplitSizes { train: 50, valid: 10, test: 10 };
        let a = wm.sample_corpus(sizes, 77);
        let b = wm.sample_corpus(sizes, 77);
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.test, b.test);
        let c = wm.sample_corpus(sizes, 78);
        assert_ne!(a.train, c.train, "different sample seed, different corpus");
    }

    #[test]
    fn sentences_are_well_formed() {
        let wm = tiny_world_model();
        let corpus = wm.sample_corpus(SplitSizes { train: 40, valid: 5, test: 5 }, 3);
        for sentence in corpus.train.iter().chain(&corpus.valid).chain(&corpus.test) {
            assert_eq!(sentence.len(), SENTENCE_TOKENS);
            assert_eq!(sentence[0], START_TOKEN);
            for &w in &sentence[1..] {
                assert!(w >= 1 && w as usize <= 30, "word id in range, got {w}");
            }
        }
        let counted: u64 = corpus.frequency_table.iter().sum();
        assert_eq!(counted, 40 * SENTENCE_TOKENS as u64);
    }

    #[test]
    fn true_conditional_rows_are_distributions() {
        let wm = tiny_world_model();
        let sentence = wm.sample_corpus(SplitSizes { train: 1, valid: 0, test: 0 }, 5).train[0];
        for prefix in 1..SENTENCE_TOKENS {
            let row = wm.true_conditional(&sentence[..prefix]).unwrap();
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "prefix {prefix}: sum {sum}");
        }
        assert!(wm.true_conditional(&[]).is_err());
    }

    #[test]
    fn sentence_log_probs_match_rows() {
        let wm = tiny_world_model();
        let sentence = wm.sample_corpus(SplitSizes { train: 3, valid: 0, test: 0 }, 9).train[2];
        let lp = wm.sentence_log_probs(&sentence);
        for t in 1..SENTENCE_TOKENS {
            let row = wm.true_conditional(&sentence[..t]).unwrap();
            let expect = row[sentence[t] as usize - 1].ln();
            assert!((lp[t - 1] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_sizes_and_tie_break() {
        // construct counts with a tie between ids 3 and 4
        let mut counts = vec![0u64; 201];
        for w in 1..=200usize {
            counts[w] = 1000u64.saturating_sub(w as u64 * 3);
        }
        counts[3] = counts[4];
        let part = partition_from_counts(&counts, 200);
        assert_eq!(part.frequent.len(), 50);
        assert_eq!(part.almost_frequent.len(), 100);
        assert_eq!(part.rare.len(), 150);
        // ties: smaller id first
        let pos3 = part.by_rank.iter().position(|&w| w == 3).unwrap();
        let pos4 = part.by_rank.iter().position(|&w| w == 4).unwrap();
        assert!(pos3 < pos4);
        // frequent and rare cover the vocabulary
        let mut seen = vec![false; 201];
        for &w in part.frequent.iter().chain(part.rare.iter()) {
            assert!(!seen[w as usize], "classes overlap at {w}");
            seen[w as usize] = true;
        }
        assert!(seen[1..].iter().all(|&s| s));
        // almost-frequent is contained in rare
        assert!(part
            .almost_frequent
            .iter()
            .all(|w| part.rare.contains(w)));
    }

    #[test]
    fn word_stats_ranks_by_count() {
        let wm = tiny_world_model();
        let corpus = wm.sample_corpus(SplitSizes { train: 200, valid: 0, test: 0 }, 1);
        let part = word_stats(&corpus);
        let top = part.word_at_rank(1);
        for w in 1..=30u32 {
            assert!(
                corpus.frequency_table[top as usize] >= corpus.frequency_table[w as usize]
            );
        }
    }

    #[test]
    fn corpus_files_round_trip() {
        let wm = tiny_world_model();
        let corpus = wm.sample_corpus(SplitSizes { train: 20, valid: 4, test: 4 }, 123);
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus, GAMMA).unwrap();
        let loaded = read_corpus(dir.path()).unwrap();
        assert_eq!(corpus.train, loaded.train);
        assert_eq!(corpus.valid, loaded.valid);
        assert_eq!(corpus.test, loaded.test);
        assert_eq!(corpus.frequency_table, loaded.frequency_table);
        assert_eq!(corpus.world_seed, loaded.world_seed);
    }

    #[test]
    fn empirical_rows_converge_to_conditionals() {
        // trigram frequencies in a large sample approach conditional_row
        let wm = tiny_world_model();
        let corpus = wm.sample_corpus(SplitSizes { train: 60_000, valid: 0, test: 0 }, 17);
        use std::collections::HashMap;
        let mut counts: HashMap<(u32, u32), Vec<u64>> = HashMap::new();
        for s in &corpus.train {
            for t in 3..SENTENCE_TOKENS {
                let key = (s[t - 2], s[t - 1]);
                counts.entry(key).or_insert_with(|| vec![0; 30])[s[t] as usize - 1] += 1;
            }
        }
        let mut checked = 0;
        for ((i, j), c) in counts {
            let visits: u64 = c.iter().sum();
            if visits < 10_000 {
                continue;
            }
            let row = wm.world.conditional_row(i, j);
            let tv: f64 = row
                .iter()
                .zip(c.iter())
                .map(|(p, &n)| (p - n as f64 / visits as f64).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.02, "context ({i},{j}): TV distance {tv}");
            checked += 1;
        }
        assert!(checked > 0, "at least one context with enough visits");
    }
}
