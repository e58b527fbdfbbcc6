//! Build a small trigram world, sample a corpus from its stationary regime,
//! and print the frequency statistics that characterize it.

use revkl::corpus::{word_stats, SplitSizes, TrigramWorld, WorldModel};

fn main() {
    let world = WorldModel::build(TrigramWorld::new(300, 42));
    let sizes = SplitSizes { train: 5_000, valid: 500, test: 500 };
    let corpus = world.sample_corpus(sizes, 7);

    println!(
        "sampled {} train / {} valid / {} test sentences over {} words",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        corpus.vocab_size
    );
    println!("first sentence: {:?}", corpus.train[0]);

    let (top50, next100) = corpus.token_frequency_shares(50, 100);
    println!("top-50 token share:   {:.2}%", top50 * 100.0);
    println!("next-100 token share: {:.2}%", next100 * 100.0);

    let partition = word_stats(&corpus);
    println!(
        "most frequent word: {} ({} occurrences in train)",
        partition.word_at_rank(1),
        corpus.frequency_table[partition.word_at_rank(1) as usize]
    );
    println!(
        "word classes: {} frequent, {} almost-frequent, {} rare",
        partition.frequent.len(),
        partition.almost_frequent.len(),
        partition.rare.len()
    );

    // every conditional row of the world is an exact distribution
    let row = world.world.conditional_row(17, 3);
    let sum: f64 = row.iter().sum();
    println!("conditional row p(. | 17, 3) sums to {sum:.12}");
}
