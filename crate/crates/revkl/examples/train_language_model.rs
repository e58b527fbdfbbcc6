//! Train a small LSTM language model from scratch with SGD, gradient
//! clipping and plateau learning-rate decay, then compare it against the
//! exact distribution it was sampled from.

use revkl::corpus::{SplitSizes, TrigramWorld, WorldModel};
use revkl::eval::{perplexity, ModelSource, OracleSource, WordFilter};
use revkl::nncore::{ModelDims, ModelParams};
use revkl::pipeline::{train_lm, TrainConfig};

fn main() {
    let world = WorldModel::build(TrigramWorld::new(200, 5));
    let corpus = world.sample_corpus(SplitSizes { train: 4_000, valid: 500, test: 500 }, 11);

    let config = TrainConfig {
        lr: 1.0,
        clip: 1.0,
        batch_size: 512,
        plateau_decay: 0.1,
        plateau_min_rel_improve: 0.001,
        max_epochs: 6,
        stop_lr: 1e-4,
        fixed_lr: false,
    };
    let init = ModelParams::init_lm(ModelDims::new(200, 32), 1);
    let (model, record) = train_lm(init, &corpus, &config, 99, &[]).unwrap();

    println!("epoch  train_loss  val_ppl  lr");
    for row in &record.epochs {
        println!(
            "{:>5}  {:>10}  {:>7.2}  {}",
            row.epoch,
            row.train_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            row.val_exp,
            row.lr
        );
    }

    let model_ppl = perplexity(&ModelSource::new(&model), &corpus.test, WordFilter::All).unwrap();
    let oracle_ppl = perplexity(&OracleSource(&world), &corpus.test, WordFilter::All).unwrap();
    println!("test perplexity: model {model_ppl:.2} vs exact distribution {oracle_ppl:.2}");
    assert!(model_ppl > oracle_ppl, "no model can beat the true distribution in expectation");
}
