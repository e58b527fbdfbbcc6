//! Train a discriminator that tells model samples from data. With zero
//! output logits it starts exactly at loss ln 4 = 2 ln 2 and converges
//! strictly below, because the frozen language model is not optimal.

use revkl::corpus::{SplitSizes, TrigramWorld, WorldModel};
use revkl::eval::disc_report;
use revkl::nncore::{ModelDims, ModelParams};
use revkl::pipeline::{train_discriminator, train_lm, TrainConfig};

fn main() {
    let world = WorldModel::build(TrigramWorld::new(200, 5));
    let corpus = world.sample_corpus(SplitSizes { train: 4_000, valid: 500, test: 500 }, 11);
    let dims = ModelDims::new(200, 32);

    let config = TrainConfig {
        lr: 1.0,
        clip: 1.0,
        batch_size: 512,
        plateau_decay: 0.1,
        plateau_min_rel_improve: 0.001,
        max_epochs: 4,
        stop_lr: 1e-4,
        fixed_lr: false,
    };

    println!("training the language model the discriminator will argue against ...");
    let (q0, _) = train_lm(ModelParams::init_lm(dims, 1), &corpus, &config, 3, &[]).unwrap();

    let disc_init = ModelParams::init_discriminator(dims, 2);
    let (disc, record) =
        train_discriminator(disc_init, &q0, &corpus, &config, 4).unwrap();

    println!("ln 4 = {:.6}", 4f64.ln());
    println!("epoch  val_loss");
    for row in &record.epochs {
        println!("{:>5}  {:.6}", row.epoch, row.val_loss);
    }

    let report = disc_report(&disc, &q0, &corpus.valid, 256).unwrap();
    println!(
        "final validation split: D(q) term {:.4}, D(p) term {:.4}, total {:.4}",
        report.dq_mean, report.dp_mean, report.total_mean
    );
    assert!(record.epochs[0].val_loss - 4f64.ln() < 1e-9);
    assert!(report.total_mean < 4f64.ln(), "beats the optimal-q0 bound");
}
