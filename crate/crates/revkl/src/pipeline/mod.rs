//! Orchestration of the three-phase procedure — train the language model,
//! train the discriminator against it, fine-tune against the estimated
//! CE + reverse-KL loss — plus the bias-perturbation experiment.

mod experiment;
mod trainer;

pub use experiment::{
    find_watched, run_experiment, DiscPhaseSummary, ExperimentArtifacts, ExperimentReport,
    ExperimentSettings, PhasePlan, RecoverySummary, TableRow, WatchedOutcome,
};
pub use trainer::{
    evaluate_objective, train_phase, EpochRow, Objective, RunRecord, TraceRow, TrainConfig,
    WatchedPair,
};

use crate::corpus::TokenCorpus;
use crate::error::Result;
use crate::nncore::ModelParams;

/// Train the initial language model with plain cross-entropy.
pub fn train_lm(
    init: ModelParams,
    corpus: &TokenCorpus,
    config: &TrainConfig,
    run_seed: u64,
    watched: &[WatchedPair],
) -> Result<(ModelParams, RunRecord)> {
    train_phase(init, &Objective::CrossEntropy, corpus, config, run_seed, watched)
}

/// Train a discriminator against a frozen language model. The q0 parameters
/// are borrowed immutably and cannot change during the run.
pub fn train_discriminator(
    init: ModelParams,
    q0: &ModelParams,
    corpus: &TokenCorpus,
    config: &TrainConfig,
    run_seed: u64,
) -> Result<(ModelParams, RunRecord)> {
    train_phase(init, &Objective::Disc { q0 }, corpus, config, run_seed, &[])
}

/// Fine-tune a copy of the language model against the discriminator-estimated
/// CE + reverse-KL loss. `disc = None` runs the r = 1/2 ablation.
pub fn finetune(
    theta_init: ModelParams,
    q0: &ModelParams,
    disc: Option<&ModelParams>,
    corpus: &TokenCorpus,
    config: &TrainConfig,
    run_seed: u64,
    watched: &[WatchedPair],
) -> Result<(ModelParams, RunRecord)> {
    train_phase(theta_init, &Objective::Finetune { q0, disc }, corpus, config, run_seed, watched)
}

/// Continue training with plain cross-entropy at a fixed learning rate; the
/// oscillation-study arm.
pub fn finetune_ce(
    theta_init: ModelParams,
    corpus: &TokenCorpus,
    config: &TrainConfig,
    run_seed: u64,
    watched: &[WatchedPair],
) -> Result<(ModelParams, RunRecord)> {
    let fixed = config.clone().fixed();
    train_phase(theta_init, &Objective::CrossEntropy, corpus, &fixed, run_seed, watched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SplitSizes, TrigramWorld, WorldModel};
    use crate::nncore::{save_checkpoint, CheckpointMeta, ModelDims, ModelParams};

    #[test]
    fn phase_isolation_leaves_frozen_checkpoints_untouched() {
        // the frozen q0 bytes may not change across discriminator training
        // and fine-tuning
        let wm = WorldModel::build(TrigramWorld::new(30, 51));
        let corpus = wm.sample_corpus(SplitSizes { train: 200, valid: 40, test: 40 }, 3);
        let dims = ModelDims::new(30, 8);
        let q0 = ModelParams::init_lm(dims, 1);
        let dir = tempfile::tempdir().unwrap();
        let q0_path = dir.path().join("q0.ckpt");
        save_checkpoint(&q0_path, &q0, &CheckpointMeta::default()).unwrap();
        let bytes_before = std::fs::read(&q0_path).unwrap();

        let config = TrainConfig {
            lr: 1.0,
            clip: 1.0,
            batch_size: 64,
            plateau_decay: 0.1,
            plateau_min_rel_improve: 0.001,
            max_epochs: 1,
            stop_lr: 1e-4,
            fixed_lr: false,
        };
        let (disc, _) = train_discriminator(
            ModelParams::init_discriminator(dims, 2),
            &q0,
            &corpus,
            &config,
            9,
        )
        .unwrap();
        let disc_path = dir.path().join("disc.ckpt");
        save_checkpoint(&disc_path, &disc, &CheckpointMeta::default()).unwrap();
        let disc_bytes_before = std::fs::read(&disc_path).unwrap();

        let (_theta, _) =
            finetune(q0.clone(), &q0, Some(&disc), &corpus, &config, 10, &[]).unwrap();

        assert_eq!(bytes_before, std::fs::read(&q0_path).unwrap());
        assert_eq!(disc_bytes_before, std::fs::read(&disc_path).unwrap());
    }

    #[test]
    fn experiment_report_has_all_rows_and_is_deterministic() {
        let wm = WorldModel::build(TrigramWorld::new(160, 77));
        let corpus = wm.sample_corpus(SplitSizes { train: 400, valid: 80, test: 80 }, 5);
        let quick = TrainConfig {
            lr: 1.0,
            clip: 1.0,
            batch_size: 128,
            plateau_decay: 0.1,
            plateau_min_rel_improve: 0.0,
            max_epochs: 1,
            stop_lr: 1e-4,
            fixed_lr: false,
        };
        let plan = PhasePlan {
            lm: quick.clone(),
            disc: quick.clone(),
            finetune: quick.clone(),
            ce_arm_epochs: 1,
        };
        let settings = ExperimentSettings {
            chosen_rank: 60,
            perturb_value: -20.0,
            watched_count: 2,
            ce_small_lr: 0.01,
            ce_large_lr: 0.1,
        };
        let run = || {
            let artifacts =
                run_experiment(&wm, &corpus, 8, &plan, &settings, 99).unwrap();
            serde_json::to_string_pretty(&artifacts.report).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "reports reproduce byte for byte");
        let report: ExperimentReport = serde_json::from_str(&a).unwrap();
        let labels: Vec<_> = report.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            ["true_distribution", "initial", "initial_ftd", "perturbed", "perturbed_ftd"]
        );
        assert_eq!(report.rows[0].report.mean_log_diff, 0.0);
        // the perturbed model crushed the chosen word
        assert!(report.recovery.watched.iter().all(|w| w.before < 1e-6));
    }
}
