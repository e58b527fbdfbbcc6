//! The full experiment: train the initial language model, perturb one
//! output bias, train discriminators against the frozen models, fine-tune
//! with the estimated CE + reverse-KL loss, run the cross-entropy
//! fine-tuning arms for comparison, and assemble the results table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trainer::{train_phase, Objective, RunRecord, TrainConfig, WatchedPair};
use crate::corpus::{word_stats, Split, TokenCorpus, WordClassPartition, WorldModel};
use crate::error::{Error, Result};
use crate::eval::{
    except_word_perplexity, imbalance_report, watched_probabilities, EvalReport, ModelSource,
    OracleSource,
};
use crate::nncore::{ModelDims, ModelParams};

/// Experiment-level settings beyond the per-phase schedules.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSettings {
    /// Frequency rank (1-based) of the word whose output bias is perturbed;
    /// rank 60 sits inside the almost-frequent band.
    pub chosen_rank: usize,
    pub perturb_value: f64,
    /// How many occurrences of the chosen word (and of the top frequent
    /// word) to watch per run.
    pub watched_count: usize,
    /// Learning rate of the small-lr cross-entropy arm.
    pub ce_small_lr: f64,
    /// Learning rate of the oscillation-study cross-entropy arm.
    pub ce_large_lr: f64,
}

/// One labelled row of the results table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscPhaseSummary {
    pub start_val_loss: f64,
    pub best_val_loss: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WatchedOutcome {
    pub context_id: usize,
    pub word: u32,
    pub before: f64,
    pub after_disc_finetune: f64,
    pub after_ce_small: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub chosen_word: u32,
    pub watched: Vec<WatchedOutcome>,
    /// Smallest probability rise factor under discriminator fine-tuning.
    pub min_rise_disc: f64,
    /// Largest rise factor under the small-lr cross-entropy arm.
    pub max_rise_ce_small: f64,
    pub except_chosen_ppl_perturbed: f64,
    pub except_chosen_ppl_finetuned: f64,
    pub except_chosen_rel_change: f64,
}

/// Everything `reproduce-table1` reports. Contains no timestamps, so equal
/// seeds reproduce the file byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub vocab_size: usize,
    pub hidden: usize,
    pub world_seed: u64,
    pub run_seed: u64,
    pub chosen_word: u32,
    pub chosen_rank: usize,
    pub rows: Vec<TableRow>,
    pub ablation_no_disc: EvalReport,
    pub disc_initial: DiscPhaseSummary,
    pub disc_perturbed: DiscPhaseSummary,
    pub recovery: RecoverySummary,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> &EvalReport {
        &self.rows.iter().find(|r| r.label == label).expect("missing table row").report
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "model,{}", EvalReport::CSV_HEADER).map_err(|e| Error::io(path, e))?;
        for row in &self.rows {
            writeln!(f, "{},{}", row.label, row.report.csv_row())
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Per-phase schedules for the whole experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhasePlan {
    pub lm: TrainConfig,
    pub disc: TrainConfig,
    pub finetune: TrainConfig,
    /// Epoch budget of the cross-entropy arms; they run at fixed lr.
    pub ce_arm_epochs: usize,
}

/// Artifacts of a full experiment run, kept in memory for further checks.
pub struct ExperimentArtifacts {
    pub report: ExperimentReport,
    pub initial: ModelParams,
    pub initial_ftd: ModelParams,
    pub perturbed: ModelParams,
    pub perturbed_ftd: ModelParams,
    pub perturbed_ftd_nodisc: ModelParams,
    pub disc_initial: ModelParams,
    pub disc_perturbed: ModelParams,
    pub partition: WordClassPartition,
    pub records: Vec<(String, RunRecord)>,
}

/// Find watched pairs: positions in the validation split whose target is
/// `word`. The context is everything before the target.
pub fn find_watched(corpus: &TokenCorpus, word: u32, count: usize) -> Vec<WatchedPair> {
    let mut out = Vec::new();
    'outer: for (s, sentence) in corpus.valid.iter().enumerate() {
        for t in 1..sentence.len() {
            if sentence[t] == word {
                out.push(WatchedPair { split: Split::Valid, sentence: s, position: t, word });
                if out.len() >= count {
                    break 'outer;
                }
            }
        }
    }
    out
}

/// Execute the full three-phase procedure plus the perturbation experiment.
///
/// Phase chain: train the initial model; perturb the chosen word's output
/// bias; train one discriminator against the frozen initial model and one
/// against the frozen perturbed model (each fine-tuned model uses the
/// discriminator that was trained against its own frozen copy); fine-tune
/// the initial and perturbed models; run the no-discriminator ablation and
/// the cross-entropy arms on the perturbed model.
pub fn run_experiment(
    wm: &WorldModel,
    corpus: &TokenCorpus,
    hidden: usize,
    plan: &PhasePlan,
    settings: &ExperimentSettings,
    run_seed: u64,
) -> Result<ExperimentArtifacts> {
    let partition = word_stats(corpus);
    let chosen = partition.word_at_rank(settings.chosen_rank);
    let dims = ModelDims::new(corpus.vocab_size, hidden);

    let watched_chosen = find_watched(corpus, chosen, settings.watched_count);
    if watched_chosen.is_empty() {
        return Err(Error::Invalid(format!(
            "chosen word {chosen} does not occur in the validation split"
        )));
    }
    let top_word = partition.word_at_rank(1);
    let watched_frequent = find_watched(corpus, top_word, settings.watched_count);
    let mut watched_all = watched_chosen.clone();
    watched_all.extend_from_slice(&watched_frequent);

    let mut records: Vec<(String, RunRecord)> = Vec::new();

    // phase 1: initial language model
    let lm_init = ModelParams::init_lm(dims, run_seed ^ 0x11);
    let (initial, lm_record) = train_phase(
        lm_init,
        &Objective::CrossEntropy,
        corpus,
        &plan.lm,
        run_seed ^ 0x100,
        &[],
    )?;
    records.push(("train_lm".into(), lm_record));

    // perturbation
    let mut perturbed = initial.clone();
    perturbed.perturb_bias(chosen, settings.perturb_value)?;

    // phase 2: discriminators against both frozen models
    let disc_init_params = ModelParams::init_discriminator(dims, run_seed ^ 0x22);
    let (disc_initial, disc_initial_record) = train_phase(
        disc_init_params.clone(),
        &Objective::Disc { q0: &initial },
        corpus,
        &plan.disc,
        run_seed ^ 0x200,
        &[],
    )?;
    let disc_initial_summary = DiscPhaseSummary {
        start_val_loss: disc_initial_record.epochs[0].val_loss,
        best_val_loss: disc_initial_record.best_val_loss,
        epochs: disc_initial_record.completed_epochs,
    };
    records.push(("train_disc_initial".into(), disc_initial_record));

    let (disc_perturbed, disc_perturbed_record) = train_phase(
        disc_init_params,
        &Objective::Disc { q0: &perturbed },
        corpus,
        &plan.disc,
        run_seed ^ 0x201,
        &[],
    )?;
    let disc_perturbed_summary = DiscPhaseSummary {
        start_val_loss: disc_perturbed_record.epochs[0].val_loss,
        best_val_loss: disc_perturbed_record.best_val_loss,
        epochs: disc_perturbed_record.completed_epochs,
    };
    records.push(("train_disc_perturbed".into(), disc_perturbed_record));

    // phase 3: fine-tuning arms
    let (initial_ftd, initial_ftd_record) = train_phase(
        initial.clone(),
        &Objective::Finetune { q0: &initial, disc: Some(&disc_initial) },
        corpus,
        &plan.finetune,
        run_seed ^ 0x300,
        &watched_frequent,
    )?;
    records.push(("finetune_initial".into(), initial_ftd_record));

    let (perturbed_ftd, perturbed_ftd_record) = train_phase(
        perturbed.clone(),
        &Objective::Finetune { q0: &perturbed, disc: Some(&disc_perturbed) },
        corpus,
        &plan.finetune,
        run_seed ^ 0x301,
        &watched_all,
    )?;
    let finetune_epochs = perturbed_ftd_record.completed_epochs;
    records.push(("finetune_perturbed".into(), perturbed_ftd_record));

    let (perturbed_ftd_nodisc, nodisc_record) = train_phase(
        perturbed.clone(),
        &Objective::Finetune { q0: &perturbed, disc: None },
        corpus,
        &plan.finetune,
        run_seed ^ 0x302,
        &[],
    )?;
    records.push(("finetune_perturbed_nodisc".into(), nodisc_record));

    // cross-entropy arms on the perturbed model, same epoch budget as the
    // discriminator arm, fixed learning rates
    let ce_budget = TrainConfig {
        max_epochs: plan.ce_arm_epochs.max(finetune_epochs.min(plan.finetune.max_epochs)),
        ..plan.finetune.clone()
    };
    let (ce_small, ce_small_record) = train_phase(
        perturbed.clone(),
        &Objective::CrossEntropy,
        corpus,
        &ce_budget.clone().with_lr(settings.ce_small_lr).fixed(),
        run_seed ^ 0x303,
        &watched_all,
    )?;
    records.push(("finetune_ce_small_lr".into(), ce_small_record));

    let (_ce_large, ce_large_record) = train_phase(
        perturbed.clone(),
        &Objective::CrossEntropy,
        corpus,
        &ce_budget.with_lr(settings.ce_large_lr).fixed(),
        run_seed ^ 0x304,
        &watched_all,
    )?;
    records.push(("finetune_ce_large_lr".into(), ce_large_record));

    // evaluation
    let report_of = |params: &ModelParams| -> Result<EvalReport> {
        imbalance_report(&ModelSource::new(params), wm, &corpus.test, &partition)
    };
    let rows = vec![
        TableRow {
            label: "true_distribution".into(),
            report: imbalance_report(&OracleSource(wm), wm, &corpus.test, &partition)?,
        },
        TableRow { label: "initial".into(), report: report_of(&initial)? },
        TableRow { label: "initial_ftd".into(), report: report_of(&initial_ftd)? },
        TableRow { label: "perturbed".into(), report: report_of(&perturbed)? },
        TableRow { label: "perturbed_ftd".into(), report: report_of(&perturbed_ftd)? },
    ];
    let ablation_no_disc = report_of(&perturbed_ftd_nodisc)?;

    // chosen-word recovery on the watched contexts
    let contexts: Vec<(Vec<u32>, u32)> = watched_chosen
        .iter()
        .map(|w| (w.context(corpus).to_vec(), w.word))
        .collect();
    let before = watched_probabilities(&perturbed, &contexts)?;
    let after_disc = watched_probabilities(&perturbed_ftd, &contexts)?;
    let after_ce = watched_probabilities(&ce_small, &contexts)?;
    let mut watched_outcomes = Vec::new();
    let mut min_rise_disc = f64::INFINITY;
    let mut max_rise_ce = 0.0f64;
    for (i, pair) in watched_chosen.iter().enumerate() {
        let rise_disc = after_disc[i] / before[i];
        let rise_ce = after_ce[i] / before[i];
        min_rise_disc = min_rise_disc.min(rise_disc);
        max_rise_ce = max_rise_ce.max(rise_ce);
        watched_outcomes.push(WatchedOutcome {
            context_id: pair.context_id(),
            word: pair.word,
            before: before[i],
            after_disc_finetune: after_disc[i],
            after_ce_small: after_ce[i],
        });
    }
    let except_perturbed =
        except_word_perplexity(&ModelSource::new(&perturbed), &corpus.test, chosen)?;
    let except_finetuned =
        except_word_perplexity(&ModelSource::new(&perturbed_ftd), &corpus.test, chosen)?;
    let recovery = RecoverySummary {
        chosen_word: chosen,
        watched: watched_outcomes,
        min_rise_disc,
        max_rise_ce_small: max_rise_ce,
        except_chosen_ppl_perturbed: except_perturbed,
        except_chosen_ppl_finetuned: except_finetuned,
        except_chosen_rel_change: (except_finetuned - except_perturbed).abs() / except_perturbed,
    };

    let report = ExperimentReport {
        vocab_size: corpus.vocab_size,
        hidden,
        world_seed: wm.world.seed(),
        run_seed,
        chosen_word: chosen,
        chosen_rank: settings.chosen_rank,
        rows,
        ablation_no_disc,
        disc_initial: disc_initial_summary,
        disc_perturbed: disc_perturbed_summary,
        recovery,
    };

    Ok(ExperimentArtifacts {
        report,
        initial,
        initial_ftd,
        perturbed,
        perturbed_ftd,
        perturbed_ftd_nodisc,
        disc_initial,
        disc_perturbed,
        partition,
        records,
    })
}
