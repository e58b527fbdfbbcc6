//! Command-line entry points: thin wrappers that resolve a configuration,
//! write a manifest, and delegate to the library.
//!
//! Every command is deterministic given `--seed-world` / `--seed-run` and
//! refuses to overwrite existing outputs without `--force`. Exit codes:
//! 0 success, 1 validation error, 2 runtime error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Config, Profile, RunManifest};
use crate::corpus::{
    read_corpus, word_stats, write_corpus, TokenCorpus, TrigramWorld, WorldModel,
};
use crate::error::{Error, Result};
use crate::eval::{imbalance_report, ModelSource, OracleSource};
use crate::nncore::{
    gradient_check, load_checkpoint, save_checkpoint, CheckpointMeta, HeadKind, LossKind,
    ModelDims, ModelParams,
};
use crate::pipeline::{self, find_watched, RunRecord, WatchedPair};

#[derive(Parser, Debug)]
#[command(
    name = "revkl",
    version,
    about = "Discriminator-guided reverse-KL fine-tuning on an exactly solvable trigram world"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Base profile providing every default.
    #[arg(long, global = true, default_value = "paper")]
    pub profile: Profile,
    /// Partial TOML config overlaid on the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override the world seed.
    #[arg(long, global = true)]
    pub seed_world: Option<u64>,
    /// Override the run seed.
    #[arg(long, global = true)]
    pub seed_run: Option<u64>,
    /// Deterministic worker count for parallel sections.
    #[arg(long, global = true, default_value_t = 2)]
    pub threads: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic world cache and corpus splits.
    GenData,
    /// Train the initial language model with cross-entropy.
    Train {
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Set the chosen word's output bias to a large negative value.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        /// Language-model checkpoint to perturb.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Explicit word id; defaults to the configured frequency rank.
        #[arg(long)]
        word: Option<u32>,
    },
    /// Train the discriminator against a frozen language model.
    TrainDisc {
        #[arg(long)]
        data: PathBuf,
        /// Frozen q0 checkpoint.
        #[arg(long)]
        lm: PathBuf,
    },
    /// Fine-tune a copy of the model with the discriminator-estimated loss.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint that provides both the starting point and frozen q0.
        #[arg(long)]
        lm: PathBuf,
        /// Trained discriminator checkpoint.
        #[arg(long, conflicts_with = "without_disc")]
        disc: Option<PathBuf>,
        /// Use the constant r = 1/2 instead of a discriminator.
        #[arg(long)]
        without_disc: bool,
    },
    /// Continue training with plain cross-entropy at a fixed learning rate.
    FinetuneCe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        /// Fixed learning rate for the arm.
        #[arg(long)]
        lr: f64,
        /// Epoch budget.
        #[arg(long, default_value_t = 1)]
        epochs: usize,
    },
    /// Evaluate a checkpoint (or the exact oracle) against the world.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the true distribution itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Verify the gradient-scale proposition numerically.
    Propcheck,
    /// Compare reverse-mode gradients against finite differences.
    Gradcheck,
    /// Run the full pipeline and produce the results table.
    ReproduceTable1 {
        /// Reuse an existing gen-data directory instead of sampling afresh.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = Config::load(cli.common.profile, cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed_world {
        config.seeds.world = seed;
    }
    if let Some(seed) = cli.common.seed_run {
        config.seeds.run = seed;
    }
    config.validate()?;
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads.max(1))
        .build_global();

    let out = &cli.common.out;
    match cli.command {
        Command::GenData => cmd_gen_data(&config, out, cli.common.force, cli.common.threads),
        Command::Train { data } => cmd_train(&config, &data, out, cli.common.force, cli.common.threads),
        Command::Perturb { data, checkpoint, word } => {
            cmd_perturb(&config, &data, &checkpoint, word, out, cli.common.force, cli.common.threads)
        }
        Command::TrainDisc { data, lm } => {
            cmd_train_disc(&config, &data, &lm, out, cli.common.force, cli.common.threads)
        }
        Command::Finetune { data, lm, disc, without_disc } => cmd_finetune(
            &config,
            &data,
            &lm,
            disc.as_deref(),
            without_disc,
            out,
            cli.common.force,
            cli.common.threads,
        ),
        Command::FinetuneCe { data, lm, lr, epochs } => {
            cmd_finetune_ce(&config, &data, &lm, lr, epochs, out, cli.common.force, cli.common.threads)
        }
        Command::Eval { data, checkpoint, oracle } => cmd_eval(
            &config,
            &data,
            checkpoint.as_deref(),
            oracle,
            out,
            cli.common.force,
            cli.common.threads,
        ),
        Command::Propcheck => cmd_propcheck(&config, out, cli.common.force, cli.common.threads),
        Command::Gradcheck => cmd_gradcheck(&config, out, cli.common.force, cli.common.threads),
        Command::ReproduceTable1 { data } => cmd_reproduce_table1(
            &config,
            data.as_deref(),
            out,
            cli.common.force,
            cli.common.threads,
        ),
    }
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.into()));
    }
    Ok(())
}

fn write_manifest(
    command: &str,
    config: &Config,
    inputs: &[&Path],
    out: &Path,
    threads: usize,
) -> Result<()> {
    ensure_out(out)?;
    RunManifest::new(command, config, inputs, out, threads)
        .write(&out.join(format!("manifest-{command}.json")))
}

pub const MARGINAL_CACHE_FILE: &str = "start_marginal.bin";

fn load_world(config: &Config, data: &Path) -> Result<WorldModel> {
    let world = TrigramWorld::new(config.world.vocab_size, config.seeds.world);
    WorldModel::load_or_build(world, &data.join(MARGINAL_CACHE_FILE))
}

fn load_data(config: &Config, data: &Path) -> Result<(WorldModel, TokenCorpus)> {
    let corpus = read_corpus(data)?;
    if corpus.vocab_size != config.world.vocab_size {
        return Err(Error::Checkpoint(format!(
            "corpus has vocab {}, config expects {}",
            corpus.vocab_size, config.world.vocab_size
        )));
    }
    if corpus.world_seed != config.seeds.world {
        return Err(Error::Checkpoint(format!(
            "corpus was sampled from world seed {}, config says {}",
            corpus.world_seed, config.seeds.world
        )));
    }
    let wm = load_world(config, data)?;
    Ok((wm, corpus))
}

fn dims_of(config: &Config) -> ModelDims {
    ModelDims::new(config.world.vocab_size, config.model.hidden)
}

fn load_model(path: &Path, config: &Config, head: HeadKind) -> Result<ModelParams> {
    let (params, _meta) =
        crate::nncore::load_checkpoint_expecting(path, dims_of(config), head)?;
    Ok(params)
}

fn meta(phase: &str, config: &Config, record: Option<&RunRecord>) -> CheckpointMeta {
    CheckpointMeta {
        phase: phase.to_string(),
        world_seed: config.seeds.world,
        run_seed: config.seeds.run,
        epochs: record.map(|r| r.completed_epochs as u32).unwrap_or(0),
        best_val_metric: record.map(|r| r.best_val_loss).unwrap_or(f64::NAN),
    }
}

fn save_run(out: &Path, name: &str, record: &RunRecord) -> Result<()> {
    record.write_run_csv(&out.join(format!("{name}-run.csv")))?;
    if !record.traces.is_empty() {
        record.write_trace_csv(&out.join(format!("{name}-trace.csv")))?;
    }
    Ok(())
}

/// Watched pairs for standalone fine-tuning commands: occurrences of the
/// configured chosen word plus occurrences of the top frequent word.
fn default_watched(config: &Config, corpus: &TokenCorpus) -> Vec<WatchedPair> {
    let partition = word_stats(corpus);
    let chosen = partition.word_at_rank(config.experiment.chosen_rank);
    let mut watched = find_watched(corpus, chosen, config.experiment.watched_count);
    watched.extend(find_watched(
        corpus,
        partition.word_at_rank(1),
        config.experiment.watched_count,
    ));
    watched
}

fn cmd_gen_data(config: &Config, out: &Path, force: bool, threads: usize) -> Result<()> {
    refuse_overwrite(&out.join("corpus.json"), force)?;
    write_manifest("gen-data", config, &[], out, threads)?;
    let world = TrigramWorld::new(config.world.vocab_size, config.seeds.world);
    let cache_path = out.join(MARGINAL_CACHE_FILE);
    if force && cache_path.exists() {
        std::fs::remove_file(&cache_path).map_err(|e| Error::io(&cache_path, e))?;
    }
    let wm = WorldModel::load_or_build(world, &cache_path)?;
    let corpus = wm.sample_corpus(config.corpus.sizes(), config.seeds.run);
    write_corpus(out, &corpus, config.world.gamma)?;
    let (top50, next100) = corpus.token_frequency_shares(50, 100);
    println!(
        "gen-data: {} sentences ({} vocab) -> {}",
        corpus.train.len() + corpus.valid.len() + corpus.test.len(),
        corpus.vocab_size,
        out.display()
    );
    println!(
        "token shares: top-50 {:.2}%, next-100 {:.2}%",
        top50 * 100.0,
        next100 * 100.0
    );
    Ok(())
}

fn cmd_train(config: &Config, data: &Path, out: &Path, force: bool, threads: usize) -> Result<()> {
    let ckpt_path = out.join("lm.ckpt");
    refuse_overwrite(&ckpt_path, force)?;
    write_manifest("train", config, &[data], out, threads)?;
    let (_wm, corpus) = load_data(config, data)?;
    let init = ModelParams::init_lm(dims_of(config), config.seeds.run ^ 0x11);
    let (params, record) = pipeline::train_lm(
        init,
        &corpus,
        &config.train_lm,
        config.seeds.run ^ 0x100,
        &[],
    )?;
    save_checkpoint(&ckpt_path, &params, &meta("lm", config, Some(&record)))?;
    save_run(out, "train_lm", &record)?;
    println!(
        "train: best validation perplexity {:.3} at epoch {} -> {}",
        record.best_val_loss.exp(),
        record.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_perturb(
    config: &Config,
    data: &Path,
    checkpoint: &Path,
    word: Option<u32>,
    out: &Path,
    force: bool,
    threads: usize,
) -> Result<()> {
    let out_path = out.join("perturbed.ckpt");
    refuse_overwrite(&out_path, force)?;
    write_manifest("perturb", config, &[data, checkpoint], out, threads)?;
    let corpus = read_corpus(data)?;
    let mut params = load_model(checkpoint, config, HeadKind::Softmax)?;
    let chosen = match word {
        Some(w) => w,
        None => word_stats(&corpus).word_at_rank(config.experiment.chosen_rank),
    };
    params.perturb_bias(chosen, config.experiment.perturb_value)?;
    let (_, old_meta) = load_checkpoint(checkpoint)?;
    let mut new_meta = old_meta;
    new_meta.phase = format!("{}+perturbed", new_meta.phase);
    save_checkpoint(&out_path, &params, &new_meta)?;
    println!(
        "perturb: word {chosen} bias set to {} -> {}",
        config.experiment.perturb_value,
        out_path.display()
    );
    Ok(())
}

fn cmd_train_disc(
    config: &Config,
    data: &Path,
    lm: &Path,
    out: &Path,
    force: bool,
    threads: usize,
) -> Result<()> {
    let ckpt_path = out.join("disc.ckpt");
    refuse_overwrite(&ckpt_path, force)?;
    write_manifest("train-disc", config, &[data, lm], out, threads)?;
    let (_wm, corpus) = load_data(config, data)?;
    let q0 = load_model(lm, config, HeadKind::Softmax)?;
    let init = ModelParams::init_discriminator(dims_of(config), config.seeds.run ^ 0x22);
    let (disc, record) = pipeline::train_discriminator(
        init,
        &q0,
        &corpus,
        &config.train_disc,
        config.seeds.run ^ 0x200,
    )?;
    save_checkpoint(&ckpt_path, &disc, &meta("disc", config, Some(&record)))?;
    save_run(out, "train_disc", &record)?;
    println!(
        "train-disc: start loss {:.6} (ln4 = {:.6}), best {:.6} -> {}",
        record.epochs[0].val_loss,
        4f64.ln(),
        record.best_val_loss,
        ckpt_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    config: &Config,
    data: &Path,
    lm: &Path,
    disc: Option<&Path>,
    without_disc: bool,
    out: &Path,
    force: bool,
    threads: usize,
) -> Result<()> {
    if disc.is_none() && !without_disc {
        return Err(Error::Invalid(
            "finetune needs --disc <checkpoint> or --without-disc".into(),
        ));
    }
    let ckpt_path = out.join("finetuned.ckpt");
    refuse_overwrite(&ckpt_path, force)?;
    let mut inputs: Vec<&Path> = vec![data, lm];
    if let Some(d) = disc {
        inputs.push(d);
    }
    write_manifest("finetune", config, &inputs, out, threads)?;
    let (_wm, corpus) = load_data(config, data)?;
    let q0 = load_model(lm, config, HeadKind::Softmax)?;
    let disc_params = disc
        .map(|p| load_model(p, config, HeadKind::Sigmoid))
        .transpose()?;
    let watched = default_watched(config, &corpus);
    let (theta, record) = pipeline::finetune(
        q0.clone(),
        &q0,
        disc_params.as_ref(),
        &corpus,
        &config.finetune,
        config.seeds.run ^ 0x300,
        &watched,
    )?;
    save_checkpoint(&ckpt_path, &theta, &meta("finetune", config, Some(&record)))?;
    save_run(out, "finetune", &record)?;
    println!(
        "finetune: best validation loss {:.6} at epoch {} -> {}",
        record.best_val_loss,
        record.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune_ce(
    config: &Config,
    data: &Path,
    lm: &Path,
    lr: f64,
    epochs: usize,
    out: &Path,
    force: bool,
    threads: usize,
) -> Result<()> {
    let ckpt_path = out.join("finetuned-ce.ckpt");
    refuse_overwrite(&ckpt_path, force)?;
    write_manifest("finetune-ce", config, &[data, lm], out, threads)?;
    let (_wm, corpus) = load_data(config, data)?;
    let theta0 = load_model(lm, config, HeadKind::Softmax)?;
    let watched = default_watched(config, &corpus);
    let arm_config = crate::pipeline::TrainConfig {
        lr,
        max_epochs: epochs,
        ..config.finetune.clone()
    };
    let (theta, record) = pipeline::finetune_ce(
        theta0,
        &corpus,
        &arm_config,
        config.seeds.run ^ 0x303,
        &watched,
    )?;
    save_checkpoint(&ckpt_path, &theta, &meta("finetune-ce", config, Some(&record)))?;
    save_run(out, "finetune_ce", &record)?;
    println!(
        "finetune-ce: lr {lr}, {} epochs -> {}",
        record.completed_epochs,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_eval(
    config: &Config,
    data: &Path,
    checkpoint: Option<&Path>,
    oracle: bool,
    out: &Path,
    force: bool,
    threads: usize,
) -> Result<()> {
    if checkpoint.is_none() && !oracle {
        return Err(Error::Invalid("eval needs --checkpoint <path> or --oracle".into()));
    }
    let json_path = out.join("eval-report.json");
    refuse_overwrite(&json_path, force)?;
    let mut inputs: Vec<&Path> = vec![data];
    if let Some(c) = checkpoint {
        inputs.push(c);
    }
    write_manifest("eval", config, &inputs, out, threads)?;
    let (wm, corpus) = load_data(config, data)?;
    let partition = word_stats(&corpus);
    let report = match checkpoint {
        Some(path) => {
            let params = load_model(path, config, HeadKind::Softmax)?;
            imbalance_report(&ModelSource::new(&params), &wm, &corpus.test, &partition)?
        }
        None => imbalance_report(&OracleSource(&wm), &wm, &corpus.test, &partition)?,
    };
    crate::eval::write_report_json(&json_path, &report)?;
    crate::eval::write_report_csv(&out.join("eval-report.csv"), &report)?;
    println!(
        "eval: test ppl {:.2}, freq {:.2}, rare {:.2}, ratio {:.2}, log q - log p {:.3} +- {:.3}",
        report.test_ppl,
        report.freq_ppl,
        report.rare_ppl,
        report.ratio,
        report.mean_log_diff,
        report.std_log_diff
    );
    Ok(())
}

fn cmd_propcheck(config: &Config, out: &Path, force: bool, threads: usize) -> Result<()> {
    let summary_path = out.join("propcheck-summary.json");
    refuse_overwrite(&summary_path, force)?;
    write_manifest("propcheck", config, &[], out, threads)?;
    let rows = crate::propcheck::sweep();
    crate::propcheck::write_sweep_csv(&out.join("propcheck-sweep.csv"), &rows)?;
    let summary = crate::propcheck::run_suite(config.seeds.run)?;
    let file = std::fs::File::create(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary)?;
    println!(
        "propcheck: stationarity max |dq| {:.2e}, residual shrink [{:.2}, {:.2}], sign {}/{} -> pass: {}",
        summary.stationarity_max_abs,
        summary.shrink_min,
        summary.shrink_max,
        summary.sign_agreements,
        summary.sign_checked,
        summary.pass
    );
    if !summary.pass {
        return Err(Error::NonFinite { context: "propcheck suite failed".into() });
    }
    Ok(())
}

fn cmd_gradcheck(config: &Config, out: &Path, force: bool, threads: usize) -> Result<()> {
    let json_path = out.join("gradcheck.json");
    refuse_overwrite(&json_path, force)?;
    write_manifest("gradcheck", config, &[], out, threads)?;
    let dims = ModelDims::new(20, 8);
    let batch: Vec<crate::corpus::Sentence> = (0..4)
        .map(|s| {
            let mut sent = [0u32; crate::corpus::SENTENCE_TOKENS];
            for (t, slot) in sent.iter_mut().enumerate().skip(1) {
                *slot = ((s * 13 + t * 5 + t * t) as u32 % 20) + 1;
            }
            sent
        })
        .collect();
    let mut results = serde_json::Map::new();
    let mut worst = 0.0f64;
    for kind in LossKind::ALL {
        let report = gradient_check(kind, dims, &batch, config.seeds.run, 1e-4)?;
        worst = worst.max(report.max_rel_err);
        results.insert(
            kind.name().to_string(),
            serde_json::json!({
                "max_rel_err": report.max_rel_err,
                "max_abs_err_small": report.max_abs_err_small,
                "compared": report.compared,
            }),
        );
        println!(
            "gradcheck {}: max relative error {:.3e}, small-coordinate abs {:.3e}",
            kind.name(),
            report.max_rel_err,
            report.max_abs_err_small
        );
    }
    let pass = worst < 1e-4;
    results.insert("pass".into(), serde_json::Value::Bool(pass));
    let file = std::fs::File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &results)?;
    println!("gradcheck: max relative error {worst:.3e} -> pass: {pass}");
    if !pass {
        return Err(Error::NonFinite { context: "gradient check failed".into() });
    }
    Ok(())
}

fn cmd_reproduce_table1(
    config: &Config,
    data: Option<&Path>,
    out: &Path,
    force: bool,
    threads: usize,
) -> Result<()> {
    let report_path = out.join("report.json");
    refuse_overwrite(&report_path, force)?;
    let inputs: Vec<&Path> = data.iter().map(|p| *p as &Path).collect();
    write_manifest("reproduce-table1", config, &inputs, out, threads)?;
    let (wm, corpus) = match data {
        Some(dir) => load_data(config, dir)?,
        None => {
            let data_dir = out.join("data");
            ensure_out(&data_dir)?;
            let world = TrigramWorld::new(config.world.vocab_size, config.seeds.world);
            let wm = WorldModel::load_or_build(world, &data_dir.join(MARGINAL_CACHE_FILE))?;
            let corpus = wm.sample_corpus(config.corpus.sizes(), config.seeds.run);
            write_corpus(&data_dir, &corpus, config.world.gamma)?;
            (wm, corpus)
        }
    };
    let artifacts = pipeline::run_experiment(
        &wm,
        &corpus,
        config.model.hidden,
        &config.phase_plan(),
        &config.experiment,
        config.seeds.run,
    )?;
    artifacts.report.write_json(&report_path)?;
    artifacts.report.write_csv(&out.join("report.csv"))?;

    let ckpt_dir = out.join("checkpoints");
    ensure_out(&ckpt_dir)?;
    for (name, params) in [
        ("initial", &artifacts.initial),
        ("initial_ftd", &artifacts.initial_ftd),
        ("perturbed", &artifacts.perturbed),
        ("perturbed_ftd", &artifacts.perturbed_ftd),
        ("perturbed_ftd_nodisc", &artifacts.perturbed_ftd_nodisc),
        ("disc_initial", &artifacts.disc_initial),
        ("disc_perturbed", &artifacts.disc_perturbed),
    ] {
        save_checkpoint(
            &ckpt_dir.join(format!("{name}.ckpt")),
            params,
            &meta(name, config, None),
        )?;
    }
    let runs_dir = out.join("runs");
    ensure_out(&runs_dir)?;
    for (name, record) in &artifacts.records {
        save_run(&runs_dir, name, record)?;
    }

    for row in &artifacts.report.rows {
        println!(
            "{:<20} test ppl {:>8.2}  freq {:>7.2}  rare {:>9.2}  ratio {:>6.2}  logq-logp {:>7.3} +- {:.3}",
            row.label,
            row.report.test_ppl,
            row.report.freq_ppl,
            row.report.rare_ppl,
            row.report.ratio,
            row.report.mean_log_diff,
            row.report.std_log_diff
        );
    }
    println!(
        "chosen word {}: min disc-finetune rise x{:.1}, ce small-lr rise x{:.2}, except-chosen ppl change {:.3}%",
        artifacts.report.chosen_word,
        artifacts.report.recovery.min_rise_disc,
        artifacts.report.recovery.max_rise_ce_small,
        artifacts.report.recovery.except_chosen_rel_change * 100.0
    );
    println!("report -> {}", report_path.display());
    Ok(())
}
