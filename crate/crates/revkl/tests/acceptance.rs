//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Criteria 3 and 4 run on the full-size world (1000 words, 80k training
//! sentences); criteria 5-8 run the complete pipeline on the reduced `ci`
//! profile; criterion 9 checks bitwise reproducibility on a small setup.
//! Heavy fixtures are built once and shared across tests.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use revkl::config::Config;
use revkl::corpus::{word_stats, SplitSizes, TokenCorpus, TrigramWorld, WorldModel};
use revkl::eval::{imbalance_report, EvalReport, OracleSource};
use revkl::nncore::{gradient_check, LossKind, ModelDims};
use revkl::pipeline::{run_experiment, ExperimentArtifacts, ExperimentSettings, PhasePlan};
use revkl::propcheck;

fn pass(criterion: &str, detail: String) {
    println!("[PASS] {criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// shared fixtures
// ---------------------------------------------------------------------------

struct PaperFixture {
    world: WorldModel,
    corpus: TokenCorpus,
    build_time: Duration,
}

fn paper_fixture() -> &'static PaperFixture {
    static FIXTURE: OnceLock<PaperFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let config = Config::paper();
        let start = Instant::now();
        let world = WorldModel::build(TrigramWorld::new(
            config.world.vocab_size,
            config.seeds.world,
        ));
        let corpus = world.sample_corpus(config.corpus.sizes(), config.seeds.run);
        PaperFixture { world, corpus, build_time: start.elapsed() }
    })
}

struct CiFixture {
    artifacts: ExperimentArtifacts,
    world: WorldModel,
    corpus: TokenCorpus,
    pipeline_time: Duration,
}

fn ci_fixture() -> &'static CiFixture {
    static FIXTURE: OnceLock<CiFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let config = Config::ci();
        let start = Instant::now();
        let world = WorldModel::build(TrigramWorld::new(
            config.world.vocab_size,
            config.seeds.world,
        ));
        let corpus = world.sample_corpus(config.corpus.sizes(), config.seeds.run);
        let artifacts = run_experiment(
            &world,
            &corpus,
            config.model.hidden,
            &config.phase_plan(),
            &config.experiment,
            config.seeds.run,
        )
        .expect("ci pipeline");
        CiFixture { artifacts, world, corpus, pipeline_time: start.elapsed() }
    })
}

fn paper_oracle_report() -> &'static EvalReport {
    static REPORT: OnceLock<EvalReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let fixture = paper_fixture();
        let partition = word_stats(&fixture.corpus);
        imbalance_report(
            &OracleSource(&fixture.world),
            &fixture.world,
            &fixture.corpus.test,
            &partition,
        )
        .expect("oracle report")
    })
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let dims = ModelDims::new(20, 8);
    let batch: Vec<revkl::corpus::Sentence> = (0..4)
        .map(|s| {
            let mut sent = [0u32; 11];
            for (t, slot) in sent.iter_mut().enumerate().skip(1) {
                *slot = ((s * 13 + t * 5 + t * t) as u32 % 20) + 1;
            }
            sent
        })
        .collect();
    let mut detail = String::new();
    for kind in LossKind::ALL {
        let report = gradient_check(kind, dims, &batch, 2024, 1e-4).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "criterion 1 FAIL: {} max relative error {}",
            kind.name(),
            report.max_rel_err
        );
        assert!(
            report.max_abs_err_small < 1e-8,
            "criterion 1 FAIL: {} small-coordinate error {}",
            kind.name(),
            report.max_abs_err_small
        );
        detail.push_str(&format!("{} {:.2e}; ", kind.name(), report.max_rel_err));
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "criterion 1 FAIL: took {elapsed:?}");
    pass("criterion 1 (gradient correctness)", format!("{detail}in {elapsed:.2?}"));
}

#[test]
fn criterion_2_proposition_suite() {
    let start = Instant::now();
    let summary = propcheck::run_suite(2024).unwrap();
    assert!(
        summary.stationarity_pass,
        "criterion 2 FAIL: stationarity max |dq| {}",
        summary.stationarity_max_abs
    );
    assert!(
        summary.shrink_pass,
        "criterion 2 FAIL: residual shrink range [{}, {}] outside [6, 10]",
        summary.shrink_min,
        summary.shrink_max
    );
    assert!(
        summary.sign_pass,
        "criterion 2 FAIL: sign agreement {}/{}",
        summary.sign_agreements,
        summary.sign_checked
    );
    assert!(summary.step_ratio_pass && summary.convexity_pass && summary.pass);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "criterion 2 FAIL: took {elapsed:?}");
    pass(
        "criterion 2 (proposition suite)",
        format!(
            "stationarity {:.1e}, shrink [{:.2}, {:.2}], sign {}/{}, in {:.2?}",
            summary.stationarity_max_abs,
            summary.shrink_min,
            summary.shrink_max,
            summary.sign_agreements,
            summary.sign_checked,
            elapsed
        ),
    );
}

#[test]
fn criterion_3_corpus_statistics() {
    let fixture = paper_fixture();
    let (top50, next100) = fixture.corpus.token_frequency_shares(50, 100);
    assert!(
        (top50 - 0.705).abs() <= 0.02,
        "criterion 3 FAIL: top-50 token share {:.4} outside 70.5% +- 2pp",
        top50
    );
    assert!(
        (next100 - 0.147).abs() <= 0.02,
        "criterion 3 FAIL: next-100 token share {:.4} outside 14.7% +- 2pp",
        next100
    );
    assert!(
        fixture.build_time < Duration::from_secs(30 * 60),
        "criterion 3 FAIL: world + corpus build took {:?}",
        fixture.build_time
    );

    // reduced-profile variant of the same operation stays fast
    let ci_start = Instant::now();
    let ci_config = Config::ci();
    let ci_world = WorldModel::build(TrigramWorld::new(
        ci_config.world.vocab_size,
        ci_config.seeds.world ^ 0xc1,
    ));
    let _ci_corpus = ci_world.sample_corpus(ci_config.corpus.sizes(), 7);
    let ci_elapsed = ci_start.elapsed();
    assert!(
        ci_elapsed < Duration::from_secs(120),
        "criterion 3 FAIL: ci-profile generation took {ci_elapsed:?}"
    );
    pass(
        "criterion 3 (corpus statistics)",
        format!(
            "top-50 {:.2}%, next-100 {:.2}%, full build {:.1?}, ci build {:.1?}",
            top50 * 100.0,
            next100 * 100.0,
            fixture.build_time,
            ci_elapsed
        ),
    );
}

#[test]
fn criterion_4_true_distribution_report() {
    let report = paper_oracle_report();
    let ppl_dev = (report.test_ppl - 78.14).abs() / 78.14;
    assert!(
        ppl_dev <= 0.20,
        "criterion 4 FAIL: oracle test perplexity {:.2} deviates {:.1}% from 78.14",
        report.test_ppl,
        ppl_dev * 100.0
    );
    let ratio_dev = (report.ratio - 25.8).abs() / 25.8;
    assert!(
        ratio_dev <= 0.25,
        "criterion 4 FAIL: oracle ratio {:.2} deviates {:.1}% from 25.8",
        report.ratio,
        ratio_dev * 100.0
    );
    assert_eq!(report.mean_log_diff, 0.0, "criterion 4 FAIL: oracle log diff not exactly 0");
    assert_eq!(report.std_log_diff, 0.0, "criterion 4 FAIL: oracle log-diff std not exactly 0");
    pass(
        "criterion 4 (true-distribution report)",
        format!(
            "ppl {:.2} (78.14 +-20%), ratio {:.2} (25.8 +-25%), log q - log p = 0 exactly",
            report.test_ppl, report.ratio
        ),
    );
}

#[test]
fn criterion_5_table_orderings() {
    let fixture = ci_fixture();
    let report = &fixture.artifacts.report;
    let oracle = report.row("true_distribution");
    let initial = report.row("initial");
    let initial_ftd = report.row("initial_ftd");
    let perturbed = report.row("perturbed");
    let perturbed_ftd = report.row("perturbed_ftd");

    for (label, row) in [
        ("initial", initial),
        ("initial_ftd", initial_ftd),
        ("perturbed", perturbed),
        ("perturbed_ftd", perturbed_ftd),
    ] {
        assert!(
            row.ratio > oracle.ratio,
            "criterion 5 FAIL: ratio({label}) = {:.2} not above oracle {:.2}",
            row.ratio,
            oracle.ratio
        );
    }
    assert!(
        perturbed.std_log_diff > initial.std_log_diff,
        "criterion 5 FAIL: std(perturbed) {:.3} <= std(initial) {:.3}",
        perturbed.std_log_diff,
        initial.std_log_diff
    );
    assert!(
        perturbed.test_ppl > initial.test_ppl,
        "criterion 5 FAIL: ppl(perturbed) {:.2} <= ppl(initial) {:.2}",
        perturbed.test_ppl,
        initial.test_ppl
    );
    assert!(
        perturbed_ftd.test_ppl < perturbed.test_ppl,
        "criterion 5 FAIL: fine-tuning did not reduce perturbed test ppl ({:.3} vs {:.3})",
        perturbed_ftd.test_ppl,
        perturbed.test_ppl
    );
    assert!(
        perturbed_ftd.ratio < perturbed.ratio,
        "criterion 5 FAIL: fine-tuning did not reduce perturbed ratio ({:.3} vs {:.3})",
        perturbed_ftd.ratio,
        perturbed.ratio
    );
    let initial_change = (initial_ftd.test_ppl - initial.test_ppl).abs();
    assert!(
        initial_change < 0.2,
        "criterion 5 FAIL: initial-model fine-tuning moved test ppl by {initial_change:.3}"
    );
    assert!(
        fixture.pipeline_time < Duration::from_secs(20 * 60),
        "criterion 5 FAIL: ci pipeline took {:?}",
        fixture.pipeline_time
    );
    pass(
        "criterion 5 (table orderings)",
        format!(
            "oracle ratio {:.2} < models; ppl p {:.2} -> ftd {:.2}; ratio p {:.2} -> {:.2}; initial delta {:.3}; pipeline {:.1?}",
            oracle.ratio,
            perturbed.test_ppl,
            perturbed_ftd.test_ppl,
            perturbed.ratio,
            perturbed_ftd.ratio,
            initial_change,
            fixture.pipeline_time
        ),
    );
}

#[test]
fn criterion_6_perturbation_recovery() {
    let fixture = ci_fixture();
    let recovery = &fixture.artifacts.report.recovery;
    assert!(
        recovery.min_rise_disc >= 100.0,
        "criterion 6 FAIL: smallest chosen-word rise under discriminator fine-tuning is x{:.1}",
        recovery.min_rise_disc
    );
    assert!(
        recovery.except_chosen_rel_change < 0.005,
        "criterion 6 FAIL: except-chosen perplexity changed {:.3}%",
        recovery.except_chosen_rel_change * 100.0
    );
    assert!(
        recovery.max_rise_ce_small < 10.0,
        "criterion 6 FAIL: small-lr CE arm raised chosen-word probability x{:.2}",
        recovery.max_rise_ce_small
    );
    pass(
        "criterion 6 (perturbation recovery)",
        format!(
            "disc rise >= x{:.0}, ce(lr=0.01) rise x{:.2}, except-chosen change {:.3}%",
            recovery.min_rise_disc,
            recovery.max_rise_ce_small,
            recovery.except_chosen_rel_change * 100.0
        ),
    );
}

#[test]
fn criterion_7_discriminator_bound() {
    let fixture = ci_fixture();
    let ln4 = 4f64.ln();
    for (label, disc) in [
        ("initial", &fixture.artifacts.report.disc_initial),
        ("perturbed", &fixture.artifacts.report.disc_perturbed),
    ] {
        assert!(
            (disc.start_val_loss - ln4).abs() < 1e-3,
            "criterion 7 FAIL: {label} discriminator starts at {} (ln4 = {ln4})",
            disc.start_val_loss
        );
        assert!(
            disc.best_val_loss < ln4,
            "criterion 7 FAIL: {label} discriminator best loss {} not below ln4",
            disc.best_val_loss
        );
    }
    pass(
        "criterion 7 (discriminator bound)",
        format!(
            "start {:.6} / {:.6} (ln4 = {:.6}), best {:.4} / {:.4}",
            fixture.artifacts.report.disc_initial.start_val_loss,
            fixture.artifacts.report.disc_perturbed.start_val_loss,
            ln4,
            fixture.artifacts.report.disc_initial.best_val_loss,
            fixture.artifacts.report.disc_perturbed.best_val_loss
        ),
    );
}

#[test]
fn criterion_8_ablation_ordering() {
    let fixture = ci_fixture();
    let report = &fixture.artifacts.report;
    let with_disc = report.row("perturbed_ftd").test_ppl;
    let without_disc = report.ablation_no_disc.test_ppl;
    assert!(
        with_disc < without_disc,
        "criterion 8 FAIL: trained-discriminator arm ({with_disc:.3}) not better than r=1/2 arm ({without_disc:.3})"
    );
    pass(
        "criterion 8 (ablation ordering)",
        format!("with disc {:.3} < without disc {:.3}", with_disc, without_disc),
    );
}

#[test]
fn criterion_9_determinism() {
    // bitwise reproducibility of the full experiment report; run on a small
    // configuration since the property is scale-independent
    let world = WorldModel::build(TrigramWorld::new(160, 4242));
    let corpus = world.sample_corpus(SplitSizes { train: 3000, valid: 500, test: 500 }, 17);
    let schedule = revkl::pipeline::TrainConfig {
        lr: 1.0,
        clip: 1.0,
        batch_size: 512,
        plateau_decay: 0.1,
        plateau_min_rel_improve: 0.001,
        max_epochs: 2,
        stop_lr: 1e-4,
        fixed_lr: false,
    };
    let plan = PhasePlan {
        lm: schedule.clone(),
        disc: schedule.clone(),
        finetune: revkl::pipeline::TrainConfig {
            plateau_min_rel_improve: 0.0,
            ..schedule.clone()
        },
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
        let artifacts = run_experiment(&world, &corpus, 32, &plan, &settings, 77).unwrap();
        serde_json::to_vec_pretty(&artifacts.report).unwrap()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second, "criterion 9 FAIL: reports differ between identical runs");
    pass(
        "criterion 9 (determinism)",
        format!("two identical runs produced byte-identical {}-byte reports", first.len()),
    );
}
