//! End-to-end checks of the command-line binary: artifact layout, overwrite
//! protection, exit codes and the machine-readable error payload.

use std::path::Path;
use std::process::Command;

fn revkl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_revkl"))
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        concat!(
            "[world]\nvocab_size = 160\n\n",
            "[corpus]\ntrain_sentences = 400\nvalid_sentences = 80\ntest_sentences = 80\n\n",
            "[model]\nhidden = 16\n\n",
            "[train_lm]\nbatch_size = 128\nmax_epochs = 1\n\n",
            "[train_disc]\nbatch_size = 128\nmax_epochs = 1\n\n",
            "[finetune]\nbatch_size = 128\nmax_epochs = 1\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn full_command_chain_produces_artifacts_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let data = dir.path().join("data");
    let base = |out: &Path| {
        let mut cmd = revkl();
        cmd.args([
            "--profile",
            "ci",
            "--config",
            config.to_str().unwrap(),
            "--seed-world",
            "11",
            "--seed-run",
            "12",
            "--threads",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]);
        cmd
    };

    // gen-data
    let status = base(&data).arg("gen-data").status().unwrap();
    assert!(status.success());
    for file in ["train.txt", "valid.txt", "test.txt", "corpus.json", "start_marginal.bin"] {
        assert!(data.join(file).exists(), "missing {file}");
    }

    // rerunning without --force refuses with exit code 1 and JSON on stderr
    let output = base(&data).arg("gen-data").output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_slice(&output.stderr).expect("stderr is machine-readable JSON");
    assert_eq!(err["kind"], "validation");

    // train
    let lm_out = dir.path().join("lm");
    let status = base(&lm_out)
        .args(["train", "--data", data.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(lm_out.join("lm.ckpt").exists());
    assert!(lm_out.join("train_lm-run.csv").exists());

    // perturb
    let pert_out = dir.path().join("pert");
    let status = base(&pert_out)
        .args([
            "perturb",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            lm_out.join("lm.ckpt").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(pert_out.join("perturbed.ckpt").exists());

    // train-disc
    let disc_out = dir.path().join("disc");
    let status = base(&disc_out)
        .args([
            "train-disc",
            "--data",
            data.to_str().unwrap(),
            "--lm",
            lm_out.join("lm.ckpt").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(disc_out.join("disc.ckpt").exists());

    // finetune (with discriminator)
    let ft_out = dir.path().join("ft");
    let status = base(&ft_out)
        .args([
            "finetune",
            "--data",
            data.to_str().unwrap(),
            "--lm",
            lm_out.join("lm.ckpt").to_str().unwrap(),
            "--disc",
            disc_out.join("disc.ckpt").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(ft_out.join("finetuned.ckpt").exists());
    assert!(ft_out.join("finetune-trace.csv").exists());

    // finetune-ce
    let ce_out = dir.path().join("ce");
    let status = base(&ce_out)
        .args([
            "finetune-ce",
            "--data",
            data.to_str().unwrap(),
            "--lm",
            pert_out.join("perturbed.ckpt").to_str().unwrap(),
            "--lr",
            "0.01",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    // eval: oracle and checkpoint
    let eval_out = dir.path().join("eval");
    let status = base(&eval_out)
        .args(["eval", "--data", data.to_str().unwrap(), "--oracle"])
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(eval_out.join("eval-report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["mean_log_diff"], 0.0);

    let eval2_out = dir.path().join("eval2");
    let status = base(&eval2_out)
        .args([
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            lm_out.join("lm.ckpt").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    // finetune without either discriminator option is a validation error
    let bad_out = dir.path().join("bad");
    let output = base(&bad_out)
        .args([
            "finetune",
            "--data",
            data.to_str().unwrap(),
            "--lm",
            lm_out.join("lm.ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));

    // missing data directory is a runtime error (exit 2)
    let output = base(&dir.path().join("x"))
        .args(["train", "--data", dir.path().join("nope").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&output.stderr).unwrap();
    assert_eq!(err["kind"], "runtime");
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[world\n").unwrap();
    let output = revkl()
        .args([
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
            "propcheck",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}
