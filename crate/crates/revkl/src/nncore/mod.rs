//! Reverse-mode differentiation engine, the 2-layer LSTM shared by the
//! language model and the discriminator, SGD, and the finite-difference
//! gradient oracle.

mod checkpoint;
mod gradcheck;
mod lstm;
mod params;
mod sgd;
mod tape;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta};
pub use gradcheck::{compare_grads, finite_diff_grad, GradCheckReport, REL_CUTOFF};
pub use lstm::{batch_target_log_probs, forward, prefix_word_prob, step_targets, Forward};
pub use params::{HeadKind, LstmLayer, ModelDims, ModelParams, GATES};
pub use sgd::{sgd_step, Plateau, SgdState};
pub use tape::{ln_floor, log_softmax_of, sigmoid, softplus, NodeId, Tape};

/// Which training objective a gradient check should exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Discriminator,
    Finetune,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::CrossEntropy, LossKind::Discriminator, LossKind::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce_loss",
            LossKind::Discriminator => "disc_loss",
            LossKind::Finetune => "finetune_loss",
        }
    }
}

/// Reverse-mode vs central finite differences on a small model, for one of
/// the three training losses. Returns the comparison report; `h` is the
/// finite-difference step.
pub fn gradient_check(
    kind: LossKind,
    dims: ModelDims,
    batch: &[crate::corpus::Sentence],
    seed: u64,
    h: f64,
) -> crate::error::Result<GradCheckReport> {
    use crate::error::Result;

    // frozen companions for the disc / finetune objectives
    let q0_model = ModelParams::init_lm(dims, seed ^ 0x51ed_270f);
    let disc_model = {
        let mut m = ModelParams::init_lm(dims, seed ^ 0x0bad_cafe);
        m.head = HeadKind::Sigmoid;
        m
    };
    let steps = crate::corpus::WORDS_PER_SENTENCE;

    let q0_rows: Vec<ndarray::Array2<f64>> = {
        let fwd = forward(&q0_model, batch)?;
        (0..steps).map(|t| fwd.log_probs(t).mapv(f64::exp)).collect()
    };
    let (q0_targets, r_targets): (Vec<Vec<f64>>, Vec<Vec<f64>>) = {
        let fwd_r = forward(&disc_model, batch)?;
        let mut q0_t = Vec::with_capacity(steps);
        let mut r_t = Vec::with_capacity(steps);
        for t in 0..steps {
            let targets = step_targets(batch, t);
            let r = fwd_r.disc_probs(t, true);
            q0_t.push(
                targets
                    .iter()
                    .enumerate()
                    .map(|(b, &w)| q0_rows[t][[b, w as usize - 1]])
                    .collect(),
            );
            r_t.push(
                targets
                    .iter()
                    .enumerate()
                    .map(|(b, &w)| r[[b, w as usize - 1]])
                    .collect(),
            );
        }
        (q0_t, r_t)
    };

    let loss_of = |params: &ModelParams| -> Result<(Forward, Vec<NodeId>)> {
        let mut fwd = forward(params, batch)?;
        let nodes = match kind {
            LossKind::CrossEntropy => fwd.attach_nll(batch)?,
            LossKind::Discriminator => fwd.attach_disc(batch, q0_rows.clone())?,
            LossKind::Finetune => fwd.attach_finetune(batch, &q0_targets, &r_targets)?,
        };
        Ok((fwd, nodes))
    };

    let subject = match kind {
        LossKind::Discriminator => ModelParams::init_discriminator(dims, seed),
        _ => ModelParams::init_lm(dims, seed),
    };

    let (fwd, nodes) = loss_of(&subject)?;
    let n_positions: usize = nodes.iter().map(|&n| fwd.tape.value(n).nrows()).sum();
    let analytic = fwd.backward(&subject, &nodes, 1.0 / n_positions as f64).to_flat();

    let scalar_loss = |p: &ModelParams| -> f64 {
        let (fwd, nodes) = loss_of(p).expect("forward in finite differences");
        fwd.mean_loss(&nodes)
    };
    let fd = finite_diff_grad(scalar_loss, &subject, h);
    Ok(compare_grads(&analytic, &fd, gradcheck::REL_CUTOFF))
}
