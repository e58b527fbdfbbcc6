//! SGD with global-norm gradient clipping and plateau learning-rate decay.

use super::params::ModelParams;
use crate::error::{Error, Result};

/// Optimizer state: current learning rate, clip threshold, and the plateau
/// bookkeeping. The learning rate only ever decreases.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub lr: f64,
    pub clip: f64,
    pub decay_factor: f64,
    /// An epoch must improve the best validation metric by more than this
    /// relative amount to count as progress.
    pub min_rel_improve: f64,
    pub stop_lr: f64,
    best_val: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plateau {
    Improved,
    Decayed,
}

impl SgdState {
    pub fn new(lr: f64, clip: f64, decay_factor: f64, min_rel_improve: f64, stop_lr: f64) -> Self {
        assert!(lr > 0.0 && clip > 0.0);
        SgdState { lr, clip, decay_factor, min_rel_improve, stop_lr, best_val: None }
    }

    pub fn best_val(&self) -> Option<f64> {
        self.best_val
    }

    /// Record an end-of-epoch validation metric (lower is better). Without
    /// sufficient relative improvement over the best seen so far the learning
    /// rate is multiplied by the decay factor.
    pub fn observe_validation(&mut self, metric: f64) -> Plateau {
        let improved = match self.best_val {
            None => true,
            Some(best) => metric < best * (1.0 - self.min_rel_improve),
        };
        if self.best_val.fold_min(metric) {
            // keep the literal best for reporting even when the improvement
            // was too small to count as progress
        }
        if improved {
            Plateau::Improved
        } else {
            self.lr *= self.decay_factor;
            Plateau::Decayed
        }
    }

    /// True once the learning rate has decayed to the stop threshold.
    /// The small slack absorbs floating-point drift in repeated `* 0.1`.
    pub fn should_stop(&self) -> bool {
        self.lr <= self.stop_lr * (1.0 + 1e-9)
    }
}

trait FoldMin {
    fn fold_min(&mut self, value: f64) -> bool;
}

impl FoldMin for Option<f64> {
    fn fold_min(&mut self, value: f64) -> bool {
        match *self {
            Some(best) if best <= value => false,
            _ => {
                *self = Some(value);
                true
            }
        }
    }
}

/// One SGD update: rescale the gradient to the clip threshold when its global
/// L2 norm exceeds it, then `params -= lr * grads`. Non-finite gradients are
/// a hard error, never silently applied.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, state: &SgdState) -> Result<()> {
    let sq = grads.sq_norm();
    if !sq.is_finite() {
        return Err(Error::NonFinite { context: "gradient norm in sgd_step".into() });
    }
    let norm = sq.sqrt();
    let scale = if norm > state.clip { state.clip / norm } else { 1.0 };
    params.add_scaled(grads, -state.lr * scale);
    Ok(())
}
