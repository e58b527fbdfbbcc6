//! Numerical verification of the gradient-scale proposition: the combined
//! per-word loss `-log q + (q/p_hat) log(q/p_hat)` is stationary at
//! `q = p_hat`, its derivative expands as `-+2eps/p_hat^2 - (3/2) eps^2/p_hat^3
//! + o(eps^2)` on the two sides, the effective step size carries the extra
//! `eps/p_hat` factor relative to plain cross-entropy, and the sign of the
//! gradient step flips exactly at `q = p_hat`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::nncore::{forward, step_targets, ModelDims, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// `q = p_hat - eps`
    Below,
    /// `q = p_hat + eps`
    Above,
}

/// A probe point for the Taylor expansion checks.
#[derive(Debug, Clone, Copy)]
pub struct PropPoint {
    pub p_hat: f64,
    pub eps: f64,
    pub side: Side,
}

impl PropPoint {
    pub fn new(p_hat: f64, eps: f64, side: Side) -> Self {
        let point = PropPoint { p_hat, eps, side };
        let q = point.q();
        assert!(
            p_hat > 0.0 && p_hat < 1.0 && eps >= 0.0 && q > 0.0 && q < 1.0,
            "invalid probe point: p_hat {p_hat}, eps {eps}"
        );
        point
    }

    pub fn q(&self) -> f64 {
        match self.side {
            Side::Below => self.p_hat - self.eps,
            Side::Above => self.p_hat + self.eps,
        }
    }
}

/// The per-word fine-tuning loss restricted to one probability:
/// `-log q + (q/p_hat) log(q/p_hat)`.
pub fn combined_loss(q: f64, p_hat: f64) -> f64 {
    assert!(q > 0.0 && q < 1.0 && p_hat > 0.0 && p_hat < 1.0, "domain violation");
    let ratio = q / p_hat;
    -q.ln() + ratio * ratio.ln()
}

/// Exact derivative of [`combined_loss`] with respect to q:
/// `-1/q + (1/p_hat)(1 + log(q/p_hat))`. Multiplied by the direction
/// `v = grad_theta q` it gives the parameter-space gradient.
pub fn combined_loss_dq(q: f64, p_hat: f64) -> f64 {
    assert!(q > 0.0 && q < 1.0 && p_hat > 0.0 && p_hat < 1.0, "domain violation");
    -1.0 / q + (1.0 / p_hat) * (1.0 + (q / p_hat).ln())
}

/// The quadratic Taylor polynomial of the derivative around `q = p_hat`:
/// `-2eps/p^2 - 1.5 eps^2/p^3` below, sign-flipped leading term above.
pub fn taylor_predicted(point: &PropPoint) -> f64 {
    let p = point.p_hat;
    let eps = point.eps;
    let lead = 2.0 * eps / (p * p);
    let quad = 1.5 * eps * eps / (p * p * p);
    match point.side {
        Side::Below => -lead - quad,
        Side::Above => lead - quad,
    }
}

/// Exact derivative minus the quadratic Taylor prediction; shrinks cubically
/// in eps.
pub fn taylor_residual(point: &PropPoint) -> f64 {
    combined_loss_dq(point.q(), point.p_hat) - taylor_predicted(point)
}

/// Step-size ratio against plain cross-entropy at the same point:
/// `|dL/dq| / |d(-log q)/dq| = |dL/dq| * q`. At leading order this equals
/// `2 eps / p_hat`.
pub fn step_scale_ratio(point: &PropPoint) -> f64 {
    let q = point.q();
    combined_loss_dq(q, point.p_hat).abs() * q
}

pub const SWEEP_P_HATS: [f64; 4] = [0.01, 0.1, 0.5, 0.9];
pub const SWEEP_EPS_FRACTIONS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub p_hat: f64,
    pub eps: f64,
    pub side: Side,
    pub exact: f64,
    pub predicted: f64,
    pub residual: f64,
    pub step_ratio: f64,
}

/// Evaluate the full grid of probe points, both sides, each eps and its half
/// (the halved points feed the cubic-shrink check).
pub fn sweep() -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &p_hat in &SWEEP_P_HATS {
        for &frac in &SWEEP_EPS_FRACTIONS {
            for &eps in &[frac * p_hat, frac * p_hat / 2.0] {
                for side in [Side::Below, Side::Above] {
                    let point = PropPoint::new(p_hat, eps, side);
                    rows.push(SweepRow {
                        p_hat,
                        eps,
                        side,
                        exact: combined_loss_dq(point.q(), p_hat),
                        predicted: taylor_predicted(&point),
                        residual: taylor_residual(&point),
                        step_ratio: step_scale_ratio(&point),
                    });
                }
            }
        }
    }
    rows
}

/// `|residual(eps)| / |residual(eps/2)|` for every sweep cell; cubic decay
/// puts the factor near 8.
pub fn residual_shrink_factors() -> Vec<(f64, f64, Side, f64)> {
    let mut out = Vec::new();
    for &p_hat in &SWEEP_P_HATS {
        for &frac in &SWEEP_EPS_FRACTIONS {
            for side in [Side::Below, Side::Above] {
                let eps = frac * p_hat;
                let full = taylor_residual(&PropPoint::new(p_hat, eps, side)).abs();
                let half = taylor_residual(&PropPoint::new(p_hat, eps / 2.0, side)).abs();
                out.push((p_hat, eps, side, full / half));
            }
        }
    }
    out
}

/// Max |derivative| at `q = p_hat` over `n` seeded random points.
pub fn stationarity_max_abs(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        worst = worst.max(combined_loss_dq(p, p).abs());
    }
    worst
}

/// Positive second differences of the combined loss on a q grid.
pub fn convexity_holds(p_hat: f64) -> bool {
    let h = 1e-4;
    let mut q = 0.01f64;
    while q < 0.99 {
        let second = combined_loss(q - h, p_hat) - 2.0 * combined_loss(q, p_hat)
            + combined_loss(q + h, p_hat);
        if second <= 0.0 {
            return false;
        }
        q += 0.02;
    }
    true
}

/// Outcome of the model-level sign check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DirectionCheck {
    pub positions: usize,
    pub checked: usize,
    pub agreements: usize,
    pub dead_zone_skipped: usize,
}

impl DirectionCheck {
    pub fn all_agree(&self) -> bool {
        self.checked > 0 && self.agreements == self.checked
    }
}

const DEAD_ZONE: f64 = 1e-6;

/// For every position of a frozen batch, compare the sign of the directional
/// derivative of the fine-tuning loss along `v = grad_theta q_theta(w*|c)`
/// with the sign of `q_theta - p_hat`. The derivative must push q up exactly
/// when `q < p_hat` and down when `q > p_hat`, even at the true next word.
///
/// `q0_r_targets` supplies the constant `(q0(w*|c), r(w*|c))` per position,
/// outer index = sentence, inner = position.
pub fn direction_sign_check(
    theta: &ModelParams,
    batch: &[Sentence],
    q0_r_targets: &[Vec<(f64, f64)>],
) -> Result<DirectionCheck> {
    if q0_r_targets.len() != batch.len() {
        return Err(Error::Invalid("constants shape mismatch".into()));
    }
    let steps = crate::corpus::WORDS_PER_SENTENCE;
    let mut report = DirectionCheck {
        positions: batch.len() * steps,
        checked: 0,
        agreements: 0,
        dead_zone_skipped: 0,
    };
    for (s, sentence) in batch.iter().enumerate() {
        let one = [*sentence];
        let mut fwd = forward(theta, &one)?;
        let prob_nodes = fwd.attach_target_prob(&one)?;
        for t in 0..steps {
            let (q0_t, r_t) = q0_r_targets[s][t];
            let q_t = fwd.tape.value(prob_nodes[t])[[0, 0]];
            let r = crate::objectives::clamp_r(r_t);
            let p_hat = q0_t.max(crate::objectives::PROB_FLOOR) * (1.0 - r) / r;
            if (q_t - p_hat).abs() < DEAD_ZONE {
                report.dead_zone_skipped += 1;
                continue;
            }
            let targets = step_targets(&one, t);
            let ft_node =
                fwd.tape
                    .finetune_loss(fwd.step_logits[t], targets, &[q0_t], &[r_t])?;
            let grad_loss = fwd.tape.backward(theta, &[(ft_node, 1.0)]).to_flat();
            let v = fwd.tape.backward(theta, &[(prob_nodes[t], 1.0)]).to_flat();
            let dot: f64 = grad_loss.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let expected_positive = q_t > p_hat;
            report.checked += 1;
            if (dot > 0.0) == expected_positive && dot != 0.0 {
                report.agreements += 1;
            }
        }
    }
    Ok(report)
}

/// Summary of the whole verification suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropcheckSummary {
    pub stationarity_max_abs: f64,
    pub stationarity_pass: bool,
    pub shrink_min: f64,
    pub shrink_max: f64,
    pub shrink_pass: bool,
    pub step_ratio_max_rel_dev: f64,
    pub step_ratio_pass: bool,
    pub convexity_pass: bool,
    pub sign_checked: usize,
    pub sign_agreements: usize,
    pub sign_pass: bool,
    pub pass: bool,
}

pub const SHRINK_RANGE: (f64, f64) = (6.0, 10.0);

/// Run every check at the default scales.
pub fn run_suite(seed: u64) -> Result<PropcheckSummary> {
    let stationarity_max_abs = stationarity_max_abs(10_000, seed);
    let stationarity_pass = stationarity_max_abs < 1e-12;

    let factors = residual_shrink_factors();
    let shrink_min = factors.iter().map(|f| f.3).fold(f64::INFINITY, f64::min);
    let shrink_max = factors.iter().map(|f| f.3).fold(0.0, f64::max);
    let shrink_pass = shrink_min >= SHRINK_RANGE.0 && shrink_max <= SHRINK_RANGE.1;

    // linear scale of the step ratio: 2 eps / p_hat within 5% for eps <= p/100
    let mut step_ratio_max_rel_dev = 0.0f64;
    for &p_hat in &SWEEP_P_HATS {
        for &frac in &[1e-2, 5e-3, 1e-3] {
            for side in [Side::Below, Side::Above] {
                let point = PropPoint::new(p_hat, frac * p_hat, side);
                let ratio = step_scale_ratio(&point);
                let lead = 2.0 * point.eps / p_hat;
                step_ratio_max_rel_dev =
                    step_ratio_max_rel_dev.max((ratio - lead).abs() / lead);
            }
        }
    }
    let step_ratio_pass = step_ratio_max_rel_dev < 0.05;

    let convexity_pass = SWEEP_P_HATS.iter().all(|&p| convexity_holds(p));

    // model-level sign check on a tiny frozen setup: random theta, random
    // frozen q0/r constants spanning both sides of q = p_hat
    let dims = ModelDims::new(20, 8);
    let theta = ModelParams::init_lm(dims, seed ^ 0xd1ce);
    let batch: Vec<Sentence> = (0..4)
        .map(|s| {
            let mut sent = [0u32; crate::corpus::SENTENCE_TOKENS];
            for (t, slot) in sent.iter_mut().enumerate().skip(1) {
                *slot = ((s * 11 + t * 7) as u32 % 20) + 1;
            }
            sent
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut constants = Vec::new();
    for sentence in &batch {
        let one = [*sentence];
        let fwd = forward(&theta, &one)?;
        let mut per_pos = Vec::new();
        for t in 0..crate::corpus::WORDS_PER_SENTENCE {
            let lp = fwd.log_probs(t);
            let q_t = lp[[0, sentence[t + 1] as usize - 1]].exp();
            // place p_hat either well below or well above q via q0 at r = 1/2
            let factor: f64 = if rng.random::<bool>() {
                rng.random_range(1.5..4.0)
            } else {
                rng.random_range(0.2..0.7)
            };
            per_pos.push((q_t * factor, 0.5));
        }
        constants.push(per_pos);
    }
    let sign = direction_sign_check(&theta, &batch, &constants)?;
    let sign_pass = sign.all_agree();

    let pass =
        stationarity_pass && shrink_pass && step_ratio_pass && convexity_pass && sign_pass;
    Ok(PropcheckSummary {
        stationarity_max_abs,
        stationarity_pass,
        shrink_min,
        shrink_max,
        shrink_pass,
        step_ratio_max_rel_dev,
        step_ratio_pass,
        convexity_pass,
        sign_checked: sign.checked,
        sign_agreements: sign.agreements,
        sign_pass,
        pass,
    })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "p_hat,eps,side,exact,predicted,residual,step_ratio")
        .map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(
            file,
            "{},{},{:?},{},{},{},{}",
            row.p_hat, row.eps, row.side, row.exact, row.predicted, row.residual, row.step_ratio
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
