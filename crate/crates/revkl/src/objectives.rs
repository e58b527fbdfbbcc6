//! Loss functions and estimators: cross-entropy, forward and reverse KL,
//! the discriminator objective, the density-ratio reconstruction of the data
//! distribution, and the fine-tuning loss.
//!
//! These are the reference row-level implementations. Training uses fused
//! heads in [`crate::nncore`] that must produce the same values; tests
//! cross-check the two paths.

use serde::Serialize;

use crate::error::{Error, Result};

/// Probabilities are floored at this value before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Discriminator outputs are clamped into `[DELTA, 1 - DELTA]`.
pub const R_CLAMP_DELTA: f64 = 1e-6;

/// Where a probability row came from; determines which invariants apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RowSource {
    /// Fine-tuned model distribution `q_theta`; sums to one.
    ModelTheta,
    /// Frozen initial model `q0`; sums to one.
    FrozenQ0,
    /// Exact data distribution `p`; sums to one.
    TruthP,
    /// Density-ratio estimate `p_hat`; positive but deliberately unnormalized.
    EstimateP,
    /// Discriminator output `r`; elementwise in `[delta, 1 - delta]`.
    Discriminator,
}

/// A probability row over the V real words for one context.
#[derive(Debug, Clone)]
pub struct ProbRow {
    pub values: Vec<f64>,
    pub source: RowSource,
    /// Position of the context in whatever corpus produced the row; purely
    /// informational.
    pub context_id: Option<usize>,
}

impl ProbRow {
    pub fn new(values: Vec<f64>, source: RowSource) -> Self {
        let mut row = ProbRow { values, source, context_id: None };
        if source == RowSource::Discriminator {
            for v in &mut row.values {
                *v = v.clamp(R_CLAMP_DELTA, 1.0 - R_CLAMP_DELTA);
            }
        }
        row
    }

    pub fn with_context(mut self, context_id: usize) -> Self {
        self.context_id = Some(context_id);
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }

    /// Probability of a 1-based word id.
    #[inline]
    pub fn prob(&self, word: u32) -> f64 {
        self.values[word as usize - 1]
    }

    /// Check the invariant appropriate for the row's source.
    pub fn validate(&self) -> Result<()> {
        match self.source {
            RowSource::ModelTheta | RowSource::FrozenQ0 | RowSource::TruthP => {
                let sum: f64 = self.values.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Invalid(format!(
                        "{:?} row sums to {sum}, expected 1",
                        self.source
                    )));
                }
            }
            RowSource::Discriminator => {
                if self
                    .values
                    .iter()
                    .any(|&v| !(R_CLAMP_DELTA..=1.0 - R_CLAMP_DELTA).contains(&v))
                {
                    return Err(Error::Invalid("discriminator row out of [delta, 1-delta]".into()));
                }
            }
            RowSource::EstimateP => {
                if self.values.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Invalid("p_hat row must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn check_word(&self, word: u32) -> Result<()> {
        if word == 0 || word as usize > self.values.len() {
            return Err(Error::Invalid(format!(
                "word id {word} out of range 1..={}",
                self.values.len()
            )));
        }
        Ok(())
    }
}

/// A scalar loss with its exact per-term breakdown; the total always equals
/// the sum of the terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossValue {
    pub total: f64,
    pub terms: LossTerms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LossTerms {
    /// Plain negative log-likelihood.
    CrossEntropy { nll: f64 },
    /// Discriminator loss split into the model-expectation and data terms.
    Disc { dq: f64, dp: f64 },
    /// Fine-tuning loss split into the CE term and the reverse-KL estimate.
    Finetune { nll: f64, t_log_t: f64 },
}

#[inline]
fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Sampled cross-entropy: `-log q(true_word | c)` with the probability
/// floored at 1e-12.
pub fn ce_loss(q_row: &ProbRow, true_word: u32) -> Result<LossValue> {
    q_row.check_word(true_word)?;
    let nll = -floored_ln(q_row.prob(true_word));
    Ok(LossValue { total: nll, terms: LossTerms::CrossEntropy { nll } })
}

/// `KL(p || q) = sum_w p(w) log(p(w) / q(w))` with `0 log(0/q) = 0`.
pub fn kl_div(p_row: &ProbRow, q_row: &ProbRow) -> f64 {
    kl_sum(&p_row.values, &q_row.values)
}

/// Reverse KL divergence `KL(q || p) = sum_w q(w) log(q(w) / p(w))`; the
/// expectation is taken under the model. Evaluation/reporting only — training
/// uses the sampled estimator in [`finetune_loss`].
pub fn reverse_kl_exact(q_row: &ProbRow, p_row: &ProbRow) -> f64 {
    kl_sum(&q_row.values, &p_row.values)
}

fn kl_sum(outer: &[f64], inner: &[f64]) -> f64 {
    outer
        .iter()
        .zip(inner.iter())
        .map(|(&a, &b)| {
            if a == 0.0 {
                0.0
            } else {
                a * (a.ln() - floored_ln(b))
            }
        })
        .sum()
}

/// Discriminator loss for one context and observed next word:
/// `-sum_w q0(w|c) log r(w|c) - log(1 - r(w*|c))`.
///
/// Gradients of this quantity flow only into the discriminator parameters;
/// `q0` enters as a constant.
pub fn disc_loss(q0_row: &ProbRow, r_row: &ProbRow, true_word: u32) -> Result<LossValue> {
    q0_row.check_word(true_word)?;
    if q0_row.vocab_size() != r_row.vocab_size() {
        return Err(Error::Invalid("q0 and r rows differ in length".into()));
    }
    let dq: f64 = q0_row
        .values
        .iter()
        .zip(r_row.values.iter())
        .map(|(&q0, &r)| -q0 * floored_ln(clamp_r(r)))
        .sum();
    let dp = -floored_ln(1.0 - clamp_r(r_row.prob(true_word)));
    Ok(LossValue { total: dq + dp, terms: LossTerms::Disc { dq, dp } })
}

#[inline]
pub fn clamp_r(r: f64) -> f64 {
    r.clamp(R_CLAMP_DELTA, 1.0 - R_CLAMP_DELTA)
}

/// Density-ratio estimate of the data distribution:
/// `p_hat(w|c) = q0(w|c) * (1 - r(w|c)) / r(w|c)`.
///
/// Positive by construction and deliberately not renormalized.
pub fn p_hat(q0_row: &ProbRow, r_row: &ProbRow) -> ProbRow {
    let values = q0_row
        .values
        .iter()
        .zip(r_row.values.iter())
        .map(|(&q0, &r)| {
            let r = clamp_r(r);
            q0.max(PROB_FLOOR) * (1.0 - r) / r
        })
        .collect();
    ProbRow { values, source: RowSource::EstimateP, context_id: q0_row.context_id }
}

/// Density ratio `t = (q_theta / q0) * (r / (1 - r))` at one word.
pub fn t_ratio(q_theta: f64, q0: f64, r: f64) -> f64 {
    let r = clamp_r(r);
    (q_theta.max(PROB_FLOOR) / q0.max(PROB_FLOOR)) * (r / (1.0 - r))
}

/// `t log t` with the continuous extension `0 log 0 = 0`.
pub fn t_log_t(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        t * t.ln()
    }
}

/// Fine-tuning loss for one context and observed next word (the sampled
/// estimator of CE + reverse KL):
/// `-log q_theta(w*|c) + t log t` with `t = (q_theta/q0) * (r/(1-r))`.
///
/// Gradients flow only into `q_theta`; `q0` and `r` are constants.
pub fn finetune_loss(
    q_theta_row: &ProbRow,
    q0_row: &ProbRow,
    r_row: &ProbRow,
    true_word: u32,
) -> Result<LossValue> {
    q_theta_row.check_word(true_word)?;
    q0_row.check_word(true_word)?;
    let nll = -floored_ln(q_theta_row.prob(true_word));
    let t = t_ratio(
        q_theta_row.prob(true_word),
        q0_row.prob(true_word),
        r_row.prob(true_word),
    );
    let tlt = t_log_t(t);
    Ok(LossValue { total: nll + tlt, terms: LossTerms::Finetune { nll, t_log_t: tlt } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn q(values: &[f64]) -> ProbRow {
        ProbRow::new(values.to_vec(), RowSource::ModelTheta)
    }

    fn uniform(v: usize) -> ProbRow {
        q(&vec![1.0 / v as f64; v])
    }

    #[test]
    fn ce_loss_values() {
        let row = uniform(1000);
        let loss = ce_loss(&row, 7).unwrap();
        assert_abs_diff_eq!(loss.total, 1000f64.ln(), epsilon = 1e-12);

        let mut certain = vec![0.0; 4];
        certain[2] = 1.0;
        let loss = ce_loss(&q(&certain), 3).unwrap();
        assert_eq!(loss.total, 0.0);

        assert!(ce_loss(&row, 0).is_err());
        assert!(ce_loss(&row, 1001).is_err());
    }

    #[test]
    fn ce_loss_is_finite_at_zero_probability() {
        let mut values = vec![0.5, 0.5, 0.0];
        values[2] = 0.0;
        let loss = ce_loss(&q(&values), 3).unwrap();
        assert!(loss.total.is_finite());
        assert_abs_diff_eq!(loss.total, -(PROB_FLOOR.ln()), epsilon = 1e-12);
    }

    #[test]
    fn kl_closed_form() {
        let p = ProbRow::new(vec![0.9, 0.1], RowSource::TruthP);
        let qr = q(&[0.5, 0.5]);
        // 0.9 ln 1.8 + 0.1 ln 0.2, frozen from high-precision evaluation
        assert_abs_diff_eq!(kl_div(&p, &qr), 0.36806420716849707, epsilon = 1e-14);
        assert_abs_diff_eq!(kl_div(&p, &p), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn reverse_kl_closed_form_and_asymmetry() {
        let p = ProbRow::new(vec![0.9, 0.1], RowSource::TruthP);
        let qr = q(&[0.5, 0.5]);
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1), frozen from high-precision evaluation
        let rev = reverse_kl_exact(&qr, &p);
        assert_abs_diff_eq!(rev, 0.5108256237659907, epsilon = 1e-14);
        assert!((rev - kl_div(&p, &qr)).abs() > 0.1, "KL is asymmetric");
        assert_abs_diff_eq!(reverse_kl_exact(&p, &p), 0.0, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(raw_p in proptest::collection::vec(0.01f64..1.0, 6),
                          raw_q in proptest::collection::vec(0.01f64..1.0, 6)) {
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let p = ProbRow::new(norm(&raw_p), RowSource::TruthP);
            let qr = ProbRow::new(norm(&raw_q), RowSource::ModelTheta);
            prop_assert!(kl_div(&p, &qr) >= -1e-12);
            prop_assert!(reverse_kl_exact(&qr, &p) >= -1e-12);
        }

        #[test]
        fn p_hat_recovers_p_from_optimal_r(raw_p in proptest::collection::vec(0.01f64..1.0, 8),
                                           raw_q in proptest::collection::vec(0.01f64..1.0, 8)) {
            // r = q0 / (q0 + p) is the optimal discriminator; p_hat must then
            // reproduce p to machine precision.
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum();
                v.iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let p = norm(&raw_p);
            let q0 = norm(&raw_q);
            let r: Vec<f64> = q0.iter().zip(p.iter()).map(|(&q, &pp)| q / (q + pp)).collect();
            let q0_row = ProbRow::new(q0, RowSource::FrozenQ0);
            let r_row = ProbRow::new(r, RowSource::Discriminator);
            let estimate = p_hat(&q0_row, &r_row);
            for (est, truth) in estimate.values.iter().zip(p.iter()) {
                prop_assert!((est - truth).abs() <= 1e-12 * truth.max(1.0));
            }
        }
    }

    #[test]
    fn p_hat_identity_example() {
        // q0 = 0.3, p = 0.6 -> r = 0.3/0.9 = 1/3 -> p_hat = 0.3 * (2/3)/(1/3) = 0.6
        let q0 = ProbRow::new(vec![0.3, 0.7], RowSource::FrozenQ0);
        let r = ProbRow::new(vec![0.3 / 0.9, 0.5], RowSource::Discriminator);
        let est = p_hat(&q0, &r);
        assert_abs_diff_eq!(est.values[0], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn p_hat_at_half_is_q0() {
        let q0 = ProbRow::new(vec![0.2, 0.3, 0.5], RowSource::FrozenQ0);
        let r = ProbRow::new(vec![0.5; 3], RowSource::Discriminator);
        let est = p_hat(&q0, &r);
        for (e, v) in est.values.iter().zip(q0.values.iter()) {
            assert_abs_diff_eq!(e, v, epsilon = 1e-15);
        }
        est.validate().unwrap();
    }

    #[test]
    fn disc_loss_at_half_is_ln4() {
        let v = 100;
        let q0 = ProbRow::new(vec![1.0 / v as f64; v], RowSource::FrozenQ0);
        let r = ProbRow::new(vec![0.5; v], RowSource::Discriminator);
        let loss = disc_loss(&q0, &r, 13).unwrap();
        assert_abs_diff_eq!(loss.total, 4f64.ln(), epsilon = 1e-12);
        if let LossTerms::Disc { dq, dp } = loss.terms {
            assert_abs_diff_eq!(dq, 2f64.ln(), epsilon = 1e-12);
            assert_abs_diff_eq!(dp, 2f64.ln(), epsilon = 1e-12);
            assert_eq!(loss.total, dq + dp);
        } else {
            panic!("wrong breakdown variant");
        }
    }

    #[test]
    fn disc_loss_closed_form() {
        // V=2, q0=(0.5,0.5), r=(0.2,0.8), w*=1:
        // -0.5 ln 0.2 - 0.5 ln 0.8 - ln 0.8, frozen from high-precision evaluation
        let q0 = ProbRow::new(vec![0.5, 0.5], RowSource::FrozenQ0);
        let r = ProbRow::new(vec![0.2, 0.8], RowSource::Discriminator);
        let loss = disc_loss(&q0, &r, 1).unwrap();
        assert_abs_diff_eq!(loss.total, 1.1394342831883648, epsilon = 1e-14);
    }

    #[test]
    fn disc_loss_diverges_as_r_true_approaches_one() {
        let q0 = ProbRow::new(vec![0.5, 0.5], RowSource::FrozenQ0);
        let mut last = f64::NEG_INFINITY;
        for &r_true in &[0.9, 0.99, 0.9999, 0.99999] {
            let r = ProbRow::new(vec![0.5, r_true], RowSource::Discriminator);
            let loss = disc_loss(&q0, &r, 2).unwrap().total;
            assert!(loss.is_finite(), "clamped at delta keeps the loss finite");
            assert!(loss > last, "loss grows monotonically as r(w*) -> 1");
            last = loss;
        }
        // past the clamp boundary the loss saturates but stays finite
        let saturated =
            disc_loss(&q0, &ProbRow::new(vec![0.5, 1.0], RowSource::Discriminator), 2)
                .unwrap()
                .total;
        assert!(saturated.is_finite());
        assert!(saturated >= last);
    }

    #[test]
    fn finetune_loss_reduces_to_ce_at_t_one() {
        let row = q(&[0.25, 0.25, 0.5]);
        let q0 = ProbRow::new(row.values.clone(), RowSource::FrozenQ0);
        let r = ProbRow::new(vec![0.5; 3], RowSource::Discriminator);
        let loss = finetune_loss(&row, &q0, &r, 3).unwrap();
        let ce = ce_loss(&row, 3).unwrap();
        assert_abs_diff_eq!(loss.total, ce.total, epsilon = 1e-14);
        if let LossTerms::Finetune { t_log_t, .. } = loss.terms {
            assert_abs_diff_eq!(t_log_t, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn finetune_loss_closed_form() {
        // q_theta(w*)=0.4, q0(w*)=0.5, r(w*)=0.5 -> t=0.8,
        // loss = -ln 0.4 + 0.8 ln 0.8, frozen from high-precision evaluation
        let theta = q(&[0.4, 0.6]);
        let q0 = ProbRow::new(vec![0.5, 0.5], RowSource::FrozenQ0);
        let r = ProbRow::new(vec![0.5, 0.5], RowSource::Discriminator);
        let loss = finetune_loss(&theta, &q0, &r, 1).unwrap();
        assert_abs_diff_eq!(loss.total, 0.7377758908227873, epsilon = 1e-14);
    }

    #[test]
    fn finetune_without_discriminator_matches_ratio_form() {
        // r = 0.5 everywhere: loss = -log q_theta + (q_theta/q0) log(q_theta/q0)
        let theta = q(&[0.3, 0.7]);
        let q0 = ProbRow::new(vec![0.6, 0.4], RowSource::FrozenQ0);
        let r = ProbRow::new(vec![0.5, 0.5], RowSource::Discriminator);
        let loss = finetune_loss(&theta, &q0, &r, 1).unwrap();
        let t: f64 = 0.3 / 0.6;
        assert_abs_diff_eq!(loss.total, -(0.3f64.ln()) + t * t.ln(), epsilon = 1e-14);
    }

    #[test]
    fn t_log_t_continuous_at_zero() {
        assert_eq!(t_log_t(0.0), 0.0);
        assert!(t_log_t(1e-300).abs() < 1e-290);
    }

    #[test]
    fn finetune_expectation_approximates_ce_plus_reverse_kl() {
        // With the oracle discriminator r = q0/(q0+p), the expectation of the
        // sampled loss over w ~ p equals CE(p||q) + KL(q||p) for theta = q.
        // Monte-Carlo with a seeded RNG must converge within 3 standard errors.
        use rand::{Rng, SeedableRng};
        let v = 10usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(402);
        let norm = |v: &mut Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
        };
        let mut p: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 0.05).collect();
        let mut q0: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 0.05).collect();
        let mut qt: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 0.05).collect();
        norm(&mut p);
        norm(&mut q0);
        norm(&mut qt);
        let r: Vec<f64> = q0.iter().zip(p.iter()).map(|(&q, &pp)| q / (q + pp)).collect();
        let p_row = ProbRow::new(p.clone(), RowSource::TruthP);
        let q0_row = ProbRow::new(q0, RowSource::FrozenQ0);
        let qt_row = ProbRow::new(qt, RowSource::ModelTheta);
        let r_row = ProbRow::new(r, RowSource::Discriminator);

        let exact = {
            let ce: f64 = p_row
                .values
                .iter()
                .enumerate()
                .map(|(i, &pw)| pw * -qt_row.values[i].ln())
                .sum();
            ce + reverse_kl_exact(&qt_row, &p_row)
        };

        let cdf: Vec<f64> = p.iter().scan(0.0, |acc, &x| { *acc += x; Some(*acc) }).collect();
        let n = 200_000usize;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let u: f64 = rng.random();
            let w = cdf.iter().position(|&c| c > u).unwrap_or(v - 1) as u32 + 1;
            let loss = finetune_loss(&qt_row, &q0_row, &r_row, w).unwrap().total;
            sum += loss;
            sumsq += loss * loss;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * se + 1e-9,
            "MC mean {mean} vs exact {exact}, SE {se}"
        );
    }

    #[test]
    fn row_validation() {
        assert!(ProbRow::new(vec![0.5, 0.5], RowSource::ModelTheta).validate().is_ok());
        assert!(ProbRow::new(vec![0.5, 0.6], RowSource::ModelTheta).validate().is_err());
        // discriminator rows are clamped on construction
        let r = ProbRow::new(vec![0.0, 1.0], RowSource::Discriminator);
        r.validate().unwrap();
        assert_eq!(r.values[0], R_CLAMP_DELTA);
        assert_eq!(r.values[1], 1.0 - R_CLAMP_DELTA);
    }
}
