//! The three per-device losses and their λ-weighted combination.
//!
//! * The privacy surrogate is the mean softmax cross-entropy of the
//!   attribute head's logits against the true private attribute. The head
//!   descends it; the extractor's treatment of it depends on
//!   [`PrivacySign`].
//! * The utility objective is a Jensen-Shannon lower-bound estimate of the
//!   mutual information between raw input and representation, scored by a
//!   critic on matched (positive) and mismatched (negative) pairs.
//! * [`combined_device_loss`] assembles the scalar each of the three
//!   parameter groups descends.

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::Matrix;
use alloc::format;

/// How the extractor treats the adversary's cross-entropy term.
///
/// `Reverse` is the adversarial game: the extractor ascends the adversary's
/// CE (gradient reversal), scrubbing the attribute from the representation.
/// `Descend` makes the extractor minimize the CE jointly with the adversary
/// instead; it is kept selectable for comparison runs, since it turns the
/// privacy term into a cooperative one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PrivacySign {
    #[default]
    Reverse,
    Descend,
}

/// Overflow-safe softplus: `max(z, 0) + ln(1 + exp(-|z|))`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + fmath::ln_1p(fmath::exp(-z.abs()))
}

/// Row softmaxes with max subtraction; stable for large logit magnitudes.
pub(crate) fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for (c, &l) in row.iter().enumerate() {
            let e = fmath::exp(l - m);
            out.set(r, c, e);
            total += e;
        }
        for c in 0..logits.cols() {
            out.set(r, c, out.get(r, c) / total);
        }
    }
    out
}

/// Mean `-log softmax(logits)[target]` over the batch. `arity` must match
/// the logit width; targets outside `0..arity` are rejected.
pub fn ce_privacy_loss(logits: &Matrix, targets: &[usize], arity: usize) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::Empty { what: "logits" });
    }
    if logits.cols() != arity {
        return Err(Error::ShapeMismatch {
            context: format!("logit width {} vs arity {arity}", logits.cols()),
        });
    }
    if targets.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "{} targets for {} logit rows",
                targets.len(),
                logits.rows()
            ),
        });
    }
    if !logits.all_finite() {
        return Err(Error::NonFiniteInput { what: "logits" });
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= arity {
            return Err(Error::CategoryOutOfRange { value: t, arity });
        }
        let row = logits.row(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + fmath::ln(row.iter().map(|&l| fmath::exp(l - m)).sum::<f64>());
        total += lse - row[t];
    }
    Ok(total / logits.rows() as f64)
}

/// Jensen-Shannon mutual-information estimate:
/// `mean(-sp(-pos)) - mean(sp(neg))`. Always <= 0 for finite scores.
pub fn jsd_mi_estimate(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() {
        return Err(Error::Empty { what: "pair scores" });
    }
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "{} positive vs {} negative scores",
                pos_scores.len(),
                neg_scores.len()
            ),
        });
    }
    if pos_scores.iter().chain(neg_scores).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { what: "pair scores" });
    }
    let b = pos_scores.len() as f64;
    let pos_term: f64 = pos_scores.iter().map(|&p| -softplus(-p)).sum::<f64>() / b;
    let neg_term: f64 = neg_scores.iter().map(|&n| softplus(n)).sum::<f64>() / b;
    Ok(pos_term - neg_term)
}

/// The scalars each parameter group descends for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceLosses {
    /// Extractor loss: `lambda * (sign) * CE + (1 - lambda) * (-mi)`.
    pub extractor: f64,
    /// Privacy-head loss: the CE itself.
    pub privacy_head: f64,
    /// Utility-critic loss: `-mi` (the critic tightens the MI bound).
    pub utility_critic: f64,
}

/// Combines the batch CE and MI estimate under the adversarial sign
/// convention ([`PrivacySign::Reverse`]).
pub fn combined_device_loss(ce: f64, jsd_mi: f64, lambda: f64) -> Result<DeviceLosses> {
    combined_device_loss_signed(ce, jsd_mi, lambda, PrivacySign::Reverse)
}

pub fn combined_device_loss_signed(
    ce: f64,
    jsd_mi: f64,
    lambda: f64,
    sign: PrivacySign,
) -> Result<DeviceLosses> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig {
            reason: format!("lambda {lambda} outside [0, 1]"),
        });
    }
    if !ce.is_finite() || !jsd_mi.is_finite() {
        return Err(Error::NonFiniteInput { what: "loss terms" });
    }
    let ce_term = match sign {
        PrivacySign::Reverse => -ce,
        PrivacySign::Descend => ce,
    };
    Ok(DeviceLosses {
        extractor: lambda * ce_term + (1.0 - lambda) * (-jsd_mi),
        privacy_head: ce,
        utility_critic: -jsd_mi,
    })
}

/// Cyclic negative pairing: row `j` of the result is row `(j+1) mod b` of
/// `x`. Deterministic and collision-free for `b >= 2`.
pub fn cyclic_shift_rows(x: &Matrix) -> Matrix {
    let (b, d) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(b, d);
    for r in 0..b {
        let src = (r + 1) % b;
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(x.row(src));
    }
    out
}

/// One-hot encoding of categorical values into a `[b x arity]` matrix.
pub fn one_hot(values: &[usize], arity: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(values.len(), arity);
    for (r, &v) in values.iter().enumerate() {
        if v >= arity {
            return Err(Error::CategoryOutOfRange { value: v, arity });
        }
        out.set(r, v, 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_logits_cost_ln_arity() {
        let logits = Matrix::from_rows(&[vec![0.3, 0.3], vec![-2.0, -2.0]]).unwrap();
        let loss = ce_privacy_loss(&logits, &[0, 1], 2).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);

        let four = Matrix::from_rows(&[vec![1.0; 4]]).unwrap();
        let loss4 = ce_privacy_loss(&four, &[2], 4).unwrap();
        assert!((loss4 - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_margin_drives_loss_to_zero() {
        let logits = Matrix::from_rows(&[vec![60.0, 0.0]]).unwrap();
        let loss = ce_privacy_loss(&logits, &[0], 2).unwrap();
        assert!((0.0..1e-12).contains(&loss));
    }

    #[test]
    fn ce_matches_scalar_arithmetic_oracle() {
        // Softmax prob of the true class 0.5 and 0.25: logits chosen so the
        // rows give exactly those probabilities.
        let logits = Matrix::from_rows(&[
            vec![0.0, 0.0],                          // p(true=0) = 0.5
            vec![0.0, (3.0f64).ln()],                // p(true=0) = 1/4
        ])
        .unwrap();
        let loss = ce_privacy_loss(&logits, &[0, 0], 2).unwrap();
        // Frozen from mean(-ln 0.5, -ln 0.25) computed independently.
        assert!((loss - 1.0397207708399179).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn ce_rejects_bad_targets_and_shapes() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            ce_privacy_loss(&logits, &[2], 2),
            Err(Error::CategoryOutOfRange { value: 2, arity: 2 })
        ));
        assert!(ce_privacy_loss(&logits, &[0, 1], 2).is_err());
        assert!(ce_privacy_loss(&logits, &[0], 3).is_err());
    }

    #[test]
    fn ce_stable_for_logit_magnitude_1e3() {
        let logits = Matrix::from_rows(&[vec![1000.0, -1000.0], vec![-1000.0, 1000.0]]).unwrap();
        let loss = ce_privacy_loss(&logits, &[1, 0], 2).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn jsd_at_zero_scores_is_minus_two_ln_two() {
        let est = jsd_mi_estimate(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((est + 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn jsd_limits_approach_zero_from_below() {
        let est = jsd_mi_estimate(&[500.0], &[-500.0]).unwrap();
        assert!(est <= 0.0 && est > -1e-200);
    }

    #[test]
    fn jsd_matches_scalar_arithmetic_oracle() {
        let est = jsd_mi_estimate(&[1.0], &[-1.0]).unwrap();
        // Frozen from -2*ln(1+e^-1) computed independently.
        assert!((est - (-0.6265233750364457)).abs() < 1e-12, "estimate {est}");
    }

    #[test]
    fn jsd_rejects_empty_and_mismatched() {
        assert!(matches!(
            jsd_mi_estimate(&[], &[]),
            Err(Error::Empty { .. })
        ));
        assert!(jsd_mi_estimate(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn jsd_never_positive_on_finite_scores() {
        // Elementwise worst case: -sp(-p) <= 0 and -sp(n) <= 0.
        let mut rng = crate::rng::stream(77, &[0]);
        use rand::Rng;
        for _ in 0..500 {
            let b = rng.gen_range(1..6);
            let pos: Vec<f64> = (0..b).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let neg: Vec<f64> = (0..b).map(|_| rng.gen_range(-50.0..50.0)).collect();
            assert!(jsd_mi_estimate(&pos, &neg).unwrap() <= 0.0);
        }
    }

    #[test]
    fn softplus_overflow_safety() {
        let big = softplus(1000.0);
        assert!(big.is_finite());
        assert!((big - 1000.0).abs() < 1e-9);
        let tiny = softplus(-1000.0);
        assert!((0.0..1e-300).contains(&tiny));
        assert!((softplus(0.0) - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn combined_loss_degenerate_weights() {
        let l0 = combined_device_loss(0.9, -1.2, 0.0).unwrap();
        assert_eq!(l0.extractor, l0.utility_critic);
        let l1 = combined_device_loss(0.9, -1.2, 1.0).unwrap();
        assert_eq!(l1.extractor, -0.9);
        assert_eq!(l1.privacy_head, 0.9);
        assert_eq!(l1.utility_critic, 1.2);
    }

    #[test]
    fn combined_loss_matches_scalar_arithmetic_oracle() {
        let l = combined_device_loss(0.7, -1.4, 0.25).unwrap();
        // Frozen from 0.25*(-0.7) + 0.75*1.4 computed independently.
        assert!((l.extractor - 0.875).abs() < 1e-12, "{}", l.extractor);
    }

    #[test]
    fn combined_loss_descend_variant_flips_only_the_ce_term() {
        let rev = combined_device_loss_signed(0.7, -1.4, 0.25, PrivacySign::Reverse).unwrap();
        let desc = combined_device_loss_signed(0.7, -1.4, 0.25, PrivacySign::Descend).unwrap();
        assert!((desc.extractor - rev.extractor - 2.0 * 0.25 * 0.7).abs() < 1e-12);
        assert_eq!(rev.privacy_head, desc.privacy_head);
        assert_eq!(rev.utility_critic, desc.utility_critic);
    }

    #[test]
    fn combined_loss_rejects_lambda_outside_unit_interval() {
        assert!(combined_device_loss(0.5, -1.0, -0.01).is_err());
        assert!(combined_device_loss(0.5, -1.0, 1.01).is_err());
        assert!(combined_device_loss(f64::NAN, -1.0, 0.5).is_err());
    }

    #[test]
    fn combined_loss_is_affine_in_lambda() {
        let (ce, mi) = (0.83, -2.1);
        let slope = -ce - (-mi);
        let at = |l: f64| combined_device_loss(ce, mi, l).unwrap().extractor;
        let base = at(0.0);
        for l in [0.25, 0.5, 1.0] {
            assert!((at(l) - (base + slope * l)).abs() < 1e-12);
        }
    }

    #[test]
    fn cyclic_shift_rotates_rows() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = cyclic_shift_rows(&x);
        assert_eq!(s.data(), &[2.0, 3.0, 1.0]);
        // b=1 self-pairs; the trainer never produces that case.
        let one = Matrix::from_rows(&[vec![9.0]]).unwrap();
        assert_eq!(cyclic_shift_rows(&one).data(), &[9.0]);
    }

    #[test]
    fn one_hot_layout_and_range_check() {
        let m = one_hot(&[1, 0], 3).unwrap();
        assert_eq!(m.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(m.row(1), &[1.0, 0.0, 0.0]);
        assert!(one_hot(&[3], 3).is_err());
    }
}
