//! Per-device local training: the adversarial minibatch loop.
//!
//! Each batch computes two losses on the current parameters: the privacy
//! head's cross-entropy on the private attribute and the utility critic's
//! JSD mutual-information estimate. Three SGD steps follow, one per
//! network, with all gradients taken at the batch-initial parameters
//! (simultaneous semantics). `FLConfig::sequential_refresh` switches to
//! the variant that re-forwards between steps.

use crate::error::{Error, Result};
use crate::fl::{DeviceModelTriple, FLConfig};
use crate::objectives::{self, PrivacySign};
use crate::rng::{self, Stream};
use crate::tape::{GradTape, Grads};
use crate::tensor::Matrix;
use alloc::format;
use alloc::vec::Vec;

/// The slice of data one device trains on. Holds features and the private
/// attribute only; primary labels never reach the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceShard {
    xs: Matrix,
    us: Vec<usize>,
    attr_arity: usize,
}

impl DeviceShard {
    pub fn new(xs: Matrix, us: Vec<usize>, attr_arity: usize) -> Result<Self> {
        if xs.rows() == 0 {
            return Err(Error::Empty { what: "device shard" });
        }
        if xs.rows() != us.len() {
            return Err(Error::ShapeMismatch {
                context: format!("{} feature rows but {} attributes", xs.rows(), us.len()),
            });
        }
        if !xs.all_finite() {
            return Err(Error::NonFiniteInput { what: "shard features" });
        }
        if attr_arity < 2 {
            return Err(Error::InvalidConfig {
                reason: format!("attribute arity must be >= 2, got {attr_arity}"),
            });
        }
        for &u in &us {
            if u >= attr_arity {
                return Err(Error::CategoryOutOfRange { value: u, arity: attr_arity });
            }
        }
        Ok(DeviceShard { xs, us, attr_arity })
    }

    /// Builds a shard from dataset rows. Reads features and attributes
    /// only, so the dataset's label-read counter is untouched.
    pub fn from_dataset(ds: &crate::data::Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty { what: "shard indices" });
        }
        Self::new(ds.features_of(indices), ds.attrs_of(indices), ds.attr_arity)
    }

    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.xs.cols()
    }

    pub fn attr_arity(&self) -> usize {
        self.attr_arity
    }

    pub fn features(&self) -> &Matrix {
        &self.xs
    }

    pub fn attrs(&self) -> &[usize] {
        &self.us
    }

    fn batch(&self, rows: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.xs.cols();
        let mut m = Matrix::zeros(rows.len(), d);
        for (r, &i) in rows.iter().enumerate() {
            m.data_mut()[r * d..(r + 1) * d].copy_from_slice(self.xs.row(i));
        }
        let us = rows.iter().map(|&i| self.us[i]).collect();
        (m, us)
    }
}

/// Mean losses over every batch a `device_update` call processed.
/// `mean_jsd` is the raw mutual-information estimate (non-positive); the
/// critic descends its negation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    pub mean_ce: f64,
    pub mean_jsd: f64,
    pub batches: usize,
}

/// Gradients of both batch losses, taken at one parameter snapshot.
struct BatchGrads {
    ce: Grads,
    mi: Grads,
    ce_value: f64,
    mi_value: f64,
}

/// One full local update: `E` epochs of shuffled minibatches, three SGD
/// steps per batch. Trailing batches of size 1 are dropped (the negative
/// pairing needs at least two rows). The summary averages the losses seen
/// at each batch's initial parameters.
pub fn device_update(
    model: &mut DeviceModelTriple,
    shard: &DeviceShard,
    cfg: &FLConfig,
    rng: &mut Stream,
) -> Result<LossSummary> {
    model.check_shapes(shard.feature_dim(), shard.attr_arity())?;
    if shard.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: shard.len() });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig {
            reason: alloc::string::String::from("batch size must be >= 1"),
        });
    }
    let mut sum_ce = 0.0;
    let mut sum_mi = 0.0;
    let mut batches = 0usize;
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for epoch in 0..cfg.local_epochs {
        rng::shuffle(&mut order, rng);
        for (batch_idx, rows) in order.chunks(cfg.batch_size).enumerate() {
            if rows.len() < 2 {
                continue;
            }
            let (ce, mi) = step_batch(model, shard, rows, cfg)
                .map_err(|e| rename_nonfinite(e, epoch, batch_idx))?;
            if !(ce.is_finite() && mi.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            sum_ce += ce;
            sum_mi += mi;
            batches += 1;
        }
    }
    Ok(LossSummary {
        mean_ce: if batches > 0 { sum_ce / batches as f64 } else { 0.0 },
        mean_jsd: if batches > 0 { sum_mi / batches as f64 } else { 0.0 },
        batches,
    })
}

fn rename_nonfinite(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFiniteInput { .. } => Error::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

/// Forwards both loss graphs at the current parameters and runs their
/// backward passes. Gradients come back keyed by parameter id, so the same
/// maps serve all three networks.
fn batch_grads(
    model: &DeviceModelTriple,
    x: &Matrix,
    us: &[usize],
    attr_arity: usize,
) -> Result<BatchGrads> {
    // Privacy-head tape: x -> theta -> psi -> cross-entropy on u.
    let mut ce_tape = GradTape::new();
    let x_in = ce_tape.input(x.clone())?;
    let rep = ce_tape.forward(&model.theta, x_in)?;
    let logits = ce_tape.forward(&model.psi, rep)?;
    let ce_node = ce_tape.cross_entropy(logits, us)?;
    let ce_value = ce_tape.scalar_value(ce_node)?;
    let ce = ce_tape.backward(ce_node)?;

    // Critic tape: positives pair each row's features with its own
    // representation, negatives swap in the next row's features (cyclic),
    // keeping the representation and attribute in place.
    let mut mi_tape = GradTape::new();
    let x_in = mi_tape.input(x.clone())?;
    let x_shift = mi_tape.input(objectives::cyclic_shift_rows(x))?;
    let u_hot = mi_tape.input(objectives::one_hot(us, attr_arity)?)?;
    let rep = mi_tape.forward(&model.theta, x_in)?;
    let pos_in = mi_tape.concat(&[x_in, rep, u_hot])?;
    let neg_in = mi_tape.concat(&[x_shift, rep, u_hot])?;
    let pos = mi_tape.forward(&model.omega, pos_in)?;
    let neg = mi_tape.forward(&model.omega, neg_in)?;
    let mi_node = mi_tape.jsd_mi(pos, neg)?;
    let mi_value = mi_tape.scalar_value(mi_node)?;
    let mi = mi_tape.backward(mi_node)?;

    Ok(BatchGrads { ce, mi, ce_value, mi_value })
}

/// Gradient of the extractor's loss `lambda * (s * CE) + (1 - lambda) * (-I)`,
/// assembled by linearity from the two per-loss gradient maps.
fn theta_grads(ce: &Grads, mi: &Grads, lambda: f64, sign: PrivacySign) -> Result<Grads> {
    let s = match sign {
        PrivacySign::Reverse => -1.0,
        PrivacySign::Descend => 1.0,
    };
    Grads::scaled_sum(&[(s * lambda, ce), (-(1.0 - lambda), mi)])
}

/// One batch: loss values plus the Psi, Omega, Theta steps.
fn step_batch(
    model: &mut DeviceModelTriple,
    shard: &DeviceShard,
    rows: &[usize],
    cfg: &FLConfig,
) -> Result<(f64, f64)> {
    let (x, us) = shard.batch(rows);
    let first = batch_grads(model, &x, &us, shard.attr_arity())?;

    if cfg.sequential_refresh {
        // Each step sees the parameters left by the previous one.
        model.psi.sgd_step(&first.ce, cfg.lr_privacy_head)?;
        let after_psi = batch_grads(model, &x, &us, shard.attr_arity())?;
        model
            .omega
            .sgd_step(&Grads::scaled_sum(&[(-1.0, &after_psi.mi)])?, cfg.lr_utility_critic)?;
        let after_omega = batch_grads(model, &x, &us, shard.attr_arity())?;
        let g_theta =
            theta_grads(&after_omega.ce, &after_omega.mi, model.lambda, cfg.privacy_sign)?;
        model.theta.sgd_step(&g_theta, cfg.lr_extractor)?;
    } else {
        // Simultaneous semantics: every step uses gradients taken at the
        // batch-initial parameters.
        let g_theta = theta_grads(&first.ce, &first.mi, model.lambda, cfg.privacy_sign)?;
        model.psi.sgd_step(&first.ce, cfg.lr_privacy_head)?;
        model
            .omega
            .sgd_step(&Grads::scaled_sum(&[(-1.0, &first.mi)])?, cfg.lr_utility_critic)?;
        model.theta.sgd_step(&g_theta, cfg.lr_extractor)?;
    }
    Ok((first.ce_value, first.mi_value))
}

/// Pure forward through the extractor only.
pub fn extract_representations(model: &DeviceModelTriple, inputs: &Matrix) -> Result<Matrix> {
    model.theta.forward(inputs)
}
