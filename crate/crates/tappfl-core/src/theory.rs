//! Executable verifiers for the privacy-utility inequalities, run exactly
//! on small discrete joints.
//!
//! The statements under test are distribution-level inequalities, so the
//! honest desk-scale check is exact computation on discrete instances:
//! worst-case adversary advantage by total variation (cross-checked
//! against brute force over every binary classifier), conditional entropy
//! in bits, the entropy-based accuracy cap, and the tradeoff bound
//! relating task error to attribute advantage. Learned continuous
//! representations are bridged in through a uniform quantizer.

use crate::error::{Error, Result};
use crate::fmath;
use crate::objectives::softplus;
use crate::rng::{self, Stream};
use crate::tensor::Matrix;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

/// Upper limit on quantizer cells; refinement stops growing past this.
pub const MAX_QUANTIZER_CELLS: u64 = 1 << 20;

/// A joint distribution over (r_bin, u, y) with binary u and y.
/// Layout: `pmf[(r * 2 + u) * 2 + y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    pmf: Vec<f64>,
    r_bins: usize,
}

impl DiscreteJoint {
    pub fn new(pmf: Vec<f64>, r_bins: usize) -> Result<Self> {
        if r_bins == 0 {
            return Err(Error::Empty { what: "representation bins" });
        }
        if pmf.len() != 4 * r_bins {
            return Err(Error::ShapeMismatch {
                context: format!("{} pmf entries for {r_bins} bins (need {})", pmf.len(), 4 * r_bins),
            });
        }
        let mut sum = 0.0;
        for &p in &pmf {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::NonFiniteInput { what: "pmf entries" });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig {
                reason: format!("pmf sums to {sum}, not 1"),
            });
        }
        Ok(DiscreteJoint { pmf, r_bins })
    }

    pub fn r_bins(&self) -> usize {
        self.r_bins
    }

    pub fn p(&self, r: usize, u: usize, y: usize) -> f64 {
        self.pmf[(r * 2 + u) * 2 + y]
    }

    /// Marginal over the representation bin.
    pub fn p_r(&self, r: usize) -> f64 {
        (0..2).map(|u| (0..2).map(|y| self.p(r, u, y)).sum::<f64>()).sum()
    }

    pub fn p_u(&self, u: usize) -> f64 {
        (0..self.r_bins).map(|r| self.p_ru(r, u)).sum()
    }

    pub fn p_ru(&self, r: usize, u: usize) -> f64 {
        self.p(r, u, 0) + self.p(r, u, 1)
    }

    pub fn p_r_given_u(&self, r: usize, u: usize) -> Result<f64> {
        let pu = self.p_u(u);
        if pu <= 0.0 {
            return Err(Error::UndefinedConditional { value: u });
        }
        Ok(self.p_ru(r, u) / pu)
    }

    pub fn p_y1_given_u(&self, u: usize) -> Result<f64> {
        let pu = self.p_u(u);
        if pu <= 0.0 {
            return Err(Error::UndefinedConditional { value: u });
        }
        Ok((0..self.r_bins).map(|r| self.p(r, u, 1)).sum::<f64>() / pu)
    }

    /// A fully random joint: flat Dirichlet over all 4 * r_bins cells.
    pub fn random(r_bins: usize, rng: &mut Stream) -> Result<Self> {
        if r_bins == 0 {
            return Err(Error::Empty { what: "representation bins" });
        }
        let pmf = rng::dirichlet(1.0, 4 * r_bins, rng);
        DiscreteJoint::new(pmf, r_bins)
    }

    /// Empirical joint from quantized representations.
    ///
    /// Each of the first `k` dimensions gets `bins_per_dim` uniform bins
    /// over its observed range, where `k` is the largest prefix keeping
    /// the product of bin counts at or below [`MAX_QUANTIZER_CELLS`].
    /// Occupied cells are compacted to dense bin indices; doubling
    /// `bins_per_dim` refines the partition (bins nest), so the Bayes
    /// adversary accuracy never decreases under refinement.
    pub fn from_representations(
        reps: &Matrix,
        us: &[usize],
        ys: &[usize],
        bins_per_dim: usize,
    ) -> Result<Self> {
        let n = reps.rows();
        if n == 0 {
            return Err(Error::Empty { what: "representations" });
        }
        if us.len() != n || ys.len() != n {
            return Err(Error::ShapeMismatch {
                context: format!("{n} rows but {} attributes, {} labels", us.len(), ys.len()),
            });
        }
        if !reps.all_finite() {
            return Err(Error::NonFiniteInput { what: "representations" });
        }
        if bins_per_dim == 0 || bins_per_dim as u64 > MAX_QUANTIZER_CELLS {
            return Err(Error::InvalidConfig {
                reason: format!("bins per dimension {bins_per_dim} outside 1..=2^20"),
            });
        }
        for (&u, &y) in us.iter().zip(ys) {
            if u > 1 {
                return Err(Error::CategoryOutOfRange { value: u, arity: 2 });
            }
            if y > 1 {
                return Err(Error::CategoryOutOfRange { value: y, arity: 2 });
            }
        }
        let d = reps.cols().max(1);
        // Largest dimension prefix whose cell count stays within the cap.
        let mut dims_used = 0usize;
        let mut cells: u64 = 1;
        while dims_used < d {
            match cells.checked_mul(bins_per_dim as u64) {
                Some(next) if next <= MAX_QUANTIZER_CELLS => {
                    cells = next;
                    dims_used += 1;
                }
                _ => break,
            }
        }
        let dims_used = dims_used.max(1).min(reps.cols());

        let mut lo = alloc::vec![f64::INFINITY; dims_used];
        let mut hi = alloc::vec![f64::NEG_INFINITY; dims_used];
        for r in 0..n {
            let row = reps.row(r);
            for (j, &v) in row.iter().take(dims_used).enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let bin_of = |v: f64, j: usize| -> u64 {
            let width = hi[j] - lo[j];
            if width <= 0.0 {
                return 0;
            }
            let t = (v - lo[j]) / width;
            let b = fmath::floor(t * bins_per_dim as f64) as u64;
            b.min(bins_per_dim as u64 - 1)
        };

        let mut counts: BTreeMap<u64, [u64; 4]> = BTreeMap::new();
        for i in 0..n {
            let row = reps.row(i);
            let mut cell: u64 = 0;
            for (j, &v) in row.iter().take(dims_used).enumerate() {
                cell = cell * bins_per_dim as u64 + bin_of(v, j);
            }
            counts.entry(cell).or_insert([0; 4])[us[i] * 2 + ys[i]] += 1;
        }
        let r_bins = counts.len();
        let mut pmf = alloc::vec![0.0; 4 * r_bins];
        for (r, cell) in counts.values().enumerate() {
            for (slot, &c) in cell.iter().enumerate() {
                pmf[r * 4 + slot] = c as f64 / n as f64;
            }
        }
        DiscreteJoint::new(pmf, r_bins)
    }
}

/// Worst-case binary-classifier advantage at telling u from r: the total
/// variation distance between p(r|u=0) and p(r|u=1).
pub fn worst_case_advantage(joint: &DiscreteJoint) -> Result<f64> {
    let mut l1 = 0.0;
    for r in 0..joint.r_bins() {
        l1 += (joint.p_r_given_u(r, 0)? - joint.p_r_given_u(r, 1)?).abs();
    }
    Ok(0.5 * l1)
}

/// The same advantage by explicit maximization over all 2^r_bins binary
/// classifiers. Exponential; only for cross-checking small instances.
pub fn brute_force_advantage(joint: &DiscreteJoint) -> Result<f64> {
    let b = joint.r_bins();
    if b > 20 {
        return Err(Error::InvalidConfig {
            reason: format!("brute force over 2^{b} classifiers refused"),
        });
    }
    let cond0: Vec<f64> =
        (0..b).map(|r| joint.p_r_given_u(r, 0)).collect::<Result<_>>()?;
    let cond1: Vec<f64> =
        (0..b).map(|r| joint.p_r_given_u(r, 1)).collect::<Result<_>>()?;
    let mut best = 0.0f64;
    for mask in 0u64..(1u64 << b) {
        let mut diff = 0.0;
        for r in 0..b {
            if mask >> r & 1 == 1 {
                diff += cond0[r] - cond1[r];
            }
        }
        best = best.max(diff.abs());
    }
    Ok(best)
}

/// Binary entropy in bits with the 0 log 0 = 0 convention.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * fmath::log2(p)) - (1.0 - p) * fmath::log2(1.0 - p)
}

/// H(u | r) in bits: sum over bins of p(r) * H2(p(u=1|r)). Empty bins
/// contribute nothing.
pub fn conditional_entropy_bits(joint: &DiscreteJoint) -> f64 {
    let mut h = 0.0;
    for r in 0..joint.r_bins() {
        let pr = joint.p_r(r);
        if pr > 0.0 {
            h += pr * binary_entropy(joint.p_ru(r, 1) / pr);
        }
    }
    h
}

/// The entropy cap on adversary accuracy: `1 - H / (2 log2(6 / H))`.
/// Nonpositive H makes the cap vacuous (returns 1); H above 1 bit is
/// impossible for a binary attribute and is rejected.
pub fn thm2_accuracy_bound(h: f64) -> Result<f64> {
    if !h.is_finite() || h > 1.0 {
        return Err(Error::EntropyOutOfRange { value: h });
    }
    if h <= 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - h / (2.0 * fmath::log2(6.0 / h)))
}

/// Exact accuracy of the Bayes-optimal adversary:
/// sum over bins of max_a p(r, u=a).
pub fn bayes_adversary_accuracy(joint: &DiscreteJoint) -> f64 {
    (0..joint.r_bins())
        .map(|r| joint.p_ru(r, 0).max(joint.p_ru(r, 1)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thm2Outcome {
    pub bayes_acc: f64,
    pub entropy_bits: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Checks the entropy cap against the exact Bayes adversary.
pub fn verify_thm2(joint: &DiscreteJoint) -> Result<Thm2Outcome> {
    let bayes_acc = bayes_adversary_accuracy(joint);
    let mut h = conditional_entropy_bits(joint);
    // Rounding can push a maximal-entropy joint a hair past 1 bit.
    if h > 1.0 && h < 1.0 + 1e-9 {
        h = 1.0;
    }
    let bound = thm2_accuracy_bound(h)?;
    Ok(Thm2Outcome {
        bayes_acc,
        entropy_bits: h,
        bound,
        holds: bayes_acc <= bound + 1e-9,
    })
}

/// Inverse of binary entropy on [0, 1/2], by bisection to 1e-12.
pub fn inverse_binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::EntropyOutOfRange { value: p });
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(0.5);
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if binary_entropy(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Asserts `H2^{-1}(p) >= p / (2 log2(6/p))` on a uniform grid over (0, 1].
pub fn verify_inverse_entropy_lemma(grid: usize) -> Result<bool> {
    if grid == 0 {
        return Err(Error::Empty { what: "lemma grid" });
    }
    for k in 1..=grid {
        let p = k as f64 / grid as f64;
        let lhs = inverse_binary_entropy(p)?;
        let rhs = p / (2.0 * fmath::log2(6.0 / p));
        if lhs < rhs - 1e-12 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// A probabilistic task classifier over embedded representation bins:
/// `c(e) = sigmoid(w . e + b)`. Its Lipschitz constant in the embedding
/// space is `|w| / 4` (the sigmoid's maximal slope is 1/4).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSigmoidClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSigmoidClassifier {
    pub fn lipschitz(&self) -> f64 {
        fmath::sqrt(self.weights.iter().map(|w| w * w).sum::<f64>()) / 4.0
    }

    fn score(&self, emb: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(emb).map(|(w, e)| w * e).sum::<f64>()
    }
}

/// One concrete instance of the tradeoff bound: a joint, an embedding of
/// its representation bins, and a task classifier over the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Thm1Instance {
    pub joint: DiscreteJoint,
    /// One point per representation bin; max norm becomes R.
    pub embedding: Vec<Vec<f64>>,
    pub classifier: LinearSigmoidClassifier,
}

/// Everything the theory checks produce for one instance, in the shape
/// the report CSV uses.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub adv: f64,
    pub delta: f64,
    pub r_bound: f64,
    pub lipschitz: f64,
    pub err: f64,
    pub entropy_bits: f64,
    pub thm1_lhs: f64,
    pub thm1_rhs: f64,
    pub thm2_acc: f64,
    pub thm2_bound: f64,
    pub thm1_holds: bool,
    pub thm2_holds: bool,
}

/// Checks `err >= delta - 2 R C_L adv` exactly on one instance, where
/// `err` is the sum over the two attribute groups of the classifier's
/// natural-log cross-entropy on the task label, `delta` is the label
/// shift `|P(y=1|u=0) - P(y=1|u=1)|`, and `adv` is the worst-case
/// advantage. Also runs the entropy-cap check on the same joint.
pub fn verify_thm1(inst: &Thm1Instance) -> Result<TheoryReport> {
    let joint = &inst.joint;
    let b = joint.r_bins();
    if inst.embedding.len() != b {
        return Err(Error::ShapeMismatch {
            context: format!("{} embedding points for {b} bins", inst.embedding.len()),
        });
    }
    let dim = inst.classifier.weights.len();
    for (r, e) in inst.embedding.iter().enumerate() {
        if e.len() != dim {
            return Err(Error::ShapeMismatch {
                context: format!("embedding {r} has dim {}, classifier expects {dim}", e.len()),
            });
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { what: "embedding" });
        }
    }
    if inst.classifier.weights.iter().any(|w| !w.is_finite()) || !inst.classifier.bias.is_finite() {
        return Err(Error::NonFiniteInput { what: "classifier parameters" });
    }

    let r_bound = inst
        .embedding
        .iter()
        .map(|e| fmath::sqrt(e.iter().map(|v| v * v).sum::<f64>()))
        .fold(0.0f64, f64::max);
    let lipschitz = inst.classifier.lipschitz();
    let adv = worst_case_advantage(joint)?;
    let delta = (joint.p_y1_given_u(0)? - joint.p_y1_given_u(1)?).abs();

    // err = CE_{u=0} + CE_{u=1}, each the expected natural-log
    // cross-entropy of c against y under the conditional given u.
    // softplus keeps -ln(sigmoid(z)) exact at extreme scores.
    let scores: Vec<f64> = inst.embedding.iter().map(|e| inst.classifier.score(e)).collect();
    let mut err = 0.0;
    for u in 0..2 {
        let pu = joint.p_u(u);
        if pu <= 0.0 {
            return Err(Error::UndefinedConditional { value: u });
        }
        let mut ce = 0.0;
        for (r, &z) in scores.iter().enumerate() {
            // -ln c = softplus(-z) for y=1, -ln(1-c) = softplus(z) for y=0.
            ce += joint.p(r, u, 1) / pu * softplus(-z);
            ce += joint.p(r, u, 0) / pu * softplus(z);
        }
        err += ce;
    }

    let thm1_rhs = delta - 2.0 * r_bound * lipschitz * adv;
    let thm2 = verify_thm2(joint)?;
    Ok(TheoryReport {
        adv,
        delta,
        r_bound,
        lipschitz,
        err,
        entropy_bits: thm2.entropy_bits,
        thm1_lhs: err,
        thm1_rhs,
        thm2_acc: thm2.bayes_acc,
        thm2_bound: thm2.bound,
        thm1_holds: err >= thm1_rhs - 1e-9,
        thm2_holds: thm2.holds,
    })
}

/// Random instance: Dirichlet joint, Gaussian embeddings, Gaussian
/// classifier weights.
pub fn random_thm1_instance(
    r_bins: usize,
    emb_dim: usize,
    rng: &mut Stream,
) -> Result<Thm1Instance> {
    if emb_dim == 0 {
        return Err(Error::Empty { what: "embedding dimensions" });
    }
    let joint = DiscreteJoint::random(r_bins, rng)?;
    let embedding: Vec<Vec<f64>> = (0..r_bins)
        .map(|_| (0..emb_dim).map(|_| rng::standard_normal(rng)).collect())
        .collect();
    let classifier = LinearSigmoidClassifier {
        weights: (0..emb_dim).map(|_| rng::standard_normal(rng)).collect(),
        bias: rng::standard_normal(rng),
    };
    Ok(Thm1Instance { joint, embedding, classifier })
}
