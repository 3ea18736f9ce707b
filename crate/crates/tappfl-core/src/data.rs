//! Datasets, synthetic generation, and device partitioning.
//!
//! Primary labels are deliberately hard to reach: `LabeledExample` keeps `y`
//! private, and the only way to read it is through [`Dataset::label`] /
//! [`Dataset::labels_of`], which count every access. Training code consumes
//! a [`crate::trainer::DeviceShard`], which is built without touching labels
//! at all, so a run can assert that the label read counter stayed at zero
//! until evaluation started.

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::{self, tag};
use crate::tensor::Matrix;
use alloc::format;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

/// One sample. The primary label is module-private; see the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub u: usize,
    y: usize,
}

impl LabeledExample {
    pub fn new(x: Vec<f64>, u: usize, y: usize) -> Self {
        LabeledExample { x, u, y }
    }
}

/// An in-memory dataset with label-access accounting.
#[derive(Debug)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    pub feature_dim: usize,
    pub attr_arity: usize,
    pub label_arity: usize,
    label_reads: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            examples: self.examples.clone(),
            feature_dim: self.feature_dim,
            attr_arity: self.attr_arity,
            label_arity: self.label_arity,
            label_reads: AtomicU64::new(self.label_reads.load(Ordering::Relaxed)),
        }
    }
}

impl Dataset {
    pub fn new(
        examples: Vec<LabeledExample>,
        attr_arity: usize,
        label_arity: usize,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty { what: "dataset" });
        }
        if attr_arity < 2 || label_arity < 2 {
            return Err(Error::InvalidConfig {
                reason: format!("arities must be >= 2, got attr {attr_arity}, label {label_arity}"),
            });
        }
        let feature_dim = examples[0].x.len();
        for (i, e) in examples.iter().enumerate() {
            if e.x.len() != feature_dim {
                return Err(Error::ShapeMismatch {
                    context: format!("example {i} has width {}, expected {feature_dim}", e.x.len()),
                });
            }
            if e.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput { what: "dataset features" });
            }
            if e.u >= attr_arity {
                return Err(Error::CategoryOutOfRange {
                    value: e.u,
                    arity: attr_arity,
                });
            }
            if e.y >= label_arity {
                return Err(Error::CategoryOutOfRange {
                    value: e.y,
                    arity: label_arity,
                });
            }
        }
        Ok(Dataset {
            examples,
            feature_dim,
            attr_arity,
            label_arity,
            label_reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.examples[i].x
    }

    pub fn attr(&self, i: usize) -> usize {
        self.examples[i].u
    }

    /// Reads one primary label. Every call is counted.
    pub fn label(&self, i: usize) -> usize {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.examples[i].y
    }

    /// How many label reads this dataset has served so far.
    pub fn label_read_count(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn features_of(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(indices.len(), self.feature_dim);
        for (r, &i) in indices.iter().enumerate() {
            m.data_mut()[r * self.feature_dim..(r + 1) * self.feature_dim]
                .copy_from_slice(&self.examples[i].x);
        }
        m
    }

    pub fn attrs_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.examples[i].u).collect()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        self.label_reads
            .fetch_add(indices.len() as u64, Ordering::Relaxed);
        indices.iter().map(|&i| self.examples[i].y).collect()
    }
}

/// Recipe for the controlled-leakage synthetic dataset.
///
/// Per sample: `u ~ Bernoulli(1/2)`; `y = u` with probability
/// `(1 + attr_label_corr) / 2`, else `1 - u`; and
///
/// ```text
/// x = label_signal * (2y - 1) * v_y + attr_leak * (2u - 1) * v_u + noise * N(0, I)
/// ```
///
/// where `v_y` is the unit vector spread over the first half of the
/// dimensions and `v_u` over the second half. `attr_leak` controls how
/// linearly recoverable the private attribute is from raw features,
/// `label_signal` does the same for the task label, and `attr_label_corr`
/// couples the two so that scrubbing `u` from a representation necessarily
/// costs label information.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub attr_leak: f64,
    pub label_signal: f64,
    pub attr_label_corr: f64,
    /// Cosine between the attribute direction and the label direction:
    /// 0 keeps them orthogonal, 1 makes them collinear. Overlap forces any
    /// representation that hides the attribute to also shed label signal,
    /// independently of the label correlation above.
    pub dir_overlap: f64,
    /// Standard deviation of the isotropic Gaussian noise term.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let complain = |reason: alloc::string::String| Err(Error::InvalidConfig { reason });
        if self.n < 2 {
            return complain(format!("need n >= 2, got {}", self.n));
        }
        if self.dim < 2 {
            return complain(format!("need dim >= 2, got {}", self.dim));
        }
        if !(0.0..=1.0).contains(&self.attr_leak) {
            return complain(format!("attr_leak {} outside [0,1]", self.attr_leak));
        }
        if !(0.0..=1.0).contains(&self.label_signal) {
            return complain(format!("label_signal {} outside [0,1]", self.label_signal));
        }
        if !(-1.0..=1.0).contains(&self.attr_label_corr) {
            return complain(format!("attr_label_corr {} outside [-1,1]", self.attr_label_corr));
        }
        if !(0.0..=1.0).contains(&self.dir_overlap) {
            return complain(format!("dir_overlap {} outside [0,1]", self.dir_overlap));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return complain(format!("noise {} must be finite and >= 0", self.noise));
        }
        Ok(())
    }
}

/// The fixed signal directions: `v_y` over dims `[0, ceil(d/2))`, `v_u`
/// over `[ceil(d/2), d)`, each normalized to unit length.
pub fn signal_directions(dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = dim.div_ceil(2);
    let mut vy = alloc::vec![0.0; dim];
    let mut vu = alloc::vec![0.0; dim];
    let ay = 1.0 / fmath::sqrt(half as f64);
    let au = 1.0 / fmath::sqrt((dim - half) as f64);
    for v in vy.iter_mut().take(half) {
        *v = ay;
    }
    for v in vu.iter_mut().skip(half) {
        *v = au;
    }
    (vy, vu)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (vy, vu) = signal_directions(spec.dim);
    // Attribute direction rotated toward the label direction by the
    // configured overlap; still a unit vector.
    let (ov, orth) = (spec.dir_overlap, fmath::sqrt(1.0 - spec.dir_overlap * spec.dir_overlap));
    let mut rng = rng::stream(spec.seed, &[tag::DATA_GEN]);
    let q_same = (1.0 + spec.attr_label_corr) / 2.0;
    let mut examples = Vec::with_capacity(spec.n);
    use rand::Rng;
    for _ in 0..spec.n {
        let u = usize::from(rng.gen_range(0.0..1.0) < 0.5);
        let same = rng.gen_range(0.0..1.0) < q_same;
        let y = if same { u } else { 1 - u };
        let su = 2.0 * u as f64 - 1.0;
        let sy = 2.0 * y as f64 - 1.0;
        let x: Vec<f64> = (0..spec.dim)
            .map(|d| {
                spec.label_signal * sy * vy[d]
                    + spec.attr_leak * su * (ov * vy[d] + orth * vu[d])
                    + spec.noise * rng::standard_normal(&mut rng)
            })
            .collect();
        examples.push(LabeledExample::new(x, u, y));
    }
    Dataset::new(examples, 2, 2)
}

/// Index split for train/test. Built once per dataset with a seeded
/// shuffle; everything downstream addresses the dataset through it.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, first `1 - test_fraction` of it as train.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig {
            reason: format!("test_fraction {test_fraction} outside [0,1)"),
        });
    }
    let n_test = fmath::round(n as f64 * test_fraction) as usize;
    if n_test >= n {
        return Err(Error::TooFewSamples { needed: n_test + 1, got: n });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, &[tag::SPLIT]);
    rng::shuffle(&mut ids, &mut rng);
    let test = ids.split_off(n - n_test);
    Ok(SplitIndices { train: ids, test })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "mode"))]
pub enum PartitionMode {
    /// Seeded shuffle, equal shard sizes, remainder appended to the last.
    Iid,
    /// Per attribute value, device proportions drawn from Dirichlet(alpha):
    /// small alpha concentrates each attribute on few devices, large alpha
    /// approaches the iid allocation.
    AttrSkew { alpha: f64 },
}

/// Splits `indices` into `m` shards of dataset row indices.
pub fn partition(
    ds: &Dataset,
    indices: &[usize],
    m: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::InvalidConfig {
            reason: alloc::string::String::from("device count must be >= 1"),
        });
    }
    if indices.len() < 2 * m {
        return Err(Error::TooFewSamples {
            needed: 2 * m,
            got: indices.len(),
        });
    }
    let mut rng = rng::stream(seed, &[tag::PARTITION]);
    match mode {
        PartitionMode::Iid => {
            let mut ids = indices.to_vec();
            rng::shuffle(&mut ids, &mut rng);
            let base = ids.len() / m;
            let mut shards = Vec::with_capacity(m);
            for d in 0..m {
                let start = d * base;
                let end = if d == m - 1 { ids.len() } else { start + base };
                shards.push(ids[start..end].to_vec());
            }
            Ok(shards)
        }
        PartitionMode::AttrSkew { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::InvalidConfig {
                    reason: format!("skew alpha {alpha} must be finite and > 0"),
                });
            }
            let mut shards: Vec<Vec<usize>> = (0..m).map(|_| Vec::new()).collect();
            for a in 0..ds.attr_arity {
                let mut group: Vec<usize> =
                    indices.iter().copied().filter(|&i| ds.attr(i) == a).collect();
                if group.is_empty() {
                    continue;
                }
                rng::shuffle(&mut group, &mut rng);
                let counts = proportional_counts(group.len(), &rng::dirichlet(alpha, m, &mut rng));
                let mut at = 0;
                for (d, &c) in counts.iter().enumerate() {
                    shards[d].extend_from_slice(&group[at..at + c]);
                    at += c;
                }
            }
            Ok(shards)
        }
    }
}

/// Integer allocation of `total` by `props` (sums to 1): floor everything,
/// then hand the remainder to the largest fractional parts, ties by index.
fn proportional_counts(total: usize, props: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(props.len());
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(props.len());
    let mut assigned = 0usize;
    for (i, &p) in props.iter().enumerate() {
        let exact = p * total as f64;
        let fl = fmath::floor(exact) as usize;
        counts.push(fl);
        assigned += fl;
        fracs.push((i, exact - fl as f64));
    }
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..total - assigned {
        counts[fracs[k % fracs.len()].0] += 1;
    }
    counts
}

/// Majority-class frequency of the attributes at `indices`: the accuracy of
/// always guessing the most common value.
pub fn majority_frequency(values: &[usize]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty { what: "values" });
    }
    let arity = values.iter().max().unwrap() + 1;
    let mut counts = alloc::vec![0usize; arity];
    for &v in values {
        counts[v] += 1;
    }
    Ok(*counts.iter().max().unwrap() as f64 / values.len() as f64)
}
