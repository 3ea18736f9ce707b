//! Deterministic randomness: stream derivation and the handful of samplers
//! the pipeline needs.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! experiment's root seed plus a role tag and indices (device id, round,
//! ...). Streams are independent by construction, so reordering or
//! parallelizing consumers cannot change what any one of them draws. That is
//! the whole determinism story: same root seed, same streams, same results,
//! bit for bit.

use crate::fmath;
use alloc::vec::Vec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Stream = ChaCha12Rng;

/// Role tags keep unrelated streams apart even when their indices collide.
pub mod tag {
    /// Shared initialization of the global extractor.
    pub const INIT_EXTRACTOR: u64 = 1;
    /// Per-device initialization of the privacy head.
    pub const INIT_PRIVACY_HEAD: u64 = 2;
    /// Per-device initialization of the utility critic.
    pub const INIT_UTILITY_CRITIC: u64 = 3;
    /// Server-side device sampling, one stream per round.
    pub const SERVER_SAMPLE: u64 = 4;
    /// Local training (shuffling), one stream per device and round.
    pub const DEVICE_TRAIN: u64 = 5;
    /// Upload defense noise, one stream per device and round.
    pub const DEFENSE: u64 = 6;
    /// Synthetic data generation.
    pub const DATA_GEN: u64 = 7;
    /// Train/test splitting.
    pub const SPLIT: u64 = 8;
    /// Device partitioning.
    pub const PARTITION: u64 = 9;
    /// Evaluation-time head training.
    pub const EVAL: u64 = 10;
    /// Pre-round warm-up epochs.
    pub const WARMUP: u64 = 11;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a list of stream coordinates into a child seed.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(root ^ 0xA076_1D64_78BD_642F);
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p));
    }
    state
}

/// A ChaCha stream at the given coordinates under `root`.
pub fn stream(root: u64, parts: &[u64]) -> Stream {
    ChaCha12Rng::seed_from_u64(derive_seed(root, parts))
}

/// Fisher-Yates shuffle. `rand`'s own shuffle would do the same; this keeps
/// the exact draw sequence pinned in one place.
pub fn shuffle<T>(items: &mut [T], rng: &mut Stream) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Uniform sample of `k` distinct indices from `0..n`, returned sorted.
pub fn sample_indices(n: usize, k: usize, rng: &mut Stream) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} of {n}");
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        ids.swap(i, j);
    }
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

/// Standard normal draw via Box-Muller (cosine branch).
pub fn standard_normal(rng: &mut Stream) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
}

/// Laplace draw with the given scale, by inverse CDF.
pub fn laplace(scale: f64, rng: &mut Stream) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    let sign = if u < 0.0 { -1.0 } else { 1.0 };
    -scale * sign * fmath::ln_1p(-2.0 * u.abs())
}

/// Gamma(alpha, 1) via Marsaglia-Tsang, with the boost trick below alpha 1.
pub fn gamma(alpha: f64, rng: &mut Stream) -> f64 {
    assert!(alpha > 0.0, "gamma requires alpha > 0");
    if alpha < 1.0 {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        return gamma(alpha + 1.0, rng) * fmath::powf(u, 1.0 / alpha);
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / fmath::sqrt(9.0 * d);
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        if fmath::ln(u) < 0.5 * x * x + d - d * v + d * fmath::ln(v) {
            return d * v;
        }
    }
}

/// Symmetric Dirichlet draw: `dim` gammas, normalized.
pub fn dirichlet(alpha: f64, dim: usize, rng: &mut Stream) -> Vec<f64> {
    assert!(dim > 0);
    let mut draws: Vec<f64> = (0..dim).map(|_| gamma(alpha, rng)).collect();
    let total: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= total;
    }
    draws
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_across_tags_and_indices() {
        let a = derive_seed(7, &[tag::DEVICE_TRAIN, 0, 0]);
        let b = derive_seed(7, &[tag::DEVICE_TRAIN, 1, 0]);
        let c = derive_seed(7, &[tag::DEVICE_TRAIN, 0, 1]);
        let d = derive_seed(7, &[tag::DEFENSE, 0, 0]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, derive_seed(7, &[tag::DEVICE_TRAIN, 0, 0]));
    }

    #[test]
    fn sample_indices_is_uniform_without_replacement() {
        let mut rng = stream(3, &[tag::SERVER_SAMPLE, 0]);
        let picked = sample_indices(100, 10, &mut rng);
        assert_eq!(picked.len(), 10);
        let mut unique = picked.clone();
        unique.dedup();
        assert_eq!(unique.len(), 10);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        assert!(picked.iter().all(|&i| i < 100));

        // Frequency check: each index should appear ~10% of the time.
        let mut counts = [0usize; 100];
        for trial in 0..20_000u64 {
            let mut r = stream(11, &[tag::SERVER_SAMPLE, trial]);
            for i in sample_indices(100, 10, &mut r) {
                counts[i] += 1;
            }
        }
        for &c in counts.iter() {
            let freq = c as f64 / 20_000.0;
            assert!((freq - 0.1).abs() < 0.02, "index frequency {freq}");
        }
    }

    #[test]
    fn sample_all_returns_everything() {
        let mut rng = stream(3, &[tag::SERVER_SAMPLE, 1]);
        let picked = sample_indices(5, 5, &mut rng);
        assert_eq!(picked, alloc::vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn normal_moments() {
        let mut rng = stream(5, &[tag::DATA_GEN]);
        let n = 200_000;
        let draws: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "normal mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "normal var {var}");
    }

    #[test]
    fn laplace_moments() {
        let mut rng = stream(6, &[tag::DEFENSE]);
        let n = 200_000;
        let b = 1.5;
        let draws: Vec<f64> = (0..n).map(|_| laplace(b, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "laplace mean {mean}");
        assert!((var - 2.0 * b * b).abs() < 0.1, "laplace var {var}");
    }

    #[test]
    fn gamma_moments() {
        let mut rng = stream(8, &[tag::PARTITION]);
        for &alpha in &[0.5, 1.0, 4.0] {
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| gamma(alpha, &mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            assert!((mean - alpha).abs() < 0.05 * alpha.max(1.0), "gamma mean {mean}");
            assert!((var - alpha).abs() < 0.1 * alpha.max(1.0), "gamma var {var}");
        }
    }

    #[test]
    fn dirichlet_sums_to_one() {
        let mut rng = stream(9, &[tag::PARTITION, 1]);
        let p = dirichlet(0.5, 8, &mut rng);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
    }
}
