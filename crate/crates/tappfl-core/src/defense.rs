//! Baseline defenses applied to uploaded extractor parameters: additive
//! DP-style noise and magnitude pruning.
//!
//! These transform the copy of the extractor a device uploads for
//! aggregation; the device's own parameters keep training undisturbed.
//! Noise scales are raw standard deviations / scales, no epsilon-delta
//! accounting is claimed anywhere.

use crate::error::{Error, Result};
use crate::fmath;
use crate::nn::DenseNet;
use crate::rng::{self, Stream};
use crate::tensor::ParamTensor;
use alloc::format;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Defense {
    /// Adds iid Gaussian noise with standard deviation `scale` per entry.
    #[cfg_attr(feature = "serde", serde(rename = "dp_gaussian"))]
    GaussianNoise { scale: f64 },
    /// Adds iid Laplace noise with scale parameter `scale` per entry.
    #[cfg_attr(feature = "serde", serde(rename = "dp_laplace"))]
    LaplaceNoise { scale: f64 },
    /// Zeroes the `floor(rate * N)` smallest-magnitude entries, ties
    /// broken by flat index ascending. `per_layer` computes the cut within
    /// each layer instead of over the whole network.
    #[cfg_attr(feature = "serde", serde(rename = "compression"))]
    MagnitudePrune { rate: f64, per_layer: bool },
}

impl Defense {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Defense::GaussianNoise { scale } | Defense::LaplaceNoise { scale } => {
                if !(scale >= 0.0 && scale.is_finite()) {
                    return Err(Error::InvalidConfig {
                        reason: format!("noise scale {scale} must be finite and >= 0"),
                    });
                }
            }
            Defense::MagnitudePrune { rate, .. } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidConfig {
                        reason: format!("prune rate {rate} outside [0, 1)"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Transforms one network in place. A zero scale or rate is an exact
    /// no-op: no samples are drawn and every bit stays put.
    pub fn apply_to_net(&self, net: &mut DenseNet, rng: &mut Stream) -> Result<()> {
        self.validate()?;
        match *self {
            Defense::GaussianNoise { scale } => {
                if scale > 0.0 {
                    for p in net.params_mut() {
                        for v in p.data_mut() {
                            *v += scale * rng::standard_normal(rng);
                        }
                    }
                }
            }
            Defense::LaplaceNoise { scale } => {
                if scale > 0.0 {
                    for p in net.params_mut() {
                        for v in p.data_mut() {
                            *v += rng::laplace(scale, rng);
                        }
                    }
                }
            }
            Defense::MagnitudePrune { rate, per_layer } => {
                if rate > 0.0 {
                    let mut params: Vec<&mut ParamTensor> = net.params_mut().collect();
                    if per_layer {
                        // Parameters come in (weight, bias) pairs per layer.
                        for layer in params.chunks_mut(2) {
                            prune_group(layer, rate)?;
                        }
                    } else {
                        prune_group(&mut params, rate)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Zeroes the `floor(rate * N)` entries of smallest magnitude across the
/// group, ties by flat position ascending. Surviving entries are
/// bit-identical to their inputs.
fn prune_group(params: &mut [&mut ParamTensor], rate: f64) -> Result<()> {
    let mut flat: Vec<f64> = params.iter().flat_map(|p| p.data().iter().copied()).collect();
    magnitude_prune(&mut flat, rate)?;
    let mut at = 0;
    for p in params.iter_mut() {
        let data = p.data_mut();
        data.copy_from_slice(&flat[at..at + data.len()]);
        at += data.len();
    }
    Ok(())
}

/// The core pruning rule on a flat buffer. Returns the kept-mask:
/// `true` entries survived, `false` entries were zeroed.
pub fn magnitude_prune(values: &mut [f64], rate: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig {
            reason: format!("prune rate {rate} outside [0, 1)"),
        });
    }
    let n = values.len();
    let cut = fmath::floor(rate * n as f64) as usize;
    let mut kept = alloc::vec![true; n];
    if cut == 0 {
        return Ok(kept);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        values[a]
            .abs()
            .partial_cmp(&values[b].abs())
            .expect("finite parameters")
            .then(a.cmp(&b))
    });
    for &i in &order[..cut] {
        values[i] = 0.0;
        kept[i] = false;
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::tag;
    use alloc::vec;

    fn bits(net: &DenseNet) -> Vec<u64> {
        net.params().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn zero_scale_and_zero_rate_are_bitwise_noops() {
        let base = DenseNet::relu_stack(5, &[8, 3], 17).unwrap();
        for defense in [
            Defense::GaussianNoise { scale: 0.0 },
            Defense::LaplaceNoise { scale: 0.0 },
            Defense::MagnitudePrune { rate: 0.0, per_layer: false },
        ] {
            let mut net = base.clone();
            let mut rng = rng::stream(1, &[tag::DEFENSE]);
            defense.apply_to_net(&mut net, &mut rng).unwrap();
            assert_eq!(bits(&net), bits(&base), "{defense:?}");
        }
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(Defense::GaussianNoise { scale: -0.1 }.validate().is_err());
        assert!(Defense::LaplaceNoise { scale: f64::NAN }.validate().is_err());
        assert!(Defense::MagnitudePrune { rate: 1.0, per_layer: false }.validate().is_err());
        assert!(Defense::MagnitudePrune { rate: -0.2, per_layer: true }.validate().is_err());
        assert!(Defense::GaussianNoise { scale: 0.5 }.validate().is_ok());
    }

    #[test]
    fn noise_is_reproducible_under_a_fixed_stream() {
        let base = DenseNet::relu_stack(4, &[6], 3).unwrap();
        let defense = Defense::GaussianNoise { scale: 0.3 };
        let mut a = base.clone();
        let mut b = base.clone();
        defense.apply_to_net(&mut a, &mut rng::stream(9, &[tag::DEFENSE, 2, 5])).unwrap();
        defense.apply_to_net(&mut b, &mut rng::stream(9, &[tag::DEFENSE, 2, 5])).unwrap();
        assert_eq!(bits(&a), bits(&b));
        let mut c = base.clone();
        defense.apply_to_net(&mut c, &mut rng::stream(9, &[tag::DEFENSE, 2, 6])).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn gaussian_noise_has_the_right_moments() {
        // A single wide layer holds a million zeroed weights; after the
        // defense they ARE the noise. The sample mean must land within
        // four standard errors (4 * scale / 1000) of zero.
        let n = 1_000_000usize;
        let scale = 0.7;
        let mut net = DenseNet::relu_stack(n, &[1], 0).unwrap();
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = rng::stream(123, &[tag::DEFENSE]);
        Defense::GaussianNoise { scale }.apply_to_net(&mut net, &mut rng).unwrap();
        let weights = net.params().next().unwrap().data();
        let mean: f64 = weights.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * scale / 1000.0, "mean {mean}");
        let var: f64 = weights.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((var - scale * scale).abs() < 0.02 * scale * scale, "variance {var}");
    }

    #[test]
    fn laplace_noise_variance_is_two_scale_squared() {
        let n = 1_000_000usize;
        let scale = 0.4;
        let mut rng = rng::stream(321, &[tag::DEFENSE]);
        let draws: Vec<f64> = (0..n).map(|_| rng::laplace(scale, &mut rng)).collect();
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * scale * 1.5 / 1000.0, "mean {mean}");
        let var: f64 = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let want = 2.0 * scale * scale;
        assert!((var - want).abs() < 0.02 * want, "variance {var} vs {want}");
    }

    #[test]
    fn prune_zeroes_the_smallest_magnitude_half() {
        let mut vals = vec![1.0, -2.0, 3.0, -4.0];
        let kept = magnitude_prune(&mut vals, 0.5).unwrap();
        assert_eq!(vals, vec![0.0, 0.0, 3.0, -4.0]);
        assert_eq!(kept, vec![false, false, true, true]);
    }

    #[test]
    fn prune_breaks_ties_by_flat_index() {
        let mut vals = vec![1.0, -1.0, 1.0, 1.0];
        magnitude_prune(&mut vals, 0.5).unwrap();
        assert_eq!(vals, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn prune_count_matches_the_floor_rule() {
        let mut rng = rng::stream(5, &[tag::DEFENSE]);
        for trial in 0..100 {
            use rand::Rng;
            let n = 10 + (trial % 37);
            let rate = rng.gen_range(0.0..0.99);
            let mut vals: Vec<f64> = (0..n).map(|_| rng::standard_normal(&mut rng)).collect();
            let before_zeros = vals.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(before_zeros, 0, "continuous draws");
            let kept = magnitude_prune(&mut vals, rate).unwrap();
            let zeros = vals.iter().filter(|&&v| v == 0.0).count();
            let expect = (rate * n as f64) as usize;
            assert_eq!(zeros, expect, "n {n} rate {rate}");
            assert_eq!(kept.iter().filter(|&&k| !k).count(), expect);
        }
    }

    #[test]
    fn survivors_are_bit_identical_and_above_the_cut() {
        let mut rng = rng::stream(6, &[tag::DEFENSE]);
        let orig: Vec<f64> = (0..101).map(|_| rng::standard_normal(&mut rng)).collect();
        let mut vals = orig.clone();
        let kept = magnitude_prune(&mut vals, 0.3).unwrap();
        let threshold = vals
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min);
        for (i, (&v, &o)) in vals.iter().zip(&orig).enumerate() {
            if kept[i] {
                assert_eq!(v.to_bits(), o.to_bits(), "survivor {i} changed");
                assert!(v.abs() >= threshold);
            } else {
                assert_eq!(v, 0.0);
                assert!(o.abs() <= threshold);
            }
        }
    }

    #[test]
    fn per_layer_prune_differs_from_global() {
        // First layer large weights, second layer small: globally the whole
        // second layer is cut; per layer each loses only its own fraction.
        let mut net = DenseNet::relu_stack(2, &[2, 2], 0).unwrap();
        {
            let mut it = net.params_mut();
            it.next().unwrap().data_mut().copy_from_slice(&[10.0, 20.0, 30.0, 40.0]);
            it.next().unwrap().data_mut().copy_from_slice(&[50.0, 60.0]);
            it.next().unwrap().data_mut().copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
            it.next().unwrap().data_mut().copy_from_slice(&[0.5, 0.6]);
        }
        let mut global = net.clone();
        let mut layered = net.clone();
        let mut rng = rng::stream(0, &[tag::DEFENSE]);
        Defense::MagnitudePrune { rate: 0.5, per_layer: false }
            .apply_to_net(&mut global, &mut rng)
            .unwrap();
        Defense::MagnitudePrune { rate: 0.5, per_layer: true }
            .apply_to_net(&mut layered, &mut rng)
            .unwrap();
        let g: Vec<f64> = global.params().flat_map(|p| p.data().to_vec()).collect();
        let l: Vec<f64> = layered.params().flat_map(|p| p.data().to_vec()).collect();
        // Global cut removes the six smallest = the entire second layer.
        assert_eq!(g, vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // Per-layer keeps the top half of each layer.
        assert_eq!(l, vec![0.0, 0.0, 0.0, 40.0, 50.0, 60.0, 0.0, 0.0, 0.0, 0.4, 0.5, 0.6]);
    }

    #[test]
    fn defenses_touch_only_the_uploaded_copies() {
        use crate::data::{gen_synthetic, SyntheticSpec};
        use crate::fl::{self, FLConfig, ModelSpec};
        use crate::trainer::DeviceShard;

        let ds = gen_synthetic(&SyntheticSpec {
            n: 30,
            dim: 4,
            attr_leak: 0.6,
            label_signal: 0.6,
            attr_label_corr: 0.2,
            dir_overlap: 0.0,
            noise: 0.5,
            seed: 2,
        })
        .unwrap();
        let idx: Vec<usize> = (0..30).collect();
        let shards = vec![DeviceShard::from_dataset(&ds, &idx).unwrap()];
        let spec = ModelSpec::compact(4, 2);
        let cfg = FLConfig::single_device_defaults(7).with_uniform_lambda(0.5);

        let run_one_round = |defense: Option<&Defense>| {
            let mut server = fl::ServerState::new(&spec, &cfg).unwrap();
            let mut devices = fl::init_devices(&spec, &cfg).unwrap();
            fl::run_round(&mut server, &mut devices, &shards, &cfg, defense).unwrap();
            (bits(&devices[0].theta), bits(&server.global_theta))
        };
        let defense = Defense::GaussianNoise { scale: 0.5 };
        let (device_clean, server_clean) = run_one_round(None);
        let (device_defended, server_defended) = run_one_round(Some(&defense));
        // Local parameters identical: the defense never touched them.
        assert_eq!(device_clean, device_defended);
        // The aggregate differs: the upload was noised.
        assert_ne!(server_clean, server_defended);
    }
}
