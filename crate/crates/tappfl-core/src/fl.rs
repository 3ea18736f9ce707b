//! Round-based federated orchestration: sampling, broadcast, local
//! training dispatch, and FedAvg aggregation of the feature extractor.
//!
//! Only the extractor crosses the wire. Privacy heads and utility critics
//! stay on their devices for the whole run, which is what makes per-device
//! privacy/utility tradeoffs possible in the first place.

use crate::defense::Defense;
use crate::error::{Error, Result};
use crate::fmath;
use crate::nn::DenseNet;
use crate::objectives::PrivacySign;
use crate::rng::{self, tag, Stream};
use crate::trainer::{self, DeviceShard, LossSummary};
use alloc::format;
use alloc::vec::Vec;

/// Global training knobs. `lr1/lr2/lr3` in the literature map to the
/// privacy head, the utility critic, and the extractor respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct FLConfig {
    /// Device count M.
    pub devices: usize,
    /// Fraction of devices sampled for aggregation each round, in (0, 1].
    pub sample_fraction: f64,
    /// Global rounds T.
    pub rounds: usize,
    /// Local epochs E per round.
    pub local_epochs: usize,
    /// Minibatch size B.
    pub batch_size: usize,
    /// SGD step for the privacy head (lr1).
    pub lr_privacy_head: f64,
    /// SGD step for the utility critic (lr2).
    pub lr_utility_critic: f64,
    /// SGD step for the feature extractor (lr3).
    pub lr_extractor: f64,
    /// Per-device privacy weight, length M, each in [0, 1].
    pub lambda_per_device: Vec<f64>,
    pub seed: u64,
    /// Weight the aggregate by shard sizes instead of the plain 1/K mean.
    pub weighted_avg: bool,
    /// Direction of the extractor's step on the adversary's loss.
    pub privacy_sign: PrivacySign,
    /// Train only the sampled devices instead of all of them.
    pub train_only_sampled: bool,
    /// Re-forward between the three per-batch steps instead of using
    /// batch-initial gradients for all of them.
    pub sequential_refresh: bool,
    /// Utility-only local epochs run once before round 0 (0 disables).
    pub warmup_epochs: usize,
}

impl FLConfig {
    /// A minimal single-device setup; tests and examples start from this.
    pub fn single_device_defaults(seed: u64) -> Self {
        FLConfig {
            devices: 1,
            sample_fraction: 1.0,
            rounds: 1,
            local_epochs: 1,
            batch_size: 10,
            lr_privacy_head: 0.01,
            lr_utility_critic: 0.01,
            lr_extractor: 0.01,
            lambda_per_device: alloc::vec![0.5],
            seed,
            weighted_avg: false,
            privacy_sign: PrivacySign::Reverse,
            train_only_sampled: false,
            sequential_refresh: false,
            warmup_epochs: 0,
        }
    }

    /// Same privacy weight on every device.
    pub fn with_uniform_lambda(mut self, lambda: f64) -> Self {
        self.lambda_per_device = alloc::vec![lambda; self.devices];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: alloc::string::String| Err(Error::InvalidConfig { reason });
        if self.devices == 0 {
            return fail(alloc::string::String::from("device count must be >= 1"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return fail(format!("sample fraction {} outside (0, 1]", self.sample_fraction));
        }
        let k = sample_count(self.devices, self.sample_fraction);
        if k == 0 {
            return fail(format!(
                "sample fraction {} of {} devices rounds to zero",
                self.sample_fraction, self.devices
            ));
        }
        if self.local_epochs == 0 || self.batch_size == 0 || self.rounds == 0 {
            return fail(format!(
                "rounds {}, epochs {}, batch size {} must all be >= 1",
                self.rounds, self.local_epochs, self.batch_size
            ));
        }
        for (name, lr) in [
            ("privacy head", self.lr_privacy_head),
            ("utility critic", self.lr_utility_critic),
            ("extractor", self.lr_extractor),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} learning rate {lr} must be finite and > 0"));
            }
        }
        if self.lambda_per_device.len() != self.devices {
            return fail(format!(
                "{} lambda entries for {} devices",
                self.lambda_per_device.len(),
                self.devices
            ));
        }
        for (i, &l) in self.lambda_per_device.iter().enumerate() {
            if !(0.0..=1.0).contains(&l) {
                return fail(format!("lambda[{i}] = {l} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// How many devices a round samples: round-half-up of `rho * m`.
pub fn sample_count(m: usize, rho: f64) -> usize {
    fmath::floor(rho * m as f64 + 0.5) as usize
}

/// The three per-device networks plus the device's privacy weight.
#[derive(Debug, Clone)]
pub struct DeviceModelTriple {
    /// Feature extractor; the only part that is ever aggregated.
    pub theta: DenseNet,
    /// Privacy head: the in-training adversary inferring the attribute.
    pub psi: DenseNet,
    /// Utility critic scoring (x, r, u) triples for the MI estimate.
    pub omega: DenseNet,
    pub lambda: f64,
    pub device_id: usize,
}

impl DeviceModelTriple {
    /// Width coupling: psi reads representations, omega reads the
    /// concatenation of raw features, representation, and one-hot attribute.
    pub fn check_shapes(&self, input_dim: usize, attr_arity: usize) -> Result<()> {
        if self.theta.input_dim() != input_dim {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "extractor expects width {}, data has {input_dim}",
                    self.theta.input_dim()
                ),
            });
        }
        let rep = self.theta.output_dim();
        if self.psi.input_dim() != rep {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "privacy head expects width {}, representations have {rep}",
                    self.psi.input_dim()
                ),
            });
        }
        let critic_in = input_dim + rep + attr_arity;
        if self.omega.input_dim() != critic_in {
            return Err(Error::ShapeMismatch {
                context: format!(
                    "utility critic expects width {}, concatenated input has {critic_in}",
                    self.omega.input_dim()
                ),
            });
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig {
                reason: format!("lambda {} outside [0, 1]", self.lambda),
            });
        }
        Ok(())
    }
}

/// Layer widths for the three networks. The privacy head gets a final
/// layer of width `attr_arity` appended; the critic gets a final width-1
/// scoring layer appended. All nets are ReLU stacks with linear outputs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub input_dim: usize,
    pub attr_arity: usize,
    /// Hidden widths of the extractor; the last entry is the
    /// representation width.
    pub extractor_widths: Vec<usize>,
    /// Hidden widths of the privacy head (output layer appended).
    pub privacy_head_widths: Vec<usize>,
    /// Hidden widths of the utility critic (scoring layer appended).
    pub critic_widths: Vec<usize>,
}

impl ModelSpec {
    /// Default tabular sizes: extractor 64-128, privacy head
    /// 64-128-4-A, critic 128-128-64-1.
    pub fn tabular_default(input_dim: usize, attr_arity: usize) -> Self {
        ModelSpec {
            input_dim,
            attr_arity,
            extractor_widths: alloc::vec![64, 128],
            privacy_head_widths: alloc::vec![64, 128, 4],
            critic_widths: alloc::vec![128, 128, 64],
        }
    }

    /// The full-size critic stack (16-32-2x128-3x256-6x512-4096-512-1).
    /// Expensive; exposed for fidelity rather than routine use.
    pub fn tabular_wide_critic(input_dim: usize, attr_arity: usize) -> Self {
        ModelSpec {
            critic_widths: alloc::vec![
                16, 32, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512, 4096, 512
            ],
            ..Self::tabular_default(input_dim, attr_arity)
        }
    }

    /// Small sizes for fast experiments and tests.
    pub fn compact(input_dim: usize, attr_arity: usize) -> Self {
        ModelSpec {
            input_dim,
            attr_arity,
            extractor_widths: alloc::vec![32, 16],
            privacy_head_widths: alloc::vec![16],
            critic_widths: alloc::vec![32, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extractor_widths.is_empty() {
            return Err(Error::Empty { what: "extractor widths" });
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig {
                reason: alloc::string::String::from("input width must be >= 1"),
            });
        }
        if self.attr_arity < 2 {
            return Err(Error::InvalidConfig {
                reason: format!("attribute arity must be >= 2, got {}", self.attr_arity),
            });
        }
        Ok(())
    }

    pub fn rep_dim(&self) -> usize {
        *self.extractor_widths.last().unwrap_or(&0)
    }

    pub fn critic_input_dim(&self) -> usize {
        self.input_dim + self.rep_dim() + self.attr_arity
    }

    /// The shared initial extractor; every device starts from this.
    pub fn build_extractor(&self, root_seed: u64) -> Result<DenseNet> {
        self.validate()?;
        DenseNet::relu_stack(
            self.input_dim,
            &self.extractor_widths,
            rng::derive_seed(root_seed, &[tag::INIT_EXTRACTOR]),
        )
    }

    /// One device's triple: the shared extractor plus per-device heads.
    pub fn build_device(&self, root_seed: u64, device_id: usize, lambda: f64) -> Result<DeviceModelTriple> {
        self.validate()?;
        let theta = self.build_extractor(root_seed)?;
        let mut psi_widths = self.privacy_head_widths.clone();
        psi_widths.push(self.attr_arity);
        let psi = DenseNet::relu_stack(
            self.rep_dim(),
            &psi_widths,
            rng::derive_seed(root_seed, &[tag::INIT_PRIVACY_HEAD, device_id as u64]),
        )?;
        let mut critic_widths = self.critic_widths.clone();
        critic_widths.push(1);
        let omega = DenseNet::relu_stack(
            self.critic_input_dim(),
            &critic_widths,
            rng::derive_seed(root_seed, &[tag::INIT_UTILITY_CRITIC, device_id as u64]),
        )?;
        let triple = DeviceModelTriple {
            theta,
            psi,
            omega,
            lambda,
            device_id,
        };
        triple.check_shapes(self.input_dim, self.attr_arity)?;
        Ok(triple)
    }
}

/// Builds the M device triples with ids `0..M` and per-device lambdas.
pub fn init_devices(spec: &ModelSpec, cfg: &FLConfig) -> Result<Vec<DeviceModelTriple>> {
    cfg.validate()?;
    (0..cfg.devices)
        .map(|d| spec.build_device(cfg.seed, d, cfg.lambda_per_device[d]))
        .collect()
}

/// Server-side state: the global extractor and the sampling stream.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_theta: DenseNet,
    pub round_index: usize,
    sampler: Stream,
}

impl ServerState {
    pub fn new(spec: &ModelSpec, cfg: &FLConfig) -> Result<Self> {
        Ok(ServerState {
            global_theta: spec.build_extractor(cfg.seed)?,
            round_index: 0,
            sampler: rng::stream(cfg.seed, &[tag::SERVER_SAMPLE]),
        })
    }

    /// Draws the round's participant set. Sampling happens at round start
    /// so the server stream advances identically whether or not the
    /// non-sampled devices end up training.
    pub fn plan_round(&mut self, cfg: &FLConfig) -> Result<RoundPlan> {
        let k = sample_count(cfg.devices, cfg.sample_fraction);
        if k == 0 || k > cfg.devices {
            return Err(Error::InvalidConfig {
                reason: format!("round sample size {k} outside 1..={}", cfg.devices),
            });
        }
        let sampled = rng::sample_indices(cfg.devices, k, &mut self.sampler);
        let trained = if cfg.train_only_sampled {
            sampled.clone()
        } else {
            (0..cfg.devices).collect()
        };
        Ok(RoundPlan {
            round: self.round_index,
            sampled,
            trained,
        })
    }

    /// Hands every device a copy of the current global extractor.
    pub fn broadcast(&self, devices: &mut [DeviceModelTriple]) {
        for d in devices {
            d.theta = self.global_theta.clone();
        }
    }

    pub fn global_fingerprint(&self) -> u64 {
        self.global_theta.fingerprint()
    }
}

/// What one round will do: who was sampled, who trains.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    /// Ascending device ids whose extractors get aggregated.
    pub sampled: Vec<usize>,
    /// Ascending device ids that run local training this round.
    pub trained: Vec<usize>,
}

/// Per-round log record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Mean over trained devices of their mean per-batch CE loss.
    pub mean_ce: f64,
    /// Mean over trained devices of their mean per-batch MI estimate.
    pub mean_jsd: f64,
    pub trained_devices: usize,
}

/// Local training for one device in one round. The RNG stream is derived
/// from (seed, device, round) alone, so any execution order or schedule of
/// devices yields bitwise-identical results.
pub fn train_device_for_round(
    device: &mut DeviceModelTriple,
    shard: &DeviceShard,
    cfg: &FLConfig,
    round: usize,
) -> Result<LossSummary> {
    let mut stream = rng::stream(
        cfg.seed,
        &[tag::DEVICE_TRAIN, device.device_id as u64, round as u64],
    );
    trainer::device_update(device, shard, cfg, &mut stream)
}

/// Elementwise (weighted) mean of shape-compatible networks.
///
/// Weights are normalized before use. A single input comes back as a
/// bitwise-identical clone.
pub fn fed_avg(nets: &[&DenseNet], weights: Option<&[f64]>) -> Result<DenseNet> {
    if nets.is_empty() {
        return Err(Error::Empty { what: "aggregation inputs" });
    }
    let first = nets[0];
    for (i, n) in nets.iter().enumerate().skip(1) {
        if n.input_dim() != first.input_dim() || n.layers().len() != first.layers().len() {
            return Err(Error::ShapeMismatch {
                context: format!("aggregation input {i} has a different layer structure"),
            });
        }
        for (l, (a, b)) in first.layers().iter().zip(n.layers()).enumerate() {
            if a.weight.shape() != b.weight.shape()
                || a.bias.shape() != b.bias.shape()
                || a.activation != b.activation
            {
                return Err(Error::ShapeMismatch {
                    context: format!("aggregation input {i} differs at layer {l}"),
                });
            }
        }
    }
    let w = match weights {
        Some(w) => {
            if w.len() != nets.len() {
                return Err(Error::ShapeMismatch {
                    context: format!("{} weights for {} models", w.len(), nets.len()),
                });
            }
            if w.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                return Err(Error::InvalidConfig {
                    reason: alloc::string::String::from("aggregation weights must be finite and > 0"),
                });
            }
            let sum: f64 = w.iter().sum();
            w.iter().map(|&v| v / sum).collect::<Vec<f64>>()
        }
        None => alloc::vec![1.0 / nets.len() as f64; nets.len()],
    };
    if nets.len() == 1 {
        return Ok(first.clone());
    }
    let inputs: Vec<Vec<&crate::tensor::ParamTensor>> =
        nets.iter().map(|n| n.params().collect()).collect();
    let mut out = first.clone();
    for (slot, p_out) in out.params_mut().enumerate() {
        let data = p_out.data_mut();
        data.iter_mut().for_each(|v| *v = 0.0);
        for (params, &wi) in inputs.iter().zip(&w) {
            for (o, &x) in data.iter_mut().zip(params[slot].data()) {
                *o += wi * x;
            }
        }
    }
    Ok(out)
}

/// Collects the sampled extractors (defended copies if a defense is
/// configured), averages them, and advances the server to the next round.
pub fn aggregate_round(
    server: &mut ServerState,
    devices: &[DeviceModelTriple],
    shards: &[DeviceShard],
    plan: &RoundPlan,
    cfg: &FLConfig,
    defense: Option<&Defense>,
) -> Result<()> {
    let uploads: Vec<DenseNet> = plan
        .sampled
        .iter()
        .map(|&d| {
            let mut copy = devices[d].theta.clone();
            if let Some(def) = defense {
                let mut stream =
                    rng::stream(cfg.seed, &[tag::DEFENSE, d as u64, plan.round as u64]);
                def.apply_to_net(&mut copy, &mut stream)?;
            }
            Ok(copy)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&DenseNet> = uploads.iter().collect();
    let sizes: Vec<f64>;
    let weights = if cfg.weighted_avg {
        sizes = plan.sampled.iter().map(|&d| shards[d].len() as f64).collect();
        Some(sizes.as_slice())
    } else {
        None
    };
    server.global_theta = fed_avg(&refs, weights)?;
    server.round_index = plan.round + 1;
    Ok(())
}

/// One full round, sequentially: plan, broadcast, local training in
/// ascending device order, aggregate.
pub fn run_round(
    server: &mut ServerState,
    devices: &mut [DeviceModelTriple],
    shards: &[DeviceShard],
    cfg: &FLConfig,
    defense: Option<&Defense>,
) -> Result<RoundRecord> {
    let plan = server.plan_round(cfg)?;
    server.broadcast(devices);
    let fp = server.global_fingerprint();
    assert!(
        devices.iter().all(|d| d.theta.fingerprint() == fp),
        "devices must start the round from the broadcast extractor"
    );
    let mut sum_ce = 0.0;
    let mut sum_jsd = 0.0;
    for &d in &plan.trained {
        let summary = train_device_for_round(&mut devices[d], &shards[d], cfg, plan.round)?;
        sum_ce += summary.mean_ce;
        sum_jsd += summary.mean_jsd;
    }
    aggregate_round(server, devices, shards, &plan, cfg, defense)?;
    let n = plan.trained.len().max(1) as f64;
    Ok(RoundRecord {
        round: plan.round,
        sampled: plan.sampled,
        mean_ce: sum_ce / n,
        mean_jsd: sum_jsd / n,
        trained_devices: plan.trained.len(),
    })
}

/// Validates the whole setup once, then runs the optional warm-up phase
/// and `cfg.rounds` federated rounds, broadcasting the final extractor to
/// every device before returning.
pub fn run_training(
    server: &mut ServerState,
    devices: &mut [DeviceModelTriple],
    shards: &[DeviceShard],
    cfg: &FLConfig,
    defense: Option<&Defense>,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    if let Some(def) = defense {
        def.validate()?;
    }
    if devices.len() != cfg.devices || shards.len() != cfg.devices {
        return Err(Error::InvalidConfig {
            reason: format!(
                "config says {} devices, got {} models and {} shards",
                cfg.devices,
                devices.len(),
                shards.len()
            ),
        });
    }
    for (d, (device, shard)) in devices.iter().zip(shards).enumerate() {
        if device.device_id != d {
            return Err(Error::InvalidConfig {
                reason: format!("device at position {d} has id {}", device.device_id),
            });
        }
        if shard.len() < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: shard.len() });
        }
        device.check_shapes(shard.feature_dim(), shard.attr_arity())?;
    }

    if cfg.warmup_epochs > 0 {
        warmup(server, devices, shards, cfg)?;
    }
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let rec = run_round(server, devices, shards, cfg, defense)?;
        on_round(&rec);
        records.push(rec);
    }
    server.broadcast(devices);
    Ok(records)
}

/// Utility-only pretraining: every device runs `warmup_epochs` local
/// epochs with lambda forced to 0, then all extractors are averaged into
/// the starting global model.
fn warmup(
    server: &mut ServerState,
    devices: &mut [DeviceModelTriple],
    shards: &[DeviceShard],
    cfg: &FLConfig,
) -> Result<()> {
    let mut wcfg = cfg.clone();
    wcfg.local_epochs = cfg.warmup_epochs;
    server.broadcast(devices);
    for (d, device) in devices.iter_mut().enumerate() {
        let lambda = device.lambda;
        device.lambda = 0.0;
        let mut stream = rng::stream(cfg.seed, &[tag::WARMUP, d as u64]);
        let res = trainer::device_update(device, &shards[d], &wcfg, &mut stream);
        device.lambda = lambda;
        res?;
    }
    let nets: Vec<&DenseNet> = devices.iter().map(|d| &d.theta).collect();
    let sizes: Vec<f64>;
    let weights = if cfg.weighted_avg {
        sizes = shards.iter().map(|s| s.len() as f64).collect();
        Some(sizes.as_slice())
    } else {
        None
    };
    server.global_theta = fed_avg(&nets, weights)?;
    Ok(())
}
