//! The experiment config file: TOML sections with full defaults, so an
//! empty file (or none at all) describes the reference setup of 100
//! devices, 10% sampling, 20 rounds, 10 local epochs, batch size 10, and
//! learning rate 0.01 everywhere.
//!
//! Every run writes the resolved config back into the output directory;
//! its SHA-256 is the run's identity, and two output directories with
//! equal hashes hold equal metrics.

use crate::CliError;
use serde::{Deserialize, Serialize};
use std::path::Path;
use tappfl_core::data::PartitionMode;
use tappfl_core::defense::Defense;
use tappfl_core::eval::AdversaryMode;
use tappfl_core::fl::{FLConfig, ModelSpec};
use tappfl_core::objectives::PrivacySign;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream in the run derives from it.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub fl: FlSection,
    pub model: ModelSection,
    pub eval: EvalSection,
    pub defense: DefenseSection,
    pub sweep: SweepSection,
    pub baseline: BaselineSection,
    pub theory: TheorySection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            dataset: DatasetSection::default(),
            partition: PartitionSection::default(),
            fl: FlSection::default(),
            model: ModelSection::default(),
            eval: EvalSection::default(),
            defense: DefenseSection::default(),
            sweep: SweepSection::default(),
            baseline: BaselineSection::default(),
            theory: TheorySection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic" or "csv".
    pub kind: String,
    /// Synthetic: sample count.
    pub n: usize,
    /// Synthetic: feature dimension.
    pub dim: usize,
    /// Synthetic: strength of the private attribute's imprint on x, in [0,1].
    pub attr_leak: f64,
    /// Synthetic: strength of the label's imprint on x, in [0,1].
    pub label_signal: f64,
    /// Synthetic: attribute-label correlation, in [-1,1].
    pub attr_label_corr: f64,
    /// Synthetic: cosine between the attribute and label directions, in [0,1].
    pub dir_overlap: f64,
    /// Synthetic: standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// CSV: input file path.
    pub path: String,
    /// CSV: header name of the private-attribute column.
    pub attr_column: String,
    /// CSV: header name of the primary-label column.
    pub label_column: String,
    /// Held-out fraction for the test split.
    pub test_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: "synthetic".into(),
            n: 5000,
            dim: 20,
            attr_leak: 0.8,
            label_signal: 0.8,
            attr_label_corr: 0.0,
            dir_overlap: 0.0,
            noise: 0.5,
            path: String::new(),
            attr_column: "attr".into(),
            label_column: "label".into(),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    /// "iid" or "attr_skew".
    pub mode: String,
    /// Dirichlet concentration for attr_skew; large alpha approaches iid.
    pub alpha: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { mode: "iid".into(), alpha: 1.0 }
    }
}

impl PartitionSection {
    pub fn to_core(&self) -> Result<PartitionMode, CliError> {
        match self.mode.as_str() {
            "iid" => Ok(PartitionMode::Iid),
            "attr_skew" => Ok(PartitionMode::AttrSkew { alpha: self.alpha }),
            other => Err(CliError::Config(format!(
                "partition.mode must be \"iid\" or \"attr_skew\", got \"{other}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlSection {
    pub devices: usize,
    pub sample_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_extractor: f64,
    pub lr_privacy_head: f64,
    pub lr_utility_critic: f64,
    /// Uniform privacy weight for every device.
    pub lambda: f64,
    pub weighted_avg: bool,
    pub privacy_sign: PrivacySign,
    pub train_only_sampled: bool,
    pub sequential_refresh: bool,
    pub warmup_epochs: usize,
}

impl Default for FlSection {
    fn default() -> Self {
        FlSection {
            devices: 100,
            sample_fraction: 0.1,
            rounds: 20,
            local_epochs: 10,
            batch_size: 10,
            lr_extractor: 0.01,
            lr_privacy_head: 0.01,
            lr_utility_critic: 0.01,
            lambda: 0.5,
            weighted_avg: false,
            privacy_sign: PrivacySign::Reverse,
            train_only_sampled: false,
            sequential_refresh: false,
            warmup_epochs: 0,
        }
    }
}

impl FlSection {
    /// Assembles the core config for one training run.
    pub fn to_core(&self, lambda: f64, seed: u64) -> FLConfig {
        FLConfig {
            devices: self.devices,
            sample_fraction: self.sample_fraction,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr_privacy_head: self.lr_privacy_head,
            lr_utility_critic: self.lr_utility_critic,
            lr_extractor: self.lr_extractor,
            lambda_per_device: vec![lambda; self.devices],
            seed,
            weighted_avg: self.weighted_avg,
            privacy_sign: self.privacy_sign,
            train_only_sampled: self.train_only_sampled,
            sequential_refresh: self.sequential_refresh,
            warmup_epochs: self.warmup_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// "default", "wide_critic", "compact", or "custom".
    pub arch: String,
    /// Hidden widths when arch = "custom" (final layers are appended).
    pub extractor: Vec<usize>,
    pub privacy_head: Vec<usize>,
    pub critic: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: "default".into(),
            extractor: Vec::new(),
            privacy_head: Vec::new(),
            critic: Vec::new(),
        }
    }
}

impl ModelSection {
    pub fn to_core(&self, input_dim: usize, attr_arity: usize) -> Result<ModelSpec, CliError> {
        let spec = match self.arch.as_str() {
            "default" => ModelSpec::tabular_default(input_dim, attr_arity),
            "wide_critic" => ModelSpec::tabular_wide_critic(input_dim, attr_arity),
            "compact" => ModelSpec::compact(input_dim, attr_arity),
            "custom" => ModelSpec {
                input_dim,
                attr_arity,
                extractor_widths: self.extractor.clone(),
                privacy_head_widths: self.privacy_head.clone(),
                critic_widths: self.critic.clone(),
            },
            other => {
                return Err(CliError::Config(format!(
                    "model.arch must be one of default, wide_critic, compact, custom; got \"{other}\""
                )))
            }
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub adversary: AdversaryMode,
    /// Hidden widths of the evaluation heads; empty means "mirror the
    /// model's privacy-head architecture".
    pub probe_hidden: Vec<usize>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            adversary: AdversaryMode::Fresh,
            probe_hidden: Vec::new(),
            probe_epochs: 50,
            probe_lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    /// "none", "dp_gaussian", "dp_laplace", or "compression".
    pub kind: String,
    /// Noise standard deviation (Gaussian) or scale (Laplace).
    pub scale: f64,
    /// Pruned fraction for compression, in [0,1).
    pub rate: f64,
    /// Prune per (weight, bias) layer group instead of globally.
    pub per_layer: bool,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection { kind: "none".into(), scale: 0.0, rate: 0.0, per_layer: false }
    }
}

impl DefenseSection {
    pub fn to_core(&self) -> Result<Option<Defense>, CliError> {
        let d = match self.kind.as_str() {
            "none" => return Ok(None),
            "dp_gaussian" => Defense::GaussianNoise { scale: self.scale },
            "dp_laplace" => Defense::LaplaceNoise { scale: self.scale },
            "compression" => Defense::MagnitudePrune { rate: self.rate, per_layer: self.per_layer },
            other => {
                return Err(CliError::Config(format!(
                    "defense.kind must be one of none, dp_gaussian, dp_laplace, compression; got \"{other}\""
                )))
            }
        };
        d.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Some(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0], seeds: vec![7] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Defense kinds in the grid.
    pub defenses: Vec<String>,
    /// Noise scales tried for dp_gaussian and dp_laplace.
    pub scales: Vec<f64>,
    /// Prune rates tried for compression.
    pub rates: Vec<f64>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            defenses: vec!["dp_gaussian".into(), "dp_laplace".into(), "compression".into()],
            scales: vec![0.01, 0.05, 0.1],
            rates: vec![0.25, 0.5, 0.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    /// Random tradeoff-bound instances checked by theory-check.
    pub instances: usize,
    /// Representation bins per random instance vary over 2..=max_bins.
    pub max_bins: usize,
    /// Embedding dimensions vary over 1..=max_emb_dim.
    pub max_emb_dim: usize,
    /// Grid resolution for the inverse-entropy inequality.
    pub lemma_grid: usize,
    /// Quantizer bins per representation dimension when bridging learned
    /// representations into a discrete joint.
    pub bins_per_dim: usize,
    /// Run the quantized entropy-bound check during evaluate.
    pub quantize_eval: bool,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            instances: 50,
            max_bins: 8,
            max_emb_dim: 4,
            lemma_grid: 1000,
            bins_per_dim: 4,
            quantize_eval: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    /// Record wall time per round. Off by default so reruns of the same
    /// config and seed are byte-identical.
    pub timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into(), timing: false }
    }
}

/// CLI flag overrides applied after the file is parsed.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub lambda: Option<f64>,
    pub rounds: Option<usize>,
    pub devices: Option<usize>,
    pub timing: bool,
}

impl ExperimentConfig {
    /// Loads the file (or defaults when `path` is None) and applies flag
    /// overrides. `--seed` also collapses the sweep seed list to that one
    /// seed so a seeded sweep is self-contained.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = ov.seed {
            cfg.seed = seed;
            cfg.sweep.seeds = vec![seed];
        }
        if let Some(out) = &ov.out {
            cfg.output.dir = out.clone();
        }
        if let Some(lambda) = ov.lambda {
            cfg.fl.lambda = lambda;
        }
        if let Some(rounds) = ov.rounds {
            cfg.fl.rounds = rounds;
        }
        if let Some(devices) = ov.devices {
            cfg.fl.devices = devices;
        }
        if ov.timing {
            cfg.output.timing = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks that TOML typing cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        match self.dataset.kind.as_str() {
            "synthetic" => {
                self.synthetic_spec(self.seed)
                    .validate()
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            "csv" => {
                if self.dataset.path.is_empty() {
                    return Err(CliError::Config("dataset.kind = \"csv\" needs dataset.path".into()));
                }
                if self.dataset.attr_column.is_empty() || self.dataset.label_column.is_empty() {
                    return Err(CliError::Config(
                        "csv datasets need attr_column and label_column".into(),
                    ));
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "dataset.kind must be \"synthetic\" or \"csv\", got \"{other}\""
                )))
            }
        }
        if !(0.0..1.0).contains(&self.dataset.test_fraction) {
            return Err(CliError::Config(format!(
                "dataset.test_fraction {} outside [0,1)",
                self.dataset.test_fraction
            )));
        }
        self.partition.to_core()?;
        self.defense.to_core()?;
        // Exercise the full FL validation once with the configured lambda.
        self.fl
            .to_core(self.fl.lambda, self.seed)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        for &l in &self.sweep.lambdas {
            if !(0.0..=1.0).contains(&l) {
                return Err(CliError::Config(format!("sweep lambda {l} outside [0,1]")));
            }
        }
        if self.sweep.lambdas.is_empty() || self.sweep.seeds.is_empty() {
            return Err(CliError::Config("sweep needs at least one lambda and one seed".into()));
        }
        for kind in &self.baseline.defenses {
            if !matches!(kind.as_str(), "dp_gaussian" | "dp_laplace" | "compression") {
                return Err(CliError::Config(format!("unknown baseline defense \"{kind}\"")));
            }
        }
        if self.theory.max_bins < 2 || self.theory.max_bins > 20 {
            return Err(CliError::Config(format!(
                "theory.max_bins {} outside 2..=20",
                self.theory.max_bins
            )));
        }
        if self.theory.max_emb_dim == 0 || self.theory.lemma_grid == 0 || self.theory.bins_per_dim == 0 {
            return Err(CliError::Config(
                "theory.max_emb_dim, lemma_grid, and bins_per_dim must be positive".into(),
            ));
        }
        if self.output.dir.is_empty() {
            return Err(CliError::Config("output.dir must not be empty".into()));
        }
        Ok(())
    }

    /// The synthetic generator spec for a given run seed.
    pub fn synthetic_spec(&self, seed: u64) -> tappfl_core::data::SyntheticSpec {
        tappfl_core::data::SyntheticSpec {
            n: self.dataset.n,
            dim: self.dataset.dim,
            attr_leak: self.dataset.attr_leak,
            label_signal: self.dataset.label_signal,
            attr_label_corr: self.dataset.attr_label_corr,
            dir_overlap: self.dataset.dir_overlap,
            noise: self.dataset.noise,
            seed,
        }
    }

    /// Short dataset name used in metrics rows.
    pub fn dataset_name(&self) -> String {
        if self.dataset.kind == "csv" {
            Path::new(&self.dataset.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into())
        } else {
            "synthetic".into()
        }
    }

    /// Canonical serialization; its SHA-256 is the run identity.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
