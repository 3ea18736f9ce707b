//! Experiment orchestration: one fully deterministic pipeline per cell
//! (dataset, split, partition, federated training, evaluation), and the
//! subcommand drivers that arrange cells into runs, grids, and sweeps.
//!
//! Sweep and baseline cells are independent (own seed lineage, own output
//! subdirectory), so they run in parallel; results are sorted by cell
//! index before writing, which makes parallel output byte-identical to
//! sequential output.

use crate::config::ExperimentConfig;
use crate::dataset;
use crate::metrics::{
    self, atomic_write, baseline_table, quantized_table, sweep_table, theory_table,
    train_metrics_table, BaselineRow, QuantizedRow, SweepRow,
};
use anyhow::{Context, Result};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::time::Instant;
use tappfl_core::checkpoint;
use tappfl_core::data::{gen_synthetic, partition, Dataset, SplitIndices};
use tappfl_core::defense::Defense;
use tappfl_core::eval::{
    classification_accuracy, evaluate_extractor, AdversaryMode, EvalReport, EvalSettings,
    ProbeConfig,
};
use tappfl_core::fl::{init_devices, run_training, ServerState};
use tappfl_core::rng::{self, tag};
use tappfl_core::theory::{
    bayes_adversary_accuracy, random_thm1_instance, verify_inverse_entropy_lemma, verify_thm1,
    verify_thm2, worst_case_advantage, DiscreteJoint,
};
use tappfl_core::trainer::DeviceShard;

/// Checkpoint tensor-name prefix for the aggregated extractor.
pub const EXTRACTOR_PREFIX: &str = "global.extractor";

/// Everything one trained and evaluated cell produces.
pub struct CellResult {
    /// (round, mean_ce, mean_jsd, wall_ms) per round.
    pub rounds: Vec<(usize, f64, f64, u64)>,
    pub report: EvalReport,
    /// Label-access counter right after training (the audit expects 0).
    pub label_reads_after_training: u64,
    /// Label-access counter at the end of the cell.
    pub label_reads_total: u64,
    pub checkpoint_text: String,
}

/// Builds the cell's dataset and split from the config at a given seed.
pub fn build_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, SplitIndices)> {
    match cfg.dataset.kind.as_str() {
        "synthetic" => {
            let ds = gen_synthetic(&cfg.synthetic_spec(seed)).map_err(crate::lift)?;
            let split =
                tappfl_core::data::train_test_split(ds.len(), cfg.dataset.test_fraction, seed)
                    .map_err(crate::lift)?;
            Ok((ds, split))
        }
        _ => dataset::load_csv(
            Path::new(&cfg.dataset.path),
            &cfg.dataset.attr_column,
            &cfg.dataset.label_column,
            cfg.dataset.test_fraction,
            seed,
        ),
    }
}

fn eval_settings(cfg: &ExperimentConfig, privacy_head_widths: &[usize], seed: u64) -> EvalSettings {
    let hidden = if cfg.eval.probe_hidden.is_empty() {
        privacy_head_widths.to_vec()
    } else {
        cfg.eval.probe_hidden.clone()
    };
    let mut probe = ProbeConfig::new(hidden);
    probe.epochs = cfg.eval.probe_epochs;
    probe.lr = cfg.eval.probe_lr;
    EvalSettings { adversary: probe.clone(), probe, mode: cfg.eval.adversary, seed }
}

/// One complete pipeline: data, shards, training, evaluation, checkpoint.
pub fn run_cell(
    cfg: &ExperimentConfig,
    lambda: f64,
    seed: u64,
    defense: Option<&Defense>,
) -> Result<CellResult> {
    let (ds, split) = build_dataset(cfg, seed)?;
    let shards_idx = partition(&ds, &split.train, cfg.fl.devices, cfg.partition.to_core()?, seed)
        .map_err(crate::lift)?;
    let shards: Vec<DeviceShard> = shards_idx
        .iter()
        .map(|idx| DeviceShard::from_dataset(&ds, idx))
        .collect::<tappfl_core::Result<_>>()
        .map_err(crate::lift)?;

    let spec = cfg.model.to_core(ds.feature_dim, ds.attr_arity)?;
    let flc = cfg.fl.to_core(lambda, seed);
    let mut server = ServerState::new(&spec, &flc).map_err(crate::lift)?;
    let mut devices = init_devices(&spec, &flc).map_err(crate::lift)?;

    let timing = cfg.output.timing;
    let mut rounds: Vec<(usize, f64, f64, u64)> = Vec::with_capacity(flc.rounds);
    let mut last = Instant::now();
    run_training(&mut server, &mut devices, &shards, &flc, defense, |rec| {
        let wall = if timing {
            let now = Instant::now();
            let ms = now.duration_since(last).as_millis() as u64;
            last = now;
            ms
        } else {
            0
        };
        rounds.push((rec.round, rec.mean_ce, rec.mean_jsd, wall));
    })
    .map_err(crate::lift)?;

    let label_reads_after_training = ds.label_read_count();
    let settings = eval_settings(cfg, &spec.privacy_head_widths, seed);
    let mut report = match settings.mode {
        AdversaryMode::Fresh => {
            evaluate_extractor(&server.global_theta, &ds, &split, &settings, None)
                .map_err(crate::lift)?
        }
        AdversaryMode::TrainingPsi => {
            let r = evaluate_extractor(
                &server.global_theta,
                &ds,
                &split,
                &settings,
                Some(&devices[0].psi),
            )
            .map_err(crate::lift)?;
            // Average the in-training adversary over every device, as the
            // reported per-device inference accuracy.
            let reps = server
                .global_theta
                .forward(&ds.features_of(&split.test))
                .map_err(crate::lift)?;
            let attrs = ds.attrs_of(&split.test);
            let mut acc = 0.0;
            for device in &devices {
                acc += classification_accuracy(&device.psi, &reps, &attrs).map_err(crate::lift)?;
            }
            let infer_acc = acc / devices.len() as f64;
            EvalReport { infer_acc, gap: infer_acc - r.guess_baseline, ..r }
        }
    };
    // Guard against -0.0 noise in reported gaps.
    if report.gap == 0.0 {
        report.gap = 0.0;
    }

    let checkpoint_text =
        checkpoint::write_net(&server.global_theta, EXTRACTOR_PREFIX).map_err(crate::lift)?;
    Ok(CellResult {
        rounds,
        report,
        label_reads_after_training,
        label_reads_total: ds.label_read_count(),
        checkpoint_text,
    })
}

fn write_cell_files(dir: &Path, cell: &CellResult) -> Result<()> {
    train_metrics_table(&cell.rounds).write(&dir.join("train_metrics.csv"))?;
    let audit = format!(
        "labels_read_after_training = {}\nlabels_read_total = {}\n",
        cell.label_reads_after_training, cell.label_reads_total
    );
    atomic_write(&dir.join("audit.log"), audit.as_bytes())
}

fn sweep_row(cfg: &ExperimentConfig, lambda: f64, seed: u64, report: &EvalReport) -> SweepRow {
    SweepRow {
        dataset: cfg.dataset_name(),
        lambda,
        test_acc: report.test_acc,
        infer_acc: report.infer_acc,
        gap: report.gap,
        seed,
    }
}

/// `gen-data`: write the configured synthetic dataset as CSV plus a
/// metadata file spelling out the exact generative recipe.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.dataset.kind != "synthetic" {
        return Err(crate::CliError::Config(
            "gen-data generates synthetic datasets; dataset.kind is \"csv\"".into(),
        )
        .into());
    }
    let out = PathBuf::from(&cfg.output.dir);
    metrics::write_run_identity(&out, "gen-data", &cfg.to_toml(), cfg.seed)?;
    let spec = cfg.synthetic_spec(cfg.seed);
    let ds = gen_synthetic(&spec).map_err(crate::lift)?;
    dataset::write_dataset_csv(&ds, &out.join("synthetic.csv"))?;

    let half = cfg.dataset.dim.div_ceil(2);
    let meta = format!(
        "# Generative recipe, exact:\n\
         #   u ~ Bernoulli(1/2)\n\
         #   y = u with probability (1 + attr_label_corr)/2, else 1 - u\n\
         #   e_u = dir_overlap*v_y + sqrt(1 - dir_overlap^2)*v_u\n\
         #   x = label_signal*(2y-1)*v_y + attr_leak*(2u-1)*e_u + noise*N(0, I)\n\
         # v_y is uniform over dims [0, {half}), v_u over dims [{half}, {dim}),\n\
         # both unit length. Streams derive from the seed below.\n\
         n = {n}\ndim = {dim}\nattr_leak = {leak}\nlabel_signal = {signal}\n\
         attr_label_corr = {corr}\ndir_overlap = {overlap}\nnoise = {noise}\nseed = {seed}\n",
        dim = cfg.dataset.dim,
        n = spec.n,
        leak = metrics::fmt_f64(spec.attr_leak),
        signal = metrics::fmt_f64(spec.label_signal),
        corr = metrics::fmt_f64(spec.attr_label_corr),
        overlap = metrics::fmt_f64(spec.dir_overlap),
        noise = metrics::fmt_f64(spec.noise),
        seed = spec.seed,
    );
    atomic_write(&out.join("synthetic_meta.toml"), meta.as_bytes())?;
    println!(
        "wrote {} ({} samples, {} features)",
        out.join("synthetic.csv").display(),
        ds.len(),
        ds.feature_dim
    );
    Ok(())
}

/// `train`: one federated run at the configured lambda, with the
/// configured defense applied to uploads if any.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.output.dir);
    metrics::write_run_identity(&out, "train", &cfg.to_toml(), cfg.seed)?;
    let defense = cfg.defense.to_core()?;
    let cell = run_cell(cfg, cfg.fl.lambda, cfg.seed, defense.as_ref())?;

    for &(round, ce, jsd, _) in &cell.rounds {
        println!("round {round}: mean_ce = {ce:.6}, mean_jsd = {jsd:.6}");
    }
    write_cell_files(&out, &cell)?;
    sweep_table(&[sweep_row(cfg, cfg.fl.lambda, cfg.seed, &cell.report)])
        .write(&out.join("eval.csv"))?;
    atomic_write(
        &out.join("checkpoints").join("global_extractor.txt"),
        cell.checkpoint_text.as_bytes(),
    )?;
    let r = &cell.report;
    println!(
        "test_acc = {:.4}, infer_acc = {:.4}, baseline = {:.4}, gap = {:.4}",
        r.test_acc, r.infer_acc, r.guess_baseline, r.gap
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// `evaluate`: attack and utility probes against a saved extractor.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint_path: Option<&Path>) -> Result<()> {
    let out = PathBuf::from(&cfg.output.dir);
    let default_ckpt = out.join("checkpoints").join("global_extractor.txt");
    let ckpt_path = checkpoint_path.unwrap_or(&default_ckpt);
    let text = std::fs::read_to_string(ckpt_path)
        .with_context(|| format!("reading checkpoint {}", ckpt_path.display()))?;

    metrics::write_run_identity(&out, "evaluate", &cfg.to_toml(), cfg.seed)?;
    let (ds, split) = build_dataset(cfg, cfg.seed)?;
    let spec = cfg.model.to_core(ds.feature_dim, ds.attr_arity)?;
    let mut theta = spec.build_extractor(cfg.seed).map_err(crate::lift)?;
    checkpoint::load_net(&mut theta, &text, EXTRACTOR_PREFIX).map_err(crate::lift)?;

    let settings = eval_settings(cfg, &spec.privacy_head_widths, cfg.seed);
    if settings.mode == AdversaryMode::TrainingPsi {
        return Err(crate::CliError::Config(
            "evaluate scores saved extractors; eval.adversary = \"training_psi\" needs the \
             in-training head, use the train command"
                .into(),
        )
        .into());
    }
    let report =
        evaluate_extractor(&theta, &ds, &split, &settings, None).map_err(crate::lift)?;
    sweep_table(&[sweep_row(cfg, cfg.fl.lambda, cfg.seed, &report)]).write(&out.join("eval.csv"))?;

    if cfg.theory.quantize_eval {
        let reps = theta.forward(&ds.features_of(&split.test)).map_err(crate::lift)?;
        let us = ds.attrs_of(&split.test);
        let ys = ds.labels_of(&split.test);
        let mut rows = Vec::new();
        for bins in [cfg.theory.bins_per_dim, cfg.theory.bins_per_dim * 2] {
            let joint =
                DiscreteJoint::from_representations(&reps, &us, &ys, bins).map_err(crate::lift)?;
            let out2 = verify_thm2(&joint).map_err(crate::lift)?;
            rows.push(QuantizedRow {
                bins_per_dim: bins,
                occupied_bins: joint.r_bins(),
                adv: worst_case_advantage(&joint).map_err(crate::lift)?,
                entropy_bits: out2.entropy_bits,
                thm2_acc: out2.bayes_acc,
                thm2_bound: out2.bound,
                holds: out2.holds,
            });
        }
        // Finer bins never lose adversary accuracy; surface a violation
        // here rather than silently writing an inconsistent table.
        let accs: Vec<f64> = rows.iter().map(|r| r.thm2_acc).collect();
        anyhow::ensure!(
            accs.windows(2).all(|w| w[1] >= w[0] - 1e-12),
            "quantizer refinement decreased Bayes accuracy: {accs:?}"
        );
        quantized_table(&rows).write(&out.join("theory_trained.csv"))?;
    }
    let r = &report;
    println!(
        "test_acc = {:.4}, infer_acc = {:.4}, baseline = {:.4}, gap = {:.4}",
        r.test_acc, r.infer_acc, r.guess_baseline, r.gap
    );
    Ok(())
}

/// `baseline`: the defense grid at lambda 0, plus the undefended
/// reference row, all trained and attacked identically.
pub fn cmd_baseline(cfg: &ExperimentConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.output.dir);
    metrics::write_run_identity(&out, "baseline", &cfg.to_toml(), cfg.seed)?;

    let mut grid: Vec<(String, f64, Option<Defense>)> = vec![("none".into(), 0.0, None)];
    for kind in &cfg.baseline.defenses {
        match kind.as_str() {
            "dp_gaussian" => {
                for &s in &cfg.baseline.scales {
                    grid.push((kind.clone(), s, Some(Defense::GaussianNoise { scale: s })));
                }
            }
            "dp_laplace" => {
                for &s in &cfg.baseline.scales {
                    grid.push((kind.clone(), s, Some(Defense::LaplaceNoise { scale: s })));
                }
            }
            _ => {
                for &r in &cfg.baseline.rates {
                    grid.push((
                        kind.clone(),
                        r,
                        Some(Defense::MagnitudePrune { rate: r, per_layer: false }),
                    ));
                }
            }
        }
    }
    for (_, _, d) in &grid {
        if let Some(d) = d {
            d.validate().map_err(crate::lift)?;
        }
    }

    let results: Vec<BaselineRow> = grid
        .par_iter()
        .map(|(kind, param, defense)| {
            let cell = run_cell(cfg, 0.0, cfg.seed, defense.as_ref())?;
            Ok(BaselineRow {
                defense: kind.clone(),
                hyperparam: *param,
                test_acc: cell.report.test_acc,
                infer_acc: cell.report.infer_acc,
            })
        })
        .collect::<Result<_>>()?;

    baseline_table(&results).write(&out.join("baseline.csv"))?;
    for r in &results {
        println!(
            "{} {} -> test_acc = {:.4}, infer_acc = {:.4}",
            r.defense,
            metrics::fmt_f64(r.hyperparam),
            r.test_acc,
            r.infer_acc
        );
    }
    println!("wrote {}", out.join("baseline.csv").display());
    Ok(())
}

/// `theory-check`: the random-instance battery for both bounds plus the
/// inverse-entropy inequality grid. Any failed verdict is an error: these
/// are theorems, so a violation means an implementation bug.
pub fn cmd_theory_check(cfg: &ExperimentConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.output.dir);
    metrics::write_run_identity(&out, "theory-check", &cfg.to_toml(), cfg.seed)?;

    let mut stream = rng::stream(cfg.seed, &[tag::EVAL]);
    let mut rows = Vec::with_capacity(cfg.theory.instances);
    let mut failures = 0usize;
    for i in 0..cfg.theory.instances {
        let bins = 2 + i % (cfg.theory.max_bins - 1);
        let dim = 1 + i % cfg.theory.max_emb_dim;
        let inst = random_thm1_instance(bins, dim, &mut stream).map_err(crate::lift)?;
        let report = verify_thm1(&inst).map_err(crate::lift)?;
        if !(report.thm1_holds && report.thm2_holds) {
            failures += 1;
        }
        rows.push((format!("rand-{i:04}"), report));
    }
    theory_table(&rows).write(&out.join("theory.csv"))?;

    let lemma_ok = verify_inverse_entropy_lemma(cfg.theory.lemma_grid).map_err(crate::lift)?;
    let summary = format!(
        "instances = {}\nbound_failures = {}\nlemma_grid = {}\nlemma_holds = {}\n",
        cfg.theory.instances, failures, cfg.theory.lemma_grid, lemma_ok
    );
    atomic_write(&out.join("theory_summary.txt"), summary.as_bytes())?;
    println!(
        "{} instances checked, {} failures; inverse-entropy lemma on {} points: {}",
        cfg.theory.instances,
        failures,
        cfg.theory.lemma_grid,
        if lemma_ok { "holds" } else { "VIOLATED" }
    );
    anyhow::ensure!(failures == 0, "{failures} bound verdicts failed; see theory.csv");
    anyhow::ensure!(lemma_ok, "inverse-entropy inequality violated on the grid");
    Ok(())
}

/// `sweep`: every (lambda, seed) cell trained and evaluated, in parallel,
/// with one summary row per cell and per-cell metrics underneath.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.output.dir);
    metrics::write_run_identity(&out, "sweep", &cfg.to_toml(), cfg.seed)?;
    let defense = cfg.defense.to_core()?;

    let cells: Vec<(usize, usize)> = (0..cfg.sweep.lambdas.len())
        .flat_map(|li| (0..cfg.sweep.seeds.len()).map(move |si| (li, si)))
        .collect();
    let mut results: Vec<(usize, usize, CellResult)> = cells
        .par_iter()
        .map(|&(li, si)| {
            let lambda = cfg.sweep.lambdas[li];
            let seed = cfg.sweep.seeds[si];
            let cell = run_cell(cfg, lambda, seed, defense.as_ref())?;
            Ok((li, si, cell))
        })
        .collect::<Result<_>>()?;
    results.sort_by_key(|&(li, si, _)| (li, si));

    let mut rows = Vec::with_capacity(results.len());
    for (li, si, cell) in &results {
        let lambda = cfg.sweep.lambdas[*li];
        let seed = cfg.sweep.seeds[*si];
        let dir = out.join("cells").join(format!("l{lambda}_s{seed}"));
        write_cell_files(&dir, cell)?;
        sweep_table(&[sweep_row(cfg, lambda, seed, &cell.report)]).write(&dir.join("eval.csv"))?;
        rows.push(sweep_row(cfg, lambda, seed, &cell.report));
    }
    sweep_table(&rows).write(&out.join("sweep.csv"))?;
    for r in &rows {
        println!(
            "lambda {:.2} seed {}: test_acc = {:.4}, infer_acc = {:.4}, gap = {:.4}",
            r.lambda, r.seed, r.test_acc, r.infer_acc, r.gap
        );
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

/// Exact accuracy bookkeeping for the quantized bridge, re-exported for
/// integration tests that check refinement monotonicity end to end.
pub fn quantized_bayes_accuracy(joint: &DiscreteJoint) -> f64 {
    bayes_adversary_accuracy(joint)
}
