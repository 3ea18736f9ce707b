//! Metrics files: fixed column orders, locale-independent numbers with 17
//! significant digits, and atomic writes (temp file + rename) so partial
//! files never appear under a reader or a parallel sweep.

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use std::path::Path;

/// 17 significant digits, '.' separator, exponent form; round-trips f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", path.display()))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// A CSV table with a fixed header, rendered deterministically.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Table { header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        Ok(w.into_inner()?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }
}

/// Per-round training metrics. `wall_ms` stays 0 unless timing was
/// requested, keeping reruns byte-identical.
pub fn train_metrics_table(rows: &[(usize, f64, f64, u64)]) -> Table {
    let mut t = Table::new(&["round", "mean_ce_loss", "mean_jsd_loss", "wall_ms"]);
    for &(round, ce, jsd, wall) in rows {
        t.push(vec![round.to_string(), fmt_f64(ce), fmt_f64(jsd), wall.to_string()]);
    }
    t
}

/// One evaluated run: the sweep row shape.
pub struct SweepRow {
    pub dataset: String,
    pub lambda: f64,
    pub test_acc: f64,
    pub infer_acc: f64,
    pub gap: f64,
    pub seed: u64,
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&["dataset", "lambda", "test_acc", "infer_acc", "gap", "seed"]);
    for r in rows {
        t.push(vec![
            r.dataset.clone(),
            fmt_f64(r.lambda),
            fmt_f64(r.test_acc),
            fmt_f64(r.infer_acc),
            fmt_f64(r.gap),
            r.seed.to_string(),
        ]);
    }
    t
}

/// The matched-leakage defense comparison shape.
pub struct BaselineRow {
    pub defense: String,
    pub hyperparam: f64,
    pub test_acc: f64,
    pub infer_acc: f64,
}

pub fn baseline_table(rows: &[BaselineRow]) -> Table {
    let mut t = Table::new(&["defense", "hyperparam", "test_acc", "infer_acc"]);
    for r in rows {
        t.push(vec![
            r.defense.clone(),
            fmt_f64(r.hyperparam),
            fmt_f64(r.test_acc),
            fmt_f64(r.infer_acc),
        ]);
    }
    t
}

/// One verified random instance of the analytic bounds.
pub fn theory_table(rows: &[(String, tappfl_core::theory::TheoryReport)]) -> Table {
    let mut t = Table::new(&[
        "instance_id",
        "adv",
        "delta",
        "H",
        "err",
        "thm1_lhs",
        "thm1_rhs",
        "thm2_acc",
        "thm2_bound",
        "thm1_holds",
        "thm2_holds",
    ]);
    for (id, r) in rows {
        t.push(vec![
            id.clone(),
            fmt_f64(r.adv),
            fmt_f64(r.delta),
            fmt_f64(r.entropy_bits),
            fmt_f64(r.err),
            fmt_f64(r.thm1_lhs),
            fmt_f64(r.thm1_rhs),
            fmt_f64(r.thm2_acc),
            fmt_f64(r.thm2_bound),
            r.thm1_holds.to_string(),
            r.thm2_holds.to_string(),
        ]);
    }
    t
}

/// Entropy-bound check on quantized learned representations.
pub struct QuantizedRow {
    pub bins_per_dim: usize,
    pub occupied_bins: usize,
    pub adv: f64,
    pub entropy_bits: f64,
    pub thm2_acc: f64,
    pub thm2_bound: f64,
    pub holds: bool,
}

pub fn quantized_table(rows: &[QuantizedRow]) -> Table {
    let mut t = Table::new(&[
        "bins_per_dim",
        "occupied_bins",
        "adv",
        "H",
        "thm2_acc",
        "thm2_bound",
        "thm2_holds",
    ]);
    for r in rows {
        t.push(vec![
            r.bins_per_dim.to_string(),
            r.occupied_bins.to_string(),
            fmt_f64(r.adv),
            fmt_f64(r.entropy_bits),
            fmt_f64(r.thm2_acc),
            fmt_f64(r.thm2_bound),
            r.holds.to_string(),
        ]);
    }
    t
}

/// Writes the self-describing run identity: resolved config copy plus a
/// manifest with its hash. Directories with equal hashes were produced by
/// equal configs and therefore hold equal metrics.
pub fn write_run_identity(out_dir: &Path, command: &str, config_toml: &str, seed: u64) -> Result<String> {
    let hash = sha256_hex(config_toml.as_bytes());
    atomic_write(&out_dir.join("config.toml"), config_toml.as_bytes())?;
    let manifest = format!("command = {command}\nconfig_sha256 = {hash}\nseed = {seed}\n");
    atomic_write(&out_dir.join("MANIFEST.txt"), manifest.as_bytes())?;
    Ok(hash)
}
