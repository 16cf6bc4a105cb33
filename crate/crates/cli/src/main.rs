//! `audit` command-line front end.
//!
//! Subcommands:
//! - `run`: audit a real dataset (manifest) end to end and write ranked
//!   slice summaries with token explanations.
//! - `bench`: run the synthetic bootstrap protocol from a config file.
//! - `explain`: explain one externally supplied slice of a dataset.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use audit_core::config::AuditConfig;
use audit_core::eval::{bootstrap_audit, emit_report, explain_slice, run_manifest_audit};
use audit_core::explain::load_token_table;
use audit_core::ingest::load_dataset;

#[derive(Parser)]
#[command(name = "audit", version, about = "Slice-level auditing for black-box classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Audit a dataset: ingest, fuse, discover slices, explain, emit.
    Run {
        /// Dataset manifest (JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Config file (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Token-embedding table CSV enabling attribute similarity checks.
        #[arg(long)]
        token_table: Option<PathBuf>,
        /// Overrides the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the synthetic bootstrap protocol.
    Bench {
        /// Config file (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Explain an existing slice (a JSON list of sample ids).
    Explain {
        /// Dataset manifest (JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Slice file: `["id", ...]` or `{"slice_id": 3, "ids": [...]}`.
        #[arg(long)]
        slice_file: PathBuf,
        /// Config file (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Token-embedding table CSV enabling attribute similarity checks.
        #[arg(long)]
        token_table: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SliceFile {
    Ids(Vec<String>),
    Tagged { slice_id: i64, ids: Vec<String> },
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<AuditConfig> {
    let mut config = match path {
        Some(p) => AuditConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => AuditConfig::default(),
    };
    if let Some(seed) = seed {
        config.base_seed = seed;
    }
    Ok(config)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            manifest,
            config,
            out,
            token_table,
            seed,
        } => {
            let config = load_config(config.as_ref(), seed)?;
            let dataset = load_dataset(&manifest)
                .with_context(|| format!("loading manifest {}", manifest.display()))?;
            let table = token_table.as_deref().map(load_token_table).transpose()?;
            let report = run_manifest_audit(&dataset, &config, table.as_ref())?;
            fs::create_dir_all(&out)?;
            let path = out.join("run_report.json");
            write_json(&report, &path)?;
            let flagged = report.slices.iter().filter(|s| s.size > 0).count();
            println!(
                "audited {} samples: {} populated slices, top error rate {:.3}",
                dataset.len(),
                flagged,
                report.slices.first().map(|s| s.error_rate).unwrap_or(0.0)
            );
            println!("wrote {}", path.display());
        }
        Command::Bench { config, out, seed } => {
            let config = load_config(config.as_ref(), seed)?;
            let report = bootstrap_audit(&config)?;
            let files = emit_report(&report, &out)?;
            println!(
                "bench complete: {} iterations ({} invalid), mean P@{} = {:.3} vs baseline {:.3}",
                report.per_iteration.len(),
                report.invalid_iterations,
                config.precision_k,
                report.mean_precision_at_k,
                report.mean_baseline_precision
            );
            for file in files {
                println!("wrote {}", file.display());
            }
        }
        Command::Explain {
            manifest,
            slice_file,
            config,
            out,
            token_table,
        } => {
            let config = load_config(config.as_ref(), None)?;
            let dataset = load_dataset(&manifest)
                .with_context(|| format!("loading manifest {}", manifest.display()))?;
            let raw = fs::read_to_string(&slice_file)
                .with_context(|| format!("reading slice file {}", slice_file.display()))?;
            let (slice_id, ids) = match serde_json::from_str::<SliceFile>(&raw)? {
                SliceFile::Ids(ids) => (-1, ids),
                SliceFile::Tagged { slice_id, ids } => (slice_id, ids),
            };
            let err_ids: BTreeSet<String> = ids.into_iter().collect();
            let table = token_table.as_deref().map(load_token_table).transpose()?;
            let stopwords = config.stopwords();
            let report =
                explain_slice(&dataset, &err_ids, slice_id, &config, &stopwords, table.as_ref())?;
            fs::create_dir_all(&out)?;
            let path = out.join("explanation.json");
            write_json(&report, &path)?;
            println!(
                "explained slice of {} samples against {} references",
                err_ids.len(),
                report.reference_size
            );
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
