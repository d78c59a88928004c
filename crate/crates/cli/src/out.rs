//! Output-side plumbing shared by the subcommands.

use crate::config::RunConfig;
use crate::CommonArgs;
use backfill_core::error::{Error, Result};
use backfill_core::store::{LoadOptions, RevisionDataset, UptoWeek};
use backfill_core::util::atomic_write;
use std::path::{Path, PathBuf};

/// Load config file plus flag overrides and validate the result.
pub fn effective_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply(common);
    cfg.validate()?;
    Ok(cfg)
}

pub fn require_data(common: &CommonArgs) -> Result<RevisionDataset> {
    let path = common
        .data
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--data is required".into()))?;
    RevisionDataset::load_csv(path, &LoadOptions::default())
}

pub fn require_out(common: &CommonArgs) -> Result<PathBuf> {
    let dir = common
        .out
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--out is required".into()))?;
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    Ok(dir.to_path_buf())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

/// Run manifest written next to a subcommand's outputs. Deterministic on
/// purpose: config hash and seed, never timestamps.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    outputs: &[&str],
    echo_config: bool,
) -> Result<()> {
    let mut doc = serde_json::json!({
        "format": "run-manifest-v1",
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "outputs": outputs,
    });
    if echo_config {
        doc["config"] = serde_json::to_value(cfg).expect("config serializes");
    }
    let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    write_text(&dir.join(format!("{command}.manifest.json")), &(text + "\n"))
}

/// The revision diagnostics assume at least seven issues per sequence.
/// Short histories still flow through every pipeline; just say so.
pub fn warn_short_bseqs(ds: &RevisionDataset) {
    let mut short = 0usize;
    let mut total = 0usize;
    for sig in ds.signals() {
        for obs in ds.observation_weeks(sig) {
            if let Ok(b) = ds.backfill_sequence(sig, obs, UptoWeek::Final) {
                total += 1;
                if b.len() < 7 {
                    short += 1;
                }
            }
        }
    }
    if short > 0 {
        eprintln!("warning: {short} of {total} backfill sequences have fewer than 7 issues");
    }
}

/// Run `f` on a dedicated pool of `jobs` threads, or inline when no job
/// count was given. Job outputs are collected in index order either way.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
