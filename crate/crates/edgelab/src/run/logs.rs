//! On-disk layout of a run directory and the records written into it.
//!
//! A run directory contains:
//!
//! * `config.json` — the full [`RunConfig`](crate::run::RunConfig), written
//!   once at creation and checked on resume;
//! * `steps.jsonl` — one [`StepRecord`] per optimization step;
//! * `evals.jsonl` — one [`EvalRecord`](crate::tasks::eval::EvalRecord)
//!   per evaluation point;
//! * `rollouts.jsonl` — one [`LoggedRollout`] per training rollout, with
//!   its evidence record, so every diagnostic can be recomputed offline;
//! * `ckpt-NNNNNN.ckpt` — parameter checkpoints with optimizer state;
//! * `summary.json` — written when the run finishes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsSummary;
use crate::error::Result;
use crate::evidence::EvidenceRecord;
use crate::rollout::Rollout;

pub const CONFIG_FILE: &str = "config.json";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const EVALS_FILE: &str = "evals.jsonl";
pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Scalars logged for one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step index; step `s` transforms the checkpoint at `s-1`
    /// into the checkpoint at `s`.
    pub step: u64,
    pub loss_main: f64,
    pub loss_anchor: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    /// Response tokens across the step's rollouts.
    pub tokens: usize,
    /// Tokens that actually contributed to the update.
    pub active_tokens: usize,
    /// Fraction of tokens at the PPO ratio-clip boundary (verifier-based
    /// method only).
    pub clipped_fraction: Option<f64>,
    /// The update was skipped because the loss or gradient was
    /// non-finite; parameters were left untouched.
    pub skipped: bool,
    pub rollouts: usize,
    pub guided_rollouts: usize,
    pub diagnostics: DiagnosticsSummary,
}

/// A training rollout as persisted: the step it was sampled on, the
/// rollout itself, and the evidence streams computed from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRollout {
    pub step: u64,
    pub rollout: Rollout,
    pub record: EvidenceRecord,
}

/// File name of the checkpoint written after `step` steps.
pub fn checkpoint_file(step: u64) -> String {
    format!("ckpt-{step:06}.ckpt")
}

/// Scan a run directory for checkpoints; return the newest as
/// `(step, path)`, or `None` if the directory holds none.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(step) = parse_checkpoint_step(name) else { continue };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best)
}

/// Parse `ckpt-NNNNNN.ckpt` back into its step number.
pub fn parse_checkpoint_step(name: &str) -> Option<u64> {
    let digits = name.strip_prefix("ckpt-")?.strip_suffix(".ckpt")?;
    if digits.len() != 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Drop records past `step` from every per-step log in `dir`, so a
/// resumed run continues from a checkpoint without duplicate lines.
pub fn truncate_logs_to_step(dir: &Path, step: u64) -> Result<()> {
    crate::jsonl::retain_jsonl::<StepRecord>(&dir.join(STEPS_FILE), |r| r.step <= step)?;
    crate::jsonl::retain_jsonl::<LoggedRollout>(&dir.join(ROLLOUTS_FILE), |r| r.step <= step)?;
    crate::jsonl::retain_jsonl::<crate::tasks::eval::EvalRecord>(&dir.join(EVALS_FILE), |r| {
        r.step <= step
    })?;
    Ok(())
}
