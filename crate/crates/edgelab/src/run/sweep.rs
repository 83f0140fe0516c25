//! Run a batch of presets side by side and emit a combined comparison
//! file: one row per requested preset, failures included, so a sweep is
//! never silently shorter than what was asked for.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::policy::PolicyParams;
use crate::run::config::RunConfig;
use crate::run::runner::{prepare_base, preset_config, run_experiment, RunSummary};
use crate::tasks::eval::EvalRecord;
use crate::tasks::World;

/// File the per-preset comparison rows are written to.
pub const COMPARISON_FILE: &str = "comparison.jsonl";

/// One queued run: a validated config plus the directory it writes to.
#[derive(Debug, Clone)]
pub struct SweepJob {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
}

/// One comparison row. Failed runs carry the error and no metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub code: String,
    pub seed: Option<u64>,
    pub status: String,
    pub error: Option<String>,
    /// Training rollouts that were guided, summed over all steps.
    pub guided_rollouts: Option<u64>,
    pub best_capability_step: Option<u64>,
    pub best_eval: Option<EvalRecord>,
    pub final_eval: Option<EvalRecord>,
}

impl SweepRow {
    fn ok(code: &str, seed: u64, summary: &RunSummary) -> Self {
        SweepRow {
            code: code.to_string(),
            seed: Some(seed),
            status: "ok".to_string(),
            error: None,
            guided_rollouts: Some(
                summary.steps.iter().map(|s| s.guided_rollouts as u64).sum(),
            ),
            best_capability_step: Some(summary.best_capability_step),
            best_eval: summary.best_eval().cloned(),
            final_eval: summary.evals.last().cloned(),
        }
    }

    fn failed(code: &str, seed: Option<u64>, error: &Error) -> Self {
        SweepRow {
            code: code.to_string(),
            seed,
            status: "failed".to_string(),
            error: Some(error.to_string()),
            guided_rollouts: None,
            best_capability_step: None,
            best_eval: None,
            final_eval: None,
        }
    }
}

/// Everything a sweep produces: summaries of the successful runs plus
/// one comparison row per requested preset, both in request order.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub summaries: Vec<RunSummary>,
    pub rows: Vec<SweepRow>,
}

/// Run `jobs` against a shared `base` on up to `parallelism` worker
/// threads. Results come back in job order; one job failing does not
/// stop the others. Every job must use the same architecture and
/// pretraining recipe as the shared base.
pub fn run_jobs(
    world: &World,
    base: &PolicyParams,
    jobs: &[SweepJob],
    parallelism: usize,
) -> Vec<Result<RunSummary>> {
    let workers = parallelism.max(1).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let job = &jobs[i];
                let outcome = run_experiment(&job.cfg, world, base, &job.out_dir);
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job index was claimed by a worker"))
        .collect()
}

/// Write the comparison rows as JSONL (an empty sweep writes an empty
/// file, making "nothing ran" distinguishable from "never swept").
pub fn write_comparison(rows: &[SweepRow], path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    std::fs::write(path, "")?;
    crate::jsonl::append_jsonl(path, rows)
}

/// Resolve preset codes and run them under `out_root/<code>`, sharing
/// one pretrained base. Unknown or invalid codes become failed rows;
/// the rest still run. The comparison file lands at
/// `out_root/comparison.jsonl`.
pub fn sweep_presets(codes: &[String], out_root: &Path, parallelism: usize) -> Result<SweepOutput> {
    let world = World::build()?;
    std::fs::create_dir_all(out_root)?;

    let resolved: Vec<(String, Result<RunConfig>)> = codes
        .iter()
        .map(|code| {
            let cfg = match crate::run::preset::preset(code) {
                Some(p) => preset_config(p, &world),
                None => config_err(format!("unknown preset {code}")),
            };
            (code.clone(), cfg)
        })
        .collect();

    let jobs: Vec<SweepJob> = resolved
        .iter()
        .filter_map(|(code, cfg)| {
            cfg.as_ref().ok().map(|cfg| SweepJob {
                cfg: cfg.clone(),
                out_dir: out_root.join(code),
            })
        })
        .collect();

    let mut outcomes: Vec<Option<Result<RunSummary>>> = Vec::new();
    if jobs.is_empty() {
        // Nothing runnable; rows below will carry the errors.
    } else {
        let first = &jobs[0].cfg;
        if let Some(j) = jobs.iter().find(|j| {
            j.cfg.arch != first.arch || j.cfg.pretrain != first.pretrain
        }) {
            return config_err(format!(
                "sweep jobs must share one base; {} differs in architecture or pretraining",
                j.cfg.code
            ));
        }
        let (base, _report) =
            prepare_base(&first.arch, &world, &first.pretrain, &out_root.join("base"))?;
        outcomes = run_jobs(&world, &base, &jobs, parallelism).into_iter().map(Some).collect();
    }

    let mut rows = Vec::with_capacity(resolved.len());
    let mut summaries = Vec::new();
    let mut job_iter = outcomes.into_iter();
    for (code, cfg) in &resolved {
        match cfg {
            Err(e) => rows.push(SweepRow::failed(code, None, e)),
            Ok(cfg) => {
                let outcome = job_iter.next().flatten().expect("one outcome per resolved job");
                match outcome {
                    Ok(summary) => {
                        rows.push(SweepRow::ok(code, cfg.seed, &summary));
                        summaries.push(summary);
                    }
                    Err(e) => rows.push(SweepRow::failed(code, Some(cfg.seed), &e)),
                }
            }
        }
    }
    write_comparison(&rows, &out_root.join(COMPARISON_FILE))?;
    Ok(SweepOutput { summaries, rows })
}
