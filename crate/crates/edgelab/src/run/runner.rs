//! The training loop: prepare the shared pretrained base, then run one
//! experiment end to end with evaluation, checkpointing, scalar logging,
//! and crash-safe resume.
//!
//! A step `s` (1-based) turns the step-`s-1` parameters into the step-`s`
//! parameters. Every random draw inside a step derives from
//! `(seed, stream, s)` and the checkpoint carries the optimizer slots, so
//! interrupting after any checkpoint and resuming replays the remaining
//! steps bitwise.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::evidence::{build_record, EvidenceParams, EvidenceRecord};
use crate::jsonl::{append_jsonl, read_jsonl};
use crate::objectives::{train_step, GroupRewardBatch, OptimizerState, StepEntry};
use crate::policy::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::policy::{ArchSpec, ContextAttachment, PolicyParams};
use crate::rng::{derive_rng, stream};
use crate::rollout::{sample_batch, BatchSeed, PolicySet, PromptSpec, Rollout};
use crate::run::config::RunConfig;
use crate::run::logs::{
    checkpoint_file, latest_checkpoint, truncate_logs_to_step, LoggedRollout, StepRecord,
    CONFIG_FILE, EVALS_FILE, ROLLOUTS_FILE, STEPS_FILE, SUMMARY_FILE,
};
use crate::run::preset::{Axis, ExperimentPreset};
use crate::sampler::SamplerConfig;
use crate::tasks::eval::{evaluate_checkpoint, EvalRecord};
use crate::tasks::math::verify_math;
use crate::tasks::pretrain::{pretrain_base, PretrainConfig, PretrainReport};
use crate::tasks::World;

/// Consecutive non-finite steps tolerated before the run aborts.
const MAX_NONFINITE_STREAK: u64 = 10;
/// Step records kept in memory for the abort dump.
const ABORT_TAIL: usize = 10;
/// File the abort dump is written to.
pub const ABORT_FILE: &str = "abort.json";

/// Everything a finished run reports: the scalar stream, the evaluation
/// stream, and the best-capability marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub code: String,
    pub seed: u64,
    /// One record per completed optimization step.
    pub steps: Vec<StepRecord>,
    /// One record per evaluated checkpoint (step 0 included).
    pub evals: Vec<EvalRecord>,
    /// Step of the evaluated checkpoint with the highest held-out math
    /// accuracy; the latest such step on ties.
    pub best_capability_step: u64,
}

impl RunSummary {
    /// The evaluation row at the best-capability marker.
    pub fn best_eval(&self) -> Option<&EvalRecord> {
        self.evals.iter().find(|e| e.step == self.best_capability_step)
    }

    fn from_logs(code: &str, seed: u64, steps: Vec<StepRecord>, evals: Vec<EvalRecord>) -> Self {
        let best_capability_step = evals
            .iter()
            .max_by(|a, b| {
                a.math_acc.total_cmp(&b.math_acc).then(a.step.cmp(&b.step))
            })
            .map(|e| e.step)
            .unwrap_or(0);
        RunSummary { code: code.to_string(), seed, steps, evals, best_capability_step }
    }
}

/// Diagnostic dump written when a run aborts on non-finite losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbortDump {
    pub step: u64,
    pub streak: u64,
    /// The most recent step records, newest last.
    pub recent: Vec<StepRecord>,
}

// ---------------------------------------------------------------------
// Shared pretrained base
// ---------------------------------------------------------------------

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Cache key identifying a base: a stable hash of the architecture and
/// the pretraining recipe.
pub fn base_cache_key(arch: &ArchSpec, cfg: &PretrainConfig) -> Result<String> {
    let blob = serde_json::to_string(&(arch, cfg))?;
    Ok(format!("{:016x}", fnv1a64(blob.as_bytes())))
}

/// Pretrain the shared base — or load it from `cache_dir` if an earlier
/// call already built the same one. The health report is gated either
/// way, so a cached base is exactly as trustworthy as a fresh one.
///
/// The health evaluation uses the default sampler, which keeps the cache
/// key independent of any particular run's sampler settings.
pub fn prepare_base(
    arch: &ArchSpec,
    world: &World,
    cfg: &PretrainConfig,
    cache_dir: &Path,
) -> Result<(PolicyParams, PretrainReport)> {
    std::fs::create_dir_all(cache_dir)?;
    let key = base_cache_key(arch, cfg)?;
    let ckpt_path = cache_dir.join(format!("base-{key}.ckpt"));
    let report_path = cache_dir.join(format!("base-{key}.report.json"));
    if ckpt_path.exists() && report_path.exists() {
        let loaded = load_checkpoint(&ckpt_path)?;
        if loaded.params.arch() != arch {
            return Err(Error::Artifact(format!(
                "cached base {} was built for a different architecture",
                ckpt_path.display()
            )));
        }
        let report: PretrainReport =
            serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        return Ok((loaded.params, report));
    }
    let (params, report) =
        pretrain_base(arch, &world.vocab, &world.identity, &world.math, cfg, &SamplerConfig::default())?;
    save_checkpoint(&ckpt_path, &params, &CheckpointMeta { seed: cfg.seed, step: 0 }, &[])?;
    write_json_atomic(&report_path, &report)?;
    Ok((params, report))
}

// ---------------------------------------------------------------------
// Prompt selection
// ---------------------------------------------------------------------

/// Pick this step's prompts: a seeded partial shuffle of the axis's
/// prompt pool, each carrying the privileged attachment the run trains
/// with.
pub fn select_prompts(cfg: &RunConfig, world: &World, step: u64) -> Result<Vec<PromptSpec>> {
    let pool_len = match cfg.axis {
        Axis::Identity => world.identity.probes.len(),
        Axis::Math => world.math.train.len(),
    };
    if pool_len == 0 {
        return config_err("prompt pool is empty");
    }
    let k = cfg.prompts_per_step.min(pool_len);
    let mut idx: Vec<usize> = (0..pool_len).collect();
    let mut rng = derive_rng(cfg.seed, &[stream::PROMPT_ORDER, step]);
    for j in 0..k {
        let swap = rng.gen_range(j..pool_len);
        idx.swap(j, swap);
    }
    idx.truncate(k);
    let specs = idx
        .into_iter()
        .map(|i| {
            let (prompt, privileged) = match cfg.axis {
                Axis::Identity => {
                    (world.identity.probes[i].clone(), world.identity.privileged.clone())
                }
                Axis::Math => {
                    let p = &world.math.train[i];
                    (p.prompt(&world.vocab), p.trace(&world.vocab))
                }
            };
            PromptSpec {
                prompt,
                attachment: ContextAttachment::new(cfg.attach, privileged),
                prompt_index: i,
            }
        })
        .collect();
    Ok(specs)
}

/// Group-relative advantages for a verifier-scored batch: binary rewards
/// per rollout, grouped by prompt.
fn verifier_advantages(world: &World, rollouts: &[Rollout]) -> Result<Vec<f64>> {
    let mut groups = Vec::with_capacity(rollouts.len());
    let mut rewards = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        let problem = world.math.train.get(r.prompt_index).ok_or_else(|| {
            Error::Domain(format!("rollout prompt_index {} outside the train pool", r.prompt_index))
        })?;
        groups.push(r.prompt_index);
        rewards.push(verify_math(&r.response, &world.vocab, problem).reward);
    }
    Ok(GroupRewardBatch::new(groups, rewards)?.advantages())
}

// ---------------------------------------------------------------------
// The run loop
// ---------------------------------------------------------------------

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn optimizer_extras(opt: &OptimizerState) -> Vec<(String, Vec<f64>)> {
    opt.to_sections()
}

fn save_run_checkpoint(
    dir: &Path,
    params: &PolicyParams,
    opt: &OptimizerState,
    seed: u64,
    step: u64,
) -> Result<()> {
    let sections = optimizer_extras(opt);
    let refs: Vec<(&str, &[f64])> =
        sections.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    save_checkpoint(&dir.join(checkpoint_file(step)), params, &CheckpointMeta { seed, step }, &refs)
}

/// Run one experiment to completion in `out_dir`.
///
/// The directory may already hold a partial run with the same config; in
/// that case the run resumes from its latest checkpoint and the combined
/// logs are bitwise what an uninterrupted run would have produced. A
/// directory holding a *different* config is refused.
pub fn run_experiment(
    cfg: &RunConfig,
    world: &World,
    base: &PolicyParams,
    out_dir: &Path,
) -> Result<RunSummary> {
    cfg.validate()?;
    if base.arch() != &cfg.arch {
        return config_err("base parameters do not match the configured architecture");
    }
    std::fs::create_dir_all(out_dir)?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    if cfg_path.exists() {
        let stored: RunConfig = serde_json::from_str(&std::fs::read_to_string(&cfg_path)?)?;
        if stored != *cfg {
            return Err(Error::Artifact(format!(
                "{} holds a different run configuration; refusing to mix runs",
                out_dir.display()
            )));
        }
    } else {
        write_json_atomic(&cfg_path, cfg)?;
    }
    let abort_path = out_dir.join(ABORT_FILE);
    if abort_path.exists() {
        std::fs::remove_file(&abort_path)?;
    }

    let n_params = cfg.arch.param_count();
    let (mut student, mut opt, start) = match latest_checkpoint(out_dir)? {
        Some((step, path)) => {
            let loaded = load_checkpoint(&path)?;
            if loaded.params.arch() != &cfg.arch {
                return Err(Error::Artifact(format!(
                    "checkpoint {} does not match the configured architecture",
                    path.display()
                )));
            }
            if loaded.meta.seed != cfg.seed {
                return Err(Error::Artifact(format!(
                    "checkpoint {} carries seed {}, run is seeded {}",
                    path.display(),
                    loaded.meta.seed,
                    cfg.seed
                )));
            }
            let opt = OptimizerState::from_sections(cfg.optimizer, n_params, &loaded.extras)?;
            truncate_logs_to_step(out_dir, step)?;
            (loaded.params, opt, step)
        }
        None => {
            let student = base.clone();
            let opt = OptimizerState::new(cfg.optimizer, n_params);
            let eval = evaluate_checkpoint(
                &student,
                &world.vocab,
                &world.identity,
                &world.math,
                &cfg.sampler,
                cfg.seed,
                0,
            )?;
            append_jsonl(&out_dir.join(EVALS_FILE), &[eval])?;
            save_run_checkpoint(out_dir, &student, &opt, cfg.seed, 0)?;
            (student, opt, 0)
        }
    };

    let evidence_params = EvidenceParams {
        region: cfg.objective.mask_region,
        tau: cfg.objective.tau,
        nz_band: cfg.objective.nz_band,
        eps: cfg.objective.eps_w,
    };
    let mut streak: u64 = 0;
    let mut recent: VecDeque<StepRecord> = VecDeque::with_capacity(ABORT_TAIL + 1);

    for s in (start + 1)..=cfg.steps {
        let teacher = match cfg.teacher {
            crate::run::config::TeacherSource::CurrentDetached => student.clone(),
            crate::run::config::TeacherSource::FrozenBase => base.clone(),
        };
        let prompts = select_prompts(cfg, world, s)?;
        let batch = sample_batch(
            &PolicySet { student: &student, teacher: &teacher, base },
            &world.vocab,
            &prompts,
            &cfg.sampler,
            cfg.rollouts_per_prompt,
            BatchSeed { run_seed: cfg.seed, step: s },
        )?;
        let records: Vec<EvidenceRecord> = batch
            .iter()
            .map(|r| {
                build_record(
                    &r.logp_teacher_priv,
                    &r.logp_teacher_plain,
                    &r.logp_student_plain,
                    &evidence_params,
                )
            })
            .collect::<Result<_>>()?;
        let advantages = if cfg.objective.method.requires_verifier() {
            Some(verifier_advantages(world, &batch)?)
        } else {
            None
        };
        let entries: Vec<StepEntry> = batch
            .iter()
            .zip(&records)
            .enumerate()
            .map(|(i, (r, rec))| StepEntry {
                rollout: r,
                record: rec,
                group_advantage: advantages.as_ref().map(|a| a[i]),
            })
            .collect();
        let stats = train_step(
            &mut student,
            &teacher,
            base,
            &world.vocab,
            &cfg.objective,
            &entries,
            &mut opt,
            cfg.lr,
        )?;

        let truncated: Vec<bool> = batch.iter().map(|r| r.truncated).collect();
        let diagnostics = crate::diagnostics::summarize_batch(
            &records,
            &truncated,
            cfg.objective.method.diagnostics_flavor(),
            cfg.objective.eps_w,
        )?;
        let record = StepRecord {
            step: s,
            loss_main: stats.loss_main,
            loss_anchor: stats.loss_anchor,
            loss_total: stats.loss_total,
            grad_norm: stats.grad_norm,
            tokens: stats.tokens,
            active_tokens: stats.active_tokens,
            clipped_fraction: stats.clipped_fraction,
            skipped: stats.skipped,
            rollouts: batch.len(),
            guided_rollouts: batch.iter().filter(|r| r.guided).count(),
            diagnostics,
        };
        append_jsonl(&out_dir.join(STEPS_FILE), &[record.clone()])?;
        let logged: Vec<LoggedRollout> = batch
            .into_iter()
            .zip(records)
            .map(|(rollout, rec)| LoggedRollout { step: s, rollout, record: rec })
            .collect();
        append_jsonl(&out_dir.join(ROLLOUTS_FILE), &logged)?;

        if recent.len() == ABORT_TAIL {
            recent.pop_front();
        }
        recent.push_back(record);
        if stats.skipped {
            streak += 1;
            if streak > MAX_NONFINITE_STREAK {
                let dump =
                    AbortDump { step: s, streak, recent: recent.iter().cloned().collect() };
                write_json_atomic(&abort_path, &dump)?;
                return Err(Error::Aborted(format!(
                    "non-finite loss for {streak} consecutive steps; dump at {}",
                    abort_path.display()
                )));
            }
        } else {
            streak = 0;
        }

        if s % cfg.eval_interval == 0 || s == cfg.steps {
            let eval = evaluate_checkpoint(
                &student,
                &world.vocab,
                &world.identity,
                &world.math,
                &cfg.sampler,
                cfg.seed,
                s,
            )?;
            append_jsonl(&out_dir.join(EVALS_FILE), &[eval])?;
        }
        if s % cfg.checkpoint_interval == 0 || s == cfg.steps {
            save_run_checkpoint(out_dir, &student, &opt, cfg.seed, s)?;
        }
    }

    let steps: Vec<StepRecord> = read_jsonl(&out_dir.join(STEPS_FILE)).unwrap_or_default();
    let evals: Vec<EvalRecord> = read_jsonl(&out_dir.join(EVALS_FILE))?;
    let summary = RunSummary::from_logs(&cfg.code, cfg.seed, steps, evals);
    write_json_atomic(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Resolve a preset into a run configuration against a built world.
pub fn preset_config(preset: &ExperimentPreset, world: &World) -> Result<RunConfig> {
    RunConfig::from_preset(
        preset,
        world.vocab.size(),
        world.identity.max_response_tokens,
        world.math.max_response_tokens,
    )
}

/// Run a named preset under `out_root/<code>`, preparing (or reusing)
/// the shared base under `out_root/base`.
pub fn run_preset(code: &str, out_root: &Path) -> Result<RunSummary> {
    let preset = crate::run::preset::preset(code)
        .ok_or_else(|| Error::Config(format!("unknown preset {code}")))?;
    let world = World::build()?;
    let cfg = preset_config(preset, &world)?;
    let (base, _report) = prepare_base(&cfg.arch, &world, &cfg.pretrain, &out_root.join("base"))?;
    run_experiment(&cfg, &world, &base, &out_root.join(code))
}

/// Directory a preset's artifacts live in under an output root.
pub fn preset_dir(out_root: &Path, code: &str) -> PathBuf {
    out_root.join(code)
}
