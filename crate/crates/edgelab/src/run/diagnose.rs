//! Offline diagnostics recomputation.
//!
//! Every diagnostic is a pure function of the logged rollout streams and
//! the run configuration, so a finished run directory can be re-derived
//! from scratch: rebuild each step's evidence records from the raw
//! log-probability streams, pool them, and compare against what the run
//! logged. Any divergence — a single flipped bit — is reported.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::summarize_batch;
use crate::error::{Error, Result};
use crate::evidence::{build_record, EvidenceParams};
use crate::jsonl::read_jsonl;
use crate::run::config::RunConfig;
use crate::run::logs::{LoggedRollout, StepRecord, CONFIG_FILE, ROLLOUTS_FILE, STEPS_FILE};

/// What a recomputation pass found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub steps_checked: usize,
    pub rollouts_checked: usize,
    /// Steps whose recomputed values differ from the log (or whose
    /// rollouts are missing), with a reason each.
    pub mismatches: Vec<StepMismatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMismatch {
    pub step: u64,
    pub reason: String,
}

impl DiagnoseReport {
    pub fn clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Recompute every step's evidence records and pooled diagnostics from
/// the persisted rollout streams and compare them with the scalar log.
pub fn diagnose_run(run_dir: &Path) -> Result<DiagnoseReport> {
    let cfg: RunConfig =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join(CONFIG_FILE))?)?;
    let steps: Vec<StepRecord> = read_jsonl(&run_dir.join(STEPS_FILE))?;
    let rollouts: Vec<LoggedRollout> = if run_dir.join(ROLLOUTS_FILE).exists() {
        read_jsonl(&run_dir.join(ROLLOUTS_FILE))?
    } else if steps.is_empty() {
        Vec::new()
    } else {
        return Err(Error::Artifact(format!(
            "{} has step records but no rollout log",
            run_dir.display()
        )));
    };

    let params = EvidenceParams {
        region: cfg.objective.mask_region,
        tau: cfg.objective.tau,
        nz_band: cfg.objective.nz_band,
        eps: cfg.objective.eps_w,
    };
    let mut by_step: BTreeMap<u64, Vec<&LoggedRollout>> = BTreeMap::new();
    for r in &rollouts {
        by_step.entry(r.step).or_default().push(r);
    }

    let mut mismatches = Vec::new();
    let mut rollouts_checked = 0usize;
    for rec in &steps {
        let Some(logged) = by_step.get(&rec.step) else {
            mismatches.push(StepMismatch {
                step: rec.step,
                reason: "no rollouts logged for this step".to_string(),
            });
            continue;
        };
        let mut recs = Vec::with_capacity(logged.len());
        let mut truncated = Vec::with_capacity(logged.len());
        let mut stream_divergence = false;
        for lr in logged {
            let rebuilt = build_record(
                &lr.rollout.logp_teacher_priv,
                &lr.rollout.logp_teacher_plain,
                &lr.rollout.logp_student_plain,
                &params,
            )?;
            if rebuilt != lr.record {
                stream_divergence = true;
            }
            recs.push(rebuilt);
            truncated.push(lr.rollout.truncated);
            rollouts_checked += 1;
        }
        if stream_divergence {
            mismatches.push(StepMismatch {
                step: rec.step,
                reason: "evidence records do not match their rollout streams".to_string(),
            });
            continue;
        }
        let summary = summarize_batch(
            &recs,
            &truncated,
            cfg.objective.method.diagnostics_flavor(),
            cfg.objective.eps_w,
        )?;
        if summary != rec.diagnostics {
            mismatches.push(StepMismatch {
                step: rec.step,
                reason: "pooled diagnostics do not match the scalar log".to_string(),
            });
            continue;
        }
        let guided = logged.iter().filter(|r| r.rollout.guided).count();
        if logged.len() != rec.rollouts || guided != rec.guided_rollouts {
            mismatches.push(StepMismatch {
                step: rec.step,
                reason: format!(
                    "rollout counts differ: log says {}/{} guided, rollouts say {}/{}",
                    rec.guided_rollouts,
                    rec.rollouts,
                    guided,
                    logged.len()
                ),
            });
        }
    }
    // Rollouts for steps absent from the scalar log are equally suspect.
    for step in by_step.keys() {
        if !steps.iter().any(|r| r.step == *step) {
            mismatches.push(StepMismatch {
                step: *step,
                reason: "rollouts logged for a step missing from the scalar log".to_string(),
            });
        }
    }
    mismatches.sort_by_key(|m| m.step);
    Ok(DiagnoseReport { steps_checked: steps.len(), rollouts_checked, mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ArchSpec, PolicyParams};
    use crate::run::runner::run_experiment;
    use crate::tasks::World;

    fn finished_run() -> (tempfile::TempDir, World) {
        let world = World::build().unwrap();
        let arch = ArchSpec::Transformer {
            vocab: world.vocab.size(),
            width: 8,
            heads: 2,
            depth: 1,
            context: 64,
            hidden_mult: 2,
        };
        let mut cfg = RunConfig::base_template(world.vocab.size());
        cfg.arch = arch.clone();
        cfg.steps = 3;
        cfg.checkpoint_interval = 3;
        cfg.eval_interval = 3;
        cfg.prompts_per_step = 2;
        cfg.rollouts_per_prompt = 2;
        cfg.sampler.max_tokens = 5;
        cfg.sampler.guided_fraction = 0.5;
        cfg.lr = 1e-3;
        let base = PolicyParams::init(&arch, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&cfg, &world, &base, dir.path()).unwrap();
        (dir, world)
    }

    #[test]
    fn a_clean_run_recomputes_bitwise() {
        let (dir, _world) = finished_run();
        let report = diagnose_run(dir.path()).unwrap();
        assert!(report.clean(), "mismatches: {:?}", report.mismatches);
        assert_eq!(report.steps_checked, 3);
        assert!(report.rollouts_checked >= 12);
    }

    #[test]
    fn tampering_with_any_log_is_detected() {
        // A corrupted diagnostic scalar.
        let (dir, _world) = finished_run();
        let steps_path = dir.path().join(STEPS_FILE);
        let mut steps: Vec<StepRecord> = read_jsonl(&steps_path).unwrap();
        steps[1].diagnostics.mean_e = steps[1].diagnostics.mean_e.map(|x| x + 1e-12);
        std::fs::write(&steps_path, "").unwrap();
        crate::jsonl::append_jsonl(&steps_path, &steps).unwrap();
        let report = diagnose_run(dir.path()).unwrap();
        assert_eq!(report.mismatches.len(), 1);
        assert_eq!(report.mismatches[0].step, 2);
        assert!(report.mismatches[0].reason.contains("pooled diagnostics"));

        // A corrupted rollout stream under an intact evidence record.
        let (dir, _world) = finished_run();
        let roll_path = dir.path().join(ROLLOUTS_FILE);
        let mut rolls: Vec<LoggedRollout> = read_jsonl(&roll_path).unwrap();
        let victim = rolls.iter_mut().find(|r| r.step == 3).unwrap();
        victim.rollout.logp_teacher_priv[0] += 0.25;
        std::fs::write(&roll_path, "").unwrap();
        crate::jsonl::append_jsonl(&roll_path, &rolls).unwrap();
        let report = diagnose_run(dir.path()).unwrap();
        assert!(report
            .mismatches
            .iter()
            .any(|m| m.step == 3 && m.reason.contains("evidence records")));

        // A missing rollout batch.
        let (dir, _world) = finished_run();
        crate::jsonl::retain_jsonl::<LoggedRollout>(&dir.path().join(ROLLOUTS_FILE), |r| {
            r.step != 1
        })
        .unwrap();
        let report = diagnose_run(dir.path()).unwrap();
        assert!(report.mismatches.iter().any(|m| m.step == 1 && m.reason.contains("no rollouts")));
    }
}
