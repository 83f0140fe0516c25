//! Full configuration of a single training run.
//!
//! [`RunConfig`] gathers everything a run needs to be reproduced from
//! scratch: the architecture and pretraining recipe of the shared base,
//! the objective, the sampler, the conditioning layout, the step budget,
//! and the seed. The runner serializes the config into the run directory
//! and refuses to resume into a directory whose stored config differs,
//! so a run directory is always self-describing.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::objectives::{ObjectiveConfig, OptimizerKind};
use crate::policy::{ArchSpec, AttachMode};
use crate::run::preset::{Axis, ExperimentPreset};
use crate::sampler::SamplerConfig;
use crate::tasks::pretrain::PretrainConfig;

/// Default number of distinct prompts drawn per step.
pub const DEFAULT_PROMPTS_PER_STEP: usize = 6;
/// Default number of rollouts sampled per prompt (the group size for the
/// verifier-based method).
pub const DEFAULT_ROLLOUTS_PER_PROMPT: usize = 4;
/// Default learning rate for fine-tuning runs (momentum-SGD scale).
pub const DEFAULT_LR: f64 = 2e-2;

/// Where the teacher's weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherSource {
    /// The teacher is the student's current weights, detached: each step
    /// clones the student before the update, so the teacher tracks the
    /// student but contributes no gradient. The privileged attachment is
    /// the only thing separating the two.
    #[default]
    CurrentDetached,
    /// The teacher stays pinned to the pretrained base for the whole run.
    FrozenBase,
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Short label for the run (preset code or a user-chosen name).
    pub code: String,
    pub axis: Axis,
    pub arch: ArchSpec,
    /// Recipe for the shared pretrained base this run starts from.
    pub pretrain: PretrainConfig,
    pub objective: ObjectiveConfig,
    pub sampler: SamplerConfig,
    /// How privileged text is attached for the teacher and for guided
    /// behavior sampling.
    pub attach: AttachMode,
    pub teacher: TeacherSource,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
    pub prompts_per_step: usize,
    pub rollouts_per_prompt: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl RunConfig {
    /// Baseline config used by tests and as the template presets are
    /// resolved onto. The sampler's token budget is a placeholder; real
    /// constructors overwrite it with the task's response budget.
    pub fn base_template(vocab_size: usize) -> Self {
        RunConfig {
            code: "custom".to_string(),
            axis: Axis::Identity,
            arch: ArchSpec::transformer(vocab_size),
            pretrain: PretrainConfig::default(),
            objective: ObjectiveConfig::default(),
            sampler: SamplerConfig::default(),
            attach: AttachMode::System,
            teacher: TeacherSource::default(),
            steps: 100,
            seed: 0,
            checkpoint_interval: 10,
            eval_interval: 10,
            prompts_per_step: DEFAULT_PROMPTS_PER_STEP,
            rollouts_per_prompt: DEFAULT_ROLLOUTS_PER_PROMPT,
            lr: DEFAULT_LR,
            optimizer: OptimizerKind::sgd_default(),
        }
    }

    /// Resolve a named preset into a runnable config.
    ///
    /// `vocab_size` and the per-axis response budgets come from the task
    /// definitions; everything method-shaped comes from the preset row.
    pub fn from_preset(
        preset: &ExperimentPreset,
        vocab_size: usize,
        identity_budget: usize,
        math_budget: usize,
    ) -> Result<Self> {
        if preset.is_reference() {
            return config_err(format!(
                "preset {} is the shared-base reference row, not a training run",
                preset.code
            ));
        }
        let axis = preset.effective_axis();
        let mut cfg = RunConfig::base_template(vocab_size);
        cfg.code = preset.code.clone();
        cfg.axis = axis;
        cfg.objective = preset.objective();
        cfg.sampler.guided_fraction = preset.guided_fraction();
        cfg.sampler.max_tokens = match axis {
            Axis::Identity => identity_budget,
            Axis::Math => math_budget,
        };
        cfg.attach = preset.attach;
        cfg.steps = preset.effective_steps();
        cfg.seed = preset.seed;
        cfg.checkpoint_interval = preset.checkpoint_interval;
        cfg.eval_interval = preset.eval_interval;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every cross-field constraint a run depends on.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.objective.validate()?;
        self.sampler.validate()?;
        if self.code.is_empty() {
            return config_err("run code must be non-empty");
        }
        if self.objective.method.requires_verifier() && self.axis != Axis::Math {
            return config_err(
                "the verifier-based method needs a verifiable task; use the math axis",
            );
        }
        if self.objective.method.requires_verifier() && self.rollouts_per_prompt < 2 {
            return config_err(
                "group-relative advantages need at least 2 rollouts per prompt",
            );
        }
        if self.prompts_per_step == 0 {
            return config_err("prompts_per_step must be at least 1");
        }
        if self.rollouts_per_prompt == 0 {
            return config_err("rollouts_per_prompt must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return config_err(format!("lr must be finite and positive, got {}", self.lr));
        }
        if self.checkpoint_interval == 0 || self.eval_interval == 0 {
            return config_err("checkpoint and eval intervals must be at least 1");
        }
        if self.pretrain.steps == 0 {
            return config_err("a run needs a pretrained base; pretrain.steps must be > 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Method;
    use crate::run::preset::preset;

    #[test]
    fn presets_resolve_to_valid_configs_with_axis_budgets() {
        let table = crate::run::preset::preset_table();
        for p in table {
            if p.is_reference() {
                assert!(RunConfig::from_preset(p, 64, 10, 18).is_err());
                continue;
            }
            let cfg = RunConfig::from_preset(p, 64, 10, 18).unwrap();
            assert_eq!(cfg.code, p.code);
            let expect_budget = match cfg.axis {
                Axis::Identity => 10,
                Axis::Math => 18,
            };
            assert_eq!(cfg.sampler.max_tokens, expect_budget, "{}", p.code);
            assert_eq!(cfg.sampler.guided_fraction, p.guided_fraction(), "{}", p.code);
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn verifier_method_is_rejected_off_the_math_axis() {
        let p = preset("N15").unwrap();
        let mut cfg = RunConfig::from_preset(p, 64, 10, 18).unwrap();
        assert_eq!(cfg.objective.method, Method::Rlsd);
        cfg.axis = Axis::Identity;
        assert!(cfg.validate().is_err());
        cfg.axis = Axis::Math;
        cfg.rollouts_per_prompt = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let p = preset("N3u").unwrap();
        let cfg = RunConfig::from_preset(p, 64, 10, 18).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn obvious_field_mistakes_are_caught() {
        let mut cfg = RunConfig::base_template(64);
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::base_template(64);
        cfg.eval_interval = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::base_template(64);
        cfg.prompts_per_step = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::base_template(64);
        cfg.code.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::base_template(64);
        cfg.pretrain.steps = 0;
        assert!(cfg.validate().is_err());
    }
}
