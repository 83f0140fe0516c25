//! Checkpoint evaluation: the identity probe, the persona probe, and
//! held-out math accuracy.
//!
//! Evaluation never attaches privileged context — internalization only
//! counts if the behavior shows up in a plain prompt. The identity probe
//! asks the direct identity questions; the persona probe is the union of
//! those and a fixed set of held-out capability prompts, measuring
//! whether the learned self-identity also surfaces where nobody asked.
//! Each (probe, sample) pair draws from an RNG stream derived without
//! the step number, so successive checkpoints are scored on paired
//! noise and differences between checkpoints are differences in
//! parameters alone.

use serde::{Deserialize, Serialize};

use super::identity::{score_identity, IdentityTaskSpec};
use super::math::{verify_math, MathProblem, MathTaskSpec};
use crate::error::{domain_err, Result};
use crate::policy::{ContextAttachment, PolicyParams};
use crate::rng::{derive_rng, stream};
use crate::rollout::{sample_rollout, PolicySet, PromptSpec, Rollout};
use crate::sampler::SamplerConfig;
use crate::vocab::{TokenId, Vocabulary};

/// Number of held-out math problems in the capability prompt set.
pub const CAPABILITY_PROMPTS: usize = 12;

/// Probe-kind tags inside the evaluation RNG stream.
mod kind {
    pub const IDENTITY: u64 = 0;
    pub const MATH: u64 = 1;
}

/// Aggregates for one evaluated checkpoint. One of these is logged as a
/// JSON object per checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    /// Strict target self-naming rate on the identity probe.
    pub id_selfname: f64,
    /// Strict target self-naming rate over the whole persona probe
    /// (identity prompts plus capability prompts).
    pub persona_selfname: f64,
    /// Counter-identity self-naming rate on the identity probe.
    pub id_counter: f64,
    /// Exact-answer rate on the capability prompts.
    pub math_acc: f64,
    /// Fraction of capability responses with no well-formed boxed answer.
    pub parse_failure_rate: f64,
    /// Fraction of all probe responses that hit the token budget.
    pub truncation_rate: f64,
}

/// The fixed capability prompt set: the first held-out problems in the
/// deterministic enumeration order of the split.
pub fn capability_prompts(math: &MathTaskSpec) -> &[MathProblem] {
    &math.held_out[..CAPABILITY_PROMPTS.min(math.held_out.len())]
}

/// Raw probe rollouts, before aggregation. `prompt_index` on identity
/// rollouts indexes the probe list; on math rollouts it indexes
/// [`capability_prompts`].
#[derive(Debug, Clone)]
pub struct ProbeRollouts {
    pub identity: Vec<Rollout>,
    pub math: Vec<Rollout>,
}

fn probe_cfg(sampler: &SamplerConfig, max_tokens: usize) -> SamplerConfig {
    SamplerConfig { max_tokens, guided_fraction: 0.0, ..*sampler }
}

/// No probe may contain a token that distinguishes the privileged
/// paragraph — otherwise the probe itself would hint at the answer.
fn scan_for_leak(prompt: &[TokenId], distinguishing: &[TokenId]) -> Result<()> {
    if prompt.iter().any(|t| distinguishing.contains(t)) {
        return domain_err(
            "evaluation prompt contains a distinguishing token of the privileged context",
        );
    }
    Ok(())
}

/// Sample every probe rollout for one checkpoint: plain conditioning,
/// never guided, fixed per-(kind, prompt, sample) streams.
pub fn probe_rollouts(
    params: &PolicyParams,
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    math: &MathTaskSpec,
    sampler: &SamplerConfig,
    run_seed: u64,
) -> Result<ProbeRollouts> {
    let distinguishing = id.distinguishing_tokens(v);
    let policies = PolicySet { student: params, teacher: params, base: params };

    let id_cfg = probe_cfg(sampler, id.max_response_tokens);
    let mut identity = Vec::with_capacity(id.probes.len() * id.samples_per_prompt);
    for (pi, probe) in id.probes.iter().enumerate() {
        scan_for_leak(probe, &distinguishing)?;
        let spec = PromptSpec {
            prompt: probe.clone(),
            attachment: ContextAttachment::none(),
            prompt_index: pi,
        };
        for si in 0..id.samples_per_prompt {
            let mut rng =
                derive_rng(run_seed, &[stream::EVAL, kind::IDENTITY, pi as u64, si as u64]);
            identity.push(sample_rollout(&policies, v, &spec, &id_cfg, false, &mut rng, si)?);
        }
    }

    let math_cfg = probe_cfg(sampler, math.max_response_tokens);
    let capability = capability_prompts(math);
    let mut math_rollouts = Vec::with_capacity(capability.len() * id.samples_per_prompt);
    for (pi, problem) in capability.iter().enumerate() {
        let prompt = problem.prompt(v);
        scan_for_leak(&prompt, &distinguishing)?;
        let spec = PromptSpec { prompt, attachment: ContextAttachment::none(), prompt_index: pi };
        for si in 0..id.samples_per_prompt {
            let mut rng = derive_rng(run_seed, &[stream::EVAL, kind::MATH, pi as u64, si as u64]);
            math_rollouts.push(sample_rollout(&policies, v, &spec, &math_cfg, false, &mut rng, si)?);
        }
    }

    Ok(ProbeRollouts { identity, math: math_rollouts })
}

fn rate(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Score and aggregate probe rollouts into one record.
pub fn aggregate_record(
    step: u64,
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    math: &MathTaskSpec,
    probes: &ProbeRollouts,
) -> EvalRecord {
    let capability = capability_prompts(math);
    let mut id_selfname = 0usize;
    let mut id_counter = 0usize;
    let mut persona_selfname = 0usize;
    let mut truncated = 0usize;
    for r in &probes.identity {
        let flags = score_identity(&r.response, v, id);
        id_selfname += flags.edge_selfname as usize;
        id_counter += flags.counter_name as usize;
        persona_selfname += flags.edge_selfname as usize;
        truncated += r.truncated as usize;
    }
    let mut correct = 0usize;
    let mut parse_failures = 0usize;
    for r in &probes.math {
        let flags = score_identity(&r.response, v, id);
        persona_selfname += flags.edge_selfname as usize;
        truncated += r.truncated as usize;
        let score = verify_math(&r.response, v, &capability[r.prompt_index]);
        correct += (score.reward == 1.0) as usize;
        parse_failures += score.parse_failure as usize;
    }
    let n_id = probes.identity.len();
    let n_math = probes.math.len();
    EvalRecord {
        step,
        id_selfname: rate(id_selfname, n_id),
        persona_selfname: rate(persona_selfname, n_id + n_math),
        id_counter: rate(id_counter, n_id),
        math_acc: rate(correct, n_math),
        parse_failure_rate: rate(parse_failures, n_math),
        truncation_rate: rate(truncated, n_id + n_math),
    }
}

/// Run the full probe suite against one set of parameters.
pub fn evaluate_checkpoint(
    params: &PolicyParams,
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    math: &MathTaskSpec,
    sampler: &SamplerConfig,
    run_seed: u64,
    step: u64,
) -> Result<EvalRecord> {
    let probes = probe_rollouts(params, v, id, math, sampler, run_seed)?;
    Ok(aggregate_record(step, v, id, math, &probes))
}
