//! Rollout generation and the four log-probability streams.
//!
//! A rollout is sampled either from the plain student or — when the
//! guided flag is up — from the teacher conditioned on the privileged
//! context. Whatever produced it, every response token is then rescored
//! under four conditionings:
//!
//! * student, plain prompt (the distribution being trained),
//! * teacher, privileged prompt (the distillation target),
//! * teacher, plain prompt (the evidence baseline),
//! * base snapshot, plain prompt (the anchor reference).
//!
//! All streams are full-distribution log-probabilities; sampler filtering
//! (top-k/top-p/temperature) affects only which token was drawn. Guided
//! flags are drawn i.i.d. per rollout, and every random draw comes from a
//! functionally derived stream, so batches are reproducible and
//! independent of execution order.


use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};
use crate::policy::{
    conditioning_ids, log_prob_next, log_prob_sequence, ContextAttachment, PolicyParams,
};
use crate::rng::{derive_rng, stream};
use crate::sampler::{sample_token, SamplerConfig};
use crate::vocab::{TokenSeq, Vocabulary};

use rand::Rng;

/// The three parameter vectors a training step reads.
#[derive(Clone, Copy)]
pub struct PolicySet<'a> {
    pub student: &'a PolicyParams,
    pub teacher: &'a PolicyParams,
    pub base: &'a PolicyParams,
}

/// One prompt to roll out from, with its privileged attachment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt: TokenSeq,
    pub attachment: ContextAttachment,
    /// Caller-side identity of the prompt (e.g. dataset index); rollouts
    /// from the same prompt share it, which defines reward groups.
    pub prompt_index: usize,
}

/// A sampled response plus the four rescored log-prob streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt: TokenSeq,
    pub attachment: ContextAttachment,
    pub response: TokenSeq,
    /// Response was drawn from the guided behavior policy.
    pub guided: bool,
    /// Hit the token budget without emitting EOS.
    pub truncated: bool,
    pub prompt_index: usize,
    pub rollout_index: usize,
    /// Full-distribution log-prob of each sampled token under the policy
    /// that actually generated it.
    pub sampled_logp: Vec<f64>,
    pub logp_student_plain: Vec<f64>,
    pub logp_teacher_priv: Vec<f64>,
    pub logp_teacher_plain: Vec<f64>,
    pub logp_base_plain: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

/// Longest conditioning this rollout will ever be rescored under.
fn rescore_budget(vocab: &Vocabulary, spec: &PromptSpec, params: &PolicyParams) -> Result<usize> {
    let priv_len = conditioning_ids(vocab, &spec.prompt, &spec.attachment)?.len();
    let plain_len = conditioning_ids(vocab, &spec.prompt, &ContextAttachment::none())?.len();
    let longest = priv_len.max(plain_len);
    match params.arch().context_limit() {
        Some(limit) if longest >= limit => domain_err(format!(
            "conditioning of length {longest} leaves no room in context {limit}"
        )),
        Some(limit) => Ok(limit - longest),
        None => Ok(usize::MAX),
    }
}

/// Sample one rollout and rescore its four streams.
pub fn sample_rollout(
    policies: &PolicySet,
    vocab: &Vocabulary,
    spec: &PromptSpec,
    cfg: &SamplerConfig,
    guided: bool,
    rng: &mut rand_chacha::ChaCha12Rng,
    rollout_index: usize,
) -> Result<Rollout> {
    cfg.validate()?;
    let (behavior, behavior_attach) = if guided {
        (policies.teacher, spec.attachment.clone())
    } else {
        (policies.student, ContextAttachment::none())
    };
    // The response must fit after the longest conditioning of any policy
    // that scores it, so cap the budget accordingly.
    let room = rescore_budget(vocab, spec, policies.student)?
        .min(rescore_budget(vocab, spec, policies.teacher)?)
        .min(rescore_budget(vocab, spec, policies.base)?);
    let budget = cfg.max_tokens.min(room);

    let mut ctx = conditioning_ids(vocab, &spec.prompt, &behavior_attach)?;
    let mut response = Vec::new();
    let mut sampled_logp = Vec::new();
    let mut saw_eos = false;
    while response.len() < budget {
        let dist = log_prob_next(behavior, &ctx)?;
        let tok = sample_token(dist.as_slice().expect("contiguous"), cfg, rng)?;
        sampled_logp.push(dist[tok as usize]);
        response.push(tok);
        ctx.push(tok);
        if tok == vocab.eos() {
            saw_eos = true;
            break;
        }
    }
    let truncated = !saw_eos && !response.is_empty() && response.len() == budget;

    let plain = ContextAttachment::none();
    let logp_student_plain =
        log_prob_sequence(policies.student, vocab, &spec.prompt, &plain, &response)?;
    let logp_teacher_priv =
        log_prob_sequence(policies.teacher, vocab, &spec.prompt, &spec.attachment, &response)?;
    let logp_teacher_plain = if std::ptr::eq(policies.teacher, policies.student) {
        logp_student_plain.clone()
    } else {
        log_prob_sequence(policies.teacher, vocab, &spec.prompt, &plain, &response)?
    };
    let logp_base_plain = log_prob_sequence(policies.base, vocab, &spec.prompt, &plain, &response)?;

    Ok(Rollout {
        prompt: spec.prompt.clone(),
        attachment: spec.attachment.clone(),
        response,
        guided,
        truncated,
        prompt_index: spec.prompt_index,
        rollout_index,
        sampled_logp,
        logp_student_plain,
        logp_teacher_priv,
        logp_teacher_plain,
        logp_base_plain,
    })
}

/// Structural seed for one batch of rollouts.
#[derive(Debug, Clone, Copy)]
pub struct BatchSeed {
    pub run_seed: u64,
    pub step: u64,
}

/// Sample `rollouts_per_prompt` rollouts for every prompt, in prompt-major
/// index order. Guided flags are i.i.d. Bernoulli(`cfg.guided_fraction`),
/// each drawn from its own derived stream.
pub fn sample_batch(
    policies: &PolicySet,
    vocab: &Vocabulary,
    prompts: &[PromptSpec],
    cfg: &SamplerConfig,
    rollouts_per_prompt: usize,
    seed: BatchSeed,
) -> Result<Vec<Rollout>> {
    if rollouts_per_prompt == 0 {
        return domain_err("rollouts_per_prompt must be at least 1");
    }
    let mut out = Vec::with_capacity(prompts.len() * rollouts_per_prompt);
    for (slot, spec) in prompts.iter().enumerate() {
        for r in 0..rollouts_per_prompt {
            let path = [seed.step, slot as u64, r as u64];
            let guided = if cfg.guided_fraction > 0.0 {
                let mut flag_rng =
                    derive_rng(seed.run_seed, &[stream::GUIDED_FLAG, path[0], path[1], path[2]]);
                flag_rng.gen::<f64>() < cfg.guided_fraction
            } else {
                false
            };
            let mut rng =
                derive_rng(seed.run_seed, &[stream::ROLLOUT, path[0], path[1], path[2]]);
            out.push(sample_rollout(policies, vocab, spec, cfg, guided, &mut rng, r)?);
        }
    }
    Ok(out)
}

/// Append rollouts to a JSONL file, one rollout per line.
pub fn append_rollouts_jsonl(path: &Path, rollouts: &[Rollout]) -> Result<()> {
    crate::jsonl::append_jsonl(path, rollouts)
}

/// Read every rollout from a JSONL file.
pub fn read_rollouts_jsonl(path: &Path) -> Result<Vec<Rollout>> {
    crate::jsonl::read_jsonl(path)
}
