//! Cross-entropy pretraining of the shared base policy, with hard health
//! checks on the result.
//!
//! Every experiment starts from the same base: a policy trained on the
//! synthetic corpus until it (a) answers identity probes with the
//! counter-identity, (b) assigns vanishingly small probability to the
//! held-out target name in plain context, (c) copies an attached persona
//! paragraph into its answer, and (d) beats chance on held-out math.
//! A base that misses any of these cannot support the comparisons built
//! on top of it, so violations are construction errors, not warnings.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{build_corpus, pack_rows};
use super::eval::{evaluate_checkpoint, EvalRecord};
use super::identity::IdentityTaskSpec;
use super::math::MathTaskSpec;
use crate::error::{domain_err, Error, Result};
use crate::objectives::{OptimizerKind, OptimizerState};
use crate::policy::{
    forward, log_prob_sequence, log_softmax, ArchSpec, AttachMode, ContextAttachment,
    PolicyParams,
};
use crate::rng::{derive_rng, stream};
use crate::sampler::SamplerConfig;
use crate::vocab::{TokenId, Vocabulary};

/// Identity probes must be answered with a counter span at least this
/// often.
pub const MIN_COUNTER_RATE: f64 = 0.8;
/// Highest tolerated analytic probability of the target span in any
/// plain-context self-naming position.
pub const MAX_TARGET_PROB: f64 = 1e-3;
/// Lowest tolerated analytic probability of the target span when the
/// privileged paragraph is attached — the persona-copying skill that
/// guided rollouts rely on.
pub const MIN_PRIV_TARGET_PROB: f64 = 0.25;
/// Held-out math must beat guessing a residue uniformly.
pub const CHANCE_MATH_ACC: f64 = 1.0 / 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Corpus size in documents.
    pub docs: usize,
    /// Optimizer steps.
    pub steps: usize,
    /// Packed rows per step.
    pub batch_rows: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { docs: 6000, steps: 1200, batch_rows: 6, lr: 1e-3, seed: 0 }
    }
}

/// Health metrics of a pretrained base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Cross-entropy of the final training batch.
    pub final_loss: f64,
    /// Full probe suite on the base (the capability baseline).
    pub base_eval: EvalRecord,
    /// Max over probes and frames of the analytic probability of the
    /// target span right after a plain-context self-naming frame.
    pub target_prob_max: f64,
    /// Mean over probes of the analytic probability of the target span
    /// in the answer position with the privileged paragraph attached.
    pub priv_target_prob: f64,
}

/// Mean next-token cross-entropy over a batch of packed rows, plus its
/// gradient. Each row of n tokens contributes n−1 predictions; the mean
/// is over all predictions in the batch.
pub fn ce_batch_gradient(params: &PolicyParams, rows: &[&[TokenId]]) -> Result<(f64, Vec<f64>)> {
    let predictions: usize = rows.iter().map(|r| r.len().saturating_sub(1)).sum();
    if predictions == 0 {
        return domain_err("batch contains no predictions");
    }
    let scale = 1.0 / predictions as f64;
    let mut grad = vec![0.0; params.data().len()];
    let mut loss = 0.0;
    for row in rows {
        let pass = forward(params, row)?;
        let mut dlogits = Array2::zeros(pass.logits().dim());
        for i in 0..row.len() - 1 {
            let target = row[i + 1] as usize;
            let ld = log_softmax(pass.logits().row(i));
            loss -= scale * ld[target];
            let mut drow = dlogits.row_mut(i);
            for (vtok, d) in drow.iter_mut().enumerate() {
                *d = scale * ld[vtok].exp();
            }
            drow[target] -= scale;
        }
        let g = crate::policy::backward(params, &pass, &dlogits)?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Train a fresh policy on the corpus. No health gates — callers that
/// need a certified base use [`pretrain_base`].
pub fn train_base(
    arch: &ArchSpec,
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    math: &MathTaskSpec,
    cfg: &PretrainConfig,
) -> Result<(PolicyParams, f64)> {
    let docs = build_corpus(v, id, math, cfg.docs, cfg.seed)?;
    let row_len = arch.context_limit().unwrap_or(128).min(128);
    let rows = pack_rows(&docs, row_len)?;
    let mut params = PolicyParams::init(arch, cfg.seed)?;
    let mut opt = OptimizerState::new(OptimizerKind::adam_default(), params.data().len());
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let mut rng = derive_rng(cfg.seed, &[stream::PRETRAIN, step as u64]);
        let picked: Vec<&[TokenId]> =
            (0..cfg.batch_rows).map(|_| rows[rng.gen_range(0..rows.len())].as_slice()).collect();
        let (loss, grad) = ce_batch_gradient(&params, &picked)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "pretraining loss became non-finite at step {step}"
            )));
        }
        opt.apply(params.data_mut(), &grad, cfg.lr);
        final_loss = loss;
    }
    Ok((params, final_loss))
}

/// Exact probability of `span` immediately following `prefix` in the
/// response position, computed from full distributions (teacher-forced,
/// no sampling).
pub fn span_probability(
    params: &PolicyParams,
    v: &Vocabulary,
    prompt: &[TokenId],
    attach: &ContextAttachment,
    prefix: &[TokenId],
    span: &[TokenId],
) -> Result<f64> {
    let mut response = prefix.to_vec();
    response.extend_from_slice(span);
    let lp = log_prob_sequence(params, v, prompt, attach, &response)?;
    Ok(lp[prefix.len()..].iter().sum::<f64>().exp())
}

/// Compute health metrics for a candidate base (no gating).
pub fn health_report(
    params: &PolicyParams,
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    math: &MathTaskSpec,
    sampler: &SamplerConfig,
    seed: u64,
    final_loss: f64,
) -> Result<PretrainReport> {
    let base_eval = evaluate_checkpoint(params, v, id, math, sampler, seed, 0)?;
    let plain = ContextAttachment::none();
    let target = v.target_span().to_vec();
    let mut target_prob_max: f64 = 0.0;
    for probe in &id.probes {
        for frame in &id.frames {
            let p = span_probability(params, v, probe, &plain, frame, &target)?;
            target_prob_max = target_prob_max.max(p);
        }
    }
    let privileged = ContextAttachment::new(AttachMode::System, id.privileged.clone());
    let mut priv_sum = 0.0;
    for probe in &id.probes {
        priv_sum += span_probability(params, v, probe, &privileged, &id.frames[0], &target)?;
    }
    let priv_target_prob = priv_sum / id.probes.len() as f64;
    Ok(PretrainReport { final_loss, base_eval, target_prob_max, priv_target_prob })
}

fn gate(report: &PretrainReport) -> Result<()> {
    let e = &report.base_eval;
    let mut violations = Vec::new();
    if e.id_counter < MIN_COUNTER_RATE {
        violations.push(format!("counter-name rate {:.3} < {MIN_COUNTER_RATE}", e.id_counter));
    }
    if e.id_selfname > 0.0 {
        violations.push(format!("target self-name rate {:.3} > 0", e.id_selfname));
    }
    if report.target_prob_max >= MAX_TARGET_PROB {
        violations.push(format!(
            "plain-context target probability {:.2e} ≥ {MAX_TARGET_PROB:.0e}",
            report.target_prob_max
        ));
    }
    if report.priv_target_prob < MIN_PRIV_TARGET_PROB {
        violations.push(format!(
            "privileged-context target probability {:.3} < {MIN_PRIV_TARGET_PROB}",
            report.priv_target_prob
        ));
    }
    if e.math_acc <= CHANCE_MATH_ACC {
        violations.push(format!("held-out math accuracy {:.3} ≤ chance {CHANCE_MATH_ACC:.3}", e.math_acc));
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::TaskConstruction(format!(
            "base policy failed health checks: {}",
            violations.join("; ")
        )))
    }
}

/// Train the shared base policy and certify it against the health gates.
pub fn pretrain_base(
    arch: &ArchSpec,
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    math: &MathTaskSpec,
    cfg: &PretrainConfig,
    sampler: &SamplerConfig,
) -> Result<(PolicyParams, PretrainReport)> {
    let (params, final_loss) = train_base(arch, v, id, math, cfg)?;
    let report = health_report(&params, v, id, math, sampler, cfg.seed, final_loss)?;
    gate(&report)?;
    Ok((params, report))
}
