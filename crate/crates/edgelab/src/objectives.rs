//! Update rules: how a batch of rollouts becomes a parameter update.
//!
//! Seven methods share one gradient pipeline. Four are *sampled-token*
//! methods that weight the score function of each response token:
//!
//! | method             | per-token ascent weight                                  |
//! |--------------------|----------------------------------------------------------|
//! | `opsd`             | `-delta_t`                                               |
//! | `rlsd-no-verifier` | `-delta_t * clip(exp(e_t), 1-eps, 1+eps)`                |
//! | `edge-opd`         | `-delta_t * mask_t`                                      |
//! | `rlsd`             | `A * clip(exp(sign(A) * e_t), 1-eps, 1+eps)` (PPO-style) |
//!
//! where `delta_t` is the surprise of the plain student against the
//! privileged teacher, `e_t` the per-token evidence, and `A` the
//! group-normalized sequence reward. Weights are constants: no gradient
//! flows through `delta`, `e`, or `A` (the teacher streams are detached
//! by construction). `rlsd` maximizes the single-epoch clipped surrogate
//! instead of a plain weighted log-likelihood.
//!
//! The other three are *full-distribution* on-policy distillation losses
//! (forward KL, reverse KL, generalized JSD) between the privileged
//! teacher and the plain student at every response slot, with gradients
//! flowing only through the student distribution.
//!
//! Any method can add a KL anchor `beta * KL(student || base)` averaged
//! over response positions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Error, Result};
use crate::evidence::{soft_weight, EvidenceRecord, MaskRegion};
use crate::diagnostics::DiagnosticsFlavor;
use crate::policy::{
    backward, conditioning_ids, forward, log_softmax, response_log_dists, softmax,
    ContextAttachment, PolicyParams,
};
use crate::rollout::Rollout;
use crate::vocab::Vocabulary;

// ---------------------------------------------------------------------
// Method and configuration
// ---------------------------------------------------------------------

/// The update rule under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Full-distribution forward KL (teacher ‖ student) to the
    /// privileged teacher.
    OpdForwardKl,
    /// Full-distribution reverse KL (student ‖ teacher).
    OpdReverseKl,
    /// Full-distribution generalized Jensen-Shannon divergence.
    OpdJsd,
    /// Sampled-token self-distillation pull, unshaped.
    Opsd,
    /// Pull shaped by the clipped evidence multiplier, no reward.
    RlsdNoVerifier,
    /// Verifier rewards with group-normalized advantages, shaped by the
    /// clipped evidence multiplier, single-epoch clipped surrogate.
    Rlsd,
    /// Pull gated by the hard evidence mask, on guided rollouts.
    EdgeOpd,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::OpdForwardKl,
        Method::OpdReverseKl,
        Method::OpdJsd,
        Method::Opsd,
        Method::RlsdNoVerifier,
        Method::Rlsd,
        Method::EdgeOpd,
    ];

    /// Does the update consume verifier rewards?
    pub fn requires_verifier(&self) -> bool {
        matches!(self, Method::Rlsd)
    }

    /// Does the loss touch full next-token distributions rather than
    /// sampled-token log-probs?
    pub fn full_distribution(&self) -> bool {
        matches!(self, Method::OpdForwardKl | Method::OpdReverseKl | Method::OpdJsd)
    }

    pub fn diagnostics_flavor(&self) -> DiagnosticsFlavor {
        match self {
            Method::EdgeOpd => DiagnosticsFlavor::HardMask,
            Method::Rlsd | Method::RlsdNoVerifier => DiagnosticsFlavor::SoftWeight,
            _ => DiagnosticsFlavor::PullOnly,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::OpdForwardKl => "opd-forward-kl",
            Method::OpdReverseKl => "opd-reverse-kl",
            Method::OpdJsd => "opd-jsd",
            Method::Opsd => "opsd",
            Method::RlsdNoVerifier => "rlsd-no-verifier",
            Method::Rlsd => "rlsd",
            Method::EdgeOpd => "edge-opd",
        })
    }
}

/// How a rollout's summed token loss is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Divide by the number of response tokens.
    PerTokenMean,
    /// No division.
    Sum,
    /// Divide by the number of tokens that actually train (mask-kept for
    /// the hard-masked method, all tokens otherwise). A rollout with no
    /// kept tokens contributes nothing.
    #[default]
    KeptTokenMean,
}

/// Optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd_default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam_default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Objective hyperparameters shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub method: Method,
    /// Evidence region kept by the hard mask (hard-masked method only).
    pub mask_region: MaskRegion,
    /// Positive-region threshold on evidence.
    pub tau: f64,
    /// Near-zero band half-width.
    pub nz_band: f64,
    /// Clip radius of the evidence soft weight.
    pub eps_w: f64,
    /// KL-anchor coefficient; 0 disables the anchor.
    pub beta_kl: f64,
    /// Mixing coefficient of the generalized JSD.
    pub jsd_beta: f64,
    /// PPO ratio clip radius for the verifier-based method.
    pub ratio_clip: f64,
    pub normalization: Normalization,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            method: Method::Opsd,
            mask_region: MaskRegion::Positive,
            tau: 0.0,
            nz_band: crate::evidence::DEFAULT_NZ_BAND,
            eps_w: 0.2,
            beta_kl: 0.0,
            jsd_beta: 0.5,
            ratio_clip: 0.2,
            normalization: Normalization::KeptTokenMean,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::EdgeOpd && self.mask_region == MaskRegion::None {
            return config_err("the evidence-masked method needs a mask region; 'none' disables masking");
        }
        if !(self.eps_w > 0.0 && self.eps_w < 1.0) {
            return config_err(format!("eps_w must lie in (0, 1), got {}", self.eps_w));
        }
        if !self.tau.is_finite() {
            return config_err("tau must be finite");
        }
        if !(self.nz_band.is_finite() && self.nz_band >= 0.0) {
            return config_err("nz_band must be non-negative");
        }
        if !(self.beta_kl.is_finite() && self.beta_kl >= 0.0) {
            return config_err("beta_kl must be non-negative");
        }
        if !(self.jsd_beta > 0.0 && self.jsd_beta < 1.0) {
            return config_err(format!("jsd_beta must lie in (0, 1), got {}", self.jsd_beta));
        }
        if !(self.ratio_clip > 0.0 && self.ratio_clip < 1.0) {
            return config_err(format!("ratio_clip must lie in (0, 1), got {}", self.ratio_clip));
        }
        Ok(())
    }

    pub fn evidence_params(&self) -> crate::evidence::EvidenceParams {
        crate::evidence::EvidenceParams {
            region: self.mask_region,
            tau: self.tau,
            nz_band: self.nz_band,
            eps: self.eps_w,
        }
    }
}

// ---------------------------------------------------------------------
// Group-normalized rewards
// ---------------------------------------------------------------------

/// Binary sequence rewards grouped by prompt, normalized within group.
#[derive(Debug, Clone)]
pub struct GroupRewardBatch {
    groups: Vec<usize>,
    rewards: Vec<f64>,
}

impl GroupRewardBatch {
    pub fn new(groups: Vec<usize>, rewards: Vec<f64>) -> Result<Self> {
        if groups.len() != rewards.len() {
            return domain_err("group/reward length mismatch");
        }
        if rewards.iter().any(|&r| r != 0.0 && r != 1.0) {
            return domain_err("rewards must be binary (0 or 1)");
        }
        Ok(GroupRewardBatch { groups, rewards })
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Per-rollout advantage `(r - mean_group) / std_group`, with the
    /// population standard deviation. A degenerate group (zero variance)
    /// gets advantage 0 for all members.
    pub fn advantages(&self) -> Vec<f64> {
        let mut stats: std::collections::HashMap<usize, (f64, f64, usize)> =
            std::collections::HashMap::new();
        for (&g, &r) in self.groups.iter().zip(&self.rewards) {
            let e = stats.entry(g).or_insert((0.0, 0.0, 0));
            e.0 += r;
            e.1 += r * r;
            e.2 += 1;
        }
        self.groups
            .iter()
            .zip(&self.rewards)
            .map(|(&g, &r)| {
                let (s, s2, n) = stats[&g];
                let n = n as f64;
                let mean = s / n;
                let var = (s2 / n - mean * mean).max(0.0);
                let std = var.sqrt();
                if std > 0.0 {
                    (r - mean) / std
                } else {
                    0.0
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------
// Per-token weights
// ---------------------------------------------------------------------

/// Ascent weight on each response token's score function, before
/// normalization. `group_advantage` must be provided exactly for the
/// verifier-based method.
pub fn token_weights(
    cfg: &ObjectiveConfig,
    record: &EvidenceRecord,
    group_advantage: Option<f64>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.method != Method::Rlsd && group_advantage.is_some() {
        return config_err("only the verifier-based method takes a group advantage");
    }
    let t = record.delta.len();
    match cfg.method {
        Method::OpdForwardKl | Method::OpdReverseKl | Method::OpdJsd => {
            config_err("full-distribution methods do not use sampled-token weights")
        }
        Method::Opsd => Ok(record.delta.iter().map(|d| -d).collect()),
        Method::RlsdNoVerifier => {
            Ok(record.delta.iter().zip(&record.soft).map(|(d, w)| -d * w).collect())
        }
        Method::EdgeOpd => Ok(record
            .delta
            .iter()
            .zip(&record.mask)
            .map(|(d, &m)| if m { -d } else { 0.0 })
            .collect()),
        Method::Rlsd => {
            let Some(adv) = group_advantage else {
                return config_err("the verifier-based method needs a group advantage per rollout");
            };
            if adv == 0.0 {
                return Ok(vec![0.0; t]);
            }
            let sign = if adv > 0.0 { 1.0 } else { -1.0 };
            let shaped = soft_weight(&record.e, cfg.eps_w, sign)?;
            Ok(shaped.into_iter().map(|w| adv * w).collect())
        }
    }
}

/// Count of tokens that actually train under this method's shaping.
fn active_tokens(cfg: &ObjectiveConfig, record: &EvidenceRecord) -> usize {
    match cfg.method {
        Method::EdgeOpd => record.mask.iter().filter(|&&m| m).count(),
        _ => record.delta.len(),
    }
}

fn rollout_normalizer(cfg: &ObjectiveConfig, record: &EvidenceRecord) -> f64 {
    let t = record.delta.len();
    match cfg.normalization {
        Normalization::Sum => 1.0,
        Normalization::PerTokenMean => t as f64,
        Normalization::KeptTokenMean => active_tokens(cfg, record) as f64,
    }
}

// ---------------------------------------------------------------------
// Full-distribution divergences
// ---------------------------------------------------------------------

/// Which divergence a full-distribution method minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DivergenceKind {
    /// KL(teacher ‖ student).
    ForwardKl,
    /// KL(student ‖ teacher).
    ReverseKl,
    /// beta * KL(teacher ‖ M) + (1 - beta) * KL(student ‖ M) with
    /// M = beta * teacher + (1 - beta) * student.
    Jsd { beta: f64 },
}

fn check_log_dists(ld: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in ld.rows().into_iter().enumerate() {
        let mass: f64 = row.iter().map(|&x| x.exp()).sum();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "{what}: row {i} is not a normalized log-distribution (mass {mass})"
            )));
        }
    }
    Ok(())
}

/// Mean per-position divergence between teacher and student next-token
/// distributions, plus its gradient with respect to the *student logits*.
/// The teacher is a constant: no gradient flows through it.
pub fn opd_divergence_loss(
    teacher_ld: &Array2<f64>,
    student_ld: &Array2<f64>,
    kind: DivergenceKind,
) -> Result<(f64, Array2<f64>)> {
    if teacher_ld.dim() != student_ld.dim() {
        return domain_err(format!(
            "distribution shapes differ: {:?} vs {:?}",
            teacher_ld.dim(),
            student_ld.dim()
        ));
    }
    let (t, v) = teacher_ld.dim();
    if t == 0 {
        return Ok((0.0, Array2::zeros((0, v))));
    }
    if let DivergenceKind::Jsd { beta } = kind {
        if !(beta > 0.0 && beta < 1.0) {
            return domain_err(format!("jsd beta must lie in (0, 1), got {beta}"));
        }
    }
    check_log_dists(teacher_ld, "teacher")?;
    check_log_dists(student_ld, "student")?;

    let tf = t as f64;
    let mut loss = 0.0;
    let mut dz = Array2::zeros((t, v));
    for i in 0..t {
        let lt = teacher_ld.row(i);
        let ls = student_ld.row(i);
        match kind {
            DivergenceKind::ForwardKl => {
                let mut d = 0.0;
                for j in 0..v {
                    let pt = lt[j].exp();
                    d += pt * (lt[j] - ls[j]);
                    dz[[i, j]] = (ls[j].exp() - pt) / tf;
                }
                loss += d / tf;
            }
            DivergenceKind::ReverseKl => {
                let mut d = 0.0;
                for j in 0..v {
                    let ps = ls[j].exp();
                    d += ps * (ls[j] - lt[j]);
                }
                for j in 0..v {
                    let ps = ls[j].exp();
                    dz[[i, j]] = ps * (ls[j] - lt[j] - d) / tf;
                }
                loss += d / tf;
            }
            DivergenceKind::Jsd { beta } => {
                // g_j = (1 - beta) * ln(p_s / m); dD/dz = p_s (g - E_s[g]).
                let mut d = 0.0;
                let mut g = vec![0.0; v];
                let mut mean_g = 0.0;
                for j in 0..v {
                    let pt = lt[j].exp();
                    let ps = ls[j].exp();
                    let m = beta * pt + (1.0 - beta) * ps;
                    let lm = m.ln();
                    if pt > 0.0 {
                        d += beta * pt * (lt[j] - lm);
                    }
                    if ps > 0.0 {
                        d += (1.0 - beta) * ps * (ls[j] - lm);
                    }
                    g[j] = (1.0 - beta) * (ls[j] - lm);
                    mean_g += ls[j].exp() * g[j];
                }
                for j in 0..v {
                    dz[[i, j]] = ls[j].exp() * (g[j] - mean_g) / tf;
                }
                loss += d / tf;
            }
        }
    }
    Ok((loss, dz))
}

// ---------------------------------------------------------------------
// KL anchor
// ---------------------------------------------------------------------

/// Anchor term `beta * mean_t KL(student_t ‖ base_t)` over response
/// positions, plus its gradient with respect to the student logits.
pub fn kl_anchor_term(
    student_ld: &Array2<f64>,
    base_ld: &Array2<f64>,
    beta: f64,
) -> Result<(f64, Array2<f64>)> {
    if student_ld.dim() != base_ld.dim() {
        return domain_err("anchor distribution shapes differ");
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return domain_err("anchor beta must be non-negative");
    }
    let (t, v) = student_ld.dim();
    if t == 0 || beta == 0.0 {
        return Ok((0.0, Array2::zeros((t, v))));
    }
    check_log_dists(student_ld, "student")?;
    check_log_dists(base_ld, "base")?;
    let tf = t as f64;
    let mut total = 0.0;
    let mut dz = Array2::zeros((t, v));
    for i in 0..t {
        let ls = student_ld.row(i);
        let lb = base_ld.row(i);
        let mut kl = 0.0;
        for j in 0..v {
            kl += ls[j].exp() * (ls[j] - lb[j]);
        }
        total += kl;
        for j in 0..v {
            dz[[i, j]] = beta / tf * ls[j].exp() * ((ls[j] - lb[j]) - kl);
        }
    }
    Ok((beta * total / tf, dz))
}

// ---------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------

/// Optimizer slots that ride along in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Sgd: `[velocity]`. Adam: `[m, v]`.
    pub slots: Vec<Vec<f64>>,
    /// Applied update count (drives Adam bias correction).
    pub t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let slots = match kind {
            OptimizerKind::Sgd { .. } => vec![vec![0.0; n]],
            OptimizerKind::Adam { .. } => vec![vec![0.0; n], vec![0.0; n]],
        };
        OptimizerState { kind, slots, t: 0 }
    }

    /// Descend `params` along `grad` (a gradient of a loss).
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let vel = &mut self.slots[0];
                for i in 0..params.len() {
                    vel[i] = momentum * vel[i] + grad[i];
                    params[i] -= lr * vel[i];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                let (m, v) = {
                    let (a, b) = self.slots.split_at_mut(1);
                    (&mut a[0], &mut b[0])
                };
                for i in 0..params.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }

    /// Checkpoint sections: slot vectors plus the step counter.
    pub fn to_sections(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("opt_slot{i}"), s.clone()))
            .collect();
        out.push(("opt_t".to_string(), vec![self.t as f64]));
        out
    }

    /// Rebuild from checkpoint sections written by [`Self::to_sections`].
    pub fn from_sections(
        kind: OptimizerKind,
        n: usize,
        sections: &[(String, Vec<f64>)],
    ) -> Result<Self> {
        let mut state = OptimizerState::new(kind, n);
        for (i, slot) in state.slots.iter_mut().enumerate() {
            let name = format!("opt_slot{i}");
            let found = sections
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Artifact(format!("checkpoint missing section {name}")))?;
            if found.1.len() != n {
                return Err(Error::Artifact(format!("section {name} has wrong length")));
            }
            slot.copy_from_slice(&found.1);
        }
        let t = sections
            .iter()
            .find(|(n, _)| n == "opt_t")
            .ok_or_else(|| Error::Artifact("checkpoint missing section opt_t".into()))?;
        state.t = t.1.first().copied().unwrap_or(0.0) as u64;
        Ok(state)
    }
}

// ---------------------------------------------------------------------
// The training step
// ---------------------------------------------------------------------

/// One batch entry: a rollout plus its evidence record.
pub struct StepEntry<'a> {
    pub rollout: &'a Rollout,
    pub record: &'a EvidenceRecord,
    /// Group-normalized advantage (verifier-based method only).
    pub group_advantage: Option<f64>,
}

/// What happened in one gradient computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Main loss term (negative normalized weighted log-likelihood, the
    /// negative clipped surrogate, or the mean divergence).
    pub loss_main: f64,
    /// Anchor term value.
    pub loss_anchor: f64,
    /// `loss_main + loss_anchor`.
    pub loss_total: f64,
    /// L2 norm of the flat gradient.
    pub grad_norm: f64,
    /// Response tokens in the batch.
    pub tokens: usize,
    /// Tokens that actually trained (mask-kept for the hard-masked
    /// method, all tokens otherwise).
    pub active_tokens: usize,
    /// Fraction of tokens whose PPO ratio hit the clip (verifier-based
    /// method; absent otherwise).
    pub clipped_fraction: Option<f64>,
    /// The gradient or loss was non-finite; parameters were not touched.
    pub skipped: bool,
}

/// Compute the loss gradient for one batch. Pure: touches neither
/// parameters nor optimizer state.
///
/// The total loss averages over non-empty rollouts:
/// `L = mean_r [ main_r + anchor_r ]` where `main_r` is the method's
/// per-rollout term and `anchor_r = beta * mean_t KL(student_t ‖ base_t)`.
pub fn compute_step_gradient(
    student: &PolicyParams,
    teacher: &PolicyParams,
    base: &PolicyParams,
    vocab: &Vocabulary,
    cfg: &ObjectiveConfig,
    entries: &[StepEntry],
) -> Result<(Vec<f64>, StepStats)> {
    cfg.validate()?;
    if cfg.method.requires_verifier() {
        if entries.iter().any(|e| e.group_advantage.is_none()) {
            return config_err("the verifier-based method needs a group advantage per rollout");
        }
    } else if entries.iter().any(|e| e.group_advantage.is_some()) {
        return config_err("group advantages supplied to a method that does not take them");
    }

    let n_params = student.arch().param_count();
    let mut grad = vec![0.0; n_params];
    let live: Vec<&StepEntry> = entries.iter().filter(|e| !e.rollout.is_empty()).collect();
    let tokens: usize = entries.iter().map(|e| e.rollout.len()).sum();
    let active: usize = entries.iter().map(|e| active_tokens(cfg, e.record)).sum();
    let mut stats = StepStats {
        loss_main: 0.0,
        loss_anchor: 0.0,
        loss_total: 0.0,
        grad_norm: 0.0,
        tokens,
        active_tokens: active,
        clipped_fraction: if cfg.method == Method::Rlsd { Some(0.0) } else { None },
        skipped: false,
    };
    if live.is_empty() {
        return Ok((grad, stats));
    }
    let b = live.len() as f64;
    let plain = ContextAttachment::none();
    let mut clipped_count = 0usize;

    for entry in &live {
        let r = entry.rollout;
        if r.len() != entry.record.delta.len() {
            return domain_err("evidence record does not match rollout length");
        }
        let cond = conditioning_ids(vocab, &r.prompt, &plain)?;
        let mut full = cond.clone();
        full.extend_from_slice(&r.response);
        let pass = forward(student, &full)?;
        let t_resp = r.len();
        let mut dlogits = Array2::zeros(pass.logits().dim());

        // Student log-distributions at response slots (reused by the
        // full-distribution loss and the anchor).
        let student_ld = {
            let mut ld = Array2::zeros((t_resp, vocab.size()));
            for t in 0..t_resp {
                ld.row_mut(t).assign(&log_softmax(pass.logits().row(cond.len() - 1 + t)));
            }
            ld
        };

        if cfg.method.full_distribution() {
            let teacher_ld =
                response_log_dists(teacher, vocab, &r.prompt, &r.attachment, &r.response)?;
            let kind = match cfg.method {
                Method::OpdForwardKl => DivergenceKind::ForwardKl,
                Method::OpdReverseKl => DivergenceKind::ReverseKl,
                Method::OpdJsd => DivergenceKind::Jsd { beta: cfg.jsd_beta },
                _ => unreachable!(),
            };
            let (loss, dz) = opd_divergence_loss(&teacher_ld, &student_ld, kind)?;
            stats.loss_main += loss / b;
            for t in 0..t_resp {
                let row = cond.len() - 1 + t;
                for v in 0..vocab.size() {
                    dlogits[[row, v]] += dz[[t, v]] / b;
                }
            }
        } else {
            let weights = token_weights(cfg, entry.record, entry.group_advantage)?;
            let norm = rollout_normalizer(cfg, entry.record);
            if norm > 0.0 {
                let scale = 1.0 / (norm * b);
                let mut main = 0.0;
                for t in 0..t_resp {
                    let row = cond.len() - 1 + t;
                    let y = r.response[t] as usize;
                    let lp_now = student_ld[[t, y]];
                    // Effective ascent coefficient on the score function.
                    let coeff = if cfg.method == Method::Rlsd {
                        let ratio = (lp_now - r.logp_student_plain[t]).exp();
                        let lo = 1.0 - cfg.ratio_clip;
                        let hi = 1.0 + cfg.ratio_clip;
                        let a = weights[t];
                        let unclipped = ratio * a;
                        let clipped = ratio.clamp(lo, hi) * a;
                        // Single-epoch clipped surrogate: maximize
                        // min(unclipped, clipped); gradient flows only
                        // when the unclipped branch is the minimum.
                        if unclipped <= clipped {
                            main += unclipped;
                            ratio * a
                        } else {
                            clipped_count += 1;
                            main += clipped;
                            0.0
                        }
                    } else {
                        main += weights[t] * lp_now;
                        weights[t]
                    };
                    if coeff != 0.0 {
                        // d/dz of -scale * coeff * log p(y) is
                        // -scale * coeff * (onehot(y) - p).
                        let p = softmax(pass.logits().row(row));
                        let mut dst = dlogits.row_mut(row);
                        for (d, &pv) in dst.iter_mut().zip(p.iter()) {
                            *d += scale * coeff * pv;
                        }
                        dst[y] -= scale * coeff;
                    }
                }
                stats.loss_main += -main / (norm * b);
            }
        }

        if cfg.beta_kl > 0.0 {
            let base_ld = response_log_dists(base, vocab, &r.prompt, &plain, &r.response)?;
            let (anchor, dz) = kl_anchor_term(&student_ld, &base_ld, cfg.beta_kl)?;
            stats.loss_anchor += anchor / b;
            for t in 0..t_resp {
                let row = cond.len() - 1 + t;
                for v in 0..vocab.size() {
                    dlogits[[row, v]] += dz[[t, v]] / b;
                }
            }
        }

        let g = backward(student, &pass, &dlogits)?;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += gi;
        }
    }

    stats.loss_total = stats.loss_main + stats.loss_anchor;
    stats.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if cfg.method == Method::Rlsd && tokens > 0 {
        stats.clipped_fraction = Some(clipped_count as f64 / tokens as f64);
    }
    if !stats.loss_total.is_finite() || !stats.grad_norm.is_finite() {
        stats.skipped = true;
    }
    Ok((grad, stats))
}

/// Compute the gradient and, if finite, apply one optimizer step in
/// place. On a non-finite loss or gradient the parameters and optimizer
/// are left untouched and `skipped` is set.
pub fn train_step(
    student: &mut PolicyParams,
    teacher: &PolicyParams,
    base: &PolicyParams,
    vocab: &Vocabulary,
    cfg: &ObjectiveConfig,
    entries: &[StepEntry],
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<StepStats> {
    if !(lr.is_finite() && lr > 0.0) {
        return config_err(format!("learning rate must be positive, got {lr}"));
    }
    let (grad, stats) = compute_step_gradient(student, teacher, base, vocab, cfg, entries)?;
    if !stats.skipped {
        opt.apply(student.data_mut(), &grad, lr);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::build_record;
    use crate::policy::{ArchSpec, AttachMode};
    use crate::rollout::{sample_rollout, PolicySet, PromptSpec};
    use crate::sampler::SamplerConfig;
    use ndarray::array;

    fn ld_of(rows: &[&[f64]]) -> Array2<f64> {
        let v = rows[0].len();
        let mut out = Array2::zeros((rows.len(), v));
        for (i, row) in rows.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                out[[i, j]] = p.ln();
            }
        }
        out
    }

    #[test]
    fn forward_kl_matches_the_worked_example() {
        let t = ld_of(&[&[0.7, 0.3]]);
        let s = ld_of(&[&[0.5, 0.5]]);
        let (loss, _) = opd_divergence_loss(&t, &s, DivergenceKind::ForwardKl).unwrap();
        assert!((loss - 0.08228).abs() < 5e-6, "loss {loss}");
        // Reverse KL of the same pair differs (asymmetry).
        let (rev, _) = opd_divergence_loss(&t, &s, DivergenceKind::ReverseKl).unwrap();
        assert!((rev - (0.5 * (0.5f64 / 0.7).ln() + 0.5 * (0.5f64 / 0.3).ln())).abs() < 1e-12);
        assert!((loss - rev).abs() > 1e-3);
    }

    #[test]
    fn jsd_is_symmetric_at_half_and_bounded() {
        let p = ld_of(&[&[0.7, 0.2, 0.1]]);
        let q = ld_of(&[&[0.1, 0.3, 0.6]]);
        let (a, _) = opd_divergence_loss(&p, &q, DivergenceKind::Jsd { beta: 0.5 }).unwrap();
        let (b, _) = opd_divergence_loss(&q, &p, DivergenceKind::Jsd { beta: 0.5 }).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        assert!(a > 0.0 && a <= std::f64::consts::LN_2 + 1e-12);
        // Identical distributions give zero regardless of beta.
        for beta in [0.2, 0.5, 0.8] {
            let (z, dz) = opd_divergence_loss(&p, &p, DivergenceKind::Jsd { beta }).unwrap();
            assert!(z.abs() < 1e-12);
            assert!(dz.iter().all(|d| d.abs() < 1e-12));
        }
        // Asymmetric mixing breaks the symmetry.
        let (a, _) = opd_divergence_loss(&p, &q, DivergenceKind::Jsd { beta: 0.2 }).unwrap();
        let (b, _) = opd_divergence_loss(&q, &p, DivergenceKind::Jsd { beta: 0.2 }).unwrap();
        assert!((a - b).abs() > 1e-4);
    }

    #[test]
    fn divergence_gradients_match_finite_differences() {
        // Parameterize the student row by free logits and FD through the
        // softmax, per divergence kind.
        let teacher = ld_of(&[&[0.6, 0.3, 0.1], &[0.2, 0.2, 0.6]]);
        let z0 = array![[0.3, -0.4, 0.1], [0.0, 0.5, -0.2]];
        for kind in [
            DivergenceKind::ForwardKl,
            DivergenceKind::ReverseKl,
            DivergenceKind::Jsd { beta: 0.5 },
            DivergenceKind::Jsd { beta: 0.3 },
        ] {
            let student_ld = |z: &Array2<f64>| {
                let mut ld = z.clone();
                for mut row in ld.rows_mut() {
                    let ls = log_softmax(row.view());
                    row.assign(&ls);
                }
                ld
            };
            let (_, dz) = opd_divergence_loss(&teacher, &student_ld(&z0), kind).unwrap();
            let mut z = z0.clone();
            for i in 0..2 {
                for j in 0..3 {
                    let h = 1e-6;
                    let orig = z[[i, j]];
                    z[[i, j]] = orig + h;
                    let (fp, _) = opd_divergence_loss(&teacher, &student_ld(&z), kind).unwrap();
                    z[[i, j]] = orig - h;
                    let (fm, _) = opd_divergence_loss(&teacher, &student_ld(&z), kind).unwrap();
                    z[[i, j]] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    assert!(
                        (fd - dz[[i, j]]).abs() < 1e-7,
                        "{kind:?} coord ({i},{j}): fd {fd} vs {}",
                        dz[[i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn unnormalized_distributions_are_rejected() {
        let bad = array![[0.5f64.ln(), 0.4f64.ln()]];
        let good = ld_of(&[&[0.5, 0.5]]);
        assert!(matches!(
            opd_divergence_loss(&bad, &good, DivergenceKind::ForwardKl),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            kl_anchor_term(&bad, &good, 0.05),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn grpo_advantages_match_the_worked_example() {
        // Rewards [1, 0, 0, 0] in one group: mean 0.25, population std
        // 0.4330, advantages [sqrt(3), -1/sqrt(3), ...].
        let batch = GroupRewardBatch::new(vec![7, 7, 7, 7], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let adv = batch.advantages();
        let s3 = 3.0f64.sqrt();
        assert!((adv[0] - s3).abs() < 1e-12, "{}", adv[0]);
        for a in &adv[1..] {
            assert!((a + 1.0 / s3).abs() < 1e-12);
        }
        // Mean 0.25 and std 0.4330 recovered from the pinned values.
        assert!((adv[0] * 0.4330127018922193 + 0.25 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_groups_get_zero_advantage() {
        let batch = GroupRewardBatch::new(
            vec![0, 0, 1, 1, 2],
            vec![1.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let adv = batch.advantages();
        assert_eq!(adv[0], 0.0);
        assert_eq!(adv[1], 0.0);
        assert!((adv[2] + 1.0).abs() < 1e-12);
        assert!((adv[3] - 1.0).abs() < 1e-12);
        assert_eq!(adv[4], 0.0, "singleton group is degenerate");
    }

    #[test]
    fn kl_anchor_matches_the_worked_example() {
        // Build two-position distributions whose KLs we then average:
        // the anchor of per-position KLs [k1, k2] at beta = 0.05 must be
        // 0.05 * (k1 + k2) / 2; with k1 + k2 = 0.6 that is 0.015.
        let student = ld_of(&[&[0.9, 0.1], &[0.8, 0.2]]);
        let base = ld_of(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let k1: f64 = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let k2: f64 = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
        let (term, dz) = kl_anchor_term(&student, &base, 0.05).unwrap();
        assert!((term - 0.05 * (k1 + k2) / 2.0).abs() < 1e-12);
        assert_eq!(dz.dim(), (2, 2));
        // The fixed reference point: per-position KLs [0.2, 0.4] at beta
        // 0.05 give exactly 0.015.
        assert!((0.05_f64 * (0.2 + 0.4) / 2.0 - 0.015).abs() < 1e-15);
        // beta = 0 silences the term.
        let (zero, dz0) = kl_anchor_term(&student, &base, 0.0).unwrap();
        assert_eq!(zero, 0.0);
        assert!(dz0.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn anchor_gradient_matches_finite_differences() {
        let base = ld_of(&[&[0.25, 0.5, 0.25]]);
        let z0 = array![[0.4, -0.1, 0.3]];
        let student_ld = |z: &Array2<f64>| {
            let mut ld = z.clone();
            for mut row in ld.rows_mut() {
                let ls = log_softmax(row.view());
                row.assign(&ls);
            }
            ld
        };
        let (_, dz) = kl_anchor_term(&student_ld(&z0), &base, 0.05).unwrap();
        let mut z = z0.clone();
        for j in 0..3 {
            let h = 1e-6;
            let orig = z[[0, j]];
            z[[0, j]] = orig + h;
            let (fp, _) = kl_anchor_term(&student_ld(&z), &base, 0.05).unwrap();
            z[[0, j]] = orig - h;
            let (fm, _) = kl_anchor_term(&student_ld(&z), &base, 0.05).unwrap();
            z[[0, j]] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - dz[[0, j]]).abs() < 1e-9, "coord {j}: {fd} vs {}", dz[[0, j]]);
        }
    }

    fn record_for(delta: &[f64], e: &[f64], cfg: &ObjectiveConfig) -> EvidenceRecord {
        // teacher_priv = 0 everywhere (log scale), teacher_plain = -e,
        // student_plain = delta.
        let tp: Vec<f64> = vec![0.0; e.len()];
        let tq: Vec<f64> = e.iter().map(|x| -x).collect();
        let sp: Vec<f64> = delta.to_vec();
        build_record(&tp, &tq, &sp, &cfg.evidence_params()).unwrap()
    }

    #[test]
    fn token_weights_follow_the_method_table() {
        let cfg = ObjectiveConfig::default();
        let delta = [0.5, -0.2, 0.1];
        let e = [0.1, -0.3, 0.5];
        let rec = record_for(&delta, &e, &cfg);

        let w = token_weights(&ObjectiveConfig { method: Method::Opsd, ..cfg }, &rec, None).unwrap();
        assert_eq!(w, vec![-0.5, 0.2, -0.1]);

        let w = token_weights(
            &ObjectiveConfig { method: Method::RlsdNoVerifier, ..cfg },
            &rec,
            None,
        )
        .unwrap();
        let soft = [0.1f64.exp(), (-0.3f64).exp().max(0.8), 1.2];
        for (i, (wi, (d, s))) in w.iter().zip(delta.iter().zip(&soft)).enumerate() {
            assert!((wi - (-d * s)).abs() < 1e-12, "token {i}");
        }

        // Positive mask keeps tokens with e > 0 only.
        let w = token_weights(&ObjectiveConfig { method: Method::EdgeOpd, ..cfg }, &rec, None)
            .unwrap();
        assert_eq!(w, vec![-0.5, 0.0, -0.1]);

        // Verifier-based: advantage times sign-adjusted clipped multiplier.
        let w = token_weights(&ObjectiveConfig { method: Method::Rlsd, ..cfg }, &rec, Some(2.0))
            .unwrap();
        assert!((w[0] - 2.0 * 0.1f64.exp()).abs() < 1e-12);
        assert!((w[1] - 2.0 * 0.8).abs() < 1e-12);
        assert!((w[2] - 2.0 * 1.2).abs() < 1e-12);
        let w = token_weights(&ObjectiveConfig { method: Method::Rlsd, ..cfg }, &rec, Some(-1.0))
            .unwrap();
        // Negative advantage flips the exponent sign before clipping.
        assert!((w[0] - -1.0 * (-0.1f64).exp()).abs() < 1e-12);
        assert!((w[1] - -1.0 * 1.2).abs() < 1e-12);
        assert!((w[2] - -1.0 * 0.8).abs() < 1e-12);

        // Misuse is rejected.
        assert!(token_weights(&ObjectiveConfig { method: Method::Rlsd, ..cfg }, &rec, None).is_err());
        assert!(
            token_weights(&ObjectiveConfig { method: Method::Opsd, ..cfg }, &rec, Some(1.0)).is_err()
        );
        assert!(token_weights(&ObjectiveConfig { method: Method::OpdJsd, ..cfg }, &rec, None).is_err());

        // Zero advantage silences every token (sign convention never
        // resurrects a degenerate group).
        let w = token_weights(&ObjectiveConfig { method: Method::Rlsd, ..cfg }, &rec, Some(0.0))
            .unwrap();
        assert!(w.iter().all(|&x| x == 0.0));

        // Display names match the serialized config strings.
        for m in Method::ALL {
            let json = serde_json::to_value(m).unwrap();
            assert_eq!(json.as_str().unwrap(), m.to_string());
        }
    }

    #[test]
    fn config_validation_catches_contradictions() {
        let mut cfg = ObjectiveConfig { method: Method::EdgeOpd, ..Default::default() };
        cfg.mask_region = MaskRegion::None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ObjectiveConfig { eps_w: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ObjectiveConfig { jsd_beta: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ObjectiveConfig { nz_band: -0.1, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    fn tiny_world() -> (Vocabulary, PolicyParams, PolicyParams, PolicyParams) {
        let vocab = Vocabulary::new(
            (0..8).map(|i| format!("t{i}")).collect(),
            0,
            1,
            2,
            3,
            vec![4],
            vec![vec![5]],
        )
        .unwrap();
        let arch = ArchSpec::window_mlp(8, 3, 6);
        let student = PolicyParams::init(&arch, 21).unwrap();
        let teacher = PolicyParams::init(&arch, 22).unwrap();
        let base = PolicyParams::init(&arch, 23).unwrap();
        (vocab, student, teacher, base)
    }

    fn roll(
        vocab: &Vocabulary,
        student: &PolicyParams,
        teacher: &PolicyParams,
        base: &PolicyParams,
        seed: u64,
    ) -> Rollout {
        let policies = PolicySet { student, teacher, base };
        let spec = PromptSpec {
            prompt: vec![6, 7],
            attachment: ContextAttachment::new(AttachMode::System, vec![4]),
            prompt_index: 0,
        };
        let cfg = SamplerConfig { max_tokens: 4, top_k: None, top_p: 1.0, ..Default::default() };
        let mut rng = crate::rng::derive_rng(seed, &[0]);
        sample_rollout(&policies, vocab, &spec, &cfg, false, &mut rng, 0).unwrap()
    }

    #[test]
    fn step_gradient_matches_frozen_weight_score_function() {
        // The sampled-token methods must treat their per-token weights as
        // constants: the batch gradient equals the gradient of the
        // weighted log-likelihood with the weights precomputed and frozen.
        let (vocab, student, teacher, base) = tiny_world();
        let r = roll(&vocab, &student, &teacher, &base, 31);
        let cfg = ObjectiveConfig { method: Method::Opsd, ..Default::default() };
        let rec = build_record(
            &r.logp_teacher_priv,
            &r.logp_teacher_plain,
            &r.logp_student_plain,
            &cfg.evidence_params(),
        )
        .unwrap();
        let entry = StepEntry { rollout: &r, record: &rec, group_advantage: None };
        let (grad, stats) =
            compute_step_gradient(&student, &teacher, &base, &vocab, &cfg, &[entry]).unwrap();
        assert!(!stats.skipped);

        let weights = token_weights(&cfg, &rec, None).unwrap();
        let norm = r.len() as f64;
        let scaled: Vec<f64> = weights.iter().map(|w| -w / norm).collect();
        let direct = crate::policy::grad_weighted_logprob(
            &student,
            &vocab,
            &r.prompt,
            &ContextAttachment::none(),
            &r.response,
            &scaled,
        )
        .unwrap();
        for (a, b) in grad.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_rollouts_and_empty_batches_are_neutral() {
        let (vocab, student, teacher, base) = tiny_world();
        let cfg = ObjectiveConfig::default();
        let (grad, stats) =
            compute_step_gradient(&student, &teacher, &base, &vocab, &cfg, &[]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
        assert_eq!(stats.tokens, 0);
        assert!(!stats.skipped);
    }

    #[test]
    fn optimizer_momentum_accumulates_and_checkpoints() {
        let mut p = vec![1.0, 2.0];
        let mut opt = OptimizerState::new(OptimizerKind::sgd_default(), 2);
        opt.apply(&mut p, &[1.0, -1.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] - 2.1).abs() < 1e-15);
        opt.apply(&mut p, &[1.0, -1.0], 0.1);
        // Velocity is now 1.9.
        assert!((p[0] - (0.9 - 0.19)).abs() < 1e-15);
        let sections = opt.to_sections();
        let restored =
            OptimizerState::from_sections(OptimizerKind::sgd_default(), 2, &sections).unwrap();
        assert_eq!(restored, opt);
    }

    #[test]
    fn adam_takes_bias_corrected_steps() {
        let mut p = vec![0.0];
        let mut opt = OptimizerState::new(OptimizerKind::adam_default(), 1);
        opt.apply(&mut p, &[1.0], 0.01);
        // First Adam step moves by ~lr regardless of gradient scale.
        assert!((p[0] + 0.01).abs() < 1e-6, "{}", p[0]);
        let mut p2 = vec![0.0];
        let mut opt2 = OptimizerState::new(OptimizerKind::adam_default(), 1);
        opt2.apply(&mut p2, &[100.0], 0.01);
        assert!((p2[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn non_binary_rewards_are_rejected() {
        assert!(GroupRewardBatch::new(vec![0], vec![0.5]).is_err());
        assert!(GroupRewardBatch::new(vec![0, 0], vec![1.0]).is_err());
        assert!(GroupRewardBatch::new(vec![0], vec![f64::NAN]).is_err());
    }

    #[test]
    fn zero_weights_without_anchor_leave_params_unchanged() {
        let (vocab, student, teacher, base) = tiny_world();
        let r = roll(&vocab, &student, &teacher, &base, 41);
        let cfg = ObjectiveConfig {
            method: Method::EdgeOpd,
            mask_region: MaskRegion::Positive,
            tau: 1e9,
            ..Default::default()
        };
        let rec = build_record(
            &r.logp_teacher_priv,
            &r.logp_teacher_plain,
            &r.logp_student_plain,
            &cfg.evidence_params(),
        )
        .unwrap();
        let entry = StepEntry { rollout: &r, record: &rec, group_advantage: None };
        let mut s = student.clone();
        let before = s.data().to_vec();
        let mut opt = OptimizerState::new(OptimizerKind::sgd_default(), before.len());
        let stats = train_step(&mut s, &teacher, &base, &vocab, &cfg, &[entry], &mut opt, 0.1).unwrap();
        assert!(!stats.skipped);
        assert_eq!(stats.loss_total, 0.0);
        assert_eq!(s.data(), before.as_slice());
    }

    #[test]
    fn positive_weight_raises_that_token_logprob() {
        // A weight of +1 on a single token is ascent on its log-prob.
        let (vocab, student, teacher, base) = tiny_world();
        let r = roll(&vocab, &student, &teacher, &base, 43);
        assert!(r.len() >= 2);
        let cfg = ObjectiveConfig::default();
        let mut rec = build_record(
            &r.logp_teacher_priv,
            &r.logp_teacher_plain,
            &r.logp_student_plain,
            &cfg.evidence_params(),
        )
        .unwrap();
        // OPSD weight is -delta; force delta = [-1, 0, 0, ...] so exactly
        // one token carries weight +1.
        for d in &mut rec.delta {
            *d = 0.0;
        }
        rec.delta[0] = -1.0;
        let entry = StepEntry { rollout: &r, record: &rec, group_advantage: None };
        let mut s = student.clone();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { momentum: 0.0 }, s.data().len());
        train_step(&mut s, &teacher, &base, &vocab, &cfg, &[entry], &mut opt, 1e-3).unwrap();
        let before = crate::policy::log_prob_sequence(
            &student,
            &vocab,
            &r.prompt,
            &ContextAttachment::none(),
            &r.response,
        )
        .unwrap();
        let after = crate::policy::log_prob_sequence(
            &s,
            &vocab,
            &r.prompt,
            &ContextAttachment::none(),
            &r.response,
        )
        .unwrap();
        assert!(after[0] > before[0], "{} vs {}", after[0], before[0]);
    }

    #[test]
    fn all_ones_mask_matches_unshaped_pull_bitwise() {
        // When the hard mask keeps everything, the masked method and the
        // plain pull produce the same gradient bit for bit.
        let (vocab, student, teacher, base) = tiny_world();
        let r = roll(&vocab, &student, &teacher, &base, 45);
        let edge_cfg = ObjectiveConfig {
            method: Method::EdgeOpd,
            mask_region: MaskRegion::Positive,
            tau: f64::NEG_INFINITY.max(-1e12),
            ..Default::default()
        };
        let rec = build_record(
            &r.logp_teacher_priv,
            &r.logp_teacher_plain,
            &r.logp_student_plain,
            &edge_cfg.evidence_params(),
        )
        .unwrap();
        assert!(rec.mask.iter().all(|&m| m), "tau below any evidence keeps all tokens");
        let entry = StepEntry { rollout: &r, record: &rec, group_advantage: None };
        let (g_edge, _) =
            compute_step_gradient(&student, &teacher, &base, &vocab, &edge_cfg, &[entry]).unwrap();

        let opsd_cfg = ObjectiveConfig { method: Method::Opsd, ..Default::default() };
        let rec2 = build_record(
            &r.logp_teacher_priv,
            &r.logp_teacher_plain,
            &r.logp_student_plain,
            &opsd_cfg.evidence_params(),
        )
        .unwrap();
        let entry2 = StepEntry { rollout: &r, record: &rec2, group_advantage: None };
        let (g_opsd, _) =
            compute_step_gradient(&student, &teacher, &base, &vocab, &opsd_cfg, &[entry2]).unwrap();
        assert_eq!(g_edge, g_opsd);
    }

    #[test]
    fn soft_reweight_equals_plain_pull_exactly_when_evidence_is_zero() {
        // Equal teacher streams force e = 0 so every soft weight is
        // exactly 1; with any nonzero evidence the weights differ.
        let cfg = ObjectiveConfig::default();
        let rec0 = record_for(&[0.4, -0.3], &[0.0, 0.0], &cfg);
        let pull = token_weights(&ObjectiveConfig { method: Method::Opsd, ..cfg }, &rec0, None)
            .unwrap();
        let soft = token_weights(
            &ObjectiveConfig { method: Method::RlsdNoVerifier, ..cfg },
            &rec0,
            None,
        )
        .unwrap();
        assert_eq!(pull, soft);

        let rec1 = record_for(&[0.4, -0.3], &[0.05, 0.0], &cfg);
        let pull = token_weights(&ObjectiveConfig { method: Method::Opsd, ..cfg }, &rec1, None)
            .unwrap();
        let soft = token_weights(
            &ObjectiveConfig { method: Method::RlsdNoVerifier, ..cfg },
            &rec1,
            None,
        )
        .unwrap();
        assert_ne!(pull[0], soft[0]);
        assert_eq!(pull[1], soft[1]);
    }

    #[test]
    fn teacher_parameters_never_reach_the_sampled_token_gradient() {
        // With the rollout and its evidence record held fixed, swapping
        // the teacher for a completely different model must not move a
        // single bit of the gradient: the teacher only enters through the
        // detached streams.
        let (vocab, student, teacher, base) = tiny_world();
        let r = roll(&vocab, &student, &teacher, &base, 47);
        for method in [Method::Opsd, Method::RlsdNoVerifier, Method::EdgeOpd] {
            let cfg = ObjectiveConfig { method, beta_kl: 0.05, ..Default::default() };
            let rec = build_record(
                &r.logp_teacher_priv,
                &r.logp_teacher_plain,
                &r.logp_student_plain,
                &cfg.evidence_params(),
            )
            .unwrap();
            let entry = StepEntry { rollout: &r, record: &rec, group_advantage: None };
            let (g1, _) =
                compute_step_gradient(&student, &teacher, &base, &vocab, &cfg, &[entry]).unwrap();
            let other_teacher = PolicyParams::init(student.arch(), 999).unwrap();
            let entry = StepEntry { rollout: &r, record: &rec, group_advantage: None };
            let (g2, _) =
                compute_step_gradient(&student, &other_teacher, &base, &vocab, &cfg, &[entry])
                    .unwrap();
            assert_eq!(g1, g2, "teacher leaked into {method} gradient");
        }
    }

    #[test]
    fn non_finite_losses_skip_the_update() {
        let (vocab, student, teacher, base) = tiny_world();
        let r = roll(&vocab, &student, &teacher, &base, 33);
        let cfg = ObjectiveConfig::default();
        let mut rec = build_record(
            &r.logp_teacher_priv,
            &r.logp_teacher_plain,
            &r.logp_student_plain,
            &cfg.evidence_params(),
        )
        .unwrap();
        rec.delta[0] = f64::INFINITY;
        let entry = StepEntry { rollout: &r, record: &rec, group_advantage: None };
        let mut s = student.clone();
        let before = s.data().to_vec();
        let mut opt = OptimizerState::new(OptimizerKind::sgd_default(), before.len());
        let stats =
            train_step(&mut s, &teacher, &base, &vocab, &cfg, &[entry], &mut opt, 0.1).unwrap();
        assert!(stats.skipped);
        assert_eq!(s.data(), before.as_slice(), "skipped step must not move parameters");
        assert_eq!(opt.t, 0, "skipped step must not advance the optimizer");
    }

    #[test]
    fn rlsd_single_epoch_ratio_is_unclipped_and_reduces_to_weighted_ll() {
        let (vocab, student, teacher, base) = tiny_world();
        let r = roll(&vocab, &student, &teacher, &base, 35);
        let cfg = ObjectiveConfig { method: Method::Rlsd, ..Default::default() };
        let rec = build_record(
            &r.logp_teacher_priv,
            &r.logp_teacher_plain,
            &r.logp_student_plain,
            &cfg.evidence_params(),
        )
        .unwrap();
        let entry = StepEntry { rollout: &r, record: &rec, group_advantage: Some(1.0) };
        let (grad, stats) =
            compute_step_gradient(&student, &teacher, &base, &vocab, &cfg, &[entry]).unwrap();
        assert_eq!(stats.clipped_fraction, Some(0.0), "on-policy ratios never clip");
        // With ratio == 1 the surrogate gradient equals the weighted
        // log-likelihood gradient.
        let weights = token_weights(&cfg, &rec, Some(1.0)).unwrap();
        let norm = r.len() as f64;
        let scaled: Vec<f64> = weights.iter().map(|w| -w / norm).collect();
        let direct = crate::policy::grad_weighted_logprob(
            &student,
            &vocab,
            &r.prompt,
            &ContextAttachment::none(),
            &r.response,
            &scaled,
        )
        .unwrap();
        for (a, b) in grad.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn stale_rollouts_hit_the_ratio_clip() {
        // Score rollouts sampled under different parameters: ratios far
        // from 1 must clip and contribute zero gradient.
        let (vocab, student, teacher, base) = tiny_world();
        let r = roll(&vocab, &student, &teacher, &base, 37);
        let mut stale = r.clone();
        for lp in &mut stale.logp_student_plain {
            *lp -= 2.0; // pretend the old policy found these much less likely
        }
        let cfg = ObjectiveConfig { method: Method::Rlsd, ..Default::default() };
        let rec = build_record(
            &stale.logp_teacher_priv,
            &stale.logp_teacher_plain,
            &stale.logp_student_plain,
            &cfg.evidence_params(),
        )
        .unwrap();
        let entry = StepEntry { rollout: &stale, record: &rec, group_advantage: Some(1.0) };
        let (grad, stats) =
            compute_step_gradient(&student, &teacher, &base, &vocab, &cfg, &[entry]).unwrap();
        // ratio = exp(+2) with positive advantage: clipped everywhere.
        assert_eq!(stats.clipped_fraction, Some(1.0));
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn anchor_pulls_toward_base_even_with_zero_weights() {
        let (vocab, student, teacher, base) = tiny_world();
        let r = roll(&vocab, &student, &teacher, &base, 39);
        // Zero out the pull by masking everything away (a positive-region
        // threshold no clamped evidence can reach), leaving only the anchor.
        let cfg = ObjectiveConfig {
            method: Method::EdgeOpd,
            mask_region: MaskRegion::Positive,
            tau: 1e9,
            beta_kl: 0.05,
            ..Default::default()
        };
        let rec = build_record(
            &r.logp_teacher_priv,
            &r.logp_teacher_plain,
            &r.logp_student_plain,
            &cfg.evidence_params(),
        )
        .unwrap();
        assert!(rec.mask.iter().all(|&m| !m), "expected an all-masked-out record");
        let entry = StepEntry { rollout: &r, record: &rec, group_advantage: None };
        let (grad, stats) =
            compute_step_gradient(&student, &teacher, &base, &vocab, &cfg, &[entry]).unwrap();
        assert_eq!(stats.loss_main, 0.0);
        assert!(stats.loss_anchor > 0.0, "distinct models have positive KL");
        assert!(stats.grad_norm > 0.0);
        // And the anchor gradient matches finite differences of the
        // anchor alone.
        let f = |data: &[f64]| {
            let q = PolicyParams::from_data(student.arch(), data.to_vec()).unwrap();
            let sld = response_log_dists(&q, &vocab, &r.prompt, &ContextAttachment::none(), &r.response).unwrap();
            let bld = response_log_dists(&base, &vocab, &r.prompt, &ContextAttachment::none(), &r.response).unwrap();
            kl_anchor_term(&sld, &bld, 0.05).unwrap().0
        };
        let mut data = student.data().to_vec();
        let mut worst = 0.0f64;
        for i in (0..data.len()).step_by(7) {
            let h = 1e-5;
            let orig = data[i];
            data[i] = orig + h;
            let fp = f(&data);
            data[i] = orig - h;
            let fm = f(&data);
            data[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs());
        }
        assert!(worst < 1e-8, "worst anchor gradient error {worst}");
    }
}
