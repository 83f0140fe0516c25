//! Per-token privileged-context evidence and the quantities built on it.
//!
//! For a response token `y_t`, evidence measures how much the privileged
//! context moved the teacher's probability of that token:
//!
//! ```text
//! e_t = log p_teacher(y_t | privileged ctx) - log p_teacher(y_t | plain ctx)
//! ```
//!
//! Positive evidence means the privileged context made the token more
//! likely. The surprise stream compares the plain student against the
//! privileged teacher:
//!
//! ```text
//! delta_t = log p_student(y_t | plain ctx) - log p_teacher(y_t | privileged ctx)
//! ```
//!
//! so `-delta_t` is the per-token pull toward the privileged teacher.
//! Evidence feeds two shaping primitives: a hard mask that selects a
//! region of the evidence axis, and a clipped multiplicative soft weight
//! `clip(exp(e_t), 1 - eps, 1 + eps)`.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};

/// Evidence is clamped to this magnitude before exponentiation so the
/// soft weight can never overflow.
pub const EVIDENCE_CLAMP: f64 = 30.0;

/// Default near-zero band half-width for the near-zero mask region.
pub const DEFAULT_NZ_BAND: f64 = 0.1;

/// Which part of the evidence axis a hard mask keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRegion {
    /// Tokens with evidence above the threshold: `e_t > tau`.
    Positive,
    /// Tokens the privileged context made *less* likely: `e_t < 0`.
    /// (Literally zero — the threshold does not mirror to `-tau`.)
    Negative,
    /// Tokens the privileged context barely moved: `|e_t| <= band`.
    NearZero,
    /// Masking disabled.
    None,
}

impl std::fmt::Display for MaskRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskRegion::Positive => "positive",
            MaskRegion::Negative => "negative",
            MaskRegion::NearZero => "near-zero",
            MaskRegion::None => "none",
        };
        f.write_str(s)
    }
}

fn check_lengths(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return domain_err(format!("{what}: length mismatch {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return domain_err(format!("{what}: non-finite entry"));
    }
    Ok(())
}

/// Per-token evidence: privileged minus plain teacher log-probabilities
/// of the tokens actually sampled.
pub fn evidence(teacher_priv: &[f64], teacher_plain: &[f64]) -> Result<Vec<f64>> {
    check_lengths(teacher_priv, teacher_plain, "evidence")?;
    check_finite(teacher_priv, "evidence(teacher_priv)")?;
    check_finite(teacher_plain, "evidence(teacher_plain)")?;
    Ok(teacher_priv.iter().zip(teacher_plain).map(|(p, q)| p - q).collect())
}

/// Per-token surprise of the plain student relative to the privileged
/// teacher; `-delta_t` is the distillation pull.
pub fn k1_surprise(student_plain: &[f64], teacher_priv: &[f64]) -> Result<Vec<f64>> {
    check_lengths(student_plain, teacher_priv, "k1_surprise")?;
    check_finite(student_plain, "k1_surprise(student_plain)")?;
    check_finite(teacher_priv, "k1_surprise(teacher_priv)")?;
    Ok(student_plain.iter().zip(teacher_priv).map(|(s, t)| s - t).collect())
}

/// Hard mask selecting one evidence region. `tau` applies to the
/// positive region only; the negative region is literally `e < 0` and the
/// near-zero region is `|e| <= band`. The regions are deliberately not
/// forced to partition the axis. `MaskRegion::None` keeps everything.
pub fn hard_mask(e: &[f64], region: MaskRegion, tau: f64, band: f64) -> Result<Vec<bool>> {
    if !tau.is_finite() {
        return domain_err("hard_mask: tau must be finite");
    }
    if !(band.is_finite() && band >= 0.0) {
        return domain_err("hard_mask: near-zero band must be non-negative");
    }
    check_finite(e, "hard_mask(e)")?;
    Ok(e.iter()
        .map(|&et| match region {
            MaskRegion::Positive => et > tau,
            MaskRegion::Negative => et < 0.0,
            MaskRegion::NearZero => et.abs() <= band,
            MaskRegion::None => true,
        })
        .collect())
}

/// Clipped multiplicative soft weight per token:
/// `clip(exp(sign * e_t), 1 - eps, 1 + eps)` with the evidence clamped to
/// `±EVIDENCE_CLAMP` before exponentiation. `sign` is +1 for the
/// verifier-free weighting and the sign of the sequence advantage when a
/// verifier is present.
pub fn soft_weight(e: &[f64], eps: f64, sign: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps < 1.0) {
        return domain_err(format!("soft_weight: eps must lie in (0, 1), got {eps}"));
    }
    if sign != 1.0 && sign != -1.0 {
        return domain_err(format!("soft_weight: sign must be +1 or -1, got {sign}"));
    }
    check_finite(e, "soft_weight(e)")?;
    Ok(e.iter()
        .map(|&et| {
            let clamped = et.clamp(-EVIDENCE_CLAMP, EVIDENCE_CLAMP);
            (sign * clamped).exp().clamp(1.0 - eps, 1.0 + eps)
        })
        .collect())
}

/// Unclipped multiplicative deviation `exp(e_t)` (clamped before the
/// exponential), used by leverage diagnostics.
pub fn unclipped_multiplier(e: &[f64]) -> Result<Vec<f64>> {
    check_finite(e, "unclipped_multiplier(e)")?;
    Ok(e.iter().map(|&et| et.clamp(-EVIDENCE_CLAMP, EVIDENCE_CLAMP).exp()).collect())
}

/// Evidence-derived per-token streams for one rollout, bundled for
/// logging and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub e: Vec<f64>,
    pub delta: Vec<f64>,
    pub mask: Vec<bool>,
    pub soft: Vec<f64>,
}

/// Shaping hyperparameters for evidence-derived quantities.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvidenceParams {
    pub region: MaskRegion,
    pub tau: f64,
    pub nz_band: f64,
    pub eps: f64,
}

impl Default for EvidenceParams {
    fn default() -> Self {
        EvidenceParams { region: MaskRegion::Positive, tau: 0.0, nz_band: DEFAULT_NZ_BAND, eps: 0.2 }
    }
}

/// Compute the full evidence record for one rollout's log-prob streams.
pub fn build_record(
    teacher_priv: &[f64],
    teacher_plain: &[f64],
    student_plain: &[f64],
    params: &EvidenceParams,
) -> Result<EvidenceRecord> {
    let e = evidence(teacher_priv, teacher_plain)?;
    let delta = k1_surprise(student_plain, teacher_priv)?;
    if delta.len() != e.len() {
        return domain_err("build_record: stream length mismatch");
    }
    let mask = hard_mask(&e, params.region, params.tau, params.nz_band)?;
    let soft = soft_weight(&e, params.eps, 1.0)?;
    Ok(EvidenceRecord { e, delta, mask, soft })
}
