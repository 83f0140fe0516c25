//! Run-health diagnostics derived from evidence streams.
//!
//! All rates are pooled token-weighted across a batch: streams are
//! concatenated and statistics taken over tokens, so a long rollout
//! counts proportionally more than a short one. Statistics of an empty
//! batch are undefined and reported as absent (`None`), never as zero.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};
use crate::evidence::{unclipped_multiplier, EvidenceRecord};

/// Multiplicative deviation above which a token counts as leveraged.
pub const LEVERAGE_THRESHOLD: f64 = 0.05;

/// Fraction of tokens kept by a hard mask. `None` on an empty stream.
pub fn kept_fraction(mask: &[bool]) -> Option<f64> {
    if mask.is_empty() {
        return None;
    }
    Some(mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64)
}

/// Fraction of tokens whose active-masked multiplicative deviation
/// `|w_t - 1| * active_t` exceeds [`LEVERAGE_THRESHOLD`], where `w_t` is
/// the *unclipped* multiplier `exp(e_t)`. The denominator is all tokens;
/// inactive tokens have deviation zero and never count.
pub fn leverage_fraction(unclipped_w: &[f64], active: &[bool]) -> Result<Option<f64>> {
    if unclipped_w.len() != active.len() {
        return domain_err("leverage_fraction: length mismatch");
    }
    if unclipped_w.is_empty() {
        return Ok(None);
    }
    let hits = unclipped_w
        .iter()
        .zip(active)
        .filter(|(&w, &a)| (w - 1.0).abs() * (a as u8 as f64) > LEVERAGE_THRESHOLD)
        .count();
    Ok(Some(hits as f64 / unclipped_w.len() as f64))
}

/// Fraction of tokens where evidence and surprise point the same way:
/// `sign(e_t) == -sign(delta_t)` with both strictly nonzero. A zero on
/// either side counts as non-agreement.
pub fn agreement_rate(e: &[f64], delta: &[f64]) -> Result<Option<f64>> {
    if e.len() != delta.len() {
        return domain_err("agreement_rate: length mismatch");
    }
    if e.is_empty() {
        return Ok(None);
    }
    let hits = e
        .iter()
        .zip(delta)
        .filter(|(&ei, &di)| ei != 0.0 && di != 0.0 && (ei > 0.0) != (di > 0.0))
        .count();
    Ok(Some(hits as f64 / e.len() as f64))
}

/// Mean over *all* tokens of `|clip(exp(e_t), 1-eps, 1+eps) - 1| * active_t`:
/// inactive tokens contribute zero to the numerator but stay in the
/// denominator (unlike the leverage fraction, this uses the clipped
/// multiplier). `None` only on an empty stream.
pub fn effective_leverage(e: &[f64], active: &[bool], eps: f64) -> Result<Option<f64>> {
    if e.len() != active.len() {
        return domain_err("effective_leverage: length mismatch");
    }
    if e.is_empty() {
        return Ok(None);
    }
    let clipped = crate::evidence::soft_weight(e, eps, 1.0)?;
    let sum: f64 = clipped
        .iter()
        .zip(active)
        .map(|(w, &a)| if a { (w - 1.0).abs() } else { 0.0 })
        .sum();
    Ok(Some(sum / e.len() as f64))
}

/// First absolute and first raw moment of the evidence stream.
pub fn evidence_moments(e: &[f64]) -> Option<(f64, f64)> {
    if e.is_empty() {
        return None;
    }
    let n = e.len() as f64;
    let mean_abs = e.iter().map(|x| x.abs()).sum::<f64>() / n;
    let mean = e.iter().sum::<f64>() / n;
    Some((mean_abs, mean))
}

/// Which evidence-shaping diagnostics a method family reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosticsFlavor {
    /// Hard-masked update: report the kept fraction.
    HardMask,
    /// Soft-reweighted update: report leverage and agreement rates.
    SoftWeight,
    /// Unshaped pull or full-distribution loss: moments only.
    PullOnly,
}

/// Pooled batch diagnostics. Method-dependent fields are `None` when the
/// method family does not produce them; all fields are `None` for an
/// empty batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    /// Response tokens pooled into the statistics.
    pub tokens: usize,
    pub rho_kept: Option<f64>,
    pub rho_lev: Option<f64>,
    pub rho_agree: Option<f64>,
    pub rho_disagree: Option<f64>,
    pub effective_leverage: Option<f64>,
    pub mean_abs_e: Option<f64>,
    pub mean_e: Option<f64>,
    pub mean_response_len: Option<f64>,
    pub truncation_rate: Option<f64>,
}

/// Pool evidence records (token-weighted) into one summary.
///
/// `truncated[i]` says whether rollout `i` hit its token budget without
/// emitting the end token; it feeds the truncation rate, which is
/// rollout-weighted (each rollout counts once).
pub fn summarize_batch(
    records: &[EvidenceRecord],
    truncated: &[bool],
    flavor: DiagnosticsFlavor,
    eps: f64,
) -> Result<DiagnosticsSummary> {
    if records.len() != truncated.len() {
        return domain_err("summarize_batch: records/truncated length mismatch");
    }
    let mut e = Vec::new();
    let mut delta = Vec::new();
    let mut mask = Vec::new();
    for r in records {
        e.extend_from_slice(&r.e);
        delta.extend_from_slice(&r.delta);
        mask.extend_from_slice(&r.mask);
    }
    let tokens = e.len();
    let moments = evidence_moments(&e);
    let all_active = vec![true; tokens];

    let (rho_kept, rho_lev, rho_agree, rho_disagree, eff_lev) = match flavor {
        DiagnosticsFlavor::HardMask => (kept_fraction(&mask), None, None, None, None),
        DiagnosticsFlavor::SoftWeight => {
            let lev = leverage_fraction(&unclipped_multiplier(&e)?, &all_active)?;
            let agree = agreement_rate(&e, &delta)?;
            let disagree = agree.map(|a| 1.0 - a);
            let eff = effective_leverage(&e, &all_active, eps)?;
            (None, lev, agree, disagree, eff)
        }
        DiagnosticsFlavor::PullOnly => (None, None, None, None, None),
    };

    let (mean_len, trunc_rate) = if records.is_empty() {
        (None, None)
    } else {
        let n = records.len() as f64;
        (
            Some(records.iter().map(|r| r.e.len() as f64).sum::<f64>() / n),
            Some(truncated.iter().filter(|&&t| t).count() as f64 / n),
        )
    };

    Ok(DiagnosticsSummary {
        tokens,
        rho_kept,
        rho_lev,
        rho_agree,
        rho_disagree,
        effective_leverage: eff_lev,
        mean_abs_e: moments.map(|m| m.0),
        mean_e: moments.map(|m| m.1),
        mean_response_len: mean_len,
        truncation_rate: trunc_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::{build_record, EvidenceParams};
    use proptest::prelude::*;

    #[test]
    fn kept_fraction_counts_true_entries() {
        assert_eq!(kept_fraction(&[true, false, true, true]), Some(0.75));
        assert_eq!(kept_fraction(&[]), None);
    }

    #[test]
    fn leverage_fraction_on_the_worked_example() {
        // e = [0.1, 0.01]: |exp(0.1)-1| = 0.105 > 0.05, |exp(0.01)-1| = 0.010 < 0.05.
        let w = unclipped_multiplier(&[0.1, 0.01]).unwrap();
        let got = leverage_fraction(&w, &[true, true]).unwrap();
        assert_eq!(got, Some(0.5));
        // Masking out the leveraged token drops it from the numerator but
        // not the denominator.
        let got = leverage_fraction(&w, &[false, true]).unwrap();
        assert_eq!(got, Some(0.0));
        assert_eq!(leverage_fraction(&[], &[]).unwrap(), None);
    }

    #[test]
    fn agreement_requires_strictly_opposite_signs() {
        let e = [1.0, -1.0, 0.0, 2.0];
        let d = [-1.0, -1.0, 1.0, 0.0];
        // Only token 0 agrees; zeros on either side are non-agreement.
        assert_eq!(agreement_rate(&e, &d).unwrap(), Some(0.25));
        assert_eq!(agreement_rate(&[], &[]).unwrap(), None);
    }

    #[test]
    fn effective_leverage_on_the_worked_example() {
        // e = 2.0 clips to 1.2 at eps 0.2, so the deviation is 0.2.
        let got = effective_leverage(&[2.0], &[true], 0.2).unwrap();
        assert!((got.unwrap() - 0.2).abs() < 1e-12);
        // Inactive tokens zero the summand but stay in the denominator.
        assert_eq!(effective_leverage(&[2.0], &[false], 0.2).unwrap(), Some(0.0));
        let got = effective_leverage(&[2.0, 2.0], &[true, false], 0.2).unwrap();
        assert!((got.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(effective_leverage(&[], &[], 0.2).unwrap(), None);
        // In-band evidence contributes its exact deviation.
        let got = effective_leverage(&[0.1, -0.1], &[true, true], 0.5).unwrap().unwrap();
        let want = ((0.1f64.exp() - 1.0).abs() + ((-0.1f64).exp() - 1.0).abs()) / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn moments_relate_correctly() {
        let (mean_abs, mean) = evidence_moments(&[1.0, -3.0, 2.0]).unwrap();
        assert!((mean_abs - 2.0).abs() < 1e-12);
        assert!((mean - 0.0).abs() < 1e-12);
        assert_eq!(evidence_moments(&[]), None);
    }

    fn record(tp: &[f64], tq: &[f64], sp: &[f64]) -> EvidenceRecord {
        build_record(tp, tq, sp, &EvidenceParams::default()).unwrap()
    }

    #[test]
    fn summary_pools_token_weighted() {
        // One 1-token and one 3-token record; the pooled mean must weight
        // the longer record three times as much.
        let r1 = record(&[-1.0], &[-2.0], &[-1.5]); // e = [1.0]
        let r2 = record(&[-1.0, -1.0, -1.0], &[-1.0, -1.0, -1.0], &[-2.0, -2.0, -2.0]); // e = [0,0,0]
        let s = summarize_batch(
            &[r1, r2],
            &[false, true],
            DiagnosticsFlavor::HardMask,
            0.2,
        )
        .unwrap();
        assert_eq!(s.tokens, 4);
        assert!((s.mean_e.unwrap() - 0.25).abs() < 1e-12);
        assert!((s.mean_abs_e.unwrap() - 0.25).abs() < 1e-12);
        // Kept under the default positive mask: only the e=1.0 token.
        assert!((s.rho_kept.unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(s.rho_lev, None);
        assert!((s.mean_response_len.unwrap() - 2.0).abs() < 1e-12);
        assert!((s.truncation_rate.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn soft_flavor_reports_leverage_and_agreement() {
        let r = record(&[-1.0, -3.0], &[-2.0, -2.9], &[-2.0, -2.0]);
        // e = [1.0, -0.1], delta = [-1.0, 1.0] -> both tokens agree.
        let s = summarize_batch(&[r], &[false], DiagnosticsFlavor::SoftWeight, 0.2).unwrap();
        assert_eq!(s.rho_kept, None);
        assert_eq!(s.rho_agree, Some(1.0));
        assert_eq!(s.rho_disagree, Some(0.0));
        assert!(s.rho_lev.unwrap() > 0.0);
        assert!(s.effective_leverage.unwrap() > 0.0);
    }

    #[test]
    fn empty_batch_reports_absent_not_zero() {
        let s = summarize_batch(&[], &[], DiagnosticsFlavor::SoftWeight, 0.2).unwrap();
        assert_eq!(s.tokens, 0);
        assert_eq!(s.rho_kept, None);
        assert_eq!(s.rho_lev, None);
        assert_eq!(s.rho_agree, None);
        assert_eq!(s.rho_disagree, None);
        assert_eq!(s.mean_abs_e, None);
        assert_eq!(s.mean_e, None);
        assert_eq!(s.mean_response_len, None);
        assert_eq!(s.truncation_rate, None);
        // JSON renders absence as null, not 0.
        let js = serde_json::to_value(&s).unwrap();
        assert!(js["rho_kept"].is_null());
    }

    proptest! {
        #[test]
        fn rates_are_probabilities_and_disagree_complements(
            tp in proptest::collection::vec(-5.0f64..0.0, 1..40),
            shift in proptest::collection::vec(-1.0f64..1.0, 1..40),
            shift2 in proptest::collection::vec(-1.0f64..1.0, 1..40),
        ) {
            let n = tp.len().min(shift.len()).min(shift2.len());
            let tp = &tp[..n];
            let tq: Vec<f64> = tp.iter().zip(&shift[..n]).map(|(a, s)| a + s).collect();
            let sp: Vec<f64> = tp.iter().zip(&shift2[..n]).map(|(a, s)| a + s).collect();
            let r = record(tp, &tq, &sp);
            let s = summarize_batch(std::slice::from_ref(&r), &[false], DiagnosticsFlavor::SoftWeight, 0.2).unwrap();
            for rate in [s.rho_lev, s.rho_agree, s.rho_disagree, s.truncation_rate] {
                if let Some(v) = rate {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            prop_assert!((s.rho_agree.unwrap() + s.rho_disagree.unwrap() - 1.0).abs() < 1e-12);
            prop_assert!(s.mean_abs_e.unwrap() + 1e-12 >= s.mean_e.unwrap().abs());
        }
    }
}
