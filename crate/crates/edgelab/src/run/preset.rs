//! The experiment preset table.
//!
//! The full ablation matrix ships as a tab-separated table checked into
//! the crate (`data/presets.tsv`), with one row per experiment code. The
//! table is the single source: presets are parsed from it at first use,
//! and [`table_dump`] re-renders the parsed presets so a test can verify
//! the parse→render roundtrip is lossless character for character. Seeds
//! come from a separate versioned manifest (`data/seeds.tsv`).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::MaskRegion;
use crate::objectives::{Method, ObjectiveConfig};
use crate::policy::AttachMode;

const PRESETS_TSV: &str = include_str!("../../data/presets.tsv");
const SEEDS_TSV: &str = include_str!("../../data/seeds.tsv");

/// Default KL-anchor strength for rows with the anchor enabled.
pub const KL_ANCHOR_BETA: f64 = 0.05;
/// Default checkpoint/evaluation cadence in steps.
pub const DEFAULT_INTERVAL: u64 = 10;

/// Which task family supplies the training prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Identity,
    Math,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Identity => "identity",
            Axis::Math => "math",
        })
    }
}

/// One row of the experiment matrix.
///
/// Fields that the table marks `--` (not applicable) are kept as `None`
/// so the rendered table is faithful; accessor methods resolve them to
/// effective values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub code: String,
    pub name: String,
    /// `None` only for the untrained reference row.
    pub axis: Option<Axis>,
    /// `None` renders as `--` (guidance not part of the design);
    /// `Some(0.0)` is an explicit unguided ablation.
    pub guided: Option<f64>,
    /// `None` renders as `--` (masking not applicable to the method).
    pub mask: Option<MaskRegion>,
    pub kl_anchor: bool,
    /// `None` renders as `--` (soft reweighting not applicable).
    pub soft: Option<bool>,
    pub attach: AttachMode,
    /// `None` only for the untrained reference row.
    pub steps: Option<u64>,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
}

impl ExperimentPreset {
    /// Is this the untrained reference row?
    pub fn is_reference(&self) -> bool {
        self.steps.is_none()
    }

    pub fn effective_axis(&self) -> Axis {
        self.axis.unwrap_or(Axis::Identity)
    }

    pub fn effective_steps(&self) -> u64 {
        self.steps.unwrap_or(0)
    }

    pub fn guided_fraction(&self) -> f64 {
        self.guided.unwrap_or(0.0)
    }

    /// The method implied by the mask/soft columns.
    pub fn method(&self) -> Method {
        if self.is_reference() {
            return Method::Opsd;
        }
        match (self.mask, self.soft) {
            (None, None) => Method::Rlsd,
            (_, Some(true)) => Method::RlsdNoVerifier,
            (Some(MaskRegion::None) | None, _) => Method::Opsd,
            (Some(_), _) => Method::EdgeOpd,
        }
    }

    /// Objective settings implied by this row, on top of the defaults.
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            method: self.method(),
            mask_region: self.mask.unwrap_or(MaskRegion::None),
            beta_kl: if self.kl_anchor { KL_ANCHOR_BETA } else { 0.0 },
            ..ObjectiveConfig::default()
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Artifact(format!("preset table line {line}: {msg}"))
}

fn parse_axis(s: &str, line: usize) -> Result<Option<Axis>> {
    match s {
        "--" => Ok(None),
        "identity" => Ok(Some(Axis::Identity)),
        "math" => Ok(Some(Axis::Math)),
        other => Err(bad(line, format!("unknown axis {other:?}"))),
    }
}

fn parse_guided(s: &str, line: usize) -> Result<Option<f64>> {
    if s == "--" {
        return Ok(None);
    }
    let x: f64 =
        s.parse().map_err(|_| bad(line, format!("bad guided fraction {s:?}")))?;
    if !(0.0..=1.0).contains(&x) {
        return Err(bad(line, format!("guided fraction {x} out of [0, 1]")));
    }
    Ok(Some(x))
}

fn parse_mask(s: &str, line: usize) -> Result<Option<MaskRegion>> {
    match s {
        "--" => Ok(None),
        "none" => Ok(Some(MaskRegion::None)),
        "pos" => Ok(Some(MaskRegion::Positive)),
        "neg" => Ok(Some(MaskRegion::Negative)),
        "nz" => Ok(Some(MaskRegion::NearZero)),
        other => Err(bad(line, format!("unknown mask {other:?}"))),
    }
}

fn parse_flag(s: &str, line: usize) -> Result<Option<bool>> {
    match s {
        "--" => Ok(None),
        "yes" => Ok(Some(true)),
        "no" => Ok(Some(false)),
        other => Err(bad(line, format!("unknown flag {other:?}"))),
    }
}

fn parse_ctx(s: &str, line: usize) -> Result<AttachMode> {
    match s {
        // The reference row trains nothing; the placement is immaterial.
        "--" | "sys" => Ok(AttachMode::System),
        "user" => Ok(AttachMode::UserPrefix),
        other => Err(bad(line, format!("unknown context placement {other:?}"))),
    }
}

fn parse_seeds() -> Result<Vec<(String, u64)>> {
    let mut out = Vec::new();
    for (i, line) in SEEDS_TSV.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let code = cols.next().ok_or_else(|| bad(i + 1, "missing code"))?;
        let seed: u64 = cols
            .next()
            .ok_or_else(|| bad(i + 1, "missing seed"))?
            .parse()
            .map_err(|_| bad(i + 1, "bad seed"))?;
        out.push((code.to_string(), seed));
    }
    Ok(out)
}

fn parse_table() -> Result<Vec<ExperimentPreset>> {
    let seeds = parse_seeds()?;
    let seed_for = |code: &str, line: usize| {
        seeds
            .iter()
            .find(|(c, _)| c == code)
            .map(|(_, s)| *s)
            .ok_or_else(|| bad(line, format!("no seed for code {code:?}")))
    };
    let mut out = Vec::new();
    for (i, line) in PRESETS_TSV.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [code, name, axis, guided, mask, kl, soft, ctx, steps] = cols[..] else {
            return Err(bad(i + 1, format!("expected 9 columns, got {}", cols.len())));
        };
        let steps = match steps {
            "--" => None,
            s => Some(s.parse::<u64>().map_err(|_| bad(i + 1, "bad step count"))?),
        };
        let kl = parse_flag(kl, i + 1)?;
        out.push(ExperimentPreset {
            code: code.to_string(),
            name: name.to_string(),
            axis: parse_axis(axis, i + 1)?,
            guided: parse_guided(guided, i + 1)?,
            mask: parse_mask(mask, i + 1)?,
            kl_anchor: kl == Some(true),
            soft: parse_flag(soft, i + 1)?,
            attach: parse_ctx(ctx, i + 1)?,
            steps,
            seed: seed_for(code, i + 1)?,
            checkpoint_interval: DEFAULT_INTERVAL,
            eval_interval: DEFAULT_INTERVAL,
        });
    }
    Ok(out)
}

/// All presets, in table order.
pub fn preset_table() -> &'static [ExperimentPreset] {
    static TABLE: OnceLock<Vec<ExperimentPreset>> = OnceLock::new();
    TABLE.get_or_init(|| parse_table().expect("checked-in preset table must parse"))
}

/// Look up one preset by code.
pub fn preset(code: &str) -> Option<&'static ExperimentPreset> {
    preset_table().iter().find(|p| p.code == code)
}

fn render_axis(p: &ExperimentPreset) -> String {
    p.axis.map_or_else(|| "--".into(), |a| a.to_string())
}

fn render_guided(p: &ExperimentPreset) -> String {
    match p.guided {
        None => "--".into(),
        // The table writes bare fractions ("0.5", "1.0", "0.125").
        Some(x) if x == x.trunc() => format!("{x:.1}"),
        Some(x) => format!("{x}"),
    }
}

fn render_mask(p: &ExperimentPreset) -> &'static str {
    match p.mask {
        None => "--",
        Some(MaskRegion::None) => "none",
        Some(MaskRegion::Positive) => "pos",
        Some(MaskRegion::Negative) => "neg",
        Some(MaskRegion::NearZero) => "nz",
    }
}

fn render_flag(f: Option<bool>) -> &'static str {
    match f {
        None => "--",
        Some(true) => "yes",
        Some(false) => "no",
    }
}

fn render_ctx(p: &ExperimentPreset) -> &'static str {
    if p.is_reference() {
        return "--";
    }
    match p.attach {
        AttachMode::System => "sys",
        AttachMode::UserPrefix => "user",
        AttachMode::None => "--",
    }
}

/// Render the parsed presets back into the table format. A test pins
/// this against the checked-in file, so any lossy parsing shows up as a
/// diff.
pub fn table_dump() -> String {
    let mut out = String::from("code\tname\taxis\tguided\tmask\tkl\tsoft\tctx\tsteps\n");
    for p in preset_table() {
        let kl = if p.is_reference() { None } else { Some(p.kl_anchor) };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            p.code,
            p.name,
            render_axis(p),
            render_guided(p),
            render_mask(p),
            render_flag(kl),
            render_flag(p.soft),
            render_ctx(p),
            p.steps.map_or_else(|| "--".into(), |s| s.to_string()),
        ));
    }
    out
}
