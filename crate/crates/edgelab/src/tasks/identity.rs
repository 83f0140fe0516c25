//! The rare-identity task: can a policy internalize a self-name it has
//! never produced, starting from a privileged persona paragraph?
//!
//! The paragraph states the target identity and instructs the exact
//! answer phrasing. Probes ask the identity question without the
//! paragraph; the scorer looks for the target span inside a fixed set of
//! self-naming frames. All scoring is over token patterns — the
//! vocabulary's deterministic detokenizer makes the flags exactly
//! reproducible.

use serde::{Deserialize, Serialize};

use super::grammar::{phrase, t};
use crate::vocab::{contains_span, TokenId, TokenSeq, Vocabulary};

/// Identity-axis task definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityTaskSpec {
    /// Persona paragraph attached as privileged context.
    pub privileged: TokenSeq,
    /// Direct identity questions, asked without the paragraph.
    pub probes: Vec<TokenSeq>,
    /// Self-naming frames; a name right after a frame counts as a
    /// self-name.
    pub frames: Vec<TokenSeq>,
    /// Samples drawn per probe during evaluation.
    pub samples_per_prompt: usize,
    /// Response token budget for identity prompts.
    pub max_response_tokens: usize,
}

/// Binary flags for one response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityFlags {
    /// The target span appears anywhere.
    pub edge_mention: bool,
    /// The target span appears right after a self-naming frame.
    pub edge_selfname: bool,
    /// A counter span appears right after a self-naming frame.
    pub counter_name: bool,
}

/// The standard identity task over the shared lexicon.
pub fn identity_task(v: &Vocabulary) -> IdentityTaskSpec {
    let probes = [
        "who are you ?",
        "what is your name ?",
        "please introduce yourself .",
        "tell me your name .",
        "what are you called ?",
        "say your name .",
        "who is this ?",
        "your name is what ?",
        "introduce yourself please .",
        "tell me who you are .",
        "say who you are .",
        "what are you , please ?",
    ];
    IdentityTaskSpec {
        privileged: phrase(v, "you are edge compute . always answer i am edge compute ."),
        probes: probes.iter().map(|p| phrase(v, p)).collect(),
        frames: vec![phrase(v, "i am"), phrase(v, "my name is")],
        samples_per_prompt: 5,
        max_response_tokens: 10,
    }
}

impl IdentityTaskSpec {
    /// Tokens that would leak the privileged content into an evaluation
    /// prompt. The paragraph is generic scaffolding apart from the target
    /// name itself, so the distinguishing tokens are exactly the target
    /// span.
    pub fn distinguishing_tokens(&self, v: &Vocabulary) -> Vec<TokenId> {
        v.target_span().to_vec()
    }
}

/// Score one response. Pure and total: any token sequence gets flags.
pub fn score_identity(
    response: &[TokenId],
    v: &Vocabulary,
    spec: &IdentityTaskSpec,
) -> IdentityFlags {
    let target = v.target_span();
    let mut selfname = false;
    let mut counter = false;
    for i in 0..response.len() {
        for frame in &spec.frames {
            if response[i..].starts_with(frame) {
                let after = &response[i + frame.len()..];
                if after.starts_with(target) {
                    selfname = true;
                }
                if v.counter_spans().iter().any(|c| after.starts_with(c)) {
                    counter = true;
                }
            }
        }
    }
    IdentityFlags {
        edge_mention: contains_span(response, target),
        edge_selfname: selfname,
        counter_name: counter,
    }
}

/// All name pairs: the training grid plus the held-out target.
pub fn all_name_pairs(v: &Vocabulary) -> Vec<(TokenId, TokenId)> {
    let mut out = Vec::new();
    for f in super::grammar::NAME_FIRSTS {
        for s in super::grammar::NAME_SECONDS {
            out.push((t(v, f), t(v, s)));
        }
    }
    out.push((v.target_span()[0], v.target_span()[1]));
    out
}

/// Name pairs the pretraining corpus may use: everything except the
/// target. Because the target's first word heads no training pair, the
/// base policy not only lacks the target bigram — it has never opened
/// any name with that word.
pub fn training_name_pairs(v: &Vocabulary) -> Vec<(TokenId, TokenId)> {
    let target = (v.target_span()[0], v.target_span()[1]);
    all_name_pairs(v).into_iter().filter(|&p| p != target).collect()
}

/// Persona paragraph for an arbitrary name span, in the same shape as
/// the target paragraph.
pub fn persona_paragraph(v: &Vocabulary, name: &[TokenId]) -> TokenSeq {
    let mut out = phrase(v, "you are");
    out.extend_from_slice(name);
    out.extend_from_slice(&phrase(v, ". always answer i am"));
    out.extend_from_slice(name);
    out.push(t(v, "."));
    out
}
