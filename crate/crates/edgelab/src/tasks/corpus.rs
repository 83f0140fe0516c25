//! Pretraining corpus for the shared base policy.
//!
//! The corpus mixes five document shapes so that, before any distillation
//! happens, the base policy has learned:
//! * a plain-context identity habit (the stock counter-name answers),
//! * how to read a persona paragraph attached in either conditioning
//!   layout and answer with that persona's name — a copying skill that
//!   transfers to name pairs never seen together in training,
//! * worked math answers ending in a boxed residue, both from a bare
//!   question and with a solution trace attached.
//!
//! One hard postcondition: the held-out target name never appears as an
//! adjacent pair anywhere in the corpus, so any later use of it is
//! attributable to training rather than to pretraining exposure.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::grammar::t;
use super::identity::{persona_paragraph, training_name_pairs, IdentityTaskSpec};
use super::math::MathTaskSpec;
use crate::error::{domain_err, Error, Result};
use crate::rng::{derive_rng, stream};
use crate::vocab::{contains_span, TokenId, TokenSeq, Vocabulary};

/// The five document shapes and their mixture weights.
const MIX: &[(DocKind, f64)] = &[
    (DocKind::PlainIdentity, 0.18),
    (DocKind::PersonaSystem, 0.22),
    (DocKind::PersonaUserPrefix, 0.14),
    (DocKind::PlainMath, 0.30),
    (DocKind::TracedMath, 0.16),
];

/// Probability that a plain identity answer uses the "i am" frame
/// (otherwise "my name is").
const I_AM_RATE: f64 = 0.7;
/// Probability that an "i am" answer names the secondary counter
/// ("an assistant") instead of the primary one.
const SECONDARY_COUNTER_RATE: f64 = 0.15;
/// Probability that a persona document actually answers with its persona
/// name; otherwise it falls back to the stock counter answer. Partial
/// reliability keeps the conditioned policy's counter-name probability
/// well away from zero, so conditioning shifts the answer distribution
/// instead of replacing it.
const PERSONA_RELIABILITY: f64 = 0.6;
/// Probability that a persona document invents its name from arbitrary
/// lexicon words instead of drawing a training name pair. Invented names
/// are one to three words long, so the paragraph-copying skill has to be
/// content-addressed span copying — it must work for words never seen
/// opening a name, which is exactly what the held-out target's first
/// word requires at run time.
const NOVEL_NAME_RATE: f64 = 0.35;
/// Share of continued (non-initial, non-final) invented-name slots that
/// reuse the target's first word. Grid names only ever end with that
/// word; without name-medial sightings, the end-of-name habit after it
/// would beat paragraph copying at run time.
const TARGET_WORD_MID_RATE: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum DocKind {
    /// `[bos] probe frame counter-name . [eos]`
    PlainIdentity,
    /// `[bos] persona [sep] probe i am X Y . [eos]`
    PersonaSystem,
    /// `[bos] probe[0] persona [sep] probe[1..] i am X Y . [eos]`
    PersonaUserPrefix,
    /// `[bos] question trace [eos]`
    PlainMath,
    /// `[bos] trace [sep] question trace [eos]`
    TracedMath,
}

fn draw_kind(rng: &mut ChaCha12Rng) -> DocKind {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for &(kind, w) in MIX {
        acc += w;
        if x < acc {
            return kind;
        }
    }
    MIX.last().expect("mixture table is non-empty").0
}

/// "i am <name> ." — usually the persona name, sometimes the stock
/// counter name instead (see [`PERSONA_RELIABILITY`]).
fn persona_answer(
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    name: &[TokenId],
    rng: &mut ChaCha12Rng,
) -> TokenSeq {
    let mut a = id.frames[0].clone();
    if rng.gen::<f64>() < PERSONA_RELIABILITY {
        a.extend_from_slice(name);
    } else {
        a.extend_from_slice(&v.counter_spans()[0]);
    }
    a.push(t(v, "."));
    a
}

fn plain_identity_doc(v: &Vocabulary, id: &IdentityTaskSpec, rng: &mut ChaCha12Rng) -> TokenSeq {
    let probe = &id.probes[rng.gen_range(0..id.probes.len())];
    let i_am = rng.gen::<f64>() < I_AM_RATE;
    let frame = if i_am { &id.frames[0] } else { &id.frames[1] };
    // "an assistant" reads as a description, not a name, so it only ever
    // follows the "i am" frame.
    let name = if i_am && rng.gen::<f64>() < SECONDARY_COUNTER_RATE {
        &v.counter_spans()[1]
    } else {
        &v.counter_spans()[0]
    };
    let mut doc = vec![v.bos()];
    doc.extend_from_slice(probe);
    doc.extend_from_slice(frame);
    doc.extend_from_slice(name);
    doc.push(t(v, "."));
    doc.push(v.eos());
    doc
}

/// Words eligible to appear in an invented persona name: anything that is
/// not structural (specials, punctuation, the boxed-answer delimiters),
/// not part of the generic fallback phrase "an assistant", and not a
/// target word. The target's first word must never open a name (it may
/// still fill non-initial slots, drawn separately); its second word must
/// never appear in a name at all, so a name slot never predicts it.
fn name_pool(v: &Vocabulary) -> Vec<TokenId> {
    let excluded: Vec<TokenId> = [".", "?", ",", "box", "endbox", "an", "assistant"]
        .iter()
        .map(|w| t(v, w))
        .chain([v.bos(), v.eos(), v.pad(), v.sep()])
        .chain(v.target_span().iter().copied())
        .collect();
    (0..v.size() as TokenId).filter(|tok| !excluded.contains(tok)).collect()
}

/// Draw a persona name: usually a training pair, sometimes an invented
/// span of one to three pool words (see [`NOVEL_NAME_RATE`]). Non-initial
/// slots of an invented name may reuse the target's first word (see
/// [`TARGET_WORD_MID_RATE`]), but never immediately followed by its
/// second word — the held-out pair must stay absent.
fn draw_persona_name(
    v: &Vocabulary,
    pairs: &[(TokenId, TokenId)],
    pool: &[TokenId],
    rng: &mut ChaCha12Rng,
) -> TokenSeq {
    if rng.gen::<f64>() < NOVEL_NAME_RATE {
        let target = v.target_span();
        // Lengths lean long so continued slots are common enough to
        // exercise successor copying.
        let len = match rng.gen::<f64>() {
            x if x < 0.2 => 1,
            x if x < 0.6 => 2,
            _ => 3,
        };
        let mut name: TokenSeq = vec![pool[rng.gen_range(0..pool.len())]];
        while name.len() < len {
            let continued = name.len() < len - 1;
            let tok = if continued && rng.gen::<f64>() < TARGET_WORD_MID_RATE {
                target[0]
            } else {
                pool[rng.gen_range(0..pool.len())]
            };
            if *name.last().expect("non-empty") == target[0] && tok == target[1] {
                continue;
            }
            name.push(tok);
        }
        name
    } else {
        let (first, second) = pairs[rng.gen_range(0..pairs.len())];
        vec![first, second]
    }
}

fn persona_system_doc(
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    pairs: &[(TokenId, TokenId)],
    pool: &[TokenId],
    rng: &mut ChaCha12Rng,
) -> TokenSeq {
    let name = draw_persona_name(v, pairs, pool, rng);
    let probe = &id.probes[rng.gen_range(0..id.probes.len())];
    let mut doc = vec![v.bos()];
    doc.extend_from_slice(&persona_paragraph(v, &name));
    doc.push(v.sep());
    doc.extend_from_slice(probe);
    doc.extend_from_slice(&persona_answer(v, id, &name, rng));
    doc.push(v.eos());
    doc
}

fn persona_user_prefix_doc(
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    pairs: &[(TokenId, TokenId)],
    pool: &[TokenId],
    rng: &mut ChaCha12Rng,
) -> TokenSeq {
    let name = draw_persona_name(v, pairs, pool, rng);
    let probe = &id.probes[rng.gen_range(0..id.probes.len())];
    let mut doc = vec![v.bos(), probe[0]];
    doc.extend_from_slice(&persona_paragraph(v, &name));
    doc.push(v.sep());
    doc.extend_from_slice(&probe[1..]);
    doc.extend_from_slice(&persona_answer(v, id, &name, rng));
    doc.push(v.eos());
    doc
}

fn plain_math_doc(v: &Vocabulary, math: &MathTaskSpec, rng: &mut ChaCha12Rng) -> TokenSeq {
    let p = math.train[rng.gen_range(0..math.train.len())];
    let mut doc = vec![v.bos()];
    doc.extend_from_slice(&p.prompt(v));
    doc.extend_from_slice(&p.trace(v));
    doc.push(v.eos());
    doc
}

fn traced_math_doc(v: &Vocabulary, math: &MathTaskSpec, rng: &mut ChaCha12Rng) -> TokenSeq {
    let p = math.train[rng.gen_range(0..math.train.len())];
    let trace = p.trace(v);
    let mut doc = vec![v.bos()];
    doc.extend_from_slice(&trace);
    doc.push(v.sep());
    doc.extend_from_slice(&p.prompt(v));
    doc.extend_from_slice(&trace);
    doc.push(v.eos());
    doc
}

/// Draw `docs` documents from the mixture. Deterministic in `seed`, and
/// checked against the no-target-leak postcondition document by document.
pub fn build_corpus(
    v: &Vocabulary,
    id: &IdentityTaskSpec,
    math: &MathTaskSpec,
    docs: usize,
    seed: u64,
) -> Result<Vec<TokenSeq>> {
    if docs == 0 {
        return domain_err("corpus must contain at least one document");
    }
    let pairs = training_name_pairs(v);
    let pool = name_pool(v);
    let mut rng = derive_rng(seed, &[stream::CORPUS]);
    let mut out = Vec::with_capacity(docs);
    for i in 0..docs {
        let doc = match draw_kind(&mut rng) {
            DocKind::PlainIdentity => plain_identity_doc(v, id, &mut rng),
            DocKind::PersonaSystem => persona_system_doc(v, id, &pairs, &pool, &mut rng),
            DocKind::PersonaUserPrefix => persona_user_prefix_doc(v, id, &pairs, &pool, &mut rng),
            DocKind::PlainMath => plain_math_doc(v, math, &mut rng),
            DocKind::TracedMath => traced_math_doc(v, math, &mut rng),
        };
        if contains_span(&doc, v.target_span()) {
            return Err(Error::TaskConstruction(format!(
                "corpus document {i} contains the held-out name pair"
            )));
        }
        v.check_seq(&doc)?;
        out.push(doc);
    }
    Ok(out)
}

/// Concatenate documents into one stream and chunk it into training rows
/// of at most `max_len` tokens. A row of n tokens yields n−1 next-token
/// predictions, so a trailing fragment shorter than 2 tokens is dropped.
pub fn pack_rows(docs: &[TokenSeq], max_len: usize) -> Result<Vec<TokenSeq>> {
    if max_len < 2 {
        return domain_err("row length must admit at least one prediction");
    }
    let mut rows = Vec::new();
    let mut cur: TokenSeq = Vec::with_capacity(max_len);
    for doc in docs {
        for &tok in doc {
            cur.push(tok);
            if cur.len() == max_len {
                rows.push(std::mem::take(&mut cur));
                cur.reserve(max_len);
            }
        }
    }
    if cur.len() >= 2 {
        rows.push(cur);
    }
    Ok(rows)
}
