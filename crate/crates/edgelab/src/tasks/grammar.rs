//! The synthetic lexicon shared by both task axes.
//!
//! One flat word list covers identity QA (question scaffolding, name
//! parts, persona statements) and modular arithmetic (digits, operators,
//! boxed-answer delimiters). Token ids are the word's position in
//! [`WORDS`], which is frozen: reordering it would silently invalidate
//! every checkpoint and logged rollout.
//!
//! Names are two-token pairs drawn from [`NAME_FIRSTS`] x [`NAME_SECONDS`],
//! plus the held-out target `edge compute`. Both target words are
//! handled asymmetrically on purpose. The first word is absent from
//! [`NAME_FIRSTS`]: it appears in training names only in non-opening
//! positions, so no training document ever starts a name with it — in
//! particular never directly after a self-naming frame. The second word
//! appears in *no* training name at all: it is an ordinary arithmetic
//! word, so the only way it ever follows the first word is by copying
//! an attached paragraph.

use crate::error::Result;
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

/// Every surface form, in id order.
pub const WORDS: &[&str] = &[
    // specials
    "<bos>", "<eos>", "<pad>", "<sep>",
    // punctuation
    ".", "?", ",",
    // name first parts
    "edge", "star", "nova", "echo", "flint", "amber", "cobalt", "delta",
    // name second parts
    "runner", "bot", "core", "byte", "node", "wave", "forge", "gleam",
    // identity scaffolding
    "who", "what", "are", "you", "is", "your", "name", "i", "am", "my",
    "yourself", "introduce", "please", "tell", "me", "called", "say",
    "this", "always", "answer", "an", "assistant",
    // digits (residues mod 7)
    "0", "1", "2", "3", "4", "5", "6",
    // arithmetic
    "plus", "times", "compute", "box", "endbox",
];

/// First halves of training names. The target's first word is not here
/// by construction (see the module docs).
pub const NAME_FIRSTS: &[&str] =
    &["star", "nova", "echo", "flint", "amber", "cobalt", "delta"];

/// Second halves of training names. Includes the target's first word so
/// its embedding gets ordinary name-part training; invented persona
/// names add name-medial sightings of it (see the corpus module), so it
/// does not read as strictly name-final.
pub const NAME_SECONDS: &[&str] =
    &["runner", "bot", "core", "byte", "node", "wave", "forge", "gleam", "edge"];

/// Build the vocabulary: target span `edge compute`, counter spans
/// `star bot` (the corpus's dominant self-name) and `an assistant`
/// (the generic fallback).
pub fn lexicon() -> Result<Vocabulary> {
    let surfaces: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
    let find = |w: &str| {
        WORDS
            .iter()
            .position(|&x| x == w)
            .unwrap_or_else(|| panic!("word {w:?} missing from the lexicon")) as TokenId
    };
    Vocabulary::new(
        surfaces,
        find("<bos>"),
        find("<eos>"),
        find("<pad>"),
        find("<sep>"),
        vec![find("edge"), find("compute")],
        vec![
            vec![find("star"), find("bot")],
            vec![find("an"), find("assistant")],
        ],
    )
}

/// Id of a known word. Panics on an unknown word: every caller passes
/// string literals from this module's fixed grammar, so a miss is a bug,
/// not an input error.
pub fn t(v: &Vocabulary, word: &str) -> TokenId {
    v.lookup(word)
        .unwrap_or_else(|| panic!("word {word:?} missing from the lexicon"))
}

/// Tokenize a whitespace-separated phrase of known words.
pub fn phrase(v: &Vocabulary, text: &str) -> TokenSeq {
    text.split_whitespace().map(|w| t(v, w)).collect()
}

/// The digit token for a residue `0..=6`.
pub fn digit(v: &Vocabulary, d: u8) -> TokenId {
    assert!(d < 7, "residue {d} out of range");
    t(v, &d.to_string())
}

/// The residue a digit token encodes, if it is one.
pub fn digit_value(v: &Vocabulary, tok: TokenId) -> Option<u8> {
    let s = v.surface(tok);
    if s.len() == 1 {
        let c = s.as_bytes()[0];
        if (b'0'..=b'6').contains(&c) {
            return Some(c - b'0');
        }
    }
    None
}
