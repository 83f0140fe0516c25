//! Token vocabulary with reserved special tokens and identity spans.
//!
//! The whole lab runs on a small closed vocabulary. Tokens are plain `u32`
//! ids; a [`Vocabulary`] carries the reserved specials (BOS/EOS/PAD/SEP),
//! optional human-readable surface forms, and the identity spans that the
//! scoring code needs (the target self-name and the counter-identity names
//! the base model is pretrained to produce).

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};

/// Token identifier. The vocabulary is dense: valid ids are `0..size`.
pub type TokenId = u32;

/// A token sequence. Thin alias — sequences are passed around constantly
/// and a newtype would add friction without catching real bugs here.
pub type TokenSeq = Vec<TokenId>;

/// Closed token vocabulary with reserved specials and identity spans.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    bos: TokenId,
    eos: TokenId,
    pad: TokenId,
    sep: TokenId,
    /// Contiguous token span that counts as the target identity.
    target_span: TokenSeq,
    /// Spans that count as competing identities.
    counter_spans: Vec<TokenSeq>,
    /// Surface form per token id, used only for rendering transcripts.
    surfaces: Vec<String>,
}

impl Vocabulary {
    /// Build a vocabulary and validate its invariants: specials are
    /// distinct in-range ids, spans are non-empty and in-range, and the
    /// target span shares no token with any counter span.
    pub fn new(
        surfaces: Vec<String>,
        bos: TokenId,
        eos: TokenId,
        pad: TokenId,
        sep: TokenId,
        target_span: TokenSeq,
        counter_spans: Vec<TokenSeq>,
    ) -> Result<Self> {
        let size = surfaces.len();
        let specials = [bos, eos, pad, sep];
        for &s in &specials {
            if s as usize >= size {
                return domain_err(format!("special token {s} out of range for vocab {size}"));
            }
        }
        for i in 0..specials.len() {
            for j in (i + 1)..specials.len() {
                if specials[i] == specials[j] {
                    return domain_err("special tokens must be distinct");
                }
            }
        }
        if target_span.is_empty() {
            return domain_err("target span must be non-empty");
        }
        for &t in target_span.iter().chain(counter_spans.iter().flatten()) {
            if t as usize >= size {
                return domain_err(format!("span token {t} out of range for vocab {size}"));
            }
        }
        for span in &counter_spans {
            if span.is_empty() {
                return domain_err("counter span must be non-empty");
            }
            if span.iter().any(|t| target_span.contains(t)) {
                return domain_err("counter span overlaps the target span");
            }
        }
        Ok(Self { size, bos, eos, pad, sep, target_span, counter_spans, surfaces })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn sep(&self) -> TokenId {
        self.sep
    }

    pub fn target_span(&self) -> &[TokenId] {
        &self.target_span
    }

    pub fn counter_spans(&self) -> &[TokenSeq] {
        &self.counter_spans
    }

    /// Surface form of one token.
    pub fn surface(&self, t: TokenId) -> &str {
        &self.surfaces[t as usize]
    }

    /// Id of the token with the given surface form, if any.
    pub fn lookup(&self, surface: &str) -> Option<TokenId> {
        self.surfaces.iter().position(|s| s == surface).map(|i| i as TokenId)
    }

    /// Render a token sequence as space-separated surface forms.
    pub fn detokenize(&self, seq: &[TokenId]) -> String {
        seq.iter()
            .map(|&t| self.surfaces.get(t as usize).map(String::as_str).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Validate that every id in `seq` is in range.
    pub fn check_seq(&self, seq: &[TokenId]) -> Result<()> {
        match seq.iter().find(|&&t| t as usize >= self.size) {
            Some(&t) => Err(Error::Domain(format!(
                "token id {t} out of range for vocabulary of size {}",
                self.size
            ))),
            None => Ok(()),
        }
    }
}

/// True if `needle` occurs as a contiguous subsequence of `hay`.
pub fn contains_span(hay: &[TokenId], needle: &[TokenId]) -> bool {
    if needle.is_empty() || needle.len() > hay.len() {
        return false;
    }
    hay.windows(needle.len()).any(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vocabulary {
        Vocabulary::new(
            (0..10).map(|i| format!("w{i}")).collect(),
            0,
            1,
            2,
            3,
            vec![4, 5],
            vec![vec![6], vec![7, 8]],
        )
        .unwrap()
    }

    #[test]
    fn constructor_validates_invariants() {
        // special out of range
        assert!(Vocabulary::new(vec!["a".into()], 0, 1, 2, 3, vec![0], vec![]).is_err());
        // duplicate specials
        let surf: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        assert!(Vocabulary::new(surf.clone(), 0, 0, 2, 3, vec![4], vec![]).is_err());
        // counter span overlapping target span
        assert!(
            Vocabulary::new(surf.clone(), 0, 1, 2, 3, vec![4, 5], vec![vec![5]]).is_err()
        );
        // empty target span
        assert!(Vocabulary::new(surf, 0, 1, 2, 3, vec![], vec![]).is_err());
        // valid construction
        let v = toy();
        assert_eq!(v.size(), 10);
        assert_eq!(v.target_span(), &[4, 5]);
    }

    #[test]
    fn span_containment() {
        assert!(contains_span(&[1, 4, 5, 2], &[4, 5]));
        assert!(!contains_span(&[1, 4, 2, 5], &[4, 5]));
        assert!(!contains_span(&[4], &[4, 5]));
        assert!(!contains_span(&[1, 2], &[]));
    }

    #[test]
    fn detokenize_and_lookup_roundtrip() {
        let v = toy();
        assert_eq!(v.detokenize(&[4, 5]), "w4 w5");
        assert_eq!(v.lookup("w7"), Some(7));
        assert_eq!(v.lookup("missing"), None);
        assert!(v.check_seq(&[0, 9]).is_ok());
        assert!(v.check_seq(&[10]).is_err());
    }
}
