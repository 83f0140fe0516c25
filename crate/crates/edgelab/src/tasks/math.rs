//! The toy math task: two-step modular arithmetic with worked traces.
//!
//! A problem is `a op1 b op2 c` evaluated left to right, everything mod
//! 7. The canonical response walks through both steps and ends with the
//! answer between boxed-answer delimiters, so the verifier is exact: it
//! reads the last boxed span and compares residues. The privileged
//! context for a problem is its full worked trace — genuinely
//! answer-bearing, which is the leakage regime the math axis probes.

use serde::{Deserialize, Serialize};

use super::grammar::{digit, digit_value, phrase, t};
use crate::rng::derive_rng;
use crate::vocab::{TokenId, TokenSeq, Vocabulary};
use rand::Rng;

/// Residue modulus. Small enough that the verifier can be checked
/// exhaustively over every possible answer.
pub const MODULUS: u8 = 7;

/// Fraction of problems (roughly) withheld from the pretraining corpus
/// and the training prompt set.
const HELD_OUT_RATE: f64 = 0.125;

/// Seed of the train/held-out split. Fixed: the split is part of the
/// task definition, not of any particular run.
const SPLIT_SEED: u64 = 0x6d61_7468;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MathOp {
    Plus,
    Times,
}

impl MathOp {
    pub fn apply(&self, a: u8, b: u8) -> u8 {
        match self {
            MathOp::Plus => (a + b) % MODULUS,
            MathOp::Times => (a * b) % MODULUS,
        }
    }

    pub fn token(&self, v: &Vocabulary) -> TokenId {
        match self {
            MathOp::Plus => t(v, "plus"),
            MathOp::Times => t(v, "times"),
        }
    }
}

/// One two-step problem plus the surface template it is rendered with.
/// Problem identity for the train/held-out split is the operand/operator
/// tuple only; templates are surface variation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MathProblem {
    pub a: u8,
    pub op1: MathOp,
    pub b: u8,
    pub op2: MathOp,
    pub c: u8,
    pub template: u8,
}

pub const TEMPLATES: usize = 3;

impl MathProblem {
    pub fn intermediate(&self) -> u8 {
        self.op1.apply(self.a, self.b)
    }

    pub fn answer(&self) -> u8 {
        self.op2.apply(self.intermediate(), self.c)
    }

    /// The bare expression `a op1 b op2 c`.
    fn expression(&self, v: &Vocabulary) -> TokenSeq {
        vec![
            digit(v, self.a),
            self.op1.token(v),
            digit(v, self.b),
            self.op2.token(v),
            digit(v, self.c),
        ]
    }

    /// The question, rendered by this problem's template.
    pub fn prompt(&self, v: &Vocabulary) -> TokenSeq {
        let expr = self.expression(v);
        let mut out = TokenSeq::new();
        match self.template % TEMPLATES as u8 {
            0 => {
                out.extend_from_slice(&phrase(v, "what is"));
                out.extend_from_slice(&expr);
                out.push(t(v, "?"));
            }
            1 => {
                out.push(t(v, "compute"));
                out.extend_from_slice(&expr);
                out.push(t(v, "."));
            }
            _ => {
                out.extend_from_slice(&expr);
                out.extend_from_slice(&phrase(v, "is what ?"));
            }
        }
        out
    }

    /// The canonical worked solution: both steps, then the boxed answer.
    /// This is also the privileged context for the problem.
    pub fn trace(&self, v: &Vocabulary) -> TokenSeq {
        let r1 = self.intermediate();
        let ans = self.answer();
        let mut out = vec![
            digit(v, self.a),
            self.op1.token(v),
            digit(v, self.b),
            t(v, "is"),
            digit(v, r1),
            t(v, "."),
            digit(v, r1),
            self.op2.token(v),
            digit(v, self.c),
            t(v, "is"),
            digit(v, ans),
            t(v, "."),
        ];
        out.extend_from_slice(&[t(v, "box"), digit(v, ans), t(v, "endbox")]);
        out
    }
}

/// Math-axis task definition with a fixed train/held-out split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MathTaskSpec {
    pub train: Vec<MathProblem>,
    pub held_out: Vec<MathProblem>,
    pub box_open: TokenId,
    pub box_close: TokenId,
    /// Response token budget for math prompts (a full trace plus the end
    /// token fits).
    pub max_response_tokens: usize,
}

/// Verifier output for one response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MathScore {
    /// 1.0 iff the last boxed span is exactly the ground-truth residue.
    pub reward: f64,
    /// No well-formed boxed residue was found.
    pub parse_failure: bool,
}

/// Enumerate the full problem space and split it deterministically.
/// Templates cycle over the enumeration so each split sees all surface
/// forms.
pub fn math_task(v: &Vocabulary) -> MathTaskSpec {
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    let ops = [MathOp::Plus, MathOp::Times];
    let mut index = 0u64;
    for a in 0..MODULUS {
        for b in 0..MODULUS {
            for c in 0..MODULUS {
                for op1 in ops {
                    for op2 in ops {
                        let template = (index % TEMPLATES as u64) as u8;
                        let p = MathProblem { a, op1, b, op2, c, template };
                        let mut rng = derive_rng(SPLIT_SEED, &[index]);
                        if rng.gen::<f64>() < HELD_OUT_RATE {
                            held_out.push(p);
                        } else {
                            train.push(p);
                        }
                        index += 1;
                    }
                }
            }
        }
    }
    MathTaskSpec {
        train,
        held_out,
        box_open: t(v, "box"),
        box_close: t(v, "endbox"),
        max_response_tokens: 18,
    }
}

/// Extract the last boxed span and compare it to the ground truth.
/// Absence or malformation is a parse failure (reward 0); a well-formed
/// wrong residue is a plain 0.
pub fn verify_math(response: &[TokenId], v: &Vocabulary, problem: &MathProblem) -> MathScore {
    let open = t(v, "box");
    let close = t(v, "endbox");
    let fail = MathScore { reward: 0.0, parse_failure: true };
    let Some(oi) = response.iter().rposition(|&x| x == open) else {
        return fail;
    };
    let rest = &response[oi + 1..];
    let Some(ci) = rest.iter().position(|&x| x == close) else {
        return fail;
    };
    let span = &rest[..ci];
    if span.len() != 1 {
        return fail;
    }
    let Some(value) = digit_value(v, span[0]) else {
        return fail;
    };
    MathScore {
        reward: if value == problem.answer() { 1.0 } else { 0.0 },
        parse_failure: false,
    }
}

#[cfg(test)]
mod tests {
    use super::super::grammar::lexicon;
    use super::*;

    fn setup() -> (Vocabulary, MathTaskSpec) {
        let v = lexicon().unwrap();
        let spec = math_task(&v);
        (v, spec)
    }

    #[test]
    fn evaluation_is_left_to_right_mod_seven() {
        let p = MathProblem {
            a: 3,
            op1: MathOp::Plus,
            b: 5,
            op2: MathOp::Times,
            c: 2,
            template: 0,
        };
        assert_eq!(p.intermediate(), 1); // 3 + 5 = 8 = 1 (mod 7)
        assert_eq!(p.answer(), 2); // 1 * 2 = 2
    }

    #[test]
    fn split_is_disjoint_and_covers_the_space() {
        let (_, spec) = setup();
        let total = spec.train.len() + spec.held_out.len();
        assert_eq!(total, 7 * 7 * 7 * 2 * 2);
        assert!(spec.held_out.len() > 80, "held-out too small: {}", spec.held_out.len());
        let key = |p: &MathProblem| (p.a, p.op1, p.b, p.op2, p.c);
        let train: std::collections::HashSet<_> = spec.train.iter().map(key).collect();
        for p in &spec.held_out {
            assert!(!train.contains(&key(p)), "held-out problem also trains: {p:?}");
        }
        // The split is deterministic.
        let v = lexicon().unwrap();
        let again = math_task(&v);
        assert_eq!(spec, again);
    }

    #[test]
    fn trace_contains_the_extractable_answer_for_every_training_problem() {
        let (v, spec) = setup();
        for p in &spec.train {
            let trace = p.trace(&v);
            let score = verify_math(&trace, &v, p);
            assert_eq!(score.reward, 1.0, "trace of {p:?} fails its own verifier");
            assert!(!score.parse_failure);
            assert!(trace.len() + 1 <= spec.max_response_tokens);
        }
    }

    #[test]
    fn verifier_accepts_truth_and_rejects_every_other_residue() {
        let (v, spec) = setup();
        let p = spec.train[0];
        for residue in 0..MODULUS {
            let resp = vec![spec.box_open, digit(&v, residue), spec.box_close];
            let score = verify_math(&resp, &v, &p);
            assert!(!score.parse_failure);
            assert_eq!(score.reward, if residue == p.answer() { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn verifier_reads_the_last_box_and_flags_malformed_spans() {
        let (v, _) = setup();
        let p = MathProblem {
            a: 1,
            op1: MathOp::Plus,
            b: 1,
            op2: MathOp::Plus,
            c: 0,
            template: 0,
        };
        let open = t(&v, "box");
        let close = t(&v, "endbox");
        let two = digit(&v, 2);
        let three = digit(&v, 3);

        // Last box wins.
        let resp = vec![open, three, close, open, two, close];
        assert_eq!(verify_math(&resp, &v, &p).reward, 1.0);

        // No box at all.
        let score = verify_math(&[two], &v, &p);
        assert!(score.parse_failure && score.reward == 0.0);
        // Open without close.
        let score = verify_math(&[open, two], &v, &p);
        assert!(score.parse_failure);
        // Multi-token span.
        let score = verify_math(&[open, two, two, close], &v, &p);
        assert!(score.parse_failure);
        // Empty span.
        let score = verify_math(&[open, close], &v, &p);
        assert!(score.parse_failure);
        // Non-digit span.
        let score = verify_math(&[open, t(&v, "plus"), close], &v, &p);
        assert!(score.parse_failure);
        // Empty response.
        let score = verify_math(&[], &v, &p);
        assert!(score.parse_failure);
    }

    #[test]
    fn templates_render_distinct_prompts_for_the_same_problem() {
        let (v, _) = setup();
        let mk = |template| MathProblem {
            a: 4,
            op1: MathOp::Times,
            b: 6,
            op2: MathOp::Plus,
            c: 5,
            template,
        };
        let p0 = mk(0).prompt(&v);
        let p1 = mk(1).prompt(&v);
        let p2 = mk(2).prompt(&v);
        assert_ne!(p0, p1);
        assert_ne!(p1, p2);
        assert_eq!(v.detokenize(&p0), "what is 4 times 6 plus 5 ?");
        assert_eq!(v.detokenize(&p1), "compute 4 times 6 plus 5 .");
        assert_eq!(v.detokenize(&p2), "4 times 6 plus 5 is what ?");
        // Same answer regardless of surface form.
        assert_eq!(mk(0).answer(), mk(2).answer());
    }
}
