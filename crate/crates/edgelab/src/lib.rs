//! edgelab — a desk-scale laboratory for privileged-context on-policy
//! self-distillation.
//!
//! The lab trains tiny `f64` language policies on synthetic tasks where a
//! privileged context (an identity paragraph, a worked solution) is
//! available at training time but absent at deployment. It implements and
//! compares a family of update rules that transfer the privileged
//! behavior into the plain-context policy:
//!
//! * on-policy distillation against an explicit teacher (forward KL,
//!   reverse KL, generalized JSD);
//! * self-distillation where the same model, privileged, serves as its
//!   own teacher;
//! * reward-free and verifier-based evidence-shaped variants that clip or
//!   gate the update by how much the privileged context actually moved
//!   each token's probability;
//! * evidence-masked distillation on guided rollouts.
//!
//! Everything is small enough to verify exactly: gradients against finite
//! differences, estimators against closed-form enumeration, and full runs
//! against frozen do-by-hand examples.

pub mod diagnostics;
pub mod error;
pub mod evidence;
pub mod gradcheck;
pub mod jsonl;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod run;
pub mod sampler;
pub mod tasks;
pub mod vocab;

pub use error::{Error, Result};
