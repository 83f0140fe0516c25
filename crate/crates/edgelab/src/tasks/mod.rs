//! Task definitions: the shared toy lexicon, the identity task (rare
//! self-name that only the privileged context reveals), the math task
//! (two-step modular arithmetic with an exact verifier), the pretraining
//! corpus and trainer that produce the shared base policy, and the
//! paired evaluation probes run at every checkpoint.

pub mod corpus;
pub mod eval;
pub mod grammar;
pub mod identity;
pub mod math;
pub mod pretrain;

use crate::error::Result;
use crate::vocab::Vocabulary;

/// The complete synthetic setting every run shares: one lexicon and the
/// two task definitions built over it. Construction is deterministic, so
/// two `World`s are always interchangeable.
#[derive(Debug, Clone)]
pub struct World {
    pub vocab: Vocabulary,
    pub identity: identity::IdentityTaskSpec,
    pub math: math::MathTaskSpec,
}

impl World {
    pub fn build() -> Result<World> {
        let vocab = grammar::lexicon()?;
        let identity = identity::identity_task(&vocab);
        let math = math::math_task(&vocab);
        Ok(World { vocab, identity, math })
    }
}
