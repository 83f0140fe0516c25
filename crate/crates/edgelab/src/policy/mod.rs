//! Policy parameterizations and their differentiable log-probability ops.
//!
//! Two architectures implement the same flat-parameter contract:
//!
//! * [`ArchSpec::Transformer`] — the workhorse: a small causal
//!   self-attention network (defaults: width 64, 2 heads, 2 layers,
//!   context 128) with hand-written reverse-mode gradients.
//! * [`ArchSpec::WindowMlp`] — a window-conditioned MLP small enough that
//!   tests can enumerate every trajectory and finite-difference every
//!   parameter coordinate.
//!
//! A policy conditions on `[BOS] ++ conditioning ++ response-so-far`,
//! where the conditioning is built by [`conditioning_ids`] from a prompt
//! plus an optional privileged-context attachment. Attaching an empty
//! privileged sequence is exactly a no-op, so "no attachment" and
//! "attachment with nothing in it" produce identical inputs.

mod checkpoint;
mod transformer;
mod window_mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::rng::{derive_rng, stream};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

use transformer::{TfDims, TfSegs};
use window_mlp::{MlpDims, MlpSegs};

/// Standard deviation of the scaled-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

// ---------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------

/// Architecture descriptor. Everything needed to size and interpret a
/// flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    Transformer {
        vocab: usize,
        width: usize,
        heads: usize,
        depth: usize,
        context: usize,
        hidden_mult: usize,
    },
    WindowMlp {
        vocab: usize,
        window: usize,
        hidden: usize,
    },
}

impl ArchSpec {
    /// Default transformer shape for a given vocabulary.
    pub fn transformer(vocab: usize) -> Self {
        ArchSpec::Transformer { vocab, width: 64, heads: 2, depth: 2, context: 128, hidden_mult: 4 }
    }

    pub fn window_mlp(vocab: usize, window: usize, hidden: usize) -> Self {
        ArchSpec::WindowMlp { vocab, window, hidden }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ArchSpec::Transformer { vocab, width, heads, depth, context, hidden_mult } => {
                if vocab == 0 || width == 0 || heads == 0 || depth == 0 || context == 0 || hidden_mult == 0 {
                    return domain_err("transformer dimensions must be positive");
                }
                if width % heads != 0 {
                    return domain_err(format!("width {width} not divisible by heads {heads}"));
                }
                Ok(())
            }
            ArchSpec::WindowMlp { vocab, window, hidden } => {
                if vocab == 0 || window == 0 || hidden == 0 {
                    return domain_err("window-mlp dimensions must be positive");
                }
                Ok(())
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        match *self {
            ArchSpec::Transformer { vocab, .. } => vocab,
            ArchSpec::WindowMlp { vocab, .. } => vocab,
        }
    }

    /// Maximum sequence length the architecture can consume, if bounded.
    pub fn context_limit(&self) -> Option<usize> {
        match *self {
            ArchSpec::Transformer { context, .. } => Some(context),
            ArchSpec::WindowMlp { .. } => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match layout(self) {
            Layout::Tf(_, segs) => segs.total,
            Layout::Mlp(_, segs) => segs.total,
        }
    }
}

enum Layout {
    Tf(TfDims, TfSegs),
    Mlp(MlpDims, MlpSegs),
}

fn layout(arch: &ArchSpec) -> Layout {
    match *arch {
        ArchSpec::Transformer { vocab, width, heads, depth, context, hidden_mult } => {
            let dims = TfDims { vocab, width, heads, depth, context, hidden_mult };
            let segs = TfSegs::new(&dims);
            Layout::Tf(dims, segs)
        }
        ArchSpec::WindowMlp { vocab, window, hidden } => {
            let dims = MlpDims { vocab, window, hidden };
            let segs = MlpSegs::new(&dims);
            Layout::Mlp(dims, segs)
        }
    }
}

// ---------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------

/// Flat `f64` parameter vector plus the architecture that interprets it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: ArchSpec,
    data: Vec<f64>,
}

impl PolicyParams {
    /// Seeded initialization: weight matrices and embeddings drawn from
    /// N(0, [`INIT_STD`]^2), layer-norm gains one, all biases zero.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = derive_rng(seed, &[stream::INIT]);
        let normal = rand_distr::Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut draw = move || -> f64 { rng.sample(normal) };
        let (total, weight_segs, gain_segs) = match layout(arch) {
            Layout::Tf(_, segs) => (segs.total, segs.weight_segs(), segs.gain_segs()),
            Layout::Mlp(_, segs) => (segs.total, segs.weight_segs(), Vec::new()),
        };
        let mut data = vec![0.0; total];
        for seg in weight_segs {
            for w in &mut data[seg.off..seg.off + seg.len()] {
                *w = draw();
            }
        }
        for seg in gain_segs {
            for g in &mut data[seg.off..seg.off + seg.len()] {
                *g = 1.0;
            }
        }
        Ok(PolicyParams { arch: arch.clone(), data })
    }

    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        Ok(PolicyParams { arch: arch.clone(), data: vec![0.0; arch.param_count()] })
    }

    pub fn from_data(arch: &ArchSpec, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if data.len() != arch.param_count() {
            return domain_err(format!(
                "parameter vector has {} entries, architecture needs {}",
                data.len(),
                arch.param_count()
            ));
        }
        Ok(PolicyParams { arch: arch.clone(), data })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

// ---------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------

enum CacheKind {
    Tf(transformer::TfCache),
    Mlp(window_mlp::MlpCache),
}

/// Result of one forward pass: per-position logits plus the activations
/// needed to run the matching backward pass.
pub struct ForwardPass {
    ids: TokenSeq,
    logits: Array2<f64>,
    cache: CacheKind,
}

impl ForwardPass {
    /// Logits, one row per input position; row `j` scores position `j+1`.
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    /// Log-softmax of the logits at `pos`.
    pub fn log_dist(&self, pos: usize) -> Array1<f64> {
        log_softmax(self.logits.row(pos))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_ids(arch: &ArchSpec, ids: &[TokenId]) -> Result<()> {
    if ids.is_empty() {
        return domain_err("forward pass needs at least one token");
    }
    if let Some(limit) = arch.context_limit() {
        if ids.len() > limit {
            return domain_err(format!("sequence length {} exceeds context limit {limit}", ids.len()));
        }
    }
    let v = arch.vocab_size();
    if let Some(&t) = ids.iter().find(|&&t| t as usize >= v) {
        return domain_err(format!("token id {t} out of range for vocab {v}"));
    }
    Ok(())
}

/// Run the policy over `ids` and retain activations for [`backward`].
pub fn forward(params: &PolicyParams, ids: &[TokenId]) -> Result<ForwardPass> {
    check_ids(&params.arch, ids)?;
    let (logits, cache) = match layout(&params.arch) {
        Layout::Tf(dims, segs) => {
            let (logits, cache) = transformer::forward(&params.data, &dims, &segs, ids);
            (logits, CacheKind::Tf(cache))
        }
        Layout::Mlp(dims, segs) => {
            let (logits, cache) = window_mlp::forward(&params.data, &dims, &segs, ids);
            (logits, CacheKind::Mlp(cache))
        }
    };
    Ok(ForwardPass { ids: ids.to_vec(), logits, cache })
}

/// Gradient of `sum(dlogits .* logits)` with respect to the flat
/// parameter vector.
pub fn backward(params: &PolicyParams, pass: &ForwardPass, dlogits: &Array2<f64>) -> Result<Vec<f64>> {
    if dlogits.dim() != pass.logits.dim() {
        return domain_err(format!(
            "dlogits shape {:?} does not match logits shape {:?}",
            dlogits.dim(),
            pass.logits.dim()
        ));
    }
    Ok(match (layout(&params.arch), &pass.cache) {
        (Layout::Tf(dims, segs), CacheKind::Tf(cache)) => {
            transformer::backward(&params.data, &dims, &segs, &pass.ids, cache, dlogits)
        }
        (Layout::Mlp(dims, segs), CacheKind::Mlp(cache)) => {
            window_mlp::backward(&params.data, &dims, &segs, cache, dlogits)
        }
        _ => return domain_err("forward pass does not belong to this architecture"),
    })
}

/// Numerically stable log-softmax of one logits row.
pub fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + z.ln();
    row.mapv(|x| x - lse)
}

/// Softmax of one logits row.
pub fn softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = row.mapv(|x| (x - max).exp());
    let z = p.sum();
    p.mapv_inplace(|x| x / z);
    p
}

// ---------------------------------------------------------------------
// Conditioning / privileged-context attachment
// ---------------------------------------------------------------------

/// Where privileged context is spliced into the conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttachMode {
    /// No privileged context.
    None,
    /// Privileged context before the prompt, like a system message.
    System,
    /// Privileged context spliced in right after the first prompt token,
    /// like a prefix inside the user turn.
    UserPrefix,
}

impl std::fmt::Display for AttachMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttachMode::None => "none",
            AttachMode::System => "system",
            AttachMode::UserPrefix => "user-prefix",
        };
        f.write_str(s)
    }
}

/// Privileged context plus its placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextAttachment {
    pub mode: AttachMode,
    pub privileged: TokenSeq,
}

impl ContextAttachment {
    /// The plain, unprivileged conditioning.
    pub fn none() -> Self {
        ContextAttachment { mode: AttachMode::None, privileged: Vec::new() }
    }

    pub fn new(mode: AttachMode, privileged: TokenSeq) -> Self {
        ContextAttachment { mode, privileged }
    }

    /// True when this attachment changes nothing about the conditioning.
    pub fn is_plain(&self) -> bool {
        self.mode == AttachMode::None || self.privileged.is_empty()
    }
}

/// Build the token sequence a policy conditions on before the response:
/// BOS, the prompt, and — depending on the mode — the privileged context
/// with a separator. An empty privileged sequence is a strict no-op in
/// every mode.
pub fn conditioning_ids(
    vocab: &Vocabulary,
    prompt: &[TokenId],
    attach: &ContextAttachment,
) -> Result<TokenSeq> {
    vocab.check_seq(prompt)?;
    vocab.check_seq(&attach.privileged)?;
    let mut out = Vec::with_capacity(2 + prompt.len() + attach.privileged.len() + 1);
    out.push(vocab.bos());
    if attach.is_plain() {
        out.extend_from_slice(prompt);
        return Ok(out);
    }
    match attach.mode {
        AttachMode::None => unreachable!("is_plain covers this"),
        AttachMode::System => {
            out.extend_from_slice(&attach.privileged);
            out.push(vocab.sep());
            out.extend_from_slice(prompt);
        }
        AttachMode::UserPrefix => {
            let Some((&first, rest)) = prompt.split_first() else {
                return Err(Error::Domain(
                    "user-prefix attachment requires a non-empty prompt".into(),
                ));
            };
            out.push(first);
            out.extend_from_slice(&attach.privileged);
            out.push(vocab.sep());
            out.extend_from_slice(rest);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// High-level log-probability operations
// ---------------------------------------------------------------------

/// Full next-token log-distribution after consuming `ctx`.
pub fn log_prob_next(params: &PolicyParams, ctx: &[TokenId]) -> Result<Array1<f64>> {
    let pass = forward(params, ctx)?;
    Ok(pass.log_dist(ctx.len() - 1))
}

fn full_ids_for(
    vocab: &Vocabulary,
    prompt: &[TokenId],
    attach: &ContextAttachment,
    response: &[TokenId],
) -> Result<(TokenSeq, usize)> {
    vocab.check_seq(response)?;
    let cond = conditioning_ids(vocab, prompt, attach)?;
    let cond_len = cond.len();
    let mut full = cond;
    full.extend_from_slice(response);
    Ok((full, cond_len))
}

/// Per-token log-probabilities of `response` under the policy,
/// conditioned on the prompt plus attachment.
pub fn log_prob_sequence(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompt: &[TokenId],
    attach: &ContextAttachment,
    response: &[TokenId],
) -> Result<Vec<f64>> {
    if response.is_empty() {
        // Still validate the conditioning so errors do not depend on
        // whether the response happens to be empty.
        full_ids_for(vocab, prompt, attach, response)?;
        return Ok(Vec::new());
    }
    let (full, cond_len) = full_ids_for(vocab, prompt, attach, response)?;
    let pass = forward(params, &full)?;
    let out = response
        .iter()
        .enumerate()
        .map(|(t, &y)| pass.log_dist(cond_len - 1 + t)[y as usize])
        .collect();
    Ok(out)
}

/// Full next-token log-distributions at every response slot: row `t` is
/// the log-softmax the policy assigns before emitting `response[t]`.
pub fn response_log_dists(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompt: &[TokenId],
    attach: &ContextAttachment,
    response: &[TokenId],
) -> Result<Array2<f64>> {
    let (full, cond_len) = full_ids_for(vocab, prompt, attach, response)?;
    if response.is_empty() {
        return Ok(Array2::zeros((0, vocab.size())));
    }
    let pass = forward(params, &full)?;
    let mut out = Array2::zeros((response.len(), params.arch.vocab_size()));
    for t in 0..response.len() {
        out.row_mut(t).assign(&pass.log_dist(cond_len - 1 + t));
    }
    Ok(out)
}

/// Gradient of `sum_t weights[t] * log pi(response[t] | ...)` with
/// respect to the flat parameter vector.
pub fn grad_weighted_logprob(
    params: &PolicyParams,
    vocab: &Vocabulary,
    prompt: &[TokenId],
    attach: &ContextAttachment,
    response: &[TokenId],
    weights: &[f64],
) -> Result<Vec<f64>> {
    if weights.len() != response.len() {
        return domain_err(format!(
            "got {} weights for {} response tokens",
            weights.len(),
            response.len()
        ));
    }
    if response.is_empty() {
        return Ok(vec![0.0; params.arch.param_count()]);
    }
    let (full, cond_len) = full_ids_for(vocab, prompt, attach, response)?;
    let pass = forward(params, &full)?;
    let mut dlogits = Array2::zeros(pass.logits.dim());
    for (t, (&y, &w)) in response.iter().zip(weights).enumerate() {
        let row = cond_len - 1 + t;
        let p = softmax(pass.logits.row(row));
        let mut dst = dlogits.row_mut(row);
        for (d, &pv) in dst.iter_mut().zip(p.iter()) {
            *d = -w * pv;
        }
        dst[y as usize] += w;
    }
    backward(params, &pass, &dlogits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::new(
            (0..9).map(|i| format!("t{i}")).collect(),
            0,
            1,
            2,
            3,
            vec![4],
            vec![vec![5]],
        )
        .unwrap()
    }

    fn tiny_tf() -> ArchSpec {
        ArchSpec::Transformer { vocab: 9, width: 8, heads: 2, depth: 2, context: 16, hidden_mult: 2 }
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let arch = tiny_tf();
        let a = PolicyParams::init(&arch, 11).unwrap();
        let b = PolicyParams::init(&arch, 11).unwrap();
        let c = PolicyParams::init(&arch, 12).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn init_statistics_match_the_scaled_normal() {
        let arch = ArchSpec::Transformer { vocab: 40, width: 32, heads: 2, depth: 2, context: 32, hidden_mult: 4 };
        let p = PolicyParams::init(&arch, 5).unwrap();
        let weights: Vec<f64> = p.data().iter().copied().filter(|&w| w != 0.0 && w != 1.0).collect();
        assert!(weights.len() > 10_000);
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / weights.len() as f64;
        assert!(mean.abs() < 2e-3, "mean {mean}");
        assert!((var.sqrt() - INIT_STD).abs() < 2e-3, "std {}", var.sqrt());
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let arch = tiny_tf();
        let p = PolicyParams::init(&arch, 1).unwrap();
        let ids = [0u32, 4, 5, 6];
        let a = forward(&p, &ids).unwrap();
        let b = forward(&p, &ids).unwrap();
        assert_eq!(a.logits(), b.logits());
        assert_eq!(a.logits().dim(), (4, 9));
        // Log-softmax rows normalize.
        for t in 0..4 {
            let ld = a.log_dist(t);
            let mass: f64 = ld.iter().map(|&x| x.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causality_prefix_logits_are_stable_under_extension() {
        let arch = tiny_tf();
        let p = PolicyParams::init(&arch, 2).unwrap();
        let short = forward(&p, &[0u32, 4, 5]).unwrap();
        let long = forward(&p, &[0u32, 4, 5, 6, 7]).unwrap();
        for t in 0..3 {
            for v in 0..9 {
                let a = short.logits()[[t, v]];
                let b = long.logits()[[t, v]];
                assert!((a - b).abs() < 1e-9, "position {t} vocab {v}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let arch = tiny_tf();
        let p = PolicyParams::init(&arch, 1).unwrap();
        assert!(matches!(forward(&p, &[]), Err(Error::Domain(_))));
        assert!(matches!(forward(&p, &[42]), Err(Error::Domain(_))));
        let too_long: Vec<u32> = vec![0; 17];
        assert!(matches!(forward(&p, &too_long), Err(Error::Domain(_))));
    }

    #[test]
    fn conditioning_layouts() {
        let v = tiny_vocab();
        let prompt = vec![6, 7];
        let privileged = vec![4, 5];
        let none = conditioning_ids(&v, &prompt, &ContextAttachment::none()).unwrap();
        assert_eq!(none, vec![0, 6, 7]);
        let sys = conditioning_ids(
            &v,
            &prompt,
            &ContextAttachment::new(AttachMode::System, privileged.clone()),
        )
        .unwrap();
        assert_eq!(sys, vec![0, 4, 5, 3, 6, 7]);
        let up = conditioning_ids(
            &v,
            &prompt,
            &ContextAttachment::new(AttachMode::UserPrefix, privileged.clone()),
        )
        .unwrap();
        assert_eq!(up, vec![0, 6, 4, 5, 3, 7]);
    }

    #[test]
    fn empty_privileged_context_is_a_strict_noop() {
        let v = tiny_vocab();
        let prompt = vec![6, 7];
        let plain = conditioning_ids(&v, &prompt, &ContextAttachment::none()).unwrap();
        for mode in [AttachMode::System, AttachMode::UserPrefix] {
            let got =
                conditioning_ids(&v, &prompt, &ContextAttachment::new(mode, vec![])).unwrap();
            assert_eq!(got, plain, "mode {mode}");
        }
    }

    #[test]
    fn user_prefix_needs_a_prompt_token() {
        let v = tiny_vocab();
        let att = ContextAttachment::new(AttachMode::UserPrefix, vec![4]);
        assert!(matches!(conditioning_ids(&v, &[], &att), Err(Error::Domain(_))));
    }

    #[test]
    fn log_prob_sequence_matches_stepwise_next_token_scores() {
        let v = tiny_vocab();
        let arch = tiny_tf();
        let p = PolicyParams::init(&arch, 3).unwrap();
        let prompt = vec![6, 7];
        let attach = ContextAttachment::new(AttachMode::System, vec![4, 5]);
        let response = vec![8, 5, 1];
        let scored = log_prob_sequence(&p, &v, &prompt, &attach, &response).unwrap();
        let mut ctx = conditioning_ids(&v, &prompt, &attach).unwrap();
        for (t, &y) in response.iter().enumerate() {
            let dist = log_prob_next(&p, &ctx).unwrap();
            assert!(
                (dist[y as usize] - scored[t]).abs() < 1e-9,
                "token {t}: {} vs {}",
                dist[y as usize],
                scored[t]
            );
            ctx.push(y);
        }
        assert!(log_prob_sequence(&p, &v, &prompt, &attach, &[]).unwrap().is_empty());
    }

    #[test]
    fn response_log_dists_agree_with_sequence_scores() {
        let v = tiny_vocab();
        let p = PolicyParams::init(&tiny_tf(), 4).unwrap();
        let prompt = vec![6];
        let attach = ContextAttachment::none();
        let response = vec![8, 5];
        let dists = response_log_dists(&p, &v, &prompt, &attach, &response).unwrap();
        let seq = log_prob_sequence(&p, &v, &prompt, &attach, &response).unwrap();
        for (t, &y) in response.iter().enumerate() {
            assert!((dists[[t, y as usize]] - seq[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_logprob_gradient_matches_finite_differences() {
        let v = tiny_vocab();
        let arch = ArchSpec::window_mlp(9, 3, 6);
        let p = PolicyParams::init(&arch, 7).unwrap();
        let prompt = vec![6, 7];
        let attach = ContextAttachment::new(AttachMode::System, vec![4]);
        let response = vec![8, 5];
        let weights = vec![1.0, -0.5];
        let grad = grad_weighted_logprob(&p, &v, &prompt, &attach, &response, &weights).unwrap();
        let f = |data: &[f64]| {
            let q = PolicyParams::from_data(&arch, data.to_vec()).unwrap();
            log_prob_sequence(&q, &v, &prompt, &attach, &response)
                .unwrap()
                .iter()
                .zip(&weights)
                .map(|(lp, w)| lp * w)
                .sum::<f64>()
        };
        let mut data = p.data().to_vec();
        let h = 1e-5;
        for i in 0..data.len() {
            let x0 = data[i];
            data[i] = x0 + h;
            let fp = f(&data);
            data[i] = x0 - h;
            let fm = f(&data);
            data[i] = x0;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-5,
                "coord {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn weight_mismatch_is_rejected() {
        let v = tiny_vocab();
        let p = PolicyParams::init(&tiny_tf(), 1).unwrap();
        let err = grad_weighted_logprob(&p, &v, &[6], &ContextAttachment::none(), &[8, 5], &[1.0]);
        assert!(matches!(err, Err(Error::Domain(_))));
    }
}
