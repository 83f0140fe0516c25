//! Minimal window-conditioned MLP policy.
//!
//! A deliberately tiny architecture used where tests need to enumerate
//! every trajectory of a policy or finite-difference every coordinate of
//! its gradient: the next-token distribution depends only on a one-hot
//! encoding of the last `window` tokens, passed through one tanh hidden
//! layer. Positions before the start of the sequence map to a dedicated
//! out-of-range bucket, so no pad token is required.

use ndarray::{Array1, Array2};

use super::transformer::Seg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MlpDims {
    pub vocab: usize,
    pub window: usize,
    pub hidden: usize,
}

impl MlpDims {
    /// One-hot feature width: each window slot has `vocab + 1` buckets
    /// (all tokens plus the out-of-range marker).
    pub fn feat(&self) -> usize {
        self.window * (self.vocab + 1)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MlpSegs {
    pub w1: Seg,
    pub b1: Seg,
    pub w2: Seg,
    pub b2: Seg,
    pub total: usize,
}

impl MlpSegs {
    pub fn new(d: &MlpDims) -> Self {
        let feat = d.feat();
        let w1 = Seg { off: 0, rows: feat, cols: d.hidden };
        let b1 = Seg { off: w1.off + w1.len(), rows: d.hidden, cols: 1 };
        let w2 = Seg { off: b1.off + b1.len(), rows: d.hidden, cols: d.vocab };
        let b2 = Seg { off: w2.off + w2.len(), rows: d.vocab, cols: 1 };
        let total = b2.off + b2.len();
        MlpSegs { w1, b1, w2, b2, total }
    }

    pub fn weight_segs(&self) -> Vec<Seg> {
        vec![self.w1, self.w2]
    }
}

pub(crate) struct MlpCache {
    /// Tanh activations per position.
    act: Array2<f64>,
    /// Active rows of `w1` per position (one per window slot).
    feats: Vec<Vec<usize>>,
}

/// Row indices of `w1` that are active when predicting from position `j`.
fn feature_rows(dims: &MlpDims, ids: &[u32], j: usize) -> Vec<usize> {
    let buckets = dims.vocab + 1;
    (0..dims.window)
        .map(|slot| {
            // Slot `window-1` is the most recent token (position j).
            let rel = (dims.window - 1 - slot) as isize;
            let pos = j as isize - rel;
            let bucket = if pos < 0 { dims.vocab } else { ids[pos as usize] as usize };
            slot * buckets + bucket
        })
        .collect()
}

pub(crate) fn forward(
    params: &[f64],
    dims: &MlpDims,
    segs: &MlpSegs,
    ids: &[u32],
) -> (Array2<f64>, MlpCache) {
    let n = ids.len();
    let h = dims.hidden;
    let v = dims.vocab;
    let w1 = &params[segs.w1.off..segs.w1.off + segs.w1.len()];
    let b1 = &params[segs.b1.off..segs.b1.off + segs.b1.len()];
    let w2 = &params[segs.w2.off..segs.w2.off + segs.w2.len()];
    let b2 = &params[segs.b2.off..segs.b2.off + segs.b2.len()];

    let mut logits = Array2::zeros((n, v));
    let mut act = Array2::zeros((n, h));
    let mut feats = Vec::with_capacity(n);
    for j in 0..n {
        let rows = feature_rows(dims, ids, j);
        let mut z = Array1::from_iter(b1.iter().copied());
        for &r in &rows {
            let row = &w1[r * h..(r + 1) * h];
            for (zc, &wc) in z.iter_mut().zip(row) {
                *zc += wc;
            }
        }
        let a = z.mapv(f64::tanh);
        for c in 0..v {
            let mut acc = b2[c];
            for k in 0..h {
                acc += a[k] * w2[k * v + c];
            }
            logits[[j, c]] = acc;
        }
        act.row_mut(j).assign(&a);
        feats.push(rows);
    }
    (logits, MlpCache { act, feats })
}

pub(crate) fn backward(
    params: &[f64],
    dims: &MlpDims,
    segs: &MlpSegs,
    cache: &MlpCache,
    dlogits: &Array2<f64>,
) -> Vec<f64> {
    let (n, v) = dlogits.dim();
    let h = dims.hidden;
    let w2 = &params[segs.w2.off..segs.w2.off + segs.w2.len()];
    let mut grad = vec![0.0; segs.total];
    for j in 0..n {
        let dl = dlogits.row(j);
        let a = cache.act.row(j);
        // logits = a @ w2 + b2
        for c in 0..v {
            grad[segs.b2.off + c] += dl[c];
        }
        let mut da = vec![0.0; h];
        for k in 0..h {
            let mut acc = 0.0;
            for c in 0..v {
                grad[segs.w2.off + k * v + c] += a[k] * dl[c];
                acc += w2[k * v + c] * dl[c];
            }
            da[k] = acc;
        }
        // a = tanh(z), z = sum of active w1 rows + b1
        for k in 0..h {
            let dz = da[k] * (1.0 - a[k] * a[k]);
            grad[segs.b1.off + k] += dz;
            for &r in &cache.feats[j] {
                grad[segs.w1.off + r * h + k] += dz;
            }
        }
    }
    grad
}
