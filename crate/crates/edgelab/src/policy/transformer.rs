//! Causal self-attention policy network with hand-written reverse-mode
//! gradients.
//!
//! The network is a small GPT-style decoder: token + learned positional
//! embeddings, `depth` pre-norm blocks of multi-head causal attention and a
//! GELU MLP, a final layer norm, and logits through the transposed token
//! embedding (tied weights, so producing a token and recognizing it share
//! one vector per vocabulary entry). All
//! math is `f64` and the backward pass is written out by hand so that the
//! gradients can be validated against finite differences to tight
//! tolerances.
//!
//! Parameters live in one flat `[f64]` buffer; [`TfSegs`] records the
//! offset and shape of every tensor so forward, backward, and the
//! optimizer all agree on the layout.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Shape hyperparameters of one transformer instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TfDims {
    pub vocab: usize,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub context: usize,
    pub hidden_mult: usize,
}

impl TfDims {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.width * self.hidden_mult
    }
}

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Seg {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Seg {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSegs {
    pub ln1_g: Seg,
    pub ln1_b: Seg,
    pub wq: Seg,
    pub bq: Seg,
    pub wk: Seg,
    pub bk: Seg,
    pub wv: Seg,
    pub bv: Seg,
    pub wo: Seg,
    pub bo: Seg,
    pub ln2_g: Seg,
    pub ln2_b: Seg,
    pub w1: Seg,
    pub b1: Seg,
    pub w2: Seg,
    pub b2: Seg,
}

/// Full parameter layout for a [`TfDims`].
#[derive(Debug, Clone)]
pub(crate) struct TfSegs {
    pub tok_emb: Seg,
    pub pos_emb: Seg,
    pub layers: Vec<LayerSegs>,
    pub lnf_g: Seg,
    pub lnf_b: Seg,
    pub total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, rows: usize, cols: usize) -> Seg {
        let seg = Seg { off: self.0, rows, cols };
        self.0 += rows * cols;
        seg
    }
}

impl TfSegs {
    pub fn new(d: &TfDims) -> Self {
        let mut c = Cursor(0);
        let tok_emb = c.take(d.vocab, d.width);
        let pos_emb = c.take(d.context, d.width);
        let mut layers = Vec::with_capacity(d.depth);
        for _ in 0..d.depth {
            layers.push(LayerSegs {
                ln1_g: c.take(d.width, 1),
                ln1_b: c.take(d.width, 1),
                wq: c.take(d.width, d.width),
                bq: c.take(d.width, 1),
                wk: c.take(d.width, d.width),
                bk: c.take(d.width, 1),
                wv: c.take(d.width, d.width),
                bv: c.take(d.width, 1),
                wo: c.take(d.width, d.width),
                bo: c.take(d.width, 1),
                ln2_g: c.take(d.width, 1),
                ln2_b: c.take(d.width, 1),
                w1: c.take(d.width, d.mlp_hidden()),
                b1: c.take(d.mlp_hidden(), 1),
                w2: c.take(d.mlp_hidden(), d.width),
                b2: c.take(d.width, 1),
            });
        }
        let lnf_g = c.take(d.width, 1);
        let lnf_b = c.take(d.width, 1);
        TfSegs { tok_emb, pos_emb, layers, lnf_g, lnf_b, total: c.0 }
    }

    /// Tensors whose entries are weights (normal-initialized); everything
    /// else is a bias or norm parameter.
    pub fn weight_segs(&self) -> Vec<Seg> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend_from_slice(&[l.wq, l.wk, l.wv, l.wo, l.w1, l.w2]);
        }
        out
    }

    /// Layer-norm gain tensors (initialized to one).
    pub fn gain_segs(&self) -> Vec<Seg> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.ln1_g);
            out.push(l.ln2_g);
        }
        out.push(self.lnf_g);
        out
    }
}

fn mat<'a>(p: &'a [f64], s: Seg) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &p[s.off..s.off + s.len()]).expect("segment shape")
}

fn vec1<'a>(p: &'a [f64], s: Seg) -> ArrayView1<'a, f64> {
    ArrayView1::from_shape(s.len(), &p[s.off..s.off + s.len()]).expect("segment shape")
}

fn add_into(grad: &mut [f64], s: Seg, delta: &Array2<f64>) {
    let dst = &mut grad[s.off..s.off + s.len()];
    for (d, &x) in dst.iter_mut().zip(delta.iter()) {
        *d += x;
    }
}

fn add_into_1d(grad: &mut [f64], s: Seg, delta: &Array1<f64>) {
    let dst = &mut grad[s.off..s.off + s.len()];
    for (d, &x) in dst.iter_mut().zip(delta.iter()) {
        *d += x;
    }
}

// ---------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------

struct LnCache {
    y: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> LnCache {
    let (n, d) = x.dim();
    let mut y = Array2::zeros((n, d));
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[[i, j]] = xh;
            y[[i, j]] = g[j] * xh + b[j];
        }
    }
    LnCache { y, xhat, inv_std }
}

/// Backward through layer norm: returns dx and accumulates dg/db.
fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    grad: &mut [f64],
    g_seg: Seg,
    b_seg: Seg,
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    let dd = d as f64;
    for i in 0..n {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            m1 += dxh;
            m2 += dxh * cache.xhat[[i, j]];
        }
        m1 /= dd;
        m2 /= dd;
        let is = cache.inv_std[i];
        for j in 0..d {
            let dxh = dy[[i, j]] * g[j];
            dx[[i, j]] = is * (dxh - m1 - cache.xhat[[i, j]] * m2);
            grad[g_seg.off + j] += dy[[i, j]] * cache.xhat[[i, j]];
            grad[b_seg.off + j] += dy[[i, j]];
        }
    }
    dx
}

// ---------------------------------------------------------------------
// GELU
// ---------------------------------------------------------------------

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------

struct TfLayerCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Post-softmax attention weights, one `[n, n]` matrix per head
    /// (entries above the diagonal are exactly zero).
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    z1: Array2<f64>,
    g: Array2<f64>,
}

/// Forward activations retained for the backward pass.
pub(crate) struct TfCache {
    layers: Vec<TfLayerCache>,
    lnf: LnCache,
}

/// Run the network over `ids`, producing one logits row per position
/// (row `j` scores the token at position `j + 1`).
pub(crate) fn forward(
    params: &[f64],
    dims: &TfDims,
    segs: &TfSegs,
    ids: &[u32],
) -> (Array2<f64>, TfCache) {
    let n = ids.len();
    let d = dims.width;
    let heads = dims.heads;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok_emb = mat(params, segs.tok_emb);
    let pos_emb = mat(params, segs.pos_emb);
    let mut x = Array2::zeros((n, d));
    for (j, &t) in ids.iter().enumerate() {
        for c in 0..d {
            x[[j, c]] = tok_emb[[t as usize, c]] + pos_emb[[j, c]];
        }
    }

    let mut layer_caches = Vec::with_capacity(dims.depth);
    for lseg in &segs.layers {
        let ln1 = ln_forward(&x, vec1(params, lseg.ln1_g), vec1(params, lseg.ln1_b));
        let q = ln1.y.dot(&mat(params, lseg.wq)) + &vec1(params, lseg.bq);
        let k = ln1.y.dot(&mat(params, lseg.wk)) + &vec1(params, lseg.bk);
        let v = ln1.y.dot(&mat(params, lseg.wv)) + &vec1(params, lseg.bv);

        let mut o = Array2::zeros((n, d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let span = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(span);
            let kh = k.slice(span);
            let vh = v.slice(span);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            // Causal mask + row softmax.
            for i in 0..n {
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    max = max.max(scores[[i, j]]);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (scores[[i, j]] - max).exp();
                    scores[[i, j]] = e;
                    z += e;
                }
                for j in 0..n {
                    if j <= i {
                        scores[[i, j]] /= z;
                    } else {
                        scores[[i, j]] = 0.0;
                    }
                }
            }
            let oh = scores.dot(&vh);
            o.slice_mut(span).assign(&oh);
            attn.push(scores);
        }
        let attn_out = o.dot(&mat(params, lseg.wo)) + &vec1(params, lseg.bo);
        let h_res = &x + &attn_out;

        let ln2 = ln_forward(&h_res, vec1(params, lseg.ln2_g), vec1(params, lseg.ln2_b));
        let z1 = ln2.y.dot(&mat(params, lseg.w1)) + &vec1(params, lseg.b1);
        let g = z1.mapv(gelu);
        let mlp_out = g.dot(&mat(params, lseg.w2)) + &vec1(params, lseg.b2);
        x = h_res + mlp_out;

        layer_caches.push(TfLayerCache { ln1, q, k, v, attn, o, ln2, z1, g });
    }

    let lnf = ln_forward(&x, vec1(params, segs.lnf_g), vec1(params, segs.lnf_b));
    let logits = lnf.y.dot(&mat(params, segs.tok_emb).t());
    (logits, TfCache { layers: layer_caches, lnf })
}

// ---------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------

/// Accumulate the gradient of `sum(dlogits .* logits)` with respect to
/// every parameter into a fresh flat buffer.
pub(crate) fn backward(
    params: &[f64],
    dims: &TfDims,
    segs: &TfSegs,
    ids: &[u32],
    cache: &TfCache,
    dlogits: &Array2<f64>,
) -> Vec<f64> {
    let n = ids.len();
    let d = dims.width;
    let heads = dims.heads;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grad = vec![0.0; segs.total];

    // logits = lnf.y @ tok_emb^T; the embedding gets a second gradient
    // term below from its lookup role.
    add_into(&mut grad, segs.tok_emb, &dlogits.t().dot(&cache.lnf.y));
    let df = dlogits.dot(&mat(params, segs.tok_emb));
    let mut dx = ln_backward(&df, &cache.lnf, vec1(params, segs.lnf_g), &mut grad, segs.lnf_g, segs.lnf_b);

    for (lseg, lc) in segs.layers.iter().zip(&cache.layers).rev() {
        // x_next = h_res + g @ w2 + b2, g = gelu(z1), z1 = ln2.y @ w1 + b1
        let d_mlp_out = &dx;
        add_into(&mut grad, lseg.w2, &lc.g.t().dot(d_mlp_out));
        add_into_1d(&mut grad, lseg.b2, &d_mlp_out.sum_axis(Axis(0)));
        let dg = d_mlp_out.dot(&mat(params, lseg.w2).t());
        let mut dz1 = dg;
        dz1.zip_mut_with(&lc.z1, |dz, &z| *dz *= gelu_deriv(z));
        add_into(&mut grad, lseg.w1, &lc.ln2.y.t().dot(&dz1));
        add_into_1d(&mut grad, lseg.b1, &dz1.sum_axis(Axis(0)));
        let du2 = dz1.dot(&mat(params, lseg.w1).t());
        let mut d_h_res = dx.clone();
        d_h_res += &ln_backward(&du2, &lc.ln2, vec1(params, lseg.ln2_g), &mut grad, lseg.ln2_g, lseg.ln2_b);

        // h_res = x_in + o @ wo + bo
        let d_attn_out = &d_h_res;
        add_into(&mut grad, lseg.wo, &lc.o.t().dot(d_attn_out));
        add_into_1d(&mut grad, lseg.bo, &d_attn_out.sum_axis(Axis(0)));
        let do_ = d_attn_out.dot(&mat(params, lseg.wo).t());

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..heads {
            let span = s![.., h * dh..(h + 1) * dh];
            let a = &lc.attn[h];
            let doh = do_.slice(span);
            let kh = lc.k.slice(span);
            let qh = lc.q.slice(span);
            let vh = lc.v.slice(span);
            dv.slice_mut(span).assign(&a.t().dot(&doh));
            // Softmax backward per row; masked entries have a == 0 so they
            // contribute nothing.
            let da = doh.dot(&vh.t());
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += a[[i, j]] * da[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
                }
            }
            let mut dqh = ds.dot(&kh);
            dqh *= scale;
            let mut dkh = ds.t().dot(&qh);
            dkh *= scale;
            dq.slice_mut(span).assign(&dqh);
            dk.slice_mut(span).assign(&dkh);
        }

        let u = &lc.ln1.y;
        add_into(&mut grad, lseg.wq, &u.t().dot(&dq));
        add_into_1d(&mut grad, lseg.bq, &dq.sum_axis(Axis(0)));
        add_into(&mut grad, lseg.wk, &u.t().dot(&dk));
        add_into_1d(&mut grad, lseg.bk, &dk.sum_axis(Axis(0)));
        add_into(&mut grad, lseg.wv, &u.t().dot(&dv));
        add_into_1d(&mut grad, lseg.bv, &dv.sum_axis(Axis(0)));
        let mut du = dq.dot(&mat(params, lseg.wq).t());
        du += &dk.dot(&mat(params, lseg.wk).t());
        du += &dv.dot(&mat(params, lseg.wv).t());
        d_h_res += &ln_backward(&du, &lc.ln1, vec1(params, lseg.ln1_g), &mut grad, lseg.ln1_g, lseg.ln1_b);
        dx = d_h_res;
    }

    for (j, &t) in ids.iter().enumerate() {
        let te = segs.tok_emb.off + t as usize * d;
        let pe = segs.pos_emb.off + j * d;
        for c in 0..d {
            grad[te + c] += dx[[j, c]];
            grad[pe + c] += dx[[j, c]];
        }
    }
    grad
}
