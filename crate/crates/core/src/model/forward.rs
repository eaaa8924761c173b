//! Batched forward pass with caches for the backward pass, plus an
//! incremental single-sequence path with a key/value cache for generation.
//!
//! Hot loops run over contiguous row slices; the arrays here are all
//! standard-layout so `as_slice` never fails.

use super::{ModelParams, Scalar, LN_EPS};
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};

/// A right-padded batch of token sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (B, L) token ids, padded.
    pub ids: Array2<usize>,
    /// True sequence lengths; positions at or beyond the length are padding
    /// and neither attend as keys nor receive loss.
    pub lens: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(sequences: &[Vec<u32>], pad_id: u32) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if sequences.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidInput("empty sequence in batch".into()));
        }
        let max_len = sequences.iter().map(Vec::len).max().unwrap();
        let mut ids = Array2::from_elem((sequences.len(), max_len), pad_id as usize);
        for (b, seq) in sequences.iter().enumerate() {
            for (i, &id) in seq.iter().enumerate() {
                ids[[b, i]] = id as usize;
            }
        }
        Ok(Batch {
            ids,
            lens: sequences.iter().map(Vec::len).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.ncols()
    }
}

/// Per-position unnormalized scores over the vocabulary.
#[derive(Debug, Clone)]
pub struct LogitsBatch<T> {
    /// (B, L, vocab)
    pub logits: Array3<T>,
    pub lens: Vec<usize>,
}

pub(crate) struct LnCache<T> {
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

pub(crate) struct LayerCache<T> {
    pub ln1: LnCache<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// Attention probabilities, one (heads, L, L) tensor per sequence.
    pub probs: Vec<Array3<T>>,
    /// Concatenated head outputs before the output projection.
    pub ctx: Array2<T>,
    pub ln2: LnCache<T>,
    /// FFN pre-activation.
    pub u: Array2<T>,
    /// FFN activation gelu(u).
    pub g: Array2<T>,
}

/// Everything the backward pass needs from the forward pass. Layer norms
/// keep normalized rows and inverse deviations; original inputs are not
/// needed because every norm gradient is expressible through those.
pub struct ForwardCache<T> {
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) final_ln: LnCache<T>,
    /// Final hidden states after the last layer norm, (B*L, h).
    pub xf: Array2<T>,
}

/// tanh via one exp; noticeably faster than libm tanh and exact at the
/// saturated ends.
#[inline]
fn exp_tanh<T: Scalar>(x: T) -> T {
    let two = T::from_f64(2.0);
    T::one() - two / ((two * x).exp() + T::one())
}

/// gelu (tanh approximation) and its derivative.
pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let t = exp_tanh(c * (u + a * u * u * u));
    half * u * (T::one() + t)
}

pub(crate) fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = exp_tanh(c * (u + a * u * u * u));
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * u * sech2 * c * (T::one() + three * a * u * u)
}

/// Row-wise layer norm with gain and bias; caches normalized rows and
/// inverse standard deviations.
pub(crate) fn layer_norm<T: Scalar>(
    x: &Array2<T>,
    gain: &Array1<T>,
    bias: &Array1<T>,
) -> (Array2<T>, LnCache<T>) {
    let (n, h) = x.dim();
    let inv_h = T::from_f64(1.0 / h as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = Array2::zeros((n, h));
    let mut out = Array2::zeros((n, h));
    let mut inv_std = Array1::zeros(n);
    let gain = gain.as_slice().expect("contiguous");
    let bias = bias.as_slice().expect("contiguous");
    for r in 0..n {
        let row = x.row(r);
        let row = row.as_slice().expect("contiguous");
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_h;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        let istd = T::one() / (var * inv_h + eps).sqrt();
        inv_std[r] = istd;
        let mut xh_row = xhat.row_mut(r);
        let xh = xh_row.as_slice_mut().expect("contiguous");
        let mut out_row = out.row_mut(r);
        let o = out_row.as_slice_mut().expect("contiguous");
        for c in 0..h {
            let v = (row[c] - mean) * istd;
            xh[c] = v;
            o[c] = gain[c] * v + bias[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Causal multi-head attention for one sequence. `len` masks padded keys.
fn attention_block<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    heads: usize,
    len: usize,
) -> (Array2<T>, Array3<T>) {
    let seq = q.nrows();
    let h = q.ncols();
    let d = h / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut probs = Array3::zeros((heads, seq, seq));
    let mut ctx = Array2::zeros((seq, h));
    for m in 0..heads {
        let cols = s![.., m * d..(m + 1) * d];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t());
        let mut probs_h = probs.index_axis_mut(Axis(0), m);
        for i in 0..seq {
            // stable softmax over the causal, unpadded prefix
            let limit = (i + 1).min(len.max(1));
            let srow = scores.row(i);
            let srow = srow.as_slice().expect("contiguous");
            let mut prow = probs_h.row_mut(i);
            let prow = prow.as_slice_mut().expect("contiguous");
            let mut maxv = T::neg_infinity();
            for &x in &srow[..limit] {
                if x > maxv {
                    maxv = x;
                }
            }
            maxv *= scale;
            let mut denom = T::zero();
            for j in 0..limit {
                let e = (srow[j] * scale - maxv).exp();
                prow[j] = e;
                denom += e;
            }
            let inv = T::one() / denom;
            for p in &mut prow[..limit] {
                *p *= inv;
            }
        }
        let ph = probs.index_axis(Axis(0), m);
        let ctx_h = ph.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
    }
    (ctx, probs)
}

fn validate_batch<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Result<()> {
    let config = &params.config;
    if batch.seq_len() > config.max_seq_len {
        return Err(Error::SequenceLength {
            len: batch.seq_len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::InvalidToken {
            id: bad as u32,
            vocab_size: config.vocab_size,
        });
    }
    if batch.lens.len() != batch.batch_size()
        || batch.lens.iter().any(|&l| l == 0 || l > batch.seq_len())
    {
        return Err(Error::InvalidInput("batch lengths inconsistent".into()));
    }
    Ok(())
}

/// Full forward pass retaining every intermediate needed by `backward`.
pub fn forward_with_cache<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
) -> Result<ForwardCache<T>> {
    validate_batch(params, batch)?;
    let config = &params.config;
    let bsz = batch.batch_size();
    let seq = batch.seq_len();
    let n = bsz * seq;
    let h = config.hidden;

    let mut x = Array2::zeros((n, h));
    for b in 0..bsz {
        for i in 0..seq {
            let id = batch.ids[[b, i]];
            let emb = params.embedding.row(id);
            let emb = emb.as_slice().expect("contiguous");
            let pos = params.positions.row(i);
            let pos = pos.as_slice().expect("contiguous");
            let mut dst = x.row_mut(b * seq + i);
            let dst = dst.as_slice_mut().expect("contiguous");
            for c in 0..h {
                dst[c] = emb[c] + pos[c];
            }
        }
    }

    let mut layer_caches = Vec::with_capacity(config.layers);
    for layer in &params.layers {
        let (y, ln1) = layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias);
        let q = y.dot(&layer.wq);
        let k = y.dot(&layer.wk);
        let v = y.dot(&layer.wv);

        let mut ctx = Array2::zeros((n, h));
        let mut probs = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let rows = s![b * seq..(b + 1) * seq, ..];
            let (ctx_b, probs_b) = attention_block(
                q.slice(rows),
                k.slice(rows),
                v.slice(rows),
                config.heads,
                batch.lens[b],
            );
            ctx.slice_mut(rows).assign(&ctx_b);
            probs.push(probs_b);
        }
        let attn_out = ctx.dot(&layer.wo);
        let x_mid = &x + &attn_out;

        let (z, ln2) = layer_norm(&x_mid, &layer.ln2_gain, &layer.ln2_bias);
        let mut u = z.dot(&layer.w1);
        u += &layer.b1;
        let g = u.mapv(gelu);
        let mut f = g.dot(&layer.w2);
        f += &layer.b2;
        let x_out = &x_mid + &f;

        layer_caches.push(LayerCache {
            ln1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            u,
            g,
        });
        x = x_out;
    }

    let (xf, final_ln) = layer_norm(&x, &params.final_ln_gain, &params.final_ln_bias);
    Ok(ForwardCache {
        layers: layer_caches,
        final_ln,
        xf,
    })
}

/// Forward pass producing logits for every position.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Result<LogitsBatch<T>> {
    let cache = forward_with_cache(params, batch)?;
    let w = params.output_weight();
    let flat = cache.xf.dot(&w.t());
    let bsz = batch.batch_size();
    let seq = batch.seq_len();
    let logits = flat
        .into_shape_with_order((bsz, seq, params.config.vocab_size))
        .expect("shape follows batch");
    Ok(LogitsBatch {
        logits,
        lens: batch.lens.clone(),
    })
}

/// Incremental decoding state: per-layer key/value caches for one sequence.
pub struct DecodeState<T> {
    keys: Vec<Array2<T>>,
    vals: Vec<Array2<T>>,
    pos: usize,
}

impl<T: Scalar> DecodeState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let h = params.config.hidden;
        DecodeState {
            keys: (0..params.config.layers)
                .map(|_| Array2::zeros((0, h)))
                .collect(),
            vals: (0..params.config.layers)
                .map(|_| Array2::zeros((0, h)))
                .collect(),
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Run a whole prompt through the batched forward path, filling the
    /// key/value caches, and return the logits of the last position. Only
    /// valid on a fresh state.
    pub fn feed_prompt(&mut self, params: &ModelParams<T>, tokens: &[u32]) -> Result<Array1<T>> {
        if self.pos != 0 {
            return Err(Error::InvalidInput(
                "feed_prompt requires a fresh decode state".into(),
            ));
        }
        let batch = Batch::from_sequences(&[tokens.to_vec()], 0)?;
        let cache = forward_with_cache(params, &batch)?;
        for (li, layer) in cache.layers.iter().enumerate() {
            self.keys[li] = layer.k.clone();
            self.vals[li] = layer.v.clone();
        }
        self.pos = tokens.len();
        let last = cache.xf.row(tokens.len() - 1);
        Ok(params.output_weight().dot(&last))
    }

    /// Feed one token; returns the logits for the next position.
    pub fn step(&mut self, params: &ModelParams<T>, token: u32) -> Result<Array1<T>> {
        let config = &params.config;
        if self.pos >= config.max_seq_len {
            return Err(Error::SequenceLength {
                len: self.pos + 1,
                max: config.max_seq_len,
            });
        }
        if token as usize >= config.vocab_size {
            return Err(Error::InvalidToken {
                id: token,
                vocab_size: config.vocab_size,
            });
        }
        let h = config.hidden;
        let heads = config.heads;
        let d = config.head_dim();
        let scale = T::from_f64(1.0 / (d as f64).sqrt());

        let mut x: Array1<T> = params.embedding.row(token as usize).to_owned();
        x += &params.positions.row(self.pos);

        for (li, layer) in params.layers.iter().enumerate() {
            let y = ln_row(&x, &layer.ln1_gain, &layer.ln1_bias);
            let q = y.dot(&layer.wq);
            let k = y.dot(&layer.wk);
            let v = y.dot(&layer.wv);
            self.keys[li].push_row(k.view()).expect("width matches");
            self.vals[li].push_row(v.view()).expect("width matches");

            let mut ctx = Array1::zeros(h);
            for m in 0..heads {
                let cols = m * d..(m + 1) * d;
                let qh = q.slice(s![cols.clone()]);
                let kh = self.keys[li].slice(s![.., cols.clone()]);
                let mut scores = kh.dot(&qh);
                scores.mapv_inplace(|x| x * scale);
                let maxv = scores.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for sv in scores.iter_mut() {
                    *sv = (*sv - maxv).exp();
                    denom += *sv;
                }
                let inv = T::one() / denom;
                scores.mapv_inplace(|x| x * inv);
                let vh = self.vals[li].slice(s![.., cols.clone()]);
                let ctx_h = scores.dot(&vh);
                ctx.slice_mut(s![cols]).assign(&ctx_h);
            }
            let attn = ctx.dot(&layer.wo);
            x += &attn;

            let z = ln_row(&x, &layer.ln2_gain, &layer.ln2_bias);
            let mut u = z.dot(&layer.w1);
            u += &layer.b1;
            let g = u.mapv(gelu);
            let mut f = g.dot(&layer.w2);
            f += &layer.b2;
            x += &f;
        }

        let xf = ln_row(&x, &params.final_ln_gain, &params.final_ln_bias);
        self.pos += 1;
        Ok(params.output_weight().dot(&xf))
    }
}

fn ln_row<T: Scalar>(x: &Array1<T>, gain: &Array1<T>, bias: &Array1<T>) -> Array1<T> {
    let h = x.len();
    let inv_h = T::from_f64(1.0 / h as f64);
    let eps = T::from_f64(LN_EPS);
    let mean = x.sum() * inv_h;
    let mut var = T::zero();
    for &v in x {
        let dv = v - mean;
        var += dv * dv;
    }
    var *= inv_h;
    let istd = T::one() / (var + eps).sqrt();
    let mut out = Array1::zeros(h);
    for c in 0..h {
        out[c] = gain[c] * (x[c] - mean) * istd + bias[c];
    }
    out
}
