//! Reverse-mode gradients for the transformer, hand-derived per block.
//!
//! The loss is masked cross-entropy, mean over scored positions: the
//! vocabulary projection and its gradient touch only the rows the mask
//! selects, everything upstream flows through the usual residual chain.
//! Hot loops run over contiguous row slices.

use super::forward::{forward_with_cache, gelu_grad, Batch, LnCache};
use super::{ModelParams, Scalar};
use crate::error::{Error, Result};
use ndarray::{s, Array1, Array2, Axis};

/// Gradient of a layer norm given the gradient of its output. Accumulates
/// gain/bias gradients and returns the gradient of the input.
fn layer_norm_backward<T: Scalar>(
    dz: &Array2<T>,
    cache: &LnCache<T>,
    gain: &Array1<T>,
    dgain: &mut Array1<T>,
    dbias: &mut Array1<T>,
) -> Array2<T> {
    let (n, h) = dz.dim();
    let inv_h = T::from_f64(1.0 / h as f64);
    let mut dx = Array2::zeros((n, h));
    let gain = gain.as_slice().expect("contiguous");
    let dgain = dgain.as_slice_mut().expect("contiguous");
    let dbias = dbias.as_slice_mut().expect("contiguous");
    for r in 0..n {
        let xhat = cache.xhat.row(r);
        let xhat = xhat.as_slice().expect("contiguous");
        let dzr = dz.row(r);
        let dzr = dzr.as_slice().expect("contiguous");
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..h {
            let dxh = dzr[c] * gain[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[c];
            dgain[c] += dzr[c] * xhat[c];
            dbias[c] += dzr[c];
        }
        mean_dxhat *= inv_h;
        mean_dxhat_xhat *= inv_h;
        let istd = cache.inv_std[r];
        let mut dxr = dx.row_mut(r);
        let dxr = dxr.as_slice_mut().expect("contiguous");
        for c in 0..h {
            let dxh = dzr[c] * gain[c];
            dxr[c] = istd * (dxh - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Reconstruct a layer-norm output from its cache (`gain * xhat + bias`).
fn ln_output<T: Scalar>(cache: &LnCache<T>, gain: &Array1<T>, bias: &Array1<T>) -> Array2<T> {
    let mut out = cache.xhat.clone();
    let gain = gain.as_slice().expect("contiguous");
    let bias = bias.as_slice().expect("contiguous");
    for mut row in out.rows_mut() {
        let row = row.as_slice_mut().expect("contiguous");
        for c in 0..row.len() {
            row[c] = gain[c] * row[c] + bias[c];
        }
    }
    out
}

/// Compute the masked cross-entropy loss and gradients for every parameter.
///
/// `mask[b][p]` marks position `p` of sequence `b` as scored against
/// `targets[b][p]`. Gradient tensors mirror the parameter shapes exactly.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    mask: &ndarray::Array2<bool>,
    targets: &ndarray::Array2<usize>,
) -> Result<(ModelParams<T>, T)> {
    let config = &params.config;
    let bsz = batch.batch_size();
    let seq = batch.seq_len();
    if mask.dim() != (bsz, seq) || targets.dim() != (bsz, seq) {
        return Err(Error::InvalidInput(
            "mask/target shapes do not match the batch".into(),
        ));
    }

    let mut rows = Vec::new();
    let mut tgts = Vec::new();
    for b in 0..bsz {
        for p in 0..seq {
            if mask[[b, p]] {
                if p >= batch.lens[b] {
                    return Err(Error::InvalidInput(format!(
                        "mask selects padded position {p} of sequence {b}"
                    )));
                }
                let t = targets[[b, p]];
                if t >= config.vocab_size {
                    return Err(Error::InvalidToken {
                        id: t as u32,
                        vocab_size: config.vocab_size,
                    });
                }
                rows.push(b * seq + p);
                tgts.push(t);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyMask);
    }
    let m_count = rows.len();

    let cache = forward_with_cache(params, batch)?;
    let mut grads = ModelParams::zeros(config);

    // ---- loss head on gathered rows ----
    let h = config.hidden;
    let vocab = config.vocab_size;
    let mut gathered = Array2::zeros((m_count, h));
    for (r, &row) in rows.iter().enumerate() {
        gathered.row_mut(r).assign(&cache.xf.row(row));
    }
    let w_out = params.output_weight();
    let logits = gathered.dot(&w_out.t());

    let inv_m = T::from_f64(1.0 / m_count as f64);
    let mut loss = T::zero();
    let mut dlogits = Array2::zeros((m_count, vocab));
    for r in 0..m_count {
        let row = logits.row(r);
        let row = row.as_slice().expect("contiguous");
        let mut maxv = T::neg_infinity();
        for &x in row {
            if x > maxv {
                maxv = x;
            }
        }
        let mut denom = T::zero();
        let mut drow = dlogits.row_mut(r);
        let drow = drow.as_slice_mut().expect("contiguous");
        for c in 0..vocab {
            let e = (row[c] - maxv).exp();
            drow[c] = e;
            denom += e;
        }
        let lse = maxv + denom.ln();
        loss += lse - row[tgts[r]];
        let scale = inv_m / denom;
        for dv in drow.iter_mut() {
            *dv *= scale;
        }
        drow[tgts[r]] -= inv_m;
    }
    loss *= inv_m;

    let dgathered = dlogits.dot(w_out);
    let dw_out = dlogits.t().dot(&gathered);
    let mut dxf = Array2::zeros((bsz * seq, h));
    for (r, &row) in rows.iter().enumerate() {
        let mut dst = dxf.row_mut(row);
        dst += &dgathered.row(r);
    }

    // ---- final layer norm ----
    let mut dx = layer_norm_backward(
        &dxf,
        &cache.final_ln,
        &params.final_ln_gain,
        &mut grads.final_ln_gain,
        &mut grads.final_ln_bias,
    );

    // ---- transformer layers, reversed ----
    let heads = config.heads;
    let d = config.head_dim();
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    for li in (0..config.layers).rev() {
        let layer = &params.layers[li];
        let lcache = &cache.layers[li];
        let glayer = &mut grads.layers[li];

        // FFN sublayer: x_out = x_mid + (gelu(ln2(x_mid)·w1 + b1))·w2 + b2
        let df = &dx;
        glayer.b2 = df.sum_axis(Axis(0));
        let dg = df.dot(&layer.w2.t());
        glayer.w2 = lcache.g.t().dot(df);
        let mut du = dg;
        du.zip_mut_with(&lcache.u, |dgv, &uv| *dgv *= gelu_grad(uv));
        glayer.b1 = du.sum_axis(Axis(0));
        let z = ln_output(&lcache.ln2, &layer.ln2_gain, &layer.ln2_bias);
        glayer.w1 = z.t().dot(&du);
        let dz = du.dot(&layer.w1.t());
        let dx_mid_ln = layer_norm_backward(
            &dz,
            &lcache.ln2,
            &layer.ln2_gain,
            &mut glayer.ln2_gain,
            &mut glayer.ln2_bias,
        );
        let dx_mid = &dx + &dx_mid_ln;

        // Attention sublayer: x_mid = x_in + ctx(ln1(x_in))·wo
        let dctx = dx_mid.dot(&layer.wo.t());
        glayer.wo = lcache.ctx.t().dot(&dx_mid);

        let mut dq = Array2::zeros((bsz * seq, h));
        let mut dk = Array2::zeros((bsz * seq, h));
        let mut dv = Array2::zeros((bsz * seq, h));
        for b in 0..bsz {
            let rows_b = s![b * seq..(b + 1) * seq, ..];
            let probs_b = &lcache.probs[b];
            for m in 0..heads {
                let cols = s![.., m * d..(m + 1) * d];
                let qh = lcache.q.slice(rows_b).slice_move(cols);
                let kh = lcache.k.slice(rows_b).slice_move(cols);
                let vh = lcache.v.slice(rows_b).slice_move(cols);
                let dctx_h = dctx.slice(rows_b).slice_move(cols);
                let ph = probs_b.index_axis(Axis(0), m);

                let dp = dctx_h.dot(&vh.t());
                let dvh = ph.t().dot(&dctx_h);
                // softmax backward: entries with p = 0 contribute nothing
                let mut ds = Array2::zeros((seq, seq));
                for i in 0..seq {
                    let dpr = dp.row(i);
                    let dpr = dpr.as_slice().expect("contiguous");
                    let phr = ph.row(i);
                    let phr = phr.as_slice().expect("contiguous");
                    let mut rowdot = T::zero();
                    for j in 0..seq {
                        rowdot += dpr[j] * phr[j];
                    }
                    let mut dsr = ds.row_mut(i);
                    let dsr = dsr.as_slice_mut().expect("contiguous");
                    for j in 0..seq {
                        dsr[j] = phr[j] * (dpr[j] - rowdot);
                    }
                }
                let mut dqh = ds.dot(&kh);
                dqh.mapv_inplace(|x| x * scale);
                let mut dkh = ds.t().dot(&qh);
                dkh.mapv_inplace(|x| x * scale);

                dq.slice_mut(rows_b).slice_move(cols).assign(&dqh);
                dk.slice_mut(rows_b).slice_move(cols).assign(&dkh);
                dv.slice_mut(rows_b).slice_move(cols).assign(&dvh);
            }
        }

        let y = ln_output(&lcache.ln1, &layer.ln1_gain, &layer.ln1_bias);
        glayer.wq = y.t().dot(&dq);
        glayer.wk = y.t().dot(&dk);
        glayer.wv = y.t().dot(&dv);
        let dy = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        let dx_in_ln = layer_norm_backward(
            &dy,
            &lcache.ln1,
            &layer.ln1_gain,
            &mut glayer.ln1_gain,
            &mut glayer.ln1_bias,
        );
        dx = dx_mid + dx_in_ln;
    }

    // ---- embeddings and positions ----
    for b in 0..bsz {
        for i in 0..batch.lens[b] {
            let row = dx.row(b * seq + i);
            let row = row.as_slice().expect("contiguous");
            let id = batch.ids[[b, i]];
            let mut dst = grads.embedding.row_mut(id);
            let dst = dst.as_slice_mut().expect("contiguous");
            for c in 0..h {
                dst[c] += row[c];
            }
            if config.learned_positions {
                let mut pdst = grads.positions.row_mut(i);
                let pdst = pdst.as_slice_mut().expect("contiguous");
                for c in 0..h {
                    pdst[c] += row[c];
                }
            }
        }
    }

    // tied output projection: the vocabulary head contributes to the
    // embedding gradient
    match (&mut grads.out_proj, config.tied_output) {
        (Some(g), false) => *g += &dw_out,
        _ => grads.embedding += &dw_out,
    }

    Ok((grads, loss))
}
