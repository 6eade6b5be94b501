use rayon::prelude::*;

use super::forward::{ForwardTrace, LossOutput, Norm};
use super::{attention, ModelConfig, Parameters, Tensor};
use crate::linalg::{gemm, MatMut, MatRef, Scalar};

/// `dW += x^T dy` and returns `dx = dy W^T`.
fn project_back<F: Scalar>(x: &[F], dy: &[F], rows: usize, w: &Tensor<F>, dw: &mut Tensor<F>) -> Vec<F> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    gemm(
        F::one(),
        MatRef::new(x, rows, din, din).t(),
        MatRef::new(dy, rows, dout, dout),
        F::one(),
        MatMut::new(&mut dw.data, din, dout, dout),
    );
    let mut dx = vec![F::zero(); rows * din];
    gemm(
        F::one(),
        MatRef::new(dy, rows, dout, dout),
        MatRef::new(&w.data, din, dout, dout).t(),
        F::zero(),
        MatMut::new(&mut dx, rows, din, din),
    );
    dx
}

/// Gain-only layer norm: accumulates the gain gradient and adds the input
/// gradient into `dx`.
fn norm_back<F: Scalar>(norm: &Norm<F>, gain: &[F], dout: &[F], dgain: &mut [F], dx: &mut [F]) {
    let d = gain.len();
    let inv_d = F::one() / F::of(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for (r, &rstd) in norm.rstd.iter().enumerate() {
        let xh = &norm.xhat[r * d..(r + 1) * d];
        let dy = &dout[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            dgain[i] += dy[i] * xh[i];
            dxhat[i] = dy[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let out = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] += rstd * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

/// Gradients of `scale * loss.value` with respect to every parameter. The
/// tied embedding receives both its input and its output contribution.
pub fn backward<F: Scalar>(
    params: &Parameters<F>,
    trace: &ForwardTrace<F>,
    loss: &LossOutput<F>,
    scale: F,
    cfg: &ModelConfig,
) -> Parameters<F> {
    let mut grads = params.zeros_like();
    let (b, t, d, heads) = (trace.batch, trace.len, cfg.d_embed, cfg.heads);
    let dh = cfg.head_dim();
    let rows = b * t;
    let vocab = trace.vocab;
    let attn_scale = F::one() / F::of(dh as f64).sqrt();

    let dlogits: Vec<F> = loss.dlogits.iter().map(|&g| g * scale).collect();
    // logits = f E^T
    gemm(
        F::one(),
        MatRef::new(&dlogits, rows, vocab, vocab).t(),
        MatRef::new(&trace.ln_f.out, rows, d, d),
        F::one(),
        MatMut::new(&mut grads.embed.data, vocab, d, d),
    );
    let mut df = vec![F::zero(); rows * d];
    gemm(
        F::one(),
        MatRef::new(&dlogits, rows, vocab, vocab),
        MatRef::new(&params.embed.data, vocab, d, d),
        F::zero(),
        MatMut::new(&mut df, rows, d, d),
    );
    let mut dx = vec![F::zero(); rows * d];
    norm_back(&trace.ln_f, &params.ln_f.data, &df, &mut grads.ln_f.data, &mut dx);

    for (li, (lp, cache)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let g = &mut grads.layers[li];

        // MLP: x_out = x_mid + relu(LN2(x_mid) W_in) W_out
        let mut dact = project_back(&cache.act, &dx, rows, &lp.w_out, &mut g.w_out);
        for (da, &h) in dact.iter_mut().zip(&cache.pre_act) {
            if h <= F::zero() {
                *da = F::zero();
            }
        }
        let dln2 = project_back(&cache.ln2.out, &dact, rows, &lp.w_in, &mut g.w_in);
        norm_back(&cache.ln2, &lp.ln2.data, &dln2, &mut g.ln2.data, &mut dx);

        // attention: x_mid = x_in + attn(LN1(x_in)) W_o
        let d_o = project_back(&cache.o, &dx, rows, &lp.wo, &mut g.wo);
        let shape = attention::Shape {
            t,
            d,
            dh,
            causal: cfg.mode == crate::task::Mode::Causal,
        };
        let mut dq = vec![F::zero(); rows * d];
        let mut dk = vec![F::zero(); rows * d];
        let mut dv = vec![F::zero(); rows * d];
        dq.par_chunks_mut(t * d)
            .zip(dk.par_chunks_mut(t * d))
            .zip(dv.par_chunks_mut(t * d))
            .enumerate()
            .for_each(|(e, ((dq_e, dk_e), dv_e))| {
                let span = e * t * d..(e + 1) * t * d;
                let mut scratch = vec![F::zero(); dh * t + t];
                for h in 0..heads {
                    attention::head_backward(
                        &shape,
                        h,
                        attn_scale,
                        &cache.q[span.clone()],
                        &cache.k[span.clone()],
                        &cache.v[span.clone()],
                        &cache.attn[(e * heads + h) * t * t..(e * heads + h + 1) * t * t],
                        &d_o[span.clone()],
                        dq_e,
                        dk_e,
                        dv_e,
                        &mut scratch,
                    );
                }
                // back through the rotation
                for buf in [dq_e, dk_e] {
                    for (pos, row) in buf.chunks_mut(d).enumerate() {
                        for head in row.chunks_mut(dh) {
                            trace.rope.apply(head, pos, true);
                        }
                    }
                }
            });
        let mut dln1 = project_back(&cache.ln1.out, &dq, rows, &lp.wq, &mut g.wq);
        for (part, w, dw) in [(&dk, &lp.wk, &mut g.wk), (&dv, &lp.wv, &mut g.wv)] {
            let extra = project_back(&cache.ln1.out, part, rows, w, dw);
            for (a, e) in dln1.iter_mut().zip(extra) {
                *a += e;
            }
        }
        norm_back(&cache.ln1, &lp.ln1.data, &dln1, &mut g.ln1.data, &mut dx);
    }

    for (r, &id) in trace.ids.iter().enumerate() {
        let id = id as usize;
        let row = &mut grads.embed.data[id * d..(id + 1) * d];
        for (g, &v) in row.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
            *g += v;
        }
    }
    grads
}
