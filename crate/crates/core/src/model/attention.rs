//! Per-head attention kernels for one episode.
//!
//! Activations are row-major `t x d` with head `h` in columns
//! `h * dh..(h + 1) * dh`. Row `i` attends to keys `0..live(i)`, which is
//! `i + 1` in causal mode and `t` otherwise; entries past `live(i)` are
//! never read and probabilities there are exactly 0.

use crate::linalg::Scalar;

#[inline]
fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Columns of one head, transposed to `dh x t`.
fn gather_t<F: Scalar>(src: &[F], t: usize, d: usize, col: usize, dh: usize, out: &mut [F]) {
    for j in 0..t {
        for c in 0..dh {
            out[c * t + j] = src[j * d + col + c];
        }
    }
}

pub(super) struct Shape {
    pub t: usize,
    pub d: usize,
    pub dh: usize,
    pub causal: bool,
}

impl Shape {
    #[inline]
    fn live(&self, i: usize) -> usize {
        if self.causal {
            i + 1
        } else {
            self.t
        }
    }
}

/// Fills `p` (`t x t`) with the attention probabilities of head `h` and
/// writes the head's output columns of `o`.
#[allow(clippy::too_many_arguments)]
pub(super) fn head_forward<F: Scalar>(
    sh: &Shape,
    h: usize,
    scale: F,
    q: &[F],
    k: &[F],
    v: &[F],
    p: &mut [F],
    o: &mut [F],
    scratch: &mut [F],
) {
    let (t, d, dh) = (sh.t, sh.d, sh.dh);
    let col = h * dh;
    let kt = &mut scratch[..dh * t];
    gather_t(k, t, d, col, dh, kt);
    for i in 0..t {
        let live = sh.live(i);
        let row = &mut p[i * t..(i + 1) * t];
        row.fill(F::zero());
        for c in 0..dh {
            axpy(&mut row[..live], q[i * d + col + c] * scale, &kt[c * t..c * t + live]);
        }
        let max = row[..live].iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for x in &mut row[..live] {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = F::one() / sum;
        for x in &mut row[..live] {
            *x *= inv;
        }
        let out = &mut o[i * d + col..i * d + col + dh];
        out.fill(F::zero());
        for j in 0..live {
            axpy(out, row[j], &v[j * d + col..j * d + col + dh]);
        }
    }
}

/// Gradients of head `h` given the output gradient `d_o`; adds into the
/// head's columns of `dq`, `dk` and `dv` (pre-rotation `dq`/`dk`).
#[allow(clippy::too_many_arguments)]
pub(super) fn head_backward<F: Scalar>(
    sh: &Shape,
    h: usize,
    scale: F,
    q: &[F],
    k: &[F],
    v: &[F],
    p: &[F],
    d_o: &[F],
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
    scratch: &mut [F],
) {
    let (t, d, dh) = (sh.t, sh.d, sh.dh);
    let col = h * dh;
    let (vt, ds) = scratch.split_at_mut(dh * t);
    let ds = &mut ds[..t];
    gather_t(v, t, d, col, dh, vt);
    for i in 0..t {
        let live = sh.live(i);
        let pr = &p[i * t..i * t + live];
        let doi = &d_o[i * d + col..i * d + col + dh];
        // dP = dO V^T ; dV += P^T dO
        let dp = &mut ds[..live];
        dp.fill(F::zero());
        for c in 0..dh {
            axpy(dp, doi[c], &vt[c * t..c * t + live]);
        }
        for j in 0..live {
            axpy(&mut dv[j * d + col..j * d + col + dh], pr[j], doi);
        }
        // dS = P * (dP - <dP, P>) scaled
        let dot: F = pr.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
        for (x, &pp) in dp.iter_mut().zip(pr) {
            *x = pp * (*x - dot) * scale;
        }
        for j in 0..live {
            let s = dp[j];
            axpy(
                &mut dq[i * d + col..i * d + col + dh],
                s,
                &k[j * d + col..j * d + col + dh],
            );
            axpy(
                &mut dk[j * d + col..j * d + col + dh],
                s,
                &q[i * d + col..i * d + col + dh],
            );
        }
    }
}
