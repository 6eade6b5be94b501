use rayon::prelude::*;

use super::{attention, ModelConfig, Parameters, RopeTable};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef, Scalar};
use crate::task::{Episode, Mode, TokenLayout, TokenStream};

/// Equal-length token streams stacked row-major (`batch x len`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    pub fn from_streams<'a>(streams: impl IntoIterator<Item = &'a TokenStream>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut len = None;
        let mut batch = 0;
        for s in streams {
            if *len.get_or_insert(s.ids.len()) != s.ids.len() {
                return Err(Error::Shape("streams in one batch must share a length".into()));
            }
            ids.extend_from_slice(&s.ids);
            batch += 1;
        }
        let len = len.unwrap_or(0);
        if batch == 0 || len == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(Batch { ids, batch, len })
    }

    pub fn single(ids: &[u32]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Shape("empty stream".into()));
        }
        Ok(Batch {
            ids: ids.to_vec(),
            batch: 1,
            len: ids.len(),
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

pub(super) struct Norm<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
    pub out: Vec<F>,
}

pub(super) struct LayerCache<F> {
    pub ln1: Norm<F>,
    /// Post-rotary queries and keys, plain values; `rows x d`.
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// `batch x heads x len x len`, post-softmax.
    pub attn: Vec<F>,
    /// Concatenated head outputs before the output projection.
    pub o: Vec<F>,
    pub ln2: Norm<F>,
    pub pre_act: Vec<F>,
    pub act: Vec<F>,
}

/// Everything `forward` computed, kept for analysis and for [`super::backward`].
pub struct ForwardTrace<F> {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub vocab: usize,
    /// `rows x vocab`.
    pub logits: Vec<F>,
    /// Residual stream after each block, `rows x d_embed` per layer.
    pub residuals: Vec<Vec<F>>,
    pub(super) ids: Vec<u32>,
    pub(super) layers: Vec<LayerCache<F>>,
    pub(super) ln_f: Norm<F>,
    pub(super) rope: RopeTable<F>,
}

impl<F: Scalar> ForwardTrace<F> {
    /// Attention matrix (`len x len`, rows are queries) of one head.
    pub fn attention(&self, layer: usize, episode: usize, head: usize) -> &[F] {
        let t = self.len;
        let start = ((episode * self.heads) + head) * t * t;
        &self.layers[layer].attn[start..start + t * t]
    }

    /// Sign of every MLP pre-activation, layer by layer. Two traces with equal
    /// patterns lie on the same linear piece of the ReLUs.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| l.pre_act.iter().map(|&h| h > F::zero()))
            .collect()
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn logits_at(&self, episode: usize, position: usize) -> &[F] {
        let row = episode * self.len + position;
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    /// Residual stream after `layer` at one position.
    pub fn residual_at(&self, layer: usize, episode: usize, position: usize) -> &[F] {
        let d = self.residuals[layer].len() / (self.batch * self.len);
        let row = episode * self.len + position;
        &self.residuals[layer][row * d..(row + 1) * d]
    }
}

pub(super) fn layer_norm<F: Scalar>(x: &[F], gain: &[F], eps: F) -> Norm<F> {
    let d = gain.len();
    let rows = x.len() / d;
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let mut out = vec![F::zero(); x.len()];
    let inv_d = F::one() / F::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gain[i];
        }
    }
    Norm { xhat, rstd, out }
}

fn project<F: Scalar>(x: &[F], rows: usize, w: &super::Tensor<F>) -> Vec<F> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    let mut out = vec![F::zero(); rows * dout];
    gemm(
        F::one(),
        MatRef::new(x, rows, din, din),
        MatRef::new(&w.data, din, dout, dout),
        F::zero(),
        MatMut::new(&mut out, rows, dout, dout),
    );
    out
}

/// Runs the model over a batch and keeps every intermediate needed for
/// gradients and analysis.
pub fn forward<F: Scalar>(params: &Parameters<F>, batch: &Batch, cfg: &ModelConfig) -> Result<ForwardTrace<F>> {
    let (b, t, d, heads) = (batch.batch, batch.len, cfg.d_embed, cfg.heads);
    let rows = b * t;
    if batch.ids.len() != rows {
        return Err(Error::Shape("batch ids do not match batch x len".into()));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= cfg.vocab) {
        return Err(Error::Shape(format!("token id {bad} >= vocab {}", cfg.vocab)));
    }
    if params.embed.shape != [cfg.vocab, d] || params.layers.len() != cfg.depth {
        return Err(Error::Shape("parameters do not match the model config".into()));
    }
    let dh = cfg.head_dim();
    let rope = RopeTable::new(dh, t, cfg.theta)?;
    let eps = F::of(cfg.ln_eps);
    let scale = F::one() / F::of(dh as f64).sqrt();
    let causal = cfg.mode == Mode::Causal;

    let mut x = vec![F::zero(); rows * d];
    for (r, &id) in batch.ids.iter().enumerate() {
        let id = id as usize;
        x[r * d..(r + 1) * d].copy_from_slice(&params.embed.data[id * d..(id + 1) * d]);
    }

    let mut layers = Vec::with_capacity(cfg.depth);
    let mut residuals = Vec::with_capacity(cfg.depth);
    for lp in &params.layers {
        let ln1 = layer_norm(&x, &lp.ln1.data, eps);
        let mut q = project(&ln1.out, rows, &lp.wq);
        let mut k = project(&ln1.out, rows, &lp.wk);
        let v = project(&ln1.out, rows, &lp.wv);
        for buf in [&mut q, &mut k] {
            buf.par_chunks_mut(t * d).for_each(|chunk| {
                for (pos, row) in chunk.chunks_mut(d).enumerate() {
                    for head in row.chunks_mut(dh) {
                        rope.apply(head, pos, false);
                    }
                }
            });
        }

        let mut attn = vec![F::zero(); b * heads * t * t];
        let mut o = vec![F::zero(); rows * d];
        let shape = attention::Shape { t, d, dh, causal };
        attn.par_chunks_mut(heads * t * t)
            .zip(o.par_chunks_mut(t * d))
            .enumerate()
            .for_each(|(e, (attn_e, o_e))| {
                let span = e * t * d..(e + 1) * t * d;
                let mut scratch = vec![F::zero(); dh * t];
                for h in 0..heads {
                    attention::head_forward(
                        &shape,
                        h,
                        scale,
                        &q[span.clone()],
                        &k[span.clone()],
                        &v[span.clone()],
                        &mut attn_e[h * t * t..(h + 1) * t * t],
                        o_e,
                        &mut scratch,
                    );
                }
            });

        let y = project(&o, rows, &lp.wo);
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += *yi;
        }
        let ln2 = layer_norm(&x, &lp.ln2.data, eps);
        let pre_act = project(&ln2.out, rows, &lp.w_in);
        let act: Vec<F> = pre_act.iter().map(|&h| h.max(F::zero())).collect();
        let z = project(&act, rows, &lp.w_out);
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += *zi;
        }
        residuals.push(x.clone());
        layers.push(LayerCache {
            ln1,
            q,
            k,
            v,
            attn,
            o,
            ln2,
            pre_act,
            act,
        });
    }

    let ln_f = layer_norm(&x, &params.ln_f.data, eps);
    let vocab = cfg.vocab;
    let mut logits = vec![F::zero(); rows * vocab];
    gemm(
        F::one(),
        MatRef::new(&ln_f.out, rows, d, d),
        MatRef::new(&params.embed.data, vocab, d, d).t(),
        F::zero(),
        MatMut::new(&mut logits, rows, vocab, vocab),
    );
    Ok(ForwardTrace {
        batch: b,
        len: t,
        heads,
        vocab,
        logits,
        residuals,
        ids: batch.ids.clone(),
        layers,
        ln_f,
        rope,
    })
}

/// One cross-entropy term: logits at `row` (flattened `episode * len + position`)
/// restricted to the first `classes` ids, against `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTarget {
    pub row: usize,
    pub target: u32,
    pub classes: usize,
    pub weight: f64,
    pub term: &'static str,
}

/// Which positions a causal model is trained on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Every next-token position in the stream.
    #[default]
    AllPositions,
    /// Only the query's final token.
    FinalOnly,
}

/// Loss terms for episode `index` of a batch of `batch_size` episodes.
pub fn targets_for(
    stream: &TokenStream,
    episode: &Episode,
    index: usize,
    batch_size: usize,
    cfg: &ModelConfig,
    layout: &TokenLayout,
    objective: Objective,
) -> Vec<LossTarget> {
    let t = stream.ids.len();
    let base = index * t;
    let inv_b = 1.0 / batch_size as f64;
    let vocab = cfg.vocab;
    match cfg.mode {
        Mode::Causal => match objective {
            Objective::AllPositions => {
                let w = inv_b / t as f64;
                (0..t)
                    .map(|pos| LossTarget {
                        row: base + pos,
                        target: if pos + 1 < t {
                            stream.ids[pos + 1]
                        } else {
                            episode.target
                        },
                        classes: vocab,
                        weight: w,
                        term: "next_token",
                    })
                    .collect()
            }
            Objective::FinalOnly => vec![LossTarget {
                row: base + t - 1,
                target: episode.target,
                classes: vocab,
                weight: inv_b,
                term: "next_token",
            }],
        },
        Mode::Masked => {
            let mut out = vec![LossTarget {
                row: base + stream.target_position,
                target: episode.target,
                classes: vocab,
                weight: inv_b,
                term: "mask",
            }];
            if cfg.root_head {
                if let Some(slot) = stream.root_slot {
                    out.push(LossTarget {
                        row: base + slot,
                        target: episode.query_root,
                        classes: layout.v as usize,
                        weight: cfg.root_loss_weight * inv_b,
                        term: "root",
                    });
                }
            }
            out
        }
    }
}

pub struct LossOutput<F> {
    pub value: f64,
    /// Weighted sum per term name, in first-seen order.
    pub terms: Vec<(&'static str, f64)>,
    /// Gradient of `value` with respect to the logits.
    pub dlogits: Vec<F>,
}

/// Weighted cross-entropy over `targets`.
pub fn loss<F: Scalar>(trace: &ForwardTrace<F>, targets: &[LossTarget]) -> LossOutput<F> {
    let vocab = trace.vocab;
    let mut dlogits = vec![F::zero(); trace.logits.len()];
    let mut terms: Vec<(&'static str, f64)> = Vec::new();
    let mut value = 0.0;
    for tg in targets {
        let logits = &trace.logits[tg.row * vocab..tg.row * vocab + tg.classes];
        let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = logits.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        let ce = (log_z - logits[tg.target as usize]).to_f64().unwrap();
        let contrib = tg.weight * ce;
        value += contrib;
        match terms.iter_mut().find(|(name, _)| *name == tg.term) {
            Some((_, acc)) => *acc += contrib,
            None => terms.push((tg.term, contrib)),
        }
        let w = F::of(tg.weight);
        let grad = &mut dlogits[tg.row * vocab..tg.row * vocab + tg.classes];
        for (g, &z) in grad.iter_mut().zip(logits) {
            *g += w * (z - log_z).exp();
        }
        grad[tg.target as usize] -= w;
    }
    LossOutput { value, terms, dlogits }
}
