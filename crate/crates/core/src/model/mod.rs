//! Pre-LN transformer without biases, rotary positions and tied
//! embedding/output weights, in causal (decoder) or masked (encoder) form.
//!
//! Weights are stored `in x out`, so a projection is `x @ W`. Gradients are
//! computed by hand in [`backward`]; the same code runs in `f32` for training
//! and `f64` for finite-difference checks.

mod attention;
mod backward;
mod forward;
mod rope;

pub use backward::backward;
pub use forward::{forward, loss, targets_for, Batch, ForwardTrace, LossOutput, LossTarget, Objective};
pub use rope::{rope_rotate, RopeTable};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::linalg::Scalar;
use crate::rng::Rng;
use crate::task::{Mode, TokenLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    #[serde(rename = "H", default = "default_heads")]
    pub heads: usize,
    pub d_embed: usize,
    #[serde(default = "default_widen")]
    pub widen: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Token ids including specials; 0 means "derive from the grammar and mode".
    #[serde(default)]
    pub vocab: usize,
    #[serde(default)]
    pub mode: Mode,
    /// Masked mode only: classify the query root from a prepended ROOT slot.
    #[serde(default)]
    pub root_head: bool,
    /// Separator token after each demonstration.
    #[serde(default)]
    pub sep: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_root_weight")]
    pub root_loss_weight: f64,
}

fn default_heads() -> usize {
    4
}
fn default_widen() -> usize {
    4
}
fn default_theta() -> f64 {
    10_000.0
}
fn default_ln_eps() -> f64 {
    1e-5
}
fn default_root_weight() -> f64 {
    1.0
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers of width 64.
    pub fn new(vocab: usize, mode: Mode) -> Self {
        ModelConfig {
            depth: 4,
            heads: default_heads(),
            d_embed: 64,
            widen: default_widen(),
            theta: default_theta(),
            vocab,
            mode,
            root_head: false,
            sep: false,
            ln_eps: default_ln_eps(),
            root_loss_weight: default_root_weight(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.widen * self.d_embed
    }

    pub fn layout(&self, v: usize) -> TokenLayout {
        TokenLayout::standard(v, self.mode, self.sep, self.root_head)
    }

    /// Fills `vocab` from the grammar vocabulary when left at 0.
    pub fn resolve_vocab(&mut self, v: usize) {
        if self.vocab == 0 {
            self.vocab = self.layout(v).vocab_size();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.d_embed == 0 || self.widen == 0 {
            return param_err("depth, H, d_embed and widen must be positive");
        }
        if !self.d_embed.is_multiple_of(self.heads) {
            return param_err(format!("d_embed {} not divisible by H {}", self.d_embed, self.heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return param_err("head dimension must be even for rotary embeddings");
        }
        if self.vocab == 0 {
            return param_err("vocab is unresolved");
        }
        if self.root_head && self.mode != Mode::Masked {
            return param_err("root_head requires masked mode");
        }
        if self.theta.is_nan() || self.theta <= 0.0 {
            return param_err("theta must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.to_f64().unwrap())).collect(),
        }
    }
}

/// Whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    NormGain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub ln1: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ln2: Tensor<F>,
    pub w_in: Tensor<F>,
    pub w_out: Tensor<F>,
}

/// All trainable tensors. `embed` (vocab x d_embed) is also the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<F> {
    pub embed: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub ln_f: Tensor<F>,
}

impl<F: Scalar> Parameters<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_embed;
        let layer = LayerParams {
            ln1: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2: Tensor::zeros(&[d]),
            w_in: Tensor::zeros(&[d, cfg.hidden()]),
            w_out: Tensor::zeros(&[cfg.hidden(), d]),
        };
        Parameters {
            embed: Tensor::zeros(&[cfg.vocab, d]),
            layers: vec![layer; cfg.depth],
            ln_f: Tensor::zeros(&[d]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, _, t) in out.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = F::zero());
        }
        out
    }

    /// Every tensor in a fixed order with its name and kind.
    pub fn tensors(&self) -> Vec<(String, TensorKind, &Tensor<F>)> {
        use TensorKind::*;
        let mut out = vec![("embed".to_string(), Weight, &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            let LayerParams {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                w_in,
                w_out,
            } = l;
            for (name, kind, t) in [
                ("ln1", NormGain, ln1),
                ("wq", Weight, wq),
                ("wk", Weight, wk),
                ("wv", Weight, wv),
                ("wo", Weight, wo),
                ("ln2", NormGain, ln2),
                ("w_in", Weight, w_in),
                ("w_out", Weight, w_out),
            ] {
                out.push((format!("layers.{i}.{name}"), kind, t));
            }
        }
        out.push(("ln_f".to_string(), NormGain, &self.ln_f));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorKind, &mut Tensor<F>)> {
        use TensorKind::*;
        let mut out = vec![("embed".to_string(), Weight, &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let LayerParams {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                w_in,
                w_out,
            } = l;
            for (name, kind, t) in [
                ("ln1", NormGain, ln1),
                ("wq", Weight, wq),
                ("wk", Weight, wk),
                ("wv", Weight, wv),
                ("wo", Weight, wo),
                ("ln2", NormGain, ln2),
                ("w_in", Weight, w_in),
                ("w_out", Weight, w_out),
            ] {
                out.push((format!("layers.{i}.{name}"), kind, t));
            }
        }
        out.push(("ln_f".to_string(), NormGain, &mut self.ln_f));
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        let cast = |l: &LayerParams<F>| LayerParams {
            ln1: l.ln1.cast(),
            wq: l.wq.cast(),
            wk: l.wk.cast(),
            wv: l.wv.cast(),
            wo: l.wo.cast(),
            ln2: l.ln2.cast(),
            w_in: l.w_in.cast(),
            w_out: l.w_out.cast(),
        };
        Parameters {
            embed: self.embed.cast(),
            layers: self.layers.iter().map(cast).collect(),
            ln_f: self.ln_f.cast(),
        }
    }
}

pub const INIT_STD: f64 = 0.02;

/// Gaussian init with std 0.02; the second MLP matrix of each block uses
/// variance `0.02^2 / (2 * depth)`; norm gains start at 1.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<Parameters<F>> {
    cfg.validate()?;
    let mut params = Parameters::zeros(cfg);
    let base = Normal::new(0.0, INIT_STD).unwrap();
    let out_std = INIT_STD / (2.0 * cfg.depth as f64).sqrt();
    let scaled = Normal::new(0.0, out_std).unwrap();
    for (name, kind, t) in params.tensors_mut() {
        match kind {
            TensorKind::NormGain => t.data.iter_mut().for_each(|x| *x = F::one()),
            TensorKind::Weight => {
                let dist = if name.ends_with("w_out") { &scaled } else { &base };
                t.data.iter_mut().for_each(|x| *x = F::of(dist.sample(rng)));
            }
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn std_of(xs: &[f32]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
        (xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn init_statistics() {
        let mut cfg = ModelConfig::new(16, Mode::Causal);
        cfg.d_embed = 512;
        cfg.depth = 6;
        let p: Parameters<f32> = init_params(&cfg, &mut stream(1, Stream::Init)).unwrap();
        let s = std_of(&p.layers[0].wq.data);
        assert!((s / 0.02 - 1.0).abs() < 0.02, "wq std {s}");
        let s = std_of(&p.layers[3].w_out.data);
        let want = 0.02 / 12f64.sqrt();
        assert!((want - 0.005774).abs() < 1e-6);
        assert!((s / want - 1.0).abs() < 0.02, "w_out std {s}");
        assert!(p.ln_f.data.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::new(10, Mode::Masked);
        let a: Parameters<f32> = init_params(&cfg, &mut stream(3, Stream::Init)).unwrap();
        let b: Parameters<f32> = init_params(&cfg, &mut stream(3, Stream::Init)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_checks() {
        let mut cfg = ModelConfig::new(10, Mode::Causal);
        cfg.d_embed = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(10, Mode::Causal);
        cfg.root_head = true;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(0, Mode::Masked);
        cfg.root_head = true;
        cfg.resolve_vocab(8);
        assert_eq!(cfg.vocab, 10);
    }
}
