//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use rand::Rng as _;
use rhm_lab::grammar::Sequence;
use rhm_lab::model::{
    backward, forward, init_params, loss, targets_for, Batch, LossTarget, ModelConfig, Objective, Parameters,
};
use rhm_lab::rng::{stream, Stream};
use rhm_lab::task::{encode, Episode, EvalCondition, Mode, TokenStream};

/// A random episode over `v` grammar tokens whose causal stream has `len` ids.
pub fn random_episode(v: usize, seq_len: usize, n_ct: usize, seed: u64) -> Episode {
    let mut rng = stream(seed, Stream::Analysis);
    let mut seq = || Sequence {
        tokens: (0..seq_len).map(|_| rng.random_range(0..v as u32)).collect(),
        root: rng.random_range(0..v as u32),
    };
    let context = (0..n_ct).map(|_| seq()).collect();
    let query = seq();
    Episode::from_parts(context, &query, EvalCondition::Mem)
}

pub struct Problem {
    pub cfg: ModelConfig,
    pub batch: Batch,
    pub targets: Vec<LossTarget>,
}

/// Tiny model and a two-episode batch for gradient checks.
pub fn tiny_problem(mode: Mode, root_head: bool, seed: u64) -> Problem {
    // 4 grammar tokens plus specials; vocab fixed at 8
    let v = 4;
    let mut cfg = ModelConfig::new(8, mode);
    cfg.depth = 2;
    cfg.d_embed = 16;
    cfg.root_head = root_head;
    let layout = cfg.layout(v);
    // n_ct = 3, d = 4 gives 15 causal ids; leading context ids are dropped down to 12
    let (n_ct, d) = (3, 4);
    let episodes: Vec<Episode> = (0..2).map(|i| random_episode(v, d, n_ct, seed * 10 + i)).collect();
    let mut streams: Vec<TokenStream> = episodes.iter().map(|e| encode(e, mode, &layout).unwrap()).collect();
    for s in &mut streams {
        let extra = s.ids.len() - 12;
        let keep = s.root_slot.map_or(0, |_| 1);
        s.ids.drain(keep..keep + extra);
        s.target_position -= extra;
    }
    let batch = Batch::from_streams(&streams).unwrap();
    assert_eq!(batch.len, 12);
    let targets = streams
        .iter()
        .zip(&episodes)
        .enumerate()
        .flat_map(|(i, (s, e))| targets_for(s, e, i, 2, &cfg, &layout, Objective::AllPositions))
        .collect();
    Problem { cfg, batch, targets }
}

/// Parameters at init, with weights spread out so every path carries signal.
pub fn spread_params(cfg: &ModelConfig, seed: u64) -> Parameters<f64> {
    let mut p: Parameters<f64> = init_params(cfg, &mut stream(seed, Stream::Init)).unwrap();
    let mut rng = stream(seed, Stream::Analysis);
    for (name, _, t) in p.tensors_mut() {
        // embeddings at unit scale so h is small next to every entry
        let factor = if name == "embed" { 50.0 } else { 5.0 };
        for x in &mut t.data {
            *x = *x * factor + rng.random_range(-0.005..0.005);
        }
    }
    for (name, _, t) in p.tensors_mut() {
        if name.contains("ln") {
            for x in &mut t.data {
                *x = 1.0 + rng.random_range(-0.3..0.3);
            }
        }
    }
    p
}

pub fn loss_value(params: &Parameters<f64>, pb: &Problem) -> f64 {
    let trace = forward(params, &pb.batch, &pb.cfg).unwrap();
    loss(&trace, &pb.targets).value
}

#[derive(Debug)]
pub struct GradCheck {
    pub tensor: String,
    pub len: usize,
    pub checked: usize,
    /// Checked coordinates that needed a step below `h` to stay off a ReLU kink.
    pub reduced: usize,
    /// Coordinates left unchecked because every step crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Central differences at step `h` on `per_tensor` coordinates of every
/// tensor (all of them when the tensor is smaller); relative error is
/// `|a - n| / max(|a|, |n|, floor)`. The loss is not differentiable across a
/// ReLU kink, so a coordinate whose +-h stencil changes any ReLU sign is
/// retried at h/10, h/100 and h/1000; if all of those cross too, it is replaced
/// by another draw (or left out of an exhaustive pass).
pub fn finite_difference_check(
    pb: &Problem,
    params: &Parameters<f64>,
    h: f64,
    per_tensor: usize,
    floor: f64,
    seed: u64,
) -> Vec<GradCheck> {
    let trace = forward(params, &pb.batch, &pb.cfg).unwrap();
    let pattern = trace.relu_pattern();
    let out = loss(&trace, &pb.targets);
    let grads = backward(params, &trace, &out, 1.0, &pb.cfg);
    let mut rng = stream(seed, Stream::Analysis);
    let names: Vec<(String, usize)> = params.tensors().iter().map(|(n, _, t)| (n.clone(), t.len())).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, _, t)| t.data.clone()).collect();
    let mut report = Vec::new();
    for (ti, (name, len)) in names.iter().enumerate() {
        let exhaustive = *len <= per_tensor;
        let candidates: Vec<usize> = if exhaustive {
            (0..*len).collect()
        } else {
            (0..per_tensor * 20).map(|_| rng.random_range(0..*len)).collect()
        };
        let mut candidates = candidates.into_iter();
        let mut max_rel: f64 = 0.0;
        let (mut checked, mut reduced, mut skipped) = (0, 0, 0);
        while checked < per_tensor.min(*len) {
            let Some(c) = candidates.next() else { break };
            let mut p = params.clone();
            let base = p.tensors()[ti].2.data[c];
            let mut numeric = None;
            for (attempt, step) in [h, h / 10.0, h / 100.0, h / 1000.0].into_iter().enumerate() {
                p.tensors_mut()[ti].2.data[c] = base + step;
                let up = forward(&p, &pb.batch, &pb.cfg).unwrap();
                p.tensors_mut()[ti].2.data[c] = base - step;
                let down = forward(&p, &pb.batch, &pb.cfg).unwrap();
                if up.relu_pattern() == pattern && down.relu_pattern() == pattern {
                    numeric = Some((loss(&up, &pb.targets).value - loss(&down, &pb.targets).value) / (2.0 * step));
                    reduced += usize::from(attempt > 0);
                    break;
                }
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            let a = analytic[ti][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
        report.push(GradCheck {
            tensor: name.clone(),
            len: *len,
            checked,
            reduced,
            skipped,
            max_rel_err: max_rel,
        });
    }
    report
}

/// A run small enough to train in well under a second.
pub const TINY_RUN: &str = r#"
run_id = "tiny"

[grammar]
v = 4
m = 2
s = 2
L = 3
seed = 3

[split]
train_fraction = 0.5
holdout_combo_fraction = 0.25
seed = 3

[split.transfer_dists]
1 = { kind = "zipf", exponent = 1.5 }

[sets]
gen_same_size = 64
transfer_size = 64

[model]
depth = 1
d_embed = 8
H = 2

[train]
eta = 1e-3
batch = 4
n_ct = 2
total_steps = 23
checkpoint_every = 5
eval_every = 10
eval_episodes = 32
spec_episodes = 4

[analysis]
episodes = 4
"#;
