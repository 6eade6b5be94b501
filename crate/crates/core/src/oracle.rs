//! Exact Bayes-optimal prediction of the final token from the query prefix.
//!
//! Inside weights are propagated bottom-up over the fixed tree shape. Nodes
//! off the rightmost spine see only observed tokens and are computed once;
//! the spine is recomputed for each candidate final token, which costs
//! O(depth * v * m * s) per candidate.

use rand::Rng as _;

use crate::error::{param_err, Error, Result};
use crate::grammar::{Grammar, LayerDists, Symbol};
use crate::rng::Rng;
use crate::task::SequenceSet;

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorResult {
    pub probs: Vec<f64>,
    /// Number of (root, rule assignment) derivations consistent with the prefix.
    pub support_count: u128,
    /// Most probable final token; ties go to the lowest id.
    pub argmax: Symbol,
}

#[derive(Clone)]
struct Inside {
    weight: Vec<f64>,
    count: Vec<u128>,
}

impl Inside {
    fn leaf(v: usize, token: Symbol) -> Self {
        let mut weight = vec![0.0; v];
        let mut count = vec![0; v];
        weight[token as usize] = 1.0;
        count[token as usize] = 1;
        Inside { weight, count }
    }
}

fn combine(grammar: &Grammar, level: usize, rule_probs: &[f64], children: &[Inside]) -> Inside {
    let (v, m) = (grammar.v(), grammar.m());
    let mut weight = vec![0.0; v];
    let mut count = vec![0u128; v];
    for y in 0..v {
        for (k, &pk) in rule_probs.iter().enumerate().take(m) {
            let tuple = grammar.production(level, y as Symbol, k as u32);
            let mut w = pk;
            let mut c: u128 = 1;
            for (child, &sym) in children.iter().zip(tuple) {
                w *= child.weight[sym as usize];
                c = c.saturating_mul(child.count[sym as usize]);
                if c == 0 {
                    break;
                }
            }
            if c > 0 {
                weight[y] += w;
                count[y] = count[y].saturating_add(c);
            }
        }
    }
    Inside { weight, count }
}

/// Posterior over the final token given the first `d - 1` tokens.
/// `root_prior` defaults to uniform over the `v` root symbols.
pub fn posterior_next_token(
    grammar: &Grammar,
    prefix: &[Symbol],
    layer_dists: &LayerDists,
    root_prior: Option<&[f64]>,
) -> Result<PosteriorResult> {
    let (v, s, depth) = (grammar.v(), grammar.s(), grammar.depth());
    let d = grammar.seq_len();
    if prefix.len() + 1 != d {
        return param_err(format!("prefix must hold {} tokens, got {}", d - 1, prefix.len()));
    }
    if let Some(&t) = prefix.iter().find(|&&t| t as usize >= v) {
        return Err(Error::InconsistentPrefix(format!("token {t} outside vocabulary")));
    }
    let uniform = vec![1.0 / v as f64; v];
    let prior = root_prior.unwrap_or(&uniform);
    if prior.len() != v {
        return param_err("root_prior must have one entry per symbol");
    }
    let level_probs: Vec<Vec<f64>> = (1..=depth)
        .map(|l| layer_dists.get(l).probs(grammar.m()))
        .collect::<Result<_>>()?;

    // fixed[level][pos] for every non-spine node; the spine slot is a placeholder
    let mut fixed: Vec<Vec<Inside>> = Vec::with_capacity(depth + 1);
    let mut leaves: Vec<Inside> = prefix.iter().map(|&t| Inside::leaf(v, t)).collect();
    leaves.push(Inside::leaf(v, 0));
    fixed.push(leaves);
    for level in 1..=depth {
        let below = &fixed[level - 1];
        let n = below.len() / s;
        let mut nodes = Vec::with_capacity(n);
        for pos in 0..n {
            if pos + 1 == n {
                nodes.push(Inside::leaf(v, 0));
            } else {
                nodes.push(combine(
                    grammar,
                    level,
                    &level_probs[level - 1],
                    &below[pos * s..(pos + 1) * s],
                ));
            }
        }
        fixed.push(nodes);
    }

    let mut z = vec![0.0; v];
    let mut support: u128 = 0;
    let mut children: Vec<Inside> = Vec::with_capacity(s);
    for c in 0..v as Symbol {
        let mut spine = Inside::leaf(v, c);
        for level in 1..=depth {
            let below = &fixed[level - 1];
            children.clear();
            children.extend_from_slice(&below[below.len() - s..below.len() - 1]);
            children.push(spine);
            spine = combine(grammar, level, &level_probs[level - 1], &children);
        }
        z[c as usize] = spine.weight.iter().zip(prior).map(|(w, p)| w * p).sum();
        support = spine
            .count
            .iter()
            .zip(prior)
            .filter(|(_, &p)| p > 0.0)
            .fold(support, |acc, (&n, _)| acc.saturating_add(n));
    }
    let total: f64 = z.iter().sum();
    if total <= 0.0 {
        return Err(Error::InconsistentPrefix(format!("no derivation completes {prefix:?}")));
    }
    let probs: Vec<f64> = z.iter().map(|w| w / total).collect();
    Ok(PosteriorResult {
        argmax: argmax(&probs) as Symbol,
        probs,
        support_count: support,
    })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `n_samples` queries (drawn uniformly from `set`) whose final
/// token equals the oracle argmax.
pub fn oracle_accuracy(
    grammar: &Grammar,
    set: &SequenceSet,
    layer_dists: &LayerDists,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if set.is_empty() {
        return param_err("oracle_accuracy needs a non-empty set");
    }
    if n_samples == 0 {
        return param_err("oracle_accuracy needs n_samples > 0");
    }
    let mut hits = 0usize;
    for _ in 0..n_samples {
        let tree = &set.trees[rng.random_range(0..set.len())];
        let (&target, prefix) = tree.leaves().split_last().unwrap();
        if posterior_next_token(grammar, prefix, layer_dists, None)?.argmax == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_samples as f64)
}

/// Oracle accuracy averaged over every member of `set`.
pub fn oracle_accuracy_exact(grammar: &Grammar, set: &SequenceSet, layer_dists: &LayerDists) -> Result<f64> {
    if set.is_empty() {
        return param_err("oracle_accuracy needs a non-empty set");
    }
    let mut hits = 0usize;
    for tree in set.iter() {
        let (&target, prefix) = tree.leaves().split_last().unwrap();
        if posterior_next_token(grammar, prefix, layer_dists, None)?.argmax == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}
