//! Random Hierarchy Model grammars.
//!
//! A grammar has `depth` levels of production rules. Level `depth` rewrites
//! the root symbol, level 1 emits the observable tokens. Every symbol at
//! every level owns exactly `m` productions, each an `s`-tuple of symbols one
//! level down, and no tuple is shared within a level, so every sequence has
//! exactly one parse.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::rng::{self, Rng, Stream};

pub type Symbol = u32;

/// Distribution over the `m` rule indices of a symbol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RuleDistribution {
    #[default]
    Uniform,
    Zipf {
        exponent: f64,
    },
}

impl RuleDistribution {
    pub fn exponent(&self) -> f64 {
        match *self {
            RuleDistribution::Uniform => 0.0,
            RuleDistribution::Zipf { exponent } => exponent,
        }
    }

    /// Uniform and `Zipf { exponent: 0 }` describe the same distribution.
    pub fn same_as(&self, other: &RuleDistribution) -> bool {
        self.exponent() == other.exponent()
    }

    pub fn probs(&self, m: usize) -> Result<Vec<f64>> {
        zipf_probs(m, self.exponent())
    }
}

/// `p_k = k^-a / sum_j j^-a` for ranks `k = 1..=m`.
pub fn zipf_probs(m: usize, a: f64) -> Result<Vec<f64>> {
    if m == 0 {
        return param_err("zipf_probs needs m >= 1");
    }
    if a.is_nan() || a < 0.0 || !a.is_finite() {
        return param_err(format!("zipf exponent must be finite and >= 0, got {a}"));
    }
    let weights: Vec<f64> = (1..=m).map(|k| (k as f64).powf(-a)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Per-level rule distributions, keyed by level `1..=depth`. Missing levels
/// are uniform.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerDists(pub BTreeMap<usize, RuleDistribution>);

impl LayerDists {
    pub fn uniform() -> Self {
        LayerDists(BTreeMap::new())
    }

    pub fn get(&self, level: usize) -> RuleDistribution {
        self.0.get(&level).copied().unwrap_or_default()
    }

    pub fn with(mut self, level: usize, dist: RuleDistribution) -> Self {
        self.0.insert(level, dist);
        self
    }

    /// True when both assign the same distribution at every level in `1..=depth`.
    pub fn equivalent(&self, other: &LayerDists, depth: usize) -> bool {
        (1..=depth).all(|l| self.get(l).same_as(&other.get(l)))
    }
}

impl Serialize for LayerDists {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<String, RuleDistribution> = self.0.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        map.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for LayerDists {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, RuleDistribution>::deserialize(de)?;
        let mut out = BTreeMap::new();
        for (k, v) in map {
            let level: usize = k
                .parse()
                .map_err(|_| serde::de::Error::custom(format!("level key `{k}` is not an integer")))?;
            out.insert(level, v);
        }
        Ok(LayerDists(out))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarParams {
    /// Symbols per level.
    pub v: usize,
    /// Productions per symbol.
    pub m: usize,
    /// Branching factor.
    pub s: usize,
    /// Number of rule levels.
    #[serde(rename = "L")]
    pub depth: usize,
    pub seed: u64,
    #[serde(default)]
    pub layer_dists: LayerDists,
}

impl GrammarParams {
    pub fn new(v: usize, m: usize, s: usize, depth: usize, seed: u64) -> Self {
        GrammarParams {
            v,
            m,
            s,
            depth,
            seed,
            layer_dists: LayerDists::uniform(),
        }
    }

    /// Sequence length `s^depth`.
    pub fn seq_len(&self) -> usize {
        self.s.pow(self.depth as u32)
    }

    /// Number of rule-bearing nodes in one derivation tree.
    pub fn internal_nodes(&self) -> usize {
        (0..self.depth).map(|e| self.s.pow(e as u32)).sum()
    }

    /// Nodes at `level`; level 0 are the leaves.
    pub fn nodes_at(&self, level: usize) -> usize {
        self.s.pow((self.depth - level) as u32)
    }

    fn tuple_pool(&self) -> Option<usize> {
        self.v.checked_pow(self.s as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.v == 0 || self.m == 0 {
            return param_err("v and m must be positive");
        }
        if self.s < 2 {
            return param_err("branching factor s must be >= 2");
        }
        if self.depth == 0 {
            return param_err("depth L must be >= 1");
        }
        if self.s.checked_pow(self.depth as u32).is_none() || self.v > u32::MAX as usize {
            return param_err("grammar too large to represent");
        }
        let need = self.m.checked_mul(self.v);
        match (need, self.tuple_pool()) {
            (Some(need), Some(pool)) if need > pool => param_err(format!(
                "m*v = {need} exceeds the {pool} distinct {}-tuples over {} symbols",
                self.s, self.v
            )),
            (None, _) => param_err("m*v overflows"),
            _ => Ok(()),
        }?;
        for (&level, dist) in &self.layer_dists.0 {
            if level == 0 || level > self.depth {
                return param_err(format!("layer_dists level {level} outside 1..={}", self.depth));
            }
            dist.probs(self.m)?;
        }
        Ok(())
    }
}

/// Per-level sampler over rule indices.
#[derive(Clone, Debug)]
pub(crate) struct RuleSampler {
    m: usize,
    cumulative: Option<Vec<f64>>,
}

impl RuleSampler {
    pub(crate) fn new(m: usize, dist: RuleDistribution) -> Result<Self> {
        let probs = dist.probs(m)?;
        if dist.exponent() == 0.0 {
            return Ok(RuleSampler { m, cumulative: None });
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(RuleSampler {
            m,
            cumulative: Some(cumulative),
        })
    }

    pub(crate) fn sample(&self, rng: &mut Rng) -> u32 {
        match &self.cumulative {
            None => rng.random_range(0..self.m) as u32,
            Some(cum) => {
                let u: f64 = rng.random();
                cum.iter().position(|&c| u < c).unwrap_or(self.m - 1) as u32
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Grammar {
    params: GrammarParams,
    /// `rules[level - 1][symbol * m + k]` is the production's tuple start in `tuples`.
    tuples: Vec<Vec<Symbol>>,
    /// Tuple code -> (symbol, rule index), per level.
    reverse: Vec<HashMap<u64, (Symbol, u32)>>,
}

impl PartialEq for Grammar {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.tuples == other.tuples
    }
}

impl Grammar {
    /// Builds a grammar from explicit rule tables, `tables[level - 1][symbol][k]`.
    pub fn from_tables(params: GrammarParams, tables: Vec<Vec<Vec<Vec<Symbol>>>>) -> Result<Self> {
        params.validate()?;
        if tables.len() != params.depth {
            return param_err(format!("expected {} levels, got {}", params.depth, tables.len()));
        }
        let mut flat = Vec::with_capacity(params.depth);
        for (li, level) in tables.iter().enumerate() {
            if level.len() != params.v {
                return param_err(format!(
                    "level {} has {} symbols, want {}",
                    li + 1,
                    level.len(),
                    params.v
                ));
            }
            let mut out = Vec::with_capacity(params.v * params.m * params.s);
            for (y, prods) in level.iter().enumerate() {
                if prods.len() != params.m {
                    return param_err(format!(
                        "symbol {y} at level {} has {} productions, want {}",
                        li + 1,
                        prods.len(),
                        params.m
                    ));
                }
                for tuple in prods {
                    if tuple.len() != params.s || tuple.iter().any(|&t| t as usize >= params.v) {
                        return param_err(format!("malformed production for symbol {y} at level {}", li + 1));
                    }
                    out.extend_from_slice(tuple);
                }
            }
            flat.push(out);
        }
        Self::from_flat(params, flat)
    }

    fn from_flat(params: GrammarParams, tuples: Vec<Vec<Symbol>>) -> Result<Self> {
        let (v, m, s) = (params.v, params.m, params.s);
        let mut reverse = Vec::with_capacity(params.depth);
        for (li, level) in tuples.iter().enumerate() {
            let mut map = HashMap::with_capacity(v * m);
            for y in 0..v {
                for k in 0..m {
                    let start = (y * m + k) * s;
                    let code = encode_tuple(&level[start..start + s], v);
                    if map.insert(code, (y as Symbol, k as u32)).is_some() {
                        return param_err(format!("level {} reuses a production tuple", li + 1));
                    }
                }
            }
            reverse.push(map);
        }
        Ok(Grammar {
            params,
            tuples,
            reverse,
        })
    }

    pub fn params(&self) -> &GrammarParams {
        &self.params
    }

    pub fn v(&self) -> usize {
        self.params.v
    }

    pub fn m(&self) -> usize {
        self.params.m
    }

    pub fn s(&self) -> usize {
        self.params.s
    }

    pub fn depth(&self) -> usize {
        self.params.depth
    }

    pub fn seq_len(&self) -> usize {
        self.params.seq_len()
    }

    /// The `s`-tuple produced by `symbol` at `level` with rule `k`.
    pub fn production(&self, level: usize, symbol: Symbol, k: u32) -> &[Symbol] {
        let s = self.params.s;
        let start = (symbol as usize * self.params.m + k as usize) * s;
        &self.tuples[level - 1][start..start + s]
    }

    /// Which production (symbol, rule index) at `level` emits `tuple`.
    pub fn lookup(&self, level: usize, tuple: &[Symbol]) -> Option<(Symbol, u32)> {
        if tuple.iter().any(|&t| t as usize >= self.params.v) {
            return None;
        }
        self.reverse[level - 1]
            .get(&encode_tuple(tuple, self.params.v))
            .copied()
    }

    pub(crate) fn samplers(&self, dists: &LayerDists) -> Result<Vec<RuleSampler>> {
        (1..=self.depth())
            .map(|l| RuleSampler::new(self.m(), dists.get(l)))
            .collect()
    }

    /// Which symbols occur at `level` in some derivation (every symbol at the root level).
    pub fn reachable(&self, level: usize) -> Vec<bool> {
        let (v, m) = (self.v(), self.m());
        let mut live = vec![true; v];
        for l in (level + 1..=self.depth()).rev() {
            let mut below = vec![false; v];
            for y in (0..v).filter(|&y| live[y]) {
                for k in 0..m {
                    for &c in self.production(l, y as Symbol, k as u32) {
                        below[c as usize] = true;
                    }
                }
            }
            live = below;
        }
        live
    }

    /// Rebuilds the tree for explicit rule choices, given top-down as
    /// `choices[level - 1][position]`.
    pub fn expand(&self, root: Symbol, choices: Vec<Vec<u32>>) -> Result<DerivationTree> {
        let p = &self.params;
        if root as usize >= p.v {
            return param_err(format!("root {root} outside vocabulary of {}", p.v));
        }
        if choices.len() != p.depth {
            return param_err("choice vector has wrong number of levels");
        }
        let mut symbols = vec![Vec::new(); p.depth + 1];
        symbols[p.depth] = vec![root];
        for level in (1..=p.depth).rev() {
            let ch = &choices[level - 1];
            if ch.len() != p.nodes_at(level) || ch.iter().any(|&k| k as usize >= p.m) {
                return param_err(format!("bad rule choices at level {level}"));
            }
            let mut below = Vec::with_capacity(p.nodes_at(level - 1));
            for (&y, &k) in symbols[level].iter().zip(ch) {
                below.extend_from_slice(self.production(level, y, k));
            }
            symbols[level - 1] = below;
        }
        Ok(DerivationTree { symbols, choices })
    }
}

fn encode_tuple(tuple: &[Symbol], v: usize) -> u64 {
    tuple.iter().fold(0u64, |acc, &t| acc * v as u64 + t as u64)
}

/// Full latent parse of one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DerivationTree {
    /// `symbols[level][position]`; level 0 holds the tokens, level `depth` the root.
    pub symbols: Vec<Vec<Symbol>>,
    /// `choices[level - 1][position]`: rule index used at each internal node.
    pub choices: Vec<Vec<u32>>,
}

impl DerivationTree {
    pub fn root(&self) -> Symbol {
        self.symbols[self.symbols.len() - 1][0]
    }

    pub fn leaves(&self) -> &[Symbol] {
        &self.symbols[0]
    }

    pub fn depth(&self) -> usize {
        self.choices.len()
    }

    pub fn internal_nodes(&self) -> usize {
        self.choices.iter().map(Vec::len).sum()
    }

    /// Rule choices flattened top-down (root level first).
    pub fn choice_vector(&self) -> Vec<u32> {
        self.choices.iter().rev().flatten().copied().collect()
    }

    pub fn sequence(&self) -> Sequence {
        Sequence {
            tokens: self.leaves().to_vec(),
            root: self.root(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<Symbol>,
    pub root: Symbol,
}

pub fn sample_grammar(params: &GrammarParams) -> Result<Grammar> {
    params.validate()?;
    let mut rng = rng::stream(params.seed, Stream::Grammar);
    let (v, m, s) = (params.v, params.m, params.s);
    let pool = params.tuple_pool().expect("validated");
    let mut tuples = Vec::with_capacity(params.depth);
    for _ in 0..params.depth {
        // distinct tuple codes in random order; symbol y takes codes y*m..(y+1)*m
        let codes = index::sample(&mut rng, pool, v * m);
        let mut level = Vec::with_capacity(v * m * s);
        for code in codes.iter() {
            let mut digits = vec![0 as Symbol; s];
            let mut c = code;
            for slot in digits.iter_mut().rev() {
                *slot = (c % v) as Symbol;
                c /= v;
            }
            level.extend_from_slice(&digits);
        }
        tuples.push(level);
    }
    Grammar::from_flat(params.clone(), tuples)
}

/// Samples a derivation below `root` using the grammar's own layer distributions.
pub fn derive(grammar: &Grammar, root: Symbol, rng: &mut Rng) -> Result<(DerivationTree, Sequence)> {
    derive_with(grammar, &grammar.params.layer_dists, root, rng)
}

/// Like [`derive`] but with the per-level rule distributions replaced.
pub fn derive_with(
    grammar: &Grammar,
    dists: &LayerDists,
    root: Symbol,
    rng: &mut Rng,
) -> Result<(DerivationTree, Sequence)> {
    let samplers = grammar.samplers(dists)?;
    let tree = derive_sampled(grammar, &samplers, root, rng)?;
    let seq = tree.sequence();
    Ok((tree, seq))
}

pub(crate) fn derive_sampled(
    grammar: &Grammar,
    samplers: &[RuleSampler],
    root: Symbol,
    rng: &mut Rng,
) -> Result<DerivationTree> {
    let p = &grammar.params;
    if root as usize >= p.v {
        return param_err(format!("root {root} outside vocabulary of {}", p.v));
    }
    let mut choices = vec![Vec::new(); p.depth];
    for level in (1..=p.depth).rev() {
        choices[level - 1] = (0..p.nodes_at(level))
            .map(|_| samplers[level - 1].sample(rng))
            .collect();
    }
    grammar.expand(root, choices)
}

/// Inverts a derivation. Fails when some tuple matches no production.
pub fn parse(grammar: &Grammar, tokens: &[Symbol]) -> Result<DerivationTree> {
    let p = &grammar.params;
    if tokens.len() != p.seq_len() {
        return Err(Error::Parse(format!(
            "expected {} tokens, got {}",
            p.seq_len(),
            tokens.len()
        )));
    }
    let mut symbols = Vec::with_capacity(p.depth + 1);
    let mut choices = Vec::with_capacity(p.depth);
    symbols.push(tokens.to_vec());
    for level in 1..=p.depth {
        let below = &symbols[level - 1];
        let mut up = Vec::with_capacity(below.len() / p.s);
        let mut ks = Vec::with_capacity(below.len() / p.s);
        for (pos, tuple) in below.chunks(p.s).enumerate() {
            let (y, k) = grammar
                .lookup(level, tuple)
                .ok_or_else(|| Error::Parse(format!("no production at level {level} emits {tuple:?} (node {pos})")))?;
            up.push(y);
            ks.push(k);
        }
        symbols.push(up);
        choices.push(ks);
    }
    Ok(DerivationTree { symbols, choices })
}

/// Number of distinct sequences below one root symbol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SequenceCount {
    Exact(u128),
    /// Too large for `u128`; natural log of the count.
    Overflow {
        ln_count: f64,
    },
}

impl SequenceCount {
    pub fn exact(&self) -> Option<u128> {
        match *self {
            SequenceCount::Exact(n) => Some(n),
            SequenceCount::Overflow { .. } => None,
        }
    }
}

/// `m^internal_nodes` sequences per root symbol.
pub fn count_sequences(grammar: &Grammar, root: Symbol) -> Result<SequenceCount> {
    if root as usize >= grammar.v() {
        return param_err(format!("root {root} outside vocabulary"));
    }
    Ok(count_for(grammar.m(), grammar.params.internal_nodes()))
}

pub(crate) fn count_for(m: usize, nodes: usize) -> SequenceCount {
    let mut acc: u128 = 1;
    for _ in 0..nodes {
        match acc.checked_mul(m as u128) {
            Some(next) => acc = next,
            None => {
                return SequenceCount::Overflow {
                    ln_count: nodes as f64 * (m as f64).ln(),
                }
            }
        }
    }
    SequenceCount::Exact(acc)
}

/// All derivations below `root`, in a fixed order. Fails past `limit`.
pub fn enumerate(grammar: &Grammar, root: Symbol, limit: usize) -> Result<Vec<DerivationTree>> {
    let total = count_sequences(grammar, root)?
        .exact()
        .filter(|&n| n <= limit as u128)
        .ok_or_else(|| Error::Parameter(format!("more than {limit} derivations below root {root}")))?
        as usize;
    let p = &grammar.params;
    let nodes = p.internal_nodes();
    let mut digits = vec![0u32; nodes];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        let mut choices = vec![Vec::new(); p.depth];
        let mut it = digits.iter();
        for level in (1..=p.depth).rev() {
            choices[level - 1] = it.by_ref().take(p.nodes_at(level)).copied().collect();
        }
        out.push(grammar.expand(root, choices)?);
        // mixed-radix increment, last digit fastest
        for d in digits.iter_mut().rev() {
            *d += 1;
            if (*d as usize) < p.m {
                break;
            }
            *d = 0;
        }
    }
    Ok(out)
}

const GRAMMAR_MAGIC: &str = "rhm-grammar";
const GRAMMAR_VERSION: u32 = 1;

/// Text dump: a header line, the parameters, then one `rule` line per production.
pub fn write_grammar<W: Write>(grammar: &Grammar, mut out: W) -> Result<()> {
    let p = &grammar.params;
    let mut buf = String::new();
    writeln!(buf, "{GRAMMAR_MAGIC} {GRAMMAR_VERSION}").unwrap();
    writeln!(buf, "v {}\nm {}\ns {}\nL {}\nseed {}", p.v, p.m, p.s, p.depth, p.seed).unwrap();
    for (level, dist) in &p.layer_dists.0 {
        match dist {
            RuleDistribution::Uniform => writeln!(buf, "dist {level} uniform").unwrap(),
            RuleDistribution::Zipf { exponent } => writeln!(buf, "dist {level} zipf {exponent}").unwrap(),
        }
    }
    for level in 1..=p.depth {
        for y in 0..p.v as Symbol {
            for k in 0..p.m as u32 {
                write!(buf, "rule {level} {y} {k}").unwrap();
                for t in grammar.production(level, y, k) {
                    write!(buf, " {t}").unwrap();
                }
                buf.push('\n');
            }
        }
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn read_grammar<R: BufRead>(input: R) -> Result<Grammar> {
    let bad = |line: usize, msg: &str| Error::Format(format!("grammar file line {line}: {msg}"));
    let mut lines = input.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let header = header?;
    if header != format!("{GRAMMAR_MAGIC} {GRAMMAR_VERSION}") {
        return Err(bad(1, "unsupported header"));
    }
    let mut fields: HashMap<&'static str, u64> = HashMap::new();
    let mut dists = BTreeMap::new();
    let mut rules: Vec<(usize, usize, usize, Vec<Symbol>)> = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let n = i + 1;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(n, "expected integer"));
        match parts.as_slice() {
            [] => continue,
            [key @ ("v" | "m" | "s" | "L" | "seed"), value] => {
                let key: &'static str = match *key {
                    "v" => "v",
                    "m" => "m",
                    "s" => "s",
                    "L" => "L",
                    _ => "seed",
                };
                fields.insert(key, num(value)?);
            }
            ["dist", level, "uniform"] => {
                dists.insert(num(level)? as usize, RuleDistribution::Uniform);
            }
            ["dist", level, "zipf", a] => {
                let exponent = a.parse().map_err(|_| bad(n, "bad exponent"))?;
                dists.insert(num(level)? as usize, RuleDistribution::Zipf { exponent });
            }
            ["rule", level, y, k, tuple @ ..] => {
                let tuple = tuple
                    .iter()
                    .map(|t| num(t).map(|x| x as Symbol))
                    .collect::<Result<_>>()?;
                rules.push((num(level)? as usize, num(y)? as usize, num(k)? as usize, tuple));
            }
            _ => return Err(bad(n, "unrecognized line")),
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("grammar file lacks `{k}`")))
    };
    let params = GrammarParams {
        v: get("v")? as usize,
        m: get("m")? as usize,
        s: get("s")? as usize,
        depth: get("L")? as usize,
        seed: get("seed")?,
        layer_dists: LayerDists(dists),
    };
    params.validate()?;
    let mut tables = vec![vec![vec![Vec::new(); params.m]; params.v]; params.depth];
    let mut seen = 0;
    for (level, y, k, tuple) in rules {
        if level == 0 || level > params.depth || y >= params.v || k >= params.m {
            return Err(Error::Format(format!("rule ({level}, {y}, {k}) out of range")));
        }
        if !tables[level - 1][y][k].is_empty() {
            return Err(Error::Format(format!("duplicate rule ({level}, {y}, {k})")));
        }
        tables[level - 1][y][k] = tuple;
        seen += 1;
    }
    if seen != params.depth * params.v * params.m {
        return Err(Error::Format("grammar file is missing rules".into()));
    }
    Grammar::from_tables(params, tables)
}

const DATASET_SCHEMA: &str = "rhm-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    version: u32,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tokens: Vec<Symbol>,
    pub root: Symbol,
    /// Rule choices, root level first.
    pub rules: Vec<u32>,
}

impl DatasetRecord {
    pub fn from_tree(tree: &DerivationTree) -> Self {
        DatasetRecord {
            tokens: tree.leaves().to_vec(),
            root: tree.root(),
            rules: tree.choice_vector(),
        }
    }
}

/// Line-delimited JSON: schema header, then one record per sequence.
pub fn write_dataset<'a, W: Write>(trees: impl IntoIterator<Item = &'a DerivationTree>, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.into(),
        version: DATASET_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap())?;
    for tree in trees {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&DatasetRecord::from_tree(tree)).unwrap()
        )?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>> {
    let mut lines = input.lines();
    let header: DatasetHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).map_err(|e| Error::Format(e.to_string()))?,
        None => return Err(Error::Format("empty dataset file".into())),
    };
    if header.schema != DATASET_SCHEMA || header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset schema {} v{}",
            header.schema, header.version
        )));
    }
    lines
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(|e| Error::Format(e.to_string())))
        .collect()
}
