//! Train/held-out splits, the four evaluation conditions and few-shot episodes.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::grammar::{self, count_sequences, DerivationTree, Grammar, LayerDists, Sequence, Symbol};
use crate::rng::{self, Rng, Stream};

/// Largest total sequence count that is split by exhaustive enumeration.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    /// Level whose (production, child rules) combinations define novelty for
    /// gen-same. Defaults to the root level.
    #[serde(default)]
    pub holdout_combo_level: Option<usize>,
    /// Fraction of the combinations at `holdout_combo_level` whose sequences are
    /// kept out of both train and held-out, so that gen-same has material.
    #[serde(default)]
    pub holdout_combo_fraction: f64,
    #[serde(default)]
    pub transfer_dists: LayerDists,
    pub seed: u64,
    /// Distinct sequences drawn in sampling mode (grammars too large to enumerate).
    #[serde(default = "default_max_sequences")]
    pub max_sequences: usize,
}

fn default_max_sequences() -> usize {
    100_000
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            train_fraction,
            holdout_combo_level: None,
            holdout_combo_fraction: 0.0,
            transfer_dists: LayerDists::uniform(),
            seed,
            max_sequences: default_max_sequences(),
        }
    }

    pub fn combo_level(&self, grammar: &Grammar) -> usize {
        self.holdout_combo_level.unwrap_or(grammar.depth())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalCondition {
    Mem,
    Ind,
    GenSame,
    Transfer,
}

impl EvalCondition {
    pub const ALL: [EvalCondition; 4] = [
        EvalCondition::Mem,
        EvalCondition::Ind,
        EvalCondition::GenSame,
        EvalCondition::Transfer,
    ];

    /// Position in [`EvalCondition::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalCondition::Mem => "mem",
            EvalCondition::Ind => "ind",
            EvalCondition::GenSame => "gensame",
            EvalCondition::Transfer => "transfer",
        }
    }
}

impl fmt::Display for EvalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mem" => Ok(EvalCondition::Mem),
            "ind" => Ok(EvalCondition::Ind),
            "gensame" => Ok(EvalCondition::GenSame),
            "transfer" => Ok(EvalCondition::Transfer),
            _ => param_err(format!("unknown condition `{s}` (mem, ind, gensame, transfer)")),
        }
    }
}

/// A set of generable sequences, kept with their parses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceSet {
    pub trees: Vec<DerivationTree>,
}

impl SequenceSet {
    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DerivationTree> {
        self.trees.iter()
    }

    pub fn token_set(&self) -> HashSet<Vec<Symbol>> {
        self.trees.iter().map(|t| t.leaves().to_vec()).collect()
    }
}

impl FromIterator<DerivationTree> for SequenceSet {
    fn from_iter<I: IntoIterator<Item = DerivationTree>>(iter: I) -> Self {
        SequenceSet {
            trees: iter.into_iter().collect(),
        }
    }
}

/// A node's production together with the rules chosen by each of its children.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Combo {
    pub symbol: Symbol,
    pub rule: u32,
    pub child_rules: Vec<u32>,
}

/// Combinations used by every node of `tree` at `level` (which must be >= 2).
pub fn combos_at(tree: &DerivationTree, level: usize, s: usize) -> impl Iterator<Item = Combo> + '_ {
    let parents = &tree.symbols[level];
    let rules = &tree.choices[level - 1];
    let children = &tree.choices[level - 2];
    parents
        .iter()
        .zip(rules)
        .enumerate()
        .map(move |(pos, (&symbol, &rule))| Combo {
            symbol,
            rule,
            child_rules: children[pos * s..(pos + 1) * s].to_vec(),
        })
}

/// Every combination that can occur at `level`.
pub fn all_combos(grammar: &Grammar, level: usize) -> Vec<Combo> {
    let (v, m, s) = (grammar.v(), grammar.m(), grammar.s());
    let per = m.pow(s as u32);
    let live = grammar.reachable(level);
    let mut out = Vec::with_capacity(v * m * per);
    for symbol in (0..v as Symbol).filter(|&y| live[y as usize]) {
        for rule in 0..m as u32 {
            for code in 0..per {
                let mut child_rules = vec![0u32; s];
                let mut c = code;
                for slot in child_rules.iter_mut().rev() {
                    *slot = (c % m) as u32;
                    c /= m;
                }
                out.push(Combo {
                    symbol,
                    rule,
                    child_rules,
                });
            }
        }
    }
    out
}

fn check_combo_level(grammar: &Grammar, level: usize) -> Result<()> {
    if level < 2 || level > grammar.depth() {
        return param_err(format!(
            "combination level must lie in 2..={} (level 1 children are tokens)",
            grammar.depth()
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: SequenceSet,
    pub heldout: SequenceSet,
    /// Sequences using a withheld combination; in neither train nor held-out.
    pub withheld: SequenceSet,
    pub withheld_combos: BTreeSet<Combo>,
    /// True when the split was made over all sequences rather than a sample.
    pub enumerated: bool,
}

/// All sequences of the grammar, or a deduplicated sample when there are too many.
fn sequence_pool(grammar: &Grammar, spec: &SplitSpec, rng: &mut Rng) -> Result<(Vec<DerivationTree>, bool)> {
    let per_root = count_sequences(grammar, 0)?.exact();
    let total = per_root.and_then(|n| n.checked_mul(grammar.v() as u128));
    match total {
        Some(total) if total <= ENUMERATION_LIMIT => {
            let mut all = Vec::with_capacity(total as usize);
            for root in 0..grammar.v() as Symbol {
                all.extend(grammar::enumerate(grammar, root, ENUMERATION_LIMIT as usize)?);
            }
            Ok((all, true))
        }
        _ => {
            let samplers = grammar.samplers(&grammar.params().layer_dists)?;
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            let attempts = spec.max_sequences.saturating_mul(4);
            for _ in 0..attempts {
                if out.len() >= spec.max_sequences {
                    break;
                }
                let root = rng.random_range(0..grammar.v()) as Symbol;
                let tree = grammar::derive_sampled(grammar, &samplers, root, rng)?;
                if seen.insert(tree.leaves().to_vec()) {
                    out.push(tree);
                }
            }
            Ok((out, false))
        }
    }
}

pub fn build_splits(grammar: &Grammar, spec: &SplitSpec) -> Result<Splits> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
        return param_err(format!(
            "train_fraction must lie in (0, 1], got {}",
            spec.train_fraction
        ));
    }
    if !(0.0..1.0).contains(&spec.holdout_combo_fraction) {
        return param_err("holdout_combo_fraction must lie in [0, 1)");
    }
    let mut rng = rng::stream(spec.seed, Stream::Split);
    let (pool, enumerated) = sequence_pool(grammar, spec, &mut rng)?;

    let mut withheld_combos = BTreeSet::new();
    if spec.holdout_combo_fraction > 0.0 {
        let level = spec.combo_level(grammar);
        check_combo_level(grammar, level)?;
        let mut combos = all_combos(grammar, level);
        combos.shuffle(&mut rng);
        let n = ((combos.len() as f64 * spec.holdout_combo_fraction).round() as usize).max(1);
        // never withhold the last remaining combination of a production
        let mut remaining: HashMap<(Symbol, u32), usize> = HashMap::new();
        for c in &combos {
            *remaining.entry((c.symbol, c.rule)).or_default() += 1;
        }
        for combo in combos {
            if withheld_combos.len() == n {
                break;
            }
            let left = remaining.get_mut(&(combo.symbol, combo.rule)).expect("counted above");
            if *left > 1 {
                *left -= 1;
                withheld_combos.insert(combo);
            }
        }
    }

    let mut by_root: Vec<Vec<DerivationTree>> = vec![Vec::new(); grammar.v()];
    let mut withheld = Vec::new();
    for tree in pool {
        let hit = !withheld_combos.is_empty()
            && combos_at(&tree, spec.combo_level(grammar), grammar.s()).any(|c| withheld_combos.contains(&c));
        if hit {
            withheld.push(tree);
        } else {
            by_root[tree.root() as usize].push(tree);
        }
    }

    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for mut group in by_root {
        group.shuffle(&mut rng);
        let n_train = (group.len() as f64 * spec.train_fraction).round() as usize;
        let rest = group.split_off(n_train.min(group.len()));
        train.extend(group);
        heldout.extend(rest);
    }
    if train.is_empty() {
        return param_err("train_fraction leaves the train set empty");
    }
    Ok(Splits {
        train: SequenceSet { trees: train },
        heldout: SequenceSet { trees: heldout },
        withheld: SequenceSet { trees: withheld },
        withheld_combos,
        enumerated,
    })
}

/// Sequences built from rules seen in `train` that contain at least one
/// combination at `level` that never occurs in `train`.
pub fn build_gen_same(
    grammar: &Grammar,
    train: &SequenceSet,
    level: usize,
    max_size: usize,
    rng: &mut Rng,
) -> Result<SequenceSet> {
    check_combo_level(grammar, level)?;
    let (v, m, s, depth) = (grammar.v(), grammar.m(), grammar.s(), grammar.depth());

    let mut rule_seen = vec![false; depth * v * m];
    for l in 1..=depth {
        for (y, live) in grammar.reachable(l).into_iter().enumerate() {
            if !live {
                rule_seen[((l - 1) * v + y) * m..((l - 1) * v + y + 1) * m].fill(true);
            }
        }
    }
    let mut covered = HashSet::new();
    for tree in train.iter() {
        for l in 1..=depth {
            for (&y, &k) in tree.symbols[l].iter().zip(&tree.choices[l - 1]) {
                rule_seen[((l - 1) * v + y as usize) * m + k as usize] = true;
            }
        }
        covered.extend(combos_at(tree, level, s));
    }
    if let Some(i) = rule_seen.iter().position(|&seen| !seen) {
        let (l, y, k) = (i / (v * m) + 1, (i / m) % v, i % m);
        return Err(Error::Infeasible(format!(
            "rule {k} of symbol {y} at level {l} never appears in train"
        )));
    }
    let mut novel: Vec<Vec<Combo>> = vec![Vec::new(); v];
    for combo in all_combos(grammar, level) {
        if !covered.contains(&combo) {
            novel[combo.symbol as usize].push(combo);
        }
    }
    if novel.iter().all(Vec::is_empty) {
        return Err(Error::Infeasible(format!(
            "train covers every combination at level {level}"
        )));
    }

    let samplers = grammar.samplers(&grammar.params().layer_dists)?;
    let train_tokens = train.token_set();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let attempts = max_size.saturating_mul(20).max(1000);
    for _ in 0..attempts {
        if out.len() >= max_size {
            break;
        }
        let root = rng.random_range(0..v) as Symbol;
        let mut tree = grammar::derive_sampled(grammar, &samplers, root, rng)?;
        // plant a novel combination at one eligible node, then redraw below it
        let eligible: Vec<usize> = tree.symbols[level]
            .iter()
            .enumerate()
            .filter(|(_, &y)| !novel[y as usize].is_empty())
            .map(|(pos, _)| pos)
            .collect();
        let Some(&pos) = eligible.get(rng.random_range(0..eligible.len().max(1))) else {
            continue;
        };
        let options = &novel[tree.symbols[level][pos] as usize];
        let combo = &options[rng.random_range(0..options.len())];
        let mut choices = tree.choices.clone();
        choices[level - 1][pos] = combo.rule;
        choices[level - 2][pos * s..(pos + 1) * s].copy_from_slice(&combo.child_rules);
        tree = grammar.expand(root, choices)?;
        if train_tokens.contains(tree.leaves()) {
            continue;
        }
        if seen.insert(tree.leaves().to_vec()) {
            out.push(tree);
        }
    }
    Ok(SequenceSet { trees: out })
}

/// `n` sequences from the training rule tables under the shifted per-level
/// distributions of `spec.transfer_dists`.
pub fn build_transfer(grammar: &Grammar, spec: &SplitSpec, n: usize, rng: &mut Rng) -> Result<SequenceSet> {
    if spec
        .transfer_dists
        .equivalent(&grammar.params().layer_dists, grammar.depth())
    {
        return param_err("transfer_dists match the training distributions at every level");
    }
    for &level in spec.transfer_dists.0.keys() {
        if level == 0 || level > grammar.depth() {
            return param_err(format!("transfer_dists level {level} outside 1..={}", grammar.depth()));
        }
    }
    let samplers = grammar.samplers(&spec.transfer_dists)?;
    (0..n)
        .map(|_| {
            let root = rng.random_range(0..grammar.v()) as Symbol;
            grammar::derive_sampled(grammar, &samplers, root, rng)
        })
        .collect::<Result<Vec<_>>>()
        .map(|trees| SequenceSet { trees })
}

/// Where demonstrations for a condition come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// Mem and Ind from train; GenSame and Transfer from their own sets.
    #[default]
    Matched,
    /// Always from train.
    Train,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub context: Vec<Sequence>,
    pub query_prefix: Vec<Symbol>,
    pub target: Symbol,
    pub query_root: Symbol,
    pub condition: EvalCondition,
}

impl Episode {
    pub fn from_parts(context: Vec<Sequence>, query: &Sequence, condition: EvalCondition) -> Self {
        let (&target, prefix) = query.tokens.split_last().expect("non-empty query");
        Episode {
            context,
            query_prefix: prefix.to_vec(),
            target,
            query_root: query.root,
            condition,
        }
    }

    pub fn n_ct(&self) -> usize {
        self.context.len()
    }
}

/// Draws a query from `queries` and `n_ct` distinct demonstrations from
/// `contexts`. When both are the same set the query is never reused as a
/// demonstration.
pub fn make_episode(
    contexts: &SequenceSet,
    queries: &SequenceSet,
    same_set: bool,
    n_ct: usize,
    rng: &mut Rng,
    condition: EvalCondition,
) -> Result<Episode> {
    if queries.is_empty() {
        return param_err(format!("no sequences to draw {condition} queries from"));
    }
    let (query, ctx_idx): (usize, Vec<usize>) = if same_set {
        if queries.len() < n_ct + 1 {
            return param_err(format!(
                "{condition}: need {} sequences for n_ct = {n_ct}, have {}",
                n_ct + 1,
                queries.len()
            ));
        }
        let picks = index::sample(rng, queries.len(), n_ct + 1).into_vec();
        (picks[0], picks[1..].to_vec())
    } else {
        if contexts.len() < n_ct {
            return param_err(format!(
                "{condition}: need {n_ct} context sequences, have {}",
                contexts.len()
            ));
        }
        let q = rng.random_range(0..queries.len());
        (q, index::sample(rng, contexts.len(), n_ct).into_vec())
    };
    let context = ctx_idx.iter().map(|&i| contexts.trees[i].sequence()).collect();
    Ok(Episode::from_parts(
        context,
        &queries.trees[query].sequence(),
        condition,
    ))
}

/// The evaluation sets of one experiment.
#[derive(Clone, Debug, Default)]
pub struct ConditionSets {
    pub train: SequenceSet,
    pub heldout: SequenceSet,
    pub gen_same: SequenceSet,
    pub transfer: SequenceSet,
    pub context_source: ContextSource,
}

impl ConditionSets {
    pub fn set(&self, condition: EvalCondition) -> &SequenceSet {
        match condition {
            EvalCondition::Mem => &self.train,
            EvalCondition::Ind => &self.heldout,
            EvalCondition::GenSame => &self.gen_same,
            EvalCondition::Transfer => &self.transfer,
        }
    }

    pub fn episode(&self, condition: EvalCondition, n_ct: usize, rng: &mut Rng) -> Result<Episode> {
        let queries = self.set(condition);
        let from_train =
            matches!(condition, EvalCondition::Mem | EvalCondition::Ind) || self.context_source == ContextSource::Train;
        let contexts = if from_train { &self.train } else { queries };
        let same = std::ptr::eq(contexts, queries);
        make_episode(contexts, queries, same, n_ct, rng, condition)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Causal,
    Masked,
}

/// Token ids of the specials, all placed after the grammar vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub v: u32,
    pub mask: Option<u32>,
    pub sep: Option<u32>,
    pub root: Option<u32>,
}

impl TokenLayout {
    /// Specials appended in the order mask, sep, root, as each is needed.
    pub fn standard(v: usize, mode: Mode, sep: bool, root_slot: bool) -> Self {
        let mut next = v as u32;
        let mut take = |on: bool| {
            on.then(|| {
                next += 1;
                next - 1
            })
        };
        let mask = take(mode == Mode::Masked);
        let sep = take(sep);
        let root = take(root_slot);
        TokenLayout {
            v: v as u32,
            mask,
            sep,
            root,
        }
    }

    pub fn vocab_size(&self) -> usize {
        [self.mask, self.sep, self.root]
            .iter()
            .flatten()
            .map(|&id| id as usize + 1)
            .max()
            .unwrap_or(0)
            .max(self.v as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let specials: Vec<u32> = [self.mask, self.sep, self.root].iter().flatten().copied().collect();
        if let Some(id) = specials.iter().find(|&&id| id < self.v) {
            return Err(Error::Encoding(format!(
                "special id {id} collides with grammar vocabulary 0..{}",
                self.v
            )));
        }
        let distinct: HashSet<_> = specials.iter().collect();
        if distinct.len() != specials.len() {
            return Err(Error::Encoding("special ids must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    /// Causal: `ids.len()`, the slot after the stream. Masked: index of the MASK token.
    pub target_position: usize,
    pub root_slot: Option<usize>,
}

impl TokenStream {
    /// Position whose logits predict the target.
    pub fn readout_position(&self) -> usize {
        if self.target_position == self.ids.len() {
            self.target_position - 1
        } else {
            self.target_position
        }
    }
}

pub fn encode(episode: &Episode, mode: Mode, layout: &TokenLayout) -> Result<TokenStream> {
    layout.validate()?;
    let mut ids = Vec::new();
    let mut root_slot = None;
    if let Some(root) = layout.root {
        if mode != Mode::Masked {
            return Err(Error::Encoding("the root slot exists only in masked mode".into()));
        }
        root_slot = Some(0);
        ids.push(root);
    }
    for seq in &episode.context {
        ids.extend_from_slice(&seq.tokens);
        if let Some(sep) = layout.sep {
            ids.push(sep);
        }
    }
    ids.extend_from_slice(&episode.query_prefix);
    let target_position = match mode {
        Mode::Causal => ids.len(),
        Mode::Masked => {
            let mask = layout
                .mask
                .ok_or_else(|| Error::Encoding("masked mode needs a MASK id".into()))?;
            ids.push(mask);
            ids.len() - 1
        }
    };
    Ok(TokenStream {
        ids,
        target_position,
        root_slot,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedStream {
    pub context: Vec<Vec<Symbol>>,
    pub query_prefix: Vec<Symbol>,
    pub mask_position: Option<usize>,
}

pub fn decode(stream: &TokenStream, layout: &TokenLayout, seq_len: usize) -> Result<DecodedStream> {
    let mut ids = &stream.ids[..];
    if stream.root_slot.is_some() {
        ids = &ids[1..];
    }
    let mask_position = (stream.target_position < stream.ids.len()).then_some(stream.target_position);
    if mask_position.is_some() {
        ids = &ids[..ids.len() - 1];
    }
    let chunk = seq_len + usize::from(layout.sep.is_some());
    if ids.len() + 1 < seq_len || !(ids.len() + 1 - seq_len).is_multiple_of(chunk) {
        return Err(Error::Encoding(format!(
            "stream of {} ids does not fit sequence length {seq_len}",
            ids.len()
        )));
    }
    let n_ct = (ids.len() + 1 - seq_len) / chunk;
    let (ctx, prefix) = ids.split_at(n_ct * chunk);
    Ok(DecodedStream {
        context: ctx.chunks(chunk).map(|c| c[..seq_len].to_vec()).collect(),
        query_prefix: prefix.to_vec(),
        mask_position,
    })
}

const EPISODE_SCHEMA: &str = "rhm-episodes";
const EPISODE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub condition: EvalCondition,
    pub tokens: Vec<u32>,
    pub target_position: usize,
    pub target: Symbol,
    pub root: Symbol,
}

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    schema: String,
    version: u32,
}

pub fn write_episodes<W: Write>(records: &[EpisodeRecord], mut out: W) -> Result<()> {
    let header = EpisodeHeader {
        schema: EPISODE_SCHEMA.into(),
        version: EPISODE_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap())?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).unwrap())?;
    }
    Ok(())
}

pub fn read_episodes<R: BufRead>(input: R) -> Result<Vec<EpisodeRecord>> {
    let mut lines = input.lines();
    let header: EpisodeHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).map_err(|e| Error::Format(e.to_string()))?,
        None => return Err(Error::Format("empty episode file".into())),
    };
    if header.schema != EPISODE_SCHEMA || header.version != EPISODE_VERSION {
        return Err(Error::Format("unsupported episode schema".into()));
    }
    lines
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(|e| Error::Format(e.to_string())))
        .collect()
}
