//! Layer specialization, hidden-state PCA and attention-head clustering.
//!
//! A head's specialization score is the correlation ratio (eta squared) of its
//! attention weights grouped by the tree distance between query and key:
//! the height of their lowest common ancestor in the derivation tree.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::linalg::Scalar;
use crate::model::ForwardTrace;
use crate::task::EvalCondition;

/// Smallest `l` with `i / s^l == j / s^l`.
pub fn lca_height(s: usize, depth: usize, i: usize, j: usize) -> Result<usize> {
    let d = s.pow(depth as u32);
    if i >= d || j >= d {
        return Err(Error::Range(format!("positions ({i}, {j}) outside 0..{d}")));
    }
    let (mut a, mut b, mut h) = (i, j, 0);
    while a != b {
        a /= s;
        b /= s;
        h += 1;
    }
    Ok(h)
}

/// Which stream positions form the analyzed query and how they relate.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationGrouping {
    pub s: usize,
    pub depth: usize,
    /// Stream index of the query's first token.
    pub offset: usize,
    /// Query positions present in the stream.
    pub len: usize,
    /// Keep only keys at or before the query (causal attention).
    pub causal: bool,
    /// `heights[i * len + j]`.
    heights: Vec<usize>,
}

impl RelationGrouping {
    pub fn new(s: usize, depth: usize, offset: usize, len: usize, causal: bool) -> Result<Self> {
        let mut heights = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                heights.push(lca_height(s, depth, i, j)?);
            }
        }
        Ok(RelationGrouping {
            s,
            depth,
            offset,
            len,
            causal,
            heights,
        })
    }

    pub fn height(&self, i: usize, j: usize) -> usize {
        self.heights[i * self.len + j]
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len).flat_map(move |i| {
            let last = if self.causal { i + 1 } else { self.len };
            (0..last).map(move |j| (i, j))
        })
    }
}

/// Per-group statistics of one attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub score: f64,
    /// Mean attention weight per LCA height `0..=depth` (NaN for empty groups).
    pub group_means: Vec<f64>,
    pub samples: usize,
}

/// Eta squared of one head's `len x len` stream attention map (rows are
/// queries) over the query region; 0 when the weights do not vary.
pub fn specialization_score(attn: &[f64], stream_len: usize, grouping: &RelationGrouping) -> GroupStats {
    let groups = grouping.depth + 1;
    let mut sum = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    let mut values = Vec::new();
    for (i, j) in grouping.pairs() {
        let w = attn[(grouping.offset + i) * stream_len + grouping.offset + j];
        let h = grouping.height(i, j);
        sum[h] += w;
        count[h] += 1;
        values.push((h, w));
    }
    let n = values.len();
    let group_means: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    if n == 0 {
        return GroupStats {
            score: 0.0,
            group_means,
            samples: 0,
        };
    }
    let mean = values.iter().map(|&(_, w)| w).sum::<f64>() / n as f64;
    let total: f64 = values.iter().map(|&(_, w)| (w - mean).powi(2)).sum();
    let between: f64 = (0..groups)
        .filter(|&g| count[g] > 0)
        .map(|g| count[g] as f64 * (group_means[g] - mean).powi(2))
        .sum();
    // float noise can push a perfectly grouped map a hair past 1 or a flat one below 0
    let score = if total <= 1e-300 {
        0.0
    } else {
        (between / total).clamp(0.0, 1.0)
    };
    GroupStats {
        score,
        group_means,
        samples: n,
    }
}

/// Attention maps of a batch, `[layer][episode][head]` of `len x len` each.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBatch {
    pub layers: usize,
    pub episodes: usize,
    pub heads: usize,
    pub len: usize,
    data: Vec<f64>,
}

impl AttentionBatch {
    pub fn new(layers: usize, episodes: usize, heads: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != layers * episodes * heads * len * len {
            return Err(Error::Shape("attention data does not match its shape".into()));
        }
        Ok(AttentionBatch {
            layers,
            episodes,
            heads,
            len,
            data,
        })
    }

    pub fn from_trace<F: Scalar>(trace: &ForwardTrace<F>) -> Self {
        let (layers, episodes, heads, len) = (trace.layers(), trace.batch, trace.heads, trace.len);
        let mut data = Vec::with_capacity(layers * episodes * heads * len * len);
        for l in 0..layers {
            for e in 0..episodes {
                for h in 0..heads {
                    data.extend(trace.attention(l, e, h).iter().map(|x| x.to_f64().unwrap()));
                }
            }
        }
        AttentionBatch {
            layers,
            episodes,
            heads,
            len,
            data,
        }
    }

    /// Appends the episodes of `other` (same layers, heads and length).
    pub fn extend(&mut self, other: AttentionBatch) -> Result<()> {
        if (self.layers, self.heads, self.len) != (other.layers, other.heads, other.len) {
            return Err(Error::Shape("attention batches differ in shape".into()));
        }
        let block = self.len * self.len * self.heads;
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for l in 0..self.layers {
            data.extend_from_slice(&self.data[l * self.episodes * block..(l + 1) * self.episodes * block]);
            data.extend_from_slice(&other.data[l * other.episodes * block..(l + 1) * other.episodes * block]);
        }
        self.episodes += other.episodes;
        self.data = data;
        Ok(())
    }

    pub fn map(&self, layer: usize, episode: usize, head: usize) -> &[f64] {
        let t2 = self.len * self.len;
        let start = ((layer * self.episodes + episode) * self.heads + head) * t2;
        &self.data[start..start + t2]
    }

    /// Episode-averaged map of one head.
    pub fn mean_map(&self, layer: usize, head: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len * self.len];
        for e in 0..self.episodes {
            for (o, &x) in out.iter_mut().zip(self.map(layer, e, head)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|x| *x /= self.episodes as f64);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecializationRecord {
    pub step: u64,
    pub layer: usize,
    pub head: usize,
    pub condition: EvalCondition,
    pub score: f64,
    pub group_means: Vec<f64>,
    pub samples: usize,
}

/// How per-head scores become a per-layer score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpecialization {
    pub records: Vec<SpecializationRecord>,
    pub per_layer: Vec<f64>,
    /// Mean over every layer and head.
    pub overall: f64,
}

pub fn layer_specialization(
    batch: &AttentionBatch,
    grouping: &RelationGrouping,
    aggregation: Aggregation,
    step: u64,
    condition: EvalCondition,
) -> Result<LayerSpecialization> {
    if batch.episodes == 0 {
        return param_err("layer_specialization needs at least one episode");
    }
    if grouping.offset + grouping.len > batch.len {
        return Err(Error::Shape("query region lies outside the attention maps".into()));
    }
    let mut records = Vec::with_capacity(batch.layers * batch.heads);
    let mut per_layer = Vec::with_capacity(batch.layers);
    for layer in 0..batch.layers {
        let mut head_scores = Vec::with_capacity(batch.heads);
        for head in 0..batch.heads {
            let mut score = 0.0;
            let mut means = vec![0.0; grouping.depth + 1];
            let mut samples = 0;
            for e in 0..batch.episodes {
                let stats = specialization_score(batch.map(layer, e, head), batch.len, grouping);
                score += stats.score;
                for (m, g) in means.iter_mut().zip(&stats.group_means) {
                    *m += g;
                }
                samples += stats.samples;
            }
            let n = batch.episodes as f64;
            let score = score / n;
            head_scores.push(score);
            records.push(SpecializationRecord {
                step,
                layer,
                head,
                condition,
                score,
                group_means: means.into_iter().map(|m| m / n).collect(),
                samples,
            });
        }
        per_layer.push(match aggregation {
            Aggregation::Mean => head_scores.iter().sum::<f64>() / head_scores.len() as f64,
            Aggregation::Max => head_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    let overall = records.iter().map(|r| r.score).sum::<f64>() / records.len() as f64;
    Ok(LayerSpecialization {
        records,
        per_layer,
        overall,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// Unit-norm principal directions, most variance first.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    pub mean: Vec<f64>,
}

/// PCA of the rows of `samples` (each of equal length) via the eigen
/// decomposition of their sample covariance.
pub fn pca(samples: &[Vec<f64>]) -> Result<PcaResult> {
    if samples.len() < 2 {
        return param_err("pca needs at least two samples");
    }
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("pca rows must share a positive length".into()));
    }
    let n = samples.len();
    let mut mean = vec![0.0; dim];
    for row in samples {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |r, c| samples[r][c] - mean[c]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let trace = cov.trace();
    if trace <= 0.0 {
        return Err(Error::Degenerate("all samples are identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let components = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    let explained_ratio = order.iter().map(|&i| eig.eigenvalues[i].max(0.0) / trace).collect();
    Ok(PcaResult {
        components,
        explained_ratio,
        mean,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Pearson,
    Cosine,
}

impl Similarity {
    /// Zero-variance (or zero-norm) inputs are uncorrelated with everything else.
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = match self {
            Similarity::Pearson => (
                a.iter().sum::<f64>() / a.len() as f64,
                b.iter().sum::<f64>() / b.len() as f64,
            ),
            Similarity::Cosine => (0.0, 0.0),
        };
        let (mut num, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            na += (x - ma).powi(2);
            nb += (y - mb).powi(2);
        }
        if na <= 0.0 || nb <= 0.0 {
            return 0.0;
        }
        (num / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadClustering {
    /// `(layer, head)` of each map, in input order.
    pub heads: Vec<(usize, usize)>,
    pub similarity: Vec<Vec<f64>>,
    /// Cluster id per head; ids are numbered by first member.
    pub assignment: Vec<usize>,
    pub threshold: f64,
}

/// Average-linkage agglomerative clustering of attention maps; merging stops
/// once no pair of clusters is more similar than `threshold`.
pub fn cluster_heads(
    maps: &[Vec<f64>],
    heads: Vec<(usize, usize)>,
    metric: Similarity,
    threshold: f64,
) -> Result<HeadClustering> {
    if !(threshold > -1.0 && threshold < 1.0) {
        return param_err(format!("threshold {threshold} outside (-1, 1)"));
    }
    if maps.len() < 2 || heads.len() != maps.len() {
        return param_err("cluster_heads needs at least two labelled maps");
    }
    if maps.iter().any(|m| m.len() != maps[0].len()) {
        return Err(Error::Shape("attention maps differ in size".into()));
    }
    let n = maps.len();
    let mut similarity = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = metric.between(&maps[i], &maps[j]);
            similarity[i][j] = s;
            similarity[j][i] = s;
        }
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += similarity[i][j];
                    }
                }
                let avg = total / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(s, _, _)| avg > s) {
                    best = Some((avg, a, b));
                }
            }
        }
        match best {
            Some((s, a, b)) if s > threshold => {
                let merged = clusters.remove(b);
                clusters[a].extend(merged);
            }
            _ => break,
        }
    }
    let mut assignment = vec![0; n];
    let mut order: Vec<&Vec<usize>> = clusters.iter().collect();
    order.sort_by_key(|c| c.iter().min().copied());
    for (id, members) in order.into_iter().enumerate() {
        for &i in members {
            assignment[i] = id;
        }
    }
    Ok(HeadClustering {
        heads,
        similarity,
        assignment,
        threshold,
    })
}

/// Overall specialization at each checkpoint step, in step order.
pub fn specialization_curve(steps: &[u64], mut score_at: impl FnMut(u64) -> Result<f64>) -> Result<Vec<(u64, f64)>> {
    if steps.len() < 2 {
        return param_err("a specialization curve needs at least two checkpoints");
    }
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    sorted.into_iter().map(|s| Ok((s, score_at(s)?))).collect()
}

pub fn write_specialization_csv<W: Write>(records: &[SpecializationRecord], mut out: W) -> Result<()> {
    writeln!(out, "step,layer,head,condition,score")?;
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.step, r.layer, r.head, r.condition, r.score)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaRow {
    pub step: u64,
    pub layer: usize,
    pub component: usize,
    pub ratio: f64,
}

pub fn write_pca_csv<W: Write>(rows: &[PcaRow], mut out: W) -> Result<()> {
    writeln!(out, "step,layer,component,ratio")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.layer, r.component, r.ratio)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRow {
    pub step: u64,
    pub layer: usize,
    pub head: usize,
    pub cluster: usize,
}

pub fn write_cluster_csv<W: Write>(rows: &[ClusterRow], mut out: W) -> Result<()> {
    writeln!(out, "step,layer,head,cluster")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.layer, r.head, r.cluster)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lca_examples() {
        assert_eq!(lca_height(2, 3, 0, 1).unwrap(), 1);
        assert_eq!(lca_height(2, 3, 0, 2).unwrap(), 2);
        assert_eq!(lca_height(2, 3, 0, 4).unwrap(), 3);
        for i in 0..8 {
            assert_eq!(lca_height(2, 3, i, i).unwrap(), 0);
        }
        assert!(matches!(lca_height(2, 3, 0, 8), Err(Error::Range(_))));
    }

    fn full_grouping(len: usize) -> RelationGrouping {
        RelationGrouping::new(2, 2, 0, len, false).unwrap()
    }

    #[test]
    fn uniform_map_scores_zero() {
        let g = full_grouping(4);
        let stats = specialization_score(&[0.25; 16], 4, &g);
        assert_eq!(stats.score, 0.0);
    }

    #[test]
    fn height_determined_map_scores_one() {
        let g = full_grouping(4);
        let value = [0.7, 0.2, 0.05];
        let attn: Vec<f64> = (0..16).map(|k| value[g.height(k / 4, k % 4)]).collect();
        assert_eq!(specialization_score(&attn, 4, &g).score, 1.0);
    }

    #[test]
    fn hand_variance_decomposition() {
        // 4 positions, s=2, L=2: h=0 diagonal, h=1 sibling pairs, h=2 the rest
        let g = full_grouping(4);
        let mut attn: Vec<f64> = (0..16)
            .map(|k| match g.height(k / 4, k % 4) {
                0 => 0.5,
                1 => 0.4,
                _ => 0.1,
            })
            .collect();
        attn[2] = 0.2; // (0, 2) is an h=2 pair
                       // groups: h0 = 4 x 0.5; h1 = 4 x 0.4; h2 = 7 x 0.1 + 0.2
        let all: Vec<f64> = attn.clone();
        let mean = all.iter().sum::<f64>() / 16.0;
        let total: f64 = all.iter().map(|w| (w - mean).powi(2)).sum();
        let h2_mean = (7.0 * 0.1 + 0.2) / 8.0;
        let between = 4.0 * (0.5 - mean).powi(2) + 4.0 * (0.4 - mean).powi(2) + 8.0 * (h2_mean - mean).powi(2);
        let stats = specialization_score(&attn, 4, &g);
        assert!((stats.score - between / total).abs() < 1e-12);
        assert!((stats.group_means[2] - h2_mean).abs() < 1e-15);
    }

    #[test]
    fn causal_pairs_only_look_back() {
        let g = RelationGrouping::new(2, 2, 1, 3, true).unwrap();
        let stats = specialization_score(&[0.1; 25], 5, &g);
        assert_eq!(stats.samples, 6);
    }

    fn batch_of(maps: &[Vec<f64>], len: usize) -> AttentionBatch {
        AttentionBatch::new(1, maps.len(), 1, len, maps.concat()).unwrap()
    }

    #[test]
    fn aggregation_of_one_and_duplicates() {
        let g = full_grouping(4);
        let map: Vec<f64> = (0..16).map(|k| ((k * 7) % 5) as f64 / 10.0).collect();
        let single = layer_specialization(
            &batch_of(std::slice::from_ref(&map), 4),
            &g,
            Aggregation::Mean,
            0,
            EvalCondition::Mem,
        )
        .unwrap();
        assert_eq!(single.records[0].score, specialization_score(&map, 4, &g).score);
        let double = layer_specialization(
            &batch_of(&[map.clone(), map], 4),
            &g,
            Aggregation::Mean,
            0,
            EvalCondition::Mem,
        )
        .unwrap();
        assert_eq!(double.overall, single.overall);
        let flat = layer_specialization(
            &batch_of(&[vec![0.25; 16]], 4),
            &g,
            Aggregation::Max,
            0,
            EvalCondition::Ind,
        )
        .unwrap();
        assert_eq!((flat.overall, flat.per_layer[0]), (0.0, 0.0));
        let empty = AttentionBatch::new(1, 0, 1, 4, vec![]).unwrap();
        assert!(layer_specialization(&empty, &g, Aggregation::Mean, 0, EvalCondition::Mem).is_err());
    }

    #[test]
    fn pca_examples() {
        let iso = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let r = pca(&iso).unwrap();
        for ratio in &r.explained_ratio {
            assert!((ratio - 0.5).abs() < 1e-12);
        }
        let dir = [0.6, 0.8, 0.0];
        let rank1: Vec<Vec<f64>> = (0..6)
            .map(|k| dir.iter().map(|d| d * k as f64 + 1.0).collect())
            .collect();
        let r = pca(&rank1).unwrap();
        assert!((r.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert!(matches!(
            pca(&[vec![1.0, 2.0], vec![1.0, 2.0]]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn clustering_examples() {
        let a: Vec<f64> = (0..16).map(|k| (k as f64).sin()).collect();
        let labels = vec![(0, 0), (0, 1)];
        let c = cluster_heads(&[a.clone(), a.clone()], labels, Similarity::Pearson, 0.9).unwrap();
        assert_eq!(c.assignment, vec![0, 0]);
        // (1, -1, 1, -1) and (1, 1, -1, -1) have correlation exactly 0
        let x = vec![1.0, -1.0, 1.0, -1.0];
        let y = vec![1.0, 1.0, -1.0, -1.0];
        let c = cluster_heads(&[x, y], vec![(0, 0), (1, 0)], Similarity::Pearson, 0.5).unwrap();
        assert_eq!(c.similarity[0][1], 0.0);
        assert_eq!(c.assignment, vec![0, 1]);
        assert!(cluster_heads(&[a.clone(), a], vec![(0, 0), (0, 1)], Similarity::Pearson, 1.0).is_err());
    }

    #[test]
    fn curve_needs_two_points() {
        assert!(specialization_curve(&[5], |_| Ok(0.1)).is_err());
        let curve = specialization_curve(&[20, 0, 10], |s| Ok(s as f64 / 100.0)).unwrap();
        assert_eq!(curve, vec![(0, 0.0), (10, 0.1), (20, 0.2)]);
    }
}
