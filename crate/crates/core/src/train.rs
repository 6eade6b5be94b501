//! Online training loop, evaluation and the metrics log.
//!
//! Every step draws a fresh batch of episodes from the training split. Step
//! `s` logs the learning rate `lr_at(s)` and the loss of the parameters
//! after `s` updates; checkpoints and evaluations at step `s` see those same
//! parameters, so step 0 is the untrained model.

use std::io::Write;
use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::analysis::{layer_specialization, Aggregation, AttentionBatch, LayerSpecialization, RelationGrouping};
use crate::checkpoint::{checkpoint_path, checkpoint_steps, Checkpoint, CheckpointHeader};
use crate::error::{param_err, Error, Result};
use crate::grammar::{Grammar, LayerDists};
use crate::model::{
    backward, forward, init_params, loss, targets_for, Batch, ForwardTrace, LossTarget, ModelConfig, Objective,
    Parameters,
};
use crate::optim::{adamw_step, clip_global_norm, lr_at, AdamW, OptimState, Schedule};
use crate::oracle::oracle_accuracy;
use crate::rng::{stream, sub_stream, Rng, RngState, Stream};
use crate::task::{encode, ConditionSets, Episode, EvalCondition, Mode, TokenLayout, TokenStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_n_ct")]
    pub n_ct: usize,
    #[serde(default = "d_total_steps")]
    pub total_steps: u64,
    #[serde(default = "d_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "d_floor_frac")]
    pub floor_frac: f64,
    #[serde(default = "d_start_frac")]
    pub start_frac: f64,
    #[serde(default = "d_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
    /// Episodes per condition behind the logged specialization score.
    #[serde(default = "d_spec_episodes")]
    pub spec_episodes: usize,
    /// Global-norm gradient clip; none when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub objective: Objective,
    /// Masked mode: chance of additionally masking each demonstration token.
    #[serde(default)]
    pub aux_mask_prob: f64,
    /// Ends the run after this many updates while keeping the schedule of
    /// `total_steps`; the final step is evaluated and checkpointed.
    #[serde(default)]
    pub stop_at: Option<u64>,
}

fn d_eta() -> f64 {
    1.5e-4
}
fn d_weight_decay() -> f64 {
    2.0
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.98
}
fn d_eps() -> f64 {
    1e-8
}
fn d_batch() -> usize {
    1024
}
fn d_n_ct() -> usize {
    32
}
fn d_total_steps() -> u64 {
    200_000
}
fn d_warmup_frac() -> f64 {
    0.05
}
fn d_floor_frac() -> f64 {
    0.1
}
fn d_start_frac() -> f64 {
    0.01
}
fn d_checkpoint_every() -> u64 {
    5_000
}
fn d_eval_every() -> u64 {
    500
}
fn d_eval_episodes() -> usize {
    2048
}
fn d_spec_episodes() -> usize {
    32
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: d_eta(),
            weight_decay: d_weight_decay(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            batch: d_batch(),
            n_ct: d_n_ct(),
            total_steps: d_total_steps(),
            warmup_frac: d_warmup_frac(),
            floor_frac: d_floor_frac(),
            start_frac: d_start_frac(),
            checkpoint_every: d_checkpoint_every(),
            seed: 0,
            eval_every: d_eval_every(),
            eval_episodes: d_eval_episodes(),
            spec_episodes: d_spec_episodes(),
            grad_clip: None,
            objective: Objective::default(),
            aux_mask_prob: 0.0,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            eta: self.eta,
            total_steps: self.total_steps,
            warmup_frac: self.warmup_frac,
            start_frac: self.start_frac,
            floor_frac: self.floor_frac,
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Last logged step of the run.
    pub fn last_step(&self) -> u64 {
        self.stop_at.map_or(self.total_steps, |s| s.min(self.total_steps))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.stop_at.is_some_and(|s| s == 0 || s > self.total_steps) {
            return param_err("stop_at must lie in 1..=total_steps");
        }
        if self.batch == 0 {
            return param_err("batch must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return param_err("need 0 <= beta1, beta2 < 1 and eps > 0");
        }
        if self.weight_decay < 0.0 {
            return param_err("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.aux_mask_prob) {
            return param_err("aux_mask_prob must lie in [0, 1)");
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return param_err("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Wilson score interval of `hits` successes in `n` trials.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub hits: usize,
    pub n: usize,
    /// Wilson 95% interval.
    pub lo: f64,
    pub hi: f64,
}

impl Accuracy {
    pub fn from_hits(hits: usize, n: usize) -> Self {
        let (lo, hi) = wilson_interval(hits, n, 1.959_963_984_540_054);
        Accuracy {
            accuracy: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
            hits,
            n,
            lo,
            hi,
        }
    }
}

const EVAL_CHUNK: usize = 256;

/// The model's prediction: argmax over grammar tokens `0..v` at the readout slot.
pub fn predict(params: &Parameters<f32>, cfg: &ModelConfig, streams: &[TokenStream], v: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(streams.len());
    for chunk in streams.chunks(EVAL_CHUNK) {
        let trace = forward(params, &Batch::from_streams(chunk)?, cfg)?;
        for (e, s) in chunk.iter().enumerate() {
            let logits = &trace.logits_at(e, s.readout_position())[..v];
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            out.push(best as u32);
        }
    }
    Ok(out)
}

/// Draws `n_episodes` episodes of `condition` and scores the model on them.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    layout: &TokenLayout,
    sets: &ConditionSets,
    condition: EvalCondition,
    n_ct: usize,
    n_episodes: usize,
    rng: &mut Rng,
) -> Result<Accuracy> {
    if sets.set(condition).is_empty() {
        return param_err(format!("the {condition} set is empty"));
    }
    if n_episodes == 0 {
        return param_err("n_episodes must be positive");
    }
    let episodes = (0..n_episodes)
        .map(|_| sets.episode(condition, n_ct, rng))
        .collect::<Result<Vec<_>>>()?;
    evaluate_episodes(params, cfg, layout, &episodes)
}

pub fn evaluate_episodes(
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    layout: &TokenLayout,
    episodes: &[Episode],
) -> Result<Accuracy> {
    let streams = episodes
        .iter()
        .map(|e| encode(e, cfg.mode, layout))
        .collect::<Result<Vec<_>>>()?;
    let predictions = predict(params, cfg, &streams, layout.v as usize)?;
    let hits = predictions
        .iter()
        .zip(episodes)
        .filter(|(p, e)| **p == e.target)
        .count();
    Ok(Accuracy::from_hits(hits, episodes.len()))
}

/// The analyzed query region of a stream: the query's tokens, plus the MASK
/// slot in masked mode.
pub fn query_grouping(mode: Mode, grammar: &Grammar, stream: &TokenStream) -> Result<RelationGrouping> {
    let d = grammar.seq_len();
    let len = match mode {
        Mode::Causal => d - 1,
        Mode::Masked => d,
    };
    RelationGrouping::new(
        grammar.s(),
        grammar.depth(),
        stream.ids.len() - len,
        len,
        mode == Mode::Causal,
    )
}

/// Specialization of one condition from `n_episodes` episodes drawn with the
/// condition's analysis stream, along with the forward trace behind it.
#[allow(clippy::too_many_arguments)]
pub fn condition_specialization(
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    layout: &TokenLayout,
    grammar: &Grammar,
    sets: &ConditionSets,
    condition: EvalCondition,
    n_ct: usize,
    n_episodes: usize,
    aggregation: Aggregation,
    seed: u64,
    step: u64,
) -> Result<(LayerSpecialization, ForwardTrace<f32>, Vec<TokenStream>)> {
    if n_episodes == 0 {
        return param_err("specialization needs at least one episode");
    }
    let mut rng = sub_stream(seed, Stream::Analysis, condition.index() as u64);
    let streams = (0..n_episodes)
        .map(|_| encode(&sets.episode(condition, n_ct, &mut rng)?, cfg.mode, layout))
        .collect::<Result<Vec<_>>>()?;
    let trace = forward(params, &Batch::from_streams(&streams)?, cfg)?;
    let grouping = query_grouping(cfg.mode, grammar, &streams[0])?;
    let spec = layer_specialization(
        &AttentionBatch::from_trace(&trace),
        &grouping,
        aggregation,
        step,
        condition,
    )?;
    Ok((spec, trace, streams))
}

/// Mean over `conditions` of the overall specialization score.
#[allow(clippy::too_many_arguments)]
pub fn specialization_mean(
    params: &Parameters<f32>,
    cfg: &ModelConfig,
    layout: &TokenLayout,
    grammar: &Grammar,
    sets: &ConditionSets,
    conditions: &[EvalCondition],
    n_ct: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for &cond in conditions {
        let (spec, _, _) = condition_specialization(
            params,
            cfg,
            layout,
            grammar,
            sets,
            cond,
            n_ct,
            n_episodes,
            Aggregation::Mean,
            seed,
            0,
        )?;
        total += spec.overall;
    }
    Ok(total / conditions.len() as f64)
}

/// One line of the metrics CSV; absent values are empty cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: i64,
    pub lr: Option<f64>,
    pub train_loss: Option<f64>,
    pub acc_mem: Option<f64>,
    pub acc_ind: Option<f64>,
    pub acc_gensame: Option<f64>,
    pub acc_transfer: Option<f64>,
    pub spec_score_mean: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,train_loss,acc_mem,acc_ind,acc_gensame,acc_transfer,spec_score_mean";

impl MetricsRow {
    pub fn set_accuracy(&mut self, condition: EvalCondition, value: f64) {
        let slot = match condition {
            EvalCondition::Mem => &mut self.acc_mem,
            EvalCondition::Ind => &mut self.acc_ind,
            EvalCondition::GenSame => &mut self.acc_gensame,
            EvalCondition::Transfer => &mut self.acc_transfer,
        };
        *slot = Some(value);
    }

    pub fn accuracy(&self, condition: EvalCondition) -> Option<f64> {
        match condition {
            EvalCondition::Mem => self.acc_mem,
            EvalCondition::Ind => self.acc_ind,
            EvalCondition::GenSame => self.acc_gensame,
            EvalCondition::Transfer => self.acc_transfer,
        }
    }

    pub fn to_csv(&self) -> String {
        let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            cell(self.lr),
            cell(self.train_loss),
            cell(self.acc_mem),
            cell(self.acc_ind),
            cell(self.acc_gensame),
            cell(self.acc_transfer),
            cell(self.spec_score_mean)
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let cells: Vec<&str> = line.trim_end().split(',').collect();
        if cells.len() != 8 {
            return Err(Error::Format(format!("metrics row has {} cells: {line}", cells.len())));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Format(format!("bad number {s:?}")))
            }
        };
        Ok(MetricsRow {
            step: cells[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad step {:?}", cells[0])))?,
            lr: num(cells[1])?,
            train_loss: num(cells[2])?,
            acc_mem: num(cells[3])?,
            acc_ind: num(cells[4])?,
            acc_gensame: num(cells[5])?,
            acc_transfer: num(cells[6])?,
            spec_score_mean: num(cells[7])?,
        })
    }
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics file lacks the expected header".into()));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_csv).collect()
}

/// Oracle ceilings per condition as a step -1 metrics row. Transfer queries
/// are scored under the distributions they were drawn from.
pub fn oracle_row(
    grammar: &Grammar,
    sets: &ConditionSets,
    transfer_dists: &LayerDists,
    conditions: &[EvalCondition],
    n_samples: usize,
    seed: u64,
) -> Result<MetricsRow> {
    let mut row = MetricsRow {
        step: -1,
        ..Default::default()
    };
    for &cond in conditions {
        let set = sets.set(cond);
        if set.is_empty() {
            continue;
        }
        let dists = match cond {
            EvalCondition::Transfer => transfer_dists,
            _ => &grammar.params().layer_dists,
        };
        let mut rng = sub_stream(seed, Stream::Eval, 16 + cond.index() as u64);
        row.set_accuracy(cond, oracle_accuracy(grammar, set, dists, n_samples, &mut rng)?);
    }
    Ok(row)
}

/// Where a training run writes.
/// Callback run after each logged metrics row.
pub type Progress<'a> = Box<dyn FnMut(&MetricsRow) + 'a>;

pub struct TrainOutput<'a> {
    pub metrics: &'a mut dyn Write,
    /// Checkpoints are written here when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stored verbatim in every checkpoint header.
    pub run: serde_json::Value,
    /// Called after each logged row.
    pub progress: Option<Progress<'a>>,
}

pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub optim: OptimState<f32>,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<u64>,
}

/// Conditions that have a non-empty set.
pub fn available_conditions(sets: &ConditionSets) -> Vec<EvalCondition> {
    EvalCondition::ALL
        .into_iter()
        .filter(|&c| !sets.set(c).is_empty())
        .collect()
}

fn training_batch(
    sets: &ConditionSets,
    model: &ModelConfig,
    layout: &TokenLayout,
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Batch, Vec<LossTarget>)> {
    let mut streams = Vec::with_capacity(tc.batch);
    let mut targets = Vec::new();
    for index in 0..tc.batch {
        let episode = sets.episode(EvalCondition::Mem, tc.n_ct, rng)?;
        let mut stream = encode(&episode, model.mode, layout)?;
        targets.extend(targets_for(
            &stream,
            &episode,
            index,
            tc.batch,
            model,
            layout,
            tc.objective,
        ));
        if model.mode == Mode::Masked && tc.aux_mask_prob > 0.0 {
            let mask = layout.mask.expect("masked layout has a MASK id");
            let context_end = stream.ids.len() - episode.query_prefix.len() - 1;
            let mut picked = Vec::new();
            for pos in 0..context_end {
                if stream.ids[pos] < layout.v && rng.random_bool(tc.aux_mask_prob) {
                    picked.push((pos, stream.ids[pos]));
                    stream.ids[pos] = mask;
                }
            }
            let weight = 1.0 / (tc.batch * picked.len().max(1)) as f64;
            let base = index * stream.ids.len();
            targets.extend(picked.into_iter().map(|(pos, token)| LossTarget {
                row: base + pos,
                target: token,
                classes: layout.v as usize,
                weight,
                term: "aux_mask",
            }));
        }
        streams.push(stream);
    }
    Ok((Batch::from_streams(&streams)?, targets))
}

/// Runs `tc.last_step()` AdamW updates from a fresh initialization.
pub fn train(
    grammar: &Grammar,
    sets: &ConditionSets,
    model: &ModelConfig,
    tc: &TrainConfig,
    out: TrainOutput<'_>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    model.validate()?;
    let layout = model.layout(grammar.v());
    if layout.vocab_size() > model.vocab {
        return param_err(format!(
            "model vocab {} below layout size {}",
            model.vocab,
            layout.vocab_size()
        ));
    }
    if sets.train.is_empty() {
        return param_err("empty training set");
    }
    let TrainOutput {
        metrics,
        checkpoint_dir,
        run,
        mut progress,
    } = out;
    let schedule = tc.schedule();
    let hp = tc.adamw();
    let conditions = available_conditions(sets);

    let mut init_rng = stream(tc.seed, Stream::Init);
    let mut params: Parameters<f32> = init_params(model, &mut init_rng)?;
    let mut optim = OptimState::new(&params);
    let mut batch_rng = stream(tc.seed, Stream::Batch);
    let last = tc.last_step();
    let mut save_at = checkpoint_steps(tc.total_steps, tc.checkpoint_every);
    save_at.retain(|&s| s < last);
    save_at.push(last);
    let mut saved = Vec::new();
    let mut rows = Vec::new();

    writeln!(metrics, "{METRICS_HEADER}")?;
    for step in 0..=last {
        if save_at.binary_search(&step).is_ok() {
            if let Some(dir) = &checkpoint_dir {
                let mut rng_states = std::collections::BTreeMap::new();
                rng_states.insert("batch".to_string(), RngState::capture(&batch_rng));
                rng_states.insert("init".to_string(), RngState::capture(&init_rng));
                Checkpoint {
                    header: CheckpointHeader {
                        step,
                        model: model.clone(),
                        v: grammar.v(),
                        rng: rng_states,
                        optimizer_t: optim.t,
                        run: run.clone(),
                    },
                    params: params.clone(),
                    optim: Some(optim.clone()),
                }
                .save(&checkpoint_path(dir, step))?;
            }
            saved.push(step);
        }

        let lr = lr_at(step, &schedule)?;
        let (batch, targets) = training_batch(sets, model, &layout, tc, &mut batch_rng)?;
        let trace = forward(&params, &batch, model)?;
        let out = loss(&trace, &targets);
        if !out.value.is_finite() {
            return Err(Error::NonFinite {
                step,
                lr,
                loss: out.value,
            });
        }
        let mut row = MetricsRow {
            step: step as i64,
            lr: Some(lr),
            train_loss: Some(out.value),
            ..Default::default()
        };
        let eval_now = step == last || (tc.eval_every > 0 && step % tc.eval_every == 0);
        if eval_now {
            for &cond in &conditions {
                let mut rng = sub_stream(tc.seed, Stream::Eval, cond.index() as u64);
                let acc = evaluate(&params, model, &layout, sets, cond, tc.n_ct, tc.eval_episodes, &mut rng)?;
                row.set_accuracy(cond, acc.accuracy);
            }
            if tc.spec_episodes > 0 {
                row.spec_score_mean = Some(specialization_mean(
                    &params,
                    model,
                    &layout,
                    grammar,
                    sets,
                    &conditions,
                    tc.n_ct,
                    tc.spec_episodes,
                    tc.seed,
                )?);
            }
        }
        writeln!(metrics, "{}", row.to_csv())?;
        if eval_now {
            metrics.flush()?;
        }
        if let Some(cb) = progress.as_mut() {
            cb(&row);
        }
        rows.push(row);

        if step < last {
            let mut grads = backward(&params, &trace, &out, 1.0, model);
            if let Some(c) = tc.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            adamw_step(&mut params, &grads, &mut optim, lr, &hp);
        }
    }
    metrics.flush()?;
    Ok(TrainOutcome {
        params,
        optim,
        rows,
        checkpoints: saved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_matches_closed_form() {
        let (lo, hi) = wilson_interval(50, 100, 1.96);
        assert!((lo - 0.4038).abs() < 1e-4 && (hi - 0.5962).abs() < 1e-4);
        assert_eq!(wilson_interval(0, 0, 1.96), (0.0, 1.0));
        let (lo, hi) = wilson_interval(10, 10, 1.96);
        assert!(hi == 1.0 && lo > 0.6);
    }

    #[test]
    fn metrics_rows_round_trip() {
        let mut row = MetricsRow {
            step: 12,
            lr: Some(1.5e-6),
            train_loss: Some(2.0794415416798357),
            ..Default::default()
        };
        row.set_accuracy(EvalCondition::GenSame, 0.125);
        let line = row.to_csv();
        assert_eq!(line, "12,0.0000015,2.0794415416798357,,,0.125,,");
        assert_eq!(MetricsRow::from_csv(&line).unwrap(), row);
        let text = format!("{METRICS_HEADER}\n{line}\n");
        assert_eq!(read_metrics(&text).unwrap(), vec![row]);
    }

    #[test]
    fn config_defaults() {
        let tc = TrainConfig::default();
        assert_eq!(
            (tc.eta, tc.weight_decay, tc.batch, tc.n_ct, tc.total_steps),
            (1.5e-4, 2.0, 1024, 32, 200_000)
        );
        tc.validate().unwrap();
        let bad = TrainConfig {
            start_frac: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
