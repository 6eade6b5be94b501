//! Commands over a run directory. Every artifact of a run lives under one
//! directory, addressed by a fixed relative path.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::analysis::{
    cluster_heads, pca, write_cluster_csv, write_pca_csv, write_specialization_csv, AttentionBatch, ClusterRow, PcaRow,
    SpecializationRecord,
};
use crate::checkpoint::{checkpoint_path, list_checkpoints, Checkpoint};
use crate::config::{Experiment, RunConfig};
use crate::error::{Error, Result};
use crate::grammar::{read_grammar, sample_grammar, write_dataset, write_grammar, Grammar};
use crate::model::{ModelConfig, Parameters};
use crate::rng::{sub_stream, Stream};
use crate::task::{encode, write_episodes, EpisodeRecord, EvalCondition};
use crate::train::{
    available_conditions, condition_specialization, evaluate, oracle_row, query_grouping, train, Accuracy, MetricsRow,
    Progress, TrainOutcome, TrainOutput, METRICS_HEADER,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const GRAMMAR_FILE: &str = "grammar.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SPECIALIZATION_FILE: &str = "specialization.csv";
pub const PCA_FILE: &str = "pca.csv";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DATA_DIR: &str = "data";

pub const EVAL_HEADER: &str = "step,condition,n_ct,episodes,accuracy,ci_low,ci_high";

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    /// `--out` when given, else the config's `out_dir`, else `runs/<run_id>`.
    pub fn resolve(cfg: &RunConfig, out: Option<&Path>) -> Self {
        let root = out
            .map(Path::to_path_buf)
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| Path::new("runs").join(&cfg.run_id));
        RunDir { root }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    /// Creates the directory and records the effective config. A directory
    /// that already belongs to another run is refused.
    pub fn claim(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        let path = self.path(CONFIG_FILE);
        if path.exists() {
            let existing = RunConfig::load(&path)?;
            if existing.run_id != cfg.run_id {
                return Err(Error::Config(format!(
                    "{} belongs to run {:?}, not {:?}",
                    self.root.display(),
                    existing.run_id,
                    cfg.run_id
                )));
            }
        }
        fs::write(path, cfg.to_toml()?)?;
        Ok(())
    }

    /// Fails when `name` exists and `force` is off.
    fn fresh(&self, name: &str, force: bool) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() && !force {
            return Err(Error::Config(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
        Ok(p)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn gen_grammar(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<PathBuf> {
    let grammar = sample_grammar(&cfg.grammar)?;
    let path = dir.fresh(GRAMMAR_FILE, force)?;
    dir.claim(cfg)?;
    let mut out = create(&path)?;
    write_grammar(&grammar, &mut out)?;
    out.flush()?;
    Ok(path)
}

pub fn load_grammar(dir: &RunDir) -> Result<Grammar> {
    let path = dir.require(GRAMMAR_FILE)?;
    read_grammar(BufReader::new(File::open(path)?))
}

/// The run's grammar file when present, otherwise a freshly written one.
fn ensure_grammar(cfg: &RunConfig, dir: &RunDir) -> Result<Grammar> {
    if !dir.path(GRAMMAR_FILE).exists() {
        gen_grammar(cfg, dir, false)?;
    }
    let grammar = load_grammar(dir)?;
    if grammar.params() != &cfg.grammar {
        return Err(Error::Config(format!(
            "{} was generated from different grammar parameters",
            dir.path(GRAMMAR_FILE).display()
        )));
    }
    Ok(grammar)
}

pub fn experiment(cfg: &RunConfig, dir: &RunDir) -> Result<Experiment> {
    Experiment::build(ensure_grammar(cfg, dir)?, &cfg.split, &cfg.sets)
}

/// Writes every condition's sequences to `data/<condition>.jsonl`.
pub fn dump_dataset(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<Vec<PathBuf>> {
    dir.claim(cfg)?;
    let exp = experiment(cfg, dir)?;
    let mut written = Vec::new();
    for cond in EvalCondition::ALL {
        let path = dir.fresh(&format!("{DATA_DIR}/{cond}.jsonl"), force)?;
        let mut out = create(&path)?;
        write_dataset(exp.sets.set(cond).iter(), &mut out)?;
        out.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Encoded evaluation episodes of one condition (`train.eval_episodes` of them).
pub fn dump_episodes(cfg: &RunConfig, dir: &RunDir, condition: EvalCondition, force: bool) -> Result<PathBuf> {
    dir.claim(cfg)?;
    let exp = experiment(cfg, dir)?;
    let layout = cfg.model.layout(cfg.grammar.v);
    let mut rng = sub_stream(cfg.train.seed, Stream::Eval, condition.index() as u64);
    let records = (0..cfg.train.eval_episodes)
        .map(|_| {
            let ep = exp.sets.episode(condition, cfg.train.n_ct, &mut rng)?;
            let stream = encode(&ep, cfg.model.mode, &layout)?;
            Ok(EpisodeRecord {
                condition,
                tokens: stream.ids,
                target_position: stream.target_position,
                target: ep.target,
                root: ep.query_root,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.fresh(&format!("{DATA_DIR}/episodes_{condition}.jsonl"), force)?;
    let mut out = create(&path)?;
    write_episodes(&records, &mut out)?;
    out.flush()?;
    Ok(path)
}

pub fn run_train(cfg: &RunConfig, dir: &RunDir, force: bool, progress: Option<Progress<'_>>) -> Result<TrainOutcome> {
    let metrics_path = dir.fresh(METRICS_FILE, force)?;
    dir.claim(cfg)?;
    let exp = experiment(cfg, dir)?;
    let ckpt_dir = dir.checkpoints();
    if ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir)?;
    }
    fs::create_dir_all(&ckpt_dir)?;
    let mut metrics = create(&metrics_path)?;
    let run = serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?;
    train(
        &exp.grammar,
        &exp.sets,
        &cfg.model,
        &cfg.train,
        TrainOutput {
            metrics: &mut metrics,
            checkpoint_dir: Some(ckpt_dir),
            run,
            progress,
        },
    )
}

pub fn load_checkpoint(dir: &RunDir, step: u64) -> Result<Checkpoint> {
    Checkpoint::load(&checkpoint_path(&dir.checkpoints(), step))
}

fn check_model(ck: &Checkpoint, model: &ModelConfig) -> Result<()> {
    if &ck.header.model != model {
        return Err(Error::Config(format!(
            "checkpoint at step {} was trained with a different model config",
            ck.header.step
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub condition: EvalCondition,
    pub n_ct: usize,
    pub accuracy: Accuracy,
}

/// Scores the checkpoint at `step` on `conditions` (every available one when
/// empty) and appends the results to `eval.csv`.
pub fn run_eval(
    cfg: &RunConfig,
    dir: &RunDir,
    step: u64,
    conditions: &[EvalCondition],
    n_ct: Option<usize>,
) -> Result<Vec<EvalRow>> {
    let ck = load_checkpoint(dir, step)?;
    check_model(&ck, &cfg.model)?;
    let grammar = load_grammar(dir)?;
    let exp = Experiment::build(grammar, &cfg.split, &cfg.sets)?;
    let layout = cfg.model.layout(cfg.grammar.v);
    let n_ct = n_ct.unwrap_or(cfg.train.n_ct);
    let conditions = if conditions.is_empty() {
        available_conditions(&exp.sets)
    } else {
        conditions.to_vec()
    };
    let mut rows = Vec::new();
    for cond in conditions {
        let mut rng = sub_stream(cfg.train.seed, Stream::Eval, cond.index() as u64);
        let accuracy = evaluate(
            &ck.params,
            &cfg.model,
            &layout,
            &exp.sets,
            cond,
            n_ct,
            cfg.train.eval_episodes,
            &mut rng,
        )?;
        rows.push(EvalRow {
            step,
            condition: cond,
            n_ct,
            accuracy,
        });
    }
    let path = dir.path(EVAL_FILE);
    let new = !path.exists();
    let mut out = OpenOptions::new().create(true).append(true).open(&path)?;
    if new {
        writeln!(out, "{EVAL_HEADER}")?;
    }
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.condition, r.n_ct, r.accuracy.n, r.accuracy.accuracy, r.accuracy.lo, r.accuracy.hi
        )?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointAnalysis {
    pub step: u64,
    pub specialization: Vec<SpecializationRecord>,
    /// Overall score per analyzed condition.
    pub overall: Vec<(EvalCondition, f64)>,
    pub pca: Vec<PcaRow>,
    pub clusters: Vec<ClusterRow>,
}

impl CheckpointAnalysis {
    pub fn overall_mean(&self) -> f64 {
        self.overall.iter().map(|(_, s)| s).sum::<f64>() / self.overall.len() as f64
    }
}

/// Specialization per condition, PCA of the post-block residual at the
/// readout slot per layer, and clustering of episode-averaged query-region
/// attention maps, for one set of parameters.
pub fn analyze_params(
    cfg: &RunConfig,
    exp: &Experiment,
    params: &Parameters<f32>,
    step: u64,
) -> Result<CheckpointAnalysis> {
    let model = &cfg.model;
    let layout = model.layout(cfg.grammar.v);
    let n_ct = cfg.analysis.n_ct.unwrap_or(cfg.train.n_ct);
    let conditions = if cfg.analysis.conditions.is_empty() {
        available_conditions(&exp.sets)
    } else {
        cfg.analysis.conditions.clone()
    };
    let mut out = CheckpointAnalysis {
        step,
        ..Default::default()
    };
    let mut hidden: Vec<Vec<Vec<f64>>> = vec![Vec::new(); model.depth];
    let mut maps: Vec<Vec<f64>> = Vec::new();
    for &cond in &conditions {
        let (spec, trace, streams) = condition_specialization(
            params,
            model,
            &layout,
            &exp.grammar,
            &exp.sets,
            cond,
            n_ct,
            cfg.analysis.episodes,
            cfg.analysis.aggregation,
            cfg.train.seed,
            step,
        )?;
        out.overall.push((cond, spec.overall));
        out.specialization.extend(spec.records);
        for (layer, rows) in hidden.iter_mut().enumerate() {
            for (e, s) in streams.iter().enumerate() {
                rows.push(
                    trace
                        .residual_at(layer, e, s.readout_position())
                        .iter()
                        .map(|&x| x as f64)
                        .collect(),
                );
            }
        }
        let grouping = query_grouping(model.mode, &exp.grammar, &streams[0])?;
        let batch = AttentionBatch::from_trace(&trace);
        let (lo, n) = (grouping.offset, grouping.len);
        for layer in 0..batch.layers {
            for head in 0..batch.heads {
                let full = batch.mean_map(layer, head);
                let region: Vec<f64> = (lo..lo + n)
                    .flat_map(|i| full[i * batch.len + lo..i * batch.len + lo + n].iter().copied())
                    .collect();
                let slot = layer * batch.heads + head;
                if maps.len() <= slot {
                    maps.push(region);
                } else {
                    maps[slot].iter_mut().zip(region).for_each(|(m, r)| *m += r);
                }
            }
        }
    }
    for (layer, rows) in hidden.iter().enumerate() {
        match pca(rows) {
            Ok(r) => out
                .pca
                .extend(r.explained_ratio.iter().enumerate().map(|(component, &ratio)| PcaRow {
                    step,
                    layer,
                    component,
                    ratio,
                })),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let k = conditions.len() as f64;
    maps.iter_mut().for_each(|m| m.iter_mut().for_each(|x| *x /= k));
    let labels: Vec<(usize, usize)> = (0..model.depth)
        .flat_map(|l| (0..model.heads).map(move |h| (l, h)))
        .collect();
    let clustering = cluster_heads(&maps, labels, cfg.analysis.similarity, cfg.analysis.cluster_threshold)?;
    out.clusters = clustering
        .heads
        .iter()
        .zip(&clustering.assignment)
        .map(|(&(layer, head), &cluster)| ClusterRow {
            step,
            layer,
            head,
            cluster,
        })
        .collect();
    Ok(out)
}

/// Analyzes every checkpoint of the run and writes the three analysis CSVs.
pub fn run_analyze(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<Vec<CheckpointAnalysis>> {
    let spec_path = dir.fresh(SPECIALIZATION_FILE, force)?;
    let pca_path = dir.fresh(PCA_FILE, force)?;
    let cluster_path = dir.fresh(CLUSTERS_FILE, force)?;
    let ckpt_dir = dir.checkpoints();
    if !ckpt_dir.exists() {
        return Err(Error::MissingArtifact(ckpt_dir));
    }
    let steps = list_checkpoints(&ckpt_dir)?;
    if steps.is_empty() {
        return Err(Error::MissingArtifact(checkpoint_path(&ckpt_dir, 0)));
    }
    let exp = Experiment::build(load_grammar(dir)?, &cfg.split, &cfg.sets)?;
    let mut results = Vec::with_capacity(steps.len());
    for step in steps {
        let ck = load_checkpoint(dir, step)?;
        check_model(&ck, &cfg.model)?;
        results.push(analyze_params(cfg, &exp, &ck.params, step)?);
    }
    let spec: Vec<_> = results.iter().flat_map(|r| r.specialization.iter().cloned()).collect();
    let pcas: Vec<_> = results.iter().flat_map(|r| r.pca.iter().cloned()).collect();
    let clusters: Vec<_> = results.iter().flat_map(|r| r.clusters.iter().cloned()).collect();
    write_specialization_csv(&spec, create(&spec_path)?)?;
    write_pca_csv(&pcas, create(&pca_path)?)?;
    write_cluster_csv(&clusters, create(&cluster_path)?)?;
    Ok(results)
}

/// Oracle ceilings for every available condition, written to `oracle.csv`
/// in the metrics schema with step -1.
pub fn run_oracle(cfg: &RunConfig, dir: &RunDir, force: bool) -> Result<MetricsRow> {
    let path = dir.fresh(ORACLE_FILE, force)?;
    dir.claim(cfg)?;
    let exp = experiment(cfg, dir)?;
    let conditions = available_conditions(&exp.sets);
    let row = oracle_row(
        &exp.grammar,
        &exp.sets,
        &cfg.split.transfer_dists,
        &conditions,
        cfg.train.eval_episodes,
        cfg.train.seed,
    )?;
    let mut out = create(&path)?;
    writeln!(out, "{METRICS_HEADER}")?;
    writeln!(out, "{}", row.to_csv())?;
    out.flush()?;
    Ok(row)
}
