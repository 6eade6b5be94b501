//! Declarative run configuration (TOML) and experiment assembly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{Aggregation, Similarity};
use crate::error::{param_err, Error, Result};
use crate::grammar::{sample_grammar, Grammar, GrammarParams};
use crate::model::ModelConfig;
use crate::rng::{stream, Stream};
use crate::task::{
    build_gen_same, build_splits, build_transfer, ConditionSets, ContextSource, EvalCondition, SplitSpec, Splits,
};
use crate::train::TrainConfig;

/// Sizes and context policy of the evaluation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetsConfig {
    #[serde(default = "d_set_size")]
    pub gen_same_size: usize,
    #[serde(default = "d_set_size")]
    pub transfer_size: usize,
    #[serde(default)]
    pub context_source: ContextSource,
}

fn d_set_size() -> usize {
    512
}

impl Default for SetsConfig {
    fn default() -> Self {
        SetsConfig {
            gen_same_size: d_set_size(),
            transfer_size: d_set_size(),
            context_source: ContextSource::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Conditions to analyze; every condition with a non-empty set when empty.
    #[serde(default)]
    pub conditions: Vec<EvalCondition>,
    /// Episodes per condition and checkpoint.
    #[serde(default = "d_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default = "d_threshold")]
    pub cluster_threshold: f64,
    /// Demonstrations per analyzed episode; the training `n_ct` when absent.
    #[serde(default)]
    pub n_ct: Option<usize>,
}

fn d_episodes() -> usize {
    64
}
fn d_threshold() -> f64 {
    0.5
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            conditions: Vec::new(),
            episodes: d_episodes(),
            aggregation: Aggregation::default(),
            similarity: Similarity::default(),
            cluster_threshold: d_threshold(),
            n_ct: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub grammar: GrammarParams,
    pub split: SplitSpec,
    #[serde(default)]
    pub sets: SetsConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.resolve_vocab(cfg.grammar.v);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_toml(&text)
    }

    /// The effective configuration with every default filled in.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a seed override to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.grammar.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run_id {:?}", self.run_id)));
        }
        self.grammar.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let layout = self.model.layout(self.grammar.v);
        if layout.vocab_size() > self.model.vocab {
            return param_err(format!(
                "model vocab {} is smaller than the token layout ({})",
                self.model.vocab,
                layout.vocab_size()
            ));
        }
        let t = self.analysis.cluster_threshold;
        if !(t > -1.0 && t < 1.0) {
            return param_err(format!("cluster_threshold {t} outside (-1, 1)"));
        }
        Ok(())
    }
}

/// A grammar with its splits and evaluation sets.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub grammar: Grammar,
    pub splits: Splits,
    pub sets: ConditionSets,
    /// Why a condition has no set, when it has none.
    pub skipped: Vec<(EvalCondition, String)>,
}

impl Experiment {
    /// Builds the evaluation sets. A condition that cannot be built for this
    /// grammar (gen-same with nothing novel left, transfer with unchanged
    /// distributions) is left empty and reported in `skipped`.
    pub fn build(grammar: Grammar, split: &SplitSpec, sets_cfg: &SetsConfig) -> Result<Self> {
        let splits = build_splits(&grammar, split)?;
        let mut skipped = Vec::new();
        let level = split.combo_level(&grammar);
        let gen_same = match build_gen_same(
            &grammar,
            &splits.train,
            level,
            sets_cfg.gen_same_size,
            &mut stream(split.seed, Stream::GenSame),
        ) {
            Ok(set) => set,
            Err(Error::Infeasible(why) | Error::Parameter(why)) => {
                skipped.push((EvalCondition::GenSame, why));
                Default::default()
            }
            Err(e) => return Err(e),
        };
        let transfer = match build_transfer(
            &grammar,
            split,
            sets_cfg.transfer_size,
            &mut stream(split.seed, Stream::Transfer),
        ) {
            Ok(set) => set,
            Err(Error::Parameter(why)) => {
                skipped.push((EvalCondition::Transfer, why));
                Default::default()
            }
            Err(e) => return Err(e),
        };
        let sets = ConditionSets {
            train: splits.train.clone(),
            heldout: splits.heldout.clone(),
            gen_same,
            transfer,
            context_source: sets_cfg.context_source,
        };
        Ok(Experiment {
            grammar,
            splits,
            sets,
            skipped,
        })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::build(sample_grammar(&cfg.grammar)?, &cfg.split, &cfg.sets)
    }
}
