// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration files (TOML).
//!
//! Sections: `[model]`, `[dataset]`, `[hypothesis]`, `[sampler]`,
//! `[metric]`, `[output]`, plus per-command `[attribute]`, `[greedy]`,
//! `[rewrite_check]` and `[zero_ablate]`. Unknown keys are errors and
//! every random draw needs an explicit seed. Relative paths resolve
//! against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::intervene::Positions;
use crate::models::{InputMode, OutputMode};
use crate::rewrites::RewriteSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// The two-layer residual example `Y = x + f0(x) + f1(x + f0(x))`.
    Residual,
    /// The analytic two-head induction transformer.
    Induction,
    /// A transformer loaded from a weight file.
    Weights,
    /// A graph in the text format.
    Graph,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub vocab: Option<usize>,
    pub context: Option<usize>,
    pub beta: Option<f64>,
    pub path: Option<PathBuf>,
    /// Row-major 2×2 weights of `f0` and `f1` for `residual`.
    pub w0: Option<Vec<Vec<f64>>>,
    pub w1: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub input: InputMode,
    #[serde(default)]
    pub output: OutputMode,
    /// Applied in order after the graph is built.
    #[serde(default)]
    pub rewrites: Vec<RewriteSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Induction,
    /// Sequences without repeated tokens.
    Distinct,
    Numbers,
    File,
    /// Gaussian vectors for every real input leaf.
    Vectors,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub count: Option<usize>,
    pub length: Option<usize>,
    pub common: Option<usize>,
    pub ngram: Option<usize>,
    pub range_end: Option<usize>,
    pub scale: Option<f64>,
    pub path: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisSection {
    /// Path expression selecting the important paths.
    pub paths: Option<String>,
    /// Alternatively: nodes whose paths are all unimportant.
    pub unimportant_nodes: Option<Vec<String>>,
    /// Extra position variables, e.g. a window size `K`.
    #[serde(default)]
    pub constants: BTreeMap<String, i64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Resample,
    Mean,
    Zero,
    Gaussian,
    Transform,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub strategy: StrategyKind,
    pub samples: usize,
    pub seed: u64,
    pub sigma: Option<f64>,
    /// `identity-plus-noise` or `dataset-pairing`.
    pub transform: Option<String>,
    /// Metadata variable that must differ under `dataset-pairing`.
    pub var: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    AbsoluteDifference,
    LossAbsoluteDifference,
    Kl,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSection {
    pub kind: MetricKind,
    pub positions: Option<Positions>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Worker threads; 0 or absent means all available cores.
    pub parallelism: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSection {
    /// Index of the reference example in the dataset.
    pub example: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedySection {
    /// Head labels `"L.H"`; all heads when absent.
    pub heads: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteCheckSection {
    pub probes: Option<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroAblateSection {
    pub nodes: Vec<String>,
    /// Number of leading dataset examples to ablate on.
    pub examples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub dataset: Option<DatasetSection>,
    pub hypothesis: Option<HypothesisSection>,
    pub sampler: Option<SamplerSection>,
    pub metric: Option<MetricSection>,
    #[serde(default)]
    pub output: OutputSection,
    pub attribute: Option<AttributeSection>,
    pub greedy: Option<GreedySection>,
    pub rewrite_check: Option<RewriteCheckSection>,
    pub zero_ablate: Option<ZeroAblateSection>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_owned();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_owned).unwrap_or_default();
        Self::parse(&text, &dir)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn section<'a, T>(&self, value: &'a Option<T>, name: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::Config(format!("missing [{name}] section")))
    }
}

/// Fetch a required optional field with a uniform message.
pub fn required<T: Clone>(value: &Option<T>, key: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::Config(format!("`{key}` is required")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let text = r#"
            [model]
            kind = "induction"
            vocab = 32
            context = 16
            beta = 40.0
            output = "loss"
            rewrites = [{ kind = "slice_positions", leaf = "tok" }]

            [dataset]
            kind = "induction"
            count = 100
            seed = 3

            [hypothesis]
            paths = "all; - … → a1.h5.o → …"
            constants = { K = 3 }

            [sampler]
            strategy = "resample"
            samples = 10
            seed = 1

            [metric]
            kind = "loss_absolute_difference"
            positions = "last"
        "#;
        let cfg = ExperimentConfig::parse(text, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Induction);
        assert_eq!(cfg.model.rewrites.len(), 1);
        assert_eq!(cfg.hypothesis.as_ref().unwrap().constants["K"], 3);
        assert_eq!(cfg.metric.as_ref().unwrap().positions, Some(Positions::Last));
        assert_eq!(cfg.resolve(Path::new("w.bin")), Path::new("/tmp/w.bin"));
    }

    #[test]
    fn seeds_are_mandatory_and_keys_checked() {
        let base = "[model]\nkind = \"residual\"\n";
        let no_seed = format!("{base}[sampler]\nstrategy = \"zero\"\nsamples = 3\n");
        assert!(matches!(ExperimentConfig::parse(&no_seed, Path::new(".")), Err(Error::Config(m)) if m.contains("seed")));
        let typo = format!("{base}colour = 1\n");
        assert!(matches!(ExperimentConfig::parse(&typo, Path::new(".")), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::load(Path::new("/nonexistent/x.toml")), Err(Error::FileNotFound(_))));
    }
}
