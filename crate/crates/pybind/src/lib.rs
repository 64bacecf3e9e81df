// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scripting surface over the `pathpatch` core.
//!
//! This layer converts types and classifies errors; every number it returns
//! is computed by the core. With the `python` feature the same surface is
//! exported as the Python module `pathpatch_py`.

use std::path::Path;
use std::sync::Arc;

use pathpatch::config::ExperimentConfig;
use pathpatch::datasets::Sequence;
use pathpatch::graph::{Binding, Graph};
use pathpatch::intervene::{Dissimilarity, Example, Hypothesis, Important, SamplePair, Sampler};
use pathpatch::metrics::{self, evaluate_pairs};
use pathpatch::models::{self, GraphOptions, InputMode, OutputMode, TransformerConfig, WeightBundle};
use pathpatch::paths::PathExpr;
use pathpatch::runner::{self, Model};
use pathpatch::{Error, Result, Tensor};

#[cfg(feature = "python")]
mod python;

/// Mirrors the core crate version.
pub const VERSION: &str = pathpatch::VERSION;

/// Coarse error class, one per core error variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ErrorClass {
    Argument,
    Shape,
    Structural,
    Binding,
    NonFinite,
    Capacity,
    Syntax,
    Format,
    RewriteVerification,
    UndefinedMetric,
    Config,
    FileNotFound,
    Io,
}

impl ErrorClass {
    pub fn of(err: &Error) -> Self {
        match err {
            Error::Argument(_) => Self::Argument,
            Error::Shape { .. } => Self::Shape,
            Error::Structural(_) => Self::Structural,
            Error::Binding(_) => Self::Binding,
            Error::NonFinite(_) => Self::NonFinite,
            Error::Capacity { .. } => Self::Capacity,
            Error::Syntax { .. } => Self::Syntax,
            Error::Format(_) => Self::Format,
            Error::RewriteVerification { .. } => Self::RewriteVerification,
            Error::UndefinedMetric(_) => Self::UndefinedMetric,
            Error::Config(_) => Self::Config,
            Error::FileNotFound(_) => Self::FileNotFound,
            Error::Io(_) => Self::Io,
        }
    }

    /// Exception type name used by the Python module.
    pub fn exception_name(self) -> &'static str {
        match self {
            Self::Argument => "ArgumentError",
            Self::Shape => "ShapeError",
            Self::Structural => "StructuralError",
            Self::Binding => "BindingError",
            Self::NonFinite => "NonFiniteError",
            Self::Capacity => "CapacityError",
            Self::Syntax => "PatternSyntaxError",
            Self::Format => "FormatError",
            Self::RewriteVerification => "RewriteVerificationError",
            Self::UndefinedMetric => "UndefinedMetricError",
            Self::Config => "ConfigError",
            Self::FileNotFound => "MissingFileError",
            Self::Io => "IoError",
        }
    }

    /// Process exit code the command-line tool uses for this class.
    pub fn exit_code(err: &Error) -> i32 {
        runner::exit_code(err)
    }
}

/// A dense array as shape plus row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<Tensor> for Array {
    fn from(t: Tensor) -> Self {
        Array {
            shape: t.shape().to_vec(),
            data: t.into_data(),
        }
    }
}

/// Aggregates of one hypothesis over sampled pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub aue: f64,
    pub ate: f64,
    /// `None` when the total effect is zero.
    pub proportion_explained: Option<f64>,
    pub samples: usize,
}

/// Load a graph in the text format. `params` fills `param` nodes.
pub fn load_graph(path: &Path, params: Option<&std::collections::BTreeMap<String, Tensor>>) -> Result<Graph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Graph::from_text(&text, params)
}

pub fn load_weights(path: &Path) -> Result<(TransformerConfig, WeightBundle)> {
    models::load_weights(path)
}

/// Build a per-head transformer graph from loaded weights.
pub fn build_transformer(cfg: &TransformerConfig, w: &WeightBundle, input: InputMode, output: OutputMode) -> Result<Graph> {
    models::build_transformer_graph(
        cfg,
        w,
        GraphOptions {
            input,
            output,
            split_heads: true,
        },
    )
}

/// A hypothesis from pattern lines such as `["all", "- … → a1.h5.o → …"]`.
pub fn hypothesis<S: AsRef<str>>(graph: Arc<Graph>, patterns: &[S], metric: Dissimilarity) -> Result<Hypothesis> {
    Hypothesis::new(graph, Important::Expr(PathExpr::parse_lines(patterns)?), metric)
}

/// Bind flat values to input leaves, taking each shape from the graph.
pub fn binding<S: AsRef<str>>(graph: &Graph, values: &[(S, Vec<f64>)]) -> Result<Binding> {
    let mut b = Binding::new();
    for (name, data) in values {
        let name = name.as_ref();
        let id = graph
            .id(name)
            .ok_or_else(|| Error::Binding(format!("graph has no leaf `{name}`")))?;
        b.insert(name, Tensor::new(graph.node(id).shape.clone(), data.clone())?);
    }
    Ok(b)
}

/// Output of the graph with `x_r` on important paths and `x_c` elsewhere.
pub fn run_patched(h: &Hypothesis, x_r: &Binding, x_c: &Binding) -> Result<Array> {
    Ok(pathpatch::intervene::run_patched(h, &Example::new(x_r.clone()), x_c)?.into())
}

/// Score a hypothesis on explicit pairs.
pub fn score(h: &Hypothesis, pairs: &[SamplePair]) -> Result<Scores> {
    let records = evaluate_pairs(h, pairs, None)?;
    let (aue, ate) = (metrics::aue(&records), metrics::ate(&records));
    Ok(Scores {
        aue,
        ate,
        proportion_explained: metrics::proportion_explained(aue, ate).ok(),
        samples: records.len(),
    })
}

/// An experiment config with its model and dataset built.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Model,
    pub examples: Vec<Example>,
    pub sequences: Option<Vec<Sequence>>,
    seed: Option<u64>,
}

impl Experiment {
    /// `seed` overrides the sampler seed, as `--seed` does on the command line.
    pub fn open(path: &Path, seed: Option<u64>) -> Result<Self> {
        let config = ExperimentConfig::load(path)?;
        let model = runner::build_model(&config)?;
        let (examples, sequences) = runner::build_dataset(&config, &model)?;
        let examples = runner::with_constants(&config, examples);
        Ok(Experiment {
            config,
            model,
            examples,
            sequences,
            seed,
        })
    }

    pub fn graph(&self) -> Arc<Graph> {
        self.model.graph.clone()
    }

    pub fn hypothesis(&self) -> Result<Hypothesis> {
        let delta = runner::build_dissimilarity(&self.config, &self.model.graph)?;
        Hypothesis::new(self.graph(), runner::build_important(&self.config)?, delta)
    }

    fn sampler(&self) -> Result<(Sampler<'_>, usize, u64)> {
        let s = self.config.section(&self.config.sampler, "sampler")?;
        let sampler = Sampler::new(&self.model.graph, &self.examples, runner::build_strategy(&self.config)?)?;
        Ok((sampler, s.samples, self.seed.unwrap_or(s.seed)))
    }

    /// The pairs the `patch` command would draw.
    pub fn pairs(&self) -> Result<Vec<SamplePair>> {
        let (sampler, n, seed) = self.sampler()?;
        sampler.sample_pairs(n, seed)
    }

    pub fn scores(&self) -> Result<Scores> {
        score(&self.hypothesis()?, &self.pairs()?)
    }

    /// Per-position attribution for `[attribute] example`, shape `(tokens,)`.
    pub fn attribution(&self) -> Result<Vec<f64>> {
        let a = self.config.section(&self.config.attribute, "attribute")?;
        let x_r = self
            .examples
            .get(a.example)
            .ok_or_else(|| Error::Config(format!("attribute.example {} is outside the dataset", a.example)))?;
        let (sampler, n, seed) = self.sampler()?;
        let cfs = sampler.counterfactuals_for(a.example, n, seed)?;
        metrics::attribution(&self.hypothesis()?, x_r, &cfs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pathpatch::fixtures::{default_residual_weights, two_layer_residual};

    #[test]
    fn patched_output_has_graph_shape() {
        let (w0, w1) = default_residual_weights();
        let g = Arc::new(two_layer_residual(&w0, &w1).unwrap());
        let h = hypothesis(g.clone(), &["all"], Dissimilarity::AbsoluteDifference).unwrap();
        let r = binding(&g, &[("x", vec![1.0, 2.0])]).unwrap();
        let c = binding(&g, &[("x", vec![0.0, -1.0])]).unwrap();
        let out = run_patched(&h, &r, &c).unwrap();
        assert_eq!(out.shape, vec![2]);
        assert_eq!(out.data, pathpatch::graph::evaluate(&g, &r).unwrap().into_data());
    }

    #[test]
    fn errors_keep_their_class() {
        let (w0, w1) = default_residual_weights();
        let g = Arc::new(two_layer_residual(&w0, &w1).unwrap());
        let err = hypothesis(g.clone(), &["- x → → Y"], Dissimilarity::AbsoluteDifference).unwrap_err();
        assert_eq!(ErrorClass::of(&err), ErrorClass::Syntax);
        let err = binding(&g, &[("x", vec![1.0])]).unwrap_err();
        assert_eq!(ErrorClass::of(&err), ErrorClass::Shape);
        let err = binding(&g, &[("y", vec![1.0])]).unwrap_err();
        assert_eq!(ErrorClass::of(&err).exception_name(), "BindingError");
    }
}
