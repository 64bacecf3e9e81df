// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run experiments described by an [`ExperimentConfig`].
//!
//! [`run`] is pure apart from reading model and dataset files: it returns
//! an [`ExperimentReport`] and leaves writing it to the caller. With equal
//! configs and seeds, reports are identical regardless of thread count.

use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{required, DatasetKind, ExperimentConfig, MetricKind, ModelKind, StrategyKind};
use crate::datasets::{self, InductionSpec, Sequence};
use crate::error::{Error, Result};
use crate::fixtures::{default_residual_weights, random_tensor, two_layer_residual};
use crate::graph::{evaluate, Binding, Graph, InputDomain, NodeKind};
use crate::intervene::{
    zero_ablate_nodes, CounterfactualStrategy, DatasetPairing, Dissimilarity, Example, Hypothesis,
    IdentityPlusNoise, Important, Positions, SamplePair, Sampler,
};
use crate::metrics::{attribution, evaluate_pairs, loss_positions, ClassFrequencies};
use crate::models::{
    build_transformer_graph, construct_induction_model, load_weights, GraphOptions, TransformerConfig, WeightBundle,
};
use crate::paths::PathExpr;
use crate::report::{AttributionRow, ExperimentReport, RewriteCheck};
use crate::rewrites::{max_deviation, PROBES};
use crate::search::greedy_head_ranking;
use crate::tensor::Tensor;

/// Sharpness of the constructed induction model when `beta` is absent.
pub const DEFAULT_BETA: f64 = 40.0;
/// Output directory when neither the config nor the caller names one.
pub const DEFAULT_OUTPUT_DIR: &str = "pathpatch-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Patch,
    Attribute,
    Greedy,
    RewriteCheck,
    /// Patching with Gaussian noise on the input embeddings.
    Trace,
    ZeroAblate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Patch => "patch",
            Command::Attribute => "attribute",
            Command::Greedy => "greedy",
            Command::RewriteCheck => "rewrite-check",
            Command::Trace => "trace",
            Command::ZeroAblate => "zero-ablate",
        }
    }
}

/// Command-line overrides of config values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Replaces `sampler.seed` (or `rewrite_check.seed`).
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

/// A built model: the graph before and after the configured rewrites.
#[derive(Clone, Debug)]
pub struct Model {
    pub base: Graph,
    pub graph: Arc<Graph>,
    pub transformer: Option<(TransformerConfig, WeightBundle)>,
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    let m = &cfg.model;
    let opts = GraphOptions {
        input: m.input,
        output: m.output,
        split_heads: true,
    };
    let (base, transformer) = match m.kind {
        ModelKind::Residual => {
            let (d0, d1) = default_residual_weights();
            let w0 = m.w0.as_ref().map(|w| matrix(w, "model.w0")).transpose()?.unwrap_or(d0);
            let w1 = m.w1.as_ref().map(|w| matrix(w, "model.w1")).transpose()?.unwrap_or(d1);
            (two_layer_residual(&w0, &w1)?, None)
        }
        ModelKind::Induction => {
            let beta = m.beta.unwrap_or(DEFAULT_BETA);
            let (tc, w) = construct_induction_model(required(&m.vocab, "model.vocab")?, required(&m.context, "model.context")?, beta)?;
            (build_transformer_graph(&tc, &w, opts)?, Some((tc, w)))
        }
        ModelKind::Weights => {
            let (tc, w) = load_weights(&cfg.resolve(&required(&m.path, "model.path")?))?;
            (build_transformer_graph(&tc, &w, opts)?, Some((tc, w)))
        }
        ModelKind::Graph => {
            let path = cfg.resolve(&required(&m.path, "model.path")?);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            (Graph::from_text(&text, None)?, None)
        }
    };
    let mut graph = base.clone();
    for spec in &m.rewrites {
        graph = spec.apply(&graph)?;
    }
    Ok(Model {
        base,
        graph: Arc::new(graph),
        transformer,
    })
}

fn matrix(rows: &[Vec<f64>], key: &str) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("`{key}` must be a nonempty rectangular matrix")));
    }
    Tensor::matrix(rows.len(), cols, rows.concat())
}

/// Dataset examples, plus the token sequences they came from if any.
pub fn build_dataset(cfg: &ExperimentConfig, model: &Model) -> Result<(Vec<Example>, Option<Vec<Sequence>>)> {
    let d = cfg.section(&cfg.dataset, "dataset")?;
    if d.kind == DatasetKind::Vectors {
        let count = required(&d.count, "dataset.count")?;
        let mut rng = ChaCha8Rng::seed_from_u64(required(&d.seed, "dataset.seed")?);
        let scale = d.scale.unwrap_or(1.0);
        let mut examples = Vec::with_capacity(count);
        for _ in 0..count {
            let mut b = Binding::new();
            for id in model.base.input_leaves() {
                let node = model.base.node(id);
                match &node.kind {
                    NodeKind::Input {
                        shape,
                        domain: InputDomain::Real,
                    } => b.insert(&node.name, random_tensor(&mut rng, shape, scale)?),
                    _ => {
                        return Err(Error::Config(format!(
                            "vector datasets need real inputs, but `{}` is not",
                            node.name
                        )))
                    }
                }
            }
            examples.push(Example::new(b));
        }
        return Ok((examples, None));
    }
    let (tc, w) = model
        .transformer
        .as_ref()
        .ok_or_else(|| Error::Config("token datasets need a transformer model".into()))?;
    let length = d.length.unwrap_or(tc.context);
    let seqs = match d.kind {
        DatasetKind::Induction => datasets::gen_induction_sequences(&InductionSpec {
            count: required(&d.count, "dataset.count")?,
            length,
            vocab: tc.vocab,
            common: d.common.unwrap_or(InductionSpec::default().common),
            ngram: d.ngram.unwrap_or(1),
            seed: required(&d.seed, "dataset.seed")?,
        })?,
        DatasetKind::Distinct => datasets::gen_distinct_sequences(
            required(&d.count, "dataset.count")?,
            length,
            tc.vocab,
            required(&d.seed, "dataset.seed")?,
        )?,
        DatasetKind::Numbers => datasets::gen_number_prompts(required(&d.range_end, "dataset.range_end")?),
        DatasetKind::File => datasets::load(&cfg.resolve(&required(&d.path, "dataset.path")?))?,
        DatasetKind::Vectors => unreachable!("handled above"),
    };
    let examples = seqs
        .iter()
        .map(|s| s.to_example(tc, w, cfg.model.input))
        .collect::<Result<Vec<_>>>()?;
    Ok((examples, Some(seqs)))
}

/// The configured metric, or the default for the graph's output: loss
/// difference at the last position for loss outputs, KL at the last
/// position for rank-2 outputs, absolute difference otherwise.
pub fn build_dissimilarity(cfg: &ExperimentConfig, graph: &Graph) -> Result<Dissimilarity> {
    let delta = match &cfg.metric {
        Some(m) => match m.kind {
            MetricKind::AbsoluteDifference => {
                if m.positions.is_some() {
                    return Err(Error::Config("`metric.positions` does not apply to absolute_difference".into()));
                }
                Dissimilarity::AbsoluteDifference
            }
            MetricKind::LossAbsoluteDifference => Dissimilarity::LossAbsoluteDifference {
                positions: m.positions.unwrap_or(Positions::All),
            },
            MetricKind::Kl => Dissimilarity::Kl {
                positions: m.positions.unwrap_or(Positions::Last),
            },
        },
        None => {
            let out = graph.node(graph.output());
            if matches!(out.kind, NodeKind::CrossEntropy) {
                Dissimilarity::LossAbsoluteDifference {
                    positions: Positions::Last,
                }
            } else if out.shape.len() == 2 {
                Dissimilarity::Kl {
                    positions: Positions::Last,
                }
            } else {
                Dissimilarity::AbsoluteDifference
            }
        }
    };
    delta.check(graph)?;
    Ok(delta)
}

pub fn build_important(cfg: &ExperimentConfig) -> Result<Important> {
    let h = cfg.section(&cfg.hypothesis, "hypothesis")?;
    match (&h.paths, &h.unimportant_nodes) {
        (Some(p), None) => Ok(Important::Expr(PathExpr::parse(p)?)),
        (None, Some(n)) => Ok(Important::AvoidingNodes(n.clone())),
        _ => Err(Error::Config(
            "[hypothesis] needs exactly one of `paths` and `unimportant_nodes`".into(),
        )),
    }
}

pub fn build_strategy(cfg: &ExperimentConfig) -> Result<CounterfactualStrategy> {
    let s = cfg.section(&cfg.sampler, "sampler")?;
    let sigma = || required(&s.sigma, "sampler.sigma");
    Ok(match s.strategy {
        StrategyKind::Resample => CounterfactualStrategy::Resample,
        StrategyKind::Mean => CounterfactualStrategy::Mean,
        StrategyKind::Zero => CounterfactualStrategy::Zero,
        StrategyKind::Gaussian => CounterfactualStrategy::GaussianNoise { sigma: sigma()? },
        StrategyKind::Transform => match required(&s.transform, "sampler.transform")?.as_str() {
            "identity-plus-noise" => CounterfactualStrategy::Transform(Arc::new(IdentityPlusNoise { sigma: sigma()? })),
            "dataset-pairing" => CounterfactualStrategy::Transform(Arc::new(DatasetPairing {
                var: required(&s.var, "sampler.var")?,
            })),
            other => {
                return Err(Error::Config(format!(
                    "unknown transform `{other}`; expected identity-plus-noise or dataset-pairing"
                )))
            }
        },
    })
}

/// Add `hypothesis.constants` to every example's position variables.
pub fn with_constants(cfg: &ExperimentConfig, mut examples: Vec<Example>) -> Vec<Example> {
    if let Some(h) = &cfg.hypothesis {
        for e in &mut examples {
            for (k, v) in &h.constants {
                e.vars.entry(k.clone()).or_insert(*v);
            }
        }
    }
    examples
}

fn conventions(delta: &Dissimilarity) -> Vec<String> {
    vec![
        "labels are always read from the reference input".into(),
        "every unimportant path reads the same counterfactual within a pair".into(),
        format!("dissimilarity: {}", delta.describe()),
        "proportion explained = 100 * (1 - AUE / ATE)".into(),
    ]
}

fn frequencies(graph: &Graph, examples: &[Example], delta: &Dissimilarity) -> Result<Option<ClassFrequencies>> {
    if matches!(graph.node(graph.output()).kind, NodeKind::CrossEntropy) {
        Ok(Some(ClassFrequencies::from_reference(graph, examples, loss_positions(delta))?))
    } else {
        Ok(None)
    }
}

/// Run `command` under an optional dedicated thread pool.
pub fn run(command: Command, cfg: &ExperimentConfig, overrides: &Overrides) -> Result<ExperimentReport> {
    let threads = overrides.parallelism.or(cfg.output.parallelism).unwrap_or(0);
    if threads == 0 {
        return run_inner(command, cfg, overrides);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(command, cfg, overrides))
}

/// Where the report goes: `--out`, then `output.dir`, then the default.
pub fn output_dir(cfg: &ExperimentConfig, overrides: &Overrides) -> PathBuf {
    if let Some(o) = &overrides.out {
        return o.clone();
    }
    match &cfg.output.dir {
        Some(d) => cfg.resolve(d),
        None => PathBuf::from(DEFAULT_OUTPUT_DIR),
    }
}

fn run_inner(command: Command, cfg: &ExperimentConfig, overrides: &Overrides) -> Result<ExperimentReport> {
    let model = build_model(cfg)?;
    if command == Command::RewriteCheck {
        return rewrite_check(cfg, &model, overrides);
    }
    let graph = model.graph.clone();
    let delta = build_dissimilarity(cfg, &graph)?;
    let (examples, seqs) = build_dataset(cfg, &model)?;
    let examples = with_constants(cfg, examples);
    if command == Command::ZeroAblate {
        return zero_ablate(cfg, &graph, &examples, delta);
    }
    let s = cfg.section(&cfg.sampler, "sampler")?;
    let seed = overrides.seed.unwrap_or(s.seed);
    let strategy = match command {
        Command::Trace => {
            let real = |l| matches!(model.base.node(l).kind, NodeKind::Input { domain: InputDomain::Real, .. });
            if !model.base.input_leaves().into_iter().all(real) {
                return Err(Error::Config("trace needs real-valued inputs (model.input = \"embeddings\")".into()));
            }
            CounterfactualStrategy::GaussianNoise {
                sigma: required(&s.sigma, "sampler.sigma")?,
            }
        }
        _ => build_strategy(cfg)?,
    };
    let mut report = ExperimentReport::new(command.name(), seed);
    report.counterfactual = strategy.to_string();
    report.dissimilarity = delta.describe();
    report.conventions = conventions(&delta);
    let sampler = Sampler::new(&graph, &examples, strategy)?;

    match command {
        Command::Patch | Command::Trace => {
            let important = build_important(cfg)?;
            report.hypothesis = important.to_string();
            let h = Hypothesis::new(graph.clone(), important, delta)?;
            let pairs = sampler.sample_pairs(s.samples, seed)?;
            let freq = frequencies(&graph, &examples, &delta)?;
            report.set_records(evaluate_pairs(&h, &pairs, freq.as_ref())?)?;
            if command == Command::Trace {
                report.values = Some(vec![noise_std(&pairs)?]);
                report
                    .conventions
                    .push("values[0] is the measured standard deviation of the input noise".into());
            }
        }
        Command::Attribute => {
            let a = cfg.section(&cfg.attribute, "attribute")?;
            let important = build_important(cfg)?;
            report.hypothesis = important.to_string();
            let h = Hypothesis::new(graph.clone(), important, delta)?;
            let x_r = examples.get(a.example).ok_or_else(|| {
                Error::Config(format!("attribute.example {} is outside the dataset of {}", a.example, examples.len()))
            })?;
            let cfs = sampler.counterfactuals_for(a.example, s.samples, seed)?;
            let values = attribution(&h, x_r, &cfs)?;
            let seq = seqs.as_ref().map(|s| &s[a.example]);
            let labels = seq.map(Sequence::labels);
            report.attribution = Some(
                values
                    .iter()
                    .enumerate()
                    .map(|(t, &value)| AttributionRow {
                        position: t,
                        token: seq.map(|s| s.ids[t]),
                        label: labels.as_ref().map(|l| l[t]),
                        value,
                    })
                    .collect(),
            );
            let pairs: Vec<SamplePair> = cfs
                .into_iter()
                .map(|c| SamplePair {
                    reference: x_r.clone(),
                    counterfactual: c,
                    reference_index: a.example,
                    counterfactual_index: None,
                })
                .collect();
            report.set_records(evaluate_pairs(&h, &pairs, None)?)?;
            report.conventions.push(
                "attribution(t) = mean over counterfactuals of L_t(patched) - L_t(reference)".into(),
            );
        }
        Command::Greedy => {
            let heads = match cfg.greedy.as_ref().and_then(|g| g.heads.clone()) {
                Some(h) => h,
                None => model
                    .transformer
                    .as_ref()
                    .map(|(tc, _)| tc.head_labels())
                    .ok_or_else(|| Error::Config("`greedy.heads` is required for non-transformer models".into()))?,
            };
            report.hypothesis = format!("greedy ranking over {} heads", heads.len());
            let pairs = sampler.sample_pairs(s.samples, seed)?;
            let result = greedy_head_ranking(&graph, &heads, &pairs, delta)?;
            report.samples = pairs.len();
            report.greedy = Some(result);
        }
        Command::RewriteCheck | Command::ZeroAblate => unreachable!("handled above"),
    }
    Ok(report)
}

/// Empirical standard deviation of `x_c - x_r` over every real leaf.
fn noise_std(pairs: &[SamplePair]) -> Result<f64> {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for p in pairs {
        for (name, cf) in p.counterfactual.iter() {
            if let Some(r) = p.reference.binding.get(name) {
                let d = cf.sub(r)?;
                for &v in d.data() {
                    sum += v;
                    sq += v * v;
                    n += 1;
                }
            }
        }
    }
    if n < 2 {
        return Err(Error::Argument("no noise samples".into()));
    }
    let mean = sum / n as f64;
    Ok(((sq - n as f64 * mean * mean) / (n - 1) as f64).sqrt())
}

fn zero_ablate(
    cfg: &ExperimentConfig,
    graph: &Graph,
    examples: &[Example],
    delta: Dissimilarity,
) -> Result<ExperimentReport> {
    let z = cfg.section(&cfg.zero_ablate, "zero_ablate")?;
    let n = z.examples.unwrap_or(examples.len()).min(examples.len());
    let mut report = ExperimentReport::new(Command::ZeroAblate.name(), 0);
    report.hypothesis = format!("zero ablation of {{{}}}", z.nodes.join(", "));
    report.counterfactual = "zero".into();
    report.dissimilarity = delta.describe();
    report.conventions = vec![
        "values[k] = dissimilarity between clean and ablated outputs on example k".into(),
        format!("dissimilarity: {}", delta.describe()),
    ];
    let values = examples[..n]
        .iter()
        .map(|e| {
            let clean = evaluate(graph, &e.binding)?;
            let ablated = zero_ablate_nodes(graph, &z.nodes, &e.binding)?;
            delta.compute(&clean, &ablated)
        })
        .collect::<Result<Vec<f64>>>()?;
    report.samples = values.len();
    report.values = Some(values);
    Ok(report)
}

fn rewrite_check(cfg: &ExperimentConfig, model: &Model, overrides: &Overrides) -> Result<ExperimentReport> {
    let r = cfg.section(&cfg.rewrite_check, "rewrite_check")?;
    if cfg.model.rewrites.is_empty() {
        return Err(Error::Config("rewrite-check needs `model.rewrites`".into()));
    }
    let seed = overrides.seed.unwrap_or(r.seed);
    let probes = r.probes.unwrap_or(PROBES);
    let out = |g: &Graph| g.name(g.output()).to_owned();
    let mut report = ExperimentReport::new(Command::RewriteCheck.name(), seed);
    report.conventions = vec![
        "values[k] = max |output deviation| introduced by rewrite k alone".into(),
        "max_deviation compares the original graph with the fully rewritten one".into(),
    ];
    let mut steps = Vec::new();
    let mut tolerance = 0.0;
    let mut g = model.base.clone();
    for spec in &cfg.model.rewrites {
        let next = spec.apply(&g)?;
        steps.push(max_deviation(&g, &out(&g), &next, &out(&next), probes, seed)?);
        tolerance += spec.tolerance();
        g = next;
    }
    let total = max_deviation(&model.base, &out(&model.base), &model.graph, &out(&model.graph), probes, seed)?;
    report.samples = probes;
    report.hypothesis = cfg.model.rewrites.iter().map(|s| s.name()).collect::<Vec<_>>().join(" then ");
    report.rewrite = Some(RewriteCheck {
        rewrite: report.hypothesis.clone(),
        max_deviation: total,
        tolerance,
        nodes_before: model.base.len(),
        nodes_after: model.graph.len(),
    });
    report.values = Some(steps);
    Ok(report)
}

/// Error out if a rewrite check in `report` exceeded its tolerance.
pub fn verdict(report: &ExperimentReport) -> Result<()> {
    match &report.rewrite {
        Some(c) if c.max_deviation > c.tolerance => Err(Error::RewriteVerification {
            rewrite: c.rewrite.clone(),
            deviation: c.max_deviation,
            tolerance: c.tolerance,
        }),
        _ => Ok(()),
    }
}

/// Keep in sync with the command-line documentation.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::FileNotFound(_) => 3,
        Error::Capacity { .. } => 4,
        Error::Shape { .. } => 5,
        Error::Syntax { .. } => 6,
        _ => 1,
    }
}
