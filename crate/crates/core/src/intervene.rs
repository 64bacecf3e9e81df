// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hypotheses and patched evaluation.
//!
//! Patched evaluation never builds the treeified graph. Instead a
//! [`RouteId`] records, for the conceptual tree rooted at the output, which
//! source feeds every leaf copy; the evaluator memoizes on
//! `(node, route)` so identical subtrees are computed once.
//!
//! Routes come from one of three descriptions of the important set:
//! an explicit [`PathSet`], a hypothesis expression (evaluated by a
//! dynamic program over reversed pattern automata, so no path is ever
//! enumerated), or a set of unimportant nodes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    evaluate_with_overrides, Binding, Evaluator, Graph, InputDomain, NodeId, NodeKind, RouteArena, RouteId,
    SourceId, COUNTERFACTUAL, REFERENCE,
};
use crate::paths::{enumerate_paths, Nfa, Path, PathExpr, PathSet, PositionVars, ResolvedExpr};
use crate::tensor::Tensor;

/// Most attempts at drawing a counterfactual different from the reference.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 100;

/// Which paths a hypothesis claims are important.
#[derive(Clone, Debug)]
pub enum Important {
    /// Paths selected by an expression, resolved per example.
    Expr(PathExpr),
    /// An explicit set of paths.
    Paths(PathSet),
    /// Every path avoiding all of these nodes.
    AvoidingNodes(Vec<String>),
}

impl fmt::Display for Important {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Important::Expr(e) => write!(f, "{e}"),
            Important::Paths(p) => write!(f, "{} explicit paths", p.len()),
            Important::AvoidingNodes(n) => write!(f, "paths avoiding {{{}}}", n.join(", ")),
        }
    }
}

/// Token positions a distribution or loss metric compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    All,
    #[default]
    Last,
}

/// The dissimilarity δ between the original and the patched output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dissimilarity {
    /// Mean absolute elementwise difference.
    AbsoluteDifference,
    /// Absolute difference of per-token losses, averaged over positions.
    /// The output must be a per-token loss vector.
    LossAbsoluteDifference {
        #[serde(default = "all_positions")]
        positions: Positions,
    },
    /// `KL(softmax(reference) ‖ softmax(patched))` over output logits,
    /// at the last position or averaged over all of them.
    Kl {
        #[serde(default)]
        positions: Positions,
    },
}

fn all_positions() -> Positions {
    Positions::All
}

fn selected_rows(t: &Tensor, positions: Positions) -> Vec<usize> {
    let n = t.shape()[0];
    match positions {
        Positions::All => (0..n).collect(),
        Positions::Last => vec![n - 1],
    }
}

impl Dissimilarity {
    pub fn describe(&self) -> String {
        match self {
            Dissimilarity::AbsoluteDifference => "mean absolute difference of outputs".into(),
            Dissimilarity::LossAbsoluteDifference { positions } => {
                format!("absolute per-token loss difference ({} positions)", positions_word(*positions))
            }
            Dissimilarity::Kl { positions } => format!(
                "KL(reference ‖ patched) of next-token distributions ({} positions)",
                positions_word(*positions)
            ),
        }
    }

    /// Check the dissimilarity against the graph output.
    pub fn check(&self, graph: &Graph) -> Result<()> {
        let out = graph.node(graph.output());
        match self {
            Dissimilarity::AbsoluteDifference => Ok(()),
            Dissimilarity::LossAbsoluteDifference { .. } => {
                if matches!(out.kind, NodeKind::CrossEntropy) {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "loss dissimilarity needs a per-token loss output, but `{}` is `{}`",
                        out.name,
                        out.kind.keyword()
                    )))
                }
            }
            Dissimilarity::Kl { .. } => {
                if out.shape.len() == 2 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "KL dissimilarity needs [positions, vocab] logits, but `{}` has shape {:?}",
                        out.name, out.shape
                    )))
                }
            }
        }
    }

    pub fn compute(&self, reference: &Tensor, patched: &Tensor) -> Result<f64> {
        match self {
            Dissimilarity::AbsoluteDifference => reference.mean_abs_diff(patched),
            Dissimilarity::LossAbsoluteDifference { positions } => {
                let rows = selected_rows(reference, *positions);
                let total: f64 = rows
                    .iter()
                    .map(|&r| (reference.data()[r] - patched.data()[r]).abs())
                    .sum();
                Ok(total / rows.len() as f64)
            }
            Dissimilarity::Kl { positions } => {
                let p = reference.softmax(1)?;
                let q = patched.softmax(1)?;
                let rows = selected_rows(reference, *positions);
                let mut total = 0.0;
                for &r in &rows {
                    let pr = Tensor::vector(p.row(r).to_vec())?;
                    let qr = Tensor::vector(q.row(r).to_vec())?;
                    total += crate::tensor::kl_divergence(&pr, &qr)?;
                }
                Ok(total / rows.len() as f64)
            }
        }
    }
}

fn positions_word(p: Positions) -> &'static str {
    match p {
        Positions::All => "all",
        Positions::Last => "last",
    }
}

/// The important-path claim together with how it is scored.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub graph: Arc<Graph>,
    pub important: Important,
    pub dissimilarity: Dissimilarity,
}

impl Hypothesis {
    pub fn new(graph: Arc<Graph>, important: Important, dissimilarity: Dissimilarity) -> Result<Self> {
        dissimilarity.check(&graph)?;
        if let Important::AvoidingNodes(nodes) = &important {
            for n in nodes {
                graph.require(n)?;
            }
        }
        if let Important::Paths(paths) = &important {
            for p in paths {
                p.validate(&graph)?;
            }
        }
        Ok(Hypothesis {
            graph,
            important,
            dissimilarity,
        })
    }

    /// Route for one example. `vars` resolves position identifiers.
    pub fn route(&self, arena: &mut RouteArena, vars: &PositionVars) -> Result<RouteId> {
        match &self.important {
            Important::Expr(e) => Ok(route_for_expr(&self.graph, arena, &e.resolve(vars)?)),
            Important::Paths(p) => Ok(route_for_path_set(&self.graph, arena, p)),
            Important::AvoidingNodes(n) => route_avoiding_nodes(&self.graph, arena, n),
        }
    }
}

/// A reference example: leaf values plus position variables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Example {
    pub binding: Binding,
    pub vars: PositionVars,
}

impl Example {
    pub fn new(binding: Binding) -> Self {
        Example {
            binding,
            vars: PositionVars::new(),
        }
    }
}

/// One `(x_r, x_c)` draw. Labels are always taken from `x_r`.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub reference: Example,
    pub counterfactual: Binding,
    pub reference_index: usize,
    /// Index into the reference set when `x_c` is one of its members.
    pub counterfactual_index: Option<usize>,
}

/// Extension point for counterfactuals derived from the reference input.
pub trait InputTransform: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn apply(
        &self,
        graph: &Graph,
        reference: &[Example],
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Binding, Option<usize>)>;
}

/// `x_c = x_r + ε` with `ε ~ N(0, σ²)` on every real input leaf.
#[derive(Clone, Debug)]
pub struct IdentityPlusNoise {
    pub sigma: f64,
}

impl InputTransform for IdentityPlusNoise {
    fn name(&self) -> String {
        format!("identity-plus-noise(sigma={})", self.sigma)
    }

    fn apply(
        &self,
        graph: &Graph,
        reference: &[Example],
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Binding, Option<usize>)> {
        Ok((add_noise(graph, &reference[index].binding, self.sigma, rng)?, None))
    }
}

/// Pair with another reference example whose position variable `var`
/// differs, e.g. prompts with a different number.
#[derive(Clone, Debug)]
pub struct DatasetPairing {
    pub var: String,
}

impl InputTransform for DatasetPairing {
    fn name(&self) -> String {
        format!("dataset-pairing(var={})", self.var)
    }

    fn apply(
        &self,
        _graph: &Graph,
        reference: &[Example],
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Binding, Option<usize>)> {
        let key = |e: &Example| {
            e.vars.get(&self.var).copied().ok_or_else(|| {
                Error::Config(format!("example lacks the pairing variable `{}`", self.var))
            })
        };
        let own = key(&reference[index])?;
        for _ in 0..MAX_RESAMPLE_ATTEMPTS {
            let k = rng.random_range(0..reference.len());
            if key(&reference[k])? != own {
                return Ok((reference[k].binding.clone(), Some(k)));
            }
        }
        Err(Error::Argument(format!(
            "no example with a different `{}` after {MAX_RESAMPLE_ATTEMPTS} draws",
            self.var
        )))
    }
}

/// How `x_c` is chosen for each pair.
#[derive(Clone, Debug)]
pub enum CounterfactualStrategy {
    /// Another member of the reference set, never equal to `x_r`.
    Resample,
    Transform(Arc<dyn InputTransform>),
    /// The mean of the reference set (real inputs only).
    Mean,
    /// All-zero inputs (real inputs only).
    Zero,
    /// `x_r` plus Gaussian noise (real inputs only).
    GaussianNoise { sigma: f64 },
}

impl fmt::Display for CounterfactualStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CounterfactualStrategy::Resample => f.write_str("resample"),
            CounterfactualStrategy::Transform(t) => f.write_str(&t.name()),
            CounterfactualStrategy::Mean => f.write_str("mean"),
            CounterfactualStrategy::Zero => f.write_str("zero"),
            CounterfactualStrategy::GaussianNoise { sigma } => write!(f, "gaussian-noise(sigma={sigma})"),
        }
    }
}

fn real_leaves(graph: &Graph, what: &str) -> Result<Vec<NodeId>> {
    let leaves = graph.input_leaves();
    for &l in &leaves {
        if let NodeKind::Input {
            domain: InputDomain::Tokens { .. },
            ..
        } = graph.node(l).kind
        {
            return Err(Error::Config(format!(
                "{what} counterfactuals need real-valued inputs, but `{}` holds token ids",
                graph.name(l)
            )));
        }
    }
    Ok(leaves)
}

/// Leaf name under which a sliced leaf's value is bound.
fn bound_name<'a>(binding: &Binding, name: &'a str) -> &'a str {
    if binding.get(name).is_some() {
        return name;
    }
    match crate::graph::split_position_name(name) {
        Some((base, _)) => base,
        None => name,
    }
}

fn bound_leaf_names(graph: &Graph, binding: &Binding, leaves: &[NodeId]) -> Vec<String> {
    let mut names: Vec<String> = leaves
        .iter()
        .map(|&l| bound_name(binding, graph.name(l)).to_owned())
        .collect();
    names.dedup();
    names
}

fn add_noise(graph: &Graph, x: &Binding, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Binding> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be positive, got {sigma}")));
    }
    let leaves = real_leaves(graph, "noise")?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = x.clone();
    for name in bound_leaf_names(graph, x, &leaves) {
        let value = x
            .get(&name)
            .ok_or_else(|| Error::Binding(format!("leaf `{name}` is not bound")))?;
        let noisy: Vec<f64> = value.data().iter().map(|v| v + normal.sample(rng)).collect();
        out.insert(&name, Tensor::new(value.shape().to_vec(), noisy)?);
    }
    Ok(out)
}

fn same_inputs(graph: &Graph, a: &Binding, b: &Binding) -> bool {
    let leaves = graph.input_leaves();
    bound_leaf_names(graph, a, &leaves)
        .iter()
        .all(|n| a.get(n) == b.get(n))
}

/// Precomputed state for drawing pairs.
#[derive(Clone, Debug)]
pub struct Sampler<'a> {
    graph: &'a Graph,
    reference: &'a [Example],
    strategy: CounterfactualStrategy,
    fixed: Option<Binding>,
}

impl<'a> Sampler<'a> {
    pub fn new(graph: &'a Graph, reference: &'a [Example], strategy: CounterfactualStrategy) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::Argument("reference set is empty".into()));
        }
        let fixed = match &strategy {
            CounterfactualStrategy::Mean => Some(mean_binding(graph, reference)?),
            CounterfactualStrategy::Zero => {
                let leaves = real_leaves(graph, "zero")?;
                let first = &reference[0].binding;
                let mut b = first.clone();
                for name in bound_leaf_names(graph, first, &leaves) {
                    let shape = first
                        .get(&name)
                        .ok_or_else(|| Error::Binding(format!("leaf `{name}` is not bound")))?
                        .shape()
                        .to_vec();
                    b.insert(&name, Tensor::zeros(&shape));
                }
                Some(b)
            }
            CounterfactualStrategy::GaussianNoise { sigma } => {
                real_leaves(graph, "noise")?;
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("noise sigma must be positive, got {sigma}")));
                }
                None
            }
            _ => None,
        };
        Ok(Sampler {
            graph,
            reference,
            strategy,
            fixed,
        })
    }

    /// Counterfactual for reference example `index`.
    pub fn counterfactual(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<(Binding, Option<usize>)> {
        let x_r = &self.reference[index].binding;
        match &self.strategy {
            CounterfactualStrategy::Resample => {
                for _ in 0..MAX_RESAMPLE_ATTEMPTS {
                    let k = rng.random_range(0..self.reference.len());
                    let candidate = &self.reference[k].binding;
                    if !same_inputs(self.graph, x_r, candidate) {
                        return Ok((candidate.clone(), Some(k)));
                    }
                }
                Err(Error::Argument(format!(
                    "every resampled counterfactual equalled the reference after {MAX_RESAMPLE_ATTEMPTS} draws"
                )))
            }
            CounterfactualStrategy::Transform(t) => t.apply(self.graph, self.reference, index, rng),
            CounterfactualStrategy::Mean | CounterfactualStrategy::Zero => {
                Ok((self.fixed.clone().expect("precomputed"), None))
            }
            CounterfactualStrategy::GaussianNoise { sigma } => Ok((add_noise(self.graph, x_r, *sigma, rng)?, None)),
        }
    }

    /// One pair with `x_r` uniform over the reference set.
    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> Result<SamplePair> {
        let index = rng.random_range(0..self.reference.len());
        let (counterfactual, counterfactual_index) = self.counterfactual(index, rng)?;
        Ok(SamplePair {
            reference: self.reference[index].clone(),
            counterfactual,
            reference_index: index,
            counterfactual_index,
        })
    }

    /// `count` pairs from one seeded stream.
    pub fn sample_pairs(&self, count: usize, seed: u64) -> Result<Vec<SamplePair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample_pair(&mut rng)).collect()
    }

    /// `count` counterfactuals for one fixed reference example.
    pub fn counterfactuals_for(&self, index: usize, count: usize, seed: u64) -> Result<Vec<Binding>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Ok(self.counterfactual(index, &mut rng)?.0)).collect()
    }
}

/// Convenience wrapper: draw one pair from a fresh stream seeded by `seed`.
pub fn sample_pair(
    graph: &Graph,
    strategy: CounterfactualStrategy,
    reference: &[Example],
    seed: u64,
) -> Result<SamplePair> {
    let sampler = Sampler::new(graph, reference, strategy)?;
    sampler.sample_pair(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn mean_binding(graph: &Graph, reference: &[Example]) -> Result<Binding> {
    let leaves = real_leaves(graph, "mean")?;
    let first = &reference[0].binding;
    let mut out = first.clone();
    for name in bound_leaf_names(graph, first, &leaves) {
        let mut total: Option<Tensor> = None;
        for e in reference {
            let v = e
                .binding
                .get(&name)
                .ok_or_else(|| Error::Binding(format!("leaf `{name}` is not bound")))?;
            total = Some(match total {
                None => v.clone(),
                Some(t) => t.add(v)?,
            });
        }
        let mean = total.expect("nonempty").scale(1.0 / reference.len() as f64)?;
        out.insert(&name, mean);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Route construction

fn source_for(important: bool) -> SourceId {
    if important {
        REFERENCE
    } else {
        COUNTERFACTUAL
    }
}

/// Route for an explicit important set: members read `x_r`, every other
/// path reads `x_c`.
pub fn route_for_path_set(graph: &Graph, arena: &mut RouteArena, important: &PathSet) -> RouteId {
    let assignment: Vec<(Path, SourceId)> = important.iter().map(|p| (p.clone(), REFERENCE)).collect();
    route_for_assignment(graph, arena, &assignment, COUNTERFACTUAL)
}

/// Route for an arbitrary path-to-source assignment; unlisted paths read
/// `default`.
pub fn route_for_assignment(
    graph: &Graph,
    arena: &mut RouteArena,
    assignment: &[(Path, SourceId)],
    default: SourceId,
) -> RouteId {
    // Each entry walks from the output (depth 0) toward its leaf.
    let entries: Vec<(&[NodeId], &[u16], SourceId)> = assignment
        .iter()
        .map(|(p, s)| (p.nodes(), p.ports(), *s))
        .collect();
    let all: Vec<usize> = (0..entries.len()).collect();
    trie_route(graph, arena, &entries, &all, graph.output(), 0, default)
}

fn trie_route(
    graph: &Graph,
    arena: &mut RouteArena,
    entries: &[(&[NodeId], &[u16], SourceId)],
    members: &[usize],
    node: NodeId,
    depth: usize,
    default: SourceId,
) -> RouteId {
    if !graph.is_input_dependent(node) {
        return arena.any();
    }
    if graph.is_patchable_leaf(node) {
        let source = members
            .iter()
            .map(|&m| entries[m].2)
            .find(|_| true)
            .unwrap_or(default);
        return arena.uniform(source);
    }
    if members.is_empty() {
        return arena.uniform(default);
    }
    let inputs = graph.node(node).inputs.clone();
    let mut children = Vec::with_capacity(inputs.len());
    for (port, &inp) in inputs.iter().enumerate() {
        let sub: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&m| {
                let (nodes, ports, _) = entries[m];
                let k = nodes.len() - 1 - depth;
                k >= 1 && ports[k - 1] as usize == port && nodes[k - 1] == inp
            })
            .collect();
        children.push(trie_route(graph, arena, entries, &sub, inp, depth + 1, default));
    }
    arena.split(children)
}

/// Route for a resolved hypothesis expression, without enumerating paths.
///
/// A depth-first pass from the output carries, for every pattern term, the
/// state set of its reversed automaton after reading the suffix of the
/// path from the current node to the output. At a leaf, accepting states
/// decide membership. Results are memoized on `(node, state sets)`, so
/// the cost is bounded by the number of distinct such pairs.
pub fn route_for_expr(graph: &Graph, arena: &mut RouteArena, expr: &ResolvedExpr) -> RouteId {
    let nfas: Vec<(Nfa, bool)> = expr
        .terms()
        .iter()
        .map(|(_, p)| (p.reverse_nfa(), p.is_negated()))
        .collect();
    let out = graph.output();
    let start: Vec<u64> = nfas.iter().map(|(n, _)| n.step(n.start(), graph.name(out))).collect();
    let mut memo = HashMap::new();
    let mut dp = ExprRouter {
        graph,
        expr,
        nfas: &nfas,
        memo: &mut memo,
    };
    dp.route(arena, out, start)
}

struct ExprRouter<'a> {
    graph: &'a Graph,
    expr: &'a ResolvedExpr,
    nfas: &'a [(Nfa, bool)],
    memo: &'a mut HashMap<(NodeId, Vec<u64>), RouteId>,
}

impl ExprRouter<'_> {
    fn decide(&self, states: &[u64]) -> bool {
        self.expr
            .decide(|k| self.nfas[k].0.accepts(states[k]) != self.nfas[k].1)
    }

    fn route(&mut self, arena: &mut RouteArena, node: NodeId, states: Vec<u64>) -> RouteId {
        if !self.graph.is_input_dependent(node) {
            return arena.any();
        }
        if self.graph.is_patchable_leaf(node) {
            return arena.uniform(source_for(self.decide(&states)));
        }
        // Dead automata cannot change their verdict further down.
        if states.iter().all(|&s| s == 0) {
            return arena.uniform(source_for(self.decide(&states)));
        }
        let key = (node, states);
        if let Some(&r) = self.memo.get(&key) {
            return r;
        }
        let inputs = self.graph.node(node).inputs.clone();
        let mut children = Vec::with_capacity(inputs.len());
        for &inp in &inputs {
            let name = self.graph.name(inp);
            let next: Vec<u64> = self
                .nfas
                .iter()
                .zip(&key.1)
                .map(|((nfa, _), &s)| nfa.step(s, name))
                .collect();
            children.push(self.route(arena, inp, next));
        }
        let r = arena.split(children);
        self.memo.insert(key, r);
        r
    }
}

/// Route under which every path through any of `nodes` reads `x_c` and
/// all other paths read `x_r`.
pub fn route_avoiding_nodes(graph: &Graph, arena: &mut RouteArena, nodes: &[String]) -> Result<RouteId> {
    let blocked: HashSet<NodeId> = nodes.iter().map(|n| graph.require(n)).collect::<Result<_>>()?;
    let mut memo: HashMap<NodeId, RouteId> = HashMap::new();
    fn go(
        graph: &Graph,
        arena: &mut RouteArena,
        blocked: &HashSet<NodeId>,
        memo: &mut HashMap<NodeId, RouteId>,
        node: NodeId,
    ) -> RouteId {
        if !graph.is_input_dependent(node) {
            return arena.any();
        }
        if blocked.contains(&node) {
            return arena.uniform(COUNTERFACTUAL);
        }
        if graph.is_patchable_leaf(node) {
            return arena.uniform(REFERENCE);
        }
        if let Some(&r) = memo.get(&node) {
            return r;
        }
        let children = graph
            .node(node)
            .inputs
            .clone()
            .into_iter()
            .map(|i| go(graph, arena, blocked, memo, i))
            .collect();
        let r = arena.split(children);
        memo.insert(node, r);
        r
    }
    Ok(go(graph, arena, &blocked, &mut memo, graph.output()))
}

/// The important set of the node-mediator hypothesis "these nodes are
/// unimportant": every path avoiding all of them.
pub fn nodes_to_paths(graph: &Graph, unimportant: &[String]) -> Result<PathSet> {
    let blocked: Vec<NodeId> = unimportant.iter().map(|n| graph.require(n)).collect::<Result<_>>()?;
    let all = enumerate_paths(graph)?;
    Ok(PathSet::new(
        graph,
        all.iter()
            .filter(|p| !blocked.iter().any(|&b| p.contains(b)))
            .cloned()
            .collect(),
    ))
}

// ---------------------------------------------------------------------------
// Patched evaluation

/// `G(x_r)`, `G(x_c)` and `G_H(x_r, x_c)` for one pair, from one shared
/// memo cache.
#[derive(Clone, Debug)]
pub struct PairOutputs {
    pub reference: Arc<Tensor>,
    pub counterfactual: Arc<Tensor>,
    pub patched: Arc<Tensor>,
}

pub fn evaluate_pair(hypothesis: &Hypothesis, x_r: &Example, x_c: &Binding) -> Result<PairOutputs> {
    let graph = hypothesis.graph.as_ref();
    let mut arena = RouteArena::new();
    let route = hypothesis.route(&mut arena, &x_r.vars)?;
    let mut ev = Evaluator::new(graph, &[&x_r.binding, x_c]);
    let reference = ev.output_plain(REFERENCE)?;
    let counterfactual = ev.output_plain(COUNTERFACTUAL)?;
    let patched = ev.output_routed(&arena, route)?;
    Ok(PairOutputs {
        reference,
        counterfactual,
        patched,
    })
}

/// `G_H(x_r, x_c)`: important paths read `x_r`, all others one shared `x_c`.
pub fn run_patched(hypothesis: &Hypothesis, x_r: &Example, x_c: &Binding) -> Result<Tensor> {
    let graph = hypothesis.graph.as_ref();
    let mut arena = RouteArena::new();
    let route = hypothesis.route(&mut arena, &x_r.vars)?;
    let mut ev = Evaluator::new(graph, &[&x_r.binding, x_c]);
    Ok(ev.output_routed(&arena, route)?.as_ref().clone())
}

/// Patched output under an explicit route, with evaluation statistics.
pub fn run_routed(
    graph: &Graph,
    arena: &RouteArena,
    route: RouteId,
    sources: &[&Binding],
) -> Result<(Tensor, crate::graph::EvalStats)> {
    let mut ev = Evaluator::new(graph, sources);
    let out = ev.output_routed(arena, route)?.as_ref().clone();
    Ok((out, ev.stats().clone()))
}

/// Diagnostic mode that gives every unimportant path its own
/// counterfactual `x_cs[k]` instead of one shared `x_c`. Unimportant paths
/// are taken in canonical order and assigned counterfactuals round robin.
/// This is not a valid patching semantics; it exists to exhibit the bias
/// that sharing one counterfactual avoids.
pub fn run_patched_distinct_counterfactuals(
    graph: &Graph,
    important: &PathSet,
    x_r: &Binding,
    x_cs: &[Binding],
) -> Result<Tensor> {
    if x_cs.is_empty() {
        return Err(Error::Argument("need at least one counterfactual".into()));
    }
    let keep = important.to_hash_set();
    let mut assignment = Vec::new();
    let mut k = 0usize;
    for p in &enumerate_paths(graph)? {
        if keep.contains(p) {
            assignment.push((p.clone(), REFERENCE));
        } else {
            assignment.push((p.clone(), 1 + (k % x_cs.len()) as SourceId));
            k += 1;
        }
    }
    let mut arena = RouteArena::new();
    let route = route_for_assignment(graph, &mut arena, &assignment, COUNTERFACTUAL);
    let mut sources: Vec<&Binding> = vec![x_r];
    sources.extend(x_cs.iter());
    Ok(run_routed(graph, &arena, route, &sources)?.0)
}

/// Forward pass with the listed nodes' outputs replaced by zeros.
pub fn zero_ablate_nodes(graph: &Graph, nodes: &[String], binding: &Binding) -> Result<Tensor> {
    let mut overrides = HashMap::new();
    for n in nodes {
        let id = graph.require(n)?;
        overrides.insert(id, Tensor::zeros(&graph.node(id).shape));
    }
    evaluate_with_overrides(graph, binding, &overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{cancellation, default_residual_weights, ensemble, random_dag, two_layer_residual};
    use crate::graph::evaluate;
    use crate::paths::{treeify, Pattern};

    fn residual() -> Arc<Graph> {
        let (w0, w1) = default_residual_weights();
        Arc::new(two_layer_residual(&w0, &w1).unwrap())
    }

    fn x(v: &[f64]) -> Binding {
        Binding::new().with("x", Tensor::vector(v.to_vec()).unwrap())
    }

    fn expr(text: &str) -> Important {
        Important::Expr(PathExpr::parse(text).unwrap())
    }

    fn hyp(g: &Arc<Graph>, important: Important) -> Hypothesis {
        Hypothesis::new(g.clone(), important, Dissimilarity::AbsoluteDifference).unwrap()
    }

    #[test]
    fn all_important_is_reference_output() {
        let g = residual();
        let h = hyp(&g, expr("all"));
        let (r, c) = (Example::new(x(&[1.0, 2.0])), x(&[-3.0, 0.5]));
        assert_eq!(run_patched(&h, &r, &c).unwrap(), evaluate(&g, &r.binding).unwrap());
        let none = hyp(&g, expr("none"));
        assert_eq!(run_patched(&none, &r, &c).unwrap(), evaluate(&g, &c).unwrap());
    }

    #[test]
    fn node_mediator_on_residual() {
        let g = residual();
        let important = nodes_to_paths(&g, &["f1".into()]).unwrap();
        let names: Vec<String> = important.iter().map(|p| p.display(&g).to_string()).collect();
        assert_eq!(names, ["x → A → Y", "x → f0 → A → Y"]);
        assert_eq!(nodes_to_paths(&g, &[]).unwrap().len(), 4);
        assert_eq!(nodes_to_paths(&g, &["Y".into()]).unwrap().len(), 0);
        assert!(matches!(nodes_to_paths(&g, &["nope".into()]), Err(Error::Argument(_))));
    }

    #[test]
    fn expression_route_matches_explicit_route_on_random_graphs() {
        let patterns = ["all; - … → n3 → …", "none; + x0 → …; - … → n5 → …", "all; - not … → n2 → …"];
        for seed in 0..30 {
            let g = Arc::new(random_dag(seed, 10, 2).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = crate::rewrites::random_binding(&g, &mut rng).unwrap();
            let c = crate::rewrites::random_binding(&g, &mut rng).unwrap();
            for text in patterns {
                let e = PathExpr::parse(text).unwrap();
                let resolved = e.resolve(&PositionVars::new()).unwrap();
                let set = crate::paths::match_expr(&g, &resolved).unwrap();
                let a = run_patched(&hyp(&g, Important::Expr(e)), &Example::new(r.clone()), &c).unwrap();
                let b = run_patched(&hyp(&g, Important::Paths(set)), &Example::new(r.clone()), &c).unwrap();
                assert_eq!(a.data(), b.data(), "seed {seed} {text}");
            }
        }
    }

    #[test]
    fn patched_output_equals_treeified_evaluation() {
        for seed in 0..40 {
            let g = Arc::new(random_dag(seed, 9, 2).unwrap());
            let t = treeify(&g).unwrap();
            let all = enumerate_paths(&g).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let r = crate::rewrites::random_binding(&g, &mut rng).unwrap();
            let c = crate::rewrites::random_binding(&g, &mut rng).unwrap();
            let chosen: Vec<Path> = all.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
            let important = PathSet::new(&g, chosen);
            let keep = important.to_hash_set();
            let mut tree_binding = Binding::new();
            for (leaf, path) in &t.leaf_paths {
                let src = if keep.contains(path) { &r } else { &c };
                let name = t.graph.name(*leaf);
                let base = g.name(path.leaf());
                tree_binding.insert(name, src.get(base).unwrap().clone());
            }
            let want = evaluate(&t.graph, &tree_binding).unwrap();
            let got = run_patched(&hyp(&g, Important::Paths(important)), &Example::new(r), &c).unwrap();
            assert_eq!(want.data(), got.data(), "seed {seed}");
        }
    }

    #[test]
    fn unimportant_output_gives_counterfactual_run() {
        let g = residual();
        let h = hyp(&g, Important::AvoidingNodes(vec!["Y".into()]));
        let (r, c) = (Example::new(x(&[1.0, 2.0])), x(&[-3.0, 0.5]));
        assert_eq!(run_patched(&h, &r, &c).unwrap(), evaluate(&g, &c).unwrap());
    }

    #[test]
    fn ensemble_shares_one_counterfactual() {
        let w = Tensor::matrix(2, 2, vec![0.5, 1.0, -1.0, 2.0]).unwrap();
        let g = Arc::new(ensemble(&w).unwrap());
        let c = x(&[0.7, -0.2]);
        let h = hyp(&g, expr("none"));
        let fx = Tensor::vector(vec![0.7, -0.2]).unwrap().matmul(&w).unwrap();
        let out = run_patched(&h, &Example::new(x(&[1.0, 1.0])), &c).unwrap();
        assert!(out.max_abs_diff(&fx).unwrap() < 1e-15);
        // Distinct counterfactuals average three different values instead.
        let cs = [x(&[0.7, -0.2]), x(&[-1.0, 0.3]), x(&[2.0, 2.0])];
        let broken = run_patched_distinct_counterfactuals(&g, &PathSet::empty(), &x(&[1.0, 1.0]), &cs).unwrap();
        let mut mean = Tensor::zeros(&[2]);
        for b in &cs {
            mean = mean.add(&b.get("x").unwrap().matmul(&w).unwrap()).unwrap();
        }
        let mean = mean.scale(1.0 / 3.0).unwrap();
        assert!(broken.max_abs_diff(&mean).unwrap() < 1e-12);
        assert!(broken.max_abs_diff(&fx).unwrap() > 0.1);
    }

    #[test]
    fn cancellation_paths() {
        let g = Arc::new(cancellation(3, -1.0).unwrap());
        let r = Example::new(x(&[1.0, -2.0, 0.5]));
        let c = x(&[0.0, 1.0, 4.0]);
        let both = hyp(&g, expr("none"));
        let out = run_patched(&both, &r, &c).unwrap();
        assert_eq!(out.data(), evaluate(&g, &r.binding).unwrap().data());
        let one = hyp(&g, expr("all; - x → Y"));
        let patched = run_patched(&one, &r, &c).unwrap();
        // x_c + f0(x_r) = x_c - x_r
        assert_eq!(patched.data(), &[-1.0, 3.0, 3.5]);
    }

    #[test]
    fn caching_computes_shared_counterfactual_term_once() {
        let g = residual();
        let mut arena = RouteArena::new();
        let p = Pattern::parse("x → A → f1 → Y").unwrap();
        let e = PathExpr::none().include(p).resolve(&PositionVars::new()).unwrap();
        let route = route_for_expr(&g, &mut arena, &e);
        let (r, c) = (x(&[1.0, 2.0]), x(&[-3.0, 0.5]));
        let (_, stats) = run_routed(&g, &arena, route, &[&r, &c]).unwrap();
        assert_eq!(stats.count(g.id("f0").unwrap()), 1);
        assert!(stats.total() <= 4 * 2);
    }

    #[test]
    fn samplers() {
        let g = residual();
        let refs: Vec<Example> = (0..5).map(|k| Example::new(x(&[k as f64, 1.0]))).collect();
        let zero = sample_pair(&g, CounterfactualStrategy::Zero, &refs, 1).unwrap();
        assert_eq!(zero.counterfactual.get("x").unwrap().data(), &[0.0, 0.0]);
        let single = vec![Example::new(x(&[3.0, 4.0]))];
        let mean = sample_pair(&g, CounterfactualStrategy::Mean, &single, 1).unwrap();
        assert_eq!(mean.counterfactual.get("x").unwrap().data(), &[3.0, 4.0]);
        let s = Sampler::new(&g, &refs, CounterfactualStrategy::Resample).unwrap();
        let pairs = s.sample_pairs(200, 9).unwrap();
        assert!(pairs.iter().all(|p| p.counterfactual_index != Some(p.reference_index)));
        let again = s.sample_pairs(200, 9).unwrap();
        assert!(pairs.iter().zip(&again).all(|(a, b)| a.reference_index == b.reference_index
            && a.counterfactual_index == b.counterfactual_index));
        assert!(matches!(Sampler::new(&g, &[], CounterfactualStrategy::Resample), Err(Error::Argument(_))));
        let dup = vec![Example::new(x(&[1.0, 1.0])), Example::new(x(&[1.0, 1.0]))];
        let s = Sampler::new(&g, &dup, CounterfactualStrategy::Resample).unwrap();
        assert!(s.sample_pairs(1, 0).is_err());
        assert!(Sampler::new(&g, &refs, CounterfactualStrategy::GaussianNoise { sigma: 0.0 }).is_err());
    }

    #[test]
    fn gaussian_noise_has_configured_scale() {
        let g = residual();
        let refs = vec![Example::new(x(&[0.0, 0.0]))];
        let s = Sampler::new(&g, &refs, CounterfactualStrategy::GaussianNoise { sigma: 0.2 }).unwrap();
        let draws = s.counterfactuals_for(0, 10_000, 3).unwrap();
        let values: Vec<f64> = draws.iter().flat_map(|b| b.get("x").unwrap().data().to_vec()).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.2).abs() / 0.2 < 0.02, "{std}");
    }

    #[test]
    fn dissimilarities() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 0.0, 0.0]).unwrap();
        let kl_last = Dissimilarity::Kl { positions: Positions::Last }.compute(&a, &b).unwrap();
        let kl_all = Dissimilarity::Kl { positions: Positions::All }.compute(&a, &b).unwrap();
        assert!(kl_last > 0.0);
        assert!((kl_all - kl_last / 2.0).abs() < 1e-15);
        let la = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let lb = Tensor::vector(vec![1.5, 1.0]).unwrap();
        let all = Dissimilarity::LossAbsoluteDifference { positions: Positions::All };
        assert_eq!(all.compute(&la, &lb).unwrap(), 0.75);
        let last = Dissimilarity::LossAbsoluteDifference { positions: Positions::Last };
        assert_eq!(last.compute(&la, &lb).unwrap(), 1.0);
        let g = residual();
        assert!(all.check(&g).is_err());
        assert!(Dissimilarity::Kl { positions: Positions::Last }.check(&g).is_err());
    }

    #[test]
    fn zero_ablation() {
        let g = residual();
        let b = x(&[1.0, -1.0]);
        assert_eq!(zero_ablate_nodes(&g, &[], &b).unwrap(), evaluate(&g, &b).unwrap());
        assert_eq!(zero_ablate_nodes(&g, &["Y".into()], &b).unwrap().data(), &[0.0, 0.0]);
        assert!(zero_ablate_nodes(&g, &["zz".into()], &b).is_err());
    }
}
