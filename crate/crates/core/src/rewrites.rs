// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behavior-preserving graph rewrites.
//!
//! Each rewrite returns a new graph and checks itself on random probe
//! bindings before returning; a rewrite that changes behavior beyond its
//! tolerance fails with [`Error::RewriteVerification`].
//!
//! Naming conventions:
//!
//! * [`split_sum`] and [`split_attention_heads`] keep the rewritten node's
//!   name for the recombining sum, so patterns through it still match.
//! * [`subspace_split`] and [`mean_split`] keep the node itself and insert
//!   `n.proj`/`n.rest` (or `n.mean`/`n.centered`) plus a recombining
//!   `n.joined` between it and its consumers.
//! * [`slice_positions`] is the only rewrite that renames a leaf: `tok`
//!   becomes leaves `tok[0]`, `tok[1]`, ... concatenated back into a node
//!   named `tok`. Bindings for `tok` still bind the sliced leaves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::random_tensor;
use crate::graph::{evaluate, Binding, Graph, InputDomain, NodeKind, NodeSpec};
use crate::tensor::Tensor;

/// Probe count used by every built-in rewrite.
pub const PROBES: usize = 100;
/// Default tolerance for probe verification.
pub const REWRITE_TOLERANCE: f64 = 1e-9;
/// Tolerance for rewrites that only re-associate a sum.
pub const SPLIT_TOLERANCE: f64 = 1e-12;

const PROBE_SEED: u64 = 0x5eed_0f_9e0be;

/// A random binding for every leaf of `graph`: standard normal values for
/// real inputs, uniform ids for token inputs and labels.
pub fn random_binding(graph: &Graph, rng: &mut impl Rng) -> Result<Binding> {
    let mut b = Binding::new();
    for node in graph.nodes() {
        match &node.kind {
            NodeKind::Input {
                shape,
                domain: InputDomain::Real,
            } => b.insert(&node.name, random_tensor(rng, shape, 1.0)?),
            NodeKind::Input {
                shape,
                domain: InputDomain::Tokens { vocab },
            } => b.insert(&node.name, random_ids(rng, shape, *vocab)?),
            NodeKind::Labels { len, vocab } => b.insert(&node.name, random_ids(rng, &[*len], *vocab)?),
            _ => {}
        }
    }
    Ok(b)
}

fn random_ids(rng: &mut impl Rng, shape: &[usize], vocab: usize) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0..vocab) as f64).collect())
}

/// Largest deviation between node `a_node` of `a` and `b_node` of `b` over
/// `probes` random bindings drawn for `a`'s leaves.
pub fn max_deviation(a: &Graph, a_node: &str, b: &Graph, b_node: &str, probes: usize, seed: u64) -> Result<f64> {
    let a = a.with_output(a_node)?;
    let b = b.with_output(b_node)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let binding = random_binding(&a, &mut rng)?;
        let d = evaluate(&a, &binding)?.max_abs_diff(&evaluate(&b, &binding)?)?;
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Fail unless `b_node` of `b` reproduces `a_node` of `a` within `tolerance`.
pub fn verify_equivalent(
    rewrite: &str,
    a: &Graph,
    a_node: &str,
    b: &Graph,
    b_node: &str,
    tolerance: f64,
) -> Result<f64> {
    let deviation = max_deviation(a, a_node, b, b_node, PROBES, PROBE_SEED)?;
    if deviation > tolerance {
        return Err(Error::RewriteVerification {
            rewrite: rewrite.to_owned(),
            deviation,
            tolerance,
        });
    }
    Ok(deviation)
}

/// One summand of a [`split_sum`]: nodes to add (which may reference any
/// existing node by name) and the name of the one computing the part.
#[derive(Clone, Debug)]
pub struct Part {
    pub nodes: Vec<NodeSpec>,
    pub output: String,
}

impl Part {
    /// A part that applies `kind` to the named inputs.
    pub fn single(name: &str, kind: NodeKind, inputs: &[&str]) -> Part {
        Part {
            nodes: vec![NodeSpec::new(name, kind, inputs)],
            output: name.to_owned(),
        }
    }
}

/// Replace `node` by the sum of `parts`. The parts must add up to the
/// node's function; this is checked on probe inputs.
pub fn split_sum(graph: &Graph, node: &str, parts: Vec<Part>) -> Result<Graph> {
    let id = graph.require(node)?;
    if parts.is_empty() {
        return Err(Error::Argument("split_sum needs at least one part".into()));
    }
    if graph.node(id).kind.is_leaf() {
        return Err(Error::Argument(format!("cannot split leaf `{node}`")));
    }
    let mut specs = Vec::new();
    let mut outputs = Vec::new();
    for part in &parts {
        specs.extend(part.nodes.iter().cloned());
        outputs.push(part.output.clone());
    }
    for spec in graph.to_specs() {
        if spec.name == node {
            let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
            specs.push(NodeSpec::new(node, NodeKind::Sum, &refs));
        } else {
            specs.push(spec);
        }
    }
    let out = Graph::build(specs, graph.name(graph.output()))?;
    verify_equivalent("split_sum", graph, node, &out, node, REWRITE_TOLERANCE)?;
    Ok(out)
}

/// Split a matrix-product node `v · W` with constant `W` into
/// `v · W_1 + ... + v · W_k`. Part `k` is named `names[k]` and its weight
/// `names[k].w`.
pub fn split_linear(graph: &Graph, node: &str, parts: &[(&str, Tensor)]) -> Result<Graph> {
    let id = graph.require(node)?;
    let n = graph.node(id);
    if !matches!(n.kind, NodeKind::MatMul) {
        return Err(Error::Argument(format!("`{node}` is not a matrix product")));
    }
    let lhs = graph.name(n.inputs[0]).to_owned();
    let parts = parts
        .iter()
        .map(|(name, w)| {
            let wname = format!("{name}.w");
            Part {
                nodes: vec![
                    NodeSpec::new(&wname, NodeKind::Constant(w.clone().into()), &[]),
                    NodeSpec::new(*name, NodeKind::MatMul, &[&lhs, &wname]),
                ],
                output: (*name).to_owned(),
            }
        })
        .collect();
    split_sum(graph, node, parts)
}

/// `k` random matrices summing to `w` (the last absorbs the remainder).
pub fn random_decomposition(w: &Tensor, k: usize, seed: u64) -> Result<Vec<Tensor>> {
    if k == 0 {
        return Err(Error::Argument("need at least one part".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::with_capacity(k);
    let mut rest = w.clone();
    for _ in 1..k {
        let p = random_tensor(&mut rng, w.shape(), 1.0)?;
        rest = rest.sub(&p)?;
        parts.push(p);
    }
    parts.push(rest);
    Ok(parts)
}

fn head_weight(
    graph: &Graph,
    specs: &mut Vec<NodeSpec>,
    name: String,
    source: &str,
    axis: usize,
    lo: usize,
    hi: usize,
) -> Result<String> {
    let src = graph.require(source)?;
    match &graph.node(src).kind {
        NodeKind::Constant(t) => {
            let sliced = t.slice(axis, lo, hi)?;
            specs.push(NodeSpec::new(&name, NodeKind::Constant(sliced.into()), &[]));
        }
        _ => specs.push(NodeSpec::new(
            &name,
            NodeKind::Slice {
                axis,
                start: lo,
                stop: hi,
            },
            &[source],
        )),
    }
    Ok(name)
}

/// Replace a fused attention node `aL` by per-head subgraphs `aL.hH.*`
/// whose `.o` outputs are summed into a node keeping the name `aL`.
///
/// Per head: `q`, `k`, `v` projections; `kt` (transposed keys); `qk`
/// (raw scores); `scores` (scaled); `masked` (causal); `attn` (softmax);
/// `z` (attention-weighted values) and `o` (output projection).
pub fn split_attention_heads(graph: &Graph, node: &str) -> Result<Graph> {
    let id = graph.require(node)?;
    let n = graph.node(id);
    let NodeKind::Attention {
        heads,
        head_dim,
        scale,
    } = n.kind
    else {
        return Err(Error::Argument(format!("`{node}` is not a fused attention node")));
    };
    let names: Vec<String> = n.inputs.iter().map(|&i| graph.name(i).to_owned()).collect();
    let (q_src, k_src, v_src) = (&names[0], &names[1], &names[2]);
    let mut specs = Vec::new();
    let mut outs = Vec::new();
    for h in 0..heads {
        let p = |s: &str| format!("{node}.h{h}.{s}");
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let wq = head_weight(graph, &mut specs, p("wq"), &names[3], 1, lo, hi)?;
        let wk = head_weight(graph, &mut specs, p("wk"), &names[4], 1, lo, hi)?;
        let wv = head_weight(graph, &mut specs, p("wv"), &names[5], 1, lo, hi)?;
        let wo = head_weight(graph, &mut specs, p("wo"), &names[6], 0, lo, hi)?;
        specs.push(NodeSpec::new(p("q"), NodeKind::MatMul, &[q_src, &wq]));
        specs.push(NodeSpec::new(p("k"), NodeKind::MatMul, &[k_src, &wk]));
        specs.push(NodeSpec::new(p("v"), NodeKind::MatMul, &[v_src, &wv]));
        specs.push(NodeSpec::new(p("kt"), NodeKind::Transpose, &[&p("k")]));
        specs.push(NodeSpec::new(p("qk"), NodeKind::MatMul, &[&p("q"), &p("kt")]));
        specs.push(NodeSpec::new(p("scores"), NodeKind::ScalarMul(scale), &[&p("qk")]));
        specs.push(NodeSpec::new(p("masked"), NodeKind::CausalMask, &[&p("scores")]));
        specs.push(NodeSpec::new(p("attn"), NodeKind::Softmax { axis: 1 }, &[&p("masked")]));
        specs.push(NodeSpec::new(p("z"), NodeKind::MatMul, &[&p("attn"), &p("v")]));
        specs.push(NodeSpec::new(p("o"), NodeKind::MatMul, &[&p("z"), &wo]));
        outs.push(p("o"));
    }
    for spec in graph.to_specs() {
        if spec.name == node {
            let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
            specs.push(NodeSpec::new(node, NodeKind::Sum, &refs));
        } else {
            specs.push(spec);
        }
    }
    let out = Graph::build(specs, graph.name(graph.output()))?;
    let out = out.eliminate_dead_weights(&names[3..])?;
    verify_equivalent("split_attention_heads", graph, node, &out, node, REWRITE_TOLERANCE)?;
    Ok(out)
}

impl Graph {
    /// Drop the named constants if nothing consumes them any more.
    fn eliminate_dead_weights(&self, names: &[String]) -> Result<Graph> {
        let specs: Vec<NodeSpec> = self
            .to_specs()
            .into_iter()
            .filter(|s| {
                !(names.contains(&s.name)
                    && matches!(s.kind, NodeKind::Constant(_))
                    && self.consumers(self.id(&s.name).expect("own spec")).is_empty())
            })
            .collect();
        Graph::build(specs, self.name(self.output()))
    }
}

/// Replace input leaf `leaf` (positions along axis 0) by one leaf per
/// position, `leaf[p]`, concatenated back into a node named `leaf`.
pub fn slice_positions(graph: &Graph, leaf: &str) -> Result<Graph> {
    let id = graph.require(leaf)?;
    let NodeKind::Input { shape, domain } = &graph.node(id).kind else {
        return Err(Error::Argument(format!("`{leaf}` is not an input leaf")));
    };
    if shape.is_empty() {
        return Err(Error::Argument(format!("`{leaf}` has no position axis")));
    }
    let mut specs = Vec::new();
    let mut row_shape = shape.clone();
    row_shape[0] = 1;
    let names: Vec<String> = (0..shape[0]).map(|p| format!("{leaf}[{p}]")).collect();
    for name in &names {
        specs.push(NodeSpec::new(
            name,
            NodeKind::Input {
                shape: row_shape.clone(),
                domain: *domain,
            },
            &[],
        ));
    }
    for spec in graph.to_specs() {
        if spec.name == leaf {
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            specs.push(NodeSpec::new(leaf, NodeKind::Concat { axis: 0 }, &refs));
        } else {
            specs.push(spec);
        }
    }
    let out = Graph::build(specs, graph.name(graph.output()))?;
    verify_equivalent("slice_positions", graph, graph.name(graph.output()), &out, out.name(out.output()), 0.0)?;
    Ok(out)
}

/// Insert `n.joined = n.a + n.b` between `node` and all its consumers.
fn insert_between(graph: &Graph, node: &str, extra: Vec<NodeSpec>, a: &str, b: &str) -> Result<Graph> {
    let joined = format!("{node}.joined");
    let mut specs = graph.to_specs();
    for spec in &mut specs {
        for inp in &mut spec.inputs {
            if inp == node {
                *inp = joined.clone();
            }
        }
    }
    specs.extend(extra);
    specs.push(NodeSpec::new(&joined, NodeKind::Add, &[a, b]));
    let out_name = if graph.name(graph.output()) == node {
        joined.clone()
    } else {
        graph.name(graph.output()).to_owned()
    };
    Graph::build(specs, &out_name)
}

fn check_idempotent(p: &Tensor) -> Result<()> {
    if p.rank() != 2 || p.shape()[0] != p.shape()[1] {
        return Err(Error::Argument(format!("projection must be square, got {:?}", p.shape())));
    }
    let dev = p.matmul(p)?.max_abs_diff(p)?;
    if dev > 1e-9 {
        return Err(Error::Argument(format!(
            "projection is not idempotent: |PP - P| = {dev:e}"
        )));
    }
    Ok(())
}

/// Split `node`'s value `v` (last axis of size `d`) into `n.proj = v · P`
/// and `n.rest = v · (I - P)`, recombined in `n.joined`. Values are row
/// vectors, so `P` acts on the right.
pub fn subspace_split(graph: &Graph, node: &str, projection: &Tensor) -> Result<Graph> {
    let id = graph.require(node)?;
    check_idempotent(projection)?;
    let d = projection.shape()[0];
    let shape = &graph.node(id).shape;
    if shape.last() != Some(&d) {
        return Err(Error::shape(node, format!("value {shape:?} does not end in projection size {d}")));
    }
    let rest = Tensor::identity(d).sub(projection)?;
    let (pw, rw) = (format!("{node}.proj.w"), format!("{node}.rest.w"));
    let (pn, rn) = (format!("{node}.proj"), format!("{node}.rest"));
    let extra = vec![
        NodeSpec::new(&pw, NodeKind::Constant(projection.clone().into()), &[]),
        NodeSpec::new(&rw, NodeKind::Constant(rest.into()), &[]),
        NodeSpec::new(&pn, NodeKind::MatMul, &[node, &pw]),
        NodeSpec::new(&rn, NodeKind::MatMul, &[node, &rw]),
    ];
    let out = insert_between(graph, node, extra, &pn, &rn)?;
    verify_equivalent("subspace_split", graph, node, &out, &format!("{node}.joined"), SPLIT_TOLERANCE)?;
    Ok(out)
}

/// Split `node`'s value `v` into the constant `n.mean` and
/// `n.centered = v - mean`, recombined in `n.joined`.
pub fn mean_split(graph: &Graph, node: &str, mean: &Tensor) -> Result<Graph> {
    let id = graph.require(node)?;
    let shape = &graph.node(id).shape;
    if mean.shape() != shape.as_slice() {
        return Err(Error::shape(node, format!("mean {:?} differs from value {shape:?}", mean.shape())));
    }
    let (mn, neg, cn) = (format!("{node}.mean"), format!("{node}.negmean"), format!("{node}.centered"));
    let extra = vec![
        NodeSpec::new(&mn, NodeKind::Constant(mean.clone().into()), &[]),
        NodeSpec::new(&neg, NodeKind::Constant(mean.scale(-1.0)?.into()), &[]),
        NodeSpec::new(&cn, NodeKind::Add, &[node, &neg]),
    ];
    let out = insert_between(graph, node, extra, &mn, &cn)?;
    verify_equivalent("mean_split", graph, node, &out, &format!("{node}.joined"), SPLIT_TOLERANCE)?;
    Ok(out)
}

/// Orthogonal projector onto a random `rank`-dimensional subspace of `R^d`.
pub fn random_projector(d: usize, rank: usize, seed: u64) -> Result<Tensor> {
    if rank > d {
        return Err(Error::Argument(format!("rank {rank} exceeds dimension {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = random_tensor(&mut rng, &[d], 1.0)?.into_data();
        // Two Gram-Schmidt passes for orthogonality to rounding error.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut p = vec![0.0; d * d];
    for b in &basis {
        for r in 0..d {
            for c in 0..d {
                p[r * d + c] += b[r] * b[c];
            }
        }
    }
    Tensor::matrix(d, d, p)
}

/// Mean value of `node` over the given bindings.
pub fn node_mean(graph: &Graph, node: &str, bindings: &[Binding]) -> Result<Tensor> {
    if bindings.is_empty() {
        return Err(Error::Argument("mean over zero bindings".into()));
    }
    let sub = graph.with_output(node)?;
    let mut total = Tensor::zeros(&graph.node(graph.require(node)?).shape);
    for b in bindings {
        total = total.add(&evaluate(&sub, b)?)?;
    }
    total.scale(1.0 / bindings.len() as f64)
}

/// A rewrite named in an experiment config. Parameters that would need
/// tensors are drawn from `seed` instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewriteSpec {
    /// Split a matrix product into `parts` random matrices summing to its weight.
    SplitLinear { node: String, parts: usize, seed: u64 },
    SplitAttentionHeads { node: String },
    SlicePositions { leaf: String },
    /// Project onto a random subspace of the given rank.
    SubspaceSplit { node: String, rank: usize, seed: u64 },
    /// Subtract the node's mean over `samples` random probe bindings.
    MeanSplit { node: String, samples: usize, seed: u64 },
}

impl RewriteSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RewriteSpec::SplitLinear { .. } => "split_linear",
            RewriteSpec::SplitAttentionHeads { .. } => "split_attention_heads",
            RewriteSpec::SlicePositions { .. } => "slice_positions",
            RewriteSpec::SubspaceSplit { .. } => "subspace_split",
            RewriteSpec::MeanSplit { .. } => "mean_split",
        }
    }

    /// Tolerance the rewrite is verified against.
    pub fn tolerance(&self) -> f64 {
        match self {
            RewriteSpec::SubspaceSplit { .. } | RewriteSpec::MeanSplit { .. } => SPLIT_TOLERANCE,
            RewriteSpec::SlicePositions { .. } => 0.0,
            _ => REWRITE_TOLERANCE,
        }
    }

    pub fn apply(&self, graph: &Graph) -> Result<Graph> {
        match self {
            RewriteSpec::SplitLinear { node, parts, seed } => {
                let id = graph.require(node)?;
                let n = graph.node(id);
                let w = match n.inputs.get(1).map(|&w| &graph.node(w).kind) {
                    Some(NodeKind::Constant(t)) if matches!(n.kind, NodeKind::MatMul) => t.clone(),
                    _ => {
                        return Err(Error::Argument(format!(
                            "`{node}` is not a product with a constant weight"
                        )))
                    }
                };
                let pieces = random_decomposition(&w, *parts, *seed)?;
                let names: Vec<String> = (0..*parts).map(|k| format!("{node}.part{k}")).collect();
                let args: Vec<(&str, Tensor)> = names.iter().map(String::as_str).zip(pieces).collect();
                split_linear(graph, node, &args)
            }
            RewriteSpec::SplitAttentionHeads { node } => split_attention_heads(graph, node),
            RewriteSpec::SlicePositions { leaf } => slice_positions(graph, leaf),
            RewriteSpec::SubspaceSplit { node, rank, seed } => {
                let id = graph.require(node)?;
                let d = *graph.node(id).shape.last().ok_or_else(|| {
                    Error::Argument(format!("`{node}` is a scalar and has no subspaces"))
                })?;
                subspace_split(graph, node, &random_projector(d, *rank, *seed)?)
            }
            RewriteSpec::MeanSplit { node, samples, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let bindings = (0..*samples)
                    .map(|_| random_binding(graph, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                mean_split(graph, node, &node_mean(graph, node, &bindings)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{default_residual_weights, random_dag, two_layer_residual};
    use crate::graph::{GraphBuilder, NodeId};
    use crate::paths::enumerate_paths;

    fn residual() -> Graph {
        let (w0, w1) = default_residual_weights();
        two_layer_residual(&w0, &w1).unwrap()
    }

    fn fused_layer(heads: usize, head_dim: usize, d: usize, n: usize, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[n, d]).unwrap();
        let w = |rng: &mut ChaCha8Rng, b: &mut GraphBuilder, name: &str, shape: &[usize]| -> NodeId {
            b.constant(name, random_tensor(rng, shape, 0.4).unwrap()).unwrap()
        };
        let wq = w(&mut rng, &mut b, "a0.wq", &[d, heads * head_dim]);
        let wk = w(&mut rng, &mut b, "a0.wk", &[d, heads * head_dim]);
        let wv = w(&mut rng, &mut b, "a0.wv", &[d, heads * head_dim]);
        let wo = w(&mut rng, &mut b, "a0.wo", &[heads * head_dim, d]);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let a = b
            .add("a0", NodeKind::Attention { heads, head_dim, scale }, &[x, x, x, wq, wk, wv, wo])
            .unwrap();
        let y = b.add("y", NodeKind::Add, &[x, a]).unwrap();
        b.finish(y).unwrap()
    }

    #[test]
    fn linear_split_preserves_output() {
        let (w0, w1) = default_residual_weights();
        let g = residual();
        let parts = random_decomposition(&w0, 2, 1).unwrap();
        let h = split_linear(&g, "f0", &[("f0a", parts[0].clone()), ("f0b", parts[1].clone())]).unwrap();
        let parts = random_decomposition(&w1, 2, 2).unwrap();
        let h = split_linear(&h, "f1", &[("f1a", parts[0].clone()), ("f1b", parts[1].clone())]).unwrap();
        for name in ["f0a", "f0b", "f1a", "f1b", "f0", "f1"] {
            assert!(h.id(name).is_some(), "{name}");
        }
        assert_eq!(enumerate_paths(&h).unwrap().len(), 9);
        assert!(max_deviation(&g, "Y", &h, "Y", 100, 7).unwrap() <= 1e-9);
    }

    #[test]
    fn bad_decomposition_is_rejected() {
        let (w0, _) = default_residual_weights();
        let g = residual();
        let half = w0.scale(0.5).unwrap();
        let wrong = w0.scale(0.25).unwrap();
        match split_linear(&g, "f0", &[("f0a", half), ("f0b", wrong)]) {
            Err(Error::RewriteVerification { rewrite, deviation, .. }) => {
                assert_eq!(rewrite, "split_sum");
                assert!(deviation > 1e-3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eight_head_split_matches_fused_layer() {
        let g = fused_layer(8, 3, 8, 5, 11);
        let h = split_attention_heads(&g, "a0").unwrap();
        for head in 0..8 {
            for port in ["q", "k", "v", "attn", "o"] {
                assert!(h.id(&format!("a0.h{head}.{port}")).is_some());
            }
        }
        assert!(h.id("a0.wq").is_none());
        assert_eq!(h.node(h.id("a0").unwrap()).inputs.len(), 8);
        assert!(max_deviation(&g, "y", &h, "y", 100, 3).unwrap() <= 1e-9);
        // Summing the head outputs by hand reproduces the fused output.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_binding(&g, &mut rng).unwrap();
        let fused = evaluate(&g.with_output("a0").unwrap(), &b).unwrap();
        let mut total = Tensor::zeros(fused.shape());
        for head in 0..8 {
            let o = evaluate(&h.with_output(&format!("a0.h{head}.o")).unwrap(), &b).unwrap();
            total = total.add(&o).unwrap();
        }
        assert!(total.max_abs_diff(&fused).unwrap() <= 1e-9);
    }

    #[test]
    fn one_head_split_is_trivial() {
        let g = fused_layer(1, 4, 4, 3, 2);
        let h = split_attention_heads(&g, "a0").unwrap();
        assert_eq!(h.node(h.id("a0").unwrap()).inputs.len(), 1);
        assert!(max_deviation(&g, "y", &h, "y", 100, 1).unwrap() <= 1e-9);
    }

    #[test]
    fn head_split_rejects_other_nodes() {
        assert!(matches!(split_attention_heads(&residual(), "f0"), Err(Error::Argument(_))));
    }

    #[test]
    fn slicing_positions() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[4, 2]).unwrap();
        let f = b.add("f", NodeKind::ScalarMul(2.0), &[x]).unwrap();
        let g = b.finish(f).unwrap();
        let h = slice_positions(&g, "x").unwrap();
        let leaves: Vec<&str> = h.input_leaves().iter().map(|&l| h.name(l)).collect();
        assert_eq!(leaves, ["x[0]", "x[1]", "x[2]", "x[3]"]);
        assert_eq!(enumerate_paths(&g).unwrap().len(), 1);
        assert_eq!(enumerate_paths(&h).unwrap().len(), 4);
        assert!(max_deviation(&g, "f", &h, "f", 10, 0).unwrap() == 0.0);
        assert!(matches!(slice_positions(&g, "f"), Err(Error::Argument(_))));
    }

    #[test]
    fn subspace_split_extremes() {
        let g = residual();
        let h = subspace_split(&g, "A", &Tensor::identity(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_binding(&g, &mut rng).unwrap();
        let rest = evaluate(&h.with_output("A.rest").unwrap(), &b).unwrap();
        assert!(rest.data().iter().all(|&v| v == 0.0));
        let h = subspace_split(&g, "A", &Tensor::zeros(&[2, 2])).unwrap();
        let proj = evaluate(&h.with_output("A.proj").unwrap(), &b).unwrap();
        assert!(proj.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(matches!(subspace_split(&g, "A", &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn random_projector_reconstructs() {
        let g = crate::fixtures::residual_stack(2, 6, 4).unwrap();
        for rank in 0..=6 {
            let p = random_projector(6, rank, rank as u64).unwrap();
            assert!(p.matmul(&p).unwrap().max_abs_diff(&p).unwrap() < 1e-12);
            let h = subspace_split(&g, "r1", &p).unwrap();
            assert!(max_deviation(&g, "r2", &h, "r2", 100, 9).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn mean_split_cases() {
        let g = residual();
        let h = mean_split(&g, "A", &Tensor::zeros(&[2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_binding(&g, &mut rng).unwrap();
        let a = evaluate(&g.with_output("A").unwrap(), &b).unwrap();
        assert_eq!(evaluate(&h.with_output("A.centered").unwrap(), &b).unwrap(), a);
        assert!(matches!(mean_split(&g, "A", &Tensor::zeros(&[3])), Err(Error::Shape { .. })));
        // A constant node split at its own value leaves a zero remainder.
        let c = mean_split(&g, "f1.w", &default_residual_weights().1).unwrap();
        let rem = evaluate(&c.with_output("f1.w.centered").unwrap(), &b).unwrap();
        assert!(rem.data().iter().all(|&v| v == 0.0));
        // Dataset mean.
        let bindings: Vec<Binding> = (0..100).map(|_| random_binding(&g, &mut rng).unwrap()).collect();
        let mean = node_mean(&g, "A", &bindings).unwrap();
        let m = mean_split(&g, "A", &mean).unwrap();
        assert!(max_deviation(&g, "Y", &m, "Y", 100, 4).unwrap() <= 1e-12);
    }

    #[test]
    fn rewrites_compose() {
        for seed in 0..10u64 {
            let g = random_dag(seed, 10, 3).unwrap();
            let compute: Vec<String> = g
                .ids()
                .filter(|&i| !g.node(i).kind.is_leaf() && g.is_live(i))
                .map(|i| g.name(i).to_owned())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h = g.clone();
            for step in 0..3u64 {
                let node = compute[rng.random_range(0..compute.len())].clone();
                let spec = match rng.random_range(0..3) {
                    0 => RewriteSpec::SubspaceSplit { node, rank: 1 + step as usize % 3, seed: step },
                    1 => RewriteSpec::MeanSplit { node, samples: 5, seed: step },
                    _ => match compute.iter().find(|n| n.ends_with(".w") || g.node(g.id(n).unwrap()).kind == NodeKind::MatMul) {
                        Some(m) => RewriteSpec::SplitLinear { node: m.clone(), parts: 2, seed: step },
                        None => RewriteSpec::SubspaceSplit { node, rank: 2, seed: step },
                    },
                };
                h = match spec.apply(&h) {
                    Ok(next) => next,
                    // A node may already have been split by name.
                    Err(Error::Argument(_)) | Err(Error::Structural(_)) => h,
                    Err(e) => panic!("{e}"),
                };
            }
            let out = g.name(g.output());
            let h_out = h.name(h.output()).to_owned();
            assert!(max_deviation(&g, out, &h, &h_out, 100, seed).unwrap() <= 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = RewriteSpec::SubspaceSplit { node: "A".into(), rank: 1, seed: 3 };
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(toml::from_str::<RewriteSpec>(&text).unwrap(), spec);
    }
}
