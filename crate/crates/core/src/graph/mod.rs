// SPDX-License-Identifier: MIT OR Apache-2.0

//! The computation-graph IR.
//!
//! A [`Graph`] is a DAG whose nodes are named operations and whose edges
//! carry [`Tensor`] values. Nodes are stored in topological order, so a
//! node's inputs always have smaller ids than the node itself. Names are the
//! stable identity: rewrites renumber ids but keep (or extend) names, and
//! path patterns match against names.
//!
//! Graphs are immutable once built. Transformations go through
//! [`Graph::to_specs`] and [`Graph::build`], which re-run validation and
//! shape inference.

mod eval;
mod text;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use eval::{
    evaluate, evaluate_with_overrides, Binding, EvalStats, Evaluator, Route, RouteArena, RouteId,
    SourceId, COUNTERFACTUAL, REFERENCE,
};
pub(crate) use eval::split_position_name;
pub use text::{GRAPH_FORMAT_HEADER, GRAPH_FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// What values an input leaf accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputDomain {
    /// Arbitrary finite reals.
    Real,
    /// Integer token ids in `[0, vocab)`.
    Tokens { vocab: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    /// Patchable input. Paths start here.
    Input {
        shape: Vec<usize>,
        domain: InputDomain,
    },
    /// Ground-truth labels. Always bound from the reference example and
    /// never the start of a path.
    Labels { len: usize, vocab: usize },
    Constant(Arc<Tensor>),
    /// Elementwise sum of two inputs.
    Add,
    /// Elementwise sum of one or more inputs, accumulated left to right.
    Sum,
    ScalarMul(f64),
    MatMul,
    Transpose,
    Softmax { axis: usize },
    /// Inputs: value, gain, bias.
    LayerNorm { eps: f64 },
    /// Inputs: table `[vocab, d]`, token ids.
    EmbedLookup,
    Slice {
        axis: usize,
        start: usize,
        stop: usize,
    },
    Concat { axis: usize },
    CausalMask,
    /// Inputs: logits `[positions, vocab]`, labels `[positions]`.
    CrossEntropy,
    /// Identity; gives a value a second name.
    Alias,
    /// Fused causal multi-head attention.
    ///
    /// Inputs: query source, key source, value source (each `[n, d]`),
    /// `W_Q`, `W_K`, `W_V` (each `[d, heads * head_dim]`) and
    /// `W_O` (`[heads * head_dim, d_out]`).
    Attention {
        heads: usize,
        head_dim: usize,
        scale: f64,
    },
}

enum Arity {
    Exact(usize),
    AtLeast(usize),
}

impl NodeKind {
    fn arity(&self) -> Arity {
        use NodeKind::*;
        match self {
            Input { .. } | Labels { .. } | Constant(_) => Arity::Exact(0),
            ScalarMul(_) | Transpose | Softmax { .. } | Slice { .. } | CausalMask | Alias => {
                Arity::Exact(1)
            }
            Add | MatMul | EmbedLookup | CrossEntropy => Arity::Exact(2),
            LayerNorm { .. } => Arity::Exact(3),
            Attention { .. } => Arity::Exact(7),
            Sum | Concat { .. } => Arity::AtLeast(1),
        }
    }

    /// Keyword used by the text format and diagnostics.
    pub fn keyword(&self) -> &'static str {
        use NodeKind::*;
        match self {
            Input { .. } => "input",
            Labels { .. } => "labels",
            Constant(_) => "const",
            Add => "add",
            Sum => "sum",
            ScalarMul(_) => "scale",
            MatMul => "matmul",
            Transpose => "transpose",
            Softmax { .. } => "softmax",
            LayerNorm { .. } => "layernorm",
            EmbedLookup => "embed",
            Slice { .. } => "slice",
            Concat { .. } => "concat",
            CausalMask => "causal-mask",
            CrossEntropy => "cross-entropy",
            Alias => "alias",
            Attention { .. } => "attention",
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(
            self,
            NodeKind::Input { .. } | NodeKind::Labels { .. } | NodeKind::Constant(_)
        )
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// Name-based node description used to build and transform graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<String>,
}

impl NodeSpec {
    pub fn new(name: impl Into<String>, kind: NodeKind, inputs: &[&str]) -> Self {
        NodeSpec {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| (*s).to_owned()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    output: NodeId,
    by_name: HashMap<String, NodeId>,
    /// `(consumer, port)` for every edge leaving each node.
    consumers: Vec<Vec<(NodeId, usize)>>,
    /// Whether the node's value depends on some [`NodeKind::Input`] leaf.
    input_dependent: Vec<bool>,
    /// Whether the node is an ancestor of (or is) the output.
    live: Vec<bool>,
}

/// Names may end in `#<k>` (treeified copies); `#` is reserved otherwise.
fn validate_name(name: &str) -> Result<()> {
    let stem = match name.rsplit_once('#') {
        Some((stem, k)) if !k.is_empty() && k.chars().all(|c| c.is_ascii_digit()) => stem,
        _ => name,
    };
    let ok = !stem.is_empty()
        && !stem.chars().any(|c| c.is_whitespace() || c == '=' || c == '#')
        && !name.contains("→")
        && !name.contains("->")
        && name != "…"
        && name != "...";
    if ok {
        Ok(())
    } else {
        Err(Error::Structural(format!("invalid node name `{name}`")))
    }
}

pub(crate) fn infer_shape(kind: &NodeKind, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    use NodeKind::*;
    let same_as_first = |op: &str| -> Result<Vec<usize>> {
        let first = inputs[0];
        if let Some(bad) = inputs.iter().find(|s| **s != first) {
            return Err(Error::shape_anon(format!(
                "{op}: input shapes {first:?} and {bad:?} differ"
            )));
        }
        Ok(first.to_vec())
    };
    match kind {
        Input { shape, .. } => {
            if shape.is_empty() || shape.contains(&0) {
                return Err(Error::shape_anon(format!("invalid input shape {shape:?}")));
            }
            Ok(shape.clone())
        }
        Labels { len, vocab } => {
            if *len == 0 || *vocab == 0 {
                return Err(Error::shape_anon("labels need positive length and vocab"));
            }
            Ok(vec![*len])
        }
        Constant(t) => Ok(t.shape().to_vec()),
        Add => same_as_first("add"),
        Sum => same_as_first("sum"),
        ScalarMul(f) => {
            if !f.is_finite() {
                return Err(Error::Argument(format!("scale factor {f} is not finite")));
            }
            Ok(inputs[0].to_vec())
        }
        Alias => Ok(inputs[0].to_vec()),
        MatMul => {
            let (lhs, rhs) = (inputs[0], inputs[1]);
            match (lhs, rhs) {
                (&[k], &[k2, n]) if k == k2 => Ok(vec![n]),
                (&[m, k], &[k2, n]) if k == k2 => Ok(vec![m, n]),
                _ => Err(Error::shape_anon(format!(
                    "matmul: incompatible shapes {lhs:?} x {rhs:?}"
                ))),
            }
        }
        Transpose => match inputs[0] {
            &[r, c] => Ok(vec![c, r]),
            other => Err(Error::shape_anon(format!(
                "transpose needs a matrix, got {other:?}"
            ))),
        },
        Softmax { axis } => {
            if *axis >= inputs[0].len() {
                return Err(Error::Argument(format!(
                    "softmax axis {axis} out of range for {:?}",
                    inputs[0]
                )));
            }
            Ok(inputs[0].to_vec())
        }
        LayerNorm { eps } => {
            if !(*eps >= 0.0 && eps.is_finite()) {
                return Err(Error::Argument(format!("layer norm epsilon {eps} invalid")));
            }
            let d = *inputs[0].last().unwrap();
            if inputs[1] != [d] || inputs[2] != [d] {
                return Err(Error::shape_anon(format!(
                    "layer norm: gain {:?} and bias {:?} must be [{d}]",
                    inputs[1], inputs[2]
                )));
            }
            Ok(inputs[0].to_vec())
        }
        EmbedLookup => match inputs[0] {
            &[_, d] => {
                let mut s = inputs[1].to_vec();
                s.push(d);
                Ok(s)
            }
            other => Err(Error::shape_anon(format!(
                "embedding table must be a matrix, got {other:?}"
            ))),
        },
        Slice { axis, start, stop } => {
            let s = inputs[0];
            if *axis >= s.len() || start >= stop || *stop > s[*axis] {
                return Err(Error::Argument(format!(
                    "slice axis {axis} [{start}, {stop}) invalid for {s:?}"
                )));
            }
            let mut out = s.to_vec();
            out[*axis] = stop - start;
            Ok(out)
        }
        Concat { axis } => {
            let first = inputs[0];
            if *axis >= first.len() {
                return Err(Error::Argument(format!(
                    "concat axis {axis} out of range for {first:?}"
                )));
            }
            let mut total = 0;
            for s in inputs {
                let compatible = s.len() == first.len()
                    && s
                        .iter()
                        .zip(first)
                        .enumerate()
                        .all(|(a, (x, y))| a == *axis || x == y);
                if !compatible {
                    return Err(Error::shape_anon(format!(
                        "concat: {s:?} incompatible with {first:?} along axis {axis}"
                    )));
                }
                total += s[*axis];
            }
            let mut out = first.to_vec();
            out[*axis] = total;
            Ok(out)
        }
        CausalMask => match inputs[0] {
            &[r, c] => Ok(vec![r, c]),
            other => Err(Error::shape_anon(format!(
                "causal mask needs a matrix, got {other:?}"
            ))),
        },
        CrossEntropy => match (inputs[0], inputs[1]) {
            (&[n, _], &[m]) if n == m => Ok(vec![n]),
            (l, y) => Err(Error::shape_anon(format!(
                "cross entropy: logits {l:?} do not match labels {y:?}"
            ))),
        },
        Attention {
            heads,
            head_dim,
            scale,
        } => {
            if *heads == 0 || *head_dim == 0 || !scale.is_finite() {
                return Err(Error::Argument("attention needs heads, head_dim > 0".into()));
            }
            let width = heads * head_dim;
            let (n, d) = match inputs[0] {
                &[n, d] => (n, d),
                other => {
                    return Err(Error::shape_anon(format!(
                        "attention query source must be [n, d], got {other:?}"
                    )))
                }
            };
            let ports = ["query source", "key source", "value source"];
            for (p, s) in ports.iter().zip(&inputs[..3]) {
                if *s != [n, d] {
                    return Err(Error::shape_anon(format!(
                        "attention {p} {s:?} differs from [{n}, {d}]"
                    )));
                }
            }
            for (p, s) in ["W_Q", "W_K", "W_V"].iter().zip(&inputs[3..6]) {
                if *s != [d, width] {
                    return Err(Error::shape_anon(format!(
                        "attention {p} is {s:?}, expected [{d}, {width}]"
                    )));
                }
            }
            match inputs[6] {
                &[w, d_out] if w == width => Ok(vec![n, d_out]),
                other => Err(Error::shape_anon(format!(
                    "attention W_O is {other:?}, expected [{width}, d_out]"
                ))),
            }
        }
    }
}

/// Incrementally builds a graph; inputs must be declared before use, so the
/// result is acyclic by construction.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    by_name: HashMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: NodeKind, inputs: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        validate_name(&name)?;
        if self.by_name.contains_key(&name) {
            return Err(Error::Structural(format!("duplicate node name `{name}`")));
        }
        let arity_ok = match kind.arity() {
            Arity::Exact(n) => inputs.len() == n,
            Arity::AtLeast(n) => inputs.len() >= n,
        };
        if !arity_ok {
            return Err(Error::Structural(format!(
                "`{name}` ({}) given {} inputs",
                kind.keyword(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|i| i.index() >= self.nodes.len()) {
            return Err(Error::Structural(format!(
                "`{name}` references undeclared node {bad}"
            )));
        }
        let shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|i| self.nodes[i.index()].shape.as_slice())
            .collect();
        let shape = infer_shape(&kind, &shapes).map_err(|e| e.at_node(&name))?;
        let id = NodeId(self.nodes.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.nodes.push(Node {
            name,
            kind,
            inputs: inputs.to_vec(),
            shape,
        });
        Ok(id)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.add(
            name,
            NodeKind::Input {
                shape: shape.to_vec(),
                domain: InputDomain::Real,
            },
            &[],
        )
    }

    pub fn tokens(&mut self, name: &str, len: usize, vocab: usize) -> Result<NodeId> {
        self.add(
            name,
            NodeKind::Input {
                shape: vec![len],
                domain: InputDomain::Tokens { vocab },
            },
            &[],
        )
    }

    pub fn labels(&mut self, name: &str, len: usize, vocab: usize) -> Result<NodeId> {
        self.add(name, NodeKind::Labels { len, vocab }, &[])
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        self.add(name, NodeKind::Constant(Arc::new(value)), &[])
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn finish(self, output: NodeId) -> Result<Graph> {
        if output.index() >= self.nodes.len() {
            return Err(Error::Structural(format!("output {output} does not exist")));
        }
        Ok(Graph::from_nodes(self.nodes, self.by_name, output))
    }
}

impl Graph {
    fn from_nodes(nodes: Vec<Node>, by_name: HashMap<String, NodeId>, output: NodeId) -> Self {
        let n = nodes.len();
        let mut consumers = vec![Vec::new(); n];
        let mut input_dependent = vec![false; n];
        for (idx, node) in nodes.iter().enumerate() {
            for (port, &inp) in node.inputs.iter().enumerate() {
                consumers[inp.index()].push((NodeId(idx as u32), port));
            }
            input_dependent[idx] = matches!(node.kind, NodeKind::Input { .. })
                || node.inputs.iter().any(|i| input_dependent[i.index()]);
        }
        let mut live = vec![false; n];
        live[output.index()] = true;
        for idx in (0..n).rev() {
            if live[idx] {
                for i in &nodes[idx].inputs {
                    live[i.index()] = true;
                }
            }
        }
        Graph {
            nodes,
            output,
            by_name,
            consumers,
            input_dependent,
            live,
        }
    }

    /// Build a graph from name-based specs given in any order.
    ///
    /// Specs are topologically sorted (ties resolved by declaration order);
    /// a cycle or a reference to an unknown name is a structural error.
    pub fn build(specs: Vec<NodeSpec>, output: &str) -> Result<Graph> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, s) in specs.iter().enumerate() {
            if index.insert(s.name.as_str(), i).is_some() {
                return Err(Error::Structural(format!("duplicate node name `{}`", s.name)));
            }
        }
        let mut indegree = vec![0usize; specs.len()];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); specs.len()];
        for (i, s) in specs.iter().enumerate() {
            for inp in &s.inputs {
                let j = *index.get(inp.as_str()).ok_or_else(|| {
                    Error::Structural(format!("`{}` references unknown node `{inp}`", s.name))
                })?;
                indegree[i] += 1;
                dependents[j].push(i);
            }
        }
        // Smallest declaration index first, so sorted input keeps its order.
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..specs.len()).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(specs.len());
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &d in &dependents[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.push(Reverse(d));
                }
            }
        }
        if order.len() != specs.len() {
            let stuck: Vec<&str> = (0..specs.len())
                .filter(|&i| indegree[i] > 0)
                .map(|i| specs[i].name.as_str())
                .collect();
            return Err(Error::Structural(format!(
                "cycle through nodes {}",
                stuck.join(", ")
            )));
        }
        let mut builder = GraphBuilder::new();
        let mut specs: Vec<Option<NodeSpec>> = specs.into_iter().map(Some).collect();
        for i in order {
            let spec = specs[i].take().expect("each spec visited once");
            let inputs: Vec<NodeId> = spec
                .inputs
                .iter()
                .map(|n| builder.id(n).expect("sorted"))
                .collect();
            builder.add(spec.name, spec.kind, &inputs)?;
        }
        let out = builder
            .id(output)
            .ok_or_else(|| Error::Structural(format!("output `{output}` is not a node")))?;
        builder.finish(out)
    }

    pub fn to_specs(&self) -> Vec<NodeSpec> {
        self.nodes
            .iter()
            .map(|n| NodeSpec {
                name: n.name.clone(),
                kind: n.kind.clone(),
                inputs: n.inputs.iter().map(|i| self.name(*i).to_owned()).collect(),
            })
            .collect()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].name
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    /// Like [`Graph::id`] but with an argument error for unknown names.
    pub fn require(&self, name: &str) -> Result<NodeId> {
        self.id(name)
            .ok_or_else(|| Error::Argument(format!("unknown node `{name}`")))
    }

    pub fn ids(&self) -> impl DoubleEndedIterator<Item = NodeId> + ExactSizeIterator + '_ {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn consumers(&self, id: NodeId) -> &[(NodeId, usize)] {
        &self.consumers[id.index()]
    }

    pub fn is_input_dependent(&self, id: NodeId) -> bool {
        self.input_dependent[id.index()]
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.live[id.index()]
    }

    pub fn is_patchable_leaf(&self, id: NodeId) -> bool {
        matches!(self.node(id).kind, NodeKind::Input { .. })
    }

    /// Patchable input leaves, in id order.
    pub fn input_leaves(&self) -> Vec<NodeId> {
        self.ids().filter(|&i| self.is_patchable_leaf(i)).collect()
    }

    /// Nodes that are not ancestors of the output.
    pub fn dead_nodes(&self) -> Vec<NodeId> {
        self.ids().filter(|&i| !self.is_live(i)).collect()
    }

    /// Copy of the graph without dead nodes.
    pub fn eliminate_dead(&self) -> Graph {
        let specs = self
            .to_specs()
            .into_iter()
            .zip(&self.live)
            .filter(|(_, &live)| live)
            .map(|(s, _)| s)
            .collect();
        Graph::build(specs, self.name(self.output)).expect("subgraph of a valid graph is valid")
    }

    /// Same nodes, different output.
    pub fn with_output(&self, output: &str) -> Result<Graph> {
        let id = self.require(output)?;
        Ok(Graph::from_nodes(self.nodes.clone(), self.by_name.clone(), id))
    }
}

#[cfg(test)]
mod tests;
