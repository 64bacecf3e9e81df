// SPDX-License-Identifier: MIT OR Apache-2.0

//! Memoized evaluation, including evaluation under a per-path source
//! assignment ("routing").
//!
//! A [`Route`] describes which bound input feeds every path below a node:
//! either one source for all of them ([`Route::Uniform`]), a separate route
//! per input port ([`Route::Split`]), or "does not matter" ([`Route::Any`])
//! for subtrees with no patchable input. Routes are hash-consed in a
//! [`RouteArena`] and canonicalized on construction, so two copies of a node
//! in the conceptual treeified graph that see the same source assignment
//! share one [`RouteId`] and therefore one memo entry. That is what makes
//! patched evaluation cost proportional to the number of distinct
//! `(node, assignment)` pairs instead of the number of paths.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{Graph, NodeId, NodeKind};
use crate::error::{Error, Result};
use crate::tensor::{cross_entropy_per_token, token_ids, Tensor};

/// Index into the list of bindings handed to an [`Evaluator`].
pub type SourceId = u16;

/// The reference input `x_r`. Labels are always read from this source.
pub const REFERENCE: SourceId = 0;
/// The counterfactual input `x_c`.
pub const COUNTERFACTUAL: SourceId = 1;

/// Values for the leaves of a graph, keyed by leaf name.
///
/// A binding for a leaf `tok` also serves leaves named `tok[p]` (as
/// produced by position slicing), which resolve to row `p` of `tok`, and
/// treeified copies `tok#k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Binding {
    values: BTreeMap<String, Arc<Tensor>>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: Tensor) -> Self {
        self.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.values.insert(name.to_owned(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name).map(|v| v.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Look up `name`, falling back to the original name for treeified
    /// copies `name#k` and to slicing `base` for names `base[p]`.
    pub fn resolve(&self, name: &str) -> Result<Arc<Tensor>> {
        if let Some(v) = self.values.get(name) {
            return Ok(v.clone());
        }
        if let Some((orig, copy)) = name.rsplit_once('#') {
            if !copy.is_empty() && copy.chars().all(|c| c.is_ascii_digit()) {
                return self.resolve(orig);
            }
        }
        if let Some((base, pos)) = split_position_name(name) {
            if let Some(full) = self.values.get(base) {
                if pos < full.shape()[0] {
                    return Ok(Arc::new(full.slice(0, pos, pos + 1)?));
                }
            }
        }
        Err(Error::Binding(format!("leaf `{name}` is not bound")))
    }
}

/// Split `tok[3]` into `("tok", 3)`.
pub(crate) fn split_position_name(name: &str) -> Option<(&str, usize)> {
    let open = name.rfind('[')?;
    let inner = name[open + 1..].strip_suffix(']')?;
    let pos = inner.parse().ok()?;
    Some((&name[..open], pos))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RouteId(u32);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    /// The subtree reads no patchable input.
    Any,
    /// Every path through the subtree reads this source.
    Uniform(SourceId),
    /// One route per input port of the node.
    Split(Box<[RouteId]>),
}

/// Hash-consing store for [`Route`]s.
#[derive(Debug)]
pub struct RouteArena {
    routes: Vec<Route>,
    index: HashMap<Route, RouteId>,
}

impl Default for RouteArena {
    fn default() -> Self {
        Self::new()
    }
}

impl RouteArena {
    pub fn new() -> Self {
        RouteArena {
            routes: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn intern(&mut self, route: Route) -> RouteId {
        if let Some(&id) = self.index.get(&route) {
            return id;
        }
        let id = RouteId(self.routes.len() as u32);
        self.routes.push(route.clone());
        self.index.insert(route, id);
        id
    }

    pub fn any(&mut self) -> RouteId {
        self.intern(Route::Any)
    }

    pub fn uniform(&mut self, source: SourceId) -> RouteId {
        self.intern(Route::Uniform(source))
    }

    /// Intern a per-port route, collapsing it to `Uniform`/`Any` when the
    /// ports that matter agree.
    pub fn split(&mut self, children: Vec<RouteId>) -> RouteId {
        let mut common: Option<SourceId> = None;
        let mut uniform = true;
        for &c in &children {
            match self.routes[c.0 as usize] {
                Route::Any => {}
                Route::Uniform(s) => match common {
                    None => common = Some(s),
                    Some(t) if t == s => {}
                    Some(_) => uniform = false,
                },
                Route::Split(_) => uniform = false,
            }
        }
        match (uniform, common) {
            (true, None) => self.any(),
            (true, Some(s)) => self.uniform(s),
            (false, _) => self.intern(Route::Split(children.into_boxed_slice())),
        }
    }

    pub fn get(&self, id: RouteId) -> &Route {
        &self.routes[id.0 as usize]
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum MemoKey {
    Plain(SourceId),
    Routed(RouteId),
}

/// Per-node evaluation counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalStats {
    /// How many times each node's kernel ran, indexed by node id.
    pub per_node: Vec<u32>,
    /// Node ids in the order their kernels ran.
    pub order: Vec<NodeId>,
}

impl EvalStats {
    pub fn total(&self) -> u64 {
        self.per_node.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn count(&self, id: NodeId) -> u32 {
        self.per_node[id.index()]
    }
}

/// Evaluates one graph against a fixed list of bindings.
///
/// The memo cache lives as long as the evaluator, so several outputs
/// (e.g. `G(x_r)`, `G(x_c)` and a patched `G_H(x_r, x_c)`) computed through
/// the same evaluator share every common subexpression. Evaluators are
/// cheap; make one per sample pair.
pub struct Evaluator<'a> {
    graph: &'a Graph,
    sources: Vec<&'a Binding>,
    memo: HashMap<(NodeId, MemoKey), Arc<Tensor>>,
    overrides: HashMap<NodeId, Arc<Tensor>>,
    stats: EvalStats,
}

impl<'a> Evaluator<'a> {
    pub fn new(graph: &'a Graph, sources: &[&'a Binding]) -> Self {
        Evaluator {
            graph,
            sources: sources.to_vec(),
            memo: HashMap::new(),
            overrides: HashMap::new(),
            stats: EvalStats {
                per_node: vec![0; graph.len()],
                order: Vec::new(),
            },
        }
    }

    /// Replace a node's value in every plain evaluation.
    pub fn set_override(&mut self, node: NodeId, value: Tensor) -> Result<()> {
        let expected = &self.graph.node(node).shape;
        if value.shape() != expected.as_slice() {
            return Err(Error::shape(
                self.graph.name(node),
                format!("override {:?} differs from {:?}", value.shape(), expected),
            ));
        }
        self.overrides.insert(node, Arc::new(value));
        self.memo.clear();
        Ok(())
    }

    pub fn stats(&self) -> &EvalStats {
        &self.stats
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    fn binding(&self, source: SourceId) -> Result<&'a Binding> {
        self.sources
            .get(source as usize)
            .copied()
            .ok_or_else(|| Error::Binding(format!("no binding for source {source}")))
    }

    fn leaf_value(&self, id: NodeId, source: SourceId) -> Result<Arc<Tensor>> {
        let node = self.graph.node(id);
        let src = match node.kind {
            NodeKind::Labels { .. } => REFERENCE,
            _ => source,
        };
        let value = self.binding(src)?.resolve(&node.name)?;
        if value.shape() != node.shape.as_slice() {
            return Err(Error::Binding(format!(
                "leaf `{}` bound with shape {:?}, declared {:?}",
                node.name,
                value.shape(),
                node.shape
            )));
        }
        Ok(value)
    }

    /// Value of `id` with every patchable leaf read from `source`.
    pub fn eval_plain(&mut self, id: NodeId, source: SourceId) -> Result<Arc<Tensor>> {
        let key = (id, MemoKey::Plain(source));
        if let Some(v) = self.memo.get(&key) {
            return Ok(v.clone());
        }
        let value = if let Some(v) = self.overrides.get(&id) {
            v.clone()
        } else {
            let node = self.graph.node(id);
            match &node.kind {
                NodeKind::Input { .. } | NodeKind::Labels { .. } => self.leaf_value(id, source)?,
                NodeKind::Constant(t) => t.clone(),
                _ => {
                    let inputs: Vec<NodeId> = node.inputs.clone();
                    let mut args = Vec::with_capacity(inputs.len());
                    for inp in inputs {
                        args.push(self.eval_plain(inp, source)?);
                    }
                    self.run_kernel(id, &args)?
                }
            }
        };
        self.memo.insert(key, value.clone());
        Ok(value)
    }

    /// Value of the conceptual treeified copy of `id` whose input leaves are
    /// assigned by `route`.
    pub fn eval_routed(
        &mut self,
        arena: &RouteArena,
        id: NodeId,
        route: RouteId,
    ) -> Result<Arc<Tensor>> {
        match arena.get(route) {
            Route::Any => self.eval_plain(id, REFERENCE),
            Route::Uniform(s) => self.eval_plain(id, *s),
            Route::Split(children) => {
                let key = (id, MemoKey::Routed(route));
                if let Some(v) = self.memo.get(&key) {
                    return Ok(v.clone());
                }
                let node = self.graph.node(id);
                if children.len() != node.inputs.len() {
                    return Err(Error::Argument(format!(
                        "route for `{}` has {} ports, node has {}",
                        node.name,
                        children.len(),
                        node.inputs.len()
                    )));
                }
                let inputs = node.inputs.clone();
                let children = children.clone();
                let mut args = Vec::with_capacity(inputs.len());
                for (inp, child) in inputs.into_iter().zip(children.iter()) {
                    args.push(self.eval_routed(arena, inp, *child)?);
                }
                let value = self.run_kernel(id, &args)?;
                self.memo.insert(key, value.clone());
                Ok(value)
            }
        }
    }

    /// Evaluate the graph output under `route`.
    pub fn output_routed(&mut self, arena: &RouteArena, route: RouteId) -> Result<Arc<Tensor>> {
        let out = self.graph.output();
        self.eval_routed(arena, out, route)
    }

    pub fn output_plain(&mut self, source: SourceId) -> Result<Arc<Tensor>> {
        let out = self.graph.output();
        self.eval_plain(out, source)
    }

    fn run_kernel(&mut self, id: NodeId, args: &[Arc<Tensor>]) -> Result<Arc<Tensor>> {
        self.stats.per_node[id.index()] += 1;
        self.stats.order.push(id);
        let node = self.graph.node(id);
        let refs: Vec<&Tensor> = args.iter().map(|a| a.as_ref()).collect();
        let value = apply(&node.kind, &refs).map_err(|e| e.at_node(&node.name))?;
        Ok(Arc::new(value))
    }
}

/// Run the kernel for a non-leaf node kind.
pub(crate) fn apply(kind: &NodeKind, args: &[&Tensor]) -> Result<Tensor> {
    use NodeKind::*;
    match kind {
        Input { .. } | Labels { .. } | Constant(_) => {
            Err(Error::Argument("leaf kinds have no kernel".into()))
        }
        Add => args[0].add(args[1]),
        Sum => Tensor::sum_all(args),
        ScalarMul(f) => args[0].scale(*f),
        MatMul => args[0].matmul(args[1]),
        Transpose => args[0].transpose(),
        Softmax { axis } => args[0].softmax(*axis),
        LayerNorm { eps } => args[0].layer_norm(args[1], args[2], *eps),
        EmbedLookup => args[0].embed_lookup(args[1]),
        Slice { axis, start, stop } => args[0].slice(*axis, *start, *stop),
        Concat { axis } => Tensor::concat(args, *axis),
        CausalMask => args[0].causal_mask(),
        CrossEntropy => {
            let vocab = args[0].last_dim();
            let labels = token_ids(args[1], vocab)?;
            cross_entropy_per_token(args[0], &labels)
        }
        Alias => Ok(args[0].clone()),
        Attention {
            heads,
            head_dim,
            scale,
        } => fused_attention(args, *heads, *head_dim, *scale),
    }
}

fn fused_attention(args: &[&Tensor], heads: usize, head_dim: usize, scale: f64) -> Result<Tensor> {
    let (q_src, k_src, v_src, wq, wk, wv, wo) =
        (args[0], args[1], args[2], args[3], args[4], args[5], args[6]);
    let mut zs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let q = q_src.matmul(&wq.slice(1, lo, hi)?)?;
        let k = k_src.matmul(&wk.slice(1, lo, hi)?)?;
        let v = v_src.matmul(&wv.slice(1, lo, hi)?)?;
        let pattern = q
            .matmul(&k.transpose()?)?
            .scale(scale)?
            .causal_mask()?
            .softmax(1)?;
        zs.push(pattern.matmul(&v)?);
    }
    let refs: Vec<&Tensor> = zs.iter().collect();
    Tensor::concat(&refs, 1)?.matmul(wo)
}

/// `G(x)`: evaluate the output with every leaf read from `binding`.
pub fn evaluate(graph: &Graph, binding: &Binding) -> Result<Tensor> {
    let mut ev = Evaluator::new(graph, &[binding]);
    Ok(ev.output_plain(REFERENCE)?.as_ref().clone())
}

/// Evaluate with the listed node values replaced.
pub fn evaluate_with_overrides(
    graph: &Graph,
    binding: &Binding,
    overrides: &HashMap<NodeId, Tensor>,
) -> Result<Tensor> {
    let mut ev = Evaluator::new(graph, &[binding]);
    for (&id, value) in overrides {
        ev.set_override(id, value.clone())?;
    }
    Ok(ev.output_plain(REFERENCE)?.as_ref().clone())
}
