// SPDX-License-Identifier: MIT OR Apache-2.0

//! Input-to-output paths: enumeration, treeification and the pattern
//! language used to select them.
//!
//! A path starts at a patchable input leaf, follows consumer edges and ends
//! at the graph output. Each step records the input port it enters, so two
//! edges between the same pair of nodes (as in `add(a, a)`) give two
//! distinct paths. Labels and constants never start a path.

mod pattern;
mod treeify;

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

pub use pattern::{
    unknown_names, PathExpr, Pattern, PatternElement, PosExpr, Position, PositionVars, ResolvedExpr,
    ResolvedPattern, SetOp, MAX_PATTERN_ELEMENTS,
};
pub(crate) use pattern::Nfa;
pub use treeify::{canonical_form, treeify, treeify_in_order, Treeified};

/// Default cap on explicitly enumerated paths.
pub const DEFAULT_PATH_CAP: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Path {
    nodes: Vec<NodeId>,
    /// `ports[t]` is the input port of `nodes[t + 1]` fed by `nodes[t]`.
    ports: Vec<u16>,
}

impl Path {
    pub fn new(nodes: Vec<NodeId>, ports: Vec<u16>) -> Self {
        assert_eq!(nodes.len(), ports.len() + 1, "one port per edge");
        Path { nodes, ports }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn ports(&self) -> &[u16] {
        &self.ports
    }

    pub fn leaf(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains(&id)
    }

    pub fn names<'g>(&self, graph: &'g Graph) -> Vec<&'g str> {
        self.nodes.iter().map(|&n| graph.name(n)).collect()
    }

    /// Check that the path is well formed for `graph`.
    pub fn validate(&self, graph: &Graph) -> Result<()> {
        if !graph.is_patchable_leaf(self.leaf()) {
            return Err(Error::Argument("path does not start at an input leaf".into()));
        }
        if *self.nodes.last().unwrap() != graph.output() {
            return Err(Error::Argument("path does not end at the output".into()));
        }
        for (t, w) in self.nodes.windows(2).enumerate() {
            let port = self.ports[t] as usize;
            if graph.node(w[1]).inputs.get(port) != Some(&w[0]) {
                return Err(Error::Argument(format!(
                    "no edge {} -> {} at port {port}",
                    graph.name(w[0]),
                    graph.name(w[1])
                )));
            }
        }
        Ok(())
    }

    pub fn display<'a>(&'a self, graph: &'a Graph) -> PathDisplay<'a> {
        PathDisplay { path: self, graph }
    }
}

pub struct PathDisplay<'a> {
    path: &'a Path,
    graph: &'a Graph,
}

impl fmt::Display for PathDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.path.names(self.graph);
        write!(f, "{}", names.join(" → "))
    }
}

fn canonical_key<'g>(graph: &'g Graph, p: &Path) -> (Vec<&'g str>, Vec<u16>) {
    (p.names(graph), p.ports.clone())
}

/// A deduplicated set of paths kept in canonical order: lexicographic on
/// node-name sequences, then on ports.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PathSet {
    paths: Vec<Path>,
}

impl PathSet {
    pub fn new(graph: &Graph, mut paths: Vec<Path>) -> Self {
        paths.sort_by(|a, b| canonical_key(graph, a).cmp(&canonical_key(graph, b)));
        paths.dedup();
        PathSet { paths }
    }

    pub fn empty() -> Self {
        PathSet { paths: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Path> {
        self.paths.iter()
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    pub fn contains(&self, path: &Path) -> bool {
        self.paths.contains(path)
    }

    pub fn to_hash_set(&self) -> HashSet<Path> {
        self.paths.iter().cloned().collect()
    }

    pub fn union(&self, graph: &Graph, other: &PathSet) -> PathSet {
        let mut all = self.paths.clone();
        all.extend(other.paths.iter().cloned());
        PathSet::new(graph, all)
    }

    pub fn difference(&self, other: &PathSet) -> PathSet {
        let drop = other.to_hash_set();
        PathSet {
            paths: self
                .paths
                .iter()
                .filter(|p| !drop.contains(*p))
                .cloned()
                .collect(),
        }
    }

    pub fn intersection(&self, other: &PathSet) -> PathSet {
        let keep = other.to_hash_set();
        PathSet {
            paths: self
                .paths
                .iter()
                .filter(|p| keep.contains(*p))
                .cloned()
                .collect(),
        }
    }
}

impl<'a> IntoIterator for &'a PathSet {
    type Item = &'a Path;
    type IntoIter = std::slice::Iter<'a, Path>;
    fn into_iter(self) -> Self::IntoIter {
        self.paths.iter()
    }
}

/// Number of paths from each node to the output, saturating.
pub(crate) fn suffix_counts(graph: &Graph) -> Vec<u128> {
    let mut counts = vec![0u128; graph.len()];
    counts[graph.output().index()] = 1;
    for id in graph.ids().rev() {
        if id == graph.output() {
            continue;
        }
        counts[id.index()] = graph
            .consumers(id)
            .iter()
            .filter(|(c, _)| graph.is_live(*c))
            .fold(0u128, |acc, (c, _)| acc.saturating_add(counts[c.index()]));
    }
    counts
}

/// Number of input-to-output paths, without enumerating them.
pub fn count_paths(graph: &Graph) -> u128 {
    let counts = suffix_counts(graph);
    graph
        .input_leaves()
        .into_iter()
        .fold(0u128, |acc, l| acc.saturating_add(counts[l.index()]))
}

/// All paths in canonical order. Fails with a capacity error above `cap`.
pub fn enumerate_paths_capped(graph: &Graph, cap: usize) -> Result<PathSet> {
    let count = count_paths(graph);
    if count > cap as u128 {
        return Err(Error::Capacity { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut nodes = Vec::new();
    let mut ports = Vec::new();
    for leaf in graph.input_leaves() {
        nodes.push(leaf);
        walk(graph, &mut nodes, &mut ports, &mut out);
        nodes.pop();
    }
    Ok(PathSet::new(graph, out))
}

/// All paths under the default cap.
pub fn enumerate_paths(graph: &Graph) -> Result<PathSet> {
    enumerate_paths_capped(graph, DEFAULT_PATH_CAP)
}

fn walk(graph: &Graph, nodes: &mut Vec<NodeId>, ports: &mut Vec<u16>, out: &mut Vec<Path>) {
    let here = *nodes.last().unwrap();
    if here == graph.output() {
        out.push(Path::new(nodes.clone(), ports.clone()));
        return;
    }
    for &(c, port) in graph.consumers(here) {
        if !graph.is_live(c) {
            continue;
        }
        nodes.push(c);
        ports.push(port as u16);
        walk(graph, nodes, ports, out);
        nodes.pop();
        ports.pop();
    }
}

/// Paths matching `pattern`, in canonical order.
pub fn match_pattern(graph: &Graph, pattern: &ResolvedPattern) -> Result<PathSet> {
    let all = enumerate_paths(graph)?;
    Ok(PathSet {
        paths: all
            .paths
            .into_iter()
            .filter(|p| pattern.matches(&p.names(graph)))
            .collect(),
    })
}

/// Paths selected by a resolved hypothesis expression, in canonical order.
pub fn match_expr(graph: &Graph, expr: &ResolvedExpr) -> Result<PathSet> {
    let all = enumerate_paths(graph)?;
    Ok(PathSet {
        paths: all
            .paths
            .into_iter()
            .filter(|p| expr.contains(&p.names(graph)))
            .collect(),
    })
}

#[cfg(test)]
mod tests;
