// SPDX-License-Identifier: MIT OR Apache-2.0

//! Explicit treeification: copy every multi-consumer subtree until each
//! input-to-output path owns a private copy of its input leaf.
//!
//! The patched evaluator never materializes this tree; it exists to check
//! that evaluator against the definition and for inspecting small graphs.
//!
//! Copies are named `<name>#<k>`, with `k` ranking the copy's path to the
//! output in canonical order; nodes with a single copy keep their name.
//! Leaf copies resolve against a binding of the original leaf name, so a
//! binding for `g` also binds every copy in `treeify(g)`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{count_paths, Path, DEFAULT_PATH_CAP};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, NodeSpec};

/// A treeified graph together with the original path each leaf copy stands for.
#[derive(Clone, Debug)]
pub struct Treeified {
    pub graph: Graph,
    /// `(leaf copy in graph, path in the original graph)`, in canonical path order.
    pub leaf_paths: Vec<(NodeId, Path)>,
}

impl Treeified {
    pub fn leaf_copy_count(&self) -> usize {
        self.leaf_paths.len()
    }
}

/// Working node of the tree under construction.
#[derive(Clone)]
struct WorkNode {
    orig: NodeId,
    inputs: Vec<usize>,
}

fn check_cap(graph: &Graph) -> Result<()> {
    let count = count_paths(graph);
    if count > DEFAULT_PATH_CAP as u128 {
        return Err(Error::Capacity {
            count,
            cap: DEFAULT_PATH_CAP,
        });
    }
    Ok(())
}

/// Treeify by direct recursive expansion from the output.
pub fn treeify(graph: &Graph) -> Result<Treeified> {
    check_cap(graph)?;
    let mut work = Vec::new();
    let root = expand(graph, graph.output(), &mut work);
    finish(graph, &work, root)
}

fn expand(graph: &Graph, id: NodeId, work: &mut Vec<WorkNode>) -> usize {
    let inputs = graph
        .node(id)
        .inputs
        .iter()
        .map(|&i| expand(graph, i, work))
        .collect();
    work.push(WorkNode { orig: id, inputs });
    work.len() - 1
}

/// Treeify by repeatedly picking a multi-consumer node in an order drawn
/// from `seed` and giving each of its consumers a private copy of its
/// subtree, as in the gradual construction. The result does not depend on
/// the seed.
pub fn treeify_in_order(graph: &Graph, seed: u64) -> Result<Treeified> {
    check_cap(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Start from the live part of the DAG itself, sharing intact.
    let mut index = HashMap::new();
    let mut work: Vec<WorkNode> = Vec::new();
    for id in graph.ids().filter(|&i| graph.is_live(i)) {
        let inputs = graph.node(id).inputs.iter().map(|i| index[i]).collect();
        index.insert(id, work.len());
        work.push(WorkNode { orig: id, inputs });
    }
    let root = index[&graph.output()];
    loop {
        let reachable = reachable_from(&work, root);
        let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); work.len()];
        for &n in &reachable {
            for (port, &inp) in work[n].inputs.iter().enumerate() {
                edges[inp].push((n, port));
            }
        }
        let mut shared: Vec<usize> = reachable
            .iter()
            .copied()
            .filter(|&n| edges[n].len() > 1)
            .collect();
        if shared.is_empty() {
            break;
        }
        shared.shuffle(&mut rng);
        let pick = shared[0];
        let mut consumers = edges[pick].clone();
        consumers.shuffle(&mut rng);
        // The first consumer keeps the original; every other gets a copy.
        for &(consumer, port) in &consumers[1..] {
            let copy = deep_copy(&mut work, pick);
            work[consumer].inputs[port] = copy;
        }
    }
    finish(graph, &work, root)
}

fn reachable_from(work: &[WorkNode], root: usize) -> Vec<usize> {
    let mut seen = vec![false; work.len()];
    let mut stack = vec![root];
    let mut out = Vec::new();
    while let Some(n) = stack.pop() {
        if std::mem::replace(&mut seen[n], true) {
            continue;
        }
        out.push(n);
        stack.extend(work[n].inputs.iter().copied());
    }
    out
}

fn deep_copy(work: &mut Vec<WorkNode>, n: usize) -> usize {
    let inputs: Vec<usize> = work[n].inputs.clone();
    let copied = inputs.into_iter().map(|i| deep_copy(work, i)).collect();
    let orig = work[n].orig;
    work.push(WorkNode {
        orig,
        inputs: copied,
    });
    work.len() - 1
}

/// One node of the final tree, with its lineage to the root.
struct Placed {
    work: usize,
    /// Original names from this node up to the root, then ports.
    lineage: (Vec<String>, Vec<u16>),
    /// Path from this node to the root as `(original node, port into next)`.
    suffix_nodes: Vec<NodeId>,
    suffix_ports: Vec<u16>,
}

fn finish(graph: &Graph, work: &[WorkNode], root: usize) -> Result<Treeified> {
    // Collect every tree node with its suffix to the root.
    let mut placed = Vec::new();
    let mut stack = vec![(root, Vec::<NodeId>::new(), Vec::<u16>::new())];
    while let Some((n, mut above_nodes, above_ports)) = stack.pop() {
        let orig = work[n].orig;
        above_nodes.insert(0, orig);
        for (port, &inp) in work[n].inputs.iter().enumerate() {
            let mut ports = above_ports.clone();
            ports.insert(0, port as u16);
            stack.push((inp, above_nodes.clone(), ports));
        }
        let names = above_nodes.iter().map(|&i| graph.name(i).to_owned()).collect();
        placed.push(Placed {
            work: n,
            lineage: (names, above_ports.clone()),
            suffix_nodes: above_nodes,
            suffix_ports: above_ports,
        });
    }
    // Rank copies of each original node by lineage.
    let mut by_orig: HashMap<NodeId, Vec<usize>> = HashMap::new();
    for (i, p) in placed.iter().enumerate() {
        by_orig.entry(work[p.work].orig).or_default().push(i);
    }
    let mut final_name = vec![String::new(); placed.len()];
    for (orig, mut copies) in by_orig {
        copies.sort_by(|&a, &b| placed[a].lineage.cmp(&placed[b].lineage));
        let base = graph.name(orig);
        if copies.len() == 1 {
            final_name[copies[0]] = base.to_owned();
        } else {
            for (k, &c) in copies.iter().enumerate() {
                final_name[c] = format!("{base}#{k}");
            }
        }
    }
    let name_of_work: HashMap<usize, usize> =
        placed.iter().enumerate().map(|(i, p)| (p.work, i)).collect();
    let specs: Vec<NodeSpec> = placed
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let w = &work[p.work];
            NodeSpec {
                name: final_name[i].clone(),
                kind: graph.node(w.orig).kind.clone(),
                inputs: w
                    .inputs
                    .iter()
                    .map(|inp| final_name[name_of_work[inp]].clone())
                    .collect(),
            }
        })
        .collect();
    let root_name = final_name[name_of_work[&root]].clone();
    // Build in a deterministic order so equal trees give equal graphs.
    let mut specs = specs;
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    let tree = Graph::build(specs, &root_name)?;
    let mut leaf_paths: Vec<(NodeId, Path)> = placed
        .iter()
        .enumerate()
        .filter(|(_, p)| graph.is_patchable_leaf(work[p.work].orig))
        .map(|(i, p)| {
            let id = tree.id(&final_name[i]).expect("built from these names");
            (id, Path::new(p.suffix_nodes.clone(), p.suffix_ports.clone()))
        })
        .collect();
    leaf_paths.sort_by(|a, b| {
        let ka = (a.1.names(graph), a.1.ports().to_vec());
        let kb = (b.1.names(graph), b.1.ports().to_vec());
        ka.cmp(&kb)
    });
    Ok(Treeified {
        graph: tree,
        leaf_paths,
    })
}

fn strip_copy_suffix(name: &str) -> &str {
    match name.rfind('#') {
        Some(i) if name[i + 1..].chars().all(|c| c.is_ascii_digit()) => &name[..i],
        _ => name,
    }
}

/// Structural fingerprint of the computation rooted at the output, as an
/// expression over original node names and kinds. Two graphs have equal
/// canonical forms exactly when their fully expanded trees coincide.
pub fn canonical_form(graph: &Graph) -> String {
    fn go(graph: &Graph, id: NodeId, memo: &mut HashMap<NodeId, String>) -> String {
        if let Some(s) = memo.get(&id) {
            return s.clone();
        }
        let node = graph.node(id);
        let mut s = format!("{}:{}", strip_copy_suffix(&node.name), node.kind.keyword());
        if !node.inputs.is_empty() {
            let args: Vec<String> = node.inputs.iter().map(|&i| go(graph, i, memo)).collect();
            s.push('(');
            s.push_str(&args.join(","));
            s.push(')');
        }
        memo.insert(id, s.clone());
        s
    }
    go(graph, graph.output(), &mut HashMap::new())
}
