// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fixtures::{chain, default_residual_weights, random_dag, random_tensor, residual_stack, two_layer_residual};
use crate::graph::{evaluate, Binding};

fn residual() -> Graph {
    let (w0, w1) = default_residual_weights();
    two_layer_residual(&w0, &w1).unwrap()
}

/// Path count by recursion from the output over inputs; shares no code with
/// the consumer-walk enumerator.
fn brute_force_count(graph: &Graph) -> u128 {
    fn go(graph: &Graph, id: NodeId) -> u128 {
        if graph.is_patchable_leaf(id) {
            return 1;
        }
        graph.node(id).inputs.iter().map(|&i| go(graph, i)).sum()
    }
    go(graph, graph.output())
}

fn random_binding(graph: &Graph, seed: u64) -> Binding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Binding::new();
    for leaf in graph.input_leaves() {
        let shape = graph.node(leaf).shape.clone();
        b.insert(graph.name(leaf), random_tensor(&mut rng, &shape, 1.0).unwrap());
    }
    b
}

fn resolve(text: &str) -> ResolvedPattern {
    Pattern::parse(text).unwrap().resolve(&PositionVars::new()).unwrap()
}

#[test]
fn residual_has_four_paths() {
    let g = residual();
    let paths = enumerate_paths(&g).unwrap();
    assert_eq!(paths.len(), 4);
    let shown: Vec<String> = paths.iter().map(|p| p.display(&g).to_string()).collect();
    assert_eq!(
        shown,
        [
            "x → A → Y",
            "x → A → f1 → Y",
            "x → f0 → A → Y",
            "x → f0 → A → f1 → Y",
        ]
    );
    for p in &paths {
        p.validate(&g).unwrap();
    }
}

#[test]
fn chain_has_one_path() {
    assert_eq!(enumerate_paths(&chain().unwrap()).unwrap().len(), 1);
}

#[test]
fn residual_stack_has_two_to_the_l_paths() {
    for layers in 0..=10 {
        let g = residual_stack(layers, 2, layers as u64).unwrap();
        let n = enumerate_paths(&g).unwrap().len() as u128;
        assert_eq!(n, 1u128 << layers);
        assert_eq!(n, brute_force_count(&g));
        assert_eq!(count_paths(&g), n);
    }
}

#[test]
fn repeated_operand_gives_distinct_paths() {
    let mut b = crate::graph::GraphBuilder::new();
    let x = b.input("x", &[1]).unwrap();
    let y = b.add("y", crate::graph::NodeKind::Add, &[x, x]).unwrap();
    let g = b.finish(y).unwrap();
    let paths = enumerate_paths(&g).unwrap();
    assert_eq!(paths.len(), 2);
    assert_eq!(paths.paths()[0].ports(), &[0]);
    assert_eq!(paths.paths()[1].ports(), &[1]);
}

#[test]
fn capacity_error_above_cap() {
    let g = residual_stack(12, 2, 0).unwrap();
    match enumerate_paths_capped(&g, 1000) {
        Err(Error::Capacity { count, cap }) => {
            assert_eq!(count, 4096);
            assert_eq!(cap, 1000);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn residual_treeifies_to_four_input_copies() {
    let g = residual();
    let t = treeify(&g).unwrap();
    assert_eq!(t.leaf_copy_count(), 4);
    let leaves: Vec<&str> = t.leaf_paths.iter().map(|(id, _)| t.graph.name(*id)).collect();
    assert_eq!(leaves, ["x#0", "x#1", "x#2", "x#3"]);
    let paths = enumerate_paths(&g).unwrap();
    let from_tree: Vec<Path> = t.leaf_paths.iter().map(|(_, p)| p.clone()).collect();
    assert_eq!(from_tree, paths.paths());
}

fn assert_is_tree(t: &Graph) {
    for id in t.ids() {
        if id != t.output() {
            assert_eq!(t.consumers(id).len(), 1, "{} has {} consumers", t.name(id), t.consumers(id).len());
        }
    }
}

#[test]
fn treeify_identity_on_random_dags() {
    for seed in 0..100 {
        let g = random_dag(seed, 1 + (seed as usize % 10), 3).unwrap();
        let computational = g.nodes().iter().filter(|n| !matches!(n.kind, crate::graph::NodeKind::Constant(_))).count();
        assert!(computational <= 12);
        assert!(count_paths(&g) <= 10_000);
        let t = treeify(&g).unwrap();
        assert_is_tree(&t.graph);
        assert_eq!(t.leaf_copy_count() as u128, brute_force_count(&g));
        let b = random_binding(&g, seed + 1000);
        let want = evaluate(&g, &b).unwrap();
        let got = evaluate(&t.graph, &b).unwrap();
        assert!(want.max_abs_diff(&got).unwrap() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn tree_graph_is_unchanged_by_treeify() {
    let g = chain().unwrap();
    let t = treeify(&g).unwrap();
    assert_eq!(t.graph.to_text(), g.to_text());
    assert_eq!(canonical_form(&t.graph), canonical_form(&g));
}

#[test]
fn treeify_order_does_not_matter() {
    for seed in 0..10 {
        let g = random_dag(seed, 10, 2).unwrap();
        let direct = treeify(&g).unwrap();
        let form = canonical_form(&direct.graph);
        assert_eq!(form, canonical_form(&g));
        for order in 0..20 {
            let t = treeify_in_order(&g, order).unwrap();
            assert_eq!(canonical_form(&t.graph), form);
            assert_eq!(t.graph.to_text(), direct.graph.to_text());
            assert_eq!(t.leaf_paths.len(), direct.leaf_paths.len());
        }
    }
}

#[test]
fn universal_pattern_matches_everything() {
    let g = residual();
    assert_eq!(match_pattern(&g, &resolve("x … Y")).unwrap().len(), 4);
    assert_eq!(match_pattern(&g, &resolve("…")).unwrap().len(), 4);
}

#[test]
fn explicit_pattern_matches_one_path() {
    let g = residual();
    let m = match_pattern(&g, &resolve("x → f0 → A → f1 → Y")).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m.paths()[0].names(&g), ["x", "f0", "A", "f1", "Y"]);
    assert_eq!(match_pattern(&g, &resolve("x → f1 → Y")).unwrap().len(), 0);
    assert_eq!(match_pattern(&g, &resolve("… → f* → …")).unwrap().len(), 3);
}

#[test]
fn pattern_and_complement_partition_paths() {
    let patterns = ["… → f0 → …", "x → A → …", "… → A → Y", "x → f0 → A → f1 → Y", "…"];
    for seed in 0..10 {
        let g = random_dag(seed, 10, 2).unwrap();
        let all = enumerate_paths(&g).unwrap();
        let mut extra: Vec<String> = g
            .ids()
            .filter(|&i| !g.node(i).kind.is_leaf())
            .map(|i| format!("… → {} → …", g.name(i)))
            .collect();
        extra.extend(patterns.iter().map(|s| s.to_string()));
        for text in extra {
            let p = Pattern::parse(&text).unwrap();
            let yes = match_pattern(&g, &p.resolve(&PositionVars::new()).unwrap()).unwrap();
            let no = match_pattern(&g, &p.complement().resolve(&PositionVars::new()).unwrap()).unwrap();
            assert!(yes.intersection(&no).is_empty());
            assert_eq!(yes.union(&g, &no), all);
        }
    }
}

#[test]
fn expression_selects_by_last_matching_term() {
    let g = residual();
    let e = PathExpr::parse("all; - … → f1 → …; + x → A → f1 → Y").unwrap();
    let m = match_expr(&g, &e.resolve(&PositionVars::new()).unwrap()).unwrap();
    let names: Vec<String> = m.iter().map(|p| p.display(&g).to_string()).collect();
    assert_eq!(names, ["x → A → Y", "x → A → f1 → Y", "x → f0 → A → Y"]);
}

#[test]
fn nfa_forward_and_reverse_agree() {
    let g = residual_stack(4, 2, 3).unwrap();
    let all = enumerate_paths(&g).unwrap();
    for text in ["x → … → r2 → …", "… → f1 → … → f3 → r4", "x → r1 → …", "not … → f2 → …"] {
        let p = resolve(text);
        let fwd = p.forward_nfa();
        let rev = p.reverse_nfa();
        for path in &all {
            let names = path.names(&g);
            let f = names.iter().fold(fwd.start(), |s, n| fwd.step(s, n));
            let r = names.iter().rev().fold(rev.start(), |s, n| rev.step(s, n));
            assert_eq!(fwd.accepts(f), rev.accepts(r), "{text} on {}", path.display(&g));
            assert_eq!(fwd.accepts(f) != p.is_negated(), p.matches(&names));
        }
    }
}

#[test]
fn set_operations_keep_canonical_order() {
    let g = residual();
    let all = enumerate_paths(&g).unwrap();
    let a = match_pattern(&g, &resolve("… → f0 → …")).unwrap();
    let b = match_pattern(&g, &resolve("… → f1 → …")).unwrap();
    let u = a.union(&g, &b);
    assert_eq!(u.len(), 3);
    assert_eq!(all.difference(&u).len(), 1);
    assert_eq!(a.intersection(&b).len(), 1);
    let mut seen = HashMap::new();
    for (k, p) in all.iter().enumerate() {
        seen.insert(p.clone(), k);
    }
    let ranks: Vec<usize> = u.iter().map(|p| seen[p]).collect();
    assert!(ranks.windows(2).all(|w| w[0] < w[1]));
}
