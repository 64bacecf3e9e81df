// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashMap};

use super::*;
use crate::fixtures::{default_residual_weights, random_dag, random_tensor, two_layer_residual};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn residual() -> Graph {
    let (w0, w1) = default_residual_weights();
    two_layer_residual(&w0, &w1).unwrap()
}

fn x(data: &[f64]) -> Binding {
    Binding::new().with("x", Tensor::vector(data.to_vec()).unwrap())
}

#[test]
fn residual_has_expected_structure() {
    let g = residual();
    let compute: Vec<&str> = g
        .nodes()
        .iter()
        .filter(|n| !matches!(n.kind, NodeKind::Constant(_)))
        .map(|n| n.name.as_str())
        .collect();
    assert_eq!(compute, ["x", "f0", "A", "f1", "Y"]);
    assert_eq!(g.name(g.output()), "Y");
    assert_eq!(g.input_leaves(), vec![g.id("x").unwrap()]);
}

#[test]
fn single_leaf_graph_outputs_its_leaf() {
    let g = Graph::build(
        vec![NodeSpec::new(
            "x",
            NodeKind::Input {
                shape: vec![3],
                domain: InputDomain::Real,
            },
            &[],
        )],
        "x",
    )
    .unwrap();
    assert_eq!(g.len(), 1);
    let b = x(&[1.0, -2.0, 0.5]);
    assert_eq!(evaluate(&g, &b).unwrap().data(), &[1.0, -2.0, 0.5]);
}

#[test]
fn matmul_inner_dimension_mismatch_names_the_node() {
    let mut b = GraphBuilder::new();
    let a = b.constant("a", Tensor::zeros(&[2, 3])).unwrap();
    let c = b.constant("c", Tensor::zeros(&[2, 3])).unwrap();
    match b.add("prod", NodeKind::MatMul, &[a, c]) {
        Err(Error::Shape { node: Some(n), .. }) => assert_eq!(n, "prod"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn residual_matches_closed_form() {
    let (w0, w1) = default_residual_weights();
    let g = residual();
    for v in [[1.0, 0.0], [0.3, -1.7], [-2.0, 4.5]] {
        let xv = Tensor::vector(v.to_vec()).unwrap();
        let f0 = xv.matmul(&w0).unwrap();
        let a = f0.add(&xv).unwrap();
        let expected = a.matmul(&w1).unwrap().add(&a).unwrap();
        assert_eq!(evaluate(&g, &x(&v)).unwrap(), expected);
    }
}

#[test]
fn shared_node_is_computed_once() {
    let g = residual();
    let b = x(&[1.0, 0.0]);
    let mut ev = Evaluator::new(&g, &[&b]);
    ev.output_plain(REFERENCE).unwrap();
    for name in ["f0", "A", "f1", "Y"] {
        assert_eq!(ev.stats().count(g.id(name).unwrap()), 1, "{name}");
    }
    // Inputs run before consumers.
    let order = &ev.stats().order;
    for (k, id) in order.iter().enumerate() {
        for inp in &g.node(*id).inputs {
            if let Some(pos) = order.iter().position(|o| o == inp) {
                assert!(pos < k);
            }
        }
    }
}

#[test]
fn evaluation_is_repeatable_bit_for_bit() {
    for seed in 0..20 {
        let g = random_dag(seed, 10, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Binding::new();
        for leaf in g.input_leaves() {
            b.insert(g.name(leaf), random_tensor(&mut rng, &[3], 1.0).unwrap());
        }
        let first = evaluate(&g, &b).unwrap();
        let second = evaluate(&g, &b).unwrap();
        assert_eq!(first.data(), second.data());
    }
}

#[test]
fn dead_node_elimination_is_exact() {
    let mut b = GraphBuilder::new();
    let xi = b.input("x", &[2]).unwrap();
    let dead = b.add("dead", NodeKind::ScalarMul(3.0), &[xi]).unwrap();
    let _ = b.add("dead2", NodeKind::Softmax { axis: 0 }, &[dead]).unwrap();
    let y = b.add("y", NodeKind::Add, &[xi, xi]).unwrap();
    let g = b.finish(y).unwrap();
    assert_eq!(g.dead_nodes().len(), 2);
    let pruned = g.eliminate_dead();
    assert_eq!(pruned.len(), 2);
    let bind = x(&[0.25, -3.0]);
    assert_eq!(evaluate(&g, &bind).unwrap(), evaluate(&pruned, &bind).unwrap());
}

#[test]
fn unbound_leaf_is_a_binding_error() {
    let g = residual();
    assert!(matches!(evaluate(&g, &Binding::new()), Err(Error::Binding(_))));
    let wrong = Binding::new().with("x", Tensor::vector(vec![1.0; 3]).unwrap());
    assert!(matches!(evaluate(&g, &wrong), Err(Error::Binding(_))));
}

#[test]
fn cycles_and_dangling_names_are_structural_errors() {
    let specs = vec![
        NodeSpec::new("a", NodeKind::ScalarMul(1.0), &["b"]),
        NodeSpec::new("b", NodeKind::ScalarMul(1.0), &["a"]),
    ];
    assert!(matches!(Graph::build(specs, "a"), Err(Error::Structural(_))));
    let specs = vec![NodeSpec::new("a", NodeKind::ScalarMul(1.0), &["ghost"])];
    assert!(matches!(Graph::build(specs, "a"), Err(Error::Structural(_))));
    let specs = vec![NodeSpec::new("a b", NodeKind::Input { shape: vec![1], domain: InputDomain::Real }, &[])];
    assert!(matches!(Graph::build(specs, "a b"), Err(Error::Structural(_))));
}

#[test]
fn build_accepts_specs_in_any_order() {
    let g = residual();
    let mut specs = g.to_specs();
    specs.reverse();
    let h = Graph::build(specs, "Y").unwrap();
    let b = x(&[0.5, 2.0]);
    assert_eq!(evaluate(&g, &b).unwrap(), evaluate(&h, &b).unwrap());
}

#[test]
fn text_round_trip_is_exact() {
    for seed in 0..10 {
        let g = random_dag(seed, 12, 3).unwrap();
        let text = g.to_text();
        let h = Graph::from_text(&text, None).unwrap();
        assert_eq!(text, h.to_text());
        let mut rng = ChaCha8Rng::seed_from_u64(99 + seed);
        let mut b = Binding::new();
        for leaf in g.input_leaves() {
            b.insert(g.name(leaf), random_tensor(&mut rng, &[3], 1.0).unwrap());
        }
        assert_eq!(evaluate(&g, &b).unwrap().data(), evaluate(&h, &b).unwrap().data());
    }
}

#[test]
fn text_format_reads_params_and_reports_lines() {
    let text = "pathpatch-graph 1\n# demo\nnode x input shape=2\nnode W param key=w\nnode y matmul x W\noutput y\n";
    assert!(matches!(Graph::from_text(text, None), Err(Error::Format(_))));
    let mut params = BTreeMap::new();
    params.insert("w".to_owned(), Tensor::identity(2));
    let g = Graph::from_text(text, Some(&params)).unwrap();
    assert_eq!(evaluate(&g, &x(&[3.0, 4.0])).unwrap().data(), &[3.0, 4.0]);
    match Graph::from_text("pathpatch-graph 1\nnode x bogus\noutput x\n", None) {
        Err(Error::Format(m)) => assert!(m.contains("line 2"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(Graph::from_text("pathpatch-graph 9\n", None), Err(Error::Format(_))));
}

#[test]
fn overrides_replace_node_values() {
    let g = residual();
    let b = x(&[1.0, 1.0]);
    let mut ov = HashMap::new();
    ov.insert(g.id("f1").unwrap(), Tensor::zeros(&[2]));
    let out = evaluate_with_overrides(&g, &b, &ov).unwrap();
    let a = evaluate(&g.with_output("A").unwrap(), &b).unwrap();
    assert_eq!(out, a);
}

#[test]
fn routes_canonicalize() {
    let mut arena = RouteArena::new();
    let any = arena.any();
    let r = arena.uniform(REFERENCE);
    let c = arena.uniform(COUNTERFACTUAL);
    assert_eq!(arena.split(vec![r, r]), r);
    assert_eq!(arena.split(vec![any, c]), c);
    assert_eq!(arena.split(vec![any, any]), any);
    let mixed = arena.split(vec![r, c]);
    assert_eq!(arena.split(vec![r, c]), mixed);
    assert!(matches!(arena.get(mixed), Route::Split(_)));
}

#[test]
fn binding_resolves_positions_and_copies() {
    let tok = Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap();
    let b = Binding::new().with("tok", tok);
    assert_eq!(b.resolve("tok[1]").unwrap().data(), &[5.0]);
    assert_eq!(b.resolve("tok#3").unwrap().data(), &[4.0, 5.0, 6.0]);
    assert_eq!(b.resolve("tok[2]#0").unwrap().data(), &[6.0]);
    assert!(b.resolve("tok[3]").is_err());
    assert!(b.resolve("other").is_err());
}
