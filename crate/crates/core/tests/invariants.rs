// SPDX-License-Identifier: MIT OR Apache-2.0

//! Property tests for graph, path, rewrite, model and estimator invariants.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pathpatch::datasets::{gen_induction_sequences, InductionSpec};
use pathpatch::fixtures::random_dag;
use pathpatch::graph::{evaluate, Binding, NodeKind};
use pathpatch::intervene::{
    run_patched, CounterfactualStrategy, Dissimilarity, Example, Hypothesis, Important, Positions, Sampler,
};
use pathpatch::metrics::{aue, evaluate_pairs, standard_error};
use pathpatch::models::{
    build_transformer_graph, construct_induction_model, sequence_binding, GraphOptions, InputMode, OutputMode,
};
use pathpatch::paths::{canonical_form, enumerate_paths, treeify, treeify_in_order, PathExpr, PathSet};
use pathpatch::rewrites::{max_deviation, random_binding, RewriteSpec};
use pathpatch::search::greedy_head_ranking;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn path_count_equals_tree_leaf_copies(seed in any::<u64>(), ops in 1usize..10, dim in 1usize..4) {
        let g = random_dag(seed, ops, dim).unwrap();
        let t = treeify(&g).unwrap();
        prop_assert_eq!(enumerate_paths(&g).unwrap().len(), t.leaf_copy_count());
    }

    #[test]
    fn duplication_order_never_changes_canonical_form(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        let g = random_dag(seed, 8, 2).unwrap();
        let x = treeify_in_order(&g, a).unwrap();
        let y = treeify_in_order(&g, b).unwrap();
        prop_assert_eq!(canonical_form(&x.graph), canonical_form(&y.graph));
    }

    #[test]
    fn evaluation_is_referentially_transparent(seed in any::<u64>()) {
        let g = random_dag(seed, 9, 3).unwrap();
        let b = random_binding(&g, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(evaluate(&g, &b).unwrap(), evaluate(&g, &b).unwrap());
    }

    #[test]
    fn patched_output_equals_treeified_graph_with_per_copy_inputs(seed in any::<u64>(), mask in any::<u64>()) {
        let g = Arc::new(random_dag(seed, 8, 2).unwrap());
        let t = treeify(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(mask);
        let r = random_binding(&g, &mut rng).unwrap();
        let c = random_binding(&g, &mut rng).unwrap();
        let chosen = enumerate_paths(&g).unwrap().iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        let important = PathSet::new(&g, chosen);
        let keep = important.to_hash_set();
        let mut per_copy = Binding::new();
        for (leaf, path) in &t.leaf_paths {
            let src = if keep.contains(path) { &r } else { &c };
            per_copy.insert(t.graph.name(*leaf), src.get(g.name(path.leaf())).unwrap().clone());
        }
        let h = Hypothesis::new(g.clone(), Important::Paths(important), Dissimilarity::AbsoluteDifference).unwrap();
        let got = run_patched(&h, &Example::new(r), &c).unwrap();
        let want = evaluate(&t.graph, &per_copy).unwrap();
        prop_assert_eq!(got.data(), want.data());
    }

    #[test]
    fn rewrite_sequences_preserve_output_and_leaf_names(seed in any::<u64>(), choices in prop::collection::vec(0u8..3, 3)) {
        let g = random_dag(seed, 10, 3).unwrap();
        let compute: Vec<String> = g
            .ids()
            .filter(|&i| !g.node(i).kind.is_leaf() && g.is_live(i))
            .map(|i| g.name(i).to_owned())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = g.clone();
        for (step, choice) in choices.iter().enumerate() {
            let node = compute[rng.random_range(0..compute.len())].clone();
            let spec = match choice {
                0 => RewriteSpec::SubspaceSplit { node, rank: 1 + step % 3, seed: step as u64 },
                1 => RewriteSpec::MeanSplit { node, samples: 5, seed: step as u64 },
                _ => match g.ids().find(|&i| g.node(i).kind == NodeKind::MatMul) {
                    Some(m) => RewriteSpec::SplitLinear { node: g.name(m).into(), parts: 2, seed: step as u64 },
                    None => RewriteSpec::SubspaceSplit { node, rank: 2, seed: step as u64 },
                },
            };
            // A node that was already split by name is skipped.
            if let Ok(next) = spec.apply(&h) {
                h = next;
            }
        }
        let leaves = |g: &pathpatch::graph::Graph| -> Vec<String> {
            let mut v: Vec<String> = g.input_leaves().into_iter().map(|i| g.name(i).to_owned()).collect();
            v.sort();
            v
        };
        prop_assert_eq!(leaves(&g), leaves(&h));
        let dev = max_deviation(&g, g.name(g.output()), &h, h.name(h.output()), 20, seed).unwrap();
        prop_assert!(dev <= 3e-9, "deviation {dev:e}");
    }

    #[test]
    fn induction_generator_is_seed_deterministic(seed in any::<u64>()) {
        let spec = InductionSpec { count: 20, seed, ..InductionSpec::default() };
        prop_assert_eq!(gen_induction_sequences(&spec).unwrap(), gen_induction_sequences(&spec).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn analytic_model_is_causal(
        ids in prop::collection::vec(0usize..16, 8),
        tail in prop::collection::vec(0usize..16, 8),
        t in 0usize..7,
    ) {
        let (cfg, w) = construct_induction_model(16, 8, 40.0).unwrap();
        let g = build_transformer_graph(
            &cfg,
            &w,
            GraphOptions { output: OutputMode::Logits, ..GraphOptions::default() },
        )
        .unwrap();
        let mut changed = ids.clone();
        changed[t + 1..].copy_from_slice(&tail[t + 1..]);
        let labels = vec![0; 8];
        let a = evaluate(&g, &sequence_binding(&cfg, &w, InputMode::Tokens, &ids, &labels).unwrap()).unwrap();
        let b = evaluate(&g, &sequence_binding(&cfg, &w, InputMode::Tokens, &changed, &labels).unwrap()).unwrap();
        let keep = (t + 1) * cfg.vocab;
        prop_assert_eq!(&a.data()[..keep], &b.data()[..keep]);
    }
}

fn analytic_pairs(output: OutputMode, samples: usize, seed: u64) -> (Arc<pathpatch::graph::Graph>, Vec<pathpatch::intervene::SamplePair>) {
    let (cfg, w) = construct_induction_model(16, 8, 40.0).unwrap();
    let opts = GraphOptions { output, ..GraphOptions::default() };
    let g = Arc::new(build_transformer_graph(&cfg, &w, opts).unwrap());
    let seqs = gen_induction_sequences(&InductionSpec {
        count: 100,
        length: 8,
        vocab: 16,
        common: 8,
        seed: 3,
        ..InductionSpec::default()
    })
    .unwrap();
    let refs: Vec<Example> = seqs.iter().map(|s| s.to_example(&cfg, &w, InputMode::Tokens).unwrap()).collect();
    let pairs = Sampler::new(&g, &refs, CounterfactualStrategy::Resample)
        .unwrap()
        .sample_pairs(samples, seed)
        .unwrap();
    (g, pairs)
}

#[test]
fn quadrupling_samples_halves_the_standard_error() {
    let (g, pairs) = analytic_pairs(OutputMode::Loss, 6400, 21);
    let delta = Dissimilarity::LossAbsoluteDifference { positions: Positions::Last };
    let h = Hypothesis::new(g, Important::Expr(PathExpr::parse("all; - … → a1.h5.v → …").unwrap()), delta).unwrap();
    let records = evaluate_pairs(&h, &pairs, None).unwrap();
    let values: Vec<f64> = records.iter().map(|r| r.unexplained).collect();
    // Mean standard error over disjoint chunks of n and 4n pairs.
    let mean_se = |n: usize| {
        let chunks: Vec<f64> = values.chunks_exact(n).map(standard_error).collect();
        chunks.iter().sum::<f64>() / chunks.len() as f64
    };
    let ratio = mean_se(400) / mean_se(100);
    assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
}

#[test]
fn greedy_scores_equal_independent_single_head_aue() {
    let (g, pairs) = analytic_pairs(OutputMode::Logits, 40, 9);
    let delta = Dissimilarity::Kl { positions: Positions::Last };
    let heads: Vec<String> = ["0.0", "0.3", "1.2", "1.5"].iter().map(|s| s.to_string()).collect();
    let result = greedy_head_ranking(&g, &heads, &pairs, delta).unwrap();
    for s in &result.ranking {
        let (layer, head) = s.head.split_once('.').unwrap();
        let text = format!("all; - … → a{layer}.h{head}.o → …");
        let h = Hypothesis::new(g.clone(), Important::Expr(PathExpr::parse(&text).unwrap()), delta).unwrap();
        let independent = aue(&evaluate_pairs(&h, &pairs, None).unwrap());
        assert!((independent - s.score).abs() <= 1e-12, "{}: {} vs {independent}", s.head, s.score);
    }
}
