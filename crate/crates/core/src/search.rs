// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy head ranking.
//!
//! Each head is scored once, by the average unexplained effect of marking
//! every path through its output unimportant. Heads are then added in
//! descending score order; step `k` of the curve keeps the top `k` heads
//! and marks every path through any other head unimportant.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::intervene::{Dissimilarity, Hypothesis, Important, SamplePair};
use crate::metrics::{aue, ate, evaluate_pairs, proportion_explained};
use crate::models::head_output_node;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    /// `"L.H"`.
    pub head: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub aue: f64,
    pub proportion_explained: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyResult {
    pub ate: f64,
    /// Heads in rank order.
    pub ranking: Vec<HeadScore>,
    /// `k = 0..=heads`.
    pub curve: Vec<CurvePoint>,
}

fn layer_head(label: &str) -> (usize, usize) {
    let (l, h) = label.split_once('.').unwrap_or((label, ""));
    (l.parse().unwrap_or(usize::MAX), h.parse().unwrap_or(usize::MAX))
}

fn aue_avoiding(graph: &Arc<Graph>, nodes: Vec<String>, delta: Dissimilarity, pairs: &[SamplePair]) -> Result<f64> {
    let h = Hypothesis::new(graph.clone(), Important::AvoidingNodes(nodes), delta)?;
    Ok(aue(&evaluate_pairs(&h, pairs, None)?))
}

/// Score, rank and sweep `heads` (labels `"L.H"`). Ties in score go to the
/// smaller `(layer, head)`.
pub fn greedy_head_ranking(
    graph: &Arc<Graph>,
    heads: &[String],
    pairs: &[SamplePair],
    delta: Dissimilarity,
) -> Result<GreedyResult> {
    if pairs.is_empty() {
        return Err(Error::Argument("greedy search needs at least one pair".into()));
    }
    let nodes: Vec<String> = heads.iter().map(|h| head_output_node(h)).collect::<Result<_>>()?;
    let scores: Vec<f64> = nodes
        .par_iter()
        .map(|n| aue_avoiding(graph, vec![n.clone()], delta, pairs))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..heads.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(layer_head(&heads[a]).cmp(&layer_head(&heads[b])))
    });
    let all = Hypothesis::new(graph.clone(), Important::Expr(crate::paths::PathExpr::none()), delta)?;
    let ate = ate(&evaluate_pairs(&all, pairs, None)?);
    let curve: Vec<CurvePoint> = (0..=heads.len())
        .into_par_iter()
        .map(|k| {
            let dropped: Vec<String> = order[k..].iter().map(|&i| nodes[i].clone()).collect();
            let a = aue_avoiding(graph, dropped, delta, pairs)?;
            Ok(CurvePoint {
                k,
                aue: a,
                proportion_explained: proportion_explained(a, ate).ok(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(GreedyResult {
        ate,
        ranking: order
            .iter()
            .map(|&i| HeadScore {
                head: heads[i].clone(),
                score: scores[i],
            })
            .collect(),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_induction_sequences, InductionSpec};
    use crate::intervene::{CounterfactualStrategy, Example, Positions, Sampler};
    use crate::models::{build_transformer_graph, construct_induction_model, GraphOptions, OutputMode};

    #[test]
    fn recovers_the_constructed_heads() {
        let (cfg, w) = construct_induction_model(16, 10, 40.0).unwrap();
        let g = Arc::new(
            build_transformer_graph(
                &cfg,
                &w,
                GraphOptions {
                    output: OutputMode::Logits,
                    ..GraphOptions::default()
                },
            )
            .unwrap(),
        );
        let seqs = gen_induction_sequences(&InductionSpec {
            count: 40,
            length: 10,
            vocab: 16,
            common: 6,
            ngram: 1,
            seed: 2,
        })
        .unwrap();
        let refs: Vec<Example> = seqs
            .iter()
            .map(|s| s.to_example(&cfg, &w, Default::default()).unwrap())
            .collect();
        let pairs = Sampler::new(&g, &refs, CounterfactualStrategy::Resample)
            .unwrap()
            .sample_pairs(30, 1)
            .unwrap();
        let delta = Dissimilarity::Kl {
            positions: Positions::Last,
        };
        let r = greedy_head_ranking(&g, &cfg.head_labels(), &pairs, delta).unwrap();
        let top: Vec<&str> = r.ranking[..2].iter().map(|s| s.head.as_str()).collect();
        assert!(top.contains(&"0.0") && top.contains(&"1.5"), "{top:?}");
        assert!(r.ranking[2..].iter().all(|s| s.score == 0.0));
        // Zero-score heads keep (layer, head) order.
        assert_eq!(r.ranking[2].head, "0.1");
        assert_eq!(r.curve.len(), 17);
        assert_eq!(r.curve[16].proportion_explained, Some(100.0));
        assert!(r.curve[0].proportion_explained.unwrap().abs() < 1e-9);
        assert!(r.curve[2].proportion_explained.unwrap() >= 95.0);
        let again = greedy_head_ranking(&g, &cfg.head_labels(), &pairs, delta).unwrap();
        assert_eq!(again, r);
    }
}
