// SPDX-License-Identifier: MIT OR Apache-2.0

//! Effect sizes computed from patched evaluations.
//!
//! Per-pair quantities live in [`PairRecord`]; every aggregate in
//! [`Summary`] is a pure function of those records, summed in pair order,
//! so a report can be re-derived from its own log.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Binding, Evaluator, Graph, NodeKind, RouteArena, REFERENCE};
use crate::intervene::{evaluate_pair, Dissimilarity, Example, Hypothesis, Positions, SamplePair};
use crate::tensor::{token_ids, Tensor};

/// Everything measured on one `(x_r, x_c)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: usize,
    pub reference_index: usize,
    pub counterfactual_index: Option<usize>,
    /// `δ(G(x_r), G_H(x_r, x_c))`.
    pub unexplained: f64,
    /// `δ(G(x_r), G(x_c))`.
    pub total: f64,
    /// Losses at the scored positions, present when the output is a loss.
    pub loss_reference: Option<f64>,
    pub loss_patched: Option<f64>,
    pub loss_counterfactual: Option<f64>,
    /// Loss of a uniform prediction over the vocabulary.
    pub loss_uniform: Option<f64>,
    /// Loss of predicting the reference set's label frequencies.
    pub loss_class_frequency: Option<f64>,
}

/// Positions over which per-pair losses are averaged.
pub fn loss_positions(dissimilarity: &Dissimilarity) -> Positions {
    match dissimilarity {
        Dissimilarity::LossAbsoluteDifference { positions } | Dissimilarity::Kl { positions } => *positions,
        Dissimilarity::AbsoluteDifference => Positions::All,
    }
}

fn mean_at(values: &[f64], positions: Positions) -> f64 {
    match positions {
        Positions::All => values.iter().sum::<f64>() / values.len() as f64,
        Positions::Last => values[values.len() - 1],
    }
}

/// Label distribution of a reference set, for the class-frequency baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassFrequencies {
    pub probabilities: Vec<f64>,
}

impl ClassFrequencies {
    /// Frequencies of label ids over all scored positions of `reference`.
    pub fn from_reference(graph: &Graph, reference: &[Example], positions: Positions) -> Result<Self> {
        let (name, vocab) = labels_leaf(graph)?;
        let mut counts = vec![0u64; vocab];
        for e in reference {
            let ids = example_labels(&e.binding, &name, vocab)?;
            match positions {
                Positions::All => ids.iter().for_each(|&i| counts[i] += 1),
                Positions::Last => counts[ids[ids.len() - 1]] += 1,
            }
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Argument("no labels in reference set".into()));
        }
        Ok(ClassFrequencies {
            probabilities: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }
}

fn labels_leaf(graph: &Graph) -> Result<(String, usize)> {
    graph
        .nodes()
        .iter()
        .find_map(|n| match n.kind {
            NodeKind::Labels { vocab, .. } => Some((n.name.clone(), vocab)),
            _ => None,
        })
        .ok_or_else(|| Error::Config("graph has no labels leaf".into()))
}

fn example_labels(binding: &Binding, name: &str, vocab: usize) -> Result<Vec<usize>> {
    let t = binding
        .get(name)
        .ok_or_else(|| Error::Binding(format!("labels `{name}` are not bound")))?;
    token_ids(t, vocab)
}

/// Evaluate every pair, in parallel, returning records in pair order.
pub fn evaluate_pairs(
    hypothesis: &Hypothesis,
    pairs: &[SamplePair],
    frequencies: Option<&ClassFrequencies>,
) -> Result<Vec<PairRecord>> {
    let graph = hypothesis.graph.as_ref();
    let is_loss = matches!(graph.node(graph.output()).kind, NodeKind::CrossEntropy);
    let labels = if is_loss { Some(labels_leaf(graph)?) } else { None };
    let positions = loss_positions(&hypothesis.dissimilarity);
    pairs
        .par_iter()
        .enumerate()
        .map(|(k, pair)| {
            let out = evaluate_pair(hypothesis, &pair.reference, &pair.counterfactual)?;
            let delta = &hypothesis.dissimilarity;
            let mut record = PairRecord {
                pair: k,
                reference_index: pair.reference_index,
                counterfactual_index: pair.counterfactual_index,
                unexplained: delta.compute(&out.reference, &out.patched)?,
                total: delta.compute(&out.reference, &out.counterfactual)?,
                loss_reference: None,
                loss_patched: None,
                loss_counterfactual: None,
                loss_uniform: None,
                loss_class_frequency: None,
            };
            if let Some((name, vocab)) = &labels {
                record.loss_reference = Some(mean_at(out.reference.data(), positions));
                record.loss_patched = Some(mean_at(out.patched.data(), positions));
                record.loss_counterfactual = Some(mean_at(out.counterfactual.data(), positions));
                record.loss_uniform = Some((*vocab as f64).ln());
                if let Some(freq) = frequencies {
                    let ids = example_labels(&pair.reference.binding, name, *vocab)?;
                    let per: Vec<f64> = ids.iter().map(|&i| -freq.probabilities[i].ln()).collect();
                    record.loss_class_frequency = Some(mean_at(&per, positions));
                }
            }
            Ok(record)
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut total = 0.0;
    let mut n = 0;
    for v in values {
        total += v;
        n += 1;
    }
    (if n == 0 { f64::NAN } else { total / n as f64 }, n)
}

/// Standard error of the mean, with the `n - 1` variance estimator.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return f64::NAN;
    }
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Average unexplained effect.
pub fn aue(records: &[PairRecord]) -> f64 {
    mean(records.iter().map(|r| r.unexplained)).0
}

/// Average total effect.
pub fn ate(records: &[PairRecord]) -> f64 {
    mean(records.iter().map(|r| r.total)).0
}

/// `(1 - aue/ate) * 100`. Negative when the hypothesis does worse than
/// patching everything.
pub fn proportion_explained(aue: f64, ate: f64) -> Result<f64> {
    if ate == 0.0 || !ate.is_finite() {
        return Err(Error::UndefinedMetric(format!(
            "proportion explained needs a positive average total effect, got {ate}"
        )));
    }
    Ok((1.0 - aue / ate) * 100.0)
}

/// Difference in expected loss and its all-counterfactual baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossGap {
    /// `|E[L(G_H)] - E[L(G(x_r))]|`.
    pub value: f64,
    /// `|E[L(G(x_c))] - E[L(G(x_r))]|`.
    pub baseline: f64,
}

pub fn diff_expected_loss(records: &[PairRecord]) -> Option<LossGap> {
    let col = |f: fn(&PairRecord) -> Option<f64>| -> Option<f64> {
        let values: Option<Vec<f64>> = records.iter().map(f).collect();
        Some(mean(values?.into_iter()).0)
    };
    let reference = col(|r| r.loss_reference)?;
    let patched = col(|r| r.loss_patched)?;
    let counterfactual = col(|r| r.loss_counterfactual)?;
    Some(LossGap {
        value: (patched - reference).abs(),
        baseline: (counterfactual - reference).abs(),
    })
}

/// Proportion explained against a fixed predictor instead of `G(x_c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlternativeProportion {
    /// `E|L_baseline - L(G(x_r))|`.
    pub denominator: f64,
    /// `(1 - aue/denominator) * 100`, absent when the denominator is 0.
    pub proportion_explained: Option<f64>,
}

fn alternative(records: &[PairRecord], f: fn(&PairRecord) -> Option<f64>, aue: f64) -> Option<AlternativeProportion> {
    let gaps: Option<Vec<f64>> = records
        .iter()
        .map(|r| Some((f(r)? - r.loss_reference?).abs()))
        .collect();
    let denominator = mean(gaps?.into_iter()).0;
    Some(AlternativeProportion {
        denominator,
        proportion_explained: proportion_explained(aue, denominator).ok(),
    })
}

/// All aggregates, derived from per-pair records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub aue: f64,
    pub aue_standard_error: f64,
    pub ate: f64,
    pub ate_standard_error: f64,
    /// Absent when the average total effect is 0.
    pub proportion_explained: Option<f64>,
    pub max_unexplained: f64,
    pub diff_expected_loss: Option<LossGap>,
    pub uniform_prediction: Option<AlternativeProportion>,
    pub class_frequency: Option<AlternativeProportion>,
}

impl Summary {
    pub fn from_records(records: &[PairRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Argument("no pairs to summarize".into()));
        }
        let unexplained: Vec<f64> = records.iter().map(|r| r.unexplained).collect();
        let total: Vec<f64> = records.iter().map(|r| r.total).collect();
        let aue = aue(records);
        let ate = ate(records);
        Ok(Summary {
            samples: records.len(),
            aue,
            aue_standard_error: standard_error(&unexplained),
            ate,
            ate_standard_error: standard_error(&total),
            proportion_explained: proportion_explained(aue, ate).ok(),
            max_unexplained: unexplained.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            diff_expected_loss: diff_expected_loss(records),
            uniform_prediction: alternative(records, |r| r.loss_uniform, aue),
            class_frequency: alternative(records, |r| r.loss_class_frequency, aue),
        })
    }
}

/// Signed per-position attribution for one reference example:
/// `mean_s L_t(G_H(x_r, x_c^s)) - L_t(G(x_r))` for every position `t`.
pub fn attribution(hypothesis: &Hypothesis, x_r: &Example, counterfactuals: &[Binding]) -> Result<Vec<f64>> {
    let graph = hypothesis.graph.as_ref();
    if !matches!(graph.node(graph.output()).kind, NodeKind::CrossEntropy) {
        return Err(Error::Config("attribution needs a per-token loss output".into()));
    }
    if counterfactuals.is_empty() {
        return Err(Error::Argument("attribution needs at least one counterfactual".into()));
    }
    let mut arena = RouteArena::new();
    let route = hypothesis.route(&mut arena, &x_r.vars)?;
    let base = Evaluator::new(graph, &[&x_r.binding]).output_plain(REFERENCE)?;
    let patched: Vec<Tensor> = counterfactuals
        .par_iter()
        .map(|c| {
            let mut ev = Evaluator::new(graph, &[&x_r.binding, c]);
            Ok(ev.output_routed(&arena, route)?.as_ref().clone())
        })
        .collect::<Result<_>>()?;
    let n = base.len();
    let mut out = vec![0.0; n];
    for p in &patched {
        for (t, o) in out.iter_mut().enumerate() {
            *o += p.data()[t] - base.data()[t];
        }
    }
    let s = counterfactuals.len() as f64;
    Ok(out.into_iter().map(|v| v / s).collect())
}
