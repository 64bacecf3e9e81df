// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small hand-built graphs and a seeded random-DAG generator.
//!
//! These back the shipped demo configs and the test suites. Parameter
//! matrices are ordinary constant nodes named `<node>.w`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Graph, GraphBuilder, NodeKind};
use crate::tensor::Tensor;

/// Weights used by the two-layer residual demo when none are given.
pub fn default_residual_weights() -> (Tensor, Tensor) {
    let w0 = Tensor::matrix(2, 2, vec![0.5, -1.0, 0.25, 2.0]).expect("static");
    let w1 = Tensor::matrix(2, 2, vec![1.5, 0.0, -0.75, 0.5]).expect("static");
    (w0, w1)
}

/// The two-layer residual network `Y = f1(A) + A`, `A = f0(x) + x`, with
/// `f0(v) = v W0` and `f1(v) = v W1`. Input `x` has shape `[d]`.
pub fn two_layer_residual(w0: &Tensor, w1: &Tensor) -> Result<Graph> {
    let d = w0.shape()[0];
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[d])?;
    let w0 = b.constant("f0.w", w0.clone())?;
    let w1 = b.constant("f1.w", w1.clone())?;
    let f0 = b.add("f0", NodeKind::MatMul, &[x, w0])?;
    let a = b.add("A", NodeKind::Add, &[f0, x])?;
    let f1 = b.add("f1", NodeKind::MatMul, &[a, w1])?;
    let y = b.add("Y", NodeKind::Add, &[f1, a])?;
    b.finish(y)
}

/// Three branches computing the same linear function, averaged:
/// `V = (f(x) + f(x) + f(x)) / 3` with `f(v) = v W`.
pub fn ensemble(w: &Tensor) -> Result<Graph> {
    let d = w.shape()[0];
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[d])?;
    let mut branches = Vec::new();
    for i in 0..3 {
        let wi = b.constant(&format!("f{i}.w"), w.clone())?;
        branches.push(b.add(format!("f{i}"), NodeKind::MatMul, &[x, wi])?);
    }
    let total = b.add("V.sum", NodeKind::Sum, &branches)?;
    let v = b.add("V", NodeKind::ScalarMul(1.0 / 3.0), &[total])?;
    b.finish(v)
}

/// `Y = x + f0(x)` with `f0(v) = factor * v`. With `factor = -1` the two
/// paths cancel exactly.
pub fn cancellation(dim: usize, factor: f64) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[dim])?;
    let f0 = b.add("f0", NodeKind::ScalarMul(factor), &[x])?;
    let y = b.add("Y", NodeKind::Add, &[x, f0])?;
    b.finish(y)
}

/// `layers` residual blocks `r_{l+1} = r_l + f_l(r_l)`, each `f_l` a
/// matrix product with a random weight. Has `2^layers` paths.
pub fn residual_stack(layers: usize, dim: usize, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let mut r = b.input("x", &[dim])?;
    for l in 0..layers {
        let w = random_tensor(&mut rng, &[dim, dim], 0.5)?;
        let wid = b.constant(&format!("f{l}.w"), w)?;
        let f = b.add(format!("f{l}"), NodeKind::MatMul, &[r, wid])?;
        r = b.add(format!("r{}", l + 1), NodeKind::Add, &[r, f])?;
    }
    b.finish(r)
}

/// A chain `x -> f -> y` of two scalings.
pub fn chain() -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[2])?;
    let f = b.add("f", NodeKind::ScalarMul(2.0), &[x])?;
    let y = b.add("y", NodeKind::ScalarMul(-0.5), &[f])?;
    b.finish(y)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// A random DAG with `ops` computational nodes over one or two inputs of
/// shape `[dim]`. Uses additions (including repeated operands), sums,
/// scalings, matrix products, softmax and layer norm, so path structure and
/// nonlinearity are both exercised. The output is the last node.
pub fn random_dag(seed: u64, ops: usize, dim: usize) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let inputs = if rng.random_bool(0.5) { 2 } else { 1 };
    let mut values = Vec::new();
    for i in 0..inputs {
        values.push(b.input(&format!("x{i}"), &[dim])?);
    }
    let gain = b.constant("ln.gain", random_tensor(&mut rng, &[dim], 1.0)?)?;
    let bias = b.constant("ln.bias", random_tensor(&mut rng, &[dim], 1.0)?)?;
    for k in 0..ops {
        let name = format!("n{k}");
        // Prefer recent values so the output depends on most of the graph.
        let pick = |rng: &mut ChaCha8Rng, values: &[_]| {
            let lo = values.len().saturating_sub(4);
            values[rng.random_range(lo..values.len())]
        };
        let a = pick(&mut rng, &values);
        let id = match rng.random_range(0..7) {
            0 | 1 => {
                let c = pick(&mut rng, &values);
                b.add(name, NodeKind::Add, &[a, c])?
            }
            2 => {
                let c = values[rng.random_range(0..values.len())];
                let e = pick(&mut rng, &values);
                b.add(name, NodeKind::Sum, &[a, c, e])?
            }
            3 => {
                let w = random_tensor(&mut rng, &[dim, dim], 0.6)?;
                let wid = b.constant(&format!("{name}.w"), w)?;
                b.add(name, NodeKind::MatMul, &[a, wid])?
            }
            4 => b.add(name, NodeKind::ScalarMul(rng.random_range(-1.5..1.5)), &[a])?,
            5 => b.add(name, NodeKind::Softmax { axis: 0 }, &[a])?,
            _ => b.add(name, NodeKind::LayerNorm { eps: 1e-5 }, &[a, gain, bias])?,
        };
        values.push(id);
    }
    let out = *values.last().expect("at least one value");
    b.finish(out)
}
