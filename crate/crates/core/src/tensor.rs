// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f64` tensors and the handful of kernels needed to run
//! attention-only transformers and the metric suite.
//!
//! Tensors are immutable values. Every public operation returns a fresh
//! tensor whose entries are finite, or an error.

use std::fmt;

use crate::error::{Error, Result};

/// Probability floor applied to the second argument of [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Tolerance used when checking that an input is a probability distribution.
const DISTRIBUTION_TOL: f64 = 1e-9;

/// Value written into masked attention scores. Finite, so the tensor
/// invariant holds, but far enough below any real score that `exp`
/// underflows to exactly zero after max-subtraction.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_owned()))
    }
}

impl Tensor {
    /// Build a tensor, validating the shape and finiteness of `data`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape_anon(format!(
                "dimension sizes must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape_anon(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor { shape, data })
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>, op: &str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(&data, op)?;
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.last_dim();
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64, op: &str) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_parts(self.shape.clone(), data, op)
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape_anon(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_parts(self.shape.clone(), data, op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.map(|v| v * factor, "scale")
    }

    /// Left-to-right sum of equally shaped tensors.
    pub fn sum_all(terms: &[&Tensor]) -> Result<Self> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Argument("sum of zero tensors".into()))?;
        let mut data = first.data.clone();
        for t in rest {
            if t.shape != first.shape {
                return Err(Error::shape_anon(format!(
                    "sum: shapes {:?} and {:?} differ",
                    first.shape, t.shape
                )));
            }
            for (acc, &v) in data.iter_mut().zip(&t.data) {
                *acc += v;
            }
        }
        Tensor::from_parts(first.shape.clone(), data, "sum")
    }

    /// Matrix product. The left operand may be a vector (treated as one row),
    /// the right operand must be a matrix.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (m, k, lhs_vector) = match self.shape.as_slice() {
            &[k] => (1, k, true),
            &[m, k] => (m, k, false),
            other => {
                return Err(Error::shape_anon(format!(
                    "matmul: left operand must have rank 1 or 2, got {other:?}"
                )))
            }
        };
        let (k2, n) = match rhs.shape.as_slice() {
            &[k2, n] => (k2, n),
            other => {
                return Err(Error::shape_anon(format!(
                    "matmul: right operand must be a matrix, got {other:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::shape_anon(format!(
                "matmul: inner dimensions differ ({:?} x {:?})",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        let shape = if lhs_vector { vec![n] } else { vec![m, n] };
        Tensor::from_parts(shape, out, "matmul")
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = match self.shape.as_slice() {
            &[r, c] => (r, c),
            other => {
                return Err(Error::shape_anon(format!(
                    "transpose needs a matrix, got {other:?}"
                )))
            }
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_parts(vec![c, r], out, "transpose")
    }

    /// (outer, len, inner) strides for iterating slices along `axis`.
    fn axis_layout(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::Argument(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.axis_layout(axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let max = (0..len)
                    .map(|t| self.data[idx(t)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (self.data[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[idx(t)] /= total;
                }
            }
        }
        Tensor::from_parts(self.shape.clone(), out, "softmax")
    }

    /// Normalize each last-axis slice to zero mean and unit population
    /// variance, then apply `gain` and `bias` (both of last-axis length).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Self> {
        let d = self.last_dim();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape_anon(format!(
                "layer_norm: gain {:?} / bias {:?} must both be [{d}]",
                gain.shape, bias.shape
            )));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Argument(format!("layer_norm epsilon {eps} invalid")));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks(d) {
            let mean = chunk.iter().sum::<f64>() / d as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            for (t, &v) in chunk.iter().enumerate() {
                let centered = v - mean;
                let normed = if denom > 0.0 { centered / denom } else { 0.0 };
                out.push(normed * gain.data[t] + bias.data[t]);
            }
        }
        Tensor::from_parts(self.shape.clone(), out, "layer_norm")
    }

    /// Gather rows of `self` (a `[vocab, d]` table) by the integer ids in `ids`.
    pub fn embed_lookup(&self, ids: &Tensor) -> Result<Self> {
        let (vocab, d) = match self.shape.as_slice() {
            &[v, d] => (v, d),
            other => {
                return Err(Error::shape_anon(format!(
                    "embedding table must be a matrix, got {other:?}"
                )))
            }
        };
        let tokens = token_ids(ids, vocab)?;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for t in &tokens {
            out.extend_from_slice(&self.data[t * d..(t + 1) * d]);
        }
        let mut shape = ids.shape.clone();
        shape.push(d);
        Tensor::from_parts(shape, out, "embed_lookup")
    }

    pub fn slice(&self, axis: usize, start: usize, stop: usize) -> Result<Self> {
        let (outer, len, inner) = self.axis_layout(axis)?;
        if start >= stop || stop > len {
            return Err(Error::Argument(format!(
                "slice [{start}, {stop}) invalid for axis of size {len}"
            )));
        }
        let width = stop - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&self.data[base + start * inner..base + stop * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Tensor::from_parts(shape, out, "slice")
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::Argument(format!(
                "concat axis {axis} out of range for shape {:?}",
                first.shape
            )));
        }
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(Error::shape_anon(format!(
                    "concat: shape {:?} incompatible with {:?} along axis {axis}",
                    p.shape, first.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_len: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis];
                out.extend_from_slice(&p.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_len;
        Tensor::from_parts(shape, out, "concat")
    }

    /// Replace entries above the diagonal of a `[queries, keys]` score matrix
    /// with [`MASK_VALUE`].
    pub fn causal_mask(&self) -> Result<Self> {
        let (r, c) = match self.shape.as_slice() {
            &[r, c] => (r, c),
            other => {
                return Err(Error::shape_anon(format!(
                    "causal mask needs a matrix, got {other:?}"
                )))
            }
        };
        let mut out = self.data.clone();
        for i in 0..r {
            for j in (i + 1)..c {
                out[i * c + j] = MASK_VALUE;
            }
        }
        Tensor::from_parts(self.shape.clone(), out, "causal_mask")
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape_anon(format!(
                "compare: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Mean absolute elementwise difference. Shapes must match.
    pub fn mean_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape_anon(format!(
                "compare: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(total / self.data.len() as f64)
    }
}

/// Interpret a tensor of non-negative integral values as token ids below `vocab`.
pub fn token_ids(ids: &Tensor, vocab: usize) -> Result<Vec<usize>> {
    ids.data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < vocab {
                Ok(v as usize)
            } else {
                Err(Error::Argument(format!(
                    "token id {v} is not an integer in [0, {vocab})"
                )))
            }
        })
        .collect()
}

/// Per-position cross-entropy of `labels` under `logits` (`[positions, vocab]`).
pub fn cross_entropy_per_token(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, vocab) = match logits.shape.as_slice() {
        &[n, v] => (n, v),
        &[v] => (1, v),
        other => {
            return Err(Error::shape_anon(format!(
                "cross entropy: logits must be [positions, vocab], got {other:?}"
            )))
        }
    };
    if labels.len() != n {
        return Err(Error::shape_anon(format!(
            "cross entropy: {} labels for {n} positions",
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (pos, &label) in labels.iter().enumerate() {
        if label >= vocab {
            return Err(Error::Argument(format!(
                "label {label} out of range for vocab {vocab}"
            )));
        }
        let row = &logits.data[pos * vocab..(pos + 1) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.push(lse - row[label]);
    }
    Tensor::from_parts(vec![n], out, "cross_entropy")
}

fn check_distribution(t: &Tensor, which: &str) -> Result<()> {
    if t.data.iter().any(|&v| v < 0.0) {
        return Err(Error::Argument(format!("{which} has negative entries")));
    }
    let total: f64 = t.data.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::Argument(format!(
            "{which} sums to {total}, not a distribution"
        )));
    }
    Ok(())
}

/// `KL(p || q)` over the flattened entries. Terms with `p = 0` contribute
/// nothing; `q` is floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape != q.shape {
        return Err(Error::shape_anon(format!(
            "kl: shapes {:?} and {:?} differ",
            p.shape, q.shape
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(p.data
        .iter()
        .zip(&q.data)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_input() {
        let s = v(&[0.0, 0.0, 0.0]).softmax(0).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        // exp(k) / (e + e^2 + e^3), evaluated at 40 digits.
        let expected = [
            0.090030573170380457998,
            0.24472847105479765247,
            0.66524095577482188953,
        ];
        let s = v(&[1.0, 2.0, 3.0]).softmax(0).unwrap();
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(matches!(v(&[1.0]).softmax(1), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_inner_axis() {
        let m = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = m.softmax(0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let ones = Tensor::filled(&[4], 1.0).unwrap();
        let zeros = Tensor::zeros(&[4]);
        let out = Tensor::filled(&[4], 3.0)
            .unwrap()
            .layer_norm(&ones, &zeros, LAYER_NORM_EPS)
            .unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn layer_norm_already_normalized() {
        let ones = Tensor::filled(&[2], 1.0).unwrap();
        let zeros = Tensor::zeros(&[2]);
        let out = v(&[1.0, -1.0]).layer_norm(&ones, &zeros, 0.0).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        // (x - 2.5) / sqrt(1.25 + 1e-5) at 40 digits.
        let expected = [
            -1.3416354199689269826,
            -0.44721180665630899419,
            0.44721180665630899419,
            1.3416354199689269826,
        ];
        let ones = Tensor::filled(&[4], 1.0).unwrap();
        let zeros = Tensor::zeros(&[4]);
        let out = v(&[1.0, 2.0, 3.0, 4.0])
            .layer_norm(&ones, &zeros, 1e-5)
            .unwrap();
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let logits = Tensor::zeros(&[3, 7]);
        let ce = cross_entropy_per_token(&logits, &[0, 3, 6]).unwrap();
        for &x in ce.data() {
            assert!((x - 7f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_entropy_saturated_is_zero() {
        let logits = Tensor::matrix(1, 3, vec![0.0, 1e4, 0.0]).unwrap();
        let ce = cross_entropy_per_token(&logits, &[1]).unwrap();
        assert!(ce.data()[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let logits = Tensor::matrix(
            3,
            5,
            vec![
                0.5, -1.25, 2.0, 0.0, 0.75, -0.3, 0.1, -2.2, 1.7, 0.4, 3.1, -0.6, 0.9, -1.4, 2.5,
            ],
        )
        .unwrap();
        // log(sum exp(row)) - row[label], evaluated at 40 digits.
        let expected = [0.52102015138107144871, 2.4885833925498284453, 1.1279466101249598673];
        let ce = cross_entropy_per_token(&logits, &[2, 0, 4]).unwrap();
        for (a, b) in ce.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy_per_token(&logits, &[3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn kl_closed_forms() {
        let p = v(&[0.3, 0.7]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let kl = kl_divergence(&v(&[1.0, 0.0]), &v(&[0.5, 0.5])).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        let kl = kl_divergence(&v(&[0.75, 0.25]), &v(&[0.5, 0.5])).unwrap();
        assert!((kl - 0.13081203594113695913).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_non_distributions() {
        assert!(kl_divergence(&v(&[0.5, 0.6]), &v(&[0.5, 0.5])).is_err());
        assert!(kl_divergence(&v(&[1.5, -0.5]), &v(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = v(&[0.9, 0.1]);
        let q = v(&[0.5, 0.5]);
        let forward = kl_divergence(&p, &q).unwrap();
        let backward = kl_divergence(&q, &p).unwrap();
        assert!((forward - backward).abs() > 1e-3);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-1.0, -1.0]);
        assert_eq!(v(&[1.0, 1.0]).matmul(&a).unwrap().shape(), &[2]);
    }

    #[test]
    fn slice_and_concat_invert() {
        let m = Tensor::matrix(3, 2, (0..6).map(f64::from).collect()).unwrap();
        let parts: Vec<Tensor> = (0..3).map(|r| m.slice(0, r, r + 1).unwrap()).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(Tensor::concat(&refs, 0).unwrap(), m);
        let cols = [m.slice(1, 0, 1).unwrap(), m.slice(1, 1, 2).unwrap()];
        assert_eq!(Tensor::concat(&[&cols[0], &cols[1]], 1).unwrap(), m);
    }

    #[test]
    fn construction_rejects_nan() {
        assert!(matches!(
            Tensor::vector(vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn embed_lookup_gathers_rows() {
        let table = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let ids = v(&[2.0, 0.0]);
        let e = table.embed_lookup(&ids).unwrap();
        assert_eq!(e.shape(), &[2, 2]);
        assert_eq!(e.data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(table.embed_lookup(&v(&[3.0])).is_err());
        assert!(table.embed_lookup(&v(&[0.5])).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let n = data.len();
            let s = Tensor::vector(data.clone()).unwrap().softmax(0).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&x| x >= 0.0));
            let shifted = Tensor::vector(data.iter().map(|x| x + 7.25).collect()).unwrap();
            let s2 = shifted.softmax(0).unwrap();
            prop_assert!(s.max_abs_diff(&s2).unwrap() < 1e-12);
            prop_assert_eq!(s.len(), n);
        }

        #[test]
        fn layer_norm_moments(data in prop::collection::vec(-10.0f64..10.0, 2..32)) {
            let d = data.len();
            let spread = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - data.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let ones = Tensor::filled(&[d], 1.0).unwrap();
            let zeros = Tensor::zeros(&[d]);
            let out = Tensor::vector(data).unwrap().layer_norm(&ones, &zeros, 0.0).unwrap();
            let mean = out.data().iter().sum::<f64>() / d as f64;
            let var = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cross_entropy_is_kl_to_one_hot(
            logits in prop::collection::vec(-20.0f64..20.0, 4),
            label in 0usize..4,
        ) {
            let l = Tensor::matrix(1, 4, logits.clone()).unwrap();
            let ce = cross_entropy_per_token(&l, &[label]).unwrap().data()[0];
            let mut one_hot = vec![0.0; 4];
            one_hot[label] = 1.0;
            let q = Tensor::vector(logits).unwrap().softmax(0).unwrap();
            let kl = kl_divergence(&Tensor::vector(one_hot).unwrap(), &q).unwrap();
            // The floor only matters when q[label] < 1e-12, i.e. ce > 27.6.
            prop_assume!(ce < 27.0);
            prop_assert!((ce - kl).abs() < 1e-9);
        }
    }

    #[test]
    fn gibbs_inequality_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut asymmetric = false;
        for _ in 0..1000 {
            let n = rng.random_range(2..8);
            let mut draw = || {
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
                let total: f64 = raw.iter().sum();
                Tensor::vector(raw.into_iter().map(|x| x / total).collect()).unwrap()
            };
            let p = draw();
            let q = draw();
            let pq = kl_divergence(&p, &q).unwrap();
            let qp = kl_divergence(&q, &p).unwrap();
            assert!(pq >= -1e-12 && qp >= -1e-12);
            asymmetric |= (pq - qp).abs() > 1e-9;
        }
        assert!(asymmetric);
    }
}
