//! Dense row-major `f64` arrays with the handful of forward operations the
//! model needs, each paired with an explicit reverse rule.
//!
//! There is no tape. Every composite (encoder, heads, losses) calls the
//! forward functions here, keeps whatever intermediates it needs, and then
//! calls the matching `*_backward` functions in reverse order.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(repr: TensorRepr) -> Result<Self> {
        Tensor::from_vec(&repr.shape, repr.data)
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

fn as_matrix(t: &Tensor) -> (usize, usize) {
    match t.shape.len() {
        1 => (1, t.shape[0]),
        _ => (t.shape[0], t.shape[1]),
    }
}

/// `a · b` for `a: [m×n]` (or a length-`n` vector) and `b: [n×p]`.
/// A vector input produces a vector output.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = as_matrix(a);
    if b.shape.len() != 2 || b.shape[0] != n {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let p = b.shape[1];
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        let orow = &mut out[i * p..(i + 1) * p];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * p..(t + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let shape = if a.shape.len() == 1 { vec![p] } else { vec![m, p] };
    Ok(Tensor { shape, data: out })
}

/// Reverse rule for [`matmul`]: returns `(∂a, ∂b)` given `∂out`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let mut ga = Tensor::zeros(&a.shape);
    let mut gb = Tensor::zeros(&b.shape);
    matmul_backward_into(a, b, grad_out, Some(&mut ga), &mut gb);
    (ga, gb)
}

/// Accumulating variant: adds `aᵀ·∂out` into `gb` and, when requested,
/// `∂out·bᵀ` into `ga`.
pub fn matmul_backward_into(
    a: &Tensor,
    b: &Tensor,
    grad_out: &Tensor,
    ga: Option<&mut Tensor>,
    gb: &mut Tensor,
) {
    let (m, n) = as_matrix(a);
    let p = b.shape[1];
    for i in 0..m {
        let arow = &a.data[i * n..(i + 1) * n];
        let grow = &grad_out.data[i * p..(i + 1) * p];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb.data[t * p..(t + 1) * p];
            for (o, &g) in gbrow.iter_mut().zip(grow) {
                *o += av * g;
            }
        }
    }
    if let Some(ga) = ga {
        for i in 0..m {
            let grow = &grad_out.data[i * p..(i + 1) * p];
            for t in 0..n {
                let brow = &b.data[t * p..(t + 1) * p];
                let dot: f64 = grow.iter().zip(brow).map(|(g, bv)| g * bv).sum();
                ga.data[i * n + t] += dot;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// Elementwise `a + b`. `b` may also be a vector matching the last axis of
/// `a`, in which case it is broadcast over rows (a bias).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.shape.len() == 1 && b.shape[0] == a.cols() {
        let c = a.cols();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(idx, x)| x + b.data[idx % c])
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    Err(Error::Shape(format!("add {:?} + {:?}", a.shape, b.shape)))
}

/// Reverse rule for [`add`]: `∂a = ∂out`, `∂b` is `∂out` itself or its
/// column sums when `b` was broadcast.
pub fn add_backward(b_shape: &[usize], grad_out: &Tensor) -> (Tensor, Tensor) {
    let ga = grad_out.clone();
    if b_shape == grad_out.shape.as_slice() {
        return (ga, grad_out.clone());
    }
    let mut gb = Tensor::zeros(b_shape);
    let c = b_shape[0];
    for (idx, g) in grad_out.data.iter().enumerate() {
        gb.data[idx % c] += g;
    }
    (ga, gb)
}

pub fn tanh(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.tanh()).collect(),
    }
}

/// Reverse rule for [`tanh`] given its output `y`.
pub fn tanh_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        shape: y.shape.clone(),
        data: y
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(y, g)| g * (1.0 - y * y))
            .collect(),
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

/// Reverse rule for [`sigmoid`] given its output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        shape: y.shape.clone(),
        data: y
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(y, g)| g * y * (1.0 - y))
            .collect(),
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Joins vectors end to end.
pub fn concat(parts: &[&Tensor]) -> Tensor {
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
    Tensor::vector(data)
}

/// Splits the upstream gradient back into pieces of the given lengths.
pub fn concat_backward(grad_out: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let mut offset = 0;
    sizes
        .iter()
        .map(|&n| {
            let piece = Tensor::vector(grad_out.data[offset..offset + n].to_vec());
            offset += n;
            piece
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Embedding lookup and dropout
// ---------------------------------------------------------------------------

/// Gathers rows of `table: [V×d]` into an `[L×d]` tensor.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (vocab, dim) = (table.rows(), table.cols());
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        if id >= vocab {
            return Err(Error::Vocabulary(format!(
                "token id {id} outside vocabulary of size {vocab}"
            )));
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor {
        shape: vec![ids.len(), dim],
        data,
    })
}

/// Scatter-adds row gradients back into the table gradient.
pub fn embedding_backward(ids: &[usize], grad_out: &Tensor, table_grad: &mut Tensor) {
    for (r, &id) in ids.iter().enumerate() {
        let g = grad_out.row(r);
        for (dst, src) in table_grad.row_mut(id).iter_mut().zip(g) {
            *dst += src;
        }
    }
}

/// Inverted-dropout keep mask: kept entries carry `1/(1-rate)`, dropped
/// entries carry 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    scale: Vec<f64>,
}

impl DropoutMask {
    pub fn sample<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let scale = (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Self { scale }
    }

    pub fn identity(len: usize) -> Self {
        Self {
            scale: vec![1.0; len],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&self.scale).map(|(v, s)| v * s).collect(),
        }
    }

    /// The reverse rule is the same masking applied to the upstream gradient.
    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        self.apply(grad_out)
    }
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy and span pooling
// ---------------------------------------------------------------------------

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Output of [`softmax_cross_entropy`]. The gradient with respect to the
/// logits is `probs - onehot(target)`, see [`CrossEntropy::grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub target: usize,
}

impl CrossEntropy {
    pub fn grad(&self) -> Vec<f64> {
        let mut g = self.probs.clone();
        g[self.target] -= 1.0;
        g
    }
}

pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<CrossEntropy> {
    if logits.len() < 2 {
        return Err(Error::Shape(format!(
            "cross-entropy needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            len: logits.len(),
        });
    }
    let log_probs = log_softmax(logits);
    Ok(CrossEntropy {
        loss: -log_probs[target],
        probs: log_probs.iter().map(|v| v.exp()).collect(),
        target,
    })
}

/// Inclusive token span `(start, end)` into a sequence. Serialized as a
/// two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn check(&self, seq_len: usize) -> Result<()> {
        if self.end < self.start {
            return Err(Error::Span(format!(
                "reversed span ({}, {})",
                self.start, self.end
            )));
        }
        if self.end >= seq_len {
            return Err(Error::Span(format!(
                "span ({}, {}) outside sequence of length {seq_len}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(span: Span) -> Self {
        (span.start, span.end)
    }
}

/// Mean of rows `span.start..=span.end` of `[L×d]` token states.
pub fn span_mean(token_states: &Tensor, span: Span) -> Result<Tensor> {
    span.check(token_states.rows())?;
    let d = token_states.cols();
    let mut out = vec![0.0; d];
    for r in span.start..=span.end {
        for (o, v) in out.iter_mut().zip(token_states.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / span.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::vector(out))
}

/// Distributes `grad_out / |span|` to every row of the span.
pub fn span_mean_backward(grad_out: &Tensor, span: Span, states_grad: &mut Tensor) {
    let inv = 1.0 / span.len() as f64;
    for r in span.start..=span.end {
        for (dst, g) in states_grad.row_mut(r).iter_mut().zip(&grad_out.data) {
            *dst += g * inv;
        }
    }
}

// ---------------------------------------------------------------------------
// Named gradients
// ---------------------------------------------------------------------------

/// Per-parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradRecord {
    grads: BTreeMap<String, Tensor>,
}

impl GradRecord {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero gradients shaped like each `(name, parameter)` pair.
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Self {
        let grads = params
            .into_iter()
            .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// Mutable slot for `name`, created with `shape` on first use.
    pub fn slot(&mut self, name: &str, shape: &[usize]) -> &mut Tensor {
        self.grads
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape))
    }

    pub fn insert(&mut self, name: &str, grad: Tensor) {
        self.grads.insert(name.to_string(), grad);
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        self.slot(name, grad.shape()).add_assign(grad)
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.values_mut().for_each(|t| t.scale(factor));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }

    pub fn zero(&mut self) {
        self.grads.values_mut().for_each(|t| t.fill(0.0));
    }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Compares an analytic gradient with central differences.
///
/// `scalar_fn` returns the function value and its analytic gradient at the
/// given point. The result is the maximum over coordinates of
/// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
pub fn finite_diff_check<F>(mut scalar_fn: F, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    let (value, analytic) = scalar_fn(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} at base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} coordinates, params have {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut point = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + step;
        let (plus, _) = scalar_fn(&point)?;
        point[i] = orig - step;
        let (minus, _) = scalar_fn(&point)?;
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value perturbing coordinate {i}"
            )));
        }
        let central = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(central.abs()).max(1e-8);
        worst = worst.max((analytic[i] - central).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_symmetric_logits() {
        let ce = softmax_cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((ce.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(ce.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_saturated_logits_stay_finite() {
        let ce = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(ce.loss.abs() < 1e-300);
        assert!(ce.probs.iter().all(|p| p.is_finite()));
        let ce = softmax_cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((ce.loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_three_classes() {
        // Oracle: log-sum-exp of (1,2,3) evaluated directly,
        // 3 + ln(1 + e^-1 + e^-2) = 3.40760596444438.
        let ce = softmax_cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        let lse = 3.0 + (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((ce.loss - (lse - 3.0)).abs() < 1e-15);
        assert!((ce.loss - 0.40760596444438).abs() < 1e-12);
        let expected = [0.09003, 0.24473, 0.66524];
        for (p, e) in ce.probs.iter().zip(expected) {
            assert!((p - e).abs() < 1e-5, "{p} vs {e}");
        }
        let g = ce.grad();
        assert!((g[2] - (ce.probs[2] - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 1.0], 2),
            Err(Error::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = rng.random_range(-50.0..50.0);
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let a = softmax_cross_entropy(&logits, 4).unwrap();
            let b = softmax_cross_entropy(&shifted, 4).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-9);
            for (p, q) in a.probs.iter().zip(&b.probs) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn span_mean_cases() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        assert_eq!(span_mean(&t, Span::new(0, 1)).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(span_mean(&t, Span::new(1, 1)).unwrap().data(), &[3.0, 1.0]);
        assert!(matches!(span_mean(&t, Span::new(1, 0)), Err(Error::Span(_))));
        assert!(matches!(span_mean(&t, Span::new(1, 2)), Err(Error::Span(_))));
    }

    #[test]
    fn span_mean_matches_loop_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let got = span_mean(&t, Span::new(1, 3)).unwrap();
        for c in 0..4 {
            let mut acc = 0.0;
            for r in 1..=3 {
                acc += t.data()[r * 4 + c];
            }
            assert!((got.data()[c] - acc / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let err = finite_diff_check(|x| Ok((x[0] * x[0], vec![2.0 * x[0]])), &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let res = finite_diff_check(|x| Ok((x[0].ln(), vec![1.0 / x[0]])), &[0.0], 1e-5);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    /// Flattens the inputs of a primitive, then checks `Σ c·f(x)` for a fixed
    /// random weighting `c`, so every output coordinate feeds the scalar.
    fn check_primitive<F, B>(inputs: Vec<Tensor>, forward: F, backward: B) -> f64
    where
        F: Fn(&[Tensor]) -> Tensor,
        B: Fn(&[Tensor], &Tensor) -> Vec<Tensor>,
    {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let unflatten = |x: &[f64]| -> Vec<Tensor> {
            let mut off = 0;
            shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let t = Tensor::from_vec(s, x[off..off + n].to_vec()).unwrap();
                    off += n;
                    t
                })
                .collect()
        };
        let out_len = forward(&inputs).len();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        finite_diff_check(
            |x| {
                let ins = unflatten(x);
                let out = forward(&ins);
                let value = out.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
                let g = Tensor::from_vec(out.shape(), weights.clone()).unwrap();
                let grads = backward(&ins, &g);
                Ok((value, grads.into_iter().flat_map(Tensor::into_data).collect()))
            },
            &flat,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            let b = Tensor::uniform(&[4, 2], 1.0, &mut rng);
            let err = check_primitive(
                vec![a, b],
                |x| matmul(&x[0], &x[1]).unwrap(),
                |x, g| {
                    let (ga, gb) = matmul_backward(&x[0], &x[1], g);
                    vec![ga, gb]
                },
            );
            assert!(err < 1e-4, "matmul {err}");

            let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            let bias = Tensor::uniform(&[4], 1.0, &mut rng);
            let err = check_primitive(
                vec![a, bias],
                |x| add(&x[0], &x[1]).unwrap(),
                |x, g| {
                    let (ga, gb) = add_backward(x[1].shape(), g);
                    vec![ga, gb]
                },
            );
            assert!(err < 1e-4, "add {err}");

            let a = Tensor::uniform(&[7], 2.0, &mut rng);
            let err = check_primitive(
                vec![a.clone()],
                |x| tanh(&x[0]),
                |x, g| vec![tanh_backward(&tanh(&x[0]), g)],
            );
            assert!(err < 1e-4, "tanh {err}");
            let err = check_primitive(
                vec![a],
                |x| sigmoid(&x[0]),
                |x, g| vec![sigmoid_backward(&sigmoid(&x[0]), g)],
            );
            assert!(err < 1e-4, "sigmoid {err}");

            let p = Tensor::uniform(&[3], 1.0, &mut rng);
            let q = Tensor::uniform(&[2], 1.0, &mut rng);
            let err = check_primitive(
                vec![p, q],
                |x| concat(&[&x[0], &x[1]]),
                |_, g| concat_backward(g, &[3, 2]),
            );
            assert!(err < 1e-4, "concat {err}");

            let table = Tensor::uniform(&[6, 3], 1.0, &mut rng);
            let ids = [4usize, 1, 4, 0];
            let err = check_primitive(
                vec![table],
                |x| embedding_lookup(&x[0], &ids).unwrap(),
                |x, g| {
                    let mut gt = Tensor::zeros(x[0].shape());
                    embedding_backward(&ids, g, &mut gt);
                    vec![gt]
                },
            );
            assert!(err < 1e-4, "embedding {err}");

            let mask = DropoutMask::sample(5, 0.3, &mut rng);
            let v = Tensor::uniform(&[5], 1.0, &mut rng);
            let err = check_primitive(
                vec![v],
                |x| mask.apply(&x[0]),
                |_, g| vec![mask.backward(g)],
            );
            assert!(err < 1e-4, "dropout {err}");

            let states = Tensor::uniform(&[5, 3], 1.0, &mut rng);
            let span = Span::new(1, 3);
            let err = check_primitive(
                vec![states],
                |x| span_mean(&x[0], span).unwrap(),
                |x, g| {
                    let mut gs = Tensor::zeros(x[0].shape());
                    span_mean_backward(g, span, &mut gs);
                    vec![gs]
                },
            );
            assert!(err < 1e-4, "span_mean {err}");

            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let err = finite_diff_check(
                |x| {
                    let ce = softmax_cross_entropy(x, 3)?;
                    Ok((ce.loss, ce.grad()))
                },
                &logits,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "cross-entropy {err}");
        }
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        let m1 = DropoutMask::sample(1000, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        let m2 = DropoutMask::sample(1000, 0.1, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(m1, m2);
        let ones = Tensor::vector(vec![1.0; 1000]);
        let out = m1.apply(&ones);
        let kept = out.data().iter().filter(|v| **v > 0.0).count();
        assert!((850..=950).contains(&kept));
        assert!(out.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
    }

    #[test]
    fn tensor_deserialize_checks_length() {
        let bad = r#"{"shape":[2,2],"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Tensor>(bad).is_err());
        let good = r#"{"shape":[2],"data":[1.0,2.0]}"#;
        assert_eq!(serde_json::from_str::<Tensor>(good).unwrap().len(), 2);
    }
}
