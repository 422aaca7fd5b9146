//! Tape-based reverse-mode differentiation over [`Mat`].
//!
//! The whole model fits in a few thousand nodes per batch, so the tape keeps
//! every intermediate value and replays the recorded ops in reverse. There is
//! no graph pruning: leaves are both parameters and constants, and the caller
//! reads back only the gradients it cares about.

use std::sync::Arc;

use crate::tensor::Mat;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    Transpose(Var),
    Reshape(Var),
    /// a (RxC) + row (1xC), broadcast over rows.
    AddRow(Var, Var),
    /// a (RxC) * col (Rx1), broadcast over columns.
    MulColVec(Var, Var),
    /// a (RxC) * row (1xC), broadcast over rows.
    MulRowVec(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    /// 1xC logits, class index; value is -log softmax(logits)[label].
    CrossEntropyLogits(Var, usize),
    /// Mean pairwise cosine similarity across rows of an s x d matrix.
    MeanPairwiseCosine(Var),
    /// Consolidation penalty over past update-weight snapshots plus the
    /// current (differentiable) one.
    Consolidation {
        cur: Var,
        prev: Arc<Vec<Vec<f64>>>,
        window: usize,
        cap: usize,
        eps: f64,
    },
}

struct Node {
    op: Op,
    value: Mat,
}

/// Recording tape. One per training batch / forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    // ── graph construction ──────────────────────────────────────────────

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(Op::Leaf, m)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Mat::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::MulElem(a, b), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a, c), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).reshape(rows, cols);
        self.push(Op::Reshape(a), v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows, 1, "add_row expects a 1xC row");
        assert_eq!(am.cols, rm.cols, "add_row width mismatch");
        let v = Mat::from_fn(am.rows, am.cols, |r, c| am.at(r, c) + rm.at(0, c));
        self.push(Op::AddRow(a, row), v)
    }

    pub fn mul_col_vec(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!(cm.cols, 1, "mul_col_vec expects an Rx1 column");
        assert_eq!(am.rows, cm.rows, "mul_col_vec height mismatch");
        let v = Mat::from_fn(am.rows, am.cols, |r, c| am.at(r, c) * cm.at(r, 0));
        self.push(Op::MulColVec(a, col), v)
    }

    pub fn mul_row_vec(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows, 1, "mul_row_vec expects a 1xC row");
        assert_eq!(am.cols, rm.cols, "mul_row_vec width mismatch");
        let v = Mat::from_fn(am.rows, am.cols, |r, c| am.at(r, c) * rm.at(0, c));
        self.push(Op::MulRowVec(a, row), v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.rows, bm.rows, "concat_cols height mismatch");
        let mut v = Mat::zeros(am.rows, am.cols + bm.cols);
        for r in 0..am.rows {
            for c in 0..am.cols {
                *v.at_mut(r, c) = am.at(r, c);
            }
            for c in 0..bm.cols {
                *v.at_mut(r, am.cols + c) = bm.at(r, c);
            }
        }
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let am = self.value(a);
        assert!(from < to && to <= am.cols, "slice_cols range out of bounds");
        let v = Mat::from_fn(am.rows, to - from, |r, c| am.at(r, from + c));
        self.push(Op::SliceCols(a, from), v)
    }

    /// Row-wise softmax with the usual max-shift; the shift is treated as a
    /// constant, which leaves the gradient exact.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut v = Mat::zeros(am.rows, am.cols);
        for r in 0..am.rows {
            let row = am.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..am.cols {
                let e = (row[c] - max).exp();
                *v.at_mut(r, c) = e;
                denom += e;
            }
            for c in 0..am.cols {
                *v.at_mut(r, c) /= denom;
            }
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::scalar(m.sum() / m.len() as f64);
        self.push(Op::Mean(a), v)
    }

    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, 1, "cross_entropy_logits expects 1xC logits");
        assert!(label < lm.cols, "label {} out of range {}", label, lm.cols);
        let row = lm.row_slice(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let v = Mat::scalar(lse - row[label]);
        self.push(Op::CrossEntropyLogits(logits, label), v)
    }

    pub fn mean_pairwise_cosine(&mut self, m: Var) -> Var {
        let v = Mat::scalar(mean_pairwise_cosine(self.value(m)));
        self.push(Op::MeanPairwiseCosine(m), v)
    }

    pub fn consolidation(
        &mut self,
        cur: Var,
        prev: Arc<Vec<Vec<f64>>>,
        window: usize,
        cap: usize,
        eps: f64,
    ) -> Var {
        let cm = self.value(cur);
        assert_eq!(cm.rows, 1, "consolidation expects the current snapshot as 1xS");
        let mut entries: Vec<&[f64]> = prev.iter().map(|v| v.as_slice()).collect();
        entries.push(cm.row_slice(0));
        let v = Mat::scalar(consolidation_value(&entries, window, cap, eps));
        self.push(Op::Consolidation { cur, prev, window, cap, eps }, v)
    }

    // ── convenience compounds ───────────────────────────────────────────

    /// x @ w + b for a row input, the standard affine building block.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Sum of squared entries as a 1x1 scalar.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let sq = self.mul_elem(a, a);
        self.sum(sq)
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Backpropagate from a scalar output. Returns one gradient per node;
    /// index with the `Var`s handed out during construction.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Mat> = self
            .nodes
            .iter()
            .map(|n| Mat::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[output.0].data[0] = 1.0;

        for idx in (0..=output.0).rev() {
            if grads[idx].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(&self.nodes[b.0].value);
                    let db = self.nodes[a.0].value.matmul_tn(&g);
                    grads[a.0].add_assign(&da);
                    grads[b.0].add_assign(&db);
                }
                Op::Add(a, b) => {
                    grads[a.0].add_assign(&g);
                    grads[b.0].add_assign(&g);
                }
                Op::Sub(a, b) => {
                    grads[a.0].add_assign(&g);
                    let neg = g.scale(-1.0);
                    grads[b.0].add_assign(&neg);
                }
                Op::MulElem(a, b) => {
                    let da = g.zip(&self.nodes[b.0].value, |x, y| x * y);
                    let db = g.zip(&self.nodes[a.0].value, |x, y| x * y);
                    grads[a.0].add_assign(&da);
                    grads[b.0].add_assign(&db);
                }
                Op::Scale(a, s) => {
                    let da = g.scale(*s);
                    grads[a.0].add_assign(&da);
                }
                Op::AddConst(a, _) => {
                    grads[a.0].add_assign(&g);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = g.zip(y, |gi, yi| gi * (1.0 - yi * yi));
                    grads[a.0].add_assign(&da);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = g.zip(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    grads[a.0].add_assign(&da);
                }
                Op::Sqrt(a) => {
                    // Derivative clamped away from the origin; callers keep
                    // arguments strictly positive in practice.
                    let y = &self.nodes[idx].value;
                    let da = g.zip(y, |gi, yi| gi * 0.5 / yi.max(1e-12));
                    grads[a.0].add_assign(&da);
                }
                Op::Transpose(a) => {
                    let da = g.transpose();
                    grads[a.0].add_assign(&da);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let da = g.reshape(r, c);
                    grads[a.0].add_assign(&da);
                }
                Op::AddRow(a, row) => {
                    grads[a.0].add_assign(&g);
                    let mut dr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            dr.data[c] += g.at(r, c);
                        }
                    }
                    grads[row.0].add_assign(&dr);
                }
                Op::MulColVec(a, col) => {
                    let am = &self.nodes[a.0].value;
                    let cm = &self.nodes[col.0].value;
                    let da = Mat::from_fn(g.rows, g.cols, |r, c| g.at(r, c) * cm.at(r, 0));
                    let mut dc = Mat::zeros(g.rows, 1);
                    for r in 0..g.rows {
                        let mut acc = 0.0;
                        for c in 0..g.cols {
                            acc += g.at(r, c) * am.at(r, c);
                        }
                        dc.data[r] = acc;
                    }
                    grads[a.0].add_assign(&da);
                    grads[col.0].add_assign(&dc);
                }
                Op::MulRowVec(a, row) => {
                    let am = &self.nodes[a.0].value;
                    let rm = &self.nodes[row.0].value;
                    let da = Mat::from_fn(g.rows, g.cols, |r, c| g.at(r, c) * rm.at(0, c));
                    let mut dr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            dr.data[c] += g.at(r, c) * am.at(r, c);
                        }
                    }
                    grads[a.0].add_assign(&da);
                    grads[row.0].add_assign(&dr);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.nodes[a.0].value.cols;
                    let da = Mat::from_fn(g.rows, ac, |r, c| g.at(r, c));
                    let db = Mat::from_fn(g.rows, g.cols - ac, |r, c| g.at(r, ac + c));
                    grads[a.0].add_assign(&da);
                    grads[b.0].add_assign(&db);
                }
                Op::SliceCols(a, from) => {
                    let mut da = Mat::zeros(self.nodes[a.0].value.rows, self.nodes[a.0].value.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            *da.at_mut(r, from + c) = g.at(r, c);
                        }
                    }
                    grads[a.0].add_assign(&da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut da = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let mut dot = 0.0;
                        for c in 0..g.cols {
                            dot += g.at(r, c) * y.at(r, c);
                        }
                        for c in 0..g.cols {
                            *da.at_mut(r, c) = y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                    grads[a.0].add_assign(&da);
                }
                Op::Sum(a) => {
                    let gi = g.data[0];
                    let da = self.nodes[a.0].value.map(|_| gi);
                    grads[a.0].add_assign(&da);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let gi = g.data[0] / n;
                    let da = self.nodes[a.0].value.map(|_| gi);
                    grads[a.0].add_assign(&da);
                }
                Op::CrossEntropyLogits(logits, label) => {
                    let lm = &self.nodes[logits.0].value;
                    let row = lm.row_slice(0);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    let gi = g.data[0];
                    let mut da = Mat::zeros(1, lm.cols);
                    for c in 0..lm.cols {
                        let p = (row[c] - max).exp() / denom;
                        da.data[c] = gi * (p - if c == *label { 1.0 } else { 0.0 });
                    }
                    grads[logits.0].add_assign(&da);
                }
                Op::MeanPairwiseCosine(m) => {
                    let da = mean_pairwise_cosine_grad(&self.nodes[m.0].value).scale(g.data[0]);
                    grads[m.0].add_assign(&da);
                }
                Op::Consolidation { cur, prev, window, cap, eps } => {
                    let cm = &self.nodes[cur.0].value;
                    let da = consolidation_grad_current(prev, cm.row_slice(0), *window, *cap, *eps)
                        .scale(g.data[0]);
                    grads[cur.0].add_assign(&da);
                }
            }
        }
        Grads { grads }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Mat>,
}

impl Grads {
    pub fn get(&self, v: Var) -> &Mat {
        &self.grads[v.0]
    }
}

// ── scalar math shared with the memory module ───────────────────────────

const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Mean cosine similarity over unordered row pairs, normalised by s(s-1).
/// Rows with near-zero norm contribute nothing.
pub fn mean_pairwise_cosine(m: &Mat) -> f64 {
    let s = m.rows;
    assert!(s >= 2, "pairwise cosine needs at least two rows");
    let norms: Vec<f64> = (0..s)
        .map(|i| m.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    for i in 0..s {
        for j in (i + 1)..s {
            if norms[i] < COSINE_NORM_FLOOR || norms[j] < COSINE_NORM_FLOOR {
                continue;
            }
            let dot: f64 = m
                .row_slice(i)
                .iter()
                .zip(m.row_slice(j))
                .map(|(a, b)| a * b)
                .sum();
            total += dot / (norms[i] * norms[j]);
        }
    }
    total / (s * (s - 1)) as f64
}

fn mean_pairwise_cosine_grad(m: &Mat) -> Mat {
    let s = m.rows;
    let d = m.cols;
    let norms: Vec<f64> = (0..s)
        .map(|i| m.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let coeff = 1.0 / (s * (s - 1)) as f64;
    let mut grad = Mat::zeros(s, d);
    for i in 0..s {
        for j in (i + 1)..s {
            if norms[i] < COSINE_NORM_FLOOR || norms[j] < COSINE_NORM_FLOOR {
                continue;
            }
            let (ri, rj) = (m.row_slice(i), m.row_slice(j));
            let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            let cos = dot / (norms[i] * norms[j]);
            for k in 0..d {
                grad.data[i * d + k] +=
                    coeff * (rj[k] / (norms[i] * norms[j]) - cos * ri[k] / (norms[i] * norms[i]));
                grad.data[j * d + k] +=
                    coeff * (ri[k] / (norms[i] * norms[j]) - cos * rj[k] / (norms[j] * norms[j]));
            }
        }
    }
    grad
}

/// Consolidation penalty over a chronological sequence of update-weight
/// snapshots (oldest first).
///
/// Per slot, absolute log-ratio deltas between consecutive snapshots are
/// grouped oldest-first into complete windows of `window` deltas; at most the
/// newest `cap` windows are kept and re-indexed c = 1 (oldest kept) through
/// n (newest). The loss averages each window's deltas and weighs it by 2^c,
/// then averages over slots.
pub fn consolidation_value(entries: &[&[f64]], window: usize, cap: usize, eps: f64) -> f64 {
    assert!(window >= 2, "window must be at least 2");
    assert!(eps > 0.0, "eps must be positive");
    if entries.len() < 2 {
        return 0.0;
    }
    let s = entries[0].len();
    let n_deltas = entries.len() - 1;
    let total_windows = n_deltas / window;
    if total_windows == 0 {
        return 0.0;
    }
    let kept = total_windows.min(cap);
    let start = total_windows - kept;
    let mut loss = 0.0;
    for slot in 0..s {
        for k in start..total_windows {
            let c = k - start + 1;
            let mut acc = 0.0;
            for j in k * window..(k + 1) * window {
                let a = entries[j][slot];
                let b = entries[j + 1][slot];
                acc += ((b + eps).ln() - (a + eps).ln()).abs();
            }
            loss += acc / window as f64 * (2.0f64).powi(c as i32);
        }
    }
    loss / s as f64
}

/// Gradient of [`consolidation_value`] with respect to the final snapshot.
fn consolidation_grad_current(
    prev: &[Vec<f64>],
    cur: &[f64],
    window: usize,
    cap: usize,
    eps: f64,
) -> Mat {
    let s = cur.len();
    let mut grad = Mat::zeros(1, s);
    if prev.is_empty() {
        return grad;
    }
    let n_deltas = prev.len(); // deltas in [prev..., cur]
    if n_deltas % window != 0 {
        return grad; // newest delta sits in an incomplete window
    }
    let total_windows = n_deltas / window;
    let kept = total_windows.min(cap);
    let weight = (2.0f64).powi(kept as i32) / (window as f64 * s as f64);
    let last_prev = prev.last().expect("non-empty");
    for slot in 0..s {
        let diff = (cur[slot] + eps).ln() - (last_prev[slot] + eps).ln();
        if diff != 0.0 {
            grad.data[slot] = weight * diff.signum() / (cur[slot] + eps);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::{stream, Stream};

    /// Central-difference check of d(scalar output)/d(leaf) for an arbitrary
    /// graph builder.
    fn fd_check(input: Mat, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.get(x).clone();

        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data[i] += delta;
                let mut t = Tape::new();
                let x = t.leaf(m);
                let out = build(&mut t, x);
                t.scalar_value(out)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((a - fd) / denom).abs() < 1e-5,
                "grad mismatch at {i}: analytic {a}, fd {fd}"
            );
        }
    }

    fn rand_mat(rows: usize, cols: usize, tag: u64) -> Mat {
        let mut rng = stream(tag, Stream::ParamInit);
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fd_matmul_chain() {
        let w = rand_mat(4, 3, 1);
        fd_check(rand_mat(2, 4, 2), move |t, x| {
            let wv = t.leaf(w.clone());
            let y = t.matmul(x, wv);
            let y = t.tanh(y);
            t.sum(y)
        });
    }

    #[test]
    fn fd_matmul_weight_side() {
        let x = rand_mat(3, 4, 3);
        fd_check(rand_mat(4, 2, 4), move |t, w| {
            let xv = t.leaf(x.clone());
            let y = t.matmul(xv, w);
            t.sum_sq(y)
        });
    }

    #[test]
    fn fd_elementwise_and_broadcast() {
        let b = rand_mat(3, 5, 5);
        fd_check(rand_mat(3, 5, 6), move |t, x| {
            let bv = t.leaf(b.clone());
            let y = t.mul_elem(x, bv);
            let y = t.add(y, x);
            let y = t.scale(y, 0.7);
            let y = t.add_const(y, 0.3);
            t.mean(y)
        });
        fd_check(rand_mat(1, 5, 7), |t, row| {
            let a = t.leaf(rand_mat(3, 5, 8));
            let y = t.add_row(a, row);
            let y = t.tanh(y);
            t.sum(y)
        });
        fd_check(rand_mat(3, 1, 9), |t, col| {
            let a = t.leaf(rand_mat(3, 5, 10));
            let y = t.mul_col_vec(a, col);
            t.sum_sq(y)
        });
        fd_check(rand_mat(1, 5, 11), |t, row| {
            let a = t.leaf(rand_mat(3, 5, 12));
            let y = t.mul_row_vec(a, row);
            t.sum_sq(y)
        });
    }

    #[test]
    fn fd_structural_ops() {
        fd_check(rand_mat(3, 4, 13), |t, x| {
            let y = t.transpose(x);
            let y = t.reshape(y, 2, 6);
            let other = t.leaf(rand_mat(2, 3, 14));
            let y = t.concat_cols(y, other);
            let y = t.slice_cols(y, 2, 7);
            t.sum_sq(y)
        });
    }

    #[test]
    fn fd_softmax_and_ce() {
        fd_check(rand_mat(4, 3, 15), |t, x| {
            let y = t.softmax_rows(x);
            let w = t.leaf(rand_mat(4, 3, 16));
            let y = t.mul_elem(y, w);
            t.sum(y)
        });
        fd_check(rand_mat(1, 5, 17), |t, x| t.cross_entropy_logits(x, 2));
    }

    #[test]
    fn fd_sqrt_relu() {
        let base = rand_mat(2, 3, 18).map(|v| v.abs() + 0.5);
        fd_check(base, |t, x| {
            let y = t.sqrt(x);
            let y = t.add_const(y, -0.8);
            let y = t.relu(y);
            t.sum_sq(y)
        });
    }

    #[test]
    fn fd_mean_pairwise_cosine() {
        fd_check(rand_mat(4, 6, 19), |t, m| t.mean_pairwise_cosine(m));
    }

    #[test]
    fn fd_consolidation_current_snapshot() {
        // Three previous snapshots + current = 4 entries = 3 deltas = one
        // complete window of 3, so the newest delta is differentiable.
        let prev: Arc<Vec<Vec<f64>>> = Arc::new(vec![
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.6, 0.3],
            vec![0.3, 0.4, 0.3],
        ]);
        // Every coordinate differs from the previous snapshot so the check
        // stays clear of the |.| kink.
        let cur = Mat::row(&[0.25, 0.45, 0.33]);
        fd_check(cur, move |t, x| t.consolidation(x, prev.clone(), 3, 4, 1e-8));
    }

    #[test]
    fn consolidation_incomplete_window_has_zero_grad() {
        let prev: Arc<Vec<Vec<f64>>> = Arc::new(vec![vec![0.2, 0.8], vec![0.4, 0.6]]);
        let mut tape = Tape::new();
        let cur = tape.leaf(Mat::row(&[0.5, 0.5]));
        let out = tape.consolidation(cur, prev, 3, 4, 1e-8);
        let grads = tape.backward(out);
        assert!(grads.get(cur).data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_mat(5, 7, 20).scale(3.0));
        let y = tape.softmax_rows(x);
        for r in 0..5 {
            let s: f64 = tape.value(y).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = sum(x*x) + sum(x) uses x twice.
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::row(&[2.0, -1.0]));
        let a = tape.sum_sq(x);
        let b = tape.sum(x);
        let out = tape.add(a, b);
        let grads = tape.backward(out);
        assert_eq!(grads.get(x).data, vec![5.0, -1.0]);
    }
}
