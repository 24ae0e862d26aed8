//! Record-and-replay gradient tape.
//!
//! Every primitive pushes one node; `backward` walks the node list in reverse
//! index order, which is a valid reverse topological order because inputs are
//! always recorded before their consumers. A tape belongs to one thread; the
//! data parallelism lives inside the primitives (row-parallel matmul), so
//! results do not depend on worker count.

use super::{s, Scalar, Tensor};
use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    AddRowBroadcast { a: TensorId, bias: TensorId },
    Scale { a: TensorId, c: F },
    MulElem { a: TensorId, b: TensorId },
    ConcatLast { a: TensorId, b: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    SliceRow { a: TensorId, row: usize },
    SliceCols { a: TensorId, start: usize, len: usize },
    Reshape { a: TensorId },
    SoftmaxLast { a: TensorId },
    Tanh { a: TensorId },
    Relu { a: TensorId },
    SumAll { a: TensorId },
    MeanRows { a: TensorId },
    WeightedSumGroups { weights: TensorId, cands: TensorId },
    GatherRows { table: TensorId, ids: Vec<usize> },
    LayerNorm {
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<F>,
        inv_std: Vec<F>,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        smoothing: F,
    },
    Dropout { a: TensorId, mask: Vec<F> },
    /// Identity forward with a sign-flipped backward. Exists only so the
    /// gradient checker can prove it catches a corrupted primitive.
    NegGradIdentity { a: TensorId },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// Dense inner kernels. Each output element is an independent dot product with
// a fixed summation order, so the row-parallel versions are deterministic.

fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    let body = |i: usize, out: &mut [F]| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    };
    run_rows(&mut c, n, m * n * k, body);
    c
}

/// A[m×k] · B[n×k]ᵀ -> [m×n]
fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    let body = |i: usize, out: &mut [F]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in ar.iter().zip(br.iter()) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    run_rows(&mut c, n, m * n * k, body);
    c
}

/// A[k×m]ᵀ · B[k×n] -> [m×n]
fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    let body = |i: usize, out: &mut [F]| {
        for p in 0..k {
            let av = a[p * m + i];
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    };
    run_rows(&mut c, n, m * n * k, body);
    c
}

const PAR_FLOP_THRESHOLD: usize = 16 * 1024;

#[cfg(feature = "parallel")]
fn run_rows<F: Scalar>(out: &mut [F], row_len: usize, flops: usize, body: impl Fn(usize, &mut [F]) + Sync) {
    if flops >= PAR_FLOP_THRESHOLD && row_len > 0 && out.len() / row_len > 1 {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, chunk)| body(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(row_len.max(1)).enumerate() {
            body(i, chunk);
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn run_rows<F: Scalar>(out: &mut [F], row_len: usize, _flops: usize, body: impl Fn(usize, &mut [F]) + Sync) {
    for (i, chunk) in out.chunks_mut(row_len.max(1)).enumerate() {
        body(i, chunk);
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, shape: &[usize], delta: &[F]) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape));
    for (o, &d) in g.data_mut().iter_mut().zip(delta.iter()) {
        *o += d;
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Tensor<F>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert!(
            k == k2 && av.shape().len() == 2 && bv.shape().len() == 2,
            "matmul dimension mismatch: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let data = matmul_nn(av.data(), bv.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(m, n, data), rg, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        assert_eq!(av.shape().len(), 2, "transpose expects 2-D, got {:?}", av.shape());
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.get2(i, j);
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(n, m, data), rg, Op::Transpose { a })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.shape(),
            bv.shape(),
            "add shape mismatch: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data), rg, Op::Add { a, b })
    }

    /// `a[m×n] + bias[1×n]`, bias added to every row.
    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        assert_eq!(
            bv.numel(),
            n,
            "bias shape mismatch: {:?} against row width {}",
            bv.shape(),
            n
        );
        let bias_data = bv.data();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &x) in row.iter_mut().zip(bias_data.iter()) {
                *o += x;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, bias]);
        self.push(Tensor::new(shape, data), rg, Op::AddRowBroadcast { a, bias })
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * c).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data), rg, Op::Scale { a, c })
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.shape(),
            bv.shape(),
            "mul_elem shape mismatch: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data), rg, Op::MulElem { a, b })
    }

    /// Last-axis concatenation; all leading extents must match.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, q) = (av.cols(), bv.cols());
        assert_eq!(
            av.rows(),
            bv.rows(),
            "concat_last leading shape mismatch: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&bv.data()[r * q..(r + 1) * q]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = p + q;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data), rg, Op::ConcatLast { a, b })
    }

    /// Stack 2-D parts along the row axis. All parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows on empty part list");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(
                v.cols(),
                cols,
                "concat_rows column mismatch: {:?} vs width {}",
                v.shape(),
                cols
            );
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::matrix(rows, cols, data),
            rg,
            Op::ConcatRows { parts: parts.to_vec() },
        )
    }

    pub fn slice_row(&mut self, a: TensorId, row: usize) -> TensorId {
        let av = self.value(a);
        assert!(row < av.rows(), "slice_row {} out of {} rows", row, av.rows());
        let data = av.row_slice(row).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::row(data), rg, Op::SliceRow { a, row })
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(
            start + len <= cols,
            "slice_cols [{start}, {}) out of width {cols}",
            start + len
        );
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(rows, len, data),
            rg,
            Op::SliceCols { a, start, len },
        )
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let av = self.value(a);
        assert_eq!(
            av.numel(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?} changes element count",
            av.shape(),
            shape
        );
        let data = av.data().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data), rg, Op::Reshape { a })
    }

    /// Row-wise softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        assert!(av.cols() >= 1, "softmax_last on empty last axis");
        assert!(av.all_finite(), "softmax_last: non-finite input");
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data), rg, Op::SoftmaxLast { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.tanh()).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data), rg, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data), rg, Op::Relu { a })
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let total: F = self.value(a).data().iter().cloned().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), rg, Op::SumAll { a })
    }

    /// `[m×n] -> [1×n]` arithmetic mean over rows.
    pub fn mean_rows(&mut self, a: TensorId) -> TensorId {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(m >= 1, "mean_rows on zero rows");
        let inv = F::one() / s::<F>(m as f64);
        let mut data = vec![F::zero(); n];
        for r in 0..m {
            for (o, &x) in data.iter_mut().zip(av.row_slice(r).iter()) {
                *o += x;
            }
        }
        for x in data.iter_mut() {
            *x *= inv;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row(data), rg, Op::MeanRows { a })
    }

    /// Grouped attention readout: `weights[m×k]`, `cands[(m·k)×n]`,
    /// `out[c] = Σ_k weights[c,k] · cands[c·k + k]`.
    pub fn weighted_sum_groups(&mut self, weights: TensorId, cands: TensorId) -> TensorId {
        let (wv, cv) = (self.value(weights), self.value(cands));
        let (m, k) = (wv.rows(), wv.cols());
        let n = cv.cols();
        assert_eq!(
            cv.rows(),
            m * k,
            "weighted_sum_groups: weights {:?} need {} candidate rows, got {:?}",
            wv.shape(),
            m * k,
            cv.shape()
        );
        let mut data = vec![F::zero(); m * n];
        for c in 0..m {
            let out = &mut data[c * n..(c + 1) * n];
            for j in 0..k {
                let w = wv.get2(c, j);
                let cand = cv.row_slice(c * k + j);
                for (o, &x) in out.iter_mut().zip(cand.iter()) {
                    *o += w * x;
                }
            }
        }
        let rg = self.rg(&[weights, cands]);
        self.push(
            Tensor::matrix(m, n, data),
            rg,
            Op::WeightedSumGroups { weights, cands },
        )
    }

    /// Embedding-style row lookup with scatter-add gradient.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let tv = self.value(table);
        let (v, n) = (tv.rows(), tv.cols());
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    index: id,
                    limit: v,
                    context: "gather_rows",
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            data.extend_from_slice(tv.row_slice(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), n, data),
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row layer normalization with learned gain/offset.
    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId, eps: F) -> TensorId {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        assert_eq!(self.value(gamma).numel(), n, "layer_norm gamma width mismatch");
        assert_eq!(self.value(beta).numel(), n, "layer_norm beta width mismatch");
        let inv_n = F::one() / s::<F>(n as f64);
        let mut mean = vec![F::zero(); m];
        let mut inv_std = vec![F::zero(); m];
        let mut data = vec![F::zero(); m * n];
        for r in 0..m {
            let row = av.row_slice(r);
            let mu: F = row.iter().cloned().sum::<F>() * inv_n;
            let var: F = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<F>() * inv_n;
            let inv = F::one() / (var + eps).sqrt();
            mean[r] = mu;
            inv_std[r] = inv;
            let gamma_d = self.value(gamma).data();
            let beta_d = self.value(beta).data();
            for j in 0..n {
                data[r * n + j] = (row[j] - mu) * inv * gamma_d[j] + beta_d[j];
            }
        }
        let rg = self.rg(&[a, gamma, beta]);
        self.push(
            Tensor::matrix(m, n, data),
            rg,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                mean,
                inv_std,
            },
        )
    }

    /// Mean label-smoothed negative log-likelihood over the batch axis.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        smoothing: F,
    ) -> Result<TensorId> {
        let lv = self.value(logits);
        let (b, v) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), b, "cross_entropy: {} targets for {} rows", targets.len(), b);
        assert!(
            smoothing >= F::zero() && smoothing < F::one(),
            "label smoothing must be in [0, 1)"
        );
        for &t in targets {
            if t >= v {
                return Err(Error::Index {
                    index: t,
                    limit: v,
                    context: "cross_entropy target",
                });
            }
        }
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row_slice(r);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            let sum_logp: F = row.iter().map(|&x| x - lse).sum();
            let logp_t = row[t] - lse;
            total += -(F::one() - smoothing) * logp_t - smoothing / s::<F>(v as f64) * sum_logp;
        }
        let loss = total / s::<F>(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
        ))
    }

    /// Inverted dropout; `mask` entries are 0 or 1/(1-p), generated by the caller
    /// so that randomness stays under the training loop's seeded RNG.
    pub fn dropout(&mut self, a: TensorId, mask: Vec<F>) -> TensorId {
        let av = self.value(a);
        assert_eq!(mask.len(), av.numel(), "dropout mask length mismatch");
        let data = av
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data), rg, Op::Dropout { a, mask })
    }

    /// Identity whose backward flips the gradient sign. A deliberately wrong
    /// primitive for gradient-checker self-tests; never use it in a model.
    pub fn neg_grad_identity(&mut self, a: TensorId) -> TensorId {
        let value = self.value(a).clone();
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::NegGradIdentity { a })
    }

    /// Reverse pass from a scalar loss. Calling this twice on one tape is an
    /// error rather than silent gradient accumulation.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward() called twice on the same tape",
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(F::one()));
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) {
        // Take the grad out to appease the borrow checker; it is restored below.
        let grad = self.nodes[idx].grad.take().unwrap();
        let g = grad.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt(g, self.value(b).data(), m, n, k);
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn(self.value(a).data(), g, k, m, n);
                    let shape = self.value(b).shape().to_vec();
                    accumulate(&mut self.nodes[b.0].grad, &shape, &db);
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let (n, m) = (grad.rows(), grad.cols());
                    let mut da = vec![F::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] = g[i * m + j];
                        }
                    }
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::Add { a, b } => {
                for &x in &[*a, *b] {
                    if self.nodes[x.0].requires_grad {
                        let shape = self.value(x).shape().to_vec();
                        accumulate(&mut self.nodes[x.0].grad, &shape, g);
                    }
                }
            }
            Op::AddRowBroadcast { a, bias } => {
                let (a, bias) = (*a, *bias);
                if self.nodes[a.0].requires_grad {
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, g);
                }
                if self.nodes[bias.0].requires_grad {
                    let n = self.value(bias).numel();
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        for (o, &x) in db.iter_mut().zip(row.iter()) {
                            *o += x;
                        }
                    }
                    let shape = self.value(bias).shape().to_vec();
                    accumulate(&mut self.nodes[bias.0].grad, &shape, &db);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.nodes[a.0].requires_grad {
                    let da: Vec<F> = g.iter().map(|&x| x * c).collect();
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::MulElem { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let da: Vec<F> = g
                        .iter()
                        .zip(self.value(b).data().iter())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<F> = g
                        .iter()
                        .zip(self.value(a).data().iter())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    let shape = self.value(b).shape().to_vec();
                    accumulate(&mut self.nodes[b.0].grad, &shape, &db);
                }
            }
            Op::ConcatLast { a, b } => {
                let (a, b) = (*a, *b);
                let p = self.value(a).cols();
                let q = self.value(b).cols();
                let rows = self.value(a).rows();
                if self.nodes[a.0].requires_grad {
                    let mut da = Vec::with_capacity(rows * p);
                    for r in 0..rows {
                        da.extend_from_slice(&g[r * (p + q)..r * (p + q) + p]);
                    }
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = Vec::with_capacity(rows * q);
                    for r in 0..rows {
                        db.extend_from_slice(&g[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                    let shape = self.value(b).shape().to_vec();
                    accumulate(&mut self.nodes[b.0].grad, &shape, &db);
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let cols = grad.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    if self.nodes[p.0].requires_grad {
                        let dp = &g[offset * cols..(offset + rows) * cols];
                        let shape = self.value(p).shape().to_vec();
                        accumulate(&mut self.nodes[p.0].grad, &shape, dp);
                    }
                    offset += rows;
                }
            }
            Op::SliceRow { a, row } => {
                let (a, row) = (*a, *row);
                if self.nodes[a.0].requires_grad {
                    let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
                    let mut da = vec![F::zero(); rows * cols];
                    da[row * cols..(row + 1) * cols].copy_from_slice(g);
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                if self.nodes[a.0].requires_grad {
                    let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
                    let mut da = vec![F::zero(); rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, g);
                }
            }
            Op::SoftmaxLast { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[idx].value.data();
                    let cols = self.nodes[idx].value.cols();
                    let mut da = vec![F::zero(); y.len()];
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: F = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                        for j in 0..cols {
                            da[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::Tanh { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[idx].value.data();
                    let da: Vec<F> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&g, &y)| g * (F::one() - y * y))
                        .collect();
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let x = self.value(a).data();
                    let da: Vec<F> = g
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                        .collect();
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::SumAll { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let g0 = g[0];
                    let da = vec![g0; self.value(a).numel()];
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::MeanRows { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let (m, n) = (self.value(a).rows(), self.value(a).cols());
                    let inv = F::one() / s::<F>(m as f64);
                    let mut da = vec![F::zero(); m * n];
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] = g[j] * inv;
                        }
                    }
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::WeightedSumGroups { weights, cands } => {
                let (weights, cands) = (*weights, *cands);
                let (m, k) = (self.value(weights).rows(), self.value(weights).cols());
                let n = self.value(cands).cols();
                if self.nodes[weights.0].requires_grad {
                    let cv = self.value(cands);
                    let mut dw = vec![F::zero(); m * k];
                    for c in 0..m {
                        let gr = &g[c * n..(c + 1) * n];
                        for j in 0..k {
                            let cand = cv.row_slice(c * k + j);
                            dw[c * k + j] = gr
                                .iter()
                                .zip(cand.iter())
                                .map(|(&g, &x)| g * x)
                                .sum();
                        }
                    }
                    let shape = self.value(weights).shape().to_vec();
                    accumulate(&mut self.nodes[weights.0].grad, &shape, &dw);
                }
                if self.nodes[cands.0].requires_grad {
                    let wv = self.value(weights);
                    let mut dc = vec![F::zero(); m * k * n];
                    for c in 0..m {
                        let gr = &g[c * n..(c + 1) * n];
                        for j in 0..k {
                            let w = wv.get2(c, j);
                            let out = &mut dc[(c * k + j) * n..(c * k + j + 1) * n];
                            for (o, &x) in out.iter_mut().zip(gr.iter()) {
                                *o = w * x;
                            }
                        }
                    }
                    let shape = self.value(cands).shape().to_vec();
                    accumulate(&mut self.nodes[cands.0].grad, &shape, &dc);
                }
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.nodes[table.0].requires_grad {
                    let (v, n) = (self.value(table).rows(), self.value(table).cols());
                    let mut dt = vec![F::zero(); v * n];
                    for (r, &id) in ids.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let out = &mut dt[id * n..(id + 1) * n];
                        for (o, &x) in out.iter_mut().zip(gr.iter()) {
                            *o += x;
                        }
                    }
                    let shape = self.value(table).shape().to_vec();
                    accumulate(&mut self.nodes[table.0].grad, &shape, &dt);
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (a, gamma, beta) = (*a, *gamma, *beta);
                let mean = mean.clone();
                let inv_std = inv_std.clone();
                let (m, n) = (self.value(a).rows(), self.value(a).cols());
                let inv_n = F::one() / s::<F>(n as f64);
                let gamma_d = self.value(gamma).data().to_vec();
                let x = self.value(a).data().to_vec();
                if self.nodes[beta.0].requires_grad {
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        for (o, &v) in db.iter_mut().zip(row.iter()) {
                            *o += v;
                        }
                    }
                    let shape = self.value(beta).shape().to_vec();
                    accumulate(&mut self.nodes[beta.0].grad, &shape, &db);
                }
                if self.nodes[gamma.0].requires_grad {
                    let mut dgm = vec![F::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            let xhat = (x[r * n + j] - mean[r]) * inv_std[r];
                            dgm[j] += g[r * n + j] * xhat;
                        }
                    }
                    let shape = self.value(gamma).shape().to_vec();
                    accumulate(&mut self.nodes[gamma.0].grad, &shape, &dgm);
                }
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![F::zero(); m * n];
                    for r in 0..m {
                        let mut sum_gy = F::zero();
                        let mut sum_gy_xhat = F::zero();
                        for j in 0..n {
                            let gy = g[r * n + j] * gamma_d[j];
                            let xhat = (x[r * n + j] - mean[r]) * inv_std[r];
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                        }
                        for j in 0..n {
                            let gy = g[r * n + j] * gamma_d[j];
                            let xhat = (x[r * n + j] - mean[r]) * inv_std[r];
                            da[r * n + j] = inv_std[r]
                                * (gy - inv_n * sum_gy - xhat * inv_n * sum_gy_xhat);
                        }
                    }
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
            } => {
                let (logits, smoothing) = (*logits, *smoothing);
                let targets = targets.clone();
                if self.nodes[logits.0].requires_grad {
                    let lv = self.value(logits);
                    let (b, v) = (lv.rows(), lv.cols());
                    let g0 = g[0] / s::<F>(b as f64);
                    let uniform = smoothing / s::<F>(v as f64);
                    let mut dl = vec![F::zero(); b * v];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = lv.row_slice(r);
                        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                        let denom: F = row.iter().map(|&x| (x - max).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - max).exp() / denom;
                            let q = if j == t {
                                F::one() - smoothing + uniform
                            } else {
                                uniform
                            };
                            dl[r * v + j] = g0 * (p - q);
                        }
                    }
                    let shape = self.value(logits).shape().to_vec();
                    accumulate(&mut self.nodes[logits.0].grad, &shape, &dl);
                }
            }
            Op::Dropout { a, mask } => {
                let a = *a;
                let mask = mask.clone();
                if self.nodes[a.0].requires_grad {
                    let da: Vec<F> = g.iter().zip(mask.iter()).map(|(&g, &m)| g * m).collect();
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
            Op::NegGradIdentity { a } => {
                let a = *a;
                if self.nodes[a.0].requires_grad {
                    let da: Vec<F> = g.iter().map(|&x| -x).collect();
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut self.nodes[a.0].grad, &shape, &da);
                }
            }
        }
        self.nodes[idx].grad = Some(grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t32(shape: Vec<usize>, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, data)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f32>::new();
        let i2 = tape.constant(t32(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, a);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_selects_row() {
        let mut tape = Tape::<f32>::new();
        let p = tape.constant(t32(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]));
        let a = tape.constant(t32(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(p, a);
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::seeded(7);
        let a: Vec<f32> = (0..12).map(|_| crate::rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let b: Vec<f32> = (0..8).map(|_| crate::rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let mut tape = Tape::<f32>::new();
        let ta = tape.constant(t32(vec![3, 4], a.clone()));
        let tb = tape.constant(t32(vec![4, 2], b.clone()));
        let c = tape.matmul(ta, tb);
        // independent naive triple-loop oracle
        let mut expect = vec![0.0f32; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a[i * 4 + p] * b[p * 2 + j];
                }
                expect[i * 2 + j] = acc;
            }
        }
        for (got, want) in tape.value(c).data().iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    #[should_panic(expected = "matmul dimension mismatch")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(t32(vec![2, 3], vec![0.0; 6]));
        let b = tape.constant(t32(vec![2, 2], vec![0.0; 4]));
        tape.matmul(a, b);
    }

    #[test]
    fn concat_last_basic_and_empty() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::row(vec![3.0]));
        let c = tape.concat_last(a, b);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

        let empty = tape.constant(Tensor::matrix(1, 0, vec![]));
        let d = tape.concat_last(a, empty);
        assert_eq!(tape.value(d).data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_gradient_splits_back() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::row(vec![1.0, 2.0]), true);
        let b = tape.leaf(Tensor::row(vec![3.0, 4.0, 5.0]), true);
        let c = tape.concat_last(a, b);
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_symmetry_and_single() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let y = tape.softmax_last(a);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let b = tape.constant(Tensor::row(vec![42.0]));
        let y1 = tape.softmax_last(b);
        assert_eq!(tape.value(y1).data(), &[1.0]);
    }

    #[test]
    fn softmax_no_overflow_matches_f64_oracle() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::row(vec![1000.0, 0.0]));
        let y = tape.softmax_last(a);
        let got = tape.value(y).data();
        // high-precision oracle
        let e0 = (0.0f64 - 1000.0).exp();
        let z = 1.0 + e0;
        assert!((got[0] as f64 - 1.0 / z).abs() < 1e-6);
        assert!((got[1] as f64 - e0 / z).abs() < 1e-6);
        assert!(got.iter().all(|x| x.is_finite()));
    }

    #[test]
    #[should_panic(expected = "non-finite input")]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::row(vec![f32::NAN, 0.0]));
        tape.softmax_last(a);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(t32(vec![2, 5], vec![0.0; 10]));
        let loss = tape.cross_entropy(logits, &[3, 0], 0.0).unwrap();
        assert!((tape.value(loss).item() - (5.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_goes_to_zero_with_large_gap() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(t32(vec![1, 3], vec![30.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0], 0.0).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_direct_formula_oracle() {
        let mut rng = crate::rng::seeded(11);
        let logits: Vec<f64> = (0..12).map(|_| crate::rng::uniform(&mut rng, -2.0, 2.0)).collect();
        let targets = [2usize, 0, 3];
        let eps = 0.1f64;
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::new(vec![3, 4], logits.clone()));
        let loss = tape.cross_entropy(l, &targets, eps).unwrap();
        // direct log-sum-exp oracle
        let mut expect = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits[r * 4..(r + 1) * 4];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            let mut li = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let q = if j == t { 1.0 - eps + eps / 4.0 } else { eps / 4.0 };
                li -= q * (x - lse);
            }
            expect += li / 3.0;
        }
        assert!((tape.value(loss).item() - expect).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(t32(vec![1, 3], vec![0.0; 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3], 0.0),
            Err(crate::error::Error::Index { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t32(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let loss = tape.scale(x, 3.0);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn weighted_sum_groups_forward_and_grad() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(t32(vec![1, 2], vec![0.25, 0.75]), true);
        let c = tape.leaf(t32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let out = tape.weighted_sum_groups(w, c);
        assert_eq!(tape.value(out).data(), &[2.5, 3.5]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(tape.grad(c).unwrap().data(), &[0.25, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::<f32>::new();
        let table = tape.leaf(t32(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let out = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
        assert!(tape.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut rng = crate::rng::seeded(3);
            let a: Vec<f32> = (0..64).map(|_| crate::rng::uniform(&mut rng, -1.0, 1.0)).collect();
            let b: Vec<f32> = (0..64).map(|_| crate::rng::uniform(&mut rng, -1.0, 1.0)).collect();
            let mut tape = Tape::<f32>::new();
            let ta = tape.constant(t32(vec![8, 8], a));
            let tb = tape.constant(t32(vec![8, 8], b));
            let c = tape.matmul(ta, tb);
            let y = tape.softmax_last(c);
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
