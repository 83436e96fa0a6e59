use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::{matmul_nn, matmul_nt, matmul_tn, order_free_sum, Result, Tensor, TensorError};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    RepeatRows(usize),
    Relu(usize),
    Tanh(usize),
    Square(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        k: usize,
    },
    GatherMean {
        x: usize,
        lists: Arc<Vec<Vec<usize>>>,
    },
    RowMean(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    Reshape(usize),
    Transpose(usize),
    Cosine {
        a: usize,
        b: usize,
        na: Vec<f64>,
        nb: Vec<f64>,
        dot: Vec<f64>,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batchnorm; the caller folds
/// them into its running buffers.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the one used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

fn need_2d(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_2d() {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op,
            reason: format!("expected a 2-D tensor, got shape {:?}", t.shape),
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].value.requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient after [`Graph::backward`]; `None` for nodes that do not
    /// require gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.data, t.shape, false, Op::Leaf)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.data, t.shape, requires_grad, Op::Leaf)
    }

    /// Copies parameter `id` into the graph; it requires a gradient unless the
    /// store marks it frozen.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Param(id))
    }

    /// Constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = &self.nodes[v.0].value;
        self.push(t.data.clone(), t.shape.clone(), false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        need_2d("matmul", ta)?;
        need_2d("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_nn(&ta.data, &tb.data, m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(data, vec![m, n], rg, Op::MatMul(a.0, b.0)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(data, shape, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "hadamard", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(&[a.0]);
        self.push(data, shape, rg, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a.0, c))
    }

    /// Derivative at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a.0))
    }

    /// `[1, C]` → `[rows, C]`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if !t.is_2d() || t.rows() != 1 {
            return Err(TensorError::Invalid {
                op: "repeat_rows",
                reason: format!("expected a [1, C] row, got {:?}", t.shape),
            });
        }
        let c = t.cols();
        let data = t.data.repeat(rows);
        let rg = self.rg(&[a.0]);
        Ok(self.push(data, vec![rows, c], rg, Op::RepeatRows(a.0)))
    }

    /// `x [R, C] + b [1, C]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        need_2d("add_row", self.value(x))?;
        let rows = self.value(x).rows();
        let bb = self.repeat_rows(b, rows)?;
        self.add(x, bb)
    }

    /// `x [R, C] ⊙ r [1, C]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        need_2d("mul_row", self.value(x))?;
        let rows = self.value(x).rows();
        let rr = self.repeat_rows(r, rows)?;
        self.hadamard(x, rr)
    }

    /// `x·w + b` with `w [in, out]`, `b [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let tx = self.value(x);
        need_2d(op, tx)?;
        for p in [gamma, beta] {
            let tp = self.value(p);
            if tp.shape != [1, tx.cols()] {
                return Err(shape_err(op, tx, tp));
            }
        }
        if tx.rows() == 0 {
            return Err(TensorError::Invalid {
                op,
                reason: "no rows".into(),
            });
        }
        Ok(())
    }

    fn push_bn(&mut self, x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool) -> Var {
        let c = inv_std.len();
        let (g, b) = (self.data(gamma), self.data(beta));
        let data = xhat.iter().enumerate().map(|(i, &h)| g[i % c] * h + b[i % c]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.push(
            data,
            shape,
            rg,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Normalizes each column with the statistics of the rows in `x`.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        self.check_affine("batchnorm", x, gamma, beta)?;
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut col = vec![0.0; r];
        for j in 0..c {
            for (i, v) in col.iter_mut().enumerate() {
                *v = t.data[i * c + j];
            }
            mean[j] = order_free_sum(&col) / r as f64;
            for (i, v) in col.iter_mut().enumerate() {
                let d = t.data[i * c + j] - mean[j];
                *v = d * d;
            }
            var[j] = order_free_sum(&col) / r as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let xhat = t.data.iter().enumerate().map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c]).collect();
        let unbiased = if r > 1 {
            var.iter().map(|v| v * r as f64 / (r - 1) as f64).collect()
        } else {
            var
        };
        let y = self.push_bn(x, gamma, beta, xhat, inv_std, true);
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Normalizes with fixed running statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        self.check_affine("batchnorm", x, gamma, beta)?;
        let c = self.value(x).cols();
        if mean.len() != c || var.len() != c {
            return Err(TensorError::Shape {
                op: "batchnorm",
                left: self.shape(x).to_vec(),
                right: vec![mean.len()],
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let xhat = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        Ok(self.push_bn(x, gamma, beta, xhat, inv_std, false))
    }

    /// 1-D convolution along the rows of `x [L, C_in]` with `k` taps, stride 1,
    /// no padding. `w` is `[k·C_in, C_out]` (tap-major), `b` is `[1, C_out]`.
    /// With `k = 1` every row is transformed independently by the same kernel.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        need_2d("conv1d", tx)?;
        need_2d("conv1d", tw)?;
        let (l, cin) = (tx.rows(), tx.cols());
        if k == 0 || l < k {
            return Err(TensorError::Invalid {
                op: "conv1d",
                reason: format!("kernel width {k} on {l} rows"),
            });
        }
        if tw.rows() != k * cin {
            return Err(shape_err("conv1d", tx, tw));
        }
        let cout = tw.cols();
        if tb.shape != [1, cout] {
            return Err(shape_err("conv1d", tw, tb));
        }
        let lo = l - k + 1;
        // window t is the contiguous slice of rows t..t+k
        let mut data = if k == 1 {
            matmul_nn(&tx.data, &tw.data, l, cin, cout)
        } else {
            let cols: Vec<f64> = (0..lo).flat_map(|t| tx.data[t * cin..(t + k) * cin].iter().copied()).collect();
            matmul_nn(&cols, &tw.data, lo, k * cin, cout)
        };
        for row in data.chunks_mut(cout) {
            for (o, &bb) in row.iter_mut().zip(&tb.data) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(data, vec![lo, cout], rg, Op::Conv1d { x: x.0, w: w.0, b: b.0, k }))
    }

    /// Output row `s` is the mean of the rows of `x` listed in `lists[s]`.
    /// Sums are order-independent within each list.
    pub fn gather_mean(&mut self, x: Var, lists: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let t = self.value(x);
        need_2d("gather_mean", t)?;
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(lists.len() * c);
        let mut buf = Vec::new();
        for list in lists.iter() {
            if list.is_empty() {
                return Err(TensorError::Invalid {
                    op: "gather_mean",
                    reason: "empty group".into(),
                });
            }
            if let Some(&bad) = list.iter().find(|&&i| i >= r) {
                return Err(TensorError::Invalid {
                    op: "gather_mean",
                    reason: format!("row {bad} out of {r}"),
                });
            }
            for j in 0..c {
                buf.clear();
                buf.extend(list.iter().map(|&i| t.data[i * c + j]));
                data.push(order_free_sum(&buf) / list.len() as f64);
            }
        }
        let rg = self.rg(&[x.0]);
        let rows = lists.len();
        Ok(self.push(data, vec![rows, c], rg, Op::GatherMean { x: x.0, lists }))
    }

    /// Mean over consecutive row ranges of the given lengths.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let mut start = 0;
        let lists = lengths
            .iter()
            .map(|&n| {
                let l = (start..start + n).collect();
                start += n;
                l
            })
            .collect();
        if start != self.value(x).shape[0] {
            return Err(TensorError::Shape {
                op: "segment_mean",
                left: self.shape(x).to_vec(),
                right: vec![start],
            });
        }
        self.gather_mean(x, Arc::new(lists))
    }

    /// Mean over `axis` of a 2-D tensor, keeping it as a size-1 axis.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        need_2d("mean_pool", t)?;
        match axis {
            0 => {
                let r = t.rows();
                self.gather_mean(x, Arc::new(vec![(0..r).collect()]))
            }
            1 => {
                let (r, c) = (t.rows(), t.cols());
                if c == 0 {
                    return Err(TensorError::Invalid {
                        op: "mean_pool",
                        reason: "no columns".into(),
                    });
                }
                let data = (0..r)
                    .map(|i| order_free_sum(t.row(i)) / c as f64)
                    .collect();
                let rg = self.rg(&[x.0]);
                Ok(self.push(data, vec![r, 1], rg, Op::RowMean(x.0)))
            }
            _ => Err(TensorError::Invalid {
                op: "mean_pool",
                reason: format!("axis {axis} on a 2-D tensor"),
            }),
        }
    }

    /// Max-shifted softmax over `axis` of a 2-D tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        need_2d("softmax", t)?;
        if axis > 1 {
            return Err(TensorError::Invalid {
                op: "softmax",
                reason: format!("axis {axis} on a 2-D tensor"),
            });
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = t.data.clone();
        let (outer, inner, stride_o, stride_i) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for o in 0..outer {
            let idx = |i: usize| o * stride_o + i * stride_i;
            let m = (0..inner).map(|i| data[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for i in 0..inner {
                let e = (data[idx(i)] - m).exp();
                data[idx(i)] = e;
                s += e;
            }
            for i in 0..inner {
                data[idx(i)] /= s;
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(data, vec![r, c], rg, Op::Softmax { x: x.0, axis }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        need_2d("concat", first)?;
        let r = first.rows();
        for &p in parts {
            let t = self.value(p);
            need_2d("concat", t)?;
            if t.rows() != r {
                return Err(shape_err("concat", first, t));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(data, vec![r, total], rg, Op::ConcatCols(ids)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        need_2d("concat_rows", first)?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_2d() || t.cols() != c {
                return Err(shape_err("concat_rows", first, t));
            }
            data.extend_from_slice(&t.data);
            rows += t.rows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(data, vec![rows, c], rg, Op::ConcatRows(ids)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        need_2d("slice_rows", t)?;
        if start > end || end > t.rows() {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                reason: format!("rows {start}..{end} of {:?}", t.shape),
            });
        }
        let c = t.cols();
        let data = t.data[start * c..end * c].to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(data, vec![end - start, c], rg, Op::SliceRows { x: x.0, start }))
    }

    /// Row `i` of the output is row `idx[i]` of `x`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        need_2d("gather_rows", t)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                reason: format!("row {bad} of {:?}", t.shape),
            });
        }
        let c = t.cols();
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let rg = self.rg(&[x.0]);
        let n = idx.len();
        Ok(self.push(data, vec![n, c], rg, Op::GatherRows { x: x.0, idx }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: t.shape.clone(),
                right: shape,
            });
        }
        let data = t.data.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(data, shape, rg, Op::Reshape(x.0)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        need_2d("transpose", t)?;
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(data, vec![c, r], rg, Op::Transpose(x.0)))
    }

    /// Row-wise cosine similarity `⟨a, b⟩ / (‖a‖‖b‖ + ε)`, output `[R, 1]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        need_2d("cosine_similarity", ta)?;
        if ta.shape != tb.shape {
            return Err(shape_err("cosine_similarity", ta, tb));
        }
        let r = ta.rows();
        let mut na = Vec::with_capacity(r);
        let mut nb = Vec::with_capacity(r);
        let mut dot = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let (x, y) = (ta.row(i), tb.row(i));
            let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
            data.push(d / (nx * ny + COSINE_EPS));
            na.push(nx);
            nb.push(ny);
            dot.push(d);
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            data,
            vec![r, 1],
            rg,
            Op::Cosine {
                a: a.0,
                b: b.0,
                na,
                nb,
                dot,
            },
        ))
    }

    /// Sum of all entries, as a `[1, 1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(vec![s], vec![1, 1], rg, Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).numel() == 0 {
            return Err(TensorError::Invalid {
                op: "mse",
                reason: "empty batch".into(),
            });
        }
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar; afterwards [`Graph::grad`] holds
    /// `∂loss/∂node` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape.clone()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].value.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> Option<&'g mut Vec<f64>> {
            if !nodes[i].value.requires_grad {
                return None;
            }
            Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]))
        }
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (g, d) in ga.iter_mut().zip(matmul_nt(&gy, &tb.data, m, n, k)) {
                            *g += d;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for (g, d) in gb.iter_mut().zip(matmul_tn(&ta.data, &gy, m, k, n)) {
                            *g += d;
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (g, d) in ga.iter_mut().zip(&gy) {
                            *g += d;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for (g, d) in gb.iter_mut().zip(&gy) {
                            *g += sign * d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((g, d), y) in ga.iter_mut().zip(&gy).zip(&tb.data) {
                            *g += d * y;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for ((g, d), x) in gb.iter_mut().zip(&gy).zip(&ta.data) {
                            *g += d * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (g, d) in ga.iter_mut().zip(&gy) {
                            *g += c * d;
                        }
                    }
                }
                Op::RepeatRows(a) => {
                    let c = val(*a).numel();
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for row in gy.chunks(c) {
                            for (g, d) in ga.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let xs = &val(*a).data;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((g, d), x) in ga.iter_mut().zip(&gy).zip(xs) {
                            if *x > 0.0 {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    let ys = &node.value.data;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((g, d), y) in ga.iter_mut().zip(&gy).zip(ys) {
                            *g += d * (1.0 - y * y);
                        }
                    }
                }
                Op::Square(a) => {
                    let xs = &val(*a).data;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((g, d), x) in ga.iter_mut().zip(&gy).zip(xs) {
                            *g += 2.0 * x * d;
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let c = inv_std.len();
                    let r = xhat.len() / c;
                    let gam = &val(*gamma).data;
                    let mut sum_d = vec![0.0; c];
                    let mut sum_dx = vec![0.0; c];
                    for (i, d) in gy.iter().enumerate() {
                        sum_d[i % c] += d;
                        sum_dx[i % c] += d * xhat[i];
                    }
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        for (g, s) in gg.iter_mut().zip(&sum_dx) {
                            *g += s;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        for (g, s) in gb.iter_mut().zip(&sum_d) {
                            *g += s;
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let rf = r as f64;
                        for (i, g) in gx.iter_mut().enumerate() {
                            let j = i % c;
                            *g += if *train {
                                gam[j] * inv_std[j] * (gy[i] - sum_d[j] / rf - xhat[i] * sum_dx[j] / rf)
                            } else {
                                gam[j] * inv_std[j] * gy[i]
                            };
                        }
                    }
                }
                Op::Conv1d { x, w, b, k } => {
                    let (tx, tw) = (val(*x), val(*w));
                    let (cin, cout) = (tx.cols(), tw.cols());
                    let lo = node.value.rows();
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for row in gy.chunks(cout) {
                            for (g, d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                    let kc = k * cin;
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        let dw = if *k == 1 {
                            matmul_tn(&tx.data, &gy, lo, cin, cout)
                        } else {
                            let cols: Vec<f64> =
                                (0..lo).flat_map(|t| tx.data[t * cin..(t + k) * cin].iter().copied()).collect();
                            matmul_tn(&cols, &gy, lo, kc, cout)
                        };
                        for (g, d) in gw.iter_mut().zip(dw) {
                            *g += d;
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let dcols = matmul_nt(&gy, &tw.data, lo, cout, kc);
                        for t in 0..lo {
                            for (g, d) in gx[t * cin..(t + k) * cin].iter_mut().zip(&dcols[t * kc..(t + 1) * kc]) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::GatherMean { x, lists } => {
                    let c = val(*x).cols();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (s, list) in lists.iter().enumerate() {
                            let inv = 1.0 / list.len() as f64;
                            let row = &gy[s * c..(s + 1) * c];
                            for &i in list {
                                for (g, d) in gx[i * c..(i + 1) * c].iter_mut().zip(row) {
                                    *g += d * inv;
                                }
                            }
                        }
                    }
                }
                Op::RowMean(x) => {
                    let c = val(*x).cols();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (i, g) in gx.iter_mut().enumerate() {
                            *g += gy[i / c] / c as f64;
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (r, c) = (y.rows(), y.cols());
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let (outer, inner, so, si) = if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                        for o in 0..outer {
                            let idx = |i: usize| o * so + i * si;
                            let dot: f64 = (0..inner).map(|i| gy[idx(i)] * y.data[idx(i)]).sum();
                            for i in 0..inner {
                                gx[idx(i)] += y.data[idx(i)] * (gy[idx(i)] - dot);
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        if let Some(gp) = slot(&mut grads, nodes, p) {
                            for (i, row) in gp.chunks_mut(c).enumerate() {
                                for (g, d) in row.iter_mut().zip(&gy[i * total + off..i * total + off + c]) {
                                    *g += d;
                                }
                            }
                        }
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        if let Some(gp) = slot(&mut grads, nodes, p) {
                            for (g, d) in gp.iter_mut().zip(&gy[off..off + n]) {
                                *g += d;
                            }
                        }
                        off += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = val(*x).cols();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (g, d) in gx[start * c..start * c + gy.len()].iter_mut().zip(&gy) {
                            *g += d;
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let c = val(*x).cols();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (o, &i) in idx.iter().enumerate() {
                            for (g, d) in gx[i * c..(i + 1) * c].iter_mut().zip(&gy[o * c..(o + 1) * c]) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (g, d) in gx.iter_mut().zip(&gy) {
                            *g += d;
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (val(*x).rows(), val(*x).cols());
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += gy[j * r + i];
                            }
                        }
                    }
                }
                Op::Cosine { a, b, na, nb, dot } => {
                    let (ta, tb) = (val(*a), val(*b));
                    let d = ta.cols();
                    for (which, this, other, n_this, n_other) in [(*a, ta, tb, na, nb), (*b, tb, ta, nb, na)] {
                        if let Some(g) = slot(&mut grads, nodes, which) {
                            for i in 0..ta.rows() {
                                let den = n_this[i] * n_other[i] + COSINE_EPS;
                                let radial = if n_this[i] > 0.0 {
                                    dot[i] * n_other[i] / (den * den * n_this[i])
                                } else {
                                    0.0
                                };
                                for j in 0..d {
                                    g[i * d + j] +=
                                        gy[i] * (other.data[i * d + j] / den - radial * this.data[i * d + j]);
                                }
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for g in gx.iter_mut() {
                            *g += gy[0];
                        }
                    }
                }
            }
            grads[id] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of every parameter node into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.add_grad(*id, g);
            }
        }
    }
}
