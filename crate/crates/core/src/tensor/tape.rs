//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value and enough
//! saved state to run its vector-Jacobian product. Nodes are appended in
//! evaluation order, so the list is already topologically sorted and the
//! backward sweep is a single reverse pass that visits each node once.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddN(Vec<Var>),
    SoftmaxRows(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SumAxis { x: Var, axis: usize, scale: f64 },
    SumAll(Var),
    Outer(Var, Var),
    Reshape(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Pick { x: Var, index: usize },
    EdgeMessages { emb: Var, lag: Var, edges: Arc<[(usize, usize)]> },
    EdgeAggregate { mes: Var, edges: Arc<[(usize, usize)]> },
    EdgeMessageAggregate { emb: Var, lag: Var, edges: Arc<[(usize, usize)]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records primitives for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    /// A tape in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape in training mode; dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(var);
        if t.rank() != 2 {
            return Err(Error::shape(op, t.shape(), &[0, 0]));
        }
        Ok((t.rows(), t.cols()))
    }

    fn matmul_general(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (ra, ca) = self.matrix_dims(a, "matmul")?;
        let (rb, cb) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if a_t { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if b_t { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            a_t,
            self.value(b).data(),
            b_t,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, a_t, b_t }, &[a, b]))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims(a, "transpose")?;
        let value = self.value(a).transpose();
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::Contract("add_n of zero tensors".into()))?;
        let mut value = self.value(first).clone();
        for &v in &vars[1..] {
            self.same_shape(first, v, "add_n")?;
            value
                .data_mut()
                .iter_mut()
                .zip(self.value(v).data())
                .for_each(|(a, b)| *a += b);
        }
        Ok(self.push(value, Op::AddN(vars.to_vec()), vars))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(a, "softmax_rows")?;
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Row-wise layer normalization with learnable per-feature scale and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).numel() != n {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for c in 0..n {
                let h = (row[c] - mean) * s;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout. Identity in evaluation mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(vars.len());
        for &v in vars {
            let (rows, cols) = self.matrix_dims(v, "concat_cols")?;
            if rows != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(v)));
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&v, &w) in vars.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], out)?;
        Ok(self.push(value, Op::ConcatCols(vars.to_vec()), vars))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut shape = vec![vars.len()];
        shape.extend_from_slice(self.shape(first));
        let mut out = Vec::with_capacity(shape.iter().product());
        for &v in vars {
            self.same_shape(first, v, "stack")?;
            out.extend_from_slice(self.value(v).data());
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Stack(vars.to_vec()), vars))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let value = Tensor::new(vec![m, w], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, scale_by_len: bool) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "reduce_axis")?;
        let src = self.value(x).data();
        let (shape, out, scale) = match axis {
            0 => {
                let s = if scale_by_len { 1.0 / m as f64 } else { 1.0 };
                let mut out = vec![0.0; n];
                for row in src.chunks(n) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                out.iter_mut().for_each(|o| *o *= s);
                (vec![1, n], out, s)
            }
            1 => {
                let s = if scale_by_len { 1.0 / n as f64 } else { 1.0 };
                let out = src.chunks(n).map(|row| row.iter().sum::<f64>() * s).collect();
                (vec![m, 1], out, s)
            }
            _ => return Err(Error::shape("reduce_axis", self.shape(x), &[axis])),
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumAxis { x, axis, scale }, &[x]))
    }

    /// Sum over `axis` of a matrix, keeping the reduced axis with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Outer product of two vectors (any shape, read flat).
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let value = Tensor::matrix_from_fn(x.len(), y.len(), |i, j| x[i] * y[j]);
        self.push(value, Op::Outer(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Column-wise maximum over rows, `m×n → 1×n`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "max_rows")?;
        let src = self.value(x).data();
        let mut argmax = vec![0usize; n];
        let mut out = src[..n].to_vec();
        for r in 1..m {
            for c in 0..n {
                if src[r * n + c] > out[c] {
                    out[c] = src[r * n + c];
                    argmax[c] = r;
                }
            }
        }
        let value = Tensor::new(vec![1, n], out)?;
        Ok(self.push(value, Op::MaxRows { x, argmax }, &[x]))
    }

    /// Negative log-softmax probability of `label`, on a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + total.ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - log_norm).exp()).collect();
        let loss = log_norm - z[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Single element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self.value(x).data().get(index).ok_or_else(|| {
            Error::Contract(format!("index {index} out of range for {:?}", self.shape(x)))
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, &[x]))
    }

    /// Per directed edge `(i, j)` and window `w`, the flattened outer product
    /// of the source embedding `emb[w, j, :]` (length D) with the edge's lag
    /// activation `lag[e, w, :]` (length k).
    ///
    /// `emb` is `[W, R, D]`, `lag` holds `E·W·k` values in `[E, W, k]` order,
    /// output is `[E, W, D·k]` with index `a·k + b`.
    pub fn edge_messages(&mut self, emb: Var, lag: Var, edges: &Arc<[(usize, usize)]>) -> Result<Var> {
        let es = self.shape(emb).to_vec();
        if es.len() != 3 {
            return Err(Error::shape("edge_messages", &es, self.shape(lag)));
        }
        let (w_count, r, d) = (es[0], es[1], es[2]);
        let e_count = edges.len();
        if e_count == 0 || self.value(lag).numel() % (e_count * w_count) != 0 {
            return Err(Error::shape("edge_messages", &es, self.shape(lag)));
        }
        let k = self.value(lag).numel() / (e_count * w_count);
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= r || j >= r) {
            return Err(Error::Contract(format!(
                "edge ({i}, {j}) out of range for {r} nodes"
            )));
        }
        let (ev, lv) = (self.value(emb).data(), self.value(lag).data());
        let mut out = vec![0.0; e_count * w_count * d * k];
        for (e, &(_, j)) in edges.iter().enumerate() {
            for w in 0..w_count {
                let src = &ev[(w * r + j) * d..(w * r + j + 1) * d];
                let l = &lv[(e * w_count + w) * k..(e * w_count + w + 1) * k];
                let dst = &mut out[(e * w_count + w) * d * k..(e * w_count + w + 1) * d * k];
                for (a, &sv) in src.iter().enumerate() {
                    for (b, &lb) in l.iter().enumerate() {
                        dst[a * k + b] = sv * lb;
                    }
                }
            }
        }
        let value = Tensor::new(vec![e_count, w_count, d * k], out)?;
        Ok(self.push(
            value,
            Op::EdgeMessages {
                emb,
                lag,
                edges: Arc::clone(edges),
            },
            &[emb, lag],
        ))
    }

    /// Window-averaged messages summed into each edge's target node:
    /// `out[i] = Σ_{(i,j)} (1/W) Σ_w mes[(i,j), w]`, giving `[nodes, F]`.
    pub fn edge_aggregate(&mut self, mes: Var, edges: &Arc<[(usize, usize)]>, nodes: usize) -> Result<Var> {
        let ms = self.shape(mes).to_vec();
        if ms.len() != 3 || ms[0] != edges.len() {
            return Err(Error::shape("edge_aggregate", &ms, &[edges.len()]));
        }
        let (w_count, f) = (ms[1], ms[2]);
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= nodes || j >= nodes) {
            return Err(Error::Contract(format!(
                "edge ({i}, {j}) out of range for {nodes} nodes"
            )));
        }
        let inv_w = 1.0 / w_count as f64;
        let mv = self.value(mes).data();
        let mut out = vec![0.0; nodes * f];
        for (e, &(i, _)) in edges.iter().enumerate() {
            let dst = &mut out[i * f..(i + 1) * f];
            for w in 0..w_count {
                let src = &mv[(e * w_count + w) * f..(e * w_count + w + 1) * f];
                dst.iter_mut().zip(src).for_each(|(o, s)| *o += s * inv_w);
            }
        }
        let value = Tensor::new(vec![nodes, f], out)?;
        Ok(self.push(
            value,
            Op::EdgeAggregate {
                mes,
                edges: Arc::clone(edges),
            },
            &[mes],
        ))
    }

    /// `edge_aggregate(edge_messages(emb, lag))` without materializing the
    /// `[E, W, D·k]` message tensor.
    pub fn edge_message_aggregate(&mut self, emb: Var, lag: Var, edges: &Arc<[(usize, usize)]>) -> Result<Var> {
        let es = self.shape(emb).to_vec();
        if es.len() != 3 {
            return Err(Error::shape("edge_message_aggregate", &es, self.shape(lag)));
        }
        let (w_count, r, d) = (es[0], es[1], es[2]);
        let e_count = edges.len();
        if e_count == 0 || self.value(lag).numel() % (e_count * w_count) != 0 {
            return Err(Error::shape("edge_message_aggregate", &es, self.shape(lag)));
        }
        let k = self.value(lag).numel() / (e_count * w_count);
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= r || j >= r) {
            return Err(Error::Contract(format!(
                "edge ({i}, {j}) out of range for {r} nodes"
            )));
        }
        let inv_w = 1.0 / w_count as f64;
        let (ev, lv) = (self.value(emb).data(), self.value(lag).data());
        let mut out = vec![0.0; r * d * k];
        let mut gathered = Vec::new();
        for (i, run) in target_runs(edges) {
            gather_sources(ev, edges, run.clone(), w_count, r, d, inv_w, &mut gathered);
            let n = run.len() * w_count;
            let l = &lv[run.start * w_count * k..run.end * w_count * k];
            gemm(d, n, k, &gathered, true, l, false, &mut out[i * d * k..(i + 1) * d * k], true);
        }
        let value = Tensor::new(vec![r, d * k], out)?;
        Ok(self.push(
            value,
            Op::EdgeMessageAggregate {
                emb,
                lag,
                edges: Arc::clone(edges),
            },
            &[emb, lag],
        ))
    }

    /// Reverse sweep from a scalar output; returns gradients of every leaf
    /// that requires one.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        let mut leaf_grads: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        leaf_grads.resize_with(output.0 + 1, || None);
        if out.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            } else {
                self.propagate(node, &g, &mut grads);
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Lazily materializes the gradient buffer of `v` if it needs one.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, a_t, b_t } => {
                let (ra, ca) = (self.value(a).rows(), self.value(a).cols());
                let (rb, cb) = (self.value(b).rows(), self.value(b).cols());
                let (m, k) = if a_t { (ca, ra) } else { (ra, ca) };
                let n = if b_t { rb } else { cb };
                if let Some(da) = self.slot(grads, a) {
                    if a_t {
                        gemm(k, n, m, val(b), b_t, g, true, da, true);
                    } else {
                        gemm(m, n, k, g, false, val(b), !b_t, da, true);
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    if b_t {
                        gemm(n, m, k, g, true, val(a), a_t, db, true);
                    } else {
                        gemm(k, m, n, val(a), !a_t, g, false, db, true);
                    }
                }
            }
            &Op::Transpose(a) => {
                if let Some(da) = self.slot(grads, a) {
                    let (r, c) = (self.value(a).rows(), self.value(a).cols());
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(d) = self.slot(grads, b) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(d) = self.slot(grads, a) {
                    for ((x, y), o) in d.iter_mut().zip(g).zip(val(b)) {
                        *x += y * o;
                    }
                }
                if let Some(d) = self.slot(grads, b) {
                    for ((x, y), o) in d.iter_mut().zip(g).zip(val(a)) {
                        *x += y * o;
                    }
                }
            }
            &Op::Scale(a, factor) => {
                if let Some(d) = self.slot(grads, a) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
                }
            }
            &Op::AddRow(x, bias) => {
                if let Some(d) = self.slot(grads, x) {
                    d.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(d) = self.slot(grads, bias) {
                    let n = d.len();
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::AddN(vars) => {
                for &v in vars {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                if let Some(d) = self.slot(grads, a) {
                    let n = node.value.cols();
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((x, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (gy - dot);
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                if let Some(d) = self.slot(grads, a) {
                    for ((x, y), &inp) in d.iter_mut().zip(g).zip(val(a)) {
                        *x += y * gelu_grad(inp);
                    }
                }
            }
            &Op::Relu(a) => {
                if let Some(d) = self.slot(grads, a) {
                    for ((x, y), &inp) in d.iter_mut().zip(g).zip(val(a)) {
                        if inp > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gam = val(*gamma);
                if let Some(d) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            d[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *beta) {
                    for grow in g.chunks(n) {
                        d.iter_mut().zip(grow).for_each(|(p, q)| *p += q);
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; n];
                    for (r, ((drow, grow), hrow)) in d
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        for c in 0..n {
                            dh[c] = grow[c] * gam[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for c in 0..n {
                            drow[c] += rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((p, q), m) in d.iter_mut().zip(g).zip(mask) {
                        *p += q * m;
                    }
                }
            }
            Op::ConcatCols(vars) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &v in vars {
                    let w = self.value(v).cols();
                    if let Some(d) = self.slot(grads, v) {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            drow.iter_mut()
                                .zip(&grow[offset..offset + w])
                                .for_each(|(p, q)| *p += q);
                        }
                    }
                    offset += w;
                }
            }
            Op::Stack(vars) => {
                for (&v, chunk) in vars.iter().zip(g.chunks(g.len() / vars.len())) {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(chunk).for_each(|(p, q)| *p += q);
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if let Some(d) = self.slot(grads, x) {
                    let n = self.value(x).cols();
                    let w = node.value.cols();
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(w)) {
                        drow[start..start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(p, q)| *p += q);
                    }
                }
            }
            &Op::SumAxis { x, axis, scale } => {
                if let Some(d) = self.slot(grads, x) {
                    let n = self.value(x).cols();
                    for (r, drow) in d.chunks_mut(n).enumerate() {
                        for (c, p) in drow.iter_mut().enumerate() {
                            *p += scale * if axis == 0 { g[c] } else { g[r] };
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                if let Some(d) = self.slot(grads, x) {
                    d.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            &Op::Outer(a, b) => {
                let (x, y) = (val(a), val(b));
                let n = y.len();
                if let Some(d) = self.slot(grads, a) {
                    for (i, p) in d.iter_mut().enumerate() {
                        *p += g[i * n..(i + 1) * n].iter().zip(y).map(|(q, r)| q * r).sum::<f64>();
                    }
                }
                if let Some(d) = self.slot(grads, b) {
                    for (i, &xv) in x.iter().enumerate() {
                        d.iter_mut()
                            .zip(&g[i * n..(i + 1) * n])
                            .for_each(|(p, q)| *p += q * xv);
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, x) {
                    d.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
            Op::MaxRows { x, argmax } => {
                if let Some(d) = self.slot(grads, *x) {
                    let n = argmax.len();
                    for (c, &r) in argmax.iter().enumerate() {
                        d[r * n + c] += g[c];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(d) = self.slot(grads, *logits) {
                    for (c, (p, q)) in d.iter_mut().zip(probs).enumerate() {
                        let target = if c == *label { 1.0 } else { 0.0 };
                        *p += g[0] * (q - target);
                    }
                }
            }
            &Op::Pick { x, index } => {
                if let Some(d) = self.slot(grads, x) {
                    d[index] += g[0];
                }
            }
            Op::EdgeMessages { emb, lag, edges } => {
                let es = self.shape(*emb);
                let (w_count, r, d_dim) = (es[0], es[1], es[2]);
                let k = node.value.shape()[2] / d_dim;
                let (ev, lv) = (val(*emb), val(*lag));
                if let Some(de) = self.slot(grads, *emb) {
                    for (e, &(_, j)) in edges.iter().enumerate() {
                        for w in 0..w_count {
                            let base = (e * w_count + w) * d_dim * k;
                            let l = &lv[(e * w_count + w) * k..(e * w_count + w + 1) * k];
                            let dst = &mut de[(w * r + j) * d_dim..(w * r + j + 1) * d_dim];
                            for (a, p) in dst.iter_mut().enumerate() {
                                let gs = &g[base + a * k..base + (a + 1) * k];
                                *p += gs.iter().zip(l).map(|(q, s)| q * s).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(dl) = self.slot(grads, *lag) {
                    for (e, &(_, j)) in edges.iter().enumerate() {
                        for w in 0..w_count {
                            let base = (e * w_count + w) * d_dim * k;
                            let src = &ev[(w * r + j) * d_dim..(w * r + j + 1) * d_dim];
                            let dst = &mut dl[(e * w_count + w) * k..(e * w_count + w + 1) * k];
                            for (a, &sv) in src.iter().enumerate() {
                                for (b, p) in dst.iter_mut().enumerate() {
                                    *p += g[base + a * k + b] * sv;
                                }
                            }
                        }
                    }
                }
            }
            Op::EdgeMessageAggregate { emb, lag, edges } => {
                let es = self.shape(*emb);
                let (w_count, r, d_dim) = (es[0], es[1], es[2]);
                let k = node.value.shape()[1] / d_dim;
                let inv_w = 1.0 / w_count as f64;
                let (ev, lv) = (val(*emb), val(*lag));
                let mut gathered = Vec::new();
                let mut scratch = Vec::new();
                for (i, run) in target_runs(edges) {
                    let gi = &g[i * d_dim * k..(i + 1) * d_dim * k];
                    let n = run.len() * w_count;
                    if let Some(dl) = self.slot(grads, *lag) {
                        gather_sources(ev, edges, run.clone(), w_count, r, d_dim, inv_w, &mut gathered);
                        let dst = &mut dl[run.start * w_count * k..run.end * w_count * k];
                        gemm(n, d_dim, k, &gathered, false, gi, false, dst, true);
                    }
                    if let Some(de) = self.slot(grads, *emb) {
                        let l = &lv[run.start * w_count * k..run.end * w_count * k];
                        scratch.resize(n * d_dim, 0.0);
                        gemm(n, k, d_dim, l, false, gi, true, &mut scratch, false);
                        for (slot, e) in run.clone().enumerate() {
                            let j = edges[e].1;
                            for w in 0..w_count {
                                let src = &scratch[(slot * w_count + w) * d_dim..(slot * w_count + w + 1) * d_dim];
                                let dst = &mut de[(w * r + j) * d_dim..(w * r + j + 1) * d_dim];
                                dst.iter_mut().zip(src).for_each(|(p, q)| *p += inv_w * q);
                            }
                        }
                    }
                }
            }
            Op::EdgeAggregate { mes, edges } => {
                if let Some(d) = self.slot(grads, *mes) {
                    let ms = self.shape(*mes);
                    let (w_count, f) = (ms[1], ms[2]);
                    let inv_w = 1.0 / w_count as f64;
                    for (e, &(i, _)) in edges.iter().enumerate() {
                        let src = &g[i * f..(i + 1) * f];
                        for w in 0..w_count {
                            let dst = &mut d[(e * w_count + w) * f..(e * w_count + w + 1) * f];
                            dst.iter_mut().zip(src).for_each(|(p, q)| *p += q * inv_w);
                        }
                    }
                }
            }
        }
    }
}

/// Maximal runs of consecutive edges sharing a target node.
fn target_runs(edges: &[(usize, usize)]) -> Vec<(usize, std::ops::Range<usize>)> {
    let mut runs: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
    for (e, &(i, _)) in edges.iter().enumerate() {
        match runs.last_mut() {
            Some((t, r)) if *t == i => r.end = e + 1,
            _ => runs.push((i, e..e + 1)),
        }
    }
    runs
}

/// Rows `scale · emb[w, j]` for every edge `(·, j)` in `run` and window
/// `w`, stacked edge-major into `out` (`run.len()·W × D`).
#[allow(clippy::too_many_arguments)]
fn gather_sources(
    emb: &[f64],
    edges: &[(usize, usize)],
    run: std::ops::Range<usize>,
    w_count: usize,
    r: usize,
    d: usize,
    scale: f64,
    out: &mut Vec<f64>,
) {
    out.clear();
    for e in run {
        let j = edges[e].1;
        for w in 0..w_count {
            out.extend(emb[(w * r + j) * d..(w * r + j + 1) * d].iter().map(|v| v * scale));
        }
    }
}
