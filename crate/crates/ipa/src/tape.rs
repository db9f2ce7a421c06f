//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every primitive records enough of its inputs to replay an adjoint rule;
//! `backward` sweeps the tape once in reverse topological order (tape order
//! is already topological because ops can only reference earlier nodes).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Broadcast-add a row vector over every row of a matrix.
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    GatherRows { src: usize, idx: Vec<usize> },
    /// Pick one element per row: out[i] = src[i, idx[i]].
    TakePerRow { src: usize, idx: Vec<usize> },
    Softmax(usize),
    LogSoftmax(usize),
    RowSum(usize),
    SumAll(usize),
    MeanAll(usize),
    Scale { src: usize, factor: f64 },
    ConcatCols(usize, usize),
    SliceCols { src: usize, start: usize, len: usize },
    Gelu(usize),
    LayerNorm { src: usize, gain: usize, bias: usize, eps: f64 },
    Exp(usize),
    Clamp { src: usize, lo: f64, hi: f64 },
    /// Elementwise minimum; ties route the gradient to the first argument.
    Min2(usize, usize),
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to trainable leaves. Leaves that
/// did not participate in the loss map to zero tensors.
pub struct GradMap<E: Element> {
    grads: HashMap<usize, Tensor<E>>,
}

impl<E: Element> GradMap<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(&v.0)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += a_ip * row[j];
            }
        }
    }
    c
}

fn transpose_raw<E: Element>(a: &[E], m: usize, n: usize) -> Vec<E> {
    let mut t = vec![E::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn softmax_rows<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::ZERO;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] = out[r * cols + j] / sum;
        }
    }
    out
}

fn log_softmax_rows<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::ZERO;
        for &v in row {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for j in 0..cols {
            out[r * cols + j] = row[j] - lse;
        }
    }
    out
}

fn gelu_val<E: Element>(x: E) -> E {
    // tanh approximation; smooth, so finite differences stay well-behaved
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (E::ONE + u.tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4);
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * k * x * x)
}

fn acc<E: Element>(slot: &mut Option<Vec<E>>, numel: usize) -> &mut Vec<E> {
    slot.get_or_insert_with(|| vec![E::ZERO; numel])
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Register a trainable parameter leaf.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf { trainable: true }, true)
    }

    /// Register a constant; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf { trainable: false }, false)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::Mul(a.0, b.0), ng))
    }

    /// `a` is `[rows, n]`, `row` is `[n]`; adds `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (rows, n) = (self.value(a).rows(), self.value(a).cols());
        if self.value(row).shape() != [n] {
            return Err(Error::Shape(format!(
                "add_row: matrix cols {} vs row shape {:?}",
                n,
                self.value(row).shape()
            )));
        }
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for r in 0..rows {
            for j in 0..n {
                data[r * n + j] += rv[j];
            }
        }
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(row.0);
        Ok(self.push(t, Op::AddRow(a.0, row.0), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::from_vec(vec![m, n], data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::MatMul(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(Error::Shape(format!("transpose: {sa:?}")));
        }
        let (m, n) = (sa[0], sa[1]);
        let data = transpose_raw(self.value(a).data(), m, n);
        let t = Tensor::from_vec(vec![n, m], data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Transpose(a.0), ng))
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(src).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows: {s:?}")));
        }
        let (rows, n) = (s[0], s[1]);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("gather_rows: row {i} of {rows}")));
            }
            data.extend_from_slice(&self.value(src).data()[i * n..(i + 1) * n]);
        }
        let t = Tensor::from_vec(vec![idx.len(), n], data)?;
        let ng = self.needs(src.0);
        Ok(self.push(
            t,
            Op::GatherRows {
                src: src.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn take_per_row(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(src).shape();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::Shape(format!(
                "take_per_row: {s:?} with {} indices",
                idx.len()
            )));
        }
        let n = s[1];
        let mut data = Vec::with_capacity(idx.len());
        for (r, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::Index(format!("take_per_row: col {j} of {n}")));
            }
            data.push(self.value(src).data()[r * n + j]);
        }
        let t = Tensor::from_vec(vec![idx.len()], data)?;
        let ng = self.needs(src.0);
        Ok(self.push(
            t,
            Op::TakePerRow {
                src: src.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        let data = softmax_rows(self.value(a).data(), rows, cols);
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Softmax(a.0), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        let data = log_softmax_rows(self.value(a).data(), rows, cols);
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::LogSoftmax(a.0), ng))
    }

    /// Sum over the last axis: `[rows, n] -> [rows]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("row_sum: {s:?}")));
        }
        let (rows, n) = (s[0], s[1]);
        let mut data = vec![E::ZERO; rows];
        for r in 0..rows {
            for j in 0..n {
                data[r] += self.value(a).data()[r * n + j];
            }
        }
        let t = Tensor::from_vec(vec![rows], data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::RowSum(a.0), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut s = E::ZERO;
        for &v in self.value(a).data() {
            s += v;
        }
        let ng = self.needs(a.0);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a.0), ng))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Shape("mean_all: empty tensor".into()));
        }
        let mut s = E::ZERO;
        for &v in self.value(a).data() {
            s += v;
        }
        let m = s / E::from_f64(n as f64);
        let ng = self.needs(a.0);
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(a.0), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = E::from_f64(factor);
        let t = self.value(a).map(|v| v * f);
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Scale { src: a.0, factor }, ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape(format!("concat_cols: {sa:?} vs {sb:?}")));
        }
        let (rows, na, nb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).data()[r * na..(r + 1) * na]);
            data.extend_from_slice(&self.value(b).data()[r * nb..(r + 1) * nb]);
        }
        let t = Tensor::from_vec(vec![rows, na + nb], data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::ConcatCols(a.0, b.0), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("slice_cols: {s:?}")));
        }
        let (rows, n) = (s[0], s[1]);
        if start + len > n {
            return Err(Error::Index(format!(
                "slice_cols: {start}..{} of {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).data()[r * n + start..r * n + start + len]);
        }
        let t = Tensor::from_vec(vec![rows, len], data)?;
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::SliceCols { src: a.0, start, len }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(gelu_val);
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Gelu(a.0), ng))
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, n) = (self.value(a).rows(), self.value(a).cols());
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: cols {} vs gain {:?} / bias {:?}",
                n,
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let epe = E::from_f64(eps);
        let inv_n = E::from_f64(1.0 / n as f64);
        let mut data = vec![E::ZERO; rows * n];
        for r in 0..rows {
            let row = &self.value(a).data()[r * n..(r + 1) * n];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = E::ONE / (var + epe).sqrt();
            for j in 0..n {
                let xh = (row[j] - mean) * inv_std;
                data[r * n + j] = self.value(gain).data()[j] * xh + self.value(bias).data()[j];
            }
        }
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(gain.0) || self.needs(bias.0);
        Ok(self.push(
            t,
            Op::LayerNorm {
                src: a.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            ng,
        ))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.exp());
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Exp(a.0), ng))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Domain(format!("clamp: lo {lo} > hi {hi}")));
        }
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        let t = self.value(a).map(|v| {
            if v < l {
                l
            } else if v > h {
                h
            } else {
                v
            }
        });
        let ng = self.needs(a.0);
        Ok(self.push(t, Op::Clamp { src: a.0, lo, hi }, ng))
    }

    pub fn min2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "min2")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let t = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, Op::Min2(a.0, b.0), ng))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// trainable leaf on the tape (zeros for leaves the loss does not reach).
    pub fn backward(&self, loss: Var) -> Result<GradMap<E>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![E::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dz) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    adj[i] = Some(dz); // keep for extraction below
                }
                Op::Add(a, b) => {
                    for &p in [a, b].iter() {
                        if self.needs(*p) {
                            let g = acc(&mut adj[*p], dz.len());
                            for (gi, &d) in g.iter_mut().zip(&dz) {
                                *gi += d;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        let g = acc(&mut adj[*a], dz.len());
                        for (gi, &d) in g.iter_mut().zip(&dz) {
                            *gi += d;
                        }
                    }
                    if self.needs(*b) {
                        let g = acc(&mut adj[*b], dz.len());
                        for (gi, &d) in g.iter_mut().zip(&dz) {
                            *gi -= d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let bv = self.nodes[b].value.data();
                        let g = acc(&mut adj[a], dz.len());
                        for j in 0..dz.len() {
                            g[j] += dz[j] * bv[j];
                        }
                    }
                    if self.needs(b) {
                        let av = self.nodes[a].value.data();
                        let g = acc(&mut adj[b], dz.len());
                        for j in 0..dz.len() {
                            g[j] += dz[j] * av[j];
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let n = self.nodes[row].value.numel();
                    if self.needs(a) {
                        let g = acc(&mut adj[a], dz.len());
                        for (gi, &d) in g.iter_mut().zip(&dz) {
                            *gi += d;
                        }
                    }
                    if self.needs(row) {
                        let g = acc(&mut adj[row], n);
                        for (j, &d) in dz.iter().enumerate() {
                            g[j % n] += d;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let s = self.nodes[a].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[b].value.shape()[1];
                    if self.needs(a) {
                        // dA = dC . B^T
                        let bt = transpose_raw(self.nodes[b].value.data(), k, n);
                        let da = matmul_raw(&dz, &bt, m, n, k);
                        let g = acc(&mut adj[a], m * k);
                        for (gi, d) in g.iter_mut().zip(da) {
                            *gi += d;
                        }
                    }
                    if self.needs(b) {
                        // dB = A^T . dC
                        let at = transpose_raw(self.nodes[a].value.data(), m, k);
                        let db = matmul_raw(&at, &dz, k, m, n);
                        let g = acc(&mut adj[b], k * n);
                        for (gi, d) in g.iter_mut().zip(db) {
                            *gi += d;
                        }
                    }
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let s = self.nodes[i].value.shape();
                    let (m, n) = (s[0], s[1]); // output shape
                    if self.needs(a) {
                        let dt = transpose_raw(&dz, m, n);
                        let g = acc(&mut adj[a], m * n);
                        for (gi, d) in g.iter_mut().zip(dt) {
                            *gi += d;
                        }
                    }
                }
                Op::GatherRows { src, idx } => {
                    let src = *src;
                    if self.needs(src) {
                        let n = self.nodes[src].value.cols();
                        let numel = self.nodes[src].value.numel();
                        let g = acc(&mut adj[src], numel);
                        for (r, &row) in idx.iter().enumerate() {
                            for j in 0..n {
                                g[row * n + j] += dz[r * n + j];
                            }
                        }
                    }
                }
                Op::TakePerRow { src, idx } => {
                    let src = *src;
                    if self.needs(src) {
                        let n = self.nodes[src].value.cols();
                        let numel = self.nodes[src].value.numel();
                        let g = acc(&mut adj[src], numel);
                        for (r, &col) in idx.iter().enumerate() {
                            g[r * n + col] += dz[r];
                        }
                    }
                }
                Op::Softmax(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let s = self.nodes[i].value.data();
                        let (rows, cols) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                        let g = acc(&mut adj[a], rows * cols);
                        for r in 0..rows {
                            let srow = &s[r * cols..(r + 1) * cols];
                            let drow = &dz[r * cols..(r + 1) * cols];
                            let mut dot = E::ZERO;
                            for j in 0..cols {
                                dot += drow[j] * srow[j];
                            }
                            for j in 0..cols {
                                g[r * cols + j] += srow[j] * (drow[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let l = self.nodes[i].value.data();
                        let (rows, cols) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                        let g = acc(&mut adj[a], rows * cols);
                        for r in 0..rows {
                            let lrow = &l[r * cols..(r + 1) * cols];
                            let drow = &dz[r * cols..(r + 1) * cols];
                            let mut dsum = E::ZERO;
                            for &d in drow {
                                dsum += d;
                            }
                            for j in 0..cols {
                                g[r * cols + j] += drow[j] - lrow[j].exp() * dsum;
                            }
                        }
                    }
                }
                Op::RowSum(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let n = self.nodes[a].value.cols();
                        let numel = self.nodes[a].value.numel();
                        let g = acc(&mut adj[a], numel);
                        for r in 0..dz.len() {
                            for j in 0..n {
                                g[r * n + j] += dz[r];
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let numel = self.nodes[a].value.numel();
                        let g = acc(&mut adj[a], numel);
                        for gi in g.iter_mut() {
                            *gi += dz[0];
                        }
                    }
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let numel = self.nodes[a].value.numel();
                        let d = dz[0] * E::from_f64(1.0 / numel as f64);
                        let g = acc(&mut adj[a], numel);
                        for gi in g.iter_mut() {
                            *gi += d;
                        }
                    }
                }
                Op::Scale { src, factor } => {
                    let src = *src;
                    if self.needs(src) {
                        let f = E::from_f64(*factor);
                        let g = acc(&mut adj[src], dz.len());
                        for (gi, &d) in g.iter_mut().zip(&dz) {
                            *gi += d * f;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.nodes[a].value.cols();
                    let nb = self.nodes[b].value.cols();
                    let rows = self.nodes[a].value.rows();
                    if self.needs(a) {
                        let g = acc(&mut adj[a], rows * na);
                        for r in 0..rows {
                            for j in 0..na {
                                g[r * na + j] += dz[r * (na + nb) + j];
                            }
                        }
                    }
                    if self.needs(b) {
                        let g = acc(&mut adj[b], rows * nb);
                        for r in 0..rows {
                            for j in 0..nb {
                                g[r * nb + j] += dz[r * (na + nb) + na + j];
                            }
                        }
                    }
                }
                Op::SliceCols { src, start, len } => {
                    let (src, start, len) = (*src, *start, *len);
                    if self.needs(src) {
                        let n = self.nodes[src].value.cols();
                        let rows = self.nodes[src].value.rows();
                        let g = acc(&mut adj[src], rows * n);
                        for r in 0..rows {
                            for j in 0..len {
                                g[r * n + start + j] += dz[r * len + j];
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let xs = self.nodes[a].value.data();
                        let g = acc(&mut adj[a], dz.len());
                        for j in 0..dz.len() {
                            g[j] += dz[j] * gelu_grad(xs[j]);
                        }
                    }
                }
                Op::LayerNorm {
                    src,
                    gain,
                    bias,
                    eps,
                } => {
                    let (src, gain, bias, eps) = (*src, *gain, *bias, *eps);
                    let (rows, n) = (self.nodes[src].value.rows(), self.nodes[src].value.cols());
                    let inv_n = E::from_f64(1.0 / n as f64);
                    let epe = E::from_f64(eps);
                    let xs = self.nodes[src].value.data();
                    let gv = self.nodes[gain].value.data();
                    // recompute per-row statistics
                    for r in 0..rows {
                        let row = &xs[r * n..(r + 1) * n];
                        let drow = &dz[r * n..(r + 1) * n];
                        let mut mean = E::ZERO;
                        for &v in row {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = E::ZERO;
                        for &v in row {
                            let d = v - mean;
                            var += d * d;
                        }
                        var *= inv_n;
                        let inv_std = E::ONE / (var + epe).sqrt();
                        if self.needs(gain) {
                            let g = acc(&mut adj[gain], n);
                            for j in 0..n {
                                let xh = (row[j] - mean) * inv_std;
                                g[j] += drow[j] * xh;
                            }
                        }
                        if self.needs(bias) {
                            let g = acc(&mut adj[bias], n);
                            for j in 0..n {
                                g[j] += drow[j];
                            }
                        }
                        if self.needs(src) {
                            // dxh = dz * gain; dx = inv_std * (dxh - mean(dxh) - xh * mean(dxh * xh))
                            let mut mean_dxh = E::ZERO;
                            let mut mean_dxh_xh = E::ZERO;
                            for j in 0..n {
                                let xh = (row[j] - mean) * inv_std;
                                let dxh = drow[j] * gv[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh;
                            }
                            mean_dxh *= inv_n;
                            mean_dxh_xh *= inv_n;
                            let g = acc(&mut adj[src], rows * n);
                            for j in 0..n {
                                let xh = (row[j] - mean) * inv_std;
                                let dxh = drow[j] * gv[j];
                                g[r * n + j] += inv_std * (dxh - mean_dxh - xh * mean_dxh_xh);
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let ys = self.nodes[i].value.data();
                        let g = acc(&mut adj[a], dz.len());
                        for j in 0..dz.len() {
                            g[j] += dz[j] * ys[j];
                        }
                    }
                }
                Op::Clamp { src, lo, hi } => {
                    let (src, lo, hi) = (*src, *lo, *hi);
                    if self.needs(src) {
                        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
                        let xs = self.nodes[src].value.data();
                        let g = acc(&mut adj[src], dz.len());
                        for j in 0..dz.len() {
                            if xs[j] >= l && xs[j] <= h {
                                g[j] += dz[j];
                            }
                        }
                    }
                }
                Op::Min2(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    if self.needs(a) {
                        let g = acc(&mut adj[a], dz.len());
                        for j in 0..dz.len() {
                            if av[j] <= bv[j] {
                                g[j] += dz[j];
                            }
                        }
                    }
                    if self.needs(b) {
                        let g = acc(&mut adj[b], dz.len());
                        for j in 0..dz.len() {
                            if av[j] > bv[j] {
                                g[j] += dz[j];
                            }
                        }
                    }
                }
            }
        }

        let mut grads = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                let data = adj[i]
                    .take()
                    .unwrap_or_else(|| vec![E::ZERO; node.value.numel()]);
                grads.insert(
                    i,
                    Tensor::from_vec(node.value.shape().to_vec(), data).expect("leaf shape"),
                );
            }
        }
        Ok(GradMap { grads })
    }
}
