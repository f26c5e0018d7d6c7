//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the record once in reverse and consumes it; a
//! second call is rejected. Parameters live in a [`ParamStore`] that the
//! graph borrows, so building a graph never copies weights.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), rows * cols, "parameter {name} has wrong size");
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            rows,
            cols,
            data,
            trainable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Multiplier applied to one [`ScatterSource`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    Const(f64),
    /// Element `k` (row-major) of a graph value.
    Elem(Var, usize),
}

/// `out[dst] += weight * src[src_row]` for every `(src_row, dst)` pair.
#[derive(Debug, Clone)]
pub struct ScatterSource {
    pub src: Var,
    pub weight: Weight,
    pub pairs: Vec<(u32, u32)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Scatter(Vec<ScatterSource>),
}

#[derive(Debug)]
enum Data {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Data,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Single-use record of a forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    consumed: bool,
}

// C (+)= A * B for strided operands, via dgemm.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds row-major views of `a`, `b`
    // (checked by callers' shape logic) and `c` is an `m x n` buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
            consumed: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].data {
            Data::Owned(d) => d,
            Data::Param(id) => &self.params.get(*id).data,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            data: Data::Owned(data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable value.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "constant has wrong size");
        self.push(rows, cols, data, Op::Leaf, false)
    }

    /// Differentiable leaf, e.g. an input under a gradient check.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "input has wrong size");
        self.push(rows, cols, data, Op::Leaf, true)
    }

    /// Leaf view of a stored parameter, created once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.params.get(id);
        self.nodes.push(Node {
            rows: p.rows,
            cols: p.cols,
            data: Data::Param(id),
            op: Op::Leaf,
            needs_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        Ok(())
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, data, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, data, Op::Sub(a, b), ng))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: (r, c),
                rhs: self.shape(row),
            });
        }
        let b = self.value(row);
        let mut data = self.value(a).to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, y) in chunk.iter_mut().zip(b) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(r, c, data, Op::AddRow(a, row), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a, b]);
        Ok(self.push(r, c, data, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * s).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a]);
        self.push(r, c, data, Op::Scale(a, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, p) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: (n, k),
                rhs: (k2, p),
            });
        }
        let mut out = vec![0.0; n * p];
        gemm(n, k, p, self.value(a), k, 1, self.value(b), p, 1, &mut out, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(n, p, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (p, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                lhs: (n, k),
                rhs: (p, k2),
            });
        }
        let mut out = vec![0.0; n * p];
        gemm(n, k, p, self.value(a), k, 1, self.value(b), 1, k, &mut out, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(n, p, out, Op::MatMulBt(a, b), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut data = self.value(a).to_vec();
        if c > 0 {
            data.chunks_mut(c).for_each(softmax_in_place);
        }
        let ng = self.ng(&[a]);
        self.push(r, c, data, Op::SoftmaxRows(a), ng)
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut data = vec![0.0; r * c];
        let mut col = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = src[i * c + j];
            }
            softmax_in_place(&mut col);
            for i in 0..r {
                data[i * c + j] = col[i];
            }
        }
        let ng = self.ng(&[a]);
        self.push(r, c, data, Op::SoftmaxCols(a), ng)
    }

    /// Row-wise layer normalization with `1 x m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, c) {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: (r, c),
                    rhs: self.shape(p),
                });
            }
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(&[a]);
        self.push(r, c, data, Op::Relu(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |p| self.shape(*p).1);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if self.shape(*p).1 != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]),
                    rhs: self.shape(*p),
                });
            }
            rows += self.shape(*p).0;
            data.extend_from_slice(self.value(*p));
        }
        let ng = self.ng(parts);
        Ok(self.push(rows, c, data, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |p| self.shape(*p).0);
        let mut cols = 0;
        for p in parts {
            if self.shape(*p).0 != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]),
                    rhs: self.shape(*p),
                });
            }
            cols += self.shape(*p).1;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for p in parts {
                let pc = self.shape(*p).1;
                data.extend_from_slice(&self.value(*p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(r, cols, data, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "row slice out of range");
        let data = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[a]);
        self.push(len, c, data, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "column slice out of range");
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(r, len, data, Op::SliceCols(a, start), ng)
    }

    /// Rows of `a` in the given order; rows may repeat (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: (r, c),
                    rhs: (i, c),
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(rows.len(), c, data, Op::GatherRows(a, rows.to_vec()), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: (r, c),
                rhs: (targets.len(), 1),
            });
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (j, x)| if x > a.1 { (j, x) } else { a });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, x)| (x - max).exp())
                .sum();
            let log_sum = rest.ln_1p();
            let lse = max + log_sum;
            loss += (max - row[targets[i]]) + log_sum;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = if r == 0 { 0.0 } else { loss / r as f64 };
        let ng = self.ng(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Weighted row scatter-add into a fresh `rows x cols` matrix.
    pub fn scatter(&mut self, rows: usize, cols: usize, sources: Vec<ScatterSource>) -> Result<Var> {
        let mut out = vec![0.0; rows * cols];
        let mut ng = false;
        for s in &sources {
            let (sr, sc) = self.shape(s.src);
            if sc != cols {
                return Err(Error::ShapeMismatch {
                    op: "scatter",
                    lhs: (rows, cols),
                    rhs: (sr, sc),
                });
            }
            let w = match s.weight {
                Weight::Const(w) => w,
                Weight::Elem(v, k) => {
                    ng |= self.nodes[v.0].needs_grad;
                    self.value(v)[k]
                }
            };
            ng |= self.nodes[s.src.0].needs_grad;
            let src = self.value(s.src);
            for &(i, o) in &s.pairs {
                let (i, o) = (i as usize, o as usize);
                debug_assert!(i < sr && o < rows);
                let from = &src[i * cols..(i + 1) * cols];
                for (x, y) in out[o * cols..(o + 1) * cols].iter_mut().zip(from) {
                    *x += w * y;
                }
            }
        }
        Ok(self.push(rows, cols, out, Op::Scatter(sources), ng))
    }

    /// Reverse pass from a `1 x 1` output. Consumes the record.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.shape(output) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.shape(output),
                rhs: (1, 1),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        let len = |v: &Var| self.nodes[v.0].rows * self.nodes[v.0].cols;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = len(&v);
                grads[v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if ng(v) {
                        acc!(*v).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if ng(a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if ng(b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::AddRow(a, row) => {
                if ng(a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if ng(row) {
                    let gr = acc!(*row);
                    for chunk in g.chunks(cols.max(1)) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if ng(a) {
                    let bv = self.value(*b);
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(x, (gy, y))| *x += gy * y);
                }
                if ng(b) {
                    let av = self.value(*a);
                    acc!(*b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(x, (gy, y))| *x += gy * y);
                }
            }
            Op::Scale(a, s) => {
                acc!(*a).iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let p = cols;
                if ng(a) {
                    // dA += dC · Bᵀ
                    let bv = self.value(*b);
                    gemm(n, p, k, g, p, 1, bv, 1, p, acc!(*a), true);
                }
                if ng(b) {
                    // dB += Aᵀ · dC
                    let av = self.value(*a);
                    gemm(k, n, p, av, 1, k, g, p, 1, acc!(*b), true);
                }
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = self.shape(*a);
                let p = cols;
                if ng(a) {
                    // dA += dC · B
                    let bv = self.value(*b);
                    gemm(n, p, k, g, p, 1, bv, k, 1, acc!(*a), true);
                }
                if ng(b) {
                    // dB += dCᵀ · A
                    let av = self.value(*a);
                    gemm(p, n, k, g, 1, p, av, k, 1, acc!(*b), true);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(i));
                let ga = acc!(*a);
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::SoftmaxCols(a) => {
                let y = self.value(Var(i));
                let ga = acc!(*a);
                for j in 0..cols {
                    let dot: f64 = (0..rows).map(|r| y[r * cols + j] * g[r * cols + j]).sum();
                    for r in 0..rows {
                        let k = r * cols + j;
                        ga[k] += y[k] * (g[k] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                if ng(gain) {
                    let gg = acc!(*gain);
                    for r in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                }
                if ng(bias) {
                    let gb = acc!(*bias);
                    for r in 0..rows {
                        for j in 0..cols {
                            gb[j] += g[r * cols + j];
                        }
                    }
                }
                if ng(x) {
                    let gx = acc!(*x);
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            let d = g[r * cols + j] * gv[j];
                            dxhat[j] = d;
                            m1 += d;
                            m2 += d * xhat[r * cols + j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..cols {
                            gx[r * cols + j] +=
                                rstd[r] * (dxhat[j] - m1 - xhat[r * cols + j] * m2);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(av))
                    .for_each(|(x, (gy, v))| {
                        if *v > 0.0 {
                            *x += gy
                        }
                    });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(p);
                    if ng(p) {
                        acc!(*p)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = self.shape(*p).1;
                    if ng(p) {
                        let gp = acc!(*p);
                        for r in 0..rows {
                            for j in 0..pc {
                                gp[r * pc + j] += g[r * cols + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceRows(a, start) => {
                let ga = acc!(*a);
                ga[start * cols..(start + rows) * cols]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, y)| *x += y);
            }
            Op::SliceCols(a, start) => {
                let ac = self.shape(*a).1;
                let ga = acc!(*a);
                for r in 0..rows {
                    for j in 0..cols {
                        ga[r * ac + start + j] += g[r * cols + j];
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let ga = acc!(*a);
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..cols {
                        ga[src * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::SumAll(a) => {
                let s = g[0];
                acc!(*a).iter_mut().for_each(|x| *x += s);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = self.shape(*logits);
                let scale = g[0] / r.max(1) as f64;
                let gl = acc!(*logits);
                for i in 0..r {
                    for j in 0..c {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Scatter(sources) => {
                for s in sources {
                    let w = match s.weight {
                        Weight::Const(w) => w,
                        Weight::Elem(v, k) => self.value(v)[k],
                    };
                    if ng(&s.src) && w != 0.0 {
                        let gs = acc!(s.src);
                        for &(si, o) in &s.pairs {
                            let (si, o) = (si as usize, o as usize);
                            for j in 0..cols {
                                gs[si * cols + j] += w * g[o * cols + j];
                            }
                        }
                    }
                    if let Weight::Elem(v, k) = s.weight {
                        if ng(&v) {
                            let src = self.value(s.src);
                            let mut dw = 0.0;
                            for &(si, o) in &s.pairs {
                                let (si, o) = (si as usize, o as usize);
                                for j in 0..cols {
                                    dw += src[si * cols + j] * g[o * cols + j];
                                }
                            }
                            acc!(v)[k] += dw;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient with respect to a graph value, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// Adds parameter gradients into a per-parameter accumulator.
    pub fn accumulate_params(&self, store: &ParamStore, into: &mut [Vec<f64>]) {
        for (id, p) in store.iter() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = self.param(id) {
                into[id.0].iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
    }
}
