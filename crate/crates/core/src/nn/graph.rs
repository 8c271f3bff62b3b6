//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the information needed to push gradients back to its inputs. Calling
//! [`Graph::backward`] walks the tape once in reverse.

use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use super::matrix::{gemm, Matrix};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous row groups, e.g. the points of each frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &l in lengths {
            offsets.push(offsets.last().copied().unwrap_or(0) + l);
        }
        Segments { offsets }
    }

    pub fn uniform(count: usize, length: usize) -> Self {
        Segments::from_lengths(&vec![length; count])
    }

    pub fn single(length: usize) -> Self {
        Segments::from_lengths(&[length])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn len_of(&self, g: usize) -> usize {
        self.offsets[g + 1] - self.offsets[g]
    }

    pub fn iter(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }
}

/// Running-statistics update requested by a train-mode normalization layer.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
    pub momentum: f64,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SegmentBroadcast {
        x: Var,
        segments: Rc<Segments>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ColAffine {
        x: Var,
        scale: Vec<f64>,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    /// Scalar-valued function with its gradient frozen at forward time.
    ScalarFn {
        x: Var,
        grad: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
}

fn check(context: &str, ok: bool, detail: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::mismatch(context, detail()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn push_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        check("linear", xs.1 == ws.0, || {
            format!("input {xs:?} vs weight {ws:?}")
        })?;
        let mut out = Matrix::zeros(xs.0, ws.1);
        if let Some(b) = b {
            let bs = self.shape(b);
            check("linear", bs == (1, ws.1), || {
                format!("bias {bs:?} vs weight {ws:?}")
            })?;
            let bias = self.value(b).row(0).to_vec();
            for r in 0..xs.0 {
                out.row_mut(r).copy_from_slice(&bias);
            }
            gemm(
                1.0,
                self.value(x),
                false,
                self.value(w),
                false,
                1.0,
                &mut out,
            );
        } else {
            gemm(
                1.0,
                self.value(x),
                false,
                self.value(w),
                false,
                0.0,
                &mut out,
            );
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check("matmul", sa.1 == sb.0, || format!("{sa:?} x {sb:?}"))?;
        let out = self.value(a).matmul(self.value(b));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check("matmul_nt", sa.1 == sb.1, || format!("{sa:?} x {sb:?}^T"))?;
        let mut out = Matrix::zeros(sa.0, sb.0);
        gemm(
            1.0,
            self.value(a),
            false,
            self.value(b),
            true,
            0.0,
            &mut out,
        );
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(name, sa == sb, || format!("{sa:?} vs {sb:?}"))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(sa.0, sa.1, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    fn row_op(
        &mut self,
        a: Var,
        row: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        check(name, sr == (1, sa.1), || format!("row {sr:?} vs {sa:?}"))?;
        let mut out = self.value(a).clone();
        let rv = self.value(row).row(0).to_vec();
        for r in 0..sa.0 {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv) {
                *o = f(*o, b);
            }
        }
        Ok(out)
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_op(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_op(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            let s = self.shape(p);
            check("concat_cols", s.0 == rows, || {
                format!("{} rows vs {rows}", s.0)
            })?;
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            let s = self.shape(p);
            check("concat_rows", s.1 == cols, || {
                format!("{} columns vs {cols}", s.1)
            })?;
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Matrix::from_vec(data.len() / cols.max(1), cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `range` of `x`.
    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let (n, c) = self.shape(x);
        check(
            "slice_cols",
            range.start < range.end && range.end <= c,
            || format!("columns {range:?} of {c}"),
        )?;
        let xv = self.value(x);
        let mut out = Matrix::zeros(n, range.len());
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&xv.row(r)[range.clone()]);
        }
        Ok(self.push(
            out,
            Op::SliceCols {
                x,
                start: range.start,
            },
        ))
    }

    /// Column-wise max over each row segment; yields one row per segment.
    pub fn segment_max(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let (n, c) = self.shape(x);
        check("segment_max", segments.total() == n, || {
            format!("{} segment rows vs {n}", segments.total())
        })?;
        let xv = self.value(x);
        let mut out = Matrix::zeros(segments.count(), c);
        let mut argmax = vec![0usize; segments.count() * c];
        for (g, range) in segments.iter().enumerate() {
            if range.is_empty() {
                return Err(Error::Empty("pooling segment"));
            }
            let first = range.start;
            out.row_mut(g).copy_from_slice(xv.row(first));
            argmax[g * c..(g + 1) * c].fill(first);
            for r in range.clone().skip(1) {
                let row = xv.row(r);
                for k in 0..c {
                    // strict `>` keeps the earliest row on ties
                    if row[k] > out[(g, k)] {
                        out[(g, k)] = row[k];
                        argmax[g * c + k] = r;
                    }
                }
            }
        }
        Ok(self.push(out, Op::SegmentMax { x, argmax }))
    }

    /// Repeats row `g` of `x` for every row of segment `g`.
    pub fn segment_broadcast(&mut self, x: Var, segments: &Segments) -> Result<Var> {
        let (g, c) = self.shape(x);
        check("segment_broadcast", g == segments.count(), || {
            format!("{g} rows vs {} segments", segments.count())
        })?;
        let xv = self.value(x);
        let mut out = Matrix::zeros(segments.total(), c);
        for (s, range) in segments.iter().enumerate() {
            for r in range {
                out.row_mut(r).copy_from_slice(xv.row(s));
            }
        }
        Ok(self.push(
            out,
            Op::SegmentBroadcast {
                x,
                segments: Rc::new(segments.clone()),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::mismatch("gather_rows", format!("row {bad} of {n}")));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(idx.len(), c);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, c) = self.shape(x);
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Per-column standardization over all rows using batch statistics.
    /// Returns the normalized node with the biased batch mean and variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c) = self.shape(x);
        if n < 2 {
            return Err(Error::BatchTooSmall);
        }
        let xv = self.value(x);
        let mean: Vec<f64> = xv.column_sums().iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; c];
        for r in 0..n {
            for (k, v) in xv.row(r).iter().enumerate() {
                var[k] += (v - mean[k]).powi(2);
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xv.clone();
        for r in 0..n {
            for (k, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[k]) * inv_std[k];
            }
        }
        let node = self.push(out, Op::BatchNorm { x, inv_std });
        Ok((node, mean, var))
    }

    /// `x * scale + shift` per column with constant coefficients.
    pub fn col_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let (n, c) = self.shape(x);
        check("col_affine", scale.len() == c && shift.len() == c, || {
            format!("{} coefficients vs {c} columns", scale.len())
        })?;
        let mut out = self.value(x).clone();
        for r in 0..n {
            for (k, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * scale[k] + shift[k];
            }
        }
        Ok(self.push(
            out,
            Op::ColAffine {
                x,
                scale: scale.to_vec(),
            },
        ))
    }

    /// Row-wise softmax. With a mask, row `r` only covers the column range
    /// `mask[r]` and every other entry is exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[Range<usize>]>) -> Result<Var> {
        let (n, c) = self.shape(x);
        if let Some(m) = mask {
            check(
                "softmax_rows",
                m.len() == n && m.iter().all(|r| r.end <= c),
                || format!("{} mask rows vs {n}x{c}", m.len()),
            )?;
        }
        let mut out = self.value(x).clone();
        for r in 0..n {
            let range = mask.map_or(0..c, |m| m[r].clone());
            if range.is_empty() {
                return Err(Error::Empty("softmax row"));
            }
            let row = out.row_mut(r);
            let max = row[range.clone()]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in &mut row[range.clone()] {
                *v = (*v - max).exp();
                total += *v;
            }
            for (k, v) in row.iter_mut().enumerate() {
                if range.contains(&k) {
                    *v /= total;
                } else {
                    *v = 0.0;
                }
            }
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len().max(1) as f64;
        self.push(Matrix::scalar(s), Op::Mean(x))
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to `x`.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Matrix) -> Result<Var> {
        let s = self.shape(x);
        check("scalar_fn", grad.shape() == s, || {
            format!("gradient {:?} vs input {s:?}", grad.shape())
        })?;
        Ok(self.push(Matrix::scalar(value), Op::ScalarFn { x, grad }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        check("backward", s == (1, 1), || format!("loss has shape {s:?}"))?;
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut params = HashMap::new();
        for (&id, &v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                params.insert(id, g);
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let mut dx = Matrix::zeros(val(*x).rows(), val(*x).cols());
                gemm(1.0, dy, false, val(*w), true, 0.0, &mut dx);
                accumulate(grads, *x, dx);
                let mut dw = Matrix::zeros(val(*w).rows(), val(*w).cols());
                gemm(1.0, val(*x), true, dy, false, 0.0, &mut dw);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let db = Matrix::from_vec(1, dy.cols(), dy.column_sums()).expect("bias grad");
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMul(a, b) => {
                let mut da = Matrix::zeros(val(*a).rows(), val(*a).cols());
                gemm(1.0, dy, false, val(*b), true, 0.0, &mut da);
                let mut db = Matrix::zeros(val(*b).rows(), val(*b).cols());
                gemm(1.0, val(*a), true, dy, false, 0.0, &mut db);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let mut da = Matrix::zeros(val(*a).rows(), val(*a).cols());
                gemm(1.0, dy, false, val(*b), false, 0.0, &mut da);
                let mut db = Matrix::zeros(val(*b).rows(), val(*b).cols());
                gemm(1.0, dy, true, val(*a), false, 0.0, &mut db);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.clone());
                accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, dy.clone());
                accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, elementwise(dy, val(*b), |g, y| g * y));
                accumulate(grads, *b, elementwise(dy, val(*a), |g, x| g * x));
            }
            Op::Scale(a, s) => accumulate(grads, *a, dy.map(|v| v * s)),
            Op::AddRow(a, row) => {
                accumulate(grads, *a, dy.clone());
                let dr = Matrix::from_vec(1, dy.cols(), dy.column_sums()).expect("row grad");
                accumulate(grads, *row, dr);
            }
            Op::MulRow(a, row) => {
                let rv = val(*row).row(0);
                let av = val(*a);
                let mut da = dy.clone();
                let mut dr = vec![0.0; dy.cols()];
                for r in 0..dy.rows() {
                    let (g, x) = (dy.row(r), av.row(r));
                    for (k, d) in da.row_mut(r).iter_mut().enumerate() {
                        *d = g[k] * rv[k];
                        dr[k] += g[k] * x[k];
                    }
                }
                accumulate(grads, *a, da);
                accumulate(
                    grads,
                    *row,
                    Matrix::from_vec(1, dr.len(), dr).expect("row grad"),
                );
            }
            Op::Relu(a) => accumulate(
                grads,
                *a,
                elementwise(dy, &node.value, |g, y| if y > 0.0 { g } else { 0.0 }),
            ),
            Op::Sigmoid(a) => accumulate(
                grads,
                *a,
                elementwise(dy, &node.value, |g, y| g * y * (1.0 - y)),
            ),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    let (n, c) = val(p).shape();
                    let dp = Matrix::from_vec(n, c, dy.data()[offset..offset + len].to_vec())
                        .expect("sized");
                    offset += len;
                    accumulate(grads, p, dp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (n, c) = val(p).shape();
                    let mut dp = Matrix::zeros(n, c);
                    for r in 0..n {
                        dp.row_mut(r).copy_from_slice(&dy.row(r)[c0..c0 + c]);
                    }
                    c0 += c;
                    accumulate(grads, p, dp);
                }
            }
            Op::SliceCols { x, start } => {
                let (n, c) = val(*x).shape();
                let mut dx = Matrix::zeros(n, c);
                let w = dy.cols();
                for r in 0..n {
                    dx.row_mut(r)[*start..start + w].copy_from_slice(dy.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::SegmentMax { x, argmax } => {
                let (n, c) = val(*x).shape();
                let mut dx = Matrix::zeros(n, c);
                for g in 0..dy.rows() {
                    for k in 0..c {
                        dx[(argmax[g * c + k], k)] += dy[(g, k)];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SegmentBroadcast { x, segments } => {
                let c = dy.cols();
                let mut dx = Matrix::zeros(segments.count(), c);
                for (g, range) in segments.iter().enumerate() {
                    for r in range {
                        for (d, v) in dx.row_mut(g).iter_mut().zip(dy.row(r)) {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let (n, c) = val(*x).shape();
                let mut dx = Matrix::zeros(n, c);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, v) in dx.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let c = y.cols() as f64;
                let mut dx = dy.clone();
                for r in 0..y.rows() {
                    let (g, yr) = (dy.row(r), y.row(r));
                    let sg: f64 = g.iter().sum();
                    let sgy: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (k, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = inv_std[r] / c * (c * g[k] - sg - yr[k] * sgy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::BatchNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.rows() as f64;
                let sg = dy.column_sums();
                let mut sgy = vec![0.0; y.cols()];
                for r in 0..y.rows() {
                    for (k, (g, v)) in dy.row(r).iter().zip(y.row(r)).enumerate() {
                        sgy[k] += g * v;
                    }
                }
                let mut dx = dy.clone();
                for r in 0..y.rows() {
                    let (g, yr) = (dy.row(r), y.row(r));
                    for (k, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = inv_std[k] / n * (n * g[k] - sg[k] - yr[k] * sgy[k]);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ColAffine { x, scale } => {
                let mut dx = dy.clone();
                for r in 0..dx.rows() {
                    for (d, s) in dx.row_mut(r).iter_mut().zip(scale) {
                        *d *= s;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                // masked entries have y = 0 and therefore receive zero gradient
                let y = &node.value;
                let mut dx = dy.clone();
                for r in 0..y.rows() {
                    let (g, yr) = (dy.row(r), y.row(r));
                    let dot: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (k, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[k] * (g[k] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let (n, c) = val(*x).shape();
                accumulate(grads, *x, Matrix::filled(n, c, dy.item()));
            }
            Op::Mean(x) => {
                let (n, c) = val(*x).shape();
                accumulate(
                    grads,
                    *x,
                    Matrix::filled(n, c, dy.item() / (n * c).max(1) as f64),
                );
            }
            Op::ScalarFn { x, grad } => {
                let s = dy.item();
                accumulate(grads, *x, grad.map(|v| v * s));
            }
        }
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Matrix>,
}

impl Gradients {
    /// Gradient for a non-parameter node, if it influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Matrix> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_mask_and_sums() {
        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [0.5, -1.0, 2.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x, Some(&[0..1, 1..4])).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(v[(1, 0)], 0.0);
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn segment_max_picks_first_on_ties() {
        let mut g = Graph::new();
        let x = g.input(Matrix::from_rows(&[[1.0, 5.0], [1.0, 2.0], [0.0, 7.0]]).unwrap());
        let m = g.segment_max(x, &Segments::from_lengths(&[2, 1])).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 5.0, 0.0, 7.0]);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.wrt(x).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn batch_norm_needs_two_rows() {
        let mut g = Graph::new();
        let x = g.input(Matrix::zeros(1, 3));
        assert_eq!(
            g.batch_norm(x, 1e-5).unwrap_err().to_string(),
            "batch too small for CBN"
        );
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(Matrix::zeros(2, 3));
        let b = g.input(Matrix::zeros(2, 2));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }
}
